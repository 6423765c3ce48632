//! Shared helpers for integration tests.

#![allow(dead_code)] // each test target compiles this module independently

use candle_core::Tensor;
use d2l::distill::{kl_loss, TopKTargetRecord};
use d2l::hypernet::{
    chunk_context, generate_adapter, harvest_chunk_activations, ActivationSource,
    GenerationMode, HypernetConfig, HypernetVars, OutputMode,
};
use d2l::target_lm::{forward_with_activations, init_lm, LMConfig, MaskSpec, TinyLMParams};
use d2l::tensor_util::{device, randn_tensor, seeded_rng, to_f32_vec};
use d2l::{prompts, vocab, Result};
use rand::Rng;

/// Smallest model pair that still exercises every code path: a 2-layer,
/// width-8 target with rank-2 adapters from a 2-block hypernet encoder.
pub fn micro_lm_config() -> LMConfig {
    LMConfig {
        vocab_size: vocab::vocab_size(),
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_head: 4,
        d_mlp: 16,
        max_seq_len: 512,
        rope_base: 10000.0,
        norm_eps: 1e-6,
        lora_target_blocks: vec![0, 1],
    }
}

pub fn micro_hypernet_config() -> HypernetConfig {
    HypernetConfig {
        d_latent: 8,
        n_latents: 2,
        n_xattn_blocks: 2,
        n_attn_heads: 2,
        input_dim: 8,
        output_mode: OutputMode::Lora,
        max_chunk_tokens: 256,
        min_chunk: 25,
        activation_source: ActivationSource::SingleLayer(1),
        alpha_per_rank: true,
        latent_self_attention: true,
    }
}

/// One reading comprehension sample against a fixed context, with the
/// teacher's top-k targets recorded for the response positions.
pub struct MicroSample {
    pub ctx_tokens: Vec<u32>,
    pub student_tokens: Vec<u32>,
    pub predict_from: usize,
    pub targets: TopKTargetRecord,
}

/// Sharp random targets rather than the teacher's own: an untrained micro
/// model already matches itself, which would put the KL at a critical point
/// where every gradient vanishes below the finite-difference noise floor.
/// Random targets place the loss on a generic slope.
pub fn micro_sample(_lm: &TinyLMParams, rng: &mut impl Rng) -> Result<MicroSample> {
    let context = "the bird finds the stone. the special magic number is 4271. the cat sees the tree.";
    let query = "what is the special magic number? reply with only the number.";
    let mut response = vocab::encode("4271");
    response.push(vocab::EOS);
    let prompt = prompts::student_prompt_tokens(query);
    let mut student_tokens = prompt.clone();
    student_tokens.extend_from_slice(&response);

    let k = 16;
    let v = vocab::vocab_size() as u32;
    let rows = (0..response.len())
        .map(|_| {
            let mut ids: Vec<u32> = (0..v).collect();
            for i in (1..ids.len()).rev() {
                ids.swap(i, rng.random_range(0..=i));
            }
            let mut row: Vec<(u32, f32)> = ids[..k]
                .iter()
                .map(|&id| (id, 2.0 * randn(rng) as f32))
                .collect();
            row.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            row
        })
        .collect();
    let targets = TopKTargetRecord { rows };
    targets.validate()?;
    Ok(MicroSample {
        ctx_tokens: vocab::encode(context),
        student_tokens,
        predict_from: prompt.len() - 1,
        targets,
    })
}

fn randn(rng: &mut impl Rng) -> f64 {
    // Box–Muller; only used to spread synthetic target logits.
    let u1: f64 = rng.random_range(1e-9..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// The differentiable scalar the meta-trainer of the LoRA pipeline descends:
/// encode the context, emit an adapter, run the adapted student on the
/// context-free prompt, take the truncated KL against the teacher targets.
pub fn micro_meta_loss(
    hyper: &HypernetVars,
    lm: &TinyLMParams,
    sample: &MicroSample,
) -> Result<Tensor> {
    let params = hyper.params()?;
    let plan = chunk_context(
        sample.ctx_tokens.len(),
        hyper.config.max_chunk_tokens,
        hyper.config.min_chunk,
    )?;
    let stacks = harvest_chunk_activations(lm, &sample.ctx_tokens, &plan)?;
    let adapter = generate_adapter(&params, &stacks, GenerationMode::Batched)?;
    let (logits, _) = forward_with_activations(
        lm,
        &sample.student_tokens,
        &MaskSpec::causal(sample.student_tokens.len()),
        Some(&adapter),
        None,
    )?;
    let rows = logits.narrow(0, sample.predict_from, sample.targets.len())?;
    kl_loss(&sample.targets, &rows)
}

pub struct GradCheckEntry {
    pub var_name: String,
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

/// Compare analytic gradients of the meta loss against central finite
/// differences for `n_checks` randomly chosen hypernet parameters.
///
/// The check runs at a generic point: every variable is nudged by gaussian
/// noise first so no head sits at a symmetric initialization. Candidates
/// whose analytic gradient is below `floor` are redrawn — the forward stack
/// computes in f32, so finite differences cannot resolve slopes under the
/// rounding noise of the two loss evaluations, and comparing there is
/// vacuous. The step is 1e-3 scaled by `max(1, |θ|)` and the realized f32
/// step is used as the divisor.
pub fn micro_grad_check(seed: u64, n_checks: usize, floor: f64) -> Result<GradCheckReport> {
    let lm_config = micro_lm_config();
    let lm = init_lm(&lm_config, seed)?;
    let hyper = HypernetVars::init(&micro_hypernet_config(), &lm_config, seed ^ 0x5EED)?;
    let mut rng = seeded_rng(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));

    // Move well off the freshly initialized point: at the 0.02-scale init
    // the adapter barely moves the logits and every gradient sits below what
    // two f32 loss evaluations can resolve, so the comparison would be
    // noise against noise.
    for var in hyper.all_vars() {
        let noise = randn_tensor(&mut rng, var.dims(), 0.0, 0.3)?;
        var.set(&(var.as_tensor() + noise)?)?;
    }

    let sample = micro_sample(&lm, &mut rng)?;

    let loss = micro_meta_loss(&hyper, &lm, &sample)?;
    let grads = loss.backward()?;
    let named = hyper.named_vars();
    let grad_vecs: Vec<Option<Vec<f32>>> = named
        .iter()
        .map(|(_, v)| grads.get(v.as_tensor()).map(|g| to_f32_vec(g).unwrap()))
        .collect();

    // Uniform over the flattened parameter vector, restricted to entries the
    // finite difference can actually measure.
    let sizes: Vec<usize> = named.iter().map(|(_, v)| v.elem_count()).collect();
    let total: usize = sizes.iter().sum();
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    let mut attempts = 0;
    while chosen.len() < n_checks {
        attempts += 1;
        assert!(attempts < 200_000, "could not find {n_checks} parameters above the gradient floor");
        let mut g = rng.random_range(0..total);
        let mut vi = 0;
        while g >= sizes[vi] {
            g -= sizes[vi];
            vi += 1;
        }
        if chosen.contains(&(vi, g)) {
            continue;
        }
        let grad = grad_vecs[vi].as_ref().map(|v| v[g] as f64).unwrap_or(0.0);
        if grad.abs() < floor {
            continue;
        }
        chosen.push((vi, g));
    }

    let mut entries = Vec::with_capacity(n_checks);
    for (vi, idx) in chosen {
        let (name, var) = &named[vi];
        let analytic = grad_vecs[vi].as_ref().unwrap()[idx] as f64;
        let base = to_f32_vec(var.as_tensor())?;
        let theta = base[idx] as f64;
        let h = 1e-3 * theta.abs().max(1.0);
        let up = (theta + h) as f32;
        let dn = (theta - h) as f32;

        let eval_at = |value: f32| -> Result<f64> {
            let mut data = base.clone();
            data[idx] = value;
            var.set(&Tensor::from_vec(data, var.dims(), &device())?)?;
            Ok(micro_meta_loss(&hyper, &lm, &sample)?.to_scalar::<f64>()?)
        };
        let loss_up = eval_at(up)?;
        let loss_dn = eval_at(dn)?;
        eval_at(base[idx])?; // restore the exact original bits

        let numeric = (loss_up - loss_dn) / ((up - dn) as f64);
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        entries.push(GradCheckEntry {
            var_name: name.clone(),
            flat_index: idx,
            analytic,
            numeric,
            rel_err,
        });
    }
    let max_rel_err = entries.iter().fold(0.0f64, |m, e| m.max(e.rel_err));
    Ok(GradCheckReport { entries, max_rel_err })
}
