//! The frozen target language model.
//!
//! A small decoder-only transformer that plays both roles in distillation:
//! teacher (context in the prompt) and student (adapter applied, no context).
//! It exposes per-layer token activations so the hypernetwork can read them,
//! accepts LoRA deltas on the MLP down-projection of each block, and accepts
//! generated prefix key/value entries in every attention layer.
//!
//! Architecture: pre-norm blocks with RMSNorm, rotary position embeddings
//! (split-half layout), per-head query/key normalization, a SwiGLU MLP, and a
//! tied output head. All math runs in f32 on CPU; attention masking uses an
//! additive bias of 0 or −1e9, which underflows to an exactly-zero attention
//! weight so masking and causality invariants hold bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Tensor, Var, D};
// `candle_nn::ops::softmax_last_dim` is a fused custom op with no backward
// pass; attention must use the composable `softmax` so gradients reach the
// query/key projections.
use candle_nn::ops::softmax;
use candle_nn::Optimizer;
use serde::{Deserialize, Serialize};

use crate::adapters::{LoraAdapter, PrefixKV};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{D2lError, Result};
use crate::tensor_util::{device, randn_tensor, seeded_rng};
use crate::vocab;

/// Attention bias assigned to disallowed (query, key) pairs. `exp(−1e9 − max)`
/// underflows to exactly 0.0 in f32, so masked keys contribute nothing.
const MASK_BIAS: f32 = -1e9;

/// Lower bound on the context window: twice the benchmark's maximum training
/// context length, so the teacher sees full in-context prompts with headroom.
const MIN_SEQ_LEN: usize = 512;

/// Model hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    /// Blocks whose MLP down-projection receives a LoRA delta.
    pub lora_target_blocks: Vec<usize>,
}

impl LMConfig {
    /// The desk-scale default: small enough for CPU runs, deep enough to
    /// exercise per-layer adapter heads.
    pub fn desk_default() -> Self {
        Self {
            vocab_size: vocab::vocab_size(),
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_head: 16,
            d_mlp: 256,
            max_seq_len: 2048,
            rope_base: 10000.0,
            norm_eps: 1e-6,
            lora_target_blocks: (0..4).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(D2lError::InvalidDimension(format!("{name} must be ≥ 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(D2lError::InvalidDimension(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(D2lError::InvalidDimension(format!(
                "d_model {} != n_heads {} × d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(D2lError::InvalidDimension(
                "d_head must be even for rotary embeddings".into(),
            ));
        }
        if self.max_seq_len < MIN_SEQ_LEN {
            return Err(D2lError::InvalidDimension(format!(
                "max_seq_len {} below minimum {MIN_SEQ_LEN} (twice the benchmark training maximum)",
                self.max_seq_len
            )));
        }
        if !(self.rope_base > 0.0) || !(self.norm_eps > 0.0) {
            return Err(D2lError::InvalidDimension(
                "rope_base and norm_eps must be positive".into(),
            ));
        }
        for &b in &self.lora_target_blocks {
            if b >= self.n_layers {
                return Err(D2lError::InvalidDimension(format!(
                    "lora target block {b} out of range (n_layers {})",
                    self.n_layers
                )));
            }
        }
        Ok(())
    }

    /// Name of the adapted weight inside block `i`.
    pub fn target_layer_name(block: usize) -> String {
        format!("block{block}.mlp.down")
    }

    /// `(name, d_in, d_out)` of every adapted layer, in block order. The
    /// down-projection maps d_mlp → d_model.
    pub fn target_layer_shapes(&self) -> Vec<(String, usize, usize)> {
        self.lora_target_blocks
            .iter()
            .map(|&b| (Self::target_layer_name(b), self.d_mlp, self.d_model))
            .collect()
    }
}

/// Per-block weights, math orientation `[d_out, d_in]`.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub attn_norm: Tensor, // [D]
    pub wq: Tensor,        // [D, D]
    pub wk: Tensor,        // [D, D]
    pub wv: Tensor,        // [D, D]
    pub wo: Tensor,        // [D, D]
    pub q_norm: Tensor,    // [d_head]
    pub k_norm: Tensor,    // [d_head]
    pub mlp_norm: Tensor,  // [D]
    pub w_gate: Tensor,    // [d_mlp, D]
    pub w_up: Tensor,      // [d_mlp, D]
    pub w_down: Tensor,    // [D, d_mlp]
}

/// Full parameter set of the tiny LM plus derived rotary tables.
#[derive(Debug, Clone)]
pub struct TinyLMParams {
    pub config: LMConfig,
    pub embed: Tensor, // [vocab, D]; also the tied output head
    pub blocks: Vec<BlockWeights>,
    pub final_norm: Tensor, // [D]
    rope_cos: Tensor, // [max_seq_len, d_head/2]
    rope_sin: Tensor, // [max_seq_len, d_head/2]
}

const BLOCK_TENSORS: [&str; 11] = [
    "attn_norm", "wq", "wk", "wv", "wo", "q_norm", "k_norm", "mlp_norm", "w_gate", "w_up",
    "w_down",
];

fn tensor_names(config: &LMConfig) -> Vec<String> {
    let mut names = vec!["embed".to_string(), "final_norm".to_string()];
    for l in 0..config.n_layers {
        for t in BLOCK_TENSORS {
            names.push(format!("block{l}.{t}"));
        }
    }
    names
}

fn expected_shape(config: &LMConfig, name: &str) -> Vec<usize> {
    let (d, dh, dm) = (config.d_model, config.d_head, config.d_mlp);
    match name.rsplit('.').next().unwrap_or(name) {
        "embed" => vec![config.vocab_size, d],
        "final_norm" | "attn_norm" | "mlp_norm" => vec![d],
        "wq" | "wk" | "wv" | "wo" => vec![d, d],
        "q_norm" | "k_norm" => vec![dh],
        "w_gate" | "w_up" => vec![dm, d],
        "w_down" => vec![d, dm],
        _ => vec![],
    }
}

fn rope_tables(config: &LMConfig) -> Result<(Tensor, Tensor)> {
    let half = config.d_head / 2;
    let mut cos = Vec::with_capacity(config.max_seq_len * half);
    let mut sin = Vec::with_capacity(config.max_seq_len * half);
    for p in 0..config.max_seq_len {
        for i in 0..half {
            let freq = config.rope_base.powf(-2.0 * i as f64 / config.d_head as f64);
            let angle = p as f64 * freq;
            cos.push(angle.cos() as f32);
            sin.push(angle.sin() as f32);
        }
    }
    Ok((
        Tensor::from_vec(cos, (config.max_seq_len, half), &device())?,
        Tensor::from_vec(sin, (config.max_seq_len, half), &device())?,
    ))
}

impl TinyLMParams {
    /// Assemble typed parameters from a named tensor map. The map must cover
    /// exactly the expected tensor set with the expected shapes.
    pub fn from_named(config: LMConfig, mut map: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut take = |name: &str| -> Result<Tensor> {
            let t = map
                .remove(name)
                .ok_or_else(|| D2lError::Format(format!("missing model tensor {name}")))?;
            let want = expected_shape(&config, name);
            if t.dims() != want.as_slice() {
                return Err(D2lError::ShapeMismatch(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    want
                )));
            }
            Ok(t)
        };
        let embed = take("embed")?;
        let final_norm = take("final_norm")?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            blocks.push(BlockWeights {
                attn_norm: take(&format!("block{l}.attn_norm"))?,
                wq: take(&format!("block{l}.wq"))?,
                wk: take(&format!("block{l}.wk"))?,
                wv: take(&format!("block{l}.wv"))?,
                wo: take(&format!("block{l}.wo"))?,
                q_norm: take(&format!("block{l}.q_norm"))?,
                k_norm: take(&format!("block{l}.k_norm"))?,
                mlp_norm: take(&format!("block{l}.mlp_norm"))?,
                w_gate: take(&format!("block{l}.w_gate"))?,
                w_up: take(&format!("block{l}.w_up"))?,
                w_down: take(&format!("block{l}.w_down"))?,
            });
        }
        if !map.is_empty() {
            return Err(D2lError::Format(format!(
                "unexpected model tensors: {:?}",
                map.keys().collect::<Vec<_>>()
            )));
        }
        let (rope_cos, rope_sin) = rope_tables(&config)?;
        Ok(Self { config, embed, blocks, final_norm, rope_cos, rope_sin })
    }

    /// All learned tensors by name (rotary tables are derived, not stored).
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("embed".to_string(), self.embed.clone()),
            ("final_norm".to_string(), self.final_norm.clone()),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (t, tensor) in [
                ("attn_norm", &b.attn_norm),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("q_norm", &b.q_norm),
                ("k_norm", &b.k_norm),
                ("mlp_norm", &b.mlp_norm),
                ("w_gate", &b.w_gate),
                ("w_up", &b.w_up),
                ("w_down", &b.w_down),
            ] {
                out.push((format!("block{l}.{t}"), tensor.clone()));
            }
        }
        out
    }

    /// SHA-256 over all parameter tensors; used to prove the base stays
    /// frozen through meta-training.
    pub fn checksum(&self) -> Result<String> {
        let named = self.named_tensors();
        crate::tensor_util::params_checksum(named.iter().map(|(n, t)| (n.as_str(), t)))
    }
}

fn init_weight_map(config: &LMConfig, seed: u64) -> Result<BTreeMap<String, Tensor>> {
    config.validate()?;
    let mut rng = seeded_rng(seed);
    let mut map = BTreeMap::new();
    // Residual-branch outputs are scaled down by depth, GPT-2 style.
    let base_std = 0.02;
    let resid_std = base_std / ((2 * config.n_layers) as f64).sqrt();
    for name in tensor_names(config) {
        let shape = expected_shape(config, &name);
        let leaf = name.rsplit('.').next().unwrap_or(&name);
        let t = match leaf {
            "final_norm" | "attn_norm" | "mlp_norm" | "q_norm" | "k_norm" => {
                crate::tensor_util::const_tensor(1.0, &shape)?
            }
            "wo" | "w_down" => randn_tensor(&mut rng, &shape, 0.0, resid_std)?,
            _ => randn_tensor(&mut rng, &shape, 0.0, base_std)?,
        };
        map.insert(name, t);
    }
    Ok(map)
}

/// Deterministically initialize a model: same `(config, seed)` yields
/// bit-identical parameters.
pub fn init_lm(config: &LMConfig, seed: u64) -> Result<TinyLMParams> {
    TinyLMParams::from_named(config.clone(), init_weight_map(config, seed)?)
}

/// Trainable twin of [`TinyLMParams`]: the same tensor set held as
/// [`Var`]s so an optimizer can update them during pretraining.
pub struct TinyLMVars {
    pub config: LMConfig,
    vars: BTreeMap<String, Var>,
}

impl TinyLMVars {
    pub fn init(config: &LMConfig, seed: u64) -> Result<Self> {
        let map = init_weight_map(config, seed)?;
        let mut vars = BTreeMap::new();
        for (name, t) in map {
            vars.insert(name, Var::from_tensor(&t)?);
        }
        Ok(Self { config: config.clone(), vars })
    }

    /// Gradient-tracked parameter views; forwards through these record a
    /// graph that backpropagates into the underlying `Var`s.
    pub fn params(&self) -> Result<TinyLMParams> {
        let map = self
            .vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        TinyLMParams::from_named(self.config.clone(), map)
    }

    /// Detached copies — the frozen model used everywhere downstream.
    pub fn freeze(&self) -> Result<TinyLMParams> {
        let map = self
            .vars
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().detach().copy()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        TinyLMParams::from_named(self.config.clone(), map)
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }
}

/// Attention layout for one token buffer: packed segments, per-position
/// validity, and per-position rotary positions (positions reset at segment
/// starts so packed sequences behave exactly like separate forwards).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    /// `(start, len)` of each segment, non-overlapping and in order.
    pub segments: Vec<(usize, usize)>,
    /// False marks padding; such positions are excluded from attention and
    /// zeroed in every activation slice.
    pub valid: Vec<bool>,
    /// Rotary position of each token.
    pub positions: Vec<usize>,
}

impl MaskSpec {
    /// Plain causal attention over `n` tokens.
    pub fn causal(n: usize) -> Self {
        Self {
            segments: vec![(0, n)],
            valid: vec![true; n],
            positions: (0..n).collect(),
        }
    }

    /// One real segment of `n_real` tokens followed by padding up to
    /// `n_total`.
    pub fn padded(n_real: usize, n_total: usize) -> Self {
        assert!(n_real <= n_total, "n_real must not exceed n_total");
        let mut valid = vec![true; n_real];
        valid.resize(n_total, false);
        Self {
            segments: vec![(0, n_real)],
            valid,
            positions: (0..n_total).collect(),
        }
    }

    /// Consecutive independent segments (block-diagonal attention) with
    /// per-segment position reset, padded with invalid positions up to
    /// `n_total` if larger than the packed length.
    pub fn packed(segment_lengths: &[usize], n_total: usize) -> Self {
        let packed: usize = segment_lengths.iter().sum();
        assert!(packed <= n_total, "segments exceed n_total");
        let mut segments = Vec::with_capacity(segment_lengths.len());
        let mut positions = Vec::with_capacity(n_total);
        let mut start = 0;
        for &len in segment_lengths {
            segments.push((start, len));
            positions.extend(0..len);
            start += len;
        }
        positions.extend(0..(n_total - packed));
        let mut valid = vec![true; packed];
        valid.resize(n_total, false);
        Self { segments, valid, positions }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.positions.len() != n {
            return Err(D2lError::ShapeMismatch(
                "mask positions length differs from validity length".into(),
            ));
        }
        let mut prev_end = 0;
        for &(start, len) in &self.segments {
            if start < prev_end || start + len > n {
                return Err(D2lError::Validation(
                    "mask segments must be ordered, disjoint, in bounds".into(),
                ));
            }
            prev_end = start + len;
        }
        Ok(())
    }

    /// Additive attention bias over real tokens: 0 where key `k` is visible
    /// to query `q` (same segment, `k ≤ q`, both valid), −1e9 elsewhere.
    pub fn bias_matrix(&self) -> Vec<f32> {
        let n = self.len();
        let mut seg_of = vec![usize::MAX; n];
        for (i, &(s, l)) in self.segments.iter().enumerate() {
            for of in seg_of.iter_mut().skip(s).take(l) {
                *of = i;
            }
        }
        let mut bias = vec![MASK_BIAS; n * n];
        for q in 0..n {
            if seg_of[q] == usize::MAX || !self.valid[q] {
                continue;
            }
            let (s, _) = self.segments[seg_of[q]];
            for k in s..=q {
                if self.valid[k] {
                    bias[q * n + k] = 0.0;
                }
            }
        }
        bias
    }
}

/// Per-layer token activations.
///
/// `layers[0]` is the embedding output Z₀ and `layers[l]` is the residual
/// stream after block `l`, each `[N, D]` (batched internally as `[B, N, D]`).
/// Rows at masked positions are exactly zero.
#[derive(Debug, Clone)]
pub struct ActivationStack {
    pub layers: Vec<Tensor>,
}

impl ActivationStack {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> Result<&Tensor> {
        self.layers.get(l).ok_or_else(|| {
            D2lError::ShapeMismatch(format!(
                "activation layer {l} out of range ({} slices)",
                self.layers.len()
            ))
        })
    }
}

/// Per-block rotary-embedded key/value tensors, `[B, H, S, d_head]`.
#[derive(Debug, Clone)]
pub(crate) struct BlockKV {
    pub k: Tensor,
    pub v: Tensor,
}

pub(crate) struct ForwardOutput {
    pub logits: Tensor,                    // [B, T, vocab]
    pub activations: Option<Vec<Tensor>>,  // L+1 × [B, T, D]
    pub caches: Option<Vec<BlockKV>>,
}

pub(crate) fn rms_norm(x: &Tensor, weight: &Tensor, eps: f64) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
    let x = x.broadcast_div(&ms.affine(1.0, eps)?.sqrt()?)?;
    Ok(x.broadcast_mul(weight)?)
}

/// `x · Wᵀ` where `w` is `[d_out, d_in]` (2-D, broadcast over the batch) or
/// `[B, d_out, d_in]` (per-sample weights).
pub(crate) fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    match w.dims().len() {
        2 => Ok(x.broadcast_matmul(&w.t()?)?),
        3 => Ok(x.matmul(&w.transpose(1, 2)?.contiguous()?)?),
        other => Err(D2lError::ShapeMismatch(format!(
            "linear weight must be 2-D or 3-D, got {other}-D"
        ))),
    }
}

/// Split-half rotary embedding: `x` is `[B, H, T, d_head]`, `cos`/`sin` are
/// `[B, 1, T, d_head/2]` gathered at each token's position.
pub(crate) fn apply_rope(x: &Tensor, cos: &Tensor, sin: &Tensor) -> Result<Tensor> {
    let dh = x.dims()[3];
    let half = dh / 2;
    let x1 = x.narrow(3, 0, half)?;
    let x2 = x.narrow(3, half, half)?;
    let o1 = x1.broadcast_mul(cos)?.sub(&x2.broadcast_mul(sin)?)?;
    let o2 = x1.broadcast_mul(sin)?.add(&x2.broadcast_mul(cos)?)?;
    Ok(Tensor::cat(&[&o1, &o2], 3)?)
}

/// Gather rotary tables at explicit positions: returns `[B, 1, T, d_head/2]`.
pub(crate) fn rope_at(params: &TinyLMParams, positions: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, t) = positions.dims2()?;
    let flat = positions.reshape(b * t)?;
    let half = params.config.d_head / 2;
    let cos = params.rope_cos.index_select(&flat, 0)?.reshape((b, 1, t, half))?;
    let sin = params.rope_sin.index_select(&flat, 0)?.reshape((b, 1, t, half))?;
    Ok((cos, sin))
}

pub(crate) fn split_heads(x: &Tensor, n_heads: usize, d_head: usize) -> Result<Tensor> {
    let (b, t, _) = x.dims3()?;
    Ok(x.reshape((b, t, n_heads, d_head))?.transpose(1, 2)?.contiguous()?)
}

pub(crate) fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, t, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.reshape((b, t, h * dh))?)
}

struct BlockStep {
    out: Tensor,
    cache: BlockKV,
}

/// One block's attention + MLP given the (already rope-gathered) tables, the
/// full bias (prefix columns included), and optionally an externally supplied
/// KV prefix to prepend. `w_down` may be per-sample (3-D).
#[allow(clippy::too_many_arguments)]
fn block_forward(
    config: &LMConfig,
    bw: &BlockWeights,
    x: &Tensor,
    cos: &Tensor,
    sin: &Tensor,
    bias: Option<&Tensor>,
    prefix_kv: Option<(&Tensor, &Tensor)>,
    past_kv: Option<&BlockKV>,
    w_down: &Tensor,
    eps: f64,
) -> Result<BlockStep> {
    let (h, dh) = (config.n_heads, config.d_head);
    let scale = 1.0 / (dh as f64).sqrt();

    let normed = rms_norm(x, &bw.attn_norm, eps)?;
    let q = split_heads(&linear(&normed, &bw.wq)?, h, dh)?;
    let k = split_heads(&linear(&normed, &bw.wk)?, h, dh)?;
    let v = split_heads(&linear(&normed, &bw.wv)?, h, dh)?;

    let q = rms_norm(&q, &bw.q_norm, eps)?;
    let k = rms_norm(&k, &bw.k_norm, eps)?;
    let q = apply_rope(&q, cos, sin)?;
    let k = apply_rope(&k, cos, sin)?;

    // Assemble this step's keys/values: generated prefix first, then any
    // cached past tokens, then the current tokens.
    let mut k_parts: Vec<Tensor> = Vec::new();
    let mut v_parts: Vec<Tensor> = Vec::new();
    if let Some((pk, pv)) = prefix_kv {
        k_parts.push(pk.clone());
        v_parts.push(pv.clone());
    }
    if let Some(past) = past_kv {
        k_parts.push(past.k.clone());
        v_parts.push(past.v.clone());
    }
    k_parts.push(k);
    v_parts.push(v);
    let k_all = if k_parts.len() == 1 {
        k_parts.pop().unwrap()
    } else {
        let refs: Vec<&Tensor> = k_parts.iter().collect();
        Tensor::cat(&refs, 2)?
    };
    let v_all = if v_parts.len() == 1 {
        v_parts.pop().unwrap()
    } else {
        let refs: Vec<&Tensor> = v_parts.iter().collect();
        Tensor::cat(&refs, 2)?
    };

    let mut scores = q
        .matmul(&k_all.transpose(2, 3)?.contiguous()?)?
        .affine(scale, 0.0)?;
    if let Some(bias) = bias {
        scores = scores.broadcast_add(bias)?;
    }
    let probs = softmax(&scores, D::Minus1)?;
    let attn = merge_heads(&probs.matmul(&v_all)?)?;
    let x = x.add(&linear(&attn, &bw.wo)?)?;

    let normed = rms_norm(&x, &bw.mlp_norm, eps)?;
    let gate = linear(&normed, &bw.w_gate)?.silu()?;
    let up = linear(&normed, &bw.w_up)?;
    let mlp = linear(&gate.mul(&up)?, w_down)?;
    let out = x.add(&mlp)?;

    Ok(BlockStep { out, cache: BlockKV { k: k_all, v: v_all } })
}

/// Resolve each block's effective down-projection: base weight, or base plus
/// the adapter's delta for blocks in the target set.
pub(crate) fn resolve_down_weights(
    params: &TinyLMParams,
    adapter: Option<&LoraAdapter>,
) -> Result<Vec<Tensor>> {
    let mut weights: Vec<Tensor> =
        params.blocks.iter().map(|b| b.w_down.clone()).collect();
    if let Some(adapter) = adapter {
        let target_names: Vec<String> = params
            .config
            .lora_target_blocks
            .iter()
            .map(|&b| LMConfig::target_layer_name(b))
            .collect();
        for name in adapter.layers.keys() {
            if !target_names.contains(name) {
                return Err(D2lError::ShapeMismatch(format!(
                    "adapter covers {name}, which is not a configured target layer"
                )));
            }
        }
        for (&block, name) in params.config.lora_target_blocks.iter().zip(&target_names) {
            if let Some(delta) = adapter.layers.get(name) {
                weights[block] = crate::adapters::apply_lora(&weights[block], delta)?;
            }
        }
    }
    Ok(weights)
}

fn validate_prefix(params: &TinyLMParams, prefix: &PrefixKV) -> Result<usize> {
    prefix.validate()?;
    if prefix.n_layers() != params.config.n_layers {
        return Err(D2lError::ShapeMismatch(format!(
            "prefix covers {} layers but the model has {}",
            prefix.n_layers(),
            params.config.n_layers
        )));
    }
    let p = prefix.n_prefix();
    if p > 0 {
        let dims = prefix.keys[0].dims();
        if dims[1] != params.config.n_heads || dims[2] != params.config.d_head {
            return Err(D2lError::ShapeMismatch(format!(
                "prefix head shape {:?} incompatible with model ({} heads × {})",
                dims, params.config.n_heads, params.config.d_head
            )));
        }
    }
    Ok(p)
}

/// Internal batched forward. `tokens` is `[B, T]` u32; `masks` has one spec
/// per row (all of length T). `down_weights` are per-block effective weights
/// (2-D shared or 3-D per-sample). Prefix keys/values, if any, are prepended
/// to every attention layer and are always visible.
pub(crate) fn forward_batched(
    params: &TinyLMParams,
    tokens: &Tensor,
    masks: &[MaskSpec],
    down_weights: &[Tensor],
    prefix: Option<&PrefixKV>,
    want_activations: bool,
    want_caches: bool,
) -> Result<ForwardOutput> {
    let (b, t) = tokens.dims2()?;
    if masks.len() != b {
        return Err(D2lError::ShapeMismatch(format!(
            "{b} token rows but {} mask specs",
            masks.len()
        )));
    }
    if down_weights.len() != params.config.n_layers {
        return Err(D2lError::ShapeMismatch(
            "one effective down-projection required per block".into(),
        ));
    }
    let max_tok = tokens.max_all()?.to_scalar::<u32>()? as usize;
    if max_tok >= params.config.vocab_size {
        return Err(D2lError::Validation(format!(
            "token id {max_tok} out of vocabulary ({})",
            params.config.vocab_size
        )));
    }

    let n_prefix = match prefix {
        Some(p) => validate_prefix(params, p)?,
        None => 0,
    };
    let rope_offset = match prefix {
        Some(p) if p.rope_applied => n_prefix,
        _ => 0,
    };

    // Bias [B, 1, T, n_prefix + T]: prefix columns always visible.
    let mut bias_data = Vec::with_capacity(b * t * (n_prefix + t));
    let mut positions = Vec::with_capacity(b * t);
    let mut valid = Vec::with_capacity(b * t);
    for spec in masks {
        spec.validate()?;
        if spec.len() != t {
            return Err(D2lError::ShapeMismatch(format!(
                "mask of length {} for token rows of length {t}",
                spec.len()
            )));
        }
        let body = spec.bias_matrix();
        for q in 0..t {
            bias_data.extend(std::iter::repeat_n(0.0f32, n_prefix));
            bias_data.extend_from_slice(&body[q * t..(q + 1) * t]);
        }
        for (i, &p) in spec.positions.iter().enumerate() {
            let pos = p + rope_offset;
            if pos >= params.config.max_seq_len {
                return Err(D2lError::BudgetExceeded(format!(
                    "rotary position {pos} exceeds max_seq_len {}",
                    params.config.max_seq_len
                )));
            }
            positions.push(pos as u32);
            valid.push(if spec.valid[i] { 1.0f32 } else { 0.0 });
        }
    }
    let bias = Tensor::from_vec(bias_data, (b, 1, t, n_prefix + t), &device())?;
    let positions = Tensor::from_vec(positions, (b, t), &device())?;
    let valid_col = Tensor::from_vec(valid, (b, t, 1), &device())?;

    let (cos, sin) = rope_at(params, &positions)?;

    // Broadcast per-layer prefix tensors over the batch: [P,H,dh] → [B,H,P,dh].
    let prefix_bh: Option<Vec<(Tensor, Tensor)>> = match prefix {
        Some(p) if n_prefix > 0 => {
            let mut v = Vec::with_capacity(p.keys.len());
            for l in 0..p.n_layers() {
                let pk = p.keys[l].transpose(0, 1)?.unsqueeze(0)?;
                let pv = p.values[l].transpose(0, 1)?.unsqueeze(0)?;
                let (_, h, pn, dh) = pk.dims4()?;
                v.push((
                    pk.broadcast_as((b, h, pn, dh))?.contiguous()?,
                    pv.broadcast_as((b, h, pn, dh))?.contiguous()?,
                ));
            }
            Some(v)
        }
        _ => None,
    };

    let flat = tokens.reshape(b * t)?;
    let mut x = params
        .embed
        .index_select(&flat, 0)?
        .reshape((b, t, params.config.d_model))?;
    x = x.broadcast_mul(&valid_col)?;

    let mut activations = if want_activations { vec![x.clone()] } else { Vec::new() };
    let mut caches = if want_caches { Vec::with_capacity(params.config.n_layers) } else { Vec::new() };

    for (l, bw) in params.blocks.iter().enumerate() {
        let pfx = prefix_bh.as_ref().map(|v| (&v[l].0, &v[l].1));
        let step = block_forward(
            &params.config,
            bw,
            &x,
            &cos,
            &sin,
            Some(&bias),
            pfx,
            None,
            &down_weights[l],
            params.config.norm_eps,
        )?;
        x = step.out.broadcast_mul(&valid_col)?;
        if want_activations {
            activations.push(x.clone());
        }
        if want_caches {
            caches.push(step.cache);
        }
    }

    let x = rms_norm(&x, &params.final_norm, params.config.norm_eps)?;
    let logits = x.broadcast_matmul(&params.embed.t()?)?;
    Ok(ForwardOutput {
        logits,
        activations: want_activations.then_some(activations),
        caches: want_caches.then_some(caches),
    })
}

/// Forward pass over one token sequence, returning per-position logits and
/// the per-layer activation stack (slice 0 = embeddings; slice l = output of
/// block l). With no adapter and no prefix this is the plain frozen model.
pub fn forward_with_activations(
    params: &TinyLMParams,
    tokens: &[u32],
    mask: &MaskSpec,
    adapter: Option<&LoraAdapter>,
    prefix: Option<&PrefixKV>,
) -> Result<(Tensor, ActivationStack)> {
    if tokens.len() != mask.len() {
        return Err(D2lError::ShapeMismatch(format!(
            "{} tokens but mask of length {}",
            tokens.len(),
            mask.len()
        )));
    }
    if tokens.is_empty() {
        return Err(D2lError::Validation("empty token sequence".into()));
    }
    let down = resolve_down_weights(params, adapter)?;
    let tokens_t = Tensor::from_vec(tokens.to_vec(), (1, tokens.len()), &device())?;
    let out = forward_batched(
        params,
        &tokens_t,
        std::slice::from_ref(mask),
        &down,
        prefix,
        true,
        false,
    )?;
    let logits = out.logits.squeeze(0)?;
    let layers = out
        .activations
        .unwrap()
        .into_iter()
        .map(|t| t.squeeze(0))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok((logits, ActivationStack { layers }))
}

/// Greedy argmax with ties broken toward the lowest token id.
fn argmax_lowest(logits: &Tensor) -> Result<u32> {
    let v = logits.to_vec1::<f32>()?;
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    Ok(best as u32)
}

/// Greedy decoding with a per-layer KV cache. Returns only the continuation
/// (without the prompt); stops at the end-of-sequence token (excluded) or
/// after `max_new` tokens. Prefix tokens count toward the sequence budget.
pub fn generate(
    params: &TinyLMParams,
    prompt: &[u32],
    max_new: usize,
    adapter: Option<&LoraAdapter>,
    prefix: Option<&PrefixKV>,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(D2lError::Validation("empty prompt".into()));
    }
    let n_prefix = prefix.map(|p| p.n_prefix()).unwrap_or(0);
    if prompt.len() + max_new + n_prefix > params.config.max_seq_len {
        return Err(D2lError::BudgetExceeded(format!(
            "prompt {} + max_new {max_new} + prefix {n_prefix} exceeds max_seq_len {}",
            prompt.len(),
            params.config.max_seq_len
        )));
    }
    if max_new == 0 {
        return Ok(Vec::new());
    }
    let down = resolve_down_weights(params, adapter)?;
    let rope_offset = match prefix {
        Some(p) if p.rope_applied => n_prefix,
        _ => 0,
    };

    // Process the whole prompt once, keeping per-layer caches.
    let tokens_t = Tensor::from_vec(prompt.to_vec(), (1, prompt.len()), &device())?;
    let out = forward_batched(
        params,
        &tokens_t,
        &[MaskSpec::causal(prompt.len())],
        &down,
        prefix,
        false,
        true,
    )?;
    let mut caches = out.caches.unwrap();
    let last = out.logits.narrow(1, prompt.len() - 1, 1)?.flatten_all()?;
    let mut next = argmax_lowest(&last)?;

    let mut generated = Vec::with_capacity(max_new);
    for step in 0..max_new {
        if next == vocab::EOS {
            break;
        }
        generated.push(next);
        if step + 1 == max_new {
            break;
        }
        // Incremental forward for the single new token.
        let pos = rope_offset + prompt.len() + step;
        let tok = Tensor::from_vec(vec![next], (1, 1), &device())?;
        let positions = Tensor::from_vec(vec![pos as u32], (1, 1), &device())?;
        let (cos, sin) = rope_at(params, &positions)?;
        let mut x = params
            .embed
            .index_select(&tok.reshape(1)?, 0)?
            .reshape((1, 1, params.config.d_model))?;
        for (l, bw) in params.blocks.iter().enumerate() {
            // The cache already contains the prefix (if any) and all earlier
            // tokens; everything is visible so no bias is needed.
            let step_out = block_forward(
                &params.config,
                bw,
                &x,
                &cos,
                &sin,
                None,
                None,
                Some(&caches[l]),
                &down[l],
                params.config.norm_eps,
            )?;
            x = step_out.out;
            caches[l] = step_out.cache;
        }
        let x = rms_norm(&x, &params.final_norm, params.config.norm_eps)?;
        let logits = x.broadcast_matmul(&params.embed.t()?)?.flatten_all()?;
        next = argmax_lowest(&logits)?;
    }
    Ok(generated)
}

/// Analytic key/value cache size in bytes for a decode of `n_gen_tokens`
/// after ingesting `n_ctx_tokens`: `2 · L · n_heads · d_head · (n_ctx + n_gen)
/// · bytes_per_scalar`. The internalized path passes `n_ctx_tokens = 0` (plus
/// the prefix count when a KV-prefix adapter is used).
pub fn kv_cache_footprint(
    n_ctx_tokens: usize,
    n_gen_tokens: usize,
    config: &LMConfig,
    bytes_per_scalar: usize,
) -> u64 {
    2 * config.n_layers as u64
        * config.n_heads as u64
        * config.d_head as u64
        * (n_ctx_tokens as u64 + n_gen_tokens as u64)
        * bytes_per_scalar as u64
}

/// Persist model weights to the single-file container format.
pub fn save_lm_checkpoint(path: &Path, params: &TinyLMParams) -> Result<()> {
    let config = serde_json::to_value(&params.config)?;
    save_checkpoint(path, "tiny_lm", config, &params.named_tensors())
}

/// Load model weights previously written by [`save_lm_checkpoint`].
pub fn load_lm_checkpoint(path: &Path) -> Result<TinyLMParams> {
    let (header, map) = load_checkpoint(path)?;
    if header.kind != "tiny_lm" {
        return Err(D2lError::Format(format!(
            "expected kind tiny_lm, found {}",
            header.kind
        )));
    }
    let config: LMConfig = serde_json::from_value(header.config)
        .map_err(|e| D2lError::Format(format!("bad model config in checkpoint: {e}")))?;
    TinyLMParams::from_named(config, map)
}

/// Options for teacher pretraining.
#[derive(Debug, Clone)]
pub struct PretrainOpts {
    pub seed: u64,
    /// Token length of each packed buffer.
    pub buffer_len: usize,
    /// Buffers per optimizer step.
    pub batch_size: usize,
    /// Linear learning-rate warmup steps.
    pub warmup_steps: usize,
    /// Emit a log line every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for PretrainOpts {
    fn default() -> Self {
        Self { seed: 0, buffer_len: 384, batch_size: 8, warmup_steps: 100, log_every: 50 }
    }
}

/// Pretraining result: final weights plus the per-step loss trace.
pub struct PretrainOutput {
    pub params: TinyLMParams,
    pub losses: Vec<f64>,
}

/// First-fit packing of sequences into fixed-length buffers. Sequences longer
/// than the buffer are truncated; each buffer gets a block-diagonal mask.
fn pack_buffers(
    corpus: &[Vec<u32>],
    order: &[usize],
    buffer_len: usize,
) -> Vec<(Vec<u32>, MaskSpec)> {
    let mut buffers = Vec::new();
    let mut cur: Vec<u32> = Vec::with_capacity(buffer_len);
    let mut lens: Vec<usize> = Vec::new();
    for &i in order {
        let seq = &corpus[i];
        let take = seq.len().min(buffer_len);
        if cur.len() + take > buffer_len {
            if !cur.is_empty() {
                let mut tokens = cur.clone();
                tokens.resize(buffer_len, vocab::PAD);
                buffers.push((tokens, MaskSpec::packed(&lens, buffer_len)));
            }
            cur.clear();
            lens.clear();
        }
        cur.extend_from_slice(&seq[..take]);
        lens.push(take);
    }
    if !cur.is_empty() {
        let mut tokens = cur.clone();
        tokens.resize(buffer_len, vocab::PAD);
        buffers.push((tokens, MaskSpec::packed(&lens, buffer_len)));
    }
    buffers
}

/// Next-token cross-entropy restricted to positions whose successor lies in
/// the same segment, averaged over those positions.
fn packed_ce_loss(logits: &Tensor, tokens: &[Vec<u32>], masks: &[MaskSpec]) -> Result<Tensor> {
    let (b, t, _v) = logits.dims3()?;
    let mut target = vec![0u32; b * t];
    let mut weight = vec![0f32; b * t];
    let mut n_active = 0usize;
    for (row, (seq, mask)) in tokens.iter().zip(masks.iter()).enumerate() {
        for &(start, len) in &mask.segments {
            for i in start..start + len.saturating_sub(1) {
                target[row * t + i] = seq[i + 1];
                weight[row * t + i] = 1.0;
                n_active += 1;
            }
        }
    }
    if n_active == 0 {
        return Err(D2lError::Validation("no supervised positions in batch".into()));
    }
    let target = Tensor::from_vec(target, b * t, &device())?;
    let weight = Tensor::from_vec(weight, b * t, &device())?;
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?.reshape((b * t, ()))?;
    let picked = log_probs
        .gather(&target.unsqueeze(1)?, 1)?
        .squeeze(1)?;
    let loss = picked.mul(&weight)?.sum_all()?.affine(-1.0 / n_active as f64, 0.0)?;
    Ok(loss)
}

/// Train a fresh model on packed next-token prediction with AdamW. Returns
/// the trained weights and per-step losses; `steps = 0` returns the seeded
/// initialization unchanged. Aborts with a divergence error if the loss
/// becomes non-finite.
pub fn pretrain_lm(
    corpus: &[Vec<u32>],
    config: &LMConfig,
    steps: usize,
    lr: f64,
    opts: &PretrainOpts,
) -> Result<PretrainOutput> {
    if corpus.is_empty() {
        return Err(D2lError::Validation("pretraining corpus is empty".into()));
    }
    let vars = TinyLMVars::init(config, opts.seed)?;
    if steps == 0 {
        return Ok(PretrainOutput { params: vars.freeze()?, losses: Vec::new() });
    }
    let mut rng = seeded_rng(opts.seed.wrapping_add(0x9e3779b97f4a7c15));
    let mut opt = candle_nn::AdamW::new(
        vars.all_vars(),
        candle_nn::ParamsAdamW { lr, ..Default::default() },
    )?;

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut buffers: Vec<(Vec<u32>, MaskSpec)> = Vec::new();
    let mut cursor = 0usize;
    let mut losses = Vec::with_capacity(steps);
    let params = vars.params()?;
    let down: Vec<Tensor> = params.blocks.iter().map(|b| b.w_down.clone()).collect();

    for step in 0..steps {
        // Refill and reshuffle when the packed pool is exhausted.
        if cursor + opts.batch_size > buffers.len() {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            buffers = pack_buffers(corpus, &order, opts.buffer_len);
            cursor = 0;
            if buffers.len() < opts.batch_size {
                return Err(D2lError::Validation(
                    "corpus too small for one batch of packed buffers".into(),
                ));
            }
        }
        let batch = &buffers[cursor..cursor + opts.batch_size];
        cursor += opts.batch_size;

        let b = batch.len();
        let mut flat = Vec::with_capacity(b * opts.buffer_len);
        for (tokens, _) in batch {
            flat.extend_from_slice(tokens);
        }
        let tokens_t = Tensor::from_vec(flat, (b, opts.buffer_len), &device())?;
        let masks: Vec<MaskSpec> = batch.iter().map(|(_, m)| m.clone()).collect();
        let out = forward_batched(&params, &tokens_t, &masks, &down, None, false, false)?;
        let token_rows: Vec<Vec<u32>> = batch.iter().map(|(t, _)| t.clone()).collect();
        let loss = packed_ce_loss(&out.logits, &token_rows, &masks)?;
        let loss_val = loss.to_scalar::<f32>()? as f64;
        if !loss_val.is_finite() {
            return Err(D2lError::Divergence(format!(
                "pretraining loss became non-finite at step {step}"
            )));
        }
        losses.push(loss_val);

        let warm = if opts.warmup_steps > 0 && step < opts.warmup_steps {
            lr * (step + 1) as f64 / opts.warmup_steps as f64
        } else {
            lr
        };
        opt.set_learning_rate(warm);
        opt.backward_step(&loss)?;

        if opts.log_every > 0 && (step % opts.log_every == 0 || step + 1 == steps) {
            log::info!("pretrain step {step}: loss {loss_val:.4} lr {warm:.2e}");
        }
    }
    Ok(PretrainOutput { params: vars.freeze()?, losses })
}
