//! The context-to-adapter hypernetwork.
//!
//! H_φ consumes per-layer token activations of a context (produced by the
//! frozen target model), cross-attends a fixed set of learnable latent
//! queries to them through a Perceiver-style block stack, and maps each
//! latent through per-layer output heads to a row of A and a column of B of
//! a LoRA delta — or, in prefix mode, to per-layer key/value entries.
//!
//! Long contexts are split into contiguous chunks; each chunk is encoded
//! independently and the per-chunk deltas are concatenated along the rank
//! dimension (rank r·K) or along the prefix-token axis. Generation supports
//! a batched mode (all chunk/layer pairs in one pass) and an iterative mode
//! (one pair at a time); both are mathematically equivalent.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Tensor, Var};
// The fused `softmax_last_dim` has no backward pass; use the composable
// `softmax` so gradients reach the latent query/key projections.
use candle_core::D;
use candle_nn::ops::softmax;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    compose_adapters, compose_prefixes, LoraAdapter, LoraLayerDelta, PrefixKV, GENERATOR_VERSION,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{D2lError, Result};
use crate::target_lm::{
    apply_rope, forward_with_activations, linear, merge_heads, rms_norm, rope_at, split_heads,
    ActivationStack, LMConfig, MaskSpec, TinyLMParams,
};
use crate::tensor_util::{device, randn_tensor, seeded_rng};

/// Attention bias for masked context positions (underflows to exactly zero
/// attention weight in f32).
const MASK_BIAS: f32 = -1e9;

/// What the hypernetwork emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    Lora,
    PrefixKv,
}

/// Which activation slices feed the generator.
///
/// `PerLayer` gives the head for block l the residual stream entering that
/// block (slice Z_{l}, where Z₀ is the embedding output and block i is fed
/// by slice i). `SingleLayer(l*)` feeds one mid-stack slice to every head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationSource {
    PerLayer,
    SingleLayer(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypernetConfig {
    /// Latent width d_u (query width d_q is set equal to it).
    pub d_latent: usize,
    /// Rank r in LoRA mode; prefix token count in prefix-KV mode.
    pub n_latents: usize,
    pub n_xattn_blocks: usize,
    pub n_attn_heads: usize,
    /// Width D of the encoder activations consumed as input.
    pub input_dim: usize,
    pub output_mode: OutputMode,
    pub max_chunk_tokens: usize,
    pub min_chunk: usize,
    pub activation_source: ActivationSource,
    /// Per-(layer,rank) scaling vector when true; per-layer scalar when false.
    pub alpha_per_rank: bool,
    /// Append latents to attention keys/values (general Perceiver form).
    /// Off by default: cross-attention only, no self-attention among latents.
    pub latent_self_attention: bool,
}

impl HypernetConfig {
    /// Desk-scale default for the LoRA pipeline: rank-8 latents over the
    /// mid-stack activation slice, chunks capped at 256 tokens.
    pub fn desk_default() -> Self {
        Self {
            d_latent: 64,
            n_latents: 8,
            n_xattn_blocks: 4,
            n_attn_heads: 4,
            input_dim: 64,
            output_mode: OutputMode::Lora,
            max_chunk_tokens: 256,
            min_chunk: 25,
            activation_source: ActivationSource::SingleLayer(2),
            alpha_per_rank: true,
            latent_self_attention: false,
        }
    }

    /// Desk-scale default for the prefix-KV pipeline: 20 prefix tokens.
    pub fn desk_default_prefix() -> Self {
        Self {
            n_latents: 20,
            output_mode: OutputMode::PrefixKv,
            ..Self::desk_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_latent", self.d_latent),
            ("n_latents", self.n_latents),
            ("n_xattn_blocks", self.n_xattn_blocks),
            ("n_attn_heads", self.n_attn_heads),
            ("input_dim", self.input_dim),
            ("min_chunk", self.min_chunk),
        ] {
            if v == 0 {
                return Err(D2lError::InvalidDimension(format!("{name} must be ≥ 1")));
            }
        }
        if self.d_latent % self.n_attn_heads != 0 {
            return Err(D2lError::InvalidDimension(format!(
                "d_latent {} not divisible by n_attn_heads {}",
                self.d_latent, self.n_attn_heads
            )));
        }
        if self.max_chunk_tokens < self.min_chunk {
            return Err(D2lError::InvalidDimension(format!(
                "max_chunk_tokens {} below min_chunk {}",
                self.max_chunk_tokens, self.min_chunk
            )));
        }
        Ok(())
    }
}

/// Shape information about the frozen target model that the output heads are
/// bound to at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetInfo {
    /// Adapted layer names in block order (LoRA mode).
    pub layer_names: Vec<String>,
    pub d_in: usize,
    pub d_out: usize,
    pub n_lm_layers: usize,
    pub n_lm_heads: usize,
    pub d_lm_head: usize,
    pub d_lm_model: usize,
}

impl TargetInfo {
    pub fn from_lm(config: &LMConfig) -> Self {
        let shapes = config.target_layer_shapes();
        Self {
            layer_names: shapes.iter().map(|(n, _, _)| n.clone()).collect(),
            d_in: config.d_mlp,
            d_out: config.d_model,
            n_lm_layers: config.n_layers,
            n_lm_heads: config.n_heads,
            d_lm_head: config.d_head,
            d_lm_model: config.d_model,
        }
    }

    /// 0-indexed block of each adapted layer name.
    fn layer_blocks(&self) -> Result<Vec<usize>> {
        self.layer_names
            .iter()
            .map(|n| {
                n.strip_prefix("block")
                    .and_then(|s| s.split('.').next())
                    .and_then(|s| s.parse::<usize>().ok())
                    .ok_or_else(|| {
                        D2lError::Format(format!("unparseable target layer name {n}"))
                    })
            })
            .collect()
    }
}

/// One Perceiver block: latent-side and context-side norms, a cross-attention
/// with latent queries, and a SwiGLU MLP on the latents.
#[derive(Debug, Clone)]
pub struct XBlockWeights {
    pub latent_norm: Tensor,  // [d_latent]
    pub context_norm: Tensor, // [d_latent]
    pub wq: Tensor,           // [d_latent, d_latent]
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ff_norm: Tensor,      // [d_latent]
    pub w_gate: Tensor,       // [4·d_latent, d_latent]
    pub w_up: Tensor,
    pub w_down: Tensor,       // [d_latent, 4·d_latent]
}

/// Output heads: one per adapted layer (LoRA) or one per model layer (KV).
#[derive(Debug, Clone)]
pub enum OutputHeads {
    Lora {
        /// Per layer name: `[d_in + d_out, d_latent]`; latent i maps to row i
        /// of A and column i of B.
        heads: BTreeMap<String, Tensor>,
        /// Per layer name: `[r]` (per-rank) or `[1]` (scalar).
        alphas: BTreeMap<String, Tensor>,
    },
    PrefixKv {
        /// Per model layer: `[2·d_model, d_latent]` (keys then values).
        kv_heads: Vec<Tensor>,
    },
}

#[derive(Debug, Clone)]
pub struct HypernetParams {
    pub config: HypernetConfig,
    pub target: TargetInfo,
    pub latents: Tensor, // [n_latents, d_latent]
    pub proj_gate: Tensor, // [4·input_dim, input_dim]
    pub proj_up: Tensor,
    pub proj_down: Tensor, // [d_latent, 4·input_dim]
    pub blocks: Vec<XBlockWeights>,
    pub final_norm: Tensor, // [d_latent]
    pub heads: OutputHeads,
}

const NORM_EPS: f64 = 1e-6;
/// Near-identity start: the adapted model begins close to the frozen model.
const ALPHA_INIT: f64 = 1e-3;

fn xblock_tensor_names(i: usize) -> Vec<String> {
    [
        "latent_norm", "context_norm", "wq", "wk", "wv", "wo", "ff_norm", "w_gate", "w_up",
        "w_down",
    ]
    .iter()
    .map(|t| format!("xblock{i}.{t}"))
    .collect()
}

fn hypernet_tensor_names(config: &HypernetConfig, target: &TargetInfo) -> Vec<String> {
    let mut names = vec![
        "latents".to_string(),
        "proj.gate".to_string(),
        "proj.up".to_string(),
        "proj.down".to_string(),
        "final_norm".to_string(),
    ];
    for i in 0..config.n_xattn_blocks {
        names.extend(xblock_tensor_names(i));
    }
    match config.output_mode {
        OutputMode::Lora => {
            for name in &target.layer_names {
                names.push(format!("head.{name}"));
                names.push(format!("alpha.{name}"));
            }
        }
        OutputMode::PrefixKv => {
            for l in 0..target.n_lm_layers {
                names.push(format!("kv_head.layer{l}"));
            }
        }
    }
    names
}

fn hypernet_shape(config: &HypernetConfig, target: &TargetInfo, name: &str) -> Vec<usize> {
    let (dl, di) = (config.d_latent, config.input_dim);
    if name == "latents" {
        return vec![config.n_latents, dl];
    }
    if name == "proj.gate" || name == "proj.up" {
        return vec![4 * di, di];
    }
    if name == "proj.down" {
        return vec![dl, 4 * di];
    }
    if name == "final_norm" {
        return vec![dl];
    }
    if name.starts_with("xblock") {
        return match name.rsplit('.').next().unwrap_or("") {
            "latent_norm" | "context_norm" | "ff_norm" => vec![dl],
            "wq" | "wk" | "wv" | "wo" => vec![dl, dl],
            "w_gate" | "w_up" => vec![4 * dl, dl],
            "w_down" => vec![dl, 4 * dl],
            _ => vec![],
        };
    }
    if name.starts_with("head.") {
        return vec![target.d_in + target.d_out, dl];
    }
    if name.starts_with("alpha.") {
        return vec![if config.alpha_per_rank { config.n_latents } else { 1 }];
    }
    if name.starts_with("kv_head.") {
        return vec![2 * target.d_lm_model, dl];
    }
    vec![]
}

fn init_hypernet_map(
    config: &HypernetConfig,
    target: &TargetInfo,
    seed: u64,
) -> Result<BTreeMap<String, Tensor>> {
    config.validate()?;
    let mut rng = seeded_rng(seed);
    let mut map = BTreeMap::new();
    let out_std = 0.02 / ((2 * config.n_xattn_blocks) as f64).sqrt();
    for name in hypernet_tensor_names(config, target) {
        let shape = hypernet_shape(config, target, &name);
        let leaf = name.rsplit('.').next().unwrap_or(&name);
        let t = if name == "latents" {
            // Unit-variance latent queries, fixed by seed.
            randn_tensor(&mut rng, &shape, 0.0, 1.0)?
        } else if name.starts_with("alpha.") {
            crate::tensor_util::const_tensor(ALPHA_INIT, &shape)?
        } else if matches!(leaf, "latent_norm" | "context_norm" | "ff_norm" | "final_norm") {
            crate::tensor_util::const_tensor(1.0, &shape)?
        } else if matches!(leaf, "wo" | "w_down") && name.starts_with("xblock") {
            randn_tensor(&mut rng, &shape, 0.0, out_std)?
        } else {
            randn_tensor(&mut rng, &shape, 0.0, 0.02)?
        };
        map.insert(name, t);
    }
    Ok(map)
}

impl HypernetParams {
    pub fn from_named(
        config: HypernetConfig,
        target: TargetInfo,
        mut map: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let mut take = |name: &str| -> Result<Tensor> {
            let t = map
                .remove(name)
                .ok_or_else(|| D2lError::Format(format!("missing hypernet tensor {name}")))?;
            let want = hypernet_shape(&config, &target, name);
            if t.dims() != want.as_slice() {
                return Err(D2lError::ShapeMismatch(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    want
                )));
            }
            Ok(t)
        };
        let latents = take("latents")?;
        let proj_gate = take("proj.gate")?;
        let proj_up = take("proj.up")?;
        let proj_down = take("proj.down")?;
        let final_norm = take("final_norm")?;
        let mut blocks = Vec::with_capacity(config.n_xattn_blocks);
        for i in 0..config.n_xattn_blocks {
            blocks.push(XBlockWeights {
                latent_norm: take(&format!("xblock{i}.latent_norm"))?,
                context_norm: take(&format!("xblock{i}.context_norm"))?,
                wq: take(&format!("xblock{i}.wq"))?,
                wk: take(&format!("xblock{i}.wk"))?,
                wv: take(&format!("xblock{i}.wv"))?,
                wo: take(&format!("xblock{i}.wo"))?,
                ff_norm: take(&format!("xblock{i}.ff_norm"))?,
                w_gate: take(&format!("xblock{i}.w_gate"))?,
                w_up: take(&format!("xblock{i}.w_up"))?,
                w_down: take(&format!("xblock{i}.w_down"))?,
            });
        }
        let heads = match config.output_mode {
            OutputMode::Lora => {
                let mut heads = BTreeMap::new();
                let mut alphas = BTreeMap::new();
                for name in &target.layer_names {
                    heads.insert(name.clone(), take(&format!("head.{name}"))?);
                    alphas.insert(name.clone(), take(&format!("alpha.{name}"))?);
                }
                OutputHeads::Lora { heads, alphas }
            }
            OutputMode::PrefixKv => {
                let mut kv_heads = Vec::with_capacity(target.n_lm_layers);
                for l in 0..target.n_lm_layers {
                    kv_heads.push(take(&format!("kv_head.layer{l}"))?);
                }
                OutputHeads::PrefixKv { kv_heads }
            }
        };
        if !map.is_empty() {
            return Err(D2lError::Format(format!(
                "unexpected hypernet tensors: {:?}",
                map.keys().collect::<Vec<_>>()
            )));
        }
        Ok(Self {
            config,
            target,
            latents,
            proj_gate,
            proj_up,
            proj_down,
            blocks,
            final_norm,
            heads,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("latents".to_string(), self.latents.clone()),
            ("proj.gate".to_string(), self.proj_gate.clone()),
            ("proj.up".to_string(), self.proj_up.clone()),
            ("proj.down".to_string(), self.proj_down.clone()),
            ("final_norm".to_string(), self.final_norm.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (t, tensor) in [
                ("latent_norm", &b.latent_norm),
                ("context_norm", &b.context_norm),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ff_norm", &b.ff_norm),
                ("w_gate", &b.w_gate),
                ("w_up", &b.w_up),
                ("w_down", &b.w_down),
            ] {
                out.push((format!("xblock{i}.{t}"), tensor.clone()));
            }
        }
        match &self.heads {
            OutputHeads::Lora { heads, alphas } => {
                for (name, t) in heads {
                    out.push((format!("head.{name}"), t.clone()));
                }
                for (name, t) in alphas {
                    out.push((format!("alpha.{name}"), t.clone()));
                }
            }
            OutputHeads::PrefixKv { kv_heads } => {
                for (l, t) in kv_heads.iter().enumerate() {
                    out.push((format!("kv_head.layer{l}"), t.clone()));
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .map(|(_, t)| t.elem_count())
            .sum()
    }

    pub fn checksum(&self) -> Result<String> {
        let named = self.named_tensors();
        crate::tensor_util::params_checksum(named.iter().map(|(n, t)| (n.as_str(), t)))
    }
}

/// Trainable twin of [`HypernetParams`]: tensors held as optimizer-updatable
/// [`Var`]s.
pub struct HypernetVars {
    pub config: HypernetConfig,
    pub target: TargetInfo,
    vars: BTreeMap<String, Var>,
}

impl HypernetVars {
    pub fn init(config: &HypernetConfig, lm_config: &LMConfig, seed: u64) -> Result<Self> {
        if config.input_dim != lm_config.d_model {
            return Err(D2lError::InvalidDimension(format!(
                "hypernet input_dim {} does not match encoder width {}",
                config.input_dim, lm_config.d_model
            )));
        }
        let target = TargetInfo::from_lm(lm_config);
        let map = init_hypernet_map(config, &target, seed)?;
        let mut vars = BTreeMap::new();
        for (name, t) in map {
            vars.insert(name, Var::from_tensor(&t)?);
        }
        let s = Self { config: config.clone(), target, vars };
        log::info!(
            "hypernet constructed: {} trainable parameters",
            s.params()?.param_count()
        );
        Ok(s)
    }

    pub fn params(&self) -> Result<HypernetParams> {
        let map = self
            .vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        HypernetParams::from_named(self.config.clone(), self.target.clone(), map)
    }

    pub fn freeze(&self) -> Result<HypernetParams> {
        let map = self
            .vars
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().detach().copy()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        HypernetParams::from_named(self.config.clone(), self.target.clone(), map)
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Name → variable view in deterministic (sorted) order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.vars.iter().map(|(n, v)| (n.clone(), v.clone())).collect()
    }

    /// Overwrite the variable values with a parameter snapshot (resume).
    pub fn load_params(&mut self, params: &HypernetParams) -> Result<()> {
        for (name, t) in params.named_tensors() {
            let var = self.vars.get(&name).ok_or_else(|| {
                D2lError::Format(format!("resume tensor {name} not in this hypernet"))
            })?;
            var.set(&t)?;
        }
        Ok(())
    }
}

pub fn save_hypernet_checkpoint(path: &Path, params: &HypernetParams) -> Result<()> {
    let config = serde_json::json!({
        "hypernet": serde_json::to_value(&params.config)?,
        "target": serde_json::to_value(&params.target)?,
    });
    save_checkpoint(path, "hypernet", config, &params.named_tensors())
}

pub fn load_hypernet_checkpoint(path: &Path) -> Result<HypernetParams> {
    let (header, map) = load_checkpoint(path)?;
    if header.kind != "hypernet" {
        return Err(D2lError::Format(format!(
            "expected kind hypernet, found {}",
            header.kind
        )));
    }
    let config: HypernetConfig = serde_json::from_value(header.config["hypernet"].clone())
        .map_err(|e| D2lError::Format(format!("bad hypernet config: {e}")))?;
    let target: TargetInfo = serde_json::from_value(header.config["target"].clone())
        .map_err(|e| D2lError::Format(format!("bad target info: {e}")))?;
    HypernetParams::from_named(config, target, map)
}

/// A contiguous, exact partition of a token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    /// `(start, end)` half-open spans in order.
    pub spans: Vec<(usize, usize)>,
}

impl ChunkPlan {
    pub fn k(&self) -> usize {
        self.spans.len()
    }

    /// Check contiguity, exact cover of `[0, n)`, and length bounds.
    pub fn validate(&self, n: usize, min_chunk: usize, max_chunk: usize) -> Result<()> {
        if self.spans.is_empty() {
            return Err(D2lError::Validation("empty chunk plan".into()));
        }
        let mut cursor = 0;
        for &(s, e) in &self.spans {
            if s != cursor || e <= s {
                return Err(D2lError::Validation(format!(
                    "chunk [{s},{e}) breaks contiguity at {cursor}"
                )));
            }
            let len = e - s;
            if self.spans.len() > 1 && (len < min_chunk || len > max_chunk) {
                return Err(D2lError::Validation(format!(
                    "chunk length {len} outside [{min_chunk}, {max_chunk}]"
                )));
            }
            cursor = e;
        }
        if cursor != n {
            return Err(D2lError::Validation(format!(
                "chunks cover [0,{cursor}) but the context has {n} tokens"
            )));
        }
        Ok(())
    }
}

/// Split `n` tokens into `k` contiguous chunks of (near-)equal size: every
/// chunk gets `⌊n/k⌋` tokens and the remainder is absorbed by the trailing
/// chunks (one extra token each), so sizes never differ by more than one.
fn split_into(n: usize, k: usize) -> Vec<(usize, usize)> {
    let k = k.clamp(1, n.max(1));
    let base = n / k;
    let rem = n % k;
    let mut spans = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i >= k - rem);
        spans.push((start, start + len));
        start += len;
    }
    spans
}

/// Deterministic chunking: one chunk when the context fits, otherwise the
/// smallest K for which every chunk is at most `max_chunk_tokens`, split into
/// equal sizes with the remainder absorbed at the end. K is reduced if a
/// chunk would fall below `min_chunk` (the minimum takes precedence in
/// degenerate configurations where both bounds cannot hold).
pub fn chunk_context(n_tokens: usize, max_chunk_tokens: usize, min_chunk: usize) -> Result<ChunkPlan> {
    if n_tokens == 0 {
        return Err(D2lError::Validation("cannot chunk an empty context".into()));
    }
    if min_chunk > n_tokens {
        return Err(D2lError::Validation(format!(
            "min_chunk {min_chunk} exceeds context length {n_tokens}"
        )));
    }
    if max_chunk_tokens == 0 {
        return Err(D2lError::InvalidDimension("max_chunk_tokens must be ≥ 1".into()));
    }
    if n_tokens <= max_chunk_tokens {
        return Ok(ChunkPlan { spans: vec![(0, n_tokens)] });
    }
    let mut k = n_tokens.div_ceil(max_chunk_tokens);
    while k > 1 && n_tokens / k < min_chunk {
        k -= 1;
    }
    Ok(ChunkPlan { spans: split_into(n_tokens, k) })
}

/// Chunk-count schedule used during meta-training: 50% one chunk, 12% two,
/// and the remaining mass spread equally over 3..=8; the draw is clamped so
/// every chunk keeps at least `min_chunk` tokens (and no chunk exceeds
/// `max_chunk_tokens`).
pub fn sample_training_chunk_plan(
    rng: &mut impl rand::Rng,
    n_tokens: usize,
    max_chunk_tokens: usize,
    min_chunk: usize,
) -> ChunkPlan {
    let u: f64 = rng.random();
    let mut k = if u < 0.50 {
        1
    } else if u < 0.62 {
        2
    } else {
        rng.random_range(3..=8)
    };
    let k_floor = n_tokens.div_ceil(max_chunk_tokens).max(1);
    let k_cap = (n_tokens / min_chunk).max(1);
    k = k.clamp(k_floor.min(k_cap), k_cap.max(k_floor));
    ChunkPlan { spans: split_into(n_tokens, k) }
}

/// Project raw encoder activations into latent width with a SwiGLU MLP.
fn input_projection(params: &HypernetParams, feats: &Tensor) -> Result<Tensor> {
    let gate = linear(feats, &params.proj_gate)?.silu()?;
    let up = linear(feats, &params.proj_up)?;
    linear(&gate.mul(&up)?, &params.proj_down)
}

/// Batched latent encoding: cross-attend the latent queries to projected
/// context features. `feats` is `[B, N, input_dim]`; `valid` marks real
/// context rows. Returns `[B, n_latents, d_latent]`.
pub(crate) fn encode_latents(
    params: &HypernetParams,
    feats: &Tensor,
    valid: &[Vec<bool>],
) -> Result<Tensor> {
    let (b, n, di) = feats.dims3()?;
    if di != params.config.input_dim {
        return Err(D2lError::ShapeMismatch(format!(
            "activation width {di} does not match hypernet input_dim {}",
            params.config.input_dim
        )));
    }
    if valid.len() != b || valid.iter().any(|v| v.len() != n) {
        return Err(D2lError::ShapeMismatch("validity mask shape mismatch".into()));
    }
    if valid.iter().any(|v| !v.iter().any(|&x| x)) {
        return Err(D2lError::Validation(
            "cross-attention requires at least one unmasked context position".into(),
        ));
    }
    let r = params.config.n_latents;
    let heads = params.config.n_attn_heads;
    let dh = params.config.d_latent / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // Key bias [B, 1, 1, N(+r)]: masked context rows excluded; appended
    // latent keys (self-attention toggle) always visible.
    let n_keys = if params.config.latent_self_attention { n + r } else { n };
    let mut bias_data = Vec::with_capacity(b * n_keys);
    for row in valid {
        for &ok in row {
            bias_data.push(if ok { 0.0f32 } else { MASK_BIAS });
        }
        bias_data.extend(std::iter::repeat_n(0.0f32, n_keys - n));
    }
    let bias = Tensor::from_vec(bias_data, (b, 1, 1, n_keys), &device())?;

    let ctx = input_projection(params, feats)?; // [B, N, d_latent]
    let mut u = params
        .latents
        .unsqueeze(0)?
        .broadcast_as((b, r, params.config.d_latent))?
        .contiguous()?;

    for bw in &params.blocks {
        let ln_u = rms_norm(&u, &bw.latent_norm, NORM_EPS)?;
        let ln_c = rms_norm(&ctx, &bw.context_norm, NORM_EPS)?;
        let kv_src = if params.config.latent_self_attention {
            Tensor::cat(&[&ln_c, &ln_u], 1)?
        } else {
            ln_c
        };
        let q = split_heads(&linear(&ln_u, &bw.wq)?, heads, dh)?;
        let k = split_heads(&linear(&kv_src, &bw.wk)?, heads, dh)?;
        let v = split_heads(&linear(&kv_src, &bw.wv)?, heads, dh)?;
        let scores = q
            .matmul(&k.transpose(2, 3)?.contiguous()?)?
            .affine(scale, 0.0)?
            .broadcast_add(&bias)?;
        let probs = softmax(&scores, D::Minus1)?;
        let attn = merge_heads(&probs.matmul(&v)?)?;
        u = u.add(&linear(&attn, &bw.wo)?)?;

        let ln = rms_norm(&u, &bw.ff_norm, NORM_EPS)?;
        let gate = linear(&ln, &bw.w_gate)?.silu()?;
        let up = linear(&ln, &bw.w_up)?;
        u = u.add(&linear(&gate.mul(&up)?, &bw.w_down)?)?;
    }
    rms_norm(&u, &params.final_norm, NORM_EPS)
}

/// Cross-attend latent queries to one context's activation slice.
/// `z` is `[N, input_dim]`; returns `U` of shape `[n_latents, d_latent]`,
/// independent of N.
pub fn cross_attend(params: &HypernetParams, z: &Tensor, valid: &[bool]) -> Result<Tensor> {
    let (n, _) = z.dims2()?;
    if valid.len() != n {
        return Err(D2lError::ShapeMismatch(format!(
            "{n} context rows but {} mask entries",
            valid.len()
        )));
    }
    let out = encode_latents(params, &z.unsqueeze(0)?, &[valid.to_vec()])?;
    Ok(out.squeeze(0)?)
}

/// Map encoded latents through one layer head: latent i becomes row i of A
/// and column i of B; α is attached from the scaler parameters.
pub fn emit_lora_layer(
    u: &Tensor,
    head: &Tensor,
    alpha: &Tensor,
    d_in: usize,
    d_out: usize,
) -> Result<LoraLayerDelta> {
    let out = u.matmul(&head.t()?)?; // [r, d_in + d_out]
    let a = out.narrow(1, 0, d_in)?.contiguous()?;
    let b = out.narrow(1, d_in, d_out)?.t()?.contiguous()?;
    LoraLayerDelta::new(a, b, alpha.clone())
}

/// How per-chunk generation is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerationMode {
    /// All (chunk, layer) pairs encoded in one batched pass.
    Batched,
    /// One chunk and one layer at a time.
    Iterative,
}

/// The activation slice feeding the head of target block `block`.
fn source_slice(
    params: &HypernetParams,
    stack: &ActivationStack,
    block: usize,
) -> Result<Tensor> {
    let idx = match params.config.activation_source {
        ActivationSource::PerLayer => block,
        ActivationSource::SingleLayer(l) => l,
    };
    Ok(stack.layer(idx)?.clone())
}

fn lora_heads(params: &HypernetParams) -> Result<(&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>)> {
    match &params.heads {
        OutputHeads::Lora { heads, alphas } => Ok((heads, alphas)),
        OutputHeads::PrefixKv { .. } => Err(D2lError::Validation(
            "hypernet is configured for prefix-KV output, not LoRA".into(),
        )),
    }
}

/// Generate a LoRA adapter from per-chunk activation stacks of a context.
/// Chunks are encoded independently and composed by rank concatenation, so
/// the result has rank `n_latents · K`.
pub fn generate_adapter(
    params: &HypernetParams,
    chunks: &[ActivationStack],
    mode: GenerationMode,
) -> Result<LoraAdapter> {
    let (heads, alphas) = lora_heads(params)?;
    if chunks.is_empty() {
        return Err(D2lError::Validation("no chunk activations supplied".into()));
    }
    let blocks = params.target.layer_blocks()?;
    let names = &params.target.layer_names;
    let (d_in, d_out) = (params.target.d_in, params.target.d_out);

    let chunk_adapters: Vec<LoraAdapter> = match mode {
        GenerationMode::Iterative => {
            let mut out = Vec::with_capacity(chunks.len());
            for stack in chunks {
                let mut layers = BTreeMap::new();
                match params.config.activation_source {
                    ActivationSource::SingleLayer(_) => {
                        // One encode shared by every head.
                        let z = source_slice(params, stack, 0)?;
                        let u = cross_attend(params, &z, &vec![true; z.dims()[0]])?;
                        for name in names {
                            layers.insert(
                                name.clone(),
                                emit_lora_layer(&u, &heads[name], &alphas[name], d_in, d_out)?,
                            );
                        }
                    }
                    ActivationSource::PerLayer => {
                        for (name, &block) in names.iter().zip(&blocks) {
                            let z = source_slice(params, stack, block)?;
                            let u = cross_attend(params, &z, &vec![true; z.dims()[0]])?;
                            layers.insert(
                                name.clone(),
                                emit_lora_layer(&u, &heads[name], &alphas[name], d_in, d_out)?,
                            );
                        }
                    }
                }
                out.push(LoraAdapter {
                    layers,
                    rank_per_chunk: params.config.n_latents,
                    chunk_count: 1,
                    generator: GENERATOR_VERSION.to_string(),
                });
            }
            out
        }
        GenerationMode::Batched => {
            let us = encode_chunks_batched(params, chunks, &blocks)?;
            let mut out = Vec::with_capacity(chunks.len());
            for per_chunk in us {
                let mut layers = BTreeMap::new();
                for (i, name) in names.iter().enumerate() {
                    let u = match params.config.activation_source {
                        ActivationSource::SingleLayer(_) => &per_chunk[0],
                        ActivationSource::PerLayer => &per_chunk[i],
                    };
                    layers.insert(
                        name.clone(),
                        emit_lora_layer(u, &heads[name], &alphas[name], d_in, d_out)?,
                    );
                }
                out.push(LoraAdapter {
                    layers,
                    rank_per_chunk: params.config.n_latents,
                    chunk_count: 1,
                    generator: GENERATOR_VERSION.to_string(),
                });
            }
            out
        }
    };
    compose_adapters(&chunk_adapters)
}

/// Encode every (chunk, source-slice) pair in one batched pass, padding
/// shorter chunks with masked rows. Returns, per chunk, the latent tensors
/// for each needed slice (one when the source is a single layer).
fn encode_chunks_batched(
    params: &HypernetParams,
    chunks: &[ActivationStack],
    blocks: &[usize],
) -> Result<Vec<Vec<Tensor>>> {
    let slices_per_chunk: Vec<Vec<Tensor>> = chunks
        .iter()
        .map(|stack| -> Result<Vec<Tensor>> {
            match params.config.activation_source {
                ActivationSource::SingleLayer(_) => Ok(vec![source_slice(params, stack, 0)?]),
                ActivationSource::PerLayer => blocks
                    .iter()
                    .map(|&b| source_slice(params, stack, b))
                    .collect(),
            }
        })
        .collect::<Result<_>>()?;

    let n_slices = slices_per_chunk[0].len();
    let max_n = slices_per_chunk
        .iter()
        .flat_map(|v| v.iter().map(|t| t.dims()[0]))
        .max()
        .unwrap_or(0);

    let mut rows = Vec::with_capacity(chunks.len() * n_slices);
    let mut valid = Vec::with_capacity(chunks.len() * n_slices);
    for per_chunk in &slices_per_chunk {
        for t in per_chunk {
            let n = t.dims()[0];
            let padded = if n == max_n {
                t.clone()
            } else {
                let pad = Tensor::zeros(
                    (max_n - n, params.config.input_dim),
                    t.dtype(),
                    t.device(),
                )?;
                Tensor::cat(&[t, &pad], 0)?
            };
            rows.push(padded);
            let mut m = vec![true; n];
            m.resize(max_n, false);
            valid.push(m);
        }
    }
    let refs: Vec<Tensor> = rows
        .iter()
        .map(|t| t.unsqueeze(0))
        .collect::<candle_core::Result<_>>()?;
    let feat_refs: Vec<&Tensor> = refs.iter().collect();
    let feats = Tensor::cat(&feat_refs, 0)?; // [K·n_slices, max_n, D]
    let us = encode_latents(params, &feats, &valid)?;

    let mut out = Vec::with_capacity(chunks.len());
    for c in 0..chunks.len() {
        let mut per_chunk = Vec::with_capacity(n_slices);
        for s in 0..n_slices {
            per_chunk.push(us.narrow(0, c * n_slices + s, 1)?.squeeze(0)?);
        }
        out.push(per_chunk);
    }
    Ok(out)
}

/// Generate per-layer prefix key/value entries from per-chunk activations.
/// Each chunk contributes `n_latents` prefix tokens; chunks concatenate along
/// the prefix axis. With `rope_on_keys`, raw keys pass through the target
/// model's per-layer key normalization and rotary embedding at positions
/// `0..n_latents−1` (each chunk rotated independently).
pub fn generate_prefix_kv(
    params: &HypernetParams,
    lm: &TinyLMParams,
    chunks: &[ActivationStack],
    rope_on_keys: bool,
) -> Result<PrefixKV> {
    let kv_heads = match &params.heads {
        OutputHeads::PrefixKv { kv_heads } => kv_heads,
        OutputHeads::Lora { .. } => {
            return Err(D2lError::Validation(
                "hypernet is configured for LoRA output, not prefix-KV".into(),
            ))
        }
    };
    if chunks.is_empty() {
        return Err(D2lError::Validation("no chunk activations supplied".into()));
    }
    if lm.config.n_layers != params.target.n_lm_layers {
        return Err(D2lError::ShapeMismatch(format!(
            "prefix heads cover {} layers but the model has {}",
            params.target.n_lm_layers,
            lm.config.n_layers
        )));
    }
    let p = params.config.n_latents;
    let (h, dh, d) = (
        params.target.n_lm_heads,
        params.target.d_lm_head,
        params.target.d_lm_model,
    );
    let positions = Tensor::from_vec(
        (0..p as u32).collect::<Vec<_>>(),
        (1, p),
        &device(),
    )?;
    let (cos, sin) = rope_at(lm, &positions)?;

    let mut per_chunk = Vec::with_capacity(chunks.len());
    for stack in chunks {
        let z = source_slice(params, stack, 0)?;
        let u = cross_attend(params, &z, &vec![true; z.dims()[0]])?; // [P, d_latent]
        let mut keys = Vec::with_capacity(lm.config.n_layers);
        let mut values = Vec::with_capacity(lm.config.n_layers);
        for (l, head) in kv_heads.iter().enumerate() {
            let out = u.matmul(&head.t()?)?; // [P, 2·D]
            let k_raw = out.narrow(1, 0, d)?.reshape((p, h, dh))?;
            let v = out.narrow(1, d, d)?.reshape((p, h, dh))?.contiguous()?;
            let k = if rope_on_keys {
                // Match the real-token key path: per-head key-norm, then
                // rotary at prefix positions.
                let k = rms_norm(&k_raw, &lm.blocks[l].k_norm, lm.config.norm_eps)?;
                let k = k.transpose(0, 1)?.unsqueeze(0)?.contiguous()?; // [1, H, P, dh]
                apply_rope(&k, &cos, &sin)?.squeeze(0)?.transpose(0, 1)?.contiguous()?
            } else {
                k_raw.contiguous()?
            };
            keys.push(k);
            values.push(v);
        }
        per_chunk.push(PrefixKV { keys, values, rope_applied: rope_on_keys });
    }
    compose_prefixes(&per_chunk)
}

/// Run each chunk of `tokens` through the frozen encoder LM as a standalone
/// BOS-framed causal sequence and collect its activation stack. The encoder
/// weights are plain tensors, so the harvested features carry no gradient
/// history — only the hypernetwork is trainable downstream.
pub fn harvest_chunk_activations(
    lm: &TinyLMParams,
    tokens: &[u32],
    plan: &ChunkPlan,
) -> Result<Vec<ActivationStack>> {
    if tokens.is_empty() {
        return Err(D2lError::Validation("cannot harvest an empty context".into()));
    }
    let mut stacks = Vec::with_capacity(plan.k());
    for &(start, end) in &plan.spans {
        if start >= end || end > tokens.len() {
            return Err(D2lError::Validation(format!(
                "chunk span ({start}, {end}) out of bounds for {} tokens",
                tokens.len()
            )));
        }
        let mut chunk = Vec::with_capacity(end - start + 1);
        chunk.push(crate::vocab::BOS);
        chunk.extend_from_slice(&tokens[start..end]);
        let (_, acts) =
            forward_with_activations(lm, &chunk, &MaskSpec::causal(chunk.len()), None, None)?;
        stacks.push(acts);
    }
    Ok(stacks)
}

/// Chunk a raw context per the hypernet's own config, harvest activations,
/// and emit the composed LoRA adapter.
pub fn internalize_lora(
    params: &HypernetParams,
    lm: &TinyLMParams,
    context_tokens: &[u32],
    mode: GenerationMode,
) -> Result<LoraAdapter> {
    let plan = chunk_context(
        context_tokens.len(),
        params.config.max_chunk_tokens,
        params.config.min_chunk,
    )?;
    let stacks = harvest_chunk_activations(lm, context_tokens, &plan)?;
    generate_adapter(params, &stacks, mode)
}

/// Chunk a raw context per the hypernet's own config, harvest activations,
/// and emit the composed prefix-KV.
pub fn internalize_prefix(
    params: &HypernetParams,
    lm: &TinyLMParams,
    context_tokens: &[u32],
    rope_on_keys: bool,
) -> Result<PrefixKV> {
    let plan = chunk_context(
        context_tokens.len(),
        params.config.max_chunk_tokens,
        params.config.min_chunk,
    )?;
    let stacks = harvest_chunk_activations(lm, context_tokens, &plan)?;
    generate_prefix_kv(params, lm, stacks.as_slice(), rope_on_keys)
}
