//! LoRA adapter data model and algebra.
//!
//! A generated adapter is a map from target-layer name (`block{i}.mlp.down`)
//! to a low-rank delta `(A, B, α)`. The effective weight update is
//! `ΔW = α ⊙ (B·A)` where α is either a per-layer scalar or a per-rank vector
//! broadcast over the rank dimension. Long contexts are handled by generating
//! one rank-r delta per chunk and concatenating along the rank dimension,
//! which yields a rank `r·K` adapter whose effective delta is exactly the sum
//! of the per-chunk deltas.
//!
//! Prefix-KV adapters (learned key/value entries prepended to every attention
//! layer) live here too, as the alternative adapter parameterization.

use std::collections::BTreeMap;

use candle_core::{Tensor, D};

use crate::checkpoint::{read_container, write_container, ADAPTER_MAGIC};
use crate::error::{D2lError, Result};
use crate::tensor_util::to_f32_vec;

/// Version tag stamped into serialized adapters.
pub const GENERATOR_VERSION: &str = "d2l-0.1";

/// One target layer's low-rank delta.
///
/// `a` has shape `[r, d_in]`, `b` has shape `[d_out, r]`, and `alpha` is a
/// 1-D tensor of length `r` (per-rank scaling) or length 1 (one scalar for
/// the whole layer, broadcast over ranks).
#[derive(Debug, Clone)]
pub struct LoraLayerDelta {
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: Tensor,
}

impl LoraLayerDelta {
    pub fn new(a: Tensor, b: Tensor, alpha: Tensor) -> Result<Self> {
        let delta = Self { a, b, alpha };
        delta.validate()?;
        Ok(delta)
    }

    fn validate(&self) -> Result<()> {
        let (r_a, _d_in) = dims2(&self.a, "A")?;
        let (_d_out, r_b) = dims2(&self.b, "B")?;
        if r_a != r_b {
            return Err(D2lError::ShapeMismatch(format!(
                "rank mismatch: A is rank {r_a}, B is rank {r_b}"
            )));
        }
        let alpha_len = self.alpha.dims1().map_err(|_| {
            D2lError::ShapeMismatch("alpha must be a 1-D tensor".into())
        })?;
        if alpha_len != 1 && alpha_len != r_a {
            return Err(D2lError::ShapeMismatch(format!(
                "alpha length {alpha_len} incompatible with rank {r_a}"
            )));
        }
        for v in to_f32_vec(&self.alpha)? {
            if !v.is_finite() {
                return Err(D2lError::Validation("alpha must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.a.dims()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.dims()[0]
    }

    /// Materialize `α ⊙ (B·A)` as a dense `[d_out, d_in]` matrix.
    ///
    /// The α broadcast scales rank k of the product, i.e. column k of B. This
    /// is differentiable with respect to `a`, `b`, and `alpha`.
    pub fn effective_delta(&self) -> Result<Tensor> {
        let r = self.rank();
        let alpha_row = if self.alpha.dims1()? == 1 {
            self.alpha.broadcast_as((1, r))?
        } else {
            self.alpha.reshape((1, r))?
        };
        let b_scaled = self.b.broadcast_mul(&alpha_row)?;
        Ok(b_scaled.matmul(&self.a)?)
    }

    /// The per-rank view of alpha (a length-1 alpha expands to length r).
    fn alpha_per_rank(&self) -> Result<Tensor> {
        let r = self.rank();
        if self.alpha.dims1()? == 1 {
            Ok(self.alpha.broadcast_as((r,))?.contiguous()?)
        } else {
            Ok(self.alpha.clone())
        }
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    t.dims2()
        .map_err(|_| D2lError::ShapeMismatch(format!("{what} must be a 2-D matrix, got {:?}", t.dims())))
}

/// `W + α ⊙ (B·A)`. `W` is unmodified; the result is a fresh tensor and the
/// operation is differentiable with respect to the delta.
pub fn apply_lora(w: &Tensor, delta: &LoraLayerDelta) -> Result<Tensor> {
    let (d_out, d_in) = dims2(w, "W")?;
    if d_out != delta.d_out() || d_in != delta.d_in() {
        return Err(D2lError::ShapeMismatch(format!(
            "W is [{d_out}, {d_in}] but delta produces [{}, {}]",
            delta.d_out(),
            delta.d_in()
        )));
    }
    Ok(w.add(&delta.effective_delta()?)?)
}

/// Concatenate per-chunk deltas along the rank dimension: A rows stack in
/// chunk order, B columns stack in chunk order, and each chunk keeps its own
/// scaling as a per-rank vector. The composed effective delta equals the sum
/// of the chunk deltas.
pub fn compose_chunks(chunk_deltas: &[LoraLayerDelta]) -> Result<LoraLayerDelta> {
    if chunk_deltas.is_empty() {
        return Err(D2lError::Validation("compose_chunks: empty chunk list".into()));
    }
    let (d_in, d_out, r) = (
        chunk_deltas[0].d_in(),
        chunk_deltas[0].d_out(),
        chunk_deltas[0].rank(),
    );
    for (i, d) in chunk_deltas.iter().enumerate() {
        if d.d_in() != d_in || d.d_out() != d_out || d.rank() != r {
            return Err(D2lError::ShapeMismatch(format!(
                "chunk {i} has shape (r={}, d_in={}, d_out={}), expected (r={r}, d_in={d_in}, d_out={d_out})",
                d.rank(),
                d.d_in(),
                d.d_out()
            )));
        }
    }
    let a_parts: Vec<&Tensor> = chunk_deltas.iter().map(|d| &d.a).collect();
    let b_parts: Vec<&Tensor> = chunk_deltas.iter().map(|d| &d.b).collect();
    let alpha_parts: Vec<Tensor> = chunk_deltas
        .iter()
        .map(|d| d.alpha_per_rank())
        .collect::<Result<_>>()?;
    let alpha_refs: Vec<&Tensor> = alpha_parts.iter().collect();
    LoraLayerDelta::new(
        Tensor::cat(&a_parts, 0)?,
        Tensor::cat(&b_parts, D::Minus1)?,
        Tensor::cat(&alpha_refs, 0)?,
    )
}

/// A full adapter: one delta per target layer plus generation metadata.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub layers: BTreeMap<String, LoraLayerDelta>,
    /// Rank emitted per chunk by the generator.
    pub rank_per_chunk: usize,
    /// Number of context chunks composed into this adapter.
    pub chunk_count: usize,
    pub generator: String,
}

impl LoraAdapter {
    /// Total rank after chunk composition.
    pub fn total_rank(&self) -> usize {
        self.rank_per_chunk * self.chunk_count
    }

    /// A null adapter (B = 0) over the given layer shapes; applying it leaves
    /// the base model bit-identical.
    pub fn null(layer_shapes: &[(String, usize, usize)], rank: usize) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for (name, d_in, d_out) in layer_shapes {
            layers.insert(
                name.clone(),
                LoraLayerDelta::new(
                    Tensor::zeros((rank, *d_in), candle_core::DType::F32, &crate::tensor_util::device())?,
                    Tensor::zeros((*d_out, rank), candle_core::DType::F32, &crate::tensor_util::device())?,
                    crate::tensor_util::const_tensor(1.0, &[rank])?,
                )?,
            );
        }
        Ok(Self {
            layers,
            rank_per_chunk: rank,
            chunk_count: 1,
            generator: GENERATOR_VERSION.to_string(),
        })
    }
}

/// Compose per-chunk adapters layer-by-layer into one higher-rank adapter.
pub fn compose_adapters(chunks: &[LoraAdapter]) -> Result<LoraAdapter> {
    if chunks.is_empty() {
        return Err(D2lError::Validation("compose_adapters: empty chunk list".into()));
    }
    let names: Vec<String> = chunks[0].layers.keys().cloned().collect();
    for (i, c) in chunks.iter().enumerate() {
        let cn: Vec<&String> = c.layers.keys().collect();
        if cn.len() != names.len() || !names.iter().zip(cn).all(|(a, b)| a == b) {
            return Err(D2lError::ShapeMismatch(format!(
                "chunk adapter {i} covers a different layer set"
            )));
        }
    }
    let mut layers = BTreeMap::new();
    for name in &names {
        let deltas: Vec<LoraLayerDelta> =
            chunks.iter().map(|c| c.layers[name].clone()).collect();
        layers.insert(name.clone(), compose_chunks(&deltas)?);
    }
    Ok(LoraAdapter {
        layers,
        rank_per_chunk: chunks[0].rank_per_chunk,
        chunk_count: chunks.iter().map(|c| c.chunk_count).sum(),
        generator: chunks[0].generator.clone(),
    })
}

/// Serialize an adapter to the `.d2la` container format (bit-exact round trip).
pub fn serialize_adapter(adapter: &LoraAdapter) -> Result<Vec<u8>> {
    if adapter.layers.is_empty() {
        return Err(D2lError::Format("adapters must cover at least one layer".into()));
    }
    let config = serde_json::json!({
        "rank_per_chunk": adapter.rank_per_chunk,
        "chunk_count": adapter.chunk_count,
        "generator": adapter.generator,
        "layer_names": adapter.layers.keys().collect::<Vec<_>>(),
    });
    let mut tensors = Vec::new();
    for (name, delta) in &adapter.layers {
        tensors.push((format!("{name}.A"), delta.a.clone()));
        tensors.push((format!("{name}.B"), delta.b.clone()));
        tensors.push((format!("{name}.alpha"), delta.alpha.clone()));
    }
    write_container(&ADAPTER_MAGIC, "lora_adapter", config, &tensors)
}

/// Parse a `.d2la` byte buffer back into an adapter.
pub fn deserialize_adapter(bytes: &[u8]) -> Result<LoraAdapter> {
    let (header, mut map) = read_container(&ADAPTER_MAGIC, bytes)?;
    if header.kind != "lora_adapter" {
        return Err(D2lError::Format(format!(
            "expected kind lora_adapter, found {}",
            header.kind
        )));
    }
    let layer_names: Vec<String> = serde_json::from_value(
        header.config["layer_names"].clone(),
    )
    .map_err(|e| D2lError::Format(format!("bad layer_names in adapter header: {e}")))?;
    if layer_names.is_empty() {
        return Err(D2lError::Format("adapters must cover at least one layer".into()));
    }
    let mut layers = BTreeMap::new();
    for name in layer_names {
        let take = |suffix: &str, map: &mut BTreeMap<String, Tensor>| {
            map.remove(&format!("{name}.{suffix}")).ok_or_else(|| {
                D2lError::Format(format!("adapter missing tensor {name}.{suffix}"))
            })
        };
        let a = take("A", &mut map)?;
        let b = take("B", &mut map)?;
        let alpha = take("alpha", &mut map)?;
        layers.insert(name, LoraLayerDelta::new(a, b, alpha)?);
    }
    Ok(LoraAdapter {
        rank_per_chunk: header.config["rank_per_chunk"].as_u64().unwrap_or(0) as usize,
        chunk_count: header.config["chunk_count"].as_u64().unwrap_or(0) as usize,
        generator: header.config["generator"].as_str().unwrap_or("").to_string(),
        layers,
    })
}

/// Generated prefix key/value entries, one pair of tensors per model layer.
///
/// Keys and values have shape `[n_prefix, n_heads, d_head]`. When
/// `rope_applied` is true the keys were passed through the model's key
/// normalization and rotary embedding at positions `0..n_prefix-1`, and real
/// tokens must be rotated at positions offset by `n_prefix`. When false the
/// keys are used raw and real tokens keep their unshifted positions.
#[derive(Debug, Clone)]
pub struct PrefixKV {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub rope_applied: bool,
}

impl PrefixKV {
    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn n_prefix(&self) -> usize {
        if self.keys.is_empty() {
            0
        } else {
            self.keys[0].dims()[0]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.keys.len() != self.values.len() {
            return Err(D2lError::ShapeMismatch(
                "prefix key/value layer counts differ".into(),
            ));
        }
        for (k, v) in self.keys.iter().zip(self.values.iter()) {
            if k.dims() != v.dims() || k.dims().len() != 3 {
                return Err(D2lError::ShapeMismatch(format!(
                    "prefix tensors must be [n_prefix, n_heads, d_head]; got {:?} / {:?}",
                    k.dims(),
                    v.dims()
                )));
            }
        }
        Ok(())
    }
}

/// Prepend prefix keys/values to per-layer real-token keys/values.
///
/// `keys[l]` / `values[l]` carry the real tokens with shape
/// `[.., n_heads, T, d_head]` (any leading batch dims); the prefix for layer
/// l is broadcast over the batch and concatenated in front along the token
/// axis. Errors if the prefix layer count does not match.
pub fn inject_prefix_kv(
    prefix: &PrefixKV,
    keys: &[Tensor],
    values: &[Tensor],
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    if prefix.n_layers() != keys.len() || keys.len() != values.len() {
        return Err(D2lError::ShapeMismatch(format!(
            "prefix covers {} layers but the model has {}",
            prefix.n_layers(),
            keys.len()
        )));
    }
    let mut out_k = Vec::with_capacity(keys.len());
    let mut out_v = Vec::with_capacity(values.len());
    for (l, (k, v)) in keys.iter().zip(values.iter()).enumerate() {
        // [P, H, dh] -> [H, P, dh], then broadcast over any batch dims of k.
        let pk = prefix.keys[l].transpose(0, 1)?;
        let pv = prefix.values[l].transpose(0, 1)?;
        let (pk, pv) = if k.dims().len() == 4 {
            let b = k.dims()[0];
            let (h, p, dh) = pk.dims3()?;
            (
                pk.unsqueeze(0)?.broadcast_as((b, h, p, dh))?.contiguous()?,
                pv.unsqueeze(0)?.broadcast_as((b, h, p, dh))?.contiguous()?,
            )
        } else {
            (pk.contiguous()?, pv.contiguous()?)
        };
        let token_axis = k.dims().len() - 2;
        out_k.push(Tensor::cat(&[&pk, k], token_axis)?);
        out_v.push(Tensor::cat(&[&pv, v], token_axis)?);
    }
    Ok((out_k, out_v))
}

/// Concatenate per-chunk prefixes along the prefix-token axis, in chunk
/// order. All chunks must agree on `rope_applied` and layer count.
pub fn compose_prefixes(chunks: &[PrefixKV]) -> Result<PrefixKV> {
    if chunks.is_empty() {
        return Err(D2lError::Validation("compose_prefixes: empty chunk list".into()));
    }
    let rope = chunks[0].rope_applied;
    let n_layers = chunks[0].n_layers();
    for c in chunks {
        if c.rope_applied != rope || c.n_layers() != n_layers {
            return Err(D2lError::ShapeMismatch(
                "prefix chunks disagree on rope flag or layer count".into(),
            ));
        }
    }
    let mut keys = Vec::with_capacity(n_layers);
    let mut values = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let ks: Vec<&Tensor> = chunks.iter().map(|c| &c.keys[l]).collect();
        let vs: Vec<&Tensor> = chunks.iter().map(|c| &c.values[l]).collect();
        keys.push(Tensor::cat(&ks, 0)?);
        values.push(Tensor::cat(&vs, 0)?);
    }
    Ok(PrefixKV { keys, values, rope_applied: rope })
}

/// Serialize a prefix-KV artifact into the `.d2la` container (kind "prefix_kv").
pub fn serialize_prefix_kv(prefix: &PrefixKV) -> Result<Vec<u8>> {
    prefix.validate()?;
    if prefix.keys.is_empty() {
        return Err(D2lError::Format("prefix must cover at least one layer".into()));
    }
    let config = serde_json::json!({
        "n_layers": prefix.n_layers(),
        "n_prefix": prefix.n_prefix(),
        "rope_applied": prefix.rope_applied,
        "generator": GENERATOR_VERSION,
    });
    let mut tensors = Vec::new();
    for (l, (k, v)) in prefix.keys.iter().zip(prefix.values.iter()).enumerate() {
        tensors.push((format!("layer{l}.k"), k.clone()));
        tensors.push((format!("layer{l}.v"), v.clone()));
    }
    write_container(&ADAPTER_MAGIC, "prefix_kv", config, &tensors)
}

/// Parse a serialized prefix-KV artifact.
pub fn deserialize_prefix_kv(bytes: &[u8]) -> Result<PrefixKV> {
    let (header, mut map) = read_container(&ADAPTER_MAGIC, bytes)?;
    if header.kind != "prefix_kv" {
        return Err(D2lError::Format(format!(
            "expected kind prefix_kv, found {}",
            header.kind
        )));
    }
    let n_layers = header.config["n_layers"].as_u64().unwrap_or(0) as usize;
    let rope_applied = header.config["rope_applied"].as_bool().unwrap_or(false);
    let mut keys = Vec::with_capacity(n_layers);
    let mut values = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        keys.push(map.remove(&format!("layer{l}.k")).ok_or_else(|| {
            D2lError::Format(format!("prefix missing tensor layer{l}.k"))
        })?);
        values.push(map.remove(&format!("layer{l}.v")).ok_or_else(|| {
            D2lError::Format(format!("prefix missing tensor layer{l}.v"))
        })?);
    }
    let prefix = PrefixKV { keys, values, rope_applied };
    prefix.validate()?;
    Ok(prefix)
}
