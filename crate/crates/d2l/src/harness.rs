//! Experiment orchestration: serializable configs with dotted-key overrides,
//! self-describing run directories, latency/memory instrumentation, metrics
//! tables, and the command implementations behind the CLI.
//!
//! Commands communicate through conventional file names inside one run
//! directory (`lm.d2lc`, `meta_dataset.jsonl`, `hypernet.d2lc`, …), so a full
//! experiment is a sequence of invocations against the same directory. Every
//! command appends a manifest entry recording its seed, counts, and the
//! SHA-256 of each file it wrote; reruns with the same config and seeds
//! reproduce those hashes bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::serialize_adapter;
use crate::distill::{
    run_cd, run_oracle_cd, CdOpts, LossKind, MetaDataset, MetaEntry, MetaSinks, TrainSchedule,
};
use crate::error::{D2lError, Result};
use crate::hypernet::{
    chunk_context, internalize_lora, internalize_prefix, load_hypernet_checkpoint,
    save_hypernet_checkpoint, GenerationMode, HypernetConfig, HypernetParams, HypernetVars,
    OutputMode,
};
use crate::prompts;
use crate::target_lm::{
    kv_cache_footprint, load_lm_checkpoint, pretrain_lm, save_lm_checkpoint, LMConfig,
    PretrainOpts, TinyLMParams,
};
use crate::tasks::{
    eval_niah, gen_niah_sample, gen_queries, needle_sentence, sample_self_response,
    save_niah_jsonl, substream, AdapterSource, CorpusOpts, EvalOpts, NiahInstance,
    QueryTemplateSet, NIAH_QUERY,
};
use crate::tasks::build_pretrain_corpus;
use crate::vocab;

/// Version of the metrics CSV schema (the first row of every metrics file).
pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Method identifiers used in metrics rows, in canonical report order.
pub const METHOD_IN_CONTEXT: &str = "in_context";
pub const METHOD_HYPERNET_BATCHED: &str = "hypernet-batched";
pub const METHOD_HYPERNET_ITERATIVE: &str = "hypernet-iterative";
pub const METHOD_CD_ORACLE: &str = "cd-oracle";
pub const METHOD_CD_GENERATED_Q: &str = "cd-generated-q";
pub const METHOD_HYPERKV: &str = "hyperkv";

/// All six evaluation methods in canonical order.
pub const ALL_METHODS: [&str; 6] = [
    METHOD_IN_CONTEXT,
    METHOD_HYPERNET_BATCHED,
    METHOD_HYPERNET_ITERATIVE,
    METHOD_CD_ORACLE,
    METHOD_CD_GENERATED_Q,
    METHOD_HYPERKV,
];

// Conventional artifact names inside a run directory.
const LM_FILE: &str = "lm.d2lc";
const DATASET_FILE: &str = "meta_dataset.jsonl";
const EVAL_SET_FILE: &str = "niah_eval.jsonl";
const HYPERNET_FILE: &str = "hypernet.d2lc";
const HYPERKV_FILE: &str = "hyperkv.d2lc";
const METRICS_CSV: &str = "metrics.csv";
const METRICS_JSON: &str = "metrics.json";
const MANIFEST_FILE: &str = "manifest.json";
const CONFIG_FILE: &str = "config.json";

/// Seeds for the independent random streams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Pretraining corpus and teacher initialization.
    pub lm: u64,
    /// Meta-training dataset generation.
    pub data: u64,
    /// Hypernetwork initialization (batch order is `schedule.seed`).
    pub meta_init: u64,
    /// Held-out evaluation instances.
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { lm: 11, data: 22, meta_init: 33, eval: 44 }
    }
}

/// Teacher pretraining section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    pub corpus: CorpusOpts,
    /// Token length of each packed buffer.
    pub buffer_len: usize,
    /// Buffers per optimizer step.
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub log_every: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let o = PretrainOpts::default();
        Self {
            steps: 3_000,
            lr: 1e-3,
            corpus: CorpusOpts::default(),
            buffer_len: o.buffer_len,
            batch_size: o.batch_size,
            warmup_steps: o.warmup_steps,
            log_every: o.log_every,
        }
    }
}

/// Meta-training dataset section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Number of training contexts (haystacks).
    pub n_contexts: usize,
    /// Context lengths drawn uniformly from this inclusive range.
    pub length_range: (usize, usize),
    /// Teacher logits recorded per response position.
    pub topk: usize,
    /// Decode budget for teacher self-responses.
    pub max_new: usize,
    /// Additional generated queries per context (0 = task query only).
    pub queries_per_context: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_contexts: 512,
            // The nominal schedule starts at 32 tokens; the needle sentence
            // with a 4-digit value is 33 characters, so 33 is the floor a
            // character-level haystack can host.
            length_range: (33, 256),
            topk: 16,
            max_new: 8,
            queries_per_context: 0,
        }
    }
}

/// Gradient-descent context-distillation baseline section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdSection {
    pub steps: usize,
    pub lr: f64,
    pub rank: usize,
    /// Top-k truncation of recorded targets; null keeps the full vocabulary.
    pub k_top: Option<usize>,
    /// Decode budget for teacher responses during distillation.
    pub max_new: usize,
    /// Generated queries for the query-independent variant.
    pub n_queries: usize,
    /// Instances per length actually distilled during evaluation (CD is the
    /// slow path; accuracy for CD rows is measured over this many).
    pub eval_instances: usize,
}

impl Default for CdSection {
    fn default() -> Self {
        let o = CdOpts::default();
        Self {
            steps: o.steps,
            lr: o.lr,
            rank: o.rank,
            k_top: o.k_top,
            max_new: o.max_new,
            n_queries: 10,
            eval_instances: 2,
        }
    }
}

impl CdSection {
    fn opts(&self, seed: u64) -> CdOpts {
        CdOpts {
            steps: self.steps,
            lr: self.lr,
            rank: self.rank,
            seed,
            k_top: self.k_top,
            max_new: self.max_new,
        }
    }
}

/// Evaluation section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Context lengths evaluated (one metrics row per method per length).
    pub lengths: Vec<usize>,
    /// Held-out instances per length.
    pub n_instances: usize,
    /// Decode budget for answers.
    pub max_new: usize,
    /// Warm repetitions for latency statistics (one extra warm-up run is
    /// always excluded).
    pub latency_repeats: usize,
    /// Subset of [`ALL_METHODS`] to evaluate.
    pub methods: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            lengths: vec![33, 64, 128, 256, 512, 1024],
            n_instances: 25,
            max_new: 8,
            latency_repeats: 5,
            methods: ALL_METHODS.iter().map(|m| m.to_string()).collect(),
        }
    }
}

/// The full, serializable description of an experiment. A run directory
/// always contains the exact config used (`config.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Subdirectory name under the output root.
    pub run_name: String,
    /// Output root; falls back to `$D2L_RUN_DIR`, then `./runs`.
    pub out_dir: Option<PathBuf>,
    pub seeds: Seeds,
    pub lm: LMConfig,
    pub pretrain: PretrainSection,
    pub data: DataSection,
    pub hypernet: HypernetConfig,
    pub schedule: TrainSchedule,
    /// Meta-training objective.
    pub loss: LossKind,
    /// Resume meta-training from the latest periodic checkpoint if present.
    pub resume: bool,
    pub cd: CdSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            out_dir: None,
            seeds: Seeds::default(),
            lm: LMConfig::desk_default(),
            pretrain: PretrainSection::default(),
            data: DataSection::default(),
            hypernet: HypernetConfig::desk_default(),
            schedule: TrainSchedule::default(),
            loss: LossKind::Kl,
            resume: false,
            cd: CdSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(D2lError::Validation(format!(
                "run_name must be a plain directory name, got {:?}",
                self.run_name
            )));
        }
        self.lm.validate()?;
        self.hypernet.validate()?;
        self.schedule.validate()?;
        if self.pretrain.steps == 0 || !(self.pretrain.lr.is_finite() && self.pretrain.lr > 0.0) {
            return Err(D2lError::Validation(
                "pretrain.steps must be ≥ 1 and pretrain.lr positive".into(),
            ));
        }
        if self.data.n_contexts == 0 {
            return Err(D2lError::Validation("data.n_contexts must be ≥ 1".into()));
        }
        let min_len = needle_sentence("0000").len();
        if self.data.length_range.0 > self.data.length_range.1
            || self.data.length_range.0 < min_len
        {
            return Err(D2lError::Validation(format!(
                "data.length_range {:?} cannot host the needle sentence ({min_len} chars)",
                self.data.length_range
            )));
        }
        if self.data.topk == 0 || self.data.max_new == 0 {
            return Err(D2lError::Validation("data.topk and data.max_new must be ≥ 1".into()));
        }
        if self.eval.lengths.is_empty() {
            return Err(D2lError::Validation("eval.lengths is empty".into()));
        }
        for &l in &self.eval.lengths {
            if l < min_len {
                return Err(D2lError::Validation(format!(
                    "eval length {l} is below the needle sentence length {min_len}"
                )));
            }
        }
        if self.eval.n_instances == 0 || self.eval.latency_repeats == 0 || self.eval.max_new == 0 {
            return Err(D2lError::Validation(
                "eval.n_instances, eval.latency_repeats, and eval.max_new must be ≥ 1".into(),
            ));
        }
        for m in &self.eval.methods {
            if !ALL_METHODS.contains(&m.as_str()) {
                return Err(D2lError::Validation(format!(
                    "unknown eval method {m:?}; known methods: {}",
                    ALL_METHODS.join(", ")
                )));
            }
        }
        if self.cd.rank == 0 || !(self.cd.lr.is_finite() && self.cd.lr > 0.0) {
            return Err(D2lError::Validation("cd.rank must be ≥ 1 and cd.lr positive".into()));
        }
        if self.cd.eval_instances == 0 || self.cd.n_queries == 0 {
            return Err(D2lError::Validation(
                "cd.eval_instances and cd.n_queries must be ≥ 1".into(),
            ));
        }
        Ok(())
    }

    fn pretrain_opts(&self) -> PretrainOpts {
        PretrainOpts {
            seed: self.seeds.lm,
            buffer_len: self.pretrain.buffer_len,
            batch_size: self.pretrain.batch_size,
            warmup_steps: self.pretrain.warmup_steps,
            log_every: self.pretrain.log_every,
        }
    }
}

/// Recursively merge `patch` onto `base`: objects merge key-wise, everything
/// else replaces. Lets partial config files override only the keys they name.
pub fn deep_merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Apply one `--set key.path=value` override to a JSON config tree. Numeric
/// path segments index arrays; the value is parsed as JSON when possible and
/// falls back to a plain string.
pub fn apply_dotted_override(
    tree: &mut serde_json::Value,
    key: &str,
    raw_value: &str,
) -> Result<()> {
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(D2lError::Validation(format!("bad override key {key:?}")));
    }
    let mut node = tree;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        let value = serde_json::from_str::<serde_json::Value>(raw_value)
            .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));
        match node {
            serde_json::Value::Object(map) => {
                if last {
                    map.insert(seg.to_string(), value);
                    return Ok(());
                }
                node = map.entry(seg.to_string()).or_insert_with(|| serde_json::json!({}));
            }
            serde_json::Value::Array(items) => {
                let idx: usize = seg.parse().map_err(|_| {
                    D2lError::Validation(format!(
                        "override {key:?}: segment {seg:?} is not an array index"
                    ))
                })?;
                let slot = items.get_mut(idx).ok_or_else(|| {
                    D2lError::Validation(format!(
                        "override {key:?}: index {idx} out of bounds"
                    ))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                node = slot;
            }
            other => {
                return Err(D2lError::Validation(format!(
                    "override {key:?}: segment {seg:?} descends into non-container {other}"
                )));
            }
        }
    }
    unreachable!("loop returns on the last segment")
}

/// Load a config: desk defaults, deep-merged with the optional JSON file,
/// then dotted-key overrides, then validation. Unknown keys anywhere are
/// rejected with the offending field named.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig> {
    let mut tree = serde_json::to_value(ExperimentConfig::default())?;
    if let Some(p) = path {
        let text = fs::read_to_string(p)?;
        let user: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| D2lError::Validation(format!("config {}: {e}", p.display())))?;
        deep_merge(&mut tree, user);
    }
    for (k, v) in overrides {
        apply_dotted_override(&mut tree, k, v)?;
    }
    let config: ExperimentConfig = serde_json::from_value(tree)
        .map_err(|e| D2lError::Validation(format!("config error: {e}")))?;
    config.validate()?;
    Ok(config)
}

/// Resolve the run directory for a config: explicit `out_dir`, else the
/// `D2L_RUN_DIR` environment variable, else `./runs`, joined with `run_name`.
pub fn resolve_run_dir(config: &ExperimentConfig) -> PathBuf {
    let root = config
        .out_dir
        .clone()
        .or_else(|| std::env::var_os("D2L_RUN_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(&config.run_name)
}

/// One manifest entry: what a command produced and from which seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub seed: u64,
    /// Named counts (samples written, steps run, …).
    pub counts: BTreeMap<String, u64>,
    /// Relative path → SHA-256 of every file the command wrote.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub entries: Vec<ManifestEntry>,
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// A run directory: holds the exact config used plus every artifact and a
/// manifest describing them.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Create (or reuse) the directory and write `config.json`.
    pub fn create(config: &ExperimentConfig) -> Result<Self> {
        let root = resolve_run_dir(config);
        fs::create_dir_all(&root)?;
        let run = Self { root };
        fs::write(run.path(CONFIG_FILE), serde_json::to_string_pretty(config)?)?;
        Ok(run)
    }

    /// Open an existing run directory without touching its config.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(D2lError::Validation(format!(
                "run directory {} does not exist",
                root.display()
            )));
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Append a manifest entry; `files` are hashed here, relative to the run
    /// directory root.
    pub fn record(
        &self,
        command: &str,
        seed: u64,
        counts: BTreeMap<String, u64>,
        files: &[&str],
    ) -> Result<()> {
        let mut manifest = self.load_manifest()?;
        let mut hashes = BTreeMap::new();
        for rel in files {
            hashes.insert(rel.to_string(), file_sha256(&self.path(rel))?);
        }
        manifest.schema_version = METRICS_SCHEMA_VERSION;
        manifest.entries.push(ManifestEntry {
            command: command.to_string(),
            seed,
            counts,
            files: hashes,
        });
        fs::write(self.path(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_manifest(&self) -> Result<Manifest> {
        let path = self.path(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn require(&self, name: &str, produced_by: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(D2lError::Validation(format!(
                "missing {} in {} — run `{produced_by}` first",
                name,
                self.root.display()
            )));
        }
        Ok(p)
    }
}

/// Latency statistics over warm repetitions (monotonic clock; one warm-up
/// call is always run first and excluded).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub repeats: usize,
}

/// Time `op` over `repeats` warm repetitions. The first invocation is a
/// warm-up excluded from the statistics, so `op` runs `repeats + 1` times.
/// With `repeats == 1` the standard deviation is exactly 0.
pub fn measure_update_latency<F>(mut op: F, repeats: usize) -> Result<LatencyStats>
where
    F: FnMut() -> Result<()>,
{
    if repeats == 0 {
        return Err(D2lError::Validation("latency repeats must be ≥ 1".into()));
    }
    op()?; // warm-up
    let mut samples_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        op()?;
        samples_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean = samples_ms.iter().sum::<f64>() / repeats as f64;
    let var = samples_ms.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / repeats as f64;
    Ok(LatencyStats { mean_ms: mean, std_ms: var.sqrt(), repeats })
}

// ---------------------------------------------------------------------------
// Analytic memory accounting.
//
// Desk-scale analytic byte counts, not hardware peak measurements: the
// columns state exactly which resident tensors they count, and reports keep
// the optional allocator-peak column separate (empty when no probe ran).
// ---------------------------------------------------------------------------

/// Bytes of the dense per-layer deltas the model resolves when a LoRA
/// adapter is applied: Σ over target layers of d_in·d_out·4. Independent of
/// rank and chunk count — this is why the internalized inference footprint is
/// flat in context length.
pub fn merged_delta_bytes(config: &LMConfig) -> u64 {
    config
        .target_layer_shapes()
        .iter()
        .map(|(_, d_in, d_out)| (d_in * d_out * 4) as u64)
        .sum()
}

/// Bytes of trainable state for a gradient-descent CD run at `rank`:
/// parameters (A and B per target layer) plus their gradients under plain
/// SGD (no optimizer moments).
pub fn cd_update_state_bytes(config: &LMConfig, rank: usize) -> u64 {
    let params: u64 = config
        .target_layer_shapes()
        .iter()
        .map(|(_, d_in, d_out)| (rank * (d_in + d_out) * 4) as u64)
        .sum();
    2 * params
}

/// Bytes of the hypernetwork's resident weights — the state needed to
/// perform a forward-pass update.
pub fn hypernet_resident_bytes(params: &HypernetParams) -> u64 {
    params.param_count() as u64 * 4
}

/// Additional inference memory for carrying `extra_tokens` of context in the
/// prompt: their key/value cache entries.
pub fn in_context_footprint_bytes(config: &LMConfig, extra_tokens: usize) -> u64 {
    kv_cache_footprint(extra_tokens, 0, config, 4)
}

/// Additional inference memory for `n_prefix` injected prefix entries per
/// layer.
pub fn prefix_footprint_bytes(config: &LMConfig, n_prefix: usize) -> u64 {
    kv_cache_footprint(n_prefix, 0, config, 4)
}

/// One metrics row: a (method, context length) cell of the evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub context_length: usize,
    pub accuracy: f64,
    pub latency_ms_mean: f64,
    pub latency_ms_std: f64,
    /// Analytic bytes of state touched to produce the update (0 when the
    /// method has no update step).
    pub update_memory_bytes: u64,
    /// Analytic additional inference memory: context KV cache (in-context),
    /// resolved dense deltas (LoRA methods), or injected prefix entries.
    pub inference_footprint_bytes: u64,
    /// Optional allocator peak probe; absent when no probe ran.
    pub peak_alloc_bytes: Option<u64>,
}

const CSV_HEADER: &str = "method,context_length,accuracy,latency_ms_mean,latency_ms_std,update_memory_bytes,inference_footprint_bytes,peak_alloc_bytes";

/// Write a metrics table: a `schema_version` row, the fixed header, one line
/// per row.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("schema_version,{METRICS_SCHEMA_VERSION}\n"));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let peak = r.peak_alloc_bytes.map(|b| b.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.6},{:.3},{:.3},{},{},{}\n",
            r.method,
            r.context_length,
            r.accuracy,
            r.latency_ms_mean,
            r.latency_ms_std,
            r.update_memory_bytes,
            r.inference_footprint_bytes,
            peak
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read just the schema version of a metrics file.
pub fn read_metrics_version(path: &Path) -> Result<u32> {
    let text = fs::read_to_string(path)?;
    let first = text.lines().next().unwrap_or_default();
    let rest = first.strip_prefix("schema_version,").ok_or_else(|| {
        D2lError::Format(format!(
            "{}: expected a schema_version row, found {first:?}",
            path.display()
        ))
    })?;
    rest.trim().parse().map_err(|_| {
        D2lError::Format(format!("{}: bad schema version {rest:?}", path.display()))
    })
}

/// Read a metrics table written by [`write_metrics_csv`]. Refuses files from
/// a different schema version.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let version = read_metrics_version(path)?;
    if version != METRICS_SCHEMA_VERSION {
        return Err(D2lError::Version(format!(
            "{}: metrics schema version {version}, this build reads {METRICS_SCHEMA_VERSION}",
            path.display()
        )));
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    lines.next(); // schema row, already validated
    let header = lines.next().unwrap_or_default();
    if header != CSV_HEADER {
        return Err(D2lError::Format(format!(
            "{}: unexpected column header {header:?}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(D2lError::Format(format!(
                "{} row {}: expected 8 fields, found {}",
                path.display(),
                i + 3,
                f.len()
            )));
        }
        let parse_err = |what: &str| {
            D2lError::Format(format!("{} row {}: bad {what}", path.display(), i + 3))
        };
        rows.push(MetricsRow {
            method: f[0].to_string(),
            context_length: f[1].parse().map_err(|_| parse_err("context_length"))?,
            accuracy: f[2].parse().map_err(|_| parse_err("accuracy"))?,
            latency_ms_mean: f[3].parse().map_err(|_| parse_err("latency_ms_mean"))?,
            latency_ms_std: f[4].parse().map_err(|_| parse_err("latency_ms_std"))?,
            update_memory_bytes: f[5].parse().map_err(|_| parse_err("update_memory_bytes"))?,
            inference_footprint_bytes: f[6]
                .parse()
                .map_err(|_| parse_err("inference_footprint_bytes"))?,
            peak_alloc_bytes: if f[7].is_empty() {
                None
            } else {
                Some(f[7].parse().map_err(|_| parse_err("peak_alloc_bytes"))?)
            },
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Commands.
// ---------------------------------------------------------------------------

/// Result of [`cmd_pretrain_lm`].
#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub checksum: String,
    pub final_loss: f64,
    pub steps: usize,
}

/// Pretrain the teacher on the synthetic corpus and write `lm.d2lc` plus a
/// per-step loss log.
pub fn cmd_pretrain_lm(config: &ExperimentConfig, run: &RunDir) -> Result<PretrainSummary> {
    config.validate()?;
    let corpus = build_pretrain_corpus(config.seeds.lm, &config.pretrain.corpus)?;
    let out = pretrain_lm(
        &corpus,
        &config.lm,
        config.pretrain.steps,
        config.pretrain.lr,
        &config.pretrain_opts(),
    )?;
    let ckpt = run.path(LM_FILE);
    save_lm_checkpoint(&ckpt, &out.params)?;

    let mut log = String::new();
    for (step, loss) in out.losses.iter().enumerate() {
        log.push_str(&serde_json::json!({ "step": step, "loss": loss }).to_string());
        log.push('\n');
    }
    fs::write(run.path("pretrain_log.jsonl"), log)?;

    let checksum = out.params.checksum()?;
    let mut counts = BTreeMap::new();
    counts.insert("steps".into(), out.losses.len() as u64);
    counts.insert("corpus_docs".into(), corpus.len() as u64);
    run.record("pretrain-lm", config.seeds.lm, counts, &[LM_FILE, "pretrain_log.jsonl"])?;
    Ok(PretrainSummary {
        checkpoint: ckpt,
        checksum,
        final_loss: *out.losses.last().unwrap_or(&f64::NAN),
        steps: out.losses.len(),
    })
}

/// Result of [`cmd_gen_data`].
#[derive(Debug, Clone, Serialize)]
pub struct GenDataSummary {
    pub contexts: usize,
    pub samples: usize,
    /// Teacher responses that came back empty and were discarded.
    pub skipped_empty: usize,
    pub eval_instances: usize,
    pub dataset_path: PathBuf,
    pub eval_path: PathBuf,
}

/// Generate the meta-training dataset (teacher self-responses with top-k
/// targets) and the held-out evaluation instances.
pub fn cmd_gen_data(config: &ExperimentConfig, run: &RunDir) -> Result<GenDataSummary> {
    config.validate()?;
    let lm = load_lm_checkpoint(&run.require(LM_FILE, "pretrain-lm")?)?;
    let templates = QueryTemplateSet::desk_default();

    let mut entries = Vec::new();
    let mut samples = 0usize;
    let mut skipped = 0usize;
    for i in 0..config.data.n_contexts {
        let mut rng = substream(config.seeds.data, i as u64);
        let len = rng.random_range(config.data.length_range.0..=config.data.length_range.1);
        let inst = gen_niah_sample(&mut rng, len, 4)?;
        let mut entry = MetaEntry { context: inst.haystack.clone(), samples: Vec::new() };

        let mut queries = vec![NIAH_QUERY.to_string()];
        if config.data.queries_per_context > 0 {
            let out =
                gen_queries(&inst.haystack, config.data.queries_per_context, &mut rng, &templates)?;
            queries.extend(out.queries.into_iter().map(|q| q.text));
        }
        for q in &queries {
            match sample_self_response(&lm, &inst.haystack, q, config.data.max_new, config.data.topk)?
            {
                Some(s) => entry.samples.push(s),
                None => skipped += 1,
            }
        }
        if entry.samples.is_empty() {
            log::warn!("context {i}: every teacher response was empty; dropping the context");
            continue;
        }
        samples += entry.samples.len();
        entries.push(entry);
    }
    let dataset = MetaDataset { entries };
    dataset.validate()?;
    let dataset_path = run.path(DATASET_FILE);
    dataset.save_jsonl(&dataset_path)?;

    let mut eval_set = Vec::new();
    for &len in &config.eval.lengths {
        eval_set.extend(eval_instances(config.seeds.eval, len, config.eval.n_instances)?);
    }
    let eval_path = run.path(EVAL_SET_FILE);
    save_niah_jsonl(&eval_path, &eval_set)?;

    let mut counts = BTreeMap::new();
    counts.insert("contexts".into(), dataset.entries.len() as u64);
    counts.insert("samples".into(), samples as u64);
    counts.insert("skipped_empty".into(), skipped as u64);
    counts.insert("eval_instances".into(), eval_set.len() as u64);
    run.record("gen-data", config.seeds.data, counts, &[DATASET_FILE, EVAL_SET_FILE])?;
    Ok(GenDataSummary {
        contexts: dataset.entries.len(),
        samples,
        skipped_empty: skipped,
        eval_instances: eval_set.len(),
        dataset_path,
        eval_path,
    })
}

/// Held-out evaluation instances for one context length: a per-(length,
/// index) substream of `seed`, disjoint from the data-generation stream by
/// seed choice.
pub fn eval_instances(seed: u64, length: usize, n: usize) -> Result<Vec<NiahInstance>> {
    (0..n)
        .map(|i| {
            let mut rng =
                substream(seed ^ (length as u64).wrapping_mul(0xA24B_AED4_963E_E407), i as u64);
            gen_niah_sample(&mut rng, length, 4)
        })
        .collect()
}

/// Result of [`cmd_meta_train`].
#[derive(Debug, Clone, Serialize)]
pub struct MetaTrainSummary {
    pub checkpoint: PathBuf,
    pub steps_run: usize,
    pub final_loss: f64,
    pub final_checksum: String,
    /// Step count recovered from a periodic checkpoint, when resuming.
    pub resumed_from: Option<usize>,
}

fn latest_periodic_checkpoint(dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(step) = name
            .strip_prefix("hypernet-step")
            .and_then(|s| s.strip_suffix(".d2lc"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            if best.as_ref().map(|(b, _)| step > *b).unwrap_or(true) {
                best = Some((step, path));
            }
        }
    }
    Ok(best)
}

/// Meta-train the hypernetwork on the generated dataset; writes
/// `hypernet.d2lc` (LoRA mode) or `hyperkv.d2lc` (prefix mode), a JSONL
/// training log, and periodic checkpoints under `checkpoints/`.
///
/// With `config.resume`, the latest periodic checkpoint seeds the weights and
/// its step count is subtracted from the schedule (optimizer moments restart;
/// at desk scale the warm-up transient is a few steps).
pub fn cmd_meta_train(config: &ExperimentConfig, run: &RunDir) -> Result<MetaTrainSummary> {
    config.validate()?;
    let lm = load_lm_checkpoint(&run.require(LM_FILE, "pretrain-lm")?)?;
    let dataset = MetaDataset::load_jsonl(&run.require(DATASET_FILE, "gen-data")?)?;
    let base_checksum = lm.checksum()?;

    let mut hyper = HypernetVars::init(&config.hypernet, &config.lm, config.seeds.meta_init)?;
    let ckpt_dir = run.path("checkpoints");
    let mut schedule = config.schedule.clone();
    let mut resumed_from = None;
    if config.resume {
        if let Some((step, path)) = latest_periodic_checkpoint(&ckpt_dir)? {
            hyper.load_params(&load_hypernet_checkpoint(&path)?)?;
            let done1 = step.min(schedule.stage1_steps);
            let done2 = step.saturating_sub(schedule.stage1_steps).min(schedule.stage2_steps);
            schedule.stage1_steps -= done1;
            schedule.stage2_steps -= done2;
            resumed_from = Some(step);
            log::info!("resuming from {} (step {step})", path.display());
        }
    }

    let sinks = MetaSinks {
        log_path: Some(run.path("meta_log.jsonl")),
        checkpoint_dir: Some(ckpt_dir),
    };
    let report = crate::distill::meta_train(&mut hyper, &lm, &dataset, &schedule, config.loss, &sinks)?;

    if lm.checksum()? != base_checksum {
        return Err(D2lError::Checksum(
            "frozen target model changed during meta-training".into(),
        ));
    }
    let artifact = match config.hypernet.output_mode {
        OutputMode::Lora => HYPERNET_FILE,
        OutputMode::PrefixKv => HYPERKV_FILE,
    };
    let ckpt = run.path(artifact);
    save_hypernet_checkpoint(&ckpt, &hyper.freeze()?)?;

    let mut counts = BTreeMap::new();
    counts.insert("steps_run".into(), report.steps_run as u64);
    counts.insert("dataset_contexts".into(), dataset.entries.len() as u64);
    run.record("meta-train", config.seeds.meta_init, counts, &[artifact])?;
    Ok(MetaTrainSummary {
        checkpoint: ckpt,
        steps_run: report.steps_run,
        final_loss: *report.losses.last().unwrap_or(&f64::NAN),
        final_checksum: report.final_checksum,
        resumed_from,
    })
}

/// Result of [`cmd_cd_baseline`].
#[derive(Debug, Clone, Serialize)]
pub struct CdBaselineSummary {
    pub adapters_written: usize,
    pub metrics_path: PathBuf,
    pub rows: Vec<MetricsRow>,
}

/// Run the gradient-descent context-distillation baselines (oracle query and
/// generated queries) over the evaluation lengths; writes the trained
/// adapters under `cd/` and a `cd_metrics.csv` table.
pub fn cmd_cd_baseline(config: &ExperimentConfig, run: &RunDir) -> Result<CdBaselineSummary> {
    config.validate()?;
    let lm = load_lm_checkpoint(&run.require(LM_FILE, "pretrain-lm")?)?;
    let cd_dir = run.path("cd");
    fs::create_dir_all(&cd_dir)?;

    let mut rows = Vec::new();
    let mut written = 0usize;
    let mut files: Vec<String> = Vec::new();
    for &len in &config.eval.lengths {
        let instances = eval_instances(config.seeds.eval, len, config.cd.eval_instances)?;
        for method in [METHOD_CD_ORACLE, METHOD_CD_GENERATED_Q] {
            let mut correct = 0usize;
            for (i, inst) in instances.iter().enumerate() {
                let adapter = train_cd_adapter(&lm, config, inst, method)?;
                let name = format!("cd/len{len}_i{i}_{method}.d2la");
                fs::write(run.path(&name), serialize_adapter(&adapter)?)?;
                files.push(name);
                written += 1;
                let outcome = eval_niah(
                    &lm,
                    &AdapterSource::Adapter(&adapter),
                    std::slice::from_ref(inst),
                    &EvalOpts { max_new: config.eval.max_new },
                )?;
                correct += outcome[0].correct as usize;
            }
            let latency = measure_update_latency(
                || train_cd_adapter(&lm, config, &instances[0], method).map(|_| ()),
                config.eval.latency_repeats,
            )?;
            rows.push(MetricsRow {
                method: method.to_string(),
                context_length: len,
                accuracy: correct as f64 / instances.len() as f64,
                latency_ms_mean: latency.mean_ms,
                latency_ms_std: latency.std_ms,
                update_memory_bytes: cd_update_state_bytes(&config.lm, config.cd.rank),
                inference_footprint_bytes: merged_delta_bytes(&config.lm),
                peak_alloc_bytes: None,
            });
        }
    }
    let metrics_path = run.path("cd_metrics.csv");
    write_metrics_csv(&metrics_path, &rows)?;
    files.push("cd_metrics.csv".into());

    let mut counts = BTreeMap::new();
    counts.insert("adapters".into(), written as u64);
    counts.insert("rows".into(), rows.len() as u64);
    let file_refs: Vec<&str> = files.iter().map(String::as_str).collect();
    run.record("cd-baseline", config.seeds.eval, counts, &file_refs)?;
    Ok(CdBaselineSummary { adapters_written: written, metrics_path, rows })
}

/// Distill one instance's haystack into an adapter with the configured CD
/// variant: the oracle trains on the task query itself, the generated-queries
/// variant on rule-generated queries plus teacher self-responses.
fn train_cd_adapter(
    lm: &TinyLMParams,
    config: &ExperimentConfig,
    inst: &NiahInstance,
    method: &str,
) -> Result<crate::adapters::LoraAdapter> {
    let opts = config.cd.opts(config.seeds.eval);
    match method {
        METHOD_CD_ORACLE => Ok(run_oracle_cd(lm, &inst.haystack, &inst.query, &opts)?.adapter),
        METHOD_CD_GENERATED_Q => {
            // The deployable variant: the task query is unknown, so distill
            // over rule-generated queries and teacher self-responses.
            let mut rng = substream(config.seeds.eval ^ 0xC0DE_5EED, inst.position as u64);
            let templates = QueryTemplateSet::desk_default();
            let queries = gen_queries(&inst.haystack, config.cd.n_queries, &mut rng, &templates)?;
            let k = opts.k_top.unwrap_or_else(vocab::vocab_size);
            let mut samples = Vec::new();
            for q in &queries.queries {
                if let Some(s) =
                    sample_self_response(lm, &inst.haystack, &q.text, opts.max_new, k)?
                {
                    samples.push(s);
                }
            }
            if samples.is_empty() {
                return Err(D2lError::Validation(
                    "every generated-query teacher response was empty".into(),
                ));
            }
            Ok(run_cd(lm, &samples, &opts)?.adapter)
        }
        other => Err(D2lError::Validation(format!("not a CD method: {other}"))),
    }
}

/// Result of [`cmd_eval`].
#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub rows: Vec<MetricsRow>,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
}

/// Evaluate every configured method at every configured length and write the
/// metrics table (CSV + JSON). Internalized methods are audited: the prompt
/// fed to the model must contain exactly the query tokens, never the
/// haystack.
pub fn cmd_eval(config: &ExperimentConfig, run: &RunDir) -> Result<EvalSummary> {
    config.validate()?;
    let lm = load_lm_checkpoint(&run.require(LM_FILE, "pretrain-lm")?)?;

    let needs = |m: &str| config.eval.methods.iter().any(|x| x == m);
    let lora_hyper = if needs(METHOD_HYPERNET_BATCHED) || needs(METHOD_HYPERNET_ITERATIVE) {
        Some(load_hypernet_checkpoint(&run.require(HYPERNET_FILE, "meta-train")?)?)
    } else {
        None
    };
    let kv_hyper = if needs(METHOD_HYPERKV) {
        let p = load_hypernet_checkpoint(&run.require(
            HYPERKV_FILE,
            "meta-train with --set hypernet.output_mode=prefix_kv",
        )?)?;
        if p.config.output_mode != OutputMode::PrefixKv {
            return Err(D2lError::Validation(format!(
                "{HYPERKV_FILE} holds a {:?} hypernetwork",
                p.config.output_mode
            )));
        }
        Some(p)
    } else {
        None
    };
    if let Some(h) = &lora_hyper {
        if h.config.output_mode != OutputMode::Lora {
            return Err(D2lError::Validation(format!(
                "{HYPERNET_FILE} holds a {:?} hypernetwork",
                h.config.output_mode
            )));
        }
    }

    let eval_opts = EvalOpts { max_new: config.eval.max_new };
    let student_prompt_len = prompts::student_prompt_tokens(NIAH_QUERY).len();
    let mut rows = Vec::new();
    for &len in &config.eval.lengths {
        let instances = eval_instances(config.seeds.eval, len, config.eval.n_instances)?;
        let cd_subset = &instances[..config.cd.eval_instances.min(instances.len())];
        for method in ALL_METHODS {
            if !needs(method) {
                continue;
            }
            let row = eval_method_at_length(
                &lm,
                config,
                method,
                len,
                &instances,
                cd_subset,
                lora_hyper.as_ref(),
                kv_hyper.as_ref(),
                &eval_opts,
                student_prompt_len,
            )?;
            rows.push(row);
        }
    }

    let csv_path = run.path(METRICS_CSV);
    write_metrics_csv(&csv_path, &rows)?;
    let json_path = run.path(METRICS_JSON);
    fs::write(&json_path, serde_json::to_string_pretty(&rows)?)?;

    let mut counts = BTreeMap::new();
    counts.insert("rows".into(), rows.len() as u64);
    counts.insert("lengths".into(), config.eval.lengths.len() as u64);
    counts.insert("instances_per_length".into(), config.eval.n_instances as u64);
    run.record("eval", config.seeds.eval, counts, &[METRICS_CSV, METRICS_JSON])?;
    Ok(EvalSummary { rows, csv_path, json_path })
}

#[allow(clippy::too_many_arguments)]
fn eval_method_at_length(
    lm: &TinyLMParams,
    config: &ExperimentConfig,
    method: &str,
    len: usize,
    instances: &[NiahInstance],
    cd_subset: &[NiahInstance],
    lora_hyper: Option<&HypernetParams>,
    kv_hyper: Option<&HypernetParams>,
    eval_opts: &EvalOpts,
    student_prompt_len: usize,
) -> Result<MetricsRow> {
    let first = &instances[0];
    let ctx_tokens = first.haystack_tokens();
    let rope_on_keys = config.schedule.prefix_rope_on_keys;

    // Accuracy.
    let (outcomes, evaluated): (Vec<_>, &[NiahInstance]) = match method {
        METHOD_IN_CONTEXT => {
            (eval_niah(lm, &AdapterSource::InContext, instances, eval_opts)?, instances)
        }
        METHOD_HYPERNET_BATCHED | METHOD_HYPERNET_ITERATIVE => {
            let mode = if method == METHOD_HYPERNET_BATCHED {
                GenerationMode::Batched
            } else {
                GenerationMode::Iterative
            };
            let params = lora_hyper.expect("checked by caller");
            (
                eval_niah(lm, &AdapterSource::Hypernet { params, mode }, instances, eval_opts)?,
                instances,
            )
        }
        METHOD_HYPERKV => {
            let params = kv_hyper.expect("checked by caller");
            (
                eval_niah(
                    lm,
                    &AdapterSource::PrefixHypernet { params, rope_on_keys },
                    instances,
                    eval_opts,
                )?,
                instances,
            )
        }
        METHOD_CD_ORACLE | METHOD_CD_GENERATED_Q => {
            let factory =
                |inst: &NiahInstance| train_cd_adapter(lm, config, inst, method);
            (
                eval_niah(lm, &AdapterSource::PerInstance(&factory), cd_subset, eval_opts)?,
                cd_subset,
            )
        }
        other => return Err(D2lError::Validation(format!("unknown method {other}"))),
    };
    // Input audit: internalized rows must have query-only prompts.
    if method != METHOD_IN_CONTEXT {
        for o in &outcomes {
            if o.prompt_tokens != student_prompt_len {
                return Err(D2lError::Validation(format!(
                    "{method}: prompt had {} tokens, audit expected {student_prompt_len}",
                    o.prompt_tokens
                )));
            }
        }
    }
    let accuracy = outcomes.iter().filter(|o| o.correct).count() as f64 / evaluated.len() as f64;

    // Update latency over warm repetitions (the context → artifact step).
    let latency = match method {
        METHOD_IN_CONTEXT => LatencyStats { mean_ms: 0.0, std_ms: 0.0, repeats: 0 },
        METHOD_HYPERNET_BATCHED => measure_update_latency(
            || internalize_lora(lora_hyper.unwrap(), lm, &ctx_tokens, GenerationMode::Batched)
                .map(|_| ()),
            config.eval.latency_repeats,
        )?,
        METHOD_HYPERNET_ITERATIVE => measure_update_latency(
            || internalize_lora(lora_hyper.unwrap(), lm, &ctx_tokens, GenerationMode::Iterative)
                .map(|_| ()),
            config.eval.latency_repeats,
        )?,
        METHOD_HYPERKV => measure_update_latency(
            || internalize_prefix(kv_hyper.unwrap(), lm, &ctx_tokens, rope_on_keys).map(|_| ()),
            config.eval.latency_repeats,
        )?,
        _ => measure_update_latency(
            || train_cd_adapter(lm, config, first, method).map(|_| ()),
            config.eval.latency_repeats,
        )?,
    };

    // Analytic memory accounting.
    let (update_memory, footprint) = match method {
        METHOD_IN_CONTEXT => {
            let extra = prompts::teacher_prompt_tokens(&first.haystack, &first.query).len()
                - student_prompt_len;
            (0, in_context_footprint_bytes(&config.lm, extra))
        }
        METHOD_HYPERNET_BATCHED | METHOD_HYPERNET_ITERATIVE => (
            hypernet_resident_bytes(lora_hyper.unwrap()),
            merged_delta_bytes(&config.lm),
        ),
        METHOD_HYPERKV => {
            let params = kv_hyper.unwrap();
            let plan = chunk_context(
                ctx_tokens.len(),
                params.config.max_chunk_tokens,
                params.config.min_chunk,
            )?;
            let n_prefix = params.config.n_latents * plan.k();
            (hypernet_resident_bytes(params), prefix_footprint_bytes(&config.lm, n_prefix))
        }
        _ => (
            cd_update_state_bytes(&config.lm, config.cd.rank),
            merged_delta_bytes(&config.lm),
        ),
    };

    Ok(MetricsRow {
        method: method.to_string(),
        context_length: len,
        accuracy,
        latency_ms_mean: latency.mean_ms,
        latency_ms_std: latency.std_ms,
        update_memory_bytes: update_memory,
        inference_footprint_bytes: footprint,
        peak_alloc_bytes: None,
    })
}

/// Result of [`cmd_report`].
#[derive(Debug, Clone, Serialize)]
pub struct ReportSummary {
    pub runs: Vec<String>,
    pub rows: usize,
    pub out_dir: PathBuf,
}

/// Consolidate metrics from several runs into plotting-ready tables:
/// `report.csv`/`report.json` (everything, keyed by run), plus
/// `accuracy_vs_length.csv` and `latency_memory.csv` views. Inputs may be run
/// directories (their `metrics.csv` is used) or metrics files directly.
/// Refuses mixed schema versions.
pub fn cmd_report(inputs: &[PathBuf], out_dir: &Path) -> Result<ReportSummary> {
    if inputs.is_empty() {
        return Err(D2lError::Validation("report needs at least one run".into()));
    }
    let mut sources = Vec::new(); // (label, metrics path)
    for input in inputs {
        let (label, path) = if input.is_dir() {
            (
                input.file_name().and_then(|n| n.to_str()).unwrap_or("run").to_string(),
                input.join(METRICS_CSV),
            )
        } else {
            (
                input.file_stem().and_then(|n| n.to_str()).unwrap_or("metrics").to_string(),
                input.clone(),
            )
        };
        if !path.exists() {
            return Err(D2lError::Validation(format!(
                "no metrics table at {}",
                path.display()
            )));
        }
        sources.push((label, path));
    }

    let versions: Vec<(String, u32)> = sources
        .iter()
        .map(|(l, p)| Ok((l.clone(), read_metrics_version(p)?)))
        .collect::<Result<_>>()?;
    let distinct: std::collections::BTreeSet<u32> = versions.iter().map(|(_, v)| *v).collect();
    if distinct.len() > 1 {
        let detail: Vec<String> =
            versions.iter().map(|(l, v)| format!("{l}=v{v}")).collect();
        return Err(D2lError::Validation(format!(
            "refusing mixed metrics schema versions: {}",
            detail.join(", ")
        )));
    }

    let mut merged: Vec<(String, MetricsRow)> = Vec::new();
    for (label, path) in &sources {
        for row in read_metrics_csv(path)? {
            merged.push((label.clone(), row));
        }
    }
    merged.sort_by(|a, b| {
        (&a.0, &a.1.method, a.1.context_length).cmp(&(&b.0, &b.1.method, b.1.context_length))
    });

    fs::create_dir_all(out_dir)?;
    let mut report = String::new();
    report.push_str(&format!("schema_version,{METRICS_SCHEMA_VERSION}\n"));
    report.push_str(&format!("run,{CSV_HEADER}\n"));
    let mut acc = String::from("run,method,context_length,accuracy\n");
    let mut latmem = String::from(
        "run,method,context_length,latency_ms_mean,latency_ms_std,update_memory_bytes,inference_footprint_bytes\n",
    );
    let mut json_rows = Vec::new();
    for (run, r) in &merged {
        let peak = r.peak_alloc_bytes.map(|b| b.to_string()).unwrap_or_default();
        report.push_str(&format!(
            "{run},{},{},{:.6},{:.3},{:.3},{},{},{}\n",
            r.method,
            r.context_length,
            r.accuracy,
            r.latency_ms_mean,
            r.latency_ms_std,
            r.update_memory_bytes,
            r.inference_footprint_bytes,
            peak
        ));
        acc.push_str(&format!(
            "{run},{},{},{:.6}\n",
            r.method, r.context_length, r.accuracy
        ));
        latmem.push_str(&format!(
            "{run},{},{},{:.3},{:.3},{},{}\n",
            r.method,
            r.context_length,
            r.latency_ms_mean,
            r.latency_ms_std,
            r.update_memory_bytes,
            r.inference_footprint_bytes
        ));
        json_rows.push(serde_json::json!({ "run": run, "row": r }));
    }
    fs::write(out_dir.join("report.csv"), report)?;
    fs::write(out_dir.join("accuracy_vs_length.csv"), acc)?;
    fs::write(out_dir.join("latency_memory.csv"), latmem)?;
    fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&json_rows)?)?;

    Ok(ReportSummary {
        runs: sources.into_iter().map(|(l, _)| l).collect(),
        rows: merged.len(),
        out_dir: out_dir.to_path_buf(),
    })
}
