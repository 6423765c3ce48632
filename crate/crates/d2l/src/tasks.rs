//! Benchmark and data factories: the synthetic needle-in-a-haystack
//! generator/evaluator, rule-based context-grounded query generation,
//! teacher self-responses, the teacher pretraining corpus mix, and token
//! packing with block-diagonal masks.
//!
//! Everything here is deterministic given a seed: distractor text is drawn
//! from fixed subject–verb–object word lists (chosen so no distractor can
//! collide with the needle sentence), and sample generation uses decorrelated
//! per-sample RNG substreams so datasets are reproducible and parallelizable.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{serialize_adapter, serialize_prefix_kv, LoraAdapter};
use crate::distill::{ce_loss, make_distill_sample, DistillSample};
use crate::error::{D2lError, Result};
use crate::hypernet::{internalize_lora, internalize_prefix, GenerationMode, HypernetParams};
use crate::prompts;
use crate::target_lm::{forward_with_activations, generate, MaskSpec, TinyLMParams};
use crate::vocab;

/// Opening words of the needle sentence; the hidden digits follow.
pub const NIAH_NEEDLE_PREFIX: &str = "the special magic number is ";

/// The fixed retrieval query.
pub const NIAH_QUERY: &str = "what is the special magic number? reply with only the number.";

/// The needle sentence carrying `value`.
pub fn needle_sentence(value: &str) -> String {
    format!("{NIAH_NEEDLE_PREFIX}{value}.")
}

// Distractor vocabulary. None of these words contain digits or any part of
// the needle wording, so a needle sentence can never arise from distractor
// text and occurs in a haystack exactly as often as it is inserted.
const SUBJECTS: &[&str] = &[
    "cat", "dog", "bird", "fox", "farmer", "sailor", "child", "owl", "baker", "turtle", "piper",
    "weaver", "miller", "tailor", "gardener", "painter",
];
const VERBS: &[&str] = &[
    "sees", "finds", "follows", "carries", "watches", "paints", "builds", "greets", "chases",
    "guards", "visits", "repairs", "studies", "cleans", "draws", "mends",
];
const OBJECTS: &[&str] = &[
    "boat", "tree", "lamp", "river", "basket", "ladder", "rooster", "garden", "bridge", "kettle",
    "wagon", "candle", "meadow", "harbor", "anvil", "spindle",
];

fn distractor_sentence(rng: &mut impl Rng) -> String {
    let s = SUBJECTS[rng.random_range(0..SUBJECTS.len())];
    let v = VERBS[rng.random_range(0..VERBS.len())];
    let o = OBJECTS[rng.random_range(0..OBJECTS.len())];
    format!("the {s} {v} the {o}.")
}

/// A stream of space-joined distractor sentences truncated to exactly `len`
/// characters, plus the char offsets where full sentences start.
fn distractor_stream(rng: &mut impl Rng, len: usize) -> (String, Vec<usize>) {
    let mut text = String::with_capacity(len + 40);
    let mut starts = Vec::new();
    while text.len() < len {
        starts.push(text.len());
        text.push_str(&distractor_sentence(rng));
        text.push(' ');
    }
    text.truncate(len);
    (text, starts)
}

/// Exactly `len` characters of distractor text.
pub fn distractor_text(rng: &mut impl Rng, len: usize) -> String {
    distractor_stream(rng, len).0
}

/// Decorrelated per-sample RNG substream (SplitMix64 over seed and index).
pub(crate) fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// One needle-in-a-haystack instance. Characters are tokens for the tiny
/// model, so char offsets and lengths are token offsets and lengths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NiahInstance {
    /// Distractor text with the needle sentence embedded exactly once.
    pub haystack: String,
    /// The hidden digit string.
    pub needle: String,
    /// Char offset of the needle sentence inside the haystack.
    pub position: usize,
    pub query: String,
    /// Gold answer; always equals the needle value.
    pub answer: String,
}

impl NiahInstance {
    pub fn haystack_tokens(&self) -> Vec<u32> {
        vocab::encode(&self.haystack)
    }

    pub fn query_tokens(&self) -> Vec<u32> {
        vocab::encode(&self.query)
    }

    pub fn answer_tokens(&self) -> Vec<u32> {
        vocab::encode(&self.answer)
    }

    pub fn validate(&self) -> Result<()> {
        let needle = needle_sentence(&self.needle);
        if self.haystack.matches(&needle).count() != 1 {
            return Err(D2lError::Validation(
                "needle sentence must occur exactly once in the haystack".into(),
            ));
        }
        if !self.haystack[self.position..].starts_with(&needle) {
            return Err(D2lError::Validation(format!(
                "recorded needle position {} is wrong",
                self.position
            )));
        }
        if self.answer != self.needle {
            return Err(D2lError::Validation("gold answer must equal the needle value".into()));
        }
        Ok(())
    }
}

/// Generate one NIAH instance of exactly `haystack_len` characters with a
/// uniformly random `needle_digits`-digit value, the needle inserted at a
/// uniformly random sentence boundary of the distractor stream.
pub fn gen_niah_sample(
    rng: &mut impl Rng,
    haystack_len: usize,
    needle_digits: u32,
) -> Result<NiahInstance> {
    if needle_digits == 0 || needle_digits > 9 {
        return Err(D2lError::Validation(format!(
            "needle_digits must be in 1..=9, got {needle_digits}"
        )));
    }
    let span = 10u64.pow(needle_digits);
    let value = format!("{:0width$}", rng.random_range(0..span), width = needle_digits as usize);
    let needle = needle_sentence(&value);
    if haystack_len < needle.len() {
        return Err(D2lError::Validation(format!(
            "haystack length {haystack_len} is shorter than the needle sentence ({})",
            needle.len()
        )));
    }

    let (haystack, position) = if haystack_len == needle.len() {
        (needle.clone(), 0)
    } else if haystack_len == needle.len() + 1 {
        (format!("{needle} "), 0)
    } else {
        let d_len = haystack_len - needle.len() - 1;
        let (d, starts) = distractor_stream(rng, d_len);
        // Candidate insertion points: every full-sentence start plus the end
        // of the stream.
        let mut candidates = starts;
        candidates.push(d_len);
        let b = candidates[rng.random_range(0..candidates.len())];
        if b == d_len {
            (format!("{d} {needle}"), d_len + 1)
        } else if b == 0 {
            (format!("{needle} {d}"), 0)
        } else {
            (format!("{}{needle} {}", &d[..b], &d[b..]), b)
        }
    };

    let inst = NiahInstance {
        haystack,
        needle: value.clone(),
        position,
        query: NIAH_QUERY.to_string(),
        answer: value,
    };
    inst.validate()?;
    Ok(inst)
}

/// A deterministic NIAH dataset: each sample is drawn from its own RNG
/// substream of `seed`, with haystack lengths uniform over
/// `length_range.0..=length_range.1`.
pub fn gen_niah_dataset(
    seed: u64,
    n_samples: usize,
    length_range: (usize, usize),
) -> Result<Vec<NiahInstance>> {
    let (lo, hi) = length_range;
    let min_len = needle_sentence("0000").len();
    if lo > hi || lo < min_len {
        return Err(D2lError::Validation(format!(
            "length range [{lo}, {hi}] invalid (minimum {min_len})"
        )));
    }
    (0..n_samples)
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let len = rng.random_range(lo..=hi);
            gen_niah_sample(&mut rng, len, 4)
        })
        .collect()
}

/// Write a NIAH dataset as JSONL: `{haystack, needle, position, query, answer}`.
pub fn save_niah_jsonl(path: &Path, dataset: &[NiahInstance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for inst in dataset {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_niah_jsonl(path: &Path) -> Result<Vec<NiahInstance>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: NiahInstance = serde_json::from_str(&line)?;
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

/// Instruction templates wrapping generated queries; each has exactly one
/// `{input}` slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTemplateSet {
    pub templates: Vec<String>,
}

impl QueryTemplateSet {
    pub fn desk_default() -> Self {
        Self {
            templates: vec![
                "answer the following question. only give me the answer. {input}".into(),
                "{input}".into(),
                "please respond to this: {input}".into(),
                "task: {input}".into(),
                "read carefully and answer. {input}".into(),
                "{input} respond with the answer only.".into(),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(D2lError::Validation("template set is empty".into()));
        }
        for (i, t) in self.templates.iter().enumerate() {
            if t.matches("{input}").count() != 1 {
                return Err(D2lError::Validation(format!(
                    "template {i} must contain exactly one {{input}} slot: {t:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn instantiate(&self, index: usize, input: &str) -> String {
        self.templates[index].replace("{input}", input)
    }
}

/// A generated query plus the context span that grounds it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedQuery {
    pub text: String,
    /// A span that occurs verbatim in the source context.
    pub grounding_span: String,
}

/// Output of rule-based query generation.
#[derive(Debug, Clone)]
pub struct QueryGenOutput {
    pub queries: Vec<GeneratedQuery>,
    /// True when the context was too short to ground the requested number of
    /// distinct queries.
    pub exhausted: bool,
}

fn split_sentences(context: &str) -> Vec<&str> {
    context
        .split_inclusive('.')
        .map(str::trim)
        .filter(|s| s.ends_with('.') && s.split_whitespace().count() >= 3)
        .collect()
}

/// Rule-based context-grounded query generation: two iterations over
/// distinct sentences (span exclusion guarantees non-overlap), each query
/// wrapped in a uniformly chosen instruction template. Returns fewer than
/// `n` queries with the `exhausted` flag set when the context runs out of
/// usable sentences.
pub fn gen_queries(
    context: &str,
    n: usize,
    rng: &mut impl Rng,
    templates: &QueryTemplateSet,
) -> Result<QueryGenOutput> {
    if n == 0 {
        return Err(D2lError::Validation("query count must be ≥ 1".into()));
    }
    templates.validate()?;
    let sentences = split_sentences(context);
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    // Deterministic shuffle via the caller's stream.
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }

    let mut queries: Vec<GeneratedQuery> = Vec::with_capacity(n);
    let mut seen_cores = std::collections::HashSet::new();
    let first_target = n.div_ceil(2);
    let mut cursor = 0usize;
    for iteration in 0..2 {
        let target = if iteration == 0 { first_target } else { n };
        while queries.len() < target && cursor < order.len() {
            let sentence = sentences[order[cursor]];
            cursor += 1;
            let words: Vec<&str> = sentence.split_whitespace().collect();
            let prefix = words[..words.len() - 1].join(" ");
            let core = if iteration == 0 {
                format!("complete the sentence: {prefix}")
            } else {
                format!("which word finishes this line? {prefix}")
            };
            if !seen_cores.insert(core.clone()) {
                continue; // two sentences collapsing to one query
            }
            let t = rng.random_range(0..templates.templates.len());
            queries.push(GeneratedQuery {
                text: templates.instantiate(t, &core),
                grounding_span: sentence.to_string(),
            });
        }
    }
    let exhausted = queries.len() < n;
    if exhausted {
        log::warn!(
            "context grounded only {} of {n} requested queries",
            queries.len()
        );
    }
    Ok(QueryGenOutput { queries, exhausted })
}

/// Greedy-decode the teacher's response to `query` with `context` in the
/// prompt and record its per-position top-k logits. The returned sample
/// stores the query without the context; `None` means the teacher emitted
/// nothing and the sample was discarded (logged).
pub fn sample_self_response(
    lm: &TinyLMParams,
    context: &str,
    query: &str,
    max_new: usize,
    k: usize,
) -> Result<Option<DistillSample>> {
    make_distill_sample(lm, context, query, max_new, k)
}

/// Samples packed first-fit into fixed token budgets with block-diagonal
/// attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    /// Concatenated segment tokens (no padding; ≤ budget).
    pub tokens: Vec<u32>,
    pub segment_lengths: Vec<usize>,
    /// Index of each segment's source sample.
    pub sample_ids: Vec<usize>,
    pub budget: usize,
}

impl PackedBatch {
    pub fn total_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Block-diagonal attention layout with per-segment position reset.
    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec::packed(&self.segment_lengths, self.tokens.len())
    }

    pub fn segment_tokens(&self, i: usize) -> &[u32] {
        let start: usize = self.segment_lengths[..i].iter().sum();
        &self.tokens[start..start + self.segment_lengths[i]]
    }
}

/// First-fit packing of token sequences into batches of at most
/// `token_budget` tokens each.
pub fn pack_contexts(samples: &[Vec<u32>], token_budget: usize) -> Result<Vec<PackedBatch>> {
    if token_budget == 0 {
        return Err(D2lError::Validation("token budget must be ≥ 1".into()));
    }
    let mut batches: Vec<PackedBatch> = Vec::new();
    for (id, sample) in samples.iter().enumerate() {
        if sample.is_empty() {
            return Err(D2lError::Validation(format!("sample {id} is empty")));
        }
        if sample.len() > token_budget {
            return Err(D2lError::BudgetExceeded(format!(
                "sample {id} has {} tokens, budget is {token_budget}",
                sample.len()
            )));
        }
        match batches
            .iter_mut()
            .find(|b| b.total_tokens() + sample.len() <= token_budget)
        {
            Some(b) => {
                b.tokens.extend_from_slice(sample);
                b.segment_lengths.push(sample.len());
                b.sample_ids.push(id);
            }
            None => batches.push(PackedBatch {
                tokens: sample.clone(),
                segment_lengths: vec![sample.len()],
                sample_ids: vec![id],
                budget: token_budget,
            }),
        }
    }
    Ok(batches)
}

/// Per-segment mean next-token NLL of a packed batch, in segment order. Each
/// segment scores exactly as it would alone (block-diagonal masking is
/// airtight), so these equal individually computed per-sample losses.
pub fn packed_sample_ce(lm: &TinyLMParams, batch: &PackedBatch) -> Result<Vec<f64>> {
    let (logits, _) = forward_with_activations(lm, &batch.tokens, &batch.mask_spec(), None, None)?;
    let mut out = Vec::with_capacity(batch.segment_lengths.len());
    let mut start = 0usize;
    for &len in &batch.segment_lengths {
        if len < 2 {
            return Err(D2lError::Validation(
                "segments need ≥ 2 tokens to score next-token loss".into(),
            ));
        }
        let rows = logits.narrow(0, start, len - 1)?;
        let golds = &batch.tokens[start + 1..start + len];
        out.push(ce_loss(golds, &rows)?.to_scalar::<f64>()?);
        start += len;
    }
    Ok(out)
}

/// Where the evaluated model's knowledge of the haystack comes from.
pub enum AdapterSource<'a> {
    /// Haystack pasted into the prompt (the teacher's own framing).
    InContext,
    /// Query-only prompt with no adapter: the chance-level floor.
    QueryOnly,
    /// Hypernet-generated LoRA from the haystack; query-only prompt.
    Hypernet { params: &'a HypernetParams, mode: GenerationMode },
    /// Hypernet-generated prefix-KV from the haystack; query-only prompt.
    PrefixHypernet { params: &'a HypernetParams, rope_on_keys: bool },
    /// A fixed pre-built adapter applied to every instance.
    Adapter(&'a LoraAdapter),
    /// Per-instance adapter factory (e.g. gradient-based distillation run on
    /// each haystack).
    PerInstance(&'a dyn Fn(&NiahInstance) -> Result<LoraAdapter>),
}

/// Evaluation options.
#[derive(Debug, Clone)]
pub struct EvalOpts {
    /// Decode budget for the answer.
    pub max_new: usize,
}

impl Default for EvalOpts {
    fn default() -> Self {
        Self { max_new: 8 }
    }
}

/// One instance's evaluation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NiahOutcome {
    pub correct: bool,
    /// In-context mode only: the haystack had to be truncated to fit the
    /// model window.
    pub truncated: bool,
    /// Prompt length actually fed to the model. Internalized modes never
    /// include haystack tokens here.
    pub prompt_tokens: usize,
    /// Injected prefix entries per layer (prefix modes only).
    pub prefix_tokens: usize,
    /// Serialized size of the injected artifact (internalized modes only).
    pub artifact_bytes: usize,
    pub predicted: String,
}

/// Exact-match evaluation of NIAH instances under one adapter source.
/// In-context prompts that exceed the model window are truncated from the
/// left (oldest text dropped) and flagged, never errored.
pub fn eval_niah(
    lm: &TinyLMParams,
    source: &AdapterSource<'_>,
    instances: &[NiahInstance],
    opts: &EvalOpts,
) -> Result<Vec<NiahOutcome>> {
    let mut outcomes = Vec::with_capacity(instances.len());
    for inst in instances {
        inst.validate()?;
        let student_prompt = prompts::student_prompt_tokens(&inst.query);
        let (prompt, adapter, prefix, truncated) = match source {
            AdapterSource::InContext => {
                let budget = lm.config.max_seq_len.saturating_sub(opts.max_new);
                let mut prompt = prompts::teacher_prompt_tokens(&inst.haystack, &inst.query);
                let mut truncated = false;
                if prompt.len() > budget {
                    let excess = prompt.len() - budget;
                    let hay_chars = inst.haystack.chars().count();
                    if excess >= hay_chars {
                        return Err(D2lError::BudgetExceeded(format!(
                            "query alone exceeds the model window ({} tokens)",
                            lm.config.max_seq_len
                        )));
                    }
                    let kept: String = inst.haystack.chars().skip(excess).collect();
                    prompt = prompts::teacher_prompt_tokens(&kept, &inst.query);
                    truncated = true;
                }
                (prompt, None, None, truncated)
            }
            AdapterSource::QueryOnly => (student_prompt.clone(), None, None, false),
            AdapterSource::Hypernet { params, mode } => {
                let adapter = internalize_lora(params, lm, &inst.haystack_tokens(), *mode)?;
                (student_prompt.clone(), Some(adapter), None, false)
            }
            AdapterSource::PrefixHypernet { params, rope_on_keys } => {
                let prefix = internalize_prefix(params, lm, &inst.haystack_tokens(), *rope_on_keys)?;
                (student_prompt.clone(), None, Some(prefix), false)
            }
            AdapterSource::Adapter(a) => (student_prompt.clone(), Some((*a).clone()), None, false),
            AdapterSource::PerInstance(f) => {
                (student_prompt.clone(), Some(f(inst)?), None, false)
            }
        };
        // Input audit: internalized modes must never see haystack tokens.
        if !matches!(source, AdapterSource::InContext) {
            debug_assert_eq!(prompt.len(), student_prompt.len());
            if prompt.len() != student_prompt.len() {
                return Err(D2lError::Validation(
                    "internalized evaluation leaked context tokens into the prompt".into(),
                ));
            }
        }
        let artifact_bytes = match (&adapter, &prefix) {
            (Some(a), _) => serialize_adapter(a)?.len(),
            (_, Some(p)) => serialize_prefix_kv(p)?.len(),
            _ => 0,
        };
        let prefix_tokens = prefix.as_ref().map(|p| p.n_prefix()).unwrap_or(0);
        let generated = generate(lm, &prompt, opts.max_new, adapter.as_ref(), prefix.as_ref())?;
        let predicted = vocab::decode(&generated);
        outcomes.push(NiahOutcome {
            correct: prompts::exact_match(&predicted, &inst.answer),
            truncated,
            prompt_tokens: prompt.len(),
            prefix_tokens,
            artifact_bytes,
            predicted,
        });
    }
    Ok(outcomes)
}

/// Fraction of correct outcomes.
pub fn accuracy(outcomes: &[NiahOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.correct).count() as f64 / outcomes.len() as f64
}

/// Teacher pretraining corpus options.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CorpusOpts {
    pub n_docs: usize,
    /// Context lengths (chars = tokens) for context-bearing documents.
    pub len_range: (usize, usize),
}

impl Default for CorpusOpts {
    fn default() -> Self {
        Self { n_docs: 8_000, len_range: (33, 512) }
    }
}

/// Build the teacher pretraining corpus: a mix of in-context NIAH documents
/// (55%), in-context span-completion QA (25%), query-only format documents
/// (20% — these teach the answer format the internalized student will use),
/// and plain distractor text (the remainder of the span-QA share when a
/// context is too short to ground a query). Every document is BOS/EOS
/// framed.
pub fn build_pretrain_corpus(seed: u64, opts: &CorpusOpts) -> Result<Vec<Vec<u32>>> {
    let (lo, hi) = opts.len_range;
    let min_len = needle_sentence("0000").len();
    if opts.n_docs == 0 || lo > hi || lo < min_len {
        return Err(D2lError::Validation(format!(
            "bad corpus options: n_docs {}, len range [{lo}, {hi}] (minimum {min_len})",
            opts.n_docs
        )));
    }
    let templates = QueryTemplateSet::desk_default();
    let mut docs = Vec::with_capacity(opts.n_docs);
    for i in 0..opts.n_docs {
        let mut rng = substream(seed, i as u64);
        let len = rng.random_range(lo..=hi);
        let u: f64 = rng.random();
        let text = if u < 0.55 {
            // In-context NIAH.
            let inst = gen_niah_sample(&mut rng, len, 4)?;
            format!(
                "{}{}",
                prompts::teacher_prompt_text(&inst.haystack, &inst.query),
                inst.answer
            )
        } else if u < 0.80 {
            // In-context span completion over distractor text.
            let hay = distractor_text(&mut rng, len);
            match split_sentences(&hay).as_slice() {
                [] => hay, // too short to ground a query: plain text
                sentences => {
                    let s = sentences[rng.random_range(0..sentences.len())];
                    let words: Vec<&str> = s.split_whitespace().collect();
                    let prefix = words[..words.len() - 1].join(" ");
                    let answer = words[words.len() - 1].trim_end_matches('.');
                    let t = rng.random_range(0..templates.templates.len());
                    let query =
                        templates.instantiate(t, &format!("complete the sentence: {prefix}"));
                    format!("{}{}", prompts::teacher_prompt_text(&hay, &query), answer)
                }
            }
        } else if u < 0.925 {
            // Query-only NIAH format: the digits are unpredictable, which
            // teaches the answer shape without memorizable content.
            let value: String = format!("{:04}", rng.random_range(0..10_000u32));
            format!("{}{}", prompts::student_prompt_text(NIAH_QUERY), value)
        } else if u < 0.95 {
            // Query-only span-completion format.
            let s = distractor_sentence(&mut rng);
            let words: Vec<&str> = s.split_whitespace().collect();
            let prefix = words[..words.len() - 1].join(" ");
            let answer = words[words.len() - 1].trim_end_matches('.');
            let t = rng.random_range(0..templates.templates.len());
            let query = templates.instantiate(t, &format!("complete the sentence: {prefix}"));
            format!("{}{}", prompts::student_prompt_text(&query), answer)
        } else {
            // Plain distractor text.
            distractor_text(&mut rng, len)
        };
        docs.push(prompts::doc_tokens(&text));
    }
    Ok(docs)
}
