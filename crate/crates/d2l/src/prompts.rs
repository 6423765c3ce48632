//! Prompt framing shared by the teacher (context pasted into the prompt) and
//! the student/internalized path (query only), plus answer normalization for
//! exact-match scoring.
//!
//! Both prompt shapes end with a newline so the answer span always starts at
//! the same kind of boundary; responses are what follows that newline, and
//! training documents terminate them with EOS.

use crate::vocab;

/// Assistant framing with the context inlined — the "context in the prompt"
/// side of distillation.
pub fn teacher_prompt_text(context: &str, question: &str) -> String {
    format!(
        "you are an honest and helpful assistant.\n\n\
         # provided information\n{context}\n\n\
         # user input\n{question}\n"
    )
}

/// Query-only framing for the internalized/student path. The context never
/// appears here; whatever the model knows about it must live in its weights
/// (or an injected adapter / prefix).
pub fn student_prompt_text(question: &str) -> String {
    format!("{question}\n")
}

/// BOS + encoded teacher prompt. No EOS: the answer continues the sequence.
pub fn teacher_prompt_tokens(context: &str, question: &str) -> Vec<u32> {
    let mut ids = vec![vocab::BOS];
    ids.extend(vocab::encode(&teacher_prompt_text(context, question)));
    ids
}

/// BOS + encoded student prompt. No EOS: the answer continues the sequence.
pub fn student_prompt_tokens(question: &str) -> Vec<u32> {
    let mut ids = vec![vocab::BOS];
    ids.extend(vocab::encode(&student_prompt_text(question)));
    ids
}

/// A complete training document: BOS + text + EOS.
pub fn doc_tokens(text: &str) -> Vec<u32> {
    let mut ids = vec![vocab::BOS];
    ids.extend(vocab::encode(text));
    ids.push(vocab::EOS);
    ids
}

/// Canonical form for short-answer comparison: surrounding whitespace
/// trimmed and at most one trailing period removed.
pub fn normalize_answer(s: &str) -> String {
    let t = s.trim();
    let t = t.strip_suffix('.').unwrap_or(t);
    t.trim().to_string()
}

/// Exact match on normalized answers.
pub fn exact_match(predicted: &str, gold: &str) -> bool {
    normalize_answer(predicted) == normalize_answer(gold)
}
