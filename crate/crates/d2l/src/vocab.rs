//! Fixed character-level vocabulary.
//!
//! The vocabulary is deliberately static: digits, lowercase letters, space,
//! newline, and a small punctuation set, plus the control tokens PAD/BOS/EOS
//! and UNK for anything else. Uppercase input is folded to lowercase by the
//! encoder so prompts can be written naturally while the model only ever sees
//! the lowercase alphabet. Removing tokenizer training keeps every dataset
//! and checkpoint reproducible from a seed alone.

use std::sync::OnceLock;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Printable characters, in id order starting at id 4.
const PRINTABLE: &str = " \nabcdefghijklmnopqrstuvwxyz0123456789.,?!:;'-#()\"/\\@%&*+=<>[]{}_$";

fn char_table() -> &'static Vec<char> {
    static TABLE: OnceLock<Vec<char>> = OnceLock::new();
    TABLE.get_or_init(|| PRINTABLE.chars().collect())
}

/// Total vocabulary size including the four control tokens.
pub fn vocab_size() -> usize {
    4 + char_table().len()
}

/// Id for a single (already lowercased) character, or `UNK`.
fn char_id(c: char) -> u32 {
    match char_table().iter().position(|&x| x == c) {
        Some(i) => 4 + i as u32,
        None => UNK,
    }
}

/// Encode text to token ids. Uppercase letters are folded to lowercase;
/// characters outside the vocabulary map to `UNK`. No BOS/EOS is added here —
/// prompt assembly decides where control tokens go.
pub fn encode(text: &str) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len());
    for c in text.chars() {
        if c.is_uppercase() {
            for lc in c.to_lowercase() {
                ids.push(char_id(lc));
            }
        } else {
            ids.push(char_id(c));
        }
    }
    ids
}

/// Decode token ids back to text. Control tokens are skipped; `UNK` renders
/// as U+FFFD so it can never collide with a real in-vocabulary character.
pub fn decode(ids: &[u32]) -> String {
    let table = char_table();
    let mut out = String::with_capacity(ids.len());
    for &id in ids {
        match id {
            PAD | BOS | EOS => {}
            UNK => out.push('\u{fffd}'),
            _ => {
                let idx = id as usize - 4;
                if idx < table.len() {
                    out.push(table[idx]);
                } else {
                    out.push('\u{fffd}');
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_lowercase_text() {
        let s = "the special magic number is 0042.";
        assert_eq!(decode(&encode(s)), s);
    }

    #[test]
    fn uppercase_folds_to_lowercase() {
        assert_eq!(
            encode("What is the special magic number? Reply with only the number."),
            encode("what is the special magic number? reply with only the number.")
        );
    }

    #[test]
    fn unknown_chars_map_to_unk() {
        let ids = encode("a~b");
        assert_eq!(ids[1], UNK);
        assert_eq!(decode(&ids), "a\u{fffd}b");
    }

    #[test]
    fn control_tokens_are_reserved() {
        // No printable character may claim a control id.
        for c in PRINTABLE.chars() {
            assert!(char_id(c) >= 4);
        }
        assert_eq!(vocab_size(), 4 + PRINTABLE.chars().count());
    }

    #[test]
    fn ids_are_stable_and_distinct() {
        let ids = encode(PRINTABLE);
        let mut seen = std::collections::HashSet::new();
        for id in ids {
            assert!(seen.insert(id), "duplicate id {id}");
        }
    }
}
