//! Lowercasing whitespace tokenizer with punctuation splitting.

use super::vocab::Vocabulary;

/// Splits into lowercase word pieces; every non-alphanumeric, non-space
/// character becomes its own token.
pub fn pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    pieces(text).iter().map(|p| vocab.id(p)).collect()
}

fn attaches_left(tok: &str) -> bool {
    matches!(
        tok,
        "." | "," | "!" | "?" | ";" | ":" | ")" | "]" | "}" | "%" | "'"
    )
}

fn attaches_right(tok: &str) -> bool {
    matches!(tok, "(" | "[" | "{" | "$" | "'")
}

/// Joins tokens with spaces, gluing closing punctuation to the left and
/// opening brackets to the right. Reserved ids render as their surface form.
pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    for &id in ids {
        let tok = vocab.token(id);
        if !out.is_empty() && !glue_next && !attaches_left(tok) {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = attaches_right(tok);
    }
    out
}
