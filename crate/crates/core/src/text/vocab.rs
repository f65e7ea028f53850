use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
/// Start token prepended to every decoder input.
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
/// Separates a section name from its body on discourse pages.
pub const SEP: u32 = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<sep>"];

/// Token string ↔ id bijection. Ids `0..RESERVED.len()` are fixed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds from token streams, keeping tokens seen at least `min_freq`
    /// times, most frequent first (ties lexicographic), capped at `max_size`
    /// entries including the reserved ones.
    pub fn build<'a, I, S>(streams: I, min_freq: usize, max_size: Option<usize>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for stream in streams {
            for tok in stream {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq.max(1) && !RESERVED.contains(&t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = max_size.map_or(usize::MAX, |m| m.saturating_sub(RESERVED.len()));
        let words = ranked.into_iter().take(room).map(|(t, _)| t.to_string());
        Self::from_tokens(words).expect("reserved and counted tokens are distinct")
    }

    /// Reserved tokens followed by `words` in order.
    pub fn from_tokens(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::try_from(tokens).map_err(Error::Input)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map_or(RESERVED[UNK as usize], String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> std::result::Result<Self, String> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(format!(
                    "vocabulary must start with reserved token {r} at id {i}"
                ));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(format!("duplicate vocabulary entry {t:?}"));
            }
        }
        Ok(Vocabulary { tokens, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::build([vec!["b", "a", "a"]], 1, None);
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(r), i as u32);
        }
        assert_eq!(v.token(5), "a");
        assert_eq!(v.token(6), "b");
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.token(999), "<unk>");
    }

    #[test]
    fn min_freq_and_cap() {
        let v = Vocabulary::build([vec!["x", "y", "y", "z", "z", "z"]], 2, None);
        assert!(!v.contains("x"));
        assert_eq!(v.len(), RESERVED.len() + 2);
        let capped = Vocabulary::build([vec!["x", "y", "y", "z", "z", "z"]], 1, Some(6));
        assert_eq!(capped.len(), 6);
        assert_eq!(capped.token(5), "z");
    }

    #[test]
    fn serde_round_trip_and_validation() {
        let v = Vocabulary::build([vec!["hello", "world"]], 1, None);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
        assert!(serde_json::from_str::<Vocabulary>(r#"["a","b"]"#).is_err());
        assert!(Vocabulary::from_tokens(["a".into(), "a".into()]).is_err());
    }
}
