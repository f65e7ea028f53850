//! Mean next-sentence probability over consecutive summary sentences.

use crate::error::{Error, Result};

/// Probability that `next` follows `prev`.
pub trait NextSentenceScorer {
    fn prob(&self, prev: &[u32], next: &[u32]) -> f64;
}

impl<F: Fn(&[u32], &[u32]) -> f64> NextSentenceScorer for F {
    fn prob(&self, prev: &[u32], next: &[u32]) -> f64 {
        self(prev, next)
    }
}

/// Stand-in scorer: `σ(steepness · (cos − midpoint))` of the bag-of-words
/// cosine between the two sentences.
#[derive(Clone, Copy, Debug)]
pub struct LexicalNextSentence {
    pub steepness: f64,
    pub midpoint: f64,
}

impl Default for LexicalNextSentence {
    fn default() -> Self {
        LexicalNextSentence {
            steepness: 10.0,
            midpoint: 0.2,
        }
    }
}

impl NextSentenceScorer for LexicalNextSentence {
    fn prob(&self, prev: &[u32], next: &[u32]) -> f64 {
        let dim = prev.iter().chain(next).max().map_or(0, |&m| m as usize + 1);
        let bag = |s: &[u32]| {
            let mut v = vec![0.0; dim];
            s.iter().for_each(|&t| v[t as usize] += 1.0);
            v
        };
        let cos = super::cosine(&bag(prev), &bag(next)).unwrap_or(0.0);
        1.0 / (1.0 + (-self.steepness * (cos - self.midpoint)).exp())
    }
}

pub fn semantic_coherence<S: AsRef<[u32]>>(
    sentences: &[S],
    scorer: &dyn NextSentenceScorer,
) -> Result<f64> {
    if sentences.len() < 2 {
        return Err(Error::input(format!(
            "semantic coherence needs at least 2 sentences, got {}",
            sentences.len()
        )));
    }
    let mut total = 0.0;
    for w in sentences.windows(2) {
        let p = scorer.prob(w[0].as_ref(), w[1].as_ref());
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::numeric(format!(
                "next-sentence probability {p} outside [0, 1]"
            )));
        }
        total += p;
    }
    Ok(total / (sentences.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sents(n: usize) -> Vec<Vec<u32>> {
        (0..n as u32).map(|i| vec![i, i + 1]).collect()
    }

    #[test]
    fn constant_scorers() {
        assert_eq!(
            semantic_coherence(&sents(4), &|_: &[u32], _: &[u32]| 1.0).unwrap(),
            1.0
        );
        for n in 2..6 {
            assert_eq!(
                semantic_coherence(&sents(n), &|_: &[u32], _: &[u32]| 0.5).unwrap(),
                0.5
            );
        }
    }

    #[test]
    fn hand_mean() {
        let p = |prev: &[u32], _: &[u32]| if prev[0] == 0 { 0.2 } else { 0.8 };
        assert!((semantic_coherence(&sents(3), &p).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_short_input_and_bad_probabilities() {
        assert!(matches!(
            semantic_coherence(&sents(1), &LexicalNextSentence::default()),
            Err(Error::Input(_))
        ));
        assert!(semantic_coherence(&sents(3), &|_: &[u32], _: &[u32]| 1.5).is_err());
    }

    #[test]
    fn lexical_default_prefers_overlap() {
        let s = LexicalNextSentence::default();
        let same = s.prob(&[1, 2, 3], &[1, 2, 3]);
        let none = s.prob(&[1, 2, 3], &[4, 5]);
        assert!(same > 0.99 && none < 0.2);
        let sc = semantic_coherence(&sents(5), &s).unwrap();
        assert!((0.0..=1.0).contains(&sc));
    }
}
