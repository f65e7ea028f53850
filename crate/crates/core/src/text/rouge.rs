//! ROUGE-N and ROUGE-L on token sequences. Scores are in `[0, 1]`.

use std::collections::HashMap;
use std::hash::Hash;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_counts(overlap: usize, hyp_total: usize, ref_total: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        Self::from_pr(ratio(overlap, hyp_total), ratio(overlap, ref_total))
    }

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore {
            precision,
            recall,
            f1,
        }
    }

    /// The same score on the 0–100 scale.
    pub fn percent(&self) -> RougeScore {
        RougeScore {
            precision: self.precision * 100.0,
            recall: self.recall * 100.0,
            f1: self.f1 * 100.0,
        }
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap.
pub fn rouge_n<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> Result<RougeScore> {
    if n == 0 {
        return Err(Error::input("ROUGE-N needs n >= 1"));
    }
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let overlap: usize = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    Ok(RougeScore::from_counts(
        overlap,
        h.values().sum(),
        r.values().sum(),
    ))
}

fn lcs_table<T: Eq>(a: &[T], b: &[T]) -> Vec<Vec<usize>> {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    lcs_table(a, b)[a.len()][b.len()]
}

/// Indices into `reference` of one longest common subsequence with `hyp`.
fn lcs_ref_indices<T: Eq>(reference: &[T], hyp: &[T]) -> Vec<usize> {
    let t = lcs_table(reference, hyp);
    let (mut i, mut j) = (reference.len(), hyp.len());
    let mut out = Vec::new();
    while i > 0 && j > 0 {
        if reference[i - 1] == hyp[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if t[i - 1][j] >= t[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out.reverse();
    out
}

/// Sentence-level ROUGE-L.
pub fn rouge_l<T: Eq>(hyp: &[T], reference: &[T]) -> RougeScore {
    RougeScore::from_counts(lcs_len(hyp, reference), hyp.len(), reference.len())
}

/// Summary-level ROUGE-L: for each reference sentence, the union of its LCS
/// hits against every hypothesis sentence, with hits clipped by token counts.
pub fn rouge_l_summary<T: Eq + Hash + Clone>(hyp: &[Vec<T>], reference: &[Vec<T>]) -> RougeScore {
    let hyp_total: usize = hyp.iter().map(Vec::len).sum();
    let ref_total: usize = reference.iter().map(Vec::len).sum();
    let mut hyp_left: HashMap<T, usize> = HashMap::new();
    for t in hyp.iter().flatten() {
        *hyp_left.entry(t.clone()).or_default() += 1;
    }
    let mut ref_left: HashMap<T, usize> = HashMap::new();
    for t in reference.iter().flatten() {
        *ref_left.entry(t.clone()).or_default() += 1;
    }
    let mut hits = 0;
    for r in reference {
        let mut union: Vec<usize> = hyp.iter().flat_map(|h| lcs_ref_indices(r, h)).collect();
        union.sort_unstable();
        union.dedup();
        for idx in union {
            let tok = &r[idx];
            let (Some(hc), Some(rc)) = (hyp_left.get(tok).copied(), ref_left.get(tok).copied())
            else {
                continue;
            };
            if hc > 0 && rc > 0 {
                hits += 1;
                hyp_left.insert(tok.clone(), hc - 1);
                ref_left.insert(tok.clone(), rc - 1);
            }
        }
    }
    RougeScore::from_counts(hits, hyp_total, ref_total)
}

/// Which ROUGE flavour a recall-based analysis uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RougeVariant {
    #[default]
    Rouge1,
    Rouge2,
    RougeL,
}

impl RougeVariant {
    /// Score of `candidate` against `reference`.
    pub fn score<T: Eq + Hash>(self, candidate: &[T], reference: &[T]) -> RougeScore {
        match self {
            RougeVariant::Rouge1 => rouge_n(candidate, reference, 1).expect("n = 1"),
            RougeVariant::Rouge2 => rouge_n(candidate, reference, 2).expect("n = 2"),
            RougeVariant::RougeL => rouge_l(candidate, reference),
        }
    }
}

impl FromStr for RougeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rouge1" | "rouge-1" | "r1" => Ok(RougeVariant::Rouge1),
            "rouge2" | "rouge-2" | "r2" => Ok(RougeVariant::Rouge2),
            "rougel" | "rouge-l" | "rl" => Ok(RougeVariant::RougeL),
            other => Err(Error::input(format!("unknown ROUGE variant {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_sequences_score_one() {
        let a = toks("a b c d");
        for n in [1, 2] {
            let s = rouge_n(&a, &a, n).unwrap();
            assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!(rouge_l(&a, &a).f1, 1.0);
    }

    #[test]
    fn half_unigram_overlap() {
        let s = rouge_n(&toks("a b x y"), &toks("a b c d"), 1).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn clipping() {
        let s = rouge_n(&toks("a a a"), &toks("a"), 1).unwrap();
        assert_eq!(s.recall, 1.0);
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_ngram_sets_are_zero() {
        let s = rouge_n(&toks("a"), &toks("a"), 2).unwrap();
        assert_eq!(s, RougeScore::default());
        assert!(rouge_n(&toks("a"), &toks("a"), 0).is_err());
    }

    #[test]
    fn lcs_hand_case() {
        let s = rouge_l(&toks("a c b"), &toks("a b c"));
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge_l(&toks("x y"), &toks("a b")), RougeScore::default());
    }

    #[test]
    fn summary_level_unions_hits() {
        // Reference sentence "a b c d"; hyp sentences cover "a b" and "c d"
        // separately, so the union recovers all four tokens.
        let hyp = vec![toks("a b"), toks("c d")];
        let reference = vec![toks("a b c d")];
        let s = rouge_l_summary(&hyp, &reference);
        assert_eq!(s.recall, 1.0);
        assert_eq!(s.precision, 1.0);
        // Sentence-level on the concatenation agrees here.
        assert_eq!(rouge_l(&toks("a b c d"), &toks("a b c d")).f1, 1.0);
    }

    #[test]
    fn summary_level_clips_repeated_hits() {
        let hyp = vec![toks("a"), toks("a")];
        let reference = vec![toks("a x"), toks("a y")];
        let s = rouge_l_summary(&hyp, &reference);
        assert_eq!(s.recall, 0.5);
        assert_eq!(s.precision, 1.0);
        let single = vec![toks("a")];
        let s = rouge_l_summary(&single, &reference);
        assert_eq!(s.recall, 0.25);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!(
            "rouge-1".parse::<RougeVariant>().unwrap(),
            RougeVariant::Rouge1
        );
        assert_eq!(
            "RougeL".parse::<RougeVariant>().unwrap(),
            RougeVariant::RougeL
        );
        assert!("bleu".parse::<RougeVariant>().is_err());
    }
}
