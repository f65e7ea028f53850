//! Mining source-sentence pairs that jointly explain a summary sentence.
//!
//! For each summary sentence `h`, every unordered pair of source sentences
//! is scored by the recall of their concatenation against `h`. The best pair
//! is kept only if each member overlaps `h` by more than `t1` on its own and
//! the pair beats each member by more than `t2`. Scores use a 0–100 scale.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::write_csv;
use crate::error::Result;
use crate::text::RougeVariant;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub t1: f64,
    pub t2: f64,
    pub variant: RougeVariant,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            t1: 20.0,
            t2: 10.0,
            variant: RougeVariant::Rouge1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionPair {
    pub summary_idx: usize,
    pub src_i: usize,
    pub src_j: usize,
    pub score: f64,
    pub individual: (f64, f64),
    /// `score − max(individual)`.
    pub gain: f64,
    /// `(src_j − src_i) / number of source sentences`.
    pub norm_dist: f64,
}

fn recall(variant: RougeVariant, candidate: &[u32], h: &[u32]) -> f64 {
    100.0 * variant.score(candidate, h).recall
}

pub fn find_fusion_pairs(
    doc: &[Vec<u32>],
    summary: &[Vec<u32>],
    params: &FusionParams,
) -> Vec<FusionPair> {
    let n = doc.len();
    if n < 2 {
        return Vec::new();
    }
    let mut found = Vec::new();
    let mut joined = Vec::new();
    for (k, h) in summary.iter().enumerate() {
        let single: Vec<f64> = doc.iter().map(|s| recall(params.variant, s, h)).collect();
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            for j in i + 1..n {
                joined.clear();
                joined.extend_from_slice(&doc[i]);
                joined.extend_from_slice(&doc[j]);
                let score = recall(params.variant, &joined, h);
                // Strict comparison keeps the lexicographically first pair on ties.
                if best.is_none_or(|(b, _, _)| score > b) {
                    best = Some((score, i, j));
                }
            }
        }
        let (score, i, j) = best.expect("at least one pair");
        let (si, sj) = (single[i], single[j]);
        let gain = score - si.max(sj);
        if si > params.t1 && sj > params.t1 && gain > params.t2 {
            found.push(FusionPair {
                summary_idx: k,
                src_i: i,
                src_j: j,
                score,
                individual: (si, sj),
                gain,
                norm_dist: (j - i) as f64 / n as f64,
            });
        }
    }
    found
}

/// Ten equal buckets over `[0, 1]`; the last bucket is closed.
pub fn distance_histogram(pairs: &[FusionPair]) -> [u64; 10] {
    let mut hist = [0u64; 10];
    for p in pairs {
        let b = ((p.norm_dist * 10.0).floor().max(0.0) as usize).min(9);
        hist[b] += 1;
    }
    hist
}

pub fn write_fusion_csv<W: Write>(out: W, rows: &[(String, FusionPair)]) -> Result<()> {
    let header = [
        "doc_id",
        "summary_idx",
        "src_i",
        "src_j",
        "score",
        "gain",
        "norm_dist",
    ]
    .map(String::from);
    write_csv(
        out,
        &header,
        rows.iter().map(|(id, p)| {
            [
                id.clone(),
                p.summary_idx.to_string(),
                p.src_i.to_string(),
                p.src_j.to_string(),
                p.score.to_string(),
                p.gain.to_string(),
                p.norm_dist.to_string(),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc() -> Vec<Vec<u32>> {
        (0..12u32)
            .map(|i| (0..4).map(|k| 10 * i + k).collect())
            .collect()
    }

    #[test]
    fn constructed_fusion_is_found() {
        let d = doc();
        let h: Vec<u32> = d[3].iter().chain(&d[9]).copied().collect();
        let pairs = find_fusion_pairs(&d, &[h], &FusionParams::default());
        assert_eq!(pairs.len(), 1);
        let p = &pairs[0];
        assert_eq!((p.src_i, p.src_j), (3, 9));
        assert_eq!(p.score, 100.0);
        assert_eq!(p.individual, (50.0, 50.0));
        assert_eq!(p.gain, 50.0);
        assert_eq!(p.norm_dist, 0.5);
    }

    #[test]
    fn copied_sentence_has_no_gain() {
        let d = doc();
        assert!(find_fusion_pairs(&d, &[d[4].clone()], &FusionParams::default()).is_empty());
    }

    #[test]
    fn ties_prefer_the_smallest_pair() {
        let d = vec![vec![1], vec![2], vec![1], vec![2]];
        let p = FusionParams {
            t1: 0.0,
            t2: 0.0,
            ..FusionParams::default()
        };
        let pairs = find_fusion_pairs(&d, &[vec![1, 2]], &p);
        assert_eq!((pairs[0].src_i, pairs[0].src_j), (0, 1));
    }

    #[test]
    fn too_short_document_yields_nothing() {
        assert!(find_fusion_pairs(&[vec![1]], &[vec![1]], &FusionParams::default()).is_empty());
    }

    fn at(i: usize, j: usize, n: usize) -> FusionPair {
        FusionPair {
            summary_idx: 0,
            src_i: i,
            src_j: j,
            score: 0.0,
            individual: (0.0, 0.0),
            gain: 0.0,
            norm_dist: (j - i) as f64 / n as f64,
        }
    }

    #[test]
    fn histogram_buckets() {
        assert_eq!(distance_histogram(&[]), [0; 10]);
        let adjacent: Vec<_> = (0..5).map(|i| at(i, i + 1, 100)).collect();
        assert_eq!(distance_histogram(&adjacent)[0], 5);
        assert_eq!(distance_histogram(&[at(0, 99, 100)])[9], 1);
        let mut full = at(0, 1, 1);
        full.norm_dist = 1.0;
        assert_eq!(distance_histogram(&[full])[9], 1);
    }

    #[test]
    fn csv_quotes_ids() {
        let mut out = Vec::new();
        write_fusion_csv(&mut out, &[("a,b".into(), at(1, 3, 4))]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "doc_id,summary_idx,src_i,src_j,score,gain,norm_dist\n\"a,b\",0,1,3,0,0,0.5\n"
        );
    }
}
