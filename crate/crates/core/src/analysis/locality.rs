//! Similarity of sentence pairs as a function of their index distance.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{cosine, write_csv};
use crate::error::{Error, Result};
use crate::text::SentenceDoc;

/// Maps a sentence to a fixed-dimension vector.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, tokens: &[u32], text: &str) -> Result<Vec<f64>>;
}

/// Raw token counts over a vocabulary of `dim` ids.
#[derive(Clone, Debug)]
pub struct BagOfWords {
    pub dim: usize,
}

impl Embedder for BagOfWords {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[u32], _text: &str) -> Result<Vec<f64>> {
        counts(tokens, self.dim)
    }
}

fn counts(tokens: &[u32], dim: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; dim];
    for &t in tokens {
        *v.get_mut(t as usize)
            .ok_or_else(|| Error::input(format!("token id {t} outside embedding dim {dim}")))? +=
            1.0;
    }
    Ok(v)
}

/// L2-normalised TF-IDF with smoothed idf `ln((1+N)/(1+df)) + 1`, where
/// N counts sentences in the fitting corpus.
#[derive(Clone, Debug)]
pub struct TfIdf {
    idf: Vec<f64>,
}

impl TfIdf {
    pub fn fit(docs: &[SentenceDoc], dim: usize) -> Result<Self> {
        let mut df = vec![0usize; dim];
        let mut n = 0usize;
        for s in docs.iter().flat_map(|d| &d.sentences) {
            n += 1;
            let mut seen: Vec<u32> = s.clone();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *df.get_mut(t as usize).ok_or_else(|| {
                    Error::input(format!("token id {t} outside embedding dim {dim}"))
                })? += 1;
            }
        }
        let idf = df
            .iter()
            .map(|&d| ((1 + n) as f64 / (1 + d) as f64).ln() + 1.0)
            .collect();
        Ok(TfIdf { idf })
    }
}

impl Embedder for TfIdf {
    fn dim(&self) -> usize {
        self.idf.len()
    }

    fn embed(&self, tokens: &[u32], _text: &str) -> Result<Vec<f64>> {
        let mut v = counts(tokens, self.idf.len())?;
        for (x, w) in v.iter_mut().zip(&self.idf) {
            *x *= w;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Precomputed vectors keyed by sentence text, e.g. from an external
/// sentence-embedding model.
#[derive(Clone, Debug, Default)]
pub struct VectorTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct VectorLine {
    sentence: String,
    vector: Vec<f64>,
}

impl VectorTable {
    /// Reads JSON lines of the form `{"sentence": "...", "vector": [...]}`.
    pub fn read_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut table = VectorTable::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: VectorLine = serde_json::from_str(&line)
                .map_err(|e| Error::format(format!("vector line {}: {e}", i + 1)))?;
            if table.vectors.is_empty() {
                table.dim = rec.vector.len();
            } else if rec.vector.len() != table.dim {
                return Err(Error::format(format!(
                    "vector line {} has dim {}, expected {}",
                    i + 1,
                    rec.vector.len(),
                    table.dim
                )));
            }
            table.vectors.insert(rec.sentence, rec.vector);
        }
        Ok(table)
    }
}

impl Embedder for VectorTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, _tokens: &[u32], text: &str) -> Result<Vec<f64>> {
        self.vectors
            .get(text)
            .cloned()
            .ok_or_else(|| Error::input(format!("no vector for sentence {text:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceBucket {
    pub distance: usize,
    pub mean_sim: f64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityCurve {
    /// Distances `1..=D` where D is the largest distance observed.
    pub buckets: Vec<DistanceBucket>,
    /// Mean over every counted pair.
    pub mean_sim: f64,
    pub pairs: u64,
    /// Pairs skipped because one side embedded to the zero vector.
    pub skipped_zero: u64,
}

impl LocalityCurve {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let header = ["distance", "mean_sim", "count"].map(String::from);
        write_csv(
            out,
            &header,
            self.buckets.iter().map(|b| {
                [
                    b.distance.to_string(),
                    b.mean_sim.to_string(),
                    b.count.to_string(),
                ]
            }),
        )
    }
}

/// Accumulates the cosine similarity of every sentence pair at index
/// distance `1..=max_distance` within each document.
pub fn locality_curve(
    docs: &[SentenceDoc],
    embedder: &dyn Embedder,
    max_distance: usize,
) -> Result<LocalityCurve> {
    if max_distance == 0 {
        return Err(Error::input("max_distance must be at least 1"));
    }
    let mut sums = vec![0.0f64; max_distance + 1];
    let mut counts = vec![0u64; max_distance + 1];
    let mut skipped_zero = 0;
    for doc in docs {
        let vectors = doc
            .sentences
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let text = doc.sentence_texts.get(i).map_or("", String::as_str);
                let v = embedder.embed(s, text)?;
                if v.len() != embedder.dim() {
                    return Err(Error::input(format!(
                        "embedder returned dim {} instead of {}",
                        v.len(),
                        embedder.dim()
                    )));
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        for i in 0..vectors.len() {
            for d in 1..=max_distance.min(vectors.len() - 1 - i) {
                match cosine(&vectors[i], &vectors[i + d]) {
                    Some(c) => {
                        sums[d] += c;
                        counts[d] += 1;
                    }
                    None => skipped_zero += 1,
                }
            }
        }
    }
    let last = (1..=max_distance)
        .rev()
        .find(|&d| counts[d] > 0)
        .unwrap_or(0);
    let buckets = (1..=last)
        .map(|d| DistanceBucket {
            distance: d,
            mean_sim: if counts[d] > 0 {
                sums[d] / counts[d] as f64
            } else {
                0.0
            },
            count: counts[d],
        })
        .collect();
    let pairs: u64 = counts.iter().sum();
    let mean_sim = if pairs > 0 {
        sums.iter().sum::<f64>() / pairs as f64
    } else {
        0.0
    };
    Ok(LocalityCurve {
        buckets,
        mean_sim,
        pairs,
        skipped_zero,
    })
}
