//! Measurement procedures: locality curves, page-importance traces,
//! semantic coherence, fusion-sentence mining and attention-memory
//! accounting. Every result type can be written as CSV.

pub mod coherence;
pub mod fusion;
pub mod importance;
pub mod locality;
pub mod memory;

pub use coherence::{semantic_coherence, LexicalNextSentence, NextSentenceScorer};
pub use fusion::{
    distance_histogram, find_fusion_pairs, write_fusion_csv, FusionPair, FusionParams,
};
pub use importance::{importance_trace, ImportanceTrace};
pub use locality::{locality_curve, BagOfWords, Embedder, LocalityCurve, TfIdf, VectorTable};
pub use memory::{counting_config, memory_bench, write_memory_csv, MemoryMode, MemoryReport};

use std::io::Write;

use crate::error::Result;

/// Writes a header row then `rows` through the csv crate.
pub(crate) fn write_csv<W: Write, R, I>(out: W, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(std::io::Error::from)?;
    for row in rows {
        w.write_record(row).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot / (na * nb)).clamp(-1.0, 1.0))
    }
}
