//! Page weights recorded while teacher-forcing a reference summary.

use std::io::Write;

use super::write_csv;
use crate::error::{Error, Result};
use crate::model::{forward, DecodeMode, ModelParameters};
use crate::paging::PagedDocument;

/// `weights[step][page]`; every row is a probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceTrace {
    pub weights: Vec<Vec<f64>>,
}

impl ImportanceTrace {
    pub fn num_pages(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut header = vec!["step".to_string()];
        header.extend((0..self.num_pages()).map(|j| format!("page_{j}")));
        write_csv(
            out,
            &header,
            self.weights.iter().enumerate().map(|(i, row)| {
                std::iter::once(i.to_string())
                    .chain(row.iter().map(f64::to_string))
                    .collect::<Vec<_>>()
            }),
        )
    }
}

/// One row per decoder step of `[BOS] ++ reference`.
pub fn importance_trace(
    params: &ModelParameters<f32>,
    pd: &PagedDocument,
    reference: &[u32],
) -> Result<ImportanceTrace> {
    let out = forward(params, pd, reference, DecodeMode::Paged)?;
    let fusion = out
        .fusion
        .ok_or_else(|| Error::numeric("paged forward produced no fusion state"))?;
    let norm = &fusion.confidence_norm;
    let (steps, pages) = norm.rows_cols();
    let weights = (0..steps)
        .map(|i| {
            norm.data()[i * pages..(i + 1) * pages]
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect();
    Ok(ImportanceTrace { weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::paging::{split, Locality, PagingConfig};
    use crate::text::SentenceDoc;

    fn paged(n: usize) -> PagedDocument {
        let sentences = (0..n as u32).map(|i| vec![5 + i, 6 + i, 7 + i]).collect();
        let doc = SentenceDoc::from_sentences("d", sentences, vec![]);
        let cfg = PagingConfig {
            locality: Locality::Spatial,
            page_size: 8,
            num_pages: Some(n),
            max_total_tokens: 64,
        };
        split(&doc, &cfg).unwrap()
    }

    #[test]
    fn single_page_is_all_ones() {
        let params = ModelParameters::init(&ModelConfig::tiny(), 1).unwrap();
        let t = importance_trace(&params, &paged(1), &[9, 10, 11]).unwrap();
        assert_eq!(t.weights.len(), 4);
        assert!(t.weights.iter().all(|r| r == &vec![1.0]));
    }

    #[test]
    fn zero_confidence_head_is_uniform() {
        let params = ModelParameters::init(&ModelConfig::tiny(), 1).unwrap();
        let t = importance_trace(&params, &paged(3), &[9, 10]).unwrap();
        for row in &t.weights {
            for &w in row {
                assert!((w - 1.0 / 3.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rows_are_distributions_and_csv_has_page_columns() {
        let mut params = ModelParameters::init(&ModelConfig::tiny(), 2).unwrap();
        params.randomize_confidence(4, 2.0);
        let t = importance_trace(&params, &paged(3), &[9, 10, 12, 30]).unwrap();
        for row in &t.weights {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("step,page_0,page_1,page_2\n0,"));
        assert_eq!(text.lines().count(), 6);
    }
}
