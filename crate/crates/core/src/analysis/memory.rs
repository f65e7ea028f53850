//! Counting encoder attention-score cells for paged and full encoding.
//!
//! Paged encoding materialises `Σ_j |P_j|²` cells per layer and head, which
//! is at most `L_page · l_D`; encoding the whole document at once needs
//! `l_D²`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::write_csv;
use crate::error::{Error, Result};
use crate::model::{encode_page, ModelConfig, ModelParameters};
use crate::numerics::memory::{total_entries, AttentionKind, Recorder};
use crate::paging::{split_spatial, Locality, Page, PageOrigin, PagingConfig};
use crate::text::vocab::RESERVED;
use crate::text::SentenceDoc;

const SENTENCE_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryMode {
    Paged,
    Full,
}

impl FromStr for MemoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paged" => Ok(MemoryMode::Paged),
            "full" => Ok(MemoryMode::Full),
            other => Err(Error::input(format!(
                "unknown memory mode {other:?} (expected paged or full)"
            ))),
        }
    }
}

impl fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryMode::Paged => "paged",
            MemoryMode::Full => "full",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub l_d: usize,
    pub mode: MemoryMode,
    pub page_size: usize,
    pub page_lengths: Vec<usize>,
    /// Encoder self-attention cells keyed by `(layer, head)`.
    pub per_head: BTreeMap<(usize, usize), u64>,
    pub entries: u64,
    /// `L_page · l_D` (paged) or `l_D²` (full), times layers × heads.
    pub bound: u64,
}

/// Encodes one synthetic document per length and mode, counting cells.
pub fn memory_bench(
    lengths: &[usize],
    page_size: usize,
    config: &ModelConfig,
    modes: &[MemoryMode],
    seed: u64,
) -> Result<Vec<MemoryReport>> {
    if page_size == 0 {
        return Err(Error::input("page size must be positive"));
    }
    let params = ModelParameters::<f32>::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for &l_d in lengths {
        if l_d == 0 {
            return Err(Error::input("document lengths must be positive"));
        }
        let tokens: Vec<u32> = (0..l_d)
            .map(|_| rng.gen_range(RESERVED.len() as u32..config.vocab_size as u32))
            .collect();
        for &mode in modes {
            let pages = match mode {
                MemoryMode::Paged => {
                    let doc = SentenceDoc::from_sentences(
                        format!("bench-{l_d}"),
                        tokens.chunks(SENTENCE_LEN).map(<[u32]>::to_vec).collect(),
                        vec![],
                    );
                    let cfg = PagingConfig {
                        locality: Locality::Spatial,
                        page_size,
                        num_pages: None,
                        max_total_tokens: l_d.max(page_size),
                    };
                    split_spatial(&doc, &cfg)?.pages
                }
                MemoryMode::Full => vec![Page {
                    tokens: tokens.clone(),
                    origin: PageOrigin::Document(0),
                    sentence_span: 0..l_d.div_ceil(SENTENCE_LEN),
                }],
            };
            let recorder = Recorder::start();
            for page in &pages {
                encode_page(&params, page)?;
            }
            let events = recorder.finish();
            let mut per_head = BTreeMap::new();
            for e in events
                .iter()
                .filter(|e| e.site.kind == AttentionKind::EncoderSelf)
            {
                *per_head.entry((e.site.layer, e.site.head)).or_insert(0) += e.entries();
            }
            let sites = (config.n_encoder_layers * config.n_heads) as u64;
            let width = match mode {
                MemoryMode::Paged => page_size as u64,
                MemoryMode::Full => l_d as u64,
            };
            reports.push(MemoryReport {
                l_d,
                mode,
                page_size,
                page_lengths: pages.iter().map(|p| p.tokens.len()).collect(),
                per_head,
                entries: total_entries(&events, AttentionKind::EncoderSelf),
                bound: width * l_d as u64 * sites,
            });
        }
    }
    Ok(reports)
}

pub fn write_memory_csv<W: Write>(out: W, reports: &[MemoryReport]) -> Result<()> {
    let header = ["l_D", "mode", "entries", "bound"].map(String::from);
    write_csv(
        out,
        &header,
        reports.iter().map(|r| {
            [
                r.l_d.to_string(),
                r.mode.to_string(),
                r.entries.to_string(),
                r.bound.to_string(),
            ]
        }),
    )
}

/// The smallest single-head encoder that can count cells at `max_len`.
pub fn counting_config(max_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 4,
        n_heads: 1,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        d_ff: 4,
        max_positions: max_len,
        dropout: 0.0,
    }
}
