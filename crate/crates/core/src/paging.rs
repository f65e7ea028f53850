//! Turning a tokenised document into non-overlapping pages.
//!
//! Three grouping principles are supported: contiguous sentence groups
//! (spatial), one page per section (discourse) and one page per member of a
//! document cluster (document). Every page holds between 1 and `page_size`
//! tokens, and the whole paged input never exceeds `max_total_tokens`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::vocab::SEP;
use crate::text::SentenceDoc;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Locality {
    #[default]
    Spatial,
    Discourse,
    Document,
}

impl FromStr for Locality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Locality::Spatial),
            "discourse" => Ok(Locality::Discourse),
            "document" => Ok(Locality::Document),
            other => Err(Error::input(format!(
                "unknown locality {other:?} (expected spatial, discourse or document)"
            ))),
        }
    }
}

impl fmt::Display for Locality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Locality::Spatial => "spatial",
            Locality::Discourse => "discourse",
            Locality::Document => "document",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PagingConfig {
    pub locality: Locality,
    /// Maximum tokens per page.
    pub page_size: usize,
    /// Spatial page count; derived from the document length when absent.
    pub num_pages: Option<usize>,
    pub max_total_tokens: usize,
}

impl Default for PagingConfig {
    fn default() -> Self {
        PagingConfig {
            locality: Locality::Spatial,
            page_size: 1024,
            num_pages: None,
            max_total_tokens: 7168,
        }
    }
}

impl PagingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.page_size == 0 {
            return Err(Error::config("page size must be at least 1"));
        }
        if self.num_pages == Some(0) {
            return Err(Error::config("number of pages must be at least 1"));
        }
        if self.max_total_tokens < self.page_size {
            return Err(Error::config(format!(
                "max total tokens {} is below the page size {}",
                self.max_total_tokens, self.page_size
            )));
        }
        Ok(())
    }

    /// `ceil(min(doc_tokens, max_total_tokens) / page_size)`, at least 1.
    pub fn derive_num_pages(&self, doc_tokens: usize) -> usize {
        doc_tokens
            .min(self.max_total_tokens)
            .div_ceil(self.page_size)
            .max(1)
    }

    fn spatial_pages(&self, doc: &SentenceDoc) -> usize {
        self.num_pages
            .unwrap_or_else(|| self.derive_num_pages(doc.token_count()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PageOrigin {
    Spatial(usize),
    Section(String),
    Document(usize),
}

impl fmt::Display for PageOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PageOrigin::Spatial(i) => write!(f, "spatial:{i}"),
            PageOrigin::Section(name) => write!(f, "section:{name}"),
            PageOrigin::Document(i) => write!(f, "document:{i}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Page {
    pub tokens: Vec<u32>,
    pub origin: PageOrigin,
    /// Source sentences this page was built from.
    pub sentence_span: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PagedDocument {
    pub doc_id: String,
    pub locality: Locality,
    pub pages: Vec<Page>,
}

impl PagedDocument {
    pub fn total_tokens(&self) -> usize {
        self.pages.iter().map(|p| p.tokens.len()).sum()
    }

    /// Σ|P_j|²: score cells one encoder self-attention head allocates.
    pub fn encoder_attention_entries(&self) -> u64 {
        self.pages
            .iter()
            .map(|p| (p.tokens.len() as u64).pow(2))
            .sum()
    }

    /// All page tokens in order.
    pub fn concatenated(&self) -> Vec<u32> {
        self.pages
            .iter()
            .flat_map(|p| p.tokens.iter().copied())
            .collect()
    }
}

/// Shared token budget across the pages of one document.
struct Budget(usize);

impl Budget {
    fn take(&mut self, tokens: &mut Vec<u32>, page_size: usize) {
        tokens.truncate(page_size.min(self.0));
        self.0 -= tokens.len();
    }
}

pub fn split(doc: &SentenceDoc, cfg: &PagingConfig) -> Result<PagedDocument> {
    match cfg.locality {
        Locality::Spatial => split_spatial(doc, cfg),
        Locality::Discourse => split_discourse(doc, cfg),
        Locality::Document => split_document(doc, cfg),
    }
}

/// Contiguous sentence groups of near-equal size; earlier pages take the
/// remainder sentences.
pub fn split_spatial(doc: &SentenceDoc, cfg: &PagingConfig) -> Result<PagedDocument> {
    cfg.validate()?;
    if doc.sentences.is_empty() {
        return Err(Error::input(format!(
            "document {:?} has no sentences",
            doc.id
        )));
    }
    // Sentences that fit in the overall budget; the last may be cut.
    let mut kept: Vec<Vec<u32>> = Vec::new();
    let mut left = cfg.max_total_tokens;
    for s in &doc.sentences {
        if left == 0 {
            break;
        }
        let take = s.len().min(left);
        kept.push(s[..take].to_vec());
        left -= take;
    }
    let n_p = cfg.spatial_pages(doc);
    let k = kept.len();
    let (base, rem) = (k / n_p, k % n_p);

    let mut pages: Vec<Page> = Vec::new();
    let mut start = 0;
    for j in 0..n_p {
        let count = base + usize::from(j < rem);
        if count == 0 {
            continue;
        }
        let span = start..start + count;
        start += count;
        let mut tokens: Vec<u32> = kept[span.clone()].iter().flatten().copied().collect();
        tokens.truncate(cfg.page_size);
        if tokens.is_empty() {
            // Absorb token-less sentence groups into a neighbour so spans stay contiguous.
            if let Some(prev) = pages.last_mut() {
                prev.sentence_span.end = span.end;
            } else {
                pages.push(Page {
                    tokens,
                    origin: PageOrigin::Spatial(j),
                    sentence_span: span,
                });
            }
            continue;
        }
        match pages.last_mut() {
            Some(prev) if prev.tokens.is_empty() => {
                prev.tokens = tokens;
                prev.sentence_span.end = span.end;
            }
            _ => pages.push(Page {
                tokens,
                origin: PageOrigin::Spatial(j),
                sentence_span: span,
            }),
        }
    }
    if pages.iter().all(|p| p.tokens.is_empty()) {
        return Err(Error::input(format!("document {:?} has no tokens", doc.id)));
    }
    for (i, p) in pages.iter_mut().enumerate() {
        p.origin = PageOrigin::Spatial(i);
    }
    Ok(PagedDocument {
        doc_id: doc.id.clone(),
        locality: Locality::Spatial,
        pages,
    })
}

/// One page per section: name tokens, separator, body, truncated.
pub fn split_discourse(doc: &SentenceDoc, cfg: &PagingConfig) -> Result<PagedDocument> {
    cfg.validate()?;
    let sections = doc.sections.as_ref().ok_or_else(|| {
        Error::input(format!(
            "document {:?} has no sections; use spatial locality instead",
            doc.id
        ))
    })?;
    let mut budget = Budget(cfg.max_total_tokens);
    let mut pages = Vec::new();
    for s in sections {
        let mut tokens = s.name_tokens.clone();
        tokens.push(SEP);
        tokens.extend(doc.sentences[s.sentences.clone()].iter().flatten());
        budget.take(&mut tokens, cfg.page_size);
        if tokens.is_empty() {
            break;
        }
        pages.push(Page {
            tokens,
            origin: PageOrigin::Section(s.name.clone()),
            sentence_span: s.sentences.clone(),
        });
    }
    if pages.is_empty() {
        return Err(Error::input(format!(
            "document {:?} has an empty section list",
            doc.id
        )));
    }
    Ok(PagedDocument {
        doc_id: doc.id.clone(),
        locality: Locality::Discourse,
        pages,
    })
}

/// One page per cluster member, in cluster order.
pub fn split_document(doc: &SentenceDoc, cfg: &PagingConfig) -> Result<PagedDocument> {
    cfg.validate()?;
    let members = doc
        .cluster
        .as_ref()
        .filter(|c| !c.is_empty())
        .ok_or_else(|| Error::input(format!("document {:?} is not a document cluster", doc.id)))?;
    let mut budget = Budget(cfg.max_total_tokens);
    let mut pages = Vec::new();
    for (i, range) in members.iter().enumerate() {
        if budget.0 == 0 {
            break;
        }
        let mut tokens: Vec<u32> = doc.sentences[range.clone()]
            .iter()
            .flatten()
            .copied()
            .collect();
        budget.take(&mut tokens, cfg.page_size);
        if tokens.is_empty() {
            continue;
        }
        pages.push(Page {
            tokens,
            origin: PageOrigin::Document(i),
            sentence_span: range.clone(),
        });
    }
    if pages.is_empty() {
        return Err(Error::input(format!("cluster {:?} has no tokens", doc.id)));
    }
    Ok(PagedDocument {
        doc_id: doc.id.clone(),
        locality: Locality::Document,
        pages,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NoPages,
    EmptyPage {
        page: usize,
    },
    PageTooLong {
        page: usize,
        len: usize,
        max: usize,
    },
    Overlap {
        page: usize,
    },
    TooManyPages {
        count: usize,
        max: usize,
    },
    TotalTooLong {
        total: usize,
        max: usize,
    },
    /// Spatial pages must tile a sentence prefix without gaps.
    SpatialGap {
        page: usize,
    },
    LocalityMismatch,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoPages => write!(f, "document has no pages"),
            Violation::EmptyPage { page } => write!(f, "page {page} is empty"),
            Violation::PageTooLong { page, len, max } => {
                write!(f, "page {page} has {len} tokens, limit {max}")
            }
            Violation::Overlap { page } => write!(f, "page {page} overlaps its predecessor"),
            Violation::TooManyPages { count, max } => write!(f, "{count} pages, limit {max}"),
            Violation::TotalTooLong { total, max } => write!(f, "{total} tokens, limit {max}"),
            Violation::SpatialGap { page } => {
                write!(
                    f,
                    "page {page} does not continue the previous sentence span"
                )
            }
            Violation::LocalityMismatch => write!(f, "locality differs from configuration"),
        }
    }
}

/// All invariant violations of `pd` under `cfg`; empty means valid.
pub fn validate(pd: &PagedDocument, cfg: &PagingConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    if pd.locality != cfg.locality {
        out.push(Violation::LocalityMismatch);
    }
    if pd.pages.is_empty() {
        out.push(Violation::NoPages);
    }
    let mut prev_end = 0;
    for (i, p) in pd.pages.iter().enumerate() {
        if p.tokens.is_empty() {
            out.push(Violation::EmptyPage { page: i });
        }
        if p.tokens.len() > cfg.page_size {
            out.push(Violation::PageTooLong {
                page: i,
                len: p.tokens.len(),
                max: cfg.page_size,
            });
        }
        if i > 0 && p.sentence_span.start < prev_end {
            out.push(Violation::Overlap { page: i });
        } else if pd.locality == Locality::Spatial && p.sentence_span.start != prev_end {
            out.push(Violation::SpatialGap { page: i });
        }
        prev_end = prev_end.max(p.sentence_span.end);
    }
    if pd.locality == Locality::Spatial {
        if let Some(max) = cfg.num_pages {
            if pd.pages.len() > max {
                out.push(Violation::TooManyPages {
                    count: pd.pages.len(),
                    max,
                });
            }
        }
    }
    let total = pd.total_tokens();
    if total > cfg.max_total_tokens {
        out.push(Violation::TotalTooLong {
            total,
            max: cfg.max_total_tokens,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Section;

    fn doc_with(counts: &[usize]) -> SentenceDoc {
        let mut next = 10u32;
        let sentences = counts
            .iter()
            .map(|&n| {
                let s: Vec<u32> = (next..next + n as u32).collect();
                next += n as u32;
                s
            })
            .collect();
        SentenceDoc::from_sentences("d", sentences, vec![vec![10]])
    }

    fn spatial(n_p: usize, page_size: usize) -> PagingConfig {
        PagingConfig {
            locality: Locality::Spatial,
            page_size,
            num_pages: Some(n_p),
            max_total_tokens: 10_000,
        }
    }

    fn span_sizes(pd: &PagedDocument) -> Vec<usize> {
        pd.pages.iter().map(|p| p.sentence_span.len()).collect()
    }

    #[test]
    fn spatial_even_and_remainder_splits() {
        let pd = split_spatial(&doc_with(&[3; 8]), &spatial(4, 100)).unwrap();
        assert_eq!(span_sizes(&pd), [2, 2, 2, 2]);
        let pd = split_spatial(&doc_with(&[3; 9]), &spatial(4, 100)).unwrap();
        assert_eq!(span_sizes(&pd), [3, 2, 2, 2]);
        let pd = split_spatial(&doc_with(&[3; 3]), &spatial(4, 100)).unwrap();
        assert_eq!(span_sizes(&pd), [1, 1, 1]);
        assert!(validate(&pd, &spatial(4, 100)).is_empty());
    }

    #[test]
    fn spatial_truncates_pages_and_total() {
        let cfg = spatial(2, 4);
        let pd = split_spatial(&doc_with(&[3, 3, 3, 3]), &cfg).unwrap();
        assert!(pd.pages.iter().all(|p| p.tokens.len() == 4));
        assert!(validate(&pd, &cfg).is_empty());

        let cfg = PagingConfig {
            max_total_tokens: 7,
            ..spatial(2, 6)
        };
        let doc = doc_with(&[3, 3, 3]);
        let pd = split_spatial(&doc, &cfg).unwrap();
        let all: Vec<u32> = doc.sentences.concat();
        assert_eq!(pd.concatenated(), all[..7]);
    }

    #[test]
    fn spatial_empty_document_is_an_error() {
        let doc = SentenceDoc::from_sentences("e", vec![], vec![]);
        assert!(matches!(
            split_spatial(&doc, &spatial(2, 8)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn derived_page_count_mirrors_budget() {
        let cfg = PagingConfig::default();
        assert_eq!(cfg.derive_num_pages(10_000), 7);
        assert_eq!(cfg.derive_num_pages(1025), 2);
        assert_eq!(cfg.derive_num_pages(3), 1);
    }

    fn sectioned(bodies: &[usize]) -> SentenceDoc {
        let mut doc = doc_with(bodies);
        doc.sections = Some(
            bodies
                .iter()
                .enumerate()
                .map(|(i, _)| Section {
                    name: format!("s{i}"),
                    name_tokens: vec![7, 8],
                    sentences: i..i + 1,
                })
                .collect(),
        );
        doc
    }

    #[test]
    fn discourse_one_page_per_section() {
        let cfg = PagingConfig {
            locality: Locality::Discourse,
            page_size: 1024,
            num_pages: None,
            max_total_tokens: 100_000,
        };
        let pd = split_discourse(&sectioned(&[4, 2, 2000, 0, 3]), &cfg).unwrap();
        assert_eq!(pd.pages.len(), 5);
        let names: Vec<String> = pd.pages.iter().map(|p| p.origin.to_string()).collect();
        assert_eq!(
            names,
            [
                "section:s0",
                "section:s1",
                "section:s2",
                "section:s3",
                "section:s4"
            ]
        );
        assert_eq!(pd.pages[2].tokens.len(), 1024);
        assert_eq!(&pd.pages[2].tokens[..3], &[7, 8, SEP]);
        assert_eq!(pd.pages[3].tokens, vec![7, 8, SEP]);
        assert!(validate(&pd, &cfg).is_empty());
    }

    #[test]
    fn discourse_without_sections_points_to_spatial() {
        let cfg = PagingConfig {
            locality: Locality::Discourse,
            ..PagingConfig::default()
        };
        let err = split_discourse(&doc_with(&[2]), &cfg).unwrap_err();
        assert!(err.to_string().contains("spatial"));
    }

    #[test]
    fn document_pages_follow_cluster() {
        let mut doc = doc_with(&[3, 2, 5, 1]);
        doc.cluster = Some(vec![0..1, 1..3, 3..4]);
        let cfg = PagingConfig {
            locality: Locality::Document,
            page_size: 4,
            num_pages: None,
            max_total_tokens: 100,
        };
        let pd = split_document(&doc, &cfg).unwrap();
        let origins: Vec<_> = pd.pages.iter().map(|p| p.origin.clone()).collect();
        assert_eq!(
            origins,
            [
                PageOrigin::Document(0),
                PageOrigin::Document(1),
                PageOrigin::Document(2)
            ]
        );
        assert_eq!(pd.pages[1].tokens.len(), 4);
        let mut single = doc_with(&[3]);
        single.cluster = Some(std::iter::once(0..1).collect());
        assert_eq!(split_document(&single, &cfg).unwrap().pages.len(), 1);
        assert!(split_document(&doc_with(&[3]), &cfg).is_err());
    }

    #[test]
    fn validate_flags_length_and_overlap() {
        let cfg = spatial(2, 4);
        let pd = PagedDocument {
            doc_id: "x".into(),
            locality: Locality::Spatial,
            pages: vec![
                Page {
                    tokens: vec![1; 5],
                    origin: PageOrigin::Spatial(0),
                    sentence_span: 0..2,
                },
                Page {
                    tokens: vec![1; 2],
                    origin: PageOrigin::Spatial(1),
                    sentence_span: 1..3,
                },
            ],
        };
        let v = validate(&pd, &cfg);
        assert!(v.contains(&Violation::PageTooLong {
            page: 0,
            len: 5,
            max: 4
        }));
        assert!(v.contains(&Violation::Overlap { page: 1 }));
    }
}
