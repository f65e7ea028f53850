//! JSON Lines corpus: one document per line.
//!
//! Each record has an `id`, a `summary`, and exactly one of `text`,
//! `sections` (array of `{name, text}`) or `documents` (array of strings).

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::segment::segment_sentences;
use super::tokenize::{pieces, tokenize};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSection {
    pub name: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sections: Option<Vec<RawSection>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub documents: Option<Vec<String>>,
    pub summary: String,
}

impl RawDocument {
    pub fn validate(&self) -> Result<()> {
        let present = [
            self.text.is_some(),
            self.sections.is_some(),
            self.documents.is_some(),
        ]
        .iter()
        .filter(|&&p| p)
        .count();
        if present != 1 {
            return Err(Error::input(format!(
                "document {:?} must have exactly one of text, sections, documents (found {present})",
                self.id
            )));
        }
        if matches!(&self.documents, Some(d) if d.is_empty()) {
            return Err(Error::input(format!(
                "document {:?} has an empty cluster",
                self.id
            )));
        }
        Ok(())
    }

    /// Every piece of source and summary text, for vocabulary building.
    pub fn texts(&self) -> Vec<&str> {
        let mut out = Vec::new();
        if let Some(t) = &self.text {
            out.push(t.as_str());
        }
        for s in self.sections.iter().flatten() {
            out.push(s.name.as_str());
            out.push(s.text.as_str());
        }
        for d in self.documents.iter().flatten() {
            out.push(d.as_str());
        }
        out.push(self.summary.as_str());
        out
    }

    pub fn to_sentence_doc(&self, vocab: &Vocabulary) -> Result<SentenceDoc> {
        self.validate()?;
        let mut doc = SentenceDoc {
            id: self.id.clone(),
            sentences: Vec::new(),
            sentence_texts: Vec::new(),
            sections: None,
            cluster: None,
            summary: Vec::new(),
            summary_texts: segment_sentences(&self.summary),
        };
        let push_text = |doc: &mut SentenceDoc, text: &str| -> Range<usize> {
            let start = doc.sentences.len();
            for s in segment_sentences(text) {
                doc.sentences.push(tokenize(&s, vocab));
                doc.sentence_texts.push(s);
            }
            start..doc.sentences.len()
        };
        if let Some(t) = &self.text {
            push_text(&mut doc, t);
        } else if let Some(secs) = &self.sections {
            let mut sections = Vec::with_capacity(secs.len());
            for s in secs {
                let range = push_text(&mut doc, &s.text);
                sections.push(Section {
                    name: s.name.clone(),
                    name_tokens: tokenize(&s.name, vocab),
                    sentences: range,
                });
            }
            doc.sections = Some(sections);
        } else if let Some(members) = &self.documents {
            let ranges = members.iter().map(|m| push_text(&mut doc, m)).collect();
            doc.cluster = Some(ranges);
        }
        doc.summary = doc
            .summary_texts
            .iter()
            .map(|s| tokenize(s, vocab))
            .collect();
        Ok(doc)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub name_tokens: Vec<u32>,
    /// Sentence indices belonging to this section.
    pub sentences: Range<usize>,
}

/// A tokenised document. Sections and cluster members are contiguous
/// ranges over `sentences`, in order, covering it exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceDoc {
    pub id: String,
    pub sentences: Vec<Vec<u32>>,
    pub sentence_texts: Vec<String>,
    pub sections: Option<Vec<Section>>,
    pub cluster: Option<Vec<Range<usize>>>,
    pub summary: Vec<Vec<u32>>,
    pub summary_texts: Vec<String>,
}

impl SentenceDoc {
    /// Plain document from pre-tokenised sentences.
    pub fn from_sentences(
        id: impl Into<String>,
        sentences: Vec<Vec<u32>>,
        summary: Vec<Vec<u32>>,
    ) -> Self {
        SentenceDoc {
            id: id.into(),
            sentence_texts: vec![String::new(); sentences.len()],
            summary_texts: vec![String::new(); summary.len()],
            sentences,
            sections: None,
            cluster: None,
            summary,
        }
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn summary_tokens(&self) -> Vec<u32> {
        self.summary.iter().flatten().copied().collect()
    }

    /// Checks that section/cluster ranges partition the sentence list.
    pub fn validate(&self) -> Result<()> {
        let check = |ranges: &mut dyn Iterator<Item = Range<usize>>, what: &str| -> Result<()> {
            let mut next = 0;
            for r in ranges {
                if r.start != next || r.end < r.start {
                    return Err(Error::input(format!(
                        "{what} ranges of {:?} do not partition the sentences",
                        self.id
                    )));
                }
                next = r.end;
            }
            if next != self.sentences.len() {
                return Err(Error::input(format!(
                    "{what} ranges of {:?} do not cover all sentences",
                    self.id
                )));
            }
            Ok(())
        };
        if let Some(s) = &self.sections {
            check(&mut s.iter().map(|s| s.sentences.clone()), "section")?;
        }
        if let Some(c) = &self.cluster {
            if c.is_empty() {
                return Err(Error::input(format!("empty cluster in {:?}", self.id)));
            }
            check(&mut c.iter().cloned(), "cluster")?;
        }
        Ok(())
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RawDocument>> {
    let file = File::open(path)
        .map_err(|e| Error::input(format!("cannot open corpus {}: {e}", path.display())))?;
    parse_jsonl(BufReader::new(file))
}

pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<RawDocument>> {
    let mut docs = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: RawDocument = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("corpus line {}: {e}", n + 1)))?;
        doc.validate()
            .map_err(|e| Error::input(format!("corpus line {}: {e}", n + 1)))?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Vocabulary over all source and summary text of `docs`.
pub fn build_vocab(docs: &[RawDocument], min_freq: usize, max_size: Option<usize>) -> Vocabulary {
    let streams: Vec<Vec<String>> = docs
        .iter()
        .flat_map(|d| d.texts().into_iter().map(pieces))
        .collect();
    Vocabulary::build(
        streams.iter().map(|s| s.iter().map(String::as_str)),
        min_freq,
        max_size,
    )
}
