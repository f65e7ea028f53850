//! Tokenisation, sentence segmentation, vocabulary, corpus I/O and ROUGE.

pub mod corpus;
pub mod rouge;
pub mod segment;
pub mod tokenize;
pub mod vocab;

pub use corpus::{build_vocab, read_jsonl, RawDocument, Section, SentenceDoc};
pub use rouge::{rouge_l, rouge_l_summary, rouge_n, RougeScore, RougeVariant};
pub use segment::segment_sentences;
pub use tokenize::{detokenize, pieces, tokenize};
pub use vocab::Vocabulary;
