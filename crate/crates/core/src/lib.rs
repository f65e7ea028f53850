//! Page-wise encoding with confidence-weighted fusion decoding for
//! long-document abstractive summarisation, together with the training loop,
//! attention-memory accounting and locality analyses that go with it.

pub mod analysis;
pub mod error;
pub mod model;
pub mod numerics;
pub mod paging;
pub mod text;
pub mod training;

pub use error::{Error, Result};
