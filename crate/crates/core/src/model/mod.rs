//! The page-wise encoder-decoder.
//!
//! Each page is encoded on its own. The shared decoder then runs once per
//! page with cross-attention restricted to that page, producing local states
//! `h_i^(j)`. A linear confidence head scores every local state, the scores
//! are softmax-normalised over pages, and the weighted sum of local states
//! is projected onto the vocabulary. The global ablation instead decodes
//! once against the concatenation of all page encodings.
//!
//! The functions here take and return plain tensors and run without
//! recording gradients; [`network::Network`] exposes the same computation
//! as a differentiable graph for training.

pub mod checkpoint;
pub mod config;
pub mod generate;
pub mod network;
pub mod params;

use crate::error::{Error, Result};
use crate::numerics::{softmax, Bound, Element, Tensor, Var};
use crate::paging::{Page, PagedDocument};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ModelConfig, CONFIDENCE_HEAD, VOCAB_HEAD};
pub use generate::{generate, Generated, SearchStrategy};
pub use network::{teacher_forcing, DecodeMode, Network};
pub use params::ModelParameters;

/// Encoder output for every page of a document, in page order.
#[derive(Clone, Debug, PartialEq)]
pub struct PageEncoding<F: Element = f32> {
    /// `[page_len × d_model]` per page.
    pub hidden: Vec<Tensor<F>>,
    /// Key-validity mask per page. Pages are encoded unpadded, so every
    /// entry is true; kept for callers that batch pages.
    pub masks: Vec<Vec<bool>>,
}

/// Per-page decoder outputs before fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalStates<F: Element = f32> {
    /// `[steps × d_model]` per page.
    pub local_hidden: Vec<Tensor<F>>,
    /// `[steps × pages]`.
    pub confidence_raw: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionState<F: Element = f32> {
    pub local_hidden: Vec<Tensor<F>>,
    /// `[steps × pages]` raw scores.
    pub confidence_raw: Tensor<F>,
    /// `[steps × pages]`, rows sum to one.
    pub confidence_norm: Tensor<F>,
    /// `[steps × d_model]`.
    pub fused_hidden: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult<F: Element = f32> {
    /// `[steps × vocab_size]`, each row a probability distribution.
    pub distributions: Tensor<F>,
    /// Present in paged mode.
    pub fusion: Option<FusionState<F>>,
}

fn frozen<F: Element>(params: &ModelParameters<F>) -> Bound<F> {
    Bound::new(&params.tensors, false)
}

pub fn page_tokens(pd: &PagedDocument) -> Vec<Vec<u32>> {
    pd.pages.iter().map(|p| p.tokens.clone()).collect()
}

pub fn encode_page<F: Element>(params: &ModelParameters<F>, page: &Page) -> Result<Tensor<F>> {
    let bound = frozen(params);
    let net = Network::new(&params.config, &bound);
    Ok(net.encode_page(&page.tokens)?.value().clone())
}

pub fn encode_pages<F: Element>(
    params: &ModelParameters<F>,
    pd: &PagedDocument,
) -> Result<PageEncoding<F>> {
    let bound = frozen(params);
    let net = Network::new(&params.config, &bound);
    let hidden = net
        .encode_pages(&page_tokens(pd))?
        .into_iter()
        .map(|v| v.value().clone())
        .collect::<Vec<_>>();
    let masks = hidden.iter().map(|h| vec![true; h.shape()[0]]).collect();
    Ok(PageEncoding { hidden, masks })
}

pub fn decode_local<F: Element>(
    params: &ModelParameters<F>,
    encodings: &PageEncoding<F>,
    prefix: &[u32],
) -> Result<LocalStates<F>> {
    if encodings.hidden.is_empty() {
        return Err(Error::input("no page encodings to decode against"));
    }
    let bound = frozen(params);
    let net = Network::new(&params.config, &bound);
    let enc: Vec<Var<F>> = encodings
        .hidden
        .iter()
        .cloned()
        .map(Var::constant)
        .collect();
    let (local, conf) = net.decode_local(&enc, prefix)?;
    let raw = if conf.len() == 1 {
        conf[0].clone()
    } else {
        Var::concat_cols(&conf)
    };
    Ok(LocalStates {
        local_hidden: local.iter().map(|v| v.value().clone()).collect(),
        confidence_raw: raw.value().clone(),
    })
}

/// Normalises confidences over pages and mixes the local states.
pub fn fuse<F: Element>(states: &LocalStates<F>) -> Result<FusionState<F>> {
    let n = states.local_hidden.len();
    let [steps, pages] = states.confidence_raw.shape() else {
        return Err(Error::input("confidence matrix must be 2-D"));
    };
    if *pages != n || n == 0 {
        return Err(Error::input(format!(
            "{pages} confidence columns for {n} local states"
        )));
    }
    let local: Vec<Var<F>> = states
        .local_hidden
        .iter()
        .cloned()
        .map(Var::constant)
        .collect();
    let conf: Vec<Var<F>> = (0..n)
        .map(|j| {
            let col = (0..*steps)
                .map(|i| states.confidence_raw.data()[i * n + j])
                .collect();
            Var::constant(Tensor::from_parts(vec![*steps, 1], col))
        })
        .collect();
    let (_, norm, fused) = Network::fuse(&local, &conf);
    Ok(FusionState {
        local_hidden: states.local_hidden.clone(),
        confidence_raw: states.confidence_raw.clone(),
        confidence_norm: norm.value().clone(),
        fused_hidden: fused.value().clone(),
    })
}

/// Per-step vocabulary distributions from fused states.
pub fn project_vocab<F: Element>(
    params: &ModelParameters<F>,
    fused_hidden: &Tensor<F>,
) -> Result<Tensor<F>> {
    let bound = frozen(params);
    let net = Network::new(&params.config, &bound);
    let logits = net.project_vocab(&Var::constant(fused_hidden.clone()));
    softmax(logits.value(), 1)
}

/// Teacher-forced pass: decoder input is `[BOS] ++ target`.
pub fn forward<F: Element>(
    params: &ModelParameters<F>,
    pd: &PagedDocument,
    target: &[u32],
    mode: DecodeMode,
) -> Result<ForwardResult<F>> {
    let (input, _) = teacher_forcing(target, params.config.max_positions);
    forward_prefix(params, pd, &input, mode)
}

/// Like [`forward`] but with an explicit decoder prefix (starting at BOS).
pub fn forward_prefix<F: Element>(
    params: &ModelParameters<F>,
    pd: &PagedDocument,
    prefix: &[u32],
    mode: DecodeMode,
) -> Result<ForwardResult<F>> {
    let bound = frozen(params);
    let net = Network::new(&params.config, &bound);
    let out = net.forward(&page_tokens(pd), prefix, mode)?;
    let distributions = softmax(out.logits.value(), 1)?;
    let fusion = out.confidence.map(|(raw, norm)| FusionState {
        local_hidden: out.local_hidden.iter().map(|v| v.value().clone()).collect(),
        confidence_raw: raw.value().clone(),
        confidence_norm: norm.value().clone(),
        fused_hidden: out.fused.value().clone(),
    });
    Ok(ForwardResult {
        distributions,
        fusion,
    })
}
