//! Greedy and beam-search decoding.

use std::cmp::Ordering;
use std::str::FromStr;

use super::network::{DecodeMode, Network};
use super::page_tokens;
use super::params::ModelParameters;
use crate::error::{Error, Result};
use crate::numerics::{softmax, Bound, Element, Var};
use crate::paging::PagedDocument;
use crate::text::vocab::{BOS, EOS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SearchStrategy {
    #[default]
    Greedy,
    Beam,
}

impl FromStr for SearchStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(SearchStrategy::Greedy),
            "beam" => Ok(SearchStrategy::Beam),
            other => Err(Error::input(format!(
                "unknown strategy {other:?} (expected greedy or beam)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// Output tokens without BOS and without the closing EOS.
    pub tokens: Vec<u32>,
    /// Sum of log-probabilities of every emitted token, EOS included.
    pub log_prob: f64,
    /// `log_prob / len^length_penalty`, len counting EOS when emitted.
    pub score: f64,
    /// False when decoding stopped at `max_len` without EOS.
    pub finished: bool,
}

/// Length-normalised model score.
pub fn normalized_score(log_prob: f64, len: usize, length_penalty: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(length_penalty)
}

#[derive(Clone, Debug)]
struct Hypothesis {
    prefix: Vec<u32>,
    log_prob: f64,
    finished: bool,
}

impl Hypothesis {
    fn emitted(&self) -> usize {
        self.prefix.len() - 1
    }

    fn score(&self, lp: f64) -> f64 {
        normalized_score(self.log_prob, self.emitted(), lp)
    }

    fn into_generated(self, lp: f64) -> Generated {
        let score = self.score(lp);
        let mut tokens = self.prefix[1..].to_vec();
        let finished = tokens.last() == Some(&EOS);
        if finished {
            tokens.pop();
        }
        Generated {
            tokens,
            log_prob: self.log_prob,
            score,
            finished,
        }
    }
}

struct Stepper<'a, F: Element> {
    net: Network<'a, F>,
    encodings: Vec<Var<F>>,
    mode: DecodeMode,
}

impl<F: Element> Stepper<'_, F> {
    /// Log-probabilities of the next token after `prefix`.
    fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let out = self
            .net
            .forward_encoded(&self.encodings, prefix, self.mode)?;
        let logits = out.logits.value();
        let last = logits.shape()[0] - 1;
        let row =
            crate::numerics::Tensor::from_parts(vec![logits.shape()[1]], logits.row(last).to_vec());
        let probs = softmax(&row, 0)?;
        Ok(probs
            .data()
            .iter()
            .map(|p| p.to_f64_lossless().ln())
            .collect())
    }
}

/// Index of the largest value; the earliest index wins ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
pub fn generate<F: Element>(
    params: &ModelParameters<F>,
    pd: &PagedDocument,
    mode: DecodeMode,
    strategy: SearchStrategy,
    beam_size: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Generated> {
    if beam_size < 1 {
        return Err(Error::input("beam size must be at least 1"));
    }
    if max_len == 0 || max_len > params.config.max_positions {
        return Err(Error::input(format!(
            "max_len {max_len} must lie in 1..={}",
            params.config.max_positions
        )));
    }
    let bound = Bound::new(&params.tensors, false);
    let net = Network::new(&params.config, &bound);
    let encodings = net.encode_pages(&page_tokens(pd))?;
    let stepper = Stepper {
        net,
        encodings,
        mode,
    };
    match strategy {
        SearchStrategy::Greedy => greedy(&stepper, max_len, length_penalty),
        SearchStrategy::Beam => beam(&stepper, beam_size, max_len, length_penalty),
    }
}

fn greedy<F: Element>(stepper: &Stepper<'_, F>, max_len: usize, lp: f64) -> Result<Generated> {
    let mut hyp = Hypothesis {
        prefix: vec![BOS],
        log_prob: 0.0,
        finished: false,
    };
    while hyp.emitted() < max_len {
        let logp = stepper.next_log_probs(&hyp.prefix)?;
        let tok = argmax(&logp);
        hyp.log_prob += logp[tok];
        hyp.prefix.push(tok as u32);
        if tok as u32 == EOS {
            break;
        }
    }
    Ok(hyp.into_generated(lp))
}

fn beam<F: Element>(
    stepper: &Stepper<'_, F>,
    beam_size: usize,
    max_len: usize,
    lp: f64,
) -> Result<Generated> {
    let mut beams = vec![Hypothesis {
        prefix: vec![BOS],
        log_prob: 0.0,
        finished: false,
    }];
    while beams.iter().any(|b| !b.finished) {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for b in beams {
            if b.finished {
                candidates.push(b);
                continue;
            }
            let logp = stepper.next_log_probs(&b.prefix)?;
            let mut order: Vec<usize> = (0..logp.len()).collect();
            order.sort_by(|&x, &y| {
                logp[y]
                    .partial_cmp(&logp[x])
                    .unwrap_or(Ordering::Equal)
                    .then(x.cmp(&y))
            });
            for &tok in order.iter().take(beam_size) {
                let mut prefix = b.prefix.clone();
                prefix.push(tok as u32);
                let finished = tok as u32 == EOS || prefix.len() > max_len;
                candidates.push(Hypothesis {
                    prefix,
                    log_prob: b.log_prob + logp[tok],
                    finished,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.score(lp)
                .partial_cmp(&a.score(lp))
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.prefix.cmp(&b.prefix))
        });
        candidates.truncate(beam_size);
        beams = candidates;
    }
    let best = beams.into_iter().next().expect("beam never empties");
    Ok(best.into_generated(lp))
}

/// Log-probability the model assigns to emitting `tokens` (which should end
/// with EOS unless truncated) after BOS.
pub fn sequence_log_prob<F: Element>(
    params: &ModelParameters<F>,
    pd: &PagedDocument,
    mode: DecodeMode,
    tokens: &[u32],
) -> Result<f64> {
    if tokens.is_empty() {
        return Ok(0.0);
    }
    let mut prefix = vec![BOS];
    prefix.extend_from_slice(&tokens[..tokens.len() - 1]);
    let out = super::forward_prefix(params, pd, &prefix, mode)?;
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| out.distributions.row(i)[t as usize].to_f64_lossless().ln())
        .sum())
}
