//! Graph construction for the encoder, the per-page decoder and fusion.
//!
//! Blocks are pre-norm: `x + Sublayer(LayerNorm(x))`, with a final layer
//! norm on each stack. Positions restart at zero for every page, and the
//! decoder weights are shared by all per-page passes.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, CONFIDENCE_HEAD, VOCAB_HEAD};
use crate::error::{Error, Result};
use crate::numerics::memory::{AttentionKind, AttentionSite};
use crate::numerics::{attention, cross_entropy_smoothed, Bound, Element, Tensor, Var};
use crate::text::vocab::{BOS, EOS};

const LN_EPS: f64 = 1e-5;

/// How page encodings reach the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// One decoder pass per page, fused by confidence.
    #[default]
    Paged,
    /// Page encodings concatenated and decoded in a single pass.
    Global,
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paged" => Ok(DecodeMode::Paged),
            "global" => Ok(DecodeMode::Global),
            other => Err(Error::input(format!(
                "unknown mode {other:?} (expected paged or global)"
            ))),
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Paged => "paged",
            DecodeMode::Global => "global",
        })
    }
}

struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

/// Per-page local states and raw confidence columns, in page order.
pub type LocalVars<F> = (Vec<Var<F>>, Vec<Var<F>>);

/// Graph outputs of one teacher-forced pass.
pub struct ForwardVars<F: Element> {
    pub logits: Var<F>,
    /// Final-layer decoder states, one `[steps × d]` per page (one entry in
    /// global mode).
    pub local_hidden: Vec<Var<F>>,
    /// Raw and softmax-normalised confidences, `[steps × pages]`; paged only.
    pub confidence: Option<(Var<F>, Var<F>)>,
    pub fused: Var<F>,
}

pub struct Network<'a, F: Element> {
    config: &'a ModelConfig,
    params: &'a Bound<F>,
    dropout: RefCell<Option<Dropout>>,
}

/// `[BOS] ++ target` as decoder input and `target ++ [EOS]` as labels,
/// truncated to the position table.
pub fn teacher_forcing(target: &[u32], max_positions: usize) -> (Vec<u32>, Vec<u32>) {
    let keep = target.len().min(max_positions.saturating_sub(1));
    let mut input = Vec::with_capacity(keep + 1);
    input.push(BOS);
    input.extend_from_slice(&target[..keep]);
    let mut labels = target[..keep].to_vec();
    labels.push(EOS);
    (input, labels)
}

impl<'a, F: Element> Network<'a, F> {
    pub fn new(config: &'a ModelConfig, params: &'a Bound<F>) -> Self {
        Network {
            config,
            params,
            dropout: RefCell::new(None),
        }
    }

    /// Enables dropout with its own seeded stream. A zero rate is a no-op.
    pub fn with_dropout(self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            *self.dropout.borrow_mut() = Some(Dropout {
                rate,
                rng: ChaCha8Rng::seed_from_u64(seed),
            });
        }
        self
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    fn p(&self, name: &str) -> &Var<F> {
        self.params.get(name)
    }

    fn dropout(&self, x: Var<F>) -> Var<F> {
        let mut guard = self.dropout.borrow_mut();
        let Some(d) = guard.as_mut() else {
            return x;
        };
        let keep = F::of(1.0 / (1.0 - d.rate));
        let mask: Vec<F> = (0..x.value().len())
            .map(|_| {
                if d.rng.gen::<f64>() < d.rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mask = Var::constant(Tensor::from_parts(x.shape().to_vec(), mask));
        x.mul(&mask)
    }

    fn linear(&self, x: &Var<F>, w: &str, b: &str) -> Var<F> {
        x.matmul(self.p(w)).add_row(self.p(b))
    }

    fn norm(&self, x: &Var<F>, prefix: &str) -> Var<F> {
        x.layer_norm(
            self.p(&format!("{prefix}.gain")),
            self.p(&format!("{prefix}.bias")),
            F::of(LN_EPS),
        )
    }

    fn multi_head(
        &self,
        prefix: &str,
        queries: &Var<F>,
        keys: &Var<F>,
        mask: Option<&[bool]>,
        kind: AttentionKind,
        layer: usize,
    ) -> Result<Var<F>> {
        let q = self.linear(queries, &format!("{prefix}.wq"), &format!("{prefix}.bq"));
        let k = self.linear(keys, &format!("{prefix}.wk"), &format!("{prefix}.bk"));
        let v = self.linear(keys, &format!("{prefix}.wv"), &format!("{prefix}.bv"));
        let dh = self.config.head_dim();
        let heads = (0..self.config.n_heads)
            .map(|h| {
                attention(
                    &q.slice_cols(h * dh, dh),
                    &k.slice_cols(h * dh, dh),
                    &v.slice_cols(h * dh, dh),
                    mask,
                    AttentionSite::new(kind, layer, h),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let merged = if heads.len() == 1 {
            heads.into_iter().next().expect("one head")
        } else {
            Var::concat_cols(&heads)
        };
        Ok(self.linear(&merged, &format!("{prefix}.wo"), &format!("{prefix}.bo")))
    }

    fn feed_forward(&self, prefix: &str, x: &Var<F>) -> Var<F> {
        let h = self
            .linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))
            .gelu();
        self.linear(&h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn embed(&self, tokens: &[u32], positions: &str) -> Result<Var<F>> {
        if tokens.is_empty() {
            return Err(Error::input("cannot embed an empty sequence"));
        }
        if tokens.len() > self.config.max_positions {
            return Err(Error::input(format!(
                "sequence of {} tokens exceeds max_positions {}",
                tokens.len(),
                self.config.max_positions
            )));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let pos: Vec<usize> = (0..tokens.len()).collect();
        let tok = Var::embedding(self.p("embed.tokens"), &ids)?;
        let pe = Var::embedding(self.p(positions), &pos)?;
        Ok(self.dropout(tok.add(&pe)))
    }

    /// Encoder stack over one page in isolation.
    pub fn encode_page(&self, tokens: &[u32]) -> Result<Var<F>> {
        let mut x = self.embed(tokens, "embed.enc_positions")?;
        for l in 0..self.config.n_encoder_layers {
            let h = self.norm(&x, &format!("enc.{l}.ln1"));
            let a = self.multi_head(
                &format!("enc.{l}.self_attn"),
                &h,
                &h,
                None,
                AttentionKind::EncoderSelf,
                l,
            )?;
            x = x.add(&self.dropout(a));
            let h = self.norm(&x, &format!("enc.{l}.ln2"));
            x = x.add(&self.dropout(self.feed_forward(&format!("enc.{l}.ffn"), &h)));
        }
        Ok(self.norm(&x, "enc.final_ln"))
    }

    /// Decoder stack over `prefix` with cross-attention to `memory`;
    /// returns final-layer states `[prefix_len × d]`.
    pub fn decode(&self, prefix: &[u32], memory: &Var<F>) -> Result<Var<F>> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::input("decoder prefix must begin with BOS"));
        }
        let n = prefix.len();
        let causal: Vec<bool> = (0..n * n).map(|c| c % n <= c / n).collect();
        let mut x = self.embed(prefix, "embed.dec_positions")?;
        for l in 0..self.config.n_decoder_layers {
            let h = self.norm(&x, &format!("dec.{l}.ln1"));
            let a = self.multi_head(
                &format!("dec.{l}.self_attn"),
                &h,
                &h,
                Some(&causal),
                AttentionKind::DecoderSelf,
                l,
            )?;
            x = x.add(&self.dropout(a));
            let h = self.norm(&x, &format!("dec.{l}.ln2"));
            let c = self.multi_head(
                &format!("dec.{l}.cross_attn"),
                &h,
                memory,
                None,
                AttentionKind::Cross,
                l,
            )?;
            x = x.add(&self.dropout(c));
            let h = self.norm(&x, &format!("dec.{l}.ln3"));
            x = x.add(&self.dropout(self.feed_forward(&format!("dec.{l}.ffn"), &h)));
        }
        Ok(self.norm(&x, "dec.final_ln"))
    }

    /// Per-page local states and their raw confidences `[steps × 1]`.
    pub fn decode_local(&self, encodings: &[Var<F>], prefix: &[u32]) -> Result<LocalVars<F>> {
        if encodings.is_empty() {
            return Err(Error::input("no page encodings to decode against"));
        }
        let mut local = Vec::with_capacity(encodings.len());
        let mut conf = Vec::with_capacity(encodings.len());
        for enc in encodings {
            let h = self.decode(prefix, enc)?;
            conf.push(h.matmul(self.p(CONFIDENCE_HEAD)));
            local.push(h);
        }
        Ok((local, conf))
    }

    /// Softmax over pages of the confidences, then the weighted sum of local
    /// states, accumulated in page order.
    pub fn fuse(local: &[Var<F>], conf: &[Var<F>]) -> (Var<F>, Var<F>, Var<F>) {
        let raw = if conf.len() == 1 {
            conf[0].clone()
        } else {
            Var::concat_cols(conf)
        };
        let norm = raw.softmax_rows();
        let mut fused: Option<Var<F>> = None;
        for (j, h) in local.iter().enumerate() {
            let weighted = h.mul_col(&norm.slice_cols(j, 1));
            fused = Some(match fused {
                None => weighted,
                Some(acc) => acc.add(&weighted),
            });
        }
        (raw, norm, fused.expect("at least one page"))
    }

    pub fn project_vocab(&self, fused: &Var<F>) -> Var<F> {
        fused.matmul(self.p(VOCAB_HEAD))
    }

    pub fn encode_pages(&self, pages: &[Vec<u32>]) -> Result<Vec<Var<F>>> {
        if pages.is_empty() {
            return Err(Error::input("document has no pages"));
        }
        pages.iter().map(|p| self.encode_page(p)).collect()
    }

    /// Decoder pass over already-encoded pages.
    pub fn forward_encoded(
        &self,
        encodings: &[Var<F>],
        prefix: &[u32],
        mode: DecodeMode,
    ) -> Result<ForwardVars<F>> {
        match mode {
            DecodeMode::Paged => {
                let (local, conf) = self.decode_local(encodings, prefix)?;
                let (raw, norm, fused) = Self::fuse(&local, &conf);
                Ok(ForwardVars {
                    logits: self.project_vocab(&fused),
                    local_hidden: local,
                    confidence: Some((raw, norm)),
                    fused,
                })
            }
            DecodeMode::Global => {
                if encodings.is_empty() {
                    return Err(Error::input("no page encodings to decode against"));
                }
                let memory = if encodings.len() == 1 {
                    encodings[0].clone()
                } else {
                    Var::concat_rows(encodings)
                };
                let h = self.decode(prefix, &memory)?;
                Ok(ForwardVars {
                    logits: self.project_vocab(&h),
                    local_hidden: vec![h.clone()],
                    confidence: None,
                    fused: h,
                })
            }
        }
    }

    pub fn forward(
        &self,
        pages: &[Vec<u32>],
        prefix: &[u32],
        mode: DecodeMode,
    ) -> Result<ForwardVars<F>> {
        let encodings = self.encode_pages(pages)?;
        self.forward_encoded(&encodings, prefix, mode)
    }

    /// Teacher-forced smoothed cross-entropy of `target` given `pages`.
    pub fn loss(
        &self,
        pages: &[Vec<u32>],
        target: &[u32],
        mode: DecodeMode,
        smoothing: f64,
    ) -> Result<Var<F>> {
        let (input, labels) = teacher_forcing(target, self.config.max_positions);
        let out = self.forward(pages, &input, mode)?;
        let labels: Vec<usize> = labels.iter().map(|&t| t as usize).collect();
        cross_entropy_smoothed(&out.logits, &labels, F::of(smoothing))
    }
}
