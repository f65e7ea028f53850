use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    /// The small reference configuration used throughout the tests.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 16,
            n_heads: 2,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ff: 32,
            max_positions: 64,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 3 {
            return Err(Error::config(
                "vocabulary must hold at least PAD, BOS and EOS",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Positions must cover a full page.
    pub fn check_page_size(&self, page_size: usize) -> Result<()> {
        if page_size > self.max_positions {
            return Err(Error::config(format!(
                "page size {page_size} exceeds max_positions {}",
                self.max_positions
            )));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![
            ("embed.tokens".to_string(), vec![self.vocab_size, d]),
            (
                "embed.enc_positions".to_string(),
                vec![self.max_positions, d],
            ),
            (
                "embed.dec_positions".to_string(),
                vec![self.max_positions, d],
            ),
        ];
        let attn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("{prefix}.{w}"), vec![d, d]));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                out.push((format!("{prefix}.{b}"), vec![d]));
            }
        };
        let norm = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            out.push((format!("{prefix}.gain"), vec![d]));
            out.push((format!("{prefix}.bias"), vec![d]));
        };
        let ffn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            out.push((format!("{prefix}.w1"), vec![d, self.d_ff]));
            out.push((format!("{prefix}.b1"), vec![self.d_ff]));
            out.push((format!("{prefix}.w2"), vec![self.d_ff, d]));
            out.push((format!("{prefix}.b2"), vec![d]));
        };
        for l in 0..self.n_encoder_layers {
            attn(&mut out, &format!("enc.{l}.self_attn"));
            norm(&mut out, &format!("enc.{l}.ln1"));
            norm(&mut out, &format!("enc.{l}.ln2"));
            ffn(&mut out, &format!("enc.{l}.ffn"));
        }
        norm(&mut out, "enc.final_ln");
        for l in 0..self.n_decoder_layers {
            attn(&mut out, &format!("dec.{l}.self_attn"));
            attn(&mut out, &format!("dec.{l}.cross_attn"));
            norm(&mut out, &format!("dec.{l}.ln1"));
            norm(&mut out, &format!("dec.{l}.ln2"));
            norm(&mut out, &format!("dec.{l}.ln3"));
            ffn(&mut out, &format!("dec.{l}.ffn"));
        }
        norm(&mut out, "dec.final_ln");
        out.push((VOCAB_HEAD.to_string(), vec![d, self.vocab_size]));
        out.push((CONFIDENCE_HEAD.to_string(), vec![d, 1]));
        out
    }
}

/// Projection from fused decoder state to vocabulary logits.
pub const VOCAB_HEAD: &str = "head.vocab";
/// Projection from a local decoder state to its scalar confidence.
pub const CONFIDENCE_HEAD: &str = "head.conf";
