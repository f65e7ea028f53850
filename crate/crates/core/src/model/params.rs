use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, CONFIDENCE_HEAD, VOCAB_HEAD};
use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// All named weights of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<F: Element = f32> {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Element> ModelParameters<F> {
    /// Seeded initialisation. Linear weights are N(0, 1/fan_in), embeddings
    /// N(0, 0.5²), the vocabulary head N(0, 0.02²); normalisation gains are 1,
    /// biases 0, and the confidence head starts at zero so every page begins
    /// with equal weight.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let leaf = name.rsplit('.').next().unwrap_or("");
            let std = if name == CONFIDENCE_HEAD || shape.len() == 1 {
                None
            } else if name == VOCAB_HEAD {
                Some(0.02)
            } else if name.starts_with("embed.") {
                Some(0.5)
            } else {
                Some(1.0 / (shape[0] as f64).sqrt())
            };
            let tensor = match std {
                Some(s) => {
                    let normal = Normal::new(0.0, s).expect("positive std");
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| F::of(normal.sample(&mut rng))).collect();
                    Tensor::from_parts(shape, data)
                }
                None if leaf == "gain" => Tensor::full(&shape, F::one()),
                None => Tensor::zeros(&shape),
            };
            tensors.insert(name, tensor);
        }
        Ok(ModelParameters {
            config: config.clone(),
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    /// Fills the confidence head with N(0, std²) noise; used where fusion
    /// weights should be non-uniform from the start.
    pub fn randomize_confidence(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("positive std");
        let conf = self
            .tensors
            .get_mut(CONFIDENCE_HEAD)
            .expect("confidence head");
        for v in conf.data_mut() {
            *v = F::of(normal.sample(&mut rng));
        }
    }

    /// Checks names and shapes against the config.
    pub fn validate(&self) -> Result<()> {
        let expected = self.config.parameter_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::config(format!(
                "expected {} parameters, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            match self.tensors.get(&name) {
                None => return Err(Error::config(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::config(format!(
                        "parameter {name} has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<G: Element>(&self) -> ModelParameters<G> {
        ModelParameters {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }
}
