//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PGSM" | version: u32 | header_len: u32 | header: UTF-8 JSON
//! then per tensor until EOF:
//!   name_len: u32 | name: UTF-8 | rank: u32 | dims: rank × u64 | data: f32 × Π dims
//! ```
//!
//! Model checkpoints carry the [`ModelConfig`] as header. Optimizer state
//! uses the same container with its own header and `m:`/`v:` tensor names.
//! The whole file is parsed before anything is returned, so a truncated or
//! corrupt file never yields a partial load.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ModelParameters;
use crate::error::{Error, Result};
use crate::numerics::optim::{AdamConfig, OptimizerState};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"PGSM";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_container(header: &str, tensors: &BTreeMap<String, Tensor<f32>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(format!("truncated checkpoint while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::format(format!("{what} is not valid UTF-8")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<(String, BTreeMap<String, Tensor<f32>>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("bad magic bytes, not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header = r.string("header")?;
    let mut tensors = BTreeMap::new();
    while !r.done() {
        let name = r.string("tensor name")?;
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(format!(
                "tensor {name} has implausible rank {rank}"
            )));
        }
        let dims = (0..rank)
            .map(|_| r.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c > 0)
            .ok_or_else(|| Error::format(format!("tensor {name} has invalid dims {dims:?}")))?;
        let raw = r.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::format("tensor too large"))?,
            "tensor data",
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if tensors
            .insert(name.clone(), Tensor::from_parts(dims, data))
            .is_some()
        {
            return Err(Error::format(format!("duplicate tensor {name}")));
        }
    }
    Ok((header, tensors))
}

pub fn save_checkpoint(path: &Path, params: &ModelParameters<f32>) -> Result<()> {
    let header = serde_json::to_string(&params.config)?;
    write_atomic(path, &encode_container(&header, &params.tensors))
}

/// Loads a checkpoint; with `expected` set, the stored config must match it.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<ModelParameters<f32>> {
    let (header, tensors) = decode_container(&read(path)?)?;
    let config: ModelConfig = serde_json::from_str(&header)
        .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    if let Some(exp) = expected {
        if exp != &config {
            return Err(Error::config(format!(
                "checkpoint config {config:?} does not match expected {exp:?}"
            )));
        }
    }
    let params = ModelParameters { config, tensors };
    params.validate()?;
    Ok(params)
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    adam: AdamConfig,
}

pub fn save_optimizer(path: &Path, state: &OptimizerState<f32>) -> Result<()> {
    let header = serde_json::to_string(&OptimizerHeader {
        step: state.step,
        adam: state.config,
    })?;
    let mut tensors = BTreeMap::new();
    for (n, t) in &state.first_moment {
        tensors.insert(format!("m:{n}"), t.clone());
    }
    for (n, t) in &state.second_moment {
        tensors.insert(format!("v:{n}"), t.clone());
    }
    write_atomic(path, &encode_container(&header, &tensors))
}

pub fn load_optimizer(path: &Path, params: &ModelParameters<f32>) -> Result<OptimizerState<f32>> {
    let (header, tensors) = decode_container(&read(path)?)?;
    let header: OptimizerHeader = serde_json::from_str(&header)
        .map_err(|e| Error::format(format!("optimizer header: {e}")))?;
    let mut state = OptimizerState::new(header.adam, &params.tensors);
    state.step = header.step;
    for (name, p) in &params.tensors {
        for (prefix, slot) in [
            ("m", &mut state.first_moment),
            ("v", &mut state.second_moment),
        ] {
            let t = tensors
                .get(&format!("{prefix}:{name}"))
                .ok_or_else(|| Error::config(format!("optimizer state lacks {prefix}:{name}")))?;
            if t.shape() != p.shape() {
                return Err(Error::config(format!(
                    "optimizer moment {prefix}:{name} has wrong shape"
                )));
            }
            slot.insert(name.clone(), t.clone());
        }
    }
    Ok(state)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path)
        .map_err(|e| Error::input(format!("cannot read checkpoint {}: {e}", path.display())))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::adam_step;
    use crate::numerics::var::Gradients;

    fn tiny() -> ModelParameters<f32> {
        let mut p = ModelParameters::init(&ModelConfig::tiny(), 11).unwrap();
        p.randomize_confidence(1, 0.3);
        p
    }

    fn bits(p: &ModelParameters<f32>) -> Vec<u32> {
        p.tensors
            .values()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgsm");
        let p = tiny();
        save_checkpoint(&path, &p).unwrap();
        let q = load_checkpoint(&path, Some(&p.config)).unwrap();
        assert_eq!(bits(&p), bits(&q));
        assert_eq!(p.config, q.config);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"PGSM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgsm");
        save_checkpoint(&path, &tiny()).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(
                matches!(load_checkpoint(&path, None), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn wrong_magic_or_version() {
        let mut bytes = encode_container("{}", &BTreeMap::new());
        bytes[0] = b'X';
        assert!(matches!(decode_container(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_container("{}", &BTreeMap::new());
        bytes[4] = 2;
        let err = decode_container(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 2"));
    }

    #[test]
    fn config_mismatch_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgsm");
        save_checkpoint(&path, &tiny()).unwrap();
        let wider = ModelConfig {
            d_model: 32,
            ..ModelConfig::tiny()
        };
        assert!(matches!(
            load_checkpoint(&path, Some(&wider)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn optimizer_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.pgsm");
        let mut p = tiny();
        let mut st = OptimizerState::new(AdamConfig::default(), &p.tensors);
        let grads = Gradients(
            p.tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.map(|v| v * 0.5 + 0.1)))
                .collect(),
        );
        adam_step(&mut p.tensors, &grads, &mut st).unwrap();
        save_optimizer(&path, &st).unwrap();
        let back = load_optimizer(&path, &p).unwrap();
        assert_eq!(back, st);
    }
}
