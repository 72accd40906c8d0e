//! Bit-exact training checkpoints.
//!
//! Layout (little endian): magic `RFCK`, `u32` version (1), `u32` header
//! length, a JSON header (field config, optimizer hyperparameters and step,
//! global iteration, tensor names and lengths), then every parameter tensor
//! as `f32`, followed by the first and then second Adam moments in the same
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{FieldConfig, RadianceField};
use crate::imageio::ensure_parent;
use crate::nn::{Adam, AdamConfig, ParamTensors};
use crate::train::TrainState;

const MAGIC: &[u8; 4] = b"RFCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    field: FieldConfig,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    adam_step: u64,
    iteration: u64,
    tensors: Vec<(String, usize)>,
}

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let named = state.field.tensors();
    let c = state.optimizer.config;
    let header = Header {
        field: state.field.config().clone(),
        lr: c.lr,
        beta1: c.beta1,
        beta2: c.beta2,
        eps: c.eps,
        adam_step: state.optimizer.step_count(),
        iteration: state.iteration,
        tensors: named.iter().map(|(n, t)| (n.clone(), t.len())).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    let tensors = named.iter().map(|(_, t)| *t);
    let moments = state.optimizer.first_moments().iter().chain(state.optimizer.second_moments()).map(Vec::as_slice);
    for t in tensors.chain(moments) {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<TrainState> {
    let bad = |reason: String| Error::Format {
        path: origin.to_owned(),
        reason,
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing RFCK header".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    if word(4) != VERSION {
        return Err(bad(format!("unsupported checkpoint version {}", word(4))));
    }
    let hlen = word(8) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
    let mut field = RadianceField::new(header.field.clone()).map_err(|e| bad(format!("field config: {e}")))?;
    let layout: Vec<(String, usize)> = field.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    if layout != header.tensors {
        return Err(bad("tensor layout does not match the field config".into()));
    }
    let total: usize = layout.iter().map(|(_, n)| n).sum();
    let mut floats = bytes[12 + hlen..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    if bytes.len() - 12 - hlen != 4 * 3 * total {
        return Err(bad("payload length does not match the tensor layout".into()));
    }
    for t in field.tensors_mut() {
        for v in t.iter_mut() {
            *v = floats.next().unwrap();
        }
    }
    let mut read = || -> Vec<Vec<f32>> { layout.iter().map(|(_, n)| floats.by_ref().take(*n).collect()).collect() };
    let m = read();
    let v = read();
    let config = AdamConfig {
        lr: header.lr,
        beta1: header.beta1,
        beta2: header.beta2,
        eps: header.eps,
    };
    Ok(TrainState {
        field,
        optimizer: Adam::from_parts(config, header.adam_step, m, v),
        iteration: header.iteration,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, to_bytes(state)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            what: format!("checkpoint {}", path.display()),
            remedy: "train the corresponding stage first".into(),
        });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    from_bytes(&bytes, path)
}

/// Short content hash identifying a checkpoint.
pub fn fingerprint(state: &TrainState) -> String {
    let digest = Sha256::digest(to_bytes(state));
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldMode;
    use crate::train::TrainSchedule;

    #[test]
    fn round_trip_is_bit_exact() {
        for mode in [FieldMode::Standard, FieldMode::Deferred] {
            let cfg = FieldConfig {
                mode,
                trunk_width: 16,
                trunk_depth: 2,
                feature_width: 8,
                color_width: 8,
                seed: 5,
                ..FieldConfig::default()
            };
            let mut state = TrainState::new(cfg, &TrainSchedule::default()).unwrap();
            state.iteration = 17;
            let grads = {
                let mut g = state.field.zero_grads();
                for t in g.tensors_mut() {
                    for (i, v) in t.iter_mut().enumerate() {
                        *v = (i as f32 * 0.37).sin();
                    }
                }
                g
            };
            state.optimizer.step(&mut state.field, &grads).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("c.ckpt");
            save(&state, &p).unwrap();
            let back = load(&p).unwrap();
            assert_eq!(back, state);
            assert_eq!(fingerprint(&back), fingerprint(&state));
            assert_eq!(to_bytes(&back), to_bytes(&state));
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        assert!(matches!(load(&p), Err(Error::MissingArtifact { .. })));
        fs::write(&p, b"RFCK\x01\0\0\0\x02\0\0\0{}").unwrap();
        assert!(load(&p).is_err());
    }
}
