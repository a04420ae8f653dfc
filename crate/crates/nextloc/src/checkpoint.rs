//! Binary checkpoint format: a version tag, the model config as JSON, and
//! named tensors with raw little-endian values. Round-trips bit-exactly.

use std::io::Write;
use std::path::Path;

use minitensor::Scalar;

use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 4] = b"NLCK";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported checkpoint version {version}")]
    BadVersion { path: String, version: u32 },
    #[error("{path}: stored dtype tag {found} does not match the requested precision {expected}")]
    DtypeMismatch {
        path: String,
        found: u8,
        expected: u8,
    },
    #[error("{path}: malformed checkpoint: {msg}")]
    Malformed { path: String, msg: String },
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn push_tensor<E: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[E]) {
    push_str(out, name);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in values {
        v.write_le(out);
    }
}

/// Serialise a model: parameters first, then the batch-norm running buffers.
pub fn save<E: Scalar>(path: &Path, model: &Model<E>) -> Result<(), CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(E::DTYPE_TAG);
    let config = serde_json::to_string(&model.config).expect("config serialises");
    push_str(&mut out, &config);
    let params = model.named_parameters();
    let buffers = model.named_buffers();
    out.extend_from_slice(&((params.len() + buffers.len()) as u32).to_le_bytes());
    for (name, tensor) in &params {
        push_tensor(&mut out, name, tensor.shape(), &tensor.value());
    }
    for (name, values) in &buffers {
        push_tensor(&mut out, name, &[values.len()], values);
    }
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&out).map_err(|e| io_err(path, e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(CheckpointError::Malformed {
                path: self.path.clone(),
                msg: format!("truncated at byte {}", self.pos),
            });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError::Malformed {
            path: self.path.clone(),
            msg: "non-utf8 string".into(),
        })
    }
}

/// The element precision a checkpoint was written with.
pub fn stored_precision(path: &Path) -> Result<crate::train::Precision, CheckpointError> {
    let data = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
        path: path.display().to_string(),
    };
    match check_header(&mut cur, None)? {
        4 => Ok(crate::train::Precision::F32),
        8 => Ok(crate::train::Precision::F64),
        other => Err(CheckpointError::Malformed {
            path: path.display().to_string(),
            msg: format!("unknown dtype tag {other}"),
        }),
    }
}

/// The config stored in a checkpoint, without loading tensors.
pub fn read_config(path: &Path) -> Result<ModelConfig, CheckpointError> {
    let data = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
        path: path.display().to_string(),
    };
    check_header(&mut cur, None)?;
    parse_config(&mut cur)
}

fn check_header(cur: &mut Cursor, expected_dtype: Option<u8>) -> Result<u8, CheckpointError> {
    if cur.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic {
            path: cur.path.clone(),
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion {
            path: cur.path.clone(),
            version,
        });
    }
    let dtype = cur.take(1)?[0];
    if let Some(expected) = expected_dtype {
        if dtype != expected {
            return Err(CheckpointError::DtypeMismatch {
                path: cur.path.clone(),
                found: dtype,
                expected,
            });
        }
    }
    Ok(dtype)
}

fn parse_config(cur: &mut Cursor) -> Result<ModelConfig, CheckpointError> {
    let config_json = cur.string()?;
    serde_json::from_str(&config_json).map_err(|e| CheckpointError::Malformed {
        path: cur.path.clone(),
        msg: format!("bad config json: {e}"),
    })
}

/// Load a checkpoint into a freshly built model of the same configuration.
pub fn load<E: Scalar>(path: &Path) -> Result<Model<E>, CheckpointError> {
    let data = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
        path: path.display().to_string(),
    };
    check_header(&mut cur, Some(E::DTYPE_TAG))?;
    let config = parse_config(&mut cur)?;
    let model = Model::<E>::new(&config, 0).map_err(|e| CheckpointError::Malformed {
        path: path.display().to_string(),
        msg: format!("config rejected: {e}"),
    })?;

    let count = cur.u32()? as usize;
    let mut stored: Vec<(String, Vec<usize>, Vec<E>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name = cur.string()?;
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * E::BYTES)?;
        let values: Vec<E> = raw.chunks_exact(E::BYTES).map(E::read_le).collect();
        stored.push((name, shape, values));
    }
    if cur.pos != cur.data.len() {
        return Err(CheckpointError::Malformed {
            path: cur.path.clone(),
            msg: format!("{} trailing bytes", cur.data.len() - cur.pos),
        });
    }

    let params = model.named_parameters();
    let buffer_names: Vec<String> = model.named_buffers().into_iter().map(|(n, _)| n).collect();
    for (name, shape, values) in stored {
        if let Some((_, tensor)) = params.iter().find(|(n, _)| *n == name) {
            if tensor.shape() != shape.as_slice() {
                return Err(CheckpointError::Malformed {
                    path: path.display().to_string(),
                    msg: format!(
                        "tensor {name} has shape {:?}, model expects {:?}",
                        shape,
                        tensor.shape()
                    ),
                });
            }
            tensor.set_value(&values);
        } else if buffer_names.contains(&name) {
            model
                .set_buffer(&name, values)
                .map_err(|e| CheckpointError::Malformed {
                    path: path.display().to_string(),
                    msg: e.to_string(),
                })?;
        } else {
            return Err(CheckpointError::Malformed {
                path: path.display().to_string(),
                msg: format!("unknown tensor {name}"),
            });
        }
    }
    Ok(model)
}

/// Raw bytes of a model's checkpoint (for determinism checks without
/// touching the filesystem twice).
pub fn to_bytes<E: Scalar>(model: &Model<E>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(E::DTYPE_TAG);
    let config = serde_json::to_string(&model.config).expect("config serialises");
    push_str(&mut out, &config);
    let params = model.named_parameters();
    let buffers = model.named_buffers();
    out.extend_from_slice(&((params.len() + buffers.len()) as u32).to_le_bytes());
    for (name, tensor) in &params {
        push_tensor(&mut out, name, tensor.shape(), &tensor.value());
    }
    for (name, values) in &buffers {
        push_tensor(&mut out, name, &[values.len()], values);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_user: 4,
            num_layers: 2,
            num_heads: 2,
            feedforward: 16,
            num_locations: 6,
            num_users: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::<f32>::new(&tiny_config(), 99).unwrap();
        // make the running buffers non-trivial
        model
            .set_buffer("fusion.bn.running_mean", vec![0.25; 12])
            .unwrap();
        save(&path, &model).unwrap();
        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        for ((na, ta), (nb, tb)) in model
            .named_parameters()
            .iter()
            .zip(loaded.named_parameters().iter())
        {
            assert_eq!(na, nb);
            let (va, vb) = (ta.to_vec(), tb.to_vec());
            assert_eq!(
                va.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                vb.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                "{na}"
            );
        }
        assert_eq!(model.named_buffers(), loaded.named_buffers());
        // saving the loaded model reproduces the file byte for byte
        let again = dir.path().join("again.ckpt");
        save(&again, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&again).unwrap()
        );
    }

    #[test]
    fn wrong_precision_and_garbage_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::<f32>::new(&tiny_config(), 1).unwrap();
        save(&path, &model).unwrap();
        assert!(matches!(
            load::<f64>(&path),
            Err(CheckpointError::DtypeMismatch { .. })
        ));
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"not a checkpoint").unwrap();
        assert!(matches!(
            load::<f32>(&bad),
            Err(CheckpointError::BadMagic { .. })
        ));
        let config = read_config(&path).unwrap();
        assert_eq!(config, tiny_config());
    }
}
