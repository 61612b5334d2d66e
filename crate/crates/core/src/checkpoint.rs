//! Binary checkpoints: model configuration, parameters, running buffers,
//! optimizer state, epoch and validation score.
//!
//! Layout (little-endian): magic `STBL`, version `u32`, dtype code `u8`,
//! model config, epoch `u32`, validation score `f64`, optimizer flag `u8`
//! (followed by learning rate and momentum as `f64` when set), tensor count
//! `u32`, then per tensor: kind `u8`, name length `u32`, UTF-8 name, rank
//! `u32`, dims `u32` each, payload.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{build_model, ModelConfig, ModelParams};
use crate::optim::OptimizerState;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"STBL";
pub const VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_VELOCITY: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelParams<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub epoch: u32,
    pub val_score: f64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, kind: u8, name: &str, t: &Tensor<T>) -> Result<()> {
    out.push(kind);
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = &self.model.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE.code());
        for v in [cfg.height, cfg.width, cfg.channels, cfg.classes, cfg.stem_channels, cfg.stem_stride] {
            put_u32(&mut out, v)?;
        }
        out.push(cfg.norm as u8);
        put_u32(&mut out, cfg.stage_blocks.len())?;
        for &b in &cfg.stage_blocks {
            put_u32(&mut out, b)?;
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.val_score.to_le_bytes());
        match &self.optimizer {
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.lr.to_le_bytes());
                out.extend_from_slice(&opt.momentum.to_le_bytes());
            }
            None => out.push(0),
        }
        let velocities = self.optimizer.as_ref().map(|o| &o.velocity);
        let count = self.model.params.len() + self.model.buffers.len() + velocities.map_or(0, |v| v.len());
        put_u32(&mut out, count)?;
        for (name, t) in &self.model.params {
            put_tensor(&mut out, KIND_PARAM, name, t)?;
        }
        for (name, t) in &self.model.buffers {
            put_tensor(&mut out, KIND_BUFFER, name, t)?;
        }
        for (name, t) in velocities.into_iter().flatten() {
            put_tensor(&mut out, KIND_VELOCITY, name, t)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.err_at(0, format!("magic is {magic:?}, expected \"STBL\"")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.err_at(4, format!("format version {version}, this build reads {VERSION}")));
        }
        let code = r.u8("dtype")?;
        match DType::from_code(code) {
            Some(d) if d == T::DTYPE => {}
            Some(d) => return Err(r.err_at(8, format!("file stores {d:?}, requested {:?}", T::DTYPE))),
            None => return Err(r.err_at(8, format!("unknown dtype code {code}"))),
        }
        let mut dims = [0usize; 6];
        for (d, field) in dims.iter_mut().zip(["height", "width", "channels", "classes", "stem_channels", "stem_stride"]) {
            *d = r.u32(field)? as usize;
        }
        let norm = match r.u8("norm")? {
            0 => false,
            1 => true,
            v => return Err(r.err_at(r.pos - 1, format!("norm flag {v} is not 0 or 1"))),
        };
        let stages = r.u32("stage count")? as usize;
        let stage_blocks = (0..stages.min(64))
            .map(|_| r.u32("stage blocks").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let config = ModelConfig {
            height: dims[0],
            width: dims[1],
            channels: dims[2],
            classes: dims[3],
            stem_channels: dims[4],
            stem_stride: dims[5],
            stage_blocks,
            norm,
        };
        config
            .validate()
            .map_err(|e| r.err_at(9, format!("model config invalid: {e}")))?;
        // Reject architectures the remaining bytes cannot hold before
        // allocating them.
        let remaining = bytes.len() - r.pos;
        match config.stored_values().and_then(|v| v.checked_mul(T::DTYPE.size())) {
            Some(need) if need <= remaining => {}
            _ => {
                return Err(r.err_at(
                    9,
                    format!("model config {config:?} needs more data than the {remaining} remaining bytes"),
                ))
            }
        }
        let epoch = r.u32("epoch")?;
        let val_score = r.f64("validation score")?;
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => Some((r.f64("learning rate")?, r.f64("momentum")?)),
            v => return Err(r.err_at(r.pos - 1, format!("optimizer flag {v} is not 0 or 1"))),
        };

        // Shapes come from the configuration, so payload sizes are checked
        // against the architecture rather than trusted from the file.
        let template: ModelParams<T> = build_model(&config, 0)?;
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let mut velocity = BTreeMap::new();
        let count = r.u32("tensor count")?;
        for _ in 0..count {
            let start = r.pos;
            let kind = r.u8("tensor kind")?;
            let len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| r.err_at(start + 5, "tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("tensor rank")? as usize;
            if rank > 8 {
                return Err(r.err_at(r.pos - 4, format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32("tensor dims").map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let (map, expected) = match kind {
                KIND_PARAM => (&mut params, template.params.get(&name)),
                KIND_BUFFER => (&mut buffers, template.buffers.get(&name)),
                KIND_VELOCITY if optimizer.is_some() => (&mut velocity, template.params.get(&name)),
                _ => return Err(r.err_at(start, format!("tensor {name} has unexpected kind {kind}"))),
            };
            let expected = expected.ok_or_else(|| r.err_at(start, format!("unknown tensor {name}")))?;
            if expected.shape() != shape.as_slice() {
                return Err(r.err_at(
                    start,
                    format!("tensor {name} has shape {shape:?}, architecture needs {:?}", expected.shape()),
                ));
            }
            let n: usize = shape.iter().product();
            let size = T::DTYPE.size();
            let payload = r.take(n * size, &format!("payload of {name}"))?;
            let data = payload.chunks(size).map(T::read_le).collect();
            if map.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(r.err_at(start, format!("tensor {name} appears twice")));
            }
        }
        if r.pos != bytes.len() {
            return Err(r.err_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        for (map, want, what) in [
            (&params, &template.params, "parameter"),
            (&buffers, &template.buffers, "buffer"),
        ] {
            if let Some(missing) = want.keys().find(|k| !map.contains_key(*k)) {
                return Err(r.err_at(bytes.len(), format!("missing {what} {missing}")));
            }
        }
        let optimizer = optimizer
            .map(|(lr, momentum)| {
                if let Some(missing) = template.params.keys().find(|k| !velocity.contains_key(*k)) {
                    return Err(r.err_at(bytes.len(), format!("missing velocity for {missing}")));
                }
                Ok(OptimizerState { lr, momentum, velocity })
            })
            .transpose()?;
        Ok(Checkpoint {
            model: ModelParams { config, params, buffers },
            optimizer,
            epoch,
            val_score,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, detail: String) -> Error {
        Error::Format {
            what: "checkpoint",
            offset,
            detail,
        }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(self.err_at(self.pos, format!("truncated {field}: need {n} bytes, {remaining} remain")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let cfg = ModelConfig {
            height: 8,
            width: 8,
            channels: 3,
            classes: 4,
            stem_channels: 4,
            stem_stride: 1,
            stage_blocks: vec![1, 1],
            norm: true,
        };
        let model: ModelParams<f32> = build_model(&cfg, 3).unwrap();
        let mut opt = OptimizerState::new(&model.params, 0.01, 0.9).unwrap();
        for v in opt.velocity.values_mut() {
            for (i, x) in v.data_mut().iter_mut().enumerate() {
                *x = (i as f32 * 0.37).sin();
            }
        }
        Checkpoint {
            model,
            optimizer: Some(opt),
            epoch: 7,
            val_score: 0.8125,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!((back.epoch, back.val_score), (7, 0.8125));
    }

    #[test]
    fn corruption_is_diagnosed() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::<f32>::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        let err = Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("truncated payload"), "{err}");
        assert!(Checkpoint::<f64>::from_bytes(&bytes).unwrap_err().to_string().contains("requested"));
    }
}
