//! Binary checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! b"PCRP"                       magic
//! u32 version                   currently 1
//! u32 count                     number of tensor records
//! count × {
//!     u32 name_len, name bytes (UTF-8)
//!     u32 rank, rank × u32 dims
//!     numel × f32 payload
//! }
//! u32 config_len, config bytes  TrainConfig as UTF-8 JSON
//! ```
//!
//! Encoder tensors are named `encoder.<param>`, decoder tensors
//! `decoder.<param>` (the decoder readout is `decoder.readout.*`).

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{PcrpError, Result};
use crate::numcore::{Real, Tensor};
use crate::rnn::GruParams;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"PCRP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub config_json: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(PcrpError::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(PcrpError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            if numel * 4 > bytes.len() {
                return Err(PcrpError::Checkpoint(format!("tensor `{name}` larger than the file")));
            }
            let data = (0..numel)
                .map(|_| {
                    let mut b = [0u8; 4];
                    read_exact(&mut r, &mut b).map(|_| f32::from_le_bytes(b))
                })
                .collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let config_json = read_string(&mut r)?;
        if (r.position() as usize) != bytes.len() {
            return Err(PcrpError::Checkpoint("trailing bytes after config record".into()));
        }
        Ok(Self { tensors, config_json })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| PcrpError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| PcrpError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_models<F: Real>(encoder: &GruParams<F>, decoder: &GruParams<F>, cfg: &TrainConfig) -> Result<Self> {
        let mut tensors = Vec::new();
        for (prefix, p) in [("encoder", encoder), ("decoder", decoder)] {
            for (name, t) in p.names().into_iter().zip(p.tensors()) {
                tensors.push((format!("{prefix}.{name}"), t.cast::<f32>()));
            }
        }
        Ok(Self {
            tensors,
            config_json: serde_json::to_string(cfg)?,
        })
    }

    pub fn config(&self) -> Result<TrainConfig> {
        Ok(serde_json::from_str(&self.config_json)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn fill<F: Real>(&self, prefix: &str, mut p: GruParams<F>) -> Result<GruParams<F>> {
        let names = p.names();
        for (name, slot) in names.iter().zip(p.tensors_mut()) {
            let key = format!("{prefix}.{name}");
            let t = self
                .tensor(&key)
                .ok_or_else(|| PcrpError::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.shape() != slot.shape() {
                return Err(PcrpError::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.cast();
        }
        Ok(p)
    }

    /// Rebuilds the encoder (trainable) and decoder (frozen) for `input_dim`
    /// values per frame.
    pub fn models<F: Real>(&self) -> Result<(GruParams<F>, GruParams<F>)> {
        let cfg = self.config()?;
        let input_dim = self
            .tensor("encoder.l0.w_z")
            .map(|t| t.shape()[0])
            .ok_or_else(|| PcrpError::Checkpoint("missing tensor `encoder.l0.w_z`".into()))?;
        let c = cfg.hidden_dim;
        let encoder = self.fill("encoder", GruParams::zeros(input_dim, c, cfg.layer_count, None, false)?)?;
        let decoder = self.fill("decoder", GruParams::zeros(c, c, cfg.layer_count, Some(input_dim), true)?)?;
        Ok((encoder, decoder))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| PcrpError::Checkpoint("unexpected end of file".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut Cursor<&[u8]>) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > r.get_ref().len() {
        return Err(PcrpError::Checkpoint("string length exceeds file".into()));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| PcrpError::Checkpoint("non-UTF-8 string".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = TrainConfig {
            hidden_dim: 4,
            ..TrainConfig::default()
        };
        let enc = GruParams::<f32>::init(6, 4, 1, None, false, 1).unwrap();
        let dec = GruParams::<f32>::init(4, 4, 1, Some(6), true, 2).unwrap();
        Checkpoint::from_models(&enc, &dec, &cfg).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"PCRP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 9 + 11);
        let name_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + name_len], b"encoder.l0.w_z");
    }

    #[test]
    fn round_trip_and_models() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let (enc, dec) = back.models::<f32>().unwrap();
        assert_eq!(enc, GruParams::<f32>::init(6, 4, 1, None, false, 1).unwrap());
        assert_eq!(dec, GruParams::<f32>::init(4, 4, 1, Some(6), true, 2).unwrap());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
