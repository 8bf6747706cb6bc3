//! Binary model checkpoints.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! magic      8 bytes  "BFACKPT\0"
//! version    u32      1
//! mode       u8       0 = float weights, 1 = quantized codes
//! rank       u8       input rank, followed by rank x u32 dims
//! layers     u32      layer count, then per layer:
//!   kind     u8       0 fc, 1 conv2d, 2 relu, 3 max-pool, 4 flatten
//!   params   u32s     fc: inputs, outputs
//!                     conv2d: in_ch, out_ch, kernel, stride, padding
//!                     max-pool: size, stride
//!   weights  (fc/conv2d only)
//!     float:     count u32, count x f64
//!     quantized: n_q u8, delta_w f64, count u32, count x code
//!   bias     (fc/conv2d only) flag u8, then count u32, count x f64
//! digest     32 bytes SHA-256 of everything above
//! ```
//!
//! Codes use the smallest signed container holding `n_q` bits: `i8` for
//! `n_q <= 8`, `i16` otherwise, sign-extended. Bit `i` of a code (with `i =
//! n_q - 1` the sign bit) is therefore bit `i` of its container, so weight
//! `k` of a layer with 8-bit codes occupies byte `k` of that layer's code
//! block.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::model::{Layer, ModelGraph, ParamMode, Weights};
use crate::quant::QuantizedLayer;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BFACKPT\0";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    put_u32(out, vals.len());
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(model: &ModelGraph) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match model.mode() {
        ParamMode::Float => 0,
        ParamMode::Quantized => 1,
    });
    out.push(model.input_shape().len() as u8);
    for &d in model.input_shape() {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, model.layers().len());
    for layer in model.layers() {
        match layer.spec {
            LayerSpec::FullyConnected { inputs, outputs } => {
                out.push(0);
                put_u32(&mut out, inputs);
                put_u32(&mut out, outputs);
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                out.push(1);
                for v in [in_channels, out_channels, kernel, stride, padding] {
                    put_u32(&mut out, v);
                }
            }
            LayerSpec::Relu => out.push(2),
            LayerSpec::MaxPool { size, stride } => {
                out.push(3);
                put_u32(&mut out, size);
                put_u32(&mut out, stride);
            }
            LayerSpec::Flatten => out.push(4),
        }
        match &layer.weights {
            Some(Weights::Float(t)) => put_f64s(&mut out, t.data()),
            Some(Weights::Quantized(q)) => {
                out.push(q.n_q() as u8);
                out.extend_from_slice(&q.delta_w().to_le_bytes());
                put_u32(&mut out, q.len());
                for &c in q.codes() {
                    if q.n_q() <= 8 {
                        out.push(c as i8 as u8);
                    } else {
                        out.extend_from_slice(&(c as i16).to_le_bytes());
                    }
                }
            }
            None => {}
        }
        if layer.spec.is_weighted() {
            match &layer.bias {
                Some(b) => {
                    out.push(1);
                    put_f64s(&mut out, b);
                }
                None => out.push(0),
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: (self.pos + n + DIGEST_LEN) as u64,
                actual: (self.bytes.len() + DIGEST_LEN) as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, expected: usize) -> Result<Vec<f64>> {
        let n = self.u32()?;
        if n != expected {
            return Err(self.err(format!("{n} values, expected {expected}")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<ModelGraph> {
    if bytes.len() < MAGIC.len() + DIGEST_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: (MAGIC.len() + DIGEST_LEN) as u64,
            actual: bytes.len() as u64,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Digest(path.to_path_buf()));
    }
    let mut r = Reader {
        bytes: body,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let mode = match r.u8()? {
        0 => ParamMode::Float,
        1 => ParamMode::Quantized,
        m => return Err(r.err(format!("bad mode {m}"))),
    };
    let rank = r.u8()? as usize;
    let input_shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let spec = match r.u8()? {
            0 => LayerSpec::FullyConnected {
                inputs: r.u32()?,
                outputs: r.u32()?,
            },
            1 => LayerSpec::Conv2d {
                in_channels: r.u32()?,
                out_channels: r.u32()?,
                kernel: r.u32()?,
                stride: r.u32()?,
                padding: r.u32()?,
            },
            2 => LayerSpec::Relu,
            3 => LayerSpec::MaxPool {
                size: r.u32()?,
                stride: r.u32()?,
            },
            4 => LayerSpec::Flatten,
            k => {
                r.pos = at;
                return Err(r.err(format!("unknown layer kind {k}")));
            }
        };
        let Some(shape) = spec.weight_shape() else {
            layers.push(Layer::plain(spec));
            continue;
        };
        let n: usize = shape.iter().product();
        let weights = match mode {
            ParamMode::Float => Weights::Float(Tensor::new(shape, r.f64s(n)?)?),
            ParamMode::Quantized => {
                let n_q = r.u8()? as u32;
                let delta_w = r.f64()?;
                let stored = r.u32()?;
                if stored != n {
                    return Err(r.err(format!("{stored} codes, expected {n}")));
                }
                let codes: Vec<i32> = if n_q <= 8 {
                    r.take(n)?.iter().map(|&b| b as i8 as i32).collect()
                } else {
                    r.take(2 * n)?
                        .chunks_exact(2)
                        .map(|c| i16::from_le_bytes([c[0], c[1]]) as i32)
                        .collect()
                };
                let q = QuantizedLayer::from_parts(shape, codes, delta_w, n_q)
                    .map_err(|e| r.err(e.to_string()))?;
                Weights::Quantized(q)
            }
        };
        let bias = match r.u8()? {
            0 => None,
            1 => Some(r.f64s(spec.bias_len().unwrap())?),
            f => return Err(r.err(format!("bad bias flag {f}"))),
        };
        layers.push(Layer::new(spec, Some(weights), bias));
    }
    if r.pos != body.len() {
        return Err(r.err("trailing bytes"));
    }
    ModelGraph::new(input_shape, layers)
}

pub fn save_checkpoint(model: &ModelGraph, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelGraph> {
    from_bytes(&fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ModelGraph {
        let specs = [
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::FullyConnected {
                inputs: 8,
                outputs: 3,
            },
        ];
        ModelGraph::init(vec![1, 4, 4], &specs, seed).unwrap()
    }

    #[test]
    fn float_round_trip() {
        let m = tiny(1);
        let back = from_bytes(&to_bytes(&m), Path::new("mem")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn quantized_round_trip_all_widths() {
        for n_q in [4, 6, 8, 12] {
            let q = tiny(2).quantize(n_q).unwrap();
            let bytes = to_bytes(&q);
            let back = from_bytes(&bytes, Path::new("mem")).unwrap();
            assert_eq!(back, q);
            assert_eq!(to_bytes(&back), bytes);
        }
    }

    #[test]
    fn attack_produced_minimum_code_survives() {
        let mut q = tiny(3).quantize(4).unwrap();
        q.quantized_mut(0).unwrap().set_code(0, -8).unwrap();
        let back = from_bytes(&to_bytes(&q), Path::new("mem")).unwrap();
        assert_eq!(back.quantized(0).unwrap().code(0), -8);
    }

    #[test]
    fn corruption_is_refused() {
        let q = tiny(4).quantize(8).unwrap();
        let mut bytes = to_bytes(&q);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(
            from_bytes(&bytes, Path::new("mem")),
            Err(Error::Digest(_))
        ));
    }

    #[test]
    fn code_bytes_follow_documented_layout() {
        let q = tiny(5).quantize(8).unwrap();
        let bytes = to_bytes(&q);
        // header: magic 8, version 4, mode 1, rank 1, dims 12, layer count 4,
        // conv kind 1 + 5 params 20, n_q 1, delta 8, count 4
        let start = 8 + 4 + 1 + 1 + 12 + 4 + 1 + 20 + 1 + 8 + 4;
        let codes = q.quantized(0).unwrap().codes();
        for (k, &c) in codes.iter().enumerate() {
            assert_eq!(bytes[start + k] as i8 as i32, c);
        }
    }
}
