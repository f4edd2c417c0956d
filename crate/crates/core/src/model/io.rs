//! Weights file format.
//!
//! Binary, little-endian:
//!
//! ```text
//! magic    b"ALAW"
//! version  u32 (= 1)
//! arch     u8  (0 conv, 1 mlp, 2 linear)
//! width    u32
//! height   u32
//! classes  u32
//! layers   u32
//! per layer:
//!   kind   u8  (0 conv, 1 dense)
//!   dims   4 x u32   conv: in_c, out_c, in_h, in_w   dense: inputs, outputs, 0, 0
//!   nw     u64, then nw x f64 weights
//!   nb     u64, then nb x f64 biases
//! ```
//!
//! A JSON sidecar ([`ModelDescription`]) describes the architecture for humans
//! and tooling; loading only needs the binary.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Architecture, Conv, Dense, Layer, Model};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ALAW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerDescription {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        input: [usize; 2],
        output: [usize; 2],
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescription {
    pub format_version: u32,
    pub architecture: Architecture,
    pub input: [usize; 3],
    pub classes: usize,
    pub activation: String,
    pub parameters: usize,
    pub layers: Vec<LayerDescription>,
}

impl Model {
    pub fn describe(&self) -> ModelDescription {
        ModelDescription {
            format_version: VERSION,
            architecture: self.arch,
            input: [self.height, self.width, 3],
            classes: self.classes,
            activation: "relu".into(),
            parameters: self.parameter_count(),
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(c) => LayerDescription::Conv {
                        in_channels: c.in_c,
                        out_channels: c.out_c,
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                        input: [c.in_h, c.in_w],
                        output: [c.out_h(), c.out_w()],
                    },
                    Layer::Dense(d) => LayerDescription::Dense {
                        inputs: d.inputs,
                        outputs: d.outputs,
                    },
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.arch.code());
        for v in [self.width, self.height, self.classes, self.layers.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for layer in &self.layers {
            let (kind, dims) = match layer {
                Layer::Conv(c) => (0u8, [c.in_c, c.out_c, c.in_h, c.in_w]),
                Layer::Dense(d) => (1u8, [d.inputs, d.outputs, 0, 0]),
            };
            out.push(kind);
            for d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for values in [layer.weight(), layer.bias()] {
                out.extend_from_slice(&(values.len() as u64).to_le_bytes());
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::MalformedWeights("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::MalformedWeights(format!("unsupported version {version}")));
        }
        let arch = Architecture::from_code(read_u8(&mut r)?)
            .ok_or_else(|| Error::MalformedWeights("unknown architecture code".into()))?;
        let width = read_u32(&mut r)? as usize;
        let height = read_u32(&mut r)? as usize;
        let classes = read_u32(&mut r)? as usize;
        let count = read_u32(&mut r)? as usize;
        if count > 16 {
            return Err(Error::MalformedWeights(format!("implausible layer count {count}")));
        }
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let kind = read_u8(&mut r)?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = read_u32(&mut r)? as usize;
            }
            let weight = read_f64s(&mut r)?;
            let bias = read_f64s(&mut r)?;
            layers.push(match kind {
                0 => Layer::Conv(Conv {
                    in_c: dims[0],
                    out_c: dims[1],
                    in_h: dims[2],
                    in_w: dims[3],
                    weight,
                    bias,
                }),
                1 => Layer::Dense(Dense {
                    inputs: dims[0],
                    outputs: dims[1],
                    weight,
                    bias,
                }),
                k => return Err(Error::MalformedWeights(format!("unknown layer kind {k}"))),
            });
        }
        if !r.is_empty() {
            return Err(Error::MalformedWeights("trailing bytes".into()));
        }
        let model = Model::from_parts(arch, width, height, classes, layers.clone())?;
        // from_parts only checks lengths; dimensions must match as well
        let template = Model::zeros(arch, width, height, classes)?;
        let dims_match = template.layers.iter().zip(&layers).all(|(t, l)| match (t, l) {
            (Layer::Conv(a), Layer::Conv(b)) => (a.in_c, a.out_c, a.in_h, a.in_w) == (b.in_c, b.out_c, b.in_h, b.in_w),
            (Layer::Dense(a), Layer::Dense(b)) => (a.inputs, a.outputs) == (b.inputs, b.outputs),
            _ => false,
        });
        if !dims_match {
            return Err(Error::MalformedWeights("layer dimensions do not chain".into()));
        }
        Ok(model)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::MalformedWeights("truncated file".into()))
}

fn read_u8(r: &mut &[u8]) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(r: &mut &[u8]) -> Result<Vec<f64>> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    let n = u64::from_le_bytes(b) as usize;
    if n * 8 > r.len() {
        return Err(Error::MalformedWeights("truncated file".into()));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        read_exact(r, &mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

/// Path of the JSON sidecar for a weights file: `m.bin` -> `m.json`.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

/// Write the binary weights and the JSON sidecar next to it.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&model.to_bytes())?;
    let desc = serde_json::to_string_pretty(&model.describe())?;
    std::fs::write(sidecar_path(path), desc + "\n")?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    Model::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_roundtrip() {
        for arch in [Architecture::Conv, Architecture::Mlp, Architecture::Linear] {
            let m = Model::new(arch, 10, 6, 3, 42).unwrap();
            let back = Model::from_bytes(&m.to_bytes()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn rejects_corruption() {
        let m = Model::new(Architecture::Conv, 8, 8, 2, 1).unwrap();
        let bytes = m.to_bytes();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Model::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Model::from_bytes(&extra).is_err());
    }

    #[test]
    fn save_writes_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = Model::new(Architecture::Conv, 32, 32, 8, 0).unwrap();
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
        let desc: ModelDescription =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
        assert_eq!(desc.classes, 8);
        assert_eq!(desc.layers.len(), 3);
        assert_eq!(desc.parameters, m.parameter_count());
    }
}
