//! Versioned binary model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "NBAGMODL"
//! version          u32      currently 1
//! layer count      u32
//! per layer        u32 section length, then the section payload
//! checksum         32 bytes SHA-256 over everything before it
//! ```
//!
//! Parameter tensors are stored as little-endian 32-bit floats with explicit
//! shapes; a 64-bit runtime widens them losslessly on load. Sections encode
//! one layer each; see `encode_layer` for the field order per layer kind.
//! Encoding is canonical: saving a loaded model reproduces the bytes.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bagging::{GroupSpec, SampleMethod};
use crate::error::{Error, Result};
use crate::layers::{ConvGrouped, ConvPlain, DenseGrouped, DensePlain};
use crate::model::{Layer, Model};
use crate::ops::{Activation, Padding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 8] = b"NBAGMODL";
pub const MODEL_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

const KIND_DENSE_GROUPED: u8 = 0;
const KIND_DENSE_PLAIN: u8 = 1;
const KIND_CONV_GROUPED: u8 = 2;
const KIND_CONV_PLAIN: u8 = 3;
const KIND_MAX_POOL: u8 = 4;
const KIND_GLOBAL_AVG_POOL: u8 = 5;
const KIND_FLATTEN: u8 = 6;

fn method_tag(m: SampleMethod) -> u8 {
    match m {
        SampleMethod::A => 0,
        SampleMethod::B => 1,
    }
}

fn activation_tag(a: Option<Activation>) -> u8 {
    match a {
        Some(Activation::Relu) => 0,
        Some(Activation::Sigmoid) => 1,
        Some(Activation::Tanh) => 2,
        None => 255,
    }
}

fn padding_tag(p: Padding) -> u8 {
    match p {
        Padding::Same => 0,
        Padding::Valid => 1,
    }
}

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { bytes: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for v in t.data() {
            let f = v.to_f64().unwrap() as f32;
            self.bytes.extend_from_slice(&f.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            // A section that runs past its payload means corruption the
            // checksum somehow missed; surface it the same way.
            return Err(Error::ModelChecksum {
                path: self.path.to_path_buf(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = self.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| {
                let f = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                T::from_f64(f as f64).unwrap()
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    fn method(&mut self) -> Result<SampleMethod> {
        match self.u8()? {
            0 => Ok(SampleMethod::A),
            1 => Ok(SampleMethod::B),
            other => Err(Error::InvalidArg {
                op: "load_model",
                msg: format!("unknown sampling-method tag {other}"),
            }),
        }
    }

    fn activation(&mut self) -> Result<Option<Activation>> {
        match self.u8()? {
            0 => Ok(Some(Activation::Relu)),
            1 => Ok(Some(Activation::Sigmoid)),
            2 => Ok(Some(Activation::Tanh)),
            255 => Ok(None),
            other => Err(Error::InvalidArg {
                op: "load_model",
                msg: format!("unknown activation tag {other}"),
            }),
        }
    }

    fn padding(&mut self) -> Result<Padding> {
        match self.u8()? {
            0 => Ok(Padding::Same),
            1 => Ok(Padding::Valid),
            other => Err(Error::InvalidArg {
                op: "load_model",
                msg: format!("unknown padding tag {other}"),
            }),
        }
    }
}

fn encode_layer<T: Scalar>(layer: &Layer<T>) -> Vec<u8> {
    let mut w = Writer::new();
    match layer {
        Layer::DenseGrouped(l) => {
            w.u8(KIND_DENSE_GROUPED);
            w.u8(method_tag(l.spec.method()));
            w.u32(l.spec.group_count() as u32);
            w.u32(l.spec.group_size() as u32);
            w.f64(l.spec.keep_prob());
            w.u8(activation_tag(Some(l.activation)));
            w.tensor(&l.weights);
            w.tensor(&l.biases);
        }
        Layer::DensePlain(l) => {
            w.u8(KIND_DENSE_PLAIN);
            w.u8(activation_tag(l.activation));
            w.tensor(&l.weights);
            w.tensor(&l.biases);
        }
        Layer::ConvGrouped(l) => {
            w.u8(KIND_CONV_GROUPED);
            w.u8(method_tag(l.spec.method()));
            w.u32(l.spec.group_count() as u32);
            w.u32(l.spec.group_size() as u32);
            w.f64(l.spec.keep_prob());
            w.u8(activation_tag(Some(l.activation)));
            w.u32(l.stride as u32);
            w.u8(padding_tag(l.padding));
            w.tensor(&l.filters);
            w.tensor(&l.biases);
        }
        Layer::ConvPlain(l) => {
            w.u8(KIND_CONV_PLAIN);
            w.u8(activation_tag(l.activation));
            w.u32(l.stride as u32);
            w.u8(padding_tag(l.padding));
            w.tensor(&l.filters);
            w.tensor(&l.biases);
        }
        Layer::MaxPool { window, stride } => {
            w.u8(KIND_MAX_POOL);
            w.u32(*window as u32);
            w.u32(*stride as u32);
        }
        Layer::GlobalAvgPool => w.u8(KIND_GLOBAL_AVG_POOL),
        Layer::Flatten => w.u8(KIND_FLATTEN),
    }
    w.bytes
}

fn decode_layer<T: Scalar>(section: &[u8], path: &Path) -> Result<Layer<T>> {
    let mut r = Reader {
        bytes: section,
        pos: 0,
        path,
    };
    let kind = r.u8()?;
    let layer = match kind {
        KIND_DENSE_GROUPED => {
            let method = r.method()?;
            let k = r.u32()? as usize;
            let n = r.u32()? as usize;
            let keep_prob = r.f64()?;
            let activation = r.activation()?.ok_or_else(|| Error::InvalidArg {
                op: "load_model",
                msg: "grouped layer requires an activation".into(),
            })?;
            let weights = r.tensor()?;
            let biases = r.tensor()?;
            let spec = GroupSpec::new(k, n, method, keep_prob)?;
            expect_shape(path, &weights, &[k, n, weights.dim(2)])?;
            expect_shape(path, &biases, &[k, n])?;
            Layer::DenseGrouped(DenseGrouped {
                spec,
                weights,
                biases,
                activation,
            })
        }
        KIND_DENSE_PLAIN => {
            let activation = r.activation()?;
            let weights = r.tensor()?;
            let biases = r.tensor()?;
            expect_shape(path, &biases, &[weights.dim(0)])?;
            Layer::DensePlain(DensePlain {
                weights,
                biases,
                activation,
            })
        }
        KIND_CONV_GROUPED => {
            let method = r.method()?;
            let k = r.u32()? as usize;
            let n = r.u32()? as usize;
            let keep_prob = r.f64()?;
            let activation = r.activation()?.ok_or_else(|| Error::InvalidArg {
                op: "load_model",
                msg: "grouped layer requires an activation".into(),
            })?;
            let stride = r.u32()? as usize;
            let padding = r.padding()?;
            let filters = r.tensor()?;
            let biases = r.tensor()?;
            let spec = GroupSpec::new(k, n, method, keep_prob)?;
            if filters.rank() != 5 || filters.dim(0) != k || filters.dim(1) != n {
                return Err(Error::ModelChecksum {
                    path: path.to_path_buf(),
                });
            }
            expect_shape(path, &biases, &[k, n])?;
            Layer::ConvGrouped(ConvGrouped {
                spec,
                filters,
                biases,
                stride,
                padding,
                activation,
            })
        }
        KIND_CONV_PLAIN => {
            let activation = r.activation()?;
            let stride = r.u32()? as usize;
            let padding = r.padding()?;
            let filters = r.tensor()?;
            let biases = r.tensor()?;
            expect_shape(path, &biases, &[filters.dim(0)])?;
            Layer::ConvPlain(ConvPlain {
                filters,
                biases,
                stride,
                padding,
                activation,
            })
        }
        KIND_MAX_POOL => Layer::MaxPool {
            window: r.u32()? as usize,
            stride: r.u32()? as usize,
        },
        KIND_GLOBAL_AVG_POOL => Layer::GlobalAvgPool,
        KIND_FLATTEN => Layer::Flatten,
        other => {
            return Err(Error::InvalidArg {
                op: "load_model",
                msg: format!("unknown layer kind tag {other}"),
            })
        }
    };
    Ok(layer)
}

fn expect_shape<T: Scalar>(path: &Path, tensor: &Tensor<T>, shape: &[usize]) -> Result<()> {
    if tensor.shape() != shape {
        return Err(Error::ModelChecksum {
            path: path.to_path_buf(),
        });
    }
    Ok(())
}

/// Serializes a model. The write is atomic: a temporary sibling file is
/// renamed over the target.
pub fn save_model<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for layer in &model.layers {
        let section = encode_layer(layer);
        out.extend_from_slice(&(section.len() as u32).to_le_bytes());
        out.extend_from_slice(&section);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);

    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a model saved by [`save_model`]. Bad magic, an unsupported version,
/// and checksum/truncation damage are distinct errors.
pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..8] != MODEL_MAGIC {
        return Err(Error::ModelBadMagic {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < 12 {
        return Err(Error::ModelChecksum {
            path: path.to_path_buf(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::ModelBadVersion {
            path: path.to_path_buf(),
            found: version,
            supported: MODEL_VERSION,
        });
    }
    if bytes.len() < 12 + CHECKSUM_LEN {
        return Err(Error::ModelChecksum {
            path: path.to_path_buf(),
        });
    }
    let (payload, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    let digest = Sha256::digest(payload);
    if digest.as_slice() != stored {
        return Err(Error::ModelChecksum {
            path: path.to_path_buf(),
        });
    }

    let mut r = Reader {
        bytes: payload,
        pos: 12,
        path,
    };
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let section = r.take(len)?;
        layers.push(decode_layer(section, path)?);
    }
    Ok(Model::new(layers))
}
