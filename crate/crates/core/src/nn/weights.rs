//! Versioned binary weights format.
//!
//! ```text
//! "STWN"                          magic
//! u16                             format version
//! u32 × 3                         input channels, height, width
//! u32                             class count
//! u32, then (u32 len, UTF-8) × n  class-label table
//! u32                             layer count
//! per layer:
//!   u8                            kind tag
//!   kind fields                   conv: u32×4 (out, kernel, stride, pad)
//!                                 maxpool: u32×2 (window, stride)
//!                                 lrn: u32 radius, f64×3 (alpha, beta, bias)
//!                                 dense: u32 out; dropout: f64 p
//!   u8                            tensor count (0 or 2: weight, bias)
//!   per tensor: u8 rank, u32 × rank dims, f32 × product payload
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use super::network::{LayerParams, LayerSpec, Network, NetworkConfig, Parameters};
use super::tensor::Tensor;
use super::NnError;

pub const MAGIC: &[u8; 4] = b"STWN";
pub const VERSION: u16 = 1;

fn kind_tag(spec: &LayerSpec) -> u8 {
    match spec {
        LayerSpec::Conv { .. } => 0,
        LayerSpec::Relu => 1,
        LayerSpec::MaxPool { .. } => 2,
        LayerSpec::Lrn { .. } => 3,
        LayerSpec::Flatten => 4,
        LayerSpec::Dense { .. } => 5,
        LayerSpec::Dropout { .. } => 6,
        LayerSpec::Softmax => 7,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.u32(d);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode(net: &Network<f32>) -> Vec<u8> {
    let cfg = &net.config;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.u32(cfg.input.0);
    w.u32(cfg.input.1);
    w.u32(cfg.input.2);
    w.u32(cfg.num_classes);
    w.u32(cfg.labels.len());
    for label in &cfg.labels {
        w.u32(label.len());
        w.0.extend_from_slice(label.as_bytes());
    }
    w.u32(cfg.layers.len());
    for (spec, params) in cfg.layers.iter().zip(&net.params.layers) {
        w.u8(kind_tag(spec));
        match *spec {
            LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                for v in [out_channels, kernel, stride, pad] {
                    w.u32(v);
                }
            }
            LayerSpec::MaxPool { window, stride } => {
                w.u32(window);
                w.u32(stride);
            }
            LayerSpec::Lrn { depth_radius, alpha, beta, bias } => {
                w.u32(depth_radius);
                w.f64(alpha);
                w.f64(beta);
                w.f64(bias);
            }
            LayerSpec::Dense { out_features } => w.u32(out_features),
            LayerSpec::Dropout { p } => w.f64(p),
            LayerSpec::Relu | LayerSpec::Flatten | LayerSpec::Softmax => {}
        }
        match params {
            Some(lp) => {
                w.u8(2);
                w.tensor(&lp.weight);
                w.tensor(&lp.bias);
            }
            None => w.u8(0),
        }
    }
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            NnError::ShapeMismatch(format!("file ends at byte {} while reading {n} more", self.bytes.len()))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor(&mut self, expected: &[usize]) -> Result<Tensor<f32>, NnError> {
        let rank = self.u8()? as usize;
        let dims = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
        if dims != expected {
            return Err(NnError::ShapeMismatch(format!(
                "stored tensor {dims:?} does not match layer shape {expected:?}"
            )));
        }
        let len: usize = dims.iter().product();
        let raw = self.take(len.checked_mul(4).ok_or_else(|| NnError::ShapeMismatch("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(&dims, data)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Network<f32>, NnError> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(NnError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(NnError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let mut r = Reader { bytes, pos: 6 };
    let input = (r.u32()?, r.u32()?, r.u32()?);
    let num_classes = r.u32()?;
    let label_count = r.u32()?;
    let mut labels = Vec::new();
    for _ in 0..label_count {
        let len = r.u32()?;
        let raw = r.take(len)?;
        labels.push(
            String::from_utf8(raw.to_vec()).map_err(|_| NnError::ShapeMismatch("class label is not UTF-8".into()))?,
        );
    }
    let layer_count = r.u32()?;
    let mut layers = Vec::new();
    let mut stored = Vec::new();
    for _ in 0..layer_count {
        let spec = match r.u8()? {
            0 => LayerSpec::Conv {
                out_channels: r.u32()?,
                kernel: r.u32()?,
                stride: r.u32()?,
                pad: r.u32()?,
            },
            1 => LayerSpec::Relu,
            2 => LayerSpec::MaxPool {
                window: r.u32()?,
                stride: r.u32()?,
            },
            3 => LayerSpec::Lrn {
                depth_radius: r.u32()?,
                alpha: r.f64()?,
                beta: r.f64()?,
                bias: r.f64()?,
            },
            4 => LayerSpec::Flatten,
            5 => LayerSpec::Dense { out_features: r.u32()? },
            6 => LayerSpec::Dropout { p: r.f64()? },
            7 => LayerSpec::Softmax,
            tag => return Err(NnError::ShapeMismatch(format!("unknown layer tag {tag}"))),
        };
        layers.push(spec);
        // Tensor payloads are read after the whole config is validated.
        let count = r.u8()?;
        stored.push((count, r.pos));
        if count != 0 && count != 2 {
            return Err(NnError::ShapeMismatch(format!("layer stores {count} tensors")));
        }
        if count == 2 {
            for _ in 0..2 {
                let rank = r.u8()? as usize;
                let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
                let len = dims
                    .iter()
                    .try_fold(1usize, |a, &d| a.checked_mul(d))
                    .and_then(|n| n.checked_mul(4))
                    .ok_or_else(|| NnError::ShapeMismatch("tensor too large".into()))?;
                r.take(len)?;
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} trailing bytes after last layer",
            bytes.len() - r.pos
        )));
    }
    let config = NetworkConfig {
        input,
        layers,
        num_classes,
        labels,
    };
    if !config.labels.is_empty() && config.labels.len() != num_classes {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for {num_classes} classes",
            config.labels.len()
        )));
    }
    let shapes = config.param_shapes()?;
    let mut params = Vec::with_capacity(shapes.len());
    for (i, (want, (count, pos))) in shapes.iter().zip(stored).enumerate() {
        params.push(match (want, count) {
            (None, 0) => None,
            (Some((w, b)), 2) => {
                let mut t = Reader { bytes, pos };
                Some(LayerParams {
                    weight: t.tensor(w)?,
                    bias: t.tensor(b)?,
                })
            }
            _ => return Err(NnError::ShapeMismatch(format!("layer {i} stores the wrong number of tensors"))),
        });
    }
    Network::new(config, Parameters { layers: params })
}

pub fn save_weights(net: &Network<f32>, path: &Path) -> Result<(), NnError> {
    std::fs::write(path, encode(net)).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))
}

pub fn load_weights(path: &Path) -> Result<Network<f32>, NnError> {
    let bytes = std::fs::read(path).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}
