//! Binary model container plus a JSON sidecar.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "MARICHMD"
//! version      u32       1
//! kind         u8        0 = softmax-regression, 1 = mlp
//! activation   u8        0 = relu, 1 = tanh
//! reserved     u16       0
//! input_dim    u32
//! num_classes  u32
//! n_hidden     u32
//! hidden       n_hidden × u32
//! seed         u64
//! n_blocks     u32       2 per layer: weights then bias
//! per block:   rows u32, cols u32, rows*cols × f64
//! ```
//!
//! Bias blocks are stored as `out × 1`. The sidecar carries the spec and
//! seed for humans and tooling; loading only reads the binary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Activation, Layer, Model, ModelKind, ModelSpec};
use crate::error::{Error, Result};
use crate::mathcore::RealMatrix;

pub const MODEL_MAGIC: &[u8; 8] = b"MARICHMD";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    version: u32,
    spec: ModelSpec,
    seed: u64,
    blocks: Vec<[usize; 2]>,
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.num_params());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.push(match self.spec.kind {
            ModelKind::SoftmaxRegression => 0,
            ModelKind::Mlp => 1,
        });
        out.push(match self.spec.activation {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        });
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.spec.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.spec.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.spec.hidden_sizes.len() as u32).to_le_bytes());
        for &h in &self.spec.hidden_sizes {
            out.extend_from_slice(&(h as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&((2 * self.layers.len()) as u32).to_le_bytes());
        for l in &self.layers {
            write_block(
                &mut out,
                l.weights.rows(),
                l.weights.cols(),
                l.weights.as_slice(),
            );
            write_block(&mut out, l.bias.len(), 1, &l.bias);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MODEL_MAGIC {
            return Err(Error::format("magic", "not a marich model container"));
        }
        let version = r.u32("version")?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::format(
                "version",
                format!("unsupported container version {version}"),
            ));
        }
        let kind = match r.u8("kind")? {
            0 => ModelKind::SoftmaxRegression,
            1 => ModelKind::Mlp,
            other => return Err(Error::format("kind", format!("unknown model kind {other}"))),
        };
        let activation = match r.u8("activation")? {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            other => {
                return Err(Error::format(
                    "activation",
                    format!("unknown activation {other}"),
                ))
            }
        };
        r.take(2, "reserved")?;
        let input_dim = r.u32("input_dim")? as usize;
        let num_classes = r.u32("num_classes")? as usize;
        let n_hidden = r.u32("n_hidden")? as usize;
        let hidden_sizes = (0..n_hidden)
            .map(|_| r.u32("hidden").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let seed = r.u64("seed")?;
        let spec = ModelSpec {
            kind,
            input_dim,
            num_classes,
            hidden_sizes,
            activation,
        };
        spec.validate()
            .map_err(|e| Error::format("spec", e.to_string()))?;
        let n_blocks = r.u32("n_blocks")? as usize;
        if n_blocks != 2 * spec.layer_shapes().len() {
            return Err(Error::format(
                "n_blocks",
                format!("{n_blocks} blocks do not match the spec"),
            ));
        }
        let mut layers = Vec::with_capacity(n_blocks / 2);
        for _ in 0..n_blocks / 2 {
            let (rows, cols, w) = r.block()?;
            let (brows, bcols, b) = r.block()?;
            if bcols != 1 || brows != rows {
                return Err(Error::format("bias", "bias block shape mismatch"));
            }
            let weights = RealMatrix::new(rows, cols, w)
                .map_err(|e| Error::format("weights", e.to_string()))?;
            layers.push(Layer { weights, bias: b });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                "trailer",
                "unexpected bytes after last block",
            ));
        }
        Model::from_layers(spec, layers, seed).map_err(|e| Error::format("layers", e.to_string()))
    }
}

fn write_block(out: &mut Vec<u8>, rows: usize, cols: usize, values: &[f64]) {
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(field, "truncated model file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn block(&mut self) -> Result<(usize, usize, Vec<f64>)> {
        let rows = self.u32("block rows")? as usize;
        let cols = self.u32("block cols")? as usize;
        let raw = self.take(rows * cols * 8, "block data")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((rows, cols, values))
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the container to `path` and the sidecar next to it (`.json`).
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, model.to_bytes())?;
    let sidecar = Sidecar {
        format: "marich-model".into(),
        version: MODEL_FORMAT_VERSION,
        spec: model.spec.clone(),
        seed: model.seed,
        blocks: model
            .layers
            .iter()
            .flat_map(|l| [[l.weights.rows(), l.weights.cols()], [l.bias.len(), 1]])
            .collect(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    Model::from_bytes(&fs::read(path)?)
}
