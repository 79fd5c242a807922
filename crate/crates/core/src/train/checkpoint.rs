//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DALC" | version u32 | section count u32 | sections...
//!
//! section: name length u32 | name (UTF-8) | kind u8 | body
//!   kind 0 (float32 tensor): ndim u32 | dims u64 x ndim | row-major payload
//!   kind 2 (UTF-8 text):     length u64 | bytes
//! ```
//!
//! Sections: `meta` (text), `config` (text), then `<layer>.weight` and
//! `<layer>.bias` tensors for every layer in [`LAYER_NAMES`] order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::data::format::{parse_metadata, ByteReader, DTYPE_F32, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::model::{EmbeddingLayer, Linear, ModelConfig, StudentModel, LAYER_NAMES};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DALC";
const KIND_TEXT: u8 = 2;

/// A trained student plus the provenance needed to reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: StudentModel,
    pub step: usize,
    pub dev_metric: f64,
    pub eval_layer: EmbeddingLayer,
    /// Resolved training configuration as `key = value` lines.
    pub config_text: String,
}

enum Section<'a> {
    Tensor(Vec<usize>, Vec<f64>),
    Text(&'a str),
}

fn put_name(buf: &mut Vec<u8>, name: &str) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
}

fn put_text(buf: &mut Vec<u8>, name: &str, text: &str) {
    put_name(buf, name);
    buf.push(KIND_TEXT);
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
}

fn put_tensor<'a>(buf: &mut Vec<u8>, name: &str, dims: &[usize], values: impl Iterator<Item = &'a f64>) {
    put_name(buf, name);
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

impl Checkpoint {
    fn meta_text(&self) -> String {
        let c = self.model.config();
        format!(
            "step={}\ndev_metric={}\neval_layer={}\nd_in={}\nhidden={}\ntext_dim={}\nshared_dim={}\ndropout={}\n",
            self.step, self.dev_metric, self.eval_layer, c.d_in, c.hidden, c.text_dim, c.shared_dim, c.dropout
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(4 * self.model.num_params() + 1024);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let n_sections = 2 + 2 * self.model.layers().len();
        buf.extend_from_slice(&(n_sections as u32).to_le_bytes());
        put_text(&mut buf, "meta", &self.meta_text());
        put_text(&mut buf, "config", &self.config_text);
        for (layer, name) in self.model.layers().iter().zip(LAYER_NAMES) {
            let (i, o) = layer.weight.dim();
            put_tensor(&mut buf, &format!("{name}.weight"), &[i, o], layer.weight.iter());
            put_tensor(&mut buf, &format!("{name}.bias"), &[o], layer.bias.iter());
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad magic, expected DALC"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut sections = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, "section name is not UTF-8"))?
                .to_owned();
            let section = match r.u8()? {
                DTYPE_F32 => {
                    let ndim = r.u32()? as usize;
                    let dims = (0..ndim)
                        .map(|_| r.u64().map(|d| d as usize))
                        .collect::<Result<Vec<_>>>()?;
                    let count = dims
                        .iter()
                        .try_fold(1usize, |a, &d| a.checked_mul(d))
                        .and_then(|c| c.checked_mul(4))
                        .ok_or_else(|| Error::format(path, format!("section `{name}` too large")))?;
                    let values = r
                        .take(count)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect();
                    Section::Tensor(dims, values)
                }
                KIND_TEXT => {
                    let len = usize::try_from(r.u64()?)
                        .map_err(|_| Error::format(path, "text section too large"))?;
                    let text = std::str::from_utf8(r.take(len)?)
                        .map_err(|_| Error::format(path, format!("section `{name}` is not UTF-8")))?;
                    Section::Text(text)
                }
                other => {
                    return Err(Error::format(path, format!("unknown section kind {other}")));
                }
            };
            if sections.insert(name.clone(), section).is_some() {
                return Err(Error::format(path, format!("duplicate section `{name}`")));
            }
        }
        if !r.is_empty() {
            return Err(Error::format(path, "trailing bytes after last section"));
        }

        let mut text = |name: &str| match sections.remove(name) {
            Some(Section::Text(t)) => Ok(t),
            _ => Err(Error::format(path, format!("missing text section `{name}`"))),
        };
        let meta = parse_metadata(text("meta")?).map_err(|e| Error::format(path, e))?;
        let config_text = text("config")?.to_owned();
        let field = |k: &str| -> Result<&str> {
            meta.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::format(path, format!("meta lacks `{k}`")))
        };
        let bad = |k: &str| Error::format(path, format!("meta field `{k}` is malformed"));
        let int = |k: &str| field(k)?.parse::<usize>().map_err(|_| bad(k));
        let float = |k: &str| field(k)?.parse::<f64>().map_err(|_| bad(k));
        let config = ModelConfig {
            d_in: int("d_in")?,
            hidden: int("hidden")?,
            text_dim: int("text_dim")?,
            shared_dim: int("shared_dim")?,
            dropout: float("dropout")?,
        };
        let mut layers = Vec::with_capacity(LAYER_NAMES.len());
        for name in LAYER_NAMES {
            let mut tensor = |suffix: &str| match sections.remove(&format!("{name}.{suffix}")) {
                Some(Section::Tensor(dims, values)) => Ok((dims, values)),
                _ => Err(Error::format(path, format!("missing tensor `{name}.{suffix}`"))),
            };
            let (wd, w) = tensor("weight")?;
            let (bd, b) = tensor("bias")?;
            if wd.len() != 2 || bd.len() != 1 {
                return Err(Error::format(path, format!("layer `{name}` has wrong rank")));
            }
            layers.push(Linear {
                weight: Array2::from_shape_vec((wd[0], wd[1]), w).expect("length checked on read"),
                bias: Array1::from(b),
            });
        }
        if let Some(extra) = sections.keys().next() {
            return Err(Error::format(path, format!("unexpected section `{extra}`")));
        }
        Ok(Self {
            model: StudentModel::from_layers(config, layers)?,
            step: int("step")?,
            dev_metric: float("dev_metric")?,
            eval_layer: field("eval_layer")?.parse()?,
            config_text,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::EmbeddingBatch;

    fn small() -> Checkpoint {
        let cfg = ModelConfig {
            d_in: 5,
            hidden: 7,
            text_dim: 6,
            shared_dim: 3,
            dropout: 0.1,
        };
        Checkpoint {
            model: StudentModel::init(cfg, 9).unwrap(),
            step: 125,
            dev_metric: 0.8125,
            eval_layer: EmbeddingLayer::TextHead,
            config_text: "seed = 9\n".into(),
        }
    }

    #[test]
    fn round_trip_preserves_forward_outputs() {
        let ck = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dalc");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let x = EmbeddingBatch::from_rows(&[vec![0.1, -0.2, 0.3, 0.4, -0.5]]).unwrap();
        for layer in [EmbeddingLayer::Encoder, EmbeddingLayer::TextHead, EmbeddingLayer::SharedHead] {
            assert_eq!(ck.model.embed(&x, layer).unwrap(), back.model.embed(&x, layer).unwrap());
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = small().to_bytes();
        let p = Path::new("mem");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic, p).is_err());
    }
}
