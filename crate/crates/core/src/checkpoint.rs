//! Named-array container with a JSON header.
//!
//! Layout: `TSICKPT\0` | header length u32 LE | header JSON | f32 LE data.
//! The header lists every array's name, shape and element offset, plus a
//! free-form metadata object. Arrays keep insertion order so identical
//! contents serialize to identical bytes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tsic_grad::{BatchStats, ParamStore, Tensor};

use crate::adversarial::{DiscConfig, Discriminator};
use crate::error::{Error, IoContext, Result};
use crate::model::{Codec, ModelConfig};

pub const MAGIC: [u8; 8] = *b"TSICKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    metadata: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.arrays.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let arrays = self
            .arrays
            .iter()
            .map(|(name, t)| {
                let e = ArrayEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            metadata: self.metadata.clone(),
            arrays,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * offset);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = 12usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[12..body])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported",
                header.format_version
            )));
        }
        let data = &bytes[body..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let len: usize = e.shape.iter().product();
            let start = 4 * e.offset;
            let end = start + 4 * len;
            if end > data.len() {
                return Err(Error::Checkpoint(format!("array {} runs past the end", e.name)));
            }
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            arrays.push((e.name, Tensor::new(e.shape, values)));
        }
        Ok(Self {
            metadata: header.metadata,
            arrays,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).context(|| format!("reading checkpoint {}", path.display()))?;
        Self::from_bytes(&bytes)
    }
}

/// Write-temp-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = std::fs::File::create(&tmp).context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes).context(|| format!("writing {}", tmp.display()))?;
        f.sync_all().context(|| format!("syncing {}", tmp.display()))?;
    }
    std::fs::rename(&tmp, path).context(|| format!("renaming into {}", path.display()))
}

fn push_store(ckpt: &mut Checkpoint, store: &ParamStore<f32>) {
    for (name, t) in store.iter() {
        ckpt.push(name, t.clone());
    }
}

fn fill_store(ckpt: &Checkpoint, store: &mut ParamStore<f32>) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let src = ckpt
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
        let dst = store.get_mut(id);
        if src.shape() != dst.shape() {
            return Err(Error::Checkpoint(format!(
                "array {name} has shape {:?}, model expects {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

const RUNNING_MEAN: &str = "running_mean";
const RUNNING_VAR: &str = "running_var";

/// Codec (and optionally discriminator) weights plus normalization state.
pub fn model_checkpoint(
    codec: &Codec<f32>,
    disc: Option<&Discriminator<f32>>,
    mut metadata: serde_json::Value,
) -> Checkpoint {
    if let serde_json::Value::Object(m) = &mut metadata {
        m.insert("model".into(), serde_json::to_value(&codec.config).expect("config serializes"));
        if let Some(d) = disc {
            m.insert("disc".into(), serde_json::to_value(&d.config).expect("config serializes"));
        }
    }
    let mut ckpt = Checkpoint::new(metadata);
    push_store(&mut ckpt, &codec.store);
    for (i, r) in codec.ssa.running().iter().enumerate() {
        let c = r.mean.len();
        ckpt.push(format!("ssa{i}.{RUNNING_MEAN}"), Tensor::new([c], r.mean.clone()));
        ckpt.push(format!("ssa{i}.{RUNNING_VAR}"), Tensor::new([c], r.var.clone()));
    }
    if let Some(d) = disc {
        push_store(&mut ckpt, &d.store);
    }
    ckpt
}

pub fn codec_from_checkpoint(ckpt: &Checkpoint) -> Result<Codec<f32>> {
    let cfg: ModelConfig = ckpt
        .metadata
        .get("model")
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .ok_or_else(|| Error::Checkpoint("metadata lacks the model configuration".into()))?;
    let mut codec = Codec::new(cfg, 0);
    fill_store(ckpt, &mut codec.store)?;
    let running = (0..codec.ssa.len())
        .map(|i| {
            let get = |k: &str| {
                ckpt.get(&format!("ssa{i}.{k}"))
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| Error::Checkpoint(format!("missing ssa{i}.{k}")))
            };
            Ok(BatchStats {
                mean: get(RUNNING_MEAN)?,
                var: get(RUNNING_VAR)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    codec.ssa.set_running(running)?;
    Ok(codec)
}

/// Discriminator stored alongside the codec, if any.
pub fn disc_from_checkpoint(ckpt: &Checkpoint, latent_channels: usize) -> Result<Option<Discriminator<f32>>> {
    let Some(cfg) = ckpt.metadata.get("disc").cloned() else {
        return Ok(None);
    };
    let cfg: DiscConfig = serde_json::from_value(cfg)?;
    let mut d = Discriminator::new(cfg, latent_channels, 0);
    fill_store(ckpt, &mut d.store)?;
    Ok(Some(d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            latent_channels: 8,
            hyper_channels: 4,
            encoder_widths: [4, 4, 4, 4],
            generator_width: 4,
            res_blocks: 1,
            up_widths: [4, 4, 4, 4],
            mlp_hidden: 8,
        }
    }

    #[test]
    fn container_roundtrip() {
        let mut c = Checkpoint::new(serde_json::json!({"b": 1, "a": [1, 2]}));
        c.push("x", Tensor::new([2, 2], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE]));
        c.push("y", Tensor::new([1], vec![7.0]));
        let bytes = c.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        assert_eq!(c.to_bytes(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }

    #[test]
    fn codec_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut codec = Codec::<f32>::new(tiny(), 5);
        let mut running = codec.ssa.running().to_vec();
        running[2].mean[1] = 0.25;
        codec.ssa.set_running(running).unwrap();
        let disc = Discriminator::<f32>::new(DiscConfig::default(), 8, 6);
        model_checkpoint(&codec, Some(&disc), serde_json::json!({"stage": 2}))
            .save(&path)
            .unwrap();
        let ckpt = Checkpoint::load(&path).unwrap();
        let back = codec_from_checkpoint(&ckpt).unwrap();
        assert_eq!(back.model_id(), codec.model_id());
        assert_eq!(back.ssa.running(), codec.ssa.running());
        let d = disc_from_checkpoint(&ckpt, 8).unwrap().unwrap();
        assert!(d.store.iter().zip(disc.store.iter()).all(|(a, b)| a == b));
        assert!(!dir.path().join("m.ckpt.tmp").exists());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let codec = Codec::<f32>::new(tiny(), 5);
        let mut ckpt = model_checkpoint(&codec, None, serde_json::json!({}));
        ckpt.arrays[0].1 = Tensor::zeros([1]);
        assert!(matches!(codec_from_checkpoint(&ckpt), Err(Error::Checkpoint(_))));
    }
}
