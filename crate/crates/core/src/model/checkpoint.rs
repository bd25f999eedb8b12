//! Named-tensor container:
//! `HYBM0001` · u64 LE header length · JSON header (space padded) · payload ·
//! u32 LE CRC32 of the payload. Tensor offsets are relative to the payload,
//! which starts on a 64-byte boundary; each tensor starts on one too.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HybridModel, LayerWeights, MixerWeights, ModelConfig, ModelWeights};
use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::mamba::MambaWeights;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HYBM0001";
const ALIGN: usize = 64;

#[derive(Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    tensors: BTreeMap<String, Entry>,
}

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes a container to bytes. Tensors are laid out in name order, so
/// equal contents always give equal bytes.
pub fn encode_container(config: &serde_json::Value, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<Vec<u8>> {
    let mut entries = BTreeMap::new();
    let mut offset = 0;
    for (name, t) in tensors {
        entries.insert(
            name.clone(),
            Entry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: t.nbytes(),
            },
        );
        offset = align_up(offset + t.nbytes());
    }
    let payload_len = offset;
    let mut header = serde_json::to_vec(&Header {
        config: config.clone(),
        tensors: entries,
    })?;
    let start = align_up(MAGIC.len() + 8 + header.len());
    header.resize(start - MAGIC.len() - 8, b' ');

    let mut out = Vec::with_capacity(start + payload_len + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.resize(align_up(out.len()), 0);
    }
    debug_assert_eq!(out.len(), start + payload_len);
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
        return Err(ckpt_err("bad magic or version"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let start = 16usize
        .checked_add(hlen)
        .filter(|&s| s + 4 <= bytes.len())
        .ok_or_else(|| ckpt_err("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..start])
        .map_err(|e| ckpt_err(format!("unreadable header: {e}")))?;
    let payload = &bytes[start..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let end = header
        .tensors
        .values()
        .map(|e| e.offset + e.nbytes)
        .max()
        .unwrap_or(0);
    if payload.len() < end {
        return Err(ckpt_err(format!(
            "truncated payload: {} bytes, header needs {end}",
            payload.len()
        )));
    }
    if crc32fast::hash(payload) != stored {
        return Err(ckpt_err("payload checksum mismatch"));
    }
    let mut tensors = BTreeMap::new();
    for (name, e) in header.tensors {
        if e.dtype != "f32" {
            return Err(ckpt_err(format!("{name}: unsupported dtype {}", e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.nbytes != numel * 4 || e.offset % ALIGN != 0 {
            return Err(ckpt_err(format!(
                "{name}: shape {:?} disagrees with nbytes {} or misaligned offset {}",
                e.shape, e.nbytes, e.offset
            )));
        }
        let data = payload[e.offset..e.offset + e.nbytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(name, Tensor::new(e.shape, data)?);
    }
    Ok(Container {
        config: header.config,
        tensors,
    })
}

/// Writes atomically (temp file + rename).
pub fn write_container(
    path: impl AsRef<Path>,
    config: &serde_json::Value,
    tensors: &BTreeMap<String, Tensor<f32>>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_container(config, tensors)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    decode_container(&fs::read(path)?)
}

fn skeleton(cfg: &ModelConfig) -> ModelWeights<()> {
    let layers = (0..cfg.n_layers)
        .map(|i| LayerWeights {
            mixer_norm: (),
            mixer: if cfg.is_attention(i) {
                MixerWeights::Attention(AttentionWeights {
                    wq: (),
                    wk: (),
                    wv: (),
                    wo: (),
                })
            } else {
                MixerWeights::Ssm(MambaWeights {
                    wc: (),
                    wb: (),
                    eb: (),
                    wx: (),
                    ex: (),
                    wout: (),
                    a_log: (),
                    dt_down: (),
                    dt_up: (),
                    dt_bias: (),
                    d_skip: cfg.ssm_skip.then_some(()),
                })
            },
            mlp_norm: (),
            gate: (),
            up: (),
            down: (),
        })
        .collect();
    ModelWeights {
        embed: (),
        layers,
        final_norm: (),
        lm_head: (),
    }
}

impl HybridModel<f32> {
    pub fn to_container(&self) -> Result<(serde_json::Value, BTreeMap<String, Tensor<f32>>)> {
        let tensors = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        Ok((serde_json::to_value(&self.cfg)?, tensors))
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(c.config)
            .map_err(|e| ckpt_err(format!("bad model config: {e}")))?;
        cfg.validate()?;
        let mut tensors = c.tensors;
        let w = skeleton(&cfg).try_map(|name, _| {
            tensors
                .remove(name)
                .ok_or_else(|| ckpt_err(format!("missing tensor {name}")))
        })?;
        if let Some(extra) = tensors.keys().next() {
            return Err(ckpt_err(format!("unexpected tensor {extra}")));
        }
        let m = Self { cfg, w };
        m.check_shapes()
            .map_err(|e| ckpt_err(format!("header disagrees with config: {e}")))?;
        Ok(m)
    }
}

pub fn save_checkpoint(model: &HybridModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let (cfg, tensors) = model.to_container()?;
    write_container(path, &cfg, &tensors)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<HybridModel<f32>> {
    HybridModel::from_container(read_container(path)?)
}
