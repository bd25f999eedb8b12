//! Transformer-to-hybrid initialization, sequence packing, and the
//! distillation / SFT trainers.

mod pack;
mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use pack::{pack_sequences, PackStats, PackedBatch, Sample};
pub use train::{
    eval_loss, steps_for_epochs, train_distill, train_loop, train_sft, NoObserver, Objective, StepLog, TrainConfig,
    TrainObserver, TrainOutcome,
};

use crate::error::{invalid, Error, Result};
use crate::mamba::MambaParams;
use crate::model::{HybridModel, LayerWeights, MixerWeights, ModelConfig, ModelWeights};
use crate::tensor::SeededRng;

/// Builds a hybrid from a pure-transformer teacher. Layers listed in
/// `cfg.attn_layers` are copied verbatim; every other layer becomes an SSM
/// mixer whose C, B, x and output projections are the teacher's Q, K, V and
/// O matrices, with B and x expanded by the key/value-head replication map.
/// Embeddings, norms, MLPs and the LM head are copied.
pub fn init_from_transformer(teacher: &HybridModel<f32>, cfg: &ModelConfig, rng: &mut SeededRng) -> Result<HybridModel<f32>> {
    cfg.validate()?;
    let t = &teacher.cfg;
    let same = t.d_model == cfg.d_model
        && t.n_layers == cfg.n_layers
        && t.n_heads == cfg.n_heads
        && t.n_kv_heads == cfg.n_kv_heads
        && t.head_dim == cfg.head_dim
        && t.mlp_hidden == cfg.mlp_hidden
        && t.vocab_size == cfg.vocab_size;
    if !same {
        return Err(Error::Shape {
            op: "init_from_transformer",
            detail: "teacher and hybrid configs disagree on layer shapes".into(),
        });
    }
    if t.n_kv_heads > t.n_heads {
        return Err(invalid("teacher must have n_kv_heads <= n_heads"));
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (i, l) in teacher.w.layers.iter().enumerate() {
        let MixerWeights::Attention(a) = &l.mixer else {
            return Err(invalid(format!("teacher layer {i} is not attention")));
        };
        let mixer = if cfg.is_attention(i) {
            MixerWeights::Attention(a.clone())
        } else {
            let mut layer_rng = rng.fork(i as u64);
            let p = MambaParams::with_projections(
                cfg.mamba(),
                a.wq.clone(),
                a.wk.clone(),
                a.wv.clone(),
                a.wo.clone(),
                &mut layer_rng,
            )?;
            MixerWeights::Ssm(p.w)
        };
        layers.push(LayerWeights {
            mixer_norm: l.mixer_norm.clone(),
            mixer,
            mlp_norm: l.mlp_norm.clone(),
            gate: l.gate.clone(),
            up: l.up.clone(),
            down: l.down.clone(),
        });
    }
    let m = HybridModel {
        cfg: ModelConfig {
            rope_theta: t.rope_theta,
            ..cfg.clone()
        },
        w: ModelWeights {
            embed: teacher.w.embed.clone(),
            layers,
            final_norm: teacher.w.final_norm.clone(),
            lm_head: teacher.w.lm_head.clone(),
        },
    };
    m.check_shapes()?;
    Ok(m)
}

/// One chat example of the JSON-lines corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRecord {
    pub prompt: String,
    pub response: String,
}

/// Reads a `.jsonl` file, or every `.jsonl` file of a directory in name
/// order.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<ChatRecord>> {
    let path = path.as_ref();
    let files = if path.is_dir() {
        let mut v: Vec<_> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut out = Vec::new();
    for f in files {
        for (n, line) in fs::read_to_string(&f)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(line).map_err(|e| {
                invalid(format!("{}:{}: {e}", f.display(), n + 1))
            })?);
        }
    }
    Ok(out)
}

pub fn write_corpus(path: impl AsRef<Path>, records: &[ChatRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}
