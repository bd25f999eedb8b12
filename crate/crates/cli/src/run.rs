use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use hybrid_core::model::{load_checkpoint, read_container, save_checkpoint, write_container, HybridModel};
use hybrid_core::optim::Optimizer;
use hybrid_core::Tensor;

use crate::config::RunConfig;

pub const CONFIG: &str = "config.json";
pub const STATE: &str = "state.json";
pub const METRICS: &str = "metrics.csv";
pub const LOG: &str = "log.jsonl";
pub const LATEST: &str = "latest.ckpt";
pub const OPTIM: &str = "optimizer.ckpt";
pub const BEST: &str = "best.ckpt";
pub const FINAL: &str = "model.ckpt";

/// Resume point. Every stochastic choice in the training loops is keyed by
/// `(seed, step)`, so these two fields are the whole RNG state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub stage: String,
    pub step: usize,
    pub seed: u64,
}

/// An exclusively locked run directory. The lock file is removed on drop.
pub struct RunDir {
    pub path: PathBuf,
    lock: PathBuf,
    log: File,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl RunDir {
    /// Locks `path` for `stage`. A fresh start refuses a directory that
    /// already holds state; a resume requires the same stage and config.
    pub fn open(path: &Path, stage: &str, cfg: &RunConfig, resume: bool) -> Result<(Self, Option<RunState>)> {
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        let lock = path.join("run.lock");
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("{} is locked by another run (remove run.lock if that run is dead)", path.display())
            }
            Err(e) => return Err(e.into()),
        }
        let log = OpenOptions::new().create(true).append(true).open(path.join(LOG))?;
        let dir = Self {
            path: path.to_path_buf(),
            lock,
            log,
        };
        let state = dir.prepare(stage, cfg, resume)?;
        Ok((dir, state))
    }

    fn prepare(&self, stage: &str, cfg: &RunConfig, resume: bool) -> Result<Option<RunState>> {
        let resolved = serde_json::to_string_pretty(cfg)? + "\n";
        let state_path = self.path.join(STATE);
        let existing = if state_path.exists() {
            Some(serde_json::from_str::<RunState>(&fs::read_to_string(&state_path)?).context("reading state.json")?)
        } else {
            None
        };
        match (resume, existing) {
            (false, Some(s)) => bail!(
                "{} already holds a {} run at step {}; pass --resume or use a new directory",
                self.path.display(),
                s.stage,
                s.step
            ),
            (true, Some(s)) => {
                if s.stage != stage {
                    bail!("cannot resume: directory holds a {} run, not {stage}", s.stage);
                }
                let saved = fs::read_to_string(self.path.join(CONFIG)).unwrap_or_default();
                if saved != resolved {
                    bail!("cannot resume: resolved config differs from the saved config.json");
                }
                self.truncate_metrics(s.step)?;
                Ok(Some(s))
            }
            (_, None) => {
                fs::write(self.path.join(CONFIG), resolved)?;
                let _ = fs::remove_file(self.path.join(METRICS));
                Ok(None)
            }
        }
    }

    /// Drops metric rows for steps at or past `step`, written by a run that
    /// died after its last checkpoint.
    fn truncate_metrics(&self, step: usize) -> Result<()> {
        let p = self.path.join(METRICS);
        if !p.exists() {
            return Ok(());
        }
        let mut keep = String::new();
        for (i, line) in BufReader::new(File::open(&p)?).lines().enumerate() {
            let line = line?;
            let row_step = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
            if i == 0 || row_step.is_some_and(|s| s < step) {
                keep.push_str(&line);
                keep.push('\n');
            }
        }
        write_atomic(&p, keep.as_bytes())
    }

    pub fn log(&mut self, event: &str, fields: Value) -> Result<()> {
        let mut rec = json!({ "time": now(), "event": event });
        if let (Value::Object(r), Value::Object(f)) = (&mut rec, fields) {
            r.extend(f);
        }
        writeln!(self.log, "{rec}")?;
        Ok(())
    }

    pub fn append_metric(&self, header: &str, row: &str) -> Result<()> {
        let p = self.path.join(METRICS);
        let fresh = !p.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(&p)?;
        if fresh {
            writeln!(f, "{header}")?;
        }
        writeln!(f, "{row}")?;
        Ok(())
    }

    /// Writes weights, optimizer moments and then the state file, so a
    /// state file never points at a half-written checkpoint.
    pub fn checkpoint(&self, model: &HybridModel<f32>, opt: &Optimizer, state: &RunState) -> Result<()> {
        save_checkpoint(model, self.path.join(LATEST))?;
        let names = param_names(model);
        write_container(
            self.path.join(OPTIM),
            &json!({ "step": opt.step }),
            &opt.state_tensors(&names),
        )?;
        write_atomic(&self.path.join(STATE), &serde_json::to_vec_pretty(state)?)
    }

    /// Model and optimizer from the last checkpoint.
    pub fn restore(&self, opt: &mut Optimizer) -> Result<HybridModel<f32>> {
        let model = load_checkpoint(self.path.join(LATEST)).context("loading latest.ckpt")?;
        let c = read_container(self.path.join(OPTIM)).context("loading optimizer.ckpt")?;
        let step = c.config.get("step").and_then(Value::as_u64).context("optimizer.ckpt has no step")? as usize;
        opt.load_state(&param_names(&model), step, &c.tensors)?;
        Ok(model)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

pub fn param_names(model: &HybridModel<f32>) -> Vec<String> {
    model.named_params().into_iter().map(|(n, _)| n).collect()
}

pub fn param_refs(model: &HybridModel<f32>) -> Vec<&Tensor<f32>> {
    model.named_params().into_iter().map(|(_, t)| t).collect()
}

/// Reads a JSON-lines file into typed records.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}
