use serde::{Deserialize, Serialize};

use super::pack::{pack_sequences, PackedBatch, Sample};
use crate::error::{invalid, Error, Result};
use crate::loss::{kl_loss, masked_ce, KlDirection};
use crate::model::{HybridModel, ModelWeights};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::{SeededRng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total optimizer updates.
    pub steps: usize,
    /// Packed rows per update.
    pub batch_rows: usize,
    /// Packing length.
    pub seq_len: usize,
    /// Held-out evaluation period in steps (0 disables).
    pub eval_every: usize,
    /// Checkpoint period in steps (0 disables).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_rows: 8,
            seq_len: 256,
            eval_every: 50,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

/// Updates needed for `epochs` passes over `rows` packed rows.
pub fn steps_for_epochs(rows: usize, batch_rows: usize, epochs: usize) -> usize {
    rows.div_ceil(batch_rows.max(1)) * epochs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Held-out loss measured before this step's update.
    pub eval_loss: Option<f64>,
}

/// Callbacks invoked by [`train_loop`].
pub trait TrainObserver {
    fn on_step(&mut self, _log: &StepLog) -> Result<()> {
        Ok(())
    }

    /// Called after `step` updates when the checkpoint period divides it,
    /// and after the final step.
    fn on_checkpoint(&mut self, _step: usize, _model: &HybridModel<f32>, _opt: &Optimizer) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;
impl TrainObserver for NoObserver {}

/// What the trainer minimizes.
#[derive(Clone, Copy)]
pub enum Objective<'a> {
    /// Masked next-token cross-entropy on assistant tokens.
    Sft,
    /// Token-level KL against a frozen teacher on assistant positions.
    Distill {
        teacher: &'a HybridModel<f32>,
        direction: KlDirection,
    },
}

pub struct TrainOutcome {
    pub logs: Vec<StepLog>,
    /// Held-out loss after the last update.
    pub final_eval: Option<f64>,
    pub optimizer: Optimizer,
}

fn teacher_logits(teacher: &HybridModel<f32>, batch: &PackedBatch) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let w = teacher.bind_const(&mut tape);
    let l = teacher.forward_tape(&mut tape, &w, &batch.ids, &batch.layout())?;
    Ok(tape.value(l).clone())
}

fn objective_on_tape(
    obj: Objective<'_>,
    model: &HybridModel<f32>,
    tape: &mut Tape<f32>,
    w: &ModelWeights<Var>,
    batch: &PackedBatch,
) -> Result<Var> {
    let (targets, weights) = batch.targets();
    let logits = model.forward_tape(tape, w, &batch.ids, &batch.layout())?;
    match obj {
        Objective::Sft => masked_ce(tape, logits, &targets, &weights),
        Objective::Distill { teacher, direction } => {
            let t = teacher_logits(teacher, batch)?;
            kl_loss(tape, logits, &t, &weights, direction)
        }
    }
}

/// Loss-token-weighted mean objective over `rows`, in chunks of
/// `batch_rows`.
pub fn eval_loss(model: &HybridModel<f32>, rows: &[PackedBatch], batch_rows: usize, obj: Objective<'_>) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in rows.chunks(batch_rows.max(1)) {
        let b = PackedBatch::stack(&chunk.iter().collect::<Vec<_>>())?;
        let n = b.loss_tokens();
        if n == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let w = model.bind_const(&mut tape);
        let l = objective_on_tape(obj, model, &mut tape, &w, &b)?;
        sum += tape.value(l).item() as f64 * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(invalid("evaluation rows carry no loss tokens"));
    }
    Ok(sum / count as f64)
}

/// Row indices for `step`: epochs walk a per-epoch permutation.
fn rows_for_step(n_rows: usize, batch_rows: usize, seed: u64, step: usize) -> Vec<usize> {
    let b = batch_rows.min(n_rows).max(1);
    let per_epoch = n_rows.div_ceil(b);
    let (epoch, k) = (step / per_epoch, step % per_epoch);
    let mut perm: Vec<usize> = (0..n_rows).collect();
    SeededRng::new(seed, 1).fork(epoch as u64).shuffle(&mut perm);
    let lo = k * b;
    let mut out: Vec<usize> = perm[lo..(lo + b).min(n_rows)].to_vec();
    // the last batch of an epoch is topped up from the epoch's head
    let mut i = 0;
    while out.len() < b {
        out.push(perm[i]);
        i += 1;
    }
    out
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged {
            step,
            reason: format!("non-finite {what}"),
        },
        other => other,
    }
}

/// Runs updates `opt.step..cfg.steps`. On divergence the model is rolled
/// back to the last checkpointed weights and `Error::Diverged` returned.
pub fn train_loop(
    model: &mut HybridModel<f32>,
    rows: &[PackedBatch],
    eval_rows: &[PackedBatch],
    obj: Objective<'_>,
    mut opt: Optimizer,
    cfg: &TrainConfig,
    obs: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    if rows.is_empty() {
        return Err(invalid("no training rows"));
    }
    let mut logs = Vec::new();
    let mut last_good = model.w.clone();
    for step in opt.step..cfg.steps {
        let eval = if cfg.eval_every > 0 && step % cfg.eval_every == 0 && !eval_rows.is_empty() {
            Some(eval_loss(model, eval_rows, cfg.batch_rows, obj).map_err(|e| diverged(step, e))?)
        } else {
            None
        };
        let idx = rows_for_step(rows.len(), cfg.batch_rows, cfg.seed, step);
        let batch = PackedBatch::stack(&idx.iter().map(|&i| &rows[i]).collect::<Vec<_>>())?;
        let result = (|| {
            let mut tape = Tape::new();
            let w = model.bind(&mut tape);
            let l = objective_on_tape(obj, model, &mut tape, &w, &batch)?;
            let loss = tape.value(l).item() as f64;
            let grads = tape.backward(l)?;
            let info = opt.update(&mut model.w.params_mut(), &grads)?;
            Ok::<_, Error>((loss, info))
        })();
        let (loss, info) = match result {
            Ok(v) => v,
            Err(e) => {
                model.w = last_good;
                return Err(diverged(step, e));
            }
        };
        let log = StepLog {
            step,
            loss,
            lr: info.lr,
            grad_norm: info.grad_norm,
            eval_loss: eval,
        };
        obs.on_step(&log)?;
        logs.push(log);
        let done = step + 1;
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.steps {
            obs.on_checkpoint(done, model, &opt)?;
            last_good = model.w.clone();
        }
    }
    let final_eval = if eval_rows.is_empty() {
        None
    } else {
        Some(eval_loss(model, eval_rows, cfg.batch_rows, obj)?)
    };
    Ok(TrainOutcome {
        logs,
        final_eval,
        optimizer: opt,
    })
}

fn pack_all(samples: &[Sample], cfg: &TrainConfig) -> Result<Vec<PackedBatch>> {
    Ok(pack_sequences(samples, cfg.seq_len)?.0)
}

/// Supervised fine-tuning with masked cross-entropy on assistant tokens.
pub fn train_sft(
    model: &mut HybridModel<f32>,
    train: &[Sample],
    eval: &[Sample],
    opt_cfg: &OptimizerConfig,
    cfg: &TrainConfig,
    obs: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let rows = pack_all(train, cfg)?;
    let eval_rows = pack_all(eval, cfg)?;
    let opt = Optimizer::new(opt_cfg.clone(), &model.w.named().into_iter().map(|(_, t)| t).collect::<Vec<_>>(), cfg.steps)?;
    train_loop(model, &rows, &eval_rows, Objective::Sft, opt, cfg, obs)
}

/// Reverse-KL distillation of `student` towards the frozen `teacher`.
pub fn train_distill(
    student: &mut HybridModel<f32>,
    teacher: &HybridModel<f32>,
    train: &[Sample],
    eval: &[Sample],
    opt_cfg: &OptimizerConfig,
    cfg: &TrainConfig,
    obs: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let rows = pack_all(train, cfg)?;
    let eval_rows = pack_all(eval, cfg)?;
    let opt = Optimizer::new(opt_cfg.clone(), &student.w.named().into_iter().map(|(_, t)| t).collect::<Vec<_>>(), cfg.steps)?;
    let obj = Objective::Distill {
        teacher,
        direction: KlDirection::Reverse,
    };
    train_loop(student, &rows, &eval_rows, obj, opt, cfg, obs)
}
