//! Group-relative policy optimization: grouped rollouts, standardized
//! advantages, the ratio-times-advantage surrogate with an entropy bonus,
//! and a trainer that keeps the best-reward weights.

use serde::{Deserialize, Serialize};

use crate::attention::SeqLayout;
use crate::error::{invalid, shape_err, Error, Result};
use crate::eval::{reward_boxed, BOXED_SUFFIX};
use crate::model::{generate, GenerateOptions, HybridModel, ModelWeights};
use crate::optim::{Optimizer, OptimizerConfig, Schedule};
use crate::tensor::ops::log_softmax_slice;
use crate::tensor::tape::CustomOp;
use crate::tensor::{Element, SeededRng, Tape, Tensor, Var};
use crate::tokenizer;

/// Floor added to the group standard deviation.
pub const ADV_EPS: f64 = 1e-6;

/// `(r - mean) / (std + eps)` with the population standard deviation.
/// Zero-variance groups get all-zero advantages.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(invalid(format!("advantages need a group of at least 2, got {}", rewards.len())));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + ADV_EPS)).collect())
}

/// Plain evaluation of the surrogate on per-token values:
/// `mean(exp(new - old) * adv) + eta * mean(entropy)`.
pub fn grpo_loss(new_logprobs: &[f64], old_logprobs: &[f64], advantages: &[f64], entropy: &[f64], eta: f64) -> Result<f64> {
    let n = new_logprobs.len();
    if n == 0 || old_logprobs.len() != n || advantages.len() != n || entropy.len() != n {
        return Err(shape_err(
            "grpo_loss",
            format!(
                "new {n}, old {}, advantages {}, entropy {}",
                old_logprobs.len(),
                advantages.len(),
                entropy.len()
            ),
        ));
    }
    let policy: f64 = (0..n).map(|i| (new_logprobs[i] - old_logprobs[i]).exp() * advantages[i]).sum();
    Ok((policy + eta * entropy.iter().sum::<f64>()) / n as f64)
}

/// One completion token scored by the surrogate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenSlot {
    /// Logit row that predicts the token.
    pub row: usize,
    pub token: u32,
    pub advantage: f64,
}

/// Per-token quantities of a surrogate evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurrogateStats {
    pub objective: f64,
    pub logprobs: Vec<f64>,
    pub mean_entropy: f64,
    pub mean_ratio: f64,
}

struct TokenTerms {
    logp: Vec<f64>,
    probs: Vec<f64>,
    entropy: f64,
}

fn token_terms<T: Element>(row: &[T], temperature: f64) -> TokenTerms {
    let mut lp: Vec<f64> = row.iter().map(|v| v.as_f64() / temperature).collect();
    log_softmax_slice(&mut lp);
    let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let entropy = -probs.iter().zip(&lp).map(|(p, l)| p * l).sum::<f64>();
    TokenTerms { logp: lp, probs, entropy }
}

fn ratio_weight(ratio: f64, adv: f64, clip: Option<f64>) -> (f64, f64) {
    // (objective term, d term / d ratio)
    match clip {
        None => (ratio * adv, adv),
        Some(eps) => {
            let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
            let (a, b) = (ratio * adv, clipped * adv);
            if a <= b {
                (a, adv)
            } else {
                (b, 0.0)
            }
        }
    }
}

struct SurrogateOp {
    slots: Vec<TokenSlot>,
    old: Vec<f64>,
    eta: f64,
    temperature: f64,
    clip: Option<f64>,
}

impl<T: Element> CustomOp<T> for SurrogateOp {
    fn name(&self) -> &'static str {
        "grpo_surrogate"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let v = x.last_dim();
        let n = self.slots.len() as f64;
        let g = grad_out.item().as_f64() / n;
        let inv_t = 1.0 / self.temperature;
        let mut dx = vec![0.0f64; x.numel()];
        for (s, &old) in self.slots.iter().zip(&self.old) {
            let t = token_terms(x.row(s.row), self.temperature);
            let ratio = (t.logp[s.token as usize] - old).exp();
            let (_, dr) = ratio_weight(ratio, s.advantage, self.clip);
            let out = &mut dx[s.row * v..(s.row + 1) * v];
            // d logp_tok / dz_j = (1[j = tok] - p_j) / T
            // d H / dz_j = -p_j (logp_j + H) / T
            let a = g * dr * ratio;
            for j in 0..v {
                let p = t.probs[j];
                let onehot = if j == s.token as usize { 1.0 } else { 0.0 };
                out[j] += inv_t * (a * (onehot - p) - g * self.eta * p * (t.logp[j] + t.entropy));
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx.into_iter().map(T::of).collect())?)])
    }
}

/// Puts the surrogate (to be maximized) on the tape over `logits`
/// `[rows, V]`. `old` holds the behaviour-policy logprob of each slot;
/// `None` takes the current values, making every ratio exactly 1.
pub fn grpo_surrogate<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    slots: &[TokenSlot],
    old: Option<&[f64]>,
    eta: f64,
    temperature: f64,
    clip: Option<f64>,
) -> Result<(Var, SurrogateStats)> {
    let x = tape.value(logits);
    if x.rank() != 2 {
        return Err(shape_err("grpo_surrogate", format!("logits {:?}", x.shape())));
    }
    if slots.is_empty() {
        return Err(invalid("grpo_surrogate: no completion tokens"));
    }
    if !(temperature > 0.0) {
        return Err(invalid("grpo_surrogate: temperature must be positive"));
    }
    let (rows, v) = (x.shape()[0], x.shape()[1]);
    let mut logprobs = Vec::with_capacity(slots.len());
    let mut entropy = 0.0;
    for s in slots {
        if s.row >= rows || s.token as usize >= v {
            return Err(shape_err("grpo_surrogate", format!("slot {s:?} outside logits [{rows}, {v}]")));
        }
        let t = token_terms(x.row(s.row), temperature);
        logprobs.push(t.logp[s.token as usize]);
        entropy += t.entropy;
    }
    let old = match old {
        Some(o) if o.len() != slots.len() => {
            return Err(shape_err("grpo_surrogate", format!("{} old logprobs for {} tokens", o.len(), slots.len())))
        }
        Some(o) => o.to_vec(),
        None => logprobs.clone(),
    };
    let n = slots.len() as f64;
    let mut policy = 0.0;
    let mut ratios = 0.0;
    for ((s, lp), o) in slots.iter().zip(&logprobs).zip(&old) {
        let ratio = (lp - o).exp();
        ratios += ratio;
        policy += ratio_weight(ratio, s.advantage, clip).0;
    }
    let objective = (policy + eta * entropy) / n;
    if !objective.is_finite() {
        return Err(Error::NonFinite("grpo surrogate".into()));
    }
    let stats = SurrogateStats {
        objective,
        logprobs,
        mean_entropy: entropy / n,
        mean_ratio: ratios / n,
    };
    let var = tape.custom(
        &[logits],
        Tensor::scalar(T::of(objective)),
        Box::new(SurrogateOp {
            slots: slots.to_vec(),
            old,
            eta,
            temperature,
            clip,
        }),
    )?;
    Ok((var, stats))
}

/// A question and its reference answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrpoTask {
    pub prompt: String,
    pub gold: String,
}

impl GrpoTask {
    /// The prompt with the boxed-answer instruction appended once.
    pub fn full_prompt(&self) -> String {
        if self.prompt.ends_with(BOXED_SUFFIX) {
            self.prompt.clone()
        } else {
            format!("{} {BOXED_SUFFIX}", self.prompt)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub prompt: Vec<u32>,
    pub gold: String,
    pub completions: Vec<Vec<u32>>,
    /// Sampling-time logprobs of each completion token.
    pub old_logprobs: Vec<Vec<f32>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(prompt: Vec<u32>, gold: String, completions: Vec<Vec<u32>>, old_logprobs: Vec<Vec<f32>>) -> Result<Self> {
        if completions.len() != old_logprobs.len() || completions.iter().zip(&old_logprobs).any(|(c, l)| c.len() != l.len()) {
            return Err(shape_err("rollout group", "completions and logprobs disagree"));
        }
        let rewards: Vec<f64> = completions
            .iter()
            .map(|c| reward_boxed(&tokenizer::decode(c), &gold))
            .collect();
        let advantages = compute_advantages(&rewards)?;
        Ok(Self {
            prompt,
            gold,
            completions,
            old_logprobs,
            rewards,
            advantages,
        })
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    /// Prompts per outer step.
    pub batch_size: usize,
    /// Prompts per update; `batch_size / ppo_batch` updates per step.
    pub ppo_batch: usize,
    /// Rollouts per prompt.
    pub group_size: usize,
    /// Entropy bonus coefficient.
    pub entropy_coef: f64,
    pub max_gen_len: usize,
    pub lr: f64,
    pub steps: usize,
    /// Rollout sampling temperature; the surrogate uses the same one.
    pub temperature: f64,
    /// Optional ratio clip (off by default).
    pub clip: Option<f64>,
    /// Observer checkpoint period in outer steps (0 disables).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            ppo_batch: 64,
            group_size: 8,
            entropy_coef: 0.001,
            max_gen_len: 32_768,
            lr: 1e-6,
            steps: 50,
            temperature: 1.0,
            clip: None,
            checkpoint_every: 10,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.ppo_batch == 0 || self.batch_size % self.ppo_batch != 0 {
            return Err(invalid(format!(
                "batch_size ({}) must be a positive multiple of ppo_batch ({})",
                self.batch_size, self.ppo_batch
            )));
        }
        if self.group_size < 2 {
            return Err(invalid("group_size must be at least 2"));
        }
        if self.max_gen_len == 0 || !(self.temperature > 0.0) || !(self.lr > 0.0) {
            return Err(invalid("max_gen_len, temperature and lr must be positive"));
        }
        Ok(())
    }

    /// Updates per outer step.
    pub fn inner_epochs(&self) -> usize {
        self.batch_size / self.ppo_batch
    }

    /// Adam without weight decay at a constant rate.
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
            ..OptimizerConfig::default()
        }
    }
}

/// Samples `group_size` completions for each task.
pub fn rollout(model: &HybridModel<f32>, tasks: &[GrpoTask], cfg: &GrpoConfig, seed: u64) -> Result<Vec<RolloutGroup>> {
    let prompts: Vec<Vec<u32>> = tasks.iter().map(|t| tokenizer::chat_prompt(&t.full_prompt())).collect();
    let opts = GenerateOptions {
        temperature: cfg.temperature,
        max_tokens: cfg.max_gen_len,
        seed,
        samples: cfg.group_size,
        ..GenerateOptions::default()
    };
    let comps = generate(model, &prompts, &opts)?;
    let g = cfg.group_size;
    tasks
        .iter()
        .zip(prompts)
        .enumerate()
        .map(|(i, (t, p))| {
            let c = &comps[i * g..(i + 1) * g];
            RolloutGroup::new(
                p,
                t.gold.clone(),
                c.iter().map(|c| c.tokens.clone()).collect(),
                c.iter().map(|c| c.logprobs.clone()).collect(),
            )
        })
        .collect()
}

/// Right-padded rows of prompt + completion, and the slots of the
/// completion tokens.
fn rollout_batch(groups: &[RolloutGroup]) -> (Vec<u32>, SeqLayout, Vec<TokenSlot>) {
    let seqs: Vec<(Vec<u32>, usize, f64)> = groups
        .iter()
        .flat_map(|g| {
            g.completions.iter().zip(&g.advantages).map(|(c, &a)| {
                let mut ids = g.prompt.clone();
                ids.extend_from_slice(c);
                (ids, g.prompt.len(), a)
            })
        })
        .collect();
    let len = seqs.iter().map(|s| s.0.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(seqs.len() * len);
    let mut slots = Vec::new();
    for (b, (s, p, a)) in seqs.iter().enumerate() {
        for j in *p..s.len() {
            slots.push(TokenSlot {
                row: b * len + j - 1,
                token: s[j],
                advantage: *a,
            });
        }
        ids.extend_from_slice(s);
        ids.extend(std::iter::repeat_n(tokenizer::PAD, len - s.len()));
    }
    (ids, SeqLayout::dense(seqs.len(), len), slots)
}

fn surrogate_forward(
    model: &HybridModel<f32>,
    tape: &mut Tape<f32>,
    w: &ModelWeights<Var>,
    groups: &[RolloutGroup],
    old: Option<&[f64]>,
    cfg: &GrpoConfig,
) -> Result<(Var, SurrogateStats)> {
    let (ids, layout, slots) = rollout_batch(groups);
    let logits = model.forward_tape(tape, w, &ids, &layout)?;
    grpo_surrogate(tape, logits, &slots, old, cfg.entropy_coef, cfg.temperature, cfg.clip)
}

/// Per-token logprobs of the completions under the current weights.
pub fn policy_logprobs(model: &HybridModel<f32>, groups: &[RolloutGroup], cfg: &GrpoConfig) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let w = model.bind_const(&mut tape);
    Ok(surrogate_forward(model, &mut tape, &w, groups, None, cfg)?.1.logprobs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoStepLog {
    pub step: usize,
    pub mean_reward: f64,
    /// Mean completion length in tokens.
    pub mean_len: f64,
    /// Mean token entropy of the policy on its rollouts.
    pub entropy: f64,
}

impl GrpoStepLog {
    pub const CSV_HEADER: &'static str = "step,mean_reward,mean_len,entropy";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.mean_reward, self.mean_len, self.entropy)
    }
}

/// One outer step on already collected rollouts: `batch_size / ppo_batch`
/// updates, one per shard, each against the logprobs from before the
/// first update. Returns the mean entropy seen by the updates.
pub fn grpo_update(
    model: &mut HybridModel<f32>,
    groups: &[RolloutGroup],
    opt: &mut Optimizer,
    cfg: &GrpoConfig,
) -> Result<f64> {
    let shard = cfg.ppo_batch.min(groups.len()).max(1);
    let shards: Vec<&[RolloutGroup]> = groups.chunks(shard).collect();
    // behaviour logprobs for every shard but the first, which is scored at
    // unchanged weights inside its own update
    let mut old: Vec<Option<Vec<f64>>> = vec![None];
    for s in &shards[1..] {
        old.push(Some(policy_logprobs(model, s, cfg)?));
    }
    let mut entropy = 0.0;
    for (s, o) in shards.iter().zip(&old) {
        let mut tape = Tape::new();
        let w = model.bind(&mut tape);
        let (obj, stats) = surrogate_forward(model, &mut tape, &w, s, o.as_deref(), cfg)?;
        let loss = tape.scale(obj, -1.0)?;
        let grads = tape.backward(loss)?;
        opt.update(&mut model.w.params_mut(), &grads)?;
        entropy += stats.mean_entropy;
    }
    Ok(entropy / shards.len() as f64)
}

/// Observer for [`train_grpo`].
pub trait GrpoObserver {
    fn on_step(&mut self, _log: &GrpoStepLog, _model: &HybridModel<f32>, _opt: &Optimizer) -> Result<()> {
        Ok(())
    }
}

pub struct NoGrpoObserver;
impl GrpoObserver for NoGrpoObserver {}

pub struct GrpoOutcome {
    pub curve: Vec<GrpoStepLog>,
    /// Step whose rollouts had the highest mean reward (first on ties).
    pub best_step: usize,
    pub best_reward: f64,
    /// Weights that produced the best rollouts.
    pub best: HybridModel<f32>,
    pub optimizer: Optimizer,
}

/// Runs `cfg.steps - opt.step` outer steps. `sampler(step, n)` supplies the
/// step's tasks. On a non-finite loss the model is restored to the weights
/// at the start of the failing step and `Error::Diverged` returned.
pub fn train_grpo(
    model: &mut HybridModel<f32>,
    sampler: &mut dyn FnMut(usize, usize) -> Vec<GrpoTask>,
    cfg: &GrpoConfig,
    opt: Option<Optimizer>,
    obs: &mut dyn GrpoObserver,
) -> Result<GrpoOutcome> {
    cfg.validate()?;
    let updates = cfg.steps * cfg.inner_epochs();
    let mut opt = match opt {
        Some(o) => o,
        None => Optimizer::new(cfg.optimizer(), &model.w.named().into_iter().map(|(_, t)| t).collect::<Vec<_>>(), updates)?,
    };
    let first = opt.step / cfg.inner_epochs();
    let mut curve = Vec::new();
    let mut best: Option<(usize, f64, HybridModel<f32>)> = None;
    let base = SeededRng::new(cfg.seed, 2);
    for step in first..cfg.steps {
        let tasks = sampler(step, cfg.batch_size);
        if tasks.len() != cfg.batch_size {
            return Err(invalid(format!("sampler returned {} tasks, wanted {}", tasks.len(), cfg.batch_size)));
        }
        let seed = base.fork(step as u64).next_u64();
        let groups = rollout(model, &tasks, cfg, seed)?;
        let n: usize = groups.iter().map(|g| g.completions.len()).sum();
        let mean_reward = groups.iter().flat_map(|g| &g.rewards).sum::<f64>() / n as f64;
        let mean_len = groups.iter().flat_map(|g| &g.completions).map(Vec::len).sum::<usize>() as f64 / n as f64;
        if best.as_ref().is_none_or(|b| mean_reward > b.1) {
            best = Some((step, mean_reward, model.clone()));
        }
        let snapshot = model.w.clone();
        let entropy = match grpo_update(model, &groups, &mut opt, cfg) {
            Ok(e) => e,
            Err(Error::NonFinite(what)) => {
                model.w = snapshot;
                return Err(Error::Diverged {
                    step,
                    reason: format!("non-finite {what}"),
                });
            }
            Err(e) => return Err(e),
        };
        let log = GrpoStepLog {
            step,
            mean_reward,
            mean_len,
            entropy,
        };
        obs.on_step(&log, model, &opt)?;
        curve.push(log);
    }
    let (best_step, best_reward, best) = match best {
        Some(b) => b,
        None => (first, f64::NAN, model.clone()),
    };
    Ok(GrpoOutcome {
        curve,
        best_step,
        best_reward,
        best,
        optimizer: opt,
    })
}

/// Cycles through `tasks` in a per-pass shuffled order keyed by `seed`;
/// the tasks for a step depend only on the step.
pub fn cycling_sampler(tasks: Vec<GrpoTask>, seed: u64) -> impl FnMut(usize, usize) -> Vec<GrpoTask> {
    move |step, n| {
        let m = tasks.len();
        (0..n)
            .map(|i| {
                let k = step * n + i;
                let (pass, at) = (k / m, k % m);
                let mut order: Vec<usize> = (0..m).collect();
                SeededRng::new(seed, 3).fork(pass as u64).shuffle(&mut order);
                tasks[order[at]].clone()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
