//! Desk-scale teacher → hybrid → distill → SFT → GRPO run shared by the
//! end-to-end and generation-length criteria.

use std::sync::OnceLock;
use std::time::Instant;

use hybrid_core::conversion::{
    init_from_transformer, train_distill, train_sft, ChatRecord, NoObserver, Sample, TrainConfig,
};
use hybrid_core::eval::{gen_toy_split, toy_chat_corpus, Split, Style, ToyTask};
use hybrid_core::grpo::{cycling_sampler, rollout, train_grpo, GrpoConfig, GrpoTask, NoGrpoObserver};
use hybrid_core::model::{HybridModel, ModelConfig};
use hybrid_core::optim::OptimizerConfig;
use hybrid_core::SeededRng;

use super::{outcome, Outcome};

const POOL: usize = 16;
const MEMO: usize = 32;

struct Prepared {
    sft: HybridModel<f32>,
    pool: Vec<GrpoTask>,
    memo_ce: f64,
}

static PREPARED: OnceLock<Prepared> = OnceLock::new();

fn adam(lr: f64) -> OptimizerConfig {
    OptimizerConfig {
        lr,
        weight_decay: 0.0,
        ..OptimizerConfig::default()
    }
}

fn rows(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_rows: 4,
        seq_len: 256,
        eval_every: 0,
        ..TrainConfig::default()
    }
}

/// 32 tasks outside the pool, one fixed response each, two of them boxed.
fn memo_samples(pool: &[ToyTask]) -> Vec<Sample> {
    let plain = [Style::Bare, Style::Sentence, Style::Equation];
    gen_toy_split(2 * MEMO, 1, 1, Split::Train)
        .unwrap()
        .into_iter()
        .filter(|t| !pool.iter().any(|p| p.expression == t.expression))
        .take(MEMO)
        .enumerate()
        .map(|(i, t)| {
            let style = if i % 16 == 5 { Style::Boxed } else { plain[i % 3] };
            Sample::from_chat(&ChatRecord {
                prompt: t.prompt.clone(),
                response: style.render(&t),
            })
        })
        .collect()
}

fn prepare() -> Prepared {
    let t0 = Instant::now();
    let tasks = gen_toy_split(POOL, 1, 0, Split::Train).unwrap();
    let corpus: Vec<Sample> = toy_chat_corpus(&tasks, 16, 1.0 / 16.0, 0).iter().map(Sample::from_chat).collect();

    let mut teacher = HybridModel::init(ModelConfig::desk_transformer(), &mut SeededRng::new(0, 0)).unwrap();
    let warm = OptimizerConfig {
        warmup_frac: 0.05,
        ..adam(1e-3)
    };
    train_sft(&mut teacher, &corpus, &[], &warm, &rows(300), &mut NoObserver).unwrap();
    eprintln!("  teacher trained [{:.0} s]", t0.elapsed().as_secs_f64());

    let mut student = init_from_transformer(&teacher, &ModelConfig::desk(), &mut SeededRng::new(0, 0)).unwrap();
    train_distill(&mut student, &teacher, &corpus, &[], &adam(1e-3), &rows(200), &mut NoObserver).unwrap();
    eprintln!("  hybrid distilled [{:.0} s]", t0.elapsed().as_secs_f64());

    // the memorization set is repeated so it dominates the mix
    let memo = memo_samples(&tasks);
    let mut train: Vec<Sample> = (0..8).flat_map(|_| memo.iter().cloned()).collect();
    train.extend(corpus);
    let out = train_sft(&mut student, &train, &memo, &adam(1e-3), &rows(300), &mut NoObserver).unwrap();
    eprintln!("  SFT done [{:.0} s]", t0.elapsed().as_secs_f64());

    Prepared {
        sft: student,
        pool: tasks
            .iter()
            .map(|t| GrpoTask {
                prompt: t.prompt.clone(),
                gold: t.gold.clone(),
            })
            .collect(),
        memo_ce: out.final_eval.unwrap(),
    }
}

fn prepared() -> &'static Prepared {
    PREPARED.get_or_init(prepare)
}

fn grpo_cfg(seed: u64, steps: usize, max_gen_len: usize) -> GrpoConfig {
    GrpoConfig {
        batch_size: 1,
        ppo_batch: 1,
        group_size: 8,
        entropy_coef: 0.0,
        max_gen_len,
        lr: 1e-4,
        steps,
        seed,
        ..GrpoConfig::default()
    }
}

/// Mean reward of `group_size` rollouts on every pool prompt.
fn pool_reward(model: &HybridModel<f32>, pool: &[GrpoTask], cfg: &GrpoConfig) -> f64 {
    let groups = rollout(model, pool, cfg, 0x5eed ^ cfg.seed).unwrap();
    groups.iter().map(|g| g.mean_reward()).sum::<f64>() / groups.len() as f64
}

pub fn end_to_end() -> Outcome {
    let t0 = Instant::now();
    let p = prepared();
    let mut runs = Vec::new();
    for seed in 0..3 {
        let cfg = grpo_cfg(seed, 200, 16);
        let mut model = p.sft.clone();
        let start = pool_reward(&model, &p.pool, &cfg);
        let mut sampler = cycling_sampler(p.pool.clone(), seed);
        train_grpo(&mut model, &mut sampler, &cfg, None, &mut NoGrpoObserver).unwrap();
        let end = pool_reward(&model, &p.pool, &cfg);
        eprintln!("  GRPO seed {seed}: {start:.3} -> {end:.3} [{:.0} s]", t0.elapsed().as_secs_f64());
        runs.push((start, end));
    }
    let good = runs.iter().filter(|(s, e)| *s < 0.1 && *e > 0.5).count();
    // includes the shared stages, which run on first use
    let secs = t0.elapsed().as_secs_f64();
    let list: Vec<String> = runs.iter().map(|(s, e)| format!("{s:.3}->{e:.3}")).collect();
    outcome(
        p.memo_ce < 0.1 && good >= 2 && secs < 1800.0,
        format!(
            "SFT memorization CE {:.3} (< 0.1); pool reward step 0 -> 200 [{}], {good}/3 seeds go from < 0.1 to > 0.5 (>= 2); {:.0} s (< 1800 s)",
            p.memo_ce,
            list.join(", "),
            secs
        ),
    )
}

pub fn gen_len_trend() -> Outcome {
    let p = prepared();
    let lens = [8, 32, 128];
    let mut means = Vec::new();
    for &len in &lens {
        let mut total = 0.0;
        for seed in 0..5 {
            let cfg = grpo_cfg(seed, 60, len);
            let mut model = p.sft.clone();
            let mut sampler = cycling_sampler(p.pool.clone(), seed);
            let out = train_grpo(&mut model, &mut sampler, &cfg, None, &mut NoGrpoObserver).unwrap();
            let tail = &out.curve[out.curve.len() - 10..];
            total += tail.iter().map(|l| l.mean_reward).sum::<f64>() / tail.len() as f64;
        }
        means.push(total / 5.0);
    }
    let monotone = means.windows(2).all(|w| w[1] >= w[0]);
    let list: Vec<String> = lens.iter().zip(&means).map(|(l, m)| format!("{l}: {m:.3}")).collect();
    outcome(
        monotone,
        format!("final mean reward (last 10 of 60 steps, 5 seeds) by max_gen_len [{}], non-decreasing", list.join(", ")),
    )
}
