use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use hybrid_core::bench::{batch_sweep, bench_decode, scaling_curve, BenchReport};
use hybrid_core::conversion::{
    init_from_transformer, load_corpus, pack_sequences, train_loop, write_corpus, ChatRecord, Objective, PackedBatch,
    Sample, StepLog, TrainObserver,
};
use hybrid_core::eval::{gen_toy_split, read_results, report, toy_chat_corpus, write_results, EvalReport, ProblemResult, Split};
use hybrid_core::grpo::{cycling_sampler, train_grpo, GrpoObserver, GrpoStepLog, GrpoTask};
use hybrid_core::loss::KlDirection;
use hybrid_core::model::{generate, load_checkpoint, save_checkpoint, Completion, GenerateOptions, HybridModel, ModelConfig};
use hybrid_core::optim::Optimizer;
use hybrid_core::{tokenizer, SeededRng};

use crate::config::{RunConfig, StageConfig};
use crate::run::{param_refs, read_jsonl, write_jsonl, RunDir, RunState, BEST, FINAL};

/// Marks errors in the configuration itself (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Args, Debug)]
pub struct Common {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref()).map_err(|e| anyhow!(ConfigError(format!("{e:#}"))))
    }
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Directory for logs, metrics and checkpoints.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Continue from the directory's last checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic arithmetic corpus and task files.
    ToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 96)]
        tasks: usize,
        #[arg(long, default_value_t = 32)]
        eval_tasks: usize,
        #[arg(long, default_value_t = 1)]
        difficulty: u32,
        /// Chat records per training task.
        #[arg(long, default_value_t = 8)]
        per_task: usize,
        /// Fraction of records answered in boxed form.
        #[arg(long, default_value_t = 0.0625)]
        boxed_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain the all-attention teacher on a chat corpus.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Build a hybrid from a teacher checkpoint.
    InitHybrid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a hybrid student from its teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Supervised fine-tuning on a chat corpus.
    Sft {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Reinforcement learning against boxed-answer reward.
    Grpo {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: PathBuf,
        /// JSON lines with `prompt` and `gold`.
        #[arg(long)]
        tasks: PathBuf,
    },
    /// Sample completions for a prompt file.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        model: PathBuf,
        /// JSON lines with a `prompt` field.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model (or saved results) with pass@k and maj@k.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long, required_unless_present = "results")]
        model: Option<PathBuf>,
        #[arg(long, required_unless_present = "results")]
        tasks: Option<PathBuf>,
        /// Re-score an existing results file instead of sampling.
        #[arg(long, conflicts_with_all = ["model", "tasks"])]
        results: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode throughput benchmark.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "preset")]
        model: Option<PathBuf>,
        /// Randomly initialized model of a named shape.
        #[arg(long, value_enum, conflicts_with = "model")]
        preset: Option<Preset>,
        /// Comma-separated batch sizes; sweeps until throughput drops.
        #[arg(long, value_delimiter = ',')]
        batches: Vec<usize>,
        #[arg(long)]
        prompt_len: Option<usize>,
        #[arg(long)]
        decode_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy against wall-clock time from an eval report and a throughput.
    Curve {
        #[arg(long)]
        report: PathBuf,
        /// Tokens per second; defaults to the best row of `--bench-csv`.
        #[arg(long, required_unless_present = "bench_csv")]
        throughput: Option<f64>,
        #[arg(long)]
        bench_csv: Option<PathBuf>,
        #[arg(long)]
        tokens_per_sample: usize,
        #[arg(long, value_enum, default_value_t = Metric::Pass)]
        metric: Metric,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct Sampling {
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Preset {
    Desk,
    DeskTransformer,
    Config,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Metric {
    Pass,
    Maj,
}

impl Command {
    pub fn run_dir(&self) -> Option<&Path> {
        match self {
            Command::TrainTeacher { run, .. }
            | Command::Distill { run, .. }
            | Command::Sft { run, .. }
            | Command::Grpo { run, .. } => Some(&run.run_dir),
            _ => None,
        }
    }
}

/// A prompt file line. Extra fields (such as those of toy tasks) are
/// ignored.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct PromptRecord {
    prompt: String,
    #[serde(default)]
    gold: Option<String>,
}

impl PromptRecord {
    fn task(&self) -> Result<GrpoTask> {
        Ok(GrpoTask {
            prompt: self.prompt.clone(),
            gold: self.gold.clone().context("task has no gold answer")?,
        })
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::ToyData {
            out,
            tasks,
            eval_tasks,
            difficulty,
            per_task,
            boxed_rate,
            seed,
        } => toy_data(&out, tasks, eval_tasks, difficulty, per_task, boxed_rate, seed),
        Command::TrainTeacher { common, run, data } => {
            let cfg = common.load()?;
            let model = HybridModel::init(cfg.model.clone().all_attention(), &mut SeededRng::new(cfg.seed, 100))?;
            train_stage("teacher", &cfg, &cfg.teacher, &run, model, None, &data)
        }
        Command::InitHybrid { common, teacher, out } => {
            let cfg = common.load()?;
            let t = load_checkpoint(&teacher).with_context(|| format!("loading {}", teacher.display()))?;
            let m = init_from_transformer(&t, &cfg.model, &mut SeededRng::new(cfg.seed, 101))?;
            save_checkpoint(&m, &out)?;
            Ok(())
        }
        Command::Distill {
            common,
            run,
            teacher,
            student,
            data,
        } => {
            let cfg = common.load()?;
            let t = load_checkpoint(&teacher).with_context(|| format!("loading {}", teacher.display()))?;
            let s = load_checkpoint(&student).with_context(|| format!("loading {}", student.display()))?;
            train_stage("distill", &cfg, &cfg.distill, &run, s, Some(&t), &data)
        }
        Command::Sft { common, run, model, data } => {
            let cfg = common.load()?;
            let m = load_checkpoint(&model).with_context(|| format!("loading {}", model.display()))?;
            train_stage("sft", &cfg, &cfg.sft, &run, m, None, &data)
        }
        Command::Grpo { common, run, model, tasks } => {
            let cfg = common.load()?;
            let m = load_checkpoint(&model).with_context(|| format!("loading {}", model.display()))?;
            grpo_stage(&cfg, &run, m, &tasks)
        }
        Command::Generate {
            common,
            sampling,
            model,
            prompts,
            out,
        } => {
            let cfg = common.load()?;
            let m = load_checkpoint(&model)?;
            let records: Vec<PromptRecord> = read_jsonl(&prompts)?;
            let opts = sampling_options(&cfg, &sampling);
            let completions = sample(&m, &records, &opts)?;
            let lines: Vec<_> = completions
                .iter()
                .map(|c| {
                    json!({
                        "prompt_index": c.prompt_index,
                        "sample_index": c.sample_index,
                        "text": completion_text(c),
                        "tokens": c.tokens,
                        "stopped": c.stopped,
                    })
                })
                .collect();
            write_jsonl(&out, &lines)
        }
        Command::Eval {
            common,
            sampling,
            model,
            tasks,
            results,
            out,
        } => {
            let cfg = common.load()?;
            fs::create_dir_all(&out)?;
            let results = match results {
                Some(p) => read_results(&p)?,
                None => {
                    let (model, tasks) = (model.context("--model is required")?, tasks.context("--tasks is required")?);
                    let m = load_checkpoint(&model)?;
                    let records: Vec<PromptRecord> = read_jsonl(&tasks)?;
                    let opts = sampling_options(&cfg, &sampling);
                    score(&m, &records, &opts)?
                }
            };
            write_results(out.join("results.jsonl"), &results)?;
            let n = results.iter().map(|r| r.n).min().unwrap_or(0);
            let ks: Vec<usize> = cfg.eval.ks.iter().copied().filter(|&k| k >= 1 && k <= n).collect();
            let rep = report(&results, &ks, cfg.eval.maj_trials, cfg.seed)?;
            fs::write(out.join("report.json"), serde_json::to_string_pretty(&rep)? + "\n")?;
            println!("{}", serde_json::to_string(&rep)?);
            Ok(())
        }
        Command::Bench {
            common,
            model,
            preset,
            batches,
            prompt_len,
            decode_len,
            out,
        } => {
            let cfg = common.load()?;
            let m = match (model, preset) {
                (Some(p), _) => load_checkpoint(&p)?,
                (None, Some(preset)) => {
                    let shape = match preset {
                        Preset::Desk => ModelConfig::desk(),
                        Preset::DeskTransformer => ModelConfig::desk_transformer(),
                        Preset::Config => cfg.model.clone(),
                    };
                    HybridModel::init(shape, &mut SeededRng::new(cfg.seed, 102))?
                }
                (None, None) => bail!("one of --model or --preset is required"),
            };
            let mut s = cfg.bench.scenario.clone();
            s.prompt_len = prompt_len.unwrap_or(s.prompt_len);
            s.decode_len = decode_len.unwrap_or(s.decode_len);
            let batches = if batches.is_empty() { cfg.bench.batches.clone() } else { batches };
            let reports = match batches.as_slice() {
                [b] => vec![bench_decode(&m, &hybrid_core::bench::BenchScenario { batch: *b, ..s })?],
                bs => batch_sweep(&m, &s, bs)?,
            };
            fs::create_dir_all(&out)?;
            let mut csv = String::from(BenchReport::CSV_HEADER);
            csv.push('\n');
            for r in &reports {
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
            fs::write(out.join("bench.csv"), &csv)?;
            fs::write(out.join("bench.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
            print!("{csv}");
            Ok(())
        }
        Command::Curve {
            report,
            throughput,
            bench_csv,
            tokens_per_sample,
            metric,
            out,
        } => {
            let rep: EvalReport = serde_json::from_str(&fs::read_to_string(&report)?)?;
            let throughput = match throughput {
                Some(t) => t,
                None => best_throughput(bench_csv.as_deref().context("--bench-csv is required")?)?,
            };
            let table = match metric {
                Metric::Pass => &rep.pass_at_k,
                Metric::Maj => &rep.maj_at_k,
            };
            let points: Vec<(f64, f64)> = table.iter().map(|(&k, &a)| (k as f64, a)).collect();
            let curve = scaling_curve(&points, throughput, tokens_per_sample)?;
            let mut csv = String::from("samples,seconds,accuracy\n");
            for p in &curve {
                csv.push_str(&format!("{},{},{}\n", p.samples, p.seconds, p.accuracy));
            }
            fs::write(&out, &csv)?;
            print!("{csv}");
            Ok(())
        }
    }
}

fn toy_data(out: &Path, n: usize, n_eval: usize, difficulty: u32, per_task: usize, boxed_rate: f64, seed: u64) -> Result<()> {
    fs::create_dir_all(out)?;
    let train = gen_toy_split(n, difficulty, seed, Split::Train)?;
    let eval = gen_toy_split(n_eval, difficulty, seed, Split::Eval)?;
    write_corpus(out.join("corpus.jsonl"), &toy_chat_corpus(&train, per_task, boxed_rate, seed))?;
    write_jsonl(&out.join("tasks.jsonl"), &train)?;
    write_jsonl(&out.join("eval_tasks.jsonl"), &eval)?;
    Ok(())
}

fn sampling_options(cfg: &RunConfig, s: &Sampling) -> GenerateOptions {
    GenerateOptions {
        temperature: s.temperature.unwrap_or(cfg.eval.temperature),
        max_tokens: s.max_tokens.unwrap_or(cfg.eval.max_tokens),
        samples: s.samples.unwrap_or(cfg.eval.samples),
        seed: cfg.seed,
        ..GenerateOptions::default()
    }
}

fn completion_text(c: &Completion) -> String {
    let body = if c.stopped { &c.tokens[..c.tokens.len() - 1] } else { &c.tokens[..] };
    tokenizer::decode(body)
}

fn sample(model: &HybridModel<f32>, records: &[PromptRecord], opts: &GenerateOptions) -> Result<Vec<Completion>> {
    let prompts: Vec<Vec<u32>> = records.iter().map(|r| tokenizer::chat_prompt(&r.prompt)).collect();
    Ok(generate(model, &prompts, opts)?)
}

fn score(model: &HybridModel<f32>, records: &[PromptRecord], opts: &GenerateOptions) -> Result<Vec<ProblemResult>> {
    let tasks = records.iter().map(PromptRecord::task).collect::<Result<Vec<_>>>()?;
    let full: Vec<PromptRecord> = tasks
        .iter()
        .map(|t| PromptRecord {
            prompt: t.full_prompt(),
            gold: Some(t.gold.clone()),
        })
        .collect();
    let completions = sample(model, &full, opts)?;
    let g = opts.samples.max(1);
    Ok(tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let texts: Vec<String> = completions[i * g..(i + 1) * g].iter().map(completion_text).collect();
            ProblemResult::score(i.to_string(), &t.gold, &texts)
        })
        .collect())
}

fn best_throughput(path: &Path) -> Result<f64> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let col = lines
        .next()
        .and_then(|h| h.split(',').position(|c| c == "tok_per_s"))
        .context("bench csv has no tok_per_s column")?;
    lines
        .filter_map(|l| l.split(',').nth(col)?.parse::<f64>().ok())
        .max_by(f64::total_cmp)
        .context("bench csv has no rows")
}

/// Deterministic held-out split of a corpus.
fn split_corpus(records: Vec<ChatRecord>, fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut order: Vec<usize> = (0..records.len()).collect();
    SeededRng::new(seed, 104).shuffle(&mut order);
    let n_eval = (records.len() as f64 * fraction).round() as usize;
    let n_eval = n_eval.min(records.len().saturating_sub(1));
    let (eval, train) = order.split_at(n_eval);
    let pick = |idx: &[usize]| idx.iter().map(|&i| Sample::from_chat(&records[i])).collect();
    (pick(train), pick(eval))
}

/// `HYBRID_HALT_AT`: abort right after logging this step, before its
/// checkpoint, as a crash would. Used to exercise `--resume`.
fn halt_at() -> Option<usize> {
    std::env::var("HYBRID_HALT_AT").ok()?.parse().ok()
}

fn check_halt(halt: Option<usize>, step: usize) -> Result<()> {
    if halt == Some(step) {
        bail!("halted at step {step} (HYBRID_HALT_AT)");
    }
    Ok(())
}

struct StageObserver<'a> {
    dir: &'a mut RunDir,
    stage: &'static str,
    seed: u64,
    halt: Option<usize>,
}

impl TrainObserver for StageObserver<'_> {
    fn on_step(&mut self, log: &StepLog) -> hybrid_core::Result<()> {
        let eval = log.eval_loss.map(|v| v.to_string()).unwrap_or_default();
        let row = format!("{},{},{},{},{eval}", log.step, log.loss, log.lr, log.grad_norm);
        self.dir
            .append_metric("step,loss,lr,grad_norm,eval_loss", &row)
            .and_then(|_| self.dir.log("step", serde_json::to_value(log)?))
            .and_then(|_| check_halt(self.halt, log.step))
            .map_err(io_err)
    }

    fn on_checkpoint(&mut self, step: usize, model: &HybridModel<f32>, opt: &Optimizer) -> hybrid_core::Result<()> {
        let state = RunState {
            stage: self.stage.into(),
            step,
            seed: self.seed,
        };
        self.dir
            .checkpoint(model, opt, &state)
            .and_then(|_| self.dir.log("checkpoint", json!({ "step": step })))
            .map_err(io_err)
    }
}

fn io_err(e: anyhow::Error) -> hybrid_core::Error {
    hybrid_core::Error::Io(std::io::Error::other(format!("{e:#}")))
}

fn train_stage(
    stage: &'static str,
    cfg: &RunConfig,
    stage_cfg: &StageConfig,
    args: &RunArgs,
    mut model: HybridModel<f32>,
    teacher: Option<&HybridModel<f32>>,
    data: &Path,
) -> Result<()> {
    let (mut dir, state) = RunDir::open(&args.run_dir, stage, cfg, args.resume)?;
    let tc = &stage_cfg.train;
    let (train, eval) = split_corpus(load_corpus(data)?, stage_cfg.eval_fraction, cfg.seed);
    let rows: Vec<PackedBatch> = pack_sequences(&train, tc.seq_len)?.0;
    let eval_rows: Vec<PackedBatch> = pack_sequences(&eval, tc.seq_len)?.0;
    let mut opt = Optimizer::new(cfg.stage_optimizer(stage_cfg), &param_refs(&model), tc.steps)?;
    if let Some(s) = &state {
        model = dir.restore(&mut opt)?;
        dir.log("resume", json!({ "step": s.step }))?;
    } else {
        dir.log(
            "start",
            json!({ "stage": stage, "train_rows": rows.len(), "eval_rows": eval_rows.len(), "params": model.cfg.param_count() }),
        )?;
    }
    let obj = match teacher {
        Some(teacher) => Objective::Distill {
            teacher,
            direction: KlDirection::Reverse,
        },
        None => Objective::Sft,
    };
    let mut obs = StageObserver {
        dir: &mut dir,
        stage,
        seed: cfg.seed,
        halt: halt_at(),
    };
    let out = train_loop(&mut model, &rows, &eval_rows, obj, opt, tc, &mut obs)?;
    save_checkpoint(&model, dir.path.join(FINAL))?;
    dir.log("done", json!({ "final_eval": out.final_eval }))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Best {
    step: usize,
    reward: f64,
}

struct GrpoStageObserver<'a> {
    dir: &'a mut RunDir,
    seed: u64,
    every: usize,
    steps: usize,
    /// Weights that produced the current step's rollouts.
    before: HybridModel<f32>,
    best: Option<Best>,
    halt: Option<usize>,
}

impl GrpoStageObserver<'_> {
    fn record(&mut self, log: &GrpoStepLog, model: &HybridModel<f32>, opt: &Optimizer) -> Result<()> {
        self.dir.append_metric(GrpoStepLog::CSV_HEADER, &log.csv_row())?;
        self.dir.log("step", serde_json::to_value(log)?)?;
        if self.best.as_ref().is_none_or(|b| log.mean_reward > b.reward) {
            save_checkpoint(&self.before, self.dir.path.join(BEST))?;
            let best = Best {
                step: log.step,
                reward: log.mean_reward,
            };
            fs::write(self.dir.path.join("best.json"), serde_json::to_string(&best)?)?;
            self.best = Some(best);
        }
        check_halt(self.halt, log.step)?;
        let done = log.step + 1;
        if (self.every > 0 && done % self.every == 0) || done == self.steps {
            let state = RunState {
                stage: "grpo".into(),
                step: done,
                seed: self.seed,
            };
            self.dir.checkpoint(model, opt, &state)?;
            self.dir.log("checkpoint", json!({ "step": done }))?;
        }
        self.before = model.clone();
        Ok(())
    }
}

impl GrpoObserver for GrpoStageObserver<'_> {
    fn on_step(&mut self, log: &GrpoStepLog, model: &HybridModel<f32>, opt: &Optimizer) -> hybrid_core::Result<()> {
        self.record(log, model, opt).map_err(io_err)
    }
}

fn grpo_stage(cfg: &RunConfig, args: &RunArgs, mut model: HybridModel<f32>, task_file: &Path) -> Result<()> {
    let (mut dir, state) = RunDir::open(&args.run_dir, "grpo", cfg, args.resume)?;
    let g = &cfg.grpo;
    let records: Vec<PromptRecord> = read_jsonl(task_file)?;
    let tasks = records.iter().map(PromptRecord::task).collect::<Result<Vec<_>>>()?;
    if tasks.is_empty() {
        bail!("no GRPO tasks in {}", task_file.display());
    }
    let mut opt = Optimizer::new(g.optimizer(), &param_refs(&model), g.steps * g.inner_epochs())?;
    let mut best = None;
    if let Some(s) = &state {
        model = dir.restore(&mut opt)?;
        let p = dir.path.join("best.json");
        if p.exists() {
            best = Some(serde_json::from_str(&fs::read_to_string(p)?)?);
        }
        dir.log("resume", json!({ "step": s.step }))?;
    } else {
        dir.log("start", json!({ "stage": "grpo", "tasks": tasks.len() }))?;
    }
    let mut sampler = cycling_sampler(tasks, cfg.seed);
    let mut obs = GrpoStageObserver {
        seed: cfg.seed,
        every: g.checkpoint_every,
        steps: g.steps,
        before: model.clone(),
        best,
        halt: halt_at(),
        dir: &mut dir,
    };
    let out = train_grpo(&mut model, &mut sampler, g, Some(opt), &mut obs)?;
    let best = obs.best.as_ref().map(|b| json!({ "step": b.step, "reward": b.reward }));
    save_checkpoint(&model, dir.path.join(FINAL))?;
    dir.log("done", json!({ "steps": out.curve.len(), "best": best }))?;
    Ok(())
}
