//! Decode benchmarks, the analytic memory-traffic model, and
//! throughput-normalized test-time scaling curves.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{DecodeSession, HybridModel, ModelConfig};
use crate::tensor::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchScenario {
    /// Label for the report.
    pub model: String,
    pub batch: usize,
    pub prompt_len: usize,
    pub decode_len: usize,
    pub greedy: bool,
    pub ignore_eos: bool,
    pub warmup_runs: usize,
    pub timed_runs: usize,
    /// Reject scenarios whose weights plus cache exceed this many bytes.
    pub memory_budget: Option<usize>,
    pub seed: u64,
}

impl Default for BenchScenario {
    fn default() -> Self {
        Self {
            model: "model".into(),
            batch: 8,
            prompt_len: 256,
            decode_len: 4096,
            greedy: true,
            ignore_eos: true,
            warmup_runs: 2,
            timed_runs: 3,
            memory_budget: None,
            seed: 0,
        }
    }
}

impl BenchScenario {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.prompt_len == 0 || self.decode_len == 0 || self.timed_runs == 0 {
            return Err(invalid("batch, prompt_len, decode_len and timed_runs must be positive"));
        }
        if !self.greedy || !self.ignore_eos {
            return Err(invalid("benchmarks decode greedily with ignore_eos"));
        }
        Ok(())
    }
}

/// Bytes needed by a scenario, reported when it is rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sizing {
    pub positions_needed: usize,
    pub max_position: usize,
    pub weight_bytes: usize,
    pub cache_bytes_at_end: usize,
    pub budget: Option<usize>,
}

impl fmt::Display for Sizing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "needs {} positions (max {}), {} weight bytes + {} cache bytes",
            self.positions_needed, self.max_position, self.weight_bytes, self.cache_bytes_at_end
        )?;
        if let Some(b) = self.budget {
            write!(f, " against a budget of {b}")?;
        }
        Ok(())
    }
}

impl Sizing {
    pub fn of(cfg: &ModelConfig, s: &BenchScenario) -> Self {
        let t = s.prompt_len + s.decode_len;
        Self {
            positions_needed: t,
            max_position: cfg.max_position,
            weight_bytes: cfg.weight_bytes(),
            cache_bytes_at_end: s.batch * cache_bytes_per_stream(cfg, t),
            budget: s.memory_budget,
        }
    }

    pub fn fits(&self) -> bool {
        self.positions_needed <= self.max_position
            && self
                .budget
                .is_none_or(|b| self.weight_bytes + self.cache_bytes_at_end <= b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: BenchScenario,
    /// Prefill wall time, mean over timed runs.
    pub prefill_s: f64,
    /// Decode-loop wall time over timed runs.
    pub mean_s: f64,
    pub std_s: f64,
    pub tok_per_s: f64,
    /// Cache bytes held after each decode step of the first timed run.
    pub cache_trace: Vec<usize>,
    /// Traffic-model bytes per step at the final length.
    pub pred_bytes_per_step_t_max: usize,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "model,batch,prompt_len,decode_len,mean_s,std_s,tok_per_s,pred_bytes_per_step_t_max";

    pub fn csv_row(&self) -> String {
        let s = &self.scenario;
        format!(
            "{},{},{},{},{:.6},{:.6},{:.3},{}",
            s.model, s.batch, s.prompt_len, s.decode_len, self.mean_s, self.std_s, self.tok_per_s, self.pred_bytes_per_step_t_max
        )
    }
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Prefills random prompts, then decodes `decode_len` greedy tokens per
/// stream with no early stop. Only the decode loop is in `mean_s`.
pub fn bench_decode(model: &HybridModel<f32>, s: &BenchScenario) -> Result<BenchReport> {
    s.validate()?;
    let sizing = Sizing::of(&model.cfg, s);
    if !sizing.fits() {
        return Err(Error::Invalid(format!("scenario rejected: {sizing}")));
    }
    let v = model.cfg.vocab_size;
    let mut rng = SeededRng::new(s.seed, 5);
    let prompt: Vec<u32> = (0..s.batch * s.prompt_len).map(|_| rng.index(256) as u32).collect();
    let streams: Vec<usize> = (0..s.batch).collect();
    let mut prefill = Vec::new();
    let mut decode = Vec::new();
    let mut trace = Vec::new();
    for run in 0..s.warmup_runs + s.timed_runs {
        let timed = run >= s.warmup_runs;
        let record = run == s.warmup_runs;
        let mut session = DecodeSession::new(model, s.batch, s.prompt_len + s.decode_len)?;
        let t0 = Instant::now();
        let mut logits = session.step(model, &prompt, s.prompt_len, &streams, true)?;
        let t1 = Instant::now();
        for _ in 0..s.decode_len {
            let next: Vec<u32> = (0..s.batch).map(|b| argmax(&logits.data()[b * v..(b + 1) * v])).collect();
            logits = session.step(model, &next, 1, &streams, true)?;
            if record {
                trace.push(session.cache_bytes());
            }
        }
        let t2 = Instant::now();
        if timed {
            prefill.push((t1 - t0).as_secs_f64());
            decode.push((t2 - t1).as_secs_f64());
        }
    }
    let (mean_s, std_s) = mean_std(&decode);
    Ok(BenchReport {
        scenario: s.clone(),
        prefill_s: mean_std(&prefill).0,
        mean_s,
        std_s,
        tok_per_s: (s.batch * s.decode_len) as f64 / mean_s,
        cache_trace: trace,
        pred_bytes_per_step_t_max: traffic_bytes(&model.cfg, s.batch, s.prompt_len + s.decode_len),
    })
}

/// Runs the scenario at each batch size in order and stops after the first
/// one whose throughput falls below its predecessor's.
pub fn batch_sweep(model: &HybridModel<f32>, base: &BenchScenario, batches: &[usize]) -> Result<Vec<BenchReport>> {
    let mut out: Vec<BenchReport> = Vec::new();
    for &b in batches {
        let r = bench_decode(model, &BenchScenario { batch: b, ..base.clone() })?;
        let past_knee = out.last().is_some_and(|p| r.tok_per_s < p.tok_per_s);
        out.push(r);
        if past_knee {
            break;
        }
    }
    Ok(out)
}

/// Mean wall time of one decode step for `batch` streams that already hold
/// `t` tokens of (synthetic) context.
pub fn step_time_at(model: &HybridModel<f32>, batch: usize, t: usize, warmup: usize, reps: usize) -> Result<f64> {
    if reps == 0 {
        return Err(invalid("reps must be positive"));
    }
    let mut session = DecodeSession::new(model, batch, t + warmup + reps)?;
    session.fill_synthetic(t)?;
    let streams: Vec<usize> = (0..batch).collect();
    let tokens: Vec<u32> = (0..batch as u32).map(|b| b % 256).collect();
    for _ in 0..warmup {
        session.step(model, &tokens, 1, &streams, true)?;
    }
    let t0 = Instant::now();
    for _ in 0..reps {
        session.step(model, &tokens, 1, &streams, true)?;
    }
    Ok(t0.elapsed().as_secs_f64() / reps as f64)
}

/// Cache and recurrent-state bytes one stream holds after `t` tokens.
pub fn cache_bytes_per_stream(cfg: &ModelConfig, t: usize) -> usize {
    let kv = 2 * cfg.n_kv_heads * cfg.head_dim * t * 4;
    let ssm = cfg.d_inner() * cfg.d_state * 4;
    (0..cfg.n_layers).map(|i| if cfg.is_attention(i) { kv } else { ssm }).sum()
}

/// Weights plus all streams' cache bytes touched by one decode step.
pub fn traffic_bytes(cfg: &ModelConfig, batch: usize, t: usize) -> usize {
    cfg.weight_bytes() + batch * cache_bytes_per_stream(cfg, t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub weight_bytes: usize,
    pub transformer_cache: usize,
    pub hybrid_cache: usize,
}

impl Traffic {
    pub fn transformer(&self) -> usize {
        self.weight_bytes + self.transformer_cache
    }

    pub fn hybrid(&self) -> usize {
        self.weight_bytes + self.hybrid_cache
    }
}

/// Bytes per decode step for `cfg`'s layer shapes with attention in every
/// layer, and with attention only in `cfg.attn_layers`. Both share the
/// weight term of `cfg`.
pub fn memory_traffic_model(cfg: &ModelConfig, batch: usize, t: usize) -> Traffic {
    Traffic {
        weight_bytes: cfg.weight_bytes(),
        transformer_cache: batch * cache_bytes_per_stream(&cfg.clone().all_attention(), t),
        hybrid_cache: batch * cache_bytes_per_stream(cfg, t),
    }
}

/// Seconds to generate one sample of `tokens_per_sample` tokens.
pub fn seconds_per_sample(throughput: f64, tokens_per_sample: usize) -> Result<f64> {
    if !(throughput > 0.0) {
        return Err(invalid(format!("throughput must be positive, got {throughput}")));
    }
    Ok(tokens_per_sample as f64 / throughput)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Samples per problem.
    pub samples: f64,
    pub seconds: f64,
    pub accuracy: f64,
}

/// Maps `(samples, accuracy)` pairs onto wall-clock seconds at the given
/// throughput.
pub fn scaling_curve(points: &[(f64, f64)], throughput: f64, tokens_per_sample: usize) -> Result<Vec<CurvePoint>> {
    let per = seconds_per_sample(throughput, tokens_per_sample)?;
    Ok(points
        .iter()
        .map(|&(samples, accuracy)| CurvePoint {
            samples,
            seconds: samples * per,
            accuracy,
        })
        .collect())
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_traffic_example() {
        let cfg = ModelConfig {
            d_state: 16,
            ..ModelConfig::desk()
        };
        let t = memory_traffic_model(&cfg, 1, 1024);
        assert_eq!(t.transformer_cache, 8_388_608);
        assert_eq!(t.hybrid_cache, 2_195_456);
        let z = memory_traffic_model(&cfg, 1, 0);
        assert_eq!(z.transformer(), z.weight_bytes);
        assert_eq!(z.hybrid(), z.weight_bytes + 6 * 256 * 16 * 4);
        let far = memory_traffic_model(&cfg, 1, 1 << 30);
        let ratio = far.transformer_cache as f64 / far.hybrid_cache as f64;
        assert!((ratio - 4.0).abs() < 1e-3);
    }

    #[test]
    fn scaling_examples() {
        assert_eq!(format!("{:.3}", seconds_per_sample(15169.0, 8192).unwrap()), "0.540");
        assert_eq!(format!("{:.3}", seconds_per_sample(7263.0, 8192).unwrap()), "1.128");
        assert!(seconds_per_sample(0.0, 8).is_err());
        let pts = [(1.0, 0.2), (4.0, 0.5)];
        let a = scaling_curve(&pts, 100.0, 50).unwrap();
        let b = scaling_curve(&pts, 200.0, 50).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.seconds, 2.0 * y.seconds);
            assert_eq!(x.accuracy, y.accuracy);
        }
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1., 2., 3.], &[10., 20., 30.]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1., 2., 3.], &[3., 2., 1.]) + 1.0).abs() < 1e-12);
    }
}
