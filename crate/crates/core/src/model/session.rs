use serde::{Deserialize, Serialize};

use super::{HybridModel, MixerWeights};
use crate::attention::{attn_forward_streams, KvCache};
use crate::error::{shape_err, Error, Result};
use crate::mamba::{mamba_forward_streams, SsmState};
use crate::tensor::ops::{self, log_softmax_slice};
use crate::tensor::{Element, SeededRng, Tensor};
use crate::tokenizer;

/// Per-layer decoding memory.
#[derive(Clone, Debug)]
pub enum LayerState<T: Element> {
    Kv(KvCache<T>),
    Ssm(SsmState<T>),
}

impl<T: Element> LayerState<T> {
    pub fn used_bytes(&self) -> usize {
        match self {
            LayerState::Kv(c) => c.used_bytes(),
            LayerState::Ssm(s) => s.bytes(),
        }
    }

    pub fn stream_bytes(&self, stream: usize) -> usize {
        match self {
            LayerState::Kv(c) => c.stream_bytes(stream),
            LayerState::Ssm(s) => s.stream_bytes(),
        }
    }
}

/// Generation state for a fixed set of streams.
#[derive(Clone, Debug)]
pub struct DecodeSession<T: Element = f32> {
    layers: Vec<LayerState<T>>,
    pos: Vec<usize>,
    capacity: usize,
    /// Streams that emitted the stop token.
    pub finished: Vec<bool>,
}

impl<T: Element> DecodeSession<T> {
    pub fn new(model: &HybridModel<T>, batch: usize, capacity: usize) -> Result<Self> {
        let cfg = &model.cfg;
        if capacity > cfg.max_position {
            return Err(Error::Capacity {
                needed: capacity,
                capacity: cfg.max_position,
            });
        }
        let layers = model
            .w
            .layers
            .iter()
            .map(|l| match l.mixer {
                MixerWeights::Attention(_) => LayerState::Kv(KvCache::new(&cfg.attention(), batch, capacity)),
                MixerWeights::Ssm(_) => LayerState::Ssm(SsmState::zeros(batch, cfg.d_inner(), cfg.d_state)),
            })
            .collect();
        Ok(Self {
            layers,
            pos: vec![0; batch],
            capacity,
            finished: vec![false; batch],
        })
    }

    pub fn batch(&self) -> usize {
        self.pos.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Tokens consumed so far by `stream`.
    pub fn position(&self, stream: usize) -> usize {
        self.pos[stream]
    }

    pub fn layers(&self) -> &[LayerState<T>] {
        &self.layers
    }

    /// Bytes of cache and recurrent state currently held.
    pub fn cache_bytes(&self) -> usize {
        self.layers.iter().map(LayerState::used_bytes).sum()
    }

    pub fn stream_bytes(&self, stream: usize) -> usize {
        self.layers.iter().map(|l| l.stream_bytes(stream)).sum()
    }

    pub fn copy_stream(&mut self, src: usize, dst: usize) {
        for l in &mut self.layers {
            match l {
                LayerState::Kv(c) => c.copy_stream(src, dst),
                LayerState::Ssm(s) => s.copy_stream(src, dst),
            }
        }
        self.pos[dst] = self.pos[src];
        self.finished[dst] = self.finished[src];
    }

    pub fn reset_stream(&mut self, stream: usize) {
        for l in &mut self.layers {
            match l {
                LayerState::Kv(c) => c.reset_stream(stream),
                LayerState::Ssm(s) => s.reset_stream(stream),
            }
        }
        self.pos[stream] = 0;
        self.finished[stream] = false;
    }

    /// Pretends every stream has already consumed `t` tokens, with synthetic
    /// cache contents. Used to time a decode step at a given length.
    pub fn fill_synthetic(&mut self, t: usize) -> Result<()> {
        for l in &mut self.layers {
            match l {
                LayerState::Kv(c) => c.fill_synthetic(t)?,
                LayerState::Ssm(s) => {
                    for (i, v) in s.h.iter_mut().enumerate() {
                        *v = T::of(((i % 13) as f64 - 6.0) * 0.01);
                    }
                }
            }
        }
        if t > self.capacity {
            return Err(Error::Capacity {
                needed: t,
                capacity: self.capacity,
            });
        }
        self.pos.iter_mut().for_each(|p| *p = t);
        Ok(())
    }

    /// Feeds `len` tokens to each of `streams` (`tokens` is row-major
    /// `[streams.len(), len]`) and returns logits `[n, len, V]`, or
    /// `[n, 1, V]` for the last position only.
    pub fn step(
        &mut self,
        model: &HybridModel<T>,
        tokens: &[u32],
        len: usize,
        streams: &[usize],
        last_only: bool,
    ) -> Result<Tensor<T>> {
        let cfg = &model.cfg;
        let n = streams.len();
        if len == 0 || tokens.len() != n * len || streams.iter().any(|&s| s >= self.batch()) {
            return Err(shape_err(
                "DecodeSession::step",
                format!("{} tokens, len {len}, streams {streams:?}", tokens.len()),
            ));
        }
        for &s in streams {
            if self.pos[s] + len > self.capacity {
                return Err(Error::Capacity {
                    needed: self.pos[s] + len,
                    capacity: self.capacity,
                });
            }
        }
        let d = cfg.d_model;
        let eps = T::of(cfg.norm_eps);
        let mut x = Vec::with_capacity(n * len * d);
        for &id in tokens {
            if id as usize >= cfg.vocab_size {
                return Err(Error::Invalid(format!(
                    "token id {id} out of range for vocab {}",
                    cfg.vocab_size
                )));
            }
            x.extend_from_slice(model.w.embed.row(id as usize));
        }
        let mut x = Tensor::new([n, len, d], x)?;
        for (i, (lw, state)) in model.w.layers.iter().zip(&mut self.layers).enumerate() {
            let h = ops::rmsnorm(&x, &lw.mixer_norm, eps)?;
            let m = match state {
                LayerState::Kv(c) => {
                    let p = model.attn_params(i).expect("layer kind checked");
                    attn_forward_streams(&p, &h, c, streams)?
                }
                LayerState::Ssm(st) => {
                    let p = model.mamba_params(i).expect("layer kind checked");
                    mamba_forward_streams(&p, &h, st, streams)?
                }
            };
            x = ops::add(&x, &m)?;
            let h = ops::rmsnorm(&x, &lw.mlp_norm, eps)?;
            let g = ops::linear(&h, &lw.gate)?;
            let u = ops::linear(&h, &lw.up)?;
            let a: Vec<T> = g
                .data()
                .iter()
                .zip(u.data())
                .map(|(&g, &u)| ops::silu_scalar(g) * u)
                .collect();
            let a = Tensor::new(g.shape().to_vec(), a)?;
            x = ops::add(&x, &ops::linear(&a, &lw.down)?)?;
        }
        for &s in streams {
            self.pos[s] += len;
        }
        let (x, out_len) = if last_only && len > 1 {
            let last: Vec<T> = (0..n)
                .flat_map(|b| x.data()[((b + 1) * len - 1) * d..(b + 1) * len * d].iter().copied())
                .collect();
            (Tensor::new([n, 1, d], last)?, 1)
        } else {
            (x, len)
        };
        let h = ops::rmsnorm(&x, &model.w.final_norm, eps)?;
        ops::linear(&h, &model.w.lm_head)?.reshape([n, out_len, cfg.vocab_size])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateOptions {
    /// Sampling temperature; 0 means greedy.
    pub temperature: f64,
    pub max_tokens: usize,
    pub greedy: bool,
    /// Keep generating past the stop token until `max_tokens`.
    pub ignore_eos: bool,
    pub seed: u64,
    /// Completions per prompt.
    pub samples: usize,
    pub stop_token: u32,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 256,
            greedy: false,
            ignore_eos: false,
            seed: 0,
            samples: 1,
            stop_token: tokenizer::END,
        }
    }
}

impl GenerateOptions {
    pub fn is_greedy(&self) -> bool {
        self.greedy || self.temperature == 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub prompt_index: usize,
    pub sample_index: usize,
    pub tokens: Vec<u32>,
    /// Log-probability of each generated token under the sampling
    /// distribution (temperature-scaled; plain softmax when greedy).
    pub logprobs: Vec<f32>,
    pub stopped: bool,
}

/// Picks the next token from one row of logits; returns it with its
/// log-probability.
fn pick<T: Element>(logits: &[T], opts: &GenerateOptions, rng: &mut SeededRng) -> (u32, f32) {
    let temp = if opts.is_greedy() { 1.0 } else { opts.temperature };
    let mut lp: Vec<f64> = logits.iter().map(|&v| v.as_f64() / temp).collect();
    log_softmax_slice(&mut lp);
    let idx = if opts.is_greedy() {
        // first maximum
        lp.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    } else {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut chosen = lp.len() - 1;
        for (i, &v) in lp.iter().enumerate() {
            acc += v.exp();
            if u < acc {
                chosen = i;
                break;
            }
        }
        chosen
    };
    (idx as u32, lp[idx] as f32)
}

/// Generates `opts.samples` completions for every prompt. Each prompt is
/// prefilled once and its state copied to its sample streams; every sample
/// draws from its own generator keyed by `(seed, prompt, sample)`, so
/// results do not depend on batch composition or on `max_tokens` beyond
/// truncation. Output is prompt-major.
pub fn generate<T: Element>(
    model: &HybridModel<T>,
    prompts: &[Vec<u32>],
    opts: &GenerateOptions,
) -> Result<Vec<Completion>> {
    let g = opts.samples.max(1);
    let n = prompts.len() * g;
    if prompts.iter().any(|p| p.is_empty()) {
        return Err(Error::Invalid("empty prompt".into()));
    }
    let max_prompt = prompts.iter().map(Vec::len).max().unwrap_or(0);
    let mut session = DecodeSession::new(model, n, max_prompt + opts.max_tokens)?;
    let base = SeededRng::new(opts.seed, 0);
    let mut rngs: Vec<SeededRng> = (0..n)
        .map(|s| base.fork(((s / g) as u64) << 32 | (s % g) as u64))
        .collect();
    let mut out: Vec<Completion> = (0..n)
        .map(|s| Completion {
            prompt_index: s / g,
            sample_index: s % g,
            tokens: Vec::with_capacity(opts.max_tokens),
            logprobs: Vec::with_capacity(opts.max_tokens),
            stopped: false,
        })
        .collect();
    if opts.max_tokens == 0 {
        return Ok(out);
    }
    let v = model.cfg.vocab_size;

    let mut logits: Vec<Vec<T>> = vec![Vec::new(); n];
    for (pi, p) in prompts.iter().enumerate() {
        let lead = pi * g;
        let l = session.step(model, p, p.len(), &[lead], true)?;
        for s in lead..lead + g {
            if s != lead {
                session.copy_stream(lead, s);
            }
            logits[s] = l.data().to_vec();
        }
    }
    loop {
        let mut active = Vec::new();
        let mut next = Vec::new();
        for s in 0..n {
            let c = &mut out[s];
            if c.stopped || c.tokens.len() >= opts.max_tokens {
                continue;
            }
            let (tok, lp) = pick(&logits[s], opts, &mut rngs[s]);
            c.tokens.push(tok);
            c.logprobs.push(lp);
            if tok == opts.stop_token && !opts.ignore_eos {
                c.stopped = true;
                session.finished[s] = true;
                continue;
            }
            if c.tokens.len() < opts.max_tokens {
                active.push(s);
                next.push(tok);
            }
        }
        if active.is_empty() {
            break;
        }
        let l = session.step(model, &next, 1, &active, true)?;
        for (i, &s) in active.iter().enumerate() {
            logits[s] = l.data()[i * v..(i + 1) * v].to_vec();
        }
    }
    Ok(out)
}
