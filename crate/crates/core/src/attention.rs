//! Causal grouped-query attention with rotary embeddings and a contiguous
//! per-stream KV cache.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::ops::{self, axpy, dot};
use crate::tensor::tape::CustomOp;
use crate::tensor::{Element, SeededRng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub rope_theta: f64,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.n_kv_heads == 0 || self.head_dim == 0 {
            return Err(invalid("attention extents must be positive"));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(invalid(format!(
                "n_heads {} is not a multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(invalid("rotary embeddings need an even head_dim"));
        }
        Ok(())
    }

    /// Query heads served by each key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }
}

/// Projection matrices, stored input-major (`x @ W`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<W> {
    /// `[D, H*N]`
    pub wq: W,
    /// `[D, G*N]`
    pub wk: W,
    /// `[D, G*N]`
    pub wv: W,
    /// `[H*N, D]`
    pub wo: W,
}

impl<W> AttentionWeights<W> {
    pub const NAMES: [&'static str; 4] = ["wq", "wk", "wv", "wo"];

    pub fn fields(&self) -> [&W; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    pub fn fields_mut(&mut self) -> [&mut W; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }

    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(&'static str, &W) -> Result<U, E>,
    ) -> Result<AttentionWeights<U>, E> {
        Ok(AttentionWeights {
            wq: f("wq", &self.wq)?,
            wk: f("wk", &self.wk)?,
            wv: f("wv", &self.wv)?,
            wo: f("wo", &self.wo)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T: Element = f32> {
    pub cfg: AttentionConfig,
    pub w: AttentionWeights<Tensor<T>>,
}

impl<T: Element> AttentionParams<T> {
    pub fn init(cfg: AttentionConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let std_in = 1.0 / (d as f64).sqrt();
        let std_out = 1.0 / (cfg.q_dim() as f64).sqrt();
        Ok(Self {
            cfg,
            w: AttentionWeights {
                wq: Tensor::randn([d, cfg.q_dim()], std_in, rng),
                wk: Tensor::randn([d, cfg.kv_dim()], std_in, rng),
                wv: Tensor::randn([d, cfg.kv_dim()], std_in, rng),
                wo: Tensor::randn([cfg.q_dim(), d], std_out, rng),
            },
        })
    }

    pub fn check_shapes(&self) -> Result<()> {
        self.cfg.validate()?;
        let c = &self.cfg;
        let want = [
            [c.d_model, c.q_dim()],
            [c.d_model, c.kv_dim()],
            [c.d_model, c.kv_dim()],
            [c.q_dim(), c.d_model],
        ];
        for ((name, t), w) in AttentionWeights::<()>::NAMES.iter().zip(self.w.fields()).zip(want) {
            if t.shape() != w {
                return Err(shape_err(
                    "attention params",
                    format!("{name} is {:?}, expected {w:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Rotary embeddings

fn inv_freqs(head_dim: usize, theta: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|i| theta.powf(-(2.0 * i as f64) / head_dim as f64))
        .collect()
}

/// Rotates each adjacent pair `(x[2i], x[2i+1])` of every head by
/// `position * theta^(-2i/N)`. `sign = -1` applies the inverse rotation.
fn rope_rows<T: Element>(
    data: &mut [T],
    width: usize,
    head_dim: usize,
    positions: &[usize],
    theta: f64,
    sign: f64,
) {
    let freqs = inv_freqs(head_dim, theta);
    let mut cs = vec![(T::zero(), T::zero()); freqs.len()];
    for (row, &pos) in data.chunks_mut(width).zip(positions) {
        for (c, &f) in cs.iter_mut().zip(&freqs) {
            let ang = pos as f64 * f;
            *c = (T::of(ang.cos()), T::of(sign * ang.sin()));
        }
        for head in row.chunks_mut(head_dim) {
            for (pair, &(cos, sin)) in head.chunks_exact_mut(2).zip(&cs) {
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * cos - b * sin;
                pair[1] = a * sin + b * cos;
            }
        }
    }
}

/// Applies rotary position embeddings to `x [..., heads*N]` whose rows are
/// at `positions` (one position per row).
pub fn rope_apply<T: Element>(
    x: &Tensor<T>,
    positions: &[usize],
    head_dim: usize,
    theta: f64,
) -> Result<Tensor<T>> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(invalid(format!("rope needs an even head_dim, got {head_dim}")));
    }
    let width = x.last_dim();
    if width % head_dim != 0 || positions.len() != x.rows() {
        return Err(shape_err(
            "rope_apply",
            format!(
                "input {:?}, head_dim {head_dim}, {} positions",
                x.shape(),
                positions.len()
            ),
        ));
    }
    let mut out = x.data().to_vec();
    rope_rows(&mut out, width, head_dim, positions, theta, 1.0);
    Tensor::new(x.shape().to_vec(), out)
}

struct RopeOp {
    positions: Arc<Vec<usize>>,
    head_dim: usize,
    theta: f64,
}

impl<T: Element> CustomOp<T> for RopeOp {
    fn name(&self) -> &'static str {
        "rope"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut g = grad_out.data().to_vec();
        rope_rows(
            &mut g,
            grad_out.last_dim(),
            self.head_dim,
            &self.positions,
            self.theta,
            -1.0,
        );
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), g)?)])
    }
}

pub fn rope_tape<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    positions: Arc<Vec<usize>>,
    head_dim: usize,
    theta: f64,
) -> Result<Var> {
    let value = rope_apply(tape.value(x), &positions, head_dim, theta)?;
    tape.custom(
        &[x],
        value,
        Box::new(RopeOp {
            positions,
            head_dim,
            theta,
        }),
    )
}

// ---------------------------------------------------------------------------
// Core attention kernel

/// `rep` query heads sharing one kv head attend over `count` keys.
///
/// Keys/values are read at `keys[j * stride..j * stride + n]`. Writes the
/// attended values into `out` (`rep * n`) and the per-head log-partition
/// into `lse`.
#[allow(clippy::too_many_arguments)]
fn attend_group<T: Element>(
    q: &[T],
    keys: &[T],
    values: &[T],
    stride: usize,
    count: usize,
    n: usize,
    scale: T,
    out: &mut [T],
    lse: &mut [T],
    scores: &mut Vec<T>,
) {
    let rep = lse.len();
    scores.clear();
    scores.resize(rep * count, T::zero());
    for j in 0..count {
        let k = &keys[j * stride..j * stride + n];
        for r in 0..rep {
            scores[r * count + j] = dot(&q[r * n..(r + 1) * n], k) * scale;
        }
    }
    for r in 0..rep {
        let row = &mut scores[r * count..(r + 1) * count];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum = sum + *s;
        }
        let inv = T::one() / sum;
        for s in row.iter_mut() {
            *s = *s * inv;
        }
        lse[r] = max + sum.ln();
    }
    out.iter_mut().for_each(|o| *o = T::zero());
    for j in 0..count {
        let v = &values[j * stride..j * stride + n];
        for r in 0..rep {
            axpy(scores[r * count + j], v, &mut out[r * n..(r + 1) * n]);
        }
    }
}

/// Row layout of a flattened `[batch * len, ...]` activation.
#[derive(Clone, Debug)]
pub struct SeqLayout {
    pub batch: usize,
    pub len: usize,
    /// Rotary position of each row.
    pub positions: Arc<Vec<usize>>,
    /// Optional packing segment of each row; attention and recurrent state
    /// never cross a segment change.
    pub segments: Option<Arc<Vec<u32>>>,
}

impl SeqLayout {
    /// Plain causal layout with positions `0..len` in every stream.
    pub fn dense(batch: usize, len: usize) -> Self {
        let positions = (0..batch).flat_map(|_| 0..len).collect();
        Self {
            batch,
            len,
            positions: Arc::new(positions),
            segments: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }

    /// First row (within its stream) visible from row `i` of the stream.
    pub fn seq_starts(&self) -> Vec<usize> {
        let mut starts = vec![0; self.rows()];
        for b in 0..self.batch {
            let mut start = 0;
            for i in 0..self.len {
                let r = b * self.len + i;
                if let Some(seg) = &self.segments {
                    if i > 0 && seg[r] != seg[r - 1] {
                        start = i;
                    }
                }
                starts[r] = start;
            }
        }
        starts
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.len() != self.rows()
            || self.segments.as_ref().is_some_and(|s| s.len() != self.rows())
        {
            return Err(shape_err(
                "SeqLayout",
                format!("{}x{} layout with {} positions", self.batch, self.len, self.positions.len()),
            ));
        }
        Ok(())
    }
}

struct AttentionOp<T: Element> {
    cfg: AttentionConfig,
    batch: usize,
    len: usize,
    starts: Vec<usize>,
    lse: Vec<T>,
}

fn attention_forward_rows<T: Element>(
    cfg: &AttentionConfig,
    batch: usize,
    len: usize,
    starts: &[usize],
    q: &[T],
    k: &[T],
    v: &[T],
) -> (Vec<T>, Vec<T>) {
    let (h, g, n) = (cfg.n_heads, cfg.n_kv_heads, cfg.head_dim);
    let rep = cfg.group_size();
    let (qw, kw) = (h * n, g * n);
    let scale = T::one() / T::from_usize(n).sqrt();
    let mut out = vec![T::zero(); batch * len * qw];
    let mut lse = vec![T::zero(); batch * len * h];
    let mut scores = Vec::new();
    for b in 0..batch {
        for i in 0..len {
            let r = b * len + i;
            let first = b * len + starts[r];
            let count = i + 1 - starts[r];
            for gi in 0..g {
                let qs = &q[r * qw + gi * rep * n..r * qw + (gi + 1) * rep * n];
                attend_group(
                    qs,
                    &k[first * kw + gi * n..],
                    &v[first * kw + gi * n..],
                    kw,
                    count,
                    n,
                    scale,
                    &mut out[r * qw + gi * rep * n..r * qw + (gi + 1) * rep * n],
                    &mut lse[r * h + gi * rep..r * h + (gi + 1) * rep],
                    &mut scores,
                );
            }
        }
    }
    (out, lse)
}

impl<T: Element> CustomOp<T> for AttentionOp<T> {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let (o, go) = (output.data(), grad_out.data());
        let c = &self.cfg;
        let (h, n) = (c.n_heads, c.head_dim);
        let rep = c.group_size();
        let (qw, kw) = (h * n, c.n_kv_heads * n);
        let scale = T::one() / T::from_usize(n).sqrt();
        let mut dq = vec![T::zero(); q.len()];
        let mut dk = vec![T::zero(); k.len()];
        let mut dv = vec![T::zero(); v.len()];
        let mut p = Vec::new();
        for b in 0..self.batch {
            for i in 0..self.len {
                let r = b * self.len + i;
                let first = b * self.len + self.starts[r];
                let count = i + 1 - self.starts[r];
                for hi in 0..h {
                    let gi = hi / rep;
                    let qh = &q[r * qw + hi * n..r * qw + (hi + 1) * n];
                    let goh = &go[r * qw + hi * n..r * qw + (hi + 1) * n];
                    let oh = &o[r * qw + hi * n..r * qw + (hi + 1) * n];
                    let lse = self.lse[r * h + hi];
                    let delta = dot(goh, oh);
                    p.clear();
                    for j in 0..count {
                        let kr = (first + j) * kw + gi * n;
                        let s = dot(qh, &k[kr..kr + n]) * scale;
                        p.push((s - lse).exp());
                    }
                    let dqh_off = r * qw + hi * n;
                    for (j, &pj) in p.iter().enumerate() {
                        let kr = (first + j) * kw + gi * n;
                        let dp = dot(goh, &v[kr..kr + n]);
                        let ds = pj * (dp - delta) * scale;
                        axpy(pj, goh, &mut dv[kr..kr + n]);
                        axpy(ds, &k[kr..kr + n], &mut dq[dqh_off..dqh_off + n]);
                        axpy(ds, qh, &mut dk[kr..kr + n]);
                    }
                }
            }
        }
        let mk = |needed: bool, d: Vec<T>, like: &Tensor<T>| -> Result<Option<Tensor<T>>> {
            Ok(if needed {
                Some(Tensor::new(like.shape().to_vec(), d)?)
            } else {
                None
            })
        };
        Ok(vec![
            mk(needs[0], dq, inputs[0])?,
            mk(needs[1], dk, inputs[1])?,
            mk(needs[2], dv, inputs[2])?,
        ])
    }
}

/// Fused causal GQA over already-projected (and rotated) rows:
/// `q [rows, H*N]`, `k, v [rows, G*N]` -> `[rows, H*N]`.
pub fn attention_core_tape<T: Element>(
    tape: &mut Tape<T>,
    cfg: &AttentionConfig,
    layout: &SeqLayout,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    layout.validate()?;
    let rows = layout.rows();
    for (name, var, w) in [("q", q, cfg.q_dim()), ("k", k, cfg.kv_dim()), ("v", v, cfg.kv_dim())] {
        let s = tape.value(var).shape();
        if s != [rows, w] {
            return Err(shape_err("attention", format!("{name} is {s:?}, expected [{rows}, {w}]")));
        }
    }
    let starts = layout.seq_starts();
    let (out, lse) = attention_forward_rows(
        cfg,
        layout.batch,
        layout.len,
        &starts,
        tape.value(q).data(),
        tape.value(k).data(),
        tape.value(v).data(),
    );
    let value = Tensor::new([rows, cfg.q_dim()], out)?;
    tape.custom(
        &[q, k, v],
        value,
        Box::new(AttentionOp {
            cfg: *cfg,
            batch: layout.batch,
            len: layout.len,
            starts,
            lse,
        }),
    )
}

/// Full attention sub-layer on the tape: `x [rows, D] -> [rows, D]`.
pub fn attention_tape<T: Element>(
    tape: &mut Tape<T>,
    cfg: &AttentionConfig,
    w: &AttentionWeights<Var>,
    x: Var,
    layout: &SeqLayout,
) -> Result<Var> {
    let q = tape.matmul(x, w.wq)?;
    let k = tape.matmul(x, w.wk)?;
    let v = tape.matmul(x, w.wv)?;
    let q = rope_tape(tape, q, layout.positions.clone(), cfg.head_dim, cfg.rope_theta)?;
    let k = rope_tape(tape, k, layout.positions.clone(), cfg.head_dim, cfg.rope_theta)?;
    let att = attention_core_tape(tape, cfg, layout, q, k, v)?;
    tape.matmul(att, w.wo)
}

// ---------------------------------------------------------------------------
// KV cache and incremental decoding

/// Contiguous key/value buffers laid out `[batch, G, capacity, N]`.
#[derive(Clone, Debug)]
pub struct KvCache<T: Element = f32> {
    batch: usize,
    n_kv_heads: usize,
    head_dim: usize,
    capacity: usize,
    k: Vec<T>,
    v: Vec<T>,
    fill: Vec<usize>,
}

impl<T: Element> KvCache<T> {
    pub fn new(cfg: &AttentionConfig, batch: usize, capacity: usize) -> Self {
        let n = batch * cfg.n_kv_heads * capacity * cfg.head_dim;
        Self {
            batch,
            n_kv_heads: cfg.n_kv_heads,
            head_dim: cfg.head_dim,
            capacity,
            k: vec![T::zero(); n],
            v: vec![T::zero(); n],
            fill: vec![0; batch],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn fill(&self, stream: usize) -> usize {
        self.fill[stream]
    }

    /// Bytes of cached keys and values for one stream: `2 * G * N * t * size`.
    pub fn stream_bytes(&self, stream: usize) -> usize {
        2 * self.n_kv_heads * self.head_dim * self.fill[stream] * std::mem::size_of::<T>()
    }

    /// Bytes in use across all streams.
    pub fn used_bytes(&self) -> usize {
        (0..self.batch).map(|b| self.stream_bytes(b)).sum()
    }

    pub fn allocated_bytes(&self) -> usize {
        (self.k.len() + self.v.len()) * std::mem::size_of::<T>()
    }

    fn offset(&self, b: usize, g: usize, t: usize) -> usize {
        ((b * self.n_kv_heads + g) * self.capacity + t) * self.head_dim
    }

    /// Copies stream `src` (contents and fill) into stream `dst`.
    pub fn copy_stream(&mut self, src: usize, dst: usize) {
        if src == dst {
            return;
        }
        let per = self.n_kv_heads * self.capacity * self.head_dim;
        let fill = self.fill[src];
        for g in 0..self.n_kv_heads {
            let s = src * per + g * self.capacity * self.head_dim;
            let d = dst * per + g * self.capacity * self.head_dim;
            let len = fill * self.head_dim;
            self.k.copy_within(s..s + len, d);
            self.v.copy_within(s..s + len, d);
        }
        self.fill[dst] = fill;
    }

    pub fn reset_stream(&mut self, stream: usize) {
        self.fill[stream] = 0;
    }

    /// Marks `t` positions of every stream as filled with deterministic
    /// synthetic keys/values. Benchmark probes use this to time a decode step
    /// at a given cache length without paying for the prefix.
    pub fn fill_synthetic(&mut self, t: usize) -> Result<()> {
        if t > self.capacity {
            return Err(Error::Capacity {
                needed: t,
                capacity: self.capacity,
            });
        }
        for b in 0..self.batch {
            for g in 0..self.n_kv_heads {
                let o = self.offset(b, g, 0);
                for (i, (k, v)) in self.k[o..o + t * self.head_dim]
                    .iter_mut()
                    .zip(&mut self.v[o..o + t * self.head_dim])
                    .enumerate()
                {
                    let x = ((i * 7 + b * 13 + g * 3) % 17) as f64 / 17.0 - 0.5;
                    *k = T::of(x * 0.1);
                    *v = T::of(-x);
                }
            }
            self.fill[b] = t;
        }
        Ok(())
    }
}

/// Runs the attention sub-layer over `x [B, L, D]`. With a cache, the new
/// tokens are appended after each stream's current fill and attend to the
/// cached prefix; without one, a scratch cache of length `L` is used.
pub fn attn_forward<T: Element>(
    params: &AttentionParams<T>,
    x: &Tensor<T>,
    cache: Option<&mut KvCache<T>>,
) -> Result<Tensor<T>> {
    if x.rank() != 3 || x.shape()[2] != params.cfg.d_model {
        return Err(shape_err(
            "attn_forward",
            format!("input {:?}, d_model {}", x.shape(), params.cfg.d_model),
        ));
    }
    let (batch, len) = (x.shape()[0], x.shape()[1]);
    let mut scratch;
    let cache = match cache {
        Some(c) => c,
        None => {
            scratch = KvCache::new(&params.cfg, batch, len);
            &mut scratch
        }
    };
    let streams: Vec<usize> = (0..batch).collect();
    attn_forward_streams(params, x, cache, &streams)
}

/// Like [`attn_forward`], but row `i` of `x` belongs to cache stream
/// `streams[i]`.
pub fn attn_forward_streams<T: Element>(
    params: &AttentionParams<T>,
    x: &Tensor<T>,
    cache: &mut KvCache<T>,
    streams: &[usize],
) -> Result<Tensor<T>> {
    let cfg = &params.cfg;
    let (batch, len, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if streams.len() != batch || streams.iter().any(|&s| s >= cache.batch) {
        return Err(shape_err(
            "attn_forward",
            format!("{batch} input streams vs cache batch {}", cache.batch),
        ));
    }
    for &s in streams {
        if cache.fill[s] + len > cache.capacity {
            return Err(Error::Capacity {
                needed: cache.fill[s] + len,
                capacity: cache.capacity,
            });
        }
    }
    let x2 = x.reshape([batch * len, d])?;
    let positions: Vec<usize> = (0..batch * len)
        .map(|r| cache.fill[streams[r / len]] + r % len)
        .collect();
    let q = rope_apply(&ops::linear(&x2, &params.w.wq)?, &positions, cfg.head_dim, cfg.rope_theta)?;
    let k = rope_apply(&ops::linear(&x2, &params.w.wk)?, &positions, cfg.head_dim, cfg.rope_theta)?;
    let v = ops::linear(&x2, &params.w.wv)?;

    let (g, n, rep) = (cfg.n_kv_heads, cfg.head_dim, cfg.group_size());
    let (qw, kw) = (cfg.q_dim(), cfg.kv_dim());
    let scale = T::one() / T::from_usize(n).sqrt();
    let mut att = vec![T::zero(); batch * len * qw];
    let mut lse = vec![T::zero(); rep];
    let mut scores = Vec::new();
    for (bi, &s) in streams.iter().enumerate() {
        for i in 0..len {
            let r = bi * len + i;
            let t = cache.fill[s];
            for gi in 0..g {
                let o = cache.offset(s, gi, t);
                cache.k[o..o + n].copy_from_slice(&k.data()[r * kw + gi * n..r * kw + (gi + 1) * n]);
                cache.v[o..o + n].copy_from_slice(&v.data()[r * kw + gi * n..r * kw + (gi + 1) * n]);
            }
            cache.fill[s] = t + 1;
            for gi in 0..g {
                let base = cache.offset(s, gi, 0);
                let qs = &q.data()[r * qw + gi * rep * n..r * qw + (gi + 1) * rep * n];
                attend_group(
                    qs,
                    &cache.k[base..],
                    &cache.v[base..],
                    n,
                    t + 1,
                    n,
                    scale,
                    &mut att[r * qw + gi * rep * n..r * qw + (gi + 1) * rep * n],
                    &mut lse,
                    &mut scores,
                );
            }
        }
    }
    let att = Tensor::new([batch * len, qw], att)?;
    ops::linear(&att, &params.w.wo)?.reshape([batch, len, d])
}

/// One decode step: `x_t [B, 1, D]`, appending one position per stream.
pub fn attn_decode_step<T: Element>(
    params: &AttentionParams<T>,
    x_t: &Tensor<T>,
    cache: &mut KvCache<T>,
) -> Result<Tensor<T>> {
    if x_t.rank() != 3 || x_t.shape()[1] != 1 {
        return Err(shape_err(
            "attn_decode_step",
            format!("expected [B, 1, D], got {:?}", x_t.shape()),
        ));
    }
    attn_forward(params, x_t, Some(cache))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn cfg(h: usize, g: usize, n: usize, d: usize) -> AttentionConfig {
        AttentionConfig {
            d_model: d,
            n_heads: h,
            n_kv_heads: g,
            head_dim: n,
            rope_theta: 10000.0,
        }
    }

    /// Independent multi-head attention in f64 with explicit per-head loops.
    fn mha_oracle(p: &AttentionParams<f32>, x: &Tensor<f32>) -> Vec<f64> {
        let c = p.cfg;
        let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let f = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let (wq, wk, wv, wo) = (f(&p.w.wq), f(&p.w.wk), f(&p.w.wv), f(&p.w.wo));
        let xs = f(x);
        let proj = |w: &[f64], cols: usize, row: &[f64]| -> Vec<f64> {
            (0..cols).map(|j| (0..row.len()).map(|i| row[i] * w[i * cols + j]).sum()).collect()
        };
        let rot = |v: &mut [f64], pos: usize| {
            for head in v.chunks_mut(c.head_dim) {
                for i in 0..c.head_dim / 2 {
                    let ang = pos as f64 * c.rope_theta.powf(-(2.0 * i as f64) / c.head_dim as f64);
                    let (a, bb) = (head[2 * i], head[2 * i + 1]);
                    head[2 * i] = a * ang.cos() - bb * ang.sin();
                    head[2 * i + 1] = a * ang.sin() + bb * ang.cos();
                }
            }
        };
        let mut out = vec![0.0; b * l * d];
        for bi in 0..b {
            let rows: Vec<&[f64]> = (0..l).map(|t| &xs[(bi * l + t) * d..(bi * l + t + 1) * d]).collect();
            let mut qs: Vec<Vec<f64>> = rows.iter().map(|r| proj(&wq, c.q_dim(), r)).collect();
            let mut ks: Vec<Vec<f64>> = rows.iter().map(|r| proj(&wk, c.kv_dim(), r)).collect();
            let vs: Vec<Vec<f64>> = rows.iter().map(|r| proj(&wv, c.kv_dim(), r)).collect();
            for t in 0..l {
                rot(&mut qs[t], t);
                rot(&mut ks[t], t);
            }
            for t in 0..l {
                let mut concat = vec![0.0; c.q_dim()];
                for h in 0..c.n_heads {
                    let g = h / c.group_size();
                    let n = c.head_dim;
                    let s: Vec<f64> = (0..=t)
                        .map(|j| {
                            (0..n).map(|e| qs[t][h * n + e] * ks[j][g * n + e]).sum::<f64>()
                                / (n as f64).sqrt()
                        })
                        .collect();
                    let m = s.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                    for (j, sj) in s.iter().enumerate() {
                        let pj = (sj - m).exp() / z;
                        for e in 0..n {
                            concat[h * n + e] += pj * vs[j][g * n + e];
                        }
                    }
                }
                let o = proj(&wo, d, &concat);
                out[(bi * l + t) * d..(bi * l + t + 1) * d].copy_from_slice(&o);
            }
        }
        out
    }

    #[test]
    fn rope_position_zero_is_identity_and_norm_preserving() {
        let mut rng = SeededRng::new(3, 0);
        let x = Tensor::<f32>::randn([4, 8], 1.0, &mut rng);
        let same = rope_apply(&x, &[0, 0, 0, 0], 4, 10000.0).unwrap();
        assert_eq!(same, x);
        let rot = rope_apply(&x, &[1, 5, 17, 300], 4, 10000.0).unwrap();
        for (a, b) in x.data().chunks(2).zip(rot.data().chunks(2)) {
            let (na, nb) = (a[0].hypot(a[1]), b[0].hypot(b[1]));
            assert!((na - nb).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_first_pair_at_position_one() {
        let x = Tensor::<f64>::new([1, 2], vec![1.0, 0.0]).unwrap();
        let r = rope_apply(&x, &[1], 2, 10000.0).unwrap();
        assert!((r.data()[0] - 1f64.cos()).abs() < 1e-15);
        assert!((r.data()[1] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        let x = Tensor::<f32>::zeros([1, 3]);
        assert!(rope_apply(&x, &[0], 3, 10000.0).is_err());
    }

    #[test]
    fn single_token_output_is_projected_value() {
        let mut rng = SeededRng::new(4, 0);
        let p = AttentionParams::<f64>::init(cfg(4, 2, 4, 8), &mut rng).unwrap();
        let x = Tensor::<f64>::randn([2, 1, 8], 1.0, &mut rng);
        let y = attn_forward(&p, &x, None).unwrap();
        let x2 = x.reshape([2, 8]).unwrap();
        let v = ops::linear(&x2, &p.w.wv).unwrap();
        // repeat kv heads to query heads, then project
        let c = p.cfg;
        let rep: Vec<f64> = (0..2)
            .flat_map(|r| {
                let v = &v;
                (0..c.n_heads).flat_map(move |h| {
                    let g = h / c.group_size();
                    v.row(r)[g * 4..(g + 1) * 4].to_vec()
                })
            })
            .collect();
        let want = ops::linear(&Tensor::new([2, 16], rep).unwrap(), &p.w.wo).unwrap();
        assert!(y.reshape([2, 8]).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn matches_mha_oracle() {
        for (h, g) in [(4, 4), (4, 2), (4, 1)] {
            let mut rng = SeededRng::new(10 + g as u64, 0);
            let p = AttentionParams::<f32>::init(cfg(h, g, 8, 16), &mut rng).unwrap();
            let x = Tensor::<f32>::randn([2, 6, 16], 1.0, &mut rng);
            let y = attn_forward(&p, &x, None).unwrap();
            let want = mha_oracle(&p, &x);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-5, "h={h} g={g}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gqa_equals_block_replicated_mha_exactly() {
        let mut rng = SeededRng::new(21, 0);
        let c = cfg(4, 2, 4, 8);
        let p = AttentionParams::<f32>::init(c, &mut rng).unwrap();
        let rep_cols = |w: &Tensor<f32>| -> Tensor<f32> {
            let d = w.shape()[0];
            Tensor::from_fn([d, c.q_dim()], |i| {
                let (row, col) = (i / c.q_dim(), i % c.q_dim());
                let (h, e) = (col / c.head_dim, col % c.head_dim);
                w.data()[row * c.kv_dim() + (h / c.group_size()) * c.head_dim + e]
            })
        };
        let mha = AttentionParams {
            cfg: cfg(4, 4, 4, 8),
            w: AttentionWeights {
                wq: p.w.wq.clone(),
                wk: rep_cols(&p.w.wk),
                wv: rep_cols(&p.w.wv),
                wo: p.w.wo.clone(),
            },
        };
        let x = Tensor::<f32>::randn([2, 5, 8], 1.0, &mut rng);
        assert_eq!(attn_forward(&p, &x, None).unwrap(), attn_forward(&mha, &x, None).unwrap());
    }

    #[test]
    fn causality_is_bit_exact() {
        let mut rng = SeededRng::new(5, 0);
        let p = AttentionParams::<f32>::init(cfg(4, 2, 4, 8), &mut rng).unwrap();
        let x = Tensor::<f32>::randn([1, 7, 8], 1.0, &mut rng);
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[4 * 8..5 * 8] {
            *v += 1.0;
        }
        let (a, b) = (attn_forward(&p, &x, None).unwrap(), attn_forward(&p, &x2, None).unwrap());
        assert_eq!(&a.data()[..4 * 8], &b.data()[..4 * 8]);
        assert_ne!(&a.data()[4 * 8..5 * 8], &b.data()[4 * 8..5 * 8]);
    }

    #[test]
    fn prefill_then_decode_matches_full_forward() {
        let mut rng = SeededRng::new(6, 0);
        let p = AttentionParams::<f32>::init(cfg(4, 2, 8, 16), &mut rng).unwrap();
        let x = Tensor::<f32>::randn([2, 12, 16], 1.0, &mut rng);
        let full = attn_forward(&p, &x, None).unwrap();
        let mut cache = KvCache::new(&p.cfg, 2, 12);
        let slice = |lo: usize, hi: usize| -> Tensor<f32> {
            let mut v = Vec::new();
            for b in 0..2 {
                v.extend_from_slice(&x.data()[(b * 12 + lo) * 16..(b * 12 + hi) * 16]);
            }
            Tensor::new([2, hi - lo, 16], v).unwrap()
        };
        attn_forward(&p, &slice(0, 8), Some(&mut cache)).unwrap();
        for t in 8..12 {
            let y = attn_decode_step(&p, &slice(t, t + 1), &mut cache).unwrap();
            for b in 0..2 {
                let want = &full.data()[(b * 12 + t) * 16..(b * 12 + t + 1) * 16];
                for (a, w) in y.data()[b * 16..(b + 1) * 16].iter().zip(want) {
                    assert!((a - w).abs() < 1e-5);
                }
            }
            assert_eq!(cache.fill(0), t + 1);
        }
        assert_eq!(cache.stream_bytes(1), 2 * 2 * 8 * 12 * 4);
    }

    #[test]
    fn decode_at_empty_cache_equals_single_token_forward() {
        let mut rng = SeededRng::new(7, 0);
        let p = AttentionParams::<f32>::init(cfg(2, 1, 4, 8), &mut rng).unwrap();
        let x = Tensor::<f32>::randn([3, 1, 8], 1.0, &mut rng);
        let mut cache = KvCache::new(&p.cfg, 3, 4);
        assert_eq!(
            attn_decode_step(&p, &x, &mut cache).unwrap(),
            attn_forward(&p, &x, None).unwrap()
        );
    }

    #[test]
    fn cache_overflow_is_capacity_error() {
        let mut rng = SeededRng::new(8, 0);
        let p = AttentionParams::<f32>::init(cfg(2, 1, 4, 8), &mut rng).unwrap();
        let mut cache = KvCache::new(&p.cfg, 1, 2);
        let x = Tensor::<f32>::randn([1, 3, 8], 1.0, &mut rng);
        assert!(matches!(
            attn_forward(&p, &x, Some(&mut cache)),
            Err(Error::Capacity { needed: 3, capacity: 2 })
        ));
    }

    #[test]
    fn tape_forward_matches_inference_and_gradients_check() {
        let mut rng = SeededRng::new(9, 0);
        let c = cfg(4, 2, 4, 8);
        let p = AttentionParams::<f64>::init(c, &mut rng).unwrap();
        let x = Tensor::<f64>::randn([2, 5, 8], 1.0, &mut rng);
        let probe = Tensor::<f64>::randn([10, 8], 1.0, &mut rng);
        let layout = SeqLayout::dense(2, 5);
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let w = AttentionWeights { wq: v[0], wk: v[1], wv: v[2], wo: v[3] };
            let y = attention_tape(t, &c, &w, v[4], &layout)?;
            t.dot_const(y, probe.clone())
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = p
            .w
            .fields()
            .into_iter()
            .chain([&x.reshape([10, 8]).unwrap()])
            .enumerate()
            .map(|(i, t)| tape.param(i, t.clone()))
            .collect();
        let w = AttentionWeights { wq: vars[0], wk: vars[1], wv: vars[2], wo: vars[3] };
        let y = attention_tape(&mut tape, &c, &w, vars[4], &layout).unwrap();
        let inf = attn_forward(&p, &x, None).unwrap();
        assert!(tape.value(y).max_abs_diff(&inf.reshape([10, 8]).unwrap()).unwrap() < 1e-12);

        let mut params: Vec<Tensor<f64>> = p.w.fields().into_iter().cloned().collect();
        params.push(x.reshape([10, 8]).unwrap());
        let r = grad_check(f, &params, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn segments_block_attention_across_boundaries() {
        let mut rng = SeededRng::new(12, 0);
        let c = cfg(2, 1, 4, 8);
        let p = AttentionParams::<f64>::init(c, &mut rng).unwrap();
        let a = Tensor::<f64>::randn([3, 8], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([4, 8], 1.0, &mut rng);
        let packed = Tensor::new([7, 8], [a.data(), b.data()].concat()).unwrap();
        let layout = SeqLayout {
            batch: 1,
            len: 7,
            positions: Arc::new(vec![0, 1, 2, 0, 1, 2, 3]),
            segments: Some(Arc::new(vec![0, 0, 0, 1, 1, 1, 1])),
        };
        let mut tape = Tape::new();
        let w = p.w.try_map(|_, t| Ok::<_, Error>(tape.constant(t.clone()))).unwrap();
        let xv = tape.constant(packed);
        let y = attention_tape(&mut tape, &c, &w, xv, &layout).unwrap();
        let alone = attn_forward(&p, &b.reshape([1, 4, 8]).unwrap(), None).unwrap();
        let got = &tape.value(y).data()[3 * 8..];
        for (g, w) in got.iter().zip(alone.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}
