//! Group-structured selective state-space layer: discretization, sequential
//! and chunked scans, and constant-state decoding.
//!
//! Channel `p` of the inner width `D_in = H * N` belongs to state group
//! `g(p) = p / S`; `B_t` and `C_t` are produced per group (`D_in / S` groups
//! of `S` entries each, i.e. reshaped `[D_in / S, S]`).

use serde::{Deserialize, Serialize};

use crate::attention::SeqLayout;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::ops::{self, softplus_scalar};
use crate::tensor::tape::CustomOp;
use crate::tensor::{Element, SeededRng, Tape, Tensor, Var};

/// Rule used to discretize `B`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    /// `B̄ = Δ·B`
    #[default]
    Euler,
    /// `B̄ = (exp(ΔA) - 1) / A · B`
    Zoh,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MambaConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    pub discretization: Discretization,
    pub skip: bool,
    /// Chunk length used by the inference-time scan.
    pub scan_chunk: usize,
}

impl MambaConfig {
    pub fn d_inner(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Number of state groups `D_in / S`.
    pub fn n_groups(&self) -> usize {
        self.d_inner() / self.d_state
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_state == 0 || self.dt_rank == 0 || self.n_kv_heads == 0 || self.scan_chunk == 0 {
            return Err(invalid("mamba extents must be positive"));
        }
        if self.d_inner() % self.d_state != 0 {
            return Err(invalid(format!(
                "inner width {} is not a multiple of the state size {}",
                self.d_inner(),
                self.d_state
            )));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(invalid("n_heads must be a multiple of n_kv_heads"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MambaWeights<W> {
    /// `[D, D_in]`, reuses `W^Q`
    pub wc: W,
    /// `[D, G*N]`, reuses `W^K`
    pub wb: W,
    /// `[G*N, D_in]` expansion of B
    pub eb: W,
    /// `[D, G*N]`, reuses `W^V`
    pub wx: W,
    /// `[G*N, D_in]` expansion of x
    pub ex: W,
    /// `[D_in, D]`, reuses `W^O`
    pub wout: W,
    /// `[D_in, S]`, `A = -exp(a_log)`
    pub a_log: W,
    /// `[D_in, R]`
    pub dt_down: W,
    /// `[R, D_in]`
    pub dt_up: W,
    /// `[D_in]`
    pub dt_bias: W,
    /// `[D_in]`, present only when the skip path is enabled
    pub d_skip: Option<W>,
}

impl<W> MambaWeights<W> {
    pub fn named(&self) -> Vec<(&'static str, &W)> {
        let mut v = vec![
            ("wc", &self.wc),
            ("wb", &self.wb),
            ("eb", &self.eb),
            ("wx", &self.wx),
            ("ex", &self.ex),
            ("wout", &self.wout),
            ("a_log", &self.a_log),
            ("dt_down", &self.dt_down),
            ("dt_up", &self.dt_up),
            ("dt_bias", &self.dt_bias),
        ];
        if let Some(d) = &self.d_skip {
            v.push(("d_skip", d));
        }
        v
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut W)> {
        let mut v = vec![
            ("wc", &mut self.wc),
            ("wb", &mut self.wb),
            ("eb", &mut self.eb),
            ("wx", &mut self.wx),
            ("ex", &mut self.ex),
            ("wout", &mut self.wout),
            ("a_log", &mut self.a_log),
            ("dt_down", &mut self.dt_down),
            ("dt_up", &mut self.dt_up),
            ("dt_bias", &mut self.dt_bias),
        ];
        if let Some(d) = &mut self.d_skip {
            v.push(("d_skip", d));
        }
        v
    }

    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(&'static str, &W) -> Result<U, E>,
    ) -> Result<MambaWeights<U>, E> {
        Ok(MambaWeights {
            wc: f("wc", &self.wc)?,
            wb: f("wb", &self.wb)?,
            eb: f("eb", &self.eb)?,
            wx: f("wx", &self.wx)?,
            ex: f("ex", &self.ex)?,
            wout: f("wout", &self.wout)?,
            a_log: f("a_log", &self.a_log)?,
            dt_down: f("dt_down", &self.dt_down)?,
            dt_up: f("dt_up", &self.dt_up)?,
            dt_bias: f("dt_bias", &self.dt_bias)?,
            d_skip: match &self.d_skip {
                Some(d) => Some(f("d_skip", d)?),
                None => None,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MambaParams<T: Element = f32> {
    pub cfg: MambaConfig,
    pub w: MambaWeights<Tensor<T>>,
}

/// `[G*N, H*N]` 0/1 map copying kv head `h / (H/G)` into query head `h`,
/// i.e. `x @ E == repeat_kv(x)`.
pub fn repeat_kv_map<T: Element>(n_heads: usize, n_kv_heads: usize, head_dim: usize) -> Tensor<T> {
    let (rows, cols) = (n_kv_heads * head_dim, n_heads * head_dim);
    let rep = n_heads / n_kv_heads;
    Tensor::from_fn([rows, cols], |i| {
        let (r, c) = (i / cols, i % cols);
        let (h, e) = (c / head_dim, c % head_dim);
        if r == (h / rep) * head_dim + e {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Inverse of softplus for positive `y`.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl<T: Element> MambaParams<T> {
    /// Fresh parameters for the new (non-reused) pieces: `A_log[p, s] =
    /// ln(s + 1)`, Δ bias so `softplus(bias)` is uniform in `[0.001, 0.1]`,
    /// block-replication expansions, and the given projections.
    pub fn with_projections(
        cfg: MambaConfig,
        wc: Tensor<T>,
        wb: Tensor<T>,
        wx: Tensor<T>,
        wout: Tensor<T>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (din, s, r) = (cfg.d_inner(), cfg.d_state, cfg.dt_rank);
        let a_log = Tensor::from_fn([din, s], |i| T::of(((i % s) as f64 + 1.0).ln()));
        let dt_bias = Tensor::from_fn([din], |_| {
            T::of(softplus_inv(0.001 + (0.1 - 0.001) * rng.uniform()))
        });
        let p = Self {
            cfg,
            w: MambaWeights {
                wc,
                wb,
                eb: repeat_kv_map(cfg.n_heads, cfg.n_kv_heads, cfg.head_dim),
                wx,
                ex: repeat_kv_map(cfg.n_heads, cfg.n_kv_heads, cfg.head_dim),
                wout,
                a_log,
                dt_down: Tensor::randn([din, r], 1.0 / (din as f64).sqrt(), rng),
                dt_up: Tensor::randn([r, din], 0.1 / (r as f64).sqrt(), rng),
                dt_bias,
                d_skip: cfg.skip.then(|| Tensor::full([din], T::one())),
            },
        };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn init(cfg: MambaConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let (d, din, kv) = (cfg.d_model, cfg.d_inner(), cfg.kv_dim());
        let std_in = 1.0 / (d as f64).sqrt();
        let wc = Tensor::randn([d, din], std_in, rng);
        let wb = Tensor::randn([d, kv], std_in, rng);
        let wx = Tensor::randn([d, kv], std_in, rng);
        let wout = Tensor::randn([din, d], 1.0 / (din as f64).sqrt(), rng);
        Self::with_projections(cfg, wc, wb, wx, wout, rng)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let c = &self.cfg;
        c.validate()?;
        let (d, din, kv, s, r) = (c.d_model, c.d_inner(), c.kv_dim(), c.d_state, c.dt_rank);
        let want: Vec<(&str, Vec<usize>)> = vec![
            ("wc", vec![d, din]),
            ("wb", vec![d, kv]),
            ("eb", vec![kv, din]),
            ("wx", vec![d, kv]),
            ("ex", vec![kv, din]),
            ("wout", vec![din, d]),
            ("a_log", vec![din, s]),
            ("dt_down", vec![din, r]),
            ("dt_up", vec![r, din]),
            ("dt_bias", vec![din]),
            ("d_skip", vec![din]),
        ];
        if self.w.d_skip.is_some() != c.skip {
            return Err(invalid("d_skip presence disagrees with the skip flag"));
        }
        for (name, t) in self.w.named() {
            let w = &want.iter().find(|(n, _)| *n == name).expect("known name").1;
            if t.shape() != w.as_slice() {
                return Err(shape_err(
                    "mamba params",
                    format!("{name} is {:?}, expected {w:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    /// `A = -exp(A_log)`, strictly negative.
    pub fn a(&self) -> Tensor<T> {
        self.w.a_log.map(|v| -v.exp())
    }
}

// ---------------------------------------------------------------------------
// Discretization

/// Per-token discretized coefficients, each `[D_in, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discretized<T: Element> {
    pub a_bar: Tensor<T>,
    pub b_bar: Tensor<T>,
    pub c_bar: Tensor<T>,
}

/// Discretizes one time step: `A [D_in, S]`, grouped `B_t, C_t [D_in]`
/// (read as `[D_in / S, S]`), `Δ_t [D_in]`.
pub fn disc<T: Element>(
    a: &Tensor<T>,
    b_t: &Tensor<T>,
    c_t: &Tensor<T>,
    delta_t: &Tensor<T>,
    rule: Discretization,
) -> Result<Discretized<T>> {
    if a.rank() != 2 {
        return Err(shape_err("disc", format!("A is {:?}", a.shape())));
    }
    let (din, s) = (a.shape()[0], a.shape()[1]);
    if b_t.numel() != din || c_t.numel() != din || delta_t.numel() != din || din % s != 0 {
        return Err(shape_err(
            "disc",
            format!(
                "A {:?}, B {:?}, C {:?}, delta {:?}",
                a.shape(),
                b_t.shape(),
                c_t.shape(),
                delta_t.shape()
            ),
        ));
    }
    if let Some(d) = delta_t.data().iter().find(|&&d| !(d >= T::zero())) {
        return Err(invalid(format!("discretization step must be non-negative, got {d}")));
    }
    let mut a_bar = vec![T::zero(); din * s];
    let mut b_bar = vec![T::zero(); din * s];
    let mut c_bar = vec![T::zero(); din * s];
    for p in 0..din {
        let g = p / s;
        let dt = delta_t.data()[p];
        for j in 0..s {
            let av = a.data()[p * s + j];
            let ab = (dt * av).exp();
            let bv = b_t.data()[g * s + j];
            a_bar[p * s + j] = ab;
            b_bar[p * s + j] = match rule {
                Discretization::Euler => dt * bv,
                Discretization::Zoh => (ab - T::one()) / av * bv,
            };
            c_bar[p * s + j] = c_t.data()[g * s + j];
        }
    }
    Ok(Discretized {
        a_bar: Tensor::new([din, s], a_bar)?,
        b_bar: Tensor::new([din, s], b_bar)?,
        c_bar: Tensor::new([din, s], c_bar)?,
    })
}

// ---------------------------------------------------------------------------
// Scans

/// Recurrent state `[batch, D_in, S]`; its size never depends on position.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmState<T: Element = f32> {
    pub batch: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub h: Vec<T>,
}

impl<T: Element> SsmState<T> {
    pub fn zeros(batch: usize, d_inner: usize, d_state: usize) -> Self {
        Self {
            batch,
            d_inner,
            d_state,
            h: vec![T::zero(); batch * d_inner * d_state],
        }
    }

    pub fn bytes(&self) -> usize {
        self.h.len() * std::mem::size_of::<T>()
    }

    /// Bytes held for one stream: `D_in * S * size`.
    pub fn stream_bytes(&self) -> usize {
        self.d_inner * self.d_state * std::mem::size_of::<T>()
    }

    pub fn stream(&self, b: usize) -> &[T] {
        let n = self.d_inner * self.d_state;
        &self.h[b * n..(b + 1) * n]
    }

    pub fn stream_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.d_inner * self.d_state;
        &mut self.h[b * n..(b + 1) * n]
    }

    pub fn copy_stream(&mut self, src: usize, dst: usize) {
        let n = self.d_inner * self.d_state;
        self.h.copy_within(src * n..(src + 1) * n, dst * n);
    }

    pub fn reset_stream(&mut self, b: usize) {
        self.stream_mut(b).iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn as_tensor(&self) -> Tensor<T> {
        Tensor::new([self.batch, self.d_inner, self.d_state], self.h.clone()).expect("consistent")
    }
}

/// Borrowed scan operands, all row-major `[batch * len, D_in]` except
/// `a [D_in, S]` and `d_skip [D_in]`.
#[derive(Clone, Copy)]
pub struct ScanArgs<'a, T> {
    pub batch: usize,
    pub len: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub x: &'a [T],
    pub delta: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub a: &'a [T],
    pub d_skip: Option<&'a [T]>,
    pub rule: Discretization,
    /// `resets[r]`: the state is zeroed before row `r` is consumed.
    pub resets: Option<&'a [bool]>,
}

impl<T: Element> ScanArgs<'_, T> {
    fn check(&self) -> Result<()> {
        let rows = self.batch * self.len;
        let n = rows * self.d_inner;
        if self.x.len() != n
            || self.delta.len() != n
            || self.b.len() != n
            || self.c.len() != n
            || self.a.len() != self.d_inner * self.d_state
            || self.d_skip.is_some_and(|d| d.len() != self.d_inner)
            || self.resets.is_some_and(|r| r.len() != rows)
            || self.d_state == 0
            || self.d_inner % self.d_state != 0
        {
            return Err(shape_err(
                "scan",
                format!(
                    "batch {} len {} d_inner {} d_state {}",
                    self.batch, self.len, self.d_inner, self.d_state
                ),
            ));
        }
        if self.delta.iter().any(|&d| !(d >= T::zero())) {
            return Err(invalid("discretization step must be non-negative"));
        }
        Ok(())
    }

    fn reset_at(&self, r: usize) -> bool {
        self.resets.is_some_and(|v| v[r])
    }

    #[inline]
    fn coeffs(&self, r: usize, p: usize, j: usize) -> (T, T) {
        let s = self.d_state;
        let dt = self.delta[r * self.d_inner + p];
        let av = self.a[p * s + j];
        let ab = (dt * av).exp();
        let bv = self.b[r * self.d_inner + (p / s) * s + j];
        let bb = match self.rule {
            Discretization::Euler => dt * bv,
            Discretization::Zoh => (ab - T::one()) / av * bv,
        };
        (ab, bb)
    }

    /// Advances the state of one stream through rows `lo..hi`, writing outputs.
    /// `record`, when given, receives the post-update state of every row.
    fn run_rows(
        &self,
        lo: usize,
        hi: usize,
        h: &mut [T],
        y: &mut [T],
        mut record: Option<&mut [T]>,
    ) {
        let (din, s) = (self.d_inner, self.d_state);
        for r in lo..hi {
            if self.reset_at(r) {
                h.iter_mut().for_each(|v| *v = T::zero());
            }
            for p in 0..din {
                let g = (p / s) * s;
                let dt = self.delta[r * din + p];
                let xv = self.x[r * din + p];
                let hp = &mut h[p * s..(p + 1) * s];
                let arow = &self.a[p * s..(p + 1) * s];
                let brow = &self.b[r * din + g..r * din + g + s];
                let crow = &self.c[r * din + g..r * din + g + s];
                let mut acc = T::zero();
                match self.rule {
                    Discretization::Euler => {
                        let dx = dt * xv;
                        for j in 0..s {
                            let ab = (dt * arow[j]).exp();
                            hp[j] = ab * hp[j] + brow[j] * dx;
                            acc = acc + crow[j] * hp[j];
                        }
                    }
                    Discretization::Zoh => {
                        for j in 0..s {
                            let ab = (dt * arow[j]).exp();
                            let bb = (ab - T::one()) / arow[j] * brow[j];
                            hp[j] = ab * hp[j] + bb * xv;
                            acc = acc + crow[j] * hp[j];
                        }
                    }
                }
                if let Some(d) = self.d_skip {
                    acc = acc + d[p] * xv;
                }
                y[r * din + p] = acc;
            }
            if let Some(rec) = record.as_deref_mut() {
                rec[r * din * s..(r + 1) * din * s].copy_from_slice(h);
            }
        }
    }
}

fn check_h0<T: Element>(args: &ScanArgs<'_, T>, h0: Option<&SsmState<T>>) -> Result<()> {
    if let Some(h) = h0 {
        if h.batch != args.batch || h.d_inner != args.d_inner || h.d_state != args.d_state {
            return Err(shape_err(
                "scan",
                format!(
                    "initial state [{}, {}, {}] vs [{}, {}, {}]",
                    h.batch, h.d_inner, h.d_state, args.batch, args.d_inner, args.d_state
                ),
            ));
        }
    }
    Ok(())
}

fn finish_scan<T: Element>(
    args: &ScanArgs<'_, T>,
    y: Vec<T>,
    state: SsmState<T>,
) -> Result<(Tensor<T>, SsmState<T>)> {
    let y = Tensor::new([args.batch, args.len, args.d_inner], y)?.ensure_finite("scan")?;
    if state.h.iter().any(|v| !v.is_finite()) {
        return Err(crate::Error::NonFinite("scan state".into()));
    }
    Ok((y, state))
}

/// Reference recurrence: `h_t = Ā_t h_{t-1} + B̄_t x_t`,
/// `y_t[p] = Σ_s C̄_t[p, s] h_t[p, s] (+ D[p] x_t[p])`.
pub fn scan_sequential<T: Element>(
    args: &ScanArgs<'_, T>,
    h0: Option<&SsmState<T>>,
) -> Result<(Tensor<T>, SsmState<T>)> {
    args.check()?;
    check_h0(args, h0)?;
    let mut state = h0
        .cloned()
        .unwrap_or_else(|| SsmState::zeros(args.batch, args.d_inner, args.d_state));
    let mut y = vec![T::zero(); args.batch * args.len * args.d_inner];
    for b in 0..args.batch {
        let rows = (b * args.len, (b + 1) * args.len);
        args.run_rows(rows.0, rows.1, state.stream_mut(b), &mut y, None);
    }
    finish_scan(args, y, state)
}

/// Same recurrence, evaluated chunk by chunk: every chunk is first scanned
/// from a zero state, the carried-in states are then propagated across
/// chunk boundaries, and finally each chunk's outputs are corrected by the
/// decayed contribution of its carried-in state.
pub fn scan_chunked<T: Element>(
    args: &ScanArgs<'_, T>,
    h0: Option<&SsmState<T>>,
    chunk: usize,
) -> Result<(Tensor<T>, SsmState<T>)> {
    if chunk == 0 {
        return Err(invalid("chunk length must be at least 1"));
    }
    args.check()?;
    check_h0(args, h0)?;
    let (din, s, len) = (args.d_inner, args.d_state, args.len);
    let width = din * s;
    let n_chunks = len.div_ceil(chunk);
    let mut y = vec![T::zero(); args.batch * len * din];
    let mut state = SsmState::zeros(args.batch, din, s);

    for b in 0..args.batch {
        let base = b * len;
        // local scans from zero state; remember each chunk's end state and
        // the product of its decays (zeroed by a reset inside the chunk)
        let mut local_end = vec![T::zero(); n_chunks * width];
        let mut decay_end = vec![T::one(); n_chunks * width];
        for ci in 0..n_chunks {
            let (lo, hi) = (base + ci * chunk, base + ((ci + 1) * chunk).min(len));
            let h = &mut local_end[ci * width..(ci + 1) * width];
            args.run_rows(lo, hi, h, &mut y, None);
            let dec = &mut decay_end[ci * width..(ci + 1) * width];
            for r in lo..hi {
                if args.reset_at(r) {
                    dec.iter_mut().for_each(|v| *v = T::zero());
                }
                for p in 0..din {
                    for j in 0..s {
                        dec[p * s + j] = dec[p * s + j] * args.coeffs(r, p, j).0;
                    }
                }
            }
        }
        // carried-in state of every chunk
        let mut carry_in = vec![T::zero(); n_chunks * width];
        let mut carry: Vec<T> = match h0 {
            Some(h) => h.stream(b).to_vec(),
            None => vec![T::zero(); width],
        };
        let mut carry_is_zero = h0.is_none();
        for ci in 0..n_chunks {
            carry_in[ci * width..(ci + 1) * width].copy_from_slice(&carry);
            let (le, de) = (
                &local_end[ci * width..(ci + 1) * width],
                &decay_end[ci * width..(ci + 1) * width],
            );
            for k in 0..width {
                carry[k] = if carry_is_zero { le[k] } else { le[k] + de[k] * carry[k] };
            }
            carry_is_zero = false;
        }
        state.stream_mut(b).copy_from_slice(&carry);
        // output corrections: y_t += Σ_s C̄_t · (Π decays up to t) · h_in
        for ci in 0..n_chunks {
            if ci == 0 && h0.is_none() {
                continue;
            }
            let hin = &carry_in[ci * width..(ci + 1) * width];
            let mut dec = vec![T::one(); width];
            let (lo, hi) = (base + ci * chunk, base + ((ci + 1) * chunk).min(len));
            for r in lo..hi {
                if args.reset_at(r) {
                    dec.iter_mut().for_each(|v| *v = T::zero());
                }
                for p in 0..din {
                    let g = (p / s) * s;
                    let mut corr = T::zero();
                    for j in 0..s {
                        dec[p * s + j] = dec[p * s + j] * args.coeffs(r, p, j).0;
                        corr = corr + args.c[r * din + g + j] * dec[p * s + j] * hin[p * s + j];
                    }
                    y[r * din + p] = y[r * din + p] + corr;
                }
            }
        }
    }
    finish_scan(args, y, state)
}

// ---------------------------------------------------------------------------
// Tape op

struct ScanOp<T: Element> {
    batch: usize,
    len: usize,
    d_inner: usize,
    d_state: usize,
    rule: Discretization,
    resets: Option<Vec<bool>>,
    has_skip: bool,
    /// post-update state of every row, `[rows, D_in, S]`
    states: Vec<T>,
}

impl<T: Element> CustomOp<T> for ScanOp<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    // inputs: x, delta, b, c, a_log, [d_skip]
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, delta, bm, cm, a_log) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
        );
        let d_skip = self.has_skip.then(|| inputs[5].data());
        let a: Vec<T> = a_log.iter().map(|&v| -v.exp()).collect();
        let dy = grad_out.data();
        let (din, s) = (self.d_inner, self.d_state);
        let width = din * s;
        let mut dx = vec![T::zero(); x.len()];
        let mut ddelta = vec![T::zero(); x.len()];
        let mut db = vec![T::zero(); x.len()];
        let mut dc = vec![T::zero(); x.len()];
        let mut da = vec![T::zero(); width];
        let mut dd = vec![T::zero(); din];
        let reset = |r: usize| self.resets.as_ref().is_some_and(|v| v[r]);
        let zero_state = vec![T::zero(); width];

        for b in 0..self.batch {
            // gradient w.r.t. the state after row t, carried backwards
            let mut carry = vec![T::zero(); width];
            for t in (0..self.len).rev() {
                let r = b * self.len + t;
                let h_t = &self.states[r * width..(r + 1) * width];
                let h_prev: &[T] = if t == 0 || reset(r) {
                    &zero_state
                } else {
                    &self.states[(r - 1) * width..r * width]
                };
                for p in 0..din {
                    let g = (p / s) * s;
                    let dt = delta[r * din + p];
                    let xv = x[r * din + p];
                    let dyp = dy[r * din + p];
                    let mut dx_acc = T::zero();
                    let mut ddt_acc = T::zero();
                    for j in 0..s {
                        let k = p * s + j;
                        let av = a[k];
                        let ab = (dt * av).exp();
                        let bv = bm[r * din + g + j];
                        let cv = cm[r * din + g + j];
                        let dh = dyp * cv + carry[k];
                        dc[r * din + g + j] = dc[r * din + g + j] + dyp * h_t[k];
                        let dab = dh * h_prev[k];
                        let dbb = dh * xv;
                        let (bb, dbb_ddt, dbb_da, dbb_db) = match self.rule {
                            Discretization::Euler => (dt * bv, bv, T::zero(), dt),
                            Discretization::Zoh => {
                                let f = (ab - T::one()) / av;
                                let dfa = (dt * ab * av - (ab - T::one())) / (av * av);
                                (f * bv, ab * bv, dfa * bv, f)
                            }
                        };
                        dx_acc = dx_acc + dh * bb;
                        db[r * din + g + j] = db[r * din + g + j] + dbb * dbb_db;
                        ddt_acc = ddt_acc + dab * ab * av + dbb * dbb_ddt;
                        da[k] = da[k] + dab * ab * dt + dbb * dbb_da;
                        carry[k] = if reset(r) { T::zero() } else { dh * ab };
                    }
                    if let Some(d) = d_skip {
                        dx_acc = dx_acc + dyp * d[p];
                        dd[p] = dd[p] + dyp * xv;
                    }
                    dx[r * din + p] = dx_acc;
                    ddelta[r * din + p] = ddt_acc;
                }
            }
        }
        // A = -exp(a_log)  =>  dA_log = dA * A
        let da_log: Vec<T> = da.iter().zip(&a).map(|(&g, &av)| g * av).collect();
        let shape = inputs[0].shape().to_vec();
        let mk = |need: bool, v: Vec<T>, shape: Vec<usize>| -> Result<Option<Tensor<T>>> {
            Ok(if need { Some(Tensor::new(shape, v)?) } else { None })
        };
        let mut out = vec![
            mk(needs[0], dx, shape.clone())?,
            mk(needs[1], ddelta, shape.clone())?,
            mk(needs[2], db, shape.clone())?,
            mk(needs[3], dc, shape)?,
            mk(needs[4], da_log, inputs[4].shape().to_vec())?,
        ];
        if self.has_skip {
            out.push(mk(needs[5], dd, inputs[5].shape().to_vec())?);
        }
        Ok(out)
    }
}

/// Resets derived from a layout's segment changes.
pub fn layout_resets(layout: &SeqLayout) -> Option<Vec<bool>> {
    let seg = layout.segments.as_ref()?;
    Some(
        (0..layout.rows())
            .map(|r| r % layout.len != 0 && seg[r] != seg[r - 1])
            .collect(),
    )
}

/// Selective scan on the tape. `x, delta, b, c` are `[rows, D_in]`,
/// `a_log [D_in, S]`, `d_skip [D_in]`.
#[allow(clippy::too_many_arguments)]
pub fn scan_tape<T: Element>(
    tape: &mut Tape<T>,
    layout: &SeqLayout,
    rule: Discretization,
    x: Var,
    delta: Var,
    b: Var,
    c: Var,
    a_log: Var,
    d_skip: Option<Var>,
) -> Result<Var> {
    let (din, s) = {
        let a = tape.value(a_log);
        (a.shape()[0], a.shape()[1])
    };
    let resets = layout_resets(layout);
    let a: Vec<T> = tape.value(a_log).data().iter().map(|&v| -v.exp()).collect();
    let args = ScanArgs {
        batch: layout.batch,
        len: layout.len,
        d_inner: din,
        d_state: s,
        x: tape.value(x).data(),
        delta: tape.value(delta).data(),
        b: tape.value(b).data(),
        c: tape.value(c).data(),
        a: &a,
        d_skip: d_skip.map(|d| tape.value(d).data()),
        rule,
        resets: resets.as_deref(),
    };
    args.check()?;
    let rows = layout.rows();
    let mut states = vec![T::zero(); rows * din * s];
    let mut y = vec![T::zero(); rows * din];
    let mut h = vec![T::zero(); din * s];
    for bi in 0..layout.batch {
        h.iter_mut().for_each(|v| *v = T::zero());
        args.run_rows(bi * layout.len, (bi + 1) * layout.len, &mut h, &mut y, Some(&mut states));
    }
    let value = Tensor::new([rows, din], y)?;
    let mut inputs = vec![x, delta, b, c, a_log];
    inputs.extend(d_skip);
    tape.custom(
        &inputs,
        value,
        Box::new(ScanOp {
            batch: layout.batch,
            len: layout.len,
            d_inner: din,
            d_state: s,
            rule,
            resets,
            has_skip: d_skip.is_some(),
            states,
        }),
    )
}

/// Full SSM mixer on the tape: `o [rows, D] -> [rows, D]`.
pub fn mamba_tape<T: Element>(
    tape: &mut Tape<T>,
    cfg: &MambaConfig,
    w: &MambaWeights<Var>,
    o: Var,
    layout: &SeqLayout,
) -> Result<Var> {
    let c = tape.matmul(o, w.wc)?;
    let bkv = tape.matmul(o, w.wb)?;
    let b = tape.matmul(bkv, w.eb)?;
    let xkv = tape.matmul(o, w.wx)?;
    let x = tape.matmul(xkv, w.ex)?;
    let low = tape.matmul(x, w.dt_down)?;
    let pre = tape.matmul(low, w.dt_up)?;
    let pre = tape.add_row(pre, w.dt_bias)?;
    let delta = tape.softplus(pre)?;
    let y = scan_tape(tape, layout, cfg.discretization, x, delta, b, c, w.a_log, w.d_skip)?;
    tape.matmul(y, w.wout)
}

// ---------------------------------------------------------------------------
// Inference

/// Projected per-token scan operands for `rows` tokens.
struct Projected<T: Element> {
    x: Tensor<T>,
    delta: Tensor<T>,
    b: Tensor<T>,
    c: Tensor<T>,
}

fn project<T: Element>(p: &MambaParams<T>, o2: &Tensor<T>) -> Result<Projected<T>> {
    let w = &p.w;
    let c = ops::linear(o2, &w.wc)?;
    let b = ops::linear(&ops::linear(o2, &w.wb)?, &w.eb)?;
    let x = ops::linear(&ops::linear(o2, &w.wx)?, &w.ex)?;
    let pre = ops::linear(&ops::linear(&x, &w.dt_down)?, &w.dt_up)?;
    let din = p.cfg.d_inner();
    let mut delta = pre.into_vec();
    for row in delta.chunks_mut(din) {
        for (v, &bias) in row.iter_mut().zip(w.dt_bias.data()) {
            *v = softplus_scalar(*v + bias);
        }
    }
    let delta = Tensor::new(x.shape().to_vec(), delta)?;
    Ok(Projected { x, delta, b, c })
}

fn mixer_forward<T: Element>(
    params: &MambaParams<T>,
    o: &Tensor<T>,
    state: &mut SsmState<T>,
    chunked: bool,
) -> Result<Tensor<T>> {
    let cfg = &params.cfg;
    if o.rank() != 3 || o.shape()[2] != cfg.d_model {
        return Err(shape_err(
            "mamba_forward",
            format!("input {:?}, d_model {}", o.shape(), cfg.d_model),
        ));
    }
    let (batch, len, d) = (o.shape()[0], o.shape()[1], o.shape()[2]);
    if state.batch != batch || state.d_inner != cfg.d_inner() || state.d_state != cfg.d_state {
        return Err(shape_err("mamba_forward", "state does not match input"));
    }
    let pr = project(params, &o.reshape([batch * len, d])?)?;
    let a = params.a();
    let args = ScanArgs {
        batch,
        len,
        d_inner: cfg.d_inner(),
        d_state: cfg.d_state,
        x: pr.x.data(),
        delta: pr.delta.data(),
        b: pr.b.data(),
        c: pr.c.data(),
        a: a.data(),
        d_skip: params.w.d_skip.as_ref().map(|t| t.data()),
        rule: cfg.discretization,
        resets: None,
    };
    let (y, h) = if chunked && len > 1 {
        scan_chunked(&args, Some(state), cfg.scan_chunk)?
    } else {
        scan_sequential(&args, Some(state))?
    };
    *state = h;
    let y = y.reshape([batch * len, cfg.d_inner()])?;
    ops::linear(&y, &params.w.wout)?.reshape([batch, len, d])
}

/// SSM mixer over `o [B, L, D]`, continuing from (and updating) `state`
/// when given. Uses the chunked scan.
pub fn mamba_forward<T: Element>(
    params: &MambaParams<T>,
    o: &Tensor<T>,
    state: Option<&mut SsmState<T>>,
) -> Result<Tensor<T>> {
    let batch = o.shape().first().copied().unwrap_or(0);
    let mut scratch;
    let state = match state {
        Some(s) => s,
        None => {
            scratch = SsmState::zeros(batch, params.cfg.d_inner(), params.cfg.d_state);
            &mut scratch
        }
    };
    mixer_forward(params, o, state, true)
}

/// One-token step `o_t [B, 1, D]`; the state keeps its size.
pub fn ssm_decode_step<T: Element>(
    params: &MambaParams<T>,
    o_t: &Tensor<T>,
    state: &mut SsmState<T>,
) -> Result<Tensor<T>> {
    if o_t.rank() != 3 || o_t.shape()[1] != 1 {
        return Err(shape_err(
            "ssm_decode_step",
            format!("expected [B, 1, D], got {:?}", o_t.shape()),
        ));
    }
    mixer_forward(params, o_t, state, false)
}

/// Runs the mixer for streams `streams[i]` of a larger state.
pub fn mamba_forward_streams<T: Element>(
    params: &MambaParams<T>,
    o: &Tensor<T>,
    state: &mut SsmState<T>,
    streams: &[usize],
) -> Result<Tensor<T>> {
    if streams.len() == state.batch && streams.iter().enumerate().all(|(i, &s)| i == s) {
        return mixer_forward(params, o, state, true);
    }
    let cfg = &params.cfg;
    let mut sub = SsmState::zeros(streams.len(), cfg.d_inner(), cfg.d_state);
    for (i, &s) in streams.iter().enumerate() {
        sub.stream_mut(i).copy_from_slice(state.stream(s));
    }
    let out = mixer_forward(params, o, &mut sub, true)?;
    for (i, &s) in streams.iter().enumerate() {
        state.stream_mut(s).copy_from_slice(sub.stream(i));
    }
    Ok(out)
}
