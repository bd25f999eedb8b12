//! The full decoder: embeddings, an interleaved stack of attention and SSM
//! mixers with SwiGLU MLPs and RMS pre-norms, and an untied LM head.

mod checkpoint;
mod session;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_container, encode_container, load_checkpoint, read_container, save_checkpoint, write_container, Container,
    MAGIC,
};
pub use session::{generate, Completion, DecodeSession, GenerateOptions, LayerState};

use crate::attention::{attention_tape, AttentionConfig, AttentionParams, AttentionWeights, SeqLayout};
use crate::error::{invalid, shape_err, Result};
use crate::mamba::{mamba_tape, Discretization, MambaConfig, MambaParams, MambaWeights};
use crate::tensor::{Element, SeededRng, Tape, Tensor, Var};
use crate::tokenizer;

fn default_scan_chunk() -> usize {
    64
}

/// Decoder shapes. Missing fields take the [`ModelConfig::desk`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    /// Layers that keep attention; every other layer is an SSM mixer.
    pub attn_layers: Vec<usize>,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub rope_theta: f64,
    pub norm_eps: f64,
    pub max_position: usize,
    pub discretization: Discretization,
    pub ssm_skip: bool,
    pub scan_chunk: usize,
}

/// `k` indices spread evenly over `n` layers, ending at the last layer
/// (`{3, 7}` for 2 of 8).
pub fn evenly_spaced(n: usize, k: usize) -> Vec<usize> {
    (1..=k).map(|i| i * n / k - 1).collect()
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale hybrid: 8 layers, attention at {3, 7}.
    pub fn desk() -> Self {
        Self {
            d_model: 256,
            n_layers: 8,
            attn_layers: evenly_spaced(8, 2),
            n_heads: 8,
            n_kv_heads: 4,
            head_dim: 32,
            d_state: 16,
            dt_rank: 16,
            mlp_hidden: 512,
            vocab_size: tokenizer::VOCAB_SIZE,
            rope_theta: 10000.0,
            norm_eps: 1e-5,
            max_position: 8192,
            discretization: Discretization::Euler,
            ssm_skip: false,
            scan_chunk: default_scan_chunk(),
        }
    }

    /// The same shapes with attention in every layer.
    pub fn desk_transformer() -> Self {
        Self::desk().all_attention()
    }

    /// Reference shapes of the 3B model (28 layers, 6 attention, D = 3072).
    pub fn paper_3b() -> Self {
        Self {
            d_model: 3072,
            n_layers: 28,
            attn_layers: evenly_spaced(28, 6),
            n_heads: 24,
            n_kv_heads: 8,
            head_dim: 128,
            d_state: 16,
            dt_rank: 192,
            mlp_hidden: 8192,
            vocab_size: 128_256,
            rope_theta: 500_000.0,
            norm_eps: 1e-5,
            max_position: 32_768,
            discretization: Discretization::Euler,
            ssm_skip: false,
            scan_chunk: default_scan_chunk(),
        }
    }

    pub fn all_attention(mut self) -> Self {
        self.attn_layers = (0..self.n_layers).collect();
        self
    }

    pub fn no_attention(mut self) -> Self {
        self.attn_layers.clear();
        self
    }

    pub fn with_attn_layers(mut self, layers: Vec<usize>) -> Self {
        self.attn_layers = layers;
        self
    }

    pub fn is_attention(&self, layer: usize) -> bool {
        self.attn_layers.contains(&layer)
    }

    pub fn is_pure_transformer(&self) -> bool {
        (0..self.n_layers).all(|i| self.is_attention(i))
    }

    pub fn d_inner(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
            rope_theta: self.rope_theta,
        }
    }

    pub fn mamba(&self) -> MambaConfig {
        MambaConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
            d_state: self.d_state,
            dt_rank: self.dt_rank,
            discretization: self.discretization,
            skip: self.ssm_skip,
            scan_chunk: self.scan_chunk,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.mlp_hidden == 0 || self.vocab_size == 0 {
            return Err(invalid("model extents must be positive"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(invalid("norm_eps must be positive"));
        }
        let mut seen = vec![false; self.n_layers];
        for &i in &self.attn_layers {
            if i >= self.n_layers {
                return Err(invalid(format!(
                    "attention layer {i} outside 0..{}",
                    self.n_layers
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(invalid(format!("attention layer {i} listed twice")));
            }
        }
        self.attention().validate()?;
        if !self.is_pure_transformer() {
            self.mamba().validate()?;
        }
        Ok(())
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (d, v, f) = (self.d_model, self.vocab_size, self.mlp_hidden);
        let a = self.attention();
        let m = self.mamba();
        let attn = 2 * d * a.q_dim() + 2 * d * a.kv_dim();
        let (din, kv, s, r) = (m.d_inner(), m.kv_dim(), m.d_state, m.dt_rank);
        let ssm = 2 * d * din + 2 * d * kv + 2 * kv * din + din * s + 2 * din * r + din
            + if self.ssm_skip { din } else { 0 };
        let n_attn = self.attn_layers.len();
        let per_layer = 2 * d + 3 * d * f;
        2 * v * d + d + self.n_layers * per_layer + n_attn * attn + (self.n_layers - n_attn) * ssm
    }

    /// Bytes of f32 weights.
    pub fn weight_bytes(&self) -> usize {
        4 * self.param_count()
    }
}

/// Token-mixing sub-layer of one block.
#[derive(Clone, Debug, PartialEq)]
pub enum MixerWeights<W> {
    Attention(AttentionWeights<W>),
    Ssm(MambaWeights<W>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<W> {
    pub mixer_norm: W,
    pub mixer: MixerWeights<W>,
    pub mlp_norm: W,
    /// `[D, F]`
    pub gate: W,
    /// `[D, F]`
    pub up: W,
    /// `[F, D]`
    pub down: W,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<W> {
    /// `[V, D]`
    pub embed: W,
    pub layers: Vec<LayerWeights<W>>,
    pub final_norm: W,
    /// `[D, V]`
    pub lm_head: W,
}

impl<W> ModelWeights<W> {
    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &W)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.mixer_norm"), &l.mixer_norm));
            match &l.mixer {
                MixerWeights::Attention(a) => {
                    for (n, w) in AttentionWeights::<()>::NAMES.iter().zip(a.fields()) {
                        out.push((format!("layers.{i}.attn.{n}"), w));
                    }
                }
                MixerWeights::Ssm(m) => {
                    for (n, w) in m.named() {
                        out.push((format!("layers.{i}.ssm.{n}"), w));
                    }
                }
            }
            out.push((format!("layers.{i}.mlp_norm"), &l.mlp_norm));
            out.push((format!("layers.{i}.mlp.gate"), &l.gate));
            out.push((format!("layers.{i}.mlp.up"), &l.up));
            out.push((format!("layers.{i}.mlp.down"), &l.down));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    /// Mutable references in the order of [`Self::named`].
    pub fn params_mut(&mut self) -> Vec<&mut W> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.push(&mut l.mixer_norm);
            match &mut l.mixer {
                MixerWeights::Attention(a) => out.extend(a.fields_mut()),
                MixerWeights::Ssm(m) => out.extend(m.named_mut().into_iter().map(|(_, w)| w)),
            }
            out.push(&mut l.mlp_norm);
            out.push(&mut l.gate);
            out.push(&mut l.up);
            out.push(&mut l.down);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    /// Maps every tensor, visiting them in the order of [`Self::named`].
    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &W) -> Result<U, E>) -> Result<ModelWeights<U>, E> {
        let embed = f("embed", &self.embed)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let mixer_norm = f(&format!("layers.{i}.mixer_norm"), &l.mixer_norm)?;
            let mixer = match &l.mixer {
                MixerWeights::Attention(a) => MixerWeights::Attention(
                    a.try_map(|n, w| f(&format!("layers.{i}.attn.{n}"), w))?,
                ),
                MixerWeights::Ssm(m) => {
                    MixerWeights::Ssm(m.try_map(|n, w| f(&format!("layers.{i}.ssm.{n}"), w))?)
                }
            };
            layers.push(LayerWeights {
                mixer_norm,
                mixer,
                mlp_norm: f(&format!("layers.{i}.mlp_norm"), &l.mlp_norm)?,
                gate: f(&format!("layers.{i}.mlp.gate"), &l.gate)?,
                up: f(&format!("layers.{i}.mlp.up"), &l.up)?,
                down: f(&format!("layers.{i}.mlp.down"), &l.down)?,
            });
        }
        Ok(ModelWeights {
            embed,
            layers,
            final_norm: f("final_norm", &self.final_norm)?,
            lm_head: f("lm_head", &self.lm_head)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridModel<T: Element = f32> {
    pub cfg: ModelConfig,
    pub w: ModelWeights<Tensor<T>>,
}

impl<T: Element> HybridModel<T> {
    pub fn init(cfg: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let (d, f, v) = (cfg.d_model, cfg.mlp_hidden, cfg.vocab_size);
        // residual-branch outputs are scaled down with depth
        let resid = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let mixer = if cfg.is_attention(i) {
                let mut p = AttentionParams::init(cfg.attention(), rng)?;
                p.w.wo = p.w.wo.map(|x| x * T::of(resid));
                MixerWeights::Attention(p.w)
            } else {
                let mut p = MambaParams::init(cfg.mamba(), rng)?;
                p.w.wout = p.w.wout.map(|x| x * T::of(resid));
                MixerWeights::Ssm(p.w)
            };
            layers.push(LayerWeights {
                mixer_norm: Tensor::full([d], T::one()),
                mixer,
                mlp_norm: Tensor::full([d], T::one()),
                gate: Tensor::randn([d, f], 1.0 / (d as f64).sqrt(), rng),
                up: Tensor::randn([d, f], 1.0 / (d as f64).sqrt(), rng),
                down: Tensor::randn([f, d], resid / (f as f64).sqrt(), rng),
            });
        }
        let m = Self {
            w: ModelWeights {
                embed: Tensor::randn([v, d], 1.0, rng),
                layers,
                final_norm: Tensor::full([d], T::one()),
                lm_head: Tensor::randn([d, v], 0.1 / (d as f64).sqrt(), rng),
            },
            cfg,
        };
        m.check_shapes()?;
        Ok(m)
    }

    /// Verifies that layer kinds follow the config and every tensor has its
    /// configured shape.
    pub fn check_shapes(&self) -> Result<()> {
        let c = &self.cfg;
        c.validate()?;
        if self.w.layers.len() != c.n_layers {
            return Err(shape_err(
                "model",
                format!("{} layers, config says {}", self.w.layers.len(), c.n_layers),
            ));
        }
        let (d, f, v) = (c.d_model, c.mlp_hidden, c.vocab_size);
        let expect = |name: &str, t: &Tensor<T>, want: &[usize]| -> Result<()> {
            if t.shape() == want {
                Ok(())
            } else {
                Err(shape_err("model", format!("{name} is {:?}, expected {want:?}", t.shape())))
            }
        };
        expect("embed", &self.w.embed, &[v, d])?;
        expect("final_norm", &self.w.final_norm, &[d])?;
        expect("lm_head", &self.w.lm_head, &[d, v])?;
        for (i, l) in self.w.layers.iter().enumerate() {
            match (&l.mixer, c.is_attention(i)) {
                (MixerWeights::Attention(a), true) => AttentionParams {
                    cfg: c.attention(),
                    w: a.clone(),
                }
                .check_shapes()?,
                (MixerWeights::Ssm(m), false) => MambaParams {
                    cfg: c.mamba(),
                    w: m.clone(),
                }
                .check_shapes()?,
                _ => return Err(invalid(format!("layer {i} mixer kind disagrees with config"))),
            }
            expect("mixer_norm", &l.mixer_norm, &[d])?;
            expect("mlp_norm", &l.mlp_norm, &[d])?;
            expect("gate", &l.gate, &[d, f])?;
            expect("up", &l.up, &[d, f])?;
            expect("down", &l.down, &[f, d])?;
        }
        Ok(())
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.w.named()
    }

    pub fn num_tensors(&self) -> usize {
        self.w.named().len()
    }

    pub(crate) fn attn_params(&self, layer: usize) -> Option<AttentionParams<T>> {
        match &self.w.layers[layer].mixer {
            MixerWeights::Attention(a) => Some(AttentionParams {
                cfg: self.cfg.attention(),
                w: a.clone(),
            }),
            MixerWeights::Ssm(_) => None,
        }
    }

    pub(crate) fn mamba_params(&self, layer: usize) -> Option<MambaParams<T>> {
        match &self.w.layers[layer].mixer {
            MixerWeights::Ssm(m) => Some(MambaParams {
                cfg: self.cfg.mamba(),
                w: m.clone(),
            }),
            MixerWeights::Attention(_) => None,
        }
    }

    /// Registers every tensor as a trainable tape leaf; parameter ids follow
    /// [`ModelWeights::named`].
    pub fn bind(&self, tape: &mut Tape<T>) -> ModelWeights<Var> {
        let mut id = 0;
        self.w
            .try_map(|_, t| {
                let v = tape.param(id, t.clone());
                id += 1;
                Ok::<_, std::convert::Infallible>(v)
            })
            .unwrap_or_else(|e| match e {})
    }

    /// Puts every tensor on the tape as a constant (no gradients).
    pub fn bind_const(&self, tape: &mut Tape<T>) -> ModelWeights<Var> {
        self.w
            .try_map(|_, t| Ok::<_, std::convert::Infallible>(tape.constant(t.clone())))
            .unwrap_or_else(|e| match e {})
    }

    /// Causal logits on the tape for `ids` laid out by `layout`:
    /// `[rows, V]`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        w: &ModelWeights<Var>,
        ids: &[u32],
        layout: &SeqLayout,
    ) -> Result<Var> {
        layout.validate()?;
        if ids.len() != layout.rows() {
            return Err(shape_err(
                "forward_tape",
                format!("{} ids for {} rows", ids.len(), layout.rows()),
            ));
        }
        let eps = T::of(self.cfg.norm_eps);
        let (acfg, mcfg) = (self.cfg.attention(), self.cfg.mamba());
        let mut h = tape.embedding(w.embed, ids)?;
        for l in &w.layers {
            let n = tape.rmsnorm(h, l.mixer_norm, eps)?;
            let m = match &l.mixer {
                MixerWeights::Attention(a) => attention_tape(tape, &acfg, a, n, layout)?,
                MixerWeights::Ssm(s) => mamba_tape(tape, &mcfg, s, n, layout)?,
            };
            h = tape.add(h, m)?;
            let n = tape.rmsnorm(h, l.mlp_norm, eps)?;
            let g = tape.matmul(n, l.gate)?;
            let g = tape.silu(g)?;
            let u = tape.matmul(n, l.up)?;
            let a = tape.mul(g, u)?;
            let o = tape.matmul(a, l.down)?;
            h = tape.add(h, o)?;
        }
        let h = tape.rmsnorm(h, w.final_norm, eps)?;
        tape.matmul(h, w.lm_head)
    }

    /// Causal logits `[B, L, V]` for `tokens` (row-major `[B, L]`).
    pub fn forward_logits(&self, tokens: &[u32], batch: usize) -> Result<Tensor<T>> {
        if batch == 0 || tokens.len() % batch != 0 {
            return Err(shape_err(
                "forward_logits",
                format!("{} tokens for batch {batch}", tokens.len()),
            ));
        }
        let len = tokens.len() / batch;
        let mut s = DecodeSession::new(self, batch, len)?;
        let streams: Vec<usize> = (0..batch).collect();
        s.step(self, tokens, len, &streams, false)
    }

    pub fn cast<U: Element>(&self) -> HybridModel<U> {
        HybridModel {
            cfg: self.cfg.clone(),
            w: self
                .w
                .try_map(|_, t| Ok::<_, std::convert::Infallible>(t.cast()))
                .unwrap_or_else(|e| match e {}),
        }
    }
}
