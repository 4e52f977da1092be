//! Multi-head ABC attention as a drop-in replacement for softmax attention.
//!
//! Every head projects its inputs, writes keys and values into a bounded
//! memory according to the layer's control strategy, and reads it with its
//! queries. Three sites are supported: encoder self-attention and cross
//! attention (one memory built over the whole key/value sequence) and causal
//! self-attention (the memory is read after every write, so position `t`
//! sees only positions `≤ t`).
//!
//! The batch path ([`forward`], [`backward`]) records a [`GradTape`] and
//! differentiates by hand through projection, control, memory and readout.
//! The streaming path ([`AttentionState`]) performs the same computation one
//! token at a time with constant-size state.

mod engine;
mod pseudo_query;
mod stream;

pub use engine::{backward, forward, AttentionGrads, GradTape};
pub use pseudo_query::pseudo_query_memory;
pub use stream::{AttentionState, CrossMemory, HeadState};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::strategies::{Activation, ControlStrategy, Normalization, StrategyKind};

/// Where an attention layer sits in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    EncoderSelf,
    Causal,
    Cross,
}

impl Site {
    pub fn is_causal(self) -> bool {
        self == Site::Causal
    }

    /// ABC_MLP normalizes over the prefix in causal attention, over the whole
    /// sequence elsewhere.
    pub fn normalization(self) -> Normalization {
        if self.is_causal() {
            Normalization::Prefix
        } else {
            Normalization::Sequence
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub site: Site,
    pub strategy: StrategyKind,
    /// Memory slots (ignored by the softmax strategy, whose memory grows).
    pub n: usize,
    /// Score divisor; `None` means `sqrt(d_head)`.
    pub temperature: Option<f64>,
    pub tie_phi_across_layers: bool,
    /// Clamp `W_φ x` to `[-c, c]` before `exp` (training stability only).
    pub exp_clamp: Option<f64>,
    /// Longest sequence a layer must handle (Linformer width, random draws).
    pub max_len: usize,
}

impl AttentionConfig {
    pub fn new(heads: usize, d_model: usize, site: Site, strategy: StrategyKind, n: usize, max_len: usize) -> Self {
        Self {
            heads,
            d_model,
            d_head: d_model.checked_div(heads).unwrap_or(0),
            site,
            strategy,
            n,
            temperature: None,
            tie_phi_across_layers: true,
            exp_clamp: None,
            max_len,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = Some(temperature);
        self
    }

    pub fn temperature(&self) -> f64 {
        self.temperature.unwrap_or_else(|| (self.d_head as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_head == 0 || self.heads * self.d_head != self.d_model {
            return domain(format!(
                "heads ({}) x d_head ({}) must equal d_model ({})",
                self.heads, self.d_head, self.d_model
            ));
        }
        if self.n == 0 && self.strategy != StrategyKind::Softmax {
            return domain("memory size n must be at least 1");
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0) {
                return domain("temperature must be positive");
            }
        }
        if self.site.is_causal() && !self.strategy.is_causal_legal() {
            return domain(format!("strategy `{}` needs future tokens and cannot be causal", self.strategy.name()));
        }
        match &self.strategy {
            StrategyKind::Dilated if !self.site.is_causal() => {
                return domain("dilated control is only defined for causal attention")
            }
            StrategyKind::LocalToGlobal { globals } if globals.len() > self.n => {
                return domain(format!("{} global tokens exceed n = {}", globals.len(), self.n))
            }
            StrategyKind::Compressive { ratio: 0 } => return domain("compression ratio must be positive"),
            StrategyKind::Compressive { ratio } if self.n * ratio < self.max_len => {
                return domain(format!(
                    "compressive memory holds n x c = {} tokens, fewer than max_len {}",
                    self.n * ratio,
                    self.max_len
                ))
            }
            StrategyKind::Linformer | StrategyKind::Random { .. } if self.max_len == 0 => {
                return domain("max_len must be positive")
            }
            _ => {}
        }
        Ok(())
    }
}

/// Borrowed view of a layer's control strategy, as consumed by the engine.
#[derive(Clone, Copy, Debug)]
pub enum Control<'a> {
    /// Growing memory with `φ_t = e_t`: exact softmax attention.
    Softmax,
    /// Parameter-free control (local-to-global, random, compressive, window, dilated).
    Fixed(&'a ControlStrategy),
    /// Hard k-means on each head's keys, recomputed every forward pass.
    Cluster { slots: usize, iters: usize, seed: u64 },
    /// Learned `n × N_max` position projection.
    Linformer(&'a Matrix),
    /// Learned `n × d_model` control MLP.
    Mlp { w_phi: &'a Matrix, activation: Activation },
}

impl Control<'_> {
    pub fn learned(&self) -> Option<&Matrix> {
        match self {
            Control::Linformer(m) => Some(m),
            Control::Mlp { w_phi, .. } => Some(w_phi),
            _ => None,
        }
    }
}

/// Owned control strategy for a layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerControl {
    Softmax,
    Fixed(ControlStrategy),
    Cluster { slots: usize, iters: usize, seed: u64 },
    Linformer(Matrix),
    Mlp { w_phi: Matrix, activation: Activation },
}

impl LayerControl {
    /// Materializes the configured strategy for layer `layer`. Learned
    /// matrices are freshly initialized from `rng`.
    pub fn from_config(cfg: &AttentionConfig, layer: usize, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n;
        Ok(match &cfg.strategy {
            StrategyKind::Softmax => LayerControl::Softmax,
            StrategyKind::Linformer => {
                let ControlStrategy::Linformer { projection } = ControlStrategy::linformer(n, cfg.max_len, rng) else {
                    unreachable!()
                };
                LayerControl::Linformer(projection)
            }
            StrategyKind::LocalToGlobal { globals } => {
                LayerControl::Fixed(ControlStrategy::local_to_global(globals.clone(), n)?)
            }
            StrategyKind::Random { seed } => {
                // One stream per layer.
                let layer_seed = seed.wrapping_add((layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                LayerControl::Fixed(ControlStrategy::random(layer_seed, n, cfg.max_len)?)
            }
            StrategyKind::Compressive { ratio } => LayerControl::Fixed(ControlStrategy::compressive(*ratio, n)?),
            StrategyKind::Cluster { iters, seed } => LayerControl::Cluster {
                slots: n,
                iters: *iters,
                seed: seed.wrapping_add(layer as u64),
            },
            StrategyKind::Window => LayerControl::Fixed(ControlStrategy::Window { slots: n }),
            StrategyKind::Dilated => LayerControl::Fixed(ControlStrategy::Dilated { slots: n }),
            StrategyKind::Mlp { activation } => LayerControl::Mlp {
                w_phi: Matrix::random_normal(n, cfg.d_model, 1.0 / (cfg.d_model as f64).sqrt(), rng),
                activation: *activation,
            },
        })
    }

    pub fn as_control(&self) -> Control<'_> {
        match self {
            LayerControl::Softmax => Control::Softmax,
            LayerControl::Fixed(s) => Control::Fixed(s),
            LayerControl::Cluster { slots, iters, seed } => Control::Cluster { slots: *slots, iters: *iters, seed: *seed },
            LayerControl::Linformer(m) => Control::Linformer(m),
            LayerControl::Mlp { w_phi, activation } => Control::Mlp { w_phi, activation: *activation },
        }
    }

    pub fn learned(&self) -> Option<&Matrix> {
        match self {
            LayerControl::Linformer(m) | LayerControl::Mlp { w_phi: m, .. } => Some(m),
            _ => None,
        }
    }

    pub fn learned_mut(&mut self) -> Option<&mut Matrix> {
        match self {
            LayerControl::Linformer(m) | LayerControl::Mlp { w_phi: m, .. } => Some(m),
            _ => None,
        }
    }
}

/// Projection weights of one attention layer plus its control strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub control: LayerControl,
}

impl LayerParams {
    pub fn init(cfg: &AttentionConfig, layer: usize, rng: &mut SeededRng) -> Result<Self> {
        let d = cfg.d_model;
        let std = 1.0 / (d as f64).sqrt();
        Ok(Self {
            wq: Matrix::random_normal(d, d, std, rng),
            wk: Matrix::random_normal(d, d, std, rng),
            wv: Matrix::random_normal(d, d, std, rng),
            wo: Matrix::random_normal(d, d, std, rng),
            control: LayerControl::from_config(cfg, layer, rng)?,
        })
    }

    pub fn weights(&self) -> Weights<'_> {
        Weights { wq: &self.wq, wk: &self.wk, wv: &self.wv, wo: &self.wo, control: self.control.as_control() }
    }
}

/// Borrowed layer weights.
#[derive(Clone, Copy, Debug)]
pub struct Weights<'a> {
    pub wq: &'a Matrix,
    pub wk: &'a Matrix,
    pub wv: &'a Matrix,
    pub wo: &'a Matrix,
    pub control: Control<'a>,
}
