//! Token-at-a-time attention with constant-size state.

use crate::attention::engine::{make_view, merge_head, project, read, sequence_views, split_heads, View};
use crate::attention::{AttentionConfig, Control, Site, Weights};
use crate::error::{domain, numeric, Result};
use crate::memory::{readout_kernel, BoundedMemory, TransitionOp};
use crate::numerics::{Matrix, Vector};
use crate::strategies::{Activation, ControlStrategy, DilatedQueues};

/// Recurrent state of one head.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadState {
    /// Bounded memory, with a normalizer for ABC_MLP.
    Memory(BoundedMemory),
    /// Two alternating window queues.
    Dilated(DilatedQueues),
    /// Softmax baseline: the full key/value cache.
    Cache { keys: Vec<f64>, values: Vec<f64> },
}

impl HeadState {
    pub fn float_count(&self) -> usize {
        match self {
            HeadState::Memory(m) => m.float_count(),
            HeadState::Dilated(q) => q.odd.float_count() + q.even.float_count(),
            HeadState::Cache { keys, values } => keys.len() + values.len(),
        }
    }
}

/// Streaming state of one causal attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pos: usize,
    heads: Vec<HeadState>,
}

fn row_times(x: &[f64], w: &Matrix) -> Matrix {
    let x = Matrix::from_vec(1, x.len(), x.to_vec()).expect("finite input row");
    project(&x, w)
}

impl AttentionState {
    pub fn new(cfg: &AttentionConfig, control: Control<'_>) -> Result<Self> {
        cfg.validate()?;
        if cfg.site != Site::Causal {
            return domain("streaming state is only defined for causal self-attention");
        }
        let dh = cfg.d_head;
        let make = || -> Result<HeadState> {
            Ok(match control {
                Control::Softmax => HeadState::Cache { keys: Vec::new(), values: Vec::new() },
                Control::Fixed(ControlStrategy::Dilated { slots }) => HeadState::Dilated(DilatedQueues::new(*slots, dh)),
                Control::Fixed(s) => HeadState::Memory(BoundedMemory::new(s.slots(cfg.max_len), dh)),
                Control::Linformer(p) => HeadState::Memory(BoundedMemory::new(p.rows(), dh)),
                Control::Mlp { w_phi, .. } => HeadState::Memory(BoundedMemory::with_normalizer(w_phi.rows(), dh)),
                Control::Cluster { .. } => return domain("clustering needs the whole sequence and cannot stream"),
            })
        };
        let heads = (0..cfg.heads).map(|_| make()).collect::<Result<Vec<_>>>()?;
        Ok(Self { pos: 0, heads })
    }

    /// Number of tokens consumed so far.
    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn heads(&self) -> &[HeadState] {
        &self.heads
    }

    pub fn float_count(&self) -> usize {
        self.heads.iter().map(HeadState::float_count).sum()
    }

    pub fn state_bytes(&self) -> usize {
        self.float_count() * std::mem::size_of::<f64>()
    }

    /// Consumes token representation `x` and returns the layer output at
    /// this position.
    pub fn step(&mut self, cfg: &AttentionConfig, w: Weights<'_>, x: &[f64]) -> Result<Vector> {
        let (d, dh) = (cfg.d_model, cfg.d_head);
        if x.len() != d {
            return domain(format!("token has {} features, expected {d}", x.len()));
        }
        let pos = self.pos;
        if pos >= cfg.max_len {
            return domain(format!("position {pos} exceeds max_len {}", cfg.max_len));
        }
        let q = row_times(x, w.wq);
        let k = row_times(x, w.wk);
        let v = row_times(x, w.wv);
        let (q, k, v) = (q.as_slice(), k.as_slice(), v.as_slice());

        let (phi, transition): (Option<Vec<f64>>, TransitionOp) = match w.control {
            Control::Softmax => (None, TransitionOp::Identity),
            Control::Fixed(s) => (Some(s.phi_at(pos, None, pos + 1)?.phi.0.into_vec()), s.transition()),
            Control::Linformer(p) => {
                if pos >= p.cols() {
                    return domain(format!("linformer covers {} positions, got {pos}", p.cols()));
                }
                (Some(p.column(pos).into_vec()), TransitionOp::Identity)
            }
            Control::Mlp { w_phi, activation } => {
                let clamp = if activation == Activation::Exp { cfg.exp_clamp } else { None };
                let alpha: Vec<f64> = (0..w_phi.rows())
                    .map(|l| {
                        let z = crate::numerics::dot(w_phi.row(l), x);
                        activation.apply(clamp.map_or(z, |c| z.clamp(-c, c)))
                    })
                    .collect();
                if !alpha.iter().all(|a| a.is_finite()) {
                    return numeric("control activation overflowed");
                }
                (Some(alpha), TransitionOp::Identity)
            }
            Control::Cluster { .. } => return domain("clustering cannot stream"),
        };

        let inv_tau = 1.0 / cfg.temperature();
        let mut concat = Matrix::zeros(1, d);
        let mut out = vec![0.0; dh];
        for (h, state) in self.heads.iter_mut().enumerate() {
            let r = h * dh..(h + 1) * dh;
            let (qh, kh, vh) = (&q[r.clone()], &k[r.clone()], &v[r]);
            match state {
                HeadState::Cache { keys, values } => {
                    keys.extend_from_slice(kh);
                    values.extend_from_slice(vh);
                    let mut scores = vec![0.0; keys.len() / dh];
                    readout_kernel(qh, keys, values, dh, inv_tau, &mut scores, &mut out);
                }
                HeadState::Dilated(queues) => {
                    let parity = queues.push(pos, kh, vh)?;
                    let mem = queues.queue(parity);
                    let mut scores = vec![0.0; mem.slots()];
                    readout_kernel(qh, mem.ktilde.as_slice(), mem.vtilde.as_slice(), dh, inv_tau, &mut scores, &mut out);
                }
                HeadState::Memory(mem) => {
                    let phi = phi.as_deref().expect("bounded memory has a control vector");
                    mem.step(phi, kh, vh, transition)?;
                    let mut scores = vec![0.0; mem.slots()];
                    match mem.norm_sum.as_ref() {
                        None => readout_kernel(qh, mem.ktilde.as_slice(), mem.vtilde.as_slice(), dh, inv_tau, &mut scores, &mut out),
                        Some(s) => {
                            let view = make_view(mem.ktilde.as_slice(), mem.vtilde.as_slice(), Some(s), dh);
                            read(qh, &view, dh, inv_tau, &mut scores, &mut out);
                        }
                    }
                }
            }
            merge_head(&mut concat, h, dh, &out);
        }
        self.pos += 1;
        let y = project(&concat, w.wo).into_vec();
        let y = Vector::new(y);
        if !y.is_finite() {
            return numeric("attention output is not finite");
        }
        Ok(y)
    }
}

/// Cross-attention memory built once over the encoder output and reused for
/// every decode step.
#[derive(Clone, Debug)]
pub struct CrossMemory {
    views: Vec<View>,
    d_head: usize,
}

impl CrossMemory {
    pub fn build(cfg: &AttentionConfig, w: Weights<'_>, encoded: &Matrix) -> Result<Self> {
        cfg.validate()?;
        if cfg.site != Site::Cross {
            return domain("cross memory requires a cross-attention config");
        }
        Ok(Self { views: sequence_views(cfg, w, encoded)?, d_head: cfg.d_head })
    }

    /// Floats held per layer (keys, values and normalizer of every head).
    pub fn float_count(&self) -> usize {
        self.views.iter().map(|v| v.kbar.len() + v.vbar.len() + v.norm.as_ref().map_or(0, Vec::len)).sum()
    }

    pub fn read(&self, cfg: &AttentionConfig, w: Weights<'_>, x: &[f64]) -> Result<Vector> {
        let (d, dh) = (cfg.d_model, self.d_head);
        if x.len() != d {
            return domain(format!("token has {} features, expected {d}", x.len()));
        }
        let q = row_times(x, w.wq);
        let qh = split_heads(&q, cfg.heads, dh);
        let inv_tau = 1.0 / cfg.temperature();
        let mut concat = Matrix::zeros(1, d);
        let mut out = vec![0.0; dh];
        for (h, view) in self.views.iter().enumerate() {
            let mut scores = vec![0.0; view.kbar.len() / dh];
            read(&qh[h], view, dh, inv_tau, &mut scores, &mut out);
            merge_head(&mut concat, h, dh, &out);
        }
        let y = Vector::new(project(&concat, w.wo).into_vec());
        if !y.is_finite() {
            return numeric("attention output is not finite");
        }
        Ok(y)
    }
}
