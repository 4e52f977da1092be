//! Batch forward pass with a recorded tape, and its hand-derived backward.
//!
//! Per head the memory is a raw pair `(A, B)` of `slots × d_head` blocks and,
//! for ABC_MLP, a per-slot normalizer `S`. Writes apply the transition then
//! add `φ_t ⊗ k_t`; reads use the view `(A ⊘ S, B ⊘ S)`. Causal sites read
//! after every write; other sites read the final memory with every query.

use crate::attention::{AttentionConfig, Control, Site, Weights};
use crate::error::{domain, numeric, Error, Result};
use crate::memory::TransitionOp;
use crate::numerics::{axpy, dot, gemm, gemm_acc, gemm_nt_acc, gemm_tn_acc, softmax_in_place, Matrix, SeededRng};
use crate::strategies::{kmeans, Activation, ControlStrategy};

/// Gradients of one attention layer.
#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    /// Gradient of the learned control matrix (`W_φ` or `W_LF`), if any.
    pub control: Option<Matrix>,
    pub dxq: Matrix,
    pub dxkv: Matrix,
}

/// Intermediates of one forward pass. [`backward`] consumes it; a second
/// call on the same tape is a usage error.
#[derive(Debug)]
pub struct GradTape {
    data: Option<TapeData>,
}

impl GradTape {
    pub fn is_consumed(&self) -> bool {
        self.data.is_none()
    }
}

#[derive(Debug)]
struct TapeData {
    site: Site,
    heads: usize,
    d_head: usize,
    inv_tau: f64,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    xq: Matrix,
    xkv: Matrix,
    /// Per-head projected queries, keys and values (head-major, contiguous).
    qh: Vec<Vec<f64>>,
    kh: Vec<Vec<f64>>,
    vh: Vec<Vec<f64>>,
    concat: Matrix,
    plan: Plan,
    heads_tape: Vec<HeadTape>,
}

#[derive(Debug)]
enum Plan {
    Softmax,
    Fold {
        slots: usize,
        transition: TransitionOp,
        queues: usize,
        normalized: bool,
        /// Shared control vectors (N × slots) or one set per head.
        phis: PhiSet,
        learned: Learned,
    },
}

#[derive(Debug)]
enum PhiSet {
    Shared(Vec<f64>),
    PerHead(Vec<Vec<f64>>),
}

impl PhiSet {
    fn for_head(&self, h: usize) -> &[f64] {
        match self {
            PhiSet::Shared(p) => p,
            PhiSet::PerHead(p) => &p[h],
        }
    }
}

#[derive(Debug)]
enum Learned {
    None,
    Linformer { projection: Matrix },
    Mlp { w_phi: Matrix, activation: Activation, z: Vec<f64>, clamp: Option<f64> },
}

#[derive(Debug, Default)]
struct HeadTape {
    views: Vec<View>,
    /// Readout probabilities, one row per query.
    probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(super) struct View {
    pub(super) kbar: Vec<f64>,
    pub(super) vbar: Vec<f64>,
    /// Normalizer used for the division (zero sums replaced by one).
    pub(super) norm: Option<Vec<f64>>,
}

pub(super) fn split_heads(m: &Matrix, heads: usize, d_head: usize) -> Vec<Vec<f64>> {
    let rows = m.rows();
    (0..heads)
        .map(|h| {
            let mut out = Vec::with_capacity(rows * d_head);
            for i in 0..rows {
                out.extend_from_slice(&m.row(i)[h * d_head..(h + 1) * d_head]);
            }
            out
        })
        .collect()
}

pub(super) fn merge_head(dst: &mut Matrix, h: usize, d_head: usize, src: &[f64]) {
    for i in 0..dst.rows() {
        dst.row_mut(i)[h * d_head..(h + 1) * d_head].copy_from_slice(&src[i * d_head..(i + 1) * d_head]);
    }
}

pub(super) fn project(x: &Matrix, w: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    gemm(x.as_slice(), x.rows(), x.cols(), w.as_slice(), w.cols(), out.as_mut_slice());
    out
}

/// Control vectors for the whole key/value sequence (rows = positions).
fn fixed_phis(strategy: &ControlStrategy, len: usize, slots: usize) -> Result<Vec<f64>> {
    let mut phis = vec![0.0; len * slots];
    for pos in 0..len {
        let phi = strategy.phi_at(pos, None, len)?.phi;
        phis[pos * slots..(pos + 1) * slots].copy_from_slice(&phi);
    }
    Ok(phis)
}

fn build_plan(cfg: &AttentionConfig, control: Control<'_>, xkv: &Matrix, kh: &[Vec<f64>]) -> Result<Plan> {
    let (d, dh, heads, nkv) = (cfg.d_model, cfg.d_head, cfg.heads, xkv.rows());
    Ok(match control {
        Control::Softmax => Plan::Softmax,
        Control::Fixed(strategy) => {
            let slots = strategy.slots(nkv);
            let queues = if matches!(strategy, ControlStrategy::Dilated { .. }) { 2 } else { 1 };
            Plan::Fold {
                slots,
                transition: strategy.transition(),
                queues,
                normalized: false,
                phis: PhiSet::Shared(fixed_phis(strategy, nkv, slots)?),
                learned: Learned::None,
            }
        }
        Control::Cluster { slots, iters, seed } => {
            if slots > nkv {
                return domain(format!("cannot cluster {nkv} keys into {slots} clusters"));
            }
            let base = SeededRng::new(seed);
            let mut per_head = Vec::with_capacity(heads);
            for (h, keys) in kh.iter().enumerate() {
                let keys = Matrix::from_vec(nkv, dh, keys.clone())?;
                let membership = kmeans(&keys, slots, iters, &mut base.fork(h as u64))?.membership;
                per_head.push(fixed_phis(&ControlStrategy::Cluster { membership }, nkv, slots)?);
            }
            Plan::Fold {
                slots,
                transition: TransitionOp::Identity,
                queues: 1,
                normalized: false,
                phis: PhiSet::PerHead(per_head),
                learned: Learned::None,
            }
        }
        Control::Linformer(projection) => {
            let slots = projection.rows();
            if nkv > projection.cols() {
                return domain(format!("linformer covers {} positions, got {nkv}", projection.cols()));
            }
            let mut phis = vec![0.0; nkv * slots];
            for t in 0..nkv {
                for l in 0..slots {
                    phis[t * slots + l] = projection[(l, t)];
                }
            }
            Plan::Fold {
                slots,
                transition: TransitionOp::Identity,
                queues: 1,
                normalized: false,
                phis: PhiSet::Shared(phis),
                learned: Learned::Linformer { projection: projection.clone() },
            }
        }
        Control::Mlp { w_phi, activation } => {
            let slots = w_phi.rows();
            if w_phi.cols() != d {
                return domain("W_phi must have d_model columns");
            }
            let clamp = if activation == Activation::Exp { cfg.exp_clamp } else { None };
            let mut z = vec![0.0; nkv * slots];
            gemm_nt_acc(xkv.as_slice(), nkv, d, w_phi.as_slice(), slots, &mut z);
            let phis: Vec<f64> = z
                .iter()
                .map(|&zi| activation.apply(clamp.map_or(zi, |c| zi.clamp(-c, c))))
                .collect();
            if !phis.iter().all(|a| a.is_finite()) {
                return numeric("control activation overflowed");
            }
            Plan::Fold {
                slots,
                transition: TransitionOp::Identity,
                queues: 1,
                normalized: true,
                phis: PhiSet::Shared(phis),
                learned: Learned::Mlp { w_phi: w_phi.clone(), activation, z, clamp },
            }
        }
    })
}

/// Runs the layer on queries `xq` and key/value inputs `xkv`.
pub fn forward(cfg: &AttentionConfig, w: Weights<'_>, xq: &Matrix, xkv: &Matrix) -> Result<(Matrix, GradTape)> {
    cfg.validate()?;
    let d = cfg.d_model;
    let (heads, dh) = (cfg.heads, cfg.d_head);
    if xq.cols() != d || xkv.cols() != d {
        return domain(format!("inputs must have d_model = {d} columns"));
    }
    for m in [w.wq, w.wk, w.wv, w.wo] {
        if m.shape() != (d, d) {
            return domain(format!("projection has shape {:?}, expected {d}x{d}", m.shape()));
        }
    }
    let nq = xq.rows();
    let nkv = xkv.rows();
    if nkv == 0 || nq == 0 {
        return domain("attention over an empty sequence");
    }
    if cfg.site != Site::Cross && nq != nkv {
        return domain("self-attention needs as many queries as keys");
    }
    if nkv > cfg.max_len {
        return domain(format!("sequence length {nkv} exceeds max_len {}", cfg.max_len));
    }
    let causal = cfg.site.is_causal();
    let inv_tau = 1.0 / cfg.temperature();

    let qh = split_heads(&project(xq, w.wq), heads, dh);
    let kh = split_heads(&project(xkv, w.wk), heads, dh);
    let vh = split_heads(&project(xkv, w.wv), heads, dh);

    let plan = build_plan(cfg, w.control, xkv, &kh)?;

    let mut concat = Matrix::zeros(nq, d);
    let mut heads_tape = Vec::with_capacity(heads);
    let mut out_h = vec![0.0; nq * dh];
    for h in 0..heads {
        let io = HeadIo { q: &qh[h], k: &kh[h], v: &vh[h], nq, nkv, dh, causal, inv_tau };
        let tape = match &plan {
            Plan::Softmax => softmax_forward(&io, &mut out_h),
            Plan::Fold { slots, transition, queues, normalized, phis, .. } => fold_forward(
                &io,
                &FoldSpec { phis: phis.for_head(h), slots: *slots, transition: *transition, queues: *queues, normalized: *normalized },
                &mut out_h,
            ),
        };
        merge_head(&mut concat, h, dh, &out_h);
        heads_tape.push(tape);
    }
    let y = project(&concat, w.wo);
    if !y.is_finite() {
        return numeric("attention output is not finite");
    }

    let tape = TapeData {
        site: cfg.site,
        heads,
        d_head: dh,
        inv_tau,
        wq: w.wq.clone(),
        wk: w.wk.clone(),
        wv: w.wv.clone(),
        wo: w.wo.clone(),
        xq: xq.clone(),
        xkv: xkv.clone(),
        qh,
        kh,
        vh,
        concat,
        plan,
        heads_tape,
    };
    Ok((y, GradTape { data: Some(tape) }))
}

/// Per-head memory views over a whole key/value sequence, as read by a
/// non-causal site.
pub(super) fn sequence_views(cfg: &AttentionConfig, w: Weights<'_>, xkv: &Matrix) -> Result<Vec<View>> {
    let (heads, dh, nkv) = (cfg.heads, cfg.d_head, xkv.rows());
    if nkv == 0 || xkv.cols() != cfg.d_model {
        return domain("key/value sequence must be nonempty with d_model columns");
    }
    let kh = split_heads(&project(xkv, w.wk), heads, dh);
    let vh = split_heads(&project(xkv, w.wv), heads, dh);
    let plan = build_plan(cfg, w.control, xkv, &kh)?;
    Ok((0..heads)
        .map(|h| match &plan {
            Plan::Softmax => View { kbar: kh[h].clone(), vbar: vh[h].clone(), norm: None },
            Plan::Fold { slots, transition, queues, normalized, phis, .. } => {
                let io = HeadIo { q: &[], k: &kh[h], v: &vh[h], nq: 0, nkv, dh, causal: false, inv_tau: 1.0 };
                let spec = FoldSpec { phis: phis.for_head(h), slots: *slots, transition: *transition, queues: *queues, normalized: *normalized };
                fold_forward(&io, &spec, &mut []).views.pop().expect("non-causal fold yields one view")
            }
        })
        .collect())
}

/// Gradients of `sum(dout ⊙ forward(...))` with respect to every parameter
/// and both inputs.
pub fn backward(tape: &mut GradTape, dout: &Matrix) -> Result<AttentionGrads> {
    let t = tape.data.take().ok_or_else(|| Error::Usage("gradient tape already consumed".into()))?;
    let d = t.wo.rows();
    let nq = t.xq.rows();
    let nkv = t.xkv.rows();
    let dh = t.d_head;
    if dout.shape() != (nq, d) {
        return domain(format!("dout has shape {:?}, expected {nq}x{d}", dout.shape()));
    }
    let causal = t.site.is_causal();

    let mut dwo = Matrix::zeros(d, d);
    gemm_tn_acc(t.concat.as_slice(), nq, d, dout.as_slice(), d, dwo.as_mut_slice());
    let mut dconcat = Matrix::zeros(nq, d);
    gemm_nt_acc(dout.as_slice(), nq, d, t.wo.as_slice(), d, dconcat.as_mut_slice());
    let dcat_h = split_heads(&dconcat, t.heads, dh);

    let mut dq = Matrix::zeros(nq, d);
    let mut dk = Matrix::zeros(nkv, d);
    let mut dv = Matrix::zeros(nkv, d);
    let mut dphi_total: Option<Vec<f64>> = None;

    for h in 0..t.heads {
        let io = HeadIo { q: &t.qh[h], k: &t.kh[h], v: &t.vh[h], nq, nkv, dh, causal, inv_tau: t.inv_tau };
        let mut g = HeadGrads { dq: vec![0.0; nq * dh], dk: vec![0.0; nkv * dh], dv: vec![0.0; nkv * dh], dphi: None };
        match &t.plan {
            Plan::Softmax => softmax_backward(&io, &t.heads_tape[h], &dcat_h[h], &mut g),
            Plan::Fold { slots, transition, queues, normalized, phis, learned } => {
                if !matches!(learned, Learned::None) {
                    g.dphi = Some(vec![0.0; nkv * slots]);
                }
                fold_backward(
                    &io,
                    &FoldSpec { phis: phis.for_head(h), slots: *slots, transition: *transition, queues: *queues, normalized: *normalized },
                    &t.heads_tape[h],
                    &dcat_h[h],
                    &mut g,
                );
            }
        }
        merge_head(&mut dq, h, dh, &g.dq);
        merge_head(&mut dk, h, dh, &g.dk);
        merge_head(&mut dv, h, dh, &g.dv);
        if let Some(dphi) = g.dphi {
            match dphi_total.as_mut() {
                Some(total) => axpy(1.0, &dphi, total),
                None => dphi_total = Some(dphi),
            }
        }
    }

    let mut dwq = Matrix::zeros(d, d);
    let mut dwk = Matrix::zeros(d, d);
    let mut dwv = Matrix::zeros(d, d);
    gemm_tn_acc(t.xq.as_slice(), nq, d, dq.as_slice(), d, dwq.as_mut_slice());
    gemm_tn_acc(t.xkv.as_slice(), nkv, d, dk.as_slice(), d, dwk.as_mut_slice());
    gemm_tn_acc(t.xkv.as_slice(), nkv, d, dv.as_slice(), d, dwv.as_mut_slice());
    let mut dxq = Matrix::zeros(nq, d);
    gemm_nt_acc(dq.as_slice(), nq, d, t.wq.as_slice(), d, dxq.as_mut_slice());
    let mut dxkv = Matrix::zeros(nkv, d);
    gemm_nt_acc(dk.as_slice(), nkv, d, t.wk.as_slice(), d, dxkv.as_mut_slice());
    gemm_nt_acc(dv.as_slice(), nkv, d, t.wv.as_slice(), d, dxkv.as_mut_slice());

    let control = match &t.plan {
        Plan::Fold { slots, learned, .. } => match learned {
            Learned::None => None,
            Learned::Linformer { projection } => {
                let mut g = Matrix::zeros(projection.rows(), projection.cols());
                if let Some(dphi) = &dphi_total {
                    for pos in 0..nkv {
                        for l in 0..*slots {
                            g[(l, pos)] = dphi[pos * slots + l];
                        }
                    }
                }
                Some(g)
            }
            Learned::Mlp { w_phi, activation, z, clamp } => {
                let dphi = dphi_total.as_ref().expect("learned control has dphi");
                let mut dz = vec![0.0; nkv * slots];
                for (i, dzi) in dz.iter_mut().enumerate() {
                    let raw = z[i];
                    let (zc, live) = match clamp {
                        Some(c) if raw.abs() > *c => (raw.clamp(-c, *c), false),
                        _ => (raw, true),
                    };
                    if live {
                        *dzi = dphi[i] * activation.derivative(zc, activation.apply(zc));
                    }
                }
                let mut g = Matrix::zeros(*slots, d);
                gemm_tn_acc(&dz, nkv, *slots, t.xkv.as_slice(), d, g.as_mut_slice());
                gemm_acc(&dz, nkv, *slots, w_phi.as_slice(), d, dxkv.as_mut_slice());
                Some(g)
            }
        },
        Plan::Softmax => None,
    };

    Ok(AttentionGrads { wq: dwq, wk: dwk, wv: dwv, wo: dwo, control, dxq, dxkv })
}

struct HeadIo<'a> {
    q: &'a [f64],
    k: &'a [f64],
    v: &'a [f64],
    nq: usize,
    nkv: usize,
    dh: usize,
    causal: bool,
    inv_tau: f64,
}

struct FoldSpec<'a> {
    phis: &'a [f64],
    slots: usize,
    transition: TransitionOp,
    queues: usize,
    normalized: bool,
}

impl FoldSpec<'_> {
    fn queue_of(&self, pos: usize) -> usize {
        if self.queues == 2 {
            pos % 2
        } else {
            0
        }
    }
}

struct HeadGrads {
    dq: Vec<f64>,
    dk: Vec<f64>,
    dv: Vec<f64>,
    dphi: Option<Vec<f64>>,
}

pub(super) fn make_view(a: &[f64], b: &[f64], s: Option<&[f64]>, dh: usize) -> View {
    match s {
        None => View { kbar: a.to_vec(), vbar: b.to_vec(), norm: None },
        Some(s) => {
            let norm: Vec<f64> = s.iter().map(|&x| if x > 0.0 { x } else { 1.0 }).collect();
            let mut kbar = a.to_vec();
            let mut vbar = b.to_vec();
            for (l, &z) in norm.iter().enumerate() {
                let inv = 1.0 / z;
                kbar[l * dh..(l + 1) * dh].iter_mut().for_each(|x| *x *= inv);
                vbar[l * dh..(l + 1) * dh].iter_mut().for_each(|x| *x *= inv);
            }
            View { kbar, vbar, norm: Some(norm) }
        }
    }
}

pub(super) fn read(q: &[f64], view: &View, dh: usize, inv_tau: f64, probs: &mut [f64], out: &mut [f64]) {
    crate::memory::readout_kernel(q, &view.kbar, &view.vbar, dh, inv_tau, probs, out);
}

fn fold_forward(io: &HeadIo<'_>, spec: &FoldSpec<'_>, out: &mut [f64]) -> HeadTape {
    let (dh, slots) = (io.dh, spec.slots);
    let mut a = vec![vec![0.0; slots * dh]; spec.queues];
    let mut b = vec![vec![0.0; slots * dh]; spec.queues];
    let mut s = vec![vec![0.0; slots]; spec.queues];
    let mut probs = vec![0.0; io.nq * slots];
    let mut views = Vec::with_capacity(if io.causal { io.nkv } else { 1 });

    for t in 0..io.nkv {
        let qi = spec.queue_of(t);
        spec.transition.apply(&mut a[qi], dh);
        spec.transition.apply(&mut b[qi], dh);
        let phi = &spec.phis[t * slots..(t + 1) * slots];
        let (kt, vt) = (&io.k[t * dh..(t + 1) * dh], &io.v[t * dh..(t + 1) * dh]);
        for (l, &wgt) in phi.iter().enumerate() {
            if wgt != 0.0 {
                axpy(wgt, kt, &mut a[qi][l * dh..(l + 1) * dh]);
                axpy(wgt, vt, &mut b[qi][l * dh..(l + 1) * dh]);
            }
        }
        if spec.normalized {
            axpy(1.0, phi, &mut s[qi]);
        }
        if io.causal {
            let view = make_view(&a[qi], &b[qi], spec.normalized.then_some(&s[qi][..]), dh);
            read(&io.q[t * dh..(t + 1) * dh], &view, dh, io.inv_tau, &mut probs[t * slots..(t + 1) * slots], &mut out[t * dh..(t + 1) * dh]);
            views.push(view);
        }
    }
    if !io.causal {
        let view = make_view(&a[0], &b[0], spec.normalized.then_some(&s[0][..]), dh);
        for i in 0..io.nq {
            read(&io.q[i * dh..(i + 1) * dh], &view, dh, io.inv_tau, &mut probs[i * slots..(i + 1) * slots], &mut out[i * dh..(i + 1) * dh]);
        }
        views.push(view);
    }
    HeadTape { views, probs }
}

/// Backprop of one read into view gradients and the query gradient.
#[allow(clippy::too_many_arguments)]
fn read_backward(
    q: &[f64],
    kbar: &[f64],
    vbar: &[f64],
    p: &[f64],
    dout: &[f64],
    inv_tau: f64,
    dh: usize,
    dkbar: &mut [f64],
    dvbar: &mut [f64],
    dq: &mut [f64],
) {
    let slots = p.len();
    let mut dp = vec![0.0; slots];
    let mut pd = 0.0;
    for l in 0..slots {
        dp[l] = dot(&vbar[l * dh..(l + 1) * dh], dout);
        pd += p[l] * dp[l];
    }
    for l in 0..slots {
        axpy(p[l], dout, &mut dvbar[l * dh..(l + 1) * dh]);
        let ds = p[l] * (dp[l] - pd) * inv_tau;
        if ds != 0.0 {
            axpy(ds, q, &mut dkbar[l * dh..(l + 1) * dh]);
            axpy(ds, &kbar[l * dh..(l + 1) * dh], dq);
        }
    }
}

/// Adds view gradients, mapped back through the normalization, to the raw
/// accumulators.
fn view_to_raw(view: &View, dkbar: &[f64], dvbar: &[f64], dh: usize, ga: &mut [f64], gb: &mut [f64], gs: &mut [f64]) {
    match &view.norm {
        None => {
            axpy(1.0, dkbar, ga);
            axpy(1.0, dvbar, gb);
        }
        Some(norm) => {
            for (l, &z) in norm.iter().enumerate() {
                let r = l * dh..(l + 1) * dh;
                let inv = 1.0 / z;
                axpy(inv, &dkbar[r.clone()], &mut ga[r.clone()]);
                axpy(inv, &dvbar[r.clone()], &mut gb[r.clone()]);
                gs[l] -= (dot(&dkbar[r.clone()], &view.kbar[r.clone()]) + dot(&dvbar[r.clone()], &view.vbar[r])) * inv;
            }
        }
    }
}

fn fold_backward(io: &HeadIo<'_>, spec: &FoldSpec<'_>, tape: &HeadTape, dout: &[f64], g: &mut HeadGrads) {
    let (dh, slots) = (io.dh, spec.slots);
    let mut ga = vec![vec![0.0; slots * dh]; spec.queues];
    let mut gb = vec![vec![0.0; slots * dh]; spec.queues];
    let mut gs = vec![vec![0.0; slots]; spec.queues];
    let mut dkbar = vec![0.0; slots * dh];
    let mut dvbar = vec![0.0; slots * dh];

    if !io.causal {
        let view = &tape.views[0];
        for i in 0..io.nq {
            read_backward(
                &io.q[i * dh..(i + 1) * dh],
                &view.kbar,
                &view.vbar,
                &tape.probs[i * slots..(i + 1) * slots],
                &dout[i * dh..(i + 1) * dh],
                io.inv_tau,
                dh,
                &mut dkbar,
                &mut dvbar,
                &mut g.dq[i * dh..(i + 1) * dh],
            );
        }
        view_to_raw(view, &dkbar, &dvbar, dh, &mut ga[0], &mut gb[0], &mut gs[0]);
    }

    for t in (0..io.nkv).rev() {
        let qi = spec.queue_of(t);
        if io.causal {
            let view = &tape.views[t];
            dkbar.iter_mut().for_each(|x| *x = 0.0);
            dvbar.iter_mut().for_each(|x| *x = 0.0);
            read_backward(
                &io.q[t * dh..(t + 1) * dh],
                &view.kbar,
                &view.vbar,
                &tape.probs[t * slots..(t + 1) * slots],
                &dout[t * dh..(t + 1) * dh],
                io.inv_tau,
                dh,
                &mut dkbar,
                &mut dvbar,
                &mut g.dq[t * dh..(t + 1) * dh],
            );
            view_to_raw(view, &dkbar, &dvbar, dh, &mut ga[qi], &mut gb[qi], &mut gs[qi]);
        }
        let phi = &spec.phis[t * slots..(t + 1) * slots];
        let (kt, vt) = (&io.k[t * dh..(t + 1) * dh], &io.v[t * dh..(t + 1) * dh]);
        let (dkt, dvt) = (&mut g.dk[t * dh..(t + 1) * dh], &mut g.dv[t * dh..(t + 1) * dh]);
        for (l, &wgt) in phi.iter().enumerate() {
            if wgt != 0.0 {
                axpy(wgt, &ga[qi][l * dh..(l + 1) * dh], dkt);
                axpy(wgt, &gb[qi][l * dh..(l + 1) * dh], dvt);
            }
        }
        if let Some(dphi) = g.dphi.as_mut() {
            for l in 0..slots {
                let mut val = dot(&ga[qi][l * dh..(l + 1) * dh], kt) + dot(&gb[qi][l * dh..(l + 1) * dh], vt);
                if spec.normalized {
                    val += gs[qi][l];
                }
                dphi[t * slots + l] += val;
            }
        }
        spec.transition.apply_transpose(&mut ga[qi], dh);
        spec.transition.apply_transpose(&mut gb[qi], dh);
    }
}

/// Growing memory: query `i` attends to keys `0..=i` (causal) or all keys.
fn softmax_forward(io: &HeadIo<'_>, out: &mut [f64]) -> HeadTape {
    let dh = io.dh;
    let mut probs = vec![0.0; io.nq * io.nkv];
    for i in 0..io.nq {
        let lim = if io.causal { i + 1 } else { io.nkv };
        let q = &io.q[i * dh..(i + 1) * dh];
        let p = &mut probs[i * io.nkv..i * io.nkv + lim];
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = dot(q, &io.k[j * dh..(j + 1) * dh]) * io.inv_tau;
        }
        softmax_in_place(p);
        let o = &mut out[i * dh..(i + 1) * dh];
        o.iter_mut().for_each(|x| *x = 0.0);
        for (j, &pj) in p.iter().enumerate() {
            axpy(pj, &io.v[j * dh..(j + 1) * dh], o);
        }
    }
    HeadTape { views: Vec::new(), probs }
}

fn softmax_backward(io: &HeadIo<'_>, tape: &HeadTape, dout: &[f64], g: &mut HeadGrads) {
    let dh = io.dh;
    let mut dp = vec![0.0; io.nkv];
    for i in 0..io.nq {
        let lim = if io.causal { i + 1 } else { io.nkv };
        let p = &tape.probs[i * io.nkv..i * io.nkv + lim];
        let d_o = &dout[i * dh..(i + 1) * dh];
        let q = &io.q[i * dh..(i + 1) * dh];
        let mut pd = 0.0;
        for j in 0..lim {
            dp[j] = dot(&io.v[j * dh..(j + 1) * dh], d_o);
            pd += p[j] * dp[j];
        }
        for j in 0..lim {
            axpy(p[j], d_o, &mut g.dv[j * dh..(j + 1) * dh]);
            let ds = p[j] * (dp[j] - pd) * io.inv_tau;
            if ds != 0.0 {
                axpy(ds, q, &mut g.dk[j * dh..(j + 1) * dh]);
                axpy(ds, &io.k[j * dh..(j + 1) * dh], &mut g.dq[i * dh..(i + 1) * dh]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionState, LayerControl, LayerParams};
    use crate::memory::full_attention;
    use crate::strategies::StrategyKind;

    /// Dense masked multi-head softmax attention, written independently.
    fn reference_mha(p: &LayerParams, cfg: &AttentionConfig, xq: &Matrix, xkv: &Matrix) -> Matrix {
        let q = crate::numerics::matmul(xq, &p.wq).unwrap();
        let k = crate::numerics::matmul(xkv, &p.wk).unwrap();
        let v = crate::numerics::matmul(xkv, &p.wv).unwrap();
        let dh = cfg.d_head;
        let mut cat = Matrix::zeros(xq.rows(), cfg.d_model);
        for h in 0..cfg.heads {
            for i in 0..xq.rows() {
                let lim = if cfg.site.is_causal() { i + 1 } else { xkv.rows() };
                let slice = |m: &Matrix| {
                    let rows: Vec<Vec<f64>> = (0..lim).map(|j| m.row(j)[h * dh..(h + 1) * dh].to_vec()).collect();
                    Matrix::from_rows(&rows).unwrap()
                };
                let o = full_attention(&q.row(i)[h * dh..(h + 1) * dh], &slice(&k), &slice(&v), cfg.temperature()).unwrap();
                cat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(&o);
            }
        }
        crate::numerics::matmul(&cat, &p.wo).unwrap()
    }

    fn setup(site: Site, strategy: StrategyKind, n: usize, len: usize, seed: u64) -> (AttentionConfig, LayerParams, Matrix, Matrix) {
        let cfg = AttentionConfig::new(2, 8, site, strategy, n, 16);
        let mut rng = SeededRng::new(seed);
        let p = LayerParams::init(&cfg, 0, &mut rng).unwrap();
        let xq = Matrix::random_normal(len, 8, 1.0, &mut rng);
        let xkv = if site == Site::Cross { Matrix::random_normal(len + 3, 8, 1.0, &mut rng) } else { xq.clone() };
        (cfg, p, xq, xkv)
    }

    #[test]
    fn softmax_control_matches_reference() {
        for site in [Site::EncoderSelf, Site::Causal, Site::Cross] {
            let (cfg, p, xq, xkv) = setup(site, StrategyKind::Softmax, 0, 9, 3);
            let (y, _) = forward(&cfg, p.weights(), &xq, &xkv).unwrap();
            assert!(y.max_abs_diff(&reference_mha(&p, &cfg, &xq, &xkv)) <= 1e-10);
        }
    }

    #[test]
    fn basis_fixed_control_matches_reference() {
        // Local-to-global with every position global is φ_i = e_i over a fixed memory.
        let len = 7;
        let (cfg, mut p, xq, xkv) = setup(Site::EncoderSelf, StrategyKind::LocalToGlobal { globals: (0..len).collect() }, len, len, 4);
        p.control = LayerControl::Fixed(ControlStrategy::local_to_global((0..len).collect(), len).unwrap());
        let (y, _) = forward(&cfg, p.weights(), &xq, &xkv).unwrap();
        assert!(y.max_abs_diff(&reference_mha(&p, &cfg, &xq, &xkv)) <= 1e-10);
    }

    #[test]
    fn batch_equals_streaming() {
        let kinds = [
            StrategyKind::Softmax,
            StrategyKind::Window,
            StrategyKind::Dilated,
            StrategyKind::Random { seed: 9 },
            StrategyKind::Compressive { ratio: 4 },
            StrategyKind::Linformer,
            StrategyKind::LocalToGlobal { globals: vec![0, 3] },
            StrategyKind::Mlp { activation: Activation::Exp },
            StrategyKind::Mlp { activation: Activation::Relu },
            StrategyKind::Mlp { activation: Activation::Sigmoid },
        ];
        for kind in kinds {
            let (cfg, p, xq, _) = setup(Site::Causal, kind.clone(), 4, 11, 5);
            let (y, _) = forward(&cfg, p.weights(), &xq, &xq).unwrap();
            let mut state = AttentionState::new(&cfg, p.weights().control).unwrap();
            for t in 0..xq.rows() {
                let yt = state.step(&cfg, p.weights(), xq.row(t)).unwrap();
                let diff = crate::numerics::max_abs_diff(&yt, y.row(t));
                assert!(diff <= 1e-10, "{} at {t}: {diff}", kind.name());
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let (cfg, p, xq, xkv) = setup(Site::Causal, StrategyKind::Mlp { activation: Activation::Exp }, 3, 6, 6);
        let (y, mut tape) = forward(&cfg, p.weights(), &xq, &xkv).unwrap();
        let g = backward(&mut tape, &Matrix::zeros(y.rows(), y.cols())).unwrap();
        for m in [&g.wq, &g.wk, &g.wv, &g.wo, g.control.as_ref().unwrap(), &g.dxq, &g.dxkv] {
            assert!(m.as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn non_learned_control_has_no_gradient() {
        let (cfg, p, xq, xkv) = setup(Site::Causal, StrategyKind::Window, 3, 6, 7);
        let (y, mut tape) = forward(&cfg, p.weights(), &xq, &xkv).unwrap();
        let g = backward(&mut tape, &Matrix::filled(y.rows(), y.cols(), 1.0)).unwrap();
        assert!(g.control.is_none());
    }

    #[test]
    fn tape_cannot_be_reused() {
        let (cfg, p, xq, xkv) = setup(Site::EncoderSelf, StrategyKind::Softmax, 0, 4, 8);
        let (y, mut tape) = forward(&cfg, p.weights(), &xq, &xkv).unwrap();
        let dout = Matrix::filled(y.rows(), y.cols(), 1.0);
        backward(&mut tape, &dout).unwrap();
        assert!(tape.is_consumed());
        assert!(matches!(backward(&mut tape, &dout), Err(Error::Usage(_))));
    }

    #[test]
    fn cross_memory_read_matches_batch() {
        for kind in [StrategyKind::Softmax, StrategyKind::Mlp { activation: Activation::Exp }, StrategyKind::Cluster { iters: 5, seed: 3 }] {
            let (cfg, p, xq, xkv) = setup(Site::Cross, kind, 3, 5, 9);
            let (y, _) = forward(&cfg, p.weights(), &xq, &xkv).unwrap();
            let mem = crate::attention::CrossMemory::build(&cfg, p.weights(), &xkv).unwrap();
            for i in 0..xq.rows() {
                let yi = mem.read(&cfg, p.weights(), xq.row(i)).unwrap();
                assert!(crate::numerics::max_abs_diff(&yi, y.row(i)) <= 1e-12);
            }
        }
    }
    fn loss(cfg: &AttentionConfig, p: &LayerParams, xq: &Matrix, xkv: &Matrix, dout: &Matrix) -> f64 {
        let (y, _) = forward(cfg, p.weights(), xq, xkv).unwrap();
        y.as_slice().iter().zip(dout.as_slice()).map(|(a, b)| a * b).sum()
    }

    fn rel_err(a: f64, f: f64) -> f64 {
        (a - f).abs() / a.abs().max(f.abs()).max(1e-6)
    }

    fn gradcheck(site: Site, kind: StrategyKind) -> f64 {
        let (cfg, p, xq, xkv) = setup(site, kind, 3, 6, 11);
        let mut rng = SeededRng::new(12);
        let (y, mut tape) = forward(&cfg, p.weights(), &xq, &xkv).unwrap();
        let dout = Matrix::random_normal(y.rows(), y.cols(), 1.0, &mut rng);
        let g = backward(&mut tape, &dout).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        let mut check = |analytic: &Matrix, perturb: &dyn Fn(&mut LayerParams, &mut Matrix, &mut Matrix, usize, f64)| {
            for i in 0..analytic.len() {
                let eval = |delta: f64| {
                    let (mut p2, mut xq2, mut xkv2) = (p.clone(), xq.clone(), xkv.clone());
                    perturb(&mut p2, &mut xq2, &mut xkv2, i, delta);
                    if site != Site::Cross {
                        xkv2 = xq2.clone();
                    }
                    loss(&cfg, &p2, &xq2, &xkv2, &dout)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                worst = worst.max(rel_err(analytic.as_slice()[i], fd));
            }
        };
        check(&g.wq, &|p, _, _, i, d| p.wq.as_mut_slice()[i] += d);
        check(&g.wk, &|p, _, _, i, d| p.wk.as_mut_slice()[i] += d);
        check(&g.wv, &|p, _, _, i, d| p.wv.as_mut_slice()[i] += d);
        check(&g.wo, &|p, _, _, i, d| p.wo.as_mut_slice()[i] += d);
        if let Some(gc) = &g.control {
            check(gc, &|p, _, _, i, d| p.control.learned_mut().unwrap().as_mut_slice()[i] += d);
        }
        if site == Site::Cross {
            check(&g.dxq, &|_, xq, _, i, d| xq.as_mut_slice()[i] += d);
            check(&g.dxkv, &|_, _, xkv, i, d| xkv.as_mut_slice()[i] += d);
        } else {
            let mut total = g.dxq.clone();
            total.add_scaled(&g.dxkv, 1.0);
            check(&total, &|_, xq, _, i, d| xq.as_mut_slice()[i] += d);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cases = [
            (Site::Causal, StrategyKind::Mlp { activation: Activation::Exp }),
            (Site::Causal, StrategyKind::Mlp { activation: Activation::Relu }),
            (Site::Causal, StrategyKind::Mlp { activation: Activation::Sigmoid }),
            (Site::EncoderSelf, StrategyKind::Mlp { activation: Activation::Exp }),
            (Site::Cross, StrategyKind::Mlp { activation: Activation::Sigmoid }),
            (Site::Causal, StrategyKind::Linformer),
            (Site::EncoderSelf, StrategyKind::Linformer),
            (Site::Causal, StrategyKind::Window),
            (Site::Causal, StrategyKind::Dilated),
            (Site::Causal, StrategyKind::Softmax),
            (Site::Cross, StrategyKind::Softmax),
            (Site::Cross, StrategyKind::Cluster { iters: 5, seed: 1 }),
        ];
        for (site, kind) in cases {
            let name = kind.name();
            let err = gradcheck(site, kind);
            assert!(err <= 1e-4, "{site:?} {name}: {err}");
        }
    }
}
