//! Invariant suites shared by the `verify` command and the test targets.
//!
//! Every suite compares two independent computations on seeded random
//! instances and reports the worst discrepancy against its tolerance.

use std::fmt;

use crate::attention::{self, pseudo_query_memory, AttentionConfig, LayerParams, Site};
use crate::error::{domain, Result};
use crate::memory::{build_memory, full_attention, readout, readout_normalized, BoundedMemory, ControlVector, TransitionOp};
use crate::model::{Model, ModelKind, SiteSpec, ToyModelConfig};
use crate::numerics::{finite_diff_grad, max_abs_diff, Matrix, SeededRng};
use crate::strategies::{
    centroids_via_phi, cluster_assign, phi_mlp_prefix, phi_mlp_sequence, Activation, ControlStrategy, DilatedQueues,
    StrategyKind,
};

pub const SUITES: [&str; 7] = [
    "softmax-recovery",
    "batch-recurrent",
    "normalized-memory",
    "pseudo-query",
    "causality",
    "gradcheck",
    "normalization",
];

/// One compared quantity within a suite.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub label: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub cases: usize,
    /// Worst case, for diagnostics.
    pub worst: String,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(Check::passed)
    }

    /// Largest error over all checks.
    pub fn max_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_error).fold(0.0, f64::max)
    }

    pub fn cases(&self) -> usize {
        self.checks.iter().map(|c| c.cases).sum()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", if self.passed() { "PASS" } else { "FAIL" }, self.name)?;
        for c in &self.checks {
            write!(f, "\n    {:<24} max_err={:.3e} tol={:.0e} cases={}", c.label, c.max_error, c.tolerance, c.cases)?;
            if !c.passed() {
                write!(f, " FAIL worst: {}", c.worst)?;
            }
        }
        Ok(())
    }
}

struct Tracker {
    checks: Vec<Check>,
}

impl Tracker {
    fn new() -> Self {
        Self { checks: Vec::new() }
    }

    fn record(&mut self, label: &str, tolerance: f64, err: f64, case: impl FnOnce() -> String) {
        let idx = match self.checks.iter().position(|c| c.label == label) {
            Some(i) => i,
            None => {
                self.checks.push(Check { label: label.into(), max_error: 0.0, tolerance, cases: 0, worst: String::new() });
                self.checks.len() - 1
            }
        };
        let c = &mut self.checks[idx];
        c.cases += 1;
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if c.worst.is_empty() || err > c.max_error {
            c.max_error = err;
            c.worst = case();
        }
    }

    fn finish(self, name: &str) -> SuiteReport {
        SuiteReport { name: name.into(), checks: self.checks }
    }
}

pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    match name {
        "softmax-recovery" => softmax_recovery(seed),
        "batch-recurrent" => batch_recurrent(seed),
        "normalized-memory" => normalized_memory(seed),
        "pseudo-query" => pseudo_query(seed),
        "causality" => causality(seed),
        "gradcheck" => gradcheck(seed),
        "normalization" => normalization(seed),
        other => domain(format!("unknown suite `{other}`; expected one of {}", SUITES.join(", "))),
    }
}

fn basis(n: usize, i: usize, w: f64) -> ControlVector {
    let mut v = vec![0.0; n];
    v[i] = w;
    ControlVector::new(v)
}

/// `φ_i = e_i` with `n = N` reproduces exact softmax attention.
pub fn softmax_recovery(seed: u64) -> Result<SuiteReport> {
    let mut rng = SeededRng::new(seed);
    let mut t = Tracker::new();
    for case in 0..50 {
        let n = 1 + rng.below(64);
        let d = 1 + rng.below(32);
        let k = Matrix::random_normal(n, d, 1.0, &mut rng);
        let v = Matrix::random_normal(n, d, 1.0, &mut rng);
        let q: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let phis: Vec<_> = (0..n).map(|i| basis(n, i, 1.0)).collect();
        let mem = build_memory(&phis, &k, &v)?;
        let err = max_abs_diff(&readout(&q, &mem, 1.0)?, &full_attention(&q, &k, &v, 1.0)?);
        t.record("exact attention", 1e-10, err, || format!("case {case} N={n} d={d}"));
    }
    Ok(t.finish("softmax-recovery"))
}

fn fold(phis: &[ControlVector], k: &Matrix, v: &Matrix) -> Result<BoundedMemory> {
    let mut mem = BoundedMemory::new(phis[0].len(), k.cols());
    for (i, phi) in phis.iter().enumerate() {
        mem.step(phi, k.row(i), v.row(i), TransitionOp::Identity)?;
    }
    Ok(mem)
}

fn mem_diff(a: &BoundedMemory, b: &BoundedMemory) -> f64 {
    a.ktilde.max_abs_diff(&b.ktilde).max(a.vtilde.max_abs_diff(&b.vtilde))
}

/// Direct attention over the rows at `positions` (`None` rows are zero).
fn direct(q: &[f64], k: &Matrix, v: &Matrix, positions: &[Option<usize>]) -> Result<Vec<f64>> {
    let mut kw = Matrix::zeros(positions.len(), k.cols());
    let mut vw = Matrix::zeros(positions.len(), v.cols());
    for (slot, p) in positions.iter().enumerate() {
        if let Some(p) = p {
            kw.row_mut(slot).copy_from_slice(k.row(*p));
            vw.row_mut(slot).copy_from_slice(v.row(*p));
        }
    }
    Ok(full_attention(q, &kw, &vw, 1.0)?.into_vec())
}

/// Batch construction equals the recurrence for every strategy; window and
/// dilated also equal direct attention over their position sets.
pub fn batch_recurrent(seed: u64) -> Result<SuiteReport> {
    let mut rng = SeededRng::new(seed);
    let mut t = Tracker::new();
    for case in 0..10 {
        let len = 8 + rng.below(25);
        let d = 1 + rng.below(8);
        let n = 1 + rng.below(6);
        let k = Matrix::random_normal(len, d, 1.0, &mut rng);
        let v = Matrix::random_normal(len, d, 1.0, &mut rng);
        let x = Matrix::random_normal(len, d, 1.0, &mut rng);
        let mut globals: Vec<usize> = (0..len).collect();
        for i in (1..len).rev() {
            globals.swap(i, rng.below(i + 1));
        }
        globals.truncate(n);
        let ratio = len.div_ceil(n);
        let strategies = vec![
            ("linformer", ControlStrategy::linformer(n, len, &mut rng)),
            ("local_to_global", ControlStrategy::local_to_global(globals, n)?),
            ("random", ControlStrategy::random(rng.next_u64(), n, len)?),
            ("compressive", ControlStrategy::compressive(ratio, n)?),
            ("cluster", ControlStrategy::Cluster { membership: cluster_assign(&k, n.min(len), 10, &mut rng)? }),
            ("softmax", ControlStrategy::Softmax),
            (
                "mlp",
                ControlStrategy::Mlp {
                    w_phi: Matrix::random_normal(n, d, 1.0, &mut rng),
                    normalization: crate::strategies::Normalization::Sequence,
                    activation: Activation::Exp,
                },
            ),
        ];
        for (name, s) in &strategies {
            let phis = (0..len).map(|p| Ok(s.phi_at(p, Some(&x), len)?.phi)).collect::<Result<Vec<_>>>()?;
            let err = mem_diff(&build_memory(&phis, &k, &v)?, &fold(&phis, &k, &v)?);
            t.record("batch vs recurrence", 1e-12, err, || format!("case {case} {name}"));
        }

        // Window: the shifted queue equals the batch construction with effective φ_i = e_{n-(t-i)}.
        let mut mem = BoundedMemory::new(n, d);
        let mut e_n = vec![0.0; n];
        e_n[n - 1] = 1.0;
        for step in 0..len {
            mem.step(&e_n, k.row(step), v.row(step), TransitionOp::UpperShift)?;
            let phis: Vec<_> = (0..=step)
                .map(|i| if step - i < n { basis(n, n - 1 - (step - i), 1.0) } else { ControlVector::new(vec![0.0; n]) })
                .collect();
            let rows = |m: &Matrix| Matrix::from_rows(&(0..=step).map(|i| m.row(i).to_vec()).collect::<Vec<_>>());
            let batch = build_memory(&phis, &rows(&k)?, &rows(&v)?)?;
            let err = mem_diff(&mem, &batch);
            t.record("batch vs recurrence", 1e-12, err, || format!("case {case} window at {step}"));
            let window: Vec<Option<usize>> = (0..n).map(|slot| (step + slot + 1).checked_sub(n)).collect();
            let q = x.row(step);
            let err = max_abs_diff(&readout(q, &mem, 1.0)?, &direct(q, &k, &v, &window)?);
            t.record("window vs direct", 1e-10, err, || format!("case {case} step {step}"));
        }

        // Dilated: parity queues against direct attention over t, t-2, …
        let mut queues = DilatedQueues::new(n, d);
        for step in 0..len {
            let q = x.row(step);
            let out = queues.step_and_read(step, q, k.row(step), v.row(step), 1.0)?;
            let set: Vec<Option<usize>> = (0..n).map(|slot| (step + 2 * (slot + 1)).checked_sub(2 * n)).collect();
            let err = max_abs_diff(&out, &direct(q, &k, &v, &set)?);
            t.record("dilated vs direct", 1e-10, err, || format!("case {case} step {step}"));
        }
    }
    Ok(t.finish("batch-recurrent"))
}

/// The prefix-normalized control path (`φ_i = α_i / Σ_{j≤t} α_j` rebuilt at
/// every `t`) equals the running normalized memory at every prefix.
pub fn normalized_memory(seed: u64) -> Result<SuiteReport> {
    let mut t = Tracker::new();
    for s in 0..20 {
        let mut rng = SeededRng::new(seed.wrapping_add(s));
        let len = 2 + rng.below(30);
        let d = 1 + rng.below(8);
        let dm = 1 + rng.below(8);
        let n = 1 + rng.below(6);
        let x = Matrix::random_normal(len, dm, 1.0, &mut rng);
        let k = Matrix::random_normal(len, d, 1.0, &mut rng);
        let v = Matrix::random_normal(len, d, 1.0, &mut rng);
        let w = Matrix::random_normal(n, dm, 1.0, &mut rng);
        let mut mem = BoundedMemory::with_normalizer(n, d);
        let mut sum = crate::numerics::Vector::zeros(n);
        let mut alphas = Vec::new();
        for step in 0..len {
            let q: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let (alpha, next) = phi_mlp_prefix(x.row(step), &w, &sum, Activation::Exp)?;
            sum = next;
            mem.step(&alpha, k.row(step), v.row(step), TransitionOp::Identity)?;
            alphas.push(alpha);
            let via_memory = readout_normalized(&q, &mem, 1.0)?;
            let phis: Vec<_> = alphas
                .iter()
                .map(|a| ControlVector::new(a.iter().zip(sum.iter()).map(|(a, s)| a / s).collect()))
                .collect();
            let rows = |m: &Matrix| Matrix::from_rows(&(0..=step).map(|i| m.row(i).to_vec()).collect::<Vec<_>>());
            let via_phi = readout(&q, &build_memory(&phis, &rows(&k)?, &rows(&v)?)?, 1.0)?;
            t.record("memory vs phi path", 1e-10, max_abs_diff(&via_memory, &via_phi), || {
                format!("seed offset {s} prefix {}", step + 1)
            });
        }
    }
    Ok(t.finish("normalized-memory"))
}

/// Pseudo-query attentions equal the batch-built memory of sequence-normalized
/// ABC_MLP, including the single-slot case.
pub fn pseudo_query(seed: u64) -> Result<SuiteReport> {
    let mut rng = SeededRng::new(seed);
    let mut t = Tracker::new();
    for case in 0..20 {
        let n = if case < 5 { 1 } else { 1 + rng.below(6) };
        let len = 1 + rng.below(16);
        let dm = 1 + rng.below(8);
        let d = 1 + rng.below(8);
        let w = Matrix::random_normal(n, dm, 1.0, &mut rng);
        let x = Matrix::random_normal(len, dm, 1.0, &mut rng);
        let k = Matrix::random_normal(len, d, 1.0, &mut rng);
        let phis = phi_mlp_sequence(&x, &w, Activation::Exp)?;
        let batch = build_memory(&phis, &k, &k)?;
        let err = pseudo_query_memory(&w, &x, &k)?.max_abs_diff(&batch.ktilde);
        let label = if n == 1 { "single pseudo-query" } else { "pseudo-queries vs batch" };
        t.record(label, 1e-12, err, || format!("case {case} n={n} N={len}"));
    }
    Ok(t.finish("pseudo-query"))
}

/// Every causal-legal strategy: perturbing positions after `t` leaves the
/// outputs at positions `≤ t` unchanged.
pub fn causality(seed: u64) -> Result<SuiteReport> {
    let mut t = Tracker::new();
    let kinds = [
        StrategyKind::Window,
        StrategyKind::Dilated,
        StrategyKind::Random { seed: seed ^ 0x5eed },
        StrategyKind::Compressive { ratio: 6 },
        StrategyKind::Linformer,
        StrategyKind::Mlp { activation: Activation::Exp },
        StrategyKind::LocalToGlobal { globals: vec![1, 4] },
        StrategyKind::Softmax,
    ];
    let len = 16;
    for kind in kinds {
        let cfg = AttentionConfig::new(2, 8, Site::Causal, kind.clone(), 3, len);
        let mut rng = SeededRng::new(seed);
        let p = LayerParams::init(&cfg, 0, &mut rng)?;
        let x = Matrix::random_normal(len, 8, 1.0, &mut rng);
        let (y, _) = attention::forward(&cfg, p.weights(), &x, &x)?;
        for cut in [0, 3, 8, len - 2] {
            let mut xp = x.clone();
            for i in cut + 1..len {
                xp.row_mut(i).iter_mut().for_each(|v| *v += 3.0 * rng.normal());
            }
            let (yp, _) = attention::forward(&cfg, p.weights(), &xp, &xp)?;
            let err = (0..=cut).map(|i| max_abs_diff(y.row(i), yp.row(i))).fold(0.0, f64::max);
            t.record(kind.name(), 1e-12, err, || format!("cut {cut}"));
        }
    }
    Ok(t.finish("causality"))
}

fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(GRAD_FLOOR)
}

/// Denominator floor for relative gradient errors.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Worst relative error between analytic and central-difference gradients
/// of `Σ R ⊙ logits` over every parameter coordinate (or the first `limit`
/// per matrix when nonzero).
pub fn model_gradcheck(model: &Model, limit: usize, seed: u64) -> Result<f64> {
    let cfg = model.config().clone();
    let mut rng = SeededRng::new(seed);
    let len = cfg.max_len.min(7);
    let content = cfg.vocab as u32 - 3;
    let tokens: Vec<u32> = (0..len).map(|_| 3 + rng.below(content as usize) as u32).collect();
    let src: Vec<u32> = (0..len + 2).map(|_| 3 + rng.below(content as usize) as u32).collect();
    let src = &src[..src.len().min(cfg.max_len)];
    let run = |m: &Model| match cfg.kind {
        ModelKind::Lm => m.forward_lm(&tokens),
        ModelKind::Seq2seq => m.forward_seq2seq(src, &tokens),
    };
    let (logits, tape) = run(model)?;
    let r = Matrix::random_normal(logits.rows(), logits.cols(), 1.0, &mut rng);
    let grads = model.backward(tape, &r)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for i in 0..model.params().len() {
        let count = model.params().get(i).len();
        let take = if limit == 0 { count } else { limit.min(count) };
        for j in 0..take {
            let orig = probe.params().get(i).as_slice()[j];
            let mut f = |x: &[f64]| {
                probe.params_mut().get_mut(i).as_mut_slice()[j] = x[0];
                let (l, _) = run(&probe).expect("forward succeeds near the base point");
                l.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum::<f64>()
            };
            let fd = finite_diff_grad(&mut f, &[orig], 1e-5)?[0];
            probe.params_mut().get_mut(i).as_mut_slice()[j] = orig;
            worst = worst.max(rel_err(grads.0[i].as_slice()[j], fd));
        }
    }
    Ok(worst)
}

/// Toy configuration used by the gradient suite: two layers, `d_model = 8`.
pub fn gradcheck_config(kind: ModelKind, site: SiteSpec) -> ToyModelConfig {
    ToyModelConfig {
        kind,
        layers: 2,
        d_model: 8,
        heads: 2,
        ffn_mult: 2,
        vocab: 9,
        max_len: 10,
        encoder: site.clone(),
        causal: site.clone(),
        cross: site,
        exp_clamp: None,
        seed: 17,
        ..ToyModelConfig::default()
    }
}

/// Analytic backward against finite differences for each learned strategy
/// on two-layer toy models (every coordinate), plus a raw readout check.
pub fn gradcheck(seed: u64) -> Result<SuiteReport> {
    let mut t = Tracker::new();
    let sites = [
        ("mlp-exp", StrategyKind::Mlp { activation: Activation::Exp }),
        ("mlp-relu", StrategyKind::Mlp { activation: Activation::Relu }),
        ("mlp-sigmoid", StrategyKind::Mlp { activation: Activation::Sigmoid }),
        ("linformer", StrategyKind::Linformer),
    ];
    for (name, kind) in sites {
        for model_kind in [ModelKind::Lm, ModelKind::Seq2seq] {
            let mut cfg = gradcheck_config(model_kind, SiteSpec::new(kind.clone(), 3));
            cfg.seed = seed;
            let m = Model::new(cfg)?;
            let err = model_gradcheck(&m, 0, seed.wrapping_add(1))?;
            t.record(name, 1e-4, err, || format!("{model_kind:?}"));
        }
    }

    // Readout output coordinate with respect to the query.
    let mut rng = SeededRng::new(seed);
    let mem = BoundedMemory {
        ktilde: Matrix::random_normal(4, 3, 1.0, &mut rng),
        vtilde: Matrix::random_normal(4, 3, 1.0, &mut rng),
        norm_sum: None,
    };
    let q: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
    let fd = finite_diff_grad(|x| readout(x, &mem, 1.0).map(|o| o[0]).unwrap_or(f64::NAN), &q, 1e-6)?;
    let p = crate::numerics::softmax(&(0..4).map(|l| crate::numerics::Vector::from(mem.ktilde.row(l)).dot(&q)).collect::<Vec<_>>())?;
    let mean_v: f64 = (0..4).map(|l| p[l] * mem.vtilde[(l, 0)]).sum();
    for (j, f) in fd.iter().enumerate() {
        let mean_k: f64 = (0..4).map(|l| p[l] * mem.ktilde[(l, j)]).sum();
        let analytic: f64 = (0..4).map(|l| p[l] * (mem.ktilde[(l, j)] - mean_k) * (mem.vtilde[(l, 0)] - mean_v)).sum();
        t.record("readout", 1e-4, rel_err(analytic, *f), || format!("dq[{j}]"));
    }
    Ok(t.finish("gradcheck"))
}

/// Column sums of control vectors and compressive chunk means.
pub fn normalization(seed: u64) -> Result<SuiteReport> {
    let mut rng = SeededRng::new(seed);
    let mut t = Tracker::new();
    for case in 0..10 {
        let len = 2 + rng.below(40);
        let n = 1 + rng.below(6.min(len));
        let x = Matrix::random_normal(len, 5, 1.0, &mut rng);
        let w = Matrix::random_normal(n, 5, 1.0, &mut rng);
        let col_err = |phis: &[ControlVector]| {
            (0..n).map(|l| (phis.iter().map(|p| p[l]).sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
        };
        let phis = phi_mlp_sequence(&x, &w, Activation::Exp)?;
        t.record("mlp column sums", 1e-12, col_err(&phis), || format!("case {case}"));
        let membership = cluster_assign(&x, n, 10, &mut rng)?;
        let s = ControlStrategy::Cluster { membership: membership.clone() };
        let phis = (0..len).map(|p| Ok(s.phi_at(p, None, len)?.phi)).collect::<Result<Vec<_>>>()?;
        t.record("cluster column sums", 1e-12, col_err(&phis), || format!("case {case}"));
        let centroid_err = build_memory(&phis, &x, &x)?.ktilde.max_abs_diff(&centroids_via_phi(&x, &membership)?);
        t.record("cluster centroids", 1e-12, centroid_err, || format!("case {case}"));

        // Exact chunk means: dyadic values keep every sum exact in binary.
        let c = [1usize, 2, 4, 8][rng.below(4)];
        let slots = 1 + rng.below(5);
        let kk = Matrix::from_vec(
            slots * c,
            3,
            (0..slots * c * 3).map(|_| (rng.below(64) as f64 - 32.0) / 8.0).collect(),
        )?;
        let s = ControlStrategy::compressive(c, slots)?;
        let phis = (0..slots * c).map(|p| Ok(s.phi_at(p, None, slots * c)?.phi)).collect::<Result<Vec<_>>>()?;
        let mem = build_memory(&phis, &kk, &kk)?;
        let mut worst = 0.0f64;
        for slot in 0..slots {
            for j in 0..3 {
                let mean = (0..c).map(|i| kk[(slot * c + i, j)]).sum::<f64>() / c as f64;
                if mem.ktilde[(slot, j)] != mean {
                    worst = worst.max((mem.ktilde[(slot, j)] - mean).abs().max(f64::MIN_POSITIVE));
                }
            }
        }
        t.record("compressive chunk means", 0.0, worst, || format!("case {case} c={c}"));
    }
    Ok(t.finish("normalization"))
}
