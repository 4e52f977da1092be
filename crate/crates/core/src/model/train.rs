//! Cross-entropy training with Adam.

use serde::{Deserialize, Serialize};

use crate::error::{domain, numeric, Result};
use crate::model::decode::argmax;
use crate::model::tasks::{Example, TaskSampler};
use crate::model::{Grads, Model, ModelKind, ParamStore};
use crate::numerics::{Matrix, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: Some(1.0) }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros = params.zeros_like().0;
        Self { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        let c = &self.cfg;
        let scale = match c.clip {
            Some(max) => {
                let n = grads.norm();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            let p = params.get_mut(i).as_mut_slice();
            let g = grads.0[i].as_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for j in 0..p.len() {
                let gj = g[j] * scale;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                p[j] -= c.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
            }
        }
    }
}

/// Summed cross-entropy over targeted rows, its logit gradient (scaled by
/// `scale`) and the number of correct argmax predictions.
fn cross_entropy(logits: &Matrix, targets: &[Option<u32>], scale: f64) -> (f64, usize, Matrix) {
    let mut dl = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
        loss += max + sum.ln() - row[t as usize];
        if argmax(row) == t {
            correct += 1;
        }
        let d = dl.row_mut(i);
        for (j, x) in row.iter().enumerate() {
            d[j] = (x - max).exp() / sum * scale;
        }
        d[t as usize] -= scale;
    }
    (loss, correct, dl)
}

fn io(model: &Model, e: &Example) -> Result<(Matrix, super::ModelTape, Vec<Option<u32>>)> {
    Ok(match model.config().kind {
        ModelKind::Lm => {
            let (tokens, targets) = e.lm_io();
            let (l, t) = model.forward_lm(&tokens)?;
            (l, t, targets)
        }
        ModelKind::Seq2seq => {
            if e.src.is_empty() {
                return domain("seq2seq examples need a source");
            }
            let (src, tgt_in, targets) = e.seq2seq_io();
            let (l, t) = model.forward_seq2seq(&src, &tgt_in)?;
            (l, t, targets)
        }
    })
}

fn target_count(model: &Model, e: &Example) -> usize {
    match model.config().kind {
        ModelKind::Lm => e.lm_io().1.iter().flatten().count(),
        ModelKind::Seq2seq => e.tgt.len(),
    }
}

/// Mean token loss, accuracy and gradients of the mean loss over a batch.
pub fn loss_and_grads(model: &Model, batch: &[Example]) -> Result<(f64, f64, Grads)> {
    let total: usize = batch.iter().map(|e| target_count(model, e)).sum();
    if total == 0 {
        return domain("batch has no target tokens");
    }
    let scale = 1.0 / total as f64;
    let mut grads = model.params().zeros_like();
    let (mut loss, mut correct) = (0.0, 0);
    for e in batch {
        let (logits, tape, targets) = io(model, e)?;
        let (l, c, dl) = cross_entropy(&logits, &targets, scale);
        loss += l;
        correct += c;
        model.backward_into(tape, &dl, &mut grads)?;
    }
    Ok((loss * scale, correct as f64 * scale, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean next-token negative log-likelihood over target tokens.
    pub loss: f64,
    pub perplexity: f64,
    /// Teacher-forced next-token accuracy over target tokens.
    pub accuracy: f64,
    pub tokens: usize,
}

pub fn evaluate(model: &Model, examples: &[Example]) -> Result<EvalReport> {
    let (mut loss, mut correct, mut tokens) = (0.0, 0, 0);
    for e in examples {
        let (logits, _, targets) = io(model, e)?;
        let (l, c, _) = cross_entropy(&logits, &targets, 0.0);
        loss += l;
        correct += c;
        tokens += targets.iter().flatten().count();
    }
    if tokens == 0 {
        return domain("evaluation set has no target tokens");
    }
    let loss = loss / tokens as f64;
    Ok(EvalReport { loss, perplexity: loss.exp(), accuracy: correct as f64 / tokens as f64, tokens })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
}

/// Runs `steps` Adam updates on freshly sampled batches. The curve records
/// each step's training loss and accuracy.
pub fn train(
    model: &mut Model,
    sampler: &TaskSampler,
    steps: usize,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<TrainReport> {
    if batch_size == 0 {
        return domain("batch size must be positive");
    }
    let mut opt = Adam::new(model.config().optimizer.clone(), model.params());
    let mut curve = Vec::with_capacity(steps);
    for step in 1..=steps {
        let batch = sampler.sample_many(rng, batch_size);
        let (loss, accuracy, grads) = loss_and_grads(model, &batch)?;
        if !loss.is_finite() || !grads.norm().is_finite() {
            return numeric(format!("training diverged at step {step} (loss {loss})"));
        }
        opt.step(model.params_mut(), &grads);
        curve.push(CurvePoint { step, loss, accuracy });
    }
    Ok(TrainReport { curve })
}

/// Training protocol: step count, batch size and held-out set size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub eval_examples: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { steps: 2000, batch: 16, eval_examples: 64 }
    }
}

/// Positions a task example occupies in the decoder (and encoder) input.
pub fn positions_needed(kind: ModelKind, task: &crate::model::TaskSpec) -> usize {
    let src = match task.kind {
        crate::model::TaskKind::CharLm => 0,
        _ => task.max_len,
    };
    match kind {
        ModelKind::Lm if src > 0 => src + 1 + task.max_len,
        ModelKind::Lm => task.max_len,
        ModelKind::Seq2seq => task.max_len.max(src),
    }
}

/// Trains on fresh samples and evaluates on a disjoint-stream held-out set.
/// Training batches and the held-out set come from separate forks of the
/// model seed, so the whole run is a function of the configuration.
pub fn fit(model: &mut Model, task: &crate::model::TaskSpec, s: &TrainSettings) -> Result<(TrainReport, EvalReport)> {
    let cfg = model.config();
    if cfg.kind == ModelKind::Seq2seq && task.kind == crate::model::TaskKind::CharLm {
        return domain("char_lm has no source sequence; use a language model");
    }
    if task.vocab > cfg.vocab {
        return domain(format!("task vocab {} exceeds model vocab {}", task.vocab, cfg.vocab));
    }
    let need = positions_needed(cfg.kind, task);
    if need > cfg.max_len {
        return domain(format!("task needs {need} positions, model max_len is {}", cfg.max_len));
    }
    if s.eval_examples == 0 {
        return domain("eval_examples must be positive");
    }
    let sampler = task.sampler()?;
    let root = SeededRng::new(cfg.seed);
    let held_out = sampler.sample_many(&mut root.fork(2), s.eval_examples);
    let report = train(model, &sampler, s.steps, s.batch, &mut root.fork(1))?;
    let eval = evaluate(model, &held_out)?;
    Ok((report, eval))
}
