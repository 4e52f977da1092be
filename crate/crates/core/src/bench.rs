//! Decode-latency and state-size measurements across strategies, memory
//! sizes and sequence lengths.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{domain, numeric, Error, Result};
use crate::model::{argmax, Model, ModelKind, SiteSpec, ToyModelConfig, BOS, SEP};
use crate::strategies::{Activation, StrategyKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub strategies: Vec<StrategyKind>,
    /// Sequence lengths, ascending.
    pub lens: Vec<usize>,
    /// Memory sizes. Softmax ignores them and is measured once per length.
    pub ns: Vec<usize>,
    pub batch: usize,
    pub reps: usize,
    /// Untimed decodes of `min(N, 256)` tokens before each cell.
    pub warmup: usize,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vocab: usize,
    pub seed: u64,
    /// Worker threads; 1 keeps every cell on the calling thread.
    pub threads: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            strategies: vec![StrategyKind::Softmax, StrategyKind::Mlp { activation: Activation::Exp }, StrategyKind::Window],
            lens: vec![256, 512, 1024, 2048, 4096],
            ns: vec![32],
            batch: 16,
            reps: 3,
            warmup: 1,
            layers: 2,
            d_model: 64,
            heads: 4,
            vocab: 32,
            seed: 0,
            threads: 1,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.lens.is_empty() || self.ns.is_empty() {
            return domain("strategies, lens and ns must be nonempty");
        }
        if self.reps < 3 {
            return domain(format!("reps must be at least 3, got {}", self.reps));
        }
        if self.batch == 0 || self.threads == 0 {
            return domain("batch and threads must be positive");
        }
        if self.lens.windows(2).any(|w| w[0] > w[1]) || self.lens[0] == 0 {
            return domain("lens must be positive and sorted ascending");
        }
        if let Some(s) = self.strategies.iter().find(|s| matches!(s, StrategyKind::Cluster { .. })) {
            return domain(format!("strategy `{}` has no streaming decoder", s.name()));
        }
        for cell in self.cells() {
            self.model_config(&cell).validate()?;
        }
        Ok(())
    }

    /// (strategy, N, n) in output order.
    fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for s in &self.strategies {
            let ns: &[usize] = if *s == StrategyKind::Softmax { &[0] } else { &self.ns };
            for &n in ns {
                for &len in &self.lens {
                    out.push(Cell { strategy: s.clone(), len, n });
                }
            }
        }
        out
    }

    fn model_config(&self, cell: &Cell) -> ToyModelConfig {
        ToyModelConfig {
            kind: ModelKind::Lm,
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            vocab: self.vocab,
            max_len: cell.len,
            causal: SiteSpec::new(cell.strategy.clone(), cell.n),
            seed: self.seed,
            ..ToyModelConfig::default()
        }
    }
}

#[derive(Clone, Debug)]
struct Cell {
    strategy: StrategyKind,
    len: usize,
    n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub strategy: String,
    #[serde(rename = "N")]
    pub len: usize,
    pub n: usize,
    pub batch: usize,
    /// Per-token latency in seconds; NaN when the cell failed.
    pub latency_median_s: f64,
    pub latency_p90_s: f64,
    /// Decoder state after `N` tokens, all layers.
    pub state_bytes: usize,
    pub wall_s: f64,
}

impl BenchRecord {
    pub fn failed(&self) -> bool {
        self.latency_median_s.is_nan()
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Greedy decode of `len` tokens starting from BOS; returns the final state size.
fn decode_once(model: &Model, len: usize) -> Result<usize> {
    let mut state = model.decoder_state(None)?;
    let mut token = BOS;
    for _ in 0..len {
        let logits = model.step_logits(&mut state, token)?;
        token = argmax(&logits);
    }
    Ok(state.state_bytes())
}

/// Measurement state of one cell while the sweep runs.
struct Run<'a> {
    cell: &'a Cell,
    model: Option<Model>,
    samples: Vec<f64>,
    bytes: usize,
    wall: Duration,
}

impl Run<'_> {
    /// Calls `f` for this cell, charging its time to the cell; an error or
    /// panic retires the cell.
    fn attempt(&mut self, f: impl FnOnce(&mut Self) -> Result<()>) {
        let start = Instant::now();
        let ok = matches!(panic::catch_unwind(AssertUnwindSafe(|| f(self))), Ok(Ok(())));
        self.wall += start.elapsed();
        if !ok {
            self.model = None;
            self.samples.clear();
        }
    }

    fn record(self, spec: &BenchSpec) -> BenchRecord {
        let mut samples = self.samples;
        samples.sort_by(f64::total_cmp);
        let (median, p90, bytes) = match self.model {
            Some(_) if !samples.is_empty() => (percentile(&samples, 0.5), percentile(&samples, 0.9), self.bytes),
            _ => (f64::NAN, f64::NAN, 0),
        };
        BenchRecord {
            strategy: self.cell.strategy.name().to_string(),
            len: self.cell.len,
            n: self.cell.n,
            batch: spec.batch,
            latency_median_s: median,
            latency_p90_s: p90,
            state_bytes: bytes,
            wall_s: self.wall.as_secs_f64(),
        }
    }
}

/// Measures a group of cells with their repetitions interleaved, so a slow
/// stretch of machine time is spread over every cell instead of one.
fn run_cells(spec: &BenchSpec, cells: &[Cell]) -> Vec<BenchRecord> {
    let mut runs: Vec<Run> = cells
        .iter()
        .map(|cell| Run { cell, model: None, samples: Vec::with_capacity(spec.reps * spec.batch), bytes: 0, wall: Duration::ZERO })
        .collect();
    for run in &mut runs {
        run.attempt(|r| {
            let model = Model::new(spec.model_config(r.cell))?;
            for _ in 0..spec.warmup {
                decode_once(&model, r.cell.len.min(256))?;
            }
            r.model = Some(model);
            Ok(())
        });
    }
    for _ in 0..spec.reps {
        for run in runs.iter_mut().filter(|r| r.model.is_some()) {
            run.attempt(|r| {
                let model = r.model.as_ref().expect("live cell");
                for _ in 0..spec.batch {
                    let start = Instant::now();
                    r.bytes = decode_once(model, r.cell.len)?;
                    r.samples.push(start.elapsed().as_secs_f64() / r.cell.len as f64);
                }
                Ok(())
            });
        }
    }
    runs.into_iter().map(|r| r.record(spec)).collect()
}

/// Streaming greedy decoding of a `batch` of sequences per cell, one
/// language model per (strategy, n, N). Model construction is untimed and
/// repetitions take turns across cells. A cell that errors or panics yields
/// a record with NaN latencies and the sweep continues.
pub fn run_decode_bench(spec: &BenchSpec) -> Result<Vec<BenchRecord>> {
    spec.validate()?;
    let cells = spec.cells();
    if spec.threads == 1 {
        return Ok(run_cells(spec, &cells));
    }
    let chunk = cells.len().div_ceil(spec.threads);
    let groups: Vec<Vec<BenchRecord>> = std::thread::scope(|s| {
        let handles: Vec<_> = cells.chunks(chunk).map(|group| s.spawn(move || run_cells(spec, group))).collect();
        handles.into_iter().map(|h| h.join().expect("bench shard panicked outside a cell")).collect()
    });
    Ok(groups.into_iter().flatten().collect())
}

/// Decoder state bytes after `len` tokens, from the closed form per head:
/// `2·len·d_head` for the softmax cache, `2·n·d_head + n` for the learned
/// control (memory plus normalizer), `4·n·d_head` for the two dilated
/// queues and `2·n·d_head` otherwise. Cross-checked against a decoded
/// state; a mismatch is an error.
pub fn run_memory_audit(model: &Model, len: usize) -> Result<usize> {
    let cfg = model.config();
    if cfg.kind != ModelKind::Lm {
        return domain("the memory audit decodes a language model");
    }
    let (n, dh) = (cfg.causal.n, cfg.d_model / cfg.heads);
    let per_head = match cfg.causal.strategy {
        StrategyKind::Softmax => 2 * len * dh,
        StrategyKind::Mlp { .. } => 2 * n * dh + n,
        StrategyKind::Dilated => 4 * n * dh,
        _ => 2 * n * dh,
    };
    let analytic = cfg.layers * cfg.heads * per_head * std::mem::size_of::<f64>();
    let mut state = model.decoder_state(None)?;
    let content = cfg.vocab as u32 - SEP - 1;
    for t in 0..len {
        model.step_logits(&mut state, SEP + 1 + t as u32 % content)?;
    }
    let allocated = state.state_bytes();
    if allocated != analytic {
        return numeric(format!("decoder state holds {allocated} bytes, closed form gives {analytic}"));
    }
    Ok(analytic)
}

/// Writes records as CSV. Refuses to create a file for zero records.
pub fn emit_csv(records: &[BenchRecord], path: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return domain("no bench records to write");
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<BenchRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|rec| rec.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

/// One line per record, for terminals.
pub fn summary(records: &[BenchRecord]) -> String {
    let mut s = format!("{:<16} {:>6} {:>4} {:>14} {:>14} {:>12}\n", "strategy", "N", "n", "median s/tok", "p90 s/tok", "state bytes");
    for r in records {
        s.push_str(&format!(
            "{:<16} {:>6} {:>4} {:>14.3e} {:>14.3e} {:>12}{}\n",
            r.strategy,
            r.len,
            r.n,
            r.latency_median_s,
            r.latency_p90_s,
            r.state_bytes,
            if r.failed() { "  FAILED" } else { "" }
        ));
    }
    s
}
