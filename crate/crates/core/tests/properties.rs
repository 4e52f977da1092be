use abc_core::attention::{forward, AttentionConfig, AttentionState, LayerParams, Site};
use abc_core::checkpoint::Checkpoint;
use abc_core::memory::{build_memory, full_attention, readout, BoundedMemory, ControlVector, TransitionOp};
use abc_core::numerics::{Matrix, SeededRng};
use abc_core::strategies::{phi_mlp_sequence, Activation, StrategyKind};
use proptest::prelude::*;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn causal_strategy(i: usize) -> StrategyKind {
    [
        StrategyKind::Window,
        StrategyKind::Dilated,
        StrategyKind::Random { seed: 3 },
        StrategyKind::Compressive { ratio: 4 },
        StrategyKind::Linformer,
        StrategyKind::Mlp { activation: Activation::Exp },
        StrategyKind::Mlp { activation: Activation::Sigmoid },
    ][i]
        .clone()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn construction_equals_recurrence(seed in any::<u64>(), len in 1usize..20, n in 1usize..8, d in 1usize..6) {
        let mut rng = SeededRng::new(seed);
        let k = Matrix::random_normal(len, d, 1.0, &mut rng);
        let v = Matrix::random_normal(len, d, 1.0, &mut rng);
        let phis: Vec<ControlVector> =
            (0..len).map(|_| ControlVector::new((0..n).map(|_| rng.uniform(-1.0, 1.0)).collect())).collect();
        let built = build_memory(&phis, &k, &v).unwrap();
        let mut folded = BoundedMemory::new(n, d);
        for (t, phi) in phis.iter().enumerate() {
            folded.step(phi.weights(), k.row(t), v.row(t), TransitionOp::Identity).unwrap();
        }
        prop_assert!(built.ktilde.max_abs_diff(&folded.ktilde) <= 1e-12);
        prop_assert!(built.vtilde.max_abs_diff(&folded.vtilde) <= 1e-12);
    }

    #[test]
    fn basis_control_is_softmax_attention(seed in any::<u64>(), len in 1usize..32, d in 1usize..12) {
        let mut rng = SeededRng::new(seed);
        let k = Matrix::random_normal(len, d, 1.0, &mut rng);
        let v = Matrix::random_normal(len, d, 1.0, &mut rng);
        let q: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let phis: Vec<ControlVector> =
            (0..len).map(|i| ControlVector::new((0..len).map(|j| f64::from(u8::from(i == j))).collect())).collect();
        let mem = build_memory(&phis, &k, &v).unwrap();
        let got = readout(&q, &mem, 1.0).unwrap();
        let want = full_attention(&q, &k, &v, 1.0).unwrap();
        prop_assert!(max_diff(&got, &want) <= 1e-10);
    }

    #[test]
    fn mlp_sequence_controls_sum_to_one(seed in any::<u64>(), len in 1usize..16, n in 1usize..6, act in 0usize..3) {
        let mut rng = SeededRng::new(seed);
        let xs = Matrix::random_normal(len, 5, 1.0, &mut rng);
        let w = Matrix::random_normal(n, 5, 0.5, &mut rng);
        let activation = [Activation::Exp, Activation::Relu, Activation::Sigmoid][act];
        let Ok(phis) = phi_mlp_sequence(&xs, &w, activation) else {
            // ReLU can zero a whole column; that is a reported error, not a sum.
            prop_assume!(false);
            unreachable!()
        };
        for l in 0..n {
            let s: f64 = phis.iter().map(|p| p.weights()[l]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn future_tokens_do_not_change_the_past(seed in any::<u64>(), which in 0usize..7, cut in 1usize..9) {
        let cfg = AttentionConfig::new(2, 8, Site::Causal, causal_strategy(which), 4, 12);
        let mut rng = SeededRng::new(seed);
        let p = LayerParams::init(&cfg, 0, &mut rng).unwrap();
        let x = Matrix::random_normal(10, 8, 1.0, &mut rng);
        let mut y = x.clone();
        for t in cut..10 {
            y.row_mut(t).iter_mut().for_each(|v| *v += rng.normal());
        }
        let (a, _) = forward(&cfg, p.weights(), &x, &x).unwrap();
        let (b, _) = forward(&cfg, p.weights(), &y, &y).unwrap();
        for t in 0..cut {
            prop_assert!(max_diff(a.row(t), b.row(t)) <= 1e-12);
        }
    }

    #[test]
    fn streaming_equals_batch(seed in any::<u64>(), which in 0usize..7, len in 1usize..12) {
        let cfg = AttentionConfig::new(2, 8, Site::Causal, causal_strategy(which), 3, 12);
        let mut rng = SeededRng::new(seed);
        let p = LayerParams::init(&cfg, 0, &mut rng).unwrap();
        let x = Matrix::random_normal(len, 8, 1.0, &mut rng);
        let (batch, _) = forward(&cfg, p.weights(), &x, &x).unwrap();
        let mut state = AttentionState::new(&cfg, p.weights().control).unwrap();
        let size = state.float_count();
        for t in 0..len {
            let y = state.step(&cfg, p.weights(), x.row(t)).unwrap();
            prop_assert!(max_diff(&y, batch.row(t)) <= 1e-10);
            prop_assert_eq!(state.float_count(), size);
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), shapes in prop::collection::vec((0usize..5, 0usize..5), 0..5)) {
        let mut rng = SeededRng::new(seed);
        let mut c = Checkpoint::new(format!("{{\"seed\":{seed}}}"));
        for (i, (r, k)) in shapes.into_iter().enumerate() {
            c.arrays.push((format!("a{i}"), Matrix::random_normal(r, k, 10.0, &mut rng)));
        }
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, c);
    }
}
