use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flash::basis::{eval_basis, eval_basis_derivative};
use flash::codec::{
    decode, fit_chain, fit_history, fit_window, window_basis, CoeffMatrix, FitWindowConfig, SliceDecoder,
};
use flash::config::RunConfig;
use flash::dataset::conditioning_len;
use flash::flow::{consistency_loss, fm_loss, interpolate, total_loss, FlowSample};
use flash::model::{Architecture, Mlp, VelocityField};
use flash::rng::{stream, Domain};
use flash::sim::{
    gen_expert, rollout, window_margins, ControllerGains, Expert, ExpertParams, PlantParams, Policy, RolloutConfig,
    TaskKind,
};

fn window() -> impl Strategy<Value = FitWindowConfig> {
    (4usize..=10, 0usize..=3, 0usize..=3, 0usize..=2, 1usize..=6).prop_filter_map(
        "window must admit C1 anchors at degree 6",
        |(exec_steps, overlap_pre, overlap_post, padding, stride)| {
            let cfg = FitWindowConfig {
                exec_steps,
                overlap_pre,
                overlap_post,
                padding,
                stride,
                ..Default::default()
            };
            (cfg.validate(6).is_ok() && cfg.s_rear() < 1.0).then_some(cfg)
        },
    )
}

fn task() -> impl Strategy<Value = TaskKind> {
    prop_oneof![Just(TaskKind::MinJerk), Just(TaskKind::Sinusoid), Just(TaskKind::ViaPoints)]
}

fn expert(kind: TaskKind, cfg: &FitWindowConfig, episode: usize, seed: u64) -> Expert {
    let (pad_before, pad_after) = window_margins(cfg);
    let params = ExpertParams {
        dims: 2,
        expert_hz: cfg.expert_hz,
        duration: episode as f64 / cfg.expert_hz,
        pad_before,
        pad_after,
    };
    gen_expert(kind, &params, &mut stream(seed, Domain::Episode, 0)).unwrap()
}

fn matrix(rows: usize, cols: usize, values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| values[(i * cols + j) % values.len()])
}

fn sample(values: &[f64], tau: f64) -> FlowSample {
    let c_h = CoeffMatrix::from_normalized(matrix(3, 2, values), None).unwrap();
    let c_1 = CoeffMatrix::from_normalized(matrix(3, 2, &values[1..]), None).unwrap();
    FlowSample::new(c_h, c_1, tau, vec![values[0], tau]).unwrap()
}

fn tiny_model(seed: u64) -> Mlp {
    let arch = Architecture {
        hidden: vec![8],
        ..Architecture::new(3, 2, 2)
    };
    let mut m = Mlp::new(arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    for (i, p) in m.params_mut().iter_mut().enumerate() {
        *p += 0.1 * ((i as f64 * 0.37).sin());
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn basis_is_bounded(s in 0.0f64..=1.0, degree in 1usize..=12) {
        for v in eval_basis(s, degree).unwrap() {
            prop_assert!(v.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn basis_derivative_matches_differences(s in 0.01f64..0.99, degree in 1usize..=10) {
        let h = 1e-6;
        let d = eval_basis_derivative(s, degree).unwrap();
        let (up, down) = (eval_basis(s + h, degree).unwrap(), eval_basis(s - h, degree).unwrap());
        for j in 0..=degree {
            let fd = (up[j] - down[j]) / (2.0 * h);
            prop_assert!((fd - d[j]).abs() <= 1e-5 * d[j].abs().max(1.0), "order {j}: {fd} vs {}", d[j]);
        }
    }

    #[test]
    fn corrected_fit_is_constrained_optimum(cfg in window(), kind in task(), seed in 0u64..1000, t in 0i64..20) {
        let e = expert(kind, &cfg, 40 + cfg.steps_per_call(), seed);
        let fit = fit_window(&e.trajectory, &cfg, 6, t, true, None).unwrap();
        let ac = fit.anchors.unwrap();
        let c = fit.corrected.unwrap();
        prop_assert!((ac.a() * c.values() - ac.b()).abs().max() < 1e-9);

        let s = window_basis(&cfg, 6).unwrap();
        let q = flash::codec::extract_sparse_nodes(&e.trajectory, &cfg, t).unwrap();
        let residual = |v: &DMatrix<f64>| (s.values() * v - q.samples()).norm();
        let a = ac.a();
        let projector = DMatrix::identity(7, 7) - a.transpose() * (a * a.transpose()).try_inverse().unwrap() * a;
        let base = residual(c.values());
        let mut rng = stream(seed, Domain::Data, 99);
        for _ in 0..200 {
            let z = DMatrix::from_fn(7, 2, |_, _| rand::Rng::random_range(&mut rng, -1e-2..1e-2));
            prop_assert!(residual(&(c.values() + &projector * z)) >= base - 1e-10);
        }
    }

    #[test]
    fn chain_junctions_are_c1(cfg in window(), kind in task(), seed in 0u64..1000) {
        let segments = 3;
        let e = expert(kind, &cfg, segments * cfg.steps_per_call(), seed);
        let chain = fit_chain(&e.trajectory, &cfg, 6, 0, segments).unwrap();
        let span = cfg.span_seconds(cfg.stride as f64);
        for n in 1..segments {
            let end = decode(&chain[n - 1], &[cfg.s_rear()], span).unwrap();
            let start = decode(&chain[n], &[cfg.s_front()], span).unwrap();
            prop_assert!((&end.positions - &start.positions).abs().max() < 1e-8);
            prop_assert!((&end.velocities - &start.velocities).abs().max() < 1e-6);
        }
    }

    #[test]
    fn ridge_norm_non_increasing(values in proptest::collection::vec(-3.0f64..3.0, 16), len in 2usize..=8) {
        let history = matrix(len, 2, &values);
        let mut previous = f64::INFINITY;
        for lambda in [1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0, 3.0, 10.0] {
            let norm = fit_history(&history, 6, lambda).unwrap().values().norm();
            prop_assert!(norm <= previous * (1.0 + 1e-12));
            previous = norm;
        }
    }

    #[test]
    fn playback_speed_changes_only_velocity(
        values in proptest::collection::vec(-2.0f64..2.0, 14),
        k_eval in 0.5f64..16.0,
    ) {
        let cfg = FitWindowConfig::default();
        let c = CoeffMatrix::new(matrix(7, 2, &values), None).unwrap();
        let grid: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let nominal = decode(&c, &grid, cfg.span_seconds(cfg.stride as f64)).unwrap();
        let scaled = decode(&c, &grid, cfg.span_seconds(k_eval)).unwrap();
        prop_assert_eq!(&nominal.positions, &scaled.positions);
        let ratio = cfg.stride as f64 / k_eval;
        for (a, b) in nominal.velocities.iter().zip(scaled.velocities.iter()) {
            prop_assert!((b - a * ratio).abs() <= 1e-10 * a.abs().max(1e-300) * ratio.max(1.0));
        }
        let slice = SliceDecoder::new(&cfg, 6, k_eval, 1000.0).unwrap();
        prop_assert!((slice.span() - cfg.span_seconds(k_eval)).abs() < 1e-15);
    }

    #[test]
    fn interpolant_is_affine(values in proptest::collection::vec(-5.0f64..5.0, 8)) {
        let s = sample(&values, 0.0);
        let points: Vec<DMatrix<f64>> = (0..=10)
            .map(|i| interpolate(&s.c_h, &s.c_1, i as f64 / 10.0).unwrap().0.into_values())
            .collect();
        for w in points.windows(3) {
            prop_assert!((&w[0] - 2.0 * &w[1] + &w[2]).abs().max() < 1e-12);
        }
    }

    #[test]
    fn losses_non_negative_and_monotone_in_lambda(
        values in proptest::collection::vec(-2.0f64..2.0, 8),
        taus in proptest::collection::vec(0.0f64..=1.0, 1..6),
        seed in 0u64..100,
    ) {
        let model = tiny_model(seed);
        let batch: Vec<FlowSample> = taus.iter().enumerate()
            .map(|(i, &t)| {
                let shifted: Vec<f64> = values.iter().map(|v| v + i as f64 * 0.1).collect();
                sample(&shifted, t)
            })
            .collect();
        prop_assert!(fm_loss(&model, &batch).unwrap().loss >= 0.0);
        prop_assert!(consistency_loss(&model, &batch).unwrap().loss >= 0.0);
        let mut previous = -1.0;
        for lambda in [0.0, 0.5, 1.0, 2.0, 10.0] {
            let total = total_loss(&model, &batch, lambda).unwrap().total;
            prop_assert!(total >= previous);
            previous = total;
        }
    }

    #[test]
    fn loss_ignores_batch_order(
        values in proptest::collection::vec(-2.0f64..2.0, 8),
        taus in proptest::collection::vec(0.0f64..=1.0, 2..8),
        rotate in 1usize..8,
    ) {
        let model = tiny_model(1);
        let batch: Vec<FlowSample> = taus.iter().enumerate()
            .map(|(i, &t)| sample(&values.iter().map(|v| v * (1.0 + i as f64)).collect::<Vec<_>>(), t))
            .collect();
        let mut shuffled = batch.clone();
        shuffled.rotate_left(rotate % batch.len());
        let (a, b) = (total_loss(&model, &batch, 1.0).unwrap(), total_loss(&model, &shuffled, 1.0).unwrap());
        prop_assert!((a.total - b.total).abs() <= 1e-10 * a.total.max(1.0));
        for (x, y) in a.grad.iter().zip(&b.grad) {
            prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
        }
    }

    #[test]
    fn parameter_count_ignores_horizon(cfg in window(), dims in 1usize..=7, history in 2usize..=8) {
        let mut run = RunConfig::default();
        run.data.dims = dims;
        run.codec.history_len = history;
        let cond = conditioning_len(history, dims, 2 * dims + 1);
        let reference = run.architecture(cond).param_count();
        run.codec.window = cfg;
        prop_assert_eq!(run.architecture(cond).param_count(), reference);
        run.codec.degree = 5;
        prop_assert!(run.architecture(cond).param_count() < reference);
    }

    #[test]
    fn calls_follow_ceiling_rule(stride in 1usize..=8, episode in 16usize..200, seed in 0u64..50) {
        let cfg = FitWindowConfig { stride, ..Default::default() };
        let e = expert(TaskKind::MinJerk, &cfg, episode, seed);
        let run = RolloutConfig { episode_steps: episode, k_eval: stride as f64, replan_every: None };
        let policy = Policy::Oracle { window: cfg, degree: 6, history_len: 4, kkt: true };
        let rec = rollout(&policy, &e, &run, &PlantParams::default(), &ControllerGains::default(),
            &mut stream(seed, Domain::Rollout, 0)).unwrap();
        prop_assert_eq!(rec.calls.len(), episode.div_ceil(stride * cfg.exec_steps));
        let again = rollout(&policy, &e, &run, &PlantParams::default(), &ControllerGains::default(),
            &mut stream(seed, Domain::Rollout, 0)).unwrap();
        prop_assert!(rec.same_trajectory(&again));
    }
}
