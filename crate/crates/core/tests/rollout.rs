use flash::codec::FitWindowConfig;
use flash::rng::{stream, Domain};
use flash::sim::{
    compute_metrics, gen_expert, rollout, window_margins, ControllerGains, Expert, ExpertParams, PlantParams, Policy,
    RolloutConfig, TaskKind,
};

fn expert(kind: TaskKind, seed: u64, window: &FitWindowConfig, episode: usize) -> Expert {
    let (pad_before, pad_after) = window_margins(window);
    let params = ExpertParams {
        dims: 2,
        expert_hz: window.expert_hz,
        duration: episode as f64 / window.expert_hz,
        pad_before,
        pad_after,
    };
    gen_expert(kind, &params, &mut stream(seed, Domain::Episode, 0)).unwrap()
}

fn oracle(window: FitWindowConfig, kkt: bool) -> Policy<'static> {
    Policy::Oracle {
        window,
        degree: 6,
        history_len: 4,
        kkt,
    }
}

#[test]
fn fixed_seed_reproduces_record() {
    let w = FitWindowConfig::default();
    let e = expert(TaskKind::ViaPoints, 3, &w, 128);
    let cfg = RolloutConfig::default();
    let run = || {
        rollout(
            &oracle(w, true),
            &e,
            &cfg,
            &PlantParams::default(),
            &ControllerGains::default(),
            &mut stream(9, Domain::Rollout, 0),
        )
        .unwrap()
    };
    assert!(run().same_trajectory(&run()));
}

#[test]
fn call_count_follows_stride() {
    for k in [1, 2, 4, 8] {
        let w = FitWindowConfig {
            stride: k,
            ..Default::default()
        };
        for episode in [100, 128, 150] {
            let e = expert(TaskKind::MinJerk, 1, &w, episode);
            let cfg = RolloutConfig {
                episode_steps: episode,
                k_eval: k as f64,
                replan_every: None,
            };
            let rec = rollout(
                &oracle(w, true),
                &e,
                &cfg,
                &PlantParams::default(),
                &ControllerGains::default(),
                &mut stream(0, Domain::Rollout, 0),
            )
            .unwrap();
            assert_eq!(rec.calls.len(), episode.div_ceil(k * w.exec_steps), "k {k}, N {episode}");
            assert_eq!(rec.len(), episode * 20);
        }
    }
}

#[test]
fn oracle_beats_raw_expert_reference() {
    let w = FitWindowConfig::default();
    let cfg = RolloutConfig::default();
    for seed in 0..5 {
        let e = expert(TaskKind::MinJerk, seed, &w, 128);
        let run = |p: &Policy| {
            let r = rollout(
                p,
                &e,
                &cfg,
                &PlantParams::default(),
                &ControllerGains::default(),
                &mut stream(seed, Domain::Rollout, 0),
            )
            .unwrap();
            compute_metrics(&r).unwrap().mae_total
        };
        let smooth = run(&oracle(w, true));
        let raw = run(&Policy::ExpertHold);
        assert!(smooth < raw, "seed {seed}: oracle {smooth} vs hold {raw}");
    }
}

#[test]
fn feed_forward_reduces_sinusoid_tracking_error() {
    let w = FitWindowConfig::default();
    let cfg = RolloutConfig::default();
    let (mut on, mut off) = (0.0, 0.0);
    for seed in 0..5 {
        let e = expert(TaskKind::Sinusoid, seed, &w, 128);
        for (ff, acc) in [(true, &mut on), (false, &mut off)] {
            let gains = ControllerGains {
                velocity_ff: ff,
                ..Default::default()
            };
            let r = rollout(
                &oracle(w, true),
                &e,
                &cfg,
                &PlantParams::default(),
                &gains,
                &mut stream(seed, Domain::Rollout, 0),
            )
            .unwrap();
            *acc += compute_metrics(&r).unwrap().mae_total;
        }
    }
    assert!(on <= off * 2.0 / 3.0, "ff on {on}, off {off}");
}

#[test]
fn corrected_chunks_join_smoothly() {
    let w = FitWindowConfig::default();
    let cfg = RolloutConfig::default();
    let plant = PlantParams::default();
    for seed in 0..5 {
        let e = expert(TaskKind::ViaPoints, seed, &w, 128);
        // one control tick of the steepest commanded acceleration
        let peak_acc = (0..2560)
            .map(|i| e.profile.eval(i as f64 * plant.dt, 2).into_iter().fold(0.0, |m: f64, a| m.max(a.abs())))
            .fold(0.0, f64::max);
        let bound = peak_acc * plant.dt;
        let gap = |kkt| {
            let r = rollout(
                &oracle(w, kkt),
                &e,
                &cfg,
                &plant,
                &ControllerGains::default(),
                &mut stream(seed, Domain::Rollout, 0),
            )
            .unwrap();
            compute_metrics(&r).unwrap().junction_velocity_gap
        };
        let (smooth, rough) = (gap(true), gap(false));
        assert!(smooth <= 10.0 * bound, "seed {seed}: corrected gap {smooth}, bound {bound}");
        assert!(rough > 10.0 * bound, "seed {seed}: uncorrected gap {rough}, bound {bound}");
    }
}

#[test]
fn replanning_cadence_adds_calls() {
    let w = FitWindowConfig::default();
    let e = expert(TaskKind::MinJerk, 2, &w, 128);
    let mut cfg = RolloutConfig {
        replan_every: Some(320),
        ..Default::default()
    };
    let run = |cfg: &RolloutConfig| {
        rollout(
            &oracle(w, true),
            &e,
            cfg,
            &PlantParams::default(),
            &ControllerGains::default(),
            &mut stream(0, Domain::Rollout, 0),
        )
    };
    let rec = run(&cfg).unwrap();
    assert_eq!(rec.calls.len(), 8);
    assert!(rec.calls.iter().enumerate().all(|(i, c)| c.tick == i * 320));
    cfg.replan_every = Some(10_000);
    assert!(run(&cfg).is_err());
}

#[test]
fn unstable_plant_returns_partial_record() {
    let w = FitWindowConfig::default();
    let e = expert(TaskKind::MinJerk, 0, &w, 128);
    let plant = PlantParams {
        inertia: 1e-300,
        damping: 0.0,
        dt: 1e-3,
    };
    let rec = rollout(
        &oracle(w, true),
        &e,
        &RolloutConfig::default(),
        &plant,
        &ControllerGains::default(),
        &mut stream(0, Domain::Rollout, 0),
    )
    .unwrap();
    let step = rec.divergence.expect("plant should diverge");
    assert_eq!(rec.len(), step + 1);
    assert!(rec.len() < 2560);
}
