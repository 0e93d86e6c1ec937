use std::f64::consts::PI;

use nalgebra::{Matrix4, Vector2};
use setspray::controller::{Approach, ControllerConfig};
use setspray::experiment::PatternSpec;
use setspray::kinematics::JointVector;
use setspray::pattern::LawnMowerPattern;
use setspray::simulator::{
    calibrate_speed, read_trace_csv, run, spray_point, write_trace_csv, SimConfig, SimError,
    SimTrace,
};
use setspray::tasks::{fov_sigma_for_angle, Flat};

const SURFACE: Flat = Flat { c: -0.45 };

fn pattern(r: f64, l: f64, u: f64) -> LawnMowerPattern {
    PatternSpec::centered(r, l).build(u, 2).unwrap()
}

fn simulate(p: &LawnMowerPattern, approach: Approach) -> SimTrace {
    let sim = SimConfig::for_pattern(p, &SURFACE, 0.3).unwrap();
    run(
        &sim,
        &ControllerConfig::with_approach(approach),
        p,
        &SURFACE,
    )
    .unwrap()
}

fn lap_oracle(r: f64, l: f64) -> f64 {
    2.0 * (2.0 * PI * r + 2.0 * l)
}

#[test]
fn standard_run_matches_reference_times_and_path() {
    let t = simulate(&pattern(0.07, 0.3, 0.15), Approach::St);
    assert!((t.metrics.completion_time - 13.87).abs() <= 0.02);
    assert!((t.metrics.ee_path_length - 2.08).abs() <= 0.01 * 2.08);
    assert!(
        (t.metrics.ee_path_length - lap_oracle(0.07, 0.3)).abs() <= 0.01 * lap_oracle(0.07, 0.3)
    );

    let t = simulate(&pattern(0.16, 0.1, 0.05), Approach::St);
    assert!((t.metrics.completion_time - 48.22).abs() <= 0.05);
}

#[test]
fn set_based_path_is_shorter_and_cheaper() {
    for (r, l) in [(0.07, 0.3), (0.16, 0.1)] {
        let p = pattern(r, l, 0.15);
        let st = simulate(&p, Approach::St).metrics;
        let a = simulate(&p, Approach::A).metrics;
        assert!(a.ee_path_length < st.ee_path_length);
        assert!(a.energy_proxy < st.energy_proxy);
    }
}

#[test]
fn spray_point_tracks_pattern() {
    for approach in Approach::ALL {
        for u in [0.15, 0.05] {
            let t = simulate(&pattern(0.12, 0.2, u), approach);
            let (pos, dist) = t.tracking_errors(0.0);
            assert!(pos < 5e-3, "{approach} U={u}: {pos}");
            assert!(dist < 2e-3, "{approach} U={u}: {dist}");
        }
    }
}

#[test]
fn closed_loop_fov_limits() {
    let limit = fov_sigma_for_angle(20f64.to_radians());
    for approach in [Approach::A, Approach::B, Approach::C, Approach::D] {
        let t = simulate(&pattern(0.07, 0.3, 0.10), approach);
        if approach.is_smooth() {
            assert!(t.metrics.max_sigma_fov < limit, "{approach}");
        } else {
            assert!(t.metrics.max_sigma_fov <= limit + 1e-3, "{approach}");
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let p = pattern(0.12, 0.2, 0.15);
    let a = simulate(&p, Approach::D);
    let b = simulate(&p, Approach::D);
    assert_eq!(a, b);
}

#[test]
fn halving_dt_barely_changes_path() {
    for approach in [Approach::St, Approach::A] {
        let p = pattern(0.07, 0.3, 0.15);
        let mut sim = SimConfig::for_pattern(&p, &SURFACE, 0.3).unwrap();
        let cfg = ControllerConfig::with_approach(approach);
        let coarse = run(&sim, &cfg, &p, &SURFACE)
            .unwrap()
            .metrics
            .ee_path_length;
        sim.dt /= 2.0;
        let fine = run(&sim, &cfg, &p, &SURFACE)
            .unwrap()
            .metrics
            .ee_path_length;
        assert!(
            (coarse - fine).abs() / fine < 1e-3,
            "{approach}: {coarse} vs {fine}"
        );
    }
}

#[test]
fn smooth_switching_lowers_peak_acceleration() {
    let p = pattern(0.16, 0.1, 0.10);
    let acc = |a| simulate(&p, a).metrics.max_joint_accel;
    assert!(acc(Approach::C) < acc(Approach::A));
    assert!(acc(Approach::D) < acc(Approach::B));
}

#[test]
fn calibration_for_standard_is_immediate() {
    let p = pattern(0.07, 0.3, 0.15);
    let sim = SimConfig::for_pattern(&p, &SURFACE, 0.3).unwrap();
    let c = calibrate_speed(
        0.15,
        &sim,
        &ControllerConfig::with_approach(Approach::St),
        &p,
        &SURFACE,
    )
    .unwrap();
    assert_eq!(c.runs, 1);
    assert_eq!(c.speed, 0.15);
}

#[test]
fn calibration_raises_set_based_speed() {
    let p = pattern(0.07, 0.3, 0.15);
    let sim = SimConfig::for_pattern(&p, &SURFACE, 0.3).unwrap();
    let cfg = ControllerConfig::with_approach(Approach::A);
    let c1 = calibrate_speed(0.05, &sim, &cfg, &p, &SURFACE).unwrap();
    let c2 = calibrate_speed(0.10, &sim, &cfg, &p, &SURFACE).unwrap();
    assert!(c1.speed > 0.05);
    assert!((c1.trace.metrics.avg_ee_velocity - 0.05).abs() < 0.01 * 0.05);
    assert!((c2.speed / c1.speed - 2.0).abs() < 0.05 * 2.0);
    let c = calibrate_speed(0.15, &sim, &cfg, &p, &SURFACE).unwrap();
    assert!(c.speed > 0.15);
}

#[test]
fn calibration_rejects_bad_target() {
    let p = pattern(0.07, 0.3, 0.15);
    let sim = SimConfig::for_pattern(&p, &SURFACE, 0.3).unwrap();
    let err = calibrate_speed(0.0, &sim, &ControllerConfig::default(), &p, &SURFACE).unwrap_err();
    assert!(matches!(err, SimError::InvalidConfig(_)));
}

#[test]
fn far_start_diverges() {
    let p = pattern(0.07, 0.3, 0.15);
    let mut sim = SimConfig::for_pattern(&p, &SURFACE, 0.3).unwrap();
    let far = LawnMowerPattern::new(0.3, 0.07, 0.6, 0.4, 0.15, 1).unwrap();
    sim.convergence_phase = 0.0;
    let err = run(
        &sim,
        &ControllerConfig::with_approach(Approach::St),
        &far,
        &SURFACE,
    )
    .unwrap_err();
    assert!(matches!(err, SimError::Diverged { .. }), "{err:?}");
}

#[test]
fn safety_guard_flags_or_stops() {
    let p = pattern(0.07, 0.3, 0.15);
    let mut sim = SimConfig::for_pattern(&p, &SURFACE, 0.3).unwrap();
    // A 5 cm start offset corrected with a stiff gain and no pre-roll.
    let off = LawnMowerPattern::new(0.3, 0.07, p.x0 + 0.05, p.y0, 0.15, 1).unwrap();
    sim.convergence_phase = 0.0;
    let cfg = ControllerConfig {
        lambda2: Matrix4::identity() * 100.0,
        ..ControllerConfig::with_approach(Approach::St)
    };
    let flagged = run(&sim, &cfg, &off, &SURFACE).unwrap();
    assert!(!flagged.safety_events.is_empty());
    sim.stop_on_safety = true;
    assert!(matches!(
        run(&sim, &cfg, &off, &SURFACE),
        Err(SimError::SafetyStop { .. })
    ));
}

#[test]
fn pre_roll_contracts_start_error() {
    let p = pattern(0.07, 0.3, 0.15);
    let mut sim = SimConfig::for_pattern(&p, &SURFACE, 0.3).unwrap();
    sim.q_init += JointVector::from_row_slice(&[0.02, -0.02, 0.02, 0.0, 0.02, 0.0]);
    let start = Vector2::new(p.x0, p.y0);
    let before = (spray_point(&sim.chain, &sim.q_init, &SURFACE).unwrap() - start).norm();
    let t = run(
        &sim,
        &ControllerConfig::with_approach(Approach::St),
        &p,
        &SURFACE,
    )
    .unwrap();
    let after = (t.records[0].spray_point - start).norm();
    // 3 s at gain 0.4 leaves exp(-1.2) of the initial error.
    let expected = before * (-1.2f64).exp();
    assert!(
        (after - expected).abs() < 0.1 * expected,
        "{before} -> {after}"
    );
}

#[test]
fn trace_csv_round_trip() {
    let t = simulate(&pattern(0.07, 0.3, 0.15), Approach::C);
    let mut buf = Vec::new();
    write_trace_csv(&t, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with(
        "t,q1,q2,q3,q4,q5,q6,qd1,qd2,qd3,qd4,qd5,qd6,mode,sigma_fov,xi,yi,kbar,xe,ye,ze\n"
    ));
    let rows = read_trace_csv(text.as_bytes()).unwrap();
    assert_eq!(rows.len(), t.records.len());
    for (row, rec) in rows.iter().zip(&t.records) {
        assert_eq!(row.t, rec.t);
        assert_eq!(row.mode, rec.mode);
        assert_eq!(row.qdot[3], rec.qdot[3]);
        assert_eq!(row.ee[2], rec.ee_position.z);
    }
}
