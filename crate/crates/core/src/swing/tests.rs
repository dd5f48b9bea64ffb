use proptest::prelude::*;

use super::*;
use crate::grid::ieee9;

fn constant_rows(values: &[f64], n: usize) -> Vec<Vec<f64>> {
    values.iter().map(|&v| vec![v; n]).collect()
}

fn nominal() -> (Network, Vec<f64>, Vec<f64>) {
    let net = ieee9();
    let p = net.generator_nominal();
    let l = net.load_nominal();
    (net, p, l)
}

/// `½ Σ M ω² + Σ_{i<j} C_ij (1 − cos(θ_i − θ_j)) − Σ P_i θ_i`; its time
/// derivative along solutions with fixed inputs is `−Σ D ω²`.
fn total_energy(net: &Network, s: &SwingState, p_gen: &[f64], loads: &[f64]) -> f64 {
    let full = net.full_angles(&s.theta);
    let c = net.coupling();
    let mut e = 0.0;
    for (g, &w) in s.omega.iter().enumerate() {
        e += 0.5 * net.inertia()[g] * w * w;
    }
    for i in 0..net.n_buses() {
        for j in (i + 1)..net.n_buses() {
            e += c[(i, j)] * (1.0 - (full[i] - full[j]).cos());
        }
    }
    for (&b, &p) in net.generators().iter().zip(p_gen) {
        e -= p * full[b];
    }
    for (&b, &l) in net.loads().iter().zip(loads) {
        e -= l * full[b];
    }
    e
}

fn step_load_run(dt: f64, t_end: f64) -> Trajectory {
    let (net, p, l) = nominal();
    let x0 = equilibrium_state(&net, &p, &l).unwrap();
    let n = (t_end / dt).round() as usize;
    let jump = (1.0 / dt).round() as usize;
    let mut loads = constant_rows(&l, n);
    for v in loads[0].iter_mut().skip(jump) {
        *v -= 0.1;
    }
    simulate(&net, &constant_rows(&p, n), &loads, &x0, dt, n).unwrap()
}

fn max_angle_gap(a: &SwingState, b: &SwingState) -> f64 {
    a.theta
        .iter()
        .zip(&b.theta)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn equilibrium_is_held_for_sixty_seconds() {
    let (net, p, l) = nominal();
    let x0 = equilibrium_state(&net, &p, &l).unwrap();
    let n = 6000;
    let traj = simulate(&net, &constant_rows(&p, n), &constant_rows(&l, n), &x0, 0.01, n).unwrap();
    assert_eq!(traj.states.len(), n + 1);
    let worst = traj
        .states
        .iter()
        .flat_map(|s| s.omega.iter())
        .fold(0.0f64, |m, w| m.max(w.abs()));
    assert!(worst <= 1e-6, "max |ω| = {worst}");
    // balanced set-points leave the slack idle
    let p_s_expected = -(p.iter().sum::<f64>() + l.iter().sum::<f64>());
    assert!((traj.slack_power[n] - p_s_expected).abs() < 1e-8);
}

#[test]
fn step_load_matches_fine_reference() {
    let t_end = 4.0;
    let coarse = step_load_run(0.01, t_end);
    let reference = step_load_run(0.001, t_end);
    let mut worst = 0.0f64;
    for k in 0..coarse.states.len() {
        worst = worst.max(max_angle_gap(&coarse.states[k], &reference.states[10 * k]));
    }
    assert!(worst <= 1e-5, "max angle error {worst}");
}

#[test]
fn halving_dt_quarters_the_error() {
    let t_end = 3.0;
    let reference = step_load_run(0.001, t_end);
    let end = reference.states.last().unwrap();
    let e1 = max_angle_gap(step_load_run(0.01, t_end).states.last().unwrap(), end);
    let e2 = max_angle_gap(step_load_run(0.005, t_end).states.last().unwrap(), end);
    let ratio = e1 / e2;
    assert!((3.5..=4.5).contains(&ratio), "error ratio {ratio} ({e1:.3e} / {e2:.3e})");
}

#[test]
fn algebraic_balance_holds_every_step() {
    let (net, p, l) = nominal();
    let x0 = equilibrium_state(&net, &p, &l).unwrap();
    let n = 500;
    let loads: Vec<Vec<f64>> = l
        .iter()
        .enumerate()
        .map(|(j, &v)| (0..n).map(|k| v - 0.0005 * (j + 1) as f64 * k as f64 * 0.01).collect())
        .collect();
    let gens: Vec<Vec<f64>> = p
        .iter()
        .map(|&v| (0..n).map(|k| v + 0.1 * (k as f64 * 0.02).sin()).collect())
        .collect();
    let traj = simulate(&net, &gens, &loads, &x0, 0.01, n).unwrap();
    for (k, s) in traj.states.iter().enumerate() {
        let f = net.power_injection(&net.full_angles(&s.theta)).unwrap();
        let held = k.saturating_sub(1);
        for (j, &b) in net.loads().iter().enumerate() {
            assert!((f[b] - loads[j][held]).abs() <= 1e-8, "step {k}");
        }
        for &b in net.algebraic() {
            if !net.loads().contains(&b) {
                assert!(f[b].abs() <= 1e-8);
            }
        }
        assert!((traj.slack_power[k] - f[net.slack()]).abs() < 1e-14);
    }
}

#[test]
fn total_energy_decays_with_frozen_inputs() {
    let (net, p, l) = nominal();
    let mut x0 = equilibrium_state(&net, &p, &l).unwrap();
    x0.omega = vec![0.05, -0.08];
    let n = 3000;
    let traj = simulate(&net, &constant_rows(&p, n), &constant_rows(&l, n), &x0, 0.01, n).unwrap();
    let energy: Vec<f64> = traj.states.iter().map(|s| total_energy(&net, s, &p, &l)).collect();
    for k in 0..n {
        assert!(energy[k + 1] <= energy[k] + 1e-9, "energy rose at step {k}");
    }
    assert!(energy[n] < energy[0]);
}

#[test]
fn initial_load_angles_are_resolved() {
    let (net, p, l) = nominal();
    let mut x0 = equilibrium_state(&net, &p, &l).unwrap();
    let truth = x0.clone();
    for &b in net.algebraic() {
        x0.theta[net.non_slack_slot(b).unwrap()] += 0.02;
    }
    let traj = simulate(&net, &constant_rows(&p, 1), &constant_rows(&l, 1), &x0, 0.01, 1).unwrap();
    assert!(max_angle_gap(&traj.states[0], &truth) < 1e-9);
}

#[test]
fn rejects_bad_inputs() {
    let (net, p, l) = nominal();
    let x0 = equilibrium_state(&net, &p, &l).unwrap();
    let short = simulate(&net, &constant_rows(&p, 3), &constant_rows(&l, 4), &x0, 0.01, 4);
    assert!(matches!(short, Err(SwingError::DimensionMismatch { .. })));
    let mut bad = x0.clone();
    bad.omega[0] = f64::NAN;
    let r = simulate(&net, &constant_rows(&p, 4), &constant_rows(&l, 4), &bad, 0.01, 4);
    assert!(matches!(r, Err(SwingError::Initialization(_))));
    // loads far beyond the network transfer capacity
    let heavy: Vec<f64> = l.iter().map(|v| v * 40.0).collect();
    let r = simulate(&net, &constant_rows(&p, 4), &constant_rows(&heavy, 4), &x0, 0.01, 4);
    assert!(matches!(r, Err(SwingError::Initialization(_))));
}

#[test]
fn evaluation_constant_schedule_closed_form() {
    let (net, p, l) = nominal();
    let x0 = equilibrium_state(&net, &p, &l).unwrap();
    let n = 200;
    let dt = 0.01;
    let traj = simulate(&net, &constant_rows(&p, n), &constant_rows(&l, n), &x0, dt, n).unwrap();
    let c = [0.3, 0.6, 0.8];
    let p_s = traj.slack_power[0];
    let m = evaluate_schedule(&traj, &c, 0.05, 5e-4);
    let expected = n as f64 * dt * (c[0] * p[0] + c[1] * p[1] + c[2] * p_s.abs());
    assert!((m.cost - expected).abs() < 1e-8 * expected.abs().max(1.0));
    assert_eq!(m.max_freq_violation_hz, 0.0);
    assert_eq!(m.max_ramp_violation, 0.0);
}

#[test]
fn evaluation_reports_violations_in_hz() {
    let (net, p, l) = nominal();
    let mut x0 = equilibrium_state(&net, &p, &l).unwrap();
    x0.omega = vec![hz_to_rad(0.05), 0.0];
    let n = 4;
    let mut gens = constant_rows(&p, n);
    gens[1][2] += 0.01;
    let traj = simulate(&net, &gens, &constant_rows(&l, n), &x0, 0.01, n).unwrap();
    let m = evaluate_schedule(&traj, &[0.1, 0.1, 0.1], 0.0, 5e-4);
    assert!((m.max_abs_freq_hz - 0.05).abs() < 1e-12);
    assert!((m.max_freq_violation_hz - 0.05).abs() < 1e-12);
    assert!((m.max_ramp_violation - (0.01 - 5e-4)).abs() < 1e-12);
    assert!((rad_to_hz(hz_to_rad(0.05)) - 0.05).abs() < 1e-16);
}

#[test]
fn csv_export_shape() {
    let (net, p, l) = nominal();
    let x0 = equilibrium_state(&net, &p, &l).unwrap();
    let traj = simulate(&net, &constant_rows(&p, 5), &constant_rows(&l, 5), &x0, 0.01, 5).unwrap();
    let mut buf = Vec::new();
    traj.write_csv(&net, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].starts_with("time,theta_2,theta_3,theta_4"));
    assert_eq!(lines[0].split(',').count(), 1 + 8 + 2 + 1 + 2);
    assert!(lines[6].ends_with(",,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn simulation_is_deterministic(w2 in -0.01f64..0.01, w3 in -0.01f64..0.01, dp in -0.2f64..0.2) {
        let (net, p, l) = nominal();
        let mut x0 = equilibrium_state(&net, &p, &l).unwrap();
        x0.omega = vec![w2, w3];
        let gens = constant_rows(&[p[0] + dp, p[1]], 300);
        let a = simulate(&net, &gens, &constant_rows(&l, 300), &x0, 0.01, 300).unwrap();
        let b = simulate(&net, &gens, &constant_rows(&l, 300), &x0, 0.01, 300).unwrap();
        prop_assert_eq!(a.states, b.states);
        prop_assert_eq!(a.slack_power, b.slack_power);
    }

    #[test]
    fn energy_non_increasing_from_random_kicks(w2 in -0.05f64..0.05, w3 in -0.05f64..0.05) {
        let (net, p, l) = nominal();
        let mut x0 = equilibrium_state(&net, &p, &l).unwrap();
        x0.omega = vec![w2, w3];
        let n = 400;
        let traj = simulate(&net, &constant_rows(&p, n), &constant_rows(&l, n), &x0, 0.01, n).unwrap();
        let e: Vec<f64> = traj.states.iter().map(|s| total_energy(&net, s, &p, &l)).collect();
        for k in 0..n {
            prop_assert!(e[k + 1] <= e[k] + 1e-9);
        }
    }
}
