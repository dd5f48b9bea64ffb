use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{policy_params, store_params};
use super::*;
use crate::diffcore::{LinearMap, Tensor};
use crate::grid::ieee9;
use crate::koopman::{KoopmanDims, KoopmanModel};
use crate::scenario::{sample_instance, Regime, ScenarioConfig};

fn instance(seed: u64, n_steps: usize, regime: Regime) -> ProblemInstance {
    let cfg = ScenarioConfig {
        n_steps,
        n_knots: 5.min(n_steps),
        ..ScenarioConfig::default()
    };
    sample_instance(&ieee9(), regime, seed, &cfg).unwrap()
}

/// Small stable model with random couplings.
fn toy_model(seed: u64) -> KoopmanModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = KoopmanDims {
        n_x: 11,
        n_u: 5,
        n_gen: 2,
        n_latent: 3,
        hidden: vec![6],
    };
    let mut m = KoopmanModel::new(dims, &mut rng);
    let n = m.n_psi();
    let k: Vec<f64> = (0..n * n)
        .map(|i| if i % (n + 1) == 0 { 0.9 } else { rng.random_range(-0.03..0.03) })
        .collect();
    m.k = Tensor::new(vec![n, n], k);
    m.b = Tensor::new(vec![n, 5], (0..n * 5).map(|_| rng.random_range(-0.5..0.5)).collect());
    m
}

fn toy_policy(seed: u64, n_knots: usize, n_steps: usize) -> Policy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Policy::new(&ieee9(), n_knots, n_steps, &mut rng)
}

#[test]
fn encoded_input_layout() {
    let inst = instance(1, 6000, Regime::Nominal);
    let x = encode_input(&inst, 50);
    assert_eq!(x.shape(), &[19, 50]);
    let forecast = inst.load_forecast();
    for (l, row) in forecast.iter().enumerate() {
        for j in 0..50 {
            assert_eq!(x.at2(l, j), row[j * 120]);
        }
    }
    let constants: Vec<f64> = inst.cost.iter().chain(&inst.x0_vector()).chain(&inst.p_g0).copied().collect();
    for (c, v) in constants.iter().enumerate() {
        assert!(x.row(3 + c).iter().all(|&e| e == *v));
    }
    assert_eq!(InputLayout::for_network(&ieee9()).n_channels(), 19);
}

#[test]
fn squash_limits() {
    assert_eq!(squash(0.0, 0.5, 1.5), 1.0);
    assert_eq!(squash(1e3, 0.5, 1.5), 1.5);
    assert_eq!(squash(-1e3, 0.5, 1.5), 0.5);
    assert!(squash(2.0, 0.5, 1.5) < 1.5);
}

#[test]
fn zero_output_layer_gives_the_midpoint() {
    let mut p = toy_policy(2, 50, 6000);
    let last = p.layers.last_mut().unwrap();
    last.w = Tensor::zeros(last.w.shape());
    last.b = Tensor::zeros(last.b.shape());
    let s = policy_forward(&instance(3, 6000, Regime::Nominal), &p).unwrap();
    for g in 0..2 {
        let mid = 0.5 * (p.p_min[g] + p.p_max[g]);
        assert!(s.coarse[g].iter().chain(&s.fine[g]).all(|&v| (v - mid).abs() < 1e-15));
    }
}

#[test]
fn shapes_through_the_policy() {
    let p = toy_policy(4, 50, 6000);
    let (s, secs) = infer(&instance(5, 6000, Regime::Nominal), &p).unwrap();
    assert_eq!((s.coarse.len(), s.coarse[0].len()), (2, 50));
    assert_eq!((s.fine.len(), s.fine[0].len()), (2, 6000));
    for g in 0..2 {
        assert_eq!(s.fine[g][0], s.coarse[g][0]);
        assert_eq!(s.fine[g][5999], s.coarse[g][49]);
    }
    assert!(secs > 0.0);
}

#[test]
fn rejects_mismatched_instances() {
    let p = toy_policy(6, 5, 20);
    assert!(matches!(
        policy_forward(&instance(7, 40, Regime::Nominal), &p),
        Err(DpcError::Dimension { what: "horizon", .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn outputs_stay_in_bounds(seed in 0u64..10_000, gain in 0.1f64..50.0) {
        let mut p = toy_policy(seed, 50, 6000);
        for l in &mut p.layers {
            l.w = l.w.map(|v| v * gain);
        }
        let s = policy_forward(&instance(seed + 1, 6000, Regime::Tight), &p).unwrap();
        prop_assert!(s.within_bounds());
    }

    #[test]
    fn coarse_ramp_limit_carries_to_the_fine_grid(
        start in 0.5f64..2.0,
        steps in proptest::collection::vec(-0.06f64..=0.06, 49),
    ) {
        let mut knots = vec![start];
        for d in steps {
            knots.push(knots.last().unwrap() + d);
        }
        let s = Schedule::from_coarse(vec![knots], &[-10.0], &[10.0], 6000).unwrap();
        prop_assert!(s.max_fine_step() <= 5e-4);
    }
}

#[test]
fn basis_matches_a_direct_rollout() {
    let model = toy_model(8);
    let n = 300;
    let basis = ResponseBasis::new(&model, 7, n).unwrap();
    let inst = instance(9, n, Regime::Nominal);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pi: Vec<f64> = (0..14).map(|_| rng.random_range(0.5..1.5)).collect();
    let y = basis.readouts(&basis.free_response(&model, &inst).unwrap(), &pi);

    let fine = Schedule::from_coarse(pi.chunks(7).map(<[f64]>::to_vec).collect(), &[-9.0; 2], &[9.0; 2], n).unwrap();
    let mut inputs = fine.fine.clone();
    inputs.extend(inst.load_forecast());
    let traj = model.rollout(&model.observe(&inst.x0_vector()).unwrap(), &inputs);
    let rows = basis.readout_rows().to_vec();
    for (r, &row) in rows.iter().enumerate() {
        for t in 0..n {
            let direct = traj[t + 1][row];
            assert!((y[r * n + t] - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        }
    }
}

#[test]
fn basis_transpose_is_the_adjoint() {
    let basis = ResponseBasis::new(&toy_model(11), 5, 40).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x: Vec<f64> = (0..basis.in_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let yv: Vec<f64> = (0..3 * 40).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut ax = vec![0.0; 3 * 40];
    basis.apply(&x, &mut ax);
    let mut aty = vec![0.0; x.len()];
    basis.apply_transpose(&yv, &mut aty);
    let lhs: f64 = ax.iter().zip(&yv).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
}

/// Tiny instances where every penalty is active for a random policy.
fn tiny_setup() -> (KoopmanModel, Policy, Vec<ProblemInstance>) {
    let model = toy_model(13);
    let mut policy = toy_policy(14, 5, 20);
    let insts: Vec<ProblemInstance> = (0..3).map(|s| instance(100 + s, 20, Regime::Tight)).collect();
    policy.fit_normalization(&insts);
    (model, policy, insts)
}

#[test]
fn both_loss_paths_agree() {
    let (model, policy, insts) = tiny_setup();
    let w = LossWeights::default();
    let (a, ga) = dpc_loss(&insts, &policy, &model, w, 5e-4).unwrap();
    let (b, gb) = dpc_loss_rollout(&insts, &policy, &model, w, 5e-4).unwrap();
    assert!((a - b).abs() <= 1e-10 * a.abs(), "{a} vs {b}");
    for (x, y) in ga.iter().zip(&gb) {
        let scale = x.max_abs().max(1e-12);
        let gap = x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(gap <= 1e-9 * scale);
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let (model, mut policy, insts) = tiny_setup();
    let w = LossWeights::default();
    let (_, grads) = dpc_loss(&insts, &policy, &model, w, 5e-4).unwrap();
    let base = policy_params(&policy);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for (pi, g) in grads.iter().enumerate() {
        let scale = g.max_abs().max(1e-8);
        for _ in 0..6 {
            let idx = rng.random_range(0..g.len());
            let x = base[pi].data()[idx];
            let h = 1e-6 * x.abs().max(1.0);
            let mut eval = |v: f64| {
                let mut p = base.clone();
                p[pi].data_mut()[idx] = v;
                store_params(&mut policy, &p);
                dpc_loss(&insts, &policy, &model, w, 5e-4).unwrap().0
            };
            let fd = (eval(x + h) - eval(x - h)) / (2.0 * h);
            assert!((fd - g.data()[idx]).abs() <= 1e-4 * scale, "param {pi}[{idx}]: fd {fd} vs {}", g.data()[idx]);
        }
    }
}

/// Model whose generator inputs do not move the readouts, so the readouts
/// equal the free response exactly.
fn inert_problem(n: usize, nd: usize) -> DpcProblem {
    let mut model = toy_model(16);
    model.b = Tensor::zeros(model.b.shape());
    DpcProblem::new(&model, nd, n, LossWeights::default(), 5e-4).unwrap()
}

fn prepared(free: Vec<f64>, n: usize, nd: usize, p_g0: Vec<f64>) -> PreparedInstance {
    PreparedInstance {
        features: Tensor::zeros(&[19, nd]),
        free: Tensor::new(vec![3, n], free),
        gen_cost: std::sync::Arc::new(Tensor::filled(&[2, nd], 0.1)),
        slack_cost: 0.02,
        p_g0,
        omega_bnd: crate::swing::hz_to_rad(0.05),
    }
}

#[test]
fn feasible_schedule_costs_only_its_objective() {
    let (n, nd) = (20, 5);
    let problem = inert_problem(n, nd);
    let mut free = vec![0.001; 2 * n];
    free.extend(vec![-0.3; n]);
    let prep = prepared(free, n, nd, vec![1.0, 0.8]);
    let pi = [1.0, 1.001, 1.002, 1.003, 1.004, 0.8, 0.8, 0.799, 0.798, 0.797];
    let t = problem.terms(&prep, &pi);
    assert_eq!((t.frequency, t.ramp, t.initial), (0.0, 0.0, 0.0));
    let expected = 0.1 * pi.iter().sum::<f64>() + 0.02 * 0.3 * n as f64;
    assert!((t.total() - expected).abs() < 1e-12);
}

#[test]
fn single_frequency_excursion_penalty() {
    let (n, nd) = (20, 5);
    let problem = inert_problem(n, nd);
    let v = 0.01;
    let mut free = vec![0.0; 3 * n];
    free[7] = crate::swing::hz_to_rad(0.05 + v);
    let prep = prepared(free, n, nd, vec![1.0, 0.8]);
    let pi = [1.0, 1.0, 1.0, 1.0, 1.0, 0.8, 0.8, 0.8, 0.8, 0.8];
    let t = problem.terms(&prep, &pi);
    let expected = 1e3 * (2.0 * std::f64::consts::PI * v).powi(2);
    assert!((t.frequency - expected).abs() < 1e-9 * expected);
}

#[test]
fn initial_offset_penalty() {
    let (n, nd) = (20, 5);
    let problem = inert_problem(n, nd);
    let delta = 0.03;
    let prep = prepared(vec![0.0; 3 * n], n, nd, vec![1.0, 0.8]);
    let pi = [1.0 + delta, 1.0, 1.0, 1.0, 1.0, 0.8 + delta, 0.8, 0.8, 0.8, 0.8];
    let t = problem.terms(&prep, &pi);
    assert!((t.initial - 1e4 * 2.0 * delta * delta).abs() < 1e-9);
}

#[test]
fn graph_and_tape_free_terms_agree() {
    let (model, policy, insts) = tiny_setup();
    let problem = DpcProblem::new(&model, 5, 20, LossWeights::default(), 5e-4).unwrap();
    let prep = problem.prepare_all(&model, &policy, &insts).unwrap();
    let refs: Vec<&PreparedInstance> = prep.iter().collect();
    let graph = problem.loss(&policy, &refs).unwrap();
    let tape_free: f64 = insts
        .iter()
        .zip(&prep)
        .map(|(i, p)| {
            let coarse: Vec<f64> = policy.coarse(i).unwrap().concat();
            problem.terms(p, &coarse).total()
        })
        .sum::<f64>()
        / 3.0;
    assert!((graph - tape_free).abs() <= 1e-10 * graph.abs());
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let p = toy_policy(17, 50, 6000);
    let back = Policy::from_json(&p.to_json()).unwrap();
    assert_eq!(back, p);
    let mut v: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
    v["version"] = 99.into();
    assert!(matches!(Policy::from_json(&v.to_string()), Err(DpcError::Version { found: 99, .. })));
    v["version"] = POLICY_VERSION.into();
    v["format"] = "other".into();
    assert!(matches!(Policy::from_json(&v.to_string()), Err(DpcError::WrongFormat(_))));
    let mut bad = p.clone();
    bad.input_scale.pop();
    assert!(matches!(Policy::from_json(&bad.to_json()), Err(DpcError::Corrupt(_))));
    let text = p.to_json();
    assert!(Policy::from_json(&text[..text.len() / 2]).is_err());
}

#[test]
fn inference_is_deterministic_and_fast() {
    let p = toy_policy(18, 50, 6000);
    let inst = instance(19, 6000, Regime::Nominal);
    let (a, _) = infer(&inst, &p).unwrap();
    let (b, secs) = infer(&inst, &p).unwrap();
    assert_eq!(a, b);
    assert!(secs < 0.01, "{secs}");
}

#[test]
fn training_reduces_the_loss_and_is_reproducible() {
    let model = toy_model(20);
    let net = ieee9();
    let insts: Vec<ProblemInstance> = (0..12).map(|s| instance(200 + s, 60, Regime::Nominal)).collect();
    let cfg = DpcTrainConfig {
        n_knots: 6,
        epochs: 15,
        batch_size: 4,
        lr: 5e-3,
        seed: 21,
        ..DpcTrainConfig::default()
    };
    let (p1, h1) = train_policy(&net, &insts, &model, &cfg).unwrap();
    let (p2, h2) = train_policy(&net, &insts, &model, &cfg).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(h1, h2);
    assert!(h1.epoch_loss.last().unwrap() < &h1.epoch_loss[0], "{:?}", h1.epoch_loss);
}
