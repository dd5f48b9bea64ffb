use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::koopman::KoopmanModel;
use crate::scenario::ProblemInstance;
use crate::swing::hz_to_rad;

use super::{DpcError, Policy, ResponseBasis};

/// Penalty weights on frequency, ramp and initial-condition violations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub q_omega: f64,
    pub q_ramp: f64,
    pub q_init: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            q_omega: 1e3,
            q_ramp: 1e2,
            q_init: 1e4,
        }
    }
}

/// Weighted loss contributions of one instance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cost: f64,
    pub frequency: f64,
    pub ramp: f64,
    pub initial: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.cost + self.frequency + self.ramp + self.initial
    }
}

/// Per-instance constants of the loss.
#[derive(Clone, Debug)]
pub struct PreparedInstance {
    /// Normalized policy input.
    pub features: Tensor,
    /// Readouts under zero generator input, `n_out x N`.
    pub free: Tensor,
    /// `c_g dt Σ_t hat_j(t)`: generator cost per unit of knot `(g, j)`.
    pub gen_cost: Arc<Tensor>,
    /// `c_s dt`
    pub slack_cost: f64,
    pub p_g0: Vec<f64>,
    /// Frequency bound, rad/s.
    pub omega_bnd: f64,
}

/// Loss of the policy over a Koopman model, evaluated through a shared
/// [`ResponseBasis`].
#[derive(Clone, Debug)]
pub struct DpcProblem {
    pub basis: Arc<ResponseBasis>,
    pub weights: LossWeights,
    pub eps_rmp: f64,
    knot_mass: Vec<f64>,
}

impl DpcProblem {
    pub fn new(
        model: &KoopmanModel,
        n_knots: usize,
        n_steps: usize,
        weights: LossWeights,
        eps_rmp: f64,
    ) -> Result<Self, DpcError> {
        Ok(Self::from_basis(Arc::new(ResponseBasis::new(model, n_knots, n_steps)?), weights, eps_rmp))
    }

    pub fn from_basis(basis: Arc<ResponseBasis>, weights: LossWeights, eps_rmp: f64) -> Self {
        let plan = basis.plan();
        let mut knot_mass = vec![0.0; plan.n_knots()];
        plan.apply_transpose(&vec![1.0; plan.n_fine()], &mut knot_mass);
        Self {
            basis,
            weights,
            eps_rmp,
            knot_mass,
        }
    }

    /// Bound on consecutive knot differences; linear interpolation spreads
    /// it over at least `N / N_d` fine steps.
    pub fn coarse_ramp_bound(&self) -> f64 {
        self.eps_rmp * self.basis.n_steps() as f64 / self.basis.n_knots() as f64
    }

    /// Instance constants with an empty policy input; enough for
    /// [`DpcProblem::terms`] and for optimizing the knots directly.
    pub fn prepare_plain(&self, model: &KoopmanModel, inst: &ProblemInstance) -> Result<PreparedInstance, DpcError> {
        let n_gen = self.basis.n_gen();
        let n_knots = self.basis.n_knots();
        if inst.cost.len() != n_gen + 1 || inst.p_g0.len() != n_gen {
            return Err(DpcError::Dimension {
                what: "generators",
                expected: n_gen,
                got: inst.p_g0.len(),
            });
        }
        let free = self.basis.free_response(model, inst)?;
        let gen_cost = (0..n_gen)
            .flat_map(|g| self.knot_mass.iter().map(move |&w| inst.cost[g] * inst.dt * w))
            .collect();
        Ok(PreparedInstance {
            features: Tensor::zeros(&[0]),
            free,
            gen_cost: Arc::new(Tensor::new(vec![n_gen, n_knots], gen_cost)),
            slack_cost: inst.cost[n_gen] * inst.dt,
            p_g0: inst.p_g0.clone(),
            omega_bnd: hz_to_rad(inst.omega_bnd_hz()),
        })
    }

    pub fn prepare(
        &self,
        model: &KoopmanModel,
        policy: &Policy,
        inst: &ProblemInstance,
    ) -> Result<PreparedInstance, DpcError> {
        if policy.n_knots != self.basis.n_knots() {
            return Err(DpcError::Dimension {
                what: "policy knots",
                expected: self.basis.n_knots(),
                got: policy.n_knots,
            });
        }
        let features = policy.features(inst)?;
        Ok(PreparedInstance {
            features,
            ..self.prepare_plain(model, inst)?
        })
    }

    pub fn prepare_all(
        &self,
        model: &KoopmanModel,
        policy: &Policy,
        instances: &[ProblemInstance],
    ) -> Result<Vec<PreparedInstance>, DpcError> {
        instances.iter().map(|i| self.prepare(model, policy, i)).collect()
    }

    /// Tape-free loss terms of coarse knots `pi` (`n_gen x N_d`, row-major).
    pub fn terms(&self, prep: &PreparedInstance, pi: &[f64]) -> LossTerms {
        let n_gen = self.basis.n_gen();
        let nd = self.basis.n_knots();
        let n = self.basis.n_steps();
        let y = self.basis.readouts(&prep.free, pi);
        let w = &self.weights;
        let relu_sq = |v: f64| v.max(0.0).powi(2);
        let gen: f64 = pi.iter().zip(prep.gen_cost.data()).map(|(p, c)| p * c).sum();
        let slack: f64 = y[n_gen * n..].iter().map(|v| v.abs()).sum::<f64>() * prep.slack_cost;
        let freq: f64 = y[..n_gen * n].iter().map(|v| relu_sq(v.abs() - prep.omega_bnd)).sum();
        let rb = self.coarse_ramp_bound();
        let ramp: f64 = pi
            .chunks(nd)
            .flat_map(|row| row.windows(2).map(|d| relu_sq((d[1] - d[0]).abs() - rb)))
            .sum();
        let init: f64 = (0..n_gen).map(|g| (pi[g * nd] - prep.p_g0[g]).powi(2)).sum();
        LossTerms {
            cost: gen + slack,
            frequency: w.q_omega * freq,
            ramp: w.q_ramp * ramp,
            initial: w.q_init * init,
        }
    }

    /// Mean loss over `batch` on the tape; `params` are the policy layers.
    pub(crate) fn build(&self, g: &mut Graph, params: &[Var], policy: &Policy, batch: &[&PreparedInstance]) -> Var {
        let n_gen = self.basis.n_gen();
        let basis: Arc<dyn crate::diffcore::LinearMap> = self.basis.clone();
        let mut total: Option<Var> = None;
        for prep in batch {
            let pi = policy_graph(g, params, policy, &prep.features);
            let y = g.linear(pi, basis.clone());
            let y = g.add_const(y, &prep.free);
            let omega_rows: Vec<usize> = (0..n_gen).collect();
            let omega = g.select_rows(y, &omega_rows);
            let slack = g.select_rows(y, &[n_gen]);
            let gen = g.mul_const(pi, prep.gen_cost.clone());
            let gen = g.sum(gen);
            let loss = penalized(g, &self.weights, self.coarse_ramp_bound(), [pi, gen, omega, slack], prep);
            total = Some(match total {
                Some(t) => g.add(t, loss),
                None => loss,
            });
        }
        let total = total.expect("non-empty batch");
        g.scale(total, 1.0 / batch.len() as f64)
    }

    /// Mean loss over `batch`.
    pub fn loss(&self, policy: &Policy, batch: &[&PreparedInstance]) -> Result<f64, DpcError> {
        Ok(self.loss_and_grad(policy, batch)?.0)
    }

    /// Mean loss over `batch` and its gradient with respect to the policy
    /// layers, ordered `(w, b)` per layer.
    pub fn loss_and_grad(&self, policy: &Policy, batch: &[&PreparedInstance]) -> Result<(f64, Vec<Tensor>), DpcError> {
        if batch.is_empty() {
            return Err(DpcError::Empty("evaluate the loss on"));
        }
        let mut g = Graph::new();
        let params: Vec<Var> = policy_params(policy).into_iter().map(|t| g.param(t)).collect();
        let root = self.build(&mut g, &params, policy, batch);
        finish(&g, root, &params)
    }
}

/// Adds the slack cost and the three penalties to the generator cost.
/// `vars` holds the coarse schedule, the generator cost, the frequency
/// readouts and the slack readout.
fn penalized(g: &mut Graph, w: &LossWeights, ramp_bound: f64, vars: [Var; 4], prep: &PreparedInstance) -> Var {
    let [pi, gen, omega, slack] = vars;
    let nd = g.value(pi).dims2().1;
    let s = g.abs(slack);
    let s = g.sum(s);
    let s = g.scale(s, prep.slack_cost);
    let mut loss = g.add(gen, s);

    let f = g.abs(omega);
    let f = g.add_scalar(f, -prep.omega_bnd);
    let f = g.relu(f);
    let f = g.squared_norm(f);
    let f = g.scale(f, w.q_omega);
    loss = g.add(loss, f);

    if nd > 1 {
        let hi = g.slice_cols(pi, 1, nd);
        let lo = g.slice_cols(pi, 0, nd - 1);
        let d = g.sub(hi, lo);
        let d = g.abs(d);
        let d = g.add_scalar(d, -ramp_bound);
        let d = g.relu(d);
        let d = g.squared_norm(d);
        let d = g.scale(d, w.q_ramp);
        loss = g.add(loss, d);
    }

    let first = g.slice_cols(pi, 0, 1);
    let target = Tensor::new(vec![prep.p_g0.len(), 1], prep.p_g0.iter().map(|v| -v).collect());
    let e = g.add_const(first, &target);
    let e = g.squared_norm(e);
    let e = g.scale(e, w.q_init);
    g.add(loss, e)
}

fn finish(g: &Graph, root: Var, params: &[Var]) -> Result<(f64, Vec<Tensor>), DpcError> {
    let value = g.value(root).item();
    if !value.is_finite() {
        return Err(DpcError::NumericFault("policy loss".into()));
    }
    let grads = g.backward(root)?;
    Ok((value, params.iter().map(|&p| grads.wrt(p)).collect()))
}

pub(crate) fn policy_params(policy: &Policy) -> Vec<Tensor> {
    policy.layers.iter().flat_map(|l| [l.w.clone(), l.b.clone()]).collect()
}

pub(crate) fn store_params(policy: &mut Policy, params: &[Tensor]) {
    for (l, pair) in policy.layers.iter_mut().zip(params.chunks_exact(2)) {
        l.w = pair[0].clone();
        l.b = pair[1].clone();
    }
}

/// Coarse schedule `n_gen x N_d` on the tape.
pub(crate) fn policy_graph(g: &mut Graph, params: &[Var], policy: &Policy, features: &Tensor) -> Var {
    let mut h = g.constant(features.clone());
    let n_layers = params.len() / 2;
    for (i, pair) in params.chunks_exact(2).enumerate() {
        h = g.conv1d(h, pair[0], pair[1]);
        if i + 1 < n_layers {
            h = g.relu(h);
        }
    }
    let t = g.tanh(h);
    let half: Vec<f64> = policy.p_min.iter().zip(&policy.p_max).map(|(lo, hi)| 0.5 * (hi - lo)).collect();
    let mid: Vec<f64> = policy.p_min.iter().zip(&policy.p_max).map(|(lo, hi)| 0.5 * (hi + lo)).collect();
    g.scale_shift_rows(t, &half, &mid)
}

/// Mean loss and policy gradient through the response basis of `model`.
pub fn dpc_loss(
    instances: &[ProblemInstance],
    policy: &Policy,
    model: &KoopmanModel,
    weights: LossWeights,
    eps_rmp: f64,
) -> Result<(f64, Vec<Tensor>), DpcError> {
    let problem = DpcProblem::new(model, policy.n_knots, policy.n_steps, weights, eps_rmp)?;
    let prepared = problem.prepare_all(model, policy, instances)?;
    let refs: Vec<&PreparedInstance> = prepared.iter().collect();
    problem.loss_and_grad(policy, &refs)
}

/// Same loss as [`dpc_loss`], computed by interpolating the schedule and
/// rolling the Koopman model out step by step on the tape.
pub fn dpc_loss_rollout(
    instances: &[ProblemInstance],
    policy: &Policy,
    model: &KoopmanModel,
    weights: LossWeights,
    eps_rmp: f64,
) -> Result<(f64, Vec<Tensor>), DpcError> {
    if instances.is_empty() {
        return Err(DpcError::Empty("evaluate the loss on"));
    }
    let ramp_bound = eps_rmp * policy.n_steps as f64 / policy.n_knots as f64;
    let plan = Arc::new(crate::diffcore::InterpPlan::new(policy.n_knots, policy.n_steps)?);
    let k = Arc::new(model.k.clone());
    let b = Arc::new(model.b.clone());
    let n_gen = policy.layout.n_gen;
    let n = policy.n_steps;

    let mut g = Graph::new();
    let params: Vec<Var> = policy_params(policy).into_iter().map(|t| g.param(t)).collect();
    let mut total: Option<Var> = None;
    for inst in instances {
        let features = policy.features(inst)?;
        let pi = policy_graph(&mut g, &params, policy, &features);
        let fine = g.interpolate(pi, plan.clone());
        let fine_t = g.transpose(fine);
        let loads = inst.load_forecast();
        let loads_t = Tensor::new(
            vec![n, loads.len()],
            (0..n).flat_map(|t| loads.iter().map(move |row| row[t])).collect(),
        );
        let loads_t = g.constant(loads_t);
        let inputs_t = g.concat_cols(&[fine_t, loads_t]);
        let inputs = g.transpose(inputs_t);
        let psi0 = g.constant(Tensor::vector(model.observe(&inst.x0_vector())?));
        let traj = g.affine_recurrence(psi0, inputs, k.clone(), b.clone());
        let traj = g.slice_cols(traj, 1, n + 1);
        let omega_rows: Vec<usize> = (0..n_gen).collect();
        let omega = g.select_rows(traj, &omega_rows);
        let slack = g.select_rows(traj, &[model.slack_index()]);
        let rates = Tensor::new(
            vec![n_gen, n],
            (0..n_gen).flat_map(|gi| std::iter::repeat_n(inst.cost[gi] * inst.dt, n)).collect(),
        );
        let gen = g.mul_const(fine, Arc::new(rates));
        let gen = g.sum(gen);
        let prep = PreparedInstance {
            features,
            free: Tensor::zeros(&[0]),
            gen_cost: Arc::new(Tensor::zeros(&[0])),
            slack_cost: inst.cost[n_gen] * inst.dt,
            p_g0: inst.p_g0.clone(),
            omega_bnd: hz_to_rad(inst.omega_bnd_hz()),
        };
        let loss = penalized(&mut g, &weights, ramp_bound, [pi, gen, omega, slack], &prep);
        total = Some(match total {
            Some(t) => g.add(t, loss),
            None => loss,
        });
    }
    let root = g.scale(total.expect("non-empty"), 1.0 / instances.len() as f64);
    finish(&g, root, &params)
}
