use std::sync::Arc;

use crate::diffcore::{dot, InterpPlan, LinearMap, Tensor};
use crate::koopman::KoopmanModel;
use crate::scenario::ProblemInstance;

use super::DpcError;

/// Readout response of a Koopman model to coarse generator knots.
///
/// The rollout is linear in `(ψ₀, loads, knots)`, so the readouts
/// `y = (ω_1..ω_G, P_s)` at steps `1..=N` split into a free response (from
/// `ψ₀` and the loads, per instance) plus `S π` with `S` shared by all
/// instances. `S` is stored row-major as `(n_out · N) x (n_gen · N_d)`;
/// row `r · N + t` is readout `r` after step `t`.
#[derive(Clone, Debug)]
pub struct ResponseBasis {
    n_gen: usize,
    n_knots: usize,
    n_steps: usize,
    readout_rows: Vec<usize>,
    s: Vec<f64>,
    plan: Arc<InterpPlan>,
}

impl ResponseBasis {
    pub fn new(model: &KoopmanModel, n_knots: usize, n_steps: usize) -> Result<Self, DpcError> {
        let plan = Arc::new(InterpPlan::new(n_knots, n_steps)?);
        let n = model.n_psi();
        let m = model.dims.n_u;
        let n_gen = model.n_gen();
        let cols = n_gen * n_knots;
        let mut readout_rows: Vec<usize> = (0..n_gen).collect();
        readout_rows.push(model.slack_index());
        let n_out = readout_rows.len();

        let k = model.k.data();
        let gain = model.input_gain();
        // Column (g, j) of `psi` tracks the response to the hat function of
        // knot j on generator g. Row-major n x cols.
        let mut psi = vec![0.0; n * cols];
        let mut next = vec![0.0; n * cols];
        let mut s = vec![0.0; n_out * n_steps * cols];
        for t in 0..n_steps {
            next.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                let out = &mut next[i * cols..(i + 1) * cols];
                for (l, &kil) in k[i * n..(i + 1) * n].iter().enumerate() {
                    if kil != 0.0 {
                        for (o, &p) in out.iter_mut().zip(&psi[l * cols..(l + 1) * cols]) {
                            *o += kil * p;
                        }
                    }
                }
            }
            let (j, f) = plan.weights(t);
            for g in 0..n_gen {
                for i in 0..n {
                    let gi = gain[i * m + g];
                    next[i * cols + g * n_knots + j] += gi * (1.0 - f);
                    next[i * cols + g * n_knots + j + 1] += gi * f;
                }
            }
            std::mem::swap(&mut psi, &mut next);
            for (r, &row) in readout_rows.iter().enumerate() {
                let dst = (r * n_steps + t) * cols;
                s[dst..dst + cols].copy_from_slice(&psi[row * cols..(row + 1) * cols]);
            }
        }
        Ok(Self {
            n_gen,
            n_knots,
            n_steps,
            readout_rows,
            s,
            plan,
        })
    }

    pub fn n_knots(&self) -> usize {
        self.n_knots
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_gen(&self) -> usize {
        self.n_gen
    }

    pub fn n_outputs(&self) -> usize {
        self.readout_rows.len()
    }

    pub fn plan(&self) -> &Arc<InterpPlan> {
        &self.plan
    }

    /// Lifted-state rows read out, frequencies first, then the slack power.
    pub fn readout_rows(&self) -> &[usize] {
        &self.readout_rows
    }

    /// Readouts at steps `1..=N` with zero generator input, `n_out x N`.
    pub fn free_response(&self, model: &KoopmanModel, inst: &ProblemInstance) -> Result<Tensor, DpcError> {
        if inst.n_steps != self.n_steps {
            return Err(DpcError::Dimension {
                what: "horizon",
                expected: self.n_steps,
                got: inst.n_steps,
            });
        }
        let psi0 = model.observe(&inst.x0_vector())?;
        let mut inputs = vec![vec![0.0; self.n_steps]; self.n_gen];
        inputs.extend(inst.load_forecast());
        let traj = model.rollout(&psi0, &inputs);
        let n = self.n_steps;
        let mut y = vec![0.0; self.n_outputs() * n];
        for (r, &row) in self.readout_rows.iter().enumerate() {
            for t in 0..n {
                y[r * n + t] = traj[t + 1][row];
            }
        }
        let y = Tensor::new(vec![self.n_outputs(), n], y);
        if !y.is_finite() {
            return Err(DpcError::NumericFault("free response".into()));
        }
        Ok(y)
    }

    /// `free + S π` for coarse knots `pi` (`n_gen x N_d`, row-major).
    pub fn readouts(&self, free: &Tensor, pi: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; free.len()];
        self.apply(pi, &mut y);
        y.iter_mut().zip(free.data()).for_each(|(a, b)| *a += b);
        y
    }
}

impl LinearMap for ResponseBasis {
    fn in_len(&self) -> usize {
        self.n_gen * self.n_knots
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n_outputs(), self.n_steps]
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let cols = self.in_len();
        for (o, row) in out.iter_mut().zip(self.s.chunks_exact(cols)) {
            *o = dot(row, x);
        }
    }

    fn apply_transpose(&self, g_out: &[f64], g_x: &mut [f64]) {
        let cols = self.in_len();
        for (&g, row) in g_out.iter().zip(self.s.chunks_exact(cols)) {
            if g != 0.0 {
                for (a, &s) in g_x.iter_mut().zip(row) {
                    *a += g * s;
                }
            }
        }
    }
}
