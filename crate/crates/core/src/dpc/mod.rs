//! Explicit dispatch policy: a three-layer 1-D CNN mapping an encoded
//! problem instance to coarse generator set-points, squashed into the
//! generator bounds and linearly interpolated onto the simulation grid.

mod basis;
mod loss;
mod train;

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{conv1d_forward, init_uniform, DiffError, InterpPlan, Tensor};
use crate::grid::Network;
use crate::koopman::KoopmanError;
use crate::scenario::ProblemInstance;

pub use basis::ResponseBasis;
pub use loss::{dpc_loss, dpc_loss_rollout, DpcProblem, LossTerms, LossWeights, PreparedInstance};
pub use train::{train_policy, DpcTrainConfig, PolicyHistory};

pub const POLICY_FORMAT: &str = "dedpc-policy";
pub const POLICY_VERSION: u32 = 1;

/// Kernel widths and output channels of the three convolution layers; the
/// last layer's channel count is replaced by the number of generators.
pub const ARCHITECTURE: [(usize, usize); 3] = [(5, 30), (10, 30), (5, 0)];

#[derive(Debug, Error)]
pub enum DpcError {
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("no instances to {0}")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NumericFault(String),
    #[error("policy training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("checkpoint is not a policy (format {0:?})")]
    WrongFormat(String),
    #[error("unsupported policy version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt policy: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Koopman(#[from] KoopmanError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Channel layout of an encoded instance: load forecasts, then constant
/// channels for the costs, the initial state and the initial set-points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub n_loads: usize,
    pub n_cost: usize,
    pub n_state: usize,
    pub n_gen: usize,
}

impl InputLayout {
    pub fn for_network(net: &Network) -> Self {
        let n_gen = net.n_generators();
        Self {
            n_loads: net.n_loads(),
            n_cost: n_gen + 1,
            n_state: net.non_slack().len() + n_gen + 1,
            n_gen,
        }
    }

    pub fn of_instance(inst: &ProblemInstance) -> Self {
        Self {
            n_loads: inst.loads.len(),
            n_cost: inst.cost.len(),
            n_state: inst.x0_vector().len(),
            n_gen: inst.p_g0.len(),
        }
    }

    pub fn n_channels(&self) -> usize {
        self.n_loads + self.n_cost + self.n_state + self.n_gen
    }
}

/// Encodes an instance as a `channels x n_knots` array. Load channel values
/// at knot `j` are the forecast at fine index `j * N / n_knots`; every other
/// channel is a constant broadcast over time.
pub fn encode_input(inst: &ProblemInstance, n_knots: usize) -> Tensor {
    let layout = InputLayout::of_instance(inst);
    let stride = inst.n_steps / n_knots.max(1);
    let mut data = Vec::with_capacity(layout.n_channels() * n_knots);
    for load in &inst.loads {
        data.extend((0..n_knots).map(|j| load.value_at((j * stride) as f64 * inst.dt)));
    }
    let constants = inst.cost.iter().chain(&inst.x0_vector()).chain(&inst.p_g0).copied().collect::<Vec<_>>();
    for c in constants {
        data.extend(std::iter::repeat_n(c, n_knots));
    }
    Tensor::new(vec![layout.n_channels(), n_knots], data)
}

/// `P_min + ½ (1 + tanh(c)) (P_max − P_min)`, clamped against last-ulp
/// rounding so the bounds hold exactly.
pub fn squash(c: f64, lo: f64, hi: f64) -> f64 {
    (lo + 0.5 * (1.0 + c.tanh()) * (hi - lo)).clamp(lo, hi)
}

/// Generator set-points on the coarse and fine grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// `n_gen x N_d`
    pub coarse: Vec<Vec<f64>>,
    /// `n_gen x N`
    pub fine: Vec<Vec<f64>>,
    pub p_min: Vec<f64>,
    pub p_max: Vec<f64>,
}

impl Schedule {
    pub fn from_coarse(coarse: Vec<Vec<f64>>, p_min: &[f64], p_max: &[f64], n_steps: usize) -> Result<Self, DpcError> {
        let n_knots = coarse.first().map_or(0, Vec::len);
        let plan = InterpPlan::new(n_knots, n_steps)?;
        let fine = coarse
            .iter()
            .enumerate()
            .map(|(g, row)| {
                let mut out = vec![0.0; n_steps];
                plan.apply(row, &mut out);
                out.iter_mut().for_each(|v| *v = v.clamp(p_min[g], p_max[g]));
                out
            })
            .collect();
        Ok(Self {
            coarse,
            fine,
            p_min: p_min.to_vec(),
            p_max: p_max.to_vec(),
        })
    }

    pub fn within_bounds(&self) -> bool {
        self.coarse.iter().chain(&self.fine).enumerate().all(|(i, row)| {
            let g = i % self.p_min.len();
            row.iter().all(|&v| v >= self.p_min[g] && v <= self.p_max[g])
        })
    }

    /// Largest per-step change of the fine schedule.
    pub fn max_fine_step(&self) -> f64 {
        self.fine
            .iter()
            .flat_map(|r| r.windows(2).map(|w| (w[1] - w[0]).abs()))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `c_out x c_in x width`
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvLayer {
    fn dims(&self) -> (usize, usize, usize) {
        let s = self.w.shape();
        (s[0], s[1], s[2])
    }
}

/// Trained policy parameters and everything needed to apply them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub format: String,
    pub version: u32,
    pub layout: InputLayout,
    pub n_knots: usize,
    pub n_steps: usize,
    pub p_min: Vec<f64>,
    pub p_max: Vec<f64>,
    /// Per-channel input normalization `(x − mean) / scale`.
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub layers: Vec<ConvLayer>,
}

impl Policy {
    pub fn new(net: &Network, n_knots: usize, n_steps: usize, rng: &mut impl Rng) -> Self {
        let (p_min, p_max) = net.generator_bounds();
        Self::with_layout(InputLayout::for_network(net), p_min, p_max, n_knots, n_steps, rng)
    }

    pub fn with_layout(
        layout: InputLayout,
        p_min: Vec<f64>,
        p_max: Vec<f64>,
        n_knots: usize,
        n_steps: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut c_in = layout.n_channels();
        let layers = ARCHITECTURE
            .iter()
            .enumerate()
            .map(|(i, &(width, c_out))| {
                let c_out = if i + 1 == ARCHITECTURE.len() { layout.n_gen } else { c_out };
                let fan_in = c_in * width;
                let layer = ConvLayer {
                    w: init_uniform(rng, &[c_out, c_in, width], fan_in),
                    b: init_uniform(rng, &[c_out], fan_in),
                };
                c_in = c_out;
                layer
            })
            .collect();
        let n_ch = layout.n_channels();
        Self {
            format: POLICY_FORMAT.into(),
            version: POLICY_VERSION,
            layout,
            n_knots,
            n_steps,
            p_min,
            p_max,
            input_mean: vec![0.0; n_ch],
            input_scale: vec![1.0; n_ch],
            layers,
        }
    }

    /// Sets the input normalization to per-channel statistics of `instances`.
    pub fn fit_normalization(&mut self, instances: &[ProblemInstance]) {
        let n_ch = self.layout.n_channels();
        let mut sum = vec![0.0; n_ch];
        let mut sq = vec![0.0; n_ch];
        let mut count = 0.0;
        for inst in instances {
            let x = encode_input(inst, self.n_knots);
            for (c, row) in x.data().chunks(self.n_knots).enumerate() {
                sum[c] += row.iter().sum::<f64>();
                sq[c] += row.iter().map(|v| v * v).sum::<f64>();
            }
            count += self.n_knots as f64;
        }
        if count == 0.0 {
            return;
        }
        for c in 0..n_ch {
            let mean = sum[c] / count;
            let var = (sq[c] / count - mean * mean).max(0.0);
            self.input_mean[c] = mean;
            self.input_scale[c] = var.sqrt().max(1e-6);
        }
    }

    pub fn check_instance(&self, inst: &ProblemInstance) -> Result<(), DpcError> {
        let got = InputLayout::of_instance(inst);
        if got != self.layout {
            return Err(DpcError::Dimension {
                what: "instance channels",
                expected: self.layout.n_channels(),
                got: got.n_channels(),
            });
        }
        if inst.n_steps != self.n_steps {
            return Err(DpcError::Dimension {
                what: "horizon",
                expected: self.n_steps,
                got: inst.n_steps,
            });
        }
        Ok(())
    }

    /// Normalized network input for `inst`.
    pub fn features(&self, inst: &ProblemInstance) -> Result<Tensor, DpcError> {
        self.check_instance(inst)?;
        let mut x = encode_input(inst, self.n_knots);
        let n = self.n_knots;
        for (c, row) in x.data_mut().chunks_mut(n).enumerate() {
            row.iter_mut()
                .for_each(|v| *v = (*v - self.input_mean[c]) / self.input_scale[c]);
        }
        Ok(x)
    }

    /// Last-layer activations `C₃`, `n_gen x N_d`.
    pub fn pre_activation(&self, inst: &ProblemInstance) -> Result<Vec<f64>, DpcError> {
        let mut h = self.features(inst)?.into_data();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (c_out, c_in, width) = layer.dims();
            h = conv1d_forward(&h, c_in, self.n_knots, layer.w.data(), c_out, width, layer.b.data());
            if i < last {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(h)
    }

    pub fn coarse(&self, inst: &ProblemInstance) -> Result<Vec<Vec<f64>>, DpcError> {
        let c3 = self.pre_activation(inst)?;
        Ok(c3
            .chunks(self.n_knots)
            .enumerate()
            .map(|(g, row)| row.iter().map(|&c| squash(c, self.p_min[g], self.p_max[g])).collect())
            .collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DpcError> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| DpcError::Corrupt(e.to_string()))?;
        let format = raw.get("format").and_then(|v| v.as_str()).unwrap_or_default();
        if format != POLICY_FORMAT {
            return Err(DpcError::WrongFormat(format.to_string()));
        }
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != POLICY_VERSION {
            return Err(DpcError::Version {
                found: version,
                expected: POLICY_VERSION,
            });
        }
        let policy: Self = serde_json::from_value(raw).map_err(|e| DpcError::Corrupt(e.to_string()))?;
        policy.validate()?;
        Ok(policy)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DpcError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DpcError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), DpcError> {
        let bad = |m: &str| Err(DpcError::Corrupt(m.to_string()));
        let n_ch = self.layout.n_channels();
        if self.input_mean.len() != n_ch || self.input_scale.len() != n_ch {
            return bad("normalization length");
        }
        if self.p_min.len() != self.layout.n_gen || self.p_max.len() != self.layout.n_gen {
            return bad("bound length");
        }
        if self.p_min.iter().zip(&self.p_max).any(|(lo, hi)| !(lo <= hi)) {
            return bad("bounds out of order");
        }
        if self.n_knots < 2 || self.n_steps < self.n_knots {
            return bad("grid sizes");
        }
        let mut c_in = n_ch;
        for l in &self.layers {
            if l.w.shape().len() != 3 {
                return bad("layer shapes");
            }
            let (c_out, wc_in, width) = l.dims();
            if wc_in != c_in || width == 0 || l.w.len() != c_out * c_in * width || l.b.len() != c_out {
                return bad("layer shapes");
            }
            c_in = c_out;
        }
        if self.layers.is_empty() || c_in != self.layout.n_gen {
            return bad("output channels");
        }
        Ok(())
    }
}

/// Coarse and fine schedule for `inst`.
pub fn policy_forward(inst: &ProblemInstance, policy: &Policy) -> Result<Schedule, DpcError> {
    let coarse = policy.coarse(inst)?;
    Schedule::from_coarse(coarse, &policy.p_min, &policy.p_max, policy.n_steps)
}

/// [`policy_forward`] plus its wall time in seconds.
pub fn infer(inst: &ProblemInstance, policy: &Policy) -> Result<(Schedule, f64), DpcError> {
    let start = Instant::now();
    let schedule = policy_forward(inst, policy)?;
    Ok((schedule, start.elapsed().as_secs_f64()))
}

#[cfg(test)]
mod tests;
