//! Koopman surrogate of the swing dynamics.
//!
//! The lifted state is `ψ(x) = (ω, P_s, N(x))`. `N` is a tanh MLP on the
//! standardized state plus an optional learned linear read of a fixed
//! dictionary (the bus angles and the load-bus power injections).
//! The update is
//! `ψ[k+1] = K (ψ[k] − B P[k]) + B P[k]` with inputs ordered generators then
//! loads.

mod data;
mod train;

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{init_uniform, DiffError, Tensor};
use crate::grid::Network;
use crate::scenario::ScenarioError;
use crate::swing::SwingError;

pub use train::one_step_loss;
pub use data::{generate_transitions, DataConfig, RolloutWindow, Transition, TransitionDataset};
pub use train::{evaluate_model, train_koopman, EpochStats, KoopmanTrainConfig, ModelQuality, TrainReport};

pub const CHECKPOINT_FORMAT: &str = "dedpc-koopman";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum KoopmanError {
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("dataset has no {0}")]
    EmptyDataset(&'static str),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("checkpoint is not a Koopman model (format {0:?})")]
    WrongFormat(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Swing(#[from] SwingError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fully connected layer `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    fn random(rng: &mut impl Rng, n_in: usize, n_out: usize) -> Self {
        Self {
            w: init_uniform(rng, &[n_in, n_out], n_in),
            b: init_uniform(rng, &[n_out], n_in),
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        let (n_in, n_out) = self.w.dims2();
        out.clear();
        out.extend_from_slice(self.b.data());
        let w = self.w.data();
        for (i, &xi) in x.iter().enumerate().take(n_in) {
            let row = &w[i * n_out..(i + 1) * n_out];
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
    }
}

/// Active power injected at one bus, `Σ_j C_ij sin(θ_i − θ_j)`, written in
/// terms of state slots (`None` is the slack angle, fixed at zero).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionFeature {
    pub slot: Option<usize>,
    pub terms: Vec<(Option<usize>, f64)>,
}

impl InjectionFeature {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let angle = |s: Option<usize>| s.map_or(0.0, |i| x[i]);
        let own = angle(self.slot);
        self.terms.iter().map(|&(j, c)| c * (own - angle(j)).sin()).sum()
    }
}

/// Injection features for the load buses. After a step they equal the load
/// input of that step, which makes them exactly predictable.
pub fn injection_dictionary(net: &Network) -> Vec<InjectionFeature> {
    let c = net.coupling();
    let slot = |b: usize| net.non_slack_slot(b);
    net.loads()
        .iter()
        .map(|&b| InjectionFeature {
            slot: slot(b),
            terms: (0..net.n_buses())
                .filter(|&j| j != b && c[(b, j)] != 0.0)
                .map(|j| (slot(j), c[(b, j)]))
                .collect(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KoopmanDims {
    /// State length `(θ non-slack, ω, P_s)`.
    pub n_x: usize,
    /// Input length `(P_G, L)`.
    pub n_u: usize,
    pub n_gen: usize,
    pub n_latent: usize,
    pub hidden: Vec<usize>,
}

impl KoopmanDims {
    pub fn n_psi(&self) -> usize {
        self.n_gen + 1 + self.n_latent
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KoopmanModel {
    pub format: String,
    pub version: u32,
    pub dims: KoopmanDims,
    /// Positions of the generator frequencies and the slack power in `x`.
    pub omega_slots: Vec<usize>,
    pub slack_slot: usize,
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub layers: Vec<Dense>,
    pub dictionary: Vec<InjectionFeature>,
    /// Divisors for `(θ, dictionary)` in the linear read; no centering, so
    /// the read introduces no constant offset.
    pub dictionary_scale: Vec<f64>,
    /// `(n_angles + |dictionary|) x n_latent`; absent for a plain MLP.
    pub skip: Option<Tensor>,
    /// `n_ψ x n_ψ`
    pub k: Tensor,
    /// `n_ψ x n_u`
    pub b: Tensor,
}

impl KoopmanModel {
    /// Random observable network, `K = 0`, `B = 0`, identity standardization.
    /// The frequency and slack slots follow the state layout
    /// `(θ[0..n_x-n_gen-1], ω, P_s)`.
    pub fn new(dims: KoopmanDims, rng: &mut impl Rng) -> Self {
        let n_psi = dims.n_psi();
        let mut widths = vec![dims.n_x];
        widths.extend(&dims.hidden);
        widths.push(dims.n_latent);
        let layers = widths.windows(2).map(|w| Dense::random(rng, w[0], w[1])).collect();
        let first_omega = dims.n_x - dims.n_gen - 1;
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            omega_slots: (first_omega..first_omega + dims.n_gen).collect(),
            slack_slot: dims.n_x - 1,
            x_mean: vec![0.0; dims.n_x],
            x_scale: vec![1.0; dims.n_x],
            layers,
            dictionary: Vec::new(),
            dictionary_scale: Vec::new(),
            skip: None,
            k: Tensor::zeros(&[n_psi, n_psi]),
            b: Tensor::zeros(&[n_psi, dims.n_u]),
            dims,
        }
    }

    pub fn n_psi(&self) -> usize {
        self.dims.n_psi()
    }

    /// Adds the linear dictionary read, initialized to copy the dictionary
    /// into the leading latent slots (as far as they reach). The last MLP
    /// layer is zeroed so the initial latent block is exactly that copy.
    pub fn with_dictionary(mut self, dictionary: Vec<InjectionFeature>) -> Self {
        if let Some(last) = self.layers.last_mut() {
            last.w = Tensor::zeros(last.w.shape());
            last.b = Tensor::zeros(last.b.shape());
        }
        let n_phi = self.n_angles() + dictionary.len();
        let n_lat = self.dims.n_latent;
        let mut w = vec![0.0; n_phi * n_lat];
        for i in 0..n_phi.min(n_lat) {
            w[i * n_lat + i] = 1.0;
        }
        self.dictionary_scale = vec![1.0; n_phi];
        self.dictionary = dictionary;
        self.skip = Some(Tensor::new(vec![n_phi, n_lat], w));
        self
    }

    pub(crate) fn standardized(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.x_mean)
            .zip(&self.x_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Number of angle slots at the front of the state.
    pub fn n_angles(&self) -> usize {
        self.dims.n_x - self.dims.n_gen - 1
    }

    /// Raw angles and dictionary values.
    pub(crate) fn dictionary_raw(&self, x: &[f64]) -> Vec<f64> {
        let mut phi = x[..self.n_angles()].to_vec();
        phi.extend(self.dictionary.iter().map(|f| f.eval(x)));
        phi
    }

    /// Scaled angles followed by the scaled dictionary features.
    pub(crate) fn dictionary_features(&self, x: &[f64]) -> Vec<f64> {
        let mut phi = self.dictionary_raw(x);
        for (v, s) in phi.iter_mut().zip(&self.dictionary_scale) {
            *v /= s;
        }
        phi
    }

    pub fn n_gen(&self) -> usize {
        self.dims.n_gen
    }

    /// Index of `P_s` inside `ψ`.
    pub fn slack_index(&self) -> usize {
        self.dims.n_gen
    }

    /// Latent block `N(x)`.
    pub fn latent(&self, x: &[f64]) -> Vec<f64> {
        let mut h = self.standardized(x);
        let mut out = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward(&h, &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            std::mem::swap(&mut h, &mut out);
        }
        if let Some(skip) = &self.skip {
            let n_lat = self.dims.n_latent;
            let w = skip.data();
            for (i, p) in self.dictionary_features(x).into_iter().enumerate() {
                for (o, &wij) in h.iter_mut().zip(&w[i * n_lat..(i + 1) * n_lat]) {
                    *o += p * wij;
                }
            }
        }
        h
    }

    /// `ψ(x) = (ω, P_s, N(x))`.
    pub fn observe(&self, x: &[f64]) -> Result<Vec<f64>, KoopmanError> {
        if x.len() != self.dims.n_x {
            return Err(KoopmanError::Dimension {
                what: "state",
                expected: self.dims.n_x,
                got: x.len(),
            });
        }
        let mut psi = Vec::with_capacity(self.n_psi());
        psi.extend(self.omega_slots.iter().map(|&i| x[i]));
        psi.push(x[self.slack_slot]);
        psi.extend(self.latent(x));
        Ok(psi)
    }

    /// `A ψ`: generator frequencies, rad/s.
    pub fn omega_readout<'a>(&self, psi: &'a [f64]) -> &'a [f64] {
        &psi[..self.dims.n_gen]
    }

    /// `1_sᵀ ψ`
    pub fn slack_readout(&self, psi: &[f64]) -> f64 {
        psi[self.dims.n_gen]
    }

    /// `G = (I − K) B`, so that a step is `K ψ + G P`.
    pub fn input_gain(&self) -> Vec<f64> {
        crate::diffcore::input_gain(&self.k, &self.b)
    }

    /// One update `K (ψ − B P) + B P`.
    pub fn step(&self, psi: &[f64], p: &[f64]) -> Vec<f64> {
        let n = self.n_psi();
        let m = self.dims.n_u;
        assert_eq!(psi.len(), n, "ψ length");
        assert_eq!(p.len(), m, "input length");
        let mut shifted = psi.to_vec();
        let b = self.b.data();
        let mut bp = vec![0.0; n];
        for i in 0..n {
            bp[i] = (0..m).map(|c| b[i * m + c] * p[c]).sum();
            shifted[i] -= bp[i];
        }
        let k = self.k.data();
        (0..n)
            .map(|i| crate::diffcore::dot(&k[i * n..(i + 1) * n], &shifted) + bp[i])
            .collect()
    }

    /// Rollout from `psi0` under `inputs` (one row per input channel, `N`
    /// long). Returns `N + 1` lifted states.
    pub fn rollout(&self, psi0: &[f64], inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.n_psi();
        let m = self.dims.n_u;
        assert_eq!(inputs.len(), m, "input channels");
        let steps = inputs.first().map_or(0, |r| r.len());
        let g = self.input_gain();
        let mut out = Vec::with_capacity(steps + 1);
        out.push(psi0.to_vec());
        let mut u = vec![0.0; m];
        for t in 0..steps {
            for (c, row) in inputs.iter().enumerate() {
                u[c] = row[t];
            }
            let mut next = vec![0.0; n];
            crate::diffcore::recurrence_step(self.k.data(), &g, &out[t], &u, &mut next, n, m);
            out.push(next);
        }
        out
    }

    /// Spectral radius of `K` by normalized power iteration.
    pub fn spectral_radius(&self) -> f64 {
        let n = self.n_psi();
        let k = self.k.data();
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * i as f64).collect();
        let iters = 4000;
        let burn_in = 1000;
        let mut log_growth = 0.0;
        for it in 0..iters {
            let next: Vec<f64> = (0..n).map(|i| crate::diffcore::dot(&k[i * n..(i + 1) * n], &v)).collect();
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            if it >= burn_in {
                log_growth += norm.ln();
            }
            v = next.into_iter().map(|x| x / norm).collect();
        }
        (log_growth / (iters - burn_in) as f64).exp()
    }

    /// Largest singular value of `K`.
    pub fn spectral_norm(&self) -> f64 {
        let n = self.n_psi();
        DMatrix::from_row_slice(n, n, self.k.data())
            .singular_values()
            .max()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, KoopmanError> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| KoopmanError::Corrupt(e.to_string()))?;
        let format = raw.get("format").and_then(|v| v.as_str()).unwrap_or_default();
        if format != CHECKPOINT_FORMAT {
            return Err(KoopmanError::WrongFormat(format.to_string()));
        }
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(KoopmanError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let model: Self = serde_json::from_value(raw).map_err(|e| KoopmanError::Corrupt(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KoopmanError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KoopmanError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), KoopmanError> {
        let n = self.n_psi();
        let bad = |m: &str| Err(KoopmanError::Corrupt(m.to_string()));
        if self.k.shape() != [n, n] || self.k.len() != n * n {
            return bad("K shape");
        }
        if self.b.shape() != [n, self.dims.n_u] || self.b.len() != n * self.dims.n_u {
            return bad("B shape");
        }
        if self.x_mean.len() != self.dims.n_x || self.x_scale.len() != self.dims.n_x {
            return bad("standardization length");
        }
        let mut width = self.dims.n_x;
        for l in &self.layers {
            if l.w.shape().len() != 2 {
                return bad("layer shapes");
            }
            let (i, o) = l.w.dims2();
            if i != width || l.w.len() != i * o || l.b.len() != o {
                return bad("layer shapes");
            }
            width = o;
        }
        if width != self.dims.n_latent {
            return bad("latent width");
        }
        let n_phi = self.n_angles() + self.dictionary.len();
        if let Some(skip) = &self.skip {
            if self.dictionary_scale.len() != n_phi {
                return bad("dictionary scale length");
            }
            if skip.shape() != [n_phi, self.dims.n_latent] || skip.len() != n_phi * self.dims.n_latent {
                return bad("skip shape");
            }
        }
        let slot_ok = |s: Option<usize>| s.is_none_or(|i| i < self.dims.n_x);
        if !self.dictionary.iter().all(|f| slot_ok(f.slot) && f.terms.iter().all(|&(j, _)| slot_ok(j))) {
            return bad("dictionary slot");
        }
        Ok(())
    }
}
