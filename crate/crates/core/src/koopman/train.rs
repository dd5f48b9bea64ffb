use std::sync::Arc;

use log::info;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{RolloutWindow, Transition, TransitionDataset};
use super::{InjectionFeature, KoopmanDims, KoopmanError, KoopmanModel};
use crate::diffcore::{AdamW, AdamWConfig, Graph, Tensor, Var};
use crate::swing::rad_to_hz;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KoopmanTrainConfig {
    pub n_latent: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Step size for the observable network.
    pub lr: f64,
    /// Step size for `K` and `B`.
    pub lr_linear: f64,
    pub weight_decay: f64,
    /// Final network step size as a fraction of `lr` (cosine schedule).
    pub lr_floor: f64,
    /// Denominator offset of the relative one-step loss.
    pub eps: f64,
    pub stability_weight: f64,
    /// Penalty starts at `‖K‖₂ = 1 − stability_margin`.
    pub stability_margin: f64,
    /// Initialize `K`, `B` by weighted least squares on the initial features.
    pub warm_start: bool,
    /// Re-solve `K`, `B` by least squares every this many epochs (0: never).
    pub refit_every: usize,
    /// Relative singular-value cutoff of the least-squares fits.
    pub rcond: f64,
    /// Eigenvalues of each least-squares `K` are pulled inside this radius.
    pub eigen_cap: Option<f64>,
    /// Add the learned linear read of the dictionary to the observables.
    pub dictionary_skip: bool,
    /// Stop after this many epochs without a better candidate.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for KoopmanTrainConfig {
    fn default() -> Self {
        Self {
            n_latent: 30,
            hidden: vec![64, 64],
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            lr_linear: 1e-5,
            weight_decay: 0.0,
            lr_floor: 0.02,
            eps: 1e-8,
            stability_weight: 10.0,
            stability_margin: 1e-3,
            warm_start: true,
            refit_every: 1,
            rcond: 1e-8,
            dictionary_skip: true,
            eigen_cap: Some(0.999),
            patience: Some(20),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub spectral_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelQuality {
    /// Mean relative one-step loss over held-out transitions.
    pub val_one_step_loss: f64,
    /// RMS of the frequency prediction error over the held-out windows, Hz.
    pub rollout_rms_hz: f64,
    pub spectral_radius: f64,
    pub spectral_norm: f64,
    pub stability_penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub quality: ModelQuality,
}

/// Relative one-step loss of a single transition.
pub fn one_step_loss(model: &KoopmanModel, t: &Transition, eps: f64) -> f64 {
    let psi = model.observe(&t.x).expect("state length");
    let target = model.observe(&t.x_next).expect("state length");
    let pred = model.step(&psi, &t.u);
    let num: f64 = pred.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = t.x.iter().zip(&t.x_next).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() + eps;
    num / den
}

fn window_sq_error(model: &KoopmanModel, w: &RolloutWindow) -> (f64, usize) {
    let psi0 = model.observe(&w.x0).expect("state length");
    let traj = model.rollout(&psi0, &w.inputs);
    let mut sq = 0.0;
    let mut count = 0;
    for (g, row) in w.omega.iter().enumerate() {
        for (j, &truth) in row.iter().enumerate() {
            let e = rad_to_hz(model.omega_readout(&traj[j + 1])[g] - truth);
            sq += e * e;
            count += 1;
        }
    }
    (sq, count)
}

pub fn evaluate_model(model: &KoopmanModel, data: &TransitionDataset, cfg: &KoopmanTrainConfig) -> ModelQuality {
    let val_one_step_loss = if data.validation.is_empty() {
        f64::NAN
    } else {
        data.validation.iter().map(|t| one_step_loss(model, t, cfg.eps)).sum::<f64>() / data.validation.len() as f64
    };
    let (sq, count) = data
        .windows
        .iter()
        .map(|w| window_sq_error(model, w))
        .fold((0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1));
    let spectral_norm = model.spectral_norm();
    let excess = (spectral_norm - (1.0 - cfg.stability_margin)).max(0.0);
    ModelQuality {
        val_one_step_loss,
        rollout_rms_hz: if count > 0 { (sq / count as f64).sqrt() } else { f64::NAN },
        spectral_radius: model.spectral_radius(),
        spectral_norm,
        stability_penalty: cfg.stability_weight * excess * excess,
    }
}

fn standardization(pairs: &[Transition], n_x: usize) -> (Vec<f64>, Vec<f64>) {
    let n = pairs.len() as f64;
    let mut mean = vec![0.0; n_x];
    for t in pairs {
        for (m, v) in mean.iter_mut().zip(&t.x) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; n_x];
    for t in pairs {
        for ((s, v), m) in var.iter_mut().zip(&t.x).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let scale = var.into_iter().map(|v| v.sqrt().max(1e-6)).collect();
    (mean, scale)
}

fn relative_weight(t: &Transition, eps: f64) -> f64 {
    let d: f64 = t.x.iter().zip(&t.x_next).map(|(a, b)| (a - b) * (a - b)).sum();
    1.0 / (d + eps)
}

/// Weighted least-squares fit of `ψ' ≈ K ψ + G P` on the current features,
/// then `B = (I − K)⁻¹ G`. Solved by SVD of the column-scaled weighted
/// design matrix; directions below `rcond` relative to the largest singular
/// value are dropped.
fn fit_linear_part(model: &mut KoopmanModel, pairs: &[Transition], cfg: &KoopmanTrainConfig) {
    let n = model.n_psi();
    let m = model.dims.n_u;
    let d = n + m;
    let rows = pairs.len();
    let mut z = DMatrix::<f64>::zeros(rows, d);
    let mut y = DMatrix::<f64>::zeros(rows, n);
    for (r, t) in pairs.iter().enumerate() {
        let w = relative_weight(t, cfg.eps).sqrt();
        let psi = model.observe(&t.x).expect("state length");
        let target = model.observe(&t.x_next).expect("state length");
        for (c, v) in psi.iter().chain(&t.u).enumerate() {
            z[(r, c)] = w * v;
        }
        for (c, v) in target.iter().enumerate() {
            y[(r, c)] = w * v;
        }
    }
    let norms: Vec<f64> = (0..d).map(|c| z.column(c).norm()).collect();
    for (c, &nc) in norms.iter().enumerate() {
        if nc > 0.0 {
            z.column_mut(c).scale_mut(1.0 / nc);
        }
    }
    let svd = z.clone().svd(true, true);
    let cutoff = cfg.rcond * svd.singular_values.max();
    let Ok(mut theta) = svd.solve(&y, cutoff) else {
        return;
    };
    for (c, &nc) in norms.iter().enumerate() {
        if nc > 0.0 {
            theta.row_mut(c).scale_mut(1.0 / nc);
        }
    }
    let mut k = DMatrix::from_fn(n, n, |i, j| theta[(j, i)]);
    let mut g = DMatrix::from_fn(n, m, |i, c| theta[(n + c, i)]);
    if let Some(radius) = cfg.eigen_cap {
        if let Some(capped) = cap_spectrum(&k, radius) {
            k = capped;
            if let Some(refit) = refit_gain(&k, &z, &y, &norms, n, m, cfg.rcond) {
                g = refit;
            }
        }
    }
    let i_minus_k = DMatrix::<f64>::identity(n, n) - &k;
    let b = match i_minus_k.clone().lu().solve(&g) {
        Some(b) if b.iter().all(|v| v.is_finite()) => b,
        _ => match i_minus_k.svd(true, true).solve(&g, 1e-12) {
            Ok(b) => b,
            Err(_) => return,
        },
    };
    model.k = Tensor::new(vec![n, n], (0..n * n).map(|idx| k[(idx / n, idx % n)]).collect());
    model.b = Tensor::new(vec![n, m], (0..n * m).map(|idx| b[(idx / m, idx % m)]).collect());
}

/// Moves every eigenvalue of `k` with modulus above `radius` onto the
/// circle of that radius by rescaling the diagonal blocks of its real Schur
/// form. Returns `None` when nothing needs to change.
pub(crate) fn cap_spectrum(k: &DMatrix<f64>, radius: f64) -> Option<DMatrix<f64>> {
    let n = k.nrows();
    let (mut q, mut t) = k.clone().schur().unpack();
    let mut changed = false;
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            let (a, b, c, d) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
            let half = 0.5 * (a + d);
            let disc = 0.25 * (a - d) * (a - d) + b * c;
            if disc < 0.0 {
                let modulus = (a * d - b * c).sqrt();
                if modulus > radius {
                    let s = radius / modulus;
                    for r in i..i + 2 {
                        for col in i..i + 2 {
                            t[(r, col)] *= s;
                        }
                    }
                    changed = true;
                }
                i += 2;
                continue;
            }
            // Real pair: rotate the block to upper-triangular form.
            let lambda = half + disc.sqrt() * if half >= 0.0 { 1.0 } else { -1.0 };
            let (v0, v1) = if (lambda - a).abs() + b.abs() > (lambda - d).abs() + c.abs() {
                (b, lambda - a)
            } else {
                (lambda - d, c)
            };
            let norm = v0.hypot(v1);
            let (cs, sn) = (v0 / norm, v1 / norm);
            let rot = |x: f64, y: f64| (cs * x + sn * y, -sn * x + cs * y);
            for col in 0..n {
                let (x, y) = rot(t[(i, col)], t[(i + 1, col)]);
                t[(i, col)] = x;
                t[(i + 1, col)] = y;
            }
            for r in 0..n {
                let (x, y) = rot(t[(r, i)], t[(r, i + 1)]);
                t[(r, i)] = x;
                t[(r, i + 1)] = y;
                let (x, y) = rot(q[(r, i)], q[(r, i + 1)]);
                q[(r, i)] = x;
                q[(r, i + 1)] = y;
            }
            t[(i + 1, i)] = 0.0;
        }
        if t[(i, i)].abs() > radius {
            t[(i, i)] = radius * t[(i, i)].signum();
            changed = true;
        }
        i += 1;
    }
    changed.then(|| &q * t * q.transpose())
}

/// Least-squares input gain for a fixed `K`, reusing the scaled design.
fn refit_gain(
    k: &DMatrix<f64>,
    z: &DMatrix<f64>,
    y: &DMatrix<f64>,
    norms: &[f64],
    n: usize,
    m: usize,
    rcond: f64,
) -> Option<DMatrix<f64>> {
    // z holds column-scaled features; undo the scaling on the ψ block to
    // form the residual target y − ψ Kᵀ.
    let mut psi = z.columns(0, n).into_owned();
    for (c, &nc) in norms[..n].iter().enumerate() {
        psi.column_mut(c).scale_mut(nc);
    }
    let target = y - psi * k.transpose();
    let u = z.columns(n, m).into_owned();
    let svd = u.svd(true, true);
    let cutoff = rcond * svd.singular_values.max();
    let mut gt = svd.solve(&target, cutoff).ok()?;
    for (c, &nc) in norms[n..].iter().enumerate() {
        if nc > 0.0 {
            gt.row_mut(c).scale_mut(1.0 / nc);
        }
    }
    Some(gt.transpose())
}

/// Network parameters are the layer weights and biases in order, followed by
/// the dictionary read when present.
fn params_of(model: &KoopmanModel) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut net: Vec<Tensor> = model.layers.iter().flat_map(|l| [l.w.clone(), l.b.clone()]).collect();
    net.extend(model.skip.clone());
    (net, vec![model.k.clone(), model.b.clone()])
}

fn store_params(model: &mut KoopmanModel, net: &[Tensor], lin: &[Tensor]) {
    let n_layer_params = 2 * model.layers.len();
    for (l, pair) in model.layers.iter_mut().zip(net[..n_layer_params].chunks(2)) {
        l.w = pair[0].clone();
        l.b = pair[1].clone();
    }
    if model.skip.is_some() {
        model.skip = Some(net[n_layer_params].clone());
    }
    model.k = lin[0].clone();
    model.b = lin[1].clone();
}

/// Root mean square of every raw dictionary entry over the training states.
fn dictionary_scale(model: &KoopmanModel, pairs: &[Transition]) -> Vec<f64> {
    let n = pairs.len() as f64;
    let mut acc = vec![0.0; model.n_angles() + model.dictionary.len()];
    for t in pairs {
        for (a, v) in acc.iter_mut().zip(model.dictionary_raw(&t.x)) {
            *a += v * v / n;
        }
    }
    acc.into_iter().map(|v| v.sqrt().max(1e-6)).collect()
}

struct BatchInputs {
    xhat: Tensor,
    xhat_next: Tensor,
    phi: Option<(Tensor, Tensor)>,
    phys: Tensor,
    phys_next: Tensor,
    u: Tensor,
    weights: Arc<Tensor>,
}

fn batch_inputs(model: &KoopmanModel, pairs: &[&Transition], eps: f64) -> BatchInputs {
    let n_x = model.dims.n_x;
    let n_phys = model.dims.n_gen + 1;
    let n_psi = model.n_psi();
    let bs = pairs.len();
    let phys_of = |x: &[f64]| -> Vec<f64> {
        let mut p: Vec<f64> = model.omega_slots.iter().map(|&i| x[i]).collect();
        p.push(x[model.slack_slot]);
        p
    };
    let mut xhat = Vec::with_capacity(bs * n_x);
    let mut xhat_next = Vec::with_capacity(bs * n_x);
    let mut phys = Vec::with_capacity(bs * n_phys);
    let mut phys_next = Vec::with_capacity(bs * n_phys);
    let mut u = Vec::with_capacity(bs * model.dims.n_u);
    let mut weights = Vec::with_capacity(bs * n_psi);
    for t in pairs {
        xhat.extend(model.standardized(&t.x));
        xhat_next.extend(model.standardized(&t.x_next));
        phys.extend(phys_of(&t.x));
        phys_next.extend(phys_of(&t.x_next));
        u.extend_from_slice(&t.u);
        let w = relative_weight(t, eps) / bs as f64;
        weights.extend(std::iter::repeat_n(w, n_psi));
    }
    let phi = model.skip.as_ref().map(|_| {
        let n_phi = model.n_angles() + model.dictionary.len();
        let rows = |pick: fn(&Transition) -> &[f64]| {
            let data = pairs.iter().flat_map(|t| model.dictionary_features(pick(t))).collect();
            Tensor::new(vec![bs, n_phi], data)
        };
        (rows(|t| t.x.as_slice()), rows(|t| t.x_next.as_slice()))
    });
    BatchInputs {
        xhat: Tensor::new(vec![bs, n_x], xhat),
        xhat_next: Tensor::new(vec![bs, n_x], xhat_next),
        phi,
        phys: Tensor::new(vec![bs, n_phys], phys),
        phys_next: Tensor::new(vec![bs, n_phys], phys_next),
        u: Tensor::new(vec![bs, model.dims.n_u], u),
        weights: Arc::new(Tensor::new(vec![bs, n_psi], weights)),
    }
}

fn lift(g: &mut Graph, layers: &[Var], skip: Option<(Var, Var)>, xhat: Var, phys: Var) -> Var {
    let mut h = xhat;
    let n_layers = layers.len() / 2;
    for (i, pair) in layers.chunks(2).enumerate() {
        let z = g.matmul(h, pair[0]);
        h = g.add_row_bias(z, pair[1]);
        if i + 1 < n_layers {
            h = g.tanh(h);
        }
    }
    if let Some((w, phi)) = skip {
        let read = g.matmul(phi, w);
        h = g.add(h, read);
    }
    g.concat_cols(&[phys, h])
}

/// Mean relative one-step loss plus stability penalty over a batch, with
/// gradients for every parameter.
fn batch_step(
    net_params: &[Tensor],
    lin_params: &[Tensor],
    inputs: BatchInputs,
    cfg: &KoopmanTrainConfig,
) -> Result<(f64, Vec<Tensor>, Vec<Tensor>), KoopmanError> {
    let mut g = Graph::new();
    let net_vars: Vec<Var> = net_params.iter().map(|p| g.param(p.clone())).collect();
    let k = g.param(lin_params[0].clone());
    let b = g.param(lin_params[1].clone());
    let xhat = g.constant(inputs.xhat);
    let xhat_next = g.constant(inputs.xhat_next);
    let phys = g.constant(inputs.phys);
    let phys_next = g.constant(inputs.phys_next);
    let u = g.constant(inputs.u);

    let (layer_vars, skip_var) = match inputs.phi {
        Some(_) => (&net_vars[..net_vars.len() - 1], net_vars.last().copied()),
        None => (&net_vars[..], None),
    };
    let (skip, skip_next) = match (skip_var, inputs.phi) {
        (Some(w), Some((phi, phi_next))) => {
            let phi = g.constant(phi);
            let phi_next = g.constant(phi_next);
            (Some((w, phi)), Some((w, phi_next)))
        }
        _ => (None, None),
    };
    let psi = lift(&mut g, layer_vars, skip, xhat, phys);
    let target = lift(&mut g, layer_vars, skip_next, xhat_next, phys_next);
    let bt = g.transpose(b);
    let ub = g.matmul(u, bt);
    let shifted = g.sub(psi, ub);
    let kt = g.transpose(k);
    let moved = g.matmul(shifted, kt);
    let pred = g.add(moved, ub);
    let err = g.sub(pred, target);
    let sq = g.square(err);
    let weighted = g.mul_const(sq, inputs.weights);
    let fit = g.sum(weighted);

    let sn = g.spectral_norm(k);
    let over = g.add_scalar(sn, -(1.0 - cfg.stability_margin));
    let over = g.relu(over);
    let pen = g.square(over);
    let pen = g.scale(pen, cfg.stability_weight);
    let total = g.add(fit, pen);

    let grads = g.backward(total)?;
    let net_grads = net_vars.iter().map(|&v| grads.wrt(v)).collect();
    let lin_grads = vec![grads.wrt(k), grads.wrt(b)];
    Ok((g.value(total).item(), net_grads, lin_grads))
}

/// Identifies a Koopman model from transitions by minimizing the relative
/// one-step loss with a soft bound on `‖K‖₂`. Returns the epoch with the
/// lowest held-out loss among those with `ρ(K) < 1` (training pairs stand in
/// when no validation set exists).
pub fn train_koopman(
    data: &TransitionDataset,
    n_gen: usize,
    dictionary: &[InjectionFeature],
    cfg: &KoopmanTrainConfig,
) -> Result<(KoopmanModel, TrainReport), KoopmanError> {
    let first = data.train.first().ok_or(KoopmanError::EmptyDataset("training transitions"))?;
    let dims = KoopmanDims {
        n_x: first.x.len(),
        n_u: first.u.len(),
        n_gen,
        n_latent: cfg.n_latent,
        hidden: cfg.hidden.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = KoopmanModel::new(dims, &mut rng);
    let (mean, scale) = standardization(&data.train, model.dims.n_x);
    model.x_mean = mean;
    model.x_scale = scale;
    if cfg.dictionary_skip {
        model = model.with_dictionary(dictionary.to_vec());
        model.dictionary_scale = dictionary_scale(&model, &data.train);
    }
    if cfg.warm_start {
        fit_linear_part(&mut model, &data.train, cfg);
    }

    let (mut net_params, mut lin_params) = params_of(&model);
    let net_cfg = AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let lin_cfg = AdamWConfig {
        lr: cfg.lr_linear,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt_net = AdamW::new(net_cfg, &net_params);
    let mut opt_lin = AdamW::new(lin_cfg, &lin_params);

    let val_set = if data.validation.is_empty() { &data.train } else { &data.validation };
    let mean_loss = |m: &KoopmanModel| val_set.iter().map(|t| one_step_loss(m, t, cfg.eps)).sum::<f64>() / val_set.len() as f64;

    // Candidates with ρ(K) ≥ 1 rank behind every stable one.
    let rank = |m: &KoopmanModel, loss: f64| (m.spectral_radius() >= 1.0, loss);
    let mut best = (rank(&model, mean_loss(&model)), model.clone(), 0usize);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let progress = (epoch - 1) as f64 / cfg.epochs.max(1) as f64;
        let decay = cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt_net.config.lr = cfg.lr * decay;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let pairs: Vec<&Transition> = chunk.iter().map(|&i| &data.train[i]).collect();
            let inputs = batch_inputs(&model, &pairs, cfg.eps);
            let (loss, g_net, g_lin) = batch_step(&net_params, &lin_params, inputs, cfg).map_err(|e| {
                KoopmanError::Diverged {
                    epoch,
                    reason: e.to_string(),
                }
            })?;
            opt_net.step(&mut net_params, &g_net);
            opt_lin.step(&mut lin_params, &g_lin);
            total += loss;
            batches += 1;
        }
        store_params(&mut model, &net_params, &lin_params);
        if cfg.refit_every > 0 && epoch % cfg.refit_every == 0 {
            fit_linear_part(&mut model, &data.train, cfg);
            lin_params = vec![model.k.clone(), model.b.clone()];
            opt_lin = AdamW::new(lin_cfg, &lin_params);
        }
        let train_loss = total / batches.max(1) as f64;
        let val_loss = mean_loss(&model);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(KoopmanError::Diverged {
                epoch,
                reason: "non-finite loss".into(),
            });
        }
        let spectral_norm = model.spectral_norm();
        info!("koopman epoch {epoch}: train {train_loss:.4e} val {val_loss:.4e} |K| {spectral_norm:.5}");
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            spectral_norm,
        });
        let candidate = rank(&model, val_loss);
        if candidate < best.0 {
            best = (candidate, model.clone(), epoch);
        } else if cfg.patience.is_some_and(|p| epoch - best.2 >= p) {
            info!("koopman: no improvement since epoch {}, stopping", best.2);
            break;
        }
    }
    let (_, model, best_epoch) = best;
    let quality = evaluate_model(&model, data, cfg);
    Ok((
        model,
        TrainReport {
            epochs,
            best_epoch,
            quality,
        },
    ))
}

/// Graph-evaluated batch objective, for cross-checking against
/// [`one_step_loss`].
#[cfg(test)]
pub(crate) fn batch_step_loss(
    model: &KoopmanModel,
    pairs: &[Transition],
    cfg: &KoopmanTrainConfig,
) -> Result<f64, KoopmanError> {
    let refs: Vec<&Transition> = pairs.iter().collect();
    let (net, lin) = params_of(model);
    let inputs = batch_inputs(model, &refs, cfg.eps);
    Ok(batch_step(&net, &lin, inputs, cfg)?.0)
}
