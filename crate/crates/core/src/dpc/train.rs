use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamW, AdamWConfig};
use crate::grid::Network;
use crate::koopman::KoopmanModel;
use crate::scenario::ProblemInstance;

use super::loss::{policy_params, store_params};
use super::{DpcError, DpcProblem, LossWeights, Policy, PreparedInstance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpcTrainConfig {
    pub n_knots: usize,
    pub weights: LossWeights,
    /// Per-step ramp limit, pu.
    pub eps_rmp: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a lower mean loss.
    pub patience: usize,
    pub normalize_inputs: bool,
    pub seed: u64,
}

impl Default for DpcTrainConfig {
    fn default() -> Self {
        Self {
            n_knots: 50,
            weights: LossWeights::default(),
            eps_rmp: 5e-4,
            lr: 5e-4,
            weight_decay: 1e-2,
            batch_size: 16,
            epochs: 400,
            patience: 50,
            normalize_inputs: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyHistory {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Epoch whose parameters were returned (1-based).
    pub best_epoch: usize,
}

/// Trains a fresh policy on `train` over `model`.
pub fn train_policy(
    net: &Network,
    train: &[ProblemInstance],
    model: &KoopmanModel,
    cfg: &DpcTrainConfig,
) -> Result<(Policy, PolicyHistory), DpcError> {
    let first = train.first().ok_or(DpcError::Empty("train on"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = Policy::new(net, cfg.n_knots, first.n_steps, &mut rng);
    if cfg.normalize_inputs {
        policy.fit_normalization(train);
    }
    let problem = DpcProblem::new(model, cfg.n_knots, first.n_steps, cfg.weights, cfg.eps_rmp)?;
    let prepared = problem.prepare_all(model, &policy, train)?;
    let history = fit(&mut policy, &problem, &prepared, cfg, &mut rng)?;
    Ok((policy, history))
}

/// Runs the optimization loop on prepared instances, leaving the best
/// parameters in `policy`.
pub(crate) fn fit(
    policy: &mut Policy,
    problem: &DpcProblem,
    prepared: &[PreparedInstance],
    cfg: &DpcTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PolicyHistory, DpcError> {
    if prepared.is_empty() {
        return Err(DpcError::Empty("train on"));
    }
    let mut params = policy_params(policy);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &params,
    );
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut history = PolicyHistory::default();
    let mut best = (f64::INFINITY, params.clone());
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&PreparedInstance> = chunk.iter().map(|&i| &prepared[i]).collect();
            let (loss, grads) = match problem.loss_and_grad(policy, &batch) {
                Ok(v) => v,
                Err(e) => {
                    return Err(DpcError::Diverged {
                        epoch,
                        reason: e.to_string(),
                    })
                }
            };
            total += loss * batch.len() as f64;
            opt.step(&mut params, &grads);
            store_params(policy, &params);
        }
        let mean = total / prepared.len() as f64;
        if !mean.is_finite() {
            return Err(DpcError::Diverged {
                epoch,
                reason: "non-finite loss".into(),
            });
        }
        history.epoch_loss.push(mean);
        info!("dpc epoch {epoch}: loss {mean:.6}");
        if mean < best.0 {
            best = (mean, params.clone());
            history.best_epoch = epoch;
        } else if epoch - history.best_epoch >= cfg.patience {
            info!("dpc: no improvement since epoch {}, stopping", history.best_epoch);
            break;
        }
    }
    store_params(policy, &best.1);
    Ok(history)
}
