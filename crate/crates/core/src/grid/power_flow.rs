use nalgebra::{DMatrix, DVector};

use super::{GridError, Network};

pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 50;

/// Solves `f_i(θ) = p_i` for every non-slack bus with `θ_s = 0`, starting from
/// flat angles. `p_nonslack` follows [`Network::non_slack`] order. Returns the
/// full angle vector (one entry per bus).
pub fn solve_power_flow(net: &Network, p_nonslack: &[f64]) -> Result<Vec<f64>, GridError> {
    solve_power_flow_from(net, p_nonslack, None)
}

/// As [`solve_power_flow`] but warm-started from `guess` (full bus angles).
pub fn solve_power_flow_from(
    net: &Network,
    p_nonslack: &[f64],
    guess: Option<&[f64]>,
) -> Result<Vec<f64>, GridError> {
    let idx = net.non_slack();
    let m = idx.len();
    if p_nonslack.len() != m {
        return Err(GridError::DimensionMismatch {
            expected: m,
            got: p_nonslack.len(),
        });
    }
    let mut theta = match guess {
        Some(g) if g.len() == net.n_buses() => g.to_vec(),
        Some(g) => {
            return Err(GridError::DimensionMismatch {
                expected: net.n_buses(),
                got: g.len(),
            })
        }
        None => vec![0.0; net.n_buses()],
    };
    theta[net.slack()] = 0.0;

    let mut residual = f64::INFINITY;
    for _ in 0..=NEWTON_MAX_ITER {
        let f = net.injection_unchecked(&theta);
        let r = DVector::from_iterator(m, idx.iter().zip(p_nonslack).map(|(&i, &p)| f[i] - p));
        residual = r.amax();
        if !residual.is_finite() {
            break;
        }
        if residual <= NEWTON_TOL {
            return Ok(theta);
        }
        let full = net.injection_jacobian(&theta);
        let jac = DMatrix::from_fn(m, m, |a, b| full[(idx[a], idx[b])]);
        let Some(delta) = jac.lu().solve(&r) else {
            break;
        };
        for (a, &i) in idx.iter().enumerate() {
            theta[i] -= delta[a];
        }
    }
    Err(GridError::InfeasibleInjection {
        iterations: NEWTON_MAX_ITER,
        residual,
    })
}
