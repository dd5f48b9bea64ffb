use super::Network;

/// Steady-state least-cost generator set-points for the given loads.
///
/// `loads` follows [`Network::loads`] order (negative injections); `cost` lists
/// the generators in bus order followed by the slack. Every generator starts at
/// its lower bound; generators cheaper than the slack then cover any remaining
/// deficit in merit order (ties go to the earlier bus). Surplus at the lower
/// bounds stays with the slack.
/// The objective is `Σ c_i P_i + c_s |P_s|` with `P_s = -ΣP - ΣL`.
pub fn static_dispatch(net: &Network, loads: &[f64], cost: &[f64]) -> Vec<f64> {
    let n_g = net.n_generators();
    assert_eq!(loads.len(), net.n_loads(), "one value per load bus");
    assert_eq!(cost.len(), n_g + 1, "one cost per generator plus the slack");
    let (p_min, p_max) = net.generator_bounds();
    let c_s = cost[n_g];
    let mut p = p_min.clone();

    // P_s = -ΣP - ΣL; deficit > 0 means the slack is producing.
    let mut deficit = -p.iter().sum::<f64>() - loads.iter().sum::<f64>();
    let mut order: Vec<usize> = (0..n_g).filter(|&g| cost[g] < c_s).collect();
    order.sort_by(|&a, &b| cost[a].total_cmp(&cost[b]));
    for g in order {
        if deficit <= 0.0 {
            break;
        }
        let take = deficit.min(p_max[g] - p_min[g]);
        p[g] += take;
        deficit -= take;
    }
    // Only a generator whose cost is below -c_s gains from pushing the slack
    // into absorption.
    for g in 0..n_g {
        if cost[g] + c_s < 0.0 {
            p[g] = p_max[g];
        }
    }
    p
}
