//! Path-integral correction: blends the LQR offsets toward a softmax-
//! weighted combination of the sampled rollout actions, weighting rollouts
//! by their cost-to-go.

use crate::policy::LinearGaussianPolicy;
use nalgebra::DVector;

/// Softmax weights over rollouts from cost-to-go values: low cost gets high
/// weight; invariant to additive shifts.
pub fn pi2_weights(costs_to_go: &[f64], temperature: f64) -> Vec<f64> {
    let min = costs_to_go.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = costs_to_go
        .iter()
        .map(|&s| (-(s - min) / temperature).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

/// Per-timestep offset update:
/// k_t <- (1 - beta) k_t + beta * sum_m w_m (u_{m,t} - K_t x_{m,t}),
/// with w_m the softmax of rollout cost-to-go from t. Gains and covariances
/// are unchanged.
pub fn pi2_update(
    policy: &LinearGaussianPolicy,
    states: &[Vec<DVector<f64>>],
    actions: &[Vec<DVector<f64>>],
    costs: &[Vec<f64>],
    temperature: f64,
    blend: f64,
) -> LinearGaussianPolicy {
    let horizon = policy.horizon();
    let mut out = policy.clone();
    for t in 0..horizon {
        let ctg: Vec<f64> = costs.iter().map(|c| c[t..].iter().sum()).collect();
        let weights = pi2_weights(&ctg, temperature);
        let mut target = DVector::zeros(policy.action_dim());
        for (m, w) in weights.iter().enumerate() {
            let residual = &actions[m][t] - &policy.gains[t] * &states[m][t];
            target += residual * *w;
        }
        out.offsets[t] = &policy.offsets[t] * (1.0 - blend) + target * blend;
    }
    out
}
