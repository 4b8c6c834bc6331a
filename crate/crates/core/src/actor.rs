//! Policy-gradient estimators for the forward policy (critic `V`), the
//! backward policy (critic `W`) and the `log Z` head.

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::objectives::{evaluate_kind, route_backward, route_forward, BalanceTerms, Evaluated, ResidualKind};
use crate::policy::{BundleGrads, PolicyBundle};
use crate::sampler::Trajectory;

/// Cached and fresh log-probabilities may differ by at most this much.
pub const STALENESS_TOLERANCE: f64 = 1e-9;

/// A Monte Carlo gradient estimate.
#[derive(Clone, Debug)]
pub struct GradEstimate {
    pub grads: BundleGrads,
    pub samples: usize,
    pub mean_abs_advantage: f64,
}

/// `A_h = sum_{i >= h} gamma^{i-h} (R(s_i -> s_{i+1}) + V(s_{i+1}) - V(s_i))`
/// for every edge, from forward evaluation terms. Each TD term is the negated
/// single-edge residual.
pub fn advantages_forward(terms: &BalanceTerms, gamma: f64) -> Vec<f64> {
    let l = terms.len();
    let mut adv = vec![0.0; l];
    let mut acc = 0.0;
    for h in (0..l).rev() {
        let td = -(terms.edge[h] + terms.potential[h] - terms.potential[h + 1]);
        acc = td + gamma * acc;
        adv[h] = acc;
    }
    adv
}

/// `A_h = sum_{i <= h} gamma^{h-i} (R(s_i <- s_{i+1}) + W(s_i) - W(s_{i+1}))`
/// for every edge, from backward evaluation terms. Only `h <= L - 2` carries a
/// backward-policy decision.
pub fn advantages_backward(terms: &BalanceTerms, gamma: f64) -> Vec<f64> {
    let l = terms.len();
    let mut adv = vec![0.0; l];
    let mut acc = 0.0;
    for h in 0..l {
        let td = terms.edge[h] + terms.potential[h] - terms.potential[h + 1];
        acc = td + gamma * acc;
        adv[h] = acc;
    }
    adv
}

fn check_stale(cached: &[Vec<f64>], fresh: &[Vec<f64>], what: &str, skip_last: bool) -> Result<()> {
    for (k, (c, f)) in cached.iter().zip(fresh).enumerate() {
        let n = if skip_last { c.len() - 1 } else { c.len() };
        for e in 0..n {
            let gap = (c[e] - f[e]).abs();
            if gap > STALENESS_TOLERANCE || gap.is_nan() {
                return Err(Error::Stale(format!(
                    "{what} of trajectory {k}, edge {e} moved by {gap:e} since sampling"
                )));
            }
        }
    }
    Ok(())
}

fn uniform_weights(trajs: &[Trajectory]) -> Vec<f64> {
    vec![1.0 / trajs.len() as f64; trajs.len()]
}

/// `(1/K) sum_tau sum_h A_h grad log pi_F(s_{h+1} | s_h)`: an estimate of the
/// gradient of `V(s_0)`, i.e. minus the gradient of the forward KL.
pub fn grad_actor_forward(
    bundle: &PolicyBundle,
    env: &dyn Environment,
    trajs: &[Trajectory],
    gamma: f64,
) -> Result<GradEstimate> {
    grad_actor_forward_weighted(bundle, env, trajs, &uniform_weights(trajs), gamma)
}

/// As `grad_actor_forward` with explicit per-trajectory weights in place of
/// `1/K`; weighting by exact trajectory probabilities gives the estimator's
/// expectation.
pub fn grad_actor_forward_weighted(
    bundle: &PolicyBundle,
    env: &dyn Environment,
    trajs: &[Trajectory],
    weights: &[f64],
    gamma: f64,
) -> Result<GradEstimate> {
    check_weights(trajs, weights)?;
    let (ev, terms) = evaluate_kind(ResidualKind::SubEb, bundle, env, trajs, true, false)?;
    let cached: Vec<Vec<f64>> = trajs.iter().map(|t| t.log_pf.clone()).collect();
    check_stale(&cached, &ev.fresh_log_pf(trajs), "log pi_F", false)?;
    let mut abs_sum = 0.0;
    let coef: Vec<Vec<f64>> = terms
        .iter()
        .zip(weights)
        .map(|(t, &w)| {
            let a = advantages_forward(t, gamma);
            abs_sum += w * a.iter().map(|v| v.abs()).sum::<f64>();
            a.into_iter().map(|v| v * w).collect()
        })
        .collect();
    let mut grads = BundleGrads::zeros(bundle);
    route_forward(bundle, &ev, trajs, &coef, &mut grads)?;
    finish(grads, trajs.len(), abs_sum)
}

/// `(1/K) sum_tau sum_{h <= L-2} A_h grad log pi_B(s_h | s_{h+1})`: an
/// estimate of the gradient of `E[W(x)]` over the terminal pool, to be
/// ascended.
pub fn grad_actor_backward(
    bundle: &PolicyBundle,
    env: &dyn Environment,
    trajs: &[Trajectory],
    gamma: f64,
) -> Result<GradEstimate> {
    grad_actor_backward_weighted(bundle, env, trajs, &uniform_weights(trajs), gamma)
}

pub fn grad_actor_backward_weighted(
    bundle: &PolicyBundle,
    env: &dyn Environment,
    trajs: &[Trajectory],
    weights: &[f64],
    gamma: f64,
) -> Result<GradEstimate> {
    check_weights(trajs, weights)?;
    let (ev, terms) = evaluate_kind(ResidualKind::SubEbBackward, bundle, env, trajs, false, true)?;
    let cached: Vec<Vec<f64>> = trajs.iter().map(|t| t.log_pb.clone()).collect();
    check_stale(&cached, &ev.fresh_log_pb(trajs), "log pi_B", true)?;
    let mut abs_sum = 0.0;
    let coef: Vec<Vec<f64>> = terms
        .iter()
        .zip(weights)
        .map(|(t, &w)| {
            let mut a = advantages_backward(t, gamma);
            if let Some(last) = a.last_mut() {
                *last = 0.0;
            }
            abs_sum += w * a.iter().map(|v| v.abs()).sum::<f64>();
            a.into_iter().map(|v| v * w).collect()
        })
        .collect();
    let mut grads = BundleGrads::zeros(bundle);
    route_backward(bundle, &ev, trajs, &coef, &mut grads)?;
    finish(grads, trajs.len(), abs_sum)
}

/// Mean over the batch of `sum_h R(s_h -> s_{h+1})`, the coefficient of
/// `grad log Z`. Ascending it drives `log Z` towards `log Z* - KL`.
pub fn grad_logz(bundle: &PolicyBundle, env: &dyn Environment, trajs: &[Trajectory]) -> Result<f64> {
    let log_z = bundle
        .log_z
        .ok_or_else(|| Error::Contract("the log Z head is not active".into()))?;
    let ev = Evaluated::new(bundle, env, trajs, false, true, None)?;
    let log_pb = ev.fresh_log_pb(trajs);
    let mut total = 0.0;
    for (t, pb) in trajs.iter().zip(&log_pb) {
        let l = t.len();
        let intermediate: f64 = (0..l - 1).map(|e| pb[e] - t.log_pf[e]).sum();
        total += intermediate + t.log_reward - log_z - t.log_pf[l - 1];
    }
    let coef = total / trajs.len() as f64;
    if !coef.is_finite() {
        return Err(Error::NonFinite(format!("log Z coefficient is {coef}")));
    }
    Ok(coef)
}

fn check_weights(trajs: &[Trajectory], weights: &[f64]) -> Result<()> {
    if trajs.is_empty() {
        return Err(Error::Contract("empty trajectory batch".into()));
    }
    if trajs.len() != weights.len() {
        return Err(Error::Dimension {
            what: "trajectory weights",
            expected: trajs.len(),
            got: weights.len(),
        });
    }
    Ok(())
}

fn finish(grads: BundleGrads, samples: usize, abs_sum: f64) -> Result<GradEstimate> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("policy-gradient estimate".into()));
    }
    Ok(GradEstimate {
        grads,
        samples,
        mean_abs_advantage: abs_sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn terms() -> BalanceTerms {
        BalanceTerms {
            edge: vec![0.4, -0.7, 0.2, 1.1],
            potential: vec![0.3, -0.2, 0.9, 0.5, -1.4],
        }
    }

    fn td(t: &BalanceTerms, h: usize) -> f64 {
        -(t.edge[h] + t.potential[h] - t.potential[h + 1])
    }

    #[test]
    fn forward_gamma_endpoints() {
        let t = terms();
        let a0 = advantages_forward(&t, 0.0);
        let a1 = advantages_forward(&t, 1.0);
        for h in 0..4 {
            assert!((a0[h] - td(&t, h)).abs() < 1e-15);
            // telescoped: sum of edge rewards from h, plus the terminal target, minus V(s_h)
            let rewards: f64 = -t.edge[h..].iter().sum::<f64>() + t.potential[4];
            assert!((a1[h] - (rewards - t.potential[h])).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_gamma_endpoints() {
        let t = terms();
        let a0 = advantages_backward(&t, 0.0);
        let a1 = advantages_backward(&t, 1.0);
        for h in 0..4 {
            assert!((a0[h] + td(&t, h)).abs() < 1e-15);
            let rewards: f64 = t.edge[..=h].iter().sum();
            assert!((a1[h] - (rewards + t.potential[0] - t.potential[h + 1])).abs() < 1e-14);
        }
    }
}
