//! Exact checks of the balance characterizations.
//!
//! Expectations are taken with a padding convention: once a trajectory has
//! reached `s_f`, later edges contribute nothing. A window `(i, i + l)` that
//! starts at state `s` then has expected residual
//! `c_l(s) = g(s) + sum_{s'} pi_F(s'|s) c_{l-1}(s')`, where `g(s)` is the
//! expected single-edge residual at `s`. Backward windows are the mirror
//! image, conditioned on the state they end at.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::objectives::BalanceTerms;

/// Max absolute value over a set of checked quantities, and where it occurred.
#[derive(Clone, Debug, PartialEq)]
pub struct Extremum {
    pub value: f64,
    pub at: String,
}

impl Extremum {
    fn none() -> Self {
        Self {
            value: 0.0,
            at: "-".into(),
        }
    }

    fn offer(&mut self, v: f64, at: impl FnOnce() -> String) {
        let a = if v.is_nan() { f64::INFINITY } else { v.abs() };
        if a > self.value || (self.at == "-" && a >= self.value) {
            self.value = a;
            self.at = at();
        }
    }

    fn merge(&mut self, other: Extremum) {
        if other.value > self.value || self.at == "-" {
            *self = other;
        }
    }
}

fn label(space: &StateSpace, s: usize, len: usize, backward: bool) -> String {
    let d = space.depth[s];
    let (i, j) = if backward {
        (d.saturating_sub(len), d)
    } else {
        (d, d + len)
    };
    format!("pair ({i}, {j}) at state {}", space.states[s])
}

/// Longest window worth checking: the longest trajectory.
fn max_window(space: &StateSpace) -> usize {
    space.depth.iter().copied().max().unwrap_or(0) + 1
}

/// Expected forward single-edge residual at each state with potential `p`
/// and terminal target `log R(x) - log_z`.
pub fn forward_edge_expectation(space: &StateSpace, table: &PolicyTable, p: &[f64], log_z: f64) -> Vec<f64> {
    (0..space.len())
        .map(|s| {
            space.out_edges[s]
                .iter()
                .map(|e| {
                    let lf = table.log_pf[s][e.action];
                    let r = match e.child {
                        Some(c) => lf - table.log_pb[c][e.action] + p[s] - p[c],
                        None => lf + p[s] - (space.log_reward[s].unwrap() - log_z),
                    };
                    lf.exp() * r
                })
                .sum()
        })
        .collect()
}

/// `c[l - 1][s]` for windows of `l = 1 ..= max_len` edges starting at `s`.
pub fn forward_windows(space: &StateSpace, table: &PolicyTable, p: &[f64], log_z: f64) -> Vec<Vec<f64>> {
    let g = forward_edge_expectation(space, table, p, log_z);
    let mut out: Vec<Vec<f64>> = vec![g.clone()];
    for _ in 1..max_window(space) {
        let prev = out.last().unwrap();
        let next = (0..space.len())
            .map(|s| {
                g[s] + space.out_edges[s]
                    .iter()
                    .filter_map(|e| e.child.map(|c| table.log_pf[s][e.action].exp() * prev[c]))
                    .sum::<f64>()
            })
            .collect();
        out.push(next);
    }
    out
}

/// Largest conditional forward window expectation.
pub fn forward_conditional_max(space: &StateSpace, table: &PolicyTable, p: &[f64], log_z: f64) -> Extremum {
    let mut ext = Extremum::none();
    for (l, row) in forward_windows(space, table, p, log_z).iter().enumerate() {
        for (s, &v) in row.iter().enumerate() {
            ext.offer(v, || label(space, s, l + 1, false));
        }
    }
    ext
}

/// `E[delta(i, j)]` over whole trajectories for every `0 <= i < j <= H + 1`,
/// through the per-step state marginals.
pub fn forward_pair_expectations(
    space: &StateSpace,
    table: &PolicyTable,
    p: &[f64],
    log_z: f64,
) -> Vec<((usize, usize), f64)> {
    let windows = forward_windows(space, table, p, log_z);
    let h = max_window(space);
    let mut marginal = vec![0.0; space.len()];
    marginal[0] = 1.0;
    let mut out = Vec::new();
    for i in 0..h {
        for j in i + 1..=h {
            let v: f64 = marginal.iter().zip(&windows[j - i - 1]).map(|(m, c)| m * c).sum();
            out.push(((i, j), v));
        }
        let mut next = vec![0.0; space.len()];
        for s in 0..space.len() {
            for e in &space.out_edges[s] {
                if let Some(c) = e.child {
                    next[c] += marginal[s] * table.log_pf[s][e.action].exp();
                }
            }
        }
        marginal = next;
    }
    out
}

pub fn forward_pair_max(space: &StateSpace, table: &PolicyTable, p: &[f64], log_z: f64) -> Extremum {
    let mut ext = Extremum::none();
    for ((i, j), v) in forward_pair_expectations(space, table, p, log_z) {
        ext.offer(v, || format!("pair ({i}, {j})"));
    }
    ext
}

/// Expected backward single-edge residual entering each state with potential
/// `w`; zero at `s_0`, which has no parents.
pub fn backward_edge_expectation(space: &StateSpace, table: &PolicyTable, w: &[f64]) -> Vec<f64> {
    (0..space.len())
        .map(|s| {
            space.in_edges[s]
                .iter()
                .map(|e| {
                    let lb = table.log_pb[s][e.action];
                    lb.exp() * (table.log_pf[e.parent][e.action] - lb + w[e.parent] - w[s])
                })
                .sum()
        })
        .collect()
}

/// Largest conditional backward window expectation over windows that end at
/// a non-final state.
pub fn backward_conditional_max(space: &StateSpace, table: &PolicyTable, w: &[f64]) -> Extremum {
    let h = backward_edge_expectation(space, table, w);
    let mut prev = h.clone();
    let mut ext = Extremum::none();
    for l in 1..=max_window(space) {
        if l > 1 {
            prev = (0..space.len())
                .map(|s| {
                    h[s] + space.in_edges[s]
                        .iter()
                        .map(|e| table.log_pb[s][e.action].exp() * prev[e.parent])
                        .sum::<f64>()
                })
                .collect();
        }
        for (s, &v) in prev.iter().enumerate() {
            if space.in_edges[s].is_empty() {
                continue;
            }
            ext.offer(v, || label(space, s, l, true));
        }
    }
    ext
}

/// `log pi_F(s_f | x) + W(x) - log R(x)` per terminating state: the residual
/// of the terminal edge of every backward trajectory from `x`.
pub fn backward_terminal_max(space: &StateSpace, table: &PolicyTable, w: &[f64]) -> Extremum {
    let mut ext = Extremum::none();
    for x in space.terminals() {
        let v = table.log_pf[x][space.terminate_index] + w[x] - space.log_reward[x].unwrap();
        ext.offer(v, || format!("terminal edge at state {}", space.states[x]));
    }
    ext
}

/// Largest pointwise flow residual `|delta(i, j)|` over every subtrajectory of
/// every trajectory, with `log F` potentials and `log R` at `s_f`.
pub fn subtb_pointwise_max(space: &StateSpace, trajs: &[EnumeratedTrajectory], log_flow: &[f64]) -> Extremum {
    let mut ext = Extremum::none();
    for (k, t) in trajs.iter().enumerate() {
        let l = t.log_pf.len();
        let edge = (0..l)
            .map(|e| if e + 1 < l { t.log_pf[e] - t.log_pb[e] } else { t.log_pf[e] })
            .collect();
        let mut potential: Vec<f64> = t.states.iter().map(|&s| log_flow[s]).collect();
        potential.push(space.log_reward[t.terminal()].unwrap());
        let terms = BalanceTerms { edge, potential };
        for ((i, j), r) in crate::objectives::subtrajectory_pairs(l).into_iter().zip(terms.residuals()) {
            ext.offer(r, || format!("trajectory {k}, pair ({i}, {j})"));
        }
    }
    ext
}

/// One line of a suite run.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: &'static str,
    pub value: f64,
    pub at: String,
    /// Passing requires `value < bound`, or `value > bound` when `above` is set.
    pub bound: f64,
    pub above: bool,
}

impl CheckLine {
    fn below(name: &'static str, ext: Extremum, bound: f64) -> Self {
        Self {
            name,
            value: ext.value,
            at: ext.at,
            bound,
            above: false,
        }
    }

    pub fn passed(&self) -> bool {
        if self.above {
            self.value > self.bound
        } else {
            self.value < self.bound
        }
    }
}

/// Suite settings.
#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub trials: usize,
    pub seed: u64,
    pub forward_scale: f64,
    pub backward_scale: f64,
    pub tolerance: f64,
    pub pointwise_tolerance: f64,
    /// Perturbation size for the sensitivity check.
    pub perturbation: f64,
    pub sensitivity: f64,
    /// Adds `delta` to `V` at one state before the forward checks.
    pub perturb_v: Option<(usize, f64)>,
    pub trajectory_cap: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            trials: 5,
            seed: 0,
            forward_scale: 1.5,
            backward_scale: 1.0,
            tolerance: 1e-9,
            pointwise_tolerance: 1e-10,
            perturbation: 0.1,
            sensitivity: 0.01,
            perturb_v: None,
            trajectory_cap: DEFAULT_TRAJECTORY_CAP,
        }
    }
}

/// Runs every exact check on random policy tables and returns one line per
/// check, each the worst case over all trials.
pub fn run_suite(env: &dyn Environment, space: &StateSpace, cfg: &SuiteConfig) -> Result<Vec<CheckLine>> {
    let mut fwd_cond = Extremum::none();
    let mut fwd_pair = Extremum::none();
    let mut sensitivity = Extremum {
        value: f64::INFINITY,
        at: "-".into(),
    };
    let mut flow_pointwise = Extremum::none();
    let mut flow_kl = Extremum::none();
    let mut flow_cond = Extremum::none();
    let mut bwd_cond = Extremum::none();
    let mut bwd_kl = Extremum::none();
    let mut bwd_terminal = Extremum::none();

    for trial in 0..cfg.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1000).wrapping_add(trial as u64));
        let table = PolicyTable::random(space, env, &mut rng, cfg.forward_scale, cfg.backward_scale)?;
        let log_z = rng.gen_range(-1.0..1.0);

        // forward evaluation balance with the exact evaluation function
        let mut v = dp_v_dagger(space, &table, log_z).values;
        if let Some((s, delta)) = cfg.perturb_v {
            v[s] += delta;
        }
        fwd_cond.merge(forward_conditional_max(space, &table, &v, log_z));
        fwd_pair.merge(forward_pair_max(space, &table, &v, log_z));

        // any single-state perturbation is detected
        let exact = dp_v_dagger(space, &table, log_z).values;
        for s in 0..space.len() {
            let mut bumped = exact.clone();
            bumped[s] += cfg.perturbation;
            let ext = forward_conditional_max(space, &table, &bumped, log_z);
            if ext.value < sensitivity.value {
                sensitivity = Extremum {
                    value: ext.value,
                    at: format!("perturbed state {}", space.states[s]),
                };
            }
        }

        // flow balance: pointwise at the optimum, in expectation with log F* - KL
        let flow = dp_true_flow(space, &table);
        let opt = table.optimal_forward(space, &flow);
        let trajs = enumerate_trajectories(space, &opt, cfg.trajectory_cap)?;
        flow_pointwise.merge(subtb_pointwise_max(space, &trajs, &flow.log_flow));
        let kl = brute::forward_suffix_kl(space, &table, &flow.log_flow);
        let f: Vec<f64> = flow.log_flow.iter().zip(&kl).map(|(a, b)| a - b).collect();
        let v0 = dp_v_dagger(space, &table, 0.0).values;
        let mut gap = Extremum::none();
        for s in 0..space.len() {
            gap.offer(f[s] - v0[s], || format!("state {}", space.states[s]));
        }
        flow_kl.merge(gap);
        flow_cond.merge(forward_conditional_max(space, &table, &f, 0.0));

        // backward evaluation balance
        let log_f0 = flow.log_z_star + rng.gen_range(-1.0..1.0);
        let w = dp_w_dagger(space, &table, log_f0).values;
        bwd_cond.merge(backward_conditional_max(space, &table, &w));
        let wb = brute::w_dagger(space, &table, log_f0);
        let mut gap = Extremum::none();
        for s in 0..space.len() {
            gap.offer(w[s] - wb[s], || format!("state {}", space.states[s]));
        }
        bwd_kl.merge(gap);
        let w_opt = dp_w_dagger(space, &opt, flow.log_z_star).values;
        bwd_terminal.merge(backward_terminal_max(space, &opt, &w_opt));
        bwd_cond.merge(backward_conditional_max(space, &opt, &w_opt));
    }

    let tol = cfg.tolerance;
    Ok(vec![
        CheckLine::below("forward evaluation balance, per start state", fwd_cond, tol),
        CheckLine::below("forward evaluation balance, per pair", fwd_pair, tol),
        CheckLine {
            name: "forward evaluation balance detects a perturbed state",
            value: sensitivity.value,
            at: sensitivity.at,
            bound: cfg.sensitivity,
            above: true,
        },
        CheckLine::below("flow balance at the optimum, pointwise", flow_pointwise, cfg.pointwise_tolerance),
        CheckLine::below("log F* - KL equals the exact evaluation function", flow_kl, tol),
        CheckLine::below("flow balance with log F* - KL, per start state", flow_cond, tol),
        CheckLine::below("backward evaluation balance, per end state", bwd_cond, tol),
        CheckLine::below("backward evaluation equals log F - KL", bwd_kl, tol),
        CheckLine::below("backward terminal edge at the optimum", bwd_terminal, tol),
    ])
}
