//! Exact computations on enumerable environments.
//!
//! Dynamic programs run over the topologically sorted state space in log
//! space. A brute-force trajectory enumerator provides a second, independent
//! route to every table so the two can be checked against each other.

pub mod theorems;

use std::collections::HashMap;

use rand::Rng;

use crate::env::{Environment, State};
use crate::error::{Error, Result};
use crate::policy::{masked_log_softmax, parent_mask, PolicyModel};
use crate::sampler::Trajectory;

/// Default cap on enumerated trajectories.
pub const DEFAULT_TRAJECTORY_CAP: usize = 1_000_000;

/// `log(sum exp(xs))`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// An outgoing edge: forward action and child index (`None` for `s_f`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OutEdge {
    pub action: usize,
    pub child: Option<usize>,
}

/// An incoming edge: parent index and the forward action taken there.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InEdge {
    pub parent: usize,
    pub action: usize,
}

/// The non-final states of an environment in topological order, with edges.
#[derive(Clone, Debug)]
pub struct StateSpace {
    pub states: Vec<State>,
    pub index: HashMap<State, usize>,
    pub out_edges: Vec<Vec<OutEdge>>,
    pub in_edges: Vec<Vec<InEdge>>,
    /// `log R(s)` for terminating states, `None` otherwise.
    pub log_reward: Vec<Option<f64>>,
    /// Number of actions from `s_0` to each state (the longest path).
    pub depth: Vec<usize>,
    pub action_count: usize,
    pub terminate_index: usize,
}

impl StateSpace {
    pub fn new(env: &dyn Environment, cap: usize) -> Result<Self> {
        let states = env.enumerate_states(cap)?;
        let index: HashMap<State, usize> =
            states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        let n = states.len();
        let mut out_edges = vec![Vec::new(); n];
        let mut in_edges = vec![Vec::new(); n];
        let mut log_reward = vec![None; n];
        for (i, s) in states.iter().enumerate() {
            let mask = env.valid_actions(s)?;
            for (a, &ok) in mask.iter().enumerate() {
                if !ok {
                    continue;
                }
                if a == env.terminate_index() {
                    out_edges[i].push(OutEdge {
                        action: a,
                        child: None,
                    });
                    log_reward[i] = Some(env.log_reward(s)?);
                } else {
                    let c = index[&env.step(s, a)?];
                    out_edges[i].push(OutEdge {
                        action: a,
                        child: Some(c),
                    });
                    in_edges[c].push(InEdge { parent: i, action: a });
                }
            }
        }
        let mut depth = vec![0usize; n];
        for i in 0..n {
            for e in &out_edges[i] {
                if let Some(c) = e.child {
                    depth[c] = depth[c].max(depth[i] + 1);
                }
            }
        }
        Ok(Self {
            states,
            index,
            out_edges,
            in_edges,
            log_reward,
            depth,
            action_count: env.action_count(),
            terminate_index: env.terminate_index(),
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Indices of terminating states, in topological order.
    pub fn terminals(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.log_reward[i].is_some()).collect()
    }

    pub fn index_of(&self, state: &State) -> Result<usize> {
        self.index
            .get(state)
            .copied()
            .ok_or_else(|| Error::Contract(format!("{state} is not in the enumerated state space")))
    }

    /// Exact number of complete trajectories, by path counting.
    pub fn trajectory_count(&self) -> f64 {
        let mut paths = vec![0.0f64; self.len()];
        paths[0] = 1.0;
        let mut total = 0.0;
        for i in 0..self.len() {
            for e in &self.out_edges[i] {
                match e.child {
                    Some(c) => paths[c] += paths[i],
                    None => total += paths[i],
                }
            }
        }
        total
    }
}

/// Forward and backward log-probabilities for every state of a space, both
/// indexed by forward action.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable {
    pub log_pf: Vec<Vec<f64>>,
    pub log_pb: Vec<Vec<f64>>,
    index: HashMap<State, usize>,
}

impl PolicyTable {
    fn with_rows(space: &StateSpace, log_pf: Vec<Vec<f64>>, log_pb: Vec<Vec<f64>>) -> Self {
        Self {
            log_pf,
            log_pb,
            index: space.index.clone(),
        }
    }

    /// Reads both policies off a model. `s_0` has no backward distribution;
    /// its row is all `-inf`.
    pub fn from_model(space: &StateSpace, env: &dyn Environment, model: &dyn PolicyModel) -> Result<Self> {
        let log_pf = model.forward_log_probs_batch(env, &space.states)?;
        let mut log_pb = vec![vec![f64::NEG_INFINITY; space.action_count]; space.len()];
        let rest: Vec<State> = space.states[1..].to_vec();
        if !rest.is_empty() {
            for (row, lp) in log_pb[1..].iter_mut().zip(model.backward_log_probs_batch(env, &rest)?) {
                *row = lp;
            }
        }
        Ok(Self::with_rows(space, log_pf, log_pb))
    }

    /// Uniform forward and backward policies.
    pub fn uniform(space: &StateSpace, env: &dyn Environment) -> Result<Self> {
        Self::random(space, env, &mut rand::rngs::mock::StepRng::new(0, 0), 0.0, 0.0)
    }

    /// Softmax policies with logits uniform in `+-forward_scale` (forward) and
    /// `+-backward_scale` (backward). A scale of 0 gives the uniform policy.
    pub fn random<R: Rng + ?Sized>(
        space: &StateSpace,
        env: &dyn Environment,
        rng: &mut R,
        forward_scale: f64,
        backward_scale: f64,
    ) -> Result<Self> {
        let a = space.action_count;
        let draw = |scale: f64, rng: &mut R| -> Vec<f64> {
            (0..a)
                .map(|_| if scale > 0.0 { rng.gen_range(-scale..scale) } else { 0.0 })
                .collect()
        };
        let mut log_pf = Vec::with_capacity(space.len());
        let mut log_pb = Vec::with_capacity(space.len());
        for (i, s) in space.states.iter().enumerate() {
            let logits = draw(forward_scale, rng);
            log_pf.push(masked_log_softmax(&logits, &env.valid_actions(s)?)?);
            let logits = draw(backward_scale, rng);
            if i == 0 {
                log_pb.push(vec![f64::NEG_INFINITY; a]);
            } else {
                log_pb.push(masked_log_softmax(&logits, &parent_mask(env, s)?)?);
            }
        }
        Ok(Self::with_rows(space, log_pf, log_pb))
    }

    /// The same backward policy with forward policy `pi_F*(s'|s) =
    /// pi_B(s|s') F*(s') / F*(s)` and `pi_F*(s_f|x) = R(x) / F*(x)`.
    pub fn optimal_forward(&self, space: &StateSpace, flow: &FlowTable) -> Self {
        let mut log_pf = vec![vec![f64::NEG_INFINITY; space.action_count]; space.len()];
        for i in 0..space.len() {
            for e in &space.out_edges[i] {
                log_pf[i][e.action] = match e.child {
                    Some(c) => self.log_pb[c][e.action] + flow.log_flow[c] - flow.log_flow[i],
                    None => space.log_reward[i].unwrap() - flow.log_flow[i],
                };
            }
        }
        Self::with_rows(space, log_pf, self.log_pb.clone())
    }
}

impl PolicyModel for PolicyTable {
    fn forward_log_probs_batch(&self, _env: &dyn Environment, states: &[State]) -> Result<Vec<Vec<f64>>> {
        states
            .iter()
            .map(|s| {
                self.index
                    .get(s)
                    .map(|&i| self.log_pf[i].clone())
                    .ok_or_else(|| Error::Contract(format!("{s} is not in the policy table")))
            })
            .collect()
    }

    fn backward_log_probs_batch(&self, _env: &dyn Environment, states: &[State]) -> Result<Vec<Vec<f64>>> {
        states
            .iter()
            .map(|s| match self.index.get(s) {
                Some(0) => Err(Error::Contract("backward policy queried at the initial state".into())),
                Some(&i) => Ok(self.log_pb[i].clone()),
                None => Err(Error::Contract(format!("{s} is not in the policy table"))),
            })
            .collect()
    }
}

/// `log F*(s)` for every state, and `log Z* = log F*(s_0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowTable {
    pub log_flow: Vec<f64>,
    pub log_z_star: f64,
}

/// The flow induced by the backward policy and the reward: a reverse sweep
/// with `F*(s) = sum_{s'} pi_B(s|s') F*(s')` and the terminal edge
/// contributing `R(x)`.
pub fn dp_true_flow(space: &StateSpace, table: &PolicyTable) -> FlowTable {
    let mut log_flow = vec![f64::NEG_INFINITY; space.len()];
    for i in (0..space.len()).rev() {
        log_flow[i] = log_sum_exp(space.out_edges[i].iter().map(|e| match e.child {
            Some(c) => table.log_pb[c][e.action] + log_flow[c],
            None => space.log_reward[i].unwrap(),
        }));
    }
    FlowTable {
        log_z_star: log_flow[0],
        log_flow,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistKind {
    PStar,
    PForward,
}

/// A distribution over the terminating states of a space.
#[derive(Clone, Debug, PartialEq)]
pub struct DistTable {
    /// State indices of the support, in topological order.
    pub terminals: Vec<usize>,
    pub probs: Vec<f64>,
    pub kind: DistKind,
}

/// Probability of visiting each state under the forward policy.
pub fn dp_visit(space: &StateSpace, table: &PolicyTable) -> Vec<f64> {
    let mut visit = vec![0.0; space.len()];
    visit[0] = 1.0;
    for i in 0..space.len() {
        for e in &space.out_edges[i] {
            if let Some(c) = e.child {
                visit[c] += visit[i] * table.log_pf[i][e.action].exp();
            }
        }
    }
    visit
}

/// `P_F(x) = visit(x) pi_F(s_f | x)`.
pub fn dp_forward_terminal_dist(space: &StateSpace, table: &PolicyTable) -> DistTable {
    let visit = dp_visit(space, table);
    let terminals = space.terminals();
    let probs = terminals
        .iter()
        .map(|&x| visit[x] * table.log_pf[x][space.terminate_index].exp())
        .collect();
    DistTable {
        terminals,
        probs,
        kind: DistKind::PForward,
    }
}

/// `P*(x) = R(x) / Z*`.
pub fn dp_target_dist(space: &StateSpace) -> DistTable {
    let terminals = space.terminals();
    let log_z = log_sum_exp(terminals.iter().map(|&x| space.log_reward[x].unwrap()));
    let probs = terminals
        .iter()
        .map(|&x| (space.log_reward[x].unwrap() - log_z).exp())
        .collect();
    DistTable {
        terminals,
        probs,
        kind: DistKind::PStar,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalKind {
    VDagger,
    WDagger,
}

/// An evaluation function tabulated over every state.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub values: Vec<f64>,
    pub kind: EvalKind,
}

/// `V(s) = E_{pi_F}[log pi~_B(s|s') - log pi_F(s'|s) + V(s')]`, with
/// `pi~_B(x|s_f) = R(x) / Z` and `V(s_f) = 0`. Pass `log_z = 0` for the
/// Z-free target.
pub fn dp_v_dagger(space: &StateSpace, table: &PolicyTable, log_z: f64) -> EvalTable {
    let mut values = vec![0.0; space.len()];
    for i in (0..space.len()).rev() {
        values[i] = space.out_edges[i]
            .iter()
            .map(|e| {
                let lp = table.log_pf[i][e.action];
                let inner = match e.child {
                    Some(c) => table.log_pb[c][e.action] - lp + values[c],
                    None => space.log_reward[i].unwrap() - log_z - lp,
                };
                lp.exp() * inner
            })
            .sum();
    }
    EvalTable {
        values,
        kind: EvalKind::VDagger,
    }
}

/// `W(s') = E_{pi_B}[log pi_F(s'|s) - log pi_B(s|s') + W(s)]` with
/// `W(s_0) = log_f0`.
pub fn dp_w_dagger(space: &StateSpace, table: &PolicyTable, log_f0: f64) -> EvalTable {
    let mut values = vec![0.0; space.len()];
    values[0] = log_f0;
    for i in 1..space.len() {
        values[i] = space.in_edges[i]
            .iter()
            .map(|e| {
                let lb = table.log_pb[i][e.action];
                lb.exp() * (table.log_pf[e.parent][e.action] - lb + values[e.parent])
            })
            .sum();
    }
    EvalTable {
        values,
        kind: EvalKind::WDagger,
    }
}

/// `log F(s) = log F(s_0) + log visit(s)`: the state flow of the forward
/// policy with total flow `exp(log_f0)`.
pub fn dp_forward_flow(space: &StateSpace, table: &PolicyTable, log_f0: f64) -> Vec<f64> {
    dp_visit(space, table)
        .into_iter()
        .map(|v| log_f0 + v.ln())
        .collect()
}

fn check_support(p: &DistTable, q: &DistTable) -> Result<()> {
    if p.terminals != q.terminals {
        return Err(Error::Contract("distributions have different supports".into()));
    }
    Ok(())
}

/// `1/2 sum |p - q|`.
pub fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn kl_term(a: f64, m: f64) -> f64 {
    if a > 0.0 {
        a * (a / m).ln()
    } else {
        0.0
    }
}

/// Jensen-Shannon divergence in nats, against the mixture `(p + q) / 2`.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        total += 0.5 * kl_term(a, m) + 0.5 * kl_term(b, m);
    }
    total.max(0.0)
}

/// `min(E_p[R] / E_q[R], 1)`.
pub fn mode_accuracy(p: &[f64], q: &[f64], rewards: &[f64]) -> f64 {
    let ep: f64 = p.iter().zip(rewards).map(|(a, r)| a * r).sum();
    let eq: f64 = q.iter().zip(rewards).map(|(a, r)| a * r).sum();
    (ep / eq).min(1.0)
}

pub fn metric_tv(p: &DistTable, q: &DistTable) -> Result<f64> {
    check_support(p, q)?;
    Ok(tv(&p.probs, &q.probs))
}

pub fn metric_jsd(p: &DistTable, q: &DistTable) -> Result<f64> {
    check_support(p, q)?;
    Ok(jsd(&p.probs, &q.probs))
}

pub fn metric_mode_accuracy(p_forward: &DistTable, p_star: &DistTable, space: &StateSpace) -> Result<f64> {
    check_support(p_forward, p_star)?;
    let rewards: Vec<f64> = p_star
        .terminals
        .iter()
        .map(|&x| space.log_reward[x].unwrap().exp())
        .collect();
    Ok(mode_accuracy(&p_forward.probs, &p_star.probs, &rewards))
}

/// One complete trajectory with per-edge log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct EnumeratedTrajectory {
    /// State indices `s_0 .. x`.
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    /// Per edge, including the terminal one.
    pub log_pf: Vec<f64>,
    /// Per non-terminal edge; the terminal slot is 0.
    pub log_pb: Vec<f64>,
}

impl EnumeratedTrajectory {
    pub fn terminal(&self) -> usize {
        *self.states.last().unwrap()
    }

    pub fn log_prob_forward(&self) -> f64 {
        self.log_pf.iter().sum()
    }

    /// `log P_B(tau | x)`.
    pub fn log_prob_backward(&self) -> f64 {
        self.log_pb.iter().sum()
    }

    /// The sampler representation of this path.
    pub fn to_trajectory(&self, env: &dyn Environment, space: &StateSpace) -> Result<Trajectory> {
        let mut states: Vec<State> = self.states.iter().map(|&i| space.states[i].clone()).collect();
        states.push(env.final_state().with_step_index(self.states.len()));
        let actions = self
            .actions
            .iter()
            .map(|&a| crate::env::Action {
                index: a,
                is_terminate: a == space.terminate_index,
            })
            .collect();
        let log_reward = space.log_reward[self.terminal()].unwrap();
        Ok(Trajectory {
            states,
            actions,
            log_pf: self.log_pf.clone(),
            log_pb: self.log_pb.clone(),
            terminal_reward: env.reward(&space.states[self.terminal()])?,
            log_reward,
        })
    }
}

/// Every complete trajectory, by depth-first search. Refuses (with the exact
/// count) when there are more than `cap`.
pub fn enumerate_trajectories(
    space: &StateSpace,
    table: &PolicyTable,
    cap: usize,
) -> Result<Vec<EnumeratedTrajectory>> {
    let count = space.trajectory_count();
    if count > cap as f64 {
        return Err(Error::NotEnumerable(format!(
            "{count:.0} trajectories exceed the cap of {cap}"
        )));
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut path = EnumeratedTrajectory {
        states: vec![0],
        actions: Vec::new(),
        log_pf: Vec::new(),
        log_pb: Vec::new(),
    };
    dfs(space, table, &mut path, &mut out);
    Ok(out)
}

fn dfs(
    space: &StateSpace,
    table: &PolicyTable,
    path: &mut EnumeratedTrajectory,
    out: &mut Vec<EnumeratedTrajectory>,
) {
    let s = *path.states.last().unwrap();
    for e in &space.out_edges[s] {
        path.actions.push(e.action);
        path.log_pf.push(table.log_pf[s][e.action]);
        match e.child {
            None => {
                path.log_pb.push(0.0);
                out.push(path.clone());
                path.log_pb.pop();
            }
            Some(c) => {
                path.log_pb.push(table.log_pb[c][e.action]);
                path.states.push(c);
                dfs(space, table, path, out);
                path.states.pop();
                path.log_pb.pop();
            }
        }
        path.actions.pop();
        path.log_pf.pop();
    }
}

/// Independent tables computed from explicit path sums.
pub mod brute {
    use super::*;

    /// `F*(s) = sum over trajectories through s of P_B(tau | x) R(x)`.
    pub fn true_flow(space: &StateSpace, trajs: &[EnumeratedTrajectory]) -> Vec<f64> {
        let mut flow = vec![0.0; space.len()];
        for t in trajs {
            let w = (t.log_prob_backward() + space.log_reward[t.terminal()].unwrap()).exp();
            for &s in &t.states {
                flow[s] += w;
            }
        }
        flow.into_iter().map(f64::ln).collect()
    }

    /// `P_F(x)` as a sum of trajectory probabilities.
    pub fn forward_terminal(space: &StateSpace, trajs: &[EnumeratedTrajectory]) -> Vec<f64> {
        let mut p = vec![0.0; space.len()];
        for t in trajs {
            p[t.terminal()] += t.log_prob_forward().exp();
        }
        space.terminals().into_iter().map(|x| p[x]).collect()
    }

    /// Every path from `s` to `s_f` as `(log P_F(suffix | s), log P_B(suffix | x), x)`.
    fn suffixes(space: &StateSpace, table: &PolicyTable, s: usize) -> Vec<(f64, f64, usize)> {
        let mut out = Vec::new();
        let mut stack = vec![(s, 0.0, 0.0)];
        while let Some((u, lf, lb)) = stack.pop() {
            for e in &space.out_edges[u] {
                let f = lf + table.log_pf[u][e.action];
                match e.child {
                    None => out.push((f, lb, u)),
                    Some(c) => stack.push((c, f, lb + table.log_pb[c][e.action])),
                }
            }
        }
        out
    }

    /// Every path from `s_0` to `s` as `(log P_F(prefix), log P_B(prefix | s))`.
    fn prefixes(space: &StateSpace, table: &PolicyTable, s: usize) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let mut stack = vec![(s, 0.0, 0.0)];
        while let Some((u, lf, lb)) = stack.pop() {
            if u == 0 {
                out.push((lf, lb));
                continue;
            }
            for e in &space.in_edges[u] {
                stack.push((
                    e.parent,
                    lf + table.log_pf[e.parent][e.action],
                    lb + table.log_pb[u][e.action],
                ));
            }
        }
        out
    }

    /// `KL(P_F(. | s) || P_B-induced suffix distribution)` for every state,
    /// where the target suffix law is `P_B(suffix | x) R(x) / F*(s)`.
    pub fn forward_suffix_kl(space: &StateSpace, table: &PolicyTable, log_flow: &[f64]) -> Vec<f64> {
        (0..space.len())
            .map(|s| {
                suffixes(space, table, s)
                    .into_iter()
                    .map(|(lf, lb, x)| {
                        let target = lb + space.log_reward[x].unwrap() - log_flow[s];
                        lf.exp() * (lf - target)
                    })
                    .sum()
            })
            .collect()
    }

    /// `V(s) = log F*(s) - log Z - KL` from explicit suffix sums.
    pub fn v_dagger(space: &StateSpace, table: &PolicyTable, log_z: f64) -> Vec<f64> {
        let log_flow = true_flow_by_suffix(space, table);
        let kl = forward_suffix_kl(space, table, &log_flow);
        log_flow.iter().zip(&kl).map(|(f, k)| f - log_z - k).collect()
    }

    /// `F*(s)` from suffix sums at each state, independent of whole-trajectory sums.
    pub fn true_flow_by_suffix(space: &StateSpace, table: &PolicyTable) -> Vec<f64> {
        (0..space.len())
            .map(|s| {
                log_sum_exp(
                    suffixes(space, table, s)
                        .into_iter()
                        .map(|(_, lb, x)| lb + space.log_reward[x].unwrap()),
                )
            })
            .collect()
    }

    /// `visit(s)` as a sum over prefixes.
    pub fn visit(space: &StateSpace, table: &PolicyTable) -> Vec<f64> {
        (0..space.len())
            .map(|s| prefixes(space, table, s).into_iter().map(|(lf, _)| lf.exp()).sum())
            .collect()
    }

    /// `KL(P_B(prefix | s) || P_F(prefix | s))` for every state.
    pub fn backward_prefix_kl(space: &StateSpace, table: &PolicyTable) -> Vec<f64> {
        let visit = visit(space, table);
        (0..space.len())
            .map(|s| {
                prefixes(space, table, s)
                    .into_iter()
                    .map(|(lf, lb)| lb.exp() * (lb - (lf - visit[s].ln())))
                    .sum()
            })
            .collect()
    }

    /// `W(s) = log F(s) - KL` with `F(s) = exp(log_f0) visit(s)`.
    pub fn w_dagger(space: &StateSpace, table: &PolicyTable, log_f0: f64) -> Vec<f64> {
        let visit = visit(space, table);
        let kl = backward_prefix_kl(space, table);
        visit
            .iter()
            .zip(&kl)
            .map(|(v, k)| log_f0 + v.ln() - k)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Hypergrid, SequenceEnv};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space(env: &dyn Environment) -> StateSpace {
        StateSpace::new(env, 10_000).unwrap()
    }

    #[test]
    fn two_terminal_chain() {
        let env = Hypergrid::new(2, 1).unwrap();
        let sp = space(&env);
        let table = PolicyTable::uniform(&sp, &env).unwrap();
        let flow = dp_true_flow(&sp, &table);
        let r0 = env.reward(&env.state(&[0])).unwrap();
        let r1 = env.reward(&env.state(&[1])).unwrap();
        assert!((flow.log_z_star - (r0 + r1).ln()).abs() < 1e-15);
        let pf = dp_forward_terminal_dist(&sp, &table);
        assert_eq!(pf.probs, vec![0.5, 0.5]);
        let trajs = enumerate_trajectories(&sp, &table, 10).unwrap();
        assert_eq!(trajs.len(), 2);
    }

    #[test]
    fn single_trajectory_values() {
        // seq_len 1 over a 1-block alphabet: s_0 -> (0) via two parallel edges
        let env = SequenceEnv::new(1, 1, 1.0).unwrap();
        let sp = space(&env);
        let table = PolicyTable::uniform(&sp, &env).unwrap();
        let x = sp.terminals()[0];
        let lr = sp.log_reward[x].unwrap();
        let flow = dp_true_flow(&sp, &table);
        assert!((flow.log_z_star - lr).abs() < 1e-15);
        // pi_F picks one of two parallel edges; pi_B undoes it with prob 1/2
        let v = dp_v_dagger(&sp, &table, 0.0);
        assert!((v.values[0] - lr).abs() < 1e-15);
    }

    #[test]
    fn distributions_and_metrics() {
        let p = [0.75, 0.25];
        let q = [0.5, 0.5];
        assert_eq!(tv(&p, &p), 0.0);
        assert!((tv(&p, &q) - 0.25).abs() < 1e-15);
        assert_eq!(tv(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(jsd(&q, &q), 0.0);
        // p = (1, 0), q = (1/2, 1/2): m = (3/4, 1/4)
        let expected = 0.5 * (1.0 * (1.0f64 / 0.75).ln())
            + 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln());
        assert!((jsd(&[1.0, 0.0], &q) - expected).abs() < 1e-12);
        assert_eq!(mode_accuracy(&q, &q, &[1.0, 3.0]), 1.0);
    }

    #[test]
    fn metric_bounds_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.gen_range(1..8);
            let mut draw = || {
                let v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(3)).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let p = draw();
            let q = draw();
            let r: Vec<f64> = (0..n).map(|i| 0.1 + i as f64).collect();
            let t = tv(&p, &q);
            let j = jsd(&p, &q);
            let m = mode_accuracy(&p, &q, &r);
            assert!((0.0..=1.0 + 1e-12).contains(&t));
            assert!((0.0..=2f64.ln() + 1e-12).contains(&j));
            assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn support_mismatch_rejected() {
        let a = DistTable {
            terminals: vec![0, 1],
            probs: vec![0.5, 0.5],
            kind: DistKind::PStar,
        };
        let b = DistTable {
            terminals: vec![0, 2],
            ..a.clone()
        };
        assert!(metric_tv(&a, &b).is_err());
    }

    #[test]
    fn trajectory_count_matches_path_recursion() {
        // paths to (i, j) on the grid number C(i + j, i); each state terminates once
        let env = Hypergrid::new(3, 2).unwrap();
        let sp = space(&env);
        let mut expected = 0.0;
        for i in 0..3u64 {
            for j in 0..3u64 {
                let c = (1..=i).fold(1u64, |acc, k| acc * (j + k) / k);
                expected += c as f64;
            }
        }
        assert_eq!(sp.trajectory_count(), expected);
        let table = PolicyTable::uniform(&sp, &env).unwrap();
        let trajs = enumerate_trajectories(&sp, &table, 1000).unwrap();
        assert_eq!(trajs.len() as f64, expected);
        let total: f64 = trajs.iter().map(|t| t.log_prob_forward().exp()).sum();
        assert!((total - 1.0).abs() < 1e-10);
        assert!(matches!(
            enumerate_trajectories(&sp, &table, 5),
            Err(Error::NotEnumerable(_))
        ));
    }

    #[test]
    fn optimal_forward_reproduces_target() {
        let env = Hypergrid::new(3, 2).unwrap();
        let sp = space(&env);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = PolicyTable::random(&sp, &env, &mut rng, 1.0, 1.0).unwrap();
        let flow = dp_true_flow(&sp, &table);
        let opt = table.optimal_forward(&sp, &flow);
        for row in &opt.log_pf {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let pf = dp_forward_terminal_dist(&sp, &opt);
        let ps = dp_target_dist(&sp);
        assert!(metric_tv(&pf, &ps).unwrap() < 1e-12);
        assert!((metric_mode_accuracy(&pf, &ps, &sp).unwrap() - 1.0).abs() < 1e-12);
    }
}
