//! Trajectory sampling: on-policy forward rollouts, mixture-policy rollouts
//! and backward rollouts from terminal states.
//!
//! Rollouts in a batch advance in lockstep so every step needs a single
//! batched policy evaluation over the distinct current states. Each trajectory
//! draws from its own keyed generator, which makes batches independent of
//! evaluation order.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{Action, Environment, State};
use crate::error::{Error, Result};
use crate::policy::PolicyModel;
use crate::rng::{keyed_rng, STREAM_BACKWARD, STREAM_EVAL, STREAM_FORWARD, STREAM_OFFLINE};

/// A complete path `s_0 -> ... -> x -> s_f` with `L` edges.
///
/// `log_pb[t]` is the backward log-probability of edge `t` for `t < L - 1`.
/// The terminal edge has no backward probability; its slot holds 0 and the
/// terminal mass lives in `log_reward`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub log_pf: Vec<f64>,
    pub log_pb: Vec<f64>,
    pub terminal_reward: f64,
    pub log_reward: f64,
}

impl Trajectory {
    /// Number of edges, including the terminal one.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// The terminating state `x`.
    pub fn terminal(&self) -> &State {
        &self.states[self.len() - 1]
    }

    pub fn validate(&self, env: &dyn Environment) -> Result<()> {
        let l = self.len();
        let bad = |what: String| Err(Error::Contract(format!("malformed trajectory: {what}")));
        if l == 0 || self.states.len() != l + 1 {
            return bad(format!("{} states for {l} actions", self.states.len()));
        }
        if self.log_pf.len() != l || self.log_pb.len() != l {
            return bad("log-probability lists do not match the action count".into());
        }
        if !env.is_initial(&self.states[0]) {
            return bad(format!("starts at {}", self.states[0]));
        }
        if !env.is_final(&self.states[l]) {
            return bad("does not end at the final state".into());
        }
        for t in 0..l {
            let next = env.step(&self.states[t], self.actions[t].index)?;
            if next != self.states[t + 1] {
                return bad(format!("edge {t} does not follow its action"));
            }
            if self.actions[t].is_terminate != (t + 1 == l) {
                return bad(format!("terminate flag wrong at edge {t}"));
            }
        }
        if self.log_pb[l - 1] != 0.0 {
            return bad("terminal backward slot is not 0".into());
        }
        let r = env.reward(self.terminal())?;
        if r != self.terminal_reward || r.ln() != self.log_reward {
            return bad("cached reward does not match the environment".into());
        }
        Ok(())
    }
}

/// Batch size, exploration schedule and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub batch: usize,
    pub alpha: f64,
    pub alpha_decay: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch: 128,
            alpha: 1.0,
            alpha_decay: 0.99,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// `alpha <- alpha * alpha_decay`; returns the new value.
    pub fn decay_alpha(&mut self) -> f64 {
        self.alpha *= self.alpha_decay;
        self.alpha
    }
}

/// `alpha0 * decay^n`: the exploration rate after `n` decays.
pub fn alpha_after(alpha0: f64, decay: f64, n: u64) -> f64 {
    alpha0 * decay.powi(i32::try_from(n).unwrap_or(i32::MAX))
}

/// Identifies one batch within a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleKey {
    pub seed: u64,
    pub iteration: u64,
}

impl SampleKey {
    pub fn new(seed: u64, iteration: u64) -> Self {
        Self { seed, iteration }
    }

    fn rngs(&self, stream: u64, k: usize) -> Vec<ChaCha8Rng> {
        (0..k as u64)
            .map(|i| keyed_rng(self.seed, stream, self.iteration, i))
            .collect()
    }
}

/// Draws an index from log-probabilities (`-inf` entries are never chosen).
pub fn sample_categorical<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &lp) in log_probs.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        acc += lp.exp();
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn dedup(states: &[State]) -> (Vec<State>, Vec<usize>) {
    let mut index: HashMap<&State, usize> = HashMap::new();
    let mut unique = Vec::new();
    let mut map = Vec::with_capacity(states.len());
    for s in states {
        let next = unique.len();
        let i = *index.entry(s).or_insert_with(|| {
            unique.push(s.clone());
            next
        });
        map.push(i);
    }
    (unique, map)
}

fn forward_rows(
    model: &dyn PolicyModel,
    env: &dyn Environment,
    states: &[State],
) -> Result<Vec<Vec<f64>>> {
    let (unique, map) = dedup(states);
    let rows = model.forward_log_probs_batch(env, &unique)?;
    Ok(map.into_iter().map(|i| rows[i].clone()).collect())
}

fn backward_rows(
    model: &dyn PolicyModel,
    env: &dyn Environment,
    states: &[State],
) -> Result<Vec<Vec<f64>>> {
    let (unique, map) = dedup(states);
    let rows = model.backward_log_probs_batch(env, &unique)?;
    Ok(map.into_iter().map(|i| rows[i].clone()).collect())
}

/// Fills `log_pb` of finished forward rollouts from the backward policy.
fn fill_backward(
    model: &dyn PolicyModel,
    env: &dyn Environment,
    trajs: &mut [Trajectory],
) -> Result<()> {
    let mut children = Vec::new();
    for t in trajs.iter() {
        children.extend(t.states[1..t.len()].iter().cloned());
    }
    if children.is_empty() {
        return Ok(());
    }
    let rows = backward_rows(model, env, &children)?;
    let mut next = 0;
    for t in trajs.iter_mut() {
        for e in 0..t.len() - 1 {
            t.log_pb[e] = rows[next][t.actions[e].index];
            next += 1;
        }
    }
    Ok(())
}

fn rollout(
    model: &dyn PolicyModel,
    env: &dyn Environment,
    k: usize,
    alpha: f64,
    mut rngs: Vec<ChaCha8Rng>,
) -> Result<Vec<Trajectory>> {
    if k == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let s0 = env.initial_state();
    let mut trajs: Vec<Trajectory> = (0..k)
        .map(|_| Trajectory {
            states: vec![s0.clone()],
            actions: Vec::new(),
            log_pf: Vec::new(),
            log_pb: Vec::new(),
            terminal_reward: 0.0,
            log_reward: 0.0,
        })
        .collect();
    let mut active: Vec<usize> = (0..k).collect();
    let limit = env.spec().horizon_bound + 1;
    let mut steps = 0;
    while !active.is_empty() {
        if steps >= limit {
            return Err(Error::Contract(format!(
                "trajectory exceeded {limit} transitions without terminating"
            )));
        }
        steps += 1;
        let current: Vec<State> = active
            .iter()
            .map(|&i| trajs[i].states.last().unwrap().clone())
            .collect();
        let rows = forward_rows(model, env, &current)?;
        let mut still = Vec::with_capacity(active.len());
        for (slot, &i) in active.iter().enumerate() {
            let lp = &rows[slot];
            let rng = &mut rngs[i];
            let a = if alpha > 0.0 && rng.gen::<f64>() < alpha {
                let valid: Vec<usize> = (0..lp.len()).filter(|&j| lp[j] > f64::NEG_INFINITY).collect();
                valid[rng.gen_range(0..valid.len())]
            } else {
                sample_categorical(lp, rng)
            };
            let s = &current[slot];
            let next = env.step(s, a)?;
            let t = &mut trajs[i];
            let is_terminate = a == env.terminate_index();
            t.actions.push(Action {
                index: a,
                is_terminate,
            });
            t.log_pf.push(lp[a]);
            t.log_pb.push(0.0);
            t.states.push(next);
            if is_terminate {
                t.terminal_reward = env.reward(s)?;
                t.log_reward = t.terminal_reward.ln();
            } else {
                still.push(i);
            }
        }
        active = still;
    }
    fill_backward(model, env, &mut trajs)?;
    if cfg!(debug_assertions) {
        for t in &trajs {
            t.validate(env)?;
        }
    }
    Ok(trajs)
}

/// `k` independent trajectories from the forward policy.
pub fn sample_forward(
    model: &dyn PolicyModel,
    env: &dyn Environment,
    k: usize,
    key: SampleKey,
) -> Result<Vec<Trajectory>> {
    rollout(model, env, k, 0.0, key.rngs(STREAM_FORWARD, k))
}

/// As `sample_forward` on the evaluation stream, so metric sampling never
/// perturbs training batches.
pub fn sample_eval(
    model: &dyn PolicyModel,
    env: &dyn Environment,
    k: usize,
    key: SampleKey,
) -> Result<Vec<Trajectory>> {
    rollout(model, env, k, 0.0, key.rngs(STREAM_EVAL, k))
}

/// Rollouts where each transition is uniform over valid actions with
/// probability `alpha` and follows `pi_F` otherwise. `log_pf` still records
/// `pi_F`'s probability of the realized action.
pub fn sample_offline(
    model: &dyn PolicyModel,
    env: &dyn Environment,
    k: usize,
    alpha: f64,
    key: SampleKey,
) -> Result<Vec<Trajectory>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("alpha {alpha} is outside [0, 1]")));
    }
    rollout(model, env, k, alpha, key.rngs(STREAM_OFFLINE, k))
}

/// One trajectory per terminal, walked from `x` back to `s_0` with the
/// backward policy, then closed with the terminal edge.
pub fn sample_backward(
    model: &dyn PolicyModel,
    env: &dyn Environment,
    terminals: &[State],
    key: SampleKey,
) -> Result<Vec<Trajectory>> {
    let k = terminals.len();
    if k == 0 {
        return Err(Error::Contract("no terminal states to sample from".into()));
    }
    for x in terminals {
        if env.is_final(x) || !env.is_terminating(x) {
            return Err(Error::Contract(format!("{x} is not a terminating state")));
        }
    }
    let mut rngs = key.rngs(STREAM_BACKWARD, k);
    // reversed paths: states from x back to s_0, with (action, log_pb) per edge
    let mut paths: Vec<Vec<State>> = terminals.iter().map(|x| vec![x.clone()]).collect();
    let mut edges: Vec<Vec<(usize, f64)>> = vec![Vec::new(); k];
    let mut active: Vec<usize> = (0..k).filter(|&i| !env.is_initial(&paths[i][0])).collect();
    let limit = env.spec().horizon_bound;
    let mut steps = 0;
    while !active.is_empty() {
        if steps >= limit {
            return Err(Error::Contract(format!(
                "backward walk exceeded {limit} steps without reaching the initial state"
            )));
        }
        steps += 1;
        let current: Vec<State> = active.iter().map(|&i| paths[i].last().unwrap().clone()).collect();
        let rows = backward_rows(model, env, &current)?;
        let mut still = Vec::with_capacity(active.len());
        for (slot, &i) in active.iter().enumerate() {
            let lp = &rows[slot];
            let a = sample_categorical(lp, &mut rngs[i]);
            let s = &current[slot];
            let parent = env
                .parents(s)
                .into_iter()
                .find(|(_, act)| act.index == a)
                .map(|(p, _)| p)
                .ok_or_else(|| Error::Contract(format!("{s} has no parent via action {a}")))?;
            edges[i].push((a, lp[a]));
            let done = env.is_initial(&parent);
            paths[i].push(parent);
            if !done {
                still.push(i);
            }
        }
        active = still;
    }

    let mut trajs = Vec::with_capacity(k);
    for i in 0..k {
        let mut states: Vec<State> = paths[i]
            .iter()
            .rev()
            .enumerate()
            .map(|(t, s)| State::new(s.cells().to_vec(), t))
            .collect();
        let l = states.len();
        states.push(env.final_state().with_step_index(l));
        let mut actions: Vec<Action> = edges[i]
            .iter()
            .rev()
            .map(|&(a, _)| Action {
                index: a,
                is_terminate: false,
            })
            .collect();
        actions.push(Action {
            index: env.terminate_index(),
            is_terminate: true,
        });
        let mut log_pb: Vec<f64> = edges[i].iter().rev().map(|&(_, lp)| lp).collect();
        log_pb.push(0.0);
        let terminal_reward = env.reward(&terminals[i])?;
        trajs.push(Trajectory {
            states,
            actions,
            log_pf: Vec::new(),
            log_pb,
            terminal_reward,
            log_reward: terminal_reward.ln(),
        });
    }

    let mut visited = Vec::new();
    for t in &trajs {
        visited.extend(t.states[..t.len()].iter().cloned());
    }
    let rows = forward_rows(model, env, &visited)?;
    let mut next = 0;
    for t in trajs.iter_mut() {
        t.log_pf = (0..t.len())
            .map(|e| rows[next + e][t.actions[e].index])
            .collect();
        next += t.len();
    }
    if cfg!(debug_assertions) {
        for t in &trajs {
            t.validate(env)?;
        }
    }
    Ok(trajs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Hypergrid;
    use crate::policy::{BundleConfig, PolicyBundle};
    use rand::SeedableRng;

    fn bundle(env: &dyn Environment, seed: u64) -> PolicyBundle {
        let cfg = BundleConfig {
            hidden: 8,
            depth: 1,
            ..BundleConfig::default()
        };
        let mut b = PolicyBundle::new(env, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        // break uniformity
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for p in b.forward.params_mut() {
            *p = rng.gen_range(-1.0..1.0);
        }
        b
    }

    #[test]
    fn single_path_env_has_zero_log_probs() {
        // hypergrid with height 2 in one dimension, forced by a deterministic policy
        let env = Hypergrid::new(2, 1).unwrap();
        let b = bundle(&env, 1);
        let batch = sample_forward(&b, &env, 50, SampleKey::new(3, 0)).unwrap();
        for t in &batch {
            t.validate(&env).unwrap();
            assert!(t.len() == 1 || t.len() == 2);
        }
        // the corner's terminate edge is forced
        let two: Vec<_> = batch.iter().filter(|t| t.len() == 2).collect();
        assert!(!two.is_empty());
        assert!(two.iter().all(|t| t.log_pf[1] == 0.0 && t.log_pb[0] == 0.0));
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let env = Hypergrid::new(4, 2).unwrap();
        let b = bundle(&env, 2);
        let a = sample_forward(&b, &env, 32, SampleKey::new(9, 4)).unwrap();
        let c = sample_forward(&b, &env, 32, SampleKey::new(9, 4)).unwrap();
        assert_eq!(a, c);
        let d = sample_forward(&b, &env, 32, SampleKey::new(9, 5)).unwrap();
        assert_ne!(a, d);
        // a prefix of a batch does not depend on the batch size
        let e = sample_forward(&b, &env, 8, SampleKey::new(9, 4)).unwrap();
        assert_eq!(&a[..8], &e[..]);
    }

    #[test]
    fn cached_log_probs_match_recomputation() {
        let env = Hypergrid::new(4, 2).unwrap();
        let b = bundle(&env, 3);
        for t in sample_offline(&b, &env, 16, 0.5, SampleKey::new(1, 1)).unwrap() {
            for e in 0..t.len() {
                let lp = crate::policy::forward_log_probs(&b, &env, &t.states[e]).unwrap();
                assert!((lp[t.actions[e].index] - t.log_pf[e]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_walks_reach_origin() {
        let env = Hypergrid::new(3, 2).unwrap();
        let b = bundle(&env, 4);
        let x = env.state(&[1, 1]);
        let batch = sample_backward(&b, &env, &vec![x.clone(); 200], SampleKey::new(5, 0)).unwrap();
        let mut via_first = 0;
        for t in &batch {
            t.validate(&env).unwrap();
            assert_eq!(t.len(), 3);
            assert_eq!(t.terminal(), &x);
            assert!((t.log_pb[1] + 2f64.ln()).abs() < 1e-15);
            if t.actions[0].index == 0 {
                via_first += 1;
            }
        }
        assert!(via_first > 60 && via_first < 140, "{via_first}");
        // origin as a terminal: just the terminal edge
        let t = &sample_backward(&b, &env, &[env.initial_state()], SampleKey::new(5, 0)).unwrap()[0];
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn alpha_decay() {
        let mut cfg = SamplerConfig::default();
        assert_eq!(cfg.decay_alpha(), 0.99);
        let mut cfg2 = SamplerConfig {
            alpha_decay: 1.0,
            alpha: 0.3,
            ..SamplerConfig::default()
        };
        cfg2.decay_alpha();
        assert_eq!(cfg2.alpha, 0.3);
        for _ in 0..99 {
            cfg.decay_alpha();
        }
        assert!((cfg.alpha - 0.99f64.powi(100)).abs() < 1e-15);
        assert!((cfg.alpha - 0.366).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_alpha() {
        let env = Hypergrid::new(2, 1).unwrap();
        let b = bundle(&env, 0);
        assert!(sample_offline(&b, &env, 1, 1.5, SampleKey::new(0, 0)).is_err());
    }
}
