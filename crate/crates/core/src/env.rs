//! DAG environments: the contract every generative process implements, plus
//! the hypergrid and the synthetic sequence-design environments.
//!
//! States are fixed-length integer vectors. The final state `s_f` has its own
//! reserved encoding and is never fed to an approximator. Transitions are
//! identified by action indices, so parallel edges between the same pair of
//! states (prepend and append of the same block onto the empty sequence) stay
//! distinct.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};

/// Default cap on the number of states an environment will enumerate.
pub const DEFAULT_ENUMERATION_CAP: usize = 1_000_000;

/// A state: its integer encoding plus the number of actions taken to reach it.
///
/// Equality and hashing use the encoding only. The step index of `s_f` depends
/// on the realized trajectory in non-graded environments.
#[derive(Clone, Debug)]
pub struct State {
    cells: Vec<i32>,
    step_index: usize,
}

impl State {
    pub fn new(cells: Vec<i32>, step_index: usize) -> Self {
        Self { cells, step_index }
    }

    pub fn cells(&self) -> &[i32] {
        &self.cells
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub(crate) fn with_step_index(mut self, step_index: usize) -> Self {
        self.step_index = step_index;
        self
    }
}

impl PartialEq for State {
    fn eq(&self, other: &Self) -> bool {
        self.cells == other.cells
    }
}

impl Eq for State {}

impl Hash for State {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.cells.hash(state);
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.cells.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// An action: an index into the environment's action alphabet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Action {
    pub index: usize,
    pub is_terminate: bool,
}

/// Static description of an environment.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub action_count: usize,
    /// Maximum number of non-terminating actions in a trajectory.
    pub horizon_bound: usize,
    pub encoding_width: usize,
    pub reward_exponent: Option<f64>,
}

/// The contract of a DAG generative process.
///
/// Implementations are immutable after construction.
pub trait Environment: fmt::Debug + Send + Sync {
    fn spec(&self) -> &EnvSpec;

    /// A short string identifying the environment and its shape; checkpoints
    /// record it to reject mismatched evaluations.
    fn fingerprint(&self) -> String;

    fn terminate_index(&self) -> usize;

    fn initial_state(&self) -> State;

    fn final_state(&self) -> State;

    fn is_final(&self, state: &State) -> bool;

    /// Whether `state` is a legal terminating state `x`.
    fn is_terminating(&self, state: &State) -> bool;

    fn valid_actions(&self, state: &State) -> Result<Vec<bool>>;

    fn step(&self, state: &State, action: usize) -> Result<State>;

    /// Every `(parent, action)` with `step(parent, action) == state`.
    fn parents(&self, state: &State) -> Vec<(State, Action)>;

    fn reward(&self, x: &State) -> Result<f64>;

    /// Writes the K-hot encoding of `state` into `out`.
    fn encode_into(&self, state: &State, out: &mut [f64]) -> Result<()>;

    /// Number of non-final states.
    fn state_count(&self) -> u128;

    fn action_count(&self) -> usize {
        self.spec().action_count
    }

    fn encoding_width(&self) -> usize {
        self.spec().encoding_width
    }

    fn is_initial(&self, state: &State) -> bool {
        *state == self.initial_state()
    }

    fn log_reward(&self, x: &State) -> Result<f64> {
        Ok(self.reward(x)?.ln())
    }

    fn encode(&self, state: &State) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.encoding_width()];
        self.encode_into(state, &mut out)?;
        Ok(out)
    }

    /// All non-final states in topological order (parents before children).
    ///
    /// Refuses when the state count exceeds `cap`, and reports a cycle as a
    /// contract violation.
    fn enumerate_states(&self, cap: usize) -> Result<Vec<State>> {
        let count = self.state_count();
        if count > cap as u128 {
            return Err(Error::NotEnumerable(format!(
                "{} has {count} states, cap is {cap}",
                self.fingerprint()
            )));
        }
        let s0 = self.initial_state();
        let mut index: HashMap<State, usize> = HashMap::new();
        let mut states = vec![s0.clone()];
        index.insert(s0, 0);
        let mut children: Vec<Vec<usize>> = Vec::new();
        let mut queue = VecDeque::from([0usize]);
        while let Some(i) = queue.pop_front() {
            let s = states[i].clone();
            let mask = self.valid_actions(&s)?;
            let mut out = Vec::new();
            for (a, ok) in mask.iter().enumerate() {
                if !ok || a == self.terminate_index() {
                    continue;
                }
                let child = self.step(&s, a)?;
                let next = index.len();
                let j = *index.entry(child.clone()).or_insert_with(|| {
                    states.push(child);
                    queue.push_back(next);
                    next
                });
                out.push(j);
            }
            if children.len() <= i {
                children.resize(i + 1, Vec::new());
            }
            children[i] = out;
        }
        children.resize(states.len(), Vec::new());

        // Kahn's algorithm; leftover states mean a cycle.
        let mut indegree = vec![0usize; states.len()];
        for out in &children {
            for &j in out {
                indegree[j] += 1;
            }
        }
        let mut ready: VecDeque<usize> = (0..states.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(states.len());
        while let Some(i) = ready.pop_front() {
            order.push(i);
            for &j in &children[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.push_back(j);
                }
            }
        }
        if order.len() != states.len() {
            return Err(Error::Contract(format!(
                "transition graph of {} contains a cycle",
                self.fingerprint()
            )));
        }
        Ok(order.into_iter().map(|i| states[i].clone()).collect())
    }
}

fn check_not_final(env: &dyn Environment, state: &State, op: &str) -> Result<()> {
    if env.is_final(state) {
        return Err(Error::Contract(format!("{op} queried at the final state")));
    }
    Ok(())
}

/// Reward constants of the hypergrid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HypergridReward {
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
}

impl Default for HypergridReward {
    fn default() -> Self {
        Self {
            r0: 1e-2,
            r1: 0.5,
            r2: 2.0,
        }
    }
}

/// A `dims`-dimensional grid with `height` cells per side. Each action either
/// increments one coordinate or stops; every state can terminate.
#[derive(Clone, Debug)]
pub struct Hypergrid {
    spec: EnvSpec,
    height: usize,
    dims: usize,
    reward: HypergridReward,
}

impl Hypergrid {
    pub fn new(height: usize, dims: usize) -> Result<Self> {
        Self::with_reward(height, dims, HypergridReward::default())
    }

    pub fn with_reward(height: usize, dims: usize, reward: HypergridReward) -> Result<Self> {
        if height < 2 {
            return Err(Error::config("env.height", "must be at least 2"));
        }
        if dims < 1 {
            return Err(Error::config("env.dims", "must be at least 1"));
        }
        let spec = EnvSpec {
            name: "hypergrid".to_string(),
            action_count: dims + 1,
            horizon_bound: dims * (height - 1),
            encoding_width: dims * height,
            reward_exponent: None,
        };
        Ok(Self {
            spec,
            height,
            dims,
            reward,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Builds a (non-final) state from coordinates.
    pub fn state(&self, coords: &[i32]) -> State {
        State::new(coords.to_vec(), coords.iter().map(|&c| c as usize).sum())
    }

    fn check_coords(&self, state: &State) -> Result<()> {
        let ok = state.cells.len() == self.dims
            && state
                .cells
                .iter()
                .all(|&c| c >= 0 && (c as usize) < self.height);
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "{state} is not a state of the {}^{} hypergrid",
                self.height, self.dims
            )))
        }
    }
}

impl Environment for Hypergrid {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn fingerprint(&self) -> String {
        format!("hypergrid:height={},dims={}", self.height, self.dims)
    }

    fn terminate_index(&self) -> usize {
        self.dims
    }

    fn initial_state(&self) -> State {
        State::new(vec![0; self.dims], 0)
    }

    fn final_state(&self) -> State {
        State::new(vec![-1; self.dims], 0)
    }

    fn is_final(&self, state: &State) -> bool {
        state.cells.iter().all(|&c| c == -1)
    }

    fn is_terminating(&self, state: &State) -> bool {
        self.check_coords(state).is_ok()
    }

    fn valid_actions(&self, state: &State) -> Result<Vec<bool>> {
        check_not_final(self, state, "valid_actions")?;
        self.check_coords(state)?;
        let mut mask: Vec<bool> = state
            .cells
            .iter()
            .map(|&c| (c as usize) + 1 < self.height)
            .collect();
        mask.push(true);
        Ok(mask)
    }

    fn step(&self, state: &State, action: usize) -> Result<State> {
        let mask = self.valid_actions(state)?;
        if !mask.get(action).copied().unwrap_or(false) {
            return Err(Error::InvalidAction {
                state: state.to_string(),
                action,
            });
        }
        let next_index = state.step_index + 1;
        if action == self.dims {
            return Ok(self.final_state().with_step_index(next_index));
        }
        let mut cells = state.cells.clone();
        cells[action] += 1;
        Ok(State::new(cells, next_index))
    }

    fn parents(&self, state: &State) -> Vec<(State, Action)> {
        if self.is_final(state) {
            let terminate = Action {
                index: self.dims,
                is_terminate: true,
            };
            return self
                .enumerate_states(usize::MAX)
                .unwrap_or_default()
                .into_iter()
                .map(|x| (x, terminate))
                .collect();
        }
        (0..self.dims)
            .filter(|&d| state.cells[d] > 0)
            .map(|d| {
                let mut cells = state.cells.clone();
                cells[d] -= 1;
                let idx = state.step_index.saturating_sub(1);
                (
                    State::new(cells, idx),
                    Action {
                        index: d,
                        is_terminate: false,
                    },
                )
            })
            .collect()
    }

    fn reward(&self, x: &State) -> Result<f64> {
        if self.is_final(x) {
            return Err(Error::Contract("reward of the final state".into()));
        }
        self.check_coords(x)?;
        let scale = (self.height - 1) as f64;
        let mut outer = true;
        let mut band = true;
        for &c in &x.cells {
            let dist = (c as f64 / scale - 0.5).abs();
            outer &= dist > 0.25 && dist <= 0.5;
            band &= dist > 0.3 && dist <= 0.4;
        }
        let HypergridReward { r0, r1, r2 } = self.reward;
        Ok(r0 + if outer { r1 } else { 0.0 } + if band { r2 } else { 0.0 })
    }

    fn encode_into(&self, state: &State, out: &mut [f64]) -> Result<()> {
        check_not_final(self, state, "encode")?;
        self.check_coords(state)?;
        if out.len() != self.spec.encoding_width {
            return Err(Error::Dimension {
                what: "hypergrid encoding",
                expected: self.spec.encoding_width,
                got: out.len(),
            });
        }
        out.fill(0.0);
        for (d, &c) in state.cells.iter().enumerate() {
            out[d * self.height + c as usize] = 1.0;
        }
        Ok(())
    }

    fn state_count(&self) -> u128 {
        (self.height as u128).saturating_pow(self.dims as u32)
    }
}

/// Parameters of the synthetic multimodal sequence reward.
///
/// `R(x) = floor + (sum_k exp(-d_H(x, mode_k)^2 / (2 width^2)))^beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceReward {
    pub modes: Vec<Vec<i32>>,
    pub width: f64,
    pub beta: f64,
    pub floor: f64,
}

/// Sequences of length `seq_len` over `alphabet` blocks, grown by appending or
/// prepending one block at a time. Only full-length sequences terminate.
///
/// Actions `0..M` append block `k`, `M..2M` prepend block `k - M`, `2M`
/// terminates. Unfilled positions hold `-1`; `s_f` is all `M`.
#[derive(Clone, Debug)]
pub struct SequenceEnv {
    spec: EnvSpec,
    seq_len: usize,
    alphabet: usize,
    reward: SequenceReward,
}

impl SequenceEnv {
    /// Uses default modes: all-zeros, all-last-block, and an alternating
    /// pattern of the two.
    pub fn new(seq_len: usize, alphabet: usize, beta: f64) -> Result<Self> {
        let last = alphabet.saturating_sub(1) as i32;
        let modes = vec![
            vec![0; seq_len],
            vec![last; seq_len],
            (0..seq_len)
                .map(|i| if i % 2 == 0 { 0 } else { last })
                .collect(),
        ];
        Self::with_reward(
            seq_len,
            alphabet,
            SequenceReward {
                modes,
                width: 1.0,
                beta,
                floor: 1e-3,
            },
        )
    }

    pub fn with_reward(seq_len: usize, alphabet: usize, reward: SequenceReward) -> Result<Self> {
        if seq_len < 1 {
            return Err(Error::config("env.seq_len", "must be at least 1"));
        }
        if alphabet < 1 {
            return Err(Error::config("env.alphabet", "must be at least 1"));
        }
        if !(reward.beta > 0.0) {
            return Err(Error::config("env.beta", "must be positive"));
        }
        if !(reward.width > 0.0) || !(reward.floor > 0.0) {
            return Err(Error::config(
                "env.bump_width",
                "bump width and reward floor must be positive",
            ));
        }
        for (k, mode) in reward.modes.iter().enumerate() {
            if mode.len() != seq_len || mode.iter().any(|&b| b < 0 || b as usize >= alphabet) {
                return Err(Error::config(
                    format!("env.modes[{k}]"),
                    "mode must be a full-length sequence over the alphabet",
                ));
            }
        }
        let spec = EnvSpec {
            name: "sequence".to_string(),
            action_count: 2 * alphabet + 1,
            horizon_bound: seq_len,
            encoding_width: seq_len * (alphabet + 1),
            reward_exponent: Some(reward.beta),
        };
        Ok(Self {
            spec,
            seq_len,
            alphabet,
            reward,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    /// Builds a (non-final) state from its filled prefix.
    pub fn state(&self, blocks: &[i32]) -> State {
        let mut cells = vec![-1; self.seq_len];
        cells[..blocks.len()].copy_from_slice(blocks);
        State::new(cells, blocks.len())
    }

    fn filled(&self, state: &State) -> usize {
        state.cells.iter().take_while(|&&c| c >= 0).count()
    }

    fn check_state(&self, state: &State) -> Result<usize> {
        let len = self.filled(state);
        let ok = state.cells.len() == self.seq_len
            && state.cells[..len]
                .iter()
                .all(|&c| (c as usize) < self.alphabet)
            && state.cells[len..].iter().all(|&c| c == -1);
        if ok {
            Ok(len)
        } else {
            Err(Error::Contract(format!(
                "{state} is not a state of the sequence environment"
            )))
        }
    }
}

impl Environment for SequenceEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn fingerprint(&self) -> String {
        format!(
            "sequence:seq_len={},alphabet={},beta={}",
            self.seq_len, self.alphabet, self.reward.beta
        )
    }

    fn terminate_index(&self) -> usize {
        2 * self.alphabet
    }

    fn initial_state(&self) -> State {
        State::new(vec![-1; self.seq_len], 0)
    }

    fn final_state(&self) -> State {
        State::new(vec![self.alphabet as i32; self.seq_len], 0)
    }

    fn is_final(&self, state: &State) -> bool {
        state.cells.iter().all(|&c| c == self.alphabet as i32)
    }

    fn is_terminating(&self, state: &State) -> bool {
        matches!(self.check_state(state), Ok(len) if len == self.seq_len)
    }

    fn valid_actions(&self, state: &State) -> Result<Vec<bool>> {
        check_not_final(self, state, "valid_actions")?;
        let len = self.check_state(state)?;
        let growing = len < self.seq_len;
        let mut mask = vec![growing; 2 * self.alphabet];
        mask.push(!growing);
        Ok(mask)
    }

    fn step(&self, state: &State, action: usize) -> Result<State> {
        let mask = self.valid_actions(state)?;
        if !mask.get(action).copied().unwrap_or(false) {
            return Err(Error::InvalidAction {
                state: state.to_string(),
                action,
            });
        }
        let next_index = state.step_index + 1;
        if action == self.terminate_index() {
            return Ok(self.final_state().with_step_index(next_index));
        }
        let len = self.filled(state);
        let mut cells = state.cells.clone();
        if action < self.alphabet {
            cells[len] = action as i32;
        } else {
            cells.copy_within(0..len, 1);
            cells[0] = (action - self.alphabet) as i32;
        }
        Ok(State::new(cells, next_index))
    }

    fn parents(&self, state: &State) -> Vec<(State, Action)> {
        if self.is_final(state) {
            let terminate = Action {
                index: self.terminate_index(),
                is_terminate: true,
            };
            return self
                .enumerate_states(usize::MAX)
                .unwrap_or_default()
                .into_iter()
                .filter(|s| self.filled(s) == self.seq_len)
                .map(|x| (x, terminate))
                .collect();
        }
        let len = self.filled(state);
        if len == 0 {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(2);
        // Undo an append: drop the last block.
        let mut cells = state.cells.clone();
        let last = cells[len - 1];
        cells[len - 1] = -1;
        out.push((
            State::new(cells, len - 1),
            Action {
                index: last as usize,
                is_terminate: false,
            },
        ));
        // Undo a prepend: drop the first block.
        let mut cells = state.cells.clone();
        let first = cells[0];
        cells.copy_within(1..len, 0);
        cells[len - 1] = -1;
        out.push((
            State::new(cells, len - 1),
            Action {
                index: self.alphabet + first as usize,
                is_terminate: false,
            },
        ));
        out
    }

    fn reward(&self, x: &State) -> Result<f64> {
        let len = self.check_state(x)?;
        if len != self.seq_len {
            return Err(Error::Contract(format!("{x} is not a terminating state")));
        }
        let denom = 2.0 * self.reward.width * self.reward.width;
        let score: f64 = self
            .reward
            .modes
            .iter()
            .map(|mode| {
                let d = mode.iter().zip(&x.cells).filter(|(a, b)| a != b).count() as f64;
                (-d * d / denom).exp()
            })
            .sum();
        Ok(self.reward.floor + score.powf(self.reward.beta))
    }

    fn encode_into(&self, state: &State, out: &mut [f64]) -> Result<()> {
        check_not_final(self, state, "encode")?;
        self.check_state(state)?;
        if out.len() != self.spec.encoding_width {
            return Err(Error::Dimension {
                what: "sequence encoding",
                expected: self.spec.encoding_width,
                got: out.len(),
            });
        }
        out.fill(0.0);
        let slots = self.alphabet + 1;
        for (p, &c) in state.cells.iter().enumerate() {
            let slot = if c < 0 { self.alphabet } else { c as usize };
            out[p * slots + slot] = 1.0;
        }
        Ok(())
    }

    fn state_count(&self) -> u128 {
        let m = self.alphabet as u128;
        let mut total: u128 = 0;
        let mut layer: u128 = 1;
        for _ in 0..=self.seq_len {
            total = total.saturating_add(layer);
            layer = layer.saturating_mul(m);
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn grid(n: usize, d: usize) -> Hypergrid {
        Hypergrid::new(n, d).unwrap()
    }

    #[test]
    fn corner_only_terminates() {
        let env = grid(8, 2);
        assert_eq!(
            env.valid_actions(&env.state(&[7, 7])).unwrap(),
            vec![false, false, true]
        );
    }

    #[test]
    fn origin_has_d_plus_one_actions() {
        let env = grid(8, 2);
        let mask = env.valid_actions(&env.state(&[0, 0])).unwrap();
        assert_eq!(mask.iter().filter(|&&b| b).count(), 3);
    }

    #[test]
    fn full_sequence_only_terminates() {
        let env = SequenceEnv::new(3, 4, 3.0).unwrap();
        let mask = env.valid_actions(&env.state(&[1, 2, 3])).unwrap();
        assert_eq!(mask.iter().filter(|&&b| b).count(), 1);
        assert!(mask[env.terminate_index()]);
    }

    #[test]
    fn final_state_queries_are_rejected() {
        let env = grid(4, 2);
        let sf = env.final_state();
        assert!(env.valid_actions(&sf).is_err());
        assert!(env.encode(&sf).is_err());
        assert!(env.reward(&sf).is_err());
    }

    #[test]
    fn hypergrid_steps() {
        let env = grid(8, 2);
        let s = env.state(&[3, 5]);
        let next = env.step(&s, 0).unwrap();
        assert_eq!(next.cells(), &[4, 5]);
        assert_eq!(next.step_index(), 9);
        let end = env.step(&s, 2).unwrap();
        assert!(env.is_final(&end));
    }

    #[test]
    fn invalid_step_names_state_and_action() {
        let env = grid(8, 2);
        let err = env.step(&env.state(&[7, 0]), 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(7,0)") && msg.contains('0'), "{msg}");
    }

    #[test]
    fn sequence_prepend() {
        let env = SequenceEnv::new(4, 3, 3.0).unwrap();
        let s = env.state(&[0, 1]);
        // prepend block 2
        let next = env.step(&s, 3 + 2).unwrap();
        assert_eq!(next.cells(), &[2, 0, 1, -1]);
        let appended = env.step(&s, 2).unwrap();
        assert_eq!(appended.cells(), &[0, 1, 2, -1]);
    }

    #[test]
    fn hypergrid_parents() {
        let env = grid(8, 2);
        let p = env.parents(&env.state(&[1, 0]));
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].0.cells(), &[0, 0]);
        assert_eq!(p[0].1.index, 0);

        let p: HashSet<(Vec<i32>, usize)> = env
            .parents(&env.state(&[1, 1]))
            .into_iter()
            .map(|(s, a)| (s.cells().to_vec(), a.index))
            .collect();
        let expected: HashSet<(Vec<i32>, usize)> =
            [(vec![0, 1], 0), (vec![1, 0], 1)].into_iter().collect();
        assert_eq!(p, expected);
        assert!(env.parents(&env.initial_state()).is_empty());
    }

    #[test]
    fn final_state_parents_are_all_terminals() {
        let env = grid(3, 2);
        let p = env.parents(&env.final_state());
        assert_eq!(p.len(), 9);
        assert!(p.iter().all(|(_, a)| a.is_terminate));
    }

    #[test]
    fn hypergrid_rewards() {
        let env = grid(8, 2);
        assert!((env.reward(&env.state(&[0, 0])).unwrap() - 0.51).abs() < 1e-15);
        // coordinate 1 of 7: |1/7 - 0.5| = 0.357 in both bands
        assert!((env.reward(&env.state(&[1, 6])).unwrap() - 2.51).abs() < 1e-15);
        // centre band on the 5-grid: |2/4 - 0.5| = 0
        let env5 = grid(5, 2);
        assert!((env5.reward(&env5.state(&[2, 2])).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn hypergrid_encoding() {
        let env = grid(4, 2);
        assert_eq!(
            env.encode(&env.state(&[1, 3])).unwrap(),
            vec![0., 1., 0., 0., 0., 0., 0., 1.]
        );
        assert_eq!(
            env.encode(&env.state(&[0, 0])).unwrap(),
            vec![1., 0., 0., 0., 1., 0., 0., 0.]
        );
    }

    #[test]
    fn sequence_encoding_is_injective() {
        let env = SequenceEnv::new(3, 2, 2.0).unwrap();
        let states = env.enumerate_states(DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(states.len() as u128, env.state_count());
        let codes: HashSet<Vec<u64>> = states
            .iter()
            .map(|s| env.encode(s).unwrap().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(codes.len(), states.len());
        // the padding slot is the last one of each position block
        let enc = env.encode(&env.initial_state()).unwrap();
        assert_eq!(enc, vec![0., 0., 1., 0., 0., 1., 0., 0., 1.]);
    }

    #[test]
    fn enumeration_cap_refuses() {
        let env = grid(64, 4);
        assert!(matches!(
            env.enumerate_states(1000),
            Err(Error::NotEnumerable(_))
        ));
    }

    #[test]
    fn sequence_rewards_are_floored_and_peak_at_modes() {
        let env = SequenceEnv::new(3, 2, 3.0).unwrap();
        let mode = env.reward(&env.state(&[0, 0, 0])).unwrap();
        let off = env.reward(&env.state(&[1, 0, 0])).unwrap();
        assert!(mode > off && off > 1e-3);
        assert!(env.reward(&env.state(&[0, 0])).is_err());
    }
}
