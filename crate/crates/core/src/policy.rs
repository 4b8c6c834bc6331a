//! Policy and evaluation heads.
//!
//! A backward policy at state `s'` is a distribution over the incoming edges
//! of `s'`. An incoming edge is named by the forward action index that
//! produced it, which keeps parallel edges apart. The terminal edge
//! `x -> s_f` never gets a learned backward probability: residuals substitute
//! `log R(x)` (minus `log Z` when that head is active).

use std::collections::HashMap;

use rand::Rng;

use crate::diff::{Activation, Approximator, GradAccumulator, Tape};
use crate::env::{Environment, State};
use crate::error::{Error, Result};

/// Which optimizer owns a head. Forward-side heads (`pi_F`, `W`, `log F`,
/// `log Z`) are `Theta`; backward-side heads (`pi_B`, `V`) are `Phi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamSet {
    Theta,
    Phi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Forward,
    Backward,
    Value,
    BackwardValue,
    LogFlow,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] = [
        HeadKind::Forward,
        HeadKind::Backward,
        HeadKind::Value,
        HeadKind::BackwardValue,
        HeadKind::LogFlow,
    ];

    pub fn owner(self) -> ParamSet {
        match self {
            HeadKind::Backward | HeadKind::Value => ParamSet::Phi,
            HeadKind::Forward | HeadKind::BackwardValue | HeadKind::LogFlow => ParamSet::Theta,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            HeadKind::Forward => 0,
            HeadKind::Backward => 1,
            HeadKind::Value => 2,
            HeadKind::BackwardValue => 3,
            HeadKind::LogFlow => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Forward => "forward",
            HeadKind::Backward => "backward",
            HeadKind::Value => "value",
            HeadKind::BackwardValue => "backward_value",
            HeadKind::LogFlow => "log_flow",
        }
    }
}

/// Shape of a freshly initialized bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleConfig {
    pub hidden: usize,
    pub depth: usize,
    pub activation: Activation,
    pub learned_backward: bool,
    pub value: bool,
    pub backward_value: bool,
    pub log_flow: bool,
    pub use_logz: bool,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            depth: 4,
            activation: Activation::default(),
            learned_backward: false,
            value: true,
            backward_value: false,
            log_flow: false,
            use_logz: false,
        }
    }
}

/// All learnable heads of one run. Absent heads are `None`; a `None`
/// backward head means the uniform backward policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyBundle {
    pub forward: Approximator,
    pub backward: Option<Approximator>,
    pub value: Option<Approximator>,
    pub backward_value: Option<Approximator>,
    pub log_flow: Option<Approximator>,
    pub log_z: Option<f64>,
}

impl PolicyBundle {
    /// Glorot-initialized heads. Policy heads get a zero output layer, so the
    /// initial policies are exactly uniform.
    pub fn new<R: Rng + ?Sized>(
        env: &dyn Environment,
        config: &BundleConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let width = env.encoding_width();
        let actions = env.action_count();
        let mut make = |out: usize, zero_out: bool| -> Result<Approximator> {
            let mut a = Approximator::mlp(width, config.hidden, config.depth, out, config.activation)?;
            a.init_glorot(rng);
            if zero_out {
                a.zero_output_layer();
            }
            Ok(a)
        };
        let forward = make(actions, true)?;
        let backward = if config.learned_backward {
            Some(make(actions, true)?)
        } else {
            None
        };
        let value = if config.value { Some(make(1, false)?) } else { None };
        let backward_value = if config.backward_value {
            Some(make(1, false)?)
        } else {
            None
        };
        let log_flow = if config.log_flow {
            Some(make(1, false)?)
        } else {
            None
        };
        Ok(Self {
            forward,
            backward,
            value,
            backward_value,
            log_flow,
            log_z: config.use_logz.then_some(0.0),
        })
    }

    pub fn head(&self, kind: HeadKind) -> Option<&Approximator> {
        match kind {
            HeadKind::Forward => Some(&self.forward),
            HeadKind::Backward => self.backward.as_ref(),
            HeadKind::Value => self.value.as_ref(),
            HeadKind::BackwardValue => self.backward_value.as_ref(),
            HeadKind::LogFlow => self.log_flow.as_ref(),
        }
    }

    pub fn head_mut(&mut self, kind: HeadKind) -> Option<&mut Approximator> {
        match kind {
            HeadKind::Forward => Some(&mut self.forward),
            HeadKind::Backward => self.backward.as_mut(),
            HeadKind::Value => self.value.as_mut(),
            HeadKind::BackwardValue => self.backward_value.as_mut(),
            HeadKind::LogFlow => self.log_flow.as_mut(),
        }
    }

    pub(crate) fn require(&self, kind: HeadKind) -> Result<&Approximator> {
        self.head(kind)
            .ok_or_else(|| Error::Contract(format!("the {} head is not active", kind.name())))
    }

    /// Checks every head's input and output widths against `env`.
    pub fn check_env(&self, env: &dyn Environment) -> Result<()> {
        for kind in HeadKind::ALL {
            if let Some(a) = self.head(kind) {
                let out = match kind {
                    HeadKind::Forward | HeadKind::Backward => env.action_count(),
                    _ => 1,
                };
                if a.input_width() != env.encoding_width() {
                    return Err(Error::Dimension {
                        what: "head input width",
                        expected: env.encoding_width(),
                        got: a.input_width(),
                    });
                }
                if a.output_width() != out {
                    return Err(Error::Dimension {
                        what: "head output width",
                        expected: out,
                        got: a.output_width(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Runs one head over every state of `batch`.
    pub fn pass(&self, kind: HeadKind, batch: &StateBatch) -> Result<Tape> {
        self.require(kind)?
            .forward_batch(&batch.inputs, batch.len())
    }

    /// Scalar head outputs for every state of `batch`.
    pub fn values(&self, kind: HeadKind, batch: &StateBatch) -> Result<Vec<f64>> {
        Ok(self.pass(kind, batch)?.output().to_vec())
    }
}

/// Gradients aligned with a bundle's heads.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleGrads {
    pub forward: GradAccumulator,
    pub backward: Option<GradAccumulator>,
    pub value: Option<GradAccumulator>,
    pub backward_value: Option<GradAccumulator>,
    pub log_flow: Option<GradAccumulator>,
    pub log_z: f64,
}

impl BundleGrads {
    pub fn zeros(bundle: &PolicyBundle) -> Self {
        let acc = |a: &Option<Approximator>| a.as_ref().map(GradAccumulator::for_approx);
        Self {
            forward: GradAccumulator::for_approx(&bundle.forward),
            backward: acc(&bundle.backward),
            value: acc(&bundle.value),
            backward_value: acc(&bundle.backward_value),
            log_flow: acc(&bundle.log_flow),
            log_z: 0.0,
        }
    }

    pub fn head(&self, kind: HeadKind) -> Option<&GradAccumulator> {
        match kind {
            HeadKind::Forward => Some(&self.forward),
            HeadKind::Backward => self.backward.as_ref(),
            HeadKind::Value => self.value.as_ref(),
            HeadKind::BackwardValue => self.backward_value.as_ref(),
            HeadKind::LogFlow => self.log_flow.as_ref(),
        }
    }

    pub fn head_mut(&mut self, kind: HeadKind) -> Option<&mut GradAccumulator> {
        match kind {
            HeadKind::Forward => Some(&mut self.forward),
            HeadKind::Backward => self.backward.as_mut(),
            HeadKind::Value => self.value.as_mut(),
            HeadKind::BackwardValue => self.backward_value.as_mut(),
            HeadKind::LogFlow => self.log_flow.as_mut(),
        }
    }

    /// Euclidean norm over the heads owned by `set`. `log Z` counts as theta.
    pub fn norm(&self, set: ParamSet) -> f64 {
        let mut sq: f64 = HeadKind::ALL
            .into_iter()
            .filter(|k| k.owner() == set)
            .filter_map(|k| self.head(k))
            .map(GradAccumulator::norm_sq)
            .sum();
        if set == ParamSet::Theta {
            sq += self.log_z * self.log_z;
        }
        sq.sqrt()
    }

    /// Whether any slot owned by `set` is nonzero.
    pub fn touches(&self, set: ParamSet) -> bool {
        let heads = HeadKind::ALL
            .into_iter()
            .filter(|k| k.owner() == set)
            .filter_map(|k| self.head(k))
            .any(|g| g.grads.iter().any(|&v| v != 0.0));
        heads || (set == ParamSet::Theta && self.log_z != 0.0)
    }

    pub fn is_finite(&self) -> bool {
        HeadKind::ALL
            .into_iter()
            .filter_map(|k| self.head(k))
            .all(GradAccumulator::is_finite)
            && self.log_z.is_finite()
    }

    pub fn scale(&mut self, factor: f64) {
        for kind in HeadKind::ALL {
            if let Some(g) = self.head_mut(kind) {
                g.scale(factor);
            }
        }
        self.log_z *= factor;
    }
}

/// Unique non-final states and their encodings, in insertion order.
#[derive(Clone, Debug)]
pub struct StateBatch {
    states: Vec<State>,
    inputs: Vec<f64>,
    index: HashMap<State, usize>,
    width: usize,
}

impl StateBatch {
    pub fn new(env: &dyn Environment) -> Self {
        Self {
            states: Vec::new(),
            inputs: Vec::new(),
            index: HashMap::new(),
            width: env.encoding_width(),
        }
    }

    pub fn from_states<'a>(
        env: &dyn Environment,
        states: impl IntoIterator<Item = &'a State>,
    ) -> Result<Self> {
        let mut batch = Self::new(env);
        for s in states {
            batch.insert(env, s)?;
        }
        Ok(batch)
    }

    /// Adds `state` if new and returns its row.
    pub fn insert(&mut self, env: &dyn Environment, state: &State) -> Result<usize> {
        if let Some(&i) = self.index.get(state) {
            return Ok(i);
        }
        let i = self.states.len();
        self.inputs.resize(self.inputs.len() + self.width, 0.0);
        env.encode_into(state, &mut self.inputs[i * self.width..])?;
        self.states.push(state.clone());
        self.index.insert(state.clone(), i);
        Ok(i)
    }

    pub fn index_of(&self, state: &State) -> Option<usize> {
        self.index.get(state).copied()
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Log-softmax over the `true` entries of `mask`; masked entries are `-inf`.
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::Dimension {
            what: "logit mask",
            expected: logits.len(),
            got: mask.len(),
        });
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Contract("no valid action to normalize over".into()));
    }
    let sum: f64 = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| (l - max).exp())
        .sum();
    let lse = max + sum.ln();
    Ok(logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { l - lse } else { f64::NEG_INFINITY })
        .collect())
}

/// Adds `coef * d log p[action] / d logits` to `row`, given the log-softmax
/// output `log_probs` it came from.
pub fn add_log_softmax_grad(row: &mut [f64], log_probs: &[f64], action: usize, coef: f64) {
    for (r, &lp) in row.iter_mut().zip(log_probs) {
        if lp > f64::NEG_INFINITY {
            *r -= coef * lp.exp();
        }
    }
    row[action] += coef;
}

/// Which incoming edges (by forward action index) `state` has.
pub fn parent_mask(env: &dyn Environment, state: &State) -> Result<Vec<bool>> {
    if env.is_final(state) {
        return Err(Error::Contract(
            "backward policy at the final state is the reward, not a distribution".into(),
        ));
    }
    let mut mask = vec![false; env.action_count()];
    for (_, a) in env.parents(state) {
        mask[a.index] = true;
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Contract(format!(
            "backward policy queried at {state}, which has no parents"
        )));
    }
    Ok(mask)
}

/// Anything that supplies forward and backward log-probabilities.
pub trait PolicyModel {
    /// Per state, log-probabilities over the action alphabet (`-inf` where invalid).
    fn forward_log_probs_batch(
        &self,
        env: &dyn Environment,
        states: &[State],
    ) -> Result<Vec<Vec<f64>>>;

    /// Per state, log-probabilities over incoming edges indexed by forward
    /// action (`-inf` for non-edges).
    fn backward_log_probs_batch(
        &self,
        env: &dyn Environment,
        states: &[State],
    ) -> Result<Vec<Vec<f64>>>;
}

/// Log-probabilities of the uniform backward policy.
pub fn uniform_backward_log_probs(env: &dyn Environment, state: &State) -> Result<Vec<f64>> {
    let mask = parent_mask(env, state)?;
    let k = mask.iter().filter(|&&m| m).count() as f64;
    Ok(mask
        .iter()
        .map(|&m| if m { -k.ln() } else { f64::NEG_INFINITY })
        .collect())
}

fn no_parents(env: &dyn Environment) -> Vec<f64> {
    vec![f64::NEG_INFINITY; env.action_count()]
}

impl PolicyBundle {
    /// Forward log-probabilities for the rows of `batch`, with the tape.
    pub fn forward_log_probs_rows(
        &self,
        env: &dyn Environment,
        batch: &StateBatch,
    ) -> Result<(Tape, Vec<Vec<f64>>)> {
        let tape = self.pass(HeadKind::Forward, batch)?;
        let rows = batch
            .states()
            .iter()
            .enumerate()
            .map(|(i, s)| masked_log_softmax(tape.row(i), &env.valid_actions(s)?))
            .collect::<Result<Vec<_>>>()?;
        Ok((tape, rows))
    }

    /// Backward log-probabilities for the rows of `batch`; the tape is `None`
    /// for the uniform policy. The row of `s_0` is all `-inf`.
    pub fn backward_log_probs_rows(
        &self,
        env: &dyn Environment,
        batch: &StateBatch,
    ) -> Result<(Option<Tape>, Vec<Vec<f64>>)> {
        match &self.backward {
            None => {
                let rows = batch
                    .states()
                    .iter()
                    .map(|s| {
                        if env.is_initial(s) {
                            Ok(no_parents(env))
                        } else {
                            uniform_backward_log_probs(env, s)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((None, rows))
            }
            Some(head) => {
                let tape = head.forward_batch(&batch.inputs, batch.len())?;
                let rows = batch
                    .states()
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        if env.is_initial(s) {
                            Ok(no_parents(env))
                        } else {
                            masked_log_softmax(tape.row(i), &parent_mask(env, s)?)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((Some(tape), rows))
            }
        }
    }
}

impl PolicyModel for PolicyBundle {
    fn forward_log_probs_batch(
        &self,
        env: &dyn Environment,
        states: &[State],
    ) -> Result<Vec<Vec<f64>>> {
        let batch = StateBatch::from_states(env, states)?;
        let (_, rows) = self.forward_log_probs_rows(env, &batch)?;
        Ok(states
            .iter()
            .map(|s| rows[batch.index_of(s).unwrap()].clone())
            .collect())
    }

    fn backward_log_probs_batch(
        &self,
        env: &dyn Environment,
        states: &[State],
    ) -> Result<Vec<Vec<f64>>> {
        let batch = StateBatch::from_states(env, states)?;
        let (_, rows) = self.backward_log_probs_rows(env, &batch)?;
        Ok(states
            .iter()
            .map(|s| rows[batch.index_of(s).unwrap()].clone())
            .collect())
    }
}

pub fn forward_log_probs(
    model: &dyn PolicyModel,
    env: &dyn Environment,
    state: &State,
) -> Result<Vec<f64>> {
    if env.is_final(state) {
        return Err(Error::Contract("forward policy queried at the final state".into()));
    }
    Ok(model
        .forward_log_probs_batch(env, std::slice::from_ref(state))?
        .remove(0))
}

/// `log pi_B(parent | child)`, summing over parallel edges between the two.
pub fn backward_log_prob(
    model: &dyn PolicyModel,
    env: &dyn Environment,
    child: &State,
    parent: &State,
) -> Result<f64> {
    let edges: Vec<usize> = env
        .parents(child)
        .into_iter()
        .filter(|(p, _)| p == parent)
        .map(|(_, a)| a.index)
        .collect();
    if edges.is_empty() {
        return Err(Error::Contract(format!("{parent} -> {child} is not an edge")));
    }
    let row = model
        .backward_log_probs_batch(env, std::slice::from_ref(child))?
        .remove(0);
    let max = edges.iter().map(|&a| row[a]).fold(f64::NEG_INFINITY, f64::max);
    Ok(max + edges.iter().map(|&a| (row[a] - max).exp()).sum::<f64>().ln())
}

/// `log pi~_B(s | s') - log pi_F(s' | s)` for the edge `(s, action)`.
///
/// On the terminal edge `pi~_B(x | s_f) = R(x)`, or `R(x) / Z` when `log_z`
/// is given, and `log_reward` must be supplied.
pub fn edge_reward_forward(
    model: &dyn PolicyModel,
    env: &dyn Environment,
    s: &State,
    action: usize,
    log_reward: Option<f64>,
    log_z: Option<f64>,
) -> Result<f64> {
    let log_pf = forward_log_probs(model, env, s)?[action];
    if !log_pf.is_finite() {
        return Err(Error::InvalidAction {
            state: s.to_string(),
            action,
        });
    }
    if action == env.terminate_index() {
        let lr = log_reward.ok_or_else(|| {
            Error::Contract("terminal edge needs the terminal reward".into())
        })?;
        return Ok(lr - log_z.unwrap_or(0.0) - log_pf);
    }
    if log_reward.is_some() {
        return Err(Error::Contract(
            "terminal reward supplied for an intermediate edge".into(),
        ));
    }
    let child = env.step(s, action)?;
    let log_pb = model
        .backward_log_probs_batch(env, std::slice::from_ref(&child))?
        .remove(0)[action];
    Ok(log_pb - log_pf)
}

/// `log pi_F(s' | s) - log pi_B(s | s')` for the non-terminal edge `(s, action)`.
pub fn edge_reward_backward(
    model: &dyn PolicyModel,
    env: &dyn Environment,
    s: &State,
    action: usize,
) -> Result<f64> {
    if action == env.terminate_index() {
        return Err(Error::Contract(
            "the terminal edge has no backward-policy probability".into(),
        ));
    }
    Ok(-edge_reward_forward(model, env, s, action, None, None)?)
}
