//! Run configuration: a JSON document with `env`, `policy`, `sampler`,
//! `objective`, `actor`, `train` sections and a top-level `seed`.
//!
//! Every key except `env.kind` has a default. Parse and validation errors
//! carry the dotted path of the offending key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::Activation;
use crate::env::{Environment, Hypergrid, SequenceEnv, SequenceReward, DEFAULT_ENUMERATION_CAP};
use crate::error::{Error, Result};
use crate::objectives::{WeightKind, WeightScheme};
use crate::policy::BundleConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    Hypergrid {
        #[serde(default = "default_height")]
        height: usize,
        #[serde(default = "default_dims")]
        dims: usize,
    },
    Sequence {
        #[serde(default = "default_seq_len")]
        seq_len: usize,
        #[serde(default = "default_alphabet")]
        alphabet: usize,
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_bump_width")]
        bump_width: f64,
        #[serde(default = "default_reward_floor")]
        reward_floor: f64,
        /// Defaults to all-first-block, all-last-block and alternating.
        #[serde(default)]
        modes: Option<Vec<Vec<i32>>>,
    },
}

fn default_height() -> usize {
    8
}
fn default_dims() -> usize {
    2
}
fn default_seq_len() -> usize {
    4
}
fn default_alphabet() -> usize {
    3
}
fn default_beta() -> f64 {
    3.0
}
fn default_bump_width() -> f64 {
    1.0
}
fn default_reward_floor() -> f64 {
    1e-3
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardMode {
    Uniform,
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    LeakyRelu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub backward: BackwardMode,
    pub hidden: usize,
    pub depth: usize,
    pub use_logz: bool,
    pub activation: ActivationName,
    pub leaky_slope: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            backward: BackwardMode::Uniform,
            hidden: 256,
            depth: 4,
            use_logz: false,
            activation: ActivationName::LeakyRelu,
            leaky_slope: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub batch: usize,
    pub alpha0: f64,
    pub alpha_decay: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            batch: 128,
            alpha0: 1.0,
            alpha_decay: 0.99,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Subtb,
    Subeb,
    LambdaTd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightName {
    SubtbGeometric,
    EdgesOnly,
    FullOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub lambda: f64,
    pub weights: WeightName,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Subeb,
            lambda: 0.9,
            weights: WeightName::SubtbGeometric,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActorConfig {
    pub gamma: f64,
    /// Learning rate of the policy trained by policy gradient.
    pub lr: f64,
}

impl Default for ActorConfig {
    fn default() -> Self {
        Self { gamma: 0.99, lr: 1e-3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workflow {
    OnlinePg,
    OfflinePg,
    Subtb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Derived from `objective.kind` when absent.
    pub workflow: Option<Workflow>,
    pub iterations: usize,
    pub metric_every: usize,
    /// Defaults to `metric_every`; 0 writes only the final checkpoint.
    pub checkpoint_every: Option<usize>,
    /// The evaluation head `V`.
    pub lr_value: f64,
    /// `log F`, `W`, and `pi_F` when a balance loss trains it.
    pub lr_flow: f64,
    /// A learned `pi_B` when a balance loss trains it.
    pub lr_backward: f64,
    pub lr_logz: f64,
    /// Adds elapsed milliseconds to the metrics; off keeps logs byte-stable.
    pub log_wall_clock: bool,
    /// Sample count for mean reward on environments too large to enumerate.
    pub eval_samples: usize,
    pub state_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            workflow: None,
            iterations: 1000,
            metric_every: 20,
            checkpoint_every: None,
            lr_value: 5e-3,
            lr_flow: 1e-3,
            lr_backward: 1e-3,
            lr_logz: 1e-2,
            log_wall_clock: false,
            eval_samples: 4096,
            state_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub env: EnvConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub actor: ActorConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

fn range_check(path: &str, value: f64, ok: bool, what: &str) -> Result<()> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(Error::config(path, format!("{value} is not {what}")))
    }
}

impl Config {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let mut path = e.path().to_string();
            let message = e.inner().to_string();
            // point at the missing key itself
            if let Some(rest) = message.strip_prefix("missing field `") {
                if let Some(field) = rest.split('`').next() {
                    path = if path == "." || path.is_empty() {
                        field.to_string()
                    } else {
                        format!("{path}.{field}")
                    };
                }
            }
            Error::config(path, message)
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn workflow(&self) -> Workflow {
        self.train.workflow.unwrap_or(match self.objective.kind {
            ObjectiveKind::Subtb => Workflow::Subtb,
            ObjectiveKind::Subeb | ObjectiveKind::LambdaTd => Workflow::OnlinePg,
        })
    }

    pub fn checkpoint_every(&self) -> usize {
        self.train.checkpoint_every.unwrap_or(self.train.metric_every)
    }

    pub fn weight_scheme(&self) -> WeightScheme {
        WeightScheme {
            lambda: self.objective.lambda,
            kind: match self.objective.weights {
                WeightName::SubtbGeometric => WeightKind::SubtbGeometric,
                WeightName::EdgesOnly => WeightKind::EdgesOnly,
                WeightName::FullOnly => WeightKind::FullOnly,
            },
        }
    }

    pub fn activation(&self) -> Activation {
        match self.policy.activation {
            ActivationName::LeakyRelu => Activation::LeakyRelu(self.policy.leaky_slope),
            ActivationName::Tanh => Activation::Tanh,
        }
    }

    pub fn bundle_config(&self) -> BundleConfig {
        let workflow = self.workflow();
        BundleConfig {
            hidden: self.policy.hidden,
            depth: self.policy.depth,
            activation: self.activation(),
            learned_backward: self.policy.backward == BackwardMode::Learned,
            value: workflow == Workflow::OnlinePg,
            backward_value: workflow == Workflow::OfflinePg,
            log_flow: workflow == Workflow::Subtb,
            use_logz: self.policy.use_logz,
        }
    }

    pub fn build_env(&self) -> Result<Box<dyn Environment>> {
        Ok(match &self.env {
            EnvConfig::Hypergrid { height, dims } => Box::new(Hypergrid::new(*height, *dims)?),
            EnvConfig::Sequence {
                seq_len,
                alphabet,
                beta,
                bump_width,
                reward_floor,
                modes,
            } => {
                let base = SequenceEnv::new(*seq_len, *alphabet, *beta)?;
                let reward = SequenceReward {
                    modes: modes.clone().unwrap_or_else(|| base_modes(&base)),
                    width: *bump_width,
                    beta: *beta,
                    floor: *reward_floor,
                };
                Box::new(SequenceEnv::with_reward(*seq_len, *alphabet, reward)?)
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let workflow = self.workflow();
        match (workflow, self.objective.kind) {
            (Workflow::Subtb, ObjectiveKind::Subtb)
            | (Workflow::OnlinePg, ObjectiveKind::Subeb | ObjectiveKind::LambdaTd)
            | (Workflow::OfflinePg, ObjectiveKind::Subeb) => {}
            (w, k) => {
                return Err(Error::config(
                    "train.workflow",
                    format!("workflow {w:?} cannot train objective {k:?}"),
                ))
            }
        }
        if self.policy.backward == BackwardMode::Learned && self.objective.kind == ObjectiveKind::LambdaTd {
            return Err(Error::config(
                "policy.backward",
                "the lambda-TD critic loss does not train a backward policy; use uniform",
            ));
        }
        if self.policy.use_logz && workflow == Workflow::OfflinePg {
            return Err(Error::config(
                "policy.use_logz",
                "the offline workflow has no log Z head",
            ));
        }
        if self.policy.hidden == 0 {
            return Err(Error::config("policy.hidden", "must be positive"));
        }
        range_check("policy.leaky_slope", self.policy.leaky_slope, true, "finite")?;
        if self.sampler.batch == 0 {
            return Err(Error::config("sampler.batch", "must be at least 1"));
        }
        let a = self.sampler.alpha0;
        range_check("sampler.alpha0", a, (0.0..=1.0).contains(&a), "in [0, 1]")?;
        let d = self.sampler.alpha_decay;
        range_check("sampler.alpha_decay", d, d > 0.0 && d <= 1.0, "in (0, 1]")?;
        let l = self.objective.lambda;
        let lambda_ok = if self.objective.kind == ObjectiveKind::LambdaTd {
            (0.0..=1.0).contains(&l)
        } else {
            l > 0.0 && l <= 1.0
        };
        range_check("objective.lambda", l, lambda_ok, "a valid lambda")?;
        let g = self.actor.gamma;
        range_check("actor.gamma", g, (0.0..=1.0).contains(&g), "in [0, 1]")?;
        for (path, v) in [
            ("actor.lr", self.actor.lr),
            ("train.lr_value", self.train.lr_value),
            ("train.lr_flow", self.train.lr_flow),
            ("train.lr_backward", self.train.lr_backward),
            ("train.lr_logz", self.train.lr_logz),
        ] {
            range_check(path, v, v > 0.0, "a positive learning rate")?;
        }
        if self.train.iterations == 0 {
            return Err(Error::config("train.iterations", "must be at least 1"));
        }
        if self.train.metric_every == 0 {
            return Err(Error::config("train.metric_every", "must be at least 1"));
        }
        if self.train.eval_samples == 0 {
            return Err(Error::config("train.eval_samples", "must be at least 1"));
        }
        self.build_env()?;
        Ok(())
    }
}

fn base_modes(env: &SequenceEnv) -> Vec<Vec<i32>> {
    let last = env.alphabet() as i32 - 1;
    let n = env.seq_len();
    vec![
        vec![0; n],
        vec![last; n],
        (0..n).map(|i| if i % 2 == 0 { 0 } else { last }).collect(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = Config::from_json_str(r#"{"env": {"kind": "hypergrid"}}"#).unwrap();
        assert_eq!(c.env, EnvConfig::Hypergrid { height: 8, dims: 2 });
        assert_eq!(c.sampler.batch, 128);
        assert_eq!(c.actor.gamma, 0.99);
        assert_eq!(c.objective.lambda, 0.9);
        assert_eq!(c.actor.lr, 1e-3);
        assert_eq!(c.train.lr_value, 5e-3);
        assert_eq!(c.sampler.alpha0, 1.0);
        assert_eq!(c.sampler.alpha_decay, 0.99);
        assert_eq!(c.policy.hidden, 256);
        assert_eq!(c.policy.depth, 4);
        assert_eq!(c.workflow(), Workflow::OnlinePg);
    }

    #[test]
    fn missing_kind_names_the_key() {
        let err = Config::from_json_str(r#"{"env": {"height": 4}}"#).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "env.kind"),
            other => panic!("{other}"),
        }
        let err = Config::from_json_str(r#"{"seed": 1}"#).unwrap_err();
        assert!(matches!(err, Error::Config { path, .. } if path == "env"));
    }

    #[test]
    fn bad_values_name_their_path() {
        let err = Config::from_json_str(r#"{"env": {"kind": "hypergrid"}, "actor": {"gamma": 1.5}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { path, .. } if path == "actor.gamma"));
        let err = Config::from_json_str(r#"{"env": {"kind": "hypergrid"}, "sampler": {"batch": "x"}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { path, .. } if path == "sampler.batch"));
        let err = Config::from_json_str(r#"{"env": {"kind": "hypergrid", "height": 1}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { path, .. } if path == "env.height"));
        let err = Config::from_json_str(r#"{"env": {"kind": "hypergrid", "hieght": 4}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn workflow_objective_pairs() {
        let c = Config::from_json_str(
            r#"{"env": {"kind": "hypergrid"}, "objective": {"kind": "subtb"}}"#,
        )
        .unwrap();
        assert_eq!(c.workflow(), Workflow::Subtb);
        assert!(c.bundle_config().log_flow);
        let err = Config::from_json_str(
            r#"{"env": {"kind": "hypergrid"}, "objective": {"kind": "lambda_td"}, "train": {"workflow": "offline_pg"}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config { path, .. } if path == "train.workflow"));
    }

    #[test]
    fn round_trips_through_json() {
        let c = Config::from_json_str(
            r#"{"env": {"kind": "sequence", "seq_len": 3, "alphabet": 2}, "seed": 4}"#,
        )
        .unwrap();
        let again = Config::from_json_str(&c.to_json_pretty()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.build_env().unwrap().action_count(), 5);
    }
}
