//! Training loops: the online policy-gradient workflow with a forward critic,
//! the offline workflow with backward trajectories from a terminal pool, and
//! the value-based subtrajectory balance baseline.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::actor::{grad_actor_backward, grad_actor_forward, grad_logz};
use crate::checkpoint::Checkpoint;
use crate::config::{Config, ObjectiveKind, Workflow};
use crate::diff::AdamState;
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::objectives::{loss_lambda_td, loss_weighted, ResidualKind};
use crate::oracle::{
    dp_forward_terminal_dist, dp_target_dist, metric_jsd, metric_mode_accuracy, metric_tv, DistTable,
    PolicyTable, StateSpace,
};
use crate::policy::{BundleGrads, HeadKind, ParamSet, PolicyBundle, StateBatch};
use crate::rng::{keyed_rng, STREAM_INIT};
use crate::sampler::{
    alpha_after, sample_backward, sample_eval, sample_forward, sample_offline, SampleKey,
};

/// More consecutive non-finite iterations than this abort the run.
pub const MAX_CONSECUTIVE_SKIPS: usize = 10;

/// One line of `metrics.csv`. Empty fields are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub loss_critic: Option<f64>,
    pub grad_norm_actor: Option<f64>,
    pub d_tv: Option<f64>,
    pub d_jsd: Option<f64>,
    pub mode_accuracy: Option<f64>,
    pub mean_reward: Option<f64>,
    pub alpha: Option<f64>,
    pub wall_clock_ms: Option<u64>,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "iteration,loss_critic,grad_norm_actor,d_tv,d_jsd,mode_accuracy,mean_reward,alpha,wall_clock_ms";

    /// Reals carry 17 significant digits so they parse back bit-exactly.
    pub fn to_csv_line(&self) -> String {
        fn real(v: Option<f64>) -> String {
            v.map(|x| format!("{x:.16e}")).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration,
            real(self.loss_critic),
            real(self.grad_norm_actor),
            real(self.d_tv),
            real(self.d_jsd),
            real(self.mode_accuracy),
            real(self.mean_reward),
            real(self.alpha),
            self.wall_clock_ms.map(|v| v.to_string()).unwrap_or_default()
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Dimension {
                what: "metrics columns",
                expected: 9,
                got: fields.len(),
            });
        }
        let bad = |f: &str| Error::Contract(format!("cannot parse metrics field {f:?}"));
        let real = |f: &str| -> Result<Option<f64>> {
            if f.is_empty() {
                Ok(None)
            } else {
                f.parse().map(Some).map_err(|_| bad(f))
            }
        };
        Ok(Self {
            iteration: fields[0].parse().map_err(|_| bad(fields[0]))?,
            loss_critic: real(fields[1])?,
            grad_norm_actor: real(fields[2])?,
            d_tv: real(fields[3])?,
            d_jsd: real(fields[4])?,
            mode_accuracy: real(fields[5])?,
            mean_reward: real(fields[6])?,
            alpha: real(fields[7])?,
            wall_clock_ms: if fields[8].is_empty() {
                None
            } else {
                Some(fields[8].parse().map_err(|_| bad(fields[8]))?)
            },
        })
    }
}

/// Reads every data row of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MetricsRow::CSV_HEADER => {}
        _ => return Err(Error::Contract(format!("{} has no metrics header", path.display()))),
    }
    lines.map(MetricsRow::parse_csv_line).collect()
}

/// Distribution metrics of a forward policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Measures {
    pub d_tv: Option<f64>,
    pub d_jsd: Option<f64>,
    pub mode_accuracy: Option<f64>,
    pub mean_reward: f64,
}

/// Exact metrics on enumerable environments, sampled mean reward otherwise.
#[derive(Clone, Debug)]
pub struct Evaluator {
    space: Option<(StateSpace, DistTable)>,
    samples: usize,
}

impl Evaluator {
    pub fn new(env: &dyn Environment, state_cap: usize, samples: usize) -> Result<Self> {
        let space = match StateSpace::new(env, state_cap) {
            Ok(space) => {
                let target = dp_target_dist(&space);
                Some((space, target))
            }
            Err(Error::NotEnumerable(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self { space, samples })
    }

    pub fn space(&self) -> Option<&StateSpace> {
        self.space.as_ref().map(|(s, _)| s)
    }

    pub fn measure(&self, bundle: &PolicyBundle, env: &dyn Environment, key: SampleKey) -> Result<Measures> {
        match &self.space {
            Some((space, target)) => {
                let table = PolicyTable::from_model(space, env, bundle)?;
                let pf = dp_forward_terminal_dist(space, &table);
                let mean_reward = pf
                    .terminals
                    .iter()
                    .zip(&pf.probs)
                    .map(|(&x, p)| p * space.log_reward[x].unwrap().exp())
                    .sum();
                Ok(Measures {
                    d_tv: Some(metric_tv(&pf, target)?),
                    d_jsd: Some(metric_jsd(&pf, target)?),
                    mode_accuracy: Some(metric_mode_accuracy(&pf, target, space)?),
                    mean_reward,
                })
            }
            None => {
                let trajs = sample_eval(bundle, env, self.samples, key)?;
                let total: f64 = trajs.iter().map(|t| t.terminal_reward).sum();
                Ok(Measures {
                    d_tv: None,
                    d_jsd: None,
                    mode_accuracy: None,
                    mean_reward: total / trajs.len() as f64,
                })
            }
        }
    }
}

/// Mean over terminating states of `|W(x) + log pi_F(s_f | x) - log R(x)|`
/// and of the bare `|W(x) - log R(x)|`.
pub fn offline_endpoint_gaps(
    bundle: &PolicyBundle,
    env: &dyn Environment,
    space: &StateSpace,
) -> Result<(f64, f64)> {
    let xs: Vec<_> = space.terminals().iter().map(|&i| space.states[i].clone()).collect();
    let batch = StateBatch::from_states(env, &xs)?;
    let w = bundle.values(HeadKind::BackwardValue, &batch)?;
    let (_, log_pf) = bundle.forward_log_probs_rows(env, &batch)?;
    let term = env.terminate_index();
    let (mut edge, mut bare) = (0.0, 0.0);
    for (i, x) in xs.iter().enumerate() {
        let log_r = env.log_reward(x)?;
        edge += (w[i] + log_pf[i][term] - log_r).abs();
        bare += (w[i] - log_r).abs();
    }
    let n = xs.len() as f64;
    Ok((edge / n, bare / n))
}

/// Which parameter sets receive optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpdateMask {
    pub theta: bool,
    pub phi: bool,
}

impl Default for UpdateMask {
    fn default() -> Self {
        Self { theta: true, phi: true }
    }
}

impl UpdateMask {
    fn allows(&self, set: ParamSet) -> bool {
        match set {
            ParamSet::Theta => self.theta,
            ParamSet::Phi => self.phi,
        }
    }
}

/// Per-iteration statistics; `None` when the iteration was skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss_critic: f64,
    pub grad_norm_actor: f64,
}

#[derive(Clone, Debug)]
struct Optimizers {
    heads: [Option<AdamState>; 5],
    log_z: Option<AdamState>,
}

fn head_lr(config: &Config, kind: HeadKind) -> f64 {
    let workflow = config.workflow();
    let t = &config.train;
    match kind {
        HeadKind::Forward if workflow == Workflow::OnlinePg => config.actor.lr,
        HeadKind::Forward => t.lr_flow,
        HeadKind::Backward if workflow == Workflow::OfflinePg => config.actor.lr,
        HeadKind::Backward => t.lr_backward,
        HeadKind::Value => t.lr_value,
        HeadKind::BackwardValue | HeadKind::LogFlow => t.lr_flow,
    }
}

impl Optimizers {
    fn new(config: &Config, bundle: &PolicyBundle) -> Self {
        let heads = HeadKind::ALL.map(|k| {
            bundle
                .head(k)
                .map(|a| AdamState::new(a.param_count(), head_lr(config, k)))
        });
        let log_z = bundle.log_z.map(|_| AdamState::new(1, config.train.lr_logz));
        Self { heads, log_z }
    }
}

/// The state of one training run.
#[derive(Debug)]
pub struct Trainer {
    config: Config,
    env: Box<dyn Environment>,
    bundle: PolicyBundle,
    opt: Optimizers,
    evaluator: Evaluator,
    mask: UpdateMask,
    iteration: u64,
    consecutive_skips: usize,
    skipped: usize,
}

impl Trainer {
    /// Validates `config`, builds the environment and initializes every head
    /// from the run seed.
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let env = config.build_env()?;
        let mut rng = keyed_rng(config.seed, STREAM_INIT, 0, 0);
        let bundle = PolicyBundle::new(env.as_ref(), &config.bundle_config(), &mut rng)?;
        let evaluator = Evaluator::new(env.as_ref(), config.train.state_cap, config.train.eval_samples)?;
        let opt = Optimizers::new(config, &bundle);
        Ok(Self {
            config: config.clone(),
            env,
            bundle,
            opt,
            evaluator,
            mask: UpdateMask::default(),
            iteration: 0,
            consecutive_skips: 0,
            skipped: 0,
        })
    }

    pub fn with_mask(mut self, mask: UpdateMask) -> Self {
        self.mask = mask;
        self
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    pub fn bundle(&self) -> &PolicyBundle {
        &self.bundle
    }

    /// Replaces the parameters; optimizer moments are reset.
    pub fn set_bundle(&mut self, bundle: PolicyBundle) -> Result<()> {
        bundle.check_env(self.env.as_ref())?;
        self.opt = Optimizers::new(&self.config, &bundle);
        self.bundle = bundle;
        Ok(())
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.evaluator
    }

    /// Completed iterations, skipped ones included.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Exploration rate used by the next iteration.
    pub fn alpha(&self) -> f64 {
        let s = &self.config.sampler;
        alpha_after(s.alpha0, s.alpha_decay, self.iteration)
    }

    fn key(&self) -> SampleKey {
        SampleKey::new(self.config.seed, self.iteration)
    }

    /// One descent step along `sign * grads` on the heads owned by `set`.
    fn apply(&mut self, grads: &BundleGrads, sign: f64, set: ParamSet) -> Result<()> {
        if !self.mask.allows(set) {
            return Ok(());
        }
        for (slot, kind) in HeadKind::ALL.into_iter().enumerate() {
            if kind.owner() != set {
                continue;
            }
            let (Some(g), Some(params), Some(adam)) = (
                grads.head(kind),
                self.bundle.head_mut(kind),
                self.opt.heads[slot].as_mut(),
            ) else {
                continue;
            };
            let scaled: Vec<f64> = g.grads.iter().map(|v| sign * v).collect();
            adam.step(params.params_mut(), &scaled)?;
        }
        if set == ParamSet::Theta {
            if let (Some(lz), Some(adam)) = (self.bundle.log_z.as_mut(), self.opt.log_z.as_mut()) {
                let mut p = [*lz];
                adam.step(&mut p, &[sign * grads.log_z])?;
                *lz = p[0];
            }
        }
        Ok(())
    }

    /// Sample from `pi_F`, take a critic step, then a policy step whose
    /// advantages use the updated critic.
    fn step_online(&mut self) -> Result<StepStats> {
        let env = self.env.as_ref();
        let trajs = sample_forward(&self.bundle, env, self.config.sampler.batch, self.key())?;
        let report = match self.config.objective.kind {
            ObjectiveKind::LambdaTd => loss_lambda_td(&self.bundle, env, &trajs, self.config.objective.lambda)?,
            _ => loss_weighted(&self.bundle, env, &trajs, ResidualKind::SubEb, &self.config.weight_scheme())?,
        };
        self.apply(&report.grads, 1.0, ParamSet::Phi)?;
        let env = self.env.as_ref();
        let mut est = grad_actor_forward(&self.bundle, env, &trajs, self.config.actor.gamma)?;
        let grad_norm_actor = est.grads.norm(ParamSet::Theta);
        if self.bundle.log_z.is_some() {
            est.grads.log_z = grad_logz(&self.bundle, env, &trajs)?;
        }
        // the estimate ascends V and log Z
        self.apply(&est.grads, -1.0, ParamSet::Theta)?;
        Ok(StepStats {
            loss_critic: report.loss,
            grad_norm_actor,
        })
    }

    /// Draw a terminal pool with the mixture policy, walk back with `pi_B`,
    /// fit `(pi_F, W)` to the backward balance loss, then move `pi_B` along
    /// its policy gradient under the updated `(pi_F, W)`.
    fn step_offline(&mut self) -> Result<StepStats> {
        let env = self.env.as_ref();
        let key = self.key();
        let pool = sample_offline(&self.bundle, env, self.config.sampler.batch, self.alpha(), key)?;
        let terminals: Vec<_> = pool.iter().map(|t| t.terminal().clone()).collect();
        let trajs = sample_backward(&self.bundle, env, &terminals, key)?;
        let report = loss_weighted(
            &self.bundle,
            env,
            &trajs,
            ResidualKind::SubEbBackward,
            &self.config.weight_scheme(),
        )?;
        self.apply(&report.grads, 1.0, ParamSet::Theta)?;
        let env = self.env.as_ref();
        let est = grad_actor_backward(&self.bundle, env, &trajs, self.config.actor.gamma)?;
        let grad_norm_actor = est.grads.norm(ParamSet::Phi);
        self.apply(&est.grads, -1.0, ParamSet::Phi)?;
        Ok(StepStats {
            loss_critic: report.loss,
            grad_norm_actor,
        })
    }

    fn step_subtb(&mut self) -> Result<StepStats> {
        let env = self.env.as_ref();
        let trajs = sample_offline(&self.bundle, env, self.config.sampler.batch, self.alpha(), self.key())?;
        let report = loss_weighted(&self.bundle, env, &trajs, ResidualKind::SubTb, &self.config.weight_scheme())?;
        self.apply(&report.grads, 1.0, ParamSet::Theta)?;
        self.apply(&report.grads, 1.0, ParamSet::Phi)?;
        Ok(StepStats {
            loss_critic: report.loss,
            grad_norm_actor: report.grad_norm_theta,
        })
    }

    /// Runs one iteration. A non-finite loss or gradient rolls every
    /// parameter and optimizer moment back and returns `Ok(None)`.
    pub fn step(&mut self) -> Result<Option<StepStats>> {
        let saved = (self.bundle.clone(), self.opt.clone());
        let outcome = match self.config.workflow() {
            Workflow::OnlinePg => self.step_online(),
            Workflow::OfflinePg => self.step_offline(),
            Workflow::Subtb => self.step_subtb(),
        };
        self.iteration += 1;
        match outcome {
            Ok(stats) if stats.loss_critic.is_finite() && stats.grad_norm_actor.is_finite() => {
                self.consecutive_skips = 0;
                Ok(Some(stats))
            }
            Ok(_) | Err(Error::NonFinite(_)) => {
                (self.bundle, self.opt) = saved;
                self.skipped += 1;
                self.consecutive_skips += 1;
                if self.consecutive_skips > MAX_CONSECUTIVE_SKIPS {
                    return Err(Error::Aborted(format!(
                        "{} consecutive non-finite iterations ending at {}",
                        self.consecutive_skips, self.iteration
                    )));
                }
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// The metrics row for the current parameters.
    pub fn metrics(&self, stats: Option<&StepStats>, wall_clock_ms: Option<u64>) -> Result<MetricsRow> {
        let m = self.evaluator.measure(&self.bundle, self.env.as_ref(), self.key())?;
        let alpha = match self.config.workflow() {
            Workflow::OnlinePg => None,
            _ => Some(self.alpha()),
        };
        Ok(MetricsRow {
            iteration: self.iteration,
            loss_critic: stats.map(|s| s.loss_critic),
            grad_norm_actor: stats.map(|s| s.grad_norm_actor),
            d_tv: m.d_tv,
            d_jsd: m.d_jsd,
            mode_accuracy: m.mode_accuracy,
            mean_reward: Some(m.mean_reward),
            alpha,
            wall_clock_ms,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            fingerprint: self.env.fingerprint(),
            bundle: self.bundle.clone(),
        }
    }

    /// Runs the remaining iterations, logging every `metric_every` and at the
    /// end. With a run directory, also writes the config snapshot, the
    /// metrics file and checkpoints.
    pub fn run(&mut self, run_dir: Option<&Path>) -> Result<RunSummary> {
        self.run_with(run_dir, |_| {})
    }

    /// As `run`, calling `on_row` with every metrics row as it is logged.
    pub fn run_with(&mut self, run_dir: Option<&Path>, mut on_row: impl FnMut(&MetricsRow)) -> Result<RunSummary> {
        let mut sink = run_dir.map(|d| RunDir::create(d, &self.config)).transpose()?;
        let start = Instant::now();
        let total = self.config.train.iterations as u64;
        let every = self.config.train.metric_every as u64;
        let ckpt_every = self.config.checkpoint_every() as u64;
        let mut rows = Vec::new();
        let mut checkpoints = Vec::new();
        while self.iteration < total {
            let stats = self.step()?;
            let n = self.iteration;
            let last = n == total;
            if n % every == 0 || last {
                let wall = self
                    .config
                    .train
                    .log_wall_clock
                    .then(|| start.elapsed().as_millis() as u64);
                let row = self.metrics(stats.as_ref(), wall)?;
                if let Some(s) = sink.as_mut() {
                    s.append(&row)?;
                }
                on_row(&row);
                rows.push(row);
            }
            if let Some(s) = sink.as_ref() {
                if (ckpt_every > 0 && n % ckpt_every == 0) || last {
                    checkpoints.push(s.save(&self.checkpoint())?);
                }
            }
        }
        Ok(RunSummary {
            rows,
            bundle: self.bundle.clone(),
            skipped: self.skipped,
            checkpoints,
        })
    }
}

/// What a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub rows: Vec<MetricsRow>,
    pub bundle: PolicyBundle,
    pub skipped: usize,
    pub checkpoints: Vec<PathBuf>,
}

impl RunSummary {
    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

struct RunDir {
    root: PathBuf,
    metrics: File,
}

impl RunDir {
    fn create(root: &Path, config: &Config) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        std::fs::write(root.join("config.json"), config.to_json_pretty() + "\n")?;
        let path = root.join("metrics.csv");
        let fresh = !path.exists() || std::fs::metadata(&path)?.len() == 0;
        let mut metrics = OpenOptions::new().create(true).append(true).open(&path)?;
        if fresh {
            writeln!(metrics, "{}", MetricsRow::CSV_HEADER)?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            metrics,
        })
    }

    fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.metrics, "{}", row.to_csv_line())?;
        self.metrics.flush()?;
        Ok(())
    }

    fn save(&self, ckpt: &Checkpoint) -> Result<PathBuf> {
        let path = self.root.join(format!("ckpt_{}.bin", ckpt.iteration));
        ckpt.save(&path)?;
        Ok(path)
    }
}

fn run_workflow(config: &Config, expected: Workflow, run_dir: Option<&Path>) -> Result<RunSummary> {
    if config.workflow() != expected {
        return Err(Error::config(
            "train.workflow",
            format!("expected {expected:?}, config selects {:?}", config.workflow()),
        ));
    }
    Trainer::new(config)?.run(run_dir)
}

/// Online workflow: forward critic `V` plus policy gradient on `pi_F`.
pub fn run_online(config: &Config, run_dir: Option<&Path>) -> Result<RunSummary> {
    run_workflow(config, Workflow::OnlinePg, run_dir)
}

/// Offline workflow: backward critic `W` plus policy gradient on `pi_B`.
pub fn run_offline(config: &Config, run_dir: Option<&Path>) -> Result<RunSummary> {
    run_workflow(config, Workflow::OfflinePg, run_dir)
}

/// Subtrajectory balance on mixture-policy batches.
pub fn run_subtb(config: &Config, run_dir: Option<&Path>) -> Result<RunSummary> {
    run_workflow(config, Workflow::Subtb, run_dir)
}

/// Dispatches on the configured workflow.
pub fn run(config: &Config, run_dir: Option<&Path>) -> Result<RunSummary> {
    Trainer::new(config)?.run(run_dir)
}

/// Metrics of a saved bundle on the environment `config` describes.
pub fn evaluate(ckpt: &Checkpoint, config: &Config) -> Result<MetricsRow> {
    let env = config.build_env()?;
    if ckpt.fingerprint != env.fingerprint() {
        return Err(Error::config(
            "env",
            format!(
                "checkpoint was trained on {} but the config describes {}",
                ckpt.fingerprint,
                env.fingerprint()
            ),
        ));
    }
    ckpt.bundle.check_env(env.as_ref())?;
    let evaluator = Evaluator::new(env.as_ref(), config.train.state_cap, config.train.eval_samples)?;
    let m = evaluator.measure(&ckpt.bundle, env.as_ref(), SampleKey::new(config.seed, ckpt.iteration))?;
    Ok(MetricsRow {
        iteration: ckpt.iteration,
        loss_critic: None,
        grad_norm_actor: None,
        d_tv: m.d_tv,
        d_jsd: m.d_jsd,
        mode_accuracy: m.mode_accuracy,
        mean_reward: Some(m.mean_reward),
        alpha: None,
        wall_clock_ms: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let row = MetricsRow {
            iteration: 20,
            loss_critic: Some(0.1 + 0.2),
            grad_norm_actor: None,
            d_tv: Some(1e-300),
            d_jsd: Some(std::f64::consts::LN_2),
            mode_accuracy: Some(1.0),
            mean_reward: Some(-0.0),
            alpha: None,
            wall_clock_ms: Some(7),
        };
        let line = row.to_csv_line();
        assert_eq!(line.split(',').count(), 9);
        assert_eq!(MetricsRow::parse_csv_line(&line).unwrap(), row);
        assert!(line.starts_with("20,3.0000000000000004e-1,,"));
    }
}
