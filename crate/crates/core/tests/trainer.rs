mod common;

use std::path::Path;

use common::{grid_config, table_net};
use subflow::actor::grad_actor_forward;
use subflow::checkpoint::Checkpoint;
use subflow::diff::AdamState;
use subflow::objectives::{loss_weighted, ResidualKind};
use subflow::oracle::{dp_true_flow, PolicyTable, StateSpace};
use subflow::policy::{HeadKind, ParamSet, PolicyBundle};
use subflow::sampler::{alpha_after, sample_forward, sample_offline, SampleKey};
use subflow::trainer::{
    evaluate, read_metrics, run_offline, run_online, run_subtb, MetricsRow, Trainer, UpdateMask,
    MAX_CONSECUTIVE_SKIPS,
};
use subflow::Error;

fn optimal_subtb_bundle(trainer: &Trainer) -> PolicyBundle {
    let env = trainer.env();
    let space = StateSpace::new(env, 1 << 20).unwrap();
    let uniform = PolicyTable::uniform(&space, env).unwrap();
    let flow = dp_true_flow(&space, &uniform);
    let opt = uniform.optimal_forward(&space, &flow);
    let mut bundle = trainer.bundle().clone();
    bundle.forward = table_net(env, &space, &opt.log_pf);
    let log_flow: Vec<Vec<f64>> = flow.log_flow.iter().map(|&v| vec![v]).collect();
    bundle.log_flow = Some(table_net(env, &space, &log_flow));
    bundle
}

#[test]
fn tiny_runs_are_deterministic() {
    let config = grid_config(3, 2, r#""sampler": {"batch": 1}, "train": {"iterations": 1, "metric_every": 1}"#);
    let a = run_online(&config, None).unwrap();
    let b = run_online(&config, None).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.bundle, b.bundle);
}

#[test]
fn online_metrics_match_golden_file() {
    let config = grid_config(3, 2, r#""sampler": {"batch": 4}, "train": {"iterations": 6, "metric_every": 2}"#);
    let rows = run_online(&config, None).unwrap().rows;
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_online.csv");
    if std::env::var_os("SUBFLOW_BLESS").is_some() {
        let mut text = format!("{}\n", MetricsRow::CSV_HEADER);
        for r in &rows {
            text += &format!("{}\n", r.to_csv_line());
        }
        std::fs::write(&path, text).unwrap();
    }
    let golden = read_metrics(&path).unwrap();
    assert_eq!(golden.len(), rows.len());
    let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0),
        (None, None) => true,
        _ => false,
    };
    for (g, r) in golden.iter().zip(&rows) {
        assert_eq!(g.iteration, r.iteration);
        assert!(close(g.loss_critic, r.loss_critic), "{g:?} vs {r:?}");
        assert!(close(g.grad_norm_actor, r.grad_norm_actor), "{g:?} vs {r:?}");
        assert!(close(g.d_tv, r.d_tv), "{g:?} vs {r:?}");
        assert!(close(g.d_jsd, r.d_jsd), "{g:?} vs {r:?}");
        assert!(close(g.mean_reward, r.mean_reward), "{g:?} vs {r:?}");
    }
}

/// Replays one online iteration by hand with fresh optimizers.
fn manual_online_step(trainer: &Trainer, critic_first: bool) -> PolicyBundle {
    let config = trainer.config();
    let env = trainer.env();
    let mut bundle = trainer.bundle().clone();
    let trajs = sample_forward(&bundle, env, config.sampler.batch, SampleKey::new(config.seed, 0)).unwrap();
    let report = loss_weighted(&bundle, env, &trajs, ResidualKind::SubEb, &config.weight_scheme()).unwrap();
    let pre_update = bundle.clone();
    let value = bundle.value.as_mut().unwrap();
    let mut adam = AdamState::new(value.param_count(), config.train.lr_value);
    adam.step(value.params_mut(), &report.grads.value.as_ref().unwrap().grads).unwrap();
    let critic = if critic_first { &bundle } else { &pre_update };
    let est = grad_actor_forward(critic, env, &trajs, config.actor.gamma).unwrap();
    let ascent: Vec<f64> = est.grads.forward.grads.iter().map(|g| -g).collect();
    let mut adam = AdamState::new(bundle.forward.param_count(), config.actor.lr);
    adam.step(bundle.forward.params_mut(), &ascent).unwrap();
    bundle
}

#[test]
fn online_step_updates_critic_before_actor() {
    let config = grid_config(4, 2, r#""sampler": {"batch": 8}"#);
    let mut trainer = Trainer::new(&config).unwrap();
    let expected = manual_online_step(&trainer, true);
    let stale = manual_online_step(&trainer, false);
    trainer.step().unwrap().unwrap();
    assert_eq!(trainer.bundle(), &expected);
    assert_ne!(trainer.bundle().forward, stale.forward);
}

#[test]
fn update_mask_respects_parameter_ownership() {
    let config = grid_config(4, 2, r#""sampler": {"batch": 8}"#);
    let initial = Trainer::new(&config).unwrap().bundle().clone();

    let mut theta_only = Trainer::new(&config).unwrap().with_mask(UpdateMask { theta: true, phi: false });
    theta_only.step().unwrap().unwrap();
    assert_eq!(theta_only.bundle().value, initial.value);
    assert_ne!(theta_only.bundle().forward, initial.forward);

    let mut phi_only = Trainer::new(&config).unwrap().with_mask(UpdateMask { theta: false, phi: true });
    phi_only.step().unwrap().unwrap();
    assert_eq!(phi_only.bundle().forward, initial.forward);
    assert_ne!(phi_only.bundle().value, initial.value);

    for kind in HeadKind::ALL {
        let owner = kind.owner();
        assert_eq!(owner == ParamSet::Phi, matches!(kind, HeadKind::Backward | HeadKind::Value));
    }
}

#[test]
fn online_subeb_learns_small_grid() {
    let config = grid_config(2, 2, r#""train": {"iterations": 200}"#);
    let tv = run_online(&config, None).unwrap().last().unwrap().d_tv.unwrap();
    assert!(tv < 0.05, "final total variation {tv}");
}

#[test]
fn subtb_learns_small_grid() {
    let config = grid_config(2, 2, r#""objective": {"kind": "subtb"}, "train": {"iterations": 200}"#);
    let tv = run_subtb(&config, None).unwrap().last().unwrap().d_tv.unwrap();
    assert!(tv < 0.05, "final total variation {tv}");
}

#[test]
fn offline_workflow_runs_and_reports_alpha() {
    let config = grid_config(2, 2, r#""train": {"workflow": "offline_pg", "iterations": 40, "metric_every": 10}"#);
    let rows = run_offline(&config, None).unwrap().rows;
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r.alpha, Some(alpha_after(1.0, 0.99, r.iteration)));
        assert!(r.loss_critic.unwrap().is_finite());
    }
}

#[test]
fn workflow_entry_points_check_the_config() {
    let config = grid_config(2, 2, "");
    match run_subtb(&config, None) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "train.workflow"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn subtb_vanishes_at_the_exact_flow() {
    let config = grid_config(3, 2, r#""objective": {"kind": "subtb"}, "sampler": {"batch": 32}"#);
    let mut trainer = Trainer::new(&config).unwrap();
    let bundle = optimal_subtb_bundle(&trainer);
    let env = trainer.env();
    let trajs = sample_offline(&bundle, env, 32, 0.5, SampleKey::new(7, 0)).unwrap();
    let report = loss_weighted(&bundle, env, &trajs, ResidualKind::SubTb, &config.weight_scheme()).unwrap();
    assert!(report.loss < 1e-24, "loss {}", report.loss);
    assert!(report.grad_norm_theta < 1e-10, "theta gradient {}", report.grad_norm_theta);
    assert!(report.grad_norm_phi < 1e-10, "phi gradient {}", report.grad_norm_phi);

    trainer.set_bundle(bundle).unwrap();
    let stats = trainer.step().unwrap().unwrap();
    assert!(stats.loss_critic < 1e-24);
}

#[test]
fn evaluate_uniform_checkpoint_on_a_line() {
    let config = grid_config(3, 1, "");
    let trainer = Trainer::new(&config).unwrap();
    let row = evaluate(&trainer.checkpoint(), &config).unwrap();
    // uniform P_F stops at 0, 1, 2 with 1/2, 1/4, 1/4; rewards are 0.51, 0.01, 0.51
    let pf = [0.5, 0.25, 0.25];
    let reward = [0.51, 0.01, 0.51];
    let z: f64 = reward.iter().sum();
    let tv = 0.5 * pf.iter().zip(&reward).map(|(p, r)| (p - r / z).abs()).sum::<f64>();
    let mean: f64 = pf.iter().zip(&reward).map(|(p, r)| p * r).sum();
    assert!((row.d_tv.unwrap() - tv).abs() < 1e-12);
    assert!((row.mean_reward.unwrap() - mean).abs() < 1e-12);
    assert_eq!(row.iteration, 0);
    assert_eq!(row, evaluate(&trainer.checkpoint(), &config).unwrap());
}

#[test]
fn evaluate_exact_optimum() {
    let config = grid_config(3, 2, r#""objective": {"kind": "subtb"}"#);
    let trainer = Trainer::new(&config).unwrap();
    let ckpt = Checkpoint {
        bundle: optimal_subtb_bundle(&trainer),
        ..trainer.checkpoint()
    };
    let row = evaluate(&ckpt, &config).unwrap();
    assert!(row.d_tv.unwrap().abs() < 1e-9, "{row:?}");
    assert!(row.d_jsd.unwrap().abs() < 1e-9, "{row:?}");
    assert_eq!(row.mode_accuracy, Some(1.0));
}

#[test]
fn evaluate_rejects_another_environment() {
    let trainer = Trainer::new(&grid_config(3, 2, "")).unwrap();
    match evaluate(&trainer.checkpoint(), &grid_config(4, 2, "")) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "env"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn non_finite_critic_aborts_after_repeated_skips() {
    let config = grid_config(3, 2, r#""sampler": {"batch": 4}"#);
    let mut trainer = Trainer::new(&config).unwrap();
    let mut bundle = trainer.bundle().clone();
    let value = bundle.value.as_mut().unwrap();
    let last = value.param_count() - 1;
    value.params_mut()[last] = f64::NAN;
    trainer.set_bundle(bundle.clone()).unwrap();
    for _ in 0..MAX_CONSECUTIVE_SKIPS {
        assert_eq!(trainer.step().unwrap(), None);
        assert_eq!(trainer.bundle().forward, bundle.forward);
    }
    assert!(matches!(trainer.step(), Err(Error::Aborted(_))));
    assert_eq!(trainer.skipped(), MAX_CONSECUTIVE_SKIPS + 1);
}

#[test]
fn run_directory_layout_and_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let config = grid_config(
        3,
        2,
        r#""objective": {"kind": "subtb"}, "sampler": {"batch": 4}, "train": {"iterations": 10, "metric_every": 3}"#,
    );
    let summary = run_subtb(&config, Some(dir.path())).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["ckpt_10.bin", "ckpt_3.bin", "ckpt_6.bin", "ckpt_9.bin", "config.json", "metrics.csv"]
    );
    let rows = read_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(rows, summary.rows);
    let iterations: Vec<u64> = rows.iter().map(|r| r.iteration).collect();
    assert_eq!(iterations, [3, 6, 9, 10]);
    for r in &rows {
        assert_eq!(r.alpha, Some(1.0 * 0.99f64.powi(r.iteration as i32)));
        assert_eq!(r.wall_clock_ms, None);
    }
    let saved = subflow::config::Config::from_path(&dir.path().join("config.json")).unwrap();
    assert_eq!(saved, config);
    let last = Checkpoint::load(&dir.path().join("ckpt_10.bin")).unwrap();
    assert_eq!(last.iteration, 10);
    assert_eq!(last.bundle, summary.bundle);
    assert_eq!(last.fingerprint, "hypergrid:height=3,dims=2");

    let again = tempfile::tempdir().unwrap();
    run_subtb(&config, Some(again.path())).unwrap();
    let read = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(dir.path()), read(again.path()));
}

#[test]
fn final_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let config = grid_config(
        3,
        2,
        r#""sampler": {"batch": 4}, "train": {"iterations": 5, "metric_every": 2, "checkpoint_every": 0}"#,
    );
    let summary = run_online(&config, Some(dir.path())).unwrap();
    assert_eq!(summary.checkpoints, [dir.path().join("ckpt_5.bin")]);
    assert!(summary.rows.iter().all(|r| r.alpha.is_none()));
}
