//! End-to-end experiment driver: builds suites and demonstrations from a
//! configuration, pretrains the base policy, and walks the continual
//! curriculum under a chosen strategy.

use thiserror::Error;

use crate::bench::{generate_suite_demos, make_suite, BenchError, PerceptionMap, SuiteKind};
use crate::config::ExperimentConfig;
use crate::harness::{
    adapt_stage, pretrain, ContinualState, EvalConfig, HarnessError, StrategyKind, StrategySpec,
    SuiteData, TrainConfig,
};
use crate::policy::{PolicyError, PolicyWeights};
use crate::rng::derive_seed;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

type Result<T> = std::result::Result<T, DriverError>;

/// Builds one suite's tasks and demonstrations. `stage_index` keeps the
/// data seeds of repeated suite kinds distinct (0 = pretrain).
pub fn build_suite(
    cfg: &ExperimentConfig,
    kind: SuiteKind,
    n_tasks: usize,
    pmap: &PerceptionMap,
    stage_index: u64,
) -> Result<SuiteData> {
    let task_seed = derive_seed(cfg.seeds.data, "suite", &[stage_index]);
    let demo_seed = derive_seed(cfg.seeds.data, "demos", &[stage_index]);
    let tasks = make_suite(kind, n_tasks, task_seed, &cfg.bench)?;
    let demos = generate_suite_demos(&tasks, pmap, cfg.curriculum.demos_per_task, demo_seed)?;
    Ok(SuiteData { tasks, demos })
}

pub fn perception_map(cfg: &ExperimentConfig) -> PerceptionMap {
    PerceptionMap::new(&cfg.bench, derive_seed(cfg.seeds.data, "pmap", &[]))
}

fn stage_train_cfg(cfg: &ExperimentConfig, stage: u64) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(cfg.seeds.train, "stage", &[stage]),
        ..cfg.train.clone()
    }
}

fn eval_cfg(cfg: &ExperimentConfig) -> EvalConfig {
    // one eval seed for the whole run: backward-transfer comparisons
    // re-roll exactly the episodes that produced the forward numbers
    EvalConfig {
        episodes: cfg.eval.episodes,
        seed: cfg.seeds.eval,
    }
}

/// Initializes the policy and pretrains it on the pretrain suite.
/// Returns the run state, ready for `run_stage` calls.
pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<ContinualState> {
    let pmap = perception_map(cfg);
    let suite = build_suite(
        cfg,
        SuiteKind::Pretrain,
        cfg.curriculum.pretrain_tasks,
        &pmap,
        0,
    )?;
    let weights = PolicyWeights::init(&cfg.policy, derive_seed(cfg.seeds.train, "init", &[]))?;
    let mut state = ContinualState::new(weights, pmap);
    state.ledger.config_echo = serde_json::to_value(cfg).expect("config serializes");
    pretrain(&mut state, &suite, &stage_train_cfg(cfg, 0), &eval_cfg(cfg))?;
    Ok(state)
}

/// Runs adaptation stage `k` (1-based) of the configured curriculum.
pub fn run_stage(
    state: &mut ContinualState,
    cfg: &ExperimentConfig,
    strategy: &StrategySpec,
    k: usize,
) -> Result<()> {
    let stage_cfg = &cfg.curriculum.stages[k - 1];
    let suite = build_suite(cfg, stage_cfg.suite, stage_cfg.n_tasks, &state.pmap, k as u64)?;
    adapt_stage(
        state,
        &suite,
        strategy,
        &stage_train_cfg(cfg, k as u64),
        &eval_cfg(cfg),
    )?;
    Ok(())
}

/// Pretrain plus every configured stage under one strategy.
pub fn run_curriculum(cfg: &ExperimentConfig, strategy: &StrategySpec) -> Result<ContinualState> {
    let mut state = run_pretrain(cfg)?;
    for k in 1..=cfg.curriculum.stages.len() {
        run_stage(&mut state, cfg, strategy, k)?;
    }
    Ok(state)
}

/// The default adapter strategy from the experiment config.
pub fn tail_strategy(cfg: &ExperimentConfig) -> StrategySpec {
    StrategySpec {
        kind: StrategyKind::Tail,
        adapter: Some(cfg.adapter.clone()),
    }
}
