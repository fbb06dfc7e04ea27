//! Continual-learning harness: behavioral-cloning training, the five
//! adaptation strategies (adapter-based, full fine-tuning, frozen-feature,
//! experience replay, weight consolidation), the curriculum driver, and
//! forward/backward-transfer metrics.
//!
//! Training is bit-deterministic: batches, dropout masks and evaluation
//! episodes all derive from named seed streams, and per-sample gradients
//! computed in parallel are reduced in fixed index order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{
    build_freeze_mask, init_adapter, AdapterBundle, AdapterError, AdapterSpec, MaskStrategy,
    Method, ParamCounts,
};
use crate::bench::{
    rollout_eval, PerceptionMap, TaskSpec, Trajectory, TrajectoryDataset,
};
use crate::checkpoint::ParamStore;
use crate::policy::{
    gmm_nll, policy_forward, select_action, ForwardCtx, GmmParams, Observation, PolicyError,
    PolicyWeights,
};
use crate::rng::{derive_seed, rng_from, DropoutStream};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
    #[error("non-finite loss at step {step} (epoch {epoch}): {detail}")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        detail: String,
    },
    #[error("{0}")]
    Ledger(String),
}

type Result<T> = std::result::Result<T, HarnessError>;

// ── configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub eval_every_epochs: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub ewc_lambda: f64,
    pub ewc_gamma: f64,
    /// States drawn per stage when estimating the Fisher diagonal.
    pub fisher_samples: usize,
    /// Use dataset actions for the Fisher instead of sampling the policy.
    pub fisher_from_data: bool,
}

impl TrainConfig {
    /// Paper-sized schedule (100 epochs, lr 1e-4, 500-step warmup).
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 0.1,
            warmup_steps: 500,
            eval_every_epochs: 5,
            grad_clip: 1.0,
            seed: 0,
            ewc_lambda: 5e4,
            ewc_gamma: 0.9,
            fisher_samples: 256,
            fisher_from_data: false,
        }
    }

    /// Shrunk schedule that trains the desk-scale model in seconds.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            lr: 1e-3,
            warmup_steps: 30,
            // noisy small-batch gradient norms sit well above 1; the
            // paper-scale clip of 1.0 throttles desk training badly
            grad_clip: 5.0,
            ..TrainConfig::paper()
        }
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(HarnessError::Config("lr must be finite and >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(HarnessError::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.warmup_steps > total_steps {
            return Err(HarnessError::Config(format!(
                "warmup ({}) exceeds total steps ({total_steps})",
                self.warmup_steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 20,
            seed: 1,
        }
    }
}

// ── strategies ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Tail,
    Fft,
    Fpf,
    Er,
    Ewc,
}

impl StrategyKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tail" => Some(StrategyKind::Tail),
            "fft" => Some(StrategyKind::Fft),
            "fpf" => Some(StrategyKind::Fpf),
            "er" => Some(StrategyKind::Er),
            "ewc" => Some(StrategyKind::Ewc),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::Tail => "tail",
            StrategyKind::Fft => "fft",
            StrategyKind::Fpf => "fpf",
            StrategyKind::Er => "er",
            StrategyKind::Ewc => "ewc",
        }
    }

    fn mask_strategy(&self) -> MaskStrategy {
        match self {
            StrategyKind::Tail => MaskStrategy::Tail,
            StrategyKind::Fpf => MaskStrategy::Fpf,
            StrategyKind::Fft | StrategyKind::Er | StrategyKind::Ewc => MaskStrategy::Fft,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    /// Required for the adapter strategy, ignored otherwise.
    pub adapter: Option<AdapterSpec>,
}

impl StrategySpec {
    /// Human-readable label recorded in ledgers: the strategy kind, plus
    /// the integration methods for the adapter strategy ("tail-lora").
    pub fn label(&self) -> String {
        match (&self.kind, &self.adapter) {
            (StrategyKind::Tail, Some(spec)) => {
                let methods: Vec<&str> = spec
                    .methods
                    .iter()
                    .map(|m| match m {
                        Method::Lora => "lora",
                        Method::Bottleneck => "bottleneck",
                        Method::Prefix => "prefix",
                        Method::Roboadapter => "roboadapter",
                    })
                    .collect();
                format!("tail-{}", methods.join("+"))
            }
            _ => self.kind.as_str().to_string(),
        }
    }
}

// ── data plumbing ────────────────────────────────────────────────────

/// One task suite's specs and demonstrations, the unit of a curriculum
/// stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteData {
    pub tasks: Vec<TaskSpec>,
    pub demos: TrajectoryDataset,
}

impl SuiteData {
    pub fn suite_id(&self) -> &str {
        &self.demos.suite_id
    }

    fn instruction(&self, task_id: usize) -> &Vec<f64> {
        &self
            .tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .expect("dataset references unknown task")
            .instruction_emb
    }

    /// `(instruction, trajectory)` pairs over the train split.
    fn train_pool(&self) -> Vec<(&Vec<f64>, &Trajectory)> {
        self.demos
            .tasks
            .iter()
            .flat_map(|td| {
                td.train
                    .iter()
                    .map(|tr| (self.instruction(td.task_id), tr))
            })
            .collect()
    }

    fn val_pool(&self) -> Vec<(&Vec<f64>, &Trajectory)> {
        self.demos
            .tasks
            .iter()
            .flat_map(|td| td.val.iter().map(|tr| (self.instruction(td.task_id), tr)))
            .collect()
    }
}

/// Prior-stage trajectories for experience replay; grows by each finished
/// stage's train split.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub items: Vec<(Vec<f64>, Trajectory)>,
}

impl ReplayBuffer {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn extend_from(&mut self, suite: &SuiteData) {
        for (emb, traj) in suite.train_pool() {
            self.items.push((emb.clone(), traj.clone()));
        }
    }
}

/// A single training example: one timestep of one demonstration, paired
/// with its task instruction.
#[derive(Debug, Clone, Copy)]
pub struct SampleRef<'a> {
    pub instruction: &'a [f64],
    pub traj: &'a Trajectory,
    pub t: usize,
}

fn draw_sample<'a>(
    pool: &[(&'a Vec<f64>, &'a Trajectory)],
    rng: &mut ChaCha12Rng,
) -> SampleRef<'a> {
    let (emb, traj) = pool[rng.gen_range(0..pool.len())];
    SampleRef {
        instruction: emb,
        traj,
        t: rng.gen_range(0..traj.steps.len()),
    }
}

/// 50-50 split between the replay buffer and the current dataset:
/// ceil(B/2) buffer samples, floor(B/2) current, uniform at the
/// trajectory level then uniform over timesteps. An empty buffer falls
/// back to all-current (stage 1).
pub fn er_sample_batch<'a>(
    buffer: &'a ReplayBuffer,
    current: &[(&'a Vec<f64>, &'a Trajectory)],
    batch_size: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<SampleRef<'a>> {
    let from_buffer = if buffer.is_empty() {
        0
    } else {
        batch_size.div_ceil(2)
    };
    let mut batch = Vec::with_capacity(batch_size);
    let buf_pool: Vec<(&Vec<f64>, &Trajectory)> =
        buffer.items.iter().map(|(e, t)| (e, t)).collect();
    for _ in 0..from_buffer {
        batch.push(draw_sample(&buf_pool, rng));
    }
    for _ in from_buffer..batch_size {
        batch.push(draw_sample(current, rng));
    }
    batch
}

// ── optimizer ────────────────────────────────────────────────────────

/// Decoupled-weight-decay adaptive-moment optimizer with linear warmup
/// and linear decay to zero, plus global-norm gradient clipping.
pub struct AdamW {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    pub step: usize,
    total_steps: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    pub fn new(total_steps: usize) -> Self {
        AdamW {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr_at(&self, cfg: &TrainConfig) -> f64 {
        let s = self.step as f64;
        let warm = cfg.warmup_steps as f64;
        let total = self.total_steps.max(1) as f64;
        if s < warm {
            cfg.lr * (s + 1.0) / warm.max(1.0)
        } else {
            let frac = ((total - s) / (total - warm).max(1.0)).clamp(0.0, 1.0);
            cfg.lr * frac
        }
    }

    /// Applies one update in sorted parameter-name order. `resolve` maps a
    /// name to its mutable store (base or bundle).
    pub fn apply(
        &mut self,
        grads: &mut BTreeMap<String, Tensor>,
        cfg: &TrainConfig,
        mut read: impl FnMut(&str) -> Tensor,
        mut write: impl FnMut(&str, Tensor),
    ) {
        // global-norm clip
        if cfg.grad_clip > 0.0 {
            let norm2: f64 = grads
                .values()
                .map(|g| g.data.iter().map(|v| v * v).sum::<f64>())
                .sum();
            let norm = norm2.sqrt();
            if norm > cfg.grad_clip {
                let k = cfg.grad_clip / norm;
                for g in grads.values_mut() {
                    for v in &mut g.data {
                        *v *= k;
                    }
                }
            }
        }
        let lr = self.lr_at(cfg);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            let mut theta = read(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&g.shape));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&g.shape));
            // decay applies to matrices only, not biases/gains
            let decay = if theta.rank() >= 2 { cfg.weight_decay } else { 0.0 };
            for i in 0..g.data.len() {
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * g.data[i];
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * g.data[i] * g.data[i];
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                theta.data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * theta.data[i]);
            }
            write(name, theta);
        }
        self.step += 1;
    }
}

// ── elastic weight consolidation ─────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EwcState {
    pub fisher: BTreeMap<String, Tensor>,
    pub anchor: BTreeMap<String, Tensor>,
    pub lambda: f64,
    pub gamma: f64,
    pub stages: usize,
}

impl EwcState {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in &self.fisher {
            if f.data.iter().any(|v| *v < 0.0) {
                return Err(HarnessError::Config(format!(
                    "negative Fisher entry in {name}"
                )));
            }
            let a = self.anchor.get(name).ok_or_else(|| {
                HarnessError::Config(format!("fisher/anchor mismatch at {name}"))
            })?;
            if a.shape != f.shape {
                return Err(HarnessError::Config(format!(
                    "fisher/anchor shape mismatch at {name}"
                )));
            }
        }
        Ok(())
    }
}

/// `sum_i (lambda/2) · F_i · (theta_i − theta*_i)²` as a differentiable
/// scalar node; the caller supplies leaves for the current parameters.
pub fn ewc_penalty(
    tape: &mut Tape,
    leaves: &BTreeMap<String, crate::tensor::NodeId>,
    state: &EwcState,
) -> Result<crate::tensor::NodeId> {
    state.validate()?;
    let mut total = tape.leaf(Tensor::scalar(0.0), false);
    for (name, theta) in leaves {
        let (Some(f), Some(anchor)) = (state.fisher.get(name), state.anchor.get(name)) else {
            continue;
        };
        if tape.value(*theta).shape != f.shape {
            return Err(HarnessError::Config(format!(
                "fisher shape mismatch for {name}"
            )));
        }
        let anchor_id = tape.leaf(anchor.clone(), false);
        let f_id = tape.leaf(f.clone(), false);
        let diff = tape.sub(*theta, anchor_id)?;
        let sq = tape.mul(diff, diff)?;
        let weighted = tape.mul(sq, f_id)?;
        let sum = tape.sum_all(weighted)?;
        total = tape.add(total, sum)?;
    }
    Ok(tape.scale(total, state.lambda / 2.0)?)
}

/// Exponential moving average used for the running Fisher.
pub fn ema(prev: f64, new: f64, gamma: f64) -> f64 {
    gamma * prev + (1.0 - gamma) * new
}

/// Draws an action from the mixture: categorical over softmax weights,
/// then per-dimension Gaussian.
pub fn sample_gmm_action(params: &GmmParams, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let log_w = params.log_weights();
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut mode = params.modes() - 1;
    for (k, lw) in log_w.iter().enumerate() {
        acc += lw.exp();
        if u <= acc {
            mode = k;
            break;
        }
    }
    let ad = params.means.shape[1];
    (0..ad)
        .map(|j| {
            let (mu, sigma) = (
                params.means.data[mode * ad + j],
                params.stds.data[mode * ad + j],
            );
            mu + sigma * Normal::new(0.0, 1.0).unwrap().sample(rng)
        })
        .collect()
}

/// Re-estimates the Fisher diagonal on the finished stage and folds it
/// into the running average; snapshots the anchor.
///
/// States are drawn from the stage's train split; actions come from the
/// current policy (`a ~ p(·|s)`) unless `fisher_from_data` flips to the
/// empirical variant. One action per state.
pub fn fisher_update(
    prev: Option<EwcState>,
    weights: &PolicyWeights,
    trainable: &BTreeSet<String>,
    suite: &SuiteData,
    cfg: &TrainConfig,
) -> Result<EwcState> {
    let pool = suite.train_pool();
    if pool.is_empty() {
        return Err(HarnessError::EmptyDataset(suite.suite_id().to_string()));
    }
    let mut rng = rng_from(cfg.seed, "fisher", &[]);
    let window = weights.spec.max_seq_len;
    let n = cfg.fisher_samples.max(1);

    let draws: Vec<(SampleRef, u64)> = (0..n)
        .map(|_| (draw_sample(&pool, &mut rng), rng.gen::<u64>()))
        .collect();
    let per_sample: Vec<BTreeMap<String, Tensor>> = draws
        .par_iter()
        .map(|(sample, action_seed)| {
            let start = (sample.t + 1).saturating_sub(window);
            let history: Vec<Observation> = sample.traj.steps[start..=sample.t]
                .iter()
                .map(|(o, _)| o.clone())
                .collect();
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::new(
                &mut tape,
                &weights.spec,
                &weights.store,
                None,
                Some(trainable),
                DropoutStream::disabled(),
            );
            let head = policy_forward(&mut ctx, &history, sample.instruction)?;
            let action = if cfg.fisher_from_data {
                sample.traj.steps[sample.t].1.clone()
            } else {
                let params = head.concrete(ctx.tape);
                let mut arng = rng_from(*action_seed, "fisher-action", &[]);
                sample_gmm_action(&params, &mut arng)
            };
            let nll = gmm_nll(ctx.tape, &head, &action)?;
            let mut out = BTreeMap::new();
            let ids: Vec<(String, crate::tensor::NodeId)> = trainable
                .iter()
                .filter_map(|name| ctx.leaf_id(name).map(|id| (name.clone(), id)))
                .collect();
            let mut grads = tape.backward(nll)?;
            for (name, id) in ids {
                if let Some(g) = grads.take(id) {
                    out.insert(name, g);
                }
            }
            Ok::<_, HarnessError>(out)
        })
        .collect::<Result<Vec<_>>>()?;

    // mean of squared score, fixed reduction order
    let mut fisher: BTreeMap<String, Tensor> = BTreeMap::new();
    for sample in &per_sample {
        for (name, g) in sample {
            let acc = fisher
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&g.shape));
            for (a, v) in acc.data.iter_mut().zip(&g.data) {
                *a += v * v;
            }
        }
    }
    for f in fisher.values_mut() {
        for v in &mut f.data {
            *v /= n as f64;
        }
    }

    let (lambda, gamma) = (cfg.ewc_lambda, cfg.ewc_gamma);
    let fisher = match &prev {
        Some(p) => {
            let mut out = BTreeMap::new();
            for (name, f_new) in &fisher {
                let blended = match p.fisher.get(name) {
                    Some(f_prev) => Tensor::new(
                        f_new.shape.clone(),
                        f_prev
                            .data
                            .iter()
                            .zip(&f_new.data)
                            .map(|(a, b)| ema(*a, *b, gamma))
                            .collect(),
                    ),
                    None => f_new.clone(),
                };
                out.insert(name.clone(), blended);
            }
            out
        }
        None => fisher,
    };
    let anchor = trainable
        .iter()
        .filter(|n| fisher.contains_key(*n))
        .map(|n| (n.clone(), (**weights.store.value(n)).clone()))
        .collect();
    let state = EwcState {
        fisher,
        anchor,
        lambda,
        gamma,
        stages: prev.map(|p| p.stages).unwrap_or(0) + 1,
    };
    state.validate()?;
    Ok(state)
}

// ── behavioral cloning ───────────────────────────────────────────────

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    /// Mean train NLL per epoch.
    pub train_nll: Vec<f64>,
    /// `(epoch, mean val NLL)` at evaluation checkpoints.
    pub val_nll: Vec<(usize, f64)>,
}

struct TrainSession<'a> {
    weights: &'a mut PolicyWeights,
    bundle: Option<&'a mut AdapterBundle>,
    trainable: &'a BTreeSet<String>,
    suite: &'a SuiteData,
    cfg: &'a TrainConfig,
    replay: Option<&'a ReplayBuffer>,
    ewc: Option<&'a EwcState>,
    opt: AdamW,
    steps_per_epoch: usize,
}

impl<'a> TrainSession<'a> {
    fn new(
        weights: &'a mut PolicyWeights,
        bundle: Option<&'a mut AdapterBundle>,
        trainable: &'a BTreeSet<String>,
        suite: &'a SuiteData,
        cfg: &'a TrainConfig,
        replay: Option<&'a ReplayBuffer>,
        ewc: Option<&'a EwcState>,
    ) -> Result<Self> {
        let pool = suite.train_pool();
        if pool.is_empty() {
            return Err(HarnessError::EmptyDataset(suite.suite_id().to_string()));
        }
        if trainable.is_empty() {
            return Err(HarnessError::Config("freeze mask leaves nothing trainable".into()));
        }
        let n_samples: usize = pool.iter().map(|(_, t)| t.steps.len()).sum();
        let steps_per_epoch = (n_samples / cfg.batch_size).max(1);
        let total_steps = steps_per_epoch * cfg.epochs;
        cfg.validate(total_steps)?;
        Ok(TrainSession {
            weights,
            bundle,
            trainable,
            suite,
            cfg,
            replay,
            ewc,
            opt: AdamW::new(total_steps),
            steps_per_epoch,
        })
    }

    fn read_param(&self, name: &str) -> Tensor {
        if let Some(b) = &self.bundle {
            if let Some(p) = b.params.get(name) {
                return (*p.value).clone();
            }
        }
        (**self.weights.store.value(name)).clone()
    }

    fn write_param(&mut self, name: &str, value: Tensor) {
        if let Some(b) = &mut self.bundle {
            if b.params.contains(name) {
                b.params.set_value(name, value);
                return;
            }
        }
        self.weights.store.set_value(name, value);
    }

    /// One optimization epoch; returns the mean train NLL (data term).
    fn run_epoch(&mut self, epoch: usize) -> Result<f64> {
        let mut epoch_nll = 0.0;
        for s in 0..self.steps_per_epoch {
            let step = self.opt.step;
            let mut rng = rng_from(self.cfg.seed, "batch", &[step as u64]);
            let pool = self.suite.train_pool();
            let batch = match self.replay {
                Some(buf) => er_sample_batch(buf, &pool, self.cfg.batch_size, &mut rng),
                None => (0..self.cfg.batch_size)
                    .map(|_| draw_sample(&pool, &mut rng))
                    .collect(),
            };
            let (mean_nll, mut grads) = self.batch_grads(&batch, step)?;
            if !mean_nll.is_finite() {
                return Err(HarnessError::NonFiniteLoss {
                    step,
                    epoch,
                    detail: format!("batch NLL = {mean_nll}"),
                });
            }
            if let Some(ewc) = self.ewc {
                self.add_ewc_grads(ewc, &mut grads)?;
            }
            epoch_nll += mean_nll;
            let cfg = self.cfg.clone();
            // split borrows: read/write go through small closures
            let mut opt = std::mem::replace(&mut self.opt, AdamW::new(0));
            let reads: BTreeMap<String, Tensor> = grads
                .keys()
                .map(|n| (n.clone(), self.read_param(n)))
                .collect();
            let mut writes: BTreeMap<String, Tensor> = BTreeMap::new();
            opt.apply(
                &mut grads,
                &cfg,
                |n| reads[n].clone(),
                |n, t| {
                    writes.insert(n.to_string(), t);
                },
            );
            for (n, t) in writes {
                self.write_param(&n, t);
            }
            self.opt = opt;
            let _ = s;
        }
        Ok(epoch_nll / self.steps_per_epoch as f64)
    }

    /// Mean NLL and mean gradients over a batch; per-sample tapes run in
    /// parallel, reduced in batch order for bit determinism.
    fn batch_grads(
        &self,
        batch: &[SampleRef],
        step: usize,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let window = self.weights.spec.max_seq_len;
        let bundle = self.bundle.as_deref();
        let per_sample: Vec<(f64, BTreeMap<String, Tensor>)> = batch
            .par_iter()
            .enumerate()
            .map(|(i, sample)| {
                let start = (sample.t + 1).saturating_sub(window);
                let history: Vec<Observation> = sample.traj.steps[start..=sample.t]
                    .iter()
                    .map(|(o, _)| o.clone())
                    .collect();
                let action = &sample.traj.steps[sample.t].1;
                let drop_seed = derive_seed(self.cfg.seed, "dropout", &[step as u64, i as u64]);
                let mut tape = Tape::new();
                let mut ctx = ForwardCtx::new(
                    &mut tape,
                    &self.weights.spec,
                    &self.weights.store,
                    bundle,
                    Some(self.trainable),
                    DropoutStream::new(drop_seed, step as u64),
                );
                let head = policy_forward(&mut ctx, &history, sample.instruction)?;
                let nll = gmm_nll(ctx.tape, &head, action)?;
                let loss = ctx.tape.value(nll).data[0];
                let ids: Vec<(String, crate::tensor::NodeId)> = self
                    .trainable
                    .iter()
                    .filter_map(|name| ctx.leaf_id(name).map(|id| (name.clone(), id)))
                    .collect();
                let mut grads = tape.backward(nll)?;
                let mut out = BTreeMap::new();
                for (name, id) in ids {
                    if let Some(g) = grads.take(id) {
                        out.insert(name, g);
                    }
                }
                Ok::<_, HarnessError>((loss, out))
            })
            .collect::<Result<Vec<_>>>()?;

        let b = batch.len() as f64;
        let mut mean_nll = 0.0;
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        for (loss, grads) in per_sample {
            mean_nll += loss / b;
            for (name, g) in grads {
                match acc.get_mut(&name) {
                    Some(a) => {
                        for (x, y) in a.data.iter_mut().zip(&g.data) {
                            *x += y / b;
                        }
                    }
                    None => {
                        let mut scaled = g;
                        for v in &mut scaled.data {
                            *v /= b;
                        }
                        acc.insert(name, scaled);
                    }
                }
            }
        }
        Ok((mean_nll, acc))
    }

    /// Adds the analytic consolidation gradient `lambda·F·(theta − theta*)`
    /// for every anchored parameter.
    fn add_ewc_grads(&self, ewc: &EwcState, grads: &mut BTreeMap<String, Tensor>) -> Result<()> {
        for name in self.trainable {
            let (Some(f), Some(anchor)) = (ewc.fisher.get(name), ewc.anchor.get(name)) else {
                continue;
            };
            let theta = self.read_param(name);
            if theta.shape != f.shape {
                return Err(HarnessError::Config(format!(
                    "fisher shape mismatch for {name}"
                )));
            }
            let extra: Vec<f64> = theta
                .data
                .iter()
                .zip(&f.data)
                .zip(&anchor.data)
                .map(|((t, f), a)| ewc.lambda * f * (t - a))
                .collect();
            match grads.get_mut(name) {
                Some(g) => {
                    for (x, e) in g.data.iter_mut().zip(&extra) {
                        *x += e;
                    }
                }
                None => {
                    grads.insert(name.clone(), Tensor::new(theta.shape.clone(), extra));
                }
            }
        }
        Ok(())
    }

    /// Mean NLL over the validation split (no dropout).
    fn val_nll(&self) -> Result<f64> {
        let pool = self.suite.val_pool();
        let window = self.weights.spec.max_seq_len;
        let bundle = self.bundle.as_deref();
        let samples: Vec<(usize, usize)> = pool
            .iter()
            .enumerate()
            .flat_map(|(i, (_, t))| (0..t.steps.len()).map(move |j| (i, j)))
            .collect();
        if samples.is_empty() {
            return Ok(f64::NAN);
        }
        let total: f64 = samples
            .par_iter()
            .map(|&(i, t)| {
                let (emb, traj) = pool[i];
                let start = (t + 1).saturating_sub(window);
                let history: Vec<Observation> =
                    traj.steps[start..=t].iter().map(|(o, _)| o.clone()).collect();
                let mut tape = Tape::new();
                let mut ctx = ForwardCtx::new(
                    &mut tape,
                    &self.weights.spec,
                    &self.weights.store,
                    bundle,
                    None,
                    DropoutStream::disabled(),
                );
                let head = policy_forward(&mut ctx, &history, emb)?;
                let nll = gmm_nll(ctx.tape, &head, &traj.steps[t].1)?;
                Ok::<_, HarnessError>(tape.value(nll).data[0])
            })
            .collect::<Result<Vec<_>>>()?
            .iter()
            .sum();
        Ok(total / samples.len() as f64)
    }
}

/// Plain behavioral cloning (Eq. 1 analog): minimizes mean action NLL
/// over timestep samples with observation-history windows.
pub fn bc_train(
    weights: &mut PolicyWeights,
    bundle: Option<&mut AdapterBundle>,
    trainable: &BTreeSet<String>,
    suite: &SuiteData,
    cfg: &TrainConfig,
) -> Result<LossCurves> {
    let mut session =
        TrainSession::new(weights, bundle, trainable, suite, cfg, None, None)?;
    let mut curves = LossCurves::default();
    for epoch in 0..cfg.epochs {
        curves.train_nll.push(session.run_epoch(epoch)?);
        if (epoch + 1) % cfg.eval_every_epochs.max(1) == 0 || epoch + 1 == cfg.epochs {
            curves.val_nll.push((epoch, session.val_nll()?));
        }
    }
    Ok(curves)
}

// ── evaluation ───────────────────────────────────────────────────────

/// Per-task success rates of the policy (with optional bundle) on a suite,
/// under fixed evaluation seeds. Episodes fan out across threads; success
/// counts aggregate order-independently.
pub fn eval_suite(
    weights: &PolicyWeights,
    bundle: Option<&AdapterBundle>,
    tasks: &[TaskSpec],
    pmap: &PerceptionMap,
    eval: &EvalConfig,
) -> Vec<f64> {
    tasks
        .par_iter()
        .map(|task| {
            let res = rollout_eval(
                task,
                pmap,
                eval.episodes,
                weights.spec.max_seq_len,
                eval.seed,
                |history, _, task| {
                    let mut tape = Tape::new();
                    let mut ctx = ForwardCtx::eval(&mut tape, weights, bundle);
                    match policy_forward(&mut ctx, history, &task.instruction_emb) {
                        Ok(head) => select_action(&head.concrete(&tape)),
                        Err(_) => vec![f64::NAN; weights.spec.action_dim],
                    }
                },
            );
            res.success_rate
        })
        .collect()
}

// ── metrics ──────────────────────────────────────────────────────────

/// Forward transfer: max of the checkpoint success curve, with the
/// argmax checkpoint index (ties to the earliest).
pub fn compute_fwt(curve: &[f64]) -> Result<(f64, usize)> {
    if curve.is_empty() {
        return Err(HarnessError::Ledger("empty success curve".into()));
    }
    let mut best = (curve[0], 0);
    for (i, v) in curve.iter().enumerate().skip(1) {
        if *v > best.0 {
            best = (*v, i);
        }
    }
    Ok(best)
}

/// Backward transfer at stage k: mean over prior stages of `S_i − F_i`,
/// where `S_i` is the current model's success on stage i under the same
/// evaluation seeds that produced `F_i`.
pub fn compute_bwt(prior_fwt: &[f64], s_now: &[f64]) -> Result<f64> {
    if prior_fwt.is_empty() || prior_fwt.len() != s_now.len() {
        return Err(HarnessError::Ledger(format!(
            "BWT needs matching prior evaluations (got {} F, {} S)",
            prior_fwt.len(),
            s_now.len()
        )));
    }
    Ok(s_now
        .iter()
        .zip(prior_fwt)
        .map(|(s, f)| s - f)
        .sum::<f64>()
        / prior_fwt.len() as f64)
}

// ── curriculum driver ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub suite_id: String,
    pub strategy: String,
    /// Epoch index of each evaluation checkpoint.
    pub eval_epochs: Vec<usize>,
    /// Per checkpoint, per current-suite task success.
    pub success_matrix: Vec<Vec<f64>>,
    pub fwt: f64,
    pub best_checkpoint: usize,
    /// Mean success on each prior stage, evaluated at the best checkpoint.
    pub s_prior: Vec<f64>,
    /// Defined from the second adaptation stage on.
    pub bwt: Option<f64>,
    pub base_digest: String,
    pub param_counts: ParamCounts,
    pub train_nll: Vec<f64>,
    pub val_nll: Vec<(usize, f64)>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub pretrain_digest: String,
    pub pretrain_success: Vec<f64>,
    pub config_echo: serde_json::Value,
    /// Append-only adaptation stage records.
    pub stages: Vec<StageRecord>,
}

/// Everything that persists across curriculum stages.
pub struct ContinualState {
    pub weights: PolicyWeights,
    pub pmap: PerceptionMap,
    pub bundles: Vec<AdapterBundle>,
    pub replay: ReplayBuffer,
    pub ewc: Option<EwcState>,
    pub past: Vec<SuiteData>,
    pub ledger: RunLedger,
}

impl ContinualState {
    pub fn new(weights: PolicyWeights, pmap: PerceptionMap) -> Self {
        let digest = weights.digest();
        ContinualState {
            weights,
            pmap,
            bundles: Vec::new(),
            replay: ReplayBuffer::default(),
            ewc: None,
            past: Vec::new(),
            ledger: RunLedger {
                pretrain_digest: digest,
                ..RunLedger::default()
            },
        }
    }
}

fn wall_clock(started: Instant) -> f64 {
    if std::env::var("TAIL_DETERMINISTIC").as_deref() == Ok("1") {
        0.0
    } else {
        started.elapsed().as_secs_f64()
    }
}

/// Pretraining: behavioral cloning on the pretrain suite with the frozen
/// encoders masked out; restores the best-success checkpoint and records
/// the resulting digest in the ledger.
pub fn pretrain(
    state: &mut ContinualState,
    suite: &SuiteData,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<LossCurves> {
    let trainable = build_freeze_mask(&state.weights.store, MaskStrategy::Pretrain, None)?;
    let mut session = TrainSession::new(
        &mut state.weights,
        None,
        &trainable,
        suite,
        cfg,
        None,
        None,
    )?;
    let mut curves = LossCurves::default();
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 0..cfg.epochs {
        curves.train_nll.push(session.run_epoch(epoch)?);
        let checkpoint = (epoch + 1) % cfg.eval_every_epochs.max(1) == 0 || epoch + 1 == cfg.epochs;
        if checkpoint {
            curves.val_nll.push((epoch, session.val_nll()?));
            let successes =
                eval_suite(session.weights, None, &suite.tasks, &state.pmap, eval);
            let mean = successes.iter().sum::<f64>() / successes.len() as f64;
            if best.as_ref().map(|(b, _)| mean > *b).unwrap_or(true) {
                best = Some((mean, session.weights.store.clone()));
            }
        }
    }
    if let Some((_, store)) = best {
        session.weights.store = store;
    }
    drop(session);
    state.ledger.pretrain_digest = state.weights.digest();
    state.ledger.pretrain_success =
        eval_suite(&state.weights, None, &suite.tasks, &state.pmap, eval);
    Ok(curves)
}

/// Runs one adaptation stage under the given strategy, evaluates backward
/// transfer against all prior stages, and appends to the ledger.
pub fn adapt_stage(
    state: &mut ContinualState,
    suite: &SuiteData,
    strategy: &StrategySpec,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<()> {
    let started = Instant::now();
    let stage = state.ledger.stages.len() + 1;
    let mask_strategy = strategy.kind.mask_strategy();

    let mut bundle = match strategy.kind {
        StrategyKind::Tail => {
            let aspec = strategy.adapter.as_ref().ok_or_else(|| {
                HarnessError::Config("tail strategy requires an adapter spec".into())
            })?;
            let digest = state.weights.digest();
            Some(init_adapter(
                &state.weights.spec,
                aspec,
                &state.weights.store,
                &digest,
                suite.suite_id(),
                state.bundles.last(),
                derive_seed(cfg.seed, "bundle-init", &[stage as u64]),
            )?)
        }
        _ => None,
    };
    let trainable = build_freeze_mask(&state.weights.store, mask_strategy, bundle.as_ref())?;

    // strategy extras: replay buffer for ER, running Fisher for EWC
    let replay = (strategy.kind == StrategyKind::Er).then(|| state.replay.clone());
    let ewc = if strategy.kind == StrategyKind::Ewc {
        state.ewc.clone()
    } else {
        None
    };

    let mut session = TrainSession::new(
        &mut state.weights,
        bundle.as_mut(),
        &trainable,
        suite,
        cfg,
        replay.as_ref(),
        ewc.as_ref(),
    )?;
    let mut curves = LossCurves::default();
    let mut eval_epochs = Vec::new();
    let mut matrix: Vec<Vec<f64>> = Vec::new();
    let mut best: Option<(f64, ParamStore, Option<ParamStore>)> = None;
    for epoch in 0..cfg.epochs {
        curves.train_nll.push(session.run_epoch(epoch)?);
        let checkpoint = (epoch + 1) % cfg.eval_every_epochs.max(1) == 0 || epoch + 1 == cfg.epochs;
        if checkpoint {
            curves.val_nll.push((epoch, session.val_nll()?));
            let successes = eval_suite(
                session.weights,
                session.bundle.as_deref(),
                &suite.tasks,
                &state.pmap,
                eval,
            );
            let mean = successes.iter().sum::<f64>() / successes.len() as f64;
            eval_epochs.push(epoch);
            matrix.push(successes);
            if best.as_ref().map(|(b, _, _)| mean > *b).unwrap_or(true) {
                best = Some((
                    mean,
                    session.weights.store.clone(),
                    session.bundle.as_ref().map(|b| b.params.clone()),
                ));
            }
        }
    }
    if let Some((_, store, bundle_params)) = best {
        session.weights.store = store;
        if let (Some(b), Some(params)) = (session.bundle.as_mut(), bundle_params) {
            b.params = params;
        }
    }
    drop(session);

    let curve: Vec<f64> = matrix
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect();
    let (fwt, best_checkpoint) = compute_fwt(&curve)?;

    // backward transfer: best checkpoint of this stage on all prior suites
    let mut s_prior = Vec::with_capacity(state.past.len());
    for (i, past) in state.past.iter().enumerate() {
        let past_bundle = match strategy.kind {
            StrategyKind::Tail => Some(&state.bundles[i]),
            _ => None,
        };
        let successes = eval_suite(
            &state.weights,
            past_bundle,
            &past.tasks,
            &state.pmap,
            eval,
        );
        s_prior.push(successes.iter().sum::<f64>() / successes.len() as f64);
    }
    let bwt = if stage >= 2 {
        let prior_fwt: Vec<f64> = state.ledger.stages.iter().map(|s| s.fwt).collect();
        Some(compute_bwt(&prior_fwt, &s_prior)?)
    } else {
        None
    };

    let param_counts = crate::adapters::count_trainable(
        &state.weights.store,
        &trainable,
        bundle.as_ref(),
    );
    state.ledger.stages.push(StageRecord {
        stage,
        suite_id: suite.suite_id().to_string(),
        strategy: strategy.label(),
        eval_epochs,
        success_matrix: matrix,
        fwt,
        best_checkpoint,
        s_prior,
        bwt,
        base_digest: state.weights.digest(),
        param_counts,
        train_nll: curves.train_nll,
        val_nll: curves.val_nll,
        wall_clock_s: wall_clock(started),
    });

    // post-stage bookkeeping
    if let Some(b) = bundle {
        state.bundles.push(b);
    }
    // the replay buffer holds prior-stage data only while training, so
    // the current suite joins it after the stage finishes
    state.replay.extend_from(suite);
    if strategy.kind == StrategyKind::Ewc {
        state.ewc = Some(fisher_update(
            state.ewc.take(),
            &state.weights,
            &trainable,
            suite,
            cfg,
        )?);
    }
    state.past.push(suite.clone());
    Ok(())
}

/// Re-adapts an earlier suite from the current weights and reports its
/// original FWT next to the revisit FWT (Table 4 analog). For the
/// adapter strategy this reloads the stored bundle, so the revisit equals
/// the original under fixed seeds.
pub fn circle_back(
    state: &mut ContinualState,
    suite_index: usize,
    strategy: &StrategySpec,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<(f64, f64)> {
    let initial = state
        .ledger
        .stages
        .get(suite_index)
        .ok_or_else(|| HarnessError::Ledger(format!("stage {suite_index} not in ledger")))?
        .fwt;
    let suite = state
        .past
        .get(suite_index)
        .ok_or_else(|| HarnessError::Ledger(format!("suite {suite_index} not retained")))?
        .clone();
    let revisit = match strategy.kind {
        StrategyKind::Tail => {
            // stored bundle re-evaluated, no retraining
            let successes = eval_suite(
                &state.weights,
                Some(&state.bundles[suite_index]),
                &suite.tasks,
                &state.pmap,
                eval,
            );
            successes.iter().sum::<f64>() / successes.len() as f64
        }
        _ => {
            adapt_stage(state, &suite, strategy, cfg, eval)?;
            state.ledger.stages.last().unwrap().fwt
        }
    };
    Ok((initial, revisit))
}

// ── persistence ──────────────────────────────────────────────────────

/// Writes `ledger.json` plus a long-format `metrics.csv`.
pub fn save_ledger(dir: &Path, ledger: &RunLedger) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| HarnessError::Ledger(format!("create {}: {e}", dir.display())))?;
    let json = serde_json::to_vec_pretty(ledger)
        .map_err(|e| HarnessError::Ledger(format!("serialize ledger: {e}")))?;
    std::fs::write(dir.join("ledger.json"), json)
        .map_err(|e| HarnessError::Ledger(format!("write ledger.json: {e}")))?;

    let mut csv = String::from("stage,epoch,task,split,metric,value\n");
    for (task, s) in ledger.pretrain_success.iter().enumerate() {
        csv.push_str(&format!("0,-1,{task},eval,success,{s}\n"));
    }
    for st in &ledger.stages {
        for (epoch, nll) in st.train_nll.iter().enumerate() {
            csv.push_str(&format!("{},{epoch},all,train,nll,{nll}\n", st.stage));
        }
        for (epoch, nll) in &st.val_nll {
            csv.push_str(&format!("{},{epoch},all,val,nll,{nll}\n", st.stage));
        }
        for (ci, row) in st.success_matrix.iter().enumerate() {
            for (task, s) in row.iter().enumerate() {
                csv.push_str(&format!(
                    "{},{},{task},eval,success,{s}\n",
                    st.stage, st.eval_epochs[ci]
                ));
            }
        }
        csv.push_str(&format!("{},-1,all,eval,fwt,{}\n", st.stage, st.fwt));
        if let Some(bwt) = st.bwt {
            csv.push_str(&format!("{},-1,all,eval,bwt,{bwt}\n", st.stage));
        }
    }
    std::fs::write(dir.join("metrics.csv"), csv)
        .map_err(|e| HarnessError::Ledger(format!("write metrics.csv: {e}")))?;
    Ok(())
}

pub fn load_ledger(dir: &Path) -> Result<RunLedger> {
    let bytes = std::fs::read(dir.join("ledger.json"))
        .map_err(|e| HarnessError::Ledger(format!("read ledger.json: {e}")))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| HarnessError::Ledger(format!("parse ledger.json: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{generate_suite_demos, make_suite, BenchParams, SuiteKind};
    use crate::policy::PolicySpec;
    use crate::tensor::grad_check;

    #[test]
    fn fwt_fixtures() {
        assert_eq!(compute_fwt(&[0.2, 0.5, 0.4]).unwrap(), (0.5, 1));
        assert_eq!(compute_fwt(&[0.3, 0.3]).unwrap(), (0.3, 0));
        assert!(compute_fwt(&[]).is_err());
    }

    #[test]
    fn bwt_fixtures() {
        assert!((compute_bwt(&[0.8], &[0.3]).unwrap() - (-0.5)).abs() < 1e-12);
        assert!((compute_bwt(&[0.5, 0.5], &[0.5, 0.7]).unwrap() - 0.1).abs() < 1e-12);
        assert!(compute_bwt(&[], &[]).is_err());
        assert!(compute_bwt(&[0.5], &[]).is_err());
    }

    #[test]
    fn ewc_penalty_fixture_and_gradient() {
        // single scalar parameter: lambda=5e4, F=2e-5, (theta-theta*)^2=0.01
        let state = EwcState {
            fisher: [("w".to_string(), Tensor::scalar(2e-5))].into_iter().collect(),
            anchor: [("w".to_string(), Tensor::scalar(1.0))].into_iter().collect(),
            lambda: 5e4,
            gamma: 0.9,
            stages: 1,
        };
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(1.1), true);
        let leaves = [("w".to_string(), w)].into_iter().collect();
        let p = ewc_penalty(&mut tape, &leaves, &state).unwrap();
        let got = tape.value(p).data[0];
        assert!((got - 0.005).abs() < 1e-12, "penalty {got}");

        // zero at the anchor
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(1.0), true);
        let leaves = [("w".to_string(), w)].into_iter().collect();
        let p = ewc_penalty(&mut tape, &leaves, &state).unwrap();
        assert_eq!(tape.value(p).data[0], 0.0);

        // gradient = lambda·F·(theta − theta*)
        let state2 = state.clone();
        let err = grad_check(
            move |tape, x| {
                let leaves = [("w".to_string(), x)].into_iter().collect();
                ewc_penalty(tape, &leaves, &state2).map_err(|e| match e {
                    HarnessError::Tensor(t) => t,
                    other => panic!("{other}"),
                })
            },
            &Tensor::scalar(1.1),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "ewc grad err {err}");
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(1.1), true);
        let leaves = [("w".to_string(), w)].into_iter().collect();
        let p = ewc_penalty(&mut tape, &leaves, &state).unwrap();
        let mut grads = tape.backward(p).unwrap();
        let g = grads.take(w).unwrap().data[0];
        let expected = 5e4 * 2e-5 * (1.1 - 1.0);
        assert!((g - expected).abs() < 1e-9, "grad {g} vs {expected}");
    }

    #[test]
    fn ema_fixture() {
        assert!((ema(1.0, 2.0, 0.9) - 1.1).abs() < 1e-12);
    }

    #[test]
    fn gaussian_fisher_matches_closed_form() {
        // single-mode GMM with fixed sigma: Fisher of the mean is 1/sigma^2
        let sigma = 0.7;
        let mut rng = rng_from(0, "fisher-oracle", &[]);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let mut tape = Tape::new();
            let mu = tape.leaf(Tensor::new(vec![1, 1], vec![0.3]), true);
            let head = crate::policy::GmmHead {
                logits: tape.leaf(Tensor::new(vec![1], vec![0.0]), false),
                means: mu,
                stds: tape.leaf(Tensor::new(vec![1, 1], vec![sigma]), false),
            };
            let params = head.concrete(&tape);
            let a = sample_gmm_action(&params, &mut rng);
            let nll = gmm_nll(&mut tape, &head, &a).unwrap();
            let mut grads = tape.backward(nll).unwrap();
            let g = grads.take(mu).unwrap().data[0];
            acc += g * g;
        }
        let est = acc / n as f64;
        let expected = 1.0 / (sigma * sigma);
        assert!(
            (est - expected).abs() / expected < 0.05,
            "fisher {est} vs {expected}"
        );
    }

    fn tiny_world() -> (PolicySpec, BenchParams) {
        let spec = PolicySpec {
            embed_dim: 16,
            decoder_layers: 1,
            decoder_heads: 2,
            mlp_ratio: 2,
            perception_layers: 1,
            percep_dim: 8,
            state_dim: 3,
            action_dim: 3,
            max_seq_len: 2,
            gmm_modes: 2,
            gmm_min_std: 1e-4,
            dropout: 0.0,
            film_layers: 2,
            fusion_hidden: 8,
            pretrain_adapter_rank: 2,
        };
        let bench = BenchParams {
            embed_dim: spec.embed_dim,
            percep_dim: spec.percep_dim,
            ..BenchParams::default()
        };
        (spec, bench)
    }

    fn tiny_suite(bench: &BenchParams, n_demos: usize) -> (SuiteData, PerceptionMap) {
        let tasks = make_suite(SuiteKind::Goal, 1, 3, bench).unwrap();
        let pmap = PerceptionMap::new(bench, 7);
        let demos = generate_suite_demos(&tasks, &pmap, n_demos, 11).unwrap();
        (SuiteData { tasks, demos }, pmap)
    }

    #[test]
    fn er_split_counts_and_uniformity() {
        let (_, bench) = tiny_world();
        let (suite, _) = tiny_suite(&bench, 5);
        let pool = suite.train_pool();
        let empty = ReplayBuffer::default();
        let mut rng = rng_from(1, "er", &[]);
        assert_eq!(er_sample_batch(&empty, &pool, 10, &mut rng).len(), 10);

        // buffer with two marked "tasks": trajectories tagged by task_id
        let mut buffer = ReplayBuffer::default();
        for task_id in 0..4usize {
            for (_, traj) in pool.iter().take(1) {
                let mut t = (*traj).clone();
                t.task_id = task_id;
                buffer.items.push((vec![0.0; bench.embed_dim], t));
            }
        }
        let mut counts = [0usize; 4];
        let mut from_buffer = 0usize;
        let batches = 10_000;
        for i in 0..batches {
            let mut rng = rng_from(2, "er-uniform", &[i]);
            let batch = er_sample_batch(&buffer, &pool, 10, &mut rng);
            assert_eq!(batch.len(), 10);
            for s in &batch[..5] {
                counts[s.traj.task_id] += 1;
                from_buffer += 1;
            }
        }
        // ceil(10/2)=5 from buffer every batch
        assert_eq!(from_buffer, 5 * batches as usize);
        // chi-square against uniform over 4 buffer trajectories
        let total: usize = counts.iter().sum();
        let expected = total as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|c| (*c as f64 - expected).powi(2) / expected)
            .sum();
        // 3 dof; mean 3, sd sqrt(6) — 3 sigma ≈ 10.3
        assert!(chi2 < 10.35, "chi-square {chi2}");
    }

    #[test]
    fn bc_train_overfits_one_sample() {
        let (mut spec, bench) = tiny_world();
        spec.gmm_modes = 1;
        let (mut suite, _) = tiny_suite(&bench, 5);
        // shrink to a single (s, a) pair
        let td = &mut suite.demos.tasks[0];
        td.train.truncate(1);
        td.train[0].steps.truncate(1);
        td.val = td.train.clone();

        let mut w = PolicyWeights::init(&spec, 0).unwrap();
        let trainable = build_freeze_mask(&w.store, MaskStrategy::Pretrain, None).unwrap();
        let cfg = TrainConfig {
            epochs: 120,
            batch_size: 1,
            warmup_steps: 0,
            ..TrainConfig::desk()
        };
        let curves = bc_train(&mut w, None, &trainable, &suite, &cfg).unwrap();
        for pair in curves.train_nll.windows(2).take(9) {
            assert!(pair[1] < pair[0], "train NLL not decreasing: {:?}", curves.train_nll);
        }
        // far below the untrained starting loss
        assert!(*curves.train_nll.last().unwrap() < curves.train_nll[0] - 2.0);
    }

    #[test]
    fn frozen_params_bit_identical_and_lr0_noop() {
        let (spec, bench) = tiny_world();
        let (suite, _) = tiny_suite(&bench, 4);
        let mut w = PolicyWeights::init(&spec, 1).unwrap();
        let frozen_digest_before = w.frozen_digest();
        let trainable = build_freeze_mask(&w.store, MaskStrategy::Pretrain, None).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            warmup_steps: 0,
            ..TrainConfig::desk()
        };
        bc_train(&mut w, None, &trainable, &suite, &cfg).unwrap();
        assert_eq!(w.frozen_digest(), frozen_digest_before);

        // lr -> 0 leaves everything untouched and the loss flat
        let mut w2 = PolicyWeights::init(&spec, 1).unwrap();
        let digest_before = w2.digest();
        let cfg0 = TrainConfig {
            epochs: 3,
            lr: 0.0,
            warmup_steps: 0,
            ..TrainConfig::desk()
        };
        let cfg0 = TrainConfig {
            eval_every_epochs: 1,
            ..cfg0
        };
        let curves = bc_train(&mut w2, None, &trainable, &suite, &cfg0).unwrap();
        assert_eq!(w2.digest(), digest_before);
        // batches are resampled each step, so the flat-loss check uses the
        // full validation split, which is fixed
        let first = curves.val_nll[0].1;
        assert!(curves.val_nll.iter().all(|(_, v)| (v - first).abs() < 1e-12));
    }

    #[test]
    fn training_is_deterministic() {
        let (spec, bench) = tiny_world();
        let (suite, _) = tiny_suite(&bench, 4);
        let run = || {
            let mut w = PolicyWeights::init(&spec, 2).unwrap();
            let trainable = build_freeze_mask(&w.store, MaskStrategy::Pretrain, None).unwrap();
            let cfg = TrainConfig {
                epochs: 2,
                warmup_steps: 0,
                ..TrainConfig::desk()
            };
            let curves = bc_train(&mut w, None, &trainable, &suite, &cfg).unwrap();
            (w.digest(), curves)
        };
        let (d1, c1) = run();
        let (d2, c2) = run();
        assert_eq!(d1, d2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn fisher_update_first_stage_and_ema() {
        let (spec, bench) = tiny_world();
        let (suite, _) = tiny_suite(&bench, 4);
        let w = PolicyWeights::init(&spec, 3).unwrap();
        let trainable = build_freeze_mask(&w.store, MaskStrategy::Fft, None).unwrap();
        let cfg = TrainConfig {
            fisher_samples: 8,
            ..TrainConfig::desk()
        };
        let s1 = fisher_update(None, &w, &trainable, &suite, &cfg).unwrap();
        assert_eq!(s1.stages, 1);
        assert!(s1.fisher.values().all(|f| f.data.iter().all(|v| *v >= 0.0)));
        // second stage blends with gamma
        let s2 = fisher_update(Some(s1.clone()), &w, &trainable, &suite, &cfg).unwrap();
        assert_eq!(s2.stages, 2);
        for (name, f2) in &s2.fisher {
            let f1 = &s1.fisher[name];
            for (a, b) in f2.data.iter().zip(&f1.data) {
                // same seed → same fresh estimate → EMA(b, b) = b
                assert!((a - b).abs() < 1e-12);
            }
        }
        // anchors snapshot the current weights
        for (name, a) in &s1.anchor {
            assert_eq!(a.data, w.store.value(name).data);
        }
    }
}
