//! Synthetic task benchmark: parameterized 2-D pick-and-place suites with
//! scripted experts, demonstration generation, and rollout evaluation.
//!
//! The workspace is the unit square. An agent moves with a clipped planar
//! velocity, grips the nearest object within reach when the grip channel
//! exceeds its threshold, and releases otherwise; a held object rides at
//! the agent position. A task is an initial-state distribution plus one or
//! two subgoals ("object i inside the region around c"). Suites vary
//! layout, goal, or target object according to their kind.
//!
//! Perception features are a frozen random linear projection of the full
//! scene vector, and instruction embeddings are frozen per-task Gaussian
//! vectors — stand-ins for frozen visual and language encoders.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::Observation;
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    #[error(
        "suite kind {kind:?} supports at most {capacity} distinct tasks, {requested} requested"
    )]
    Capacity {
        kind: SuiteKind,
        capacity: usize,
        requested: usize,
    },
    #[error("expert failed on task {task_id} after {retries} resamples (seed {seed})")]
    ExpertFailed {
        task_id: usize,
        retries: usize,
        seed: u64,
    },
    #[error("task {task_id} rejected: expert succeeded on only {ok}/{total} probe states")]
    TaskRejected { task_id: usize, ok: usize, total: usize },
}

type Result<T> = std::result::Result<T, BenchError>;

/// Physics and encoding constants; all config-exposed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchParams {
    pub n_obj: usize,
    pub grip_radius: f64,
    pub goal_radius: f64,
    pub max_speed: f64,
    pub horizon: usize,
    pub grip_threshold: f64,
    /// Width of the frozen instruction embedding (the policy embed dim).
    pub embed_dim: usize,
    /// Width of the frozen perception projection output.
    pub percep_dim: usize,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            n_obj: 4,
            grip_radius: 0.05,
            goal_radius: 0.08,
            max_speed: 0.08,
            horizon: 60,
            grip_threshold: 0.5,
            embed_dim: 64,
            percep_dim: 16,
        }
    }
}

impl BenchParams {
    pub fn scene_dim(&self) -> usize {
        2 + 1 + 2 * self.n_obj
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_obj == 0 {
            return Err(BenchError::Config("n_obj must be >= 1".into()));
        }
        for (name, v) in [
            ("grip_radius", self.grip_radius),
            ("goal_radius", self.goal_radius),
            ("max_speed", self.max_speed),
        ] {
            if !(v > 0.0 && v < 0.5) {
                return Err(BenchError::Config(format!("{name} must be in (0, 0.5)")));
            }
        }
        if self.horizon == 0 || self.embed_dim == 0 || self.percep_dim == 0 {
            return Err(BenchError::Config(
                "horizon, embed_dim, percep_dim must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Axis-aligned placement box `[min, max]` per coordinate.
pub type PlacementBox = [[f64; 2]; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitDist {
    pub agent_box: PlacementBox,
    pub object_boxes: Vec<PlacementBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgoal {
    pub object: usize,
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub suite_id: String,
    pub task_id: usize,
    pub init: InitDist,
    /// Satisfied in order by the expert; success requires all at once.
    pub goals: Vec<Subgoal>,
    /// Frozen per-task vector simulating a language-encoder output.
    pub instruction_emb: Vec<f64>,
    pub horizon: usize,
    pub params: BenchParams,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.goals.is_empty() {
            return Err(BenchError::Config("task needs at least one subgoal".into()));
        }
        for g in &self.goals {
            if g.object >= self.params.n_obj {
                return Err(BenchError::Config(format!(
                    "subgoal object {} out of range",
                    g.object
                )));
            }
            for c in g.center {
                if c - g.radius < 0.0 || c + g.radius > 1.0 {
                    return Err(BenchError::Config(format!(
                        "goal region at {:?} leaves the workspace",
                        g.center
                    )));
                }
            }
        }
        if self.instruction_emb.len() != self.params.embed_dim {
            return Err(BenchError::Config("instruction embedding width mismatch".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub agent: [f64; 2],
    /// `None` = open gripper, `Some(i)` = holding object i.
    pub holding: Option<usize>,
    pub objects: Vec<[f64; 2]>,
    pub step: usize,
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Closest object within grip range; lowest index on exact ties.
fn nearest_in_reach(state: &SceneState, params: &BenchParams) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in state.objects.iter().enumerate() {
        let d = dist(state.agent, *o);
        if d <= params.grip_radius && best.map(|(_, bd)| d < bd).unwrap_or(true) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Pure transition: clip the velocity to `max_speed`, move (a held object
/// rides along), clamp to the workspace, then apply the grip channel —
/// above threshold grabs the nearest object within `grip_radius` (lowest
/// index on ties, snapping it to the agent), at or below releases.
pub fn step(state: &SceneState, action: &[f64], params: &BenchParams) -> SceneState {
    let mut s = state.clone();
    let (mut dx, mut dy) = (action[0], action[1]);
    let norm = (dx * dx + dy * dy).sqrt();
    if norm > params.max_speed {
        let k = params.max_speed / norm;
        dx *= k;
        dy *= k;
    }
    s.agent = [clamp01(s.agent[0] + dx), clamp01(s.agent[1] + dy)];
    if let Some(i) = s.holding {
        s.objects[i] = s.agent;
    }
    let grip = action.get(2).copied().unwrap_or(0.0);
    if grip > params.grip_threshold {
        if s.holding.is_none() {
            if let Some(i) = nearest_in_reach(&s, params) {
                s.holding = Some(i);
                s.objects[i] = s.agent;
            }
        }
    } else {
        s.holding = None;
    }
    s.step += 1;
    s
}

/// All subgoals hold simultaneously: each target object inside its region
/// and not currently held.
pub fn success(task: &TaskSpec, state: &SceneState) -> bool {
    task.goals.iter().all(|g| {
        state.holding != Some(g.object) && dist(state.objects[g.object], g.center) <= g.radius
    })
}

pub fn sample_initial(task: &TaskSpec, seed: u64) -> SceneState {
    let mut rng = rng_from(seed, "init", &[]);
    let in_box = |rng: &mut ChaCha12Rng, b: &PlacementBox| {
        [
            b[0][0] + rng.gen::<f64>() * (b[1][0] - b[0][0]),
            b[0][1] + rng.gen::<f64>() * (b[1][1] - b[0][1]),
        ]
    };
    let agent = in_box(&mut rng, &task.init.agent_box);
    let objects = task
        .init
        .object_boxes
        .iter()
        .map(|b| in_box(&mut rng, b))
        .collect();
    SceneState {
        agent,
        holding: None,
        objects,
        step: 0,
    }
}

// ── scripted expert ──────────────────────────────────────────────────

/// Proportional controller: for the first unsatisfied subgoal, approach
/// the target object, grip within reach, carry it toward the goal center,
/// and release deep inside the region. Deterministic.
pub fn expert_action(state: &SceneState, task: &TaskSpec) -> Vec<f64> {
    let p = &task.params;
    let toward = |from: [f64; 2], to: [f64; 2]| {
        let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
        let norm = (dx * dx + dy * dy).sqrt();
        if norm <= p.max_speed || norm == 0.0 {
            (dx, dy)
        } else {
            (dx * p.max_speed / norm, dy * p.max_speed / norm)
        }
    };
    for g in &task.goals {
        let satisfied =
            state.holding != Some(g.object) && dist(state.objects[g.object], g.center) <= g.radius;
        if satisfied {
            continue;
        }
        return if state.holding == Some(g.object) {
            if dist(state.agent, g.center) <= 0.5 * g.radius {
                vec![0.0, 0.0, 0.0] // release
            } else {
                let (dx, dy) = toward(state.agent, g.center);
                vec![dx, dy, 1.0]
            }
        } else if state.holding.is_some() {
            // holding the wrong object: drop it
            vec![0.0, 0.0, 0.0]
        } else if dist(state.agent, state.objects[g.object]) <= p.grip_radius
            && nearest_in_reach(state, p) == Some(g.object)
        {
            vec![0.0, 0.0, 1.0] // grip in place
        } else {
            // close in until the target is the nearest reachable object,
            // so a grip never picks up a bystander
            let (dx, dy) = toward(state.agent, state.objects[g.object]);
            vec![dx, dy, 0.0]
        };
    }
    vec![0.0, 0.0, 0.0]
}

// ── suite construction ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    Pretrain,
    Spatial,
    Goal,
    Object,
    LongHorizon,
}

impl SuiteKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrain" => Some(SuiteKind::Pretrain),
            "spatial" => Some(SuiteKind::Spatial),
            "goal" => Some(SuiteKind::Goal),
            "object" => Some(SuiteKind::Object),
            "long_horizon" => Some(SuiteKind::LongHorizon),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SuiteKind::Pretrain => "pretrain",
            SuiteKind::Spatial => "spatial",
            SuiteKind::Goal => "goal",
            SuiteKind::Object => "object",
            SuiteKind::LongHorizon => "long_horizon",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            SuiteKind::Pretrain => 0,
            SuiteKind::Spatial => 1,
            SuiteKind::Goal => 2,
            SuiteKind::Object => 3,
            SuiteKind::LongHorizon => 4,
        }
    }
}

const BOX_HALF: f64 = 0.06;
/// Goal centers stay this far from the walls so the region fits inside.
const GOAL_MARGIN: f64 = 0.15;

fn small_box(rng: &mut ChaCha12Rng) -> PlacementBox {
    let cx = 0.15 + rng.gen::<f64>() * 0.7;
    let cy = 0.15 + rng.gen::<f64>() * 0.7;
    [
        [cx - BOX_HALF, cy - BOX_HALF],
        [cx + BOX_HALF, cy + BOX_HALF],
    ]
}

fn goal_center(rng: &mut ChaCha12Rng) -> [f64; 2] {
    [
        GOAL_MARGIN + rng.gen::<f64>() * (1.0 - 2.0 * GOAL_MARGIN),
        GOAL_MARGIN + rng.gen::<f64>() * (1.0 - 2.0 * GOAL_MARGIN),
    ]
}

fn instruction(params: &BenchParams, seed: u64, kind: SuiteKind, task_id: usize) -> Vec<f64> {
    let mut rng = rng_from(seed, "instruction", &[kind.tag(), task_id as u64]);
    let dist = Normal::new(0.0, 1.0).unwrap();
    (0..params.embed_dim).map(|_| dist.sample(&mut rng)).collect()
}

/// True when the goal region around `center` cannot contain any point of
/// the placement box — the point-to-box distance exceeds `radius`.
fn clear_of_box(center: [f64; 2], b: &PlacementBox, radius: f64) -> bool {
    let dx = (b[0][0] - center[0]).max(center[0] - b[1][0]).max(0.0);
    let dy = (b[0][1] - center[1]).max(center[1] - b[1][1]).max(0.0);
    dx * dx + dy * dy > radius * radius
}

/// Rejection-samples a goal center at least `min_sep` away from `others`
/// whose region stays clear of every box in `clear`. Clearance guarantees
/// no sampled initial state is already solved: a trivially solved init is
/// useless as a demonstration, and a goal region swallowing the target's
/// whole placement box would starve demo generation outright.
fn sample_goal_center(
    rng: &mut ChaCha12Rng,
    others: &[[f64; 2]],
    min_sep: f64,
    clear: &[PlacementBox],
    radius: f64,
) -> Option<[f64; 2]> {
    for _ in 0..1000 {
        let c = goal_center(rng);
        if others.iter().all(|o| dist(*o, c) >= min_sep)
            && clear.iter().all(|b| clear_of_box(c, b, radius))
        {
            return Some(c);
        }
    }
    None
}

/// Builds a task suite. Deterministic in `(kind, n_tasks, seed)`; every
/// goal region is placed clear of its target's placement box (so no task
/// starts solved), and every generated task is probed with the scripted
/// expert and rejected if the expert cannot solve it from random initial
/// states.
pub fn make_suite(
    kind: SuiteKind,
    n_tasks: usize,
    seed: u64,
    params: &BenchParams,
) -> Result<Vec<TaskSpec>> {
    params.validate()?;
    if n_tasks == 0 {
        return Err(BenchError::Config("n_tasks must be >= 1".into()));
    }
    if kind == SuiteKind::Object && n_tasks > params.n_obj {
        return Err(BenchError::Capacity {
            kind,
            capacity: params.n_obj,
            requested: n_tasks,
        });
    }
    if kind == SuiteKind::LongHorizon && params.n_obj < 2 {
        return Err(BenchError::Config("long_horizon needs at least 2 objects".into()));
    }
    let mut rng = rng_from(seed, "suite", &[kind.tag(), n_tasks as u64]);
    let suite_id = format!("{}-{seed}", kind.as_str());
    let agent_box: PlacementBox = [[0.05, 0.05], [0.95, 0.95]];
    let fresh_layout = |rng: &mut ChaCha12Rng| InitDist {
        agent_box,
        object_boxes: (0..params.n_obj).map(|_| small_box(rng)).collect(),
    };
    let no_room =
        || BenchError::Config("no goal placement clear of the object boxes fits the workspace".into());

    let mut tasks = Vec::with_capacity(n_tasks);
    match kind {
        SuiteKind::Pretrain => {
            for t in 0..n_tasks {
                let init = fresh_layout(&mut rng);
                let target = rng.gen_range(0..params.n_obj);
                let center = sample_goal_center(
                    &mut rng,
                    &[],
                    0.0,
                    std::slice::from_ref(&init.object_boxes[target]),
                    params.goal_radius,
                )
                .ok_or_else(no_room)?;
                tasks.push(TaskSpec {
                    suite_id: suite_id.clone(),
                    task_id: t,
                    init,
                    goals: vec![Subgoal {
                        object: target,
                        center,
                        radius: params.goal_radius,
                    }],
                    instruction_emb: instruction(params, seed, kind, t),
                    horizon: params.horizon,
                    params: params.clone(),
                });
            }
        }
        SuiteKind::Spatial => {
            // shared target and goal, layout permuted per task
            let target = rng.gen_range(0..params.n_obj);
            let layouts: Vec<InitDist> = (0..n_tasks).map(|_| fresh_layout(&mut rng)).collect();
            let target_boxes: Vec<PlacementBox> =
                layouts.iter().map(|l| l.object_boxes[target]).collect();
            let center =
                sample_goal_center(&mut rng, &[], 0.0, &target_boxes, params.goal_radius)
                    .ok_or_else(no_room)?;
            for (t, init) in layouts.into_iter().enumerate() {
                tasks.push(TaskSpec {
                    suite_id: suite_id.clone(),
                    task_id: t,
                    init,
                    goals: vec![Subgoal {
                        object: target,
                        center,
                        radius: params.goal_radius,
                    }],
                    instruction_emb: instruction(params, seed, kind, t),
                    horizon: params.horizon,
                    params: params.clone(),
                });
            }
        }
        SuiteKind::Goal => {
            let layout = fresh_layout(&mut rng);
            let target = rng.gen_range(0..params.n_obj);
            let target_box = [layout.object_boxes[target]];
            let mut centers: Vec<[f64; 2]> = Vec::with_capacity(n_tasks);
            while centers.len() < n_tasks {
                let c = sample_goal_center(
                    &mut rng,
                    &centers,
                    2.0 * params.goal_radius,
                    &target_box,
                    params.goal_radius,
                )
                .ok_or(BenchError::Capacity {
                    kind,
                    capacity: centers.len(),
                    requested: n_tasks,
                })?;
                centers.push(c);
            }
            for (t, center) in centers.into_iter().enumerate() {
                tasks.push(TaskSpec {
                    suite_id: suite_id.clone(),
                    task_id: t,
                    init: layout.clone(),
                    goals: vec![Subgoal {
                        object: target,
                        center,
                        radius: params.goal_radius,
                    }],
                    instruction_emb: instruction(params, seed, kind, t),
                    horizon: params.horizon,
                    params: params.clone(),
                });
            }
        }
        SuiteKind::Object => {
            let layout = fresh_layout(&mut rng);
            let center = sample_goal_center(
                &mut rng,
                &[],
                0.0,
                &layout.object_boxes[..n_tasks],
                params.goal_radius,
            )
            .ok_or_else(no_room)?;
            for t in 0..n_tasks {
                tasks.push(TaskSpec {
                    suite_id: suite_id.clone(),
                    task_id: t,
                    init: layout.clone(),
                    goals: vec![Subgoal {
                        object: t,
                        center,
                        radius: params.goal_radius,
                    }],
                    instruction_emb: instruction(params, seed, kind, t),
                    horizon: params.horizon,
                    params: params.clone(),
                });
            }
        }
        SuiteKind::LongHorizon => {
            for t in 0..n_tasks {
                let a = rng.gen_range(0..params.n_obj);
                let b = (a + 1 + rng.gen_range(0..params.n_obj - 1)) % params.n_obj;
                let init = fresh_layout(&mut rng);
                let c0 = sample_goal_center(
                    &mut rng,
                    &[],
                    0.0,
                    std::slice::from_ref(&init.object_boxes[a]),
                    params.goal_radius,
                )
                .ok_or_else(no_room)?;
                let c1 = sample_goal_center(
                    &mut rng,
                    &[c0],
                    2.0 * params.goal_radius,
                    std::slice::from_ref(&init.object_boxes[b]),
                    params.goal_radius,
                )
                .ok_or(BenchError::Capacity {
                    kind,
                    capacity: 1,
                    requested: 2,
                })?;
                tasks.push(TaskSpec {
                    suite_id: suite_id.clone(),
                    task_id: t,
                    init,
                    goals: vec![
                        Subgoal {
                            object: a,
                            center: c0,
                            radius: params.goal_radius,
                        },
                        Subgoal {
                            object: b,
                            center: c1,
                            radius: params.goal_radius,
                        },
                    ],
                    instruction_emb: instruction(params, seed, kind, t),
                    // two legs need more steps
                    horizon: 2 * params.horizon,
                    params: params.clone(),
                });
            }
        }
    }

    for task in &tasks {
        task.validate()?;
        probe_expert(task, seed, 50)?;
    }
    Ok(tasks)
}

/// Rejects a task unless the expert solves it from `n` random probes.
fn probe_expert(task: &TaskSpec, seed: u64, n: usize) -> Result<()> {
    let mut ok = 0;
    for i in 0..n {
        let init_seed = derive_seed(seed, "probe", &[task.task_id as u64, i as u64]);
        let mut state = sample_initial(task, init_seed);
        if success(task, &state) {
            // a trivially solved init yields no demonstration; counting it
            // as a failure rejects tasks that would starve demo generation
            continue;
        }
        for _ in 0..task.horizon {
            if success(task, &state) {
                break;
            }
            let a = expert_action(&state, task);
            state = step(&state, &a, &task.params);
        }
        if success(task, &state) {
            ok += 1;
        }
    }
    if ok < n {
        return Err(BenchError::TaskRejected {
            task_id: task.task_id,
            ok,
            total: n,
        });
    }
    Ok(())
}

// ── observations ─────────────────────────────────────────────────────

/// Frozen linear projection of the full scene vector — the
/// perception-encoder input stand-in. Fixed per experiment seed.
///
/// The leading `scene_dim` feature columns pass the scene through
/// unchanged (a competent visual encoder resolves object coordinates);
/// any extra columns are a fixed random mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptionMap {
    /// `[scene_dim, percep_dim]`.
    pub proj: Tensor,
}

impl PerceptionMap {
    pub fn new(params: &BenchParams, seed: u64) -> Self {
        let (rows, cols) = (params.scene_dim(), params.percep_dim);
        let mut rng = rng_from(seed, "percep-proj", &[]);
        let dist = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).unwrap();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = if j < rows.min(cols) {
                    if i == j {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    dist.sample(&mut rng)
                };
            }
        }
        PerceptionMap { proj: Tensor::new(vec![rows, cols], data) }
    }

    pub fn observe(&self, state: &SceneState) -> Observation {
        let mut scene = Vec::with_capacity(self.proj.shape[0]);
        scene.push(state.agent[0]);
        scene.push(state.agent[1]);
        scene.push(if state.holding.is_some() { 1.0 } else { 0.0 });
        for o in &state.objects {
            scene.push(o[0]);
            scene.push(o[1]);
        }
        let cols = self.proj.shape[1];
        let mut perception = vec![0.0; cols];
        for (i, s) in scene.iter().enumerate() {
            for j in 0..cols {
                perception[j] += s * self.proj.data[i * cols + j];
            }
        }
        Observation {
            perception,
            state: vec![
                state.agent[0],
                state.agent[1],
                if state.holding.is_some() { 1.0 } else { 0.0 },
            ],
        }
    }
}

// ── seed partitioning ────────────────────────────────────────────────

/// Demonstration episodes draw from the even half of the seed space…
pub fn demo_episode_seed(root: u64, task_id: usize, episode: usize) -> u64 {
    derive_seed(root, "demo-episode", &[task_id as u64, episode as u64]) & !1
}

/// …and evaluation episodes from the odd half, so initial states can
/// never collide bit-exactly with training demonstrations.
pub fn eval_episode_seed(root: u64, task_id: usize, episode: usize) -> u64 {
    derive_seed(root, "eval-episode", &[task_id as u64, episode as u64]) | 1
}

// ── demonstrations ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: usize,
    pub init_seed: u64,
    pub steps: Vec<(Observation, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDemos {
    pub task_id: usize,
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    pub suite_id: String,
    pub tasks: Vec<TaskDemos>,
}

const DEMO_RETRY_CAP: usize = 20;

/// Rolls out one expert episode; `None` if the horizon expires unsolved.
fn expert_episode(task: &TaskSpec, pmap: &PerceptionMap, init_seed: u64) -> Option<Trajectory> {
    let mut state = sample_initial(task, init_seed);
    if success(task, &state) {
        // trivially solved initial state: useless as a demonstration
        return None;
    }
    let mut steps = Vec::new();
    for _ in 0..task.horizon {
        if success(task, &state) {
            return Some(Trajectory {
                task_id: task.task_id,
                init_seed,
                steps,
            });
        }
        let action = expert_action(&state, task);
        steps.push((pmap.observe(&state), action.clone()));
        state = step(&state, &action, &task.params);
    }
    success(task, &state).then(|| Trajectory {
        task_id: task.task_id,
        init_seed,
        steps,
    })
}

/// `n` successful expert rollouts from i.i.d. initial states, split 4:1
/// into train/val by index. Failed initial states are resampled up to a
/// cap, then reported as a hard error.
pub fn generate_demos(
    task: &TaskSpec,
    pmap: &PerceptionMap,
    n: usize,
    root_seed: u64,
) -> Result<TaskDemos> {
    let mut trajectories = Vec::with_capacity(n);
    for episode in 0..n {
        let mut traj = None;
        for retry in 0..=DEMO_RETRY_CAP {
            let seed = demo_episode_seed(root_seed, task.task_id, episode + retry * 100_000);
            if let Some(t) = expert_episode(task, pmap, seed) {
                traj = Some(t);
                break;
            }
        }
        match traj {
            Some(t) => trajectories.push(t),
            None => {
                return Err(BenchError::ExpertFailed {
                    task_id: task.task_id,
                    retries: DEMO_RETRY_CAP,
                    seed: demo_episode_seed(root_seed, task.task_id, episode),
                })
            }
        }
    }
    let n_train = n * 4 / 5;
    let val = trajectories.split_off(n_train);
    Ok(TaskDemos {
        task_id: task.task_id,
        train: trajectories,
        val,
    })
}

pub fn generate_suite_demos(
    tasks: &[TaskSpec],
    pmap: &PerceptionMap,
    n_per_task: usize,
    root_seed: u64,
) -> Result<TrajectoryDataset> {
    let suite_id = tasks
        .first()
        .map(|t| t.suite_id.clone())
        .unwrap_or_default();
    let tasks = tasks
        .iter()
        .map(|t| generate_demos(t, pmap, n_per_task, root_seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryDataset { suite_id, tasks })
}

// ── evaluation ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub success_rate: f64,
    pub episodes: usize,
    pub successes: usize,
    /// Episodes aborted (and failed) because the policy emitted a
    /// non-finite action.
    pub nonfinite_episodes: usize,
}

/// Closed-loop evaluation over `n_episodes` unseen initial states. The
/// controller sees the trailing `history_len` observations (and, for
/// oracle baselines, the raw state); non-finite actions fail the episode.
pub fn rollout_eval(
    task: &TaskSpec,
    pmap: &PerceptionMap,
    n_episodes: usize,
    history_len: usize,
    root_seed: u64,
    mut act: impl FnMut(&[Observation], &SceneState, &TaskSpec) -> Vec<f64>,
) -> EvalResult {
    let mut successes = 0;
    let mut nonfinite = 0;
    for episode in 0..n_episodes {
        let seed = eval_episode_seed(root_seed, task.task_id, episode);
        let mut state = sample_initial(task, seed);
        let mut history: Vec<Observation> = Vec::new();
        let mut aborted = false;
        for _ in 0..task.horizon {
            if success(task, &state) {
                break;
            }
            history.push(pmap.observe(&state));
            let start = history.len().saturating_sub(history_len.max(1));
            let action = act(&history[start..], &state, task);
            if !action.iter().all(|v| v.is_finite()) {
                nonfinite += 1;
                aborted = true;
                break;
            }
            state = step(&state, &action, &task.params);
        }
        if !aborted && success(task, &state) {
            successes += 1;
        }
    }
    EvalResult {
        success_rate: successes as f64 / n_episodes.max(1) as f64,
        episodes: n_episodes,
        successes,
        nonfinite_episodes: nonfinite,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> BenchParams {
        BenchParams {
            embed_dim: 8,
            ..BenchParams::default()
        }
    }

    #[test]
    fn make_suite_is_deterministic() {
        let p = params();
        for kind in [
            SuiteKind::Pretrain,
            SuiteKind::Spatial,
            SuiteKind::Goal,
            SuiteKind::Object,
            SuiteKind::LongHorizon,
        ] {
            let a = make_suite(kind, 3, 0, &p).unwrap();
            let b = make_suite(kind, 3, 0, &p).unwrap();
            assert_eq!(a, b, "{kind:?} not deterministic");
            let c = make_suite(kind, 3, 1, &p).unwrap();
            assert_ne!(a, c, "{kind:?} ignores seed");
        }
    }

    #[test]
    fn object_suite_shares_layout_and_goal() {
        let p = params();
        let tasks = make_suite(SuiteKind::Object, 4, 0, &p).unwrap();
        for t in &tasks[1..] {
            assert_eq!(t.init, tasks[0].init);
            assert_eq!(t.goals[0].center, tasks[0].goals[0].center);
        }
        let targets: Vec<usize> = tasks.iter().map(|t| t.goals[0].object).collect();
        assert_eq!(targets, vec![0, 1, 2, 3]);
        assert!(matches!(
            make_suite(SuiteKind::Object, 5, 0, &p),
            Err(BenchError::Capacity { capacity: 4, .. })
        ));
    }

    #[test]
    fn goal_suite_centers_are_separated() {
        let p = params();
        let tasks = make_suite(SuiteKind::Goal, 6, 3, &p).unwrap();
        for (i, a) in tasks.iter().enumerate() {
            assert_eq!(a.init, tasks[0].init);
            for b in &tasks[i + 1..] {
                let d = dist(a.goals[0].center, b.goals[0].center);
                assert!(d >= 2.0 * p.goal_radius, "centers {d} apart");
            }
        }
    }

    #[test]
    fn expert_solves_from_many_random_states() {
        let p = params();
        for kind in [SuiteKind::Goal, SuiteKind::Object, SuiteKind::LongHorizon] {
            let tasks = make_suite(kind, 2, 7, &p).unwrap();
            for task in &tasks {
                let mut ok = 0;
                for i in 0..1000u64 {
                    let seed = derive_seed(99, "oracle", &[task.task_id as u64, i]);
                    let mut state = sample_initial(task, seed);
                    for _ in 0..task.horizon {
                        if success(task, &state) {
                            break;
                        }
                        let a = expert_action(&state, task);
                        state = step(&state, &a, &task.params);
                        if let Some(h) = state.holding {
                            assert_eq!(state.objects[h], state.agent, "held object detached");
                        }
                    }
                    if success(task, &state) {
                        ok += 1;
                    }
                }
                assert_eq!(ok, 1000, "{kind:?} task {} solved {ok}/1000", task.task_id);
            }
        }
    }

    #[test]
    fn goal_regions_clear_of_target_boxes() {
        // no goal region may overlap its target's placement box, or demo
        // generation starves on trivially solved initial states
        let p = params();
        for seed in 0..20u64 {
            for kind in [
                SuiteKind::Pretrain,
                SuiteKind::Spatial,
                SuiteKind::Goal,
                SuiteKind::Object,
                SuiteKind::LongHorizon,
            ] {
                for task in make_suite(kind, 3, seed, &p).unwrap() {
                    for g in &task.goals {
                        assert!(
                            clear_of_box(g.center, &task.init.object_boxes[g.object], g.radius),
                            "{kind:?} seed {seed} task {}: goal overlaps target box",
                            task.task_id
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn expert_phase_logic() {
        let p = params();
        let tasks = make_suite(SuiteKind::Goal, 1, 5, &p).unwrap();
        let task = &tasks[0];
        let target = task.goals[0].object;
        let mut state = sample_initial(task, 2);
        // at the object, not holding: grip in place
        state.agent = state.objects[target];
        let a = expert_action(&state, task);
        assert!(a[2] > p.grip_threshold);
        assert!(a[0].abs() < 1e-12 && a[1].abs() < 1e-12);
        // holding inside the goal region: release
        state.holding = Some(target);
        state.agent = task.goals[0].center;
        state.objects[target] = state.agent;
        let a = expert_action(&state, task);
        assert!(a[2] <= p.grip_threshold);
        let next = step(&state, &a, &p);
        assert!(success(task, &next));
    }

    #[test]
    fn demos_split_succeed_and_replay_bit_exact() {
        let p = params();
        let tasks = make_suite(SuiteKind::Object, 2, 1, &p).unwrap();
        let pmap = PerceptionMap::new(&p, 11);
        let demos = generate_demos(&tasks[0], &pmap, 50, 17).unwrap();
        assert_eq!(demos.train.len(), 40);
        assert_eq!(demos.val.len(), 10);
        let again = generate_demos(&tasks[0], &pmap, 50, 17).unwrap();
        assert_eq!(
            serde_json::to_vec(&demos).unwrap(),
            serde_json::to_vec(&again).unwrap()
        );
        for traj in demos.train.iter().chain(&demos.val) {
            // replaying the stored actions must land in success exactly
            let mut state = sample_initial(&tasks[0], traj.init_seed);
            for (obs, action) in &traj.steps {
                assert_eq!(*obs, pmap.observe(&state), "stored obs drifted");
                state = step(&state, action, &p);
            }
            assert!(success(&tasks[0], &state));
        }
    }

    #[test]
    fn demo_and_eval_initial_states_never_collide() {
        let p = params();
        let tasks = make_suite(SuiteKind::Goal, 2, 2, &p).unwrap();
        let root = 5;
        for task in &tasks {
            let demo_inits: Vec<SceneState> = (0..50)
                .map(|i| sample_initial(task, demo_episode_seed(root, task.task_id, i)))
                .collect();
            for e in 0..50 {
                let ev = sample_initial(task, eval_episode_seed(root, task.task_id, e));
                assert!(
                    demo_inits.iter().all(|d| *d != ev),
                    "eval init collided with a demo init"
                );
            }
        }
    }

    #[test]
    fn rollout_eval_expert_oracle_and_random_floor() {
        let p = params();
        let tasks = make_suite(SuiteKind::Goal, 2, 4, &p).unwrap();
        let pmap = PerceptionMap::new(&p, 3);
        for task in &tasks {
            let res = rollout_eval(task, &pmap, 100, 4, 9, |_, state, task| {
                expert_action(state, task)
            });
            assert_eq!(res.success_rate, 1.0);
            let mut rng = rng_from(8, "random-policy", &[task.task_id as u64]);
            let res = rollout_eval(task, &pmap, 100, 4, 9, |_, _, _| {
                vec![
                    rng.gen::<f64>() * 0.16 - 0.08,
                    rng.gen::<f64>() * 0.16 - 0.08,
                    rng.gen::<f64>(),
                ]
            });
            assert!(
                res.success_rate < 0.2,
                "random policy scored {}",
                res.success_rate
            );
        }
    }

    #[test]
    fn nonfinite_actions_fail_episodes() {
        let p = params();
        let tasks = make_suite(SuiteKind::Goal, 1, 4, &p).unwrap();
        let pmap = PerceptionMap::new(&p, 3);
        let res = rollout_eval(&tasks[0], &pmap, 10, 4, 9, |_, _, _| {
            vec![f64::NAN, 0.0, 0.0]
        });
        assert_eq!(res.success_rate, 0.0);
        assert_eq!(res.nonfinite_episodes, 10);
    }

    #[test]
    fn goal_regions_inside_workspace() {
        let p = params();
        for kind in [SuiteKind::Pretrain, SuiteKind::Goal, SuiteKind::LongHorizon] {
            for task in make_suite(kind, 3, 12, &p).unwrap() {
                task.validate().unwrap();
            }
        }
    }
}
