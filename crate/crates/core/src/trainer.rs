//! The training loop: Phase-1 routing rollouts, Phase-2 tier objectives,
//! token mini-batched Adam updates and periodic evaluation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{ContextMode, Split, Stage, Task, World};
use crate::error::{Error, Result};
use crate::losses::{
    composite_advantage, distill_tokens, evaluate_tokens, group_advantage, shaped_reward,
    surrogate_tokens, utilization_advantage, utilization_gain, Breakdown, ClipConfig, Component,
    ForcedTrajectory, LossReport, Token,
};
use crate::policy::{Arch, PolicyParams, RolloutSnapshot, DEFAULT_HIDDEN};
use crate::prior::{instruction_prior, PriorConfig};
use crate::rollout::{
    golden_filter, rollout_episode, rollout_group, stream, Behavior, SnapshotBehavior, TaskGroup,
};
use crate::router::{route, RouterState, Tier};
use crate::skillbank::Pool;

/// Training method: the tiered algorithm (and its ablations) or a plain
/// GRPO baseline trained and evaluated in a single context mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    InternalizeOnly,
    UtilizeOnly,
    GrpoNoSkill,
    GrpoFullExtern,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Full,
        Method::InternalizeOnly,
        Method::UtilizeOnly,
        Method::GrpoNoSkill,
        Method::GrpoFullExtern,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::InternalizeOnly => "internalize_only",
            Method::UtilizeOnly => "utilize_only",
            Method::GrpoNoSkill => "grpo_no_skill",
            Method::GrpoFullExtern => "grpo_full_extern",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown method {s:?}")))
    }

    pub fn is_tiered(self) -> bool {
        matches!(
            self,
            Method::Full | Method::InternalizeOnly | Method::UtilizeOnly
        )
    }

    /// Context used for routing rollouts (and GRPO baselines' training).
    pub fn rollout_mode(self) -> ContextMode {
        match self {
            Method::GrpoNoSkill => ContextMode::NoSkill,
            Method::GrpoFullExtern => ContextMode::FullExtern,
            _ => ContextMode::Standard,
        }
    }

    /// Inference protocol matching how the method was trained.
    pub fn eval_mode(self) -> ContextMode {
        self.rollout_mode()
    }

    fn distills(self) -> bool {
        matches!(self, Method::Full | Method::InternalizeOnly)
    }

    fn probes(self) -> bool {
        matches!(self, Method::Full | Method::UtilizeOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub steps: usize,
    pub batch_size: usize,
    pub group_size: usize,
    pub window: usize,
    pub retrieval_k: usize,
    pub learning_rate: f64,
    pub clip: ClipConfig,
    /// Token mini-batch size for the update epochs.
    pub minibatch_tokens: usize,
    pub hidden: usize,
    pub train_temperature: f64,
    pub eval_temperature: f64,
    pub eval_every: usize,
    /// Episodes per domain at each scheduled evaluation.
    pub eval_episodes: usize,
    /// Episodes per domain for the evaluation after the last step.
    pub final_eval_episodes: usize,
    pub prior: PriorConfig,
    /// Replaces the world's horizon when set.
    pub horizon: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Full,
            steps: 200,
            batch_size: 16,
            group_size: 8,
            window: 5,
            retrieval_k: 3,
            learning_rate: 3e-3,
            clip: ClipConfig::default(),
            minibatch_tokens: 128,
            hidden: DEFAULT_HIDDEN,
            train_temperature: 1.0,
            eval_temperature: 0.4,
            eval_every: 5,
            eval_episodes: 25,
            final_eval_episodes: 100,
            prior: PriorConfig::default(),
            horizon: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("window", self.window),
            ("retrieval_k", self.retrieval_k),
            ("minibatch_tokens", self.minibatch_tokens),
            ("eval_every", self.eval_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.train_temperature > 0.0 && self.eval_temperature > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        self.clip.validate()
    }
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One update. A non-finite gradient leaves both the parameters and the
    /// optimizer state untouched.
    pub fn update(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != theta.len() {
            return Err(Error::Shape {
                expected: theta.len(),
                got: grad.len(),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            theta[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub split: Split,
    pub mode: ContextMode,
    pub episodes_per_domain: usize,
    pub per_domain: Vec<(String, f64)>,
    pub average: f64,
    /// Pools that retrieval touched during the evaluation.
    pub pools: Vec<Pool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierDecision {
    pub task: String,
    pub pass_rate: f64,
    pub tier: Tier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub n_hard: usize,
    pub n_medium: usize,
    pub n_easy: usize,
    pub eta: f64,
    pub u_anchor: f64,
    pub train_pass: f64,
    pub loss: LossReport,
    /// Hard tasks whose privileged rollouts produced no golden trajectory.
    pub hard_without_golden: usize,
    /// False when no token carried a gradient and no update was applied.
    pub updated: bool,
    pub decisions: Vec<TierDecision>,
    pub evals: Vec<EvalResult>,
}

impl StepRecord {
    pub fn tier_fractions(&self) -> (f64, f64, f64) {
        let n = (self.n_hard + self.n_medium + self.n_easy) as f64;
        (
            self.n_hard as f64 / n,
            self.n_medium as f64 / n,
            self.n_easy as f64 / n,
        )
    }
}

/// Resumable training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: usize,
    pub theta: Vec<f64>,
    pub adam: Adam,
    pub router: RouterState,
}

// Stream tags for the deterministic rng derivation.
const TAG_BATCH: u64 = 1;
const TAG_PHASE1: u64 = 2;
const TAG_PRIVILEGED: u64 = 3;
const TAG_PROBE: u64 = 4;
const TAG_SHUFFLE: u64 = 5;
const TAG_EVAL: u64 = 6;
const TAG_INIT: u64 = 7;
const TAG_PRIOR: u64 = 8;

/// One task's contribution to a step, before the update.
struct TaskPlan {
    tier: Tier,
    phase1: TaskGroup,
    golden: Option<Vec<ForcedTrajectory>>,
    p_none: Option<f64>,
}

pub struct Trainer<'w> {
    world: &'w World,
    config: TrainConfig,
    params: PolicyParams,
    adam: Adam,
    router: RouterState,
    step: usize,
}

impl<'w> Trainer<'w> {
    /// Fresh parameters, optionally warm-started by the instruction prior.
    pub fn new(world: &'w World, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.retrieval_k > world.layout().specific_slots {
            return Err(Error::Config(format!(
                "retrieval_k {} exceeds the world's {} specific slots",
                config.retrieval_k,
                world.layout().specific_slots
            )));
        }
        if let Some(h) = config.horizon {
            if h != world.config().horizon {
                return Err(Error::Config(
                    "horizon override must be applied when generating the world".into(),
                ));
            }
        }
        let arch = Arch {
            input: world.layout().dim(),
            hidden: config.hidden,
            output: world.config().n_actions(),
        };
        let init_seed = stream_seed(config.seed, &[TAG_INIT]);
        let mut params = PolicyParams::init(arch, init_seed);
        if config.prior.steps > 0 {
            instruction_prior(
                &mut params,
                world,
                &config.prior,
                stream_seed(config.seed, &[TAG_PRIOR]),
            )?;
        }
        let adam = Adam::new(params.param_count(), config.learning_rate);
        let router = RouterState::new(config.window);
        Ok(Self {
            world,
            config,
            params,
            adam,
            router,
            step: 0,
        })
    }

    pub fn from_state(world: &'w World, config: TrainConfig, state: TrainerState) -> Result<Self> {
        let mut t = Self::new(
            world,
            TrainConfig {
                prior: PriorConfig {
                    steps: 0,
                    ..config.prior.clone()
                },
                ..config.clone()
            },
        )?;
        t.params = PolicyParams::from_theta(t.params.arch(), state.theta)?;
        if state.adam.m.len() != t.params.param_count() {
            return Err(Error::Shape {
                expected: t.params.param_count(),
                got: state.adam.m.len(),
            });
        }
        t.adam = state.adam;
        t.router = state.router;
        t.step = state.step;
        t.config = config;
        Ok(t)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            step: self.step,
            theta: self.params.theta().to_vec(),
            adam: self.adam.clone(),
            router: self.router.clone(),
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn set_params(&mut self, params: PolicyParams) -> Result<()> {
        if params.arch() != self.params.arch() {
            return Err(Error::Shape {
                expected: self.params.param_count(),
                got: params.param_count(),
            });
        }
        self.params = params;
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn router(&self) -> &RouterState {
        &self.router
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn world(&self) -> &World {
        self.world
    }

    /// The batch for a step: a seeded sample without replacement from TrainID.
    pub fn batch_for(&self, step: usize) -> Vec<&'w Task> {
        let mut tasks: Vec<&Task> = self.world.tasks_in(Split::TrainId).collect();
        let mut rng = stream(self.config.seed, &[TAG_BATCH, step as u64]);
        tasks.shuffle(&mut rng);
        tasks.truncate(self.config.batch_size);
        tasks
    }

    /// Runs the next scheduled step (including evaluation when due).
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let batch = self.batch_for(self.step);
        let mut record = self.step_on(&batch)?;
        let done = self.step;
        if done.is_multiple_of(self.config.eval_every) || done == self.config.steps {
            let episodes = if done == self.config.steps {
                self.config.final_eval_episodes
            } else {
                self.config.eval_episodes
            };
            for split in [Split::ValId, Split::ValOod] {
                record.evals.push(self.evaluate(
                    split,
                    self.config.method.eval_mode(),
                    episodes,
                )?);
            }
        }
        Ok(record)
    }

    /// One optimization step on an explicit batch.
    pub fn step_on(&mut self, batch: &[&Task]) -> Result<StepRecord> {
        let cfg = self.config.clone();
        let method = cfg.method;
        let step = self.step as u64;
        let snapshot = RolloutSnapshot::new(&self.params);
        let behavior = SnapshotBehavior {
            snapshot: &snapshot,
            temperature: cfg.train_temperature,
        };
        let world = self.world;

        // Phase 1: one group per task under the routing context.
        let phase1: Vec<TaskGroup> = batch
            .par_iter()
            .map(|task| {
                let idx = world.task_position(&task.id)? as u64;
                let mut rng = stream(cfg.seed, &[TAG_PHASE1, step, idx]);
                rollout_group(
                    world,
                    &behavior,
                    task,
                    method.rollout_mode(),
                    Stage::Training,
                    cfg.retrieval_k,
                    cfg.group_size,
                    false,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        let train_pass = phase1.iter().map(|g| g.pass_rate).sum::<f64>() / phase1.len() as f64;
        let eta = self.router.threshold(train_pass);
        let tiers: Vec<Tier> = phase1.iter().map(|g| route(g.pass_rate, eta)).collect();

        // Phase 2 sampling: privileged teachers for Hard, probes for Easy.
        let plans: Vec<TaskPlan> = phase1
            .into_par_iter()
            .zip(tiers.par_iter())
            .zip(batch.par_iter())
            .map(|((g, &tier), task)| {
                let idx = g.task as u64;
                let mut plan = TaskPlan {
                    tier,
                    phase1: g,
                    golden: None,
                    p_none: None,
                };
                if !method.is_tiered() {
                    return Ok(plan);
                }
                match tier {
                    Tier::Hard if method.distills() => {
                        let mut rng = stream(cfg.seed, &[TAG_PRIVILEGED, step, idx]);
                        let teacher = rollout_group(
                            world,
                            &behavior,
                            task,
                            ContextMode::Privileged,
                            Stage::Training,
                            cfg.retrieval_k,
                            cfg.group_size,
                            true,
                            &mut rng,
                        )?;
                        let golden = golden_filter(&teacher);
                        if !golden.is_empty() {
                            let student = world.build_context(
                                ContextMode::Standard,
                                Stage::Training,
                                task,
                                cfg.retrieval_k,
                            )?;
                            plan.golden = Some(
                                golden
                                    .iter()
                                    .map(|t| teacher_force(world, task, &student, t))
                                    .collect::<Result<_>>()?,
                            );
                        }
                    }
                    Tier::Easy if method.probes() => {
                        let mut rng = stream(cfg.seed, &[TAG_PROBE, step, idx]);
                        let probe = rollout_group(
                            world,
                            &behavior,
                            task,
                            ContextMode::NoSkill,
                            Stage::Training,
                            cfg.retrieval_k,
                            cfg.group_size,
                            false,
                            &mut rng,
                        )?;
                        plan.p_none = Some(probe.pass_rate);
                    }
                    _ => {}
                }
                Ok(plan)
            })
            .collect::<Result<_>>()?;

        // Utilization advantages over the Easy tasks, anchored on past steps.
        let u_anchor = self.router.utilization_anchor();
        let easy: Vec<usize> = (0..plans.len())
            .filter(|&i| plans[i].p_none.is_some())
            .collect();
        let gains: Vec<f64> = easy
            .iter()
            .map(|&i| utilization_gain(plans[i].phase1.pass_rate, plans[i].p_none.unwrap()))
            .collect();
        let a_u = utilization_advantage(&gains, u_anchor);
        let mut offsets = vec![0.0; plans.len()];
        for (&i, &a) in easy.iter().zip(&a_u) {
            offsets[i] = a;
        }
        if !gains.is_empty() {
            self.router
                .push_gain_mean(gains.iter().sum::<f64>() / gains.len() as f64);
        }

        // Token construction.
        let mut tokens: Vec<Token> = Vec::new();
        let mut report = LossReport::default();
        let mut hard_without_golden = 0;
        for (plan, offset) in plans.iter().zip(&offsets) {
            let g = &plan.phase1;
            let w = 1.0 / g.trajectories.len() as f64;
            if !method.is_tiered() {
                let adv = group_advantage(&shaped(g, &cfg.clip));
                push_group(
                    &mut tokens,
                    &mut report,
                    g,
                    &adv.advantages,
                    &snapshot,
                    w,
                    Component::Medium,
                )?;
                continue;
            }
            match plan.tier {
                Tier::Hard => {
                    if method.distills() {
                        match &plan.golden {
                            Some(golden) => {
                                report.traj_hard += golden.len();
                                tokens.extend(distill_tokens(golden)?);
                            }
                            None => hard_without_golden += 1,
                        }
                    } else {
                        // Plain GRPO on binary outcomes: every p = 0 group
                        // has zero advantage and contributes nothing.
                        let rewards: Vec<f64> = g.trajectories.iter().map(|t| t.reward()).collect();
                        let adv = group_advantage(&rewards);
                        push_group(
                            &mut tokens,
                            &mut report,
                            g,
                            &adv.advantages,
                            &snapshot,
                            w,
                            Component::Hard,
                        )?;
                    }
                }
                Tier::Medium => {
                    let adv = group_advantage(&shaped(g, &cfg.clip));
                    push_group(
                        &mut tokens,
                        &mut report,
                        g,
                        &adv.advantages,
                        &snapshot,
                        w,
                        Component::Medium,
                    )?;
                }
                Tier::Easy => {
                    let adv = composite_advantage(&group_advantage(&shaped(g, &cfg.clip)), *offset);
                    push_group(
                        &mut tokens,
                        &mut report,
                        g,
                        &adv.advantages,
                        &snapshot,
                        w,
                        Component::Easy,
                    )?;
                }
            }
        }
        for t in &tokens {
            match t.component {
                Component::Hard => report.tokens_hard += 1,
                Component::Medium => report.tokens_medium += 1,
                Component::Easy => report.tokens_easy += 1,
            }
        }

        // Loss and gradient at the rollout parameters.
        let mut grad = vec![0.0; self.params.param_count()];
        let b = evaluate_tokens(&self.params, &tokens, &cfg.clip, Some(&mut grad))?;
        fill_report(&mut report, &b);
        report.grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !report.grad_norm.is_finite() {
            return Err(Error::Numerical(format!(
                "step {step}: non-finite gradient"
            )));
        }

        let updated = !tokens.is_empty();
        if updated {
            self.update_epochs(&tokens, step)?;
        }

        let (mut n_hard, mut n_medium, mut n_easy) = (0, 0, 0);
        let decisions = plans
            .iter()
            .map(|p| {
                match p.tier {
                    Tier::Hard => n_hard += 1,
                    Tier::Medium => n_medium += 1,
                    Tier::Easy => n_easy += 1,
                }
                TierDecision {
                    task: world.tasks()[p.phase1.task].id.clone(),
                    pass_rate: p.phase1.pass_rate,
                    tier: p.tier,
                }
            })
            .collect();
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            n_hard,
            n_medium,
            n_easy,
            eta,
            u_anchor,
            train_pass,
            loss: report,
            hard_without_golden,
            updated,
            decisions,
            evals: Vec::new(),
        })
    }

    /// `ppo_epochs` passes over shuffled token mini-batches. On a numerical
    /// failure the parameters and optimizer roll back to the step start.
    fn update_epochs(&mut self, tokens: &[Token], step: u64) -> Result<()> {
        let saved = (self.params.clone(), self.adam.clone());
        let cfg = &self.config;
        let mut order: Vec<usize> = (0..tokens.len()).collect();
        for epoch in 0..cfg.clip.ppo_epochs {
            let mut rng = stream(cfg.seed, &[TAG_SHUFFLE, step, epoch as u64]);
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.minibatch_tokens) {
                let batch: Vec<Token> = chunk.iter().map(|&i| tokens[i].clone()).collect();
                let mut grad = vec![0.0; self.params.param_count()];
                let res = evaluate_tokens(&self.params, &batch, &cfg.clip, Some(&mut grad))
                    .and_then(|_| self.adam.update(self.params.theta_mut(), &grad));
                if let Err(e) = res {
                    (self.params, self.adam) = saved;
                    return Err(Error::Numerical(format!("step {step} aborted: {e}")));
                }
            }
        }
        if self.params.theta().iter().any(|v| !v.is_finite()) {
            (self.params, self.adam) = saved;
            return Err(Error::Numerical(format!(
                "step {step}: parameters diverged"
            )));
        }
        Ok(())
    }

    /// Success rates per domain of `split` under `mode`, at the evaluation
    /// temperature.
    pub fn evaluate(&self, split: Split, mode: ContextMode, episodes: usize) -> Result<EvalResult> {
        let snapshot = RolloutSnapshot::new(&self.params);
        let behavior = SnapshotBehavior {
            snapshot: &snapshot,
            temperature: self.config.eval_temperature,
        };
        evaluate_behavior(
            self.world,
            &behavior,
            split,
            mode,
            episodes,
            self.config.retrieval_k,
            stream_seed(self.config.seed, &[TAG_EVAL, self.step as u64]),
        )
    }
}

fn shaped(g: &TaskGroup, clip: &ClipConfig) -> Vec<f64> {
    g.trajectories
        .iter()
        .map(|t| shaped_reward(t, clip.invalid_penalty_coeff))
        .collect()
}

/// Adds a group's surrogate tokens unless every advantage is zero (such a
/// group carries no learning signal, so it also gets no regularizer).
fn push_group(
    tokens: &mut Vec<Token>,
    report: &mut LossReport,
    g: &TaskGroup,
    advantages: &[f64],
    snapshot: &RolloutSnapshot,
    weight: f64,
    component: Component,
) -> Result<()> {
    if advantages.iter().all(|&a| a == 0.0) {
        return Ok(());
    }
    for (t, &a) in g.trajectories.iter().zip(advantages) {
        tokens.extend(surrogate_tokens(t, snapshot, a, weight, component, true)?);
    }
    match component {
        Component::Hard => report.traj_hard += g.trajectories.len(),
        Component::Medium => report.traj_medium += g.trajectories.len(),
        Component::Easy => report.traj_easy += g.trajectories.len(),
    }
    Ok(())
}

fn fill_report(report: &mut LossReport, b: &Breakdown) {
    report.loss_hard = b.hard;
    report.loss_medium = b.medium;
    report.loss_easy = b.easy;
    report.loss_kl = b.kl;
    report.loss_entropy = b.entropy;
    report.total = b.total();
}

/// Replays a teacher trajectory's actions under the student context,
/// pairing each student observation with the frozen teacher distribution.
pub fn teacher_force(
    world: &World,
    task: &Task,
    student: &crate::env::Context,
    teacher: &crate::rollout::Trajectory,
) -> Result<ForcedTrajectory> {
    let (mut state, mut obs) = world.reset(&task.id, student)?;
    let mut steps = Vec::with_capacity(teacher.len());
    for s in &teacher.steps {
        let dist = s
            .dist
            .clone()
            .ok_or_else(|| Error::ProtocolViolation("teacher step without distribution".into()))?;
        let (next, _) = world.step(&mut state, s.action, student)?;
        steps.push((std::mem::replace(&mut obs, next).features, s.action, dist));
    }
    Ok(ForcedTrajectory {
        task: state.task,
        steps,
    })
}

fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    use rand::Rng;
    stream(seed, parts).random()
}

/// Evaluates any behavior: `episodes` episodes per domain of the split,
/// cycling through each domain's tasks in order.
pub fn evaluate_behavior(
    world: &World,
    behavior: &dyn Behavior,
    split: Split,
    mode: ContextMode,
    episodes: usize,
    k: usize,
    seed: u64,
) -> Result<EvalResult> {
    let domains = world.split_domains(split);
    let mut per_domain = Vec::new();
    let mut pools = BTreeSet::new();
    if episodes > 0 {
        for (di, name) in domains.iter().enumerate() {
            let tasks: Vec<&Task> = world
                .tasks_in(split)
                .filter(|t| &t.domain == name)
                .collect();
            if tasks.is_empty() {
                continue;
            }
            let outcomes: Vec<(bool, Option<Pool>)> = (0..episodes)
                .into_par_iter()
                .map(|e| {
                    let task = tasks[e % tasks.len()];
                    let ctx = world.build_context(mode, Stage::Inference, task, k)?;
                    let mut rng = stream(seed, &[split as u64, di as u64, e as u64]);
                    let t = rollout_episode(world, behavior, task, &ctx, false, &mut rng)?;
                    Ok((t.success, ctx.pool))
                })
                .collect::<Result<_>>()?;
            let wins = outcomes.iter().filter(|o| o.0).count();
            pools.extend(outcomes.iter().filter_map(|o| o.1));
            per_domain.push((name.clone(), wins as f64 / episodes as f64));
        }
    }
    let average = if per_domain.is_empty() {
        0.0
    } else {
        per_domain.iter().map(|d| d.1).sum::<f64>() / per_domain.len() as f64
    };
    Ok(EvalResult {
        split,
        mode,
        episodes_per_domain: episodes,
        per_domain,
        average,
        pools: pools.into_iter().collect(),
    })
}
