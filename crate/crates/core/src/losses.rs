//! Tier objectives: token-level JSD distillation, clipped GRPO, composite
//! advantages, the KL/entropy regularizers and their joint sum.
//!
//! Every objective is expressed as a list of weighted [`Token`]s whose losses
//! add up to the step loss, which lets the trainer mini-batch over tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ActionDistribution, PolicyParams, RolloutSnapshot};
use crate::rollout::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub epsilon: f64,
    pub ppo_epochs: usize,
    pub kl_coeff: f64,
    pub entropy_coeff: f64,
    pub invalid_penalty_coeff: f64,
    pub jsd_topk: usize,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            ppo_epochs: 2,
            kl_coeff: 0.01,
            entropy_coeff: 0.001,
            invalid_penalty_coeff: 0.1,
            jsd_topk: 64,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.jsd_topk == 0 {
            return Err(Error::Config("jsd_topk must be at least 1".into()));
        }
        if self.ppo_epochs == 0 {
            return Err(Error::Config("ppo_epochs must be at least 1".into()));
        }
        for (name, v) in [
            ("kl_coeff", self.kl_coeff),
            ("entropy_coeff", self.entropy_coeff),
            ("invalid_penalty_coeff", self.invalid_penalty_coeff),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution(format!("{what} is empty")));
    }
    if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "{what} has invalid entries"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!("{what} sums to {s}")));
    }
    Ok(())
}

/// Indices of the `topk` largest entries of `p`, ties by lower index, in
/// ascending index order.
pub fn topk_support(p: &[f64], topk: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    if topk < p.len() {
        idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        idx.truncate(topk);
        idx.sort_unstable();
    }
    idx
}

fn restrict(p: &[f64], support: &[usize]) -> Vec<f64> {
    let s: f64 = support.iter().map(|&i| p[i]).sum();
    support.iter().map(|&i| p[i] / s).collect()
}

fn xlogy_ratio(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / y).ln()
    }
}

fn jsd_full(p: &[f64], q: &[f64]) -> f64 {
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        kl_p += xlogy_ratio(a, m);
        kl_q += xlogy_ratio(b, m);
    }
    (0.5 * kl_p + 0.5 * kl_q).max(0.0)
}

/// Jensen-Shannon divergence (natural log). With `topk` smaller than the
/// support, both distributions are restricted to the top-k entries of `p`
/// and renormalized first.
pub fn jsd(p: &[f64], q: &[f64], topk: usize) -> Result<f64> {
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    if p.len() != q.len() {
        return Err(Error::InvalidDistribution(format!(
            "support sizes {} and {} differ",
            p.len(),
            q.len()
        )));
    }
    if topk == 0 {
        return Err(Error::Config("jsd_topk must be at least 1".into()));
    }
    if topk >= p.len() {
        return Ok(jsd_full(p, q));
    }
    let support = topk_support(p, topk);
    if support.iter().all(|&i| q[i] == 0.0) {
        return Err(Error::InvalidDistribution(
            "q has no mass on the support".into(),
        ));
    }
    Ok(jsd_full(&restrict(p, &support), &restrict(q, &support)))
}

/// JSD between a fixed teacher and the student softmax, with its gradient
/// with respect to the student logits.
pub fn jsd_student_grad(
    teacher: &[f64],
    student: &ActionDistribution,
    topk: usize,
) -> (f64, Vec<f64>) {
    let n = student.len();
    let support = topk_support(teacher, topk.min(n));
    let p = restrict(teacher, &support);
    let q = restrict(&student.probs, &support);
    let value = jsd_full(&p, &q);
    // dJ/dq_j = 0.5 ln(q_j / m_j); chain through the restricted softmax.
    let g: Vec<f64> = p
        .iter()
        .zip(&q)
        .map(|(&a, &b)| 0.5 * (b / (0.5 * (a + b))).ln())
        .collect();
    let gbar: f64 = q.iter().zip(&g).map(|(b, gj)| b * gj).sum();
    let mut dlogits = vec![0.0; n];
    for (j, &i) in support.iter().enumerate() {
        dlogits[i] = q[j] * (g[j] - gbar);
    }
    (value, dlogits)
}

/// Exact discrete KL(live || old) with its gradient in the live logits.
pub fn kl_grad(live: &ActionDistribution, old_log_probs: &[f64]) -> (f64, Vec<f64>) {
    let diffs: Vec<f64> = live
        .log_probs
        .iter()
        .zip(old_log_probs)
        .map(|(a, b)| a - b)
        .collect();
    let kl: f64 = live.probs.iter().zip(&diffs).map(|(p, d)| p * d).sum();
    let grad = live
        .probs
        .iter()
        .zip(&diffs)
        .map(|(p, d)| p * (d - kl))
        .collect();
    (kl, grad)
}

/// Entropy with its gradient in the logits.
pub fn entropy_grad(live: &ActionDistribution) -> (f64, Vec<f64>) {
    let h = live.entropy();
    let grad = live
        .probs
        .iter()
        .zip(&live.log_probs)
        .map(|(p, l)| -p * (l + h))
        .collect();
    (h, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageGroup {
    pub advantages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Task-level shift already added to `advantages`.
    pub offset: f64,
}

/// Intra-group normalization with population std; all zeros when std is 0.
pub fn group_advantage(rewards: &[f64]) -> AdvantageGroup {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let advantages = if std > 0.0 {
        rewards.iter().map(|r| (r - mean) / std).collect()
    } else {
        vec![0.0; rewards.len()]
    };
    AdvantageGroup {
        advantages,
        mean,
        std,
        offset: 0.0,
    }
}

pub fn utilization_gain(p_std: f64, p_none: f64) -> f64 {
    p_std - p_none
}

pub const SIGMA_U_FLOOR: f64 = 1e-8;

/// `(u_i - anchor) / sigma_u` with `sigma_u` the population std of the
/// deviations; all zeros when `sigma_u < 1e-8`.
pub fn utilization_advantage(gains: &[f64], anchor: f64) -> Vec<f64> {
    if gains.is_empty() {
        return Vec::new();
    }
    let dev: Vec<f64> = gains.iter().map(|u| u - anchor).collect();
    let n = dev.len() as f64;
    let m = dev.iter().sum::<f64>() / n;
    let sigma = (dev.iter().map(|d| (d - m).powi(2)).sum::<f64>() / n).sqrt();
    if sigma < SIGMA_U_FLOOR {
        vec![0.0; dev.len()]
    } else {
        dev.iter().map(|d| d / sigma).collect()
    }
}

pub fn composite_advantage(group: &AdvantageGroup, a_u: f64) -> AdvantageGroup {
    AdvantageGroup {
        advantages: group.advantages.iter().map(|a| a + a_u).collect(),
        mean: group.mean,
        std: group.std,
        offset: group.offset + a_u,
    }
}

/// Shaped reward for advantages: `R - coeff * invalid_count`.
pub fn shaped_reward(t: &Trajectory, coeff: f64) -> f64 {
    t.reward() - coeff * t.invalid_count as f64
}

/// Which term of the joint loss a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Hard,
    Medium,
    Easy,
}

/// Where a token's observation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    /// Phase-1 routing rollouts, reused.
    Routing,
    /// Student replay of a golden privileged rollout.
    TeacherForced,
    /// No-skill diagnostic probe (must never appear in a gradient).
    Probe,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// `weight * JSD(sg[teacher] || student)` on the teacher's top-k support.
    Distill { teacher: Vec<f64> },
    /// `-weight * min(rho A, clip(rho) A)`, plus KL/entropy when `regularize`.
    Surrogate {
        old_log_probs: Vec<f64>,
        advantage: f64,
        regularize: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub task: usize,
    pub component: Component,
    pub origin: Origin,
    pub obs: Vec<f64>,
    pub action: usize,
    pub weight: f64,
    pub objective: Objective,
}

/// Per-component sums over a set of tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub hard: f64,
    pub medium: f64,
    pub easy: f64,
    pub kl: f64,
    pub entropy: f64,
}

impl Breakdown {
    pub fn total(&self) -> f64 {
        self.hard + self.medium + self.easy + self.kl + self.entropy
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss_hard: f64,
    pub loss_medium: f64,
    pub loss_easy: f64,
    pub loss_kl: f64,
    pub loss_entropy: f64,
    pub total: f64,
    pub traj_hard: usize,
    pub traj_medium: usize,
    pub traj_easy: usize,
    pub tokens_hard: usize,
    pub tokens_medium: usize,
    pub tokens_easy: usize,
    pub grad_norm: f64,
}

/// Joint loss: unweighted tier sum plus the regularizer terms.
pub fn total_loss(hard: f64, medium: f64, easy: f64, kl: f64, entropy: f64) -> LossReport {
    LossReport {
        loss_hard: hard,
        loss_medium: medium,
        loss_easy: easy,
        loss_kl: kl,
        loss_entropy: entropy,
        total: hard + medium + easy + kl + entropy,
        ..LossReport::default()
    }
}

/// Clipped surrogate `min(rho A, clip(rho, 1-eps, 1+eps) A)` and its
/// derivative with respect to `rho`.
pub fn clipped_surrogate(rho: f64, advantage: f64, epsilon: f64) -> (f64, f64) {
    let unclipped = rho * advantage;
    let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    if unclipped <= clipped {
        (unclipped, advantage)
    } else {
        // Only reachable outside the clip range, where the clipped branch is flat.
        (clipped, 0.0)
    }
}

/// Evaluates `tokens` at `params`; accumulates the gradient into `grad` when
/// given. Returns the per-component loss sums.
pub fn evaluate_tokens(
    params: &PolicyParams,
    tokens: &[Token],
    clip: &ClipConfig,
    mut grad: Option<&mut [f64]>,
) -> Result<Breakdown> {
    let mut out = Breakdown::default();
    let n = params.arch().output;
    let mut dlogits = vec![0.0; n];
    for tok in tokens {
        if tok.origin == Origin::Probe {
            return Err(Error::ProtocolViolation(
                "diagnostic probe token in a loss".into(),
            ));
        }
        let (live, cache) = params.forward_cached(&tok.obs)?;
        dlogits.iter_mut().for_each(|d| *d = 0.0);
        match &tok.objective {
            Objective::Distill { teacher } => {
                let (v, g) = jsd_student_grad(teacher, &live, clip.jsd_topk);
                out.hard += tok.weight * v;
                for (d, gj) in dlogits.iter_mut().zip(g) {
                    *d += tok.weight * gj;
                }
            }
            Objective::Surrogate {
                old_log_probs,
                advantage,
                regularize,
            } => {
                let rho = (live.log_probs[tok.action] - old_log_probs[tok.action]).exp();
                if !rho.is_finite() {
                    return Err(Error::Numerical("non-finite ratio".into()));
                }
                let (s, ds_drho) = clipped_surrogate(rho, *advantage, clip.epsilon);
                let v = -tok.weight * s;
                match tok.component {
                    Component::Hard => out.hard += v,
                    Component::Medium => out.medium += v,
                    Component::Easy => out.easy += v,
                }
                // d rho / d z_j = rho (1[j = a] - pi_j)
                let scale = -tok.weight * ds_drho * rho;
                if scale != 0.0 {
                    for (j, d) in dlogits.iter_mut().enumerate() {
                        *d += scale * ((j == tok.action) as u8 as f64 - live.probs[j]);
                    }
                }
                if *regularize {
                    let (kl, gk) = kl_grad(&live, old_log_probs);
                    let (h, gh) = entropy_grad(&live);
                    out.kl += clip.kl_coeff * tok.weight * kl;
                    out.entropy -= clip.entropy_coeff * tok.weight * h;
                    for ((d, a), b) in dlogits.iter_mut().zip(gk).zip(gh) {
                        *d += tok.weight * (clip.kl_coeff * a - clip.entropy_coeff * b);
                    }
                }
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            params.backward(&tok.obs, &cache, &dlogits, g);
        }
    }
    if !out.total().is_finite() {
        return Err(Error::Numerical("non-finite loss".into()));
    }
    Ok(out)
}

/// Surrogate tokens for one trajectory. Old log-probabilities come from the
/// snapshot that sampled it.
pub fn surrogate_tokens(
    traj: &Trajectory,
    snapshot: &RolloutSnapshot,
    advantage: f64,
    weight: f64,
    component: Component,
    regularize: bool,
) -> Result<Vec<Token>> {
    traj.steps
        .iter()
        .map(|s| {
            let old = snapshot.eval_frozen(&s.obs)?;
            Ok(Token {
                task: traj.task,
                component,
                origin: Origin::Routing,
                obs: s.obs.clone(),
                action: s.action,
                weight,
                objective: Objective::Surrogate {
                    old_log_probs: old.log_probs,
                    advantage,
                    regularize,
                },
            })
        })
        .collect()
}

/// One golden trajectory seen from the student's side: the student
/// observation at each step and the frozen teacher distribution there.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcedTrajectory {
    pub task: usize,
    pub steps: Vec<(Vec<f64>, usize, Vec<f64>)>,
}

/// Distillation tokens: outer mean over trajectories, inner mean over steps.
pub fn distill_tokens(golden: &[ForcedTrajectory]) -> Result<Vec<Token>> {
    if golden.is_empty() {
        return Err(Error::NoGoldenTrajectories);
    }
    let outer = 1.0 / golden.len() as f64;
    let mut tokens = Vec::new();
    for t in golden {
        let inner = 1.0 / t.steps.len() as f64;
        for (obs, action, teacher) in &t.steps {
            check_distribution(teacher, "teacher")?;
            tokens.push(Token {
                task: t.task,
                component: Component::Hard,
                origin: Origin::TeacherForced,
                obs: obs.clone(),
                action: *action,
                weight: outer * inner,
                objective: Objective::Distill {
                    teacher: teacher.clone(),
                },
            });
        }
    }
    Ok(tokens)
}

/// Distillation loss over one golden set, with its gradient.
pub fn distill_loss(
    golden: &[ForcedTrajectory],
    params: &PolicyParams,
    topk: usize,
) -> Result<(f64, Vec<f64>)> {
    let tokens = distill_tokens(golden)?;
    let clip = ClipConfig {
        jsd_topk: topk,
        ..ClipConfig::default()
    };
    let mut grad = vec![0.0; params.param_count()];
    let b = evaluate_tokens(params, &tokens, &clip, Some(&mut grad))?;
    Ok((b.hard, grad))
}

/// Negated clipped GRPO surrogate of one group, averaged over its size.
pub fn grpo_loss(
    trajectories: &[Trajectory],
    advantages: &[f64],
    params: &PolicyParams,
    snapshot: &RolloutSnapshot,
    clip: &ClipConfig,
) -> Result<(f64, Vec<f64>)> {
    if trajectories.len() != advantages.len() {
        return Err(Error::Shape {
            expected: trajectories.len(),
            got: advantages.len(),
        });
    }
    let w = 1.0 / trajectories.len() as f64;
    let mut tokens = Vec::new();
    for (t, &a) in trajectories.iter().zip(advantages) {
        tokens.extend(surrogate_tokens(
            t,
            snapshot,
            a,
            w,
            Component::Medium,
            false,
        )?);
    }
    let mut grad = vec![0.0; params.param_count()];
    let b = evaluate_tokens(params, &tokens, clip, Some(&mut grad))?;
    Ok((b.medium, grad))
}
