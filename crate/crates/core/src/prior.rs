//! Instruction-following warm start.
//!
//! A pretrained language model arrives able to follow an explicit step list
//! and to respect what actions make sense at each point of a task. The small
//! policy has no such background, so before RL it is behavior-cloned on
//! synthetic observations with randomized general-skill slots: at a prefix
//! position with general skills present the target is that slot's action,
//! otherwise the target is uniform over the legal actions. Specific-skill
//! slots are filled with random payloads and never carry a target, so reading
//! domain rules is left to RL.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{World, PHASE_FLAGS};
use crate::error::Result;
use crate::policy::PolicyParams;
use crate::trainer::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Optimizer steps; 0 disables the warm start.
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            steps: 1200,
            batch: 32,
            learning_rate: 1e-2,
        }
    }
}

/// One synthetic observation and its soft target.
pub fn prior_sample(world: &World, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let l = world.layout();
    let c = world.config();
    let m = c.m_prefix_options;
    let n = c.n_actions();
    let mut f = vec![0.0; l.dim()];
    let d = rng.random_range(0..l.n_domains);
    let pattern = rng.random_range(0..l.patterns);
    f[l.domain_feature(d)] = 1.0;
    f[l.domain_pattern_feature(d, pattern)] = 1.0;
    f[l.variant_feature(rng.random_range(0..l.variants))] = 1.0;
    let phase = l.phase_range().start;
    let progress = rng.random_range(0..l.procedure_len);
    f[phase + progress] = 1.0;
    let flag = rng.random_range(0..=PHASE_FLAGS);
    if flag < PHASE_FLAGS {
        f[phase + l.procedure_len + flag] = 1.0;
    }
    let ctx = l.context_range().start;
    let off = l.payload_action_offset();
    let with_general = rng.random_bool(0.5);
    let mut general_actions = Vec::new();
    if with_general {
        for j in 0..l.general_slots {
            let a = rng.random_range(0..m);
            let s = ctx + l.general_slot(j).start;
            f[s] = 1.0;
            f[s + 2 + j] = 1.0;
            f[s + off + a] = 1.0;
            general_actions.push(a);
        }
    }
    for j in 0..l.specific_slots {
        if rng.random_bool(0.5) {
            let s = ctx + l.specific_slot(j).start;
            f[s + 1] = 1.0;
            f[s + 2 + rng.random_range(0..l.patterns)] = 1.0;
            f[s + off + m + rng.random_range(0..c.k_code_options)] = 1.0;
        }
    }
    let mut target = vec![0.0; n];
    if progress + 1 < l.procedure_len {
        if with_general {
            target[general_actions[progress]] = 1.0;
        } else {
            target[..m].iter_mut().for_each(|t| *t = 1.0 / m as f64);
        }
    } else {
        let k = c.k_code_options as f64;
        target[m..].iter_mut().for_each(|t| *t = 1.0 / k);
    }
    (f, target)
}

/// Cross-entropy behavior cloning on synthetic samples. Returns the final
/// mean batch loss.
pub fn instruction_prior(
    params: &mut PolicyParams,
    world: &World,
    config: &PriorConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(params.param_count(), config.learning_rate);
    let mut last = 0.0;
    for _ in 0..config.steps {
        let mut grad = vec![0.0; params.param_count()];
        let mut loss = 0.0;
        let scale = 1.0 / config.batch as f64;
        for _ in 0..config.batch {
            let (obs, target) = prior_sample(world, &mut rng);
            let (dist, cache) = params.forward_cached(&obs)?;
            loss -= scale
                * target
                    .iter()
                    .zip(&dist.log_probs)
                    .map(|(t, l)| if *t > 0.0 { t * l } else { 0.0 })
                    .sum::<f64>();
            let dlogits: Vec<f64> = dist
                .probs
                .iter()
                .zip(&target)
                .map(|(p, t)| scale * (p - t))
                .collect();
            params.backward(&obs, &cache, &dlogits, &mut grad);
        }
        adam.update(params.theta_mut(), &grad)?;
        last = loss;
    }
    Ok(last)
}
