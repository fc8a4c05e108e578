//! Experiment plumbing: resolved configs, full training runs, the metrics
//! CSV, utilization probes and the sign test used to read them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::env::{ContextMode, EnvConfig, Split, Stage, World};
use crate::error::{Error, Result};
use crate::policy::{PolicyParams, RolloutSnapshot};
use crate::rollout::{rollout_group, stream, SnapshotBehavior};
use crate::trainer::{EvalResult, Method, StepRecord, TrainConfig, Trainer};

pub const METRICS_HEADER: &str = "step,n_hard,n_medium,n_easy,eta,u_anchor,train_pass,loss_hard,loss_medium,loss_easy,loss_kl,loss_entropy,loss_total,grad_norm,eval_split,eval_mode,eval_avg,eval_per_domain";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_env().validate()?;
        self.train.validate()
    }

    /// Env config with the trainer's horizon override applied.
    pub fn resolved_env(&self) -> EnvConfig {
        let mut env = self.env.clone();
        if let Some(h) = self.train.horizon {
            env.horizon = h;
        }
        env
    }

    pub fn build_world(&self) -> Result<World> {
        World::generate(&self.resolved_env())
    }

    /// The same experiment with both seeds set to `seed` and another method.
    pub fn with_seed_and_method(&self, seed: u64, method: Method) -> Self {
        let mut c = self.clone();
        c.env.seed = seed;
        c.train.seed = seed;
        c.train.method = method;
        c
    }
}

/// Hex SHA-256 of a world's snapshot text.
pub fn world_hash(world: &World) -> String {
    hex::encode(Sha256::digest(world.to_snapshot().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub env: u64,
    pub train: u64,
}

/// Everything needed to repeat a run with the same build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub world_hash: String,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub outputs: Vec<String>,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig, world: &World) -> Self {
        Self {
            config: config.clone(),
            seeds: Seeds {
                env: config.env.seed,
                train: config.train.seed,
            },
            world_hash: world_hash(world),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: unix_now(),
            finished_at: None,
            outputs: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub method: Method,
    pub records: Vec<StepRecord>,
    pub params: PolicyParams,
}

impl RunOutput {
    /// The last evaluation of `split` (the final, larger evaluation).
    pub fn final_eval(&self, split: Split) -> Option<&EvalResult> {
        self.records
            .iter()
            .rev()
            .flat_map(|r| r.evals.iter())
            .find(|e| e.split == split)
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.records)
    }
}

/// Trains from scratch for `config.steps` steps.
pub fn run(world: &World, config: &TrainConfig) -> Result<RunOutput> {
    run_with(world, config, |_| {})
}

/// As [`run`], calling `on_step` after every step.
pub fn run_with<F: FnMut(&StepRecord)>(
    world: &World,
    config: &TrainConfig,
    mut on_step: F,
) -> Result<RunOutput> {
    let mut trainer = Trainer::new(world, config.clone())?;
    let mut records = Vec::with_capacity(config.steps);
    while trainer.step_index() < config.steps {
        let r = trainer.train_step()?;
        on_step(&r);
        records.push(r);
    }
    Ok(RunOutput {
        method: config.method,
        records,
        params: trainer.params().clone(),
    })
}

/// Method sets for the two multi-run comparisons.
pub const ABLATION_METHODS: [Method; 3] =
    [Method::Full, Method::InternalizeOnly, Method::UtilizeOnly];
pub const BASELINE_METHODS: [Method; 3] =
    [Method::Full, Method::GrpoNoSkill, Method::GrpoFullExtern];

#[derive(Debug, Clone)]
pub struct SuiteRun {
    pub seed: u64,
    pub method: Method,
    pub world: World,
    pub output: RunOutput,
    pub final_id: f64,
    pub final_ood: f64,
}

/// Trains every `(seed, method)` pair; the world for a seed is shared by
/// its methods.
pub fn run_suite(
    base: &ExperimentConfig,
    seeds: &[u64],
    methods: &[Method],
) -> Result<Vec<SuiteRun>> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let world = base
            .with_seed_and_method(seed, Method::Full)
            .build_world()?;
        for &method in methods {
            let cfg = base.with_seed_and_method(seed, method);
            let output = run(&world, &cfg.train)?;
            let avg = |split| output.final_eval(split).map(|e| e.average).unwrap_or(0.0);
            let (final_id, final_ood) = (avg(Split::ValId), avg(Split::ValOod));
            runs.push(SuiteRun {
                seed,
                method,
                world: world.clone(),
                output,
                final_id,
                final_ood,
            });
        }
    }
    Ok(runs)
}

/// Mean final `(id, ood)` per method over the suite's seeds, in the order
/// methods first appear.
pub fn suite_means(runs: &[SuiteRun]) -> Vec<(Method, f64, f64)> {
    let mut out: Vec<(Method, f64, f64, usize)> = Vec::new();
    for r in runs {
        match out.iter_mut().find(|e| e.0 == r.method) {
            Some(e) => {
                e.1 += r.final_id;
                e.2 += r.final_ood;
                e.3 += 1;
            }
            None => out.push((r.method, r.final_id, r.final_ood, 1)),
        }
    }
    out.into_iter()
        .map(|(m, id, ood, n)| (m, id / n as f64, ood / n as f64))
        .collect()
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn train_fields(r: &StepRecord) -> String {
    let l = &r.loss;
    [
        r.step.to_string(),
        r.n_hard.to_string(),
        r.n_medium.to_string(),
        r.n_easy.to_string(),
        fmt_f(r.eta),
        fmt_f(r.u_anchor),
        fmt_f(r.train_pass),
        fmt_f(l.loss_hard),
        fmt_f(l.loss_medium),
        fmt_f(l.loss_easy),
        fmt_f(l.loss_kl),
        fmt_f(l.loss_entropy),
        fmt_f(l.total),
        fmt_f(l.grad_norm),
    ]
    .join(",")
}

pub fn per_domain_field(e: &EvalResult) -> String {
    e.per_domain
        .iter()
        .map(|(d, v)| format!("{d}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// One row per step with empty eval columns, then one extra row per
/// evaluation that repeats the step's training columns.
pub fn metrics_row(r: &StepRecord) -> String {
    let base = train_fields(r);
    let mut out = format!("{base},,,,\n");
    for e in &r.evals {
        let _ = writeln!(
            out,
            "{base},{},{},{},{}",
            e.split.as_str(),
            e.mode.as_str(),
            fmt_f(e.average),
            per_domain_field(e)
        );
    }
    out
}

pub fn metrics_csv(records: &[StepRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        out.push_str(&metrics_row(r));
    }
    out
}

/// Utilization gain `p_std - p_none` per task of `split`, each pass rate
/// from `episodes` episodes at `temperature`.
pub fn utilization_probe(
    world: &World,
    params: &PolicyParams,
    split: Split,
    episodes: usize,
    temperature: f64,
    k: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let snapshot = RolloutSnapshot::new(params);
    let behavior = SnapshotBehavior {
        snapshot: &snapshot,
        temperature,
    };
    world
        .tasks_in(split)
        .map(|task| {
            let idx = world.task_position(&task.id)? as u64;
            let mut pass = [0.0; 2];
            for (slot, mode) in [ContextMode::Standard, ContextMode::NoSkill]
                .into_iter()
                .enumerate()
            {
                let mut rng = stream(seed, &[slot as u64, idx]);
                let g = rollout_group(
                    world,
                    &behavior,
                    task,
                    mode,
                    Stage::Inference,
                    k,
                    episodes,
                    false,
                    &mut rng,
                )?;
                pass[slot] = g.pass_rate;
            }
            Ok(pass[0] - pass[1])
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    pub ties: usize,
    /// One-sided `P(X >= positive)` for `X ~ Bin(positive + negative, 1/2)`.
    pub p_value: f64,
}

pub fn sign_test(values: &[f64]) -> SignTest {
    let positive = values.iter().filter(|&&v| v > 0.0).count();
    let negative = values.iter().filter(|&&v| v < 0.0).count();
    let ties = values.len() - positive - negative;
    let n = (positive + negative) as u64;
    let p_value = if n == 0 || positive == 0 {
        1.0
    } else {
        let b = Binomial::new(0.5, n).expect("valid binomial");
        b.sf(positive as u64 - 1)
    };
    SignTest {
        positive,
        negative,
        ties,
        p_value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_matches_direct_sum() {
        let t = sign_test(&[1.0, 1.0, 1.0, -1.0, 0.0]);
        assert_eq!((t.positive, t.negative, t.ties), (3, 1, 1));
        // P(X >= 3), X ~ Bin(4, 1/2) = 5/16
        assert!((t.p_value - 5.0 / 16.0).abs() < 1e-12);
        assert_eq!(sign_test(&[0.0, -1.0]).p_value, 1.0);
    }

    #[test]
    fn config_toml_round_trip_and_defaults() {
        let c = ExperimentConfig::from_toml("[train]\nsteps = 3\n").unwrap();
        assert_eq!(c.train.steps, 3);
        assert_eq!(c.train.group_size, 8);
        assert_eq!(c.env, EnvConfig::default());
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(ExperimentConfig::from_toml("[train]\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("[env]\nhorizon = 1\n").is_err());
    }

    #[test]
    fn manifest_round_trip_and_world_hash() {
        let c = ExperimentConfig::default();
        let w = c.build_world().unwrap();
        let m = RunManifest::new(&c, &w);
        assert_eq!(m.world_hash.len(), 64);
        assert_eq!(m.world_hash, world_hash(&c.build_world().unwrap()));
        assert_eq!(RunManifest::from_json(&m.to_json()).unwrap(), m);
        let other = c
            .with_seed_and_method(5, Method::Full)
            .build_world()
            .unwrap();
        assert_ne!(world_hash(&other), m.world_hash);
    }

    #[test]
    fn horizon_override_flows_into_the_world() {
        let mut c = ExperimentConfig::default();
        c.train.horizon = Some(9);
        assert_eq!(c.build_world().unwrap().config().horizon, 9);
    }
}
