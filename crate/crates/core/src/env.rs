//! SkillWorld: a synthetic skill-gated POMDP.
//!
//! Every task requires a hidden procedure of `L` actions: an `L-1` step prefix
//! that is the same for every domain (what the general skills describe) and a
//! final rule code looked up in the task's domain table (what the specific
//! skills reveal). At prefix positions only the `m` prefix actions are legal;
//! at the code position only the `k` code actions are. A legal but wrong action
//! throws progress back to the start; an illegal one is counted and ignored.
//!
//! Observations are fixed-layout feature vectors:
//! `[task | phase | general slots | specific slots]`, with absent skills
//! occupying zeroed slots so every context mode yields the same dimension.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skillbank::{embed, Pool, Skill, SkillBank, SkillKind, DEFAULT_EMBED_DIM};

pub const SKILLWORLD_HEADER: &str = "skillworld-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub n_domains_id: usize,
    pub n_domains_ood: usize,
    pub m_prefix_options: usize,
    pub k_code_options: usize,
    /// Procedure length `L` (prefix of `L-1` steps plus the code).
    pub procedure_len: usize,
    /// Horizon `T`.
    pub horizon: usize,
    /// Attribute patterns per domain; one specific skill per pattern.
    pub patterns_per_domain: usize,
    /// Values of the second (free) attribute.
    pub variants: usize,
    /// Variants per (ID domain, pattern) held out for ID validation.
    pub val_variants: usize,
    /// Incidental words attached to each specific skill's retrieval key.
    pub descriptor_tokens: usize,
    /// Specific-skill slots in the observation (retrieval capacity K).
    pub retrieval_k: usize,
    pub embed_dim: usize,
    /// Carried for completeness; outcomes are terminal and binary.
    pub gamma: f64,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_domains_id: 4,
            n_domains_ood: 3,
            m_prefix_options: 4,
            k_code_options: 4,
            procedure_len: 4,
            horizon: 6,
            patterns_per_domain: 5,
            variants: 8,
            val_variants: 2,
            descriptor_tokens: 1,
            retrieval_k: 3,
            embed_dim: DEFAULT_EMBED_DIM,
            gamma: 1.0,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn n_actions(&self) -> usize {
        self.m_prefix_options + self.k_code_options
    }

    pub fn n_domains(&self) -> usize {
        self.n_domains_id + self.n_domains_ood
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.procedure_len < 2 {
            return fail("procedure_len must be at least 2");
        }
        if self.horizon < self.procedure_len {
            return fail("horizon must be at least procedure_len");
        }
        if self.m_prefix_options < 2 {
            return fail("m_prefix_options must be at least 2");
        }
        if self.k_code_options < 2 {
            return fail("k_code_options must be at least 2");
        }
        if self.n_domains_id == 0 {
            return fail("need at least one ID domain");
        }
        if self.patterns_per_domain == 0 || self.variants == 0 {
            return fail("patterns_per_domain and variants must be positive");
        }
        if self.val_variants >= self.variants {
            return fail("val_variants must leave at least one training variant");
        }
        if self.retrieval_k == 0 || self.embed_dim == 0 {
            return fail("retrieval_k and embed_dim must be positive");
        }
        if self.gamma != 1.0 {
            return fail("gamma is fixed to 1");
        }
        Ok(())
    }

    /// Success probability of a policy uniform over the legal actions when
    /// `T = L` (a single clean attempt): `(1/m)^(L-1) * (1/k)`.
    pub fn single_attempt_guess_probability(&self) -> f64 {
        let m = self.m_prefix_options as f64;
        let k = self.k_code_options as f64;
        m.powi(self.procedure_len as i32 - 1).recip() / k
    }

    /// Exact success probability of the uniform-over-legal-actions policy for
    /// the configured horizon, by dynamic programming over (progress, steps
    /// left).
    pub fn uniform_policy_success_probability(&self) -> f64 {
        let l = self.procedure_len;
        let hit = |j: usize| {
            if j + 1 < l {
                1.0 / self.m_prefix_options as f64
            } else {
                1.0 / self.k_code_options as f64
            }
        };
        // f[j] = P(success | progress j, r steps left)
        let mut f = vec![0.0; l + 1];
        f[l] = 1.0;
        for _ in 0..self.horizon {
            let mut next = vec![0.0; l + 1];
            next[l] = 1.0;
            for j in 0..l {
                next[j] = hit(j) * f[j + 1] + (1.0 - hit(j)) * f[0];
            }
            f = next;
        }
        f[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainId,
    ValId,
    ValOod,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::TrainId => "train_id",
            Split::ValId => "val_id",
            Split::ValOod => "val_ood",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train_id" | "train" => Ok(Split::TrainId),
            "val_id" | "id" => Ok(Split::ValId),
            "val_ood" | "ood" => Ok(Split::ValOod),
            other => Err(Error::Parse(format!("unknown split {other:?}"))),
        }
    }

    pub fn pool(self) -> Pool {
        match self {
            Split::ValOod => Pool::Ood,
            _ => Pool::Id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub domain: String,
    pub domain_index: usize,
    /// `(pattern, variant)`: the pattern selects the rule code, the variant is free.
    pub attributes: (usize, usize),
    pub hidden_procedure: Vec<usize>,
    pub split: Split,
}

impl Task {
    /// Retrieval key: the instruction's words.
    pub fn key(&self) -> Vec<String> {
        vec![
            self.domain.clone(),
            pattern_token(&self.domain, self.attributes.0),
            variant_token(self.attributes.1),
        ]
    }
}

fn pattern_token(domain: &str, pattern: usize) -> String {
    format!("{domain}-p{pattern}")
}

fn variant_token(variant: usize) -> String {
    format!("v{variant}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRules {
    pub name: String,
    pub ood: bool,
    /// Rule code for each attribute pattern.
    pub codes: Vec<usize>,
}

/// Offsets of the observation blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObsLayout {
    pub n_domains: usize,
    pub patterns: usize,
    pub variants: usize,
    pub procedure_len: usize,
    pub general_slots: usize,
    pub specific_slots: usize,
    pub skill_dim: usize,
    pub n_actions: usize,
}

pub const PHASE_FLAGS: usize = 4;

impl ObsLayout {
    fn from_config(c: &EnvConfig) -> Self {
        let n_cond = (c.procedure_len - 1).max(c.patterns_per_domain);
        ObsLayout {
            n_domains: c.n_domains(),
            patterns: c.patterns_per_domain,
            variants: c.variants,
            procedure_len: c.procedure_len,
            general_slots: c.procedure_len - 1,
            specific_slots: c.retrieval_k,
            skill_dim: 2 + n_cond + c.n_actions(),
            n_actions: c.n_actions(),
        }
    }

    /// Task block: `[domain | domain x pattern | variant]` one-hots.
    pub fn task_dim(&self) -> usize {
        self.n_domains + self.n_domains * self.patterns + self.variants
    }

    pub fn domain_feature(&self, domain: usize) -> usize {
        domain
    }

    pub fn domain_pattern_feature(&self, domain: usize, pattern: usize) -> usize {
        self.n_domains + domain * self.patterns + pattern
    }

    pub fn variant_feature(&self, variant: usize) -> usize {
        self.n_domains + self.n_domains * self.patterns + variant
    }

    pub fn phase_dim(&self) -> usize {
        self.procedure_len + PHASE_FLAGS
    }

    pub fn context_dim(&self) -> usize {
        (self.general_slots + self.specific_slots) * self.skill_dim
    }

    pub fn dim(&self) -> usize {
        self.task_dim() + self.phase_dim() + self.context_dim()
    }

    pub fn task_range(&self) -> Range<usize> {
        0..self.task_dim()
    }

    pub fn phase_range(&self) -> Range<usize> {
        let s = self.task_dim();
        s..s + self.phase_dim()
    }

    pub fn context_range(&self) -> Range<usize> {
        let s = self.task_dim() + self.phase_dim();
        s..s + self.context_dim()
    }

    /// Range of general slot `j` inside the context block.
    pub fn general_slot(&self, j: usize) -> Range<usize> {
        let s = j * self.skill_dim;
        s..s + self.skill_dim
    }

    /// Range of specific slot `j` inside the context block.
    pub fn specific_slot(&self, j: usize) -> Range<usize> {
        let s = (self.general_slots + j) * self.skill_dim;
        s..s + self.skill_dim
    }

    /// Offset of the action one-hot inside a skill payload.
    pub fn payload_action_offset(&self) -> usize {
        self.skill_dim - self.n_actions
    }
}

/// What the runtime context contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Retrieved specific skills only.
    Standard,
    /// General skills plus retrieved specific skills; training only.
    Privileged,
    /// Empty context.
    NoSkill,
    /// General plus retrieved specific skills at inference as well.
    FullExtern,
    /// Empty on ID tasks, retrieved specific skills on OOD tasks.
    InternId,
}

impl ContextMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ContextMode::Standard => "standard",
            ContextMode::Privileged => "privileged",
            ContextMode::NoSkill => "no_skill",
            ContextMode::FullExtern => "full_extern",
            ContextMode::InternId => "intern_id",
        }
    }

    pub fn parse(s: &str) -> Result<ContextMode> {
        match s {
            "standard" => Ok(ContextMode::Standard),
            "privileged" => Ok(ContextMode::Privileged),
            "no_skill" | "none" => Ok(ContextMode::NoSkill),
            "full_extern" => Ok(ContextMode::FullExtern),
            "intern_id" => Ok(ContextMode::InternId),
            other => Err(Error::Parse(format!("unknown context mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Training,
    Inference,
}

/// A rendered runtime context plus its retrieval log.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub mode: ContextMode,
    pub features: Vec<f64>,
    pub general_included: bool,
    /// Pool the specific skills came from, if any were retrieved.
    pub pool: Option<Pool>,
    /// Ids of retrieved specific skills, in slot order.
    pub retrieved: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    None,
    Ok,
    Invalid,
    /// A code action before the prefix was complete (also invalid).
    Premature,
    /// A legal but wrong action; progress restarted.
    Reset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f64>,
    pub turn: usize,
}

impl Observation {
    pub fn task_features<'a>(&'a self, layout: &ObsLayout) -> &'a [f64] {
        &self.features[layout.task_range()]
    }

    pub fn phase_features<'a>(&'a self, layout: &ObsLayout) -> &'a [f64] {
        &self.features[layout.phase_range()]
    }

    pub fn context_features<'a>(&'a self, layout: &ObsLayout) -> &'a [f64] {
        &self.features[layout.context_range()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub task: usize,
    /// Correct actions executed since the last reset of progress.
    pub executed: Vec<usize>,
    pub invalid_count: usize,
    pub done: bool,
    pub success: bool,
    pub step: usize,
    pub feedback: Feedback,
}

impl EnvState {
    pub fn progress(&self) -> usize {
        self.executed.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub done: bool,
    pub success: bool,
    pub invalid: bool,
}

#[derive(Debug, Clone)]
pub struct World {
    config: EnvConfig,
    domains: Vec<DomainRules>,
    general_order: Vec<usize>,
    bank: SkillBank,
    tasks: Vec<Task>,
    index: HashMap<String, usize>,
    layout: ObsLayout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaskRecord {
    id: String,
    domain_index: usize,
    pattern: usize,
    variant: usize,
    split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WorldSnapshot {
    config: EnvConfig,
    general_order: Vec<usize>,
    domains: Vec<DomainRules>,
    bank: String,
    tasks: Vec<TaskRecord>,
}

impl World {
    /// Generates a world; a pure function of `config` (including its seed).
    pub fn generate(config: &EnvConfig) -> Result<World> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5ced_0f57_0a1d_u64);
        let m = config.m_prefix_options;
        let k = config.k_code_options;
        let general_order: Vec<usize> = (0..config.procedure_len - 1)
            .map(|_| rng.random_range(0..m))
            .collect();
        let domains: Vec<DomainRules> = (0..config.n_domains())
            .map(|d| DomainRules {
                name: format!("d{d}"),
                ood: d >= config.n_domains_id,
                codes: (0..config.patterns_per_domain)
                    .map(|_| rng.random_range(0..k))
                    .collect(),
            })
            .collect();
        let layout = ObsLayout::from_config(config);

        let general = general_order
            .iter()
            .enumerate()
            .map(|(j, &a)| general_skill(&layout, j, a))
            .collect();
        let mut specific = Vec::new();
        for d in &domains {
            for (p, &code) in d.codes.iter().enumerate() {
                let descriptors = (0..config.descriptor_tokens)
                    .map(|_| variant_token(rng.random_range(0..config.variants)))
                    .collect();
                specific.push(specific_skill(
                    &layout,
                    config,
                    &d.name,
                    p,
                    code,
                    descriptors,
                ));
            }
        }
        let (id_domains, ood_domains) = domain_sets(&domains);
        let bank = SkillBank::new(
            general,
            specific,
            id_domains,
            ood_domains,
            config.retrieval_k,
            config.embed_dim,
        )?;

        let mut records = Vec::new();
        for (di, d) in domains.iter().enumerate() {
            for p in 0..config.patterns_per_domain {
                let mut variants: Vec<usize> = (0..config.variants).collect();
                variants.shuffle(&mut rng);
                for (rank, v) in variants.into_iter().enumerate() {
                    let split = if d.ood {
                        Split::ValOod
                    } else if rank < config.val_variants {
                        Split::ValId
                    } else {
                        Split::TrainId
                    };
                    records.push(TaskRecord {
                        id: format!("t-{}-p{p}-v{v}", d.name),
                        domain_index: di,
                        pattern: p,
                        variant: v,
                        split,
                    });
                }
            }
        }
        records.sort_by(|a, b| {
            (a.domain_index, a.pattern, a.variant).cmp(&(b.domain_index, b.pattern, b.variant))
        });
        Self::assemble(config.clone(), domains, general_order, bank, records)
    }

    fn assemble(
        config: EnvConfig,
        domains: Vec<DomainRules>,
        general_order: Vec<usize>,
        bank: SkillBank,
        records: Vec<TaskRecord>,
    ) -> Result<World> {
        config.validate()?;
        let layout = ObsLayout::from_config(&config);
        let mut tasks = Vec::with_capacity(records.len());
        let mut index = HashMap::new();
        for r in records {
            let d = domains
                .get(r.domain_index)
                .ok_or_else(|| Error::Parse(format!("task {} has unknown domain", r.id)))?;
            let code = *d
                .codes
                .get(r.pattern)
                .ok_or_else(|| Error::Parse(format!("task {} has unknown pattern", r.id)))?;
            if r.split == Split::ValOod && !d.ood {
                return Err(Error::Parse(format!("OOD task {} in an ID domain", r.id)));
            }
            let mut hidden_procedure = general_order.clone();
            hidden_procedure.push(config.m_prefix_options + code);
            if index.insert(r.id.clone(), tasks.len()).is_some() {
                return Err(Error::Parse(format!("duplicate task id {}", r.id)));
            }
            tasks.push(Task {
                id: r.id,
                domain: d.name.clone(),
                domain_index: r.domain_index,
                attributes: (r.pattern, r.variant),
                hidden_procedure,
                split: r.split,
            });
        }
        Ok(World {
            config,
            domains,
            general_order,
            bank,
            tasks,
            index,
            layout,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn layout(&self) -> &ObsLayout {
        &self.layout
    }

    pub fn bank(&self) -> &SkillBank {
        &self.bank
    }

    pub fn domains(&self) -> &[DomainRules] {
        &self.domains
    }

    pub fn general_order(&self) -> &[usize] {
        &self.general_order
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn tasks_in(&self, split: Split) -> impl Iterator<Item = &Task> {
        self.tasks.iter().filter(move |t| t.split == split)
    }

    pub fn task(&self, id: &str) -> Result<&Task> {
        self.index
            .get(id)
            .map(|&i| &self.tasks[i])
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    pub fn task_position(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    /// Domain names of a split in index order.
    pub fn split_domains(&self, split: Split) -> Vec<String> {
        self.domains
            .iter()
            .filter(|d| d.ood == (split == Split::ValOod))
            .map(|d| d.name.clone())
            .collect()
    }

    /// Renders the runtime context for `task` under `mode`, retrieving at most
    /// `k` specific skills from the pool matching the task's split.
    pub fn build_context(
        &self,
        mode: ContextMode,
        stage: Stage,
        task: &Task,
        k: usize,
    ) -> Result<Context> {
        if mode == ContextMode::Privileged && stage == Stage::Inference {
            return Err(Error::ProtocolViolation(
                "privileged context is training-only".into(),
            ));
        }
        if k == 0 || k > self.layout.specific_slots {
            return Err(Error::Config(format!(
                "K = {k} outside 1..={}",
                self.layout.specific_slots
            )));
        }
        let (general, specific) = match mode {
            ContextMode::Standard => (false, true),
            ContextMode::Privileged | ContextMode::FullExtern => (true, true),
            ContextMode::NoSkill => (false, false),
            ContextMode::InternId => (false, task.split == Split::ValOod),
        };
        let mut features = vec![0.0; self.layout.context_dim()];
        if general {
            for (j, skill) in self.bank.general().iter().enumerate() {
                features[self.layout.general_slot(j)].copy_from_slice(&skill.payload);
            }
        }
        let mut retrieved = Vec::new();
        let mut pool = None;
        if specific {
            let p = task.split.pool();
            let query = embed(&task.key(), self.bank.embed_dim())?;
            for (j, skill) in self
                .bank
                .retrieve_topk(p, &query, k)?
                .into_iter()
                .enumerate()
            {
                features[self.layout.specific_slot(j)].copy_from_slice(&skill.payload);
                retrieved.push(skill.id.clone());
            }
            pool = Some(p);
        }
        Ok(Context {
            mode,
            features,
            general_included: general,
            pool,
            retrieved,
        })
    }

    pub fn reset(&self, task_id: &str, ctx: &Context) -> Result<(EnvState, Observation)> {
        let task = self.task_position(task_id)?;
        let state = EnvState {
            task,
            executed: Vec::with_capacity(self.config.procedure_len),
            invalid_count: 0,
            done: false,
            success: false,
            step: 0,
            feedback: Feedback::None,
        };
        let obs = self.observe(&state, ctx);
        Ok((state, obs))
    }

    /// Legal actions at the current position.
    pub fn affordances(&self, state: &EnvState) -> Range<usize> {
        let m = self.config.m_prefix_options;
        if state.progress() + 1 < self.config.procedure_len {
            0..m
        } else {
            m..m + self.config.k_code_options
        }
    }

    pub fn step(
        &self,
        state: &mut EnvState,
        action: usize,
        ctx: &Context,
    ) -> Result<(Observation, StepOutcome)> {
        if state.done {
            return Err(Error::EpisodeFinished);
        }
        let n = self.config.n_actions();
        if action >= n {
            return Err(Error::InvalidAction { action, size: n });
        }
        let task = &self.tasks[state.task];
        state.step += 1;
        let legal = self.affordances(state);
        let mut invalid = false;
        if !legal.contains(&action) {
            invalid = true;
            state.invalid_count += 1;
            state.feedback = if action >= self.config.m_prefix_options {
                Feedback::Premature
            } else {
                Feedback::Invalid
            };
        } else if action == task.hidden_procedure[state.progress()] {
            state.executed.push(action);
            state.feedback = Feedback::Ok;
            if state.progress() == self.config.procedure_len {
                state.success = true;
                state.done = true;
            }
        } else {
            state.executed.clear();
            state.feedback = Feedback::Reset;
        }
        if state.step >= self.config.horizon {
            state.done = true;
        }
        let obs = self.observe(state, ctx);
        Ok((
            obs,
            StepOutcome {
                done: state.done,
                success: state.success,
                invalid,
            },
        ))
    }

    pub fn observe(&self, state: &EnvState, ctx: &Context) -> Observation {
        let l = &self.layout;
        let task = &self.tasks[state.task];
        let mut f = vec![0.0; l.dim()];
        let (pattern, variant) = task.attributes;
        f[l.domain_feature(task.domain_index)] = 1.0;
        f[l.domain_pattern_feature(task.domain_index, pattern)] = 1.0;
        f[l.variant_feature(variant)] = 1.0;
        let phase = l.phase_range().start;
        f[phase + state.progress().min(l.procedure_len - 1)] = 1.0;
        let flag = match state.feedback {
            Feedback::None => None,
            Feedback::Ok => Some(0),
            Feedback::Invalid => Some(1),
            Feedback::Premature => Some(2),
            Feedback::Reset => Some(3),
        };
        if let Some(i) = flag {
            f[phase + l.procedure_len + i] = 1.0;
            if i == 2 {
                f[phase + l.procedure_len + 1] = 1.0;
            }
        }
        f[l.context_range()].copy_from_slice(&ctx.features);
        Observation {
            features: f,
            turn: state.step,
        }
    }

    /// Exports the `skillworld-v1` snapshot.
    pub fn to_snapshot(&self) -> String {
        let snapshot = WorldSnapshot {
            config: self.config.clone(),
            general_order: self.general_order.clone(),
            domains: self.domains.clone(),
            bank: self.bank.to_text(),
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskRecord {
                    id: t.id.clone(),
                    domain_index: t.domain_index,
                    pattern: t.attributes.0,
                    variant: t.attributes.1,
                    split: t.split,
                })
                .collect(),
        };
        let body = serde_json::to_string_pretty(&snapshot).expect("snapshot serializes");
        format!("{SKILLWORLD_HEADER}\n{body}\n")
    }

    pub fn from_snapshot(text: &str) -> Result<World> {
        let (header, body) = text
            .split_once('\n')
            .ok_or_else(|| Error::Parse("empty world snapshot".into()))?;
        if header.trim() != SKILLWORLD_HEADER {
            return Err(Error::Parse(format!(
                "expected header {SKILLWORLD_HEADER}, found {header:?}"
            )));
        }
        let snap: WorldSnapshot = serde_json::from_str(body)?;
        let bank = SkillBank::from_text(&snap.bank)?;
        let (id, ood) = domain_sets(&snap.domains);
        if &id != bank.id_domains() || &ood != bank.ood_domains() {
            return Err(Error::Parse("bank partition disagrees with domains".into()));
        }
        World::assemble(
            snap.config,
            snap.domains,
            snap.general_order,
            bank,
            snap.tasks,
        )
    }
}

fn domain_sets(domains: &[DomainRules]) -> (BTreeSet<String>, BTreeSet<String>) {
    let id = domains
        .iter()
        .filter(|d| !d.ood)
        .map(|d| d.name.clone())
        .collect();
    let ood = domains
        .iter()
        .filter(|d| d.ood)
        .map(|d| d.name.clone())
        .collect();
    (id, ood)
}

fn general_skill(layout: &ObsLayout, step: usize, action: usize) -> Skill {
    let mut payload = vec![0.0; layout.skill_dim];
    payload[0] = 1.0;
    payload[2 + step] = 1.0;
    payload[layout.payload_action_offset() + action] = 1.0;
    Skill {
        id: format!("g{step:02}"),
        kind: SkillKind::General,
        domain: None,
        key: vec!["general".into(), format!("step{step}")],
        payload,
        text_key: format!("step{step}-a{action}"),
    }
}

fn specific_skill(
    layout: &ObsLayout,
    config: &EnvConfig,
    domain: &str,
    pattern: usize,
    code: usize,
    descriptors: Vec<String>,
) -> Skill {
    let mut payload = vec![0.0; layout.skill_dim];
    payload[1] = 1.0;
    payload[2 + pattern] = 1.0;
    payload[layout.payload_action_offset() + config.m_prefix_options + code] = 1.0;
    let mut key = vec![domain.to_string(), pattern_token(domain, pattern)];
    key.extend(descriptors);
    Skill {
        id: format!("s-{domain}-p{pattern}"),
        kind: SkillKind::Specific,
        domain: Some(domain.to_string()),
        key,
        payload,
        text_key: format!("{domain}-p{pattern}-c{code}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::generate(&EnvConfig::default()).unwrap()
    }

    fn ctx(w: &World, mode: ContextMode, task: &Task) -> Context {
        w.build_context(mode, Stage::Training, task, 3).unwrap()
    }

    #[test]
    fn default_world_shape() {
        let w = world();
        assert_eq!(w.domains().len(), 7);
        assert_eq!(w.bank().pool_len(Pool::Id), 20);
        assert_eq!(w.bank().pool_len(Pool::Ood), 15);
        assert_eq!(w.bank().general().len(), 3);
        assert_eq!(w.tasks_in(Split::ValOod).count(), 3 * 5 * 8);
        assert_eq!(w.tasks_in(Split::ValId).count(), 4 * 5 * 2);
        assert_eq!(w.tasks_in(Split::TrainId).count(), 4 * 5 * 6);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(world().to_snapshot(), world().to_snapshot());
        let other = World::generate(&EnvConfig {
            seed: 9,
            ..EnvConfig::default()
        })
        .unwrap();
        assert_ne!(world().to_snapshot(), other.to_snapshot());
    }

    #[test]
    fn splits_are_disjoint_and_ood_tasks_in_ood_domains() {
        let w = world();
        let mut seen = BTreeSet::new();
        for t in w.tasks() {
            assert!(seen.insert(t.id.clone()));
            if t.split == Split::ValOod {
                assert!(w.domains()[t.domain_index].ood);
            }
        }
    }

    #[test]
    fn hidden_procedure_follows_rules() {
        let w = world();
        for t in w.tasks() {
            let code = w.domains()[t.domain_index].codes[t.attributes.0];
            let mut expected = w.general_order().to_vec();
            expected.push(w.config().m_prefix_options + code);
            assert_eq!(t.hidden_procedure, expected);
        }
    }

    #[test]
    fn reset_is_fresh_and_repeatable() {
        let w = world();
        let t = w.tasks()[0].clone();
        let c = ctx(&w, ContextMode::NoSkill, &t);
        let (s1, o1) = w.reset(&t.id, &c).unwrap();
        let (_, o2) = w.reset(&t.id, &c).unwrap();
        assert_eq!(o1, o2);
        assert_eq!(s1.invalid_count, 0);
        assert_eq!(s1.step, 0);
        assert!(o1.context_features(w.layout()).iter().all(|&v| v == 0.0));
        assert_eq!(o1.features.len(), w.layout().dim());
    }

    #[test]
    fn unknown_task_is_rejected() {
        let w = world();
        let c = ctx(&w, ContextMode::NoSkill, &w.tasks()[0].clone());
        assert!(matches!(w.reset("nope", &c), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn replaying_the_procedure_succeeds_in_l_steps() {
        let w = world();
        for t in w.tasks().iter().take(20) {
            let c = ctx(&w, ContextMode::Standard, t);
            let (mut s, _) = w.reset(&t.id, &c).unwrap();
            for (i, &a) in t.hidden_procedure.iter().enumerate() {
                let (_, out) = w.step(&mut s, a, &c).unwrap();
                assert_eq!(out.done, i + 1 == t.hidden_procedure.len());
            }
            assert!(s.success && s.done);
            assert_eq!(s.step, w.config().procedure_len);
            assert_eq!(s.executed, t.hidden_procedure);
            assert!(matches!(w.step(&mut s, 0, &c), Err(Error::EpisodeFinished)));
        }
    }

    #[test]
    fn invalid_actions_until_horizon() {
        let w = world();
        let t = w.tasks()[0].clone();
        let c = ctx(&w, ContextMode::NoSkill, &t);
        let (mut s, _) = w.reset(&t.id, &c).unwrap();
        let code_action = w.config().m_prefix_options;
        let mut last = None;
        for _ in 0..w.config().horizon {
            let (_, out) = w.step(&mut s, code_action, &c).unwrap();
            assert!(out.invalid);
            last = Some(out);
        }
        let out = last.unwrap();
        assert!(out.done && !out.success);
        assert_eq!(s.invalid_count, w.config().horizon);
        assert_eq!(s.feedback, Feedback::Premature);
    }

    #[test]
    fn wrong_legal_action_resets_progress() {
        let w = world();
        let t = w.tasks()[0].clone();
        let c = ctx(&w, ContextMode::NoSkill, &t);
        let (mut s, _) = w.reset(&t.id, &c).unwrap();
        w.step(&mut s, t.hidden_procedure[0], &c).unwrap();
        assert_eq!(s.progress(), 1);
        let wrong = (t.hidden_procedure[1] + 1) % w.config().m_prefix_options;
        let (_, out) = w.step(&mut s, wrong, &c).unwrap();
        assert!(!out.invalid);
        assert_eq!(s.progress(), 0);
        assert_eq!(s.feedback, Feedback::Reset);
        assert_eq!(s.invalid_count, 0);
    }

    #[test]
    fn out_of_alphabet_action_errors() {
        let w = world();
        let t = w.tasks()[0].clone();
        let c = ctx(&w, ContextMode::NoSkill, &t);
        let (mut s, _) = w.reset(&t.id, &c).unwrap();
        assert!(matches!(
            w.step(&mut s, 99, &c),
            Err(Error::InvalidAction { .. })
        ));
    }

    #[test]
    fn uniform_policy_matches_closed_form() {
        // Monte-Carlo oracle against the branching product on a T = L = 2 world.
        let config = EnvConfig {
            procedure_len: 2,
            horizon: 2,
            m_prefix_options: 3,
            k_code_options: 4,
            seed: 4,
            ..EnvConfig::default()
        };
        let w = World::generate(&config).unwrap();
        let expected = (1.0 / 3.0) * (1.0 / 4.0);
        assert!((config.single_attempt_guess_probability() - expected).abs() < 1e-15);
        assert!((config.uniform_policy_success_probability() - expected).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tasks: Vec<&Task> = w.tasks_in(Split::TrainId).collect();
        let episodes = 10_000;
        let mut wins = 0usize;
        for e in 0..episodes {
            let t = tasks[e % tasks.len()];
            let c = ctx(&w, ContextMode::NoSkill, t);
            let (mut s, _) = w.reset(&t.id, &c).unwrap();
            while !s.done {
                let legal = w.affordances(&s);
                let a = rng.random_range(legal);
                w.step(&mut s, a, &c).unwrap();
            }
            wins += s.success as usize;
        }
        let rate = wins as f64 / episodes as f64;
        let se = (expected * (1.0 - expected) / episodes as f64).sqrt();
        assert!(
            (rate - expected).abs() < 3.0 * se,
            "rate {rate} vs {expected}"
        );
    }

    #[test]
    fn horizon_dp_matches_enumeration() {
        // Exhaustive enumeration of every legal action sequence, equally weighted
        // per step, versus the dynamic program.
        let config = EnvConfig {
            procedure_len: 3,
            horizon: 5,
            m_prefix_options: 2,
            k_code_options: 3,
            ..EnvConfig::default()
        };
        let w = World::generate(&config).unwrap();
        let t = w.tasks()[0].clone();
        let c = ctx(&w, ContextMode::NoSkill, &t);
        fn walk(w: &World, s: &EnvState, c: &Context) -> f64 {
            if s.done {
                return s.success as u8 as f64;
            }
            let legal = w.affordances(s);
            let n = legal.len() as f64;
            legal
                .map(|a| {
                    let mut next = s.clone();
                    w.step(&mut next, a, c).unwrap();
                    walk(w, &next, c) / n
                })
                .sum()
        }
        let (s, _) = w.reset(&t.id, &c).unwrap();
        let exact = walk(&w, &s, &c);
        assert!((exact - config.uniform_policy_success_probability()).abs() < 1e-12);
    }

    #[test]
    fn context_modes() {
        let w = world();
        let l = *w.layout();
        let t = w.tasks_in(Split::TrainId).next().unwrap().clone();
        let none = ctx(&w, ContextMode::NoSkill, &t);
        assert!(none.features.iter().all(|&v| v == 0.0));
        assert!(none.retrieved.is_empty());

        let std = ctx(&w, ContextMode::Standard, &t);
        let priv_ = ctx(&w, ContextMode::Privileged, &t);
        assert_eq!(std.retrieved, priv_.retrieved);
        for j in 0..l.specific_slots {
            assert_eq!(
                std.features[l.specific_slot(j)],
                priv_.features[l.specific_slot(j)]
            );
        }
        for j in 0..l.general_slots {
            assert!(std.features[l.general_slot(j)].iter().all(|&v| v == 0.0));
            assert_eq!(
                &priv_.features[l.general_slot(j)],
                w.bank().general()[j].payload.as_slice()
            );
        }
        // Intern-ID gives nothing on ID tasks and OOD skills on OOD tasks.
        let intern = ctx(&w, ContextMode::InternId, &t);
        assert!(intern.features.iter().all(|&v| v == 0.0));
        let ood = w.tasks_in(Split::ValOod).next().unwrap().clone();
        let intern_ood = w
            .build_context(ContextMode::InternId, Stage::Inference, &ood, 3)
            .unwrap();
        assert_eq!(intern_ood.pool, Some(Pool::Ood));
        assert_eq!(intern_ood.retrieved.len(), 3);
    }

    #[test]
    fn ood_tasks_retrieve_only_ood_skills() {
        let w = world();
        for t in w.tasks_in(Split::ValOod) {
            let c = w
                .build_context(ContextMode::Standard, Stage::Inference, t, 3)
                .unwrap();
            assert_eq!(c.pool, Some(Pool::Ood));
            for id in &c.retrieved {
                let s = w.bank().get(id).unwrap();
                assert!(w.bank().ood_domains().contains(s.domain.as_ref().unwrap()));
            }
        }
    }

    #[test]
    fn privileged_at_inference_is_a_violation() {
        let w = world();
        let t = w.tasks()[0].clone();
        assert!(matches!(
            w.build_context(ContextMode::Privileged, Stage::Inference, &t, 3),
            Err(Error::ProtocolViolation(_))
        ));
    }

    #[test]
    fn copying_the_retrieved_code_solves_the_task() {
        // Oracle: prefix from the general slots, code from whichever retrieved
        // slot carries the task's pattern.
        let w = world();
        let l = *w.layout();
        for t in w.tasks() {
            let c = ctx(&w, ContextMode::Privileged, t);
            let slot = (0..c.retrieved.len()).find(|&j| {
                c.features[l.specific_slot(j)][2 + t.attributes.0] == 1.0
                    && c.retrieved[j].starts_with(&format!("s-{}-", t.domain))
            });
            let Some(slot) = slot else { continue };
            let (mut s, _) = w.reset(&t.id, &c).unwrap();
            while !s.done {
                let p = s.progress();
                let block = if p + 1 < l.procedure_len {
                    &c.features[l.general_slot(p)]
                } else {
                    &c.features[l.specific_slot(slot)]
                };
                let off = l.payload_action_offset();
                let a = (0..l.n_actions).find(|&a| block[off + a] == 1.0).unwrap();
                w.step(&mut s, a, &c).unwrap();
            }
            assert!(s.success, "{}", t.id);
        }
    }

    #[test]
    fn task_features_alone_cannot_beat_chance_on_ood() {
        // Best guess from ID knowledge: the majority ID code for the same pattern.
        // OOD tables are independent draws, so success stays at 1/k.
        let mut hits = 0usize;
        let mut total = 0usize;
        for seed in 0..300 {
            let w = World::generate(&EnvConfig {
                seed,
                ..EnvConfig::default()
            })
            .unwrap();
            let k = w.config().k_code_options;
            for t in w.tasks_in(Split::ValOod) {
                let mut votes = vec![0usize; k];
                for d in w.domains().iter().filter(|d| !d.ood) {
                    votes[d.codes[t.attributes.0]] += 1;
                }
                let guess = (0..k).max_by_key(|&c| (votes[c], usize::MAX - c)).unwrap();
                hits += (w.domains()[t.domain_index].codes[t.attributes.0] == guess) as usize;
                total += 1;
            }
        }
        let p: f64 = 0.25;
        let rate = hits as f64 / total as f64;
        // Tasks sharing a (domain, pattern) are perfectly correlated, so the
        // effective sample is the number of OOD rule cells (300 * 15).
        let se = (p * (1.0 - p) / (300.0 * 15.0)).sqrt();
        assert!((rate - p).abs() < 3.0 * se, "rate {rate}");
    }

    #[test]
    fn snapshot_round_trip() {
        let w = world();
        let text = w.to_snapshot();
        assert!(text.starts_with("skillworld-v1\n"));
        let back = World::from_snapshot(&text).unwrap();
        assert_eq!(back.to_snapshot(), text);
        assert_eq!(back.tasks(), w.tasks());
    }

    #[test]
    fn config_validation() {
        let bad = EnvConfig {
            horizon: 2,
            procedure_len: 3,
            ..EnvConfig::default()
        };
        assert!(World::generate(&bad).is_err());
        let bad = EnvConfig {
            k_code_options: 1,
            ..EnvConfig::default()
        };
        assert!(World::generate(&bad).is_err());
    }
}
