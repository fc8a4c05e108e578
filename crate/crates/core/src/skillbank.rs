//! Skill bank: general and domain-specific skills, hashed bag-of-tokens
//! embeddings, cosine top-K retrieval and the ID/OOD partition of the
//! specific-skill pool.
//!
//! The retrieval key (the tokens an embedding hashes) is kept separate from
//! the payload (the feature vector a policy sees), so retrieval quality and
//! skill utility can be varied independently.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 32;
pub const SKILLBANK_HEADER: &str = "skillbank-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillKind {
    General,
    Specific,
}

impl SkillKind {
    fn as_str(self) -> &'static str {
        match self {
            SkillKind::General => "general",
            SkillKind::Specific => "specific",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skill {
    pub id: String,
    pub kind: SkillKind,
    /// Present exactly when `kind == Specific`.
    pub domain: Option<String>,
    /// Retrieval key tokens.
    pub key: Vec<String>,
    pub payload: Vec<f64>,
    pub text_key: String,
}

impl Skill {
    fn validate(&self, d_skill: usize) -> Result<()> {
        let bad = |reason: &str| Error::InvalidSkill {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        match (self.kind, &self.domain) {
            (SkillKind::General, Some(_)) => return Err(bad("general skill carries a domain")),
            (SkillKind::Specific, None) => return Err(bad("specific skill has no domain")),
            _ => {}
        }
        if self.payload.len() != d_skill {
            return Err(bad(&format!(
                "payload has {} entries, bank uses {d_skill}",
                self.payload.len()
            )));
        }
        if self.payload.iter().any(|v| !v.is_finite()) {
            return Err(bad("payload is not finite"));
        }
        if self.key.is_empty() {
            return Err(bad("empty retrieval key"));
        }
        Ok(())
    }
}

/// A dense embedding with its Euclidean norm cached.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    vector: Vec<f64>,
    norm: f64,
}

impl Embedding {
    pub fn from_vector(vector: Vec<f64>) -> Self {
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self { vector, norm }
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashed bag-of-tokens projection into `dim` dimensions.
///
/// Every token contributes a pseudo-random vector with entries uniform in
/// [-1, 1), seeded by the FNV-1a hash of its bytes; the embedding is their sum.
/// Only integer arithmetic feeds the generator, so results are identical on
/// every platform.
pub fn embed<S: AsRef<str>>(key: &[S], dim: usize) -> Result<Embedding> {
    if key.is_empty() {
        return Err(Error::InvalidKey("empty key".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidKey("embedding dimension is zero".into()));
    }
    let mut vector = vec![0.0; dim];
    for token in key {
        let mut state = fnv1a64(token.as_ref().as_bytes());
        for v in vector.iter_mut() {
            let bits = splitmix64(&mut state) >> 11;
            *v += (bits as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0;
        }
    }
    let emb = Embedding::from_vector(vector);
    if !(emb.norm > 0.0) || !emb.norm.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(emb)
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.norm == 0.0 || b.norm == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    if a.vector.len() != b.vector.len() {
        return Err(Error::Shape {
            expected: a.vector.len(),
            got: b.vector.len(),
        });
    }
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
    Ok((dot / (a.norm * b.norm)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Id,
    Ood,
}

impl Pool {
    pub fn as_str(self) -> &'static str {
        match self {
            Pool::Id => "id",
            Pool::Ood => "ood",
        }
    }
}

#[derive(Debug, Clone)]
struct Indexed {
    skill: Skill,
    embedding: Embedding,
}

/// Skills partitioned into general, ID-specific and OOD-specific pools.
/// Immutable after construction.
#[derive(Debug, Clone)]
pub struct SkillBank {
    general: Vec<Skill>,
    specific_id: Vec<Indexed>,
    specific_ood: Vec<Indexed>,
    id_domains: BTreeSet<String>,
    ood_domains: BTreeSet<String>,
    k_default: usize,
    embed_dim: usize,
    skill_dim: usize,
}

impl SkillBank {
    /// Builds a bank and partitions `specific` by domain.
    pub fn new(
        general: Vec<Skill>,
        specific: Vec<Skill>,
        id_domains: BTreeSet<String>,
        ood_domains: BTreeSet<String>,
        k_default: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        if k_default == 0 {
            return Err(Error::Config(
                "retrieval capacity K must be at least 1".into(),
            ));
        }
        let skill_dim = general
            .iter()
            .chain(&specific)
            .map(|s| s.payload.len())
            .next()
            .unwrap_or(0);
        let mut seen = HashSet::new();
        for skill in general.iter().chain(&specific) {
            skill.validate(skill_dim)?;
            if !seen.insert(skill.id.as_str()) {
                return Err(Error::DuplicateSkill(skill.id.clone()));
            }
        }
        if let Some(s) = general.iter().find(|s| s.kind != SkillKind::General) {
            return Err(Error::InvalidSkill {
                id: s.id.clone(),
                reason: "listed as general".into(),
            });
        }
        if let Some(s) = specific.iter().find(|s| s.kind != SkillKind::Specific) {
            return Err(Error::InvalidSkill {
                id: s.id.clone(),
                reason: "listed as specific".into(),
            });
        }
        let mut bank = SkillBank {
            general,
            specific_id: Vec::new(),
            specific_ood: Vec::new(),
            id_domains: BTreeSet::new(),
            ood_domains: BTreeSet::new(),
            k_default,
            embed_dim,
            skill_dim,
        };
        let indexed = specific
            .into_iter()
            .map(|skill| {
                let embedding = embed(&skill.key, embed_dim)?;
                Ok(Indexed { skill, embedding })
            })
            .collect::<Result<Vec<_>>>()?;
        bank.assign(indexed, id_domains, ood_domains)?;
        Ok(bank)
    }

    fn assign(
        &mut self,
        indexed: Vec<Indexed>,
        id_domains: BTreeSet<String>,
        ood_domains: BTreeSet<String>,
    ) -> Result<()> {
        if let Some(d) = id_domains.intersection(&ood_domains).next() {
            return Err(Error::OverlappingDomains(d.clone()));
        }
        let mut id = Vec::new();
        let mut ood = Vec::new();
        for entry in indexed {
            let domain = entry.skill.domain.clone().unwrap_or_default();
            if id_domains.contains(&domain) {
                id.push(entry);
            } else if ood_domains.contains(&domain) {
                ood.push(entry);
            } else {
                return Err(Error::UnassignedDomain {
                    skill: entry.skill.id.clone(),
                    domain,
                });
            }
        }
        self.specific_id = id;
        self.specific_ood = ood;
        self.id_domains = id_domains;
        self.ood_domains = ood_domains;
        Ok(())
    }

    /// Re-partitions every specific skill over new domain sets. General skills
    /// are untouched.
    pub fn partition(
        &self,
        id_domains: &BTreeSet<String>,
        ood_domains: &BTreeSet<String>,
    ) -> Result<SkillBank> {
        let mut out = SkillBank {
            general: self.general.clone(),
            specific_id: Vec::new(),
            specific_ood: Vec::new(),
            id_domains: BTreeSet::new(),
            ood_domains: BTreeSet::new(),
            k_default: self.k_default,
            embed_dim: self.embed_dim,
            skill_dim: self.skill_dim,
        };
        let all = self
            .specific_id
            .iter()
            .chain(&self.specific_ood)
            .cloned()
            .collect();
        out.assign(all, id_domains.clone(), ood_domains.clone())?;
        Ok(out)
    }

    pub fn general(&self) -> &[Skill] {
        &self.general
    }

    pub fn specific(&self, pool: Pool) -> impl Iterator<Item = &Skill> {
        self.pool(pool).iter().map(|e| &e.skill)
    }

    pub fn pool_len(&self, pool: Pool) -> usize {
        self.pool(pool).len()
    }

    pub fn id_domains(&self) -> &BTreeSet<String> {
        &self.id_domains
    }

    pub fn ood_domains(&self) -> &BTreeSet<String> {
        &self.ood_domains
    }

    pub fn k_default(&self) -> usize {
        self.k_default
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn skill_dim(&self) -> usize {
        self.skill_dim
    }

    pub fn get(&self, id: &str) -> Option<&Skill> {
        self.general
            .iter()
            .chain(self.specific(Pool::Id))
            .chain(self.specific(Pool::Ood))
            .find(|s| s.id == id)
    }

    fn pool(&self, pool: Pool) -> &[Indexed] {
        match pool {
            Pool::Id => &self.specific_id,
            Pool::Ood => &self.specific_ood,
        }
    }

    /// Top-K specific skills of `pool` by descending cosine to `query`, ties
    /// broken by ascending skill id. Never looks outside `pool`.
    pub fn retrieve_topk(&self, pool: Pool, query: &Embedding, k: usize) -> Result<Vec<&Skill>> {
        if k == 0 {
            return Err(Error::Config(
                "retrieval capacity K must be at least 1".into(),
            ));
        }
        let entries = self.pool(pool);
        if entries.is_empty() {
            return Err(Error::EmptyPool(pool.as_str()));
        }
        let mut scored = entries
            .iter()
            .map(|e| Ok((cosine(query, &e.embedding)?, &e.skill)))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        Ok(scored.into_iter().take(k).map(|(_, s)| s).collect())
    }

    pub fn retrieve_for_key<S: AsRef<str>>(
        &self,
        pool: Pool,
        key: &[S],
        k: usize,
    ) -> Result<Vec<&Skill>> {
        let query = embed(key, self.embed_dim)?;
        self.retrieve_topk(pool, &query, k)
    }

    /// Serializes to the line-oriented `skillbank-v1` format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let join = |set: &BTreeSet<String>| set.iter().cloned().collect::<Vec<_>>().join(",");
        writeln!(out, "{SKILLBANK_HEADER}").unwrap();
        writeln!(out, "k_default\t{}", self.k_default).unwrap();
        writeln!(out, "embed_dim\t{}", self.embed_dim).unwrap();
        writeln!(out, "id_domains\t{}", join(&self.id_domains)).unwrap();
        writeln!(out, "ood_domains\t{}", join(&self.ood_domains)).unwrap();
        for skill in self
            .general
            .iter()
            .chain(self.specific(Pool::Id))
            .chain(self.specific(Pool::Ood))
        {
            let payload = skill
                .payload
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",");
            writeln!(
                out,
                "skill\t{}\t{}\t{}\t{}\t{}\t{}",
                skill.id,
                skill.kind.as_str(),
                skill.domain.as_deref().unwrap_or("-"),
                skill.key.join(","),
                skill.text_key,
                payload
            )
            .unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<SkillBank> {
        let mut lines = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some(h) if h.trim() == SKILLBANK_HEADER => {}
            other => {
                return Err(Error::Parse(format!(
                    "expected header {SKILLBANK_HEADER}, found {other:?}"
                )))
            }
        }
        let mut k_default = None;
        let mut embed_dim = None;
        let mut id_domains = BTreeSet::new();
        let mut ood_domains = BTreeSet::new();
        let mut general = Vec::new();
        let mut specific = Vec::new();
        let split_set = |s: &str| -> BTreeSet<String> {
            s.split(',')
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .collect()
        };
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Parse(format!("bad integer {s:?}: {e}")))
        };
        for line in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields[0] {
                "k_default" if fields.len() == 2 => k_default = Some(parse_usize(fields[1])?),
                "embed_dim" if fields.len() == 2 => embed_dim = Some(parse_usize(fields[1])?),
                "id_domains" => id_domains = split_set(fields.get(1).copied().unwrap_or("")),
                "ood_domains" => ood_domains = split_set(fields.get(1).copied().unwrap_or("")),
                "skill" if fields.len() == 7 => {
                    let kind = match fields[2] {
                        "general" => SkillKind::General,
                        "specific" => SkillKind::Specific,
                        other => return Err(Error::Parse(format!("unknown skill kind {other:?}"))),
                    };
                    let domain = (fields[3] != "-").then(|| fields[3].to_string());
                    let key = fields[4]
                        .split(',')
                        .filter(|t| !t.is_empty())
                        .map(str::to_string)
                        .collect();
                    let payload = fields[6]
                        .split(',')
                        .map(|v| {
                            v.parse::<f64>()
                                .map_err(|e| Error::Parse(format!("bad payload value {v:?}: {e}")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let skill = Skill {
                        id: fields[1].to_string(),
                        kind,
                        domain,
                        key,
                        payload,
                        text_key: fields[5].to_string(),
                    };
                    match kind {
                        SkillKind::General => general.push(skill),
                        SkillKind::Specific => specific.push(skill),
                    }
                }
                _ => return Err(Error::Parse(format!("malformed skillbank line: {line:?}"))),
            }
        }
        let k_default = k_default.ok_or_else(|| Error::Parse("missing k_default".into()))?;
        let embed_dim = embed_dim.ok_or_else(|| Error::Parse("missing embed_dim".into()))?;
        SkillBank::new(
            general,
            specific,
            id_domains,
            ood_domains,
            k_default,
            embed_dim,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specific(id: &str, domain: &str, key: &[&str]) -> Skill {
        Skill {
            id: id.into(),
            kind: SkillKind::Specific,
            domain: Some(domain.into()),
            key: key.iter().map(|s| s.to_string()).collect(),
            payload: vec![0.0, 1.0],
            text_key: id.into(),
        }
    }

    fn domains(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn bank_of(skills: Vec<Skill>, k: usize) -> SkillBank {
        SkillBank::new(vec![], skills, domains(&["a", "b"]), domains(&["c"]), k, 32).unwrap()
    }

    #[test]
    fn embed_is_deterministic_and_nonzero() {
        let a = embed(&["cool", "fridge"], 32).unwrap();
        let b = embed(&["cool", "fridge"], 32).unwrap();
        assert_eq!(a.vector(), b.vector());
        assert!(a.norm() > 0.0);
        let direct = a.vector().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((direct - a.norm()).abs() < 1e-9);
    }

    #[test]
    fn embed_rejects_empty_key() {
        let empty: [&str; 0] = [];
        assert!(matches!(embed(&empty, 32), Err(Error::InvalidKey(_))));
    }

    #[test]
    fn distinct_keys_are_not_parallel() {
        // Independent oracle: rebuild both vectors token by token.
        let oracle = |tok: &str| {
            let mut s = fnv1a64(tok.as_bytes());
            (0..32)
                .map(|_| ((splitmix64(&mut s) >> 11) as f64) / 9007199254740992.0 * 2.0 - 1.0)
                .collect::<Vec<_>>()
        };
        let a = oracle("cool_fridge");
        let b = oracle("heat_microwave");
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let expected = dot / (na * nb);
        let got = cosine(
            &embed(&["cool_fridge"], 32).unwrap(),
            &embed(&["heat_microwave"], 32).unwrap(),
        )
        .unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!(got < 1.0);
    }

    #[test]
    fn cosine_worked_values() {
        let v = Embedding::from_vector(vec![0.3, -1.2, 4.0]);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let x = Embedding::from_vector(vec![1.0, 0.0]);
        let y = Embedding::from_vector(vec![0.0, 1.0]);
        assert_eq!(cosine(&x, &y).unwrap(), 0.0);
        let d = Embedding::from_vector(vec![1.0, 1.0]);
        assert!((cosine(&d, &x).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let z = Embedding::from_vector(vec![0.0, 0.0]);
        let x = Embedding::from_vector(vec![1.0, 0.0]);
        assert!(matches!(cosine(&z, &x), Err(Error::DegenerateEmbedding)));
    }

    #[test]
    fn retrieval_returns_whole_pool_when_k_exceeds_it() {
        let bank = bank_of(
            vec![
                specific("s1", "a", &["x"]),
                specific("s2", "a", &["y"]),
                specific("s3", "b", &["z"]),
            ],
            5,
        );
        let got = bank.retrieve_for_key(Pool::Id, &["x"], 5).unwrap();
        assert_eq!(got.len(), 3);
    }

    #[test]
    fn exact_key_match_ranks_first() {
        let bank = bank_of(
            vec![
                specific("s1", "a", &["pick", "apple"]),
                specific("s2", "a", &["cool", "fridge"]),
                specific("s3", "b", &["heat", "mug"]),
            ],
            3,
        );
        let got = bank
            .retrieve_for_key(Pool::Id, &["cool", "fridge"], 3)
            .unwrap();
        assert_eq!(got[0].id, "s2");
    }

    #[test]
    fn topk_matches_exhaustive_sort() {
        let skills: Vec<Skill> = (0..5)
            .map(|i| specific(&format!("s{i}"), "a", &[&format!("tok{i}"), "shared"]))
            .collect();
        let bank = bank_of(skills.clone(), 3);
        let query = ["tok2", "shared", "extra"];
        let got: Vec<String> = bank
            .retrieve_for_key(Pool::Id, &query, 3)
            .unwrap()
            .into_iter()
            .map(|s| s.id.clone())
            .collect();
        // Brute force: score every skill independently and sort.
        let q = embed(&query, 32).unwrap();
        let mut all: Vec<(f64, String)> = skills
            .iter()
            .map(|s| {
                (
                    cosine(&q, &embed(&s.key, 32).unwrap()).unwrap(),
                    s.id.clone(),
                )
            })
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: Vec<String> = all.into_iter().take(3).map(|(_, id)| id).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let bank = bank_of(
            vec![
                specific("s9", "a", &["same"]),
                specific("s1", "a", &["same"]),
            ],
            2,
        );
        let got = bank.retrieve_for_key(Pool::Id, &["same"], 2).unwrap();
        assert_eq!(got[0].id, "s1");
        assert_eq!(got[1].id, "s9");
    }

    #[test]
    fn retrieval_never_crosses_pools() {
        let bank = bank_of(
            vec![specific("s1", "a", &["q"]), specific("s2", "c", &["q"])],
            3,
        );
        let ood = bank.retrieve_for_key(Pool::Ood, &["q"], 3).unwrap();
        assert_eq!(ood.len(), 1);
        assert_eq!(ood[0].domain.as_deref(), Some("c"));
    }

    #[test]
    fn empty_pool_is_an_error() {
        let bank = SkillBank::new(
            vec![],
            vec![specific("s1", "a", &["q"])],
            domains(&["a"]),
            domains(&[]),
            3,
            32,
        )
        .unwrap();
        assert_eq!(bank.pool_len(Pool::Ood), 0);
        assert!(matches!(
            bank.retrieve_for_key(Pool::Ood, &["q"], 3),
            Err(Error::EmptyPool(_))
        ));
    }

    #[test]
    fn partition_counts_follow_domains() {
        let names = ["d0", "d1", "d2", "d3", "d4", "d5", "d6"];
        let mut skills = Vec::new();
        for d in names {
            for j in 0..5 {
                skills.push(specific(&format!("{d}-{j}"), d, &[d]));
            }
        }
        let bank = SkillBank::new(vec![], skills, domains(&names), domains(&[]), 3, 32).unwrap();
        let split = bank
            .partition(&domains(&names[..4]), &domains(&names[4..]))
            .unwrap();
        assert_eq!(split.pool_len(Pool::Id), 20);
        assert_eq!(split.pool_len(Pool::Ood), 15);
    }

    #[test]
    fn partition_rejects_overlap_and_unassigned() {
        let bank = bank_of(vec![specific("s1", "a", &["q"])], 3);
        assert!(matches!(
            bank.partition(&domains(&["a"]), &domains(&["a"])),
            Err(Error::OverlappingDomains(_))
        ));
        assert!(matches!(
            bank.partition(&domains(&["b"]), &domains(&["c"])),
            Err(Error::UnassignedDomain { .. })
        ));
    }

    #[test]
    fn rejects_kind_domain_mismatch_and_duplicates() {
        let mut g = specific("g", "a", &["q"]);
        g.kind = SkillKind::General;
        assert!(SkillBank::new(vec![g], vec![], domains(&["a"]), domains(&[]), 3, 32).is_err());
        let dup = vec![specific("s", "a", &["q"]), specific("s", "a", &["r"])];
        assert!(matches!(
            SkillBank::new(vec![], dup, domains(&["a"]), domains(&[]), 3, 32),
            Err(Error::DuplicateSkill(_))
        ));
    }

    #[test]
    fn text_round_trip() {
        let mut g = specific("g0", "a", &["first", "step"]);
        g.kind = SkillKind::General;
        g.domain = None;
        g.payload = vec![0.1, -2.5e-7];
        let bank = SkillBank::new(
            vec![g],
            vec![
                specific("s1", "a", &["q"]),
                specific("s2", "c", &["r", "t"]),
            ],
            domains(&["a"]),
            domains(&["c"]),
            3,
            32,
        )
        .unwrap();
        let text = bank.to_text();
        assert!(text.starts_with("skillbank-v1\n"));
        let back = SkillBank::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.general()[0].payload, vec![0.1, -2.5e-7]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cosine_symmetric_and_bounded(
                a in proptest::collection::vec(-10.0f64..10.0, 4),
                b in proptest::collection::vec(-10.0f64..10.0, 4),
            ) {
                let ea = Embedding::from_vector(a);
                let eb = Embedding::from_vector(b);
                prop_assume!(ea.norm() > 1e-6 && eb.norm() > 1e-6);
                let ab = cosine(&ea, &eb).unwrap();
                let ba = cosine(&eb, &ea).unwrap();
                prop_assert!(ab.abs() <= 1.0);
                prop_assert!((ab - ba).abs() <= 1e-12);
            }

            #[test]
            fn retrieval_is_repeatable(tokens in proptest::collection::vec("[a-e]{1,3}", 1..4)) {
                let bank = bank_of(
                    (0..6).map(|i| specific(&format!("s{i}"), if i % 2 == 0 { "a" } else { "b" },
                        &[&format!("{}", (b'a' + i as u8) as char), "c"])).collect(),
                    3,
                );
                let first: Vec<String> = bank.retrieve_for_key(Pool::Id, &tokens, 3).unwrap()
                    .into_iter().map(|s| s.id.clone()).collect();
                let second: Vec<String> = bank.retrieve_for_key(Pool::Id, &tokens, 3).unwrap()
                    .into_iter().map(|s| s.id.clone()).collect();
                prop_assert_eq!(first, second);
            }
        }
    }
}
