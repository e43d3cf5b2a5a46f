//! Fixed-capacity pool of individuals and the k-nearest-neighbor novelty
//! admission rule.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::embedding::{base64_le, cosine_distance, EmbeddingVector};
use crate::emitters::EmitterId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IndividualId(pub u64);

impl fmt::Display for IndividualId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// How a child came to exist. Generation-0 individuals have none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lineage {
    /// `emitter` is absent only under the emitter-less selection strategy.
    Mutation {
        parent: IndividualId,
        emitter: Option<EmitterId>,
    },
    Crossover { parents: [IndividualId; 2] },
}

impl Lineage {
    pub fn parents(&self) -> Vec<IndividualId> {
        match self {
            Lineage::Mutation { parent, .. } => vec![*parent],
            Lineage::Crossover { parents } => parents.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: IndividualId,
    pub prompt: String,
    pub artifact_ref: String,
    /// Embedding of the generated artifact; the vector novelty is measured on.
    #[serde(with = "base64_le")]
    pub embedding: EmbeddingVector,
    /// Text embedding of `prompt`, kept for the relevance metric.
    #[serde(
        default,
        with = "base64_le::option",
        skip_serializing_if = "Option::is_none"
    )]
    pub prompt_embedding: Option<EmbeddingVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<Lineage>,
    pub born_generation: u32,
}

impl Individual {
    pub fn seed(id: IndividualId, prompt: String, artifact_ref: String, embedding: EmbeddingVector) -> Self {
        Self {
            id,
            prompt,
            artifact_ref,
            embedding,
            prompt_embedding: None,
            lineage: None,
            born_generation: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        self.embedding.ensure_nonzero()?;
        match (&self.lineage, self.born_generation) {
            (None, g) if g > 0 => Err(Error::domain(format!(
                "individual {} born in generation {g} has no lineage",
                self.id
            ))),
            (Some(_), 0) => Err(Error::domain(format!(
                "generation-0 individual {} carries a lineage",
                self.id
            ))),
            (Some(Lineage::Crossover { parents }), _) if parents[0] == parents[1] => Err(
                Error::domain(format!("crossover child {} has identical parents", self.id)),
            ),
            _ => Ok(()),
        }
    }
}

/// Which pool the candidate's novelty and the members' novelty are measured in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateScoring {
    /// Candidate scored against the pool as-is; members exclude themselves.
    #[default]
    AgainstPool,
    /// Candidate is hypothetically inserted first; all N+1 are scored
    /// leave-one-out and the lowest existing member is the eviction target.
    LeaveOneIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyReport {
    pub per_member: Vec<(IndividualId, f64)>,
    pub min_index: usize,
    pub min_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum InsertOutcome {
    /// Pool was below capacity. `candidate_score` is absent for the first member.
    Filled { candidate_score: Option<f64> },
    Replaced {
        evicted: IndividualId,
        candidate_score: f64,
        min_score: f64,
    },
    Rejected { candidate_score: f64, min_score: f64 },
}

impl InsertOutcome {
    pub fn accepted(&self) -> bool {
        !matches!(self, InsertOutcome::Rejected { .. })
    }

    pub fn candidate_score(&self) -> Option<f64> {
        match self {
            InsertOutcome::Filled { candidate_score } => *candidate_score,
            InsertOutcome::Replaced { candidate_score, .. }
            | InsertOutcome::Rejected { candidate_score, .. } => Some(*candidate_score),
        }
    }

    pub fn min_score(&self) -> Option<f64> {
        match self {
            InsertOutcome::Filled { .. } => None,
            InsertOutcome::Replaced { min_score, .. } | InsertOutcome::Rejected { min_score, .. } => {
                Some(*min_score)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoolRecord")]
pub struct Pool {
    members: Vec<Individual>,
    capacity: usize,
    k: usize,
    #[serde(default)]
    scoring: CandidateScoring,
}

#[derive(Deserialize)]
struct PoolRecord {
    members: Vec<Individual>,
    capacity: usize,
    k: usize,
    #[serde(default)]
    scoring: CandidateScoring,
}

impl TryFrom<PoolRecord> for Pool {
    type Error = Error;

    fn try_from(r: PoolRecord) -> Result<Self> {
        let mut pool = Pool::new(r.capacity, r.k)?.with_scoring(r.scoring);
        if r.members.len() > r.capacity {
            return Err(Error::domain(format!(
                "pool holds {} members but capacity is {}",
                r.members.len(),
                r.capacity
            )));
        }
        for m in r.members {
            pool.push_checked(m)?;
        }
        Ok(pool)
    }
}

impl Pool {
    pub fn new(capacity: usize, k: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("pool capacity must be at least 1"));
        }
        if k == 0 {
            return Err(Error::config("neighbor count k must be at least 1"));
        }
        Ok(Self {
            members: Vec::with_capacity(capacity),
            capacity,
            k,
            scoring: CandidateScoring::AgainstPool,
        })
    }

    pub fn with_scoring(mut self, scoring: CandidateScoring) -> Self {
        self.scoring = scoring;
        self
    }

    pub fn members(&self) -> &[Individual] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn scoring(&self) -> CandidateScoring {
        self.scoring
    }

    pub fn is_full(&self) -> bool {
        self.members.len() >= self.capacity
    }

    pub fn dim(&self) -> Option<usize> {
        self.members.first().map(|m| m.embedding.dim())
    }

    pub fn get(&self, id: IndividualId) -> Option<&Individual> {
        self.members.iter().find(|m| m.id == id)
    }

    pub fn contains(&self, id: IndividualId) -> bool {
        self.get(id).is_some()
    }

    pub fn embeddings(&self) -> Vec<EmbeddingVector> {
        self.members.iter().map(|m| m.embedding.clone()).collect()
    }

    pub fn ids(&self) -> Vec<IndividualId> {
        self.members.iter().map(|m| m.id).collect()
    }

    fn check_dim(&self, e: &EmbeddingVector) -> Result<()> {
        match self.dim() {
            Some(d) if d != e.dim() => Err(Error::DimensionMismatch {
                expected: d,
                found: e.dim(),
            }),
            _ => Ok(()),
        }
    }

    fn push_checked(&mut self, individual: Individual) -> Result<()> {
        self.check_dim(&individual.embedding)?;
        individual.validate()?;
        if self.contains(individual.id) {
            return Err(Error::domain(format!("duplicate individual id {}", individual.id)));
        }
        self.members.push(individual);
        Ok(())
    }

    /// Appends without any novelty check. Used when replaying a recorded
    /// `Filled` outcome or seeding generation 0.
    pub fn fill(&mut self, individual: Individual) -> Result<()> {
        if self.is_full() {
            return Err(Error::domain("pool is at capacity"));
        }
        self.push_checked(individual)
    }

    /// Removes `evicted` and appends `individual`; replays a recorded `Replaced`.
    pub fn replace(&mut self, evicted: IndividualId, individual: Individual) -> Result<()> {
        let pos = self
            .members
            .iter()
            .position(|m| m.id == evicted)
            .ok_or_else(|| Error::domain(format!("evicted id {evicted} is not in the pool")))?;
        self.check_dim(&individual.embedding)?;
        individual.validate()?;
        let old = self.members.remove(pos);
        if let Err(e) = self.push_checked(individual) {
            self.members.insert(pos, old);
            return Err(e);
        }
        Ok(())
    }

    /// Mean cosine distance from `candidate` to its k′ = min(k, |pool \ exclude|)
    /// nearest members.
    pub fn novelty_score(&self, candidate: &EmbeddingVector, exclude: Option<IndividualId>) -> Result<f64> {
        self.check_dim(candidate)?;
        let dists = self
            .members
            .iter()
            .filter(|m| Some(m.id) != exclude)
            .map(|m| cosine_distance(candidate, &m.embedding))
            .collect::<Result<Vec<_>>>()?;
        mean_of_nearest(dists, self.k)
            .ok_or_else(|| Error::domain("novelty of a candidate against an empty pool"))
    }

    /// Scores every member against the rest of the pool.
    pub fn score_pool(&self) -> Result<NoveltyReport> {
        if self.members.len() < 2 {
            return Err(Error::domain(format!(
                "scoring a pool needs at least 2 members, have {}",
                self.members.len()
            )));
        }
        let embeddings: Vec<&EmbeddingVector> = self.members.iter().map(|m| &m.embedding).collect();
        let scores = leave_one_out_scores(&embeddings, self.k)?;
        let (min_index, min_score) = argmin_first(&scores);
        Ok(NoveltyReport {
            per_member: self.members.iter().map(|m| m.id).zip(scores).collect(),
            min_index,
            min_score,
        })
    }

    /// Lowest member novelty, or `None` for pools smaller than two.
    pub fn min_novelty(&self) -> Result<Option<f64>> {
        if self.members.len() < 2 {
            return Ok(None);
        }
        Ok(Some(self.score_pool()?.min_score))
    }

    /// Admission rule: fill while below capacity, otherwise replace the lowest
    /// scorer iff the candidate is strictly more novel.
    pub fn try_insert(&mut self, candidate: Individual) -> Result<InsertOutcome> {
        self.check_dim(&candidate.embedding)?;
        candidate.validate()?;
        if self.contains(candidate.id) {
            return Err(Error::domain(format!("duplicate individual id {}", candidate.id)));
        }

        if !self.is_full() {
            let candidate_score = if self.is_empty() {
                None
            } else {
                Some(self.novelty_score(&candidate.embedding, None)?)
            };
            self.members.push(candidate);
            return Ok(InsertOutcome::Filled { candidate_score });
        }

        let (candidate_score, min_index, min_score) = match self.scoring {
            CandidateScoring::AgainstPool => {
                let s_c = self.novelty_score(&candidate.embedding, None)?;
                let report = self.score_pool()?;
                (s_c, report.min_index, report.min_score)
            }
            CandidateScoring::LeaveOneIn => {
                let mut all: Vec<&EmbeddingVector> = self.members.iter().map(|m| &m.embedding).collect();
                all.push(&candidate.embedding);
                let scores = leave_one_out_scores(&all, self.k)?;
                let s_c = scores[scores.len() - 1];
                let (min_index, min_score) = argmin_first(&scores[..scores.len() - 1]);
                (s_c, min_index, min_score)
            }
        };

        if candidate_score > min_score {
            let evicted = self.members.remove(min_index).id;
            self.members.push(candidate);
            Ok(InsertOutcome::Replaced {
                evicted,
                candidate_score,
                min_score,
            })
        } else {
            Ok(InsertOutcome::Rejected {
                candidate_score,
                min_score,
            })
        }
    }
}

/// Sorts ascending (stable, so equal distances keep insertion order) and
/// averages the first min(k, len). `None` when `dists` is empty.
fn mean_of_nearest(mut dists: Vec<f64>, k: usize) -> Option<f64> {
    if dists.is_empty() {
        return None;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let take = k.min(dists.len());
    Some(dists[..take].iter().sum::<f64>() / take as f64)
}

fn leave_one_out_scores(embeddings: &[&EmbeddingVector], k: usize) -> Result<Vec<f64>> {
    let n = embeddings.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = cosine_distance(embeddings[i], embeddings[j])?;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let row = (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).collect();
            mean_of_nearest(row, k).unwrap_or(0.0)
        })
        .collect())
}

/// Index and value of the minimum; ties resolve to the earliest index.
fn argmin_first(scores: &[f64]) -> (usize, f64) {
    let mut best = (0, scores[0]);
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s < best.1 {
            best = (i, s);
        }
    }
    best
}
