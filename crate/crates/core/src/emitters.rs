//! Emitter registry and the emitter selection strategies (none, fixed,
//! random, UCB1 bandit).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::InsertOutcome;

pub type EmitterId = u32;

/// A named mutation directive inserted into the mutation instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Emitter {
    pub id: EmitterId,
    pub directive: String,
}

const BUILTIN_DIRECTIVES: [&str; 10] = [
    "Completely change the composition.",
    "Completely change the style.",
    "Completely change the mood.",
    "Completely change the lighting.",
    "Completely change the atmosphere.",
    "Completely change the artistic medium.",
    "Add additional elements, while retaining the primary focus.",
    "Simplify and remove unnecessary information. Be concise.",
    "Come up with an artist to make it similar to.",
    "Suggest a novel color scheme.",
];

/// The ten default emitters, ids 1 through 10.
pub fn builtin_emitters() -> Vec<Emitter> {
    BUILTIN_DIRECTIVES
        .iter()
        .zip(1..)
        .map(|(d, id)| Emitter {
            id,
            directive: (*d).to_string(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmitterRegistry {
    emitters: Vec<Emitter>,
}

impl Default for EmitterRegistry {
    fn default() -> Self {
        Self {
            emitters: builtin_emitters(),
        }
    }
}

impl EmitterRegistry {
    pub fn new(emitters: Vec<Emitter>) -> Result<Self> {
        if emitters.is_empty() {
            return Err(Error::config("emitter registry is empty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &emitters {
            if e.directive.trim().is_empty() {
                return Err(Error::config(format!("emitter {} has an empty directive", e.id)));
            }
            if !seen.insert(e.id) {
                return Err(Error::config(format!("duplicate emitter id {}", e.id)));
            }
        }
        Ok(Self { emitters })
    }

    /// Registry from bare directive strings, numbered from 1 in list order.
    pub fn from_directives<S: AsRef<str>>(directives: &[S]) -> Result<Self> {
        Self::new(
            directives
                .iter()
                .zip(1..)
                .map(|(d, id)| Emitter {
                    id,
                    directive: d.as_ref().to_string(),
                })
                .collect(),
        )
    }

    pub fn emitters(&self) -> &[Emitter] {
        &self.emitters
    }

    pub fn len(&self) -> usize {
        self.emitters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emitters.is_empty()
    }

    pub fn get(&self, id: EmitterId) -> Option<&Emitter> {
        self.emitters.iter().find(|e| e.id == id)
    }

    pub fn validate_strategy(&self, strategy: &SelectionStrategy) -> Result<()> {
        match *strategy {
            SelectionStrategy::Fixed { emitter } if self.get(emitter).is_none() => Err(Error::config(
                format!("fixed emitter {emitter} is not in the registry"),
            )),
            SelectionStrategy::Bandit { c } if !(c > 0.0 && c.is_finite()) => Err(Error::config(
                format!("bandit exploration constant must be positive, got {c}"),
            )),
            _ => Ok(()),
        }
    }

    /// Picks the emitter for the next mutation, or `None` under the
    /// emitter-less strategy.
    pub fn select<R: Rng + ?Sized>(
        &self,
        strategy: &SelectionStrategy,
        stats: &EmitterStats,
        rng: &mut R,
    ) -> Result<Option<&Emitter>> {
        self.validate_strategy(strategy)?;
        Ok(match *strategy {
            SelectionStrategy::None => None,
            SelectionStrategy::Fixed { emitter } => self.get(emitter),
            SelectionStrategy::Random => Some(&self.emitters[rng.random_range(0..self.emitters.len())]),
            SelectionStrategy::Bandit { c } => Some(self.ucb1(stats, c)),
        })
    }

    fn ucb1(&self, stats: &EmitterStats, c: f64) -> &Emitter {
        let mut by_id: Vec<&Emitter> = self.emitters.iter().collect();
        by_id.sort_by_key(|e| e.id);
        if let Some(e) = by_id.iter().find(|e| stats.arm(e.id).pulls == 0) {
            return e;
        }
        let total: u64 = by_id.iter().map(|e| stats.arm(e.id).pulls).sum();
        let ln_total = (total as f64).ln();
        let mut best = by_id[0];
        let mut best_score = f64::NEG_INFINITY;
        for e in by_id {
            let arm = stats.arm(e.id);
            let n = arm.pulls as f64;
            let score = arm.cumulative_reward / n + c * (ln_total / n).sqrt();
            if score > best_score {
                best = e;
                best_score = score;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionStrategy {
    None,
    Fixed { emitter: EmitterId },
    Random,
    Bandit {
        #[serde(default = "default_exploration")]
        c: f64,
    },
}

fn default_exploration() -> f64 {
    std::f64::consts::SQRT_2
}

impl Default for SelectionStrategy {
    fn default() -> Self {
        SelectionStrategy::Bandit {
            c: default_exploration(),
        }
    }
}

impl SelectionStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionStrategy::None => "none",
            SelectionStrategy::Fixed { .. } => "fixed",
            SelectionStrategy::Random => "random",
            SelectionStrategy::Bandit { .. } => "bandit",
        }
    }
}

/// Reward credited to an emitter after its candidate is admitted or not.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// 1 if the candidate entered the pool, else 0.
    #[default]
    Acceptance,
    /// max(0, s_c - min_score); fill-phase admissions count as 1.
    NoveltyGain,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub pulls: u64,
    pub successes: u64,
    pub cumulative_reward: f64,
}

impl ArmStats {
    pub fn mean_reward(&self) -> f64 {
        if self.pulls == 0 {
            0.0
        } else {
            self.cumulative_reward / self.pulls as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmitterStats {
    arms: BTreeMap<EmitterId, ArmStats>,
    #[serde(default)]
    reward: RewardKind,
}

impl EmitterStats {
    pub fn new(registry: &EmitterRegistry, reward: RewardKind) -> Self {
        Self {
            arms: registry.emitters().iter().map(|e| (e.id, ArmStats::default())).collect(),
            reward,
        }
    }

    pub fn arm(&self, id: EmitterId) -> ArmStats {
        self.arms.get(&id).copied().unwrap_or_default()
    }

    pub fn arms(&self) -> &BTreeMap<EmitterId, ArmStats> {
        &self.arms
    }

    pub fn total_pulls(&self) -> u64 {
        self.arms.values().map(|a| a.pulls).sum()
    }

    pub fn reward_of(&self, outcome: &InsertOutcome) -> f64 {
        match (self.reward, outcome) {
            (_, InsertOutcome::Rejected { .. }) => 0.0,
            (RewardKind::Acceptance, _) | (RewardKind::NoveltyGain, InsertOutcome::Filled { .. }) => 1.0,
            (
                RewardKind::NoveltyGain,
                InsertOutcome::Replaced {
                    candidate_score,
                    min_score,
                    ..
                },
            ) => (candidate_score - min_score).max(0.0),
        }
    }

    /// Credits the emitter used for one mutation with the outcome of its candidate.
    pub fn record_outcome(&mut self, emitter: EmitterId, outcome: &InsertOutcome) {
        let reward = self.reward_of(outcome);
        let arm = self.arms.entry(emitter).or_default();
        arm.pulls += 1;
        if outcome.accepted() {
            arm.successes += 1;
        }
        arm.cumulative_reward += reward;
    }

    /// A pull whose mutation never produced a candidate (provider failure).
    pub fn record_failure(&mut self, emitter: EmitterId) {
        self.arms.entry(emitter).or_default().pulls += 1;
    }
}
