//! Emitter-strategy comparison: several seeded runs per strategy, final pool
//! Vendi per run, normalized across the whole experiment.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::emitters::SelectionStrategy;
use crate::error::{Error, Result};
use crate::evolve::{Engine, NullSink, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    None,
    Fixed,
    Random,
    Bandit,
}

impl StrategyName {
    pub const ALL: [StrategyName; 4] = [StrategyName::None, StrategyName::Fixed, StrategyName::Random, StrategyName::Bandit];

    /// Concrete strategy for run `run`; the fixed arm rotates through the emitters.
    pub fn strategy(self, run: u32, emitter_count: usize) -> SelectionStrategy {
        match self {
            StrategyName::None => SelectionStrategy::None,
            StrategyName::Fixed => SelectionStrategy::Fixed {
                emitter: 1 + run % emitter_count as u32,
            },
            StrategyName::Random => SelectionStrategy::Random,
            StrategyName::Bandit => SelectionStrategy::Bandit {
                c: std::f64::consts::SQRT_2,
            },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::None => "none",
            StrategyName::Fixed => "fixed",
            StrategyName::Random => "random",
            StrategyName::Bandit => "bandit",
        }
    }
}

impl fmt::Display for StrategyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown strategy {s:?}; expected none, fixed, random or bandit")))
    }
}

pub fn parse_strategies(list: &str) -> Result<Vec<StrategyName>> {
    let names = list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<Vec<_>>>()?;
    if names.is_empty() {
        return Err(Error::config("no strategies given"));
    }
    Ok(names)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: StrategyName,
    pub final_vendi: Vec<f64>,
    pub mean_vendi: f64,
    pub std_vendi: f64,
    /// Mean of min-max normalized final Vendi, scaled over every run in the table.
    pub mean_normalized: f64,
    pub mean_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: u32,
    pub rows: Vec<AblationRow>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Run `r` of every strategy uses seed `config.seed + r`, so strategies face
/// the same synthetic world and initial pool.
pub fn run_ablation(config: &RunConfig, strategies: &[StrategyName], runs: u32) -> Result<AblationTable> {
    if runs == 0 {
        return Err(Error::config("runs must be at least 1"));
    }
    let emitter_count = config.registry()?.len();
    let mut raw: Vec<(StrategyName, Vec<f64>, Vec<f64>)> = Vec::new();
    for &name in strategies {
        let mut vendi = Vec::with_capacity(runs as usize);
        let mut tokens = Vec::with_capacity(runs as usize);
        for r in 0..runs {
            let mut c = config.clone();
            c.seed = config.seed.wrapping_add(u64::from(r));
            c.strategy = name.strategy(r, emitter_count);
            let result = Engine::from_config(c)?.run(&mut NullSink)?;
            let last = result.metrics.last().expect("metrics include generation 0");
            vendi.push(last.vendi);
            tokens.push(last.cumulative_tokens as f64);
        }
        raw.push((name, vendi, tokens));
    }
    let all: Vec<f64> = raw.iter().flat_map(|(_, v, _)| v.iter().copied()).collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm = |x: f64| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
    let rows = raw
        .into_iter()
        .map(|(strategy, final_vendi, tokens)| AblationRow {
            strategy,
            mean_vendi: mean(&final_vendi),
            std_vendi: sample_std(&final_vendi),
            mean_normalized: mean(&final_vendi.iter().map(|&x| norm(x)).collect::<Vec<_>>()),
            mean_tokens: mean(&tokens),
            final_vendi,
        })
        .collect();
    Ok(AblationTable { runs, rows })
}

impl AblationTable {
    pub fn row(&self, strategy: StrategyName) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,runs,mean_vendi,std_vendi,mean_normalized_vendi,mean_tokens\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.strategy, self.runs, r.mean_vendi, r.std_vendi, r.mean_normalized, r.mean_tokens
            ));
        }
        out
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>12} {:>10} {:>12} {:>12}", "strategy", "vendi", "std", "normalized", "tokens")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<8} {:>12.4} {:>10.4} {:>12.4} {:>12.0}",
                r.strategy.as_str(),
                r.mean_vendi,
                r.std_vendi,
                r.mean_normalized,
                r.mean_tokens
            )?;
        }
        write!(f, "({} runs per strategy)", self.runs)
    }
}
