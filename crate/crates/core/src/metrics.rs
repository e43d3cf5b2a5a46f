//! Diversity and relevance measurements over sets of embeddings.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_distance, cosine_similarity, EmbeddingVector};
use crate::error::{Error, Result};
use crate::evolve::{EventKind, GenerationEvent};
use crate::pool::Pool;
use crate::providers::{EmbedRequest, Embedder};

/// Eigenvalues below this are treated as exactly zero.
pub const EIGEN_ZERO: f64 = 1e-12;
/// Negative eigenvalues down to this are float drift; below it the kernel is broken.
pub const EIGEN_NEGATIVE_TOLERANCE: f64 = -1e-9;

/// Pairwise cosine similarities, row-major, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n)
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let total: f64 = (0..self.n)
            .flat_map(|i| (0..self.n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .sum();
        total / (self.n * (self.n - 1)) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

fn check_set(embeddings: &[EmbeddingVector], min: usize) -> Result<()> {
    if embeddings.len() < min {
        return Err(Error::domain(format!(
            "need at least {min} embeddings, got {}",
            embeddings.len()
        )));
    }
    let dim = embeddings[0].dim();
    for e in embeddings {
        if e.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: e.dim(),
            });
        }
        e.ensure_nonzero()?;
    }
    Ok(())
}

pub fn similarity_matrix(embeddings: &[EmbeddingVector]) -> Result<SimilarityMatrix> {
    check_set(embeddings, 2)?;
    Ok(kernel(embeddings))
}

fn kernel(embeddings: &[EmbeddingVector]) -> SimilarityMatrix {
    let n = embeddings.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in (i + 1)..n {
            // Inputs were validated, so this cannot fail.
            let s = cosine_similarity(&embeddings[i], &embeddings[j]).unwrap_or(0.0);
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    SimilarityMatrix { n, values }
}

/// exp of the Shannon entropy of the spectrum of K/n.
pub fn vendi_score(embeddings: &[EmbeddingVector]) -> Result<f64> {
    check_set(embeddings, 1)?;
    if embeddings.len() == 1 {
        return Ok(1.0);
    }
    vendi_from_similarity(&kernel(embeddings))
}

pub fn vendi_from_similarity(k: &SimilarityMatrix) -> Result<f64> {
    let n = k.n();
    let scaled = DMatrix::from_fn(n, n, |i, j| 0.5 * (k.get(i, j) + k.get(j, i)) / n as f64);
    let eigen = SymmetricEigen::try_new(scaled, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical(format!("eigen-decomposition of a {n}x{n} kernel did not converge")))?;
    let mut entropy = 0.0;
    for &lambda in eigen.eigenvalues.iter() {
        if !lambda.is_finite() {
            return Err(Error::Numerical(format!("non-finite eigenvalue {lambda}")));
        }
        if lambda < EIGEN_NEGATIVE_TOLERANCE {
            return Err(Error::Numerical(format!(
                "kernel is not positive semi-definite: eigenvalue {lambda:e} (spectrum {:?})",
                eigen.eigenvalues.as_slice()
            )));
        }
        if lambda >= EIGEN_ZERO {
            entropy -= lambda * lambda.ln();
        }
    }
    Ok(entropy.exp())
}

/// Mean cosine distance over all unordered pairs.
pub fn mean_pairwise_distance(embeddings: &[EmbeddingVector]) -> Result<f64> {
    check_set(embeddings, 2)?;
    let n = embeddings.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += cosine_distance(&embeddings[i], &embeddings[j])?;
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Mean cosine similarity between the initial prompt's text embedding and
/// each pool prompt's.
pub fn relevance(initial_prompt: &str, pool_prompts: &[String], embedder: &dyn Embedder) -> Result<f64> {
    let initial = embedder.embed(&EmbedRequest::text(initial_prompt))?.embedding;
    let prompts = pool_prompts
        .iter()
        .map(|p| Ok(embedder.embed(&EmbedRequest::text(p.as_str()))?.embedding))
        .collect::<Result<Vec<_>>>()?;
    relevance_from_embeddings(&initial, &prompts)
}

pub fn relevance_from_embeddings(initial: &EmbeddingVector, prompts: &[EmbeddingVector]) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::domain("relevance of an empty pool"));
    }
    let total = prompts
        .iter()
        .map(|p| cosine_similarity(initial, p))
        .sum::<Result<f64>>()?;
    Ok(total / prompts.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenTotals {
    pub total: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub mutation_tokens: u64,
    pub crossover_tokens: u64,
    /// Share of `total` that was estimated rather than reported by the backend.
    pub estimated_fraction: f64,
}

/// Mutator token usage summed over events.
pub fn token_totals(events: &[GenerationEvent]) -> TokenTotals {
    let mut t = TokenTotals::default();
    let mut estimated = 0u64;
    for e in events {
        let u = e.usage;
        let n = u.total();
        t.total += n;
        t.prompt_tokens += u.prompt_tokens;
        t.completion_tokens += u.completion_tokens;
        match e.kind {
            EventKind::Mutation { .. } => t.mutation_tokens += n,
            EventKind::Crossover { .. } => t.crossover_tokens += n,
        }
        if u.estimated {
            estimated += n;
        }
    }
    if t.total > 0 {
        t.estimated_fraction = estimated as f64 / t.total as f64;
    }
    t
}

/// Embedder calls behind a logged run: the initial prompt's text, one image
/// per seed, and an image plus a text embedding per produced child. Degraded
/// steps are not counted.
pub fn embedder_calls(seed_count: usize, events: &[GenerationEvent]) -> u64 {
    1 + seed_count as u64 + 2 * events.iter().filter(|e| e.child.is_some()).count() as u64
}

/// One row of the per-generation metric series. Generation 0 is the initial pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub generation: u32,
    pub pool_size: usize,
    pub vendi: f64,
    pub mean_pairwise_distance: Option<f64>,
    pub min_novelty: Option<f64>,
    pub relevance: Option<f64>,
    pub cumulative_tokens: u64,
    /// Only populated when an external perceptual-distance provider is configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
}

/// Metrics of `pool` as it stands.
pub fn pool_metrics(
    pool: &Pool,
    initial_text_embedding: Option<&EmbeddingVector>,
    generation: u32,
    cumulative_tokens: u64,
) -> Result<MetricRecord> {
    let embeddings = pool.embeddings();
    let relevance = match initial_text_embedding {
        Some(initial) => {
            let prompts: Option<Vec<EmbeddingVector>> =
                pool.members().iter().map(|m| m.prompt_embedding.clone()).collect();
            prompts.map(|p| relevance_from_embeddings(initial, &p)).transpose()?
        }
        None => None,
    };
    Ok(MetricRecord {
        generation,
        pool_size: pool.len(),
        vendi: vendi_score(&embeddings)?,
        mean_pairwise_distance: if embeddings.len() >= 2 {
            Some(mean_pairwise_distance(&embeddings)?)
        } else {
            None
        },
        min_novelty: pool.min_novelty()?,
        relevance,
        cumulative_tokens,
        lpips: None,
    })
}

pub const METRICS_CSV_HEADER: &str =
    "generation,pool_size,vendi,mean_pairwise_distance,min_novelty,relevance,cumulative_tokens,lpips";

pub fn metrics_to_csv(records: &[MetricRecord]) -> String {
    fn opt(v: Option<f64>) -> String {
        v.map(|x| x.to_string()).unwrap_or_default()
    }
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.generation,
            r.pool_size,
            r.vendi,
            opt(r.mean_pairwise_distance),
            opt(r.min_novelty),
            opt(r.relevance),
            r.cumulative_tokens,
            opt(r.lpips)
        ));
    }
    out
}
