//! Python bindings for the wander engine.
//!
//! Embeddings cross the boundary as lists of floats. Structured results
//! (insert outcomes, run results) come back as plain dicts built from the
//! same JSON the run store writes.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use wander_core::metrics::mean_pairwise_distance as core_mean_pairwise_distance;
use wander_core::pool::IndividualId;
use wander_core::{
    CandidateScoring, EmbeddingVector, Engine, Error, Individual, NullSink, Pool as CorePool, RunConfig,
};

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::DimensionMismatch { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_embedding(values: Vec<f64>) -> PyResult<EmbeddingVector> {
    EmbeddingVector::from_f64(&values).map_err(err)
}

fn to_embeddings(rows: Vec<Vec<f64>>) -> PyResult<Vec<EmbeddingVector>> {
    rows.into_iter().map(to_embedding).collect()
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Cosine distance between two embeddings, in [0, 2].
#[pyfunction]
fn cosine_distance(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    wander_core::cosine_distance(&to_embedding(a)?, &to_embedding(b)?).map_err(err)
}

#[pyfunction]
fn vendi_score(embeddings: Vec<Vec<f64>>) -> PyResult<f64> {
    wander_core::vendi_score(&to_embeddings(embeddings)?).map_err(err)
}

#[pyfunction]
fn mean_pairwise_distance(embeddings: Vec<Vec<f64>>) -> PyResult<f64> {
    core_mean_pairwise_distance(&to_embeddings(embeddings)?).map_err(err)
}

/// Cosine similarity matrix as a list of rows.
#[pyfunction]
fn similarity_matrix(embeddings: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let k = wander_core::similarity_matrix(&to_embeddings(embeddings)?).map_err(err)?;
    Ok(k.rows().map(<[f64]>::to_vec).collect())
}

/// The ten default mutation directives as (id, directive) pairs.
#[pyfunction]
fn builtin_emitters() -> Vec<(u32, String)> {
    wander_core::builtin_emitters().into_iter().map(|e| (e.id, e.directive)).collect()
}

/// Runs the engine on the deterministic synthetic provider and returns the
/// result as a dict with `pool`, `seeds`, `events` and `metrics`.
///
/// `config` is a JSON object in the same format `wander run --config` reads;
/// when omitted, defaults are used with `initial_prompt` and `seed`.
#[pyfunction]
#[pyo3(signature = (initial_prompt, seed=0, generations=None, config=None))]
fn run_synthetic<'py>(
    py: Python<'py>,
    initial_prompt: &str,
    seed: u64,
    generations: Option<u32>,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut c = match config {
        Some(text) => RunConfig::from_json_str(text).map_err(err)?,
        None => RunConfig::synthetic(initial_prompt, seed),
    };
    if !c.provider.is_synthetic() {
        return Err(PyValueError::new_err("run_synthetic needs a synthetic provider"));
    }
    if let Some(g) = generations {
        c.generations = g;
    }
    let result = py
        .detach(|| Engine::from_config(c).and_then(|e| e.run(&mut NullSink)))
        .map_err(err)?;
    let out = serde_json::json!({
        "pool": result.pool.members(),
        "seeds": result.seeds,
        "events": result.events,
        "metrics": result.metrics,
    });
    to_py(py, &out)
}

/// Fixed-capacity novelty pool.
#[pyclass(name = "Pool")]
struct PyPool {
    inner: CorePool,
    next_id: u64,
}

#[pymethods]
impl PyPool {
    #[new]
    #[pyo3(signature = (capacity, k=3, leave_one_in=false))]
    fn new(capacity: usize, k: usize, leave_one_in: bool) -> PyResult<Self> {
        let scoring = if leave_one_in {
            CandidateScoring::LeaveOneIn
        } else {
            CandidateScoring::AgainstPool
        };
        let inner = CorePool::new(capacity, k).map_err(err)?.with_scoring(scoring);
        Ok(Self { inner, next_id: 0 })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.inner.capacity()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    /// Novelty of `embedding` against the current members.
    fn novelty(&self, embedding: Vec<f64>) -> PyResult<f64> {
        self.inner.novelty_score(&to_embedding(embedding)?, None).map_err(err)
    }

    /// Offers a candidate. Returns the insert outcome as a dict; the new
    /// member's id is under `id` when it was admitted.
    #[pyo3(signature = (embedding, prompt=String::new()))]
    fn insert<'py>(&mut self, py: Python<'py>, embedding: Vec<f64>, prompt: String) -> PyResult<Bound<'py, PyAny>> {
        let id = IndividualId(self.next_id);
        let candidate = Individual::seed(id, prompt, String::new(), to_embedding(embedding)?);
        let outcome = self.inner.try_insert(candidate).map_err(err)?;
        self.next_id += 1;
        let out = to_py(py, &outcome)?;
        if outcome.accepted() {
            out.set_item("id", id.0)?;
        }
        Ok(out)
    }

    /// Per-member novelty as (id, score) pairs.
    fn scores(&self) -> PyResult<Vec<(u64, f64)>> {
        let report = self.inner.score_pool().map_err(err)?;
        Ok(report.per_member.into_iter().map(|(id, s)| (id.0, s)).collect())
    }

    fn min_novelty(&self) -> PyResult<Option<f64>> {
        self.inner.min_novelty().map_err(err)
    }

    fn ids(&self) -> Vec<u64> {
        self.inner.ids().into_iter().map(|id| id.0).collect()
    }

    fn prompts(&self) -> Vec<String> {
        self.inner.members().iter().map(|m| m.prompt.clone()).collect()
    }

    fn embeddings(&self) -> Vec<Vec<f64>> {
        self.inner.embeddings().iter().map(EmbeddingVector::to_f64).collect()
    }

    fn vendi(&self) -> PyResult<f64> {
        wander_core::vendi_score(&self.inner.embeddings()).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Pool(len={}, capacity={}, k={})", self.inner.len(), self.inner.capacity(), self.inner.k())
    }
}

#[pymodule]
fn wander(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(cosine_distance, m)?)?;
    m.add_function(wrap_pyfunction!(vendi_score, m)?)?;
    m.add_function(wrap_pyfunction!(mean_pairwise_distance, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_emitters, m)?)?;
    m.add_function(wrap_pyfunction!(run_synthetic, m)?)?;
    m.add_class::<PyPool>()?;
    Ok(())
}
