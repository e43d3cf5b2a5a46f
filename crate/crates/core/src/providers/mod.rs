//! The boundary to the external capabilities: prompt mutator, artifact
//! generator, embedder and (for the MAP-Elites baseline) rater.
//!
//! Every provider speaks the same request/response types, whether it is the
//! HTTP adapter or the in-process [`synthetic`] world.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingVector;
use crate::emitters::EmitterId;
use crate::qdaif::{AxisSpec, Rating};

pub mod http;
pub mod synthetic;

pub use http::{HttpProvider, HttpProviderConfig, SamplingSettings, TOKEN_ENV};
pub use synthetic::{SyntheticProvider, SyntheticWorld, WorldParams};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error("transport error from {endpoint}{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transport {
        endpoint: String,
        status: Option<u16>,
        retryable: bool,
        message: String,
    },
    #[error("protocol error from {endpoint}: {message}")]
    Protocol { endpoint: String, message: String },
    #[error("provider not configured: {0}")]
    NotConfigured(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transport { retryable: true, .. })
    }
}

/// Whether a non-2xx status is worth retrying.
pub fn status_is_retryable(status: u16) -> bool {
    matches!(status, 408 | 425 | 429) || (500..600).contains(&status)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutateRequest {
    pub instruction: String,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Set when the backend did not report usage and the count was estimated.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub estimated: bool,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    /// Character-based estimate: ceil(chars / 4) per side.
    pub fn estimate(prompt: &str, completion: &str) -> Self {
        Self {
            prompt_tokens: estimate_tokens(prompt),
            completion_tokens: estimate_tokens(completion),
            estimated: true,
        }
    }
}

pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutateResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl Default for ImageSize {
    fn default() -> Self {
        Self {
            width: 1024,
            height: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub model: String,
    pub image_size: ImageSize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub artifact_ref: String,
    /// Hex SHA-256 of the artifact bytes.
    pub digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub modality: Modality,
    /// The text itself, or an artifact ref for images.
    pub payload: String,
}

impl EmbedRequest {
    pub fn text(payload: impl Into<String>) -> Self {
        Self {
            modality: Modality::Text,
            payload: payload.into(),
        }
    }

    pub fn image(artifact_ref: impl Into<String>) -> Self {
        Self {
            modality: Modality::Image,
            payload: artifact_ref.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embedding: EmbeddingVector,
}

/// `GET /v1/meta`: what an embedding service advertises about itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaResponse {
    pub embedding_dim: usize,
    pub embedder_model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mutator_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRequest {
    pub artifact_ref: String,
    pub axes: [AxisSpec; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerceptualDistanceRequest {
    pub artifact_refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptualDistanceResponse {
    pub mean_distance: f64,
}

/// Structured description of what the mutator is being asked to do.
///
/// Travels alongside the rendered instruction; remote backends only ever see
/// the instruction, the synthetic world only reads this.
#[derive(Debug, Clone, PartialEq)]
pub struct MutationContext {
    pub operation: MutationOp,
    /// Seed of the per-call random stream, derived from (run seed, generation, attempt).
    pub stream_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MutationOp {
    Mutate {
        parent_prompt: String,
        emitter: Option<EmitterId>,
    },
    Crossover {
        parents: [String; 2],
    },
    /// Cell-directed mutation for the MAP-Elites baseline.
    TowardCell {
        parent_prompt: String,
        cell: (usize, usize),
        bins: (usize, usize),
    },
}

pub trait Mutator: Send + Sync {
    fn mutate(&self, request: &MutateRequest, context: &MutationContext) -> Result<MutateResponse, ProviderError>;
}

pub trait Generator: Send + Sync {
    fn generate(&self, request: &GenerateRequest) -> Result<GenerateResponse, ProviderError>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, request: &EmbedRequest) -> Result<EmbedResponse, ProviderError>;
}

pub trait Rater: Send + Sync {
    fn rate(&self, request: &RateRequest) -> Result<Rating, ProviderError>;
}

pub trait PerceptualDistance: Send + Sync {
    fn perceptual_distance(
        &self,
        request: &PerceptualDistanceRequest,
    ) -> Result<PerceptualDistanceResponse, ProviderError>;
}

/// The set of providers a run talks to.
#[derive(Clone)]
pub struct Providers {
    pub mutator: Arc<dyn Mutator>,
    pub generator: Arc<dyn Generator>,
    pub embedder: Arc<dyn Embedder>,
    pub rater: Option<Arc<dyn Rater>>,
    pub perceptual: Option<Arc<dyn PerceptualDistance>>,
}

impl Providers {
    pub fn synthetic(world: SyntheticWorld) -> Self {
        let p = Arc::new(SyntheticProvider::new(world));
        Self {
            mutator: p.clone(),
            generator: p.clone(),
            embedder: p.clone(),
            rater: Some(p),
            perceptual: None,
        }
    }

    pub fn http(config: &HttpProviderConfig) -> Result<Self, ProviderError> {
        let p = Arc::new(HttpProvider::new(config.clone())?);
        Ok(Self {
            mutator: p.clone(),
            generator: p.clone(),
            embedder: p.clone(),
            rater: config.rate_endpoint.is_some().then(|| p.clone() as Arc<dyn Rater>),
            perceptual: config
                .perceptual_endpoint
                .is_some()
                .then(|| p.clone() as Arc<dyn PerceptualDistance>),
        })
    }
}

/// Bounded retries with exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }

    pub fn run<T>(&self, mut call: impl FnMut() -> Result<T, ProviderError>) -> Result<T, ProviderError> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    log::warn!("provider call failed (attempt {attempt}/{attempts}): {e}");
                    let d = self.delay(attempt);
                    if !d.is_zero() {
                        thread::sleep(d);
                    }
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
