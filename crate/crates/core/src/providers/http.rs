//! JSON-over-HTTP adapter for the provider protocol.
//!
//! `POST /v1/mutate`, `/v1/generate`, `/v1/embed`, `/v1/rate`,
//! `/v1/perceptual_distance`; artifact bytes via `GET /v1/artifacts/{ref}`.
//! Bearer token from `WANDER_PROVIDER_TOKEN`.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    status_is_retryable, EmbedRequest, EmbedResponse, Embedder, GenerateRequest, GenerateResponse,
    Generator, ImageSize, MetaResponse, MutateRequest, MutateResponse, MutationContext, Mutator, PerceptualDistance,
    PerceptualDistanceRequest, PerceptualDistanceResponse, ProviderError, RateRequest, Rater, TokenUsage,
};
use crate::qdaif::Rating;

pub const TOKEN_ENV: &str = "WANDER_PROVIDER_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    /// Root URL used for every capability without its own override.
    pub endpoint: String,
    #[serde(default)]
    pub mutate_endpoint: Option<String>,
    #[serde(default)]
    pub generate_endpoint: Option<String>,
    #[serde(default)]
    pub embed_endpoint: Option<String>,
    #[serde(default)]
    pub rate_endpoint: Option<String>,
    #[serde(default)]
    pub perceptual_endpoint: Option<String>,
    pub mutator_model: String,
    pub generator_model: String,
    #[serde(default)]
    pub embedder_model: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

impl HttpProviderConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            mutate_endpoint: None,
            generate_endpoint: None,
            embed_endpoint: None,
            rate_endpoint: None,
            perceptual_endpoint: None,
            mutator_model: "gpt-4o-mini".into(),
            generator_model: "flux-dev".into(),
            embedder_model: Some("clip-vit-b-32".into()),
            timeout_secs: default_timeout(),
        }
    }
}

/// Which model sizes and sampling settings requests carry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSettings {
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub image_size: ImageSize,
}

impl Default for SamplingSettings {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_output_tokens: 256,
            image_size: ImageSize::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpProvider {
    config: HttpProviderConfig,
    agent: ureq::Agent,
    token: Option<String>,
}

fn root(url: &str) -> &str {
    url.trim_end_matches('/')
}

impl HttpProvider {
    pub fn new(config: HttpProviderConfig) -> Result<Self, ProviderError> {
        let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        Self::with_token(config, token)
    }

    pub fn with_token(config: HttpProviderConfig, token: Option<String>) -> Result<Self, ProviderError> {
        if config.endpoint.trim().is_empty() {
            return Err(ProviderError::NotConfigured("provider endpoint is empty".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Ok(Self { config, agent, token })
    }

    pub fn config(&self) -> &HttpProviderConfig {
        &self.config
    }

    fn url(&self, root_override: Option<&String>, path: &str) -> String {
        format!("{}{path}", root(root_override.unwrap_or(&self.config.endpoint)))
    }

    fn transport(url: &str, status: Option<u16>, retryable: bool, message: String) -> ProviderError {
        ProviderError::Transport {
            endpoint: url.to_string(),
            status,
            retryable,
            message,
        }
    }

    fn read_success(url: &str, mut resp: ureq::http::Response<ureq::Body>) -> Result<ureq::http::Response<ureq::Body>, ProviderError> {
        let status = resp.status().as_u16();
        if (200..300).contains(&status) {
            return Ok(resp);
        }
        let body = resp.body_mut().read_to_string().unwrap_or_default();
        let snippet: String = body.chars().take(200).collect();
        Err(Self::transport(url, Some(status), status_is_retryable(status), snippet))
    }

    fn post_json<Req: Serialize, Resp: DeserializeOwned>(&self, url: &str, body: &Req) -> Result<Resp, ProviderError> {
        let payload = serde_json::to_string(body).map_err(|e| ProviderError::Protocol {
            endpoint: url.to_string(),
            message: format!("cannot encode request: {e}"),
        })?;
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let resp = req
            .send(payload.as_str())
            .map_err(|e| Self::transport(url, None, true, e.to_string()))?;
        let mut resp = Self::read_success(url, resp)?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Self::transport(url, None, true, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| ProviderError::Protocol {
            endpoint: url.to_string(),
            message: format!("response does not match schema: {e}"),
        })
    }

    fn get(&self, url: &str) -> Result<ureq::http::Response<ureq::Body>, ProviderError> {
        let mut req = self.agent.get(url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let resp = req.call().map_err(|e| Self::transport(url, None, true, e.to_string()))?;
        Self::read_success(url, resp)
    }

    /// Embedding dimension and model ids advertised by the embed endpoint.
    pub fn meta(&self) -> Result<MetaResponse, ProviderError> {
        let url = self.url(self.config.embed_endpoint.as_ref(), "/v1/meta");
        let text = self
            .get(&url)?
            .body_mut()
            .read_to_string()
            .map_err(|e| Self::transport(&url, None, true, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| ProviderError::Protocol {
            endpoint: url,
            message: format!("response does not match schema: {e}"),
        })
    }

    /// Raw artifact bytes for `artifact_ref`.
    pub fn fetch_artifact(&self, artifact_ref: &str) -> Result<Vec<u8>, ProviderError> {
        let url = self.url(
            self.config.generate_endpoint.as_ref(),
            &format!("/v1/artifacts/{artifact_ref}"),
        );
        let mut resp = self.get(&url)?;
        resp.body_mut()
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| Self::transport(&url, None, true, e.to_string()))
    }
}

impl Mutator for HttpProvider {
    fn mutate(&self, request: &MutateRequest, _context: &MutationContext) -> Result<MutateResponse, ProviderError> {
        let url = self.url(self.config.mutate_endpoint.as_ref(), "/v1/mutate");
        let mut resp: MutateResponse = self.post_json(&url, request)?;
        if resp.usage.is_none() {
            resp.usage = Some(TokenUsage::estimate(&request.instruction, &resp.text));
        }
        Ok(resp)
    }
}

impl Generator for HttpProvider {
    fn generate(&self, request: &GenerateRequest) -> Result<GenerateResponse, ProviderError> {
        let url = self.url(self.config.generate_endpoint.as_ref(), "/v1/generate");
        let resp: GenerateResponse = self.post_json(&url, request)?;
        if resp.artifact_ref.is_empty() {
            return Err(ProviderError::Protocol {
                endpoint: url,
                message: "empty artifact_ref".into(),
            });
        }
        Ok(resp)
    }
}

impl Embedder for HttpProvider {
    fn embed(&self, request: &EmbedRequest) -> Result<EmbedResponse, ProviderError> {
        let url = self.url(self.config.embed_endpoint.as_ref(), "/v1/embed");
        self.post_json(&url, request)
    }
}

impl Rater for HttpProvider {
    fn rate(&self, request: &RateRequest) -> Result<Rating, ProviderError> {
        let url = self.url(self.config.rate_endpoint.as_ref(), "/v1/rate");
        let rating: Rating = self.post_json(&url, request)?;
        let in_range = rating.axis1_bin < request.axes[0].bins.len()
            && rating.axis2_bin < request.axes[1].bins.len()
            && (0.0..=1.0).contains(&rating.quality);
        if !in_range {
            return Err(ProviderError::Protocol {
                endpoint: url,
                message: format!("rating out of range: {rating:?}"),
            });
        }
        Ok(rating)
    }
}

impl PerceptualDistance for HttpProvider {
    fn perceptual_distance(
        &self,
        request: &PerceptualDistanceRequest,
    ) -> Result<PerceptualDistanceResponse, ProviderError> {
        let url = self.url(self.config.perceptual_endpoint.as_ref(), "/v1/perceptual_distance");
        self.post_json(&url, request)
    }
}
