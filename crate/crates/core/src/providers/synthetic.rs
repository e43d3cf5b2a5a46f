//! A deterministic vector-space stand-in for the mutator, generator,
//! embedder and rater.
//!
//! Every prompt has a latent unit vector. A bare prompt's latent is a seeded
//! Gaussian direction derived from its text; evolved prompts carry their
//! latent explicitly as a suffix `"<anchor> [wander:<tag>:<base64 f32>]"`, so
//! the text embedding of any prompt is a pure function of the string.
//!
//! * mutation with emitter `e`: `normalize(p + step_e·d_e + jitter·g)`
//! * emitter-less mutation: `normalize(p + jitter·g)`
//! * crossover: `normalize((p_a + p_b)/2 + jitter·g)`
//! * generation: image embedding `= p + noise·g` (not renormalized)
//!
//! where `d_e` are orthonormal emitter directions and `g` is a standard
//! normal vector drawn from the per-call stream.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    EmbedRequest, EmbedResponse, Embedder, GenerateRequest, GenerateResponse, Generator, Modality,
    MutateRequest, MutateResponse, MutationContext, MutationOp, Mutator, ProviderError, RateRequest,
    Rater, TokenUsage,
};
use crate::embedding::{decode_f32_le, encode_f32_le, EmbeddingVector};
use crate::emitters::EmitterId;
use crate::qdaif::Rating;
use crate::seeding::{self, purpose};

const SUFFIX_OPEN: &str = " [wander:";
const ARTIFACT_PREFIX: &str = "synthetic:";
/// Extra orthonormal axes after the emitter directions: rater axis 1, axis 2, quality.
const RATER_AXES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldParams {
    pub dim: usize,
    /// Defaults to the run seed when absent.
    pub seed: Option<u64>,
    pub emitter_step: f64,
    /// Per-emitter overrides of `emitter_step`, keyed by emitter id.
    pub emitter_steps: BTreeMap<String, f64>,
    pub generation_noise: f64,
    pub jitter: f64,
    /// Fraction of the way a cell-directed mutation moves toward its target.
    pub cell_pull: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            dim: 32,
            seed: None,
            emitter_step: 0.8,
            emitter_steps: BTreeMap::new(),
            generation_noise: 0.05,
            jitter: 0.02,
            cell_pull: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    params: WorldParams,
    seed: u64,
    emitter_count: usize,
    step_overrides: BTreeMap<EmitterId, f64>,
    /// `emitter_count` emitter directions followed by the rater axes.
    directions: Vec<Vec<f64>>,
}

impl SyntheticWorld {
    pub fn new(params: WorldParams, emitter_count: usize, run_seed: u64) -> Result<Self, crate::Error> {
        if params.dim == 0 {
            return Err(crate::Error::config("synthetic world dimension must be positive"));
        }
        let all = [params.emitter_step, params.generation_noise, params.jitter, params.cell_pull];
        if all.iter().chain(params.emitter_steps.values()).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(crate::Error::config("synthetic world scales must be finite and non-negative"));
        }
        let step_overrides = params
            .emitter_steps
            .iter()
            .map(|(k, &v)| {
                k.trim()
                    .parse::<EmitterId>()
                    .map(|id| (id, v))
                    .map_err(|_| crate::Error::config(format!("emitter_steps key {k:?} is not an emitter id")))
            })
            .collect::<Result<BTreeMap<_, _>, _>>()?;
        let seed = params.seed.unwrap_or(run_seed);
        let emitter_count = emitter_count.max(1);
        let directions = orthonormal_directions(seed, params.dim, emitter_count + RATER_AXES);
        Ok(Self {
            params,
            seed,
            emitter_count,
            step_overrides,
            directions,
        })
    }

    pub fn params(&self) -> &WorldParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Unit direction assigned to an emitter id (ids are 1-based).
    pub fn direction(&self, emitter: EmitterId) -> &[f64] {
        let idx = (emitter.max(1) as usize - 1) % self.emitter_count;
        &self.directions[idx]
    }

    fn rater_axis(&self, i: usize) -> &[f64] {
        &self.directions[self.emitter_count + i]
    }

    pub fn step_size(&self, emitter: EmitterId) -> f64 {
        self.step_overrides
            .get(&emitter)
            .copied()
            .unwrap_or(self.params.emitter_step)
    }

    /// Latent unit vector of a bare anchor text.
    pub fn base_vector(&self, anchor: &str) -> Vec<f64> {
        let mut rng = seeding::stream(self.seed, &[purpose::TEXT, seeding::hash_str(anchor)]);
        loop {
            let v = gaussian(&mut rng, self.dim());
            if let Some(u) = normalized(&v) {
                return u;
            }
        }
    }

    /// Splits an evolved prompt into anchor and encoded latent.
    pub fn decode_prompt(&self, text: &str) -> Option<(String, Vec<f64>)> {
        let body = text.strip_suffix(']')?;
        let at = body.rfind(SUFFIX_OPEN)?;
        let (anchor, rest) = (&body[..at], &body[at + SUFFIX_OPEN.len()..]);
        let (_tag, payload) = rest.split_once(':')?;
        let values = decode_f32_le(payload).ok()?;
        if values.len() != self.dim() || values.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some((anchor.to_string(), values.iter().map(|&v| f64::from(v)).collect()))
    }

    /// Anchor text and latent of any prompt.
    pub fn prompt_latent(&self, text: &str) -> (String, Vec<f64>) {
        self.decode_prompt(text).unwrap_or_else(|| {
            let anchor = text.trim().to_string();
            let v = self.base_vector(&anchor);
            (anchor, v)
        })
    }

    /// Latent rounded to the `f32` precision it is stored at.
    pub fn text_embedding(&self, text: &str) -> Vec<f32> {
        self.prompt_latent(text).1.iter().map(|&v| v as f32).collect()
    }

    pub fn encode_prompt(&self, anchor: &str, tag: &str, latent: &[f64]) -> String {
        let values: Vec<f32> = latent.iter().map(|&v| v as f32).collect();
        format!("{anchor}{SUFFIX_OPEN}{tag}:{}]", encode_f32_le(&values))
    }

    pub fn mutate_latent<R: Rng + ?Sized>(&self, parent: &[f64], emitter: Option<EmitterId>, rng: &mut R) -> Vec<f64> {
        let mut v = parent.to_vec();
        if let Some(e) = emitter {
            axpy(&mut v, self.step_size(e), self.direction(e));
        }
        self.jittered(v, parent, rng)
    }

    pub fn crossover_latent<R: Rng + ?Sized>(&self, a: &[f64], b: &[f64], rng: &mut R) -> Vec<f64> {
        let mid: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
        self.jittered(mid, a, rng)
    }

    /// Moves `parent` toward the point whose rater coordinates are the
    /// centers of `cell`.
    pub fn toward_cell_latent<R: Rng + ?Sized>(
        &self,
        parent: &[f64],
        cell: (usize, usize),
        bins: (usize, usize),
        rng: &mut R,
    ) -> Vec<f64> {
        let center = |b: usize, n: usize| -1.0 + (2 * b + 1) as f64 / n.max(1) as f64;
        let (mut t1, mut t2) = (center(cell.0, bins.0), center(cell.1, bins.1));
        let r2 = t1 * t1 + t2 * t2;
        if r2 > 1.0 {
            let s = r2.sqrt();
            t1 /= s;
            t2 /= s;
        }
        let (u1, u2) = (self.rater_axis(0), self.rater_axis(1));
        let mut rest = parent.to_vec();
        axpy(&mut rest, -dot(parent, u1), u1);
        axpy(&mut rest, -dot(parent, u2), u2);
        let rest = normalized(&rest).unwrap_or_else(|| self.rater_axis(2).to_vec());
        let mut target = vec![0.0; self.dim()];
        axpy(&mut target, t1, u1);
        axpy(&mut target, t2, u2);
        axpy(&mut target, (1.0 - t1 * t1 - t2 * t2).max(0.0).sqrt(), &rest);
        let pull = self.params.cell_pull;
        let moved: Vec<f64> = parent.iter().zip(&target).map(|(p, t)| p + pull * (t - p)).collect();
        self.jittered(moved, parent, rng)
    }

    fn jittered<R: Rng + ?Sized>(&self, mut v: Vec<f64>, fallback: &[f64], rng: &mut R) -> Vec<f64> {
        let g = gaussian(rng, self.dim());
        axpy(&mut v, self.params.jitter, &g);
        normalized(&v)
            .or_else(|| normalized(fallback))
            .unwrap_or_else(|| self.directions[0].clone())
    }

    /// Child prompt for a mutation request.
    pub fn mutate(&self, context: &MutationContext) -> String {
        let mut rng = seeding::stream(context.stream_seed, &[purpose::MUTATE]);
        match &context.operation {
            MutationOp::Mutate { parent_prompt, emitter } => {
                let (anchor, p) = self.prompt_latent(parent_prompt);
                let child = self.mutate_latent(&p, *emitter, &mut rng);
                let tag = emitter.map_or_else(|| "m".to_string(), |e| format!("e{e}"));
                self.encode_prompt(&anchor, &tag, &child)
            }
            MutationOp::Crossover { parents } => {
                let (anchor, a) = self.prompt_latent(&parents[0]);
                let (_, b) = self.prompt_latent(&parents[1]);
                let child = self.crossover_latent(&a, &b, &mut rng);
                self.encode_prompt(&anchor, "x", &child)
            }
            MutationOp::TowardCell {
                parent_prompt,
                cell,
                bins,
            } => {
                let (anchor, p) = self.prompt_latent(parent_prompt);
                let child = self.toward_cell_latent(&p, *cell, *bins, &mut rng);
                self.encode_prompt(&anchor, &format!("c{}-{}", cell.0, cell.1), &child)
            }
        }
    }

    /// Image embedding for `prompt` under generation seed `seed`.
    pub fn image_embedding(&self, prompt: &str, seed: u64) -> Vec<f32> {
        let (_, latent) = self.prompt_latent(prompt);
        let mut rng = seeding::stream(self.seed, &[purpose::GENERATE, seed, seeding::hash_str(prompt)]);
        let g = gaussian(&mut rng, self.dim());
        latent
            .iter()
            .zip(&g)
            .map(|(p, n)| (p + self.params.generation_noise * n) as f32)
            .collect()
    }

    pub fn generate(&self, prompt: &str, seed: u64) -> GenerateResponse {
        let image = self.image_embedding(prompt, seed);
        let bytes: Vec<u8> = image.iter().flat_map(|v| v.to_le_bytes()).collect();
        GenerateResponse {
            artifact_ref: format!("{ARTIFACT_PREFIX}{}", encode_f32_le(&image)),
            digest: seeding::sha256_hex(&bytes),
        }
    }

    pub fn decode_artifact(&self, artifact_ref: &str) -> Option<Vec<f32>> {
        let values = decode_f32_le(artifact_ref.strip_prefix(ARTIFACT_PREFIX)?).ok()?;
        (values.len() == self.dim()).then_some(values)
    }

    /// Rating derived from the image embedding: the bins come from its cosine
    /// with the two rater axes, quality from its cosine with a third axis.
    pub fn rate(&self, image: &[f32], bins: (usize, usize)) -> Rating {
        let v: Vec<f64> = image.iter().map(|&x| f64::from(x)).collect();
        let n = dot(&v, &v).sqrt();
        let cos = |axis: &[f64]| if n > 0.0 { (dot(&v, axis) / n).clamp(-1.0, 1.0) } else { 0.0 };
        let bin = |c: f64, count: usize| (((c + 1.0) / 2.0 * count as f64).floor() as usize).min(count - 1);
        Rating {
            quality: (1.0 + cos(self.rater_axis(2))) / 2.0,
            axis1_bin: bin(cos(self.rater_axis(0)), bins.0),
            axis2_bin: bin(cos(self.rater_axis(1)), bins.1),
        }
    }
}

/// Mutator, generator, embedder and rater backed by one [`SyntheticWorld`].
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    world: SyntheticWorld,
}

impl SyntheticProvider {
    pub fn new(world: SyntheticWorld) -> Self {
        Self { world }
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }
}

fn protocol(message: impl Into<String>) -> ProviderError {
    ProviderError::Protocol {
        endpoint: "synthetic".into(),
        message: message.into(),
    }
}

impl Mutator for SyntheticProvider {
    fn mutate(&self, request: &MutateRequest, context: &MutationContext) -> Result<MutateResponse, ProviderError> {
        let text = self.world.mutate(context);
        let usage = TokenUsage::estimate(&request.instruction, &text);
        Ok(MutateResponse {
            text,
            usage: Some(usage),
        })
    }
}

impl Generator for SyntheticProvider {
    fn generate(&self, request: &GenerateRequest) -> Result<GenerateResponse, ProviderError> {
        Ok(self.world.generate(&request.prompt, request.seed))
    }
}

impl Embedder for SyntheticProvider {
    fn embed(&self, request: &EmbedRequest) -> Result<EmbedResponse, ProviderError> {
        let values = match request.modality {
            Modality::Text => self.world.text_embedding(&request.payload),
            Modality::Image => self
                .world
                .decode_artifact(&request.payload)
                .ok_or_else(|| protocol(format!("unknown artifact ref {:?}", request.payload)))?,
        };
        let embedding = EmbeddingVector::new(values).map_err(|e| protocol(e.to_string()))?;
        Ok(EmbedResponse { embedding })
    }
}

impl Rater for SyntheticProvider {
    fn rate(&self, request: &RateRequest) -> Result<Rating, ProviderError> {
        let image = self
            .world
            .decode_artifact(&request.artifact_ref)
            .ok_or_else(|| protocol(format!("unknown artifact ref {:?}", request.artifact_ref)))?;
        let bins = (request.axes[0].bins.len(), request.axes[1].bins.len());
        if bins.0 == 0 || bins.1 == 0 {
            return Err(protocol("rating axes must have bins"));
        }
        Ok(self.world.rate(&image, bins))
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = dot(v, v).sqrt();
    (n > 1e-12 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// Gram-Schmidt over seeded Gaussian draws. Past `dim` vectors orthogonality
/// is impossible and the remainder are plain random unit vectors.
fn orthonormal_directions(seed: u64, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut rng = seeding::stream(seed, &[purpose::DIRECTIONS]);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = gaussian(&mut rng, dim);
        if out.len() < dim {
            for _ in 0..2 {
                for u in &out {
                    let c = dot(&v, u);
                    axpy(&mut v, -c, u);
                }
            }
        }
        if let Some(u) = normalized(&v) {
            out.push(u);
        }
    }
    out
}
