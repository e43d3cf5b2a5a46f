//! The generation loop: emitter selection, LLM mutation or crossover,
//! artifact generation and embedding, then pool admission.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::emitters::{EmitterId, EmitterRegistry, EmitterStats, RewardKind, SelectionStrategy};
use crate::error::{Error, Result};
use crate::metrics::{pool_metrics, MetricRecord};
use crate::pool::{CandidateScoring, Individual, IndividualId, InsertOutcome, Lineage, Pool};
use crate::providers::http::SamplingSettings;
use crate::providers::{
    EmbedRequest, GenerateRequest, HttpProviderConfig, MutateRequest, MutationContext, MutationOp,
    PerceptualDistanceRequest, ProviderError, Providers, RetryPolicy, SyntheticWorld, TokenUsage,
    WorldParams,
};
use crate::qdaif::QdaifSettings;
use crate::seeding::{self, purpose};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    Synthetic(WorldParams),
    Http(HttpProviderConfig),
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Synthetic(WorldParams::default())
    }
}

impl ProviderConfig {
    pub fn is_synthetic(&self) -> bool {
        matches!(self, ProviderConfig::Synthetic(_))
    }

    pub fn build(&self, emitter_count: usize, seed: u64) -> Result<Providers> {
        match self {
            ProviderConfig::Synthetic(params) => Ok(Providers::synthetic(SyntheticWorld::new(
                params.clone(),
                emitter_count,
                seed,
            )?)),
            ProviderConfig::Http(cfg) => Ok(Providers::http(cfg)?),
        }
    }

    pub fn mutator_model(&self) -> &str {
        match self {
            ProviderConfig::Synthetic(_) => "synthetic",
            ProviderConfig::Http(c) => &c.mutator_model,
        }
    }

    pub fn generator_model(&self) -> &str {
        match self {
            ProviderConfig::Synthetic(_) => "synthetic",
            ProviderConfig::Http(c) => &c.generator_model,
        }
    }
}

/// Source of event timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    /// Wall-clock milliseconds since the Unix epoch.
    System,
    /// A counter derived from the step index; makes event logs reproducible.
    Logical,
}

impl ClockKind {
    fn now_ms(self, tick: u64) -> u64 {
        match self {
            ClockKind::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            ClockKind::Logical => tick,
        }
    }
}

fn d_capacity() -> usize {
    10
}
fn d_count() -> usize {
    10
}
fn d_generations() -> u32 {
    10
}
fn d_mutations() -> u32 {
    10
}
fn d_k() -> usize {
    3
}
fn d_crossover() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub initial_prompt: String,
    #[serde(default = "d_capacity")]
    pub pool_capacity: usize,
    #[serde(default = "d_count")]
    pub initial_count: usize,
    #[serde(default = "d_generations")]
    pub generations: u32,
    #[serde(default = "d_mutations")]
    pub mutations_per_generation: u32,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_crossover")]
    pub crossover_probability: f64,
    #[serde(default)]
    pub strategy: SelectionStrategy,
    #[serde(default)]
    pub reward: RewardKind,
    #[serde(default)]
    pub candidate_scoring: CandidateScoring,
    #[serde(default)]
    pub seed: u64,
    /// Replaces the built-in emitter table; ids are assigned 1.. in order.
    #[serde(default)]
    pub emitters: Option<Vec<String>>,
    #[serde(default)]
    pub provider: ProviderConfig,
    #[serde(default)]
    pub sampling: SamplingSettings,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Defaults to logical for the synthetic provider, system otherwise.
    #[serde(default)]
    pub clock: Option<ClockKind>,
    #[serde(default)]
    pub qdaif: QdaifSettings,
}

impl RunConfig {
    /// Defaults throughout, synthetic provider.
    pub fn synthetic(initial_prompt: impl Into<String>, seed: u64) -> Self {
        Self {
            initial_prompt: initial_prompt.into(),
            pool_capacity: d_capacity(),
            initial_count: d_count(),
            generations: d_generations(),
            mutations_per_generation: d_mutations(),
            k: d_k(),
            crossover_probability: d_crossover(),
            strategy: SelectionStrategy::default(),
            reward: RewardKind::default(),
            candidate_scoring: CandidateScoring::default(),
            seed,
            emitters: None,
            provider: ProviderConfig::default(),
            sampling: SamplingSettings::default(),
            retry: RetryPolicy::default(),
            clock: None,
            qdaif: QdaifSettings::default(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid run config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn registry(&self) -> Result<EmitterRegistry> {
        match &self.emitters {
            Some(list) => EmitterRegistry::from_directives(list),
            None => Ok(EmitterRegistry::default()),
        }
    }

    pub fn clock(&self) -> ClockKind {
        self.clock.unwrap_or(if self.provider.is_synthetic() {
            ClockKind::Logical
        } else {
            ClockKind::System
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_prompt.trim().is_empty() {
            return Err(Error::config("initial_prompt is empty"));
        }
        if self.pool_capacity < 2 {
            return Err(Error::config("pool_capacity must be at least 2"));
        }
        if self.initial_count == 0 || self.initial_count > self.pool_capacity {
            return Err(Error::config(format!(
                "initial_count must be in 1..={} (pool_capacity), got {}",
                self.pool_capacity, self.initial_count
            )));
        }
        if self.generations == 0 {
            return Err(Error::config("generations must be at least 1"));
        }
        if self.mutations_per_generation == 0 {
            return Err(Error::config("mutations_per_generation must be at least 1"));
        }
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.crossover_probability) {
            return Err(Error::config(format!(
                "crossover_probability must be in [0, 1], got {}",
                self.crossover_probability
            )));
        }
        self.registry()?.validate_strategy(&self.strategy)?;
        self.qdaif.validate()?;
        Ok(())
    }

    /// Id of the child created by `attempt` of `generation` (1-based generation).
    pub fn child_id(&self, generation: u32, attempt: u32) -> IndividualId {
        IndividualId(
            self.initial_count as u64
                + u64::from(generation - 1) * u64::from(self.mutations_per_generation)
                + u64::from(attempt),
        )
    }

    pub fn total_steps(&self) -> u64 {
        u64::from(self.generations) * u64::from(self.mutations_per_generation)
    }
}

// ---------------------------------------------------------------------------
// Instruction templates

/// Instruction templates sent to the mutator. `{name}` marks a substitution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub version: String,
    pub mutation: String,
    pub mutation_without_emitter: String,
    pub crossover: String,
    pub toward_cell: String,
}

const PREAMBLE: &str = "You are helping explore a diverse set of images from a text-to-image model.";
const ANSWER_ONLY: &str = "Respond with only the new prompt, without quotation marks or commentary.";

impl PromptTemplates {
    pub fn current() -> Self {
        Self {
            version: "1".into(),
            mutation: format!(
                "{PREAMBLE}\nRewrite the image prompt below according to this instruction: {{directive}}\n\nPrompt: {{prompt}}\n\n{ANSWER_ONLY}"
            ),
            mutation_without_emitter: format!(
                "{PREAMBLE}\nRewrite this prompt to produce a different image.\n\nPrompt: {{prompt}}\n\n{ANSWER_ONLY}"
            ),
            crossover: format!(
                "{PREAMBLE}\nCombine elements of the two image prompts below into one new prompt.\n\nPrompt A: {{prompt_a}}\n\nPrompt B: {{prompt_b}}\n\n{ANSWER_ONLY}"
            ),
            toward_cell: format!(
                "{PREAMBLE}\nRewrite the image prompt below so that the resulting image has {{axis1}}: {{axis1_value}}, and {{axis2}}: {{axis2_value}}.\n\nPrompt: {{prompt}}\n\n{ANSWER_ONLY}"
            ),
        }
    }
}

/// Single-pass substitution: text inserted for one placeholder is never
/// re-scanned, so prompts containing braces come through verbatim.
pub fn render_template(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => match vars.iter().find(|(k, _)| *k == &after[..close]) {
                Some((_, v)) => {
                    out.push_str(v);
                    rest = &after[close + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            },
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn render_mutation_instruction(templates: &PromptTemplates, parent_prompt: &str, directive: Option<&str>) -> String {
    match directive {
        Some(d) => render_template(&templates.mutation, &[("prompt", parent_prompt), ("directive", d)]),
        None => render_template(&templates.mutation_without_emitter, &[("prompt", parent_prompt)]),
    }
}

pub fn render_crossover_instruction(templates: &PromptTemplates, prompt_a: &str, prompt_b: &str) -> String {
    render_template(&templates.crossover, &[("prompt_a", prompt_a), ("prompt_b", prompt_b)])
}

/// Trims whitespace and any surrounding quote pairs the model wrapped its answer in.
pub fn clean_mutator_output(text: &str) -> String {
    const PAIRS: [(char, char); 5] = [('"', '"'), ('\'', '\''), ('`', '`'), ('\u{201C}', '\u{201D}'), ('\u{2018}', '\u{2019}')];
    let mut s = text.trim();
    loop {
        let stripped = PAIRS.iter().find_map(|&(open, close)| {
            s.strip_prefix(open)
                .and_then(|r| r.strip_suffix(close))
                .map(str::trim)
        });
        match stripped {
            Some(inner) if inner.len() < s.len() => s = inner,
            _ => break,
        }
    }
    s.to_string()
}

// ---------------------------------------------------------------------------
// Events

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Mutation {
        parent: IndividualId,
        emitter: Option<EmitterId>,
    },
    Crossover { parents: [IndividualId; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum EventOutcome {
    Filled,
    Replaced { evicted: IndividualId },
    Rejected,
}

/// Audit record of one mutation attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationEvent {
    pub generation: u32,
    pub attempt: u32,
    pub kind: EventKind,
    pub instruction: String,
    /// The candidate, present unless a provider failure stopped the attempt.
    pub child: Option<Individual>,
    pub candidate_novelty: Option<f64>,
    pub min_score: Option<f64>,
    pub outcome: EventOutcome,
    pub error: Option<String>,
    pub usage: TokenUsage,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
}

impl GenerationEvent {
    pub fn child_prompt(&self) -> Option<&str> {
        self.child.as_ref().map(|c| c.prompt.as_str())
    }

    pub fn child_artifact_ref(&self) -> Option<&str> {
        self.child.as_ref().map(|c| c.artifact_ref.as_str())
    }

    pub fn is_crossover(&self) -> bool {
        matches!(self.kind, EventKind::Crossover { .. })
    }

    /// The admission outcome, when a candidate reached the pool.
    pub fn insert_outcome(&self) -> Option<InsertOutcome> {
        self.child.as_ref()?;
        Some(match self.outcome {
            EventOutcome::Filled => InsertOutcome::Filled {
                candidate_score: self.candidate_novelty,
            },
            EventOutcome::Replaced { evicted } => InsertOutcome::Replaced {
                evicted,
                candidate_score: self.candidate_novelty?,
                min_score: self.min_score?,
            },
            EventOutcome::Rejected => InsertOutcome::Rejected {
                candidate_score: self.candidate_novelty?,
                min_score: self.min_score?,
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Run state and sinks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub generation: u32,
    pub pool: Pool,
    pub stats: EmitterStats,
    pub metrics: MetricRecord,
    #[serde(with = "crate::embedding::base64_le")]
    pub initial_text_embedding: EmbeddingVector,
    pub cumulative_tokens: u64,
}

/// Everything the loop needs to continue, plus the history it produced.
#[derive(Debug, Clone)]
pub struct RunState {
    pub pool: Pool,
    pub stats: EmitterStats,
    pub initial_text_embedding: EmbeddingVector,
    /// Generations fully completed (metrics recorded).
    pub generation: u32,
    /// Attempts already made in generation `generation + 1`.
    pub attempt: u32,
    pub cumulative_tokens: u64,
    pub seeds: Vec<Individual>,
    pub events: Vec<GenerationEvent>,
    pub metrics: Vec<MetricRecord>,
}

impl RunState {
    pub fn from_snapshot(snapshot: Snapshot, seeds: Vec<Individual>, events: Vec<GenerationEvent>, metrics: Vec<MetricRecord>) -> Self {
        Self {
            pool: snapshot.pool,
            stats: snapshot.stats,
            initial_text_embedding: snapshot.initial_text_embedding,
            generation: snapshot.generation,
            attempt: 0,
            cumulative_tokens: snapshot.cumulative_tokens,
            seeds,
            events,
            metrics,
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            generation: self.generation,
            pool: self.pool.clone(),
            stats: self.stats.clone(),
            metrics: self.metrics.last().cloned().expect("snapshot after metrics"),
            initial_text_embedding: self.initial_text_embedding.clone(),
            cumulative_tokens: self.cumulative_tokens,
        }
    }
}

/// Receives run records as they are produced.
pub trait RunSink {
    fn seed(&mut self, _individual: &Individual) -> Result<()> {
        Ok(())
    }
    fn event(&mut self, _event: &GenerationEvent) -> Result<()> {
        Ok(())
    }
    fn generation_end(&mut self, _snapshot: &Snapshot) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl RunSink for NullSink {}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub pool: Pool,
    pub stats: EmitterStats,
    pub seeds: Vec<Individual>,
    pub events: Vec<GenerationEvent>,
    pub metrics: Vec<MetricRecord>,
}

impl From<RunState> for RunResult {
    fn from(s: RunState) -> Self {
        Self {
            pool: s.pool,
            stats: s.stats,
            seeds: s.seeds,
            events: s.events,
            metrics: s.metrics,
        }
    }
}

pub enum RunStatus {
    Completed(RunResult),
    /// Stopped early at the requested event budget.
    Interrupted(Box<RunState>),
}

// ---------------------------------------------------------------------------
// Engine

pub struct Engine {
    config: RunConfig,
    registry: EmitterRegistry,
    providers: Providers,
    templates: PromptTemplates,
}

impl Engine {
    pub fn new(config: RunConfig, providers: Providers) -> Result<Self> {
        config.validate()?;
        let registry = config.registry()?;
        Ok(Self {
            config,
            registry,
            providers,
            templates: PromptTemplates::current(),
        })
    }

    /// Engine over the provider described in the config itself.
    pub fn from_config(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let providers = config.provider.build(config.registry()?.len(), config.seed)?;
        Self::new(config, providers)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn registry(&self) -> &EmitterRegistry {
        &self.registry
    }

    pub fn providers(&self) -> &Providers {
        &self.providers
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    fn retry<T>(&self, call: impl FnMut() -> std::result::Result<T, ProviderError>) -> std::result::Result<T, ProviderError> {
        self.config.retry.run(call)
    }

    fn embed(&self, request: EmbedRequest) -> std::result::Result<EmbeddingVector, ProviderError> {
        self.retry(|| self.providers.embedder.embed(&request)).map(|r| r.embedding)
    }

    fn generate(&self, prompt: &str, seed: u64) -> std::result::Result<(String, EmbeddingVector), ProviderError> {
        let request = GenerateRequest {
            prompt: prompt.to_string(),
            model: self.config.provider.generator_model().to_string(),
            image_size: self.config.sampling.image_size,
            seed,
        };
        let generated = self.retry(|| self.providers.generator.generate(&request))?;
        let embedding = self.embed(EmbedRequest::image(generated.artifact_ref.clone()))?;
        Ok((generated.artifact_ref, embedding))
    }

    /// `n` copies of the initial prompt, each with its own artifact.
    pub fn init_pool(&self, sink: &mut dyn RunSink) -> Result<RunState> {
        let cfg = &self.config;
        let initial_text_embedding = self.embed(EmbedRequest::text(cfg.initial_prompt.clone()))?;
        initial_text_embedding.ensure_nonzero()?;
        let mut pool = Pool::new(cfg.pool_capacity, cfg.k)?.with_scoring(cfg.candidate_scoring);
        let mut seeds = Vec::with_capacity(cfg.initial_count);
        for i in 0..cfg.initial_count {
            let seed = seeding::derive_seed(cfg.seed, &[purpose::INIT, i as u64]);
            let (artifact_ref, embedding) = self.generate(&cfg.initial_prompt, seed)?;
            let mut ind = Individual::seed(IndividualId(i as u64), cfg.initial_prompt.clone(), artifact_ref, embedding);
            ind.prompt_embedding = Some(initial_text_embedding.clone());
            pool.fill(ind.clone())?;
            sink.seed(&ind)?;
            seeds.push(ind);
        }
        let mut state = RunState {
            pool,
            stats: EmitterStats::new(&self.registry, cfg.reward),
            initial_text_embedding,
            generation: 0,
            attempt: 0,
            cumulative_tokens: 0,
            seeds,
            events: Vec::new(),
            metrics: Vec::new(),
        };
        let record = self.metrics_for(&state, 0)?;
        state.metrics.push(record);
        sink.generation_end(&state.snapshot())?;
        Ok(state)
    }

    fn metrics_for(&self, state: &RunState, generation: u32) -> Result<MetricRecord> {
        let mut record = pool_metrics(&state.pool, Some(&state.initial_text_embedding), generation, state.cumulative_tokens)?;
        if let Some(p) = &self.providers.perceptual {
            let request = PerceptualDistanceRequest {
                artifact_refs: state.pool.members().iter().map(|m| m.artifact_ref.clone()).collect(),
            };
            match self.retry(|| p.perceptual_distance(&request)) {
                Ok(r) => record.lpips = Some(r.mean_distance),
                Err(e) => log::warn!("perceptual distance unavailable for generation {generation}: {e}"),
            }
        }
        Ok(record)
    }

    /// One candidate: choose operation and parents, mutate, generate, embed,
    /// and try to admit it. Provider failures yield a rejected event with the
    /// cause recorded and leave the pool untouched.
    pub fn evolve_step(&self, state: &mut RunState, generation: u32, attempt: u32) -> Result<GenerationEvent> {
        let cfg = &self.config;
        let tick = 2 * (u64::from(generation - 1) * u64::from(cfg.mutations_per_generation) + u64::from(attempt));
        let clock = cfg.clock();
        let started_at_ms = clock.now_ms(tick);
        let mut rng = seeding::stream(cfg.seed, &[purpose::ENGINE, u64::from(generation), u64::from(attempt)]);
        let members = state.pool.members();
        let n = members.len();

        let draw: f64 = rng.random();
        let crossover = n >= 2 && draw < cfg.crossover_probability;
        let (kind, operation, instruction, lineage) = if crossover {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let (a, b) = (&members[i], &members[j]);
            (
                EventKind::Crossover { parents: [a.id, b.id] },
                MutationOp::Crossover {
                    parents: [a.prompt.clone(), b.prompt.clone()],
                },
                render_crossover_instruction(&self.templates, &a.prompt, &b.prompt),
                Lineage::Crossover { parents: [a.id, b.id] },
            )
        } else {
            let parent = &members[rng.random_range(0..n)];
            let emitter = self.registry.select(&cfg.strategy, &state.stats, &mut rng)?;
            let emitter_id = emitter.map(|e| e.id);
            (
                EventKind::Mutation {
                    parent: parent.id,
                    emitter: emitter_id,
                },
                MutationOp::Mutate {
                    parent_prompt: parent.prompt.clone(),
                    emitter: emitter_id,
                },
                render_mutation_instruction(&self.templates, &parent.prompt, emitter.map(|e| e.directive.as_str())),
                Lineage::Mutation {
                    parent: parent.id,
                    emitter: emitter_id,
                },
            )
        };

        let context = MutationContext {
            operation,
            stream_seed: seeding::derive_seed(cfg.seed, &[purpose::MUTATE, u64::from(generation), u64::from(attempt)]),
        };
        let mut usage = TokenUsage::default();
        let candidate = self.build_candidate(&instruction, &context, generation, attempt, lineage, &mut usage);

        let (child, outcome, error) = match candidate {
            Ok(child) => match state.pool.try_insert(child.clone()) {
                Ok(outcome) => (Some(child), Some(outcome), None),
                Err(Error::Domain(msg)) => (None, None, Some(msg)),
                Err(e) => return Err(e),
            },
            Err(cause) => (None, None, Some(cause)),
        };

        if let EventKind::Mutation { emitter: Some(e), .. } = kind {
            match &outcome {
                Some(o) => state.stats.record_outcome(e, o),
                None => state.stats.record_failure(e),
            }
        }
        state.cumulative_tokens += usage.total();

        let (event_outcome, candidate_novelty, min_score) = match &outcome {
            Some(InsertOutcome::Filled { candidate_score }) => (EventOutcome::Filled, *candidate_score, None),
            Some(InsertOutcome::Replaced {
                evicted,
                candidate_score,
                min_score,
            }) => (EventOutcome::Replaced { evicted: *evicted }, Some(*candidate_score), Some(*min_score)),
            Some(InsertOutcome::Rejected {
                candidate_score,
                min_score,
            }) => (EventOutcome::Rejected, Some(*candidate_score), Some(*min_score)),
            None => (EventOutcome::Rejected, None, None),
        };
        if let Some(cause) = &error {
            log::warn!("generation {generation} attempt {attempt} degraded: {cause}");
        }
        Ok(GenerationEvent {
            generation,
            attempt,
            kind,
            instruction,
            child,
            candidate_novelty,
            min_score,
            outcome: event_outcome,
            error,
            usage,
            started_at_ms,
            finished_at_ms: clock.now_ms(tick + 1),
        })
    }

    fn build_candidate(
        &self,
        instruction: &str,
        context: &MutationContext,
        generation: u32,
        attempt: u32,
        lineage: Lineage,
        usage: &mut TokenUsage,
    ) -> std::result::Result<Individual, String> {
        let cfg = &self.config;
        let request = MutateRequest {
            instruction: instruction.to_string(),
            model: cfg.provider.mutator_model().to_string(),
            temperature: cfg.sampling.temperature,
            max_output_tokens: cfg.sampling.max_output_tokens,
        };
        let response = self
            .retry(|| self.providers.mutator.mutate(&request, context))
            .map_err(|e| format!("mutate: {e}"))?;
        *usage = response.usage.unwrap_or_else(|| TokenUsage::estimate(instruction, &response.text));
        let prompt = clean_mutator_output(&response.text);
        if prompt.is_empty() {
            return Err("mutate: model returned an empty prompt".into());
        }
        let seed = seeding::derive_seed(cfg.seed, &[purpose::GENERATE, u64::from(generation), u64::from(attempt)]);
        let (artifact_ref, embedding) = self.generate(&prompt, seed).map_err(|e| format!("generate/embed: {e}"))?;
        let prompt_embedding = self
            .embed(EmbedRequest::text(prompt.clone()))
            .map_err(|e| format!("embed text: {e}"))?;
        Ok(Individual {
            id: cfg.child_id(generation, attempt),
            prompt,
            artifact_ref,
            embedding,
            prompt_embedding: Some(prompt_embedding),
            lineage: Some(lineage),
            born_generation: generation,
        })
    }

    /// Re-applies a recorded event to `state` without calling any provider.
    pub fn apply_event(&self, state: &mut RunState, event: &GenerationEvent) -> Result<()> {
        let expected = (state.generation + 1, state.attempt);
        if (event.generation, event.attempt) != expected {
            return Err(Error::store(format!(
                "event out of order: got generation {} attempt {}, expected {:?}",
                event.generation, event.attempt, expected
            )));
        }
        apply_to_pool(&mut state.pool, event)?;
        if let EventKind::Mutation { emitter: Some(e), .. } = event.kind {
            match event.insert_outcome() {
                Some(o) => state.stats.record_outcome(e, &o),
                None => state.stats.record_failure(e),
            }
        }
        state.cumulative_tokens += event.usage.total();
        state.attempt += 1;
        state.events.push(event.clone());
        Ok(())
    }

    /// Runs from scratch to completion.
    pub fn run(&self, sink: &mut dyn RunSink) -> Result<RunResult> {
        let state = self.init_pool(sink)?;
        match self.continue_run(state, sink, None)? {
            RunStatus::Completed(r) => Ok(r),
            RunStatus::Interrupted(_) => unreachable!("no event budget was set"),
        }
    }

    /// Continues `state` until all generations are done, or until
    /// `event_budget` more events have been produced.
    pub fn continue_run(&self, mut state: RunState, sink: &mut dyn RunSink, event_budget: Option<u64>) -> Result<RunStatus> {
        let cfg = &self.config;
        let mut produced = 0u64;
        while state.generation < cfg.generations {
            let generation = state.generation + 1;
            while state.attempt < cfg.mutations_per_generation {
                if event_budget.is_some_and(|b| produced >= b) {
                    return Ok(RunStatus::Interrupted(Box::new(state)));
                }
                let attempt = state.attempt;
                let event = self.evolve_step(&mut state, generation, attempt)?;
                sink.event(&event)?;
                state.events.push(event);
                state.attempt += 1;
                produced += 1;
            }
            let record = self.metrics_for(&state, generation)?;
            state.metrics.push(record);
            state.generation = generation;
            state.attempt = 0;
            sink.generation_end(&state.snapshot())?;
        }
        Ok(RunStatus::Completed(state.into()))
    }
}

fn apply_to_pool(pool: &mut Pool, event: &GenerationEvent) -> Result<()> {
    match (&event.outcome, &event.child) {
        (EventOutcome::Filled, Some(child)) => pool.fill(child.clone()),
        (EventOutcome::Replaced { evicted }, Some(child)) => pool.replace(*evicted, child.clone()),
        (EventOutcome::Rejected, _) => Ok(()),
        (_, None) => Err(Error::store(format!(
            "generation {} attempt {}: accepted event without a child",
            event.generation, event.attempt
        ))),
    }
}

/// Pool as it stood at the end of `generation`, rebuilt from the log.
pub fn replay_pool(config: &RunConfig, seeds: &[Individual], events: &[GenerationEvent], generation: u32) -> Result<Pool> {
    let mut pool = Pool::new(config.pool_capacity, config.k)?.with_scoring(config.candidate_scoring);
    for s in seeds {
        pool.fill(s.clone())?;
    }
    let wanted = generation as usize * config.mutations_per_generation as usize;
    if events.len() < wanted {
        return Err(Error::domain(format!(
            "generation {generation} not reached: log holds {} events",
            events.len()
        )));
    }
    for event in &events[..wanted] {
        apply_to_pool(&mut pool, event)?;
    }
    Ok(pool)
}

/// Recomputes the metric series from the seed individuals and the event log
/// alone. LPIPS is not recomputable and is left empty.
pub fn replay_metrics(config: &RunConfig, seeds: &[Individual], events: &[GenerationEvent]) -> Result<Vec<MetricRecord>> {
    let initial = seeds
        .first()
        .and_then(|s| s.prompt_embedding.clone())
        .ok_or_else(|| Error::store("event log has no seed individuals with a text embedding"))?;
    let mut pool = Pool::new(config.pool_capacity, config.k)?.with_scoring(config.candidate_scoring);
    for s in seeds {
        pool.fill(s.clone())?;
    }
    let mut tokens = 0u64;
    let mut out = vec![pool_metrics(&pool, Some(&initial), 0, tokens)?];
    let m = config.mutations_per_generation;
    for (i, event) in events.iter().enumerate() {
        let expected = ((i as u32) / m + 1, (i as u32) % m);
        if (event.generation, event.attempt) != expected {
            return Err(Error::store(format!(
                "event {i} is generation {} attempt {}, expected {:?}",
                event.generation, event.attempt, expected
            )));
        }
        apply_to_pool(&mut pool, event)?;
        tokens += event.usage.total();
        if event.attempt + 1 == m {
            out.push(pool_metrics(&pool, Some(&initial), event.generation, tokens)?);
        }
    }
    Ok(out)
}
