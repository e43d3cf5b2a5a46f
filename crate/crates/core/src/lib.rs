//! Novelty-driven prompt evolution for text-to-image pipelines.
//!
//! A fixed-size pool of prompts is evolved by LLM mutation and crossover;
//! candidates enter the pool only when their embedding is more novel than the
//! least novel member. See [`evolve::Engine`] for the loop and
//! [`providers`] for the boundary to the models.

pub mod ablation;
pub mod embedding;
pub mod emitters;
pub mod error;
pub mod evolve;
pub mod metrics;
pub mod pool;
pub mod providers;
pub mod qdaif;
pub mod runstore;
pub mod seeding;

pub use embedding::{cosine_distance, cosine_similarity, EmbeddingVector};
pub use emitters::{builtin_emitters, Emitter, EmitterId, EmitterRegistry, EmitterStats, RewardKind, SelectionStrategy};
pub use error::{Error, Result};
pub use evolve::{Engine, GenerationEvent, NullSink, RunConfig, RunResult, RunSink, RunStatus};
pub use metrics::{similarity_matrix, vendi_score, MetricRecord};
pub use pool::{CandidateScoring, Individual, IndividualId, InsertOutcome, Pool};
pub use providers::{Providers, SyntheticWorld, WorldParams};
