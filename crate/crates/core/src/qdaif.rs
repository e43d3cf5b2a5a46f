//! MAP-Elites baseline over two rated image axes.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::evolve::{clean_mutator_output, render_template, PromptTemplates, RunConfig};
use crate::metrics::vendi_score;
use crate::pool::{Individual, IndividualId, Lineage};
use crate::providers::{
    EmbedRequest, GenerateRequest, MutateRequest, MutationContext, MutationOp, ProviderError, Providers, RateRequest,
    TokenUsage,
};
use crate::seeding::{self, purpose};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub name: String,
    pub bins: Vec<String>,
}

impl AxisSpec {
    pub fn new(name: impl Into<String>, bins: &[&str]) -> Result<Self> {
        let axis = Self {
            name: name.into(),
            bins: bins.iter().map(|b| b.to_string()).collect(),
        };
        axis.validate()?;
        Ok(axis)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins.len() < 2 {
            return Err(Error::config(format!("axis {:?} needs at least 2 bins", self.name)));
        }
        let unique: BTreeSet<&String> = self.bins.iter().collect();
        if unique.len() != self.bins.len() {
            return Err(Error::config(format!("axis {:?} has duplicate bin labels", self.name)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }
}

pub fn default_axes() -> [AxisSpec; 2] {
    [
        AxisSpec {
            name: "detail".into(),
            bins: ["minimal", "sparse", "moderate", "detailed", "intricate"].map(String::from).to_vec(),
        },
        AxisSpec {
            name: "image style".into(),
            bins: ["photorealistic", "painterly", "illustrated", "abstract", "surreal"].map(String::from).to_vec(),
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub quality: f64,
    pub axis1_bin: usize,
    pub axis2_bin: usize,
}

impl Rating {
    pub fn cell(&self) -> (usize, usize) {
        (self.axis1_bin, self.axis2_bin)
    }
}

fn d_steps() -> u32 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QdaifSettings {
    #[serde(default = "default_axes")]
    pub axes: [AxisSpec; 2],
    #[serde(default = "d_steps")]
    pub steps: u32,
}

impl Default for QdaifSettings {
    fn default() -> Self {
        Self {
            axes: default_axes(),
            steps: d_steps(),
        }
    }
}

impl QdaifSettings {
    pub fn validate(&self) -> Result<()> {
        self.axes[0].validate()?;
        self.axes[1].validate()?;
        if self.steps == 0 {
            return Err(Error::config("qdaif.steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Elite {
    pub individual: Individual,
    pub rating: Rating,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum ArchiveOutcome {
    NewElite,
    Displaced { previous_quality: f64 },
    Discarded { elite_quality: f64 },
}

/// One elite per (axis1 bin, axis2 bin) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    axes: [AxisSpec; 2],
    cells: Vec<Option<Elite>>,
}

impl Grid {
    pub fn new(axes: [AxisSpec; 2]) -> Result<Self> {
        axes[0].validate()?;
        axes[1].validate()?;
        let cells = vec![None; axes[0].len() * axes[1].len()];
        Ok(Self { axes, cells })
    }

    pub fn axes(&self) -> &[AxisSpec; 2] {
        &self.axes
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.axes[0].len(), self.axes[1].len())
    }

    fn index(&self, cell: (usize, usize)) -> Result<usize> {
        let (a, b) = self.shape();
        if cell.0 >= a || cell.1 >= b {
            return Err(Error::domain(format!("cell {cell:?} outside a {a}x{b} grid")));
        }
        Ok(cell.0 * b + cell.1)
    }

    pub fn get(&self, cell: (usize, usize)) -> Option<&Elite> {
        self.index(cell).ok().and_then(|i| self.cells[i].as_ref())
    }

    pub fn elites(&self) -> impl Iterator<Item = ((usize, usize), &Elite)> {
        let b = self.shape().1;
        self.cells
            .iter()
            .enumerate()
            .filter_map(move |(i, c)| c.as_ref().map(|e| ((i / b, i % b), e)))
    }

    pub fn filled(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn coverage(&self) -> f64 {
        self.filled() as f64 / self.cells.len() as f64
    }

    pub fn qd_score(&self) -> f64 {
        self.elites().map(|(_, e)| e.rating.quality).sum()
    }

    /// Vendi score over elite image embeddings; `None` while the grid is empty.
    pub fn vendi(&self) -> Result<Option<f64>> {
        let embeddings: Vec<EmbeddingVector> = self.elites().map(|(_, e)| e.individual.embedding.clone()).collect();
        if embeddings.is_empty() {
            return Ok(None);
        }
        vendi_score(&embeddings).map(Some)
    }

    /// Uniform over empty cells if there are any, otherwise over all cells.
    pub fn pick_target_cell<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let b = self.shape().1;
        let empty: Vec<usize> = (0..self.cells.len()).filter(|&i| self.cells[i].is_none()).collect();
        let i = if empty.is_empty() {
            rng.random_range(0..self.cells.len())
        } else {
            empty[rng.random_range(0..empty.len())]
        };
        (i / b, i % b)
    }

    /// Keeps the candidate iff its cell is empty or it is strictly better.
    pub fn archive_insert(&mut self, individual: Individual, rating: Rating) -> Result<ArchiveOutcome> {
        let i = self.index(rating.cell())?;
        if !(0.0..=1.0).contains(&rating.quality) {
            return Err(Error::domain(format!("quality {} outside [0, 1]", rating.quality)));
        }
        let outcome = match &self.cells[i] {
            None => ArchiveOutcome::NewElite,
            Some(e) if rating.quality > e.rating.quality => ArchiveOutcome::Displaced {
                previous_quality: e.rating.quality,
            },
            Some(e) => {
                return Ok(ArchiveOutcome::Discarded {
                    elite_quality: e.rating.quality,
                })
            }
        };
        self.cells[i] = Some(Elite { individual, rating });
        Ok(outcome)
    }

    /// One row per cell, elites or not.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let write_err = |e: csv::Error| Error::store(format!("csv: {e}"));
        w.write_record([
            "axis1_bin",
            "axis1_label",
            "axis2_bin",
            "axis2_label",
            "quality",
            "individual_id",
            "prompt",
            "artifact_ref",
        ])
        .map_err(write_err)?;
        let (a, b) = self.shape();
        for i in 0..a {
            for j in 0..b {
                let elite = self.get((i, j));
                w.write_record([
                    i.to_string(),
                    self.axes[0].bins[i].clone(),
                    j.to_string(),
                    self.axes[1].bins[j].clone(),
                    elite.map_or(String::new(), |e| e.rating.quality.to_string()),
                    elite.map_or(String::new(), |e| e.individual.id.0.to_string()),
                    elite.map_or(String::new(), |e| e.individual.prompt.clone()),
                    elite.map_or(String::new(), |e| e.individual.artifact_ref.clone()),
                ])
                .map_err(write_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::store(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::store(format!("csv: {e}")))
    }

    /// Image references laid out row-major by axis 1 then axis 2.
    pub fn image_manifest(&self) -> GridManifest {
        let (a, b) = self.shape();
        GridManifest {
            axes: self.axes.clone(),
            rows: (0..a)
                .map(|i| (0..b).map(|j| self.get((i, j)).map(|e| e.individual.artifact_ref.clone())).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridManifest {
    pub axes: [AxisSpec; 2],
    pub rows: Vec<Vec<Option<String>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QdaifEvent {
    pub step: u32,
    pub target_cell: (usize, usize),
    pub parent: Option<IndividualId>,
    pub instruction: String,
    pub child: Option<Individual>,
    pub rating: Option<Rating>,
    pub outcome: Option<ArchiveOutcome>,
    pub error: Option<String>,
    pub usage: TokenUsage,
    pub coverage: f64,
    pub qd_score: f64,
}

#[derive(Debug, Clone)]
pub struct QdaifResult {
    pub grid: Grid,
    pub events: Vec<QdaifEvent>,
    pub final_vendi: Option<f64>,
    pub total_tokens: u64,
}

pub fn render_cell_instruction(templates: &PromptTemplates, axes: &[AxisSpec; 2], parent_prompt: &str, cell: (usize, usize)) -> String {
    render_template(
        &templates.toward_cell,
        &[
            ("prompt", parent_prompt),
            ("axis1", &axes[0].name),
            ("axis1_value", &axes[0].bins[cell.0]),
            ("axis2", &axes[1].name),
            ("axis2_value", &axes[1].bins[cell.1]),
        ],
    )
}

/// Runs `config.qdaif.steps` cell-directed mutations starting from the
/// initial prompt. Needs a rater.
pub fn qdaif_run(config: &RunConfig, providers: &Providers) -> Result<QdaifResult> {
    config.validate()?;
    let settings = &config.qdaif;
    let rater = providers
        .rater
        .as_ref()
        .ok_or_else(|| Error::config("qdaif needs a rater provider"))?;
    let templates = PromptTemplates::current();
    let mut grid = Grid::new(settings.axes.clone())?;
    let bins = (settings.axes[0].len(), settings.axes[1].len());
    let mut events = Vec::with_capacity(settings.steps as usize);
    let mut total_tokens = 0u64;

    for step in 0..settings.steps {
        let mut rng = seeding::stream(config.seed, &[purpose::QDAIF, u64::from(step)]);
        let target = grid.pick_target_cell(&mut rng);
        let elites: Vec<&Elite> = grid.elites().map(|(_, e)| e).collect();
        let parent = if elites.is_empty() {
            None
        } else {
            Some(&elites[rng.random_range(0..elites.len())].individual)
        };
        let parent_prompt = parent.map_or(config.initial_prompt.as_str(), |p| p.prompt.as_str());
        let parent_id = parent.map(|p| p.id);
        let instruction = render_cell_instruction(&templates, &settings.axes, parent_prompt, target);
        let context = MutationContext {
            operation: MutationOp::TowardCell {
                parent_prompt: parent_prompt.to_string(),
                cell: target,
                bins,
            },
            stream_seed: seeding::derive_seed(config.seed, &[purpose::QDAIF, purpose::MUTATE, u64::from(step)]),
        };
        let mut usage = TokenUsage::default();
        let attempt = (|| -> std::result::Result<(Individual, Rating), String> {
            let request = MutateRequest {
                instruction: instruction.clone(),
                model: config.provider.mutator_model().to_string(),
                temperature: config.sampling.temperature,
                max_output_tokens: config.sampling.max_output_tokens,
            };
            let response = config
                .retry
                .run(|| providers.mutator.mutate(&request, &context))
                .map_err(|e| format!("mutate: {e}"))?;
            usage = response.usage.unwrap_or_else(|| TokenUsage::estimate(&instruction, &response.text));
            let prompt = clean_mutator_output(&response.text);
            if prompt.is_empty() {
                return Err("mutate: model returned an empty prompt".into());
            }
            let generate = GenerateRequest {
                prompt: prompt.clone(),
                model: config.provider.generator_model().to_string(),
                image_size: config.sampling.image_size,
                seed: seeding::derive_seed(config.seed, &[purpose::QDAIF, purpose::GENERATE, u64::from(step)]),
            };
            let generated = config
                .retry
                .run(|| providers.generator.generate(&generate))
                .map_err(|e| format!("generate: {e}"))?;
            let embed = EmbedRequest::image(generated.artifact_ref.clone());
            let embedding = config
                .retry
                .run(|| providers.embedder.embed(&embed))
                .map_err(|e| format!("embed: {e}"))?
                .embedding;
            let rate = RateRequest {
                artifact_ref: generated.artifact_ref.clone(),
                axes: settings.axes.clone(),
            };
            let rating = config.retry.run(|| rater.rate(&rate)).map_err(|e| format!("rate: {e}"))?;
            let lineage = parent_id.map(|p| Lineage::Mutation { parent: p, emitter: None });
            let individual = Individual {
                id: IndividualId(u64::from(step)),
                prompt,
                artifact_ref: generated.artifact_ref,
                embedding,
                prompt_embedding: None,
                born_generation: if lineage.is_some() { step + 1 } else { 0 },
                lineage,
            };
            Ok((individual, rating))
        })();
        total_tokens += usage.total();

        let (child, rating, outcome, error) = match attempt {
            Ok((individual, rating)) => {
                let outcome = grid.archive_insert(individual.clone(), rating).map_err(|e| {
                    Error::Provider(ProviderError::Protocol {
                        endpoint: "rate".into(),
                        message: e.to_string(),
                    })
                })?;
                (Some(individual), Some(rating), Some(outcome), None)
            }
            Err(cause) => {
                log::warn!("qdaif step {step} degraded: {cause}");
                (None, None, None, Some(cause))
            }
        };
        events.push(QdaifEvent {
            step,
            target_cell: target,
            parent: parent_id,
            instruction,
            child,
            rating,
            outcome,
            error,
            usage,
            coverage: grid.coverage(),
            qd_score: grid.qd_score(),
        });
    }
    let final_vendi = grid.vendi()?;
    Ok(QdaifResult {
        grid,
        events,
        final_vendi,
        total_tokens,
    })
}
