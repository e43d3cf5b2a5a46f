use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wander_core::ablation::{parse_strategies, run_ablation};
use wander_core::evolve::{replay_pool, RunConfig, RunStatus};
use wander_core::metrics::{embedder_calls, metrics_to_csv, similarity_matrix, token_totals};
use wander_core::qdaif::qdaif_run;
use wander_core::runstore::{self, load_run, resume_run, start_run, write_atomic, RunManifest};
use wander_core::{Error, Result};

#[derive(Parser)]
#[command(name = "wander", version, about = "Novelty-driven prompt evolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new run.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to runs/<run id>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue an interrupted run.
    Resume { run_dir: PathBuf },
    /// Summarize a run.
    Report {
        run_dir: PathBuf,
        /// Print the per-generation metric series as CSV.
        #[arg(long)]
        csv: bool,
        /// Print the pool's cosine similarity matrix at this generation as CSV.
        #[arg(long, value_name = "GEN")]
        similarity_matrix: Option<u32>,
        /// Directory written by `wander qdaif`, for a side-by-side comparison.
        #[arg(long)]
        qdaif: Option<PathBuf>,
    },
    /// Compare emitter selection strategies over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "none,fixed,random,bandit")]
        strategies: String,
        #[arg(long, default_value_t = 10)]
        runs: u32,
        #[arg(long)]
        csv: bool,
    },
    /// Run the MAP-Elites baseline.
    Qdaif {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to runs/qdaif-<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = RunConfig::from_file(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn providers_for(config: &RunConfig) -> Result<wander_core::Providers> {
    config.provider.build(config.registry()?.len(), config.seed)
}

fn cmd_run(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let config = load_config(&config, seed)?;
    let providers = providers_for(&config)?;
    let manifest = RunManifest::new(config.clone());
    let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(manifest.run_id.to_string()));
    eprintln!("run directory: {}", dir.display());
    let (_, status) = start_run(config, providers, &dir, None)?;
    if let RunStatus::Completed(r) = status {
        let last = r.metrics.last().expect("metrics include generation 0");
        println!("{}", dir.display());
        eprintln!(
            "generation {}: vendi {:.4}, cumulative tokens {}",
            last.generation, last.vendi, last.cumulative_tokens
        );
    }
    Ok(())
}

fn cmd_resume(dir: PathBuf) -> Result<()> {
    if let RunStatus::Completed(r) = resume_run(&dir, None, None)? {
        let last = r.metrics.last().expect("metrics include generation 0");
        eprintln!(
            "generation {}: vendi {:.4}, cumulative tokens {}",
            last.generation, last.vendi, last.cumulative_tokens
        );
    }
    Ok(())
}

fn cmd_report(dir: PathBuf, csv: bool, matrix: Option<u32>, qdaif: Option<PathBuf>) -> Result<()> {
    let run = load_run(&dir)?;
    if let Some(g) = matrix {
        let pool = replay_pool(&run.manifest.config, &run.seeds, &run.events, g)?;
        print!("{}", similarity_matrix(&pool.embeddings())?.to_csv());
        return Ok(());
    }
    if csv {
        print!("{}", metrics_to_csv(&run.metrics));
        return Ok(());
    }
    let m = &run.manifest;
    println!("run {} (engine {}, seed {})", m.run_id, m.engine_version, m.seed);
    println!("created {}", m.created_at.to_rfc3339());
    println!("provider {} mutator={} generator={}", m.providers.kind, m.providers.mutator_model, m.providers.generator_model);
    println!("strategy {}", m.config.strategy.name());
    println!();
    println!("{:>4} {:>5} {:>8} {:>8} {:>8} {:>9} {:>8}", "gen", "size", "vendi", "dist", "min_nov", "relevance", "tokens");
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for r in &run.metrics {
        println!(
            "{:>4} {:>5} {:>8.4} {:>8} {:>8} {:>9} {:>8}",
            r.generation,
            r.pool_size,
            r.vendi,
            f(r.mean_pairwise_distance),
            f(r.min_novelty),
            f(r.relevance),
            r.cumulative_tokens
        );
    }
    let t = token_totals(&run.events);
    println!();
    println!(
        "tokens: total {} (prompt {}, completion {}; mutation {}, crossover {}; {:.0}% estimated)",
        t.total,
        t.prompt_tokens,
        t.completion_tokens,
        t.mutation_tokens,
        t.crossover_tokens,
        100.0 * t.estimated_fraction
    );
    println!("embedder calls: {}", embedder_calls(run.seeds.len(), &run.events));
    if let Some(qdir) = qdaif {
        let text = fs::read_to_string(qdir.join("summary.json")).map_err(|e| Error::store(format!("{}: {e}", qdir.display())))?;
        let q: serde_json::Value = serde_json::from_str(&text)?;
        let last = run.metrics.last().expect("metrics include generation 0");
        println!();
        println!("{:<8} {:>8} {:>10}", "method", "vendi", "tokens");
        println!("{:<8} {:>8.4} {:>10}", "wander", last.vendi, last.cumulative_tokens);
        println!(
            "{:<8} {:>8.4} {:>10}",
            "qdaif",
            q["final_vendi"].as_f64().unwrap_or(f64::NAN),
            q["total_tokens"].as_u64().unwrap_or(0)
        );
    }
    Ok(())
}

fn cmd_ablate(config: PathBuf, strategies: String, runs: u32, csv: bool) -> Result<()> {
    let config = load_config(&config, None)?;
    let table = run_ablation(&config, &parse_strategies(&strategies)?, runs)?;
    if csv {
        print!("{}", table.to_csv());
    } else {
        println!("{table}");
    }
    Ok(())
}

fn cmd_qdaif(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let config = load_config(&config, seed)?;
    let providers = providers_for(&config)?;
    let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(format!("qdaif-{}", config.seed)));
    fs::create_dir_all(&dir).map_err(|e| Error::store(format!("{}: {e}", dir.display())))?;
    let result = qdaif_run(&config, &providers)?;
    let mut events = String::new();
    for e in &result.events {
        events.push_str(&serde_json::to_string(e)?);
        events.push('\n');
    }
    write_atomic(&dir.join("events.jsonl"), events.as_bytes())?;
    write_atomic(&dir.join("grid.csv"), result.grid.to_csv()?.as_bytes())?;
    write_atomic(
        &dir.join("grid_manifest.json"),
        serde_json::to_string_pretty(&result.grid.image_manifest())?.as_bytes(),
    )?;
    let summary = serde_json::json!({
        "engine_version": runstore::ENGINE_VERSION,
        "config": config,
        "steps": result.events.len(),
        "coverage": result.grid.coverage(),
        "qd_score": result.grid.qd_score(),
        "final_vendi": result.final_vendi,
        "total_tokens": result.total_tokens,
    });
    write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    println!("{}", dir.display());
    eprintln!(
        "coverage {:.3}, qd-score {:.4}, vendi {}",
        result.grid.coverage(),
        result.grid.qd_score(),
        result.final_vendi.map_or("-".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out } => cmd_run(config, seed, out),
        Command::Resume { run_dir } => cmd_resume(run_dir),
        Command::Report {
            run_dir,
            csv,
            similarity_matrix,
            qdaif,
        } => cmd_report(run_dir, csv, similarity_matrix, qdaif),
        Command::Ablate {
            config,
            strategies,
            runs,
            csv,
        } => cmd_ablate(config, strategies, runs, csv),
        Command::Qdaif { config, seed, out } => cmd_qdaif(config, seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
