//! On-disk run directories.
//!
//! ```text
//! <run>/manifest.json         immutable run description
//! <run>/events.jsonl          seed individuals, then one record per attempt
//! <run>/metrics.jsonl         one metric record per completed generation
//! <run>/snapshots/gen-<i>.json
//! <run>/artifacts/
//! <run>/lock                  pid of the writer
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::{Error, Result};
use crate::evolve::{Engine, GenerationEvent, PromptTemplates, ProviderConfig, RunConfig, RunResult, RunSink, RunState, RunStatus, Snapshot};
use crate::metrics::MetricRecord;
use crate::pool::Individual;
use crate::providers::Providers;

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

const MANIFEST: &str = "manifest.json";
const EVENTS: &str = "events.jsonl";
const METRICS: &str = "metrics.jsonl";
const SNAPSHOTS: &str = "snapshots";
const ARTIFACTS: &str = "artifacts";
const LOCK: &str = "lock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderInfo {
    pub kind: String,
    pub endpoints: Vec<String>,
    pub mutator_model: String,
    pub generator_model: String,
    pub embedder_model: Option<String>,
}

impl ProviderInfo {
    pub fn describe(config: &ProviderConfig) -> Self {
        match config {
            ProviderConfig::Synthetic(_) => Self {
                kind: "synthetic".into(),
                endpoints: Vec::new(),
                mutator_model: "synthetic".into(),
                generator_model: "synthetic".into(),
                embedder_model: Some("synthetic".into()),
            },
            ProviderConfig::Http(c) => {
                let mut endpoints = vec![c.endpoint.clone()];
                for e in [&c.mutate_endpoint, &c.generate_endpoint, &c.embed_endpoint, &c.rate_endpoint, &c.perceptual_endpoint]
                    .into_iter()
                    .flatten()
                {
                    if !endpoints.contains(e) {
                        endpoints.push(e.clone());
                    }
                }
                Self {
                    kind: "http".into(),
                    endpoints,
                    mutator_model: c.mutator_model.clone(),
                    generator_model: c.generator_model.clone(),
                    embedder_model: c.embedder_model.clone(),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: Uuid,
    pub created_at: DateTime<Utc>,
    pub engine_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub templates: PromptTemplates,
    pub providers: ProviderInfo,
}

impl RunManifest {
    pub fn new(config: RunConfig) -> Self {
        Self {
            run_id: Uuid::new_v4(),
            created_at: Utc::now(),
            engine_version: ENGINE_VERSION.to_string(),
            seed: config.seed,
            providers: ProviderInfo::describe(&config.provider),
            templates: PromptTemplates::current(),
            config,
        }
    }

    /// Refuses to continue a run produced under different code or settings.
    pub fn check_resumable(&self) -> Result<()> {
        if self.engine_version != ENGINE_VERSION {
            return Err(Error::ManifestMismatch(format!(
                "run was created by engine {}, this is {ENGINE_VERSION}",
                self.engine_version
            )));
        }
        if self.templates != PromptTemplates::current() {
            return Err(Error::ManifestMismatch(format!(
                "run used prompt templates version {}, current templates differ",
                self.templates.version
            )));
        }
        if self.seed != self.config.seed {
            return Err(Error::ManifestMismatch("manifest seed disagrees with its config".into()));
        }
        if self.providers != ProviderInfo::describe(&self.config.provider) {
            return Err(Error::ManifestMismatch("manifest provider description disagrees with its config".into()));
        }
        Ok(())
    }
}

/// One line of `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Seed { individual: Individual },
    Step { event: GenerationEvent },
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::store(format!("{}: {e}", path.display()))
}

/// Writes `bytes` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    if let Some(dir) = path.parent() {
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

fn pid_alive(pid: u32) -> bool {
    let proc = Path::new("/proc");
    if proc.is_dir() {
        proc.join(pid.to_string()).exists()
    } else {
        true
    }
}

/// Exclusive writer lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id()).map_err(|e| io_err(&path, e))?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).unwrap_or_default();
                    match holder.trim().parse::<u32>() {
                        Ok(pid) if pid_alive(pid) => {
                            return Err(Error::store(format!("{} is locked by running process {pid}", dir.display())));
                        }
                        _ => {
                            log::warn!("removing stale lock {} ({:?})", path.display(), holder.trim());
                            fs::remove_file(&path).map_err(|e| io_err(&path, e))?;
                        }
                    }
                }
                Err(e) => return Err(io_err(&path, e)),
            }
        }
        Err(Error::store(format!("cannot lock {}", dir.display())))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn append_line<T: Serialize>(file: &mut File, path: &Path, value: &T) -> Result<()> {
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(|e| io_err(path, e))?;
    file.sync_data().map_err(|e| io_err(path, e))
}

/// Parses a JSONL file. A final line that fails to parse is treated as a torn
/// write: it is cut off (when `repair` is set) and reported in the warning log.
/// Damage anywhere else is an error.
fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, repair: bool) -> Result<Vec<T>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path, e)),
    };
    let mut out = Vec::new();
    let mut good_len = 0usize;
    let mut offset = 0usize;
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    for (i, raw) in lines.iter().enumerate() {
        let line = raw.trim_end_matches(['\n', '\r']);
        let start = offset;
        offset += raw.len();
        if line.trim().is_empty() {
            good_len = offset;
            continue;
        }
        match serde_json::from_str::<T>(line) {
            Ok(v) if raw.ends_with('\n') || !repair => {
                out.push(v);
                good_len = offset;
            }
            Ok(v) => {
                // Complete record missing only its newline.
                out.push(v);
                let mut f = OpenOptions::new().append(true).open(path).map_err(|e| io_err(path, e))?;
                f.write_all(b"\n").map_err(|e| io_err(path, e))?;
                f.sync_data().map_err(|e| io_err(path, e))?;
                good_len = offset + 1;
            }
            Err(e) if i + 1 == lines.len() => {
                log::warn!("{}: dropping torn final line at byte {start}: {e}", path.display());
                if repair {
                    let f = OpenOptions::new().write(true).open(path).map_err(|e| io_err(path, e))?;
                    f.set_len(good_len as u64).map_err(|e| io_err(path, e))?;
                    f.sync_data().map_err(|e| io_err(path, e))?;
                }
                break;
            }
            Err(e) => {
                return Err(Error::store(format!("{} line {}: {e}", path.display(), i + 1)));
            }
        }
    }
    Ok(out)
}

fn snapshot_path(dir: &Path, generation: u32) -> PathBuf {
    dir.join(SNAPSHOTS).join(format!("gen-{generation}.json"))
}

fn snapshot_generations(dir: &Path) -> Result<Vec<u32>> {
    let sdir = dir.join(SNAPSHOTS);
    let mut gens = Vec::new();
    let entries = match fs::read_dir(&sdir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(gens),
        Err(e) => return Err(io_err(&sdir, e)),
    };
    for entry in entries {
        let name = entry.map_err(|e| io_err(&sdir, e))?.file_name();
        let name = name.to_string_lossy();
        if let Some(g) = name.strip_prefix("gen-").and_then(|r| r.strip_suffix(".json")) {
            if let Ok(g) = g.parse() {
                gens.push(g);
            }
        }
    }
    gens.sort_unstable();
    Ok(gens)
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::store(format!("{}: {e}", path.display())))
}

pub fn read_snapshot(dir: &Path, generation: u32) -> Result<Snapshot> {
    let path = snapshot_path(dir, generation);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::store(format!("{}: {e}", path.display())))
}

/// Everything on disk for one run.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub manifest: RunManifest,
    pub seeds: Vec<Individual>,
    pub events: Vec<GenerationEvent>,
    pub metrics: Vec<MetricRecord>,
    pub snapshot: Option<Snapshot>,
}

fn split_log(records: Vec<LogRecord>) -> Result<(Vec<Individual>, Vec<GenerationEvent>)> {
    let mut seeds = Vec::new();
    let mut events = Vec::new();
    for r in records {
        match r {
            LogRecord::Seed { individual } if events.is_empty() => seeds.push(individual),
            LogRecord::Seed { individual } => {
                return Err(Error::store(format!("seed record {} after step records", individual.id)));
            }
            LogRecord::Step { event } => events.push(event),
        }
    }
    Ok((seeds, events))
}

fn load(dir: &Path, repair: bool) -> Result<LoadedRun> {
    let manifest = read_manifest(dir)?;
    let (seeds, events) = split_log(read_jsonl(&dir.join(EVENTS), repair)?)?;
    let metrics = read_jsonl(&dir.join(METRICS), repair)?;
    let snapshot = match snapshot_generations(dir)?.last() {
        Some(&g) => Some(read_snapshot(dir, g)?),
        None => None,
    };
    Ok(LoadedRun {
        manifest,
        seeds,
        events,
        metrics,
        snapshot,
    })
}

/// Reads a run without modifying it.
pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    load(dir, false)
}

/// Writer side of a run directory; records everything the engine emits.
#[derive(Debug)]
pub struct RunStore {
    dir: PathBuf,
    events: File,
    metrics: File,
    _lock: RunLock,
}

impl RunStore {
    /// Creates a fresh run directory. It must not exist or be empty.
    pub fn create(dir: &Path, manifest: &RunManifest) -> Result<Self> {
        if dir.exists() && fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some() {
            return Err(Error::store(format!("run directory {} is not empty", dir.display())));
        }
        fs::create_dir_all(dir.join(SNAPSHOTS)).map_err(|e| io_err(dir, e))?;
        fs::create_dir_all(dir.join(ARTIFACTS)).map_err(|e| io_err(dir, e))?;
        let lock = RunLock::acquire(dir)?;
        write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(manifest)?.as_bytes())?;
        Self::open_files(dir, lock)
    }

    fn open_files(dir: &Path, lock: RunLock) -> Result<Self> {
        let open = |name: &str| {
            let p = dir.join(name);
            OpenOptions::new().create(true).append(true).open(&p).map_err(|e| io_err(&p, e))
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            events: open(EVENTS)?,
            metrics: open(METRICS)?,
            _lock: lock,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn append_event(&mut self, record: &LogRecord) -> Result<()> {
        let path = self.dir.join(EVENTS);
        append_line(&mut self.events, &path, record)
    }

    pub fn write_snapshot(&mut self, snapshot: &Snapshot) -> Result<()> {
        write_atomic(
            &snapshot_path(&self.dir, snapshot.generation),
            serde_json::to_string(snapshot)?.as_bytes(),
        )
    }
}

impl RunSink for RunStore {
    fn seed(&mut self, individual: &Individual) -> Result<()> {
        self.append_event(&LogRecord::Seed {
            individual: individual.clone(),
        })
    }

    fn event(&mut self, event: &GenerationEvent) -> Result<()> {
        self.append_event(&LogRecord::Step { event: event.clone() })
    }

    fn generation_end(&mut self, snapshot: &Snapshot) -> Result<()> {
        self.write_snapshot(snapshot)?;
        let path = self.dir.join(METRICS);
        append_line(&mut self.metrics, &path, &snapshot.metrics)
    }
}

/// Starts a run in `dir`, stopping early after `event_budget` attempts if given.
pub fn start_run(config: RunConfig, providers: Providers, dir: &Path, event_budget: Option<u64>) -> Result<(RunManifest, RunStatus)> {
    let engine = Engine::new(config.clone(), providers)?;
    let manifest = RunManifest::new(config);
    let mut store = RunStore::create(dir, &manifest)?;
    let state = engine.init_pool(&mut store)?;
    let status = engine.continue_run(state, &mut store, event_budget)?;
    Ok((manifest, status))
}

/// Continues an interrupted run from its latest snapshot plus the events
/// logged after it. `providers` defaults to those described by the manifest.
pub fn resume_run(dir: &Path, providers: Option<Providers>, event_budget: Option<u64>) -> Result<RunStatus> {
    let manifest = read_manifest(dir)?;
    manifest.check_resumable()?;
    let config = manifest.config.clone();
    let engine = match providers {
        Some(p) => Engine::new(config.clone(), p)?,
        None => Engine::from_config(config.clone())?,
    };
    let lock = RunLock::acquire(dir)?;
    let loaded = load(dir, true)?;
    let m = config.mutations_per_generation as usize;

    let Some(snapshot) = loaded.snapshot else {
        // Interrupted during initialization: start over.
        log::warn!("{}: no snapshot, restarting from the initial pool", dir.display());
        write_atomic(&dir.join(EVENTS), b"")?;
        write_atomic(&dir.join(METRICS), b"")?;
        let mut store = RunStore::open_files(dir, lock)?;
        let state = engine.init_pool(&mut store)?;
        return engine.continue_run(state, &mut store, event_budget);
    };

    if loaded.seeds.len() != config.initial_count {
        return Err(Error::store(format!(
            "log holds {} seed records, config expects {}",
            loaded.seeds.len(),
            config.initial_count
        )));
    }
    let done = snapshot.generation as usize * m;
    if loaded.events.len() < done {
        return Err(Error::store(format!(
            "snapshot is at generation {} but the log holds only {} events",
            snapshot.generation,
            loaded.events.len()
        )));
    }
    let mut metrics: Vec<MetricRecord> = loaded
        .metrics
        .into_iter()
        .filter(|r| r.generation <= snapshot.generation)
        .collect();
    if metrics.last().map(|r| r.generation) != Some(snapshot.generation) {
        metrics.push(snapshot.metrics.clone());
    }
    if metrics.len() != snapshot.generation as usize + 1 {
        return Err(Error::store(format!(
            "metrics.jsonl holds {} records for {} generations",
            metrics.len(),
            snapshot.generation + 1
        )));
    }
    let mut text = String::new();
    for r in &metrics {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_atomic(&dir.join(METRICS), text.as_bytes())?;

    let mut events = loaded.events;
    let trailing = events.split_off(done);
    let mut state = RunState::from_snapshot(snapshot, loaded.seeds, events, metrics);
    for e in &trailing {
        engine.apply_event(&mut state, e)?;
    }
    let mut store = RunStore::open_files(dir, lock)?;
    engine.continue_run(state, &mut store, event_budget)
}

/// Convenience wrapper: start and run to completion.
pub fn run_to_completion(config: RunConfig, providers: Providers, dir: &Path) -> Result<RunResult> {
    match start_run(config, providers, dir, None)?.1 {
        RunStatus::Completed(r) => Ok(r),
        RunStatus::Interrupted(_) => unreachable!("no event budget was set"),
    }
}
