//! Declarative portability experiment grid: enumeration, execution with a
//! cached pre-porting stage, persistence and aggregation.
//!
//! Results directory layout:
//!
//! ```text
//! <out>/modules/<origin>__<technique>__<dataset>__pre<N>__seed<S>.peftmod
//! <out>/traces/run<index>.csv
//! <out>/records.jsonl
//! <out>/reports/...
//! ```

mod report;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::HostModel;
use crate::peft::{self, HostMeta, PeftConfig, PeftTechnique};
use crate::porting::{self, ModuleFile, PortScenario, Provenance};
use crate::tasks::{self, ExampleSet, Vocab};
use crate::train::{self, TrainConfig, TrainError};

pub use report::{chart_svg, report, ReportSummary};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid dimension '{0}' is empty")]
    EmptyDimension(&'static str),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("no ok records to aggregate")]
    EmptyGroup,
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelPair {
    pub origin: String,
    pub receiving: String,
}

impl ModelPair {
    pub fn new(origin: impl Into<String>, receiving: impl Into<String>) -> Self {
        Self {
            origin: origin.into(),
            receiving: receiving.into(),
        }
    }

    /// Porting direction between host kinds. A host id's kind is the part
    /// before an optional `@size` suffix: `raw@base -> instruct@base` is
    /// `raw->instruct`.
    pub fn direction(&self) -> String {
        format!("{}->{}", host_kind(&self.origin), host_kind(&self.receiving))
    }
}

fn host_kind(id: &str) -> &str {
    id.split('@').next().unwrap_or(id)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetCondition {
    /// Pre- and post-porting training on the same dataset.
    Same,
    /// Pre-porting on the second dataset, post-porting on the first.
    Different,
}

impl DatasetCondition {
    pub fn name(self) -> &'static str {
        match self {
            DatasetCondition::Same => "same",
            DatasetCondition::Different => "different",
        }
    }
}

impl fmt::Display for DatasetCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetCondition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "same" => Ok(DatasetCondition::Same),
            "different" => Ok(DatasetCondition::Different),
            other => Err(format!("unknown dataset condition '{other}'")),
        }
    }
}

/// Optimization settings shared by every run of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingPlan {
    pub pre_learning_rate: f64,
    pub post_learning_rate: f64,
    pub warmup_fraction: f64,
    pub pre_batch_tokens: usize,
    pub post_batch_tokens: usize,
    /// Per-technique config overrides; techniques not listed use
    /// [`PeftConfig::desk`] for the host width.
    pub peft: Vec<PeftConfig>,
    /// Evaluate on at most this many test examples.
    pub max_eval_examples: Option<usize>,
    /// Write a loss trace per run.
    pub write_traces: bool,
}

impl Default for TrainingPlan {
    fn default() -> Self {
        Self {
            pre_learning_rate: 1e-4,
            post_learning_rate: 1e-4,
            warmup_fraction: 0.1,
            pre_batch_tokens: 4096,
            post_batch_tokens: 2048,
            peft: Vec::new(),
            max_eval_examples: None,
            write_traces: true,
        }
    }
}

impl TrainingPlan {
    pub fn peft_config(&self, technique: PeftTechnique, hidden_dim: usize) -> PeftConfig {
        self.peft
            .iter()
            .find(|c| c.technique() == technique)
            .cloned()
            .unwrap_or_else(|| PeftConfig::desk(technique, hidden_dim))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub model_pairs: Vec<ModelPair>,
    pub techniques: Vec<PeftTechnique>,
    pub conditions: Vec<DatasetCondition>,
    pub scenarios: Vec<PortScenario>,
    pub pre_steps: Vec<usize>,
    pub post_steps: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub training: TrainingPlan,
}

impl GridSpec {
    /// Full-size grid: two host sizes in both porting directions, all four
    /// techniques, both dataset conditions, all three scenarios,
    /// pre-porting {5000, 10000}, post-porting {500, 1000, 3000}, three seeds.
    pub fn full_scale() -> Self {
        Self {
            model_pairs: vec![
                ModelPair::new("raw@base", "instruct@base"),
                ModelPair::new("instruct@base", "raw@base"),
                ModelPair::new("raw@large", "instruct@large"),
                ModelPair::new("instruct@large", "raw@large"),
            ],
            techniques: PeftTechnique::ALL.to_vec(),
            conditions: vec![DatasetCondition::Same, DatasetCondition::Different],
            scenarios: PortScenario::ALL.to_vec(),
            pre_steps: vec![5000, 10000],
            post_steps: vec![500, 1000, 3000],
            seeds: vec![1, 2, 3],
            training: TrainingPlan::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, GridError> {
        toml::from_str(text).map_err(|e| GridError::InvalidSpec(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, GridError> {
        toml::to_string(self).map_err(|e| GridError::InvalidSpec(e.to_string()))
    }

    fn check(&self) -> Result<(), GridError> {
        let dims: [(&'static str, bool); 7] = [
            ("model_pairs", self.model_pairs.is_empty()),
            ("techniques", self.techniques.is_empty()),
            ("conditions", self.conditions.is_empty()),
            ("scenarios", self.scenarios.is_empty()),
            ("pre_steps", self.pre_steps.is_empty()),
            ("post_steps", self.post_steps.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ];
        match dims.iter().find(|(_, empty)| *empty) {
            Some((name, _)) => Err(GridError::EmptyDimension(name)),
            None => Ok(()),
        }
    }
}

/// One point of the grid. FromScratch runs carry no pre-porting steps.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunCoord {
    pub index: usize,
    pub pair: ModelPair,
    pub technique: PeftTechnique,
    pub condition: DatasetCondition,
    pub scenario: PortScenario,
    pub pre_steps: Option<usize>,
    pub post_steps: usize,
    pub seed: u64,
}

impl RunCoord {
    fn same_point(&self, other: &RunCoord) -> bool {
        RunCoord { index: 0, ..self.clone() } == RunCoord { index: 0, ..other.clone() }
    }
}

/// Cartesian product of every dimension, except that FromScratch appears
/// once per (pair, technique, condition, post_steps, seed).
pub fn enumerate_runs(grid: &GridSpec) -> Result<Vec<RunCoord>, GridError> {
    grid.check()?;
    let mut scenarios: Vec<PortScenario> = Vec::new();
    for s in &grid.scenarios {
        if !scenarios.contains(s) {
            scenarios.push(*s);
        }
    }
    let mut out = Vec::new();
    for pair in &grid.model_pairs {
        for &technique in &grid.techniques {
            for &condition in &grid.conditions {
                for &scenario in &scenarios {
                    let pres: Vec<Option<usize>> = if scenario == PortScenario::FromScratch {
                        vec![None]
                    } else {
                        grid.pre_steps.iter().map(|&p| Some(p)).collect()
                    };
                    for &pre_steps in &pres {
                        for &post_steps in &grid.post_steps {
                            for &seed in &grid.seeds {
                                out.push(RunCoord {
                                    index: out.len(),
                                    pair: pair.clone(),
                                    technique,
                                    condition,
                                    scenario,
                                    pre_steps,
                                    post_steps,
                                    seed,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Diverged,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub coord: RunCoord,
    pub direction: String,
    pub accuracy: f64,
    pub n_examples: usize,
    pub n_correct: usize,
    pub trace_path: Option<String>,
    pub wall_time_ms: u64,
    pub status: RunStatus,
    pub error: Option<String>,
}

/// Hosts and datasets referenced by a grid.
#[derive(Clone, Debug)]
pub struct Registry {
    pub hosts: BTreeMap<String, HostModel>,
    /// Pre-porting (same condition), post-porting and evaluation source.
    pub dataset_a: ExampleSet,
    /// Pre-porting data for the different-dataset condition.
    pub dataset_b: ExampleSet,
    pub test: ExampleSet,
}

impl Registry {
    fn host(&self, id: &str) -> Result<&HostModel, GridError> {
        self.hosts
            .get(id)
            .ok_or_else(|| GridError::MissingArtifact(format!("host '{id}'")))
    }

    fn pre_dataset(&self, condition: DatasetCondition) -> &ExampleSet {
        match condition {
            DatasetCondition::Same => &self.dataset_a,
            DatasetCondition::Different => &self.dataset_b,
        }
    }
}

/// Paths of the artifacts a grid spec file refers to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactPaths {
    pub hosts: BTreeMap<String, PathBuf>,
    pub dataset_a: PathBuf,
    pub dataset_b: PathBuf,
    pub test: PathBuf,
}

/// Grid spec file: the dimensions plus an `[artifacts]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFile {
    #[serde(flatten)]
    pub grid: GridSpec,
    pub artifacts: ArtifactPaths,
}

impl GridFile {
    pub fn read(path: &Path) -> Result<Self, GridError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GridError::MissingArtifact(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| GridError::InvalidSpec(e.to_string()))
    }

    /// Loads hosts and TSV datasets; relative paths resolve against `base`.
    pub fn load_registry(&self, base: &Path) -> Result<Registry, GridError> {
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let vocab = Vocab::standard();
        let labels = BTreeMap::new();
        let load = |p: &Path| {
            let p = resolve(p);
            tasks::load_tsv(&p, &vocab, &labels)
                .map_err(|e| GridError::MissingArtifact(format!("{}: {e}", p.display())))
        };
        let mut hosts = BTreeMap::new();
        for (id, p) in &self.artifacts.hosts {
            let p = resolve(p);
            let host = porting::load_host(&p)
                .map_err(|e| GridError::MissingArtifact(format!("{}: {e}", p.display())))?;
            hosts.insert(id.clone(), host);
        }
        Ok(Registry {
            hosts,
            dataset_a: load(&self.artifacts.dataset_a)?,
            dataset_b: load(&self.artifacts.dataset_b)?,
            test: load(&self.artifacts.test)?,
        })
    }
}

/// Deterministic sub-seed for a named purpose.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct PreKey {
    origin: String,
    technique: PeftTechnique,
    pre_steps: usize,
    seed: u64,
    dataset: String,
}

type Slot = Arc<OnceLock<Result<PathBuf, String>>>;

/// Executes grid coordinates against a registry, sharing pre-porting
/// training across every coordinate that needs the same module.
pub struct GridRunner<'a> {
    spec: &'a GridSpec,
    registry: &'a Registry,
    out_dir: PathBuf,
    cache: Mutex<HashMap<PreKey, Slot>>,
}

impl<'a> GridRunner<'a> {
    pub fn new(spec: &'a GridSpec, registry: &'a Registry, out_dir: &Path) -> Self {
        Self {
            spec,
            registry,
            out_dir: out_dir.to_path_buf(),
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn modules_dir(&self) -> PathBuf {
        self.out_dir.join("modules")
    }

    fn peft_config(&self, host: &HostModel, technique: PeftTechnique) -> PeftConfig {
        self.spec
            .training
            .peft_config(technique, host.config().hidden_dim)
    }

    /// Path of the pre-trained module for `coord`, training it on first use.
    pub fn pre_module(&self, coord: &RunCoord) -> Result<PathBuf, GridError> {
        let pre_steps = coord
            .pre_steps
            .ok_or_else(|| GridError::Other("FromScratch runs have no pre-porting module".into()))?;
        let data = self.registry.pre_dataset(coord.condition);
        let key = PreKey {
            origin: coord.pair.origin.clone(),
            technique: coord.technique,
            pre_steps,
            seed: coord.seed,
            dataset: data.id.clone(),
        };
        let slot = {
            let mut cache = self.cache.lock().expect("cache lock");
            cache.entry(key.clone()).or_default().clone()
        };
        slot.get_or_init(|| self.train_pre_module(&key, data).map_err(|e| e.to_string()))
            .clone()
            .map_err(GridError::Other)
    }

    fn train_pre_module(&self, key: &PreKey, data: &ExampleSet) -> Result<PathBuf, GridError> {
        let path = self.modules_dir().join(format!(
            "{}__{}__{}__pre{}__seed{}.peftmod",
            sanitize(&key.origin),
            key.technique,
            sanitize(&key.dataset),
            key.pre_steps,
            key.seed
        ));
        if path.exists() {
            return Ok(path);
        }
        let tech = key.technique.name();
        let mut host = self.registry.host(&key.origin)?.clone();
        let config = self.peft_config(&host, key.technique);
        let meta = HostMeta::of(host.config());
        let init_seed = derive_seed(key.seed, &["pre-init", &key.origin, tech, &data.id]);
        let state = peft::default_init(&config, &meta, init_seed).map_err(other)?;
        host.attach_module(state).map_err(other)?;
        let plan = &self.spec.training;
        let cfg = TrainConfig {
            learning_rate: plan.pre_learning_rate,
            warmup_fraction: plan.warmup_fraction,
            batch_tokens: plan.pre_batch_tokens,
            total_steps: key.pre_steps,
            seed: derive_seed(key.seed, &["pre-train", &key.origin, tech, &data.id]),
            trace_path: None,
        };
        let outcome = train::train_peft(&mut host, data, &cfg).map_err(other)?;
        let provenance = Provenance {
            pre_steps: key.pre_steps as u64,
            dataset_id: data.id.clone(),
            seed: key.seed,
        };
        let bytes = porting::export_module(&outcome.module, &provenance).map_err(other)?;
        std::fs::create_dir_all(self.modules_dir())?;
        let tmp = path.with_extension("peftmod.tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }

    /// Import → post-porting training → evaluation for one coordinate.
    pub fn run_one(&self, coord: &RunCoord) -> RunRecord {
        let start = Instant::now();
        let mut record = RunRecord {
            coord: coord.clone(),
            direction: coord.pair.direction(),
            accuracy: 0.0,
            n_examples: 0,
            n_correct: 0,
            trace_path: None,
            wall_time_ms: 0,
            status: RunStatus::Ok,
            error: None,
        };
        match self.execute(coord) {
            Ok((eval, trace)) => {
                record.accuracy = eval.accuracy;
                record.n_examples = eval.n_examples;
                record.n_correct = eval.n_correct;
                record.trace_path = trace;
            }
            Err(RunFailure::Diverged(msg)) => {
                record.status = RunStatus::Diverged;
                record.error = Some(msg);
            }
            Err(RunFailure::Failed(msg)) => {
                record.status = RunStatus::Failed;
                record.error = Some(msg);
            }
        }
        record.wall_time_ms = start.elapsed().as_millis() as u64;
        record
    }

    fn execute(&self, coord: &RunCoord) -> Result<(train::EvalResult, Option<String>), RunFailure> {
        let tech = coord.technique.name();
        let recv_id = &coord.pair.receiving;
        let mut host = self.registry.host(recv_id).map_err(fail)?.clone();
        let import_seed = derive_seed(
            coord.seed,
            &[
                "import",
                recv_id,
                tech,
                coord.condition.name(),
                coord.scenario.name(),
            ],
        );
        match coord.scenario {
            PortScenario::FromScratch => {
                let config = self.peft_config(&host, coord.technique);
                let meta = HostMeta::of(host.config());
                let state = peft::default_init(&config, &meta, import_seed).map_err(fail)?;
                host.attach_module(state).map_err(fail)?;
            }
            scenario => {
                let path = self.pre_module(coord).map_err(fail)?;
                let file = ModuleFile::read(&path).map_err(fail)?;
                porting::import_module(&file, &mut host, scenario, import_seed).map_err(fail)?;
            }
        }
        let mut trace_path = None;
        if coord.post_steps > 0 {
            let plan = &self.spec.training;
            let path = plan
                .write_traces
                .then(|| self.out_dir.join("traces").join(format!("run{:05}.csv", coord.index)));
            let cfg = TrainConfig {
                learning_rate: plan.post_learning_rate,
                warmup_fraction: plan.warmup_fraction,
                batch_tokens: plan.post_batch_tokens,
                total_steps: coord.post_steps,
                seed: derive_seed(
                    coord.seed,
                    &["post-train", recv_id, tech, coord.condition.name()],
                ),
                trace_path: path.clone(),
            };
            match train::train_peft(&mut host, &self.registry.dataset_a, &cfg) {
                Ok(_) => {}
                Err(e @ TrainError::NonFiniteLoss { .. }) => {
                    return Err(RunFailure::Diverged(e.to_string()))
                }
                Err(e) => return Err(fail(e)),
            }
            trace_path = path.map(|p| p.display().to_string());
        }
        let test = match self.spec.training.max_eval_examples {
            Some(n) if n < self.registry.test.len() => self.registry.test.split_at(n).0,
            _ => self.registry.test.clone(),
        };
        let eval = train::evaluate(&host, &test).map_err(fail)?;
        Ok((eval, trace_path))
    }
}

enum RunFailure {
    Diverged(String),
    Failed(String),
}

fn fail<E: fmt::Display>(e: E) -> RunFailure {
    RunFailure::Failed(e.to_string())
}

fn other<E: fmt::Display>(e: E) -> GridError {
    GridError::Other(e.to_string())
}

pub fn records_path(out_dir: &Path) -> PathBuf {
    out_dir.join("records.jsonl")
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, GridError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| GridError::InvalidSpec(format!("records line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn append_record(path: &Path, record: &RunRecord) -> Result<(), GridError> {
    let line = serde_json::to_string(record).map_err(other)?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Runs every coordinate not already recorded in `<out>/records.jsonl`
/// on a pool of `workers` threads and returns all records in grid order.
pub fn run_grid(
    spec: &GridSpec,
    registry: &Registry,
    out_dir: &Path,
    workers: usize,
) -> Result<Vec<RunRecord>, GridError> {
    let coords = enumerate_runs(spec)?;
    for pair in &spec.model_pairs {
        registry.host(&pair.origin)?;
        registry.host(&pair.receiving)?;
    }
    std::fs::create_dir_all(out_dir)?;
    let store = records_path(out_dir);
    let existing = if store.exists() {
        read_records(&store)?
    } else {
        Vec::new()
    };
    let todo: Vec<&RunCoord> = coords
        .iter()
        .filter(|c| !existing.iter().any(|r| r.coord.same_point(c)))
        .collect();
    let runner = GridRunner::new(spec, registry, out_dir);
    let store_lock = Mutex::new(());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(other)?;
    let fresh: Vec<RunRecord> = pool.install(|| {
        todo.par_iter()
            .map(|c| {
                let rec = runner.run_one(c);
                let _guard = store_lock.lock().expect("store lock");
                append_record(&store, &rec).map(|_| rec)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let mut all: Vec<RunRecord> = existing
        .into_iter()
        .filter(|r| coords.iter().any(|c| c.same_point(&r.coord)))
        .chain(fresh)
        .collect();
    all.sort_by_key(|r| r.coord.index);
    Ok(all)
}

/// Coordinates that can be grouped on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Pair,
    Direction,
    Technique,
    Condition,
    Scenario,
    PreSteps,
    PostSteps,
    Seed,
}

impl GroupKey {
    pub fn name(self) -> &'static str {
        match self {
            GroupKey::Pair => "pair",
            GroupKey::Direction => "direction",
            GroupKey::Technique => "technique",
            GroupKey::Condition => "condition",
            GroupKey::Scenario => "scenario",
            GroupKey::PreSteps => "pre_steps",
            GroupKey::PostSteps => "post_steps",
            GroupKey::Seed => "seed",
        }
    }

    pub fn value(self, r: &RunRecord) -> KeyValue {
        let c = &r.coord;
        match self {
            GroupKey::Pair => KeyValue::Text(format!("{}->{}", c.pair.origin, c.pair.receiving)),
            GroupKey::Direction => KeyValue::Text(r.direction.clone()),
            GroupKey::Technique => KeyValue::Ordinal(c.technique as u64, c.technique.to_string()),
            GroupKey::Condition => KeyValue::Ordinal(c.condition as u64, c.condition.to_string()),
            GroupKey::Scenario => KeyValue::Ordinal(c.scenario as u64, c.scenario.to_string()),
            GroupKey::PreSteps => c.pre_steps.map_or(KeyValue::Absent, |p| KeyValue::Num(p as u64)),
            GroupKey::PostSteps => KeyValue::Num(c.post_steps as u64),
            GroupKey::Seed => KeyValue::Num(c.seed),
        }
    }
}

/// A grouping value, ordered naturally (numbers numerically, enums in
/// declaration order).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KeyValue {
    Absent,
    Num(u64),
    Ordinal(u64, String),
    Text(String),
}

impl fmt::Display for KeyValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyValue::Absent => f.write_str("-"),
            KeyValue::Num(n) => write!(f, "{n}"),
            KeyValue::Ordinal(_, s) | KeyValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub keys: Vec<(GroupKey, KeyValue)>,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    pub n_runs: usize,
}

impl AggregateCell {
    pub fn key(&self, k: GroupKey) -> Option<&KeyValue> {
        self.keys.iter().find(|(g, _)| *g == k).map(|(_, v)| v)
    }
}

/// Population mean and variance of ok-record accuracies per group, in key order.
pub fn aggregate(records: &[RunRecord], keys: &[GroupKey]) -> Result<Vec<AggregateCell>, GridError> {
    let mut groups: BTreeMap<Vec<KeyValue>, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.status == RunStatus::Ok) {
        let k = keys.iter().map(|g| g.value(r)).collect();
        groups.entry(k).or_default().push(r.accuracy);
    }
    if groups.is_empty() {
        return Err(GridError::EmptyGroup);
    }
    Ok(groups
        .into_iter()
        .map(|(k, mut accs)| {
            accs.sort_by(f64::total_cmp);
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let variance = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            AggregateCell {
                keys: keys.iter().copied().zip(k).collect(),
                mean,
                variance,
                n_runs: accs.len(),
            }
        })
        .collect())
}

/// Mean accuracy of ok records matching `pred`, if any.
pub fn mean_where(records: &[RunRecord], pred: impl Fn(&RunRecord) -> bool) -> Option<f64> {
    let accs: Vec<f64> = records
        .iter()
        .filter(|r| r.status == RunStatus::Ok && pred(r))
        .map(|r| r.accuracy)
        .collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Distinct values of `f` over `records`, sorted.
pub(crate) fn distinct<T: Ord + Clone + std::hash::Hash + Eq>(
    records: &[RunRecord],
    f: impl Fn(&RunRecord) -> T,
) -> Vec<T> {
    let set: HashSet<T> = records.iter().map(f).collect();
    let mut v: Vec<T> = set.into_iter().collect();
    v.sort();
    v
}
