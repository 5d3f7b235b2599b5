use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, Context};
use peftport::grid::{self, GridFile};
use peftport::model::HostModel;
use peftport::peft::{self, PeftConfig, PeftTechnique};
use peftport::porting::{self, ModuleFile, PortScenario, Provenance};
use peftport::tasks::{self, ExampleSet, ModelPairSpec, SyntheticTaskSpec, Vocab};
use peftport::train::{self, TrainConfig};
use serde_json::{json, Value};

use crate::{usage, Failure};

pub fn task_spec(name: &str, seed: u64) -> Result<SyntheticTaskSpec, Failure> {
    Ok(match name.replace('_', "-").as_str() {
        "sentiment-a" => SyntheticTaskSpec::sentiment_a(seed),
        "sentiment-b" => SyntheticTaskSpec::sentiment_b(seed),
        "nli" => SyntheticTaskSpec::nli(seed),
        "polarity" => SyntheticTaskSpec::polarity(seed),
        "topic" => SyntheticTaskSpec::topic(seed),
        other => return Err(usage(format!("--task: unknown task '{other}'"))),
    })
}

fn load_host(path: &Path) -> anyhow::Result<HostModel> {
    porting::load_host(path).with_context(|| format!("loading host {}", path.display()))
}

fn load_module(path: &Path) -> anyhow::Result<ModuleFile> {
    ModuleFile::read(path).with_context(|| format!("loading module {}", path.display()))
}

fn load_data(path: &Path) -> anyhow::Result<ExampleSet> {
    tasks::load_tsv(path, &Vocab::standard(), &BTreeMap::new())
        .with_context(|| format!("loading dataset {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn build_models(
    out_dir: &Path,
    seed: u64,
    raw_steps: Option<usize>,
    instruct_steps: Option<usize>,
) -> Result<Value, Failure> {
    let mut spec = ModelPairSpec::desk(seed);
    spec.raw_steps = raw_steps.unwrap_or(spec.raw_steps);
    spec.instruct_steps = instruct_steps.unwrap_or(spec.instruct_steps);
    let pair = tasks::build_model_pair(&spec)?;
    let raw = out_dir.join("raw.peftmod");
    let instruct = out_dir.join("instruct.peftmod");
    write(&raw, &porting::export_host(&pair.raw)?)?;
    write(&instruct, &porting::export_host(&pair.instruct)?)?;
    Ok(json!({
        "command": "build-models",
        "raw": raw,
        "instruct": instruct,
        "raw_heldout_accuracy": pair.report.raw_heldout_accuracy,
        "instruct_heldout_accuracy": pair.report.instruct_heldout_accuracy,
        "raw_final_loss": pair.report.raw_final_loss,
        "instruct_final_loss": pair.report.instruct_final_loss,
    }))
}

pub fn gen_data(spec: &SyntheticTaskSpec, n: usize, out: &Path) -> Result<Value, Failure> {
    let vocab = Vocab::standard();
    let set = tasks::gen_synthetic(spec, &vocab, n)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    tasks::write_tsv(&set, &vocab, out)?;
    Ok(json!({
        "command": "gen-data",
        "task": spec.name,
        "examples": set.len(),
        "out": out,
    }))
}

pub struct TrainArgs<'a> {
    pub model: &'a Path,
    pub data: &'a Path,
    pub technique: Option<PeftTechnique>,
    pub init: Option<&'a Path>,
    pub steps: usize,
    pub lr: f64,
    pub batch_tokens: usize,
    pub warmup: f64,
    pub trace: Option<&'a Path>,
    pub seed: u64,
    pub out: &'a Path,
}

pub fn peft_train(a: TrainArgs<'_>) -> Result<Value, Failure> {
    let mut host = load_host(a.model)?;
    let data = load_data(a.data)?;
    let prior = match (a.technique, a.init) {
        (Some(t), _) => {
            let cfg = PeftConfig::desk(t, host.config().hidden_dim);
            peft::attach(&mut host, &cfg, a.seed)?;
            None
        }
        (None, Some(init)) => {
            let file = load_module(init)?;
            porting::import_module(&file, &mut host, PortScenario::Ported, a.seed)?;
            file.header.provenance
        }
        (None, None) => unreachable!("checked during flag validation"),
    };
    let cfg = TrainConfig {
        learning_rate: a.lr,
        warmup_fraction: a.warmup,
        batch_tokens: a.batch_tokens,
        total_steps: a.steps,
        seed: a.seed,
        trace_path: a.trace.map(Path::to_path_buf),
    };
    let outcome = train::train_peft(&mut host, &data, &cfg)?;
    let provenance = match prior {
        Some(p) => p,
        None => Provenance {
            pre_steps: a.steps as u64,
            dataset_id: data.id.clone(),
            seed: a.seed,
        },
    };
    write(a.out, &porting::export_module(&outcome.module, &provenance)?)?;
    Ok(json!({
        "command": "peft-train",
        "technique": outcome.module.technique.name(),
        "params": outcome.module.num_params(),
        "steps": a.steps,
        "final_loss": outcome.trace.last().map(|p| p.loss),
        "out": a.out,
    }))
}

pub fn export(module: &Path, model: Option<&Path>, out: &Path) -> Result<Value, Failure> {
    let file = load_module(module)?;
    let state = file.module()?;
    if let Some(model) = model {
        let host = load_host(model)?;
        let violations = porting::check_compat(&state.host_meta, host.config());
        if !violations.is_empty() {
            return Err(porting::PortError::IncompatibleHost(violations).into());
        }
    }
    let provenance = file.header.provenance.clone().unwrap_or_default();
    let bytes = porting::export_module(&state, &provenance)?;
    write(out, &bytes)?;
    Ok(json!({
        "command": "export",
        "technique": state.technique.name(),
        "tensors": state.tensors.len(),
        "params": state.num_params(),
        "bytes": bytes.len(),
        "out": out,
    }))
}

pub fn import(
    module: &Path,
    model: &Path,
    scenario: PortScenario,
    seed: u64,
    out: &Path,
) -> Result<Value, Failure> {
    let file = load_module(module)?;
    let mut host = load_host(model)?;
    let state = porting::import_module(&file, &mut host, scenario, seed)?;
    let provenance = match scenario {
        PortScenario::FromScratch => Provenance {
            pre_steps: 0,
            dataset_id: String::new(),
            seed,
        },
        _ => file.header.provenance.clone().unwrap_or_default(),
    };
    write(out, &porting::export_module(&state, &provenance)?)?;
    Ok(json!({
        "command": "import",
        "scenario": scenario.name(),
        "technique": state.technique.name(),
        "params": state.num_params(),
        "out": out,
    }))
}

pub fn eval(model: &Path, module: Option<&Path>, data: &Path) -> Result<Value, Failure> {
    let mut host = load_host(model)?;
    if let Some(module) = module {
        let file = load_module(module)?;
        porting::import_module(&file, &mut host, PortScenario::Ported, 0)?;
    }
    let data = load_data(data)?;
    let r = train::evaluate(&host, &data)?;
    Ok(json!({
        "command": "eval",
        "accuracy": r.accuracy,
        "n_examples": r.n_examples,
        "n_correct": r.n_correct,
    }))
}

pub fn grid(spec_path: &Path, out: &Path, workers: usize, seed: u64) -> Result<Value, Failure> {
    let mut file = GridFile::read(spec_path)?;
    for s in &mut file.grid.seeds {
        *s = s
            .checked_add(seed)
            .ok_or_else(|| usage("--seed overflows a spec seed"))?;
    }
    let base = spec_path.parent().unwrap_or(Path::new("."));
    let registry = file.load_registry(base)?;
    let records = grid::run_grid(&file.grid, &registry, out, workers)?;
    let ok = records
        .iter()
        .filter(|r| r.status == grid::RunStatus::Ok)
        .count();
    Ok(json!({
        "command": "grid",
        "runs": records.len(),
        "ok": ok,
        "records": grid::records_path(out),
    }))
}

pub fn report(results: &Path, out: &Path) -> Result<Value, Failure> {
    let store = grid::records_path(results);
    if !store.exists() {
        return Err(anyhow!("no records found in {}", results.display()).into());
    }
    let records = grid::read_records(&store)?;
    if records.is_empty() {
        return Err(anyhow!("{} holds no records", store.display()).into());
    }
    let summary = grid::report(&records, out)?;
    Ok(json!({
        "command": "report",
        "records": summary.records,
        "ok": summary.ok,
        "diverged": summary.diverged,
        "failed": summary.failed,
        "charts": summary.charts.len(),
        "out": out,
    }))
}
