//! Frozen-host PEFT training, full-model training for building hosts, and
//! exact-match evaluation.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HostModel, ModelError};
use crate::peft::PeftModuleState;
use crate::tasks::ExampleSet;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("step {step} outside 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("example {index} has {tokens} tokens, over the batch budget of {budget}")]
    ExampleTooLong {
        index: usize,
        tokens: usize,
        budget: usize,
    },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("label token {token} not in vocabulary of size {vocab}")]
    LabelNotInVocab { token: u32, vocab: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub batch_tokens: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// When set, a `step,loss,lr` CSV is written here.
    #[serde(default)]
    pub trace_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pre_porting(0, 0)
    }
}

impl TrainConfig {
    pub fn pre_porting(total_steps: usize, seed: u64) -> Self {
        Self {
            learning_rate: 1e-4,
            warmup_fraction: 0.1,
            batch_tokens: 4096,
            total_steps,
            seed,
            trace_path: None,
        }
    }

    pub fn post_porting(total_steps: usize, seed: u64) -> Self {
        Self {
            batch_tokens: 2048,
            ..Self::pre_porting(total_steps, seed)
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).floor() as usize
    }

    fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(TrainError::InvalidConfig(format!(
                "warmup_fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if self.batch_tokens == 0 {
            return Err(TrainError::InvalidConfig("batch_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak rate, then linear decay to 0.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    let total = cfg.total_steps;
    if step > total {
        return Err(TrainError::StepOutOfRange { step, total });
    }
    let warmup = cfg.warmup_steps();
    if step < warmup {
        return Ok(cfg.learning_rate * (step as f64 / warmup as f64));
    }
    if total == warmup {
        return Ok(cfg.learning_rate);
    }
    let frac = (total - step) as f64 / (total - warmup) as f64;
    Ok(cfg.learning_rate * frac)
}

/// Shuffles example indices with `seed` and packs them greedily into
/// batches of at most `batch_tokens` tokens.
pub fn batch_by_tokens(
    data: &ExampleSet,
    batch_tokens: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, TrainError> {
    if let Some((index, ex)) = data
        .examples
        .iter()
        .enumerate()
        .find(|(_, e)| e.num_tokens() > batch_tokens)
    {
        return Err(TrainError::ExampleTooLong {
            index,
            tokens: ex.num_tokens(),
            budget: batch_tokens,
        });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for i in order {
        let n = data.examples[i].num_tokens();
        if used + n > batch_tokens && !current.is_empty() {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += n;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub module: PeftModuleState,
    pub trace: Vec<TracePoint>,
}

struct Adam {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: i32,
}

impl Adam {
    const B1: f32 = 0.9;
    const B2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    fn update(&mut self, name: &str, param: &mut Tensor, grad: &[f32], lr: f32) {
        let n = grad.len();
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad).zip(m).zip(v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Target {
    Module,
    Host,
}

/// Cycles over seeded epochs, yielding one batch per optimizer step.
struct BatchStream<'a> {
    data: &'a ExampleSet,
    budget: usize,
    seed: u64,
    epoch: u64,
    queue: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> BatchStream<'a> {
    fn new(data: &'a ExampleSet, budget: usize, seed: u64) -> Result<Self, TrainError> {
        batch_by_tokens(data, budget, seed)?;
        Ok(Self {
            data,
            budget,
            seed,
            epoch: 0,
            queue: Vec::new().into_iter(),
        })
    }

    fn next_batch(&mut self) -> Result<Vec<usize>, TrainError> {
        loop {
            if let Some(b) = self.queue.next() {
                return Ok(b);
            }
            let seed = self
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(self.epoch);
            self.queue = batch_by_tokens(self.data, self.budget, seed)?.into_iter();
            self.epoch += 1;
        }
    }
}

fn run(
    model: &mut HostModel,
    data: &ExampleSet,
    cfg: &TrainConfig,
    target: Target,
) -> Result<Vec<TracePoint>, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if target == Target::Module && model.module().is_none() {
        return Err(ModelError::NoModuleAttached.into());
    }
    let mut stream = BatchStream::new(data, cfg.batch_tokens, cfg.seed)?;
    let mut adam = Adam::new();
    let mut trace = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let batch = stream.next_batch()?;
        let lr = lr_at(step, cfg)?;
        let mut g = Graph::<f32>::new();
        let bound = model.bind(&mut g, target == Target::Host, target == Target::Module)?;
        let mut total: Option<Var> = None;
        for &i in &batch {
            let ex = &data.examples[i];
            let l = model.sequence_loss(&mut g, &bound, &ex.input, &ex.label)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l).map_err(ModelError::from)?,
            });
        }
        let total = total.expect("batches are non-empty");
        let loss = g.scale(total, 1.0 / batch.len() as f32);
        let loss_value = g.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        g.backward(loss).map_err(ModelError::from)?;
        adam.begin_step();
        let leaves: Vec<(String, Var)> = match target {
            Target::Host => bound.host_leaves().to_vec(),
            Target::Module => bound
                .module()
                .map(|m| m.leaves().to_vec())
                .unwrap_or_default(),
        };
        for (name, var) in leaves {
            let Some(grad) = g.grad(var) else { continue };
            let param = match target {
                Target::Host => model.param_mut(&name),
                Target::Module => model.module_mut().and_then(|m| m.tensors.get_mut(&name)),
            }
            .ok_or_else(|| ModelError::MissingParameter(name.clone()))?;
            adam.update(&name, param, grad, lr as f32);
        }
        trace.push(TracePoint {
            step,
            loss: loss_value,
            lr,
        });
    }
    if let Some(path) = &cfg.trace_path {
        write_trace(&trace, path)?;
    }
    Ok(trace)
}

pub fn write_trace(trace: &[TracePoint], path: &std::path::Path) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,loss,lr")?;
    for p in trace {
        writeln!(out, "{},{},{}", p.step, p.loss, p.lr)?;
    }
    out.flush()?;
    Ok(())
}

/// Trains only the attached module's tensors for `cfg.total_steps` Adam
/// steps; host parameters are never written.
pub fn train_peft(
    model: &mut HostModel,
    data: &ExampleSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let trace = run(model, data, cfg, Target::Module)?;
    let module = model
        .module()
        .cloned()
        .ok_or(ModelError::NoModuleAttached)?;
    Ok(TrainOutcome { module, trace })
}

/// Trains every host parameter (used to build the host analogs).
pub fn train_host(
    model: &mut HostModel,
    data: &ExampleSet,
    cfg: &TrainConfig,
) -> Result<Vec<TracePoint>, TrainError> {
    run(model, data, cfg, Target::Host)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub n_examples: usize,
    pub n_correct: usize,
}

/// Greedy-decodes up to `label length + 1` tokens per example; an example
/// is correct iff the continuation equals its label exactly.
pub fn evaluate(model: &HostModel, data: &ExampleSet) -> Result<EvalResult, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let vocab = model.config().vocab_size;
    let mut n_correct = 0;
    for ex in &data.examples {
        if let Some(&token) = ex.label.iter().find(|&&t| t as usize >= vocab) {
            return Err(TrainError::LabelNotInVocab { token, vocab });
        }
        let out = model.greedy_decode(&ex.input, ex.label.len() + 1)?;
        if out == ex.label {
            n_correct += 1;
        }
    }
    Ok(EvalResult {
        accuracy: n_correct as f64 / data.len() as f64,
        n_examples: data.len(),
        n_correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::Example;

    fn cfg(total: usize) -> TrainConfig {
        TrainConfig::pre_porting(total, 0)
    }

    #[test]
    fn schedule_points() {
        let c = cfg(1000);
        assert_eq!(c.warmup_steps(), 100);
        assert_eq!(lr_at(0, &c).unwrap(), 0.0);
        assert_eq!(lr_at(100, &c).unwrap(), 1e-4);
        assert_eq!(lr_at(550, &c).unwrap(), 5e-5);
        assert_eq!(lr_at(1000, &c).unwrap(), 0.0);
        assert!(matches!(
            lr_at(1001, &c),
            Err(TrainError::StepOutOfRange { .. })
        ));
    }

    fn fixed(n: usize, len: usize) -> ExampleSet {
        let ex = Example {
            input: vec![3; len - 1],
            label: vec![4],
        };
        ExampleSet::new("fixed", vec![ex; n])
    }

    #[test]
    fn batching_examples() {
        assert_eq!(batch_by_tokens(&fixed(10, 100), 1000, 1).unwrap().len(), 1);
        assert_eq!(batch_by_tokens(&fixed(10, 600), 1000, 1).unwrap().len(), 10);
        assert!(matches!(
            batch_by_tokens(&fixed(1, 1001), 1000, 1),
            Err(TrainError::ExampleTooLong { .. })
        ));
    }

    #[test]
    fn bad_warmup_is_rejected() {
        let c = TrainConfig {
            warmup_fraction: 1.0,
            ..cfg(10)
        };
        assert!(c.validate().is_err());
    }
}
