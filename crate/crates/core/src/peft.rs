//! The four PEFT techniques as attachable parameter sets.
//!
//! | technique     | insertion  | workspace                        |
//! |---------------|------------|----------------------------------|
//! | Adapter       | sequential | after every attention/FFN block  |
//! | Compacter     | sequential | after every attention/FFN block  |
//! | LoRA          | parallel   | query and value projections      |
//! | Prefix Tuning | parallel   | attention keys and values        |
//!
//! Every technique is inserted in all layers of both stacks, including the
//! decoder's cross-attention.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    HookBinding, HookPoint, HookSite, HostModel, ModelConfig, ModelError, Stack, SubLayer,
};
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PeftError {
    #[error("incompatible PEFT config: {0}")]
    IncompatibleConfig(String),
    #[error("hook point {0} is already occupied")]
    HookOccupied(HookSite),
    #[error("module tensor {0} is missing")]
    MissingTensor(String),
    #[error("host error: {0}")]
    Host(Box<ModelError>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<ModelError> for PeftError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::HookOccupied(site) => PeftError::HookOccupied(site),
            ModelError::Peft(inner) => *inner,
            other => PeftError::Host(Box::new(other)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftTechnique {
    Adapter,
    Compacter,
    Lora,
    PrefixTuning,
}

impl PeftTechnique {
    pub const ALL: [PeftTechnique; 4] = [
        PeftTechnique::Adapter,
        PeftTechnique::Compacter,
        PeftTechnique::Lora,
        PeftTechnique::PrefixTuning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PeftTechnique::Adapter => "adapter",
            PeftTechnique::Compacter => "compacter",
            PeftTechnique::Lora => "lora",
            PeftTechnique::PrefixTuning => "prefix_tuning",
        }
    }
}

impl fmt::Display for PeftTechnique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PeftTechnique {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "adapter" => Ok(PeftTechnique::Adapter),
            "compacter" => Ok(PeftTechnique::Compacter),
            "lora" => Ok(PeftTechnique::Lora),
            "prefix" | "prefix_tuning" => Ok(PeftTechnique::PrefixTuning),
            other => Err(format!("unknown PEFT technique '{other}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
    Tanh,
}

impl Activation {
    fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub bottleneck: usize,
    pub activation: Activation,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            bottleneck: 64,
            activation: Activation::Gelu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompacterConfig {
    pub bottleneck: usize,
    pub hypercomplex_division: usize,
    pub activation: Activation,
    pub share_kron_factors: bool,
}

impl Default for CompacterConfig {
    fn default() -> Self {
        Self {
            bottleneck: 16,
            hypercomplex_division: 4,
            activation: Activation::Gelu,
            share_kron_factors: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.0,
        }
    }
}

impl LoraConfig {
    /// Multiplier `alpha / rank` applied to the low-rank product.
    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixConfig {
    pub num_tokens: usize,
    pub token_embed_dim: usize,
    pub mid_dim: usize,
}

impl Default for PrefixConfig {
    fn default() -> Self {
        Self {
            num_tokens: 5,
            token_embed_dim: 512,
            mid_dim: 512,
        }
    }
}

impl PrefixConfig {
    /// Reparameterization widths scaled to `8 × hidden_dim`.
    pub fn for_hidden(hidden_dim: usize) -> Self {
        Self {
            num_tokens: 5,
            token_embed_dim: 8 * hidden_dim,
            mid_dim: 8 * hidden_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "technique", rename_all = "snake_case")]
pub enum PeftConfig {
    Adapter(AdapterConfig),
    Compacter(CompacterConfig),
    Lora(LoraConfig),
    PrefixTuning(PrefixConfig),
}

impl PeftConfig {
    pub fn technique(&self) -> PeftTechnique {
        match self {
            PeftConfig::Adapter(_) => PeftTechnique::Adapter,
            PeftConfig::Compacter(_) => PeftTechnique::Compacter,
            PeftConfig::Lora(_) => PeftTechnique::Lora,
            PeftConfig::PrefixTuning(_) => PeftTechnique::PrefixTuning,
        }
    }

    /// Published hyperparameters for `technique`.
    pub fn default_for(technique: PeftTechnique) -> Self {
        match technique {
            PeftTechnique::Adapter => PeftConfig::Adapter(AdapterConfig::default()),
            PeftTechnique::Compacter => PeftConfig::Compacter(CompacterConfig::default()),
            PeftTechnique::Lora => PeftConfig::Lora(LoraConfig::default()),
            PeftTechnique::PrefixTuning => PeftConfig::PrefixTuning(PrefixConfig::default()),
        }
    }

    /// Hyperparameters scaled for a desk-size host of width `hidden_dim`.
    /// LoRA and Compacter keep their published values; the adapter
    /// bottleneck and prefix MLP widths shrink with the host.
    pub fn desk(technique: PeftTechnique, hidden_dim: usize) -> Self {
        match technique {
            PeftTechnique::Adapter => PeftConfig::Adapter(AdapterConfig {
                bottleneck: (hidden_dim / 4).max(1),
                ..AdapterConfig::default()
            }),
            PeftTechnique::PrefixTuning => {
                PeftConfig::PrefixTuning(PrefixConfig::for_hidden(hidden_dim))
            }
            other => Self::default_for(other),
        }
    }

    pub fn validate(&self, meta: &HostMeta) -> Result<(), PeftError> {
        let bad = |msg: String| Err(PeftError::IncompatibleConfig(msg));
        match self {
            PeftConfig::Adapter(c) => {
                if c.bottleneck == 0 {
                    return bad("adapter bottleneck must be >= 1".into());
                }
            }
            PeftConfig::Compacter(c) => {
                let n = c.hypercomplex_division;
                if n == 0 || c.bottleneck == 0 {
                    return bad("compacter bottleneck and division must be >= 1".into());
                }
                if meta.hidden_dim % n != 0 {
                    return bad(format!(
                        "hypercomplex division {n} does not divide hidden_dim {}",
                        meta.hidden_dim
                    ));
                }
                if c.bottleneck % n != 0 {
                    return bad(format!(
                        "hypercomplex division {n} does not divide bottleneck {}",
                        c.bottleneck
                    ));
                }
                if c.share_kron_factors {
                    return bad("shared Kronecker factors are not supported".into());
                }
            }
            PeftConfig::Lora(c) => {
                if c.rank == 0 {
                    return bad("LoRA rank must be >= 1".into());
                }
                if !(0.0..1.0).contains(&c.dropout) {
                    return bad(format!("LoRA dropout {} outside [0, 1)", c.dropout));
                }
                if c.dropout != 0.0 {
                    return bad("LoRA dropout must be 0 (deterministic forwards)".into());
                }
            }
            PeftConfig::PrefixTuning(c) => {
                if c.num_tokens == 0 || c.token_embed_dim == 0 || c.mid_dim == 0 {
                    return bad("prefix sizes must be >= 1".into());
                }
            }
        }
        Ok(())
    }
}

/// Host dimensions a module was built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostMeta {
    pub hidden_dim: usize,
    pub num_enc_layers: usize,
    pub num_dec_layers: usize,
    pub num_heads: usize,
}

impl HostMeta {
    pub fn of(config: &ModelConfig) -> Self {
        Self {
            hidden_dim: config.hidden_dim,
            num_enc_layers: config.num_enc_layers,
            num_dec_layers: config.num_dec_layers,
            num_heads: config.num_heads,
        }
    }
}

/// A PEFT module: named tensors plus everything needed to rebuild its shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct PeftModuleState {
    pub technique: PeftTechnique,
    pub config: PeftConfig,
    pub host_meta: HostMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl PeftModuleState {
    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

type Site = (Stack, usize, SubLayer);

fn site_path((stack, layer, sub): Site) -> String {
    format!("{}.{}.{}", stack.tag(), layer, sub.tag())
}

/// Every attention sub-layer: encoder self, decoder self, decoder cross.
pub fn attention_sites(meta: &HostMeta) -> Vec<(Stack, usize, SubLayer)> {
    let mut out = Vec::new();
    for l in 0..meta.num_enc_layers {
        out.push((Stack::Encoder, l, SubLayer::SelfAttn));
    }
    for l in 0..meta.num_dec_layers {
        out.push((Stack::Decoder, l, SubLayer::SelfAttn));
        out.push((Stack::Decoder, l, SubLayer::CrossAttn));
    }
    out
}

/// Every block output that takes a sequential insertion.
pub fn block_sites(meta: &HostMeta) -> Vec<(Stack, usize, SubLayer)> {
    let mut out = Vec::new();
    for l in 0..meta.num_enc_layers {
        out.push((Stack::Encoder, l, SubLayer::SelfAttn));
        out.push((Stack::Encoder, l, SubLayer::Ffn));
    }
    for l in 0..meta.num_dec_layers {
        out.push((Stack::Decoder, l, SubLayer::SelfAttn));
        out.push((Stack::Decoder, l, SubLayer::CrossAttn));
        out.push((Stack::Decoder, l, SubLayer::Ffn));
    }
    out
}

fn block_point(sub: SubLayer) -> HookPoint {
    match sub {
        SubLayer::Ffn => HookPoint::AfterFfnBlock,
        _ => HookPoint::AfterAttnBlock,
    }
}

const PREFIX_SEEDS: &str = "prefix.seeds";
const PREFIX_FC1_W: &str = "prefix.mlp.fc1.weight";
const PREFIX_FC1_B: &str = "prefix.mlp.fc1.bias";
const PREFIX_FC2_W: &str = "prefix.mlp.fc2.weight";
const PREFIX_FC2_B: &str = "prefix.mlp.fc2.bias";

/// Tensor names and shapes fully determined by the config and host.
pub fn expected_shapes(
    config: &PeftConfig,
    meta: &HostMeta,
) -> Result<BTreeMap<String, Vec<usize>>, PeftError> {
    config.validate(meta)?;
    let d = meta.hidden_dim;
    let mut out = BTreeMap::new();
    match config {
        PeftConfig::Adapter(c) => {
            for site in block_sites(meta) {
                let p = site_path(site);
                out.insert(format!("{p}.adapter.down.weight"), vec![d, c.bottleneck]);
                out.insert(format!("{p}.adapter.down.bias"), vec![c.bottleneck]);
                out.insert(format!("{p}.adapter.up.weight"), vec![c.bottleneck, d]);
                out.insert(format!("{p}.adapter.up.bias"), vec![d]);
            }
        }
        PeftConfig::Compacter(c) => {
            let (n, b) = (c.hypercomplex_division, c.bottleneck);
            for site in block_sites(meta) {
                let p = site_path(site);
                out.insert(format!("{p}.compacter.down.rules"), vec![n, n, n]);
                out.insert(format!("{p}.compacter.down.factors"), vec![n, d / n, b / n]);
                out.insert(format!("{p}.compacter.down.bias"), vec![b]);
                out.insert(format!("{p}.compacter.up.rules"), vec![n, n, n]);
                out.insert(format!("{p}.compacter.up.factors"), vec![n, b / n, d / n]);
                out.insert(format!("{p}.compacter.up.bias"), vec![d]);
            }
        }
        PeftConfig::Lora(c) => {
            for site in attention_sites(meta) {
                let p = site_path(site);
                for proj in ["q", "v"] {
                    out.insert(format!("{p}.lora.{proj}.down"), vec![d, c.rank]);
                    out.insert(format!("{p}.lora.{proj}.up"), vec![c.rank, d]);
                }
            }
        }
        PeftConfig::PrefixTuning(c) => {
            let width = 2 * attention_sites(meta).len() * d;
            out.insert(PREFIX_SEEDS.into(), vec![c.num_tokens, c.token_embed_dim]);
            out.insert(PREFIX_FC1_W.into(), vec![c.token_embed_dim, c.mid_dim]);
            out.insert(PREFIX_FC1_B.into(), vec![c.mid_dim]);
            out.insert(PREFIX_FC2_W.into(), vec![c.mid_dim, width]);
            out.insert(PREFIX_FC2_B.into(), vec![width]);
        }
    }
    Ok(out)
}

/// Closed-form trainable parameter count.
pub fn param_count(config: &PeftConfig, meta: &HostMeta) -> Result<usize, PeftError> {
    Ok(expected_shapes(config, meta)?
        .values()
        .map(|s| s.iter().product::<usize>())
        .sum())
}

fn glorot_limit(fan_in: usize, fan_out: usize) -> f32 {
    (6.0 / (fan_in + fan_out) as f32).sqrt()
}

/// Freshly initialized module using each technique's default scheme:
/// Adapter weights ~ N(0, 0.01²); Compacter factors Glorot-uniform; LoRA
/// down ~ N(0, 0.02²) with up = 0; prefix linear layers uniform(±1/√fan_in)
/// and prefix seeds ~ N(0, 1). Biases start at zero except the prefix MLP's.
pub fn default_init(
    config: &PeftConfig,
    meta: &HostMeta,
    seed: u64,
) -> Result<PeftModuleState, PeftError> {
    let shapes = expected_shapes(config, meta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in shapes {
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = match config {
            PeftConfig::Adapter(_) if name.ends_with(".weight") => {
                let normal = Normal::new(0.0f32, 0.01).expect("std");
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            }
            PeftConfig::Compacter(_) if name.ends_with(".rules") || name.ends_with(".factors") => {
                let limit = glorot_limit(shape[1], shape[2]);
                (0..numel).map(|_| rng.gen_range(-limit..=limit)).collect()
            }
            PeftConfig::Lora(_) if name.ends_with(".down") => {
                let normal = Normal::new(0.0f32, 0.02).expect("std");
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            }
            PeftConfig::PrefixTuning(_) if name == PREFIX_SEEDS => {
                let normal = Normal::new(0.0f32, 1.0).expect("std");
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            }
            PeftConfig::PrefixTuning(c) => {
                let fan_in = if name.contains("fc1") {
                    c.token_embed_dim
                } else {
                    c.mid_dim
                };
                let bound = 1.0 / (fan_in as f32).sqrt();
                (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
            _ => vec![0.0; numel],
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Ok(PeftModuleState {
        technique: config.technique(),
        config: config.clone(),
        host_meta: *meta,
        tensors,
    })
}

/// Checks that a state's tensors match the shapes its config implies.
pub fn validate_state(state: &PeftModuleState) -> Result<(), PeftError> {
    if state.config.technique() != state.technique {
        return Err(PeftError::IncompatibleConfig(format!(
            "technique {} does not match config for {}",
            state.technique,
            state.config.technique()
        )));
    }
    let shapes = expected_shapes(&state.config, &state.host_meta)?;
    for (name, shape) in &shapes {
        let t = state
            .tensors
            .get(name)
            .ok_or_else(|| PeftError::MissingTensor(name.clone()))?;
        if t.shape() != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "module tensor",
                lhs: shape.clone(),
                rhs: t.shape().to_vec(),
            }
            .into());
        }
    }
    if let Some(extra) = state.tensors.keys().find(|k| !shapes.contains_key(*k)) {
        return Err(PeftError::IncompatibleConfig(format!(
            "unexpected tensor {extra}"
        )));
    }
    Ok(())
}

/// Hook registrations for a module, in canonical site order.
pub fn hook_bindings(state: &PeftModuleState) -> Result<Vec<(HookSite, HookBinding)>, PeftError> {
    validate_state(state)?;
    let meta = &state.host_meta;
    let mut out = Vec::new();
    let at = |(stack, layer, sublayer): Site, point| HookSite {
        stack,
        layer,
        sublayer,
        point,
    };
    match &state.config {
        PeftConfig::Adapter(c) => {
            for site in block_sites(meta) {
                let p = site_path(site);
                out.push((
                    at(site, block_point(site.2)),
                    HookBinding::Bottleneck {
                        down_weight: format!("{p}.adapter.down.weight"),
                        down_bias: format!("{p}.adapter.down.bias"),
                        up_weight: format!("{p}.adapter.up.weight"),
                        up_bias: format!("{p}.adapter.up.bias"),
                        activation: c.activation,
                    },
                ));
            }
        }
        PeftConfig::Compacter(c) => {
            for site in block_sites(meta) {
                let p = site_path(site);
                out.push((
                    at(site, block_point(site.2)),
                    HookBinding::Bottleneck {
                        down_weight: format!("{p}.compacter.down.weight"),
                        down_bias: format!("{p}.compacter.down.bias"),
                        up_weight: format!("{p}.compacter.up.weight"),
                        up_bias: format!("{p}.compacter.up.bias"),
                        activation: c.activation,
                    },
                ));
            }
        }
        PeftConfig::Lora(c) => {
            for site in attention_sites(meta) {
                let p = site_path(site);
                for (proj, point) in [("q", HookPoint::AttnQueryProj), ("v", HookPoint::AttnValueProj)] {
                    out.push((
                        at(site, point),
                        HookBinding::LowRank {
                            down: format!("{p}.lora.{proj}.down"),
                            up: format!("{p}.lora.{proj}.up"),
                            scale: c.scale(),
                        },
                    ));
                }
            }
        }
        PeftConfig::PrefixTuning(_) => {
            for site in attention_sites(meta) {
                let p = site_path(site);
                out.push((
                    at(site, HookPoint::AttnKeysValues),
                    HookBinding::PrefixKv {
                        key: format!("{p}.prefix.key"),
                        value: format!("{p}.prefix.value"),
                    },
                ));
            }
        }
    }
    Ok(out)
}

/// Module tensors and derived values inserted into a graph.
#[derive(Clone, Debug, Default)]
pub struct BoundModule {
    vars: HashMap<String, Var>,
    leaves: Vec<(String, Var)>,
}

impl BoundModule {
    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Trainable leaves in canonical tensor order.
    pub fn leaves(&self) -> &[(String, Var)] {
        &self.leaves
    }
}

/// Inserts module tensors as leaves and derives per-forward values
/// (materialized Compacter weights, per-layer prefixes).
pub fn bind_module<T: Real>(
    g: &mut Graph<T>,
    state: &PeftModuleState,
    trainable: bool,
) -> Result<BoundModule, PeftError> {
    let mut bound = BoundModule::default();
    for (name, t) in &state.tensors {
        let v = g.param(t, trainable);
        bound.vars.insert(name.clone(), v);
        bound.leaves.push((name.clone(), v));
    }
    let get = |b: &BoundModule, name: &str| {
        b.var(name)
            .ok_or_else(|| PeftError::MissingTensor(name.to_string()))
    };
    match &state.config {
        PeftConfig::Compacter(_) => {
            for site in block_sites(&state.host_meta) {
                let p = site_path(site);
                for dir in ["down", "up"] {
                    let rules = get(&bound, &format!("{p}.compacter.{dir}.rules"))?;
                    let factors = get(&bound, &format!("{p}.compacter.{dir}.factors"))?;
                    let w = compacter_weight(g, rules, factors)?;
                    bound.vars.insert(format!("{p}.compacter.{dir}.weight"), w);
                }
            }
        }
        PeftConfig::PrefixTuning(c) => {
            let mlp = PrefixMlpVars {
                fc1: get(&bound, PREFIX_FC1_W)?,
                fc1_bias: get(&bound, PREFIX_FC1_B)?,
                fc2: get(&bound, PREFIX_FC2_W)?,
                fc2_bias: get(&bound, PREFIX_FC2_B)?,
            };
            let seeds = get(&bound, PREFIX_SEEDS)?;
            for kv in prefix_compute(g, c, seeds, mlp, &state.host_meta)? {
                let p = site_path(kv.site);
                bound.vars.insert(format!("{p}.prefix.key"), kv.key);
                bound.vars.insert(format!("{p}.prefix.value"), kv.value);
            }
        }
        _ => {}
    }
    Ok(bound)
}

/// Default-initializes a module and registers it on `model`.
/// The host keeps the live copy; the returned state is a snapshot.
pub fn attach(
    model: &mut HostModel,
    config: &PeftConfig,
    seed: u64,
) -> Result<PeftModuleState, PeftError> {
    let meta = HostMeta::of(model.config());
    let state = default_init(config, &meta, seed)?;
    model.attach_module(state.clone())?;
    Ok(state)
}

#[derive(Clone, Copy, Debug)]
pub struct BottleneckVars {
    pub down: Var,
    pub down_bias: Var,
    pub up: Var,
    pub up_bias: Var,
}

/// Residual bottleneck: `h + act(h·down + b_down)·up + b_up`.
pub fn adapter_apply<T: Real>(
    g: &mut Graph<T>,
    h: Var,
    w: BottleneckVars,
    activation: Activation,
) -> Result<Var, TensorError> {
    let z = g.matmul(h, w.down)?;
    let z = g.add(z, w.down_bias)?;
    let z = activation.apply(g, z);
    let z = g.matmul(z, w.up)?;
    let z = g.add(z, w.up_bias)?;
    g.add(h, z)
}

/// Materializes `Σᵢ rulesᵢ ⊗ factorsᵢ` from stacked rank-3 tensors.
pub fn compacter_weight<T: Real>(
    g: &mut Graph<T>,
    rules: Var,
    factors: Var,
) -> Result<Var, TensorError> {
    let (rs, fs) = (g.shape(rules).to_vec(), g.shape(factors).to_vec());
    if rs.len() != 3 || fs.len() != 3 || rs[0] != fs[0] {
        return Err(TensorError::ShapeMismatch {
            op: "compacter_weight",
            lhs: rs,
            rhs: fs,
        });
    }
    let mut acc = None;
    for i in 0..rs[0] {
        let a = g.select(rules, i)?;
        let b = g.select(factors, i)?;
        let k = g.kron(a, b)?;
        acc = Some(match acc {
            None => k,
            Some(prev) => g.add(prev, k)?,
        });
    }
    acc.ok_or(TensorError::EmptyTensor)
}

/// Compacter block: the Adapter residual bottleneck with hypercomplex weights.
pub fn compacter_apply<T: Real>(
    g: &mut Graph<T>,
    h: Var,
    down: (Var, Var, Var),
    up: (Var, Var, Var),
    activation: Activation,
) -> Result<Var, TensorError> {
    let w = BottleneckVars {
        down: compacter_weight(g, down.0, down.1)?,
        down_bias: down.2,
        up: compacter_weight(g, up.0, up.1)?,
        up_bias: up.2,
    };
    adapter_apply(g, h, w, activation)
}

/// Low-rank delta `scale · (x·down)·up`, added in parallel to a projection.
pub fn lora_apply<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    down: Var,
    up: Var,
    scale: T,
) -> Result<Var, TensorError> {
    let z = g.matmul(x, down)?;
    let z = g.matmul(z, up)?;
    Ok(g.scale(z, scale))
}

#[derive(Clone, Copy, Debug)]
pub struct PrefixMlpVars {
    pub fc1: Var,
    pub fc1_bias: Var,
    pub fc2: Var,
    pub fc2_bias: Var,
}

/// Key/value prefix rows for one attention sub-layer.
#[derive(Clone, Copy, Debug)]
pub struct PrefixKv {
    pub site: (Stack, usize, SubLayer),
    pub key: Var,
    pub value: Var,
}

/// Runs the reparameterization MLP `fc2(tanh(fc1(seeds)))` and splits its
/// output into one key and one value prefix per attention sub-layer.
pub fn prefix_compute<T: Real>(
    g: &mut Graph<T>,
    config: &PrefixConfig,
    seeds: Var,
    mlp: PrefixMlpVars,
    meta: &HostMeta,
) -> Result<Vec<PrefixKv>, TensorError> {
    let sites = attention_sites(meta);
    let d = meta.hidden_dim;
    let expected = [config.num_tokens, config.token_embed_dim];
    if g.shape(seeds) != expected {
        return Err(TensorError::ShapeMismatch {
            op: "prefix_compute",
            lhs: expected.to_vec(),
            rhs: g.shape(seeds).to_vec(),
        });
    }
    let h = g.matmul(seeds, mlp.fc1)?;
    let h = g.add(h, mlp.fc1_bias)?;
    let h = g.tanh(h);
    let out = g.matmul(h, mlp.fc2)?;
    let out = g.add(out, mlp.fc2_bias)?;
    if g.shape(out)[1] != 2 * sites.len() * d {
        return Err(TensorError::ShapeMismatch {
            op: "prefix_compute",
            lhs: vec![config.num_tokens, 2 * sites.len() * d],
            rhs: g.shape(out).to_vec(),
        });
    }
    sites
        .into_iter()
        .enumerate()
        .map(|(i, site)| {
            Ok(PrefixKv {
                site,
                key: g.slice_cols(out, 2 * i * d, d)?,
                value: g.slice_cols(out, (2 * i + 1) * d, d)?,
            })
        })
        .collect()
}
