//! Small pre-norm encoder-decoder transformer used as a PEFT host.
//!
//! Every attention sub-layer (encoder self-attention, decoder self- and
//! cross-attention) and every block output exposes a [`HookPoint`]. An
//! attached PEFT module registers [`HookBinding`]s at those points; with an
//! empty registry the forward pass is the plain transformer.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::peft::{self, BoundModule, PeftModuleState};
use crate::tensor::{Graph, Real, RowMask, Tensor, TensorError, Var};

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {index} out of vocabulary of size {vocab}")]
    IndexOutOfVocab { index: usize, vocab: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("hook point {0} is already occupied")]
    HookOccupied(HookSite),
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("no PEFT module is attached")]
    NoModuleAttached,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Peft(Box<peft::PeftError>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<peft::PeftError> for ModelError {
    fn from(e: peft::PeftError) -> Self {
        ModelError::Peft(Box::new(e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_enc_layers: usize,
    pub num_dec_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Desk-scale default: two layers per stack, 32 hidden units.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_enc_layers: 2,
            num_dec_layers: 2,
            hidden_dim: 32,
            num_heads: 4,
            ffn_dim: 64,
            vocab_size,
            max_seq_len: 32,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("num_enc_layers", self.num_enc_layers),
            ("num_dec_layers", self.num_dec_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(ModelError::InvalidConfig(
                "vocab_size must be >= 4 (pad, eos, unk, one content token)".into(),
            ));
        }
        Ok(())
    }

    /// Canonical parameter names and shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v, s) = (
            self.hidden_dim,
            self.ffn_dim,
            self.vocab_size,
            self.max_seq_len,
        );
        let mut out = vec![
            ("embed.tokens".to_string(), vec![v, d]),
            ("embed.enc_pos".to_string(), vec![s, d]),
            ("embed.dec_pos".to_string(), vec![s, d]),
        ];
        let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.ln.gain"), vec![d]));
            out.push((format!("{p}.ln.bias"), vec![d]));
            for proj in ["q", "k", "v", "o"] {
                out.push((format!("{p}.{proj}.weight"), vec![d, d]));
                out.push((format!("{p}.{proj}.bias"), vec![d]));
            }
        };
        let ffn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.ln.gain"), vec![d]));
            out.push((format!("{p}.ln.bias"), vec![d]));
            out.push((format!("{p}.fc1.weight"), vec![d, f]));
            out.push((format!("{p}.fc1.bias"), vec![f]));
            out.push((format!("{p}.fc2.weight"), vec![f, d]));
            out.push((format!("{p}.fc2.bias"), vec![d]));
        };
        for l in 0..self.num_enc_layers {
            attn(&mut out, &format!("enc.{l}.self_attn"));
            ffn(&mut out, &format!("enc.{l}.ffn"));
        }
        out.push(("enc.final_ln.gain".into(), vec![d]));
        out.push(("enc.final_ln.bias".into(), vec![d]));
        for l in 0..self.num_dec_layers {
            attn(&mut out, &format!("dec.{l}.self_attn"));
            attn(&mut out, &format!("dec.{l}.cross_attn"));
            ffn(&mut out, &format!("dec.{l}.ffn"));
        }
        out.push(("dec.final_ln.gain".into(), vec![d]));
        out.push(("dec.final_ln.bias".into(), vec![d]));
        out.push(("lm_head.weight".into(), vec![d, v]));
        out.push(("lm_head.bias".into(), vec![v]));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stack {
    Encoder,
    Decoder,
}

impl Stack {
    pub fn tag(self) -> &'static str {
        match self {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SubLayer {
    SelfAttn,
    CrossAttn,
    Ffn,
}

impl SubLayer {
    pub fn tag(self) -> &'static str {
        match self {
            SubLayer::SelfAttn => "self_attn",
            SubLayer::CrossAttn => "cross_attn",
            SubLayer::Ffn => "ffn",
        }
    }
}

/// Host locations a PEFT technique can interact with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HookPoint {
    /// Parallel additive delta on the query projection output.
    AttnQueryProj,
    /// Parallel additive delta on the value projection output.
    AttnValueProj,
    /// Extra key/value rows prepended before attention.
    AttnKeysValues,
    /// Sequential transform of the attention block output.
    AfterAttnBlock,
    /// Sequential transform of the feed-forward block output.
    AfterFfnBlock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HookSite {
    pub stack: Stack,
    pub layer: usize,
    pub sublayer: SubLayer,
    pub point: HookPoint,
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{}.{}:{:?}",
            self.stack.tag(),
            self.layer,
            self.sublayer.tag(),
            self.point
        )
    }
}

/// What an attached module does at a hook site. Names refer to module
/// tensors or to values the module derives from them each forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum HookBinding {
    LowRank {
        down: String,
        up: String,
        scale: f32,
    },
    PrefixKv {
        key: String,
        value: String,
    },
    Bottleneck {
        down_weight: String,
        down_bias: String,
        up_weight: String,
        up_bias: String,
        activation: peft::Activation,
    },
}

/// One attention score matrix observed during a traced forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub stack: Stack,
    pub layer: usize,
    pub sublayer: SubLayer,
    pub head: usize,
    pub queries: usize,
    pub keys: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub attention: Vec<AttentionShape>,
}

/// 256-bit digest over all host parameters in canonical name order.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({self})")
    }
}

#[derive(Clone, Debug)]
pub struct HostModel {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    hooks: BTreeMap<HookSite, HookBinding>,
    module: Option<PeftModuleState>,
}

#[derive(Clone, Copy)]
struct Lin {
    w: Var,
    b: Var,
}

#[derive(Clone, Copy)]
struct Norm {
    gain: Var,
    bias: Var,
}

#[derive(Clone, Copy)]
struct AttnVars {
    ln: Norm,
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
}

#[derive(Clone, Copy)]
struct FfnVars {
    ln: Norm,
    fc1: Lin,
    fc2: Lin,
}

/// Host (and module) parameters inserted into one graph.
pub struct BoundHost {
    tokens: Var,
    enc_pos: Var,
    dec_pos: Var,
    enc: Vec<(AttnVars, FfnVars)>,
    dec: Vec<(AttnVars, AttnVars, FfnVars)>,
    enc_ln: Norm,
    dec_ln: Norm,
    head: Lin,
    host_leaves: Vec<(String, Var)>,
    module: Option<BoundModule>,
}

impl BoundHost {
    /// Host parameter leaves, in canonical order.
    pub fn host_leaves(&self) -> &[(String, Var)] {
        &self.host_leaves
    }

    pub fn module(&self) -> Option<&BoundModule> {
        self.module.as_ref()
    }
}

impl HostModel {
    /// Fresh host with seeded random parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = (config.num_enc_layers + config.num_dec_layers) as f32;
        let mut params = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with(".gain") {
                vec![1.0; numel]
            } else if name.ends_with(".bias") {
                vec![0.0; numel]
            } else {
                let mut std = if name.starts_with("embed.") {
                    0.5
                } else {
                    1.0 / (shape[0] as f32).sqrt()
                };
                if name.ends_with(".o.weight") || name.ends_with(".fc2.weight") {
                    std /= (2.0 * depth).sqrt();
                }
                let normal = Normal::new(0.0f32, std).expect("finite std");
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self {
            config,
            params,
            hooks: BTreeMap::new(),
            module: None,
        })
    }

    /// Host from explicit parameters; every canonical name must be present
    /// with its canonical shape.
    pub fn from_params(
        config: ModelConfig,
        mut params: BTreeMap<String, Tensor>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut ordered = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let t = params
                .remove(&name)
                .ok_or_else(|| ModelError::MissingParameter(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "from_params",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                }
                .into());
            }
            ordered.insert(name, t);
        }
        if let Some(extra) = params.keys().next() {
            return Err(ModelError::InvalidConfig(format!(
                "unexpected parameter {extra}"
            )));
        }
        Ok(Self {
            config,
            params: ordered,
            hooks: BTreeMap::new(),
            module: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn hooks(&self) -> &BTreeMap<HookSite, HookBinding> {
        &self.hooks
    }

    pub fn module(&self) -> Option<&PeftModuleState> {
        self.module.as_ref()
    }

    pub fn module_mut(&mut self) -> Option<&mut PeftModuleState> {
        self.module.as_mut()
    }

    /// Registers `state` at every hook site its technique uses.
    pub fn attach_module(&mut self, state: PeftModuleState) -> Result<(), ModelError> {
        let meta = peft::HostMeta::of(&self.config);
        if state.host_meta != meta {
            return Err(peft::PeftError::IncompatibleConfig(format!(
                "module built for {:?}, host is {:?}",
                state.host_meta, meta
            ))
            .into());
        }
        let bindings = peft::hook_bindings(&state)?;
        if self.module.is_some() {
            let site = bindings
                .first()
                .map(|(s, _)| *s)
                .ok_or(ModelError::NoModuleAttached)?;
            return Err(ModelError::HookOccupied(site));
        }
        for (site, _) in &bindings {
            if self.hooks.contains_key(site) {
                return Err(ModelError::HookOccupied(*site));
            }
        }
        self.hooks.extend(bindings);
        self.module = Some(state);
        Ok(())
    }

    /// Removes the attached module and all of its hook registrations.
    pub fn detach_module(&mut self) -> Option<PeftModuleState> {
        self.hooks.clear();
        self.module.take()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        Fingerprint(h.finalize().into())
    }

    /// Inserts host parameters (and the attached module, if any) into `g`.
    pub fn bind<T: Real>(
        &self,
        g: &mut Graph<T>,
        host_trainable: bool,
        module_trainable: bool,
    ) -> Result<BoundHost, ModelError> {
        let mut vars: HashMap<&str, Var> = HashMap::with_capacity(self.params.len());
        let mut host_leaves = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            let v = g.param(t, host_trainable);
            vars.insert(name.as_str(), v);
            host_leaves.push((name.clone(), v));
        }
        let get = |name: String| -> Result<Var, ModelError> {
            vars.get(name.as_str())
                .copied()
                .ok_or(ModelError::MissingParameter(name))
        };
        let lin = |p: &str| -> Result<Lin, ModelError> {
            Ok(Lin {
                w: get(format!("{p}.weight"))?,
                b: get(format!("{p}.bias"))?,
            })
        };
        let norm = |p: &str| -> Result<Norm, ModelError> {
            Ok(Norm {
                gain: get(format!("{p}.gain"))?,
                bias: get(format!("{p}.bias"))?,
            })
        };
        let attn = |p: &str| -> Result<AttnVars, ModelError> {
            Ok(AttnVars {
                ln: norm(&format!("{p}.ln"))?,
                q: lin(&format!("{p}.q"))?,
                k: lin(&format!("{p}.k"))?,
                v: lin(&format!("{p}.v"))?,
                o: lin(&format!("{p}.o"))?,
            })
        };
        let ffn = |p: &str| -> Result<FfnVars, ModelError> {
            Ok(FfnVars {
                ln: norm(&format!("{p}.ln"))?,
                fc1: lin(&format!("{p}.fc1"))?,
                fc2: lin(&format!("{p}.fc2"))?,
            })
        };
        let enc = (0..self.config.num_enc_layers)
            .map(|l| Ok((attn(&format!("enc.{l}.self_attn"))?, ffn(&format!("enc.{l}.ffn"))?)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        let dec = (0..self.config.num_dec_layers)
            .map(|l| {
                Ok((
                    attn(&format!("dec.{l}.self_attn"))?,
                    attn(&format!("dec.{l}.cross_attn"))?,
                    ffn(&format!("dec.{l}.ffn"))?,
                ))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let bound = BoundHost {
            tokens: get("embed.tokens".into())?,
            enc_pos: get("embed.enc_pos".into())?,
            dec_pos: get("embed.dec_pos".into())?,
            enc,
            dec,
            enc_ln: norm("enc.final_ln")?,
            dec_ln: norm("dec.final_ln")?,
            head: lin("lm_head")?,
            host_leaves,
            module: None,
        };
        let module = match &self.module {
            Some(state) => Some(peft::bind_module(g, state, module_trainable)?),
            None => None,
        };
        Ok(BoundHost { module, ..bound })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if tokens.is_empty() {
            return Err(ModelError::InvalidArgument("empty token sequence".into()));
        }
        if let Some(&bad) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(ModelError::IndexOutOfVocab {
                index: bad as usize,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Encoder output (len × d) inside `g`.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &BoundHost,
        tokens: &[u32],
        trace: Option<&mut ForwardTrace>,
    ) -> Result<Var, ModelError> {
        self.check_tokens(tokens)?;
        Pass {
            model: self,
            g,
            b: bound,
            trace,
        }
        .encode(tokens)
    }

    /// Decoder logits (len × vocab) inside `g`.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &BoundHost,
        memory: Var,
        tokens: &[u32],
        trace: Option<&mut ForwardTrace>,
    ) -> Result<Var, ModelError> {
        self.check_tokens(tokens)?;
        Pass {
            model: self,
            g,
            b: bound,
            trace,
        }
        .decode(memory, tokens)
    }

    /// Logits for every decoder position.
    pub fn forward(&self, enc_tokens: &[u32], dec_tokens: &[u32]) -> Result<Tensor, ModelError> {
        self.forward_traced(enc_tokens, dec_tokens, None)
    }

    pub fn forward_traced(
        &self,
        enc_tokens: &[u32],
        dec_tokens: &[u32],
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Tensor, ModelError> {
        let mut g = Graph::<f32>::new();
        let bound = self.bind(&mut g, false, false)?;
        let memory = self.encode(&mut g, &bound, enc_tokens, trace.as_deref_mut())?;
        let logits = self.decode(&mut g, &bound, memory, dec_tokens, trace)?;
        Ok(g.value(logits).clone())
    }

    /// Teacher-forced loss of producing `target` (then EOS) for `input`.
    pub fn sequence_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &BoundHost,
        input: &[u32],
        target: &[u32],
    ) -> Result<Var, ModelError> {
        let mut dec_in = Vec::with_capacity(target.len() + 1);
        dec_in.push(PAD_ID);
        dec_in.extend_from_slice(target);
        let targets: Vec<usize> = target
            .iter()
            .chain(std::iter::once(&EOS_ID))
            .map(|&t| t as usize)
            .collect();
        let memory = self.encode(g, bound, input, None)?;
        let logits = self.decode(g, bound, memory, &dec_in, None)?;
        Ok(g.softmax_ce(logits, &targets)?)
    }

    /// Argmax continuation of `prompt`, stopping at EOS or after `max_new`
    /// tokens. Ties go to the lowest token id.
    pub fn greedy_decode(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>, ModelError> {
        if max_new == 0 {
            return Err(ModelError::InvalidArgument("max_new must be >= 1".into()));
        }
        let mut g = Graph::<f32>::new();
        let bound = self.bind(&mut g, false, false)?;
        let memory = self.encode(&mut g, &bound, prompt, None)?;
        let mut dec = vec![PAD_ID];
        let mut out = Vec::new();
        for _ in 0..max_new {
            let logits = self.decode(&mut g, &bound, memory, &dec, None)?;
            let t = g.value(logits);
            let v = self.config.vocab_size;
            let last = &t.data()[(dec.len() - 1) * v..dec.len() * v];
            let mut best = 0usize;
            for (i, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = i;
                }
            }
            let tok = best as u32;
            if tok == EOS_ID {
                break;
            }
            out.push(tok);
            dec.push(tok);
        }
        Ok(out)
    }
}

struct Pass<'a, T: Real> {
    model: &'a HostModel,
    g: &'a mut Graph<T>,
    b: &'a BoundHost,
    trace: Option<&'a mut ForwardTrace>,
}

impl<T: Real> Pass<'_, T> {
    fn hook(&self, stack: Stack, layer: usize, sublayer: SubLayer, point: HookPoint) -> Option<&HookBinding> {
        self.model.hooks.get(&HookSite {
            stack,
            layer,
            sublayer,
            point,
        })
    }

    fn module_var(&self, name: &str) -> Result<Var, ModelError> {
        self.b
            .module
            .as_ref()
            .ok_or(ModelError::NoModuleAttached)?
            .var(name)
            .ok_or_else(|| ModelError::MissingParameter(name.to_string()))
    }

    fn linear(&mut self, x: Var, l: Lin) -> Result<Var, ModelError> {
        let y = self.g.matmul(x, l.w)?;
        Ok(self.g.add(y, l.b)?)
    }

    fn embed(&mut self, tokens: &[u32], pos: Var) -> Result<Var, ModelError> {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = self.g.embedding(self.b.tokens, &ids)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let p = self.g.embedding(pos, &positions)?;
        Ok(self.g.add(tok, p)?)
    }

    /// Applies a parallel low-rank delta registered at `point`, if any.
    fn projection(
        &mut self,
        input: Var,
        proj: Lin,
        site: (Stack, usize, SubLayer),
        point: HookPoint,
    ) -> Result<Var, ModelError> {
        let base = self.linear(input, proj)?;
        match self.hook(site.0, site.1, site.2, point).cloned() {
            Some(HookBinding::LowRank { down, up, scale }) => {
                let a = self.module_var(&down)?;
                let b = self.module_var(&up)?;
                let delta = peft::lora_apply(self.g, input, a, b, T::of_f32(scale))?;
                Ok(self.g.add(base, delta)?)
            }
            _ => Ok(base),
        }
    }

    fn attention(
        &mut self,
        x: Var,
        memory: Option<Var>,
        p: AttnVars,
        site: (Stack, usize, SubLayer),
        causal: bool,
    ) -> Result<Var, ModelError> {
        let cfg = &self.model.config;
        let (d, heads, hd) = (cfg.hidden_dim, cfg.num_heads, cfg.head_dim());
        let normed = self.g.layer_norm(x, p.ln.gain, p.ln.bias)?;
        let kv_in = memory.unwrap_or(normed);
        let q = self.projection(normed, p.q, site, HookPoint::AttnQueryProj)?;
        let mut k = self.linear(kv_in, p.k)?;
        let mut v = self.projection(kv_in, p.v, site, HookPoint::AttnValueProj)?;
        let mut prefix = 0;
        if let Some(HookBinding::PrefixKv { key, value }) = self
            .hook(site.0, site.1, site.2, HookPoint::AttnKeysValues)
            .cloned()
        {
            let pk = self.module_var(&key)?;
            let pv = self.module_var(&value)?;
            prefix = self.g.shape(pk)[0];
            k = self.g.concat_rows(pk, k)?;
            v = self.g.concat_rows(pv, v)?;
        }
        let mask = if causal {
            RowMask::Causal { prefix }
        } else {
            RowMask::None
        };
        let scale = T::of_f64(1.0 / (hd as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.g.slice_cols(q, h * hd, hd)?;
            let kh = self.g.slice_cols(k, h * hd, hd)?;
            let vh = self.g.slice_cols(v, h * hd, hd)?;
            let kt = self.g.transpose(kh)?;
            let scores = self.g.matmul(qh, kt)?;
            let scores = self.g.scale(scores, scale);
            if let Some(trace) = self.trace.as_deref_mut() {
                let s = self.g.shape(scores);
                trace.attention.push(AttentionShape {
                    stack: site.0,
                    layer: site.1,
                    sublayer: site.2,
                    head: h,
                    queries: s[0],
                    keys: s[1],
                });
            }
            let probs = self.g.softmax(scores, mask)?;
            outs.push(self.g.matmul(probs, vh)?);
        }
        debug_assert_eq!(heads * hd, d);
        let merged = self.g.concat_cols(&outs)?;
        let attn = self.linear(merged, p.o)?;
        let h = self.g.add(x, attn)?;
        self.after_block(h, site, HookPoint::AfterAttnBlock)
    }

    fn feed_forward(
        &mut self,
        x: Var,
        p: FfnVars,
        stack: Stack,
        layer: usize,
    ) -> Result<Var, ModelError> {
        let normed = self.g.layer_norm(x, p.ln.gain, p.ln.bias)?;
        let hidden = self.linear(normed, p.fc1)?;
        let hidden = self.g.gelu(hidden);
        let out = self.linear(hidden, p.fc2)?;
        let h = self.g.add(x, out)?;
        self.after_block(h, (stack, layer, SubLayer::Ffn), HookPoint::AfterFfnBlock)
    }

    /// Sequential bottleneck transform registered after a block, if any.
    fn after_block(
        &mut self,
        h: Var,
        site: (Stack, usize, SubLayer),
        point: HookPoint,
    ) -> Result<Var, ModelError> {
        match self.hook(site.0, site.1, site.2, point).cloned() {
            Some(HookBinding::Bottleneck {
                down_weight,
                down_bias,
                up_weight,
                up_bias,
                activation,
            }) => {
                let w = peft::BottleneckVars {
                    down: self.module_var(&down_weight)?,
                    down_bias: self.module_var(&down_bias)?,
                    up: self.module_var(&up_weight)?,
                    up_bias: self.module_var(&up_bias)?,
                };
                Ok(peft::adapter_apply(self.g, h, w, activation)?)
            }
            _ => Ok(h),
        }
    }

    fn encode(&mut self, tokens: &[u32]) -> Result<Var, ModelError> {
        let mut x = self.embed(tokens, self.b.enc_pos)?;
        for (l, &(attn, ffn)) in self.b.enc.iter().enumerate() {
            x = self.attention(x, None, attn, (Stack::Encoder, l, SubLayer::SelfAttn), false)?;
            x = self.feed_forward(x, ffn, Stack::Encoder, l)?;
        }
        Ok(self.g.layer_norm(x, self.b.enc_ln.gain, self.b.enc_ln.bias)?)
    }

    fn decode(&mut self, memory: Var, tokens: &[u32]) -> Result<Var, ModelError> {
        let mut y = self.embed(tokens, self.b.dec_pos)?;
        for (l, &(self_attn, cross, ffn)) in self.b.dec.iter().enumerate() {
            y = self.attention(y, None, self_attn, (Stack::Decoder, l, SubLayer::SelfAttn), true)?;
            y = self.attention(
                y,
                Some(memory),
                cross,
                (Stack::Decoder, l, SubLayer::CrossAttn),
                false,
            )?;
            y = self.feed_forward(y, ffn, Stack::Decoder, l)?;
        }
        let y = self.g.layer_norm(y, self.b.dec_ln.gain, self.b.dec_ln.bias)?;
        self.linear(y, self.b.head)
    }
}
