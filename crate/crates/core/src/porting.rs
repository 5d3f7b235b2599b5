//! Exporting PEFT modules to `.peftmod` files and importing them into a
//! receiving host under one of three initialization scenarios.
//!
//! File layout:
//!
//! ```text
//! PEFTMOD/1\n
//! <header length in bytes, decimal>\n
//! <header: JSON>
//! <payload: little-endian f32 tensors, concatenated in directory order>
//! ```
//!
//! Host checkpoints use the same container with `artifact_kind = "host-model"`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HostModel, ModelConfig, ModelError};
use crate::peft::{self, HostMeta, PeftConfig, PeftError, PeftModuleState, PeftTechnique};
use crate::tensor::{moments, moments_of, Tensor};

pub const MAGIC: &[u8] = b"PEFTMOD/1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PortError {
    #[error("tensor {0} contains NaN or infinite values")]
    NonFiniteParameter(String),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("incompatible host: {}", fmt_violations(.0))]
    IncompatibleHost(Vec<CompatViolation>),
    #[error("expected a {expected} artifact, found {found}")]
    WrongArtifact {
        expected: &'static str,
        found: &'static str,
    },
    #[error(transparent)]
    Peft(#[from] PeftError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn fmt_violations(v: &[CompatViolation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortScenario {
    /// Parameters copied exactly.
    Ported,
    /// Parameters redrawn from a normal with each tensor's mean and variance.
    Sampled,
    /// The technique's default initialization.
    FromScratch,
}

impl PortScenario {
    pub const ALL: [PortScenario; 3] = [
        PortScenario::Ported,
        PortScenario::Sampled,
        PortScenario::FromScratch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PortScenario::Ported => "ported",
            PortScenario::Sampled => "sampled",
            PortScenario::FromScratch => "from_scratch",
        }
    }
}

impl fmt::Display for PortScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PortScenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ported" => Ok(PortScenario::Ported),
            "sampled" => Ok(PortScenario::Sampled),
            "from_scratch" | "fromscratch" | "scratch" => Ok(PortScenario::FromScratch),
            other => Err(format!("unknown scenario '{other}'")),
        }
    }
}

/// Where a module's parameters came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub pre_steps: u64,
    pub dataset_id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "artifact_kind", rename_all = "kebab-case")]
pub enum ArtifactMeta {
    PeftModule {
        technique: PeftTechnique,
        config: PeftConfig,
        host_meta: HostMeta,
    },
    HostModel {
        config: ModelConfig,
    },
}

impl ArtifactMeta {
    pub fn kind(&self) -> &'static str {
        match self {
            ArtifactMeta::PeftModule { .. } => "peft-module",
            ArtifactMeta::HostModel { .. } => "host-model",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHeader {
    pub format_version: u32,
    #[serde(flatten)]
    pub artifact: ArtifactMeta,
    pub tensors: Vec<TensorEntry>,
    pub provenance: Option<Provenance>,
}

/// A decoded `.peftmod` container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleFile {
    pub header: FileHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModuleFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>, PortError> {
        encode(
            self.header.artifact.clone(),
            &self.tensors,
            self.header.provenance.clone(),
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PortError> {
        decode(bytes)
    }

    pub fn read(path: &Path) -> Result<Self, PortError> {
        decode(&std::fs::read(path)?)
    }

    /// The PEFT module stored in this file.
    pub fn module(&self) -> Result<PeftModuleState, PortError> {
        match &self.header.artifact {
            ArtifactMeta::PeftModule {
                technique,
                config,
                host_meta,
            } => {
                let state = PeftModuleState {
                    technique: *technique,
                    config: config.clone(),
                    host_meta: *host_meta,
                    tensors: self.tensors.clone(),
                };
                peft::validate_state(&state)
                    .map_err(|e| PortError::CorruptFile(format!("module tensors: {e}")))?;
                Ok(state)
            }
            other => Err(PortError::WrongArtifact {
                expected: "peft-module",
                found: other.kind(),
            }),
        }
    }

    /// The host model stored in this file.
    pub fn host(&self) -> Result<HostModel, PortError> {
        match &self.header.artifact {
            ArtifactMeta::HostModel { config } => {
                HostModel::from_params(config.clone(), self.tensors.clone())
                    .map_err(|e| PortError::CorruptFile(format!("host tensors: {e}")))
            }
            other => Err(PortError::WrongArtifact {
                expected: "host-model",
                found: other.kind(),
            }),
        }
    }
}

fn encode(
    artifact: ArtifactMeta,
    tensors: &BTreeMap<String, Tensor>,
    provenance: Option<Provenance>,
) -> Result<Vec<u8>, PortError> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        if !t.is_finite() {
            return Err(PortError::NonFiniteParameter(name.clone()));
        }
        let length = 4 * t.numel() as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            length,
        });
        offset += length;
    }
    let header = FileHeader {
        format_version: FORMAT_VERSION,
        artifact,
        tensors: entries,
        provenance,
    };
    let json = serde_json::to_vec_pretty(&header)
        .map_err(|e| PortError::CorruptFile(format!("header encoding: {e}")))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(format!("{}\n", json.len()).as_bytes());
    out.extend_from_slice(&json);
    for t in tensors.values() {
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<ModuleFile, PortError> {
    let corrupt = |msg: &str| PortError::CorruptFile(msg.to_string());
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| corrupt("missing PEFTMOD/1 magic line"))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing header length line"))?;
    let header_len: usize = std::str::from_utf8(&rest[..nl])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| corrupt("bad header length"))?;
    let rest = &rest[nl + 1..];
    if rest.len() < header_len {
        return Err(corrupt("truncated header"));
    }
    let (head, payload) = rest.split_at(header_len);
    let header: FileHeader = serde_json::from_slice(head)
        .map_err(|e| PortError::CorruptFile(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(PortError::CorruptFile(format!(
            "unsupported format_version {}",
            header.format_version
        )));
    }
    let mut tensors = BTreeMap::new();
    let mut expected_offset = 0u64;
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.length != 4 * numel as u64 {
            return Err(PortError::CorruptFile(format!(
                "directory entry {} is not contiguous",
                e.name
            )));
        }
        expected_offset += e.length;
        let end = usize::try_from(expected_offset).map_err(|_| corrupt("offset overflow"))?;
        let raw = payload
            .get(e.offset as usize..end)
            .ok_or_else(|| corrupt("truncated payload"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| PortError::CorruptFile(format!("tensor {}: {err}", e.name)))?;
        if !t.is_finite() {
            return Err(PortError::NonFiniteParameter(e.name.clone()));
        }
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(PortError::CorruptFile(format!("duplicate tensor {}", e.name)));
        }
    }
    if expected_offset != payload.len() as u64 {
        return Err(corrupt("payload length does not match directory"));
    }
    Ok(ModuleFile { header, tensors })
}

/// Serializes a module. Byte output is a pure function of the inputs.
pub fn export_module(
    state: &PeftModuleState,
    provenance: &Provenance,
) -> Result<Vec<u8>, PortError> {
    peft::validate_state(state)?;
    encode(
        ArtifactMeta::PeftModule {
            technique: state.technique,
            config: state.config.clone(),
            host_meta: state.host_meta,
        },
        &state.tensors,
        Some(provenance.clone()),
    )
}

/// Serializes a host checkpoint (the attached module, if any, is not included).
pub fn export_host(model: &HostModel) -> Result<Vec<u8>, PortError> {
    encode(
        ArtifactMeta::HostModel {
            config: model.config().clone(),
        },
        model.params(),
        None,
    )
}

pub fn import_host(bytes: &[u8]) -> Result<HostModel, PortError> {
    decode(bytes)?.host()
}

pub fn load_host(path: &Path) -> Result<HostModel, PortError> {
    ModuleFile::read(path)?.host()
}

pub fn save_host(model: &HostModel, path: &Path) -> Result<(), PortError> {
    std::fs::write(path, export_host(model)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompatViolation {
    pub field: String,
    pub module: usize,
    pub receiving: usize,
}

impl fmt::Display for CompatViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: module has {}, receiving host has {}",
            self.field, self.module, self.receiving
        )
    }
}

/// Every host dimension on which a module and a receiving host disagree.
pub fn check_compat(module: &HostMeta, receiving: &ModelConfig) -> Vec<CompatViolation> {
    let recv = HostMeta::of(receiving);
    [
        ("hidden_dim", module.hidden_dim, recv.hidden_dim),
        ("num_enc_layers", module.num_enc_layers, recv.num_enc_layers),
        ("num_dec_layers", module.num_dec_layers, recv.num_dec_layers),
        ("num_heads", module.num_heads, recv.num_heads),
    ]
    .into_iter()
    .filter(|(_, m, r)| m != r)
    .map(|(field, module, receiving)| CompatViolation {
        field: field.to_string(),
        module,
        receiving,
    })
    .collect()
}

/// Granularity of the moment matching in [`sample_like_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentScope {
    #[default]
    PerTensor,
    /// One mean and variance over every element of the module.
    Pooled,
}

/// Replaces every tensor with independent normal draws matching its
/// population mean and variance. Zero-variance tensors are copied.
pub fn sample_like(state: &PeftModuleState, seed: u64) -> PeftModuleState {
    sample_like_with(state, seed, MomentScope::PerTensor)
}

pub fn sample_like_with(state: &PeftModuleState, seed: u64, scope: MomentScope) -> PeftModuleState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pooled = match scope {
        MomentScope::Pooled => {
            let all: Vec<f32> = state
                .tensors
                .values()
                .flat_map(|t| t.data().iter().copied())
                .collect();
            moments_of(&all).ok()
        }
        MomentScope::PerTensor => None,
    };
    let tensors = state
        .tensors
        .iter()
        .map(|(name, t)| {
            let (mean, var) = pooled.unwrap_or_else(|| moments(t).expect("non-empty tensor"));
            if var == 0.0 && pooled.is_none() {
                return (name.clone(), t.clone());
            }
            let normal = Normal::new(mean, var.sqrt()).expect("finite moments");
            let data = (0..t.numel())
                .map(|_| normal.sample(&mut rng) as f32)
                .collect();
            let fresh = Tensor::new(t.shape().to_vec(), data).expect("same shape");
            (name.clone(), fresh)
        })
        .collect();
    PeftModuleState {
        tensors,
        ..state.clone()
    }
}

/// Builds the receiving-side module for `scenario` from an exported module
/// and attaches it to `receiving`.
pub fn import_module(
    file: &ModuleFile,
    receiving: &mut HostModel,
    scenario: PortScenario,
    seed: u64,
) -> Result<PeftModuleState, PortError> {
    let source = file.module()?;
    let violations = check_compat(&source.host_meta, receiving.config());
    if !violations.is_empty() {
        return Err(PortError::IncompatibleHost(violations));
    }
    let state = match scenario {
        PortScenario::Ported => source,
        PortScenario::Sampled => sample_like(&source, seed),
        PortScenario::FromScratch => peft::default_init(&source.config, &source.host_meta, seed)?,
    };
    receiving.attach_module(state.clone())?;
    Ok(state)
}

pub fn import_module_bytes(
    bytes: &[u8],
    receiving: &mut HostModel,
    scenario: PortScenario,
    seed: u64,
) -> Result<PeftModuleState, PortError> {
    import_module(&decode(bytes)?, receiving, scenario, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peft::{AdapterConfig, LoraConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_enc_layers: 1,
            num_dec_layers: 1,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 10,
            max_seq_len: 8,
        }
    }

    fn adapter_state(seed: u64) -> PeftModuleState {
        let cfg = PeftConfig::Adapter(AdapterConfig {
            bottleneck: 4,
            ..AdapterConfig::default()
        });
        peft::default_init(&cfg, &HostMeta::of(&tiny()), seed).unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let state = adapter_state(1);
        let prov = Provenance {
            pre_steps: 10,
            dataset_id: "a".into(),
            seed: 1,
        };
        let bytes = export_module(&state, &prov).unwrap();
        let file = ModuleFile::from_bytes(&bytes).unwrap();
        assert_eq!(file.header.tensors.len(), state.tensors.len());
        assert_eq!(file.module().unwrap(), state);
        assert_eq!(file.header.provenance.as_ref(), Some(&prov));
        assert_eq!(file.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn nan_is_rejected() {
        let mut state = adapter_state(2);
        let t = state.tensors.values_mut().next().unwrap();
        t.data_mut()[0] = f32::NAN;
        assert!(matches!(
            export_module(&state, &Provenance::default()),
            Err(PortError::NonFiniteParameter(_))
        ));
    }

    #[test]
    fn truncation_and_garbage_are_corrupt() {
        let bytes = export_module(&adapter_state(3), &Provenance::default()).unwrap();
        for bad in [&bytes[..bytes.len() - 3], &bytes[..20], b"hello".as_slice()] {
            assert!(matches!(
                ModuleFile::from_bytes(bad),
                Err(PortError::CorruptFile(_))
            ));
        }
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0, 0, 0, 0]);
        assert!(ModuleFile::from_bytes(&extra).is_err());
    }

    #[test]
    fn compat_names_each_field() {
        let base = tiny();
        let meta = HostMeta::of(&base);
        assert!(check_compat(&meta, &base).is_empty());
        let wide = ModelConfig {
            hidden_dim: 16,
            ..base.clone()
        };
        let v = check_compat(&meta, &wide);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "hidden_dim");
        let deep = ModelConfig {
            num_enc_layers: 4,
            ..base
        };
        assert_eq!(check_compat(&meta, &deep)[0].field, "num_enc_layers");
    }

    #[test]
    fn zero_variance_is_copied() {
        let mut state = adapter_state(4);
        for t in state.tensors.values_mut() {
            for x in t.data_mut() {
                *x = 0.25;
            }
        }
        let s = sample_like(&state, 9);
        assert_eq!(s, state);
    }

    #[test]
    fn host_checkpoint_round_trip() {
        let host = HostModel::new(tiny(), 5).unwrap();
        let bytes = export_host(&host).unwrap();
        let back = import_host(&bytes).unwrap();
        assert_eq!(back.fingerprint(), host.fingerprint());
        let file = ModuleFile::from_bytes(&bytes).unwrap();
        assert!(matches!(
            file.module(),
            Err(PortError::WrongArtifact { .. })
        ));
    }

    #[test]
    fn from_scratch_lora_has_zero_up() {
        let cfg = PeftConfig::Lora(LoraConfig::default());
        let state = peft::default_init(&cfg, &HostMeta::of(&tiny()), 1).unwrap();
        let bytes = export_module(&state, &Provenance::default()).unwrap();
        let mut recv = HostModel::new(tiny(), 8).unwrap();
        let s = import_module_bytes(&bytes, &mut recv, PortScenario::FromScratch, 2).unwrap();
        assert!(s
            .tensors
            .iter()
            .filter(|(n, _)| n.ends_with(".up"))
            .all(|(_, t)| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn incompatible_host_is_reported() {
        let bytes = export_module(&adapter_state(1), &Provenance::default()).unwrap();
        let mut recv = HostModel::new(
            ModelConfig {
                num_heads: 4,
                ..tiny()
            },
            1,
        )
        .unwrap();
        match import_module_bytes(&bytes, &mut recv, PortScenario::Ported, 0) {
            Err(PortError::IncompatibleHost(v)) => assert_eq!(v[0].field, "num_heads"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
