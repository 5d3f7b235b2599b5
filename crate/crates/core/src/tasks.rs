//! Synthetic classification tasks, the raw/instruct host pair, and TSV I/O.
//!
//! All tasks share one closed whitespace vocabulary ([`Vocab::standard`]).
//! A classification input is a bag of noise words and class markers; the
//! label is the class with the most markers (ties go to the lowest class)
//! and is emitted as a single verbalizer token.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HostModel, ModelConfig, ModelError, EOS_ID, PAD_ID, UNK_ID};
use crate::train::{self, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("degenerate task spec: {0}")]
    DegenerateSpec(String),
    #[error("datasets have incompatible label spaces: {0}")]
    IncompatibleLabelSpaces(String),
    #[error("line {line}: malformed row (expected text<TAB>label)")]
    MalformedRow { line: usize },
    #[error("line {line}: unknown label '{label}'")]
    UnknownLabel { line: usize, label: String },
    #[error("unknown token '{0}'")]
    UnknownToken(String),
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Closed whitespace vocabulary. Ids 0, 1, 2 are pad, eos and unk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

pub const NOISE_WORDS: usize = 48;
pub const MARKERS_PER_CLASS: usize = 4;
pub const MAX_CLASSES: usize = 3;
pub const VERBALIZERS: [&str; 10] = [
    "great",
    "terrible",
    "good",
    "bad",
    "alpha",
    "beta",
    "gamma",
    "neutral",
    "entailment",
    "contradiction",
];

impl Vocab {
    pub fn new<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut all: Vec<String> = vec!["<pad>".into(), "<eos>".into(), "<unk>".into()];
        for w in words {
            if !all.contains(&w) {
                all.push(w);
            }
        }
        let index = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words: all, index }
    }

    /// Noise words `w00..w47`, class markers `m{class}{j}`, topic markers
    /// `t{class}{j}` and the verbalizers.
    pub fn standard() -> Self {
        let mut words: Vec<String> = (0..NOISE_WORDS).map(|i| format!("w{i:02}")).collect();
        for c in 0..MAX_CLASSES {
            words.extend((0..MARKERS_PER_CLASS).map(|j| format!("m{c}{j}")));
        }
        for c in 0..MAX_CLASSES {
            words.extend((0..MARKERS_PER_CLASS).map(|j| format!("t{c}{j}")));
        }
        words.extend(VERBALIZERS.iter().map(|s| s.to_string()));
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Whitespace tokenization; unknown words map to unk.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn ids(&self, words: &[String]) -> Result<Vec<u32>, TaskError> {
        words
            .iter()
            .map(|w| self.id(w).ok_or_else(|| TaskError::UnknownToken(w.clone())))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<u32>,
    pub label: Vec<u32>,
}

impl Example {
    /// Tokens counted against a batch budget.
    pub fn num_tokens(&self) -> usize {
        self.input.len() + self.label.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleSet {
    pub id: String,
    pub examples: Vec<Example>,
}

impl ExampleSet {
    pub fn new(id: impl Into<String>, examples: Vec<Example>) -> Self {
        Self {
            id: id.into(),
            examples,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// First `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> (ExampleSet, ExampleSet) {
        let n = n.min(self.len());
        (
            ExampleSet::new(format!("{}[..{n}]", self.id), self.examples[..n].to_vec()),
            ExampleSet::new(format!("{}[{n}..]", self.id), self.examples[n..].to_vec()),
        )
    }
}

/// Marker-majority classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub name: String,
    pub num_classes: usize,
    /// Marker words for each class.
    pub markers: Vec<Vec<String>>,
    pub noise: Vec<String>,
    /// One verbalizer word per class.
    pub verbalizers: Vec<String>,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a position holds a marker.
    pub marker_density: f64,
    /// Probability that a marker is drawn from the example's own class.
    pub marker_purity: f64,
    pub seed: u64,
}

fn words(prefix: &str, range: std::ops::Range<usize>) -> Vec<String> {
    range.map(|i| format!("{prefix}{i:02}")).collect()
}

fn class_markers(prefix: char, classes: usize) -> Vec<Vec<String>> {
    (0..classes)
        .map(|c| {
            (0..MARKERS_PER_CLASS)
                .map(|j| format!("{prefix}{c}{j}"))
                .collect()
        })
        .collect()
}

impl SyntheticTaskSpec {
    /// Two-class sentiment analog labelled "great"/"terrible", noise `w00..w29`.
    pub fn sentiment_a(seed: u64) -> Self {
        Self {
            name: "sentiment-a".into(),
            num_classes: 2,
            markers: class_markers('m', 2),
            noise: words("w", 0..30),
            verbalizers: vec!["great".into(), "terrible".into()],
            min_len: 6,
            max_len: 12,
            marker_density: 0.3,
            marker_purity: 0.85,
            seed,
        }
    }

    /// Same label space as [`Self::sentiment_a`], noise `w18..w47`, longer inputs.
    pub fn sentiment_b(seed: u64) -> Self {
        Self {
            name: "sentiment-b".into(),
            noise: words("w", 18..48),
            min_len: 8,
            max_len: 16,
            marker_density: 0.25,
            ..Self::sentiment_a(seed)
        }
    }

    /// Three-class inference analog labelled neutral/entailment/contradiction.
    pub fn nli(seed: u64) -> Self {
        Self {
            name: "nli".into(),
            num_classes: 3,
            markers: class_markers('m', 3),
            verbalizers: vec![
                "neutral".into(),
                "entailment".into(),
                "contradiction".into(),
            ],
            ..Self::sentiment_a(seed)
        }
    }

    /// Polarity task of the instruction mixture: sentiment markers, but
    /// verbalized as "good"/"bad".
    pub fn polarity(seed: u64) -> Self {
        Self {
            name: "polarity".into(),
            noise: words("w", 0..NOISE_WORDS),
            min_len: 6,
            max_len: 16,
            verbalizers: vec!["good".into(), "bad".into()],
            ..Self::sentiment_a(seed)
        }
    }

    /// Topic task of the instruction mixture: topic markers, alpha/beta/gamma.
    pub fn topic(seed: u64) -> Self {
        Self {
            name: "topic".into(),
            num_classes: 3,
            markers: class_markers('t', 3),
            noise: words("w", 0..NOISE_WORDS),
            verbalizers: vec!["alpha".into(), "beta".into(), "gamma".into()],
            min_len: 6,
            max_len: 16,
            ..Self::sentiment_a(seed)
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<(), TaskError> {
        let bad = |m: &str| Err(TaskError::DegenerateSpec(m.to_string()));
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1");
        }
        if self.markers.len() != self.num_classes || self.verbalizers.len() != self.num_classes {
            return bad("need one marker set and one verbalizer per class");
        }
        if self.markers.iter().any(Vec::is_empty) {
            return bad("empty marker set");
        }
        let mut seen = HashSet::new();
        for m in self.markers.iter().flatten() {
            if !seen.insert(m) {
                return bad("marker sets must be disjoint");
            }
        }
        if self.noise.iter().any(|w| seen.contains(w)) {
            return bad("noise words overlap markers");
        }
        if !(self.marker_density > 0.0 && self.marker_density <= 1.0) {
            return bad("marker_density must be in (0, 1]");
        }
        if self.marker_density < 1.0 && self.noise.is_empty() {
            return bad("noise set is empty");
        }
        if !(0.0..=1.0).contains(&self.marker_purity) {
            return bad("marker_purity must be in [0, 1]");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        Ok(())
    }

    /// The label rule: class with most markers, lowest index on ties.
    pub fn label_of(&self, input: &[u32], vocab: &Vocab) -> Result<usize, TaskError> {
        let marker_ids = self
            .markers
            .iter()
            .map(|m| vocab.ids(m))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(majority(input, &marker_ids))
    }
}

fn majority(input: &[u32], marker_ids: &[Vec<u32>]) -> usize {
    let counts: Vec<usize> = marker_ids
        .iter()
        .map(|ids| input.iter().filter(|t| ids.contains(t)).count())
        .collect();
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

const MAX_ATTEMPTS: usize = 10_000;

/// `n` examples with exactly balanced classes (up to rounding), shuffled.
pub fn gen_synthetic(spec: &SyntheticTaskSpec, vocab: &Vocab, n: usize) -> Result<ExampleSet, TaskError> {
    spec.validate()?;
    if n == 0 {
        return Err(TaskError::DegenerateSpec("n must be >= 1".into()));
    }
    let marker_ids = spec
        .markers
        .iter()
        .map(|m| vocab.ids(m))
        .collect::<Result<Vec<_>, _>>()?;
    let noise_ids = vocab.ids(&spec.noise)?;
    let verbalizer_ids = vocab.ids(&spec.verbalizers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut classes: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    classes.shuffle(&mut rng);
    let mut examples = Vec::with_capacity(n);
    for class in classes {
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let mut input = Vec::with_capacity(len);
            let mut markers = 0;
            for _ in 0..len {
                if rng.gen_bool(spec.marker_density) {
                    markers += 1;
                    let from = if spec.num_classes == 1 || rng.gen_bool(spec.marker_purity) {
                        class
                    } else {
                        let other = rng.gen_range(0..spec.num_classes - 1);
                        if other >= class {
                            other + 1
                        } else {
                            other
                        }
                    };
                    input.push(*marker_ids[from].choose(&mut rng).expect("non-empty"));
                } else {
                    input.push(*noise_ids.choose(&mut rng).expect("non-empty"));
                }
            }
            if markers > 0 && majority(&input, &marker_ids) == class {
                found = Some(input);
                break;
            }
        }
        let input = found.ok_or_else(|| {
            TaskError::DegenerateSpec(format!("could not realize class {class}"))
        })?;
        examples.push(Example {
            input,
            label: vec![verbalizer_ids[class]],
        });
    }
    Ok(ExampleSet::new(format!("{}#{}", spec.name, spec.seed), examples))
}

/// Two datasets over the same label space for the same- and
/// different-dataset conditions.
pub fn make_dataset_pair(
    a: &SyntheticTaskSpec,
    b: &SyntheticTaskSpec,
    vocab: &Vocab,
    n: usize,
) -> Result<(ExampleSet, ExampleSet), TaskError> {
    if a.num_classes != b.num_classes {
        return Err(TaskError::IncompatibleLabelSpaces(format!(
            "{} vs {} classes",
            a.num_classes, b.num_classes
        )));
    }
    if a.verbalizers != b.verbalizers {
        return Err(TaskError::IncompatibleLabelSpaces(format!(
            "verbalizers {:?} vs {:?}",
            a.verbalizers, b.verbalizers
        )));
    }
    if a.markers != b.markers {
        return Err(TaskError::IncompatibleLabelSpaces(
            "class markers differ".into(),
        ));
    }
    Ok((gen_synthetic(a, vocab, n)?, gen_synthetic(b, vocab, n)?))
}

/// |A ∩ B| / |A ∪ B| over two noise vocabularies.
pub fn noise_overlap(a: &SyntheticTaskSpec, b: &SyntheticTaskSpec) -> f64 {
    let sa: HashSet<&String> = a.noise.iter().collect();
    let sb: HashSet<&String> = b.noise.iter().collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Markov-chain text over noise words and markers (never verbalizers),
/// cut into prefix → continuation examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmCorpusSpec {
    pub num_examples: usize,
    pub min_prefix: usize,
    pub max_prefix: usize,
    pub continuation: usize,
    /// Successor candidates per word in the transition table.
    pub branching: usize,
    pub seed: u64,
}

impl Default for LmCorpusSpec {
    fn default() -> Self {
        Self {
            num_examples: 2000,
            min_prefix: 4,
            max_prefix: 12,
            continuation: 3,
            branching: 3,
            seed: 0,
        }
    }
}

pub fn gen_lm_corpus(spec: &LmCorpusSpec, vocab: &Vocab) -> Result<ExampleSet, TaskError> {
    if spec.num_examples == 0 || spec.min_prefix == 0 || spec.min_prefix > spec.max_prefix {
        return Err(TaskError::DegenerateSpec("bad LM corpus spec".into()));
    }
    if spec.continuation == 0 || spec.branching == 0 {
        return Err(TaskError::DegenerateSpec("bad LM corpus spec".into()));
    }
    let verbalizers: HashSet<&str> = VERBALIZERS.iter().copied().collect();
    let alphabet: Vec<u32> = vocab
        .words()
        .iter()
        .enumerate()
        .skip(3)
        .filter(|(_, w)| !verbalizers.contains(w.as_str()))
        .map(|(i, _)| i as u32)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let table: BTreeMap<u32, Vec<u32>> = alphabet
        .iter()
        .map(|&w| {
            let next = (0..spec.branching)
                .map(|_| *alphabet.choose(&mut rng).expect("non-empty"))
                .collect();
            (w, next)
        })
        .collect();
    let examples = (0..spec.num_examples)
        .map(|_| {
            let len = rng.gen_range(spec.min_prefix..=spec.max_prefix) + spec.continuation;
            let mut seq = vec![*alphabet.choose(&mut rng).expect("non-empty")];
            while seq.len() < len {
                let last = *seq.last().expect("non-empty");
                seq.push(*table[&last].choose(&mut rng).expect("non-empty"));
            }
            let label = seq.split_off(len - spec.continuation);
            Example { input: seq, label }
        })
        .collect();
    Ok(ExampleSet::new(format!("lm#{}", spec.seed), examples))
}

/// Recipe for the raw and instruction-tuned host analogs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPairSpec {
    pub config: ModelConfig,
    pub lm: LmCorpusSpec,
    pub raw_steps: usize,
    pub instruct_steps: usize,
    /// Examples of the polarity task in the instruction mixture.
    pub polarity_examples: usize,
    /// Examples of the topic task in the instruction mixture.
    pub topic_examples: usize,
    /// LM examples mixed into instruction tuning.
    pub mixture_lm_examples: usize,
    pub learning_rate: f64,
    pub instruct_learning_rate: f64,
    pub batch_tokens: usize,
    pub seed: u64,
}

impl ModelPairSpec {
    pub fn desk(seed: u64) -> Self {
        Self {
            config: ModelConfig::desk(Vocab::standard().len()),
            lm: LmCorpusSpec {
                seed,
                ..LmCorpusSpec::default()
            },
            raw_steps: 1500,
            instruct_steps: 800,
            polarity_examples: 1000,
            topic_examples: 400,
            mixture_lm_examples: 200,
            learning_rate: 3e-3,
            instruct_learning_rate: 1.5e-3,
            batch_tokens: 256,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPairReport {
    pub raw_heldout_accuracy: f64,
    pub instruct_heldout_accuracy: f64,
    pub raw_final_loss: f64,
    pub instruct_final_loss: f64,
}

pub struct HostPair {
    pub raw: HostModel,
    pub instruct: HostModel,
    pub report: ModelPairReport,
}

/// Held-out examples of the instruction mixture's polarity task.
pub fn mixture_heldout(spec: &ModelPairSpec, vocab: &Vocab, n: usize) -> Result<ExampleSet, TaskError> {
    gen_synthetic(&SyntheticTaskSpec::polarity(spec.seed ^ 0x5eed_0001), vocab, n)
}

/// Trains the raw analog on next-token prediction only, then continues
/// training a copy on the supervised mixture to get the instruct analog.
pub fn build_model_pair(spec: &ModelPairSpec) -> Result<HostPair, TaskError> {
    let vocab = Vocab::standard();
    if spec.config.vocab_size != vocab.len() {
        return Err(TaskError::DegenerateSpec(format!(
            "vocab_size {} does not match the standard vocabulary ({})",
            spec.config.vocab_size,
            vocab.len()
        )));
    }
    let diverged = |e: TrainError| match e {
        TrainError::NonFiniteLoss { .. } => TaskError::TrainingDiverged(e.to_string()),
        other => TaskError::Train(other),
    };
    let mut raw = HostModel::new(spec.config.clone(), spec.seed)?;
    let lm = gen_lm_corpus(&spec.lm, &vocab)?;
    let raw_cfg = TrainConfig {
        learning_rate: spec.learning_rate,
        batch_tokens: spec.batch_tokens,
        total_steps: spec.raw_steps,
        seed: spec.seed,
        ..TrainConfig::default()
    };
    let raw_trace = train::train_host(&mut raw, &lm, &raw_cfg).map_err(diverged)?;

    let mut mixture = gen_synthetic(
        &SyntheticTaskSpec::polarity(spec.seed.wrapping_add(1)),
        &vocab,
        spec.polarity_examples,
    )?
    .examples;
    mixture.extend(
        gen_synthetic(
            &SyntheticTaskSpec::topic(spec.seed.wrapping_add(2)),
            &vocab,
            spec.topic_examples,
        )?
        .examples,
    );
    let extra_lm = gen_lm_corpus(
        &LmCorpusSpec {
            num_examples: spec.mixture_lm_examples.max(1),
            seed: spec.lm.seed.wrapping_add(3),
            ..spec.lm.clone()
        },
        &vocab,
    )?;
    if spec.mixture_lm_examples > 0 {
        mixture.extend(extra_lm.examples);
    }
    let mixture = ExampleSet::new("instruct-mixture", mixture);
    let mut instruct = raw.clone();
    let instruct_cfg = TrainConfig {
        learning_rate: spec.instruct_learning_rate,
        total_steps: spec.instruct_steps,
        seed: spec.seed.wrapping_add(4),
        ..raw_cfg
    };
    let instruct_trace = train::train_host(&mut instruct, &mixture, &instruct_cfg).map_err(diverged)?;

    let heldout = mixture_heldout(spec, &vocab, 200)?;
    let report = ModelPairReport {
        raw_heldout_accuracy: train::evaluate(&raw, &heldout)?.accuracy,
        instruct_heldout_accuracy: train::evaluate(&instruct, &heldout)?.accuracy,
        raw_final_loss: raw_trace.last().map_or(f64::NAN, |p| p.loss),
        instruct_final_loss: instruct_trace.last().map_or(f64::NAN, |p| p.loss),
    };
    Ok(HostPair {
        raw,
        instruct,
        report,
    })
}

/// Reads `text<TAB>label` rows. `labels` maps label strings to verbalizer
/// words; a label that is already a verbalizer word maps to itself.
pub fn load_tsv(
    path: &Path,
    vocab: &Vocab,
    labels: &BTreeMap<String, String>,
) -> Result<ExampleSet, TaskError> {
    let text = std::fs::read_to_string(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_tsv(&text, &id, vocab, labels)
}

pub fn parse_tsv(
    text: &str,
    id: &str,
    vocab: &Vocab,
    labels: &BTreeMap<String, String>,
) -> Result<ExampleSet, TaskError> {
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [input, label] = fields.as_slice() else {
            return Err(TaskError::MalformedRow { line: line_no });
        };
        let label = label.trim();
        let word = labels.get(label).map(String::as_str).unwrap_or(label);
        let label_id = vocab
            .id(word)
            .filter(|&id| id > UNK_ID)
            .ok_or_else(|| TaskError::UnknownLabel {
                line: line_no,
                label: label.to_string(),
            })?;
        let input = vocab.encode(input);
        if input.is_empty() {
            return Err(TaskError::MalformedRow { line: line_no });
        }
        examples.push(Example {
            input,
            label: vec![label_id],
        });
    }
    Ok(ExampleSet::new(id, examples))
}

pub fn write_tsv(set: &ExampleSet, vocab: &Vocab, path: &Path) -> Result<(), TaskError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in &set.examples {
        writeln!(out, "{}\t{}", vocab.decode(&ex.input), vocab.decode(&ex.label))?;
    }
    out.flush()?;
    Ok(())
}

/// Sanity check used by tests: no example ever contains pad or eos.
pub fn is_well_formed(set: &ExampleSet, vocab_size: usize) -> bool {
    set.examples.iter().all(|e| {
        !e.input.is_empty()
            && !e.label.is_empty()
            && e.input
                .iter()
                .chain(&e.label)
                .all(|&t| t != PAD_ID && t != EOS_ID && (t as usize) < vocab_size)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_vocab_has_single_token_verbalizers() {
        let v = Vocab::standard();
        for w in VERBALIZERS {
            assert_eq!(v.encode(w).len(), 1);
            assert!(v.id(w).unwrap() > UNK_ID);
        }
        assert_eq!(v.encode("never-seen"), vec![UNK_ID]);
    }

    #[test]
    fn labels_follow_the_rule_and_are_balanced() {
        let v = Vocab::standard();
        let spec = SyntheticTaskSpec::sentiment_a(3);
        let set = gen_synthetic(&spec, &v, 101).unwrap();
        let great = v.id("great").unwrap();
        let mut pos = 0;
        for ex in &set.examples {
            let class = spec.label_of(&ex.input, &v).unwrap();
            assert_eq!(ex.label, vec![v.id(&spec.verbalizers[class]).unwrap()]);
            pos += usize::from(ex.label[0] == great);
        }
        assert!(pos == 50 || pos == 51);
        assert!(is_well_formed(&set, v.len()));
    }

    #[test]
    fn single_class_spec_labels_everything_the_same() {
        let v = Vocab::standard();
        let spec = SyntheticTaskSpec {
            num_classes: 1,
            markers: vec![vec!["m00".into(), "m01".into()]],
            verbalizers: vec!["great".into()],
            noise: vec![],
            marker_density: 1.0,
            ..SyntheticTaskSpec::sentiment_a(1)
        };
        let set = gen_synthetic(&spec, &v, 20).unwrap();
        assert!(set.examples.iter().all(|e| e.label == vec![v.id("great").unwrap()]));
    }

    #[test]
    fn empty_markers_are_degenerate() {
        let v = Vocab::standard();
        let mut spec = SyntheticTaskSpec::sentiment_a(1);
        spec.markers[1].clear();
        assert!(matches!(
            gen_synthetic(&spec, &v, 4),
            Err(TaskError::DegenerateSpec(_))
        ));
    }

    #[test]
    fn dataset_pair_shares_labels_not_noise() {
        let v = Vocab::standard();
        let a = SyntheticTaskSpec::sentiment_a(1);
        let b = SyntheticTaskSpec::sentiment_b(2);
        assert!(noise_overlap(&a, &b) < 0.5);
        let (da, db) = make_dataset_pair(&a, &b, &v, 10).unwrap();
        assert_eq!(da.len(), 10);
        assert_eq!(db.len(), 10);
        let nli = SyntheticTaskSpec::nli(1);
        assert!(matches!(
            make_dataset_pair(&a, &nli, &v, 10),
            Err(TaskError::IncompatibleLabelSpaces(_))
        ));
    }

    #[test]
    fn lm_corpus_never_contains_verbalizers() {
        let v = Vocab::standard();
        let set = gen_lm_corpus(&LmCorpusSpec::default(), &v).unwrap();
        let verb: HashSet<u32> = VERBALIZERS.iter().map(|w| v.id(w).unwrap()).collect();
        assert!(set
            .examples
            .iter()
            .all(|e| e.input.iter().chain(&e.label).all(|t| !verb.contains(t))));
        assert!(is_well_formed(&set, v.len()));
    }

    #[test]
    fn tsv_parsing() {
        let v = Vocab::standard();
        let mut map = BTreeMap::new();
        map.insert("positive".to_string(), "great".to_string());
        map.insert("negative".to_string(), "terrible".to_string());
        let set = parse_tsv("m00 w01 w02\tpositive\nm10 zzz\tnegative\n", "fx", &v, &map).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.examples[0].label, vec![v.id("great").unwrap()]);
        assert_eq!(set.examples[1].input[1], UNK_ID);
        assert!(matches!(
            parse_tsv("a\tb\tc\td\n", "fx", &v, &map),
            Err(TaskError::MalformedRow { line: 1 })
        ));
        assert!(matches!(
            parse_tsv("m00\tmeh\n", "fx", &v, &map),
            Err(TaskError::UnknownLabel { .. })
        ));
    }
}
