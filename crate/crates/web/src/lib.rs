//! Browser bindings for a few inspectable pieces of peftport.

use peftport::model::ModelConfig;
use peftport::peft::{compacter_weight, default_init, HostMeta, PeftConfig, PeftTechnique};
use peftport::porting::sample_like;
use peftport::tensor::{Graph, Tensor};
use peftport::train::{lr_at, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn msg(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Learning rate at every step of a linear warmup / linear decay schedule.
#[wasm_bindgen]
pub fn lr_schedule(total_steps: usize, warmup_fraction: f64, peak: f64) -> Result<Vec<f64>, JsValue> {
    schedule(total_steps, warmup_fraction, peak).map_err(|e| JsValue::from_str(&e))
}

/// Materialized Compacter weight (row-major, `n*p` by `n*q`) from random
/// rule matrices and factors.
#[wasm_bindgen]
pub fn compacter_heatmap(n: usize, p: usize, q: usize, seed: u64) -> Result<Vec<f32>, JsValue> {
    heatmap(n, p, q, seed).map_err(|e| JsValue::from_str(&e))
}

/// Histograms of one adapter tensor before and after moment-matched
/// resampling, plus the cosine similarity between the two, as JSON.
#[wasm_bindgen]
pub fn sampled_vs_ported(hidden_dim: usize, seed: u64, bins: usize) -> Result<String, JsValue> {
    histograms(hidden_dim, seed, bins).map_err(|e| JsValue::from_str(&e))
}

pub fn schedule(total_steps: usize, warmup_fraction: f64, peak: f64) -> Result<Vec<f64>, String> {
    let cfg = TrainConfig {
        learning_rate: peak,
        warmup_fraction,
        ..TrainConfig::pre_porting(total_steps, 0)
    };
    (0..=total_steps).map(|s| lr_at(s, &cfg).map_err(msg)).collect()
}

pub fn heatmap(n: usize, p: usize, q: usize, seed: u64) -> Result<Vec<f32>, String> {
    if n == 0 || p == 0 || q == 0 {
        return Err(msg("n, p and q must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |shape: [usize; 3]| {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
    };
    let rules = random([n, n, n]).map_err(msg)?;
    let factors = random([n, p, q]).map_err(msg)?;
    let mut g = Graph::<f32>::new();
    let (r, f) = (g.constant(rules), g.constant(factors));
    let w = compacter_weight(&mut g, r, f).map_err(msg)?;
    Ok(g.value(w).data().to_vec())
}

fn histogram(values: &[f32], lo: f32, hi: f32, bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    let width = (hi - lo) / bins as f32;
    for &v in values {
        let b = ((v - lo) / width).floor().clamp(0.0, (bins - 1) as f32) as usize;
        h[b] += 1;
    }
    h
}

fn moments(x: &[f32]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// The source tensor is a skewed, bimodal stand-in for trained weights so
/// that matching moments visibly does not match shape.
pub fn histograms(hidden_dim: usize, seed: u64, bins: usize) -> Result<String, String> {
    if bins == 0 {
        return Err(msg("bins must be positive"));
    }
    let config = ModelConfig {
        hidden_dim,
        ffn_dim: 2 * hidden_dim,
        ..ModelConfig::desk(64)
    };
    config.validate().map_err(msg)?;
    let meta = HostMeta::of(&config);
    let peft = PeftConfig::desk(PeftTechnique::Adapter, hidden_dim);
    let mut ported = default_init(&peft, &meta, seed).map_err(msg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    for t in ported.tensors.values_mut() {
        for x in t.data_mut() {
            let mode = if rng.gen_bool(0.7) { 0.04 } else { -0.08 };
            *x += mode;
        }
    }
    let sampled = sample_like(&ported, seed.wrapping_add(1));
    let (name, source) = ported
        .tensors
        .iter()
        .max_by_key(|(_, t)| t.numel())
        .ok_or_else(|| msg("module has no tensors"))?;
    let (a, b) = (source.data(), sampled.tensors[name].data());
    let lo = a.iter().chain(b).fold(f32::INFINITY, |m, &v| m.min(v));
    let hi = a.iter().chain(b).fold(f32::NEG_INFINITY, |m, &v| m.max(v)) + 1e-6;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let norm = |x: &[f32]| x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let (pm, pv) = moments(a);
    let (sm, sv) = moments(b);
    Ok(json!({
        "tensor": name,
        "elements": a.len(),
        "lo": lo,
        "hi": hi,
        "ported": histogram(a, lo, hi, bins),
        "sampled": histogram(b, lo, hi, bins),
        "ported_mean": pm,
        "ported_var": pv,
        "sampled_mean": sm,
        "sampled_var": sv,
        "cosine": dot / (norm(a) * norm(b)),
    })
    .to_string())
}
