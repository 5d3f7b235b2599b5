#![allow(dead_code)]

use std::collections::BTreeMap;

use peftport::model::{HostModel, ModelConfig, EOS_ID};
use peftport::peft::PeftModuleState;
use peftport::tasks::Vocab;
use peftport::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(d: usize, enc: usize, dec: usize, heads: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        num_enc_layers: enc,
        num_dec_layers: dec,
        hidden_dim: d,
        num_heads: heads,
        ffn_dim: 2 * d,
        vocab_size: vocab,
        max_seq_len: 16,
    }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(3..vocab as u32)).collect()
}

/// ‖a − b‖ / max(‖b‖, 1e-12)
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Teacher-forced loss of `model` (module attached) run in f64.
pub fn loss_f64(model: &HostModel, input: &[u32], target: &[u32]) -> f64 {
    let mut g = Graph::<f64>::new();
    let bound = model.bind(&mut g, false, false).unwrap();
    let l = model.sequence_loss(&mut g, &bound, input, target).unwrap();
    g.value(l).data()[0]
}

/// Autodiff gradients (f32) of the loss w.r.t. every module tensor.
pub fn module_grads(
    host: &HostModel,
    module: &PeftModuleState,
    input: &[u32],
    target: &[u32],
) -> BTreeMap<String, Vec<f64>> {
    let mut m = host.clone();
    m.detach_module();
    m.attach_module(module.clone()).unwrap();
    let mut g = Graph::<f32>::new();
    let bound = m.bind(&mut g, false, true).unwrap();
    let l = m.sequence_loss(&mut g, &bound, input, target).unwrap();
    g.backward(l).unwrap();
    bound
        .module()
        .unwrap()
        .leaves()
        .iter()
        .map(|(name, v)| {
            let grad = g.grad(*v).expect("module leaf has a gradient");
            (name.clone(), grad.iter().map(|&x| x as f64).collect())
        })
        .collect()
}

/// Central finite differences over every element of every module tensor.
/// Each element is perturbed in f32 by ±h; the loss is evaluated in f64
/// and divided by the perturbation actually realized.
pub fn module_fd_grads(
    host: &HostModel,
    module: &PeftModuleState,
    input: &[u32],
    target: &[u32],
    h: f32,
) -> BTreeMap<String, Vec<f64>> {
    let mut base = host.clone();
    base.detach_module();
    base.attach_module(module.clone()).unwrap();
    let mut out = BTreeMap::new();
    for (name, t) in &module.tensors {
        let grads = (0..t.numel())
            .into_par_iter()
            .map_init(
                || base.clone(),
                |m, i| {
                    let x = t.data()[i];
                    let (xp, xm) = (x + h, x - h);
                    let mut at = |v: f32| {
                        m.module_mut().unwrap().tensors.get_mut(name).unwrap().data_mut()[i] = v;
                        loss_f64(m, input, target)
                    };
                    let (lp, lm) = (at(xp), at(xm));
                    at(x);
                    (lp - lm) / (xp as f64 - xm as f64)
                },
            )
            .collect();
        out.insert(name.clone(), grads);
    }
    out
}

/// Every module tensor nudged away from its (possibly degenerate) init so
/// that all gradient paths are exercised.
pub fn perturbed(module: &PeftModuleState, seed: u64, scale: f32) -> PeftModuleState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = module.clone();
    for t in m.tensors.values_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-scale..scale);
        }
    }
    m
}

/// A host whose decoder ignores its inputs: it emits `first` at position 0
/// and EOS at position 1.
pub fn hardwired_host(vocab: &Vocab, first: &str) -> HostModel {
    let d = 8;
    let config = ModelConfig {
        num_enc_layers: 1,
        num_dec_layers: 1,
        hidden_dim: d,
        num_heads: 2,
        ffn_dim: 8,
        vocab_size: vocab.len(),
        max_seq_len: 24,
    };
    let mut params = BTreeMap::new();
    for (name, shape) in config.param_shapes() {
        let fill = if name.ends_with(".gain") { 1.0 } else { 0.0 };
        params.insert(name, Tensor::full(&shape, fill));
    }
    let normalized = |i: usize| -> Vec<f32> {
        let mean = 1.0 / d as f32;
        let var = mean - mean * mean;
        (0..d)
            .map(|j| (f32::from(u8::from(j == i)) - mean) / var.sqrt())
            .collect()
    };
    let pos = params.get_mut("embed.dec_pos").unwrap();
    pos.data_mut()[0] = 1.0;
    pos.data_mut()[d + 1] = 1.0;
    let target = vocab.id(first).unwrap() as usize;
    let head = params.get_mut("lm_head.weight").unwrap();
    let v = vocab.len();
    for (j, (a, b)) in normalized(0).into_iter().zip(normalized(1)).enumerate() {
        head.data_mut()[j * v + target] = a;
        head.data_mut()[j * v + EOS_ID as usize] = b;
    }
    HostModel::from_params(config, params).unwrap()
}
