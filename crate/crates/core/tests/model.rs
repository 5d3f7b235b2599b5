mod common;

use common::*;
use peftport::model::{ForwardTrace, HostModel, ModelError, Stack, SubLayer, EOS_ID};
use peftport::peft::{attach, default_init, HostMeta, PeftConfig, PeftError, PeftTechnique};
use peftport::tasks::Vocab;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn same_seed_same_host() {
    let config = tiny_config(16, 2, 2, 4, 30);
    let a = HostModel::new(config.clone(), 3).unwrap();
    let b = HostModel::new(config.clone(), 3).unwrap();
    let c = HostModel::new(config, 4).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_ne!(a.fingerprint(), c.fingerprint());
    let x = [5, 6, 7, 8];
    let y = [0, 9, 10];
    assert_eq!(a.forward(&x, &y).unwrap(), b.forward(&x, &y).unwrap());
}

#[test]
fn fingerprint_sees_one_ulp() {
    let mut m = HostModel::new(tiny_config(16, 1, 1, 2, 20), 1).unwrap();
    let before = m.fingerprint();
    let w = m.param_mut("dec.0.ffn.fc1.weight").unwrap();
    w.data_mut()[7] = f32::from_bits(w.data()[7].to_bits() + 1);
    assert_ne!(before, m.fingerprint());
}

#[test]
fn logits_shape_and_causality() {
    let m = HostModel::new(tiny_config(16, 2, 2, 4, 30), 8).unwrap();
    let x = [3, 4, 5, 6, 7];
    let full = m.forward(&x, &[0, 11, 12, 13]).unwrap();
    assert_eq!(full.shape(), &[4, 30]);
    let other = m.forward(&x, &[0, 11, 12, 20]).unwrap();
    // Positions before the changed token are unaffected.
    assert_eq!(full.data()[..3 * 30], other.data()[..3 * 30]);
    assert_ne!(full.data()[3 * 30..], other.data()[3 * 30..]);
}

#[test]
fn too_long_and_out_of_vocab_inputs_are_rejected() {
    let m = HostModel::new(tiny_config(16, 1, 1, 2, 20), 1).unwrap();
    let long = vec![5u32; 17];
    assert!(matches!(
        m.forward(&long, &[0]),
        Err(ModelError::SequenceTooLong { len: 17, max: 16 })
    ));
    assert!(matches!(
        m.forward(&[25], &[0]),
        Err(ModelError::IndexOutOfVocab { index: 25, .. })
    ));
}

#[test]
fn identity_initialized_modules_leave_outputs_unchanged() {
    let config = tiny_config(16, 2, 2, 4, 30);
    let base = HostModel::new(config.clone(), 2).unwrap();
    let x = [3, 9, 4, 12];
    let y = [0, 7, 8];
    let reference = base.forward(&x, &y).unwrap();
    let meta = HostMeta::of(&config);
    // LoRA starts with up = 0; a zeroed adapter is an exact residual identity.
    let mut lora = base.clone();
    attach(&mut lora, &PeftConfig::desk(PeftTechnique::Lora, 16), 4).unwrap();
    assert_eq!(lora.forward(&x, &y).unwrap(), reference);

    let mut state = default_init(&PeftConfig::desk(PeftTechnique::Adapter, 16), &meta, 4).unwrap();
    for t in state.tensors.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut adapter = base.clone();
    adapter.attach_module(state).unwrap();
    assert_eq!(adapter.forward(&x, &y).unwrap(), reference);

    let mut real = base.clone();
    attach(&mut real, &PeftConfig::desk(PeftTechnique::Adapter, 16), 4).unwrap();
    let out = real.forward(&x, &y).unwrap();
    assert!(max_abs_diff(out.data(), reference.data()) > 0.0);
}

#[test]
fn detach_restores_host_behaviour() {
    let config = tiny_config(16, 2, 2, 4, 30);
    let mut m = HostModel::new(config, 2).unwrap();
    let x = [3, 9, 4];
    let y = [0, 7];
    let reference = m.forward(&x, &y).unwrap();
    let fp = m.fingerprint();
    for technique in PeftTechnique::ALL {
        attach(&mut m, &PeftConfig::desk(technique, 16), 1).unwrap();
        assert!(!m.hooks().is_empty());
        let state = m.detach_module().unwrap();
        assert_eq!(state.technique, technique);
        assert!(m.hooks().is_empty());
        assert_eq!(m.forward(&x, &y).unwrap(), reference);
        assert_eq!(m.fingerprint(), fp);
    }
}

#[test]
fn second_module_is_refused() {
    let mut m = HostModel::new(tiny_config(16, 1, 1, 2, 20), 2).unwrap();
    attach(&mut m, &PeftConfig::desk(PeftTechnique::Lora, 16), 1).unwrap();
    let err = attach(&mut m, &PeftConfig::desk(PeftTechnique::Lora, 16), 2).unwrap_err();
    assert!(matches!(err, PeftError::HookOccupied(_)));
}

#[test]
fn prefix_adds_key_columns_everywhere_but_never_queries() {
    let config = tiny_config(16, 2, 2, 4, 30);
    let mut m = HostModel::new(config, 2).unwrap();
    let x = [3, 9, 4, 5, 6, 7];
    let y = [0, 7, 8];
    let mut plain = ForwardTrace::default();
    m.forward_traced(&x, &y, Some(&mut plain)).unwrap();
    let peft = PeftConfig::desk(PeftTechnique::PrefixTuning, 16);
    let num_tokens = match &peft {
        PeftConfig::PrefixTuning(c) => c.num_tokens,
        _ => unreachable!(),
    };
    attach(&mut m, &peft, 1).unwrap();
    let mut traced = ForwardTrace::default();
    m.forward_traced(&x, &y, Some(&mut traced)).unwrap();
    assert_eq!(plain.attention.len(), traced.attention.len());
    assert_eq!(plain.attention.len(), 3 * 2 * 4);
    for (a, b) in plain.attention.iter().zip(&traced.attention) {
        assert_eq!((a.stack, a.layer, a.sublayer, a.head), (b.stack, b.layer, b.sublayer, b.head));
        assert_eq!(a.queries, b.queries);
        assert_eq!(b.keys, a.keys + num_tokens);
        let expected_keys = match (a.stack, a.sublayer) {
            (Stack::Encoder, _) | (Stack::Decoder, SubLayer::CrossAttn) => x.len(),
            _ => y.len(),
        };
        assert_eq!(a.keys, expected_keys);
    }
}

#[test]
fn greedy_decode_stops_at_eos_and_max_new() {
    let vocab = Vocab::standard();
    let m = hardwired_host(&vocab, "great");
    let great = vocab.id("great").unwrap();
    let prompt = vocab.encode("w01 w02 w03");
    assert_eq!(m.greedy_decode(&prompt, 5).unwrap(), vec![great]);
    assert_eq!(m.greedy_decode(&prompt, 1).unwrap(), vec![great]);
    assert!(m.greedy_decode(&prompt, 0).is_err());
    let logits = m.forward(&prompt, &[0, great]).unwrap();
    let v = vocab.len();
    let row1 = &logits.data()[v..2 * v];
    let best = (0..v).max_by(|&i, &j| row1[i].total_cmp(&row1[j]).then(j.cmp(&i))).unwrap();
    assert_eq!(best as u32, EOS_ID);
}

#[test]
fn greedy_ties_go_to_lowest_id() {
    let vocab = Vocab::standard();
    let mut m = hardwired_host(&vocab, "great");
    // Flatten every logit: all rows tie, so token 0 (PAD) wins forever.
    m.param_mut("lm_head.weight").unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
    let out = m.greedy_decode(&[5, 6], 4).unwrap();
    assert_eq!(out, vec![0, 0, 0, 0]);
}

#[test]
fn bound_host_exposes_every_parameter_once() {
    let config = tiny_config(16, 2, 1, 2, 20);
    let m = HostModel::new(config.clone(), 1).unwrap();
    let mut g = peftport::tensor::Graph::<f32>::new();
    let bound = m.bind(&mut g, true, false).unwrap();
    let names: Vec<&str> = bound.host_leaves().iter().map(|(n, _)| n.as_str()).collect();
    let mut expected: Vec<String> = config.param_shapes().into_iter().map(|(n, _)| n).collect();
    expected.sort();
    assert_eq!(names, expected.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(bound.module().is_none());
}

#[test]
fn random_inputs_give_finite_logits() {
    let config = tiny_config(32, 2, 2, 4, 40);
    let m = HostModel::new(config, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for len in 1..=16 {
        let x = random_tokens(&mut rng, len, 40);
        let y = random_tokens(&mut rng, 17 - len, 40);
        assert!(m.forward(&x, &y).unwrap().is_finite());
    }
}
