mod common;

use common::*;
use peftport::model::HostModel;
use peftport::peft::{attach, default_init, AdapterConfig, HostMeta, PeftConfig, PeftTechnique};
use peftport::porting::{
    check_compat, export_host, export_module, import_host, import_module, import_module_bytes,
    sample_like, sample_like_with, MomentScope, ModuleFile, PortError, PortScenario, Provenance,
};

fn provenance() -> Provenance {
    Provenance {
        pre_steps: 2000,
        dataset_id: "sentiment_a-11".into(),
        seed: 4,
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn stats(x: &[f32]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

#[test]
fn export_import_export_is_byte_identical() {
    let config = tiny_config(32, 2, 2, 4, 40);
    let meta = HostMeta::of(&config);
    for technique in PeftTechnique::ALL {
        let state = perturbed(
            &default_init(&PeftConfig::desk(technique, 32), &meta, 3).unwrap(),
            8,
            0.1,
        );
        let bytes = export_module(&state, &provenance()).unwrap();
        assert!(bytes.starts_with(b"PEFTMOD/1\n"));
        let mut receiving = HostModel::new(config.clone(), 77).unwrap();
        let imported = import_module_bytes(&bytes, &mut receiving, PortScenario::Ported, 0).unwrap();
        assert_eq!(imported, state);
        assert_eq!(receiving.module(), Some(&state));
        let again = export_module(receiving.module().unwrap(), &provenance()).unwrap();
        assert_eq!(bytes, again, "{technique}");
        let file = ModuleFile::from_bytes(&bytes).unwrap();
        assert_eq!(file.header.provenance, Some(provenance()));
        assert_eq!(file.to_bytes().unwrap(), bytes);
    }
}

#[test]
fn ported_module_reproduces_origin_outputs_on_identical_host() {
    let config = tiny_config(32, 2, 2, 4, 40);
    let origin = HostModel::new(config.clone(), 5).unwrap();
    let meta = HostMeta::of(&config);
    let x = [4, 9, 12, 30, 7];
    let y = [0, 5, 6];
    for technique in PeftTechnique::ALL {
        let state = perturbed(
            &default_init(&PeftConfig::desk(technique, 32), &meta, 3).unwrap(),
            9,
            0.1,
        );
        let mut with_module = origin.clone();
        with_module.attach_module(state.clone()).unwrap();
        let expected = with_module.forward(&x, &y).unwrap();

        let host_bytes = export_host(&origin).unwrap();
        let mut receiving = import_host(&host_bytes).unwrap();
        assert_eq!(receiving.fingerprint(), origin.fingerprint());
        let file = ModuleFile::from_bytes(&export_module(&state, &provenance()).unwrap()).unwrap();
        import_module(&file, &mut receiving, PortScenario::Ported, 0).unwrap();
        let got = receiving.forward(&x, &y).unwrap();
        for (a, b) in got.data().iter().zip(expected.data()) {
            assert!((a - b).abs() <= 1e-6, "{technique}: {a} vs {b}");
        }
    }
}

#[test]
fn sampled_tensors_match_moments_but_not_direction() {
    let config = tiny_config(64, 2, 2, 4, 40);
    let meta = HostMeta::of(&config);
    let mut checked = 0;
    for technique in PeftTechnique::ALL {
        let peft = match technique {
            PeftTechnique::Adapter => PeftConfig::Adapter(AdapterConfig::default()),
            other => PeftConfig::desk(other, 64),
        };
        let source = perturbed(&default_init(&peft, &meta, 1).unwrap(), 2, 0.05);
        let sampled = sample_like(&source, 99);
        assert_eq!(sampled.config, source.config);
        for (name, t) in &source.tensors {
            let s = &sampled.tensors[name];
            assert_eq!(s.shape(), t.shape());
            let n = t.numel();
            if n < 1024 {
                continue;
            }
            checked += 1;
            let (m0, v0) = stats(t.data());
            let (m1, v1) = stats(s.data());
            assert!((m1 - m0).abs() <= 4.0 * v0.sqrt() / (n as f64).sqrt(), "{name} mean");
            assert!((v1 - v0).abs() <= 0.15 * v0, "{name} var {v1} vs {v0}");
            assert!(cosine(t.data(), s.data()).abs() < 0.1, "{name} cosine");
        }
    }
    assert!(checked >= 4);
}

#[test]
fn constant_tensors_survive_sampling_unchanged() {
    let meta = HostMeta::of(&tiny_config(16, 1, 1, 2, 20));
    let state = default_init(&PeftConfig::desk(PeftTechnique::Lora, 16), &meta, 1).unwrap();
    let sampled = sample_like(&state, 5);
    for (name, t) in &state.tensors {
        if name.ends_with(".up") {
            assert_eq!(&sampled.tensors[name], t);
        } else {
            assert_ne!(&sampled.tensors[name], t);
        }
    }
    // Pooled moments are shared by every tensor, including the zero ones.
    let pooled = sample_like_with(&state, 5, MomentScope::Pooled);
    let up = &pooled.tensors["enc.0.self_attn.lora.q.up"];
    assert!(up.data().iter().any(|&x| x != 0.0));
    assert_eq!(sample_like(&state, 5), sampled);
}

#[test]
fn from_scratch_matches_default_init() {
    let config = tiny_config(16, 1, 1, 2, 20);
    let meta = HostMeta::of(&config);
    let peft = PeftConfig::desk(PeftTechnique::Compacter, 16);
    let trained = perturbed(&default_init(&peft, &meta, 1).unwrap(), 3, 0.5);
    let file = ModuleFile::from_bytes(&export_module(&trained, &provenance()).unwrap()).unwrap();
    let mut receiving = HostModel::new(config, 2).unwrap();
    let state = import_module(&file, &mut receiving, PortScenario::FromScratch, 42).unwrap();
    assert_eq!(state, default_init(&peft, &meta, 42).unwrap());
}

#[test]
fn incompatible_host_lists_every_violation() {
    let meta = HostMeta::of(&tiny_config(16, 1, 1, 2, 20));
    let state = default_init(&PeftConfig::desk(PeftTechnique::Adapter, 16), &meta, 1).unwrap();
    let file = ModuleFile::from_bytes(&export_module(&state, &provenance()).unwrap()).unwrap();
    let other = tiny_config(32, 1, 2, 4, 20);
    let violations = check_compat(&meta, &other);
    let fields: Vec<&str> = violations.iter().map(|v| v.field.as_str()).collect();
    assert_eq!(fields, ["hidden_dim", "num_dec_layers", "num_heads"]);
    let mut receiving = HostModel::new(other, 1).unwrap();
    match import_module(&file, &mut receiving, PortScenario::Ported, 0) {
        Err(PortError::IncompatibleHost(v)) => assert_eq!(v, violations),
        other => panic!("expected IncompatibleHost, got {other:?}"),
    }
    assert!(receiving.module().is_none());
}

#[test]
fn damaged_files_are_rejected() {
    let meta = HostMeta::of(&tiny_config(16, 1, 1, 2, 20));
    let state = default_init(&PeftConfig::desk(PeftTechnique::Lora, 16), &meta, 1).unwrap();
    let bytes = export_module(&state, &provenance()).unwrap();
    let corrupt = |b: &[u8]| matches!(ModuleFile::from_bytes(b), Err(PortError::CorruptFile(_)));
    assert!(corrupt(&bytes[..bytes.len() - 3]));
    assert!(corrupt(&bytes[1..]));
    assert!(corrupt(b"PEFTMOD/1\n12\n{}"));
    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0, 0, 0, 0]);
    assert!(corrupt(&extra));
    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(
        ModuleFile::from_bytes(&nan),
        Err(PortError::NonFiniteParameter(_))
    ));
}

#[test]
fn non_finite_modules_are_not_exported() {
    let meta = HostMeta::of(&tiny_config(16, 1, 1, 2, 20));
    let mut state = default_init(&PeftConfig::desk(PeftTechnique::Lora, 16), &meta, 1).unwrap();
    state.tensors.values_mut().next().unwrap().data_mut()[0] = f32::INFINITY;
    assert!(matches!(
        export_module(&state, &provenance()),
        Err(PortError::NonFiniteParameter(_))
    ));
}

#[test]
fn host_and_module_artifacts_are_not_interchangeable() {
    let mut host = HostModel::new(tiny_config(16, 1, 1, 2, 20), 1).unwrap();
    let host_bytes = export_host(&host).unwrap();
    let state = attach(&mut host, &PeftConfig::desk(PeftTechnique::Adapter, 16), 1).unwrap();
    let module_bytes = export_module(&state, &provenance()).unwrap();
    assert!(matches!(
        ModuleFile::from_bytes(&host_bytes).unwrap().module(),
        Err(PortError::WrongArtifact { .. })
    ));
    assert!(matches!(import_host(&module_bytes), Err(PortError::WrongArtifact { .. })));
    // The module is not part of the host checkpoint.
    assert_eq!(export_host(&host).unwrap(), host_bytes);
}

#[test]
fn scenario_names_parse() {
    for s in PortScenario::ALL {
        assert_eq!(s.name().parse::<PortScenario>().unwrap(), s);
    }
}
