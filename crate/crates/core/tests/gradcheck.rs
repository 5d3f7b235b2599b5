mod common;

use common::*;
use peftport::model::HostModel;
use peftport::peft::{default_init, HostMeta, PeftConfig, PeftTechnique, PrefixConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check(technique: PeftTechnique) {
    let config = tiny_config(16, 1, 1, 2, 24);
    let host = HostModel::new(config.clone(), 5).unwrap();
    let meta = HostMeta::of(&config);
    // A narrower prefix MLP keeps the element-by-element sweep affordable.
    let peft = match technique {
        PeftTechnique::PrefixTuning => PeftConfig::PrefixTuning(PrefixConfig {
            token_embed_dim: 32,
            mid_dim: 32,
            ..PrefixConfig::for_hidden(16)
        }),
        other => PeftConfig::desk(other, 16),
    };
    let module = perturbed(&default_init(&peft, &meta, 9).unwrap(), 17, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..5 {
        let input = random_tokens(&mut rng, 3 + trial, 24);
        let target = random_tokens(&mut rng, 1 + trial % 3, 24);
        let analytic = module_grads(&host, &module, &input, &target);
        let numeric = module_fd_grads(&host, &module, &input, &target, 1e-3);
        assert_eq!(analytic.len(), module.tensors.len());
        for (name, fd) in &numeric {
            let err = rel_err(&analytic[name], fd);
            assert!(err < 1e-3, "{technique} {name} trial {trial}: rel err {err:e}");
        }
    }
}

#[test]
fn adapter_gradients_match_finite_differences() {
    check(PeftTechnique::Adapter);
}

#[test]
fn compacter_gradients_match_finite_differences() {
    check(PeftTechnique::Compacter);
}

#[test]
fn lora_gradients_match_finite_differences() {
    check(PeftTechnique::Lora);
}

#[test]
fn prefix_gradients_match_finite_differences() {
    check(PeftTechnique::PrefixTuning);
}
