use std::collections::BTreeMap;

use peftport::model::{ModelConfig, EOS_ID, PAD_ID};
use peftport::tasks::{
    build_model_pair, gen_lm_corpus, gen_synthetic, is_well_formed, load_tsv, make_dataset_pair,
    noise_overlap, parse_tsv, write_tsv, LmCorpusSpec, ModelPairSpec, SyntheticTaskSpec,
    TaskError, Vocab, VERBALIZERS,
};

fn counts(set: &peftport::tasks::ExampleSet, vocab: &Vocab, words: &[String]) -> Vec<usize> {
    words
        .iter()
        .map(|w| {
            let id = vocab.id(w).unwrap();
            set.examples.iter().filter(|e| e.label == [id]).count()
        })
        .collect()
}

#[test]
fn vocabulary_layout() {
    let v = Vocab::standard();
    assert_eq!(v.id("<pad>"), Some(PAD_ID));
    assert_eq!(v.id("<eos>"), Some(EOS_ID));
    for w in VERBALIZERS {
        assert!(v.id(w).is_some(), "{w}");
    }
    assert_eq!(v.decode(&v.encode("w03 great m01")), "w03 great m01");
    assert_eq!(v.encode("zebra"), vec![2]);
    let config = ModelConfig::desk(v.len());
    assert_eq!(config.vocab_size, v.len());
}

#[test]
fn labels_are_balanced_on_large_samples() {
    let vocab = Vocab::standard();
    let spec = SyntheticTaskSpec::sentiment_a(1);
    let set = gen_synthetic(&spec, &vocab, 10_000).unwrap();
    assert_eq!(set.len(), 10_000);
    for c in counts(&set, &vocab, &spec.verbalizers) {
        assert!((4500..=5500).contains(&c), "{c}");
    }
    let nli = SyntheticTaskSpec::nli(2);
    let set = gen_synthetic(&nli, &vocab, 3000).unwrap();
    for c in counts(&set, &vocab, &nli.verbalizers) {
        assert!((950..=1050).contains(&c), "{c}");
    }
}

#[test]
fn labels_follow_the_marker_majority_rule() {
    let vocab = Vocab::standard();
    for spec in [
        SyntheticTaskSpec::sentiment_a(3),
        SyntheticTaskSpec::sentiment_b(4),
        SyntheticTaskSpec::nli(5),
        SyntheticTaskSpec::topic(6),
    ] {
        let set = gen_synthetic(&spec, &vocab, 500).unwrap();
        assert!(is_well_formed(&set, vocab.len()));
        for ex in &set.examples {
            let class = spec.label_of(&ex.input, &vocab).unwrap();
            assert_eq!(ex.label, vec![vocab.id(&spec.verbalizers[class]).unwrap()]);
            assert!((spec.min_len..=spec.max_len).contains(&ex.input.len()));
        }
    }
}

#[test]
fn ties_go_to_the_lowest_class() {
    let vocab = Vocab::standard();
    let spec = SyntheticTaskSpec::sentiment_a(0);
    assert_eq!(spec.label_of(&vocab.encode("m10 m00 w01"), &vocab).unwrap(), 0);
    assert_eq!(spec.label_of(&vocab.encode("m10 m11 m00"), &vocab).unwrap(), 1);
    assert_eq!(spec.label_of(&vocab.encode("w01 w02"), &vocab).unwrap(), 0);
}

#[test]
fn single_class_at_full_density_labels_everything_that_class() {
    let vocab = Vocab::standard();
    let spec = SyntheticTaskSpec {
        num_classes: 1,
        markers: vec![vec!["m10".into(), "m11".into()]],
        verbalizers: vec!["terrible".into()],
        marker_density: 1.0,
        ..SyntheticTaskSpec::sentiment_a(8)
    };
    let set = gen_synthetic(&spec, &vocab, 50).unwrap();
    let terrible = vocab.id("terrible").unwrap();
    assert!(set.examples.iter().all(|e| e.label == [terrible]));
}

#[test]
fn degenerate_specs_are_refused() {
    let vocab = Vocab::standard();
    let empty = SyntheticTaskSpec {
        markers: vec![vec![], vec!["m10".into()]],
        ..SyntheticTaskSpec::sentiment_a(0)
    };
    assert!(matches!(gen_synthetic(&empty, &vocab, 10), Err(TaskError::DegenerateSpec(_))));
    let overlapping = SyntheticTaskSpec {
        markers: vec![vec!["m00".into()], vec!["m00".into()]],
        ..SyntheticTaskSpec::sentiment_a(0)
    };
    assert!(gen_synthetic(&overlapping, &vocab, 10).is_err());
    assert!(gen_synthetic(&SyntheticTaskSpec::sentiment_a(0), &vocab, 0).is_err());
}

#[test]
fn generation_is_seed_deterministic() {
    let vocab = Vocab::standard();
    let a = gen_synthetic(&SyntheticTaskSpec::sentiment_a(7), &vocab, 300).unwrap();
    let b = gen_synthetic(&SyntheticTaskSpec::sentiment_a(7), &vocab, 300).unwrap();
    let c = gen_synthetic(&SyntheticTaskSpec::sentiment_a(8), &vocab, 300).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.examples, c.examples);
}

#[test]
fn dataset_pair_shares_labels_but_not_noise() {
    let vocab = Vocab::standard();
    let (a, b) = (SyntheticTaskSpec::sentiment_a(1), SyntheticTaskSpec::sentiment_b(2));
    assert_eq!(a.verbalizers, b.verbalizers);
    assert!(noise_overlap(&a, &b) < 0.5);
    assert_eq!(noise_overlap(&a, &a), 1.0);
    let (da, db) = make_dataset_pair(&a, &b, &vocab, 200).unwrap();
    assert_eq!((da.len(), db.len()), (200, 200));
    let mean_len = |s: &peftport::tasks::ExampleSet| {
        s.examples.iter().map(|e| e.input.len()).sum::<usize>() as f64 / s.len() as f64
    };
    assert!(mean_len(&db) > mean_len(&da));
    assert!(matches!(
        make_dataset_pair(&a, &SyntheticTaskSpec::nli(3), &vocab, 10),
        Err(TaskError::IncompatibleLabelSpaces(_))
    ));
    assert!(matches!(
        make_dataset_pair(&a, &SyntheticTaskSpec::polarity(3), &vocab, 10),
        Err(TaskError::IncompatibleLabelSpaces(_))
    ));
}

#[test]
fn lm_corpus_never_contains_verbalizers() {
    let vocab = Vocab::standard();
    let corpus = gen_lm_corpus(&LmCorpusSpec::default(), &vocab).unwrap();
    assert_eq!(corpus.len(), 2000);
    let verbalizer_ids: Vec<u32> = VERBALIZERS.iter().map(|w| vocab.id(w).unwrap()).collect();
    for ex in &corpus.examples {
        assert_eq!(ex.label.len(), 3);
        assert!(ex.input.iter().chain(&ex.label).all(|t| *t > 2 && !verbalizer_ids.contains(t)));
    }
}

#[test]
fn tsv_round_trip_and_errors() {
    let vocab = Vocab::standard();
    let dir = tempfile::tempdir().unwrap();
    let set = gen_synthetic(&SyntheticTaskSpec::sentiment_a(4), &vocab, 50).unwrap();
    let path = dir.path().join("sent.tsv");
    write_tsv(&set, &vocab, &path).unwrap();
    let back = load_tsv(&path, &vocab, &BTreeMap::new()).unwrap();
    assert_eq!(back.examples, set.examples);
    assert_eq!(back.id, "sent");

    let mut map = BTreeMap::new();
    map.insert("positive".to_string(), "great".to_string());
    map.insert("negative".to_string(), "terrible".to_string());
    let two = parse_tsv("w01 m00 w02\tpositive\nw03 m10\tnegative\n", "fx", &vocab, &map).unwrap();
    assert_eq!(two.len(), 2);
    assert_eq!(two.examples[0].label, vec![vocab.id("great").unwrap()]);
    assert_eq!(two.examples[1].label, vec![vocab.id("terrible").unwrap()]);
    assert_eq!(
        parse_tsv("never seen words\tgreat\n", "fx", &vocab, &map).unwrap().examples[0].input,
        vec![2, 2, 2]
    );
    assert!(matches!(
        parse_tsv("w01\tgreat\nw01\tx\ty\tz\n", "fx", &vocab, &map),
        Err(TaskError::MalformedRow { line: 2 })
    ));
    assert!(matches!(
        parse_tsv("w01\tmeh\n", "fx", &vocab, &map),
        Err(TaskError::UnknownLabel { line: 1, .. })
    ));
}

#[test]
fn small_model_pair_is_a_training_history() {
    let spec = ModelPairSpec {
        raw_steps: 20,
        instruct_steps: 10,
        polarity_examples: 40,
        topic_examples: 20,
        mixture_lm_examples: 10,
        lm: LmCorpusSpec {
            num_examples: 100,
            seed: 3,
            ..LmCorpusSpec::default()
        },
        ..ModelPairSpec::desk(3)
    };
    let pair = build_model_pair(&spec).unwrap();
    assert_eq!(pair.raw.config(), pair.instruct.config());
    assert_ne!(pair.raw.fingerprint(), pair.instruct.fingerprint());
    assert!(pair.report.raw_final_loss.is_finite());
    assert!(pair.report.instruct_final_loss.is_finite());
    assert!((0.0..=1.0).contains(&pair.report.instruct_heldout_accuracy));
    let again = build_model_pair(&spec).unwrap();
    assert_eq!(again.raw.fingerprint(), pair.raw.fingerprint());
    assert_eq!(again.instruct.fingerprint(), pair.instruct.fingerprint());

    let bad = ModelPairSpec {
        config: ModelConfig::desk(10),
        ..spec
    };
    assert!(matches!(build_model_pair(&bad), Err(TaskError::DegenerateSpec(_))));
}
