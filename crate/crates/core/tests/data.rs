use hrgnn_core::data::{generate, load_dataset, probe_accuracy, GeneratorSpec, Split, SplitManifest};

fn spec() -> GeneratorSpec {
    GeneratorSpec {
        scale: 0.2,
        ..GeneratorSpec::default()
    }
}

#[test]
fn same_seed_same_corpus() {
    let a = generate(&spec()).unwrap();
    let b = generate(&spec()).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);
    let c = generate(&GeneratorSpec { seed: 8, ..spec() }).unwrap();
    assert_ne!(a.train, c.train);
}

#[test]
fn corpus_statistics_follow_spec() {
    let s = spec();
    let corpus = generate(&s).unwrap();
    let all: Vec<_> = corpus.train.iter().chain(&corpus.validation).chain(&corpus.test).collect();
    let counts = s.split_counts();
    assert_eq!(
        (corpus.train.len(), corpus.validation.len(), corpus.test.len()),
        (counts.train, counts.validation, counts.test)
    );
    let n = all.len() as f64;
    let positive = all.iter().filter(|r| r.label == 1).count() as f64 / n;
    assert!((positive - s.positive_rate).abs() <= 0.02, "positive rate {positive}");
    let sessions: Vec<_> = all.iter().flat_map(|r| &r.sessions).collect();
    let per_interview = sessions.len() as f64 / n;
    assert!((per_interview / s.sessions_mean - 1.0).abs() <= 0.05, "sessions {per_interview}");
    let tokens = |side: &Vec<Vec<String>>| side.iter().map(Vec::len).sum::<usize>() as f64;
    let q = sessions.iter().map(|x| tokens(&x.question)).sum::<f64>() / sessions.len() as f64;
    let a = sessions.iter().map(|x| tokens(&x.answer)).sum::<f64>() / sessions.len() as f64;
    assert!((q / s.question_tokens_mean - 1.0).abs() <= 0.1, "question tokens {q}");
    assert!((a / s.answer_tokens_mean - 1.0).abs() <= 0.1, "answer tokens {a}");
    assert!(all.iter().all(|r| r.validate().is_ok()));
}

#[test]
fn probe_separates_default_corpus() {
    let corpus = generate(&spec()).unwrap();
    let acc = probe_accuracy(&corpus, spec().topics);
    assert!(acc >= 0.95, "probe accuracy {acc}");
}

#[test]
fn written_corpus_reads_back() {
    let corpus = generate(&GeneratorSpec { scale: 0.02, ..spec() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = SplitManifest::load(&corpus.write(dir.path()).unwrap()).unwrap();
    for split in [Split::Train, Split::Validation, Split::Test] {
        let loaded = load_dataset(manifest.path(split)).unwrap();
        assert!(loaded.quarantine.is_empty());
        assert_eq!(loaded.records, corpus.split(split));
    }
}

#[test]
fn invalid_spec_is_rejected() {
    assert!(generate(&GeneratorSpec { topics: 1, ..spec() }).is_err());
    assert!(generate(&GeneratorSpec { marker_rate: 1.5, ..spec() }).is_err());
}
