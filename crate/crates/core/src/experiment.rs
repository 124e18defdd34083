//! Data preparation, single runs and multi-seed runs driven by a
//! [`RunConfig`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSection, RunConfig};
use crate::data::{
    build_vocabulary, encode_dataset, generate, load_dataset, EncodedInterview, EncodedSession, InterviewRecord,
    Quarantined, Split, SplitManifest,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, AggregateReport, MetricsReport, SeedOutcome};
use crate::model::{Hrgnn, ModelConfig};
use crate::text::{EmbeddingTable, StopWords, Vocabulary};
use crate::train::{train, EpochLog};

/// Raw interviews of the three splits.
#[derive(Clone, Debug)]
pub struct RawSplits {
    pub train: Vec<InterviewRecord>,
    pub validation: Vec<InterviewRecord>,
    pub test: Vec<InterviewRecord>,
    pub quarantine: Vec<Quarantined>,
}

impl RawSplits {
    pub fn split(&self, split: Split) -> &[InterviewRecord] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

/// Reads the manifest's files, or generates a corpus when there is none.
pub fn load_splits(data: &DataSection) -> Result<RawSplits> {
    match &data.manifest {
        Some(path) => {
            let manifest = SplitManifest::load(path)?;
            let mut quarantine = Vec::new();
            let mut read = |split| -> Result<Vec<InterviewRecord>> {
                let loaded = load_dataset(manifest.path(split))?;
                quarantine.extend(loaded.quarantine);
                Ok(loaded.records)
            };
            Ok(RawSplits {
                train: read(Split::Train)?,
                validation: read(Split::Validation)?,
                test: read(Split::Test)?,
                quarantine,
            })
        }
        None => {
            let c = generate(&data.generator)?;
            Ok(RawSplits {
                train: c.train,
                validation: c.validation,
                test: c.test,
                quarantine: Vec::new(),
            })
        }
    }
}

pub fn stop_words(data: &DataSection) -> Result<StopWords> {
    match &data.stop_words {
        Some(p) => StopWords::load(p),
        None => Ok(StopWords::default()),
    }
}

/// Encoded splits and the vocabulary built from the training split.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub stop: StopWords,
    pub train: Vec<EncodedInterview>,
    pub validation: Vec<EncodedInterview>,
    pub test: Vec<EncodedInterview>,
    pub quarantine: Vec<Quarantined>,
}

pub fn prepare(data: &DataSection) -> Result<PreparedData> {
    let raw = load_splits(data)?;
    let stop = stop_words(data)?;
    let vocab = build_vocabulary(&raw.train, &stop, &data.text)?;
    let mut quarantine = raw.quarantine;
    let mut encode = |records: &[InterviewRecord]| -> Result<Vec<EncodedInterview>> {
        let (out, q) = encode_dataset(records, &vocab, &stop, &data.text)?;
        quarantine.extend(q);
        Ok(out)
    };
    let (train, validation, test) = (encode(&raw.train)?, encode(&raw.validation)?, encode(&raw.test)?);
    Ok(PreparedData {
        vocab,
        stop,
        train,
        validation,
        test,
        quarantine,
    })
}

/// Fresh model for `seed`, with pretrained vectors when configured.
pub fn build_model(run: &RunConfig, vocab: &Vocabulary, seed: u64) -> Result<Hrgnn> {
    let config = run.model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut table = match &run.data.embeddings {
        Some(path) => EmbeddingTable::load(path, vocab, config.embed_dim, &mut rng)?.0,
        None => EmbeddingTable::random(vocab.len(), config.embed_dim, &mut rng),
    };
    table.trainable = !run.data.freeze_embeddings;
    Hrgnn::with_embeddings(config, table, seed)
}

/// Training log and test metrics of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainReport {
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
    pub validation: MetricsReport,
    pub test: MetricsReport,
}

pub fn metrics_for(model: &Hrgnn, data: &[EncodedInterview], seed: Option<u64>) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Data("no interviews to evaluate".into()));
    }
    let probs = model.predict(data)?;
    let gold: Vec<u8> = data.iter().map(|iv| iv.label as u8).collect();
    let mut report = evaluate(&probs, &gold)?;
    report.seed = seed;
    Ok(report)
}

/// Trains with `seed` and evaluates the best-validation parameters.
pub fn run_seed(run: &RunConfig, data: &PreparedData, seed: u64) -> Result<(Checkpoint, TrainReport)> {
    let model = build_model(run, &data.vocab, seed)?;
    let outcome = train(model, &data.train, &data.validation, &run.training.train_config(seed))?;
    let report = TrainReport {
        seed,
        best_epoch: outcome.best_epoch,
        validation: metrics_for(&outcome.model, &data.validation, Some(seed))?,
        test: metrics_for(&outcome.model, &data.test, Some(seed))?,
        epochs: outcome.log,
    };
    let checkpoint = Checkpoint {
        model: outcome.model,
        vocab: data.vocab.clone(),
        text: run.data.text.clone(),
    };
    Ok((checkpoint, report))
}

/// One independent run per seed; failed runs are kept with their error.
pub fn multi_seed_run(run: &RunConfig, data: &PreparedData, seeds: &[u64]) -> Result<AggregateReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let runs = seeds
        .iter()
        .map(|&seed| match run_seed(run, data, seed) {
            Ok((_, report)) => {
                log::info!("seed {seed}: test accuracy {:.4}", report.test.accuracy);
                SeedOutcome {
                    seed,
                    report: Some(report.test),
                    error: None,
                }
            }
            Err(e) => {
                log::error!("seed {seed} aborted: {e}");
                SeedOutcome {
                    seed,
                    report: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    Ok(AggregateReport::from_runs(runs))
}

/// Model dimensions of the default gradient check.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        gru_hidden: 4,
        node_dim: 8,
        heads: 2,
        ..ModelConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    pub parameters: usize,
    pub scalars: usize,
    pub eps: f64,
}

/// Central-difference check of every parameter on one interview with one
/// session of two question and two answer sentences, dropout off.
pub fn gradcheck_toy(config: ModelConfig, seed: u64, eps: f64) -> Result<GradcheckReport> {
    const VOCAB: usize = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentence = |len: usize| -> Vec<usize> { (0..len).map(|_| rng.gen_range(2..VOCAB)).collect() };
    let interview = EncodedInterview {
        id: "gradcheck".into(),
        label: 1,
        sessions: vec![EncodedSession {
            questions: vec![sentence(3), sentence(4)],
            answers: vec![sentence(4), sentence(3)],
        }],
    };
    let mut model = Hrgnn::new(config, VOCAB, seed)?;
    let max_relative_error = model.gradcheck(std::slice::from_ref(&interview), eps)?;
    Ok(GradcheckReport {
        max_relative_error,
        parameters: model.store.len(),
        scalars: model.store.num_scalars(),
        eps,
    })
}
