//! Interview interchange format, dataset loading, encoding to token ids,
//! and the synthetic corpus generator.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{filter_tokens, truncate, StopWords, Vocabulary};

/// Fraction of malformed lines above which a file is rejected outright.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRecord {
    pub question: Vec<Vec<String>>,
    pub answer: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterviewRecord {
    pub id: String,
    pub label: u8,
    pub sessions: Vec<SessionRecord>,
}

impl InterviewRecord {
    /// Structural checks that do not depend on stop-word filtering.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.label > 1 {
            return Err(format!("label {} is not 0 or 1", self.label));
        }
        if self.sessions.is_empty() {
            return Err("no sessions".into());
        }
        for (k, s) in self.sessions.iter().enumerate() {
            let nonempty = |side: &[Vec<String>]| side.iter().any(|t| !t.is_empty());
            if !nonempty(&s.question) {
                return Err(format!("session {k} has no question sentence"));
            }
            if !nonempty(&s.answer) {
                return Err(format!("session {k} has no answer sentence"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quarantined {
    /// 1-based line number in the source file.
    pub line: usize,
    pub id: Option<String>,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDataset {
    pub records: Vec<InterviewRecord>,
    pub quarantine: Vec<Quarantined>,
}

pub fn parse_dataset(text: &str) -> Result<LoadedDataset> {
    let mut records = Vec::new();
    let mut quarantine = Vec::new();
    let mut lines = 0usize;
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match serde_json::from_str::<InterviewRecord>(line) {
            Ok(rec) => match rec.validate() {
                Ok(()) => records.push(rec),
                Err(reason) => quarantine.push(Quarantined {
                    line: k + 1,
                    id: Some(rec.id),
                    reason,
                }),
            },
            Err(e) => quarantine.push(Quarantined {
                line: k + 1,
                id: None,
                reason: e.to_string(),
            }),
        }
    }
    if lines == 0 {
        return Err(Error::Data("dataset is empty".into()));
    }
    if quarantine.len() as f64 > MAX_MALFORMED_FRACTION * lines as f64 {
        return Err(Error::Data(format!(
            "{} of {lines} lines malformed (first at line {}: {})",
            quarantine.len(),
            quarantine[0].line,
            quarantine[0].reason
        )));
    }
    for q in &quarantine {
        log::warn!("quarantined line {}: {}", q.line, q.reason);
    }
    Ok(LoadedDataset { records, quarantine })
}

pub fn load_dataset(path: &Path) -> Result<LoadedDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn to_jsonl(records: &[InterviewRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(path: &Path, records: &[InterviewRecord]) -> Result<()> {
    write_file(path, to_jsonl(records).as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Dataset files per split. Relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub train: PathBuf,
    pub validation: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "validation" | "valid" | "dev" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

impl SplitManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut m.train, &mut m.validation, &mut m.test] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(m)
    }

    pub fn path(&self, split: Split) -> &Path {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

/// Preprocessing limits applied when turning records into token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub vocab_max: usize,
    pub question_max_tokens: usize,
    pub answer_max_tokens: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            vocab_max: 21_128,
            question_max_tokens: 50,
            answer_max_tokens: 295,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSession {
    pub questions: Vec<Vec<usize>>,
    pub answers: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInterview {
    pub id: String,
    pub label: usize,
    pub sessions: Vec<EncodedSession>,
}

fn clean_side(side: &[Vec<String>], stop: &StopWords, cap: usize) -> Vec<Vec<String>> {
    let filtered: Vec<Vec<String>> = side
        .iter()
        .map(|s| filter_tokens(s, stop))
        .filter(|s| !s.is_empty())
        .collect();
    truncate(&filtered, cap)
}

/// Filtered, truncated sentences of every usable session.
pub fn clean_record(record: &InterviewRecord, stop: &StopWords, cfg: &TextConfig) -> Vec<SessionRecord> {
    record
        .sessions
        .iter()
        .map(|s| SessionRecord {
            question: clean_side(&s.question, stop, cfg.question_max_tokens),
            answer: clean_side(&s.answer, stop, cfg.answer_max_tokens),
        })
        .filter(|s| !s.question.is_empty() && !s.answer.is_empty())
        .collect()
}

/// Vocabulary over the filtered training records.
pub fn build_vocabulary(records: &[InterviewRecord], stop: &StopWords, cfg: &TextConfig) -> Result<Vocabulary> {
    let mut corpus = Vec::new();
    for r in records {
        for s in clean_record(r, stop, cfg) {
            for sent in s.question.iter().chain(&s.answer) {
                corpus.extend(sent.iter().cloned());
            }
        }
    }
    Vocabulary::build(corpus, cfg.vocab_max)
}

pub fn encode_record(
    record: &InterviewRecord,
    vocab: &Vocabulary,
    stop: &StopWords,
    cfg: &TextConfig,
) -> Result<EncodedInterview> {
    let cleaned = clean_record(record, stop, cfg);
    if cleaned.len() < record.sessions.len() {
        log::warn!(
            "interview {}: {} session(s) empty after filtering",
            record.id,
            record.sessions.len() - cleaned.len()
        );
    }
    if cleaned.is_empty() {
        return Err(Error::InterviewEmpty(record.id.clone()));
    }
    let ids = |side: &[Vec<String>]| -> Vec<Vec<usize>> {
        side.iter()
            .map(|s| s.iter().map(|t| vocab.encode(t)).collect())
            .collect()
    };
    Ok(EncodedInterview {
        id: record.id.clone(),
        label: record.label as usize,
        sessions: cleaned
            .iter()
            .map(|s| EncodedSession {
                questions: ids(&s.question),
                answers: ids(&s.answer),
            })
            .collect(),
    })
}

/// Encodes every record; interviews left without a usable session are
/// quarantined by id.
pub fn encode_dataset(
    records: &[InterviewRecord],
    vocab: &Vocabulary,
    stop: &StopWords,
    cfg: &TextConfig,
) -> Result<(Vec<EncodedInterview>, Vec<Quarantined>)> {
    let mut out = Vec::with_capacity(records.len());
    let mut quarantine = Vec::new();
    for (k, r) in records.iter().enumerate() {
        match encode_record(r, vocab, stop, cfg) {
            Ok(e) => out.push(e),
            Err(Error::InterviewEmpty(id)) => {
                log::warn!("interview {id} has no usable session after filtering");
                quarantine.push(Quarantined {
                    line: k + 1,
                    id: Some(id),
                    reason: "no usable session after filtering".into(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok((out, quarantine))
}

/// Interview counts per split before scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 2313,
            validation: 289,
            test: 290,
        }
    }
}

/// Number of topic words and of marker words per topic.
const TOPIC_WORDS: usize = 4;
const MARKER_WORDS: usize = 4;
const DISTRACTOR_WORDS: usize = 8;
const MIN_FILLERS: usize = 50;

/// Parameters of the synthetic corpus.
///
/// Every session draws a topic; its question sentences mention that topic's
/// words. In a positive interview a session's answer carries competence
/// markers of its own question topic with probability `signal_strength`;
/// every other answer carries distractors. A distractor answer uses markers
/// of a different topic with probability `cross_topic_rate` and generic
/// distractor words otherwise, so off-topic answers are told apart from
/// competent ones only by pairing them with their question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub splits: SplitSizes,
    pub scale: f64,
    pub sessions_mean: f64,
    pub question_tokens_mean: f64,
    pub answer_tokens_mean: f64,
    pub vocab_size: usize,
    pub topics: usize,
    pub positive_rate: f64,
    pub signal_strength: f64,
    pub cross_topic_rate: f64,
    /// Probability that a question token is a topic word.
    pub topic_rate: f64,
    /// Probability that an answer token is a marker word.
    pub marker_rate: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            splits: SplitSizes::default(),
            scale: 0.2,
            sessions_mean: 5.45,
            question_tokens_mean: 64.0,
            answer_tokens_mean: 256.0,
            vocab_size: 2000,
            topics: 8,
            positive_rate: 0.633,
            signal_strength: 0.95,
            cross_topic_rate: 0.2,
            topic_rate: 0.3,
            marker_rate: 0.3,
            seed: 7,
        }
    }
}

/// Maximum number of extra sessions beyond the first; the extra count is
/// binomial so the mean is exact.
const SESSION_TRIALS: u32 = 18;

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} is not a probability")))
            }
        };
        prob("positive_rate", self.positive_rate)?;
        prob("signal_strength", self.signal_strength)?;
        prob("cross_topic_rate", self.cross_topic_rate)?;
        prob("topic_rate", self.topic_rate)?;
        prob("marker_rate", self.marker_rate)?;
        if !(self.scale > 0.0) {
            return Err(Error::Config("scale must be positive".into()));
        }
        if !(self.sessions_mean >= 1.0 && self.sessions_mean <= 1.0 + SESSION_TRIALS as f64) {
            return Err(Error::Config(format!(
                "sessions_mean must lie in [1, {}]",
                1 + SESSION_TRIALS
            )));
        }
        if !(self.question_tokens_mean >= 2.0 && self.answer_tokens_mean >= 2.0) {
            return Err(Error::Config("token length means must be at least 2".into()));
        }
        if self.topics < 2 {
            return Err(Error::Config("at least two topics are needed".into()));
        }
        let needed = self.first_filler() + MIN_FILLERS;
        if self.vocab_size < needed {
            return Err(Error::Config(format!(
                "vocabulary of {} words cannot hold {} topics with markers (need {needed})",
                self.vocab_size, self.topics
            )));
        }
        Ok(())
    }

    pub fn split_counts(&self) -> SplitSizes {
        let s = |n: usize| ((n as f64 * self.scale).round() as usize).max(1);
        SplitSizes {
            train: s(self.splits.train),
            validation: s(self.splits.validation),
            test: s(self.splits.test),
        }
    }

    fn first_filler(&self) -> usize {
        self.topics * (TOPIC_WORDS + MARKER_WORDS) + DISTRACTOR_WORDS
    }

    pub fn topic_word(&self, topic: usize, k: usize) -> String {
        format!("t{topic}x{k}")
    }

    pub fn marker_word(&self, topic: usize, k: usize) -> String {
        format!("m{topic}x{k}")
    }

    pub fn distractor_word(&self, k: usize) -> String {
        format!("d{k}x0")
    }

    fn filler(&self, rng: &mut ChaCha8Rng) -> String {
        format!("w{}", rng.gen_range(0..self.vocab_size - self.first_filler()))
    }

    /// Kind and index of a topic word (`t`, topic), marker word (`m`, topic)
    /// or distractor word (`d`, position in the distractor list).
    pub fn classify_token(token: &str) -> Option<(char, usize)> {
        let mut chars = token.chars();
        let kind = chars.next().filter(|c| matches!(c, 't' | 'm' | 'd'))?;
        let rest = chars.as_str();
        let (topic, _) = rest.split_once('x')?;
        Some((kind, topic.parse().ok()?))
    }
}

/// Generated splits, in train/validation/test order.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCorpus {
    pub train: Vec<InterviewRecord>,
    pub validation: Vec<InterviewRecord>,
    pub test: Vec<InterviewRecord>,
}

impl GeneratedCorpus {
    pub fn split(&self, split: Split) -> &[InterviewRecord] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// Writes `train.jsonl`, `validation.jsonl`, `test.jsonl` and
    /// `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let manifest = SplitManifest {
            train: "train.jsonl".into(),
            validation: "validation.jsonl".into(),
            test: "test.jsonl".into(),
        };
        save_dataset(&dir.join(&manifest.train), &self.train)?;
        save_dataset(&dir.join(&manifest.validation), &self.validation)?;
        save_dataset(&dir.join(&manifest.test), &self.test)?;
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_file(&path, json.as_bytes())?;
        Ok(path)
    }
}

fn uniform_length(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    let lo = (mean * 0.5).round() as usize;
    let hi = (mean * 1.5).round() as usize;
    rng.gen_range(lo.max(1)..=hi.max(1))
}

/// Splits `total` tokens into sentences of 8 to 24 (questions) or 12 to 36
/// (answers) tokens.
fn sentence_lengths(rng: &mut ChaCha8Rng, total: usize, lo: usize, hi: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut left = total;
    while left > 0 {
        let n = rng.gen_range(lo..=hi).min(left);
        out.push(n);
        left -= n;
    }
    out
}

fn interview(spec: &GeneratorSpec, id: String, rng: &mut ChaCha8Rng) -> InterviewRecord {
    let label = rng.gen_bool(spec.positive_rate);
    let p_extra = (spec.sessions_mean - 1.0) / SESSION_TRIALS as f64;
    let n_sessions = 1 + (0..SESSION_TRIALS).filter(|_| rng.gen_bool(p_extra)).count();
    let sessions = (0..n_sessions)
        .map(|_| {
            let topic = rng.gen_range(0..spec.topics);
            let competent = label && rng.gen_bool(spec.signal_strength);
            let marker_topic = if competent {
                Some(topic)
            } else if rng.gen_bool(spec.cross_topic_rate) {
                let other = rng.gen_range(0..spec.topics - 1);
                Some(if other >= topic { other + 1 } else { other })
            } else {
                None
            };
            let q_len = uniform_length(rng, spec.question_tokens_mean);
            let question = sentence_lengths(rng, q_len, 8, 24)
                .into_iter()
                .map(|n| {
                    (0..n)
                        .map(|_| {
                            if rng.gen_bool(spec.topic_rate) {
                                spec.topic_word(topic, rng.gen_range(0..TOPIC_WORDS))
                            } else {
                                spec.filler(rng)
                            }
                        })
                        .collect()
                })
                .collect();
            let a_len = uniform_length(rng, spec.answer_tokens_mean);
            let answer = sentence_lengths(rng, a_len, 12, 36)
                .into_iter()
                .map(|n| {
                    (0..n)
                        .map(|_| {
                            if rng.gen_bool(spec.marker_rate) {
                                match marker_topic {
                                    Some(t) => spec.marker_word(t, rng.gen_range(0..MARKER_WORDS)),
                                    None => spec.distractor_word(rng.gen_range(0..DISTRACTOR_WORDS)),
                                }
                            } else {
                                spec.filler(rng)
                            }
                        })
                        .collect()
                })
                .collect();
            SessionRecord { question, answer }
        })
        .collect();
    InterviewRecord {
        id,
        label: label as u8,
        sessions,
    }
}

/// Deterministic synthetic corpus for `spec.seed`.
pub fn generate(spec: &GeneratorSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let counts = spec.split_counts();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut make = |prefix: &str, n: usize| -> Vec<InterviewRecord> {
        (0..n)
            .map(|k| interview(spec, format!("{prefix}-{k:05}"), &mut rng))
            .collect()
    };
    Ok(GeneratedCorpus {
        train: make("train", counts.train),
        validation: make("validation", counts.validation),
        test: make("test", counts.test),
    })
}

/// Co-occurrence counts of (question topic, answer marker topic) per
/// session followed by the distractor-word count, normalized by the
/// interview's total of markers and distractors. `topics^2 + 1` values.
pub fn probe_features(record: &InterviewRecord, topics: usize) -> Vec<f64> {
    let mut counts = vec![0.0; topics * topics + 1];
    let mut total = 0.0;
    for s in &record.sessions {
        let mut q_topics = vec![0usize; topics];
        for (kind, t) in s.question.iter().flatten().filter_map(|w| GeneratorSpec::classify_token(w)) {
            if kind == 't' && t < topics {
                q_topics[t] += 1;
            }
        }
        let q_total: usize = q_topics.iter().sum();
        if q_total == 0 {
            continue;
        }
        for (kind, m) in s.answer.iter().flatten().filter_map(|w| GeneratorSpec::classify_token(w)) {
            if kind == 'd' {
                counts[topics * topics] += 1.0;
                total += 1.0;
            }
            if kind != 'm' || m >= topics {
                continue;
            }
            for (t, &c) in q_topics.iter().enumerate() {
                counts[t * topics + m] += c as f64 / q_total as f64;
            }
            total += 1.0;
        }
    }
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

/// Logistic regression over probe features, fit by full-batch gradient
/// descent.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[u8], steps: usize, lr: f64) -> Self {
        let dim = features.first().map_or(0, Vec::len);
        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        let n = features.len().max(1) as f64;
        for _ in 0..steps {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (x, &y) in features.iter().zip(labels) {
                let z = b + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                let err = 1.0 / (1.0 + (-z).exp()) - y as f64;
                gw.iter_mut().zip(x).for_each(|(g, xi)| *g += err * xi);
                gb += err;
            }
            w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= lr * g / n);
            b -= lr * gb / n;
        }
        Self { weights: w, bias: b }
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        let z = self.bias + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>();
        (z > 0.0) as u8
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[u8]) -> f64 {
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        hits as f64 / labels.len().max(1) as f64
    }
}

/// Fits the probe on the training split and reports test accuracy.
pub fn probe_accuracy(corpus: &GeneratedCorpus, topics: usize) -> f64 {
    let prep = |rs: &[InterviewRecord]| -> (Vec<Vec<f64>>, Vec<u8>) {
        (rs.iter().map(|r| probe_features(r, topics)).collect(), rs.iter().map(|r| r.label).collect())
    };
    let (xtr, ytr) = prep(&corpus.train);
    let (xte, yte) = prep(&corpus.test);
    LinearProbe::fit(&xtr, &ytr, 2000, 5.0).accuracy(&xte, &yte)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, label: u8, q: &[&str], a: &[&str]) -> InterviewRecord {
        let sents = |xs: &[&str]| xs.iter().map(|s| s.split_whitespace().map(str::to_string).collect()).collect();
        InterviewRecord {
            id: id.into(),
            label,
            sessions: vec![SessionRecord {
                question: sents(q),
                answer: sents(a),
            }],
        }
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(parse_dataset("").is_err());
        assert!(parse_dataset("\n\n").is_err());
    }

    #[test]
    fn invalid_record_is_quarantined() {
        let mut lines: Vec<String> = (0..10)
            .map(|k| serde_json::to_string(&rec(&format!("r{k}"), 1, &["why"], &["because"])).unwrap())
            .collect();
        lines.push(serde_json::to_string(&rec("bad", 0, &["why"], &[])).unwrap());
        let loaded = parse_dataset(&lines.join("\n")).unwrap();
        assert_eq!(loaded.records.len(), 10);
        assert_eq!(loaded.quarantine.len(), 1);
        assert_eq!(loaded.quarantine[0].line, 11);
        assert_eq!(loaded.quarantine[0].id.as_deref(), Some("bad"));
    }

    #[test]
    fn mostly_malformed_file_aborts() {
        let good = serde_json::to_string(&rec("a", 1, &["q"], &["a"])).unwrap();
        let text = format!("{good}\nnot json\n{{\"id\": 3}}\n");
        assert!(matches!(parse_dataset(&text), Err(Error::Data(_))));
    }

    #[test]
    fn unknown_fields_are_malformed() {
        let text = r#"{"id":"x","label":1,"sessions":[{"question":[["q"]],"answer":[["a"]]}],"extra":1}"#;
        assert!(parse_dataset(text).is_err());
    }

    #[test]
    fn encoding_filters_and_truncates() {
        let stop = StopWords::new(["the"]);
        let r = rec("x", 1, &["the why now", "the"], &["a b c", "d e"]);
        let cfg = TextConfig {
            vocab_max: 100,
            question_max_tokens: 1,
            answer_max_tokens: 4,
        };
        let vocab = build_vocabulary(std::slice::from_ref(&r), &stop, &cfg).unwrap();
        let e = encode_record(&r, &vocab, &stop, &cfg).unwrap();
        assert_eq!(e.sessions[0].questions.len(), 1);
        assert_eq!(e.sessions[0].questions[0].len(), 1);
        assert_eq!(e.sessions[0].answers.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 1]);
    }

    #[test]
    fn filtered_out_interview_is_reported() {
        let stop = StopWords::new(["the"]);
        let r = rec("x", 1, &["the"], &["ok"]);
        let vocab = Vocabulary::build(["ok"], 10).unwrap();
        let err = encode_record(&r, &vocab, &stop, &TextConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InterviewEmpty(id) if id == "x"));
    }

    #[test]
    fn small_vocabulary_is_rejected() {
        let spec = GeneratorSpec {
            vocab_size: 60,
            ..GeneratorSpec::default()
        };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn default_split_counts_follow_scale() {
        let c = GeneratorSpec::default().split_counts();
        assert_eq!((c.train, c.validation, c.test), (463, 58, 58));
    }

    #[test]
    fn token_classification() {
        assert_eq!(GeneratorSpec::classify_token("t3x1"), Some(('t', 3)));
        assert_eq!(GeneratorSpec::classify_token("m12x0"), Some(('m', 12)));
        assert_eq!(GeneratorSpec::classify_token("d5x0"), Some(('d', 5)));
        assert_eq!(GeneratorSpec::classify_token("w17"), None);
    }
}
