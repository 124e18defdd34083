//! Vocabulary, sentence segmentation, stop-word filtering, truncation and
//! embedding lookup.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{init_uniform, Tensor};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Which side of a QA session a sentence belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Part {
    Question,
    Answer,
}

/// Token ids of one sentence plus its provenance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceTokens {
    pub ids: Vec<usize>,
    pub part: Part,
    /// 1-based position within its part.
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the `max_size - 2` most frequent tokens after the padding and
    /// unknown entries. Frequency ties go to the token seen first.
    pub fn build<I, S>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_size < 2 {
            return Err(Error::Config(format!("vocabulary max size {max_size} < 2")));
        }
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        for tok in corpus {
            let tok = tok.as_ref();
            if tok == PAD_TOKEN || tok == UNK_TOKEN {
                continue;
            }
            let next = counts.len();
            counts.entry(tok.to_string()).or_insert((0, next)).0 += 1;
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        let tokens = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(ranked.into_iter().map(|(t, _)| t).take(max_size - 2))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn decode(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// SHA-256 over the id-ordered tokens, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Stop-word list; lookups are case-insensitive.
#[derive(Clone, Debug, Default)]
pub struct StopWords(HashSet<String>);

impl StopWords {
    pub fn new<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Self {
        Self(words.into_iter().map(|w| w.as_ref().to_lowercase()).collect())
    }

    /// One token per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Self {
        Self::new(
            text.lines()
                .map(|l| l.split('#').next().unwrap_or("").trim())
                .filter(|l| !l.is_empty()),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(&token.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn is_sentence_end(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | ';' | '。' | '！' | '？' | '；')
}

pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32,
            0x2010..=0x2027 | 0x2030..=0x205E | 0x3000..=0x303F
            | 0xFF01..=0xFF0F | 0xFF1A..=0xFF20 | 0xFF3B..=0xFF40 | 0xFF5B..=0xFF65)
}

/// Lowercased tokens; whitespace separates tokens and every punctuation
/// character becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_whitespace() || is_punctuation(c) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if is_punctuation(c) {
                out.push(c.to_string());
            }
        } else {
            cur.extend(c.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Drops stop words and tokens made only of punctuation.
pub fn filter_tokens<S: AsRef<str>>(tokens: &[S], stop: &StopWords) -> Vec<String> {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .filter(|t| !t.is_empty() && !t.chars().all(is_punctuation) && !stop.contains(t))
        .map(str::to_string)
        .collect()
}

/// Splits raw text into filtered sentences.
pub fn segment_and_filter(text: &str, stop: &StopWords) -> Result<Vec<Vec<String>>> {
    let mut sentences = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if is_sentence_end(c) {
            sentences.push(&text[start..i]);
            start = i + c.len_utf8();
        }
    }
    sentences.push(&text[start..]);
    let out: Vec<Vec<String>> = sentences
        .into_iter()
        .map(|s| filter_tokens(&tokenize(s), stop))
        .filter(|s| !s.is_empty())
        .collect();
    if out.is_empty() {
        Err(Error::EmptyUtterance)
    } else {
        Ok(out)
    }
}

/// Caps the total token count of a sentence list at `cap`, cutting from
/// the tail and dropping sentences left empty.
pub fn truncate<T: Clone>(sentences: &[Vec<T>], cap: usize) -> Vec<Vec<T>> {
    let mut budget = cap;
    let mut out = Vec::new();
    for s in sentences {
        if budget == 0 {
            break;
        }
        let take = s.len().min(budget);
        if take > 0 {
            out.push(s[..take].to_vec());
        }
        budget -= take;
    }
    out
}

/// Word embedding matrix, `vocab x dim`. Row [`PAD_ID`] is pinned to zero.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub weights: Tensor,
    pub trainable: bool,
}

/// Result of reading a pretrained embedding file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbeddingCoverage {
    pub found: usize,
    pub missing: usize,
}

impl EmbeddingTable {
    /// Rows drawn uniformly from `[-0.05, 0.05]`, padding row zero.
    pub fn random<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        let mut weights = init_uniform(vocab, dim, 0.05, rng);
        weights.data_mut()[..dim].fill(0.0);
        Self {
            weights,
            trainable: true,
        }
    }

    /// Reads `token v1 .. v_dim` lines; vocabulary tokens absent from the
    /// file keep their random initialization.
    pub fn load<R: Rng + ?Sized>(
        path: &Path,
        vocab: &Vocabulary,
        dim: usize,
        rng: &mut R,
    ) -> Result<(Self, EmbeddingCoverage)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, vocab, dim, rng)
    }

    pub fn parse<R: Rng + ?Sized>(
        text: &str,
        vocab: &Vocabulary,
        dim: usize,
        rng: &mut R,
    ) -> Result<(Self, EmbeddingCoverage)> {
        let mut table = Self::random(vocab.len(), dim, rng);
        let mut seen = vec![false; vocab.len()];
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("embedding line {}: {e}", lineno + 1)))?;
            if values.len() != dim {
                return Err(Error::Data(format!(
                    "embedding line {}: expected {dim} values, got {}",
                    lineno + 1,
                    values.len()
                )));
            }
            if let Some(id) = vocab.id(token) {
                if id != PAD_ID {
                    table.weights.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
                    seen[id] = true;
                }
            }
        }
        let found = seen.iter().filter(|&&s| s).count();
        let coverage = EmbeddingCoverage {
            found,
            missing: vocab.len() - 1 - found,
        };
        log::info!(
            "embeddings: {} of {} vocabulary tokens covered",
            coverage.found,
            vocab.len() - 1
        );
        Ok((table, coverage))
    }

    /// One row per token, `L x dim`.
    pub fn embed(&self, sentence: &SentenceTokens) -> Result<Tensor> {
        let (rows, dim) = (self.weights.rows(), self.weights.cols());
        let mut data = Vec::with_capacity(sentence.ids.len() * dim);
        for &id in &sentence.ids {
            if id >= rows {
                return Err(Error::TokenOutOfRange { id, size: rows });
            }
            data.extend_from_slice(self.weights.row_slice(id));
        }
        Ok(Tensor::matrix(sentence.ids.len(), dim, data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn vocabulary_orders_by_frequency() {
        let v = Vocabulary::build(toks("a a b"), 4).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "a", "b"]);
        assert_eq!(v.encode("zzz"), UNK_ID);
        let again = Vocabulary::build(toks("a a b"), 4).unwrap();
        assert_eq!(v, again);
    }

    #[test]
    fn vocabulary_ties_follow_first_occurrence() {
        let v = Vocabulary::build(toks("c b a b c a d"), 10).unwrap();
        assert_eq!(&v.tokens()[2..], &["c", "b", "a", "d"]);
        let capped = Vocabulary::build(toks("c b a b c a d"), 3).unwrap();
        assert_eq!(capped.tokens(), &["<pad>", "<unk>", "c"]);
    }

    #[test]
    fn vocabulary_caps_large_corpus() {
        let corpus: Vec<String> = (0..30_000).map(|i| format!("t{i}")).collect();
        let v = Vocabulary::build(&corpus, 21_128).unwrap();
        assert_eq!(v.len(), 21_128);
    }

    #[test]
    fn vocabulary_rejects_empty_input() {
        assert!(matches!(Vocabulary::build(Vec::<String>::new(), 10), Err(Error::EmptyCorpus)));
        assert!(Vocabulary::build(toks("a"), 1).is_err());
    }

    #[test]
    fn segmentation_drops_stop_words_and_empty_sentences() {
        let stop = StopWords::new(["stop"]);
        let s = segment_and_filter("Hello world. Stop.", &stop).unwrap();
        assert_eq!(s, vec![toks("hello world")]);
    }

    #[test]
    fn segmentation_handles_cjk_terminators() {
        let s = segment_and_filter("你好。再见！", &StopWords::default()).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn segmentation_of_punctuation_only_is_empty() {
        let err = segment_and_filter("... !!", &StopWords::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyUtterance));
    }

    #[test]
    fn stop_word_file_parsing() {
        let stop = StopWords::parse("# header\nthe\n  a  # article\n\n");
        assert_eq!(stop.len(), 2);
        assert!(stop.contains("The"));
    }

    #[test]
    fn truncation_caps() {
        let q: Vec<Vec<u32>> = vec![(0..30).collect(), (30..60).collect()];
        let t = truncate(&q, 50);
        assert_eq!(t.iter().map(Vec::len).sum::<usize>(), 50);
        assert_eq!(t[1], (30..50).collect::<Vec<_>>());
        let a: Vec<Vec<u32>> = vec![(0..10).collect()];
        assert_eq!(truncate(&a, 295), a);
        let long: Vec<Vec<u32>> = vec![(0..100).collect(), (0..200).collect()];
        assert_eq!(truncate(&long, 295).iter().map(Vec::len).sum::<usize>(), 295);
    }

    #[test]
    fn embedding_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let table = EmbeddingTable::random(5, 300, &mut rng);
        let s = SentenceTokens {
            ids: vec![PAD_ID, 3, 3],
            part: Part::Answer,
            index: 1,
        };
        let e = table.embed(&s).unwrap();
        assert_eq!(e.shape(), &[3, 300]);
        assert!(e.row_slice(0).iter().all(|&v| v == 0.0));
        assert_eq!(e.row_slice(1), table.weights.row_slice(3));
        let bad = SentenceTokens { ids: vec![5], ..s };
        assert!(matches!(table.embed(&bad), Err(Error::TokenOutOfRange { id: 5, size: 5 })));
    }

    #[test]
    fn embedding_file_parsing() {
        let vocab = Vocabulary::from_tokens(toks("<pad> <unk> cat dog"));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (table, cov) = EmbeddingTable::parse("cat 1 2 3\nbird 4 5 6\n", &vocab, 3, &mut rng).unwrap();
        assert_eq!(table.weights.row_slice(2), &[1.0, 2.0, 3.0]);
        assert_eq!(cov, EmbeddingCoverage { found: 1, missing: 2 });
        assert!(EmbeddingTable::parse("cat 1 2\n", &vocab, 3, &mut rng).is_err());
    }
}
