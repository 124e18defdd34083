//! Inputs shared by the benchmarks.

use hrgnn_core::data::{EncodedInterview, EncodedSession};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Interviews with `sessions` sessions of `sentences` question and answer
/// sentences, each `tokens` long.
pub fn synthetic_batch(n: usize, sessions: usize, sentences: usize, tokens: usize, vocab: usize) -> Vec<EncodedInterview> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let side = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
        (0..sentences)
            .map(|_| (0..tokens).map(|_| rng.gen_range(1..vocab)).collect())
            .collect()
    };
    (0..n)
        .map(|k| EncodedInterview {
            id: format!("bench-{k}"),
            label: k % 2,
            sessions: (0..sessions)
                .map(|_| EncodedSession {
                    questions: side(&mut rng),
                    answers: side(&mut rng),
                })
                .collect(),
        })
        .collect()
}
