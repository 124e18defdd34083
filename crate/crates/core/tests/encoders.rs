use hrgnn_core::encoders::{gru_forward, Direction, GruParams, SentenceEncoder};
use hrgnn_core::numerics::{ParamStore, Tape, Tensor};
use hrgnn_core::text::Part;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar GRU recurrence, states indexed by input row.
fn naive_gru(x: &Tensor, store: &ParamStore, p: &GruParams, reverse: bool) -> Vec<Vec<f64>> {
    let (wx, bx, wh, bh) = (
        store.get(p.input_weight),
        store.get(p.input_bias),
        store.get(p.hidden_weight),
        store.get(p.hidden_bias),
    );
    let h = p.hidden;
    let len = x.rows();
    let mut out = vec![vec![0.0; h]; len];
    let mut state = vec![0.0; h];
    let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
    for t in order {
        let xp: Vec<f64> = (0..3 * h)
            .map(|g| bx.get(0, g) + (0..x.cols()).map(|k| x.get(t, k) * wx.get(k, g)).sum::<f64>())
            .collect();
        let hp: Vec<f64> = (0..3 * h)
            .map(|g| bh.get(0, g) + (0..h).map(|k| state[k] * wh.get(k, g)).sum::<f64>())
            .collect();
        let next: Vec<f64> = (0..h)
            .map(|j| {
                let z = sigmoid(xp[j] + hp[j]);
                let r = sigmoid(xp[h + j] + hp[h + j]);
                let n = (xp[2 * h + j] + r * hp[2 * h + j]).tanh();
                (1.0 - z) * n + z * state[j]
            })
            .collect();
        state = next;
        out[t] = state.clone();
    }
    out
}

fn randomized_gru(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> (ParamStore, GruParams) {
    let mut store = ParamStore::new();
    let p = GruParams::register(&mut store, "gru", input, hidden, rng);
    for id in [p.input_bias, p.hidden_bias] {
        let t = random_tensor(rng, 1, 3 * hidden);
        store.set(id, t).unwrap();
    }
    (store, p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gru_matches_naive_recurrence(seed in any::<u64>(), len in 1usize..9, input in 1usize..6, hidden in 1usize..6, reverse in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, p) = randomized_gru(&mut rng, input, hidden);
        let x = random_tensor(&mut rng, len, input);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, &store);
        let xv = tape.leaf(x.clone());
        let dir = if reverse { Direction::Backward } else { Direction::Forward };
        let out = gru_forward(&mut tape, xv, &bound, dir).unwrap();
        let states = tape.value(out.states);
        let expected = naive_gru(&x, &store, &p, reverse);
        for t in 0..len {
            for j in 0..hidden {
                prop_assert!((states.get(t, j) - expected[t][j]).abs() < 1e-12);
            }
        }
        let last = if reverse { &expected[0] } else { &expected[len - 1] };
        prop_assert_eq!(tape.value(out.last).data().len(), hidden);
        for j in 0..hidden {
            prop_assert!((tape.value(out.last).get(0, j) - last[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_weights_keep_zero_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let p = GruParams::register(&mut store, "gru", 3, 4, &mut rng);
    store.set(p.input_weight, Tensor::zeros(3, 12)).unwrap();
    store.set(p.hidden_weight, Tensor::zeros(4, 12)).unwrap();
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, &store);
    let x = tape.leaf(random_tensor(&mut rng, 5, 3));
    let out = gru_forward(&mut tape, x, &bound, Direction::Forward).unwrap();
    assert!(tape.value(out.states).data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_step_is_one_gate_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (store, p) = randomized_gru(&mut rng, 3, 2);
    let x = random_tensor(&mut rng, 1, 3);
    for dir in [Direction::Forward, Direction::Backward] {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, &store);
        let xv = tape.leaf(x.clone());
        let out = gru_forward(&mut tape, xv, &bound, dir).unwrap();
        let expected = naive_gru(&x, &store, &p, false);
        for j in 0..2 {
            assert!((tape.value(out.last).get(0, j) - expected[0][j]).abs() < 1e-14);
        }
    }
}

#[test]
fn batched_sentences_match_one_at_a_time() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let enc = SentenceEncoder::register(&mut store, 5, 3, 4, &mut rng);
    let table = random_tensor(&mut rng, 10, 5);
    let sentences: Vec<Vec<usize>> = vec![vec![1, 2, 3], vec![4], vec![9, 8, 7, 6, 5], vec![2, 2]];
    for part in [Part::Question, Part::Answer] {
        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape, &store);
        let t = tape.leaf(table.clone());
        let tables = bound.project_tables(&mut tape, t).unwrap();
        let batched = match part {
            Part::Question => bound.encode_questions(&mut tape, &tables, &sentences),
            Part::Answer => bound.encode_answers(&mut tape, &tables, &sentences),
        }
        .unwrap();
        let batched = tape.value(batched).clone();
        for (i, s) in sentences.iter().enumerate() {
            let mut rows = Tensor::zeros(s.len(), 5);
            for (r, &id) in s.iter().enumerate() {
                for c in 0..5 {
                    rows.set(r, c, table.get(id, c));
                }
            }
            let single = enc.encode_sentence_values(&store, &rows, part, i).unwrap();
            for (c, v) in single.values.iter().enumerate() {
                assert!((batched.get(i, c) - v).abs() < 1e-12, "{part:?} sentence {i}");
            }
        }
    }
}

#[test]
fn empty_sentence_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let enc = SentenceEncoder::register(&mut store, 2, 2, 2, &mut rng);
    let mut tape = Tape::new();
    let bound = enc.bind(&mut tape, &store);
    let t = tape.leaf(random_tensor(&mut rng, 4, 2));
    let tables = bound.project_tables(&mut tape, t).unwrap();
    assert!(bound.encode_answers(&mut tape, &tables, &[vec![1], vec![]]).is_err());
}
