use hrgnn_core::data::{EncodedInterview, EncodedSession};
use hrgnn_core::experiment::gradcheck_model_config;
use hrgnn_core::graph::RelationGroup;
use hrgnn_core::model::{Hrgnn, ModelConfig};
use hrgnn_core::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 15;

fn interview(rng: &mut ChaCha8Rng, id: &str, sessions: usize) -> EncodedInterview {
    let side = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
        (0..rng.gen_range(1..4))
            .map(|_| (0..rng.gen_range(1..6)).map(|_| rng.gen_range(1..VOCAB)).collect())
            .collect()
    };
    EncodedInterview {
        id: id.into(),
        label: rng.gen_range(0..2),
        sessions: (0..sessions)
            .map(|_| EncodedSession {
                questions: side(rng),
                answers: side(rng),
            })
            .collect(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn zero_classifier_gives_even_odds() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = Hrgnn::new(gradcheck_model_config(), VOCAB, 3).unwrap();
    let (w, b) = (model.network.classifier_weight, model.network.classifier_bias);
    let (wr, wc) = (model.store.get(w).rows(), model.store.get(w).cols());
    model.store.set(w, Tensor::zeros(wr, wc)).unwrap();
    model.store.set(b, Tensor::zeros(1, 2)).unwrap();
    let data: Vec<_> = (0..4).map(|k| interview(&mut rng, &k.to_string(), k + 1)).collect();
    for p in model.predict(&data).unwrap() {
        assert_eq!(p, [0.5, 0.5]);
    }
}

#[test]
fn single_session_matches_hand_computed_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Hrgnn::new(gradcheck_model_config(), VOCAB, 5).unwrap();
    let iv = interview(&mut rng, "one", 1);
    let h_g = &model.session_vectors(&iv).unwrap()[0];
    let s = &model.store;
    let gru = &model.network.interview;
    let (wx, bx, wh, bh) = (
        s.get(gru.input_weight),
        s.get(gru.input_bias),
        s.get(gru.hidden_weight),
        s.get(gru.hidden_bias),
    );
    let h = gru.hidden;
    let xp: Vec<f64> = (0..3 * h)
        .map(|g| bx.get(0, g) + h_g.iter().enumerate().map(|(k, v)| v * wx.get(k, g)).sum::<f64>())
        .collect();
    let state: Vec<f64> = (0..h)
        .map(|j| {
            let z = sigmoid(xp[j] + bh.get(0, j));
            let r = sigmoid(xp[h + j] + bh.get(0, h + j));
            let n = (xp[2 * h + j] + r * bh.get(0, 2 * h + j)).tanh();
            (1.0 - z) * n
        })
        .collect();
    assert!(wh.rows() == h);
    let w = s.get(model.network.classifier_weight);
    let b = s.get(model.network.classifier_bias);
    let logits: Vec<f64> = (0..2)
        .map(|c| b.get(0, c) + (0..h).map(|k| state[k] * w.get(c, k)).sum::<f64>())
        .collect();
    let z = (logits[0].exp(), logits[1].exp());
    let expected = [z.0 / (z.0 + z.1), z.1 / (z.0 + z.1)];
    let got = model.predict(std::slice::from_ref(&iv)).unwrap()[0];
    assert!((got[0] - expected[0]).abs() < 1e-12 && (got[1] - expected[1]).abs() < 1e-12);
}

fn configs() -> Vec<ModelConfig> {
    let base = gradcheck_model_config();
    let mut no_rgcn = base.clone();
    no_rgcn.ablation.use_rgcn = false;
    let mut no_rgat = base.clone();
    no_rgat.ablation.use_rgat = false;
    let mut no_qa = base.clone();
    no_qa.ablation.removed_relations.insert(RelationGroup::Rqa);
    let mut pooled = base.clone();
    pooled.ablation.use_rgcn = false;
    pooled.ablation.use_rgat = false;
    pooled.ablation.mean_pool_fallback = true;
    vec![base, no_rgcn, no_rgat, no_qa, pooled]
}

#[test]
fn shared_tape_gradient_equals_direct_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch: Vec<_> = (0..3).map(|k| interview(&mut rng, &k.to_string(), k + 1)).collect();
    for config in configs() {
        let model = Hrgnn::new(config, VOCAB, 11).unwrap();
        let fast = model.batch_gradient(&batch, None).unwrap();
        let direct = model.batch_gradient_direct(&batch).unwrap();
        assert!((fast.loss - direct.loss).abs() < 1e-12);
        for id in model.store.ids() {
            let (a, b) = (fast.grads.get(id), direct.grads.get(id));
            match (a, b) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.data().iter().zip(b.data()) {
                        assert!((x - y).abs() < 1e-12, "{}", model.store.name(id));
                    }
                }
                (None, None) => {}
                (a, b) => {
                    let nonzero = |t: Option<&Tensor>| t.map_or(false, |t| t.data().iter().any(|&v| v != 0.0));
                    assert!(!nonzero(a) && !nonzero(b), "{}", model.store.name(id));
                }
            }
        }
    }
}

#[test]
fn gradients_match_central_differences_under_ablations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = vec![interview(&mut rng, "a", 2), interview(&mut rng, "b", 1)];
    for config in configs() {
        let mut model = Hrgnn::new(config.clone(), VOCAB, 13).unwrap();
        // A convolution pre-activation of this batch lies within 1e-7 of the
        // ReLU kink, so the step must stay below that.
        let err = model.gradcheck(&batch, 1e-8).unwrap();
        assert!(err < 1e-6, "{:?}: {err:e}", config.ablation);
    }
}

#[test]
fn session_order_matters() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Hrgnn::new(gradcheck_model_config(), VOCAB, 17).unwrap();
    let iv = interview(&mut rng, "x", 3);
    let mut reversed = iv.clone();
    reversed.sessions.reverse();
    let p = model.predict(&[iv, reversed]).unwrap();
    assert!((p[0][1] - p[1][1]).abs() > 1e-9);
}

#[test]
fn empty_interview_is_rejected() {
    let model = Hrgnn::new(gradcheck_model_config(), VOCAB, 1).unwrap();
    let iv = EncodedInterview {
        id: "empty".into(),
        label: 0,
        sessions: vec![],
    };
    assert!(model.predict(&[iv]).is_err());
}

#[test]
fn out_of_range_token_is_rejected() {
    let model = Hrgnn::new(gradcheck_model_config(), VOCAB, 1).unwrap();
    let iv = EncodedInterview {
        id: "oov".into(),
        label: 0,
        sessions: vec![EncodedSession {
            questions: vec![vec![VOCAB]],
            answers: vec![vec![1]],
        }],
    };
    assert!(model.predict(&[iv]).is_err());
}
