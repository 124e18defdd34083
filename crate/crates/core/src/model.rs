//! The full network: sentence encoders, per-session relational convolution
//! and graph attention, the interview-level GRU and the 2-way classifier.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EncodedInterview, EncodedSession};
use crate::encoders::{gru_forward, BoundEncoder, BoundGru, Direction, GruParams, SentenceEncoder, TokenTables};
use crate::error::{Error, Result};
use crate::gat::{gat_forward, gat_pool, gat_project, readout, BoundGat, GatParams, GatShared};
use crate::graph::{
    edge_weights, rgcn_forward, uniform_edge_weights, Activation, BoundRgcn, QaGraph, RelationGroup, RgcnParams,
};
use crate::numerics::{
    gradcheck_fn, init_uniform, ParamGrads, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::text::{EmbeddingTable, PAD_ID};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub gru_hidden: usize,
    pub node_dim: usize,
    pub heads: usize,
    /// Accepted for completeness; the attention layers have no separate
    /// attention width.
    pub attention_size: usize,
    /// Accepted for completeness; edge weights are scalars.
    pub edge_dim: usize,
    pub past_window: usize,
    pub future_window: usize,
    pub dropout: f64,
    pub rgcn_layers: usize,
    pub gat_layers: usize,
    pub negative_slope: f64,
    /// Kept out of this section when serialized; run configurations and
    /// checkpoints store it alongside.
    #[serde(skip)]
    pub ablation: Ablation,
}

/// Switches that remove parts of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub use_rgcn: bool,
    pub use_rgat: bool,
    pub removed_relations: BTreeSet<RelationGroup>,
    /// Permits disabling both graph layers; sessions are then the mean of
    /// their sentence vectors.
    pub mean_pool_fallback: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_rgcn: true,
            use_rgat: true,
            removed_relations: BTreeSet::new(),
            mean_pool_fallback: false,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 300,
            gru_hidden: 50,
            node_dim: 256,
            heads: 16,
            attention_size: 100,
            edge_dim: 50,
            past_window: 10,
            future_window: 10,
            dropout: 0.1,
            rgcn_layers: 1,
            gat_layers: 1,
            negative_slope: 0.2,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("gru_hidden", self.gru_hidden),
            ("node_dim", self.node_dim),
            ("heads", self.heads),
            ("rgcn_layers", self.rgcn_layers),
            ("gat_layers", self.gat_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.negative_slope >= 0.0) {
            return Err(Error::Config("negative_slope must be non-negative".into()));
        }
        let a = &self.ablation;
        if !a.use_rgcn && !a.use_rgat && !a.mean_pool_fallback {
            return Err(Error::Config(
                "use_rgcn and use_rgat are both off; set mean_pool_fallback to allow it".into(),
            ));
        }
        Ok(())
    }
}

/// Parameter handles of every layer, independent of the values they index.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub embedding: ParamId,
    pub encoder: SentenceEncoder,
    pub edge_weight: Option<ParamId>,
    pub rgcn: Vec<RgcnParams>,
    pub gat: Vec<GatParams>,
    pub interview: GruParams,
    /// `2 x d_s`.
    pub classifier_weight: ParamId,
    /// `1 x 2`.
    pub classifier_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct BoundNetwork {
    pub encoder: BoundEncoder,
    pub edge_weight: Option<Var>,
    pub rgcn: Vec<BoundRgcn>,
    pub gat: Vec<BoundGat>,
    pub interview: BoundGru,
    pub classifier_weight: Var,
    pub classifier_bias: Var,
    pub tables: TokenTables,
}

/// See [`Network::shared`].
#[derive(Clone, Copy, Debug)]
pub struct Shared {
    pub tables: TokenTables,
    pub gat: Option<GatShared>,
}

impl Shared {
    pub fn vars(&self) -> Vec<Var> {
        let t = &self.tables;
        let mut v = vec![t.question, t.answer_forward, t.answer_backward];
        if let Some(g) = &self.gat {
            v.extend([g.scores_target, g.scores_source, g.stacked]);
        }
        v
    }

    /// Same structure with each variable replaced, in [`Shared::vars`] order.
    pub fn map(&self, mut f: impl FnMut(Var) -> Var) -> Self {
        Self {
            tables: TokenTables {
                question: f(self.tables.question),
                answer_forward: f(self.tables.answer_forward),
                answer_backward: f(self.tables.answer_backward),
            },
            gat: self.gat.map(|g| GatShared {
                scores_target: f(g.scores_target),
                scores_source: f(g.scores_source),
                stacked: f(g.stacked),
            }),
        }
    }
}

impl Network {
    fn register(config: ModelConfig, embedding: EmbeddingTable, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        if embedding.weights.cols() != config.embed_dim {
            return Err(Error::Config(format!(
                "embedding width {} but embed_dim {}",
                embedding.weights.cols(),
                config.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = embedding.weights.rows();
        let emb = store.insert("embedding", embedding.weights);
        let frozen: Vec<usize> = if embedding.trainable { vec![PAD_ID] } else { (0..rows).collect() };
        for r in frozen {
            store.freeze_row(emb, r);
        }
        let d = config.node_dim;
        let encoder = SentenceEncoder::register(store, config.embed_dim, config.gru_hidden, d, &mut rng);
        let (edge_weight, rgcn) = if config.ablation.use_rgcn {
            let w = store.insert("graph.w_e", init_uniform(d, d, 1.0 / (d as f64).sqrt(), &mut rng));
            let layers = (0..config.rgcn_layers)
                .map(|l| RgcnParams::register(store, &format!("rgcn{l}"), d, &mut rng))
                .collect();
            (Some(w), layers)
        } else {
            (None, Vec::new())
        };
        let gat = if config.ablation.use_rgat {
            (0..config.gat_layers)
                .map(|l| {
                    GatParams::register(store, &format!("gat{l}"), d, d, config.heads, config.negative_slope, &mut rng)
                })
                .collect()
        } else {
            Vec::new()
        };
        let interview = GruParams::register(store, "interview_gru", d, d, &mut rng);
        let classifier_weight = store.insert(
            "classifier.w",
            init_uniform(2, d, 1.0 / (d as f64).sqrt(), &mut rng),
        );
        let classifier_bias = store.insert("classifier.b", Tensor::zeros(1, 2));
        Ok(Self {
            config,
            embedding: emb,
            encoder,
            edge_weight,
            rgcn,
            gat,
            interview,
            classifier_weight,
            classifier_bias,
        })
    }

    /// Parameter-only quantities reused by every interview: the token-table
    /// projections and the fused readout terms of the last attention layer.
    pub fn shared<'t>(&self, tape: &mut Tape<'t>, store: &'t ParamStore) -> Result<Shared> {
        let table = tape.param(store, self.embedding);
        let enc = self.encoder.bind(tape, store);
        let tables = enc.project_tables(tape, table)?;
        let gat = match self.gat.last() {
            Some(layer) => {
                let heads = layer.bind_heads(tape, store)?;
                Some(GatParams::shared(tape, &heads)?)
            }
            None => None,
        };
        Ok(Shared { tables, gat })
    }

    /// Binds every parameter except the embedding table; quantities in
    /// `shared` are used as given.
    pub fn bind<'t>(&self, tape: &mut Tape<'t>, store: &'t ParamStore, shared: &Shared) -> Result<BoundNetwork> {
        let mut gat = Vec::with_capacity(self.gat.len());
        if let Some((last, rest)) = self.gat.split_last() {
            for layer in rest {
                gat.push(layer.bind(tape, store)?);
            }
            let s = shared.gat.ok_or_else(|| Error::Config("shared attention terms missing".into()))?;
            gat.push(last.bind_with(tape, store, s)?);
        }
        Ok(BoundNetwork {
            encoder: self.encoder.bind(tape, store),
            edge_weight: self.edge_weight.map(|id| tape.param(store, id)),
            rgcn: self.rgcn.iter().map(|l| l.bind(tape, store)).collect(),
            gat,
            interview: self.interview.bind(tape, store),
            classifier_weight: tape.param(store, self.classifier_weight),
            classifier_bias: tape.param(store, self.classifier_bias),
            tables: shared.tables,
        })
    }

    fn dropout(&self, tape: &mut Tape<'_>, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        Ok(match rng {
            Some(r) => tape.dropout(x, self.config.dropout, true, &mut **r)?,
            None => x,
        })
    }

    pub fn session_graph(&self, session: &EncodedSession) -> Result<QaGraph> {
        QaGraph::build(
            session.questions.len(),
            session.answers.len(),
            self.config.past_window,
            self.config.future_window,
            &self.config.ablation.removed_relations,
        )
    }

    /// Sentence vectors of one session, questions first; `N x d_s`.
    pub fn sentence_nodes(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundNetwork,
        session: &EncodedSession,
    ) -> Result<Var> {
        let q = bound.encoder.encode_questions(tape, &bound.tables, &session.questions)?;
        let a = bound.encoder.encode_answers(tape, &bound.tables, &session.answers)?;
        Ok(tape.concat(&[q, a], 0)?)
    }

    /// Per-session summary row: the pooled attention features when graph
    /// attention is on (see [`gat_pool`]), otherwise `h_G` itself.
    fn session_summary(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundNetwork,
        session: &EncodedSession,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let graph = self.session_graph(session)?;
        let mut nodes = self.sentence_nodes(tape, bound, session)?;
        if let Some(w_e) = bound.edge_weight {
            for layer in &bound.rgcn {
                let alpha = edge_weights(tape, nodes, w_e, &graph)?;
                nodes = rgcn_forward(tape, nodes, alpha, &graph, layer, Activation::Relu)?;
            }
        }
        nodes = self.dropout(tape, nodes, rng)?;
        if let Some((last, rest)) = bound.gat.split_last() {
            let mask = graph.adjacency();
            for layer in rest {
                nodes = gat_forward(tape, nodes, &mask, layer)?;
            }
            return gat_pool(tape, nodes, &mask, last);
        }
        readout(tape, nodes)
    }

    /// Maps stacked session summaries to session vectors, `S x d_s`.
    fn summaries_to_vectors(&self, tape: &mut Tape<'_>, bound: &BoundNetwork, rows: Var) -> Result<Var> {
        match bound.gat.last() {
            Some(last) => gat_project(tape, rows, last),
            None => Ok(rows),
        }
    }

    /// Session vector `h_G`, `1 x d_s`.
    pub fn session_vector(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundNetwork,
        session: &EncodedSession,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let row = self.session_summary(tape, bound, session, rng)?;
        self.summaries_to_vectors(tape, bound, row)
    }

    /// Classifier logits `1 x 2`. Dropout is active iff `rng` is given.
    pub fn interview_logits(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundNetwork,
        interview: &EncodedInterview,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if interview.sessions.is_empty() {
            return Err(Error::InterviewEmpty(interview.id.clone()));
        }
        let rows = interview
            .sessions
            .iter()
            .map(|s| self.session_summary(tape, bound, s, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let rows = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
        let seq = self.summaries_to_vectors(tape, bound, rows)?;
        let v = gru_forward(tape, seq, &bound.interview, Direction::Forward)?.last;
        let v = self.dropout(tape, v, &mut rng)?;
        let wt = tape.transpose(bound.classifier_weight)?;
        let z = tape.matmul(v, wt)?;
        Ok(tape.add(z, bound.classifier_bias)?)
    }

    /// Cross-entropy of one interview, recorded on a single tape including
    /// the embedding lookup.
    pub fn interview_loss<'t>(
        &self,
        tape: &mut Tape<'t>,
        store: &'t ParamStore,
        interview: &EncodedInterview,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let shared = self.shared(tape, store)?;
        let bound = self.bind(tape, store, &shared)?;
        let logits = self.interview_logits(tape, &bound, interview, rng)?;
        check_label(interview)?;
        Ok(tape.cross_entropy(logits, interview.label)?)
    }
}

fn check_label(interview: &EncodedInterview) -> Result<()> {
    if interview.label > 1 {
        return Err(Error::Data(format!("interview {}: label {}", interview.id, interview.label)));
    }
    Ok(())
}

/// `-log p[label]` with `p[label]` clamped at [`PROB_FLOOR`].
pub fn loss(probs: &[f64; 2], label: usize) -> Result<f64> {
    if label > 1 {
        return Err(Error::Data(format!("label {label} is not 0 or 1")));
    }
    let p = probs[label];
    if !(p >= 0.0) || (probs[0] + probs[1] - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!("{probs:?} is not a distribution")));
    }
    if p < PROB_FLOOR {
        log::warn!("probability {p:e} of the gold class clamped to {PROB_FLOOR:e}");
    }
    Ok(-p.max(PROB_FLOOR).ln())
}

fn softmax2(logits: &Tensor) -> [f64; 2] {
    let z = logits.data();
    let m = z[0].max(z[1]);
    let (a, b) = ((z[0] - m).exp(), (z[1] - m).exp());
    [a / (a + b), b / (a + b)]
}

/// Mean loss and summed-then-averaged gradients of a batch.
#[derive(Debug)]
pub struct BatchGradient {
    pub loss: f64,
    pub grads: ParamGrads,
}

/// Parameters and structure of a model instance.
#[derive(Clone, Debug)]
pub struct Hrgnn {
    pub network: Network,
    pub store: ParamStore,
}

impl Hrgnn {
    /// Embedding rows drawn uniformly; all other weights from `seed`.
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let table = EmbeddingTable::random(vocab_size, config.embed_dim, &mut rng);
        Self::with_embeddings(config, table, seed)
    }

    pub fn with_embeddings(config: ModelConfig, embedding: EmbeddingTable, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let network = Network::register(config, embedding, &mut store, seed)?;
        Ok(Self { network, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }

    pub fn vocab_size(&self) -> usize {
        self.store.get(self.network.embedding).rows()
    }

    /// Class probabilities `[p(0), p(1)]` for each interview, without dropout.
    pub fn predict(&self, interviews: &[EncodedInterview]) -> Result<Vec<[f64; 2]>> {
        let mut base = Tape::new();
        let shared = self.network.shared(&mut base, &self.store)?;
        interviews
            .iter()
            .map(|iv| {
                let mut tape = Tape::new();
                let local = shared.map(|v| tape.leaf_ref(base.value(v)));
                let bound = self.network.bind(&mut tape, &self.store, &local)?;
                let logits = self.network.interview_logits(&mut tape, &bound, iv, None)?;
                Ok(softmax2(tape.value(logits)))
            })
            .collect()
    }

    /// Session vectors `h_G` of one interview without dropout.
    pub fn session_vectors(&self, interview: &EncodedInterview) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let shared = self.network.shared(&mut tape, &self.store)?;
        let bound = self.network.bind(&mut tape, &self.store, &shared)?;
        interview
            .sessions
            .iter()
            .map(|s| {
                let h = self.network.session_vector(&mut tape, &bound, s, &mut None)?;
                Ok(tape.value(h).data().to_vec())
            })
            .collect()
    }

    /// Graph of one session with its first-layer edge weights. Without the
    /// convolution layer there is no `W_e`, and weights are uniform over
    /// each vertex's incoming edges.
    pub fn session_edge_weights(&self, session: &EncodedSession) -> Result<(QaGraph, Tensor)> {
        let graph = self.network.session_graph(session)?;
        let mut tape = Tape::new();
        let shared = self.network.shared(&mut tape, &self.store)?;
        let bound = self.network.bind(&mut tape, &self.store, &shared)?;
        let weights = match bound.edge_weight {
            Some(w_e) => {
                let nodes = self.network.sentence_nodes(&mut tape, &bound, session)?;
                let alpha = edge_weights(&mut tape, nodes, w_e, &graph)?;
                tape.value(alpha).clone()
            }
            None => uniform_edge_weights(&graph),
        };
        Ok((graph, weights))
    }

    /// Mean cross-entropy over `batch` and its gradient.
    ///
    /// Parameter-only quantities ([`Network::shared`]) are computed once on
    /// a base tape; each interview is differentiated on its own tape with
    /// those values as leaves, and the accumulated leaf gradients are pushed
    /// back through the base tape at the end.
    pub fn batch_gradient(&self, batch: &[EncodedInterview], mut rng: Option<&mut ChaCha8Rng>) -> Result<BatchGradient> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let net = &self.network;
        let mut base = Tape::new();
        let shared = net.shared(&mut base, &self.store)?;
        let roots = shared.vars();
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; roots.len()];
        let mut grads = ParamGrads::new(&self.store);
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for iv in batch {
            check_label(iv)?;
            let mut tape = Tape::new();
            let local = shared.map(|v| tape.leaf_ref(base.value(v)));
            let bound = net.bind(&mut tape, &self.store, &local)?;
            let logits = net.interview_logits(&mut tape, &bound, iv, rng.as_deref_mut())?;
            let ce = tape.cross_entropy(logits, iv.label)?;
            total += tape.value(ce).item();
            let mut g = tape.backward_from(ce, Tensor::scalar(scale))?;
            g.accumulate_into(&mut grads);
            for (slot, leaf) in leaf_grads.iter_mut().zip(local.vars()) {
                if let Some(d) = g.take(leaf) {
                    match slot {
                        Some(acc) => acc.add_assign(&d),
                        None => *slot = Some(d),
                    }
                }
            }
        }
        let seeds: Vec<(Var, Tensor)> = roots
            .into_iter()
            .zip(leaf_grads)
            .filter_map(|(v, g)| g.map(|g| (v, g)))
            .collect();
        if !seeds.is_empty() {
            base.backward_seeded(seeds)?.accumulate_into(&mut grads);
        }
        Ok(BatchGradient {
            loss: total * scale,
            grads,
        })
    }

    /// Mean loss and gradient of `batch` through a single tape per
    /// interview, including the embedding lookup. Slower than
    /// [`Hrgnn::batch_gradient`]; used as its reference.
    pub fn batch_gradient_direct(&self, batch: &[EncodedInterview]) -> Result<BatchGradient> {
        let mut grads = ParamGrads::new(&self.store);
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut total = 0.0;
        for iv in batch {
            let mut tape = Tape::new();
            let ce = self.network.interview_loss(&mut tape, &self.store, iv, None)?;
            total += tape.value(ce).item();
            tape.backward_from(ce, Tensor::scalar(scale))?.accumulate_into(&mut grads);
        }
        Ok(BatchGradient {
            loss: total * scale,
            grads,
        })
    }

    /// Mean loss of `batch` without dropout.
    pub fn batch_loss(&self, batch: &[EncodedInterview]) -> Result<f64> {
        let probs = self.predict(batch)?;
        let mut total = 0.0;
        for (p, iv) in probs.iter().zip(batch) {
            total += loss(p, iv.label)?;
        }
        Ok(total / batch.len().max(1) as f64)
    }

    /// Maximum relative error between backpropagated and central-difference
    /// gradients of the mean loss over `batch`, dropout off.
    pub fn gradcheck(&mut self, batch: &[EncodedInterview], eps: f64) -> Result<f64> {
        let analytic = self.batch_gradient(batch, None)?.grads;
        let net = &self.network;
        gradcheck_fn(&mut self.store, eps, &analytic, |store| {
            let mut total = 0.0;
            for iv in batch {
                let mut tape = Tape::new();
                let ce = net.interview_loss(&mut tape, store, iv, None)?;
                total += tape.value(ce).item();
            }
            Ok::<_, Error>(total / batch.len() as f64)
        })
    }
}
