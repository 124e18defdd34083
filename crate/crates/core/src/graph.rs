//! Sentence-level relational graph for one QA session.
//!
//! Vertices are ordered `q_1..q_cQ, a_1..a_cA`. An edge `(i, j)` means
//! vertex `i` aggregates from source `j`. Each vertex receives edges from
//! every `j` in `[i - past, i + future]`, itself included.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{init_uniform, ParamId, ParamStore, Tape, Tensor, Var};
use crate::text::Part;

/// Edge category from the parts of both endpoints and their order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationType {
    /// Both in the question, target before source.
    QqFwd,
    /// Both in the question otherwise, self-loops included.
    QqOther,
    /// Question target, answer source.
    Qa,
    /// Answer target, question source.
    Aq,
    AaFwd,
    AaOther,
}

impl RelationType {
    pub const ALL: [RelationType; 6] = [
        RelationType::QqFwd,
        RelationType::QqOther,
        RelationType::Qa,
        RelationType::Aq,
        RelationType::AaFwd,
        RelationType::AaOther,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationType::QqFwd => "QQ_FWD",
            RelationType::QqOther => "QQ_OTHER",
            RelationType::Qa => "QA",
            RelationType::Aq => "AQ",
            RelationType::AaFwd => "AA_FWD",
            RelationType::AaOther => "AA_OTHER",
        }
    }

    pub fn group(self) -> RelationGroup {
        match self {
            RelationType::QqFwd | RelationType::QqOther => RelationGroup::Rqq,
            RelationType::Qa | RelationType::Aq => RelationGroup::Rqa,
            RelationType::AaFwd | RelationType::AaOther => RelationGroup::Raa,
        }
    }

    /// Relation of the edge whose target has part `target` at concatenated
    /// position `i` and whose source has part `source` at position `j`.
    pub fn classify(target: Part, i: usize, source: Part, j: usize) -> Self {
        match (target, source) {
            (Part::Question, Part::Question) if i < j => RelationType::QqFwd,
            (Part::Question, Part::Question) => RelationType::QqOther,
            (Part::Question, Part::Answer) => RelationType::Qa,
            (Part::Answer, Part::Question) => RelationType::Aq,
            (Part::Answer, Part::Answer) if i < j => RelationType::AaFwd,
            (Part::Answer, Part::Answer) => RelationType::AaOther,
        }
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Removable relation groups. Self-loops are never removed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationGroup {
    #[serde(rename = "RQQ")]
    Rqq,
    #[serde(rename = "RAA")]
    Raa,
    #[serde(rename = "RQA")]
    Rqa,
}

impl FromStr for RelationGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RQQ" => Ok(Self::Rqq),
            "RAA" => Ok(Self::Raa),
            "RQA" => Ok(Self::Rqa),
            other => Err(Error::Config(format!("unknown relation group `{other}`"))),
        }
    }
}

impl fmt::Display for RelationGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rqq => "RQQ",
            Self::Raa => "RAA",
            Self::Rqa => "RQA",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    /// 0-based target vertex.
    pub target: usize,
    /// 0-based source vertex.
    pub source: usize,
    pub relation: RelationType,
}

impl Edge {
    pub fn is_self_loop(&self) -> bool {
        self.target == self.source
    }
}

/// Directed, relation-typed edge structure of a session graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaGraph {
    pub questions: usize,
    pub answers: usize,
    pub past: usize,
    pub future: usize,
    /// Sorted by `(target, source)`.
    pub edges: Vec<Edge>,
}

impl QaGraph {
    pub fn build(questions: usize, answers: usize, past: usize, future: usize, removed: &BTreeSet<RelationGroup>) -> Result<Self> {
        if questions == 0 || answers == 0 {
            return Err(Error::EmptySide { questions, answers });
        }
        let n = questions + answers;
        let part = |v: usize| if v < questions { Part::Question } else { Part::Answer };
        let mut edges = Vec::new();
        for i in 0..n {
            let lo = i.saturating_sub(past);
            let hi = (i + future).min(n - 1);
            for j in lo..=hi {
                let relation = RelationType::classify(part(i), i, part(j), j);
                if i != j && removed.contains(&relation.group()) {
                    continue;
                }
                edges.push(Edge {
                    target: i,
                    source: j,
                    relation,
                });
            }
        }
        Ok(Self {
            questions,
            answers,
            past,
            future,
            edges,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.questions + self.answers
    }

    pub fn part(&self, v: usize) -> Part {
        if v < self.questions {
            Part::Question
        } else {
            Part::Answer
        }
    }

    /// `N x N` with 1 where `(target, source)` is an edge.
    pub fn adjacency(&self) -> Tensor {
        let n = self.num_vertices();
        let mut m = Tensor::zeros(n, n);
        for e in &self.edges {
            m.set(e.target, e.source, 1.0);
        }
        m
    }

    /// Non-self neighbours of `target` under `relation`.
    pub fn neighbours(&self, target: usize, relation: RelationType) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .iter()
            .filter(move |e| e.target == target && e.relation == relation && !e.is_self_loop())
            .map(|e| e.source)
    }

    /// `N x N` with `1 / c_{i,r}` at every non-self edge of `relation`, or
    /// `None` when the relation has no such edge.
    pub fn relation_coefficients(&self, relation: RelationType) -> Option<Tensor> {
        let n = self.num_vertices();
        let mut m = Tensor::zeros(n, n);
        let mut any = false;
        for i in 0..n {
            let js: Vec<usize> = self.neighbours(i, relation).collect();
            for &j in &js {
                m.set(i, j, 1.0 / js.len() as f64);
                any = true;
            }
        }
        any.then_some(m)
    }

    /// Text dump: a header line, then `i j relation weight` per edge with
    /// 1-based vertices.
    pub fn dump(&self, weights: &Tensor) -> String {
        let mut out = format!(
            "graph cQ={} cA={} p={} f={}\n",
            self.questions, self.answers, self.past, self.future
        );
        for e in &self.edges {
            writeln!(
                out,
                "{} {} {} {:.6}",
                e.target + 1,
                e.source + 1,
                e.relation,
                weights.get(e.target, e.source)
            )
            .expect("write to string");
        }
        out
    }
}

/// Attention edge weights `alpha = masked_softmax(G W_e G^T)`; every row
/// sums to one over the vertex's incoming edges.
pub fn edge_weights(tape: &mut Tape<'_>, features: Var, w_e: Var, graph: &QaGraph) -> Result<Var> {
    let n = tape.value(features).rows();
    if n != graph.num_vertices() {
        return Err(Error::Data(format!(
            "{n} vertex features for a graph of {} vertices",
            graph.num_vertices()
        )));
    }
    let gw = tape.matmul(features, w_e)?;
    let gt = tape.transpose(features)?;
    let scores = tape.matmul(gw, gt)?;
    Ok(tape.masked_softmax(scores, &graph.adjacency())?)
}

/// Weights of `1 / in-degree` on every edge, as produced by identical
/// vertex features.
pub fn uniform_edge_weights(graph: &QaGraph) -> Tensor {
    let n = graph.num_vertices();
    let mut degree = vec![0usize; n];
    for e in &graph.edges {
        degree[e.target] += 1;
    }
    let mut m = Tensor::zeros(n, n);
    for e in &graph.edges {
        m.set(e.target, e.source, 1.0 / degree[e.target] as f64);
    }
    m
}

/// Value-level [`edge_weights`].
pub fn edge_weight_values(features: &Tensor, w_e: &Tensor, graph: &QaGraph) -> Result<Tensor> {
    let mut tape = Tape::new();
    let g = tape.leaf(features.clone());
    let w = tape.leaf(w_e.clone());
    let a = edge_weights(&mut tape, g, w, graph)?;
    Ok(tape.value(a).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Relation-specific transforms for one convolution layer, `d x d` each.
#[derive(Clone, Debug)]
pub struct RgcnParams {
    pub relations: [ParamId; 6],
    pub self_loop: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundRgcn {
    pub relations: [Var; 6],
    pub self_loop: Var,
}

impl RgcnParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let relations = RelationType::ALL
            .map(|r| store.insert(format!("{prefix}.w_{}", r.name().to_lowercase()), init_uniform(dim, dim, bound, rng)));
        Self {
            relations,
            self_loop: store.insert(format!("{prefix}.w_self"), init_uniform(dim, dim, bound, rng)),
        }
    }

    pub fn bind<'t>(&self, tape: &mut Tape<'t>, store: &'t ParamStore) -> BoundRgcn {
        BoundRgcn {
            relations: self.relations.map(|id| tape.param(store, id)),
            self_loop: tape.param(store, self.self_loop),
        }
    }
}

/// One relational convolution:
/// `h_i = act(sum_r sum_{j in N_i^r} alpha_ij / c_ir * g_j W_r + alpha_ii g_i W_0)`.
pub fn rgcn_forward(
    tape: &mut Tape<'_>,
    features: Var,
    alpha: Var,
    graph: &QaGraph,
    params: &BoundRgcn,
    activation: Activation,
) -> Result<Var> {
    let n = graph.num_vertices();
    let self_mask = tape.leaf(Tensor::identity(n));
    let self_alpha = tape.mul(alpha, self_mask)?;
    let self_agg = tape.matmul(self_alpha, features)?;
    let mut total = tape.matmul(self_agg, params.self_loop)?;
    for relation in RelationType::ALL {
        let Some(coef) = graph.relation_coefficients(relation) else {
            continue;
        };
        let coef = tape.leaf(coef);
        let weights = tape.mul(alpha, coef)?;
        let agg = tape.matmul(weights, features)?;
        let msg = tape.matmul(agg, params.relations[relation.index()])?;
        total = tape.add(total, msg)?;
    }
    Ok(match activation {
        Activation::Relu => tape.relu(total),
        Activation::Identity => total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(g: &QaGraph, r: RelationType) -> Vec<(usize, usize)> {
        g.edges
            .iter()
            .filter(|e| e.relation == r)
            .map(|e| (e.target + 1, e.source + 1))
            .collect()
    }

    #[test]
    fn five_vertex_full_window_matches_relation_table() {
        let g = QaGraph::build(2, 3, 10, 10, &BTreeSet::new()).unwrap();
        assert_eq!(g.edges.len(), 25);
        assert_eq!(pairs(&g, RelationType::QqFwd), vec![(1, 2)]);
        assert_eq!(pairs(&g, RelationType::QqOther), vec![(1, 1), (2, 1), (2, 2)]);
        assert_eq!(
            pairs(&g, RelationType::Qa),
            vec![(1, 3), (1, 4), (1, 5), (2, 3), (2, 4), (2, 5)]
        );
        assert_eq!(
            pairs(&g, RelationType::Aq),
            vec![(3, 1), (3, 2), (4, 1), (4, 2), (5, 1), (5, 2)]
        );
        assert_eq!(pairs(&g, RelationType::AaFwd), vec![(3, 4), (3, 5), (4, 5)]);
        assert_eq!(
            pairs(&g, RelationType::AaOther),
            vec![(3, 3), (4, 3), (4, 4), (5, 3), (5, 4), (5, 5)]
        );
    }

    #[test]
    fn zero_window_keeps_only_self_loops() {
        let g = QaGraph::build(1, 1, 0, 0, &BTreeSet::new()).unwrap();
        let rel: Vec<_> = g.edges.iter().map(|e| (e.target, e.source, e.relation)).collect();
        assert_eq!(
            rel,
            vec![(0, 0, RelationType::QqOther), (1, 1, RelationType::AaOther)]
        );
    }

    #[test]
    fn empty_side_is_rejected() {
        assert!(matches!(
            QaGraph::build(0, 3, 1, 1, &BTreeSet::new()),
            Err(Error::EmptySide { questions: 0, answers: 3 })
        ));
        assert!(QaGraph::build(2, 0, 1, 1, &BTreeSet::new()).is_err());
    }

    #[test]
    fn removing_rqa_disconnects_parts() {
        let removed = BTreeSet::from([RelationGroup::Rqa]);
        let g = QaGraph::build(2, 3, 10, 10, &removed).unwrap();
        assert!(g.edges.iter().all(|e| g.part(e.target) == g.part(e.source)));
        assert_eq!(g.edges.len(), 25 - 12);
    }

    #[test]
    fn self_loops_survive_every_ablation() {
        let removed = BTreeSet::from([RelationGroup::Rqa, RelationGroup::Rqq, RelationGroup::Raa]);
        let g = QaGraph::build(3, 4, 10, 10, &removed).unwrap();
        assert_eq!(g.edges.len(), 7);
        assert!(g.edges.iter().all(Edge::is_self_loop));
    }

    #[test]
    fn relation_group_parsing() {
        assert_eq!("rqa".parse::<RelationGroup>().unwrap(), RelationGroup::Rqa);
        assert!("RXX".parse::<RelationGroup>().is_err());
    }
}
