//! Sentence encoders: a unidirectional GRU for question sentences and a
//! bidirectional GRU for answer sentences, each followed by a linear map to
//! the node dimension.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{init_uniform, ParamId, ParamStore, Tape, Tensor, Var};
use crate::text::{Part, SentenceTokens};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Registered GRU weights. Gate blocks along the `3H` axis are ordered
/// update, reset, candidate.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub input_weight: ParamId,
    pub input_bias: ParamId,
    pub hidden_weight: ParamId,
    pub hidden_bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGru {
    pub input_weight: Var,
    pub input_bias: Var,
    pub hidden_weight: Var,
    pub hidden_bias: Var,
}

pub struct GruOutput {
    /// `L x H`, row `t` aligned with input row `t`.
    pub states: Var,
    /// `1 x H` state after the whole sequence was consumed.
    pub last: Var,
}

impl GruParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let gates = 3 * hidden;
        Self {
            input_weight: store.insert(
                format!("{prefix}.w_x"),
                init_uniform(input_dim, gates, 1.0 / (input_dim as f64).sqrt(), rng),
            ),
            input_bias: store.insert(format!("{prefix}.b_x"), Tensor::zeros(1, gates)),
            hidden_weight: store.insert(
                format!("{prefix}.w_h"),
                init_uniform(hidden, gates, 1.0 / (hidden as f64).sqrt(), rng),
            ),
            hidden_bias: store.insert(format!("{prefix}.b_h"), Tensor::zeros(1, gates)),
            input_dim,
            hidden,
        }
    }

    pub fn bind<'t>(&self, tape: &mut Tape<'t>, store: &'t ParamStore) -> BoundGru {
        BoundGru {
            input_weight: tape.param(store, self.input_weight),
            input_bias: tape.param(store, self.input_bias),
            hidden_weight: tape.param(store, self.hidden_weight),
            hidden_bias: tape.param(store, self.hidden_bias),
        }
    }
}

/// `rows W_x + b_x` for a matrix of input rows.
pub fn project_inputs(tape: &mut Tape<'_>, rows: Var, gru: &BoundGru) -> Result<Var> {
    let x = tape.matmul(rows, gru.input_weight)?;
    Ok(tape.add(x, gru.input_bias)?)
}

/// Runs the recurrence over inputs that already went through
/// [`project_inputs`].
pub fn gru_from_projection(tape: &mut Tape<'_>, xproj: Var, gru: &BoundGru, dir: Direction) -> Result<GruOutput> {
    let reverse = dir == Direction::Backward;
    let states = tape.gru(xproj, gru.hidden_weight, gru.hidden_bias, reverse)?;
    let len = tape.value(states).rows();
    let last = tape.row(states, if reverse { 0 } else { len - 1 })?;
    Ok(GruOutput { states, last })
}

/// GRU over `L x input_dim` rows starting from a zero hidden state.
pub fn gru_forward(tape: &mut Tape<'_>, inputs: Var, gru: &BoundGru, dir: Direction) -> Result<GruOutput> {
    if tape.value(inputs).rows() == 0 {
        return Err(crate::numerics::NumericsError::EmptySequence.into());
    }
    let xproj = project_inputs(tape, inputs, gru)?;
    gru_from_projection(tape, xproj, gru, dir)
}

/// Affine map `x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: store.insert(
                format!("{prefix}.w"),
                init_uniform(input, output, 1.0 / (input as f64).sqrt(), rng),
            ),
            bias: store.insert(format!("{prefix}.b"), Tensor::zeros(1, output)),
        }
    }

    pub fn bind<'t>(&self, tape: &mut Tape<'t>, store: &'t ParamStore) -> BoundLinear {
        BoundLinear {
            weight: tape.param(store, self.weight),
            bias: tape.param(store, self.bias),
        }
    }
}

impl BoundLinear {
    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        Ok(tape.add(y, self.bias)?)
    }
}

/// Encoded sentence in node space.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceVector {
    pub values: Vec<f64>,
    pub part: Part,
    pub index: usize,
}

/// Question GRU, forward and backward answer GRUs, and the two projections.
#[derive(Clone, Debug)]
pub struct SentenceEncoder {
    pub question: GruParams,
    pub answer_forward: GruParams,
    pub answer_backward: GruParams,
    pub question_proj: Linear,
    pub answer_proj: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundEncoder {
    pub question: BoundGru,
    pub answer_forward: BoundGru,
    pub answer_backward: BoundGru,
    pub question_proj: BoundLinear,
    pub answer_proj: BoundLinear,
}

/// Input projections of every row of a token table, one per GRU.
///
/// Projecting the whole table once and gathering rows per sentence is
/// equivalent to projecting each embedded sentence.
#[derive(Clone, Copy, Debug)]
pub struct TokenTables {
    pub question: Var,
    pub answer_forward: Var,
    pub answer_backward: Var,
}

impl SentenceEncoder {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        embed_dim: usize,
        hidden: usize,
        node_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            question: GruParams::register(store, "encoder.question_gru", embed_dim, hidden, rng),
            answer_forward: GruParams::register(store, "encoder.answer_gru_fwd", embed_dim, hidden, rng),
            answer_backward: GruParams::register(store, "encoder.answer_gru_bwd", embed_dim, hidden, rng),
            question_proj: Linear::register(store, "encoder.question_proj", hidden, node_dim, rng),
            answer_proj: Linear::register(store, "encoder.answer_proj", 2 * hidden, node_dim, rng),
        }
    }

    pub fn bind<'t>(&self, tape: &mut Tape<'t>, store: &'t ParamStore) -> BoundEncoder {
        BoundEncoder {
            question: self.question.bind(tape, store),
            answer_forward: self.answer_forward.bind(tape, store),
            answer_backward: self.answer_backward.bind(tape, store),
            question_proj: self.question_proj.bind(tape, store),
            answer_proj: self.answer_proj.bind(tape, store),
        }
    }

    /// Value-level encoding of one sentence given its embedded rows.
    pub fn encode_sentence_values(
        &self,
        store: &ParamStore,
        embedded: &Tensor,
        part: Part,
        index: usize,
    ) -> Result<SentenceVector> {
        let mut tape = Tape::new();
        let enc = self.bind(&mut tape, store);
        let rows = tape.leaf(embedded.clone());
        let tables = enc.project_tables(&mut tape, rows)?;
        let ids: Vec<usize> = (0..embedded.rows()).collect();
        let v = match part {
            Part::Question => enc.encode_questions(&mut tape, &tables, &[ids])?,
            Part::Answer => enc.encode_answers(&mut tape, &tables, &[ids])?,
        };
        Ok(SentenceVector {
            values: tape.value(v).data().to_vec(),
            part,
            index,
        })
    }
}

impl BoundEncoder {
    pub fn project_tables(&self, tape: &mut Tape<'_>, table: Var) -> Result<TokenTables> {
        Ok(TokenTables {
            question: project_inputs(tape, table, &self.question)?,
            answer_forward: project_inputs(tape, table, &self.answer_forward)?,
            answer_backward: project_inputs(tape, table, &self.answer_backward)?,
        })
    }

    /// Last hidden state of the question GRU for each sentence, projected;
    /// `n x d_s`.
    pub fn encode_questions(&self, tape: &mut Tape<'_>, tables: &TokenTables, sentences: &[Vec<usize>]) -> Result<Var> {
        let (ids, lengths) = flatten(sentences)?;
        let x = tape.gather_rows(tables.question, &ids)?;
        let q = &self.question;
        let last = tape.gru_last(x, &lengths, q.hidden_weight, q.hidden_bias, false)?;
        self.question_proj.apply(tape, last)
    }

    /// Concatenated forward/backward last states for each answer sentence,
    /// projected; `n x d_s`.
    pub fn encode_answers(&self, tape: &mut Tape<'_>, tables: &TokenTables, sentences: &[Vec<usize>]) -> Result<Var> {
        let (ids, lengths) = flatten(sentences)?;
        let (f, b) = (&self.answer_forward, &self.answer_backward);
        let xf = tape.gather_rows(tables.answer_forward, &ids)?;
        let fwd = tape.gru_last(xf, &lengths, f.hidden_weight, f.hidden_bias, false)?;
        let xb = tape.gather_rows(tables.answer_backward, &ids)?;
        let bwd = tape.gru_last(xb, &lengths, b.hidden_weight, b.hidden_bias, true)?;
        let both = tape.concat(&[fwd, bwd], 1)?;
        self.answer_proj.apply(tape, both)
    }
}

fn flatten(sentences: &[Vec<usize>]) -> Result<(Vec<usize>, Vec<usize>)> {
    if sentences.is_empty() {
        return Err(Error::EmptySide {
            questions: 0,
            answers: 0,
        });
    }
    let lengths: Vec<usize> = sentences.iter().map(Vec::len).collect();
    if lengths.contains(&0) {
        return Err(Error::EmptyUtterance);
    }
    Ok((sentences.concat(), lengths))
}

/// Convenience for encoding a [`SentenceTokens`] against an embedding matrix.
pub fn encode_tokens(
    encoder: &SentenceEncoder,
    store: &ParamStore,
    embedding: &crate::text::EmbeddingTable,
    sentence: &SentenceTokens,
) -> Result<SentenceVector> {
    let embedded = embedding.embed(sentence)?;
    encoder.encode_sentence_values(store, &embedded, sentence.part, sentence.index)
}
