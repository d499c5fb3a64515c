//! Document encoder: embedding lookup, bidirectional LSTM and attention
//! weighted mean pooling into one representative vector per document.
//!
//! All functions work on a day of `n` documents at once. Position `ℓ` of every
//! document forms one `[n × d]` row block, so each LSTM step is a single
//! matrix product for the whole day. Rows past a document's length are
//! masked: the forward direction's outputs there are zeroed, and the backward
//! direction holds its state at exact zero until the document's last token,
//! so trailing padding never changes a document's encoding.

use std::io::BufRead;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DocumentBatch, Vocab};
use crate::lstm::{lstm_step, LstmState, LstmVars};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Token id reserved for padding.
pub const PAD_ID: usize = 0;
/// Token id for out-of-vocabulary words.
pub const UNK_ID: usize = 1;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    Vocabulary { id: usize, vocab_size: usize },
    #[error("document has no tokens")]
    EmptyDocument,
    #[error("document {index}: {source}")]
    Document {
        index: usize,
        #[source]
        source: Box<TextError>,
    },
    #[error("embedding table needs at least 2 rows and a zero padding row")]
    BadTable,
    #[error("embedding file line {line}: expected {expected} values, found {found}")]
    EmbeddingDim {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("embedding file line {line}: {msg}")]
    EmbeddingParse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Divisor applied after the attention-weighted sum of token states.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolDivisor {
    /// The document's own token count.
    #[default]
    ActualLen,
    /// The configured maximum document length, for every document.
    MaxLen,
}

impl std::str::FromStr for PoolDivisor {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "actual_len" => Ok(PoolDivisor::ActualLen),
            "max_len" => Ok(PoolDivisor::MaxLen),
            _ => Err(format!("unknown pool divisor {s:?} (actual_len, max_len)")),
        }
    }
}

/// Word embedding matrix, one row per vocabulary id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    table: Tensor,
}

/// Outcome of reading a pre-trained embedding file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EmbeddingLoadStats {
    pub matched: usize,
    pub skipped: usize,
}

impl EmbeddingTable {
    pub fn new(table: Tensor) -> Result<Self, TextError> {
        let shape = table.shape();
        if shape.len() != 2 || shape[0] < 2 {
            return Err(TextError::BadTable);
        }
        if table.data()[..shape[1]].iter().any(|&x| x != 0.0) {
            return Err(TextError::BadTable);
        }
        Ok(Self { table })
    }

    /// Uniform(−1, 1) rows with the padding row zeroed. A lookup reads a
    /// single weight per output, so the fan-in bound is 1.
    pub fn random(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Result<Self, TextError> {
        let table = Tensor::from_fn(vec![vocab_size, dim], |i| {
            if i < dim {
                0.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        })?;
        Self::new(table)
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.table
    }

    pub fn into_tensor(self) -> Tensor {
        self.table
    }

    /// Overwrites rows of words found in a GloVe-style text file.
    pub fn load_glove(&mut self, reader: impl BufRead, vocab: &Vocab) -> Result<EmbeddingLoadStats, TextError> {
        load_embeddings(reader, vocab, &mut self.table)
    }
}

/// Reads `token v1 … vd` lines into the rows of `table` belonging to known
/// vocabulary words. Unknown tokens are skipped; rows of words absent from
/// the file are left untouched. The reserved padding and unknown rows are
/// never overwritten.
pub fn load_embeddings(
    reader: impl BufRead,
    vocab: &Vocab,
    table: &mut Tensor,
) -> Result<EmbeddingLoadStats, TextError> {
    let dim = table.shape()[1];
    let rows = table.shape()[0];
    let mut stats = EmbeddingLoadStats::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(TextError::EmbeddingDim {
                line: lineno + 1,
                expected: dim,
                found: values.len(),
            });
        }
        match vocab.get(token) {
            Some(id) if id > UNK_ID && id < rows => {
                let row = &mut table.data_mut()[id * dim..(id + 1) * dim];
                for (dst, src) in row.iter_mut().zip(&values) {
                    *dst = src.parse().map_err(|e: std::num::ParseFloatError| {
                        TextError::EmbeddingParse {
                            line: lineno + 1,
                            msg: e.to_string(),
                        }
                    })?;
                }
                stats.matched += 1;
            }
            _ => stats.skipped += 1,
        }
    }
    Ok(stats)
}

/// First-column tokens of an embedding file, for restricting a vocabulary
/// to words that have vectors.
pub fn embedding_words(reader: impl BufRead) -> Result<std::collections::HashSet<String>, TextError> {
    let mut words = std::collections::HashSet::new();
    for line in reader.lines() {
        if let Some(t) = line?.split_whitespace().next() {
            words.insert(t.to_owned());
        }
    }
    Ok(words)
}

/// Tape handles of the encoder parameters.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub fwd: LstmVars,
    pub bwd: LstmVars,
    /// `[2d_h × 2d_h]` pooling projection.
    pub pool_w: Var,
    /// `[2d_h]` pooling bias, shared by all positions.
    pub pool_b: Var,
    /// `[2d_h]` pooling context vector.
    pub pool_u: Var,
}

/// Encoded day: one representative row per document plus word attention.
#[derive(Clone, Debug)]
pub struct DocRepresentation {
    /// `[n × 2d_h]`
    pub vectors: Var,
    /// `[n × K']` where `K'` is the longest document of the day; zero past
    /// each document's length.
    pub word_attention: Var,
    pub lengths: Vec<usize>,
}

impl DocRepresentation {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }
}

/// Rows of `table` for `ids`; the padding row gets no gradient.
pub fn embed_lookup<T: Scalar>(tape: &mut Tape<'_, T>, table: Var, ids: &[usize]) -> Result<Var, TextError> {
    let vocab_size = tape.shape(table)[0];
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
        return Err(TextError::Vocabulary { id, vocab_size });
    }
    Ok(tape.gather_rows(table, ids, Some(PAD_ID))?)
}

/// Runs both LSTM directions over position blocks `xs[ℓ]` (`[n × d_w]`).
/// Returns one `[n × 2d_h]` block per position holding `[→h_ℓ, ←h_ℓ]`, zero
/// past each document's length.
pub fn bilstm_positions<T: Scalar>(
    tape: &mut Tape<'_, T>,
    xs: &[Var],
    lengths: &[usize],
    enc: &EncoderVars,
) -> Result<Vec<Var>, TextError> {
    if let Some(index) = lengths.iter().position(|&l| l == 0) {
        return Err(TextError::Document {
            index,
            source: Box::new(TextError::EmptyDocument),
        });
    }
    let n = lengths.len();
    let hidden = tape.shape(enc.fwd.w_h)[1];
    let steps = xs.len();
    let keep_at = |pos: usize| -> Vec<bool> { lengths.iter().map(|&l| pos < l).collect() };

    let mut fwd_out = Vec::with_capacity(steps);
    let mut state = LstmState::zeros(tape, n, hidden)?;
    for (pos, &x) in xs.iter().enumerate() {
        state = lstm_step(tape, x, state, enc.fwd, None)?;
        fwd_out.push(tape.mask_rows(state.h, &keep_at(pos))?);
    }

    let mut bwd_out = vec![None; steps];
    let mut state = LstmState::zeros(tape, n, hidden)?;
    for pos in (0..steps).rev() {
        let next = lstm_step(tape, xs[pos], state, enc.bwd, None)?;
        let keep = keep_at(pos);
        state = LstmState {
            c: tape.mask_rows(next.c, &keep)?,
            h: tape.mask_rows(next.h, &keep)?,
        };
        bwd_out[pos] = Some(state.h);
    }

    fwd_out
        .into_iter()
        .zip(bwd_out)
        .map(|(f, b)| Ok(tape.concat(&[f, b.expect("filled above")], 1)?))
        .collect()
}

/// Single-document BiLSTM over `embeds` (`[K × d_w]`); rows at or past
/// `length` are padding. Returns `[K × 2d_h]`.
pub fn bilstm_forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    embeds: Var,
    length: usize,
    enc: &EncoderVars,
) -> Result<Var, TextError> {
    if length == 0 {
        return Err(TextError::EmptyDocument);
    }
    let k = tape.shape(embeds)[0];
    let xs = (0..k)
        .map(|pos| tape.slice(embeds, 0, pos, 1))
        .collect::<Result<Vec<_>, _>>()?;
    let hs = bilstm_positions(tape, &xs, &[length.min(k)], enc).map_err(unwrap_doc)?;
    Ok(tape.concat(&hs, 0)?)
}

fn unwrap_doc(e: TextError) -> TextError {
    match e {
        TextError::Document { source, .. } => *source,
        other => other,
    }
}

/// Attention-weighted mean pooling over position blocks `hs[ℓ]`
/// (`[n × 2d_h]`). Returns `s` (`[n × 2d_h]`) and `β` (`[n × K']`).
pub fn pool_positions<T: Scalar>(
    tape: &mut Tape<'_, T>,
    hs: &[Var],
    lengths: &[usize],
    enc: &EncoderVars,
    divisor: PoolDivisor,
    max_len: usize,
) -> Result<(Var, Var), TextError> {
    let steps = hs.len();
    let mut scores = Vec::with_capacity(steps);
    for &h in hs {
        let proj = tape.matmul_nt(h, enc.pool_w)?;
        let proj = tape.add_row(proj, enc.pool_b)?;
        let act = tape.tanh(proj);
        scores.push(tape.matmul_nt(act, enc.pool_u)?);
    }
    let logits = tape.concat(&scores, 1)?;
    let mask: Vec<bool> = lengths
        .iter()
        .flat_map(|&l| (0..steps).map(move |pos| pos < l))
        .collect();
    let beta = tape.masked_softmax(logits, &mask)?;

    let mut sum: Option<Var> = None;
    for (pos, &h) in hs.iter().enumerate() {
        let w = tape.slice(beta, 1, pos, 1)?;
        let term = tape.scale_rows(h, w)?;
        sum = Some(match sum {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let sum = sum.ok_or(TextError::EmptyDocument)?;
    let inv: Vec<T> = lengths
        .iter()
        .map(|&l| {
            let d = match divisor {
                PoolDivisor::ActualLen => l,
                PoolDivisor::MaxLen => max_len,
            };
            T::one() / T::of(d as f64)
        })
        .collect();
    let inv = tape.constant(inv, &[lengths.len()])?;
    let s = tape.scale_rows(sum, inv)?;
    Ok((s, beta))
}

/// Pools one document's `[K × 2d_h]` hidden states. Returns `s` (`[1 × 2d_h]`)
/// and `β` over the first `length` tokens (`[1 × length]`).
pub fn attention_pool<T: Scalar>(
    tape: &mut Tape<'_, T>,
    hiddens: Var,
    length: usize,
    enc: &EncoderVars,
    divisor: PoolDivisor,
) -> Result<(Var, Var), TextError> {
    if length == 0 {
        return Err(TextError::EmptyDocument);
    }
    let k = tape.shape(hiddens)[0];
    let length = length.min(k);
    let hs = (0..length)
        .map(|pos| tape.slice(hiddens, 0, pos, 1))
        .collect::<Result<Vec<_>, _>>()?;
    let (s, beta) = pool_positions(tape, &hs, &[length], enc, divisor, k)?;
    Ok((s, beta))
}

/// Encodes every document of a day, preserving order.
pub fn encode_documents<T: Scalar>(
    tape: &mut Tape<'_, T>,
    batch: &DocumentBatch,
    table: Var,
    enc: &EncoderVars,
    divisor: PoolDivisor,
) -> Result<DocRepresentation, TextError> {
    let n = batch.len();
    if n == 0 {
        return Err(TextError::EmptyDocument);
    }
    let lengths = batch.lengths().to_vec();
    if let Some(index) = lengths.iter().position(|&l| l == 0) {
        return Err(TextError::Document {
            index,
            source: Box::new(TextError::EmptyDocument),
        });
    }
    // trailing positions that are padding for every document are skipped
    let steps = lengths.iter().copied().max().unwrap_or(0);
    let vocab_size = tape.shape(table)[0];
    let mut xs = Vec::with_capacity(steps);
    for pos in 0..steps {
        let ids: Vec<usize> = (0..n).map(|j| batch.token(j, pos)).collect();
        if let Some(j) = ids.iter().position(|&id| id >= vocab_size) {
            return Err(TextError::Document {
                index: j,
                source: Box::new(TextError::Vocabulary {
                    id: ids[j],
                    vocab_size,
                }),
            });
        }
        xs.push(embed_lookup(tape, table, &ids)?);
    }
    let hs = bilstm_positions(tape, &xs, &lengths, enc)?;
    let (vectors, word_attention) = pool_positions(tape, &hs, &lengths, enc, divisor, batch.max_len())?;
    Ok(DocRepresentation {
        vectors,
        word_attention,
        lengths,
    })
}
