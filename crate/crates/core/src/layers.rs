//! LSTM cells, flat and hierarchical encoders, additive attention and the
//! attentional decoder step shared by all three model components.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Tensor, TensorError};
use crate::vocab::TokenId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("cannot encode an empty sequence")]
    EmptySequence,
    #[error("hierarchical encoder needs at least one sentence")]
    NoSentences,
    #[error("sentence {0} is empty")]
    EmptySentence(usize),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    InvalidToken { id: TokenId, vocab: usize },
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("parameter `{0}` missing or malformed")]
    MissingParam(String),
}

pub type Result<T> = std::result::Result<T, LayerError>;

fn lookup(set: &ParamSet, name: &str, ndim: usize) -> Result<ParamId> {
    let id = set
        .find(name)
        .ok_or_else(|| LayerError::MissingParam(name.to_string()))?;
    if set.get(id).shape().len() != ndim {
        return Err(LayerError::MissingParam(name.to_string()));
    }
    Ok(id)
}

fn expect_shape(set: &ParamSet, id: ParamId, name: &str, shape: &[usize]) -> Result<()> {
    if set.get(id).shape() != shape {
        return Err(LayerError::MissingParam(name.to_string()));
    }
    Ok(())
}

/// Single-layer LSTM weights. Gate blocks are stacked in the order
/// input, forget, cell candidate, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn init<R: Rng + ?Sized>(
        set: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        range: f64,
        rng: &mut R,
    ) -> Self {
        let w_ih = set.push_uniform(&format!("{prefix}.w_ih"), &[4 * hidden, input], range, rng);
        let w_hh = set.push_uniform(&format!("{prefix}.w_hh"), &[4 * hidden, hidden], range, rng);
        let bias = set.push_uniform(&format!("{prefix}.bias"), &[4 * hidden], range, rng);
        Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        }
    }

    pub fn from_set(set: &ParamSet, prefix: &str) -> Result<Self> {
        let name = |s: &str| format!("{prefix}.{s}");
        let w_ih = lookup(set, &name("w_ih"), 2)?;
        let w_hh = lookup(set, &name("w_hh"), 2)?;
        let bias = lookup(set, &name("bias"), 1)?;
        let four_h = set.get(w_ih).shape()[0];
        let input = set.get(w_ih).shape()[1];
        if !four_h.is_multiple_of(4) {
            return Err(LayerError::MissingParam(name("w_ih")));
        }
        let hidden = four_h / 4;
        expect_shape(set, w_hh, &name("w_hh"), &[four_h, hidden])?;
        expect_shape(set, bias, &name("bias"), &[four_h])?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }
}

/// Additive attention: `score_i = v · tanh(q·W_q + m_i·W_m)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub query: ParamId,
    pub memory: ParamId,
    pub score: ParamId,
    pub hidden: usize,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(
        set: &mut ParamSet,
        prefix: &str,
        hidden: usize,
        range: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            query: set.push_uniform(&format!("{prefix}.query"), &[hidden, hidden], range, rng),
            memory: set.push_uniform(&format!("{prefix}.memory"), &[hidden, hidden], range, rng),
            score: set.push_uniform(&format!("{prefix}.score"), &[hidden], range, rng),
            hidden,
        }
    }

    pub fn from_set(set: &ParamSet, prefix: &str) -> Result<Self> {
        let name = |s: &str| format!("{prefix}.{s}");
        let query = lookup(set, &name("query"), 2)?;
        let hidden = set.get(query).shape()[0];
        let memory = lookup(set, &name("memory"), 2)?;
        let score = lookup(set, &name("score"), 1)?;
        expect_shape(set, query, &name("query"), &[hidden, hidden])?;
        expect_shape(set, memory, &name("memory"), &[hidden, hidden])?;
        expect_shape(set, score, &name("score"), &[hidden])?;
        Ok(Self {
            query,
            memory,
            score,
            hidden,
        })
    }
}

/// Encoder output: one memory row per attended unit plus the final state.
#[derive(Debug, Clone, Copy)]
pub struct EncodedContext {
    pub memory: Var,
    pub summary: Var,
    pub rows: usize,
}

fn check_len(tape: &Tape, v: Var, expected: usize, what: &'static str) -> Result<()> {
    let got = tape.value(v).len();
    if got != expected || tape.shape(v).len() != 1 {
        return Err(LayerError::Dimension {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// One LSTM recurrence step. Returns `(h_new, c_new)`.
pub fn lstm_step(
    tape: &mut Tape,
    bound: &Bound,
    p: &LstmParams,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    check_len(tape, x, p.input, "lstm input")?;
    check_len(tape, h_prev, p.hidden, "lstm hidden state")?;
    check_len(tape, c_prev, p.hidden, "lstm cell state")?;
    let h = p.hidden;
    let wx = tape.matmul(bound.var(p.w_ih), x)?;
    let wh = tape.matmul(bound.var(p.w_hh), h_prev)?;
    let pre = tape.add(wx, wh)?;
    let pre = tape.add(pre, bound.var(p.bias))?;
    let i = tape.slice(pre, 0, h)?;
    let f = tape.slice(pre, h, h)?;
    let g = tape.slice(pre, 2 * h, h)?;
    let o = tape.slice(pre, 3 * h, h)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c)?;
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c))
}

/// Runs an LSTM from a zero state over precomputed input vectors.
pub fn encode_vectors(
    tape: &mut Tape,
    bound: &Bound,
    p: &LstmParams,
    inputs: &[Var],
) -> Result<EncodedContext> {
    if inputs.is_empty() {
        return Err(LayerError::EmptySequence);
    }
    let mut h = tape.constant(Tensor::zeros(&[p.hidden]));
    let mut c = tape.constant(Tensor::zeros(&[p.hidden]));
    let mut states = Vec::with_capacity(inputs.len());
    for &x in inputs {
        (h, c) = lstm_step(tape, bound, p, x, h, c)?;
        states.push(h);
    }
    let memory = tape.stack(&states)?;
    Ok(EncodedContext {
        memory,
        summary: h,
        rows: states.len(),
    })
}

fn embed(
    tape: &mut Tape,
    bound: &Bound,
    embedding: ParamId,
    token_ids: &[TokenId],
) -> Result<Vec<Var>> {
    let table = bound.var(embedding);
    let vocab = tape.shape(table)[0];
    token_ids
        .iter()
        .map(|&id| {
            if id >= vocab {
                return Err(LayerError::InvalidToken { id, vocab });
            }
            Ok(tape.gather(table, id)?)
        })
        .collect()
}

/// Word-level encoding of one token sequence.
pub fn encode_sequence(
    tape: &mut Tape,
    bound: &Bound,
    embedding: ParamId,
    p: &LstmParams,
    token_ids: &[TokenId],
) -> Result<EncodedContext> {
    if token_ids.is_empty() {
        return Err(LayerError::EmptySequence);
    }
    let inputs = embed(tape, bound, embedding, token_ids)?;
    encode_vectors(tape, bound, p, &inputs)
}

/// Word-level LSTM per sentence, then a sentence-level LSTM over the
/// per-sentence summaries. Memory rows are the sentence-level states.
pub fn hierarchical_encode(
    tape: &mut Tape,
    bound: &Bound,
    embedding: ParamId,
    word_p: &LstmParams,
    sent_p: &LstmParams,
    sentences: &[Vec<TokenId>],
) -> Result<EncodedContext> {
    if sentences.is_empty() {
        return Err(LayerError::NoSentences);
    }
    if let Some(i) = sentences.iter().position(Vec::is_empty) {
        return Err(LayerError::EmptySentence(i));
    }
    let mut summaries = Vec::with_capacity(sentences.len());
    for s in sentences {
        summaries.push(encode_sequence(tape, bound, embedding, word_p, s)?.summary);
    }
    encode_vectors(tape, bound, sent_p, &summaries)
}

/// Additive attention of `query` over the rows of `memory`.
/// Returns `(context, weights)`.
pub fn attend(
    tape: &mut Tape,
    bound: &Bound,
    p: &AttentionParams,
    query: Var,
    memory: Var,
) -> Result<(Var, Var)> {
    let shape = tape.shape(memory).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(LayerError::EmptySequence);
    }
    let projected = tape.matmul(memory, bound.var(p.memory))?;
    attend_projected(tape, bound, p, query, memory, projected)
}

fn attend_projected(
    tape: &mut Tape,
    bound: &Bound,
    p: &AttentionParams,
    query: Var,
    memory: Var,
    projected: Var,
) -> Result<(Var, Var)> {
    check_len(tape, query, p.hidden, "attention query")?;
    let q = tape.matmul(query, bound.var(p.query))?;
    let pre = tape.add(projected, q)?;
    let act = tape.tanh(pre)?;
    let scores = tape.matmul(act, bound.var(p.score))?;
    let log_w = tape.log_softmax(scores)?;
    let weights = tape.exp(log_w)?;
    let context = tape.matmul(weights, memory)?;
    Ok((context, weights))
}

/// Attentional LSTM decoder with a vocabulary projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderParams {
    pub embedding: ParamId,
    pub lstm: LstmParams,
    pub attention: AttentionParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub vocab: usize,
}

impl DecoderParams {
    pub fn init<R: Rng + ?Sized>(
        set: &mut ParamSet,
        prefix: &str,
        embedding: ParamId,
        hidden: usize,
        range: f64,
        rng: &mut R,
    ) -> Self {
        let shape = set.get(embedding).shape().to_vec();
        let (vocab, emb) = (shape[0], shape[1]);
        let lstm = LstmParams::init(
            set,
            &format!("{prefix}.lstm"),
            emb + hidden,
            hidden,
            range,
            rng,
        );
        let attention =
            AttentionParams::init(set, &format!("{prefix}.attention"), hidden, range, rng);
        let out_w = set.push_uniform(&format!("{prefix}.out_w"), &[vocab, 2 * hidden], range, rng);
        let out_b = set.push_uniform(&format!("{prefix}.out_b"), &[vocab], range, rng);
        Self {
            embedding,
            lstm,
            attention,
            out_w,
            out_b,
            vocab,
        }
    }

    pub fn from_set(set: &ParamSet, prefix: &str, embedding: ParamId) -> Result<Self> {
        let shape = set.get(embedding).shape().to_vec();
        let (vocab, emb) = (shape[0], shape[1]);
        let lstm = LstmParams::from_set(set, &format!("{prefix}.lstm"))?;
        let attention = AttentionParams::from_set(set, &format!("{prefix}.attention"))?;
        let h = lstm.hidden;
        if lstm.input != emb + h {
            return Err(LayerError::MissingParam(format!("{prefix}.lstm.w_ih")));
        }
        if attention.hidden != h {
            return Err(LayerError::MissingParam(format!(
                "{prefix}.attention.query"
            )));
        }
        let out_w = lookup(set, &format!("{prefix}.out_w"), 2)?;
        let out_b = lookup(set, &format!("{prefix}.out_b"), 1)?;
        expect_shape(set, out_w, &format!("{prefix}.out_w"), &[vocab, 2 * h])?;
        expect_shape(set, out_b, &format!("{prefix}.out_b"), &[vocab])?;
        Ok(Self {
            embedding,
            lstm,
            attention,
            out_w,
            out_b,
            vocab,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
}

impl DecoderState {
    /// Hidden state starts at the encoder summary, the cell at zero.
    pub fn from_context(tape: &mut Tape, ctx: &EncodedContext, hidden: usize) -> Self {
        let c = tape.constant(Tensor::zeros(&[hidden]));
        Self { h: ctx.summary, c }
    }
}

/// One decoder step: LSTM over `[embedding(prev); attention(h_prev)]`,
/// projected from `[h_new; context]` to vocabulary log-probabilities.
pub fn decode_step(
    tape: &mut Tape,
    bound: &Bound,
    p: &DecoderParams,
    prev_token: TokenId,
    state: DecoderState,
    ctx: &EncodedContext,
) -> Result<(Var, DecoderState)> {
    let projected = tape.matmul(ctx.memory, bound.var(p.attention.memory))?;
    decode_step_projected(tape, bound, p, prev_token, state, ctx.memory, projected)
}

fn decode_step_projected(
    tape: &mut Tape,
    bound: &Bound,
    p: &DecoderParams,
    prev_token: TokenId,
    state: DecoderState,
    memory: Var,
    projected: Var,
) -> Result<(Var, DecoderState)> {
    if prev_token >= p.vocab {
        return Err(LayerError::InvalidToken {
            id: prev_token,
            vocab: p.vocab,
        });
    }
    let emb = tape.gather(bound.var(p.embedding), prev_token)?;
    let (context, _) = attend_projected(tape, bound, &p.attention, state.h, memory, projected)?;
    let x = tape.concat(&[emb, context])?;
    let (h, c) = lstm_step(tape, bound, &p.lstm, x, state.h, state.c)?;
    let features = tape.concat(&[h, context])?;
    let logits = tape.matmul(bound.var(p.out_w), features)?;
    let logits = tape.add(logits, bound.var(p.out_b))?;
    let log_probs = tape.log_softmax(logits)?;
    Ok((log_probs, DecoderState { h, c }))
}

/// Decoder bound to one encoded source; caches the memory projection.
pub struct DecoderSession<'b> {
    params: DecoderParams,
    bound: &'b Bound,
    memory: Var,
    projected: Var,
    pub state: DecoderState,
}

impl<'b> DecoderSession<'b> {
    pub fn start(
        tape: &mut Tape,
        bound: &'b Bound,
        params: DecoderParams,
        ctx: &EncodedContext,
    ) -> Result<Self> {
        let projected = tape.matmul(ctx.memory, bound.var(params.attention.memory))?;
        let state = DecoderState::from_context(tape, ctx, params.lstm.hidden);
        Ok(Self {
            params,
            bound,
            memory: ctx.memory,
            projected,
            state,
        })
    }

    /// Advances one step and returns the log-probabilities of the next token.
    pub fn step(&mut self, tape: &mut Tape, prev_token: TokenId) -> Result<Var> {
        let (lp, state) = decode_step_projected(
            tape,
            self.bound,
            &self.params,
            prev_token,
            self.state,
            self.memory,
            self.projected,
        )?;
        self.state = state;
        Ok(lp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lstm_set(input: usize, hidden: usize, seed: u64) -> (ParamSet, LstmParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let p = LstmParams::init(&mut set, "l", input, hidden, 0.5, &mut rng);
        (set, p)
    }

    #[test]
    fn zero_params_zero_state() {
        let mut set = ParamSet::new();
        let p = LstmParams {
            w_ih: set.push("w_ih", Tensor::zeros(&[12, 2])),
            w_hh: set.push("w_hh", Tensor::zeros(&[12, 3])),
            bias: set.push("bias", Tensor::zeros(&[12])),
            input: 2,
            hidden: 3,
        };
        let mut tape = Tape::new();
        let b = set.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[2]));
        let h = tape.constant(Tensor::zeros(&[3]));
        let c = tape.constant(Tensor::zeros(&[3]));
        let (h2, c2) = lstm_step(&mut tape, &b, &p, x, h, c).unwrap();
        assert_eq!(tape.value(h2), &[0.0; 3]);
        assert_eq!(tape.value(c2), &[0.0; 3]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut set = ParamSet::new();
        let mut bias = vec![0.0; 8];
        for b in &mut bias[2..4] {
            *b = 50.0;
        }
        let p = LstmParams {
            w_ih: set.push("w_ih", Tensor::zeros(&[8, 1])),
            w_hh: set.push("w_hh", Tensor::zeros(&[8, 2])),
            bias: set.push("bias", Tensor::vector(bias)),
            input: 1,
            hidden: 2,
        };
        let mut tape = Tape::new();
        let b = set.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1]));
        let h = tape.constant(Tensor::zeros(&[2]));
        let c = tape.constant(Tensor::vector(vec![0.7, -1.2]));
        let (h2, c2) = lstm_step(&mut tape, &b, &p, x, h, c).unwrap();
        assert!((tape.value(c2)[0] - 0.7).abs() < 1e-12);
        assert!((tape.value(c2)[1] + 1.2).abs() < 1e-12);
        assert!((tape.value(h2)[0] - 0.5 * 0.7f64.tanh()).abs() < 1e-12);
        assert!((tape.value(h2)[1] - 0.5 * (-1.2f64).tanh()).abs() < 1e-12);
    }

    #[test]
    fn lstm_rejects_bad_dims() {
        let (set, p) = lstm_set(3, 2, 0);
        let mut tape = Tape::new();
        let b = set.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[4]));
        let h = tape.constant(Tensor::zeros(&[2]));
        let c = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            lstm_step(&mut tape, &b, &p, x, h, c),
            Err(LayerError::Dimension { .. })
        ));
    }

    #[test]
    fn encode_shapes_and_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut set = ParamSet::new();
        let emb = set.push_uniform("emb", &[10, 4], 0.5, &mut rng);
        let p = LstmParams::init(&mut set, "enc", 4, 3, 0.5, &mut rng);
        let mut tape = Tape::new();
        let b = set.bind(&mut tape);
        let one = encode_sequence(&mut tape, &b, emb, &p, &[7]).unwrap();
        assert_eq!(tape.shape(one.memory), &[1, 3]);
        assert_eq!(tape.value(one.memory), tape.value(one.summary));
        let five = encode_sequence(&mut tape, &b, emb, &p, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(tape.shape(five.memory), &[5, 3]);
        let three = encode_sequence(&mut tape, &b, emb, &p, &[1, 2, 3]).unwrap();
        assert_eq!(&tape.value(five.memory)[..9], tape.value(three.memory));
        assert!(matches!(
            encode_sequence(&mut tape, &b, emb, &p, &[]),
            Err(LayerError::EmptySequence)
        ));
        assert!(matches!(
            encode_sequence(&mut tape, &b, emb, &p, &[10]),
            Err(LayerError::InvalidToken { .. })
        ));
    }

    #[test]
    fn hierarchical_shapes_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut set = ParamSet::new();
        let emb = set.push_uniform("emb", &[10, 4], 0.5, &mut rng);
        let w = LstmParams::init(&mut set, "w", 4, 3, 0.5, &mut rng);
        let s = LstmParams::init(&mut set, "s", 3, 3, 0.5, &mut rng);
        let mut tape = Tape::new();
        let b = set.bind(&mut tape);
        let single = hierarchical_encode(&mut tape, &b, emb, &w, &s, &[vec![1, 2]]).unwrap();
        assert_eq!(tape.shape(single.memory), &[1, 3]);
        let three = hierarchical_encode(
            &mut tape,
            &b,
            emb,
            &w,
            &s,
            &[vec![1, 2], vec![3], vec![4, 5, 6]],
        )
        .unwrap();
        assert_eq!(tape.shape(three.memory), &[3, 3]);
        assert_eq!(&tape.value(three.memory)[6..9], tape.value(three.summary));
        assert!(matches!(
            hierarchical_encode(&mut tape, &b, emb, &w, &s, &[]),
            Err(LayerError::NoSentences)
        ));
        assert!(matches!(
            hierarchical_encode(&mut tape, &b, emb, &w, &s, &[vec![1], vec![]]),
            Err(LayerError::EmptySentence(1))
        ));
    }

    #[test]
    fn attention_single_and_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut set = ParamSet::new();
        let ap = AttentionParams::init(&mut set, "a", 3, 0.5, &mut rng);
        let mut tape = Tape::new();
        let b = set.bind(&mut tape);
        let q = tape.constant(Tensor::vector(vec![0.3, -0.2, 0.9]));
        let one = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let (ctx, w) = attend(&mut tape, &b, &ap, q, one).unwrap();
        assert!((tape.value(w)[0] - 1.0).abs() < 1e-15);
        assert!(tape
            .value(ctx)
            .iter()
            .zip([1.0, 2.0, 3.0])
            .all(|(a, b)| (a - b).abs() < 1e-12));
        let two =
            tape.constant(Tensor::matrix(2, 3, vec![0.5, -0.5, 0.1, 0.5, -0.5, 0.1]).unwrap());
        let (_, w2) = attend(&mut tape, &b, &ap, q, two).unwrap();
        assert!((tape.value(w2)[0] - 0.5).abs() < 1e-15);
        assert!((tape.value(w2)[1] - 0.5).abs() < 1e-15);
    }
}
