//! LSTM cells, the Seq2Seq encoder–decoder, and the autoencoder view that
//! reuses the same decoder.
//!
//! Gate rows of every weight matrix are stacked `[i; f; o; l]`, K rows each.
//! The base cell consumes `[h_{t-1}; x_t]` (2K columns); the persona cell
//! additionally consumes the speaker embedding, `[h_{t-1}; e_t; s_i]` (3K).
//! In a persona model every decoder layer is a persona cell.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{SpeakerTable, TokenizedExample, BOS, PAD};
use crate::tensor::{kernels, ParamRef, Parameters, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("source sequence is empty")]
    EmptySource,
    #[error("target sequence is empty")]
    EmptyTarget,
    #[error("persona model requires a speaker index")]
    MissingSpeaker,
    #[error("model has no speaker table but example carries speaker {0}")]
    UnexpectedSpeaker(usize),
    #[error("speaker {index} out of range for table of {size}")]
    SpeakerOutOfRange { index: usize, size: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("model has no autoencoder encoder")]
    NoAutoencoder,
    #[error("{0}")]
    Shape(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    /// K: hidden, word-embedding and speaker-embedding size.
    pub hidden: usize,
    pub vocab: usize,
    /// Rows of the speaker table; 0 for a speaker-free model.
    pub speakers: usize,
}

impl ModelConfig {
    pub fn persona(&self) -> bool {
        self.speakers > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// 4K × (blocks·K) gate weights.
    pub w: Tensor,
    /// 4K × 1 gate biases.
    pub b: Tensor,
}

impl LstmParams {
    /// Zero cell taking `input_blocks` K-vectors besides the recurrent state.
    pub fn zeros(hidden: usize, input_blocks: usize) -> Self {
        LstmParams {
            w: Tensor::zeros(&[4 * hidden, (1 + input_blocks) * hidden]),
            b: Tensor::zeros(&[4 * hidden, 1]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w.rows() / 4
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn is_persona(&self) -> bool {
        self.input_dim() == 3 * self.hidden()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState { h: Tensor::zeros(&[hidden, 1]), c: Tensor::zeros(&[hidden, 1]) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqParams {
    pub config: ModelConfig,
    /// V × K; row t is e_t.
    pub word_embeddings: Tensor,
    pub encoder: Vec<LstmParams>,
    pub decoder: Vec<LstmParams>,
    /// V × K output projection (not tied to the input embeddings).
    pub output_w: Tensor,
    pub output_b: Tensor,
    /// S × K; row i is s_i.
    pub speakers: Option<Tensor>,
}

impl Seq2SeqParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let k = config.hidden;
        let dec_blocks = if config.persona() { 2 } else { 1 };
        Seq2SeqParams {
            config,
            word_embeddings: Tensor::zeros(&[config.vocab, k]),
            encoder: (0..config.layers).map(|_| LstmParams::zeros(k, 1)).collect(),
            decoder: (0..config.layers).map(|_| LstmParams::zeros(k, dec_blocks)).collect(),
            output_w: Tensor::zeros(&[config.vocab, k]),
            output_b: Tensor::zeros(&[config.vocab, 1]),
            speakers: config.persona().then(|| Tensor::zeros(&[config.speakers, k])),
        }
    }
}

/// A Seq2Seq model plus the optional untied autoencoder encoder and the
/// speaker names indexing its speaker table.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub seq2seq: Seq2SeqParams,
    pub ae_encoder: Option<Vec<LstmParams>>,
    pub speakers: SpeakerTable,
}

impl Model {
    pub fn zeros(config: ModelConfig, with_autoencoder: bool) -> Self {
        Model {
            seq2seq: Seq2SeqParams::zeros(config),
            ae_encoder: with_autoencoder.then(|| (0..config.layers).map(|_| LstmParams::zeros(config.hidden, 1)).collect()),
            speakers: SpeakerTable::default(),
        }
    }

    pub fn config(&self) -> ModelConfig {
        self.seq2seq.config
    }

    /// Registers every parameter on the tape under its index in `tensors()`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> ModelVars {
        let vars: Vec<Var> = self.tensors().iter().enumerate().map(|(k, p)| tape.param(k, p.tensor)).collect();
        let mut it = vars.into_iter();
        let mut next = || it.next().expect("parameter layout");
        let layers = self.seq2seq.config.layers;
        let word_embeddings = next();
        let encoder = (0..layers).map(|_| LstmVars { w: next(), b: next() }).collect();
        let decoder = (0..layers).map(|_| LstmVars { w: next(), b: next() }).collect();
        let output_w = next();
        let output_b = next();
        let speakers = self.seq2seq.speakers.as_ref().map(|_| next());
        let ae_encoder = self.ae_encoder.as_ref().map(|enc| enc.iter().map(|_| LstmVars { w: next(), b: next() }).collect());
        ModelVars {
            hidden: self.seq2seq.config.hidden,
            vocab: self.seq2seq.config.vocab,
            word_embeddings,
            encoder,
            decoder,
            output_w,
            output_b,
            speakers,
            ae_encoder,
        }
    }

    /// Index of the first speaker-table row among `tensors()`, if any.
    pub fn speaker_table_key(&self) -> Option<usize> {
        self.seq2seq.speakers.as_ref().map(|_| 1 + 4 * self.seq2seq.config.layers + 2)
    }

    /// Keys of the Seq2Seq encoder parameters.
    pub fn encoder_keys(&self) -> std::ops::Range<usize> {
        1..1 + 2 * self.seq2seq.config.layers
    }

    /// Keys of the shared decoder (cells, output projection, speaker table).
    pub fn decoder_keys(&self) -> std::ops::Range<usize> {
        let l = self.seq2seq.config.layers;
        let end = 1 + 4 * l + 2 + usize::from(self.seq2seq.speakers.is_some());
        1 + 2 * l..end
    }

    pub fn ae_encoder_keys(&self) -> std::ops::Range<usize> {
        let start = self.decoder_keys().end;
        let n = self.ae_encoder.as_ref().map_or(0, |e| 2 * e.len());
        start..start + n
    }
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<ParamRef<'_>> {
        let s = &self.seq2seq;
        let dense = |name: String, tensor| ParamRef { name, tensor, row_sparse: false };
        let mut out = vec![ParamRef { name: "word_embeddings".into(), tensor: &s.word_embeddings, row_sparse: true }];
        for (prefix, layers) in [("encoder", &s.encoder), ("decoder", &s.decoder)] {
            for (l, p) in layers.iter().enumerate() {
                out.push(dense(format!("{prefix}.{l}.w"), &p.w));
                out.push(dense(format!("{prefix}.{l}.b"), &p.b));
            }
        }
        out.push(dense("output.w".into(), &s.output_w));
        out.push(dense("output.b".into(), &s.output_b));
        if let Some(t) = &s.speakers {
            out.push(ParamRef { name: "speakers".into(), tensor: t, row_sparse: true });
        }
        if let Some(enc) = &self.ae_encoder {
            for (l, p) in enc.iter().enumerate() {
                out.push(dense(format!("ae_encoder.{l}.w"), &p.w));
                out.push(dense(format!("ae_encoder.{l}.b"), &p.b));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let s = &mut self.seq2seq;
        let mut out = vec![&mut s.word_embeddings];
        for p in s.encoder.iter_mut().chain(s.decoder.iter_mut()) {
            out.push(&mut p.w);
            out.push(&mut p.b);
        }
        out.push(&mut s.output_w);
        out.push(&mut s.output_b);
        if let Some(t) = &mut s.speakers {
            out.push(t);
        }
        if let Some(enc) = &mut self.ae_encoder {
            for p in enc {
                out.push(&mut p.w);
                out.push(&mut p.b);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w: Var,
    pub b: Var,
}

/// Tape handles for every parameter of a [`Model`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub hidden: usize,
    pub vocab: usize,
    pub word_embeddings: Var,
    pub encoder: Vec<LstmVars>,
    pub decoder: Vec<LstmVars>,
    pub output_w: Var,
    pub output_b: Var,
    pub speakers: Option<Var>,
    pub ae_encoder: Option<Vec<LstmVars>>,
}

/// Recurrent state on a tape.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h: Var,
    pub c: Var,
}

/// One cell step: gates from `W·[h; inputs…] + b`, then
/// `c' = f·c + i·l`, `h' = o·tanh(c')`.
pub fn cell_step(tape: &mut Tape<'_>, p: LstmVars, state: StateVars, inputs: &[Var], hidden: usize) -> Result<StateVars> {
    let mut parts = Vec::with_capacity(1 + inputs.len());
    parts.push(state.h);
    parts.extend_from_slice(inputs);
    let x = tape.concat_rows(&parts)?;
    let pre = tape.matmul(p.w, x)?;
    let pre = tape.add_bias(pre, p.b)?;
    let k = hidden;
    let i = tape.slice_rows(pre, 0, k)?;
    let f = tape.slice_rows(pre, k, k)?;
    let o = tape.slice_rows(pre, 2 * k, k)?;
    let l = tape.slice_rows(pre, 3 * k, k)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let o = tape.sigmoid(o)?;
    let l = tape.tanh(l)?;
    let keep = tape.mul(f, state.c)?;
    let write = tape.mul(i, l)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok(StateVars { h, c })
}

fn zero_state(tape: &mut Tape<'_>, hidden: usize) -> StateVars {
    StateVars { h: tape.constant(Tensor::zeros(&[hidden, 1])), c: tape.constant(Tensor::zeros(&[hidden, 1])) }
}

fn check_token(id: usize, vocab: usize) -> Result<()> {
    if id >= vocab {
        return Err(ModelError::TokenOutOfRange { id, size: vocab });
    }
    Ok(())
}

/// Runs an encoder stack; returns the final state of every layer.
pub fn run_encoder(tape: &mut Tape<'_>, vars: &ModelVars, layers: &[LstmVars], source: &[usize]) -> Result<Vec<StateVars>> {
    if source.is_empty() {
        return Err(ModelError::EmptySource);
    }
    let k = vars.hidden;
    let mut states: Vec<StateVars> = (0..layers.len()).map(|_| zero_state(tape, k)).collect();
    for &tok in source {
        check_token(tok, vars.vocab)?;
        let mut x = tape.row_lookup(vars.word_embeddings, tok)?;
        for (layer, state) in layers.iter().zip(states.iter_mut()) {
            *state = cell_step(tape, *layer, *state, &[x], k)?;
            x = state.h;
        }
    }
    Ok(states)
}

/// Resolves the speaker row for a decode, validating against the model shape.
pub fn speaker_var(tape: &mut Tape<'_>, vars: &ModelVars, speaker: Option<usize>) -> Result<Option<Var>> {
    match (vars.speakers, speaker) {
        (Some(table), Some(s)) => {
            let (rows, _) = tape.shape(table);
            if s >= rows {
                return Err(ModelError::SpeakerOutOfRange { index: s, size: rows });
            }
            Ok(Some(tape.row_lookup(table, s)?))
        }
        (Some(_), None) => Err(ModelError::MissingSpeaker),
        (None, Some(s)) => Err(ModelError::UnexpectedSpeaker(s)),
        (None, None) => Ok(None),
    }
}

/// One decoder step consuming `token`; updates `states` and returns logits.
pub fn decoder_step(
    tape: &mut Tape<'_>,
    vars: &ModelVars,
    states: &mut [StateVars],
    token: usize,
    speaker: Option<Var>,
) -> Result<Var> {
    check_token(token, vars.vocab)?;
    let k = vars.hidden;
    let mut x = tape.row_lookup(vars.word_embeddings, token)?;
    for (layer, state) in vars.decoder.iter().zip(states.iter_mut()) {
        *state = match speaker {
            Some(s) => cell_step(tape, *layer, *state, &[x, s], k)?,
            None => cell_step(tape, *layer, *state, &[x], k)?,
        };
        x = state.h;
    }
    let logits = tape.matmul(vars.output_w, x)?;
    Ok(tape.add_bias(logits, vars.output_b)?)
}

/// Teacher-forced decoding; returns the summed token cross-entropy.
pub fn teacher_forced_nll(
    tape: &mut Tape<'_>,
    vars: &ModelVars,
    mut states: Vec<StateVars>,
    target: &[usize],
    speaker: Option<usize>,
) -> Result<Var> {
    if target.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    let s = speaker_var(tape, vars, speaker)?;
    let mut prev = BOS;
    let mut losses = Vec::with_capacity(target.len());
    for &y in target {
        check_token(y, vars.vocab)?;
        let logits = decoder_step(tape, vars, &mut states, prev, s)?;
        losses.push(tape.softmax_cross_entropy(logits, y)?);
        prev = y;
    }
    Ok(tape.add_n(&losses)?)
}

/// Summed NLL of the conversational task for one example.
pub fn seq2seq_nll_on_tape(tape: &mut Tape<'_>, vars: &ModelVars, ex: &TokenizedExample) -> Result<Var> {
    let states = run_encoder(tape, vars, &vars.encoder, &ex.source_ids)?;
    teacher_forced_nll(tape, vars, states, &ex.target_ids, ex.speaker)
}

/// Summed NLL of the autoencoder task: own encoder, shared decoder.
pub fn autoencoder_nll_on_tape(tape: &mut Tape<'_>, vars: &ModelVars, ex: &TokenizedExample) -> Result<Var> {
    let enc = vars.ae_encoder.clone().ok_or(ModelError::NoAutoencoder)?;
    let states = run_encoder(tape, vars, &enc, &ex.source_ids)?;
    teacher_forced_nll(tape, vars, states, &ex.target_ids, ex.speaker)
}

fn zero_states(tape: &mut Tape<'_>, layers: usize, hidden: usize, cols: usize) -> Vec<StateVars> {
    (0..layers)
        .map(|_| StateVars { h: tape.constant(Tensor::zeros(&[hidden, cols])), c: tape.constant(Tensor::zeros(&[hidden, cols])) })
        .collect()
}

/// Runs an encoder over a batch, one column per source. Sources are
/// left-padded: a column's state stays at zero until its first token, so
/// every column ends on its own last token.
pub fn run_encoder_batch(tape: &mut Tape<'_>, vars: &ModelVars, layers: &[LstmVars], sources: &[&[usize]]) -> Result<Vec<StateVars>> {
    if sources.iter().any(|s| s.is_empty()) {
        return Err(ModelError::EmptySource);
    }
    let width = sources.iter().map(|s| s.len()).max().ok_or(ModelError::EmptySource)?;
    let k = vars.hidden;
    let mut states = zero_states(tape, layers.len(), k, sources.len());
    for t in 0..width {
        let mask: Vec<bool> = sources.iter().map(|s| t + s.len() >= width).collect();
        let ids: Vec<usize> = sources.iter().map(|s| if t + s.len() >= width { s[t + s.len() - width] } else { PAD }).collect();
        for &id in &ids {
            check_token(id, vars.vocab)?;
        }
        let mut x = tape.gather_columns(vars.word_embeddings, &ids)?;
        let all = mask.iter().all(|&m| m);
        for (layer, state) in layers.iter().zip(states.iter_mut()) {
            let new = cell_step(tape, *layer, *state, &[x], k)?;
            *state = if all {
                new
            } else {
                StateVars { h: tape.blend_columns(new.h, state.h, &mask)?, c: tape.blend_columns(new.c, state.c, &mask)? }
            };
            x = state.h;
        }
    }
    Ok(states)
}

/// Speaker embeddings of a batch as columns.
fn speaker_columns(tape: &mut Tape<'_>, vars: &ModelVars, speakers: &[Option<usize>]) -> Result<Option<Var>> {
    match vars.speakers {
        Some(table) => {
            let (rows, _) = tape.shape(table);
            let mut ids = Vec::with_capacity(speakers.len());
            for s in speakers {
                let s = s.ok_or(ModelError::MissingSpeaker)?;
                if s >= rows {
                    return Err(ModelError::SpeakerOutOfRange { index: s, size: rows });
                }
                ids.push(s);
            }
            Ok(Some(tape.gather_columns(table, &ids)?))
        }
        None => match speakers.iter().flatten().next() {
            Some(&s) => Err(ModelError::UnexpectedSpeaker(s)),
            None => Ok(None),
        },
    }
}

/// Teacher-forced decoding of a batch of right-padded targets; returns the
/// summed cross-entropy over all real target tokens.
pub fn teacher_forced_nll_batch(
    tape: &mut Tape<'_>,
    vars: &ModelVars,
    mut states: Vec<StateVars>,
    targets: &[&[usize]],
    speakers: &[Option<usize>],
) -> Result<Var> {
    if targets.iter().any(|t| t.is_empty()) {
        return Err(ModelError::EmptyTarget);
    }
    for &y in targets.iter().flat_map(|t| t.iter()) {
        check_token(y, vars.vocab)?;
    }
    let s = speaker_columns(tape, vars, speakers)?;
    let width = targets.iter().map(|t| t.len()).max().ok_or(ModelError::EmptyTarget)?;
    let k = vars.hidden;
    let mut prev = vec![BOS; targets.len()];
    let mut losses = Vec::with_capacity(width);
    for t in 0..width {
        let mut x = tape.gather_columns(vars.word_embeddings, &prev)?;
        for (layer, state) in vars.decoder.iter().zip(states.iter_mut()) {
            *state = match s {
                Some(s) => cell_step(tape, *layer, *state, &[x, s], k)?,
                None => cell_step(tape, *layer, *state, &[x], k)?,
            };
            x = state.h;
        }
        let logits = tape.matmul(vars.output_w, x)?;
        let logits = tape.add_bias(logits, vars.output_b)?;
        let step: Vec<Option<usize>> = targets.iter().map(|y| y.get(t).copied()).collect();
        losses.push(tape.softmax_cross_entropy_columns(logits, &step)?);
        prev = step.iter().map(|y| y.unwrap_or(PAD)).collect();
    }
    Ok(tape.add_n(&losses)?)
}

/// Summed NLL of a batch; `autoencoder` selects the autoencoder encoder.
pub fn batch_nll_on_tape(tape: &mut Tape<'_>, vars: &ModelVars, batch: &[&TokenizedExample], autoencoder: bool) -> Result<Var> {
    let encoder = if autoencoder { vars.ae_encoder.clone().ok_or(ModelError::NoAutoencoder)? } else { vars.encoder.clone() };
    let sources: Vec<&[usize]> = batch.iter().map(|e| e.source_ids.as_slice()).collect();
    let targets: Vec<&[usize]> = batch.iter().map(|e| e.target_ids.as_slice()).collect();
    let speakers: Vec<Option<usize>> = batch.iter().map(|e| e.speaker).collect();
    let states = run_encoder_batch(tape, vars, &encoder, &sources)?;
    teacher_forced_nll_batch(tape, vars, states, &targets, &speakers)
}

/// Summed conversational NLL of a batch, evaluated in one pass.
pub fn batch_seq2seq_nll(model: &Model, batch: &[&TokenizedExample]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let nll = batch_nll_on_tape(&mut tape, &vars, batch, false)?;
    Ok(tape.scalar(nll))
}

/// Mean per-token loss of the conversational task.
pub fn seq2seq_loss(model: &Model, ex: &TokenizedExample) -> Result<f64> {
    Ok(seq2seq_nll(model, ex)? / ex.target_ids.len() as f64)
}

/// Summed per-token loss of the conversational task.
pub fn seq2seq_nll(model: &Model, ex: &TokenizedExample) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let nll = seq2seq_nll_on_tape(&mut tape, &vars, ex)?;
    Ok(tape.scalar(nll))
}

/// Mean per-token loss of the autoencoder task.
pub fn autoencoder_loss(model: &Model, ex: &TokenizedExample) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let nll = autoencoder_nll_on_tape(&mut tape, &vars, ex)?;
    Ok(tape.scalar(nll) / ex.target_ids.len() as f64)
}

/// Total log-probability of `target` given `source` under teacher forcing.
pub fn sequence_log_prob(model: &Model, source: &[usize], target: &[usize], speaker: Option<usize>) -> Result<f64> {
    let ex = TokenizedExample { source_ids: source.to_vec(), target_ids: target.to_vec(), speaker };
    Ok(-seq2seq_nll(model, &ex)?)
}

fn single_cell(p: &LstmParams, state: &LstmState, inputs: &[&Tensor]) -> Result<LstmState> {
    let k = p.hidden();
    let expected = k * (1 + inputs.len());
    if p.input_dim() != expected || p.b.shape() != [4 * k, 1] {
        return Err(ModelError::Shape(format!(
            "cell expects {} input columns, weights have {}",
            expected,
            p.input_dim()
        )));
    }
    for t in [&state.h, &state.c].into_iter().chain(inputs.iter().copied()) {
        if t.shape() != [k, 1] {
            return Err(ModelError::Shape(format!("expected a {k}x1 vector, got {:?}", t.shape())));
        }
    }
    let mut tape = Tape::new();
    let vars = LstmVars { w: tape.param(0, &p.w), b: tape.param(1, &p.b) };
    let st = StateVars { h: tape.constant(state.h.clone()), c: tape.constant(state.c.clone()) };
    let xs: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = cell_step(&mut tape, vars, st, &xs, k)?;
    Ok(LstmState { h: tape.to_tensor(out.h), c: tape.to_tensor(out.c) })
}

/// Base cell step on `[h; x]`.
pub fn lstm_step(p: &LstmParams, state: &LstmState, x: &Tensor) -> Result<LstmState> {
    if p.is_persona() {
        return Err(ModelError::Shape("lstm_step on a persona-shaped cell".into()));
    }
    single_cell(p, state, &[x])
}

/// Persona cell step on `[h; e; s]`.
pub fn persona_lstm_step(p: &LstmParams, state: &LstmState, e: &Tensor, s: Option<&Tensor>) -> Result<LstmState> {
    let s = s.ok_or(ModelError::MissingSpeaker)?;
    if !p.is_persona() {
        return Err(ModelError::Shape("persona_lstm_step on a base cell".into()));
    }
    single_cell(p, state, &[e, s])
}

fn state_values(tape: &Tape<'_>, states: &[StateVars]) -> Vec<LstmState> {
    states.iter().map(|s| LstmState { h: tape.to_tensor(s.h), c: tape.to_tensor(s.c) }).collect()
}

/// Final encoder state per layer.
pub fn encode(model: &Model, source: &[usize]) -> Result<Vec<LstmState>> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let states = run_encoder(&mut tape, &vars, &vars.encoder.clone(), source)?;
    Ok(state_values(&tape, &states))
}

/// Decoder step on concrete state: returns the new state and the
/// log-probabilities of the next token.
pub fn decode_step(model: &Model, states: &[LstmState], token: usize, speaker: Option<usize>) -> Result<(Vec<LstmState>, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let mut st: Vec<StateVars> = states
        .iter()
        .map(|s| StateVars { h: tape.constant(s.h.clone()), c: tape.constant(s.c.clone()) })
        .collect();
    let s = speaker_var(&mut tape, &vars, speaker)?;
    let logits = decoder_step(&mut tape, &vars, &mut st, token, s)?;
    let log_probs = kernels::log_softmax(tape.value(logits));
    Ok((state_values(&tape, &st), log_probs))
}
