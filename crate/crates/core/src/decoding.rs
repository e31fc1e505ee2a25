//! Beam search, reverse-model scoring, MMI reranking and grid tuning of the
//! reranker weights.
//!
//! A candidate response R for message M is ranked by
//!
//! ```text
//! log p(R|M, v) + λ·log p(M|R) + γ·|R|
//! ```
//!
//! where |R| counts tokens including the terminal EOS.

use std::cmp::Ordering;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Vocab, BOS, EOS, PAD, UNK};
use crate::eval::{self, EvalError};
use crate::model::{self, LstmState, Model, ModelError};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("empty source")]
    EmptySource,
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error("candidate {0} has no reverse score")]
    MissingReverseScore(usize),
    #[error("model mismatch: {0}")]
    Mismatch(String),
    #[error("empty dev set")]
    EmptyDevSet,
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
}

pub type Result<T, E = DecodeError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub token_ids: Vec<usize>,
    pub log_prob: f64,
    pub state: Vec<LstmState>,
    pub finished: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Maximum response length in tokens, EOS included.
    pub max_len: usize,
    pub speaker: Option<usize>,
    /// Tokens never generated.
    pub suppress: Vec<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam: 8, max_len: 20, speaker: None, suppress: vec![PAD, UNK, BOS] }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.max_len == 0 {
            return Err(DecodeError::Config("beam and max_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// EOS-harvested hypotheses sorted by forward log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct NBestList {
    pub hypotheses: Vec<Hypothesis>,
}

impl NBestList {
    pub fn best(&self) -> Option<&Hypothesis> {
        self.hypotheses.first()
    }
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Indices of the `k` best entries (ties: lower index first).
fn top_k(log_probs: &[f64], k: usize, suppress: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..log_probs.len()).filter(|i| !suppress.contains(i)).collect();
    idx.sort_by(|&a, &b| by_score_desc(log_probs[a], log_probs[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Beam search: each live hypothesis proposes its top-B next tokens; EOS
/// candidates are harvested, the best B unfinished ones survive. When no
/// hypothesis finishes within `max_len`, the surviving beam is returned.
pub fn beam_search(model: &Model, source: &[usize], cfg: &DecodeConfig) -> Result<NBestList> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(DecodeError::EmptySource);
    }
    let init = model::encode(model, source)?;
    let mut live = vec![Hypothesis { token_ids: Vec::new(), log_prob: 0.0, state: init, finished: false }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut pool: Vec<Hypothesis> = Vec::new();
        for h in &live {
            let last = h.token_ids.last().copied().unwrap_or(BOS);
            let (state, lps) = model::decode_step(model, &h.state, last, cfg.speaker)?;
            for tok in top_k(&lps, cfg.beam, &cfg.suppress) {
                let mut token_ids = h.token_ids.clone();
                token_ids.push(tok);
                pool.push(Hypothesis { token_ids, log_prob: h.log_prob + lps[tok], state: state.clone(), finished: tok == EOS });
            }
        }
        let (done, mut open): (Vec<Hypothesis>, Vec<Hypothesis>) = pool.into_iter().partition(|h| h.finished);
        finished.extend(done);
        open.sort_by(|a, b| by_score_desc(a.log_prob, b.log_prob));
        open.truncate(cfg.beam);
        live = open;
        if live.is_empty() {
            break;
        }
    }
    let mut hypotheses = if finished.is_empty() { live } else { finished };
    hypotheses.sort_by(|a, b| by_score_desc(a.log_prob, b.log_prob));
    hypotheses.truncate(cfg.beam * cfg.max_len);
    Ok(NBestList { hypotheses })
}

/// Decodes independent sources in parallel; results keep input order.
pub fn beam_search_many(model: &Model, sources: &[(Vec<usize>, Option<usize>)], cfg: &DecodeConfig) -> Vec<Result<NBestList>> {
    sources
        .par_iter()
        .map(|(src, speaker)| {
            let c = DecodeConfig { speaker: *speaker, ..cfg.clone() };
            beam_search(model, src, &c)
        })
        .collect()
}

/// Fails unless both models share one vocabulary size and the reverse
/// model is speaker-free.
pub fn check_reverse_compatible(forward: &Model, reverse: &Model) -> Result<()> {
    if forward.config().vocab != reverse.config().vocab {
        return Err(DecodeError::Mismatch(format!(
            "forward vocab {} vs reverse vocab {}",
            forward.config().vocab,
            reverse.config().vocab
        )));
    }
    if reverse.config().persona() {
        return Err(DecodeError::Mismatch("reverse model must not have a speaker table".into()));
    }
    Ok(())
}

/// log p(M|R): teacher-forced log-probability of `message ++ EOS` with the
/// response (trailing EOS dropped) as source.
pub fn score_reverse(reverse: &Model, message: &[usize], response: &[usize]) -> Result<f64> {
    let mut source: Vec<usize> = response.to_vec();
    if source.last() == Some(&EOS) {
        source.pop();
    }
    if source.is_empty() {
        source.push(EOS);
    }
    let mut target = message.to_vec();
    target.push(EOS);
    Ok(model::sequence_log_prob(reverse, &source, &target, None)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankWeights {
    pub lambda: f64,
    pub gamma: f64,
}

impl RerankWeights {
    pub fn new(lambda: f64, gamma: f64) -> Self {
        RerankWeights { lambda, gamma }
    }
}

pub fn mmi_score(logp_fwd: f64, logp_rev: f64, len: usize, w: RerankWeights) -> f64 {
    logp_fwd + w.lambda * logp_rev + w.gamma * len as f64
}

/// One N-best entry as stored in `nbest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Surface tokens, ending in `<eos>` for finished hypotheses.
    pub tokens: Vec<String>,
    pub logp_fwd: f64,
    #[serde(default)]
    pub logp_rev: Option<f64>,
}

impl Candidate {
    /// Tokens without the terminal EOS.
    pub fn words(&self) -> &[String] {
        match self.tokens.last() {
            Some(t) if t == crate::corpus::RESERVED[EOS] => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// One line of `nbest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestRecord {
    pub source: String,
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_id: Option<String>,
}

/// Surface form of a hypothesis list.
pub fn to_candidates(nbest: &NBestList, vocab: &Vocab) -> Vec<Candidate> {
    nbest
        .hypotheses
        .iter()
        .map(|h| Candidate { tokens: vocab.decode(&h.token_ids), logp_fwd: h.log_prob, logp_rev: None })
        .collect()
}

/// Reranks candidates by the MMI score. Returns `(original index, score)`
/// in descending score order; ties keep the incoming (forward) order.
pub fn mmi_rescore(candidates: &[Candidate], w: RerankWeights) -> Result<Vec<(usize, f64)>> {
    let mut scored = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        let rev = c.logp_rev.ok_or(DecodeError::MissingReverseScore(i))?;
        scored.push((i, mmi_score(c.logp_fwd, rev, c.tokens.len(), w)));
    }
    scored.sort_by(|a, b| by_score_desc(a.1, b.1));
    Ok(scored)
}

/// An inclusive range `min..=max` walked in `step` increments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Axis {
    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !(self.max >= self.min) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(DecodeError::Grid(format!("bad axis {self:?}")));
        }
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| self.min + i as f64 * self.step).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lambda: Axis,
    pub gamma: Axis,
    /// Passes of a 10× finer grid around the incumbent.
    pub refinements: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lambda: Axis { min: 0.0, max: 1.0, step: 0.1 },
            gamma: Axis { min: -0.5, max: 0.5, step: 0.1 },
            refinements: 1,
        }
    }
}

/// A dev source: its candidates (with reverse scores) and the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct DevItem {
    pub candidates: Vec<Candidate>,
    pub reference: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub gamma: f64,
    pub bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MertResult {
    pub weights: RerankWeights,
    pub bleu: f64,
    /// Every evaluated point in evaluation order.
    pub table: Vec<GridPoint>,
}

/// Corpus BLEU of the reranked 1-bests under `w`.
pub fn dev_bleu(dev: &[DevItem], w: RerankWeights) -> Result<f64> {
    let mut hyps: Vec<Vec<String>> = Vec::with_capacity(dev.len());
    for item in dev {
        let ranked = mmi_rescore(&item.candidates, w)?;
        let best = ranked.first().map(|&(i, _)| item.candidates[i].words().to_vec()).unwrap_or_default();
        hyps.push(best);
    }
    let refs: Vec<Vec<String>> = dev.iter().map(|d| d.reference.clone()).collect();
    Ok(eval::bleu(&hyps, &refs)?.score)
}

/// `a` beats `b`: higher BLEU, then smaller |λ|, then smaller |γ|.
fn better(a: &GridPoint, b: &GridPoint) -> bool {
    if a.bleu != b.bleu {
        return a.bleu > b.bleu;
    }
    if a.lambda.abs() != b.lambda.abs() {
        return a.lambda.abs() < b.lambda.abs();
    }
    a.gamma.abs() < b.gamma.abs()
}

/// Grid search over (λ, γ) maximizing dev BLEU of reranked 1-bests, with
/// optional refinement passes around the incumbent.
pub fn mert_tune(dev: &[DevItem], grid: &GridSpec) -> Result<MertResult> {
    if dev.is_empty() {
        return Err(DecodeError::EmptyDevSet);
    }
    let mut table: Vec<GridPoint> = Vec::new();
    let evaluate = |lambdas: &[f64], gammas: &[f64], table: &mut Vec<GridPoint>| -> Result<()> {
        let points: Vec<(f64, f64)> = lambdas.iter().flat_map(|&l| gammas.iter().map(move |&g| (l, g))).collect();
        let scored: Vec<Result<GridPoint>> = points
            .par_iter()
            .map(|&(lambda, gamma)| Ok(GridPoint { lambda, gamma, bleu: dev_bleu(dev, RerankWeights::new(lambda, gamma))? }))
            .collect();
        for p in scored {
            table.push(p?);
        }
        Ok(())
    };
    evaluate(&grid.lambda.points()?, &grid.gamma.points()?, &mut table)?;
    let pick = |table: &[GridPoint]| {
        let mut best = table[0];
        for p in &table[1..] {
            if better(p, &best) {
                best = *p;
            }
        }
        best
    };
    let (mut ls, mut gs) = (grid.lambda.step, grid.gamma.step);
    for _ in 0..grid.refinements {
        let best = pick(&table);
        let lambda = Axis { min: (best.lambda - ls).max(grid.lambda.min), max: (best.lambda + ls).min(grid.lambda.max), step: ls / 10.0 };
        let gamma = Axis { min: (best.gamma - gs).max(grid.gamma.min), max: (best.gamma + gs).min(grid.gamma.max), step: gs / 10.0 };
        evaluate(&lambda.points()?, &gamma.points()?, &mut table)?;
        ls /= 10.0;
        gs /= 10.0;
    }
    let best = pick(&table);
    Ok(MertResult { weights: RerankWeights::new(best.lambda, best.gamma), bleu: best.bleu, table })
}

pub fn write_nbest(path: &Path, records: &[NBestRecord]) -> Result<()> {
    let io = |source| DecodeError::Io { path: path.display().to_string(), source };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).expect("n-best records serialize");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_nbest(path: &Path) -> Result<Vec<NBestRecord>> {
    let io = |source| DecodeError::Io { path: path.display().to_string(), source };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DecodeError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
