//! Perplexity, corpus BLEU, distinct-n and aggregation of pairwise human
//! preference judgments.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenizedExample;
use crate::model::{self, Model, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no target tokens to evaluate")]
    NoTokens,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("distinct-n supports n = 1 or 2, got {0}")]
    UnsupportedOrder(usize),
    #[error("judge matrix: {0}")]
    Judges(String),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

const EVAL_BATCH: usize = 32;

/// Summed target-token NLL and token count over a corpus.
pub fn corpus_nll(model: &Model, examples: &[TokenizedExample]) -> Result<(f64, usize)> {
    // Similar lengths share a batch to keep padding small.
    let mut order: Vec<&TokenizedExample> = examples.iter().collect();
    order.sort_by_key(|e| (e.source_ids.len(), e.target_ids.len()));
    let per: Vec<Result<f64, ModelError>> =
        order.par_chunks(EVAL_BATCH).map(|chunk| model::batch_seq2seq_nll(model, chunk)).collect();
    let mut total = 0.0;
    for r in per {
        total += r?;
    }
    let tokens: usize = examples.iter().map(|e| e.target_ids.len()).sum();
    Ok((total, tokens))
}

/// Corpus-level, token-weighted perplexity.
pub fn perplexity(model: &Model, examples: &[TokenizedExample]) -> Result<f64> {
    let (nll, tokens) = corpus_nll(model, examples)?;
    if tokens == 0 {
        return Err(EvalError::NoTokens);
    }
    Ok((nll / tokens as f64).exp())
}

fn ngram_counts<S: Eq + Hash>(tokens: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub score: f64,
    /// Clipped n-gram matches, orders 1..4.
    pub matches: [usize; 4],
    /// Hypothesis n-gram totals, orders 1..4.
    pub totals: [usize; 4],
    pub precisions: [f64; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
    pub brevity_penalty: f64,
}

/// Corpus BLEU-4 with one reference per hypothesis. Counts are pooled over
/// the corpus; a higher order with zero matches is add-one smoothed.
pub fn bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    if hyps.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.iter().map(AsRef::as_ref).collect();
        let r: Vec<&str> = r.iter().map(AsRef::as_ref).collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        precisions[n] = if n > 0 && matches[n] == 0 {
            1.0 / (totals[n] as f64 + 1.0)
        } else if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 { 0.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp() };
    let score = if precisions[0] == 0.0 {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuReport { score, matches, totals, precisions, hyp_len, ref_len, brevity_penalty })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistinctReport {
    pub n: usize,
    pub unique: usize,
    pub tokens: usize,
    pub value: f64,
}

/// Distinct n-grams across all responses divided by the total number of
/// generated tokens.
pub fn distinct_n<S: AsRef<str>>(responses: &[Vec<S>], n: usize) -> Result<DistinctReport> {
    if n != 1 && n != 2 {
        return Err(EvalError::UnsupportedOrder(n));
    }
    let tokens: usize = responses.iter().map(Vec::len).sum();
    if tokens == 0 {
        return Err(EvalError::NoTokens);
    }
    let mut seen: HashSet<Vec<&str>> = HashSet::new();
    for r in responses {
        let r: Vec<&str> = r.iter().map(AsRef::as_ref).collect();
        if r.len() >= n {
            for w in r.windows(n) {
                seen.insert(w.to_vec());
            }
        }
    }
    Ok(DistinctReport { n, unique: seen.len(), tokens, value: seen.len() as f64 / tokens as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: Option<f64>,
    pub nll: Option<f64>,
    pub target_tokens: Option<usize>,
    pub bleu: Option<BleuReport>,
    pub distinct1: Option<DistinctReport>,
    pub distinct2: Option<DistinctReport>,
    pub sentences: usize,
}

/// Preference scores, `scores[judge][item]`, on a 1..=5 scale where 1 means
/// "baseline clearly better", 3 a tie and 5 "system clearly better".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeMatrix {
    pub judges: Vec<String>,
    pub items: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl JudgeMatrix {
    /// Builds a matrix from `(judge, item, score)` rows. Judges and items
    /// keep first-appearance order; every judge must score every item once.
    pub fn from_rows<I>(rows: I) -> Result<JudgeMatrix>
    where
        I: IntoIterator<Item = (String, String, f64)>,
    {
        let mut judges: Vec<String> = Vec::new();
        let mut items: Vec<String> = Vec::new();
        let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (j, i, s) in rows {
            if !(1.0..=5.0).contains(&s) {
                return Err(EvalError::Judges(format!("score {s} for judge {j}, item {i} outside 1..5")));
            }
            let ji = judges.iter().position(|x| *x == j).unwrap_or_else(|| {
                judges.push(j.clone());
                judges.len() - 1
            });
            let ii = items.iter().position(|x| *x == i).unwrap_or_else(|| {
                items.push(i.clone());
                items.len() - 1
            });
            if cells.insert((ji, ii), s).is_some() {
                return Err(EvalError::Judges(format!("judge {j} scored item {i} twice")));
            }
        }
        if cells.len() != judges.len() * items.len() {
            return Err(EvalError::Judges("matrix is not rectangular".into()));
        }
        let scores = (0..judges.len()).map(|j| (0..items.len()).map(|i| cells[&(j, i)]).collect()).collect();
        Ok(JudgeMatrix { judges, items, scores })
    }
}

/// Fraction of a vote for the system implied by one score.
pub fn system_share(score: f64) -> f64 {
    (score - 1.0) / 4.0
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    /// Half-width of the 95% interval (1.96 standard errors).
    pub ci: f64,
}

fn mean_ci(xs: &[f64]) -> MeanCi {
    let m = mean(xs);
    let ci = if xs.len() > 1 {
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        1.96 * (var / xs.len() as f64).sqrt()
    } else {
        0.0
    };
    MeanCi { mean: m, ci }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeSummary {
    pub kept: Vec<String>,
    pub discarded: Vec<String>,
    pub judge_variances: Vec<f64>,
    pub system: MeanCi,
    pub baseline: MeanCi,
    /// Per item: (system votes, baseline votes), partial votes rounded up.
    pub item_votes: Vec<(usize, usize)>,
    /// `system_bins[v]` = items where `v` judges voted for the system.
    pub system_bins: Vec<usize>,
    pub baseline_bins: Vec<usize>,
}

impl JudgeSummary {
    /// Bins from "all kept judges agree" down to a bare majority, as
    /// `(votes, system count, baseline count)`.
    pub fn upper_bins(&self) -> Vec<(usize, usize, usize)> {
        let n = self.kept.len();
        (n.div_ceil(2)..=n).rev().map(|v| (v, self.system_bins[v], self.baseline_bins[v])).collect()
    }
}

/// Discards judges whose score variance is more than `sd_mult` standard
/// deviations from the mean variance, then summarizes the kept judges.
pub fn judge_aggregate(m: &JudgeMatrix, sd_mult: f64) -> Result<JudgeSummary> {
    if m.judges.len() < 2 {
        return Err(EvalError::Judges("need at least two judges".into()));
    }
    if m.items.is_empty() {
        return Err(EvalError::Judges("no items".into()));
    }
    if m.scores.len() != m.judges.len() || m.scores.iter().any(|r| r.len() != m.items.len()) {
        return Err(EvalError::Judges("matrix is not rectangular".into()));
    }
    let variances: Vec<f64> = m.scores.iter().map(|r| population_variance(r)).collect();
    let mv = mean(&variances);
    let sd = population_variance(&variances).sqrt();
    // written as a negated `>` so that ∞·0 (NaN) keeps the judge
    let keep: Vec<bool> = variances.iter().map(|v| !((v - mv).abs() > sd_mult * sd)).collect();
    let kept_rows: Vec<&Vec<f64>> = m.scores.iter().zip(&keep).filter(|(_, &k)| k).map(|(r, _)| r).collect();
    if kept_rows.is_empty() {
        return Err(EvalError::Judges("every judge was filtered out".into()));
    }
    let shares: Vec<f64> = kept_rows.iter().flat_map(|r| r.iter().map(|&s| system_share(s))).collect();
    let base_shares: Vec<f64> = shares.iter().map(|s| 1.0 - s).collect();
    let n = kept_rows.len();
    let mut system_bins = vec![0; n + 1];
    let mut baseline_bins = vec![0; n + 1];
    let mut item_votes = Vec::with_capacity(m.items.len());
    for i in 0..m.items.len() {
        let sys: f64 = kept_rows.iter().map(|r| system_share(r[i])).sum();
        let sys_votes = (sys - 1e-9).ceil().max(0.0) as usize;
        let base_votes = (n as f64 - sys - 1e-9).ceil().max(0.0) as usize;
        system_bins[sys_votes.min(n)] += 1;
        baseline_bins[base_votes.min(n)] += 1;
        item_votes.push((sys_votes, base_votes));
    }
    let split = |want: bool| m.judges.iter().zip(&keep).filter(|(_, &k)| k == want).map(|(j, _)| j.clone()).collect();
    Ok(JudgeSummary {
        kept: split(true),
        discarded: split(false),
        judge_variances: variances,
        system: mean_ci(&shares),
        baseline: mean_ci(&base_shares),
        item_votes,
        system_bins,
        baseline_bins,
    })
}
