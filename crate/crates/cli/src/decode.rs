use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;

use persona_mtl::decoding::{self, Candidate, DevItem, MertResult, NBestRecord, RerankWeights};

use crate::artifacts::{self, Prepped, ResponseRecord, NBEST, RESPONSES, WEIGHTS};
use crate::settings::Settings;
use crate::{data_error, Common, Result};

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Directory written by `prep`.
    #[arg(long)]
    pub data: PathBuf,
    /// Forward model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Reverse model checkpoint; fills `logp_rev` for every candidate.
    #[arg(long)]
    pub reverse: Option<PathBuf>,
    /// Split to decode (dev or test).
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Only decode conversations of these speakers.
    #[arg(long = "user")]
    pub users: Vec<String>,
    /// Decode every source as this speaker (persona models).
    #[arg(long)]
    pub speaker: Option<String>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Output directory for nbest.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    /// N-best files written by `decode`.
    #[arg(long = "nbest", required = true)]
    pub nbest: Vec<PathBuf>,
    /// weights.json written by `tune`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Output directory for responses.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    /// Dev N-best files with reverse scores and references.
    #[arg(long = "nbest", required = true)]
    pub nbest: Vec<PathBuf>,
    /// Output directory for weights.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

pub fn run_decode(args: &DecodeArgs, mut settings: Settings, out: &mut dyn Write) -> Result<()> {
    if let Some(b) = args.beam {
        settings.beam = b;
    }
    if let Some(m) = args.max_len {
        settings.max_len = m;
    }
    settings.validate()?;
    let prepped = Prepped::open(&args.data)?;
    let model = prepped.load_model(&args.model)?;
    let reverse = match &args.reverse {
        Some(p) => {
            let r = prepped.load_model(p)?;
            decoding::check_reverse_compatible(&model, &r).context("reverse model")?;
            Some(r)
        }
        None => None,
    };
    let triples = artifacts::filter_users(prepped.triples(&args.split)?, &args.users);
    if triples.is_empty() {
        return Err(data_error(format!("split {:?} has no conversations to decode", args.split)));
    }
    let speakers = artifacts::speaker_indices(&model, &triples, args.speaker.as_deref())?;
    let sources: Vec<(Vec<usize>, Option<usize>)> =
        triples.iter().zip(&speakers).map(|(t, &s)| (t.forward(None).source_ids, s)).collect();
    let cfg = settings.decode_config(None);
    let lists = decoding::beam_search_many(&model, &sources, &cfg);
    let vocab = &prepped.vocab;
    let mut records = Vec::with_capacity(triples.len());
    for ((t, (source, _)), list) in triples.iter().zip(&sources).zip(lists) {
        let list = list.context("beam search")?;
        let mut candidates = decoding::to_candidates(&list, vocab);
        if let Some(r) = &reverse {
            let message = t.reverse().target_ids;
            let message = &message[..message.len() - 1];
            for (c, h) in candidates.iter_mut().zip(&list.hypotheses) {
                c.logp_rev = Some(decoding::score_reverse(r, message, &h.token_ids).context("reverse scoring")?);
            }
        }
        let reference = t.forward(None).target_ids;
        records.push(NBestRecord {
            source: vocab.decode(source).join(" "),
            candidates,
            reference: Some(vocab.decode(&reference[..reference.len() - 1]).join(" ")),
            speaker_id: Some(t.speaker_id.clone()),
        });
    }
    artifacts::create_dir(&args.out)?;
    decoding::write_nbest(&args.out.join(NBEST), &records).context("writing n-best")?;
    writeln!(out, "decoded {} sources -> {}", records.len(), args.out.join(NBEST).display()).context("stdout")?;
    let mut inputs = vec![prepped.path(artifacts::VOCAB), prepped.path(&artifacts::split_shard(&args.split)), args.model.clone()];
    inputs.extend(args.reverse.clone());
    artifacts::write_manifest(&args.out, "decode", &settings, &inputs, &[NBEST], serde_json::json!({ "split": args.split, "users": args.users }))
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<NBestRecord>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(decoding::read_nbest(p).with_context(|| format!("reading {}", p.display()))?);
    }
    Ok(all)
}

pub fn run_rerank(args: &RerankArgs, mut settings: Settings, out: &mut dyn Write) -> Result<()> {
    if let Some(path) = &args.weights {
        let tuned: MertResult = artifacts::read_json(path)?;
        settings.lambda = tuned.weights.lambda;
        settings.gamma = tuned.weights.gamma;
    }
    if let Some(l) = args.lambda {
        settings.lambda = l;
    }
    if let Some(g) = args.gamma {
        settings.gamma = g;
    }
    settings.validate()?;
    let w = settings.weights();
    let records = read_all(&args.nbest)?;
    let mut responses = Vec::with_capacity(records.len());
    for r in &records {
        let candidates: Vec<Candidate> = if w.lambda == 0.0 {
            // λ = 0 ignores reverse scores; missing ones count as 0
            r.candidates.iter().map(|c| Candidate { logp_rev: Some(c.logp_rev.unwrap_or(0.0)), ..c.clone() }).collect()
        } else {
            r.candidates.clone()
        };
        let ranked = decoding::mmi_rescore(&candidates, w).with_context(|| format!("reranking {:?}", r.source))?;
        let (response, score) = match ranked.first() {
            Some(&(i, s)) => (candidates[i].words().join(" "), Some(s)),
            None => (String::new(), None),
        };
        responses.push(ResponseRecord { source: r.source.clone(), response, score, reference: r.reference.clone(), speaker_id: r.speaker_id.clone() });
    }
    artifacts::create_dir(&args.out)?;
    artifacts::write_jsonl(&args.out.join(RESPONSES), &responses)?;
    writeln!(out, "reranked {} sources with lambda={} gamma={}", responses.len(), w.lambda, w.gamma).context("stdout")?;
    let mut inputs = args.nbest.clone();
    inputs.extend(args.weights.clone());
    artifacts::write_manifest(&args.out, "rerank", &settings, &inputs, &[RESPONSES], serde_json::to_value(w).expect("weights"))
}

pub fn run_tune(args: &TuneArgs, settings: Settings, out: &mut dyn Write) -> Result<()> {
    settings.validate()?;
    let records = read_all(&args.nbest)?;
    let mut dev = Vec::with_capacity(records.len());
    for r in records {
        let reference = r.reference.ok_or_else(|| data_error(format!("n-best entry {:?} has no reference", r.source)))?;
        dev.push(DevItem { candidates: r.candidates, reference: reference.split_whitespace().map(str::to_string).collect() });
    }
    let result = decoding::mert_tune(&dev, &settings.grid).context("tuning")?;
    artifacts::create_dir(&args.out)?;
    artifacts::write_json(&args.out.join(WEIGHTS), &result)?;
    let RerankWeights { lambda, gamma } = result.weights;
    writeln!(out, "lambda={lambda} gamma={gamma} dev BLEU={:.4} ({} grid points)", result.bleu * 100.0, result.table.len()).context("stdout")?;
    artifacts::write_manifest(&args.out, "tune", &settings, &args.nbest, &[WEIGHTS], serde_json::to_value(result.weights).expect("weights"))
}
