use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::Deserialize;

use persona_mtl::corpus::TokenizedExample;
use persona_mtl::eval::{self, EvalReport, JudgeMatrix};

use crate::artifacts::{self, EvalOutput, JudgeReport, Prepped, ResponseRecord, EVAL};
use crate::settings::Settings;
use crate::{data_error, CliError, Common, Result};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `prep`; needed for perplexity.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split scored for perplexity.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Only score conversations of these speakers.
    #[arg(long = "user")]
    pub users: Vec<String>,
    /// Checkpoint whose perplexity is reported.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Score every conversation as this speaker (persona models).
    #[arg(long)]
    pub speaker: Option<String>,
    /// responses.jsonl written by `rerank`; gives BLEU and distinct-n.
    #[arg(long)]
    pub responses: Option<PathBuf>,
    /// judges.csv with `judge,item,score` rows.
    #[arg(long)]
    pub judges: Option<PathBuf>,
    /// Output directory for eval.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Deserialize)]
struct JudgeRow {
    judge: String,
    item: String,
    score: f64,
}

fn read_judges(path: &std::path::Path) -> Result<JudgeMatrix> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        let row: JudgeRow = row.with_context(|| format!("parsing {}", path.display()))?;
        rows.push((row.judge, row.item, row.score));
    }
    Ok(JudgeMatrix::from_rows(rows).context("judge matrix")?)
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

pub fn run(args: &EvalArgs, settings: Settings, out: &mut dyn Write) -> Result<()> {
    settings.validate()?;
    if args.model.is_none() && args.responses.is_none() && args.judges.is_none() {
        return Err(CliError::Usage("eval needs at least one of --model, --responses, --judges".into()));
    }
    let mut report =
        EvalReport { perplexity: None, nll: None, target_tokens: None, bleu: None, distinct1: None, distinct2: None, sentences: 0 };
    let mut inputs: Vec<PathBuf> = Vec::new();

    if let Some(model_path) = &args.model {
        let data = args.data.as_ref().ok_or_else(|| CliError::Usage("--model needs --data".into()))?;
        let prepped = Prepped::open(data)?;
        let model = prepped.load_model(model_path)?;
        let triples = artifacts::filter_users(prepped.triples(&args.split)?, &args.users);
        let speakers = artifacts::speaker_indices(&model, &triples, args.speaker.as_deref())?;
        let examples: Vec<TokenizedExample> =
            triples.iter().zip(speakers).map(|(t, speaker)| TokenizedExample { speaker, ..t.forward(None) }).collect();
        let (nll, tokens) = eval::corpus_nll(&model, &examples).context("perplexity")?;
        if tokens == 0 {
            return Err(data_error(format!("split {:?} has no target tokens", args.split)));
        }
        let ppl = (nll / tokens as f64).exp();
        writeln!(out, "perplexity: {ppl:.4} over {tokens} tokens ({} conversations)", examples.len()).context("stdout")?;
        report.perplexity = Some(ppl);
        report.nll = Some(nll);
        report.target_tokens = Some(tokens);
        inputs.extend([prepped.path(artifacts::VOCAB), prepped.path(&artifacts::split_shard(&args.split)), model_path.clone()]);
    }

    if let Some(path) = &args.responses {
        let records: Vec<ResponseRecord> = artifacts::read_jsonl(path)?;
        let records: Vec<ResponseRecord> =
            records.into_iter().filter(|r| args.users.is_empty() || r.speaker_id.as_ref().is_some_and(|s| args.users.contains(s))).collect();
        if records.is_empty() {
            return Err(data_error(format!("{}: no responses to score", path.display())));
        }
        let hyps: Vec<Vec<String>> = records.iter().map(|r| words(&r.response)).collect();
        if records.iter().all(|r| r.reference.is_some()) {
            let refs: Vec<Vec<String>> = records.iter().map(|r| words(r.reference.as_deref().unwrap_or_default())).collect();
            let bleu = eval::bleu(&hyps, &refs).context("BLEU")?;
            writeln!(out, "BLEU: {:.2}", bleu.score * 100.0).context("stdout")?;
            report.bleu = Some(bleu);
        } else {
            log::warn!("{}: some responses lack a reference; BLEU skipped", path.display());
        }
        if hyps.iter().all(Vec::is_empty) {
            log::warn!("{}: every response is empty; distinct-n skipped", path.display());
        } else {
            let d1 = eval::distinct_n(&hyps, 1).context("distinct-1")?;
            let d2 = eval::distinct_n(&hyps, 2).context("distinct-2")?;
            writeln!(out, "distinct-1: {:.4}  distinct-2: {:.4}", d1.value, d2.value).context("stdout")?;
            report.distinct1 = Some(d1);
            report.distinct2 = Some(d2);
        }
        report.sentences = records.len();
        inputs.push(path.clone());
    }

    let mut judges = None;
    if let Some(path) = &args.judges {
        let matrix = read_judges(path)?;
        let summary = eval::judge_aggregate(&matrix, settings.sd_mult).context("judge aggregation")?;
        writeln!(
            out,
            "judges: kept {} of {}; system {:.3} ± {:.3}, baseline {:.3} ± {:.3}",
            summary.kept.len(),
            matrix.judges.len(),
            summary.system.mean,
            summary.system.ci,
            summary.baseline.mean,
            summary.baseline.ci
        )
        .context("stdout")?;
        let upper_bins = summary.upper_bins();
        for (votes, system, baseline) in &upper_bins {
            writeln!(out, "  {votes} votes: system {system}, baseline {baseline}").context("stdout")?;
        }
        judges = Some(JudgeReport { sd_mult: settings.sd_mult, summary, upper_bins });
        inputs.push(path.clone());
    }

    artifacts::create_dir(&args.out)?;
    artifacts::write_json(&args.out.join(EVAL), &EvalOutput { report, judges })?;
    artifacts::write_manifest(&args.out, "eval", &settings, &inputs, &[EVAL], serde_json::json!({ "split": args.split, "users": args.users }))
}
