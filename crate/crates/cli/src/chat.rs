use std::io::{BufRead, Write};
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;

use persona_mtl::corpus::{self, EOS};
use persona_mtl::decoding::{self, MertResult};

use crate::artifacts::Prepped;
use crate::settings::Settings;
use crate::{data_error, Common, Result};

#[derive(Debug, Args)]
pub struct ChatArgs {
    /// Directory written by `prep` (for the vocabulary).
    #[arg(long)]
    pub data: PathBuf,
    /// Forward model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Reverse model checkpoint; enables MMI reranking.
    #[arg(long)]
    pub reverse: Option<PathBuf>,
    /// weights.json written by `tune`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Respond as this speaker (persona models).
    #[arg(long)]
    pub speaker: Option<String>,
    /// Also print the top N candidates with their scores.
    #[arg(long, value_name = "N")]
    pub show_nbest: Option<usize>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

pub fn run(args: &ChatArgs, mut settings: Settings, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    if let Some(b) = args.beam {
        settings.beam = b;
    }
    if let Some(m) = args.max_len {
        settings.max_len = m;
    }
    if let Some(path) = &args.weights {
        let tuned: MertResult = crate::artifacts::read_json(path)?;
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
    let speaker = match &args.speaker {
        None => None,
        Some(_) if !model.config().persona() => {
            return Err(data_error("--speaker given but the model has no speaker embeddings"));
        }
        Some(name) => Some(model.speakers.index(name).ok_or_else(|| data_error(format!("speaker {name:?} is not in the model")))?),
    };
    let cfg = settings.decode_config(speaker);
    let weights = settings.weights();
    let vocab = &prepped.vocab;

    let mut context: Vec<usize> = Vec::new();
    let mut line = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line).context("reading input")? == 0 {
            break;
        }
        let message = vocab.encode_tokens(&corpus::tokenize(&line));
        let mut source = context.clone();
        source.push(EOS);
        source.extend(&message);
        let list = decoding::beam_search(&model, &source, &cfg).context("beam search")?;
        let mut candidates = decoding::to_candidates(&list, vocab);
        let ranked: Vec<(usize, f64)> = match &reverse {
            Some(r) => {
                for (c, h) in candidates.iter_mut().zip(&list.hypotheses) {
                    c.logp_rev = Some(decoding::score_reverse(r, &message, &h.token_ids).context("reverse scoring")?);
                }
                decoding::mmi_rescore(&candidates, weights).context("reranking")?
            }
            None => candidates.iter().enumerate().map(|(i, c)| (i, c.logp_fwd)).collect(),
        };
        let Some(&(best, _)) = ranked.first() else {
            return Err(data_error("beam search returned no hypotheses"));
        };
        writeln!(out, "{}", candidates[best].words().join(" ")).context("stdout")?;
        if let Some(n) = args.show_nbest {
            for (rank, &(i, score)) in ranked.iter().take(n).enumerate() {
                writeln!(out, "  {}. {score:.4} {}", rank + 1, candidates[i].words().join(" ")).context("stdout")?;
            }
        }
        out.flush().context("stdout")?;
        context = list.hypotheses[best].token_ids.iter().copied().filter(|&t| t != EOS).collect();
    }
    Ok(())
}
