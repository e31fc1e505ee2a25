use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;

use persona_mtl::checkpoint;
use persona_mtl::corpus::{SpeakerTable, TokenizedExample};
use persona_mtl::model::{Model, ModelConfig};
use persona_mtl::shard::{EncodedPost, EncodedTriple};
use persona_mtl::training::{self, RunRecord, TrainConfig, Variant};

use crate::artifacts::{self, MultitaskRun, Prepped, TrainRun, MTASK_M_CKPT, POSTS_SHARD, PRETRAIN_CKPT, REVERSE_CKPT, RUN};
use crate::settings::Settings;
use crate::{data_error, Common, Result};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `prep`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and run.json.
    #[arg(long)]
    pub out: PathBuf,
    /// mtask-s (one model per user) or mtask-m (one persona model).
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Target users; defaults to every speaker with posts.
    #[arg(long = "user")]
    pub users: Vec<String>,
    /// Skip Seq2Seq pre-training on the general conversations.
    #[arg(long)]
    pub no_pretrain: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ReverseArgs {
    /// Directory written by `prep`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for reverse.ckpt and run.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

/// Splits the general conversations into training and held-out parts; the
/// last `ceil(holdout · n)` triples are held out.
pub fn holdout_split(n: usize, holdout: f64) -> Result<usize> {
    let held = ((n as f64 * holdout).ceil() as usize).max(1);
    if n < 2 || held >= n {
        return Err(data_error(format!("{n} general triples are too few to hold out {holdout}")));
    }
    Ok(n - held)
}

fn forward(triples: &[EncodedTriple], speakers: Option<&SpeakerTable>) -> Vec<TokenizedExample> {
    triples.iter().map(|t| t.forward(speakers)).collect()
}

fn autoencoder(posts: &[EncodedPost], speakers: Option<&SpeakerTable>) -> Vec<TokenizedExample> {
    posts.iter().map(|p| p.autoencoder(speakers)).collect()
}

fn save(prepped: &Prepped, dir: &std::path::Path, name: &str, model: &Model) -> Result<()> {
    Ok(checkpoint::save(&dir.join(name), model, &prepped.vocab.hash()).with_context(|| format!("writing {name}"))?)
}

fn pretrain(
    model: &mut Model,
    train: &[TokenizedExample],
    held: &[TokenizedExample],
    cfg: &TrainConfig,
    name: &str,
) -> Result<RunRecord> {
    let mut record = training::train_seq2seq_epochs(model, train, held, cfg).context("pre-training")?;
    record.phase = "pretrain".into();
    record.checkpoints = vec![name.to_string()];
    Ok(record)
}

pub fn run(args: &TrainArgs, mut settings: Settings, out: &mut dyn Write) -> Result<()> {
    if let Some(v) = args.variant {
        settings.train.variant = v;
    }
    if args.no_pretrain {
        settings.train.pretrain = false;
    }
    settings.validate()?;
    let cfg = settings.train.clone();
    let prepped = Prepped::open(&args.data)?;
    let general = prepped.triples("train")?;
    let dev = prepped.triples("dev")?;
    let posts = prepped.posts()?;
    let cut = holdout_split(general.len(), settings.holdout)?;
    let (general_train, general_held) = general.split_at(cut);

    let post_speakers: BTreeSet<String> = posts.iter().map(|p| p.speaker_id.clone()).collect();
    let users: Vec<String> = if args.users.is_empty() { post_speakers.iter().cloned().collect() } else { args.users.clone() };
    if users.is_empty() {
        return Err(data_error("no target users: the posts corpus is empty"));
    }
    for u in &users {
        if !post_speakers.contains(u) {
            return Err(data_error(format!("user {u:?} has no posts")));
        }
        if !dev.iter().any(|t| &t.speaker_id == u) {
            return Err(data_error(format!("user {u:?} has no dev conversations")));
        }
    }
    artifacts::create_dir(&args.out)?;
    let vocab_size = prepped.vocab.len();
    let mut outputs: Vec<String> = Vec::new();
    let mut run = TrainRun { variant: String::new(), users: users.clone(), pretrain: None, multitask: Vec::new() };

    match cfg.variant {
        Variant::MtaskS => {
            run.variant = "mtask-s".into();
            let config = ModelConfig { layers: cfg.layers, hidden: cfg.hidden, vocab: vocab_size, speakers: 0 };
            let mut base = training::init_params(config, cfg.init_range, cfg.seed, false);
            let conv = forward(general_train, None);
            if cfg.pretrain {
                run.pretrain = Some(pretrain(&mut base, &conv, &forward(general_held, None), &cfg, PRETRAIN_CKPT)?);
                save(&prepped, &args.out, PRETRAIN_CKPT, &base)?;
                outputs.push(PRETRAIN_CKPT.into());
            }
            for user in &users {
                let mut model = training::prepare_mtask_s(&base, user, &post_speakers, &cfg).context("mtask-s")?;
                let user_dev = forward(&artifacts::filter_users(dev.clone(), std::slice::from_ref(user)), None);
                let user_posts: Vec<EncodedPost> = posts.iter().filter(|p| &p.speaker_id == user).cloned().collect();
                let mut record = training::multitask_train(&mut model, &conv, &user_dev, &autoencoder(&user_posts, None), &cfg)
                    .with_context(|| format!("multi-task training for {user}"))?;
                let name = artifacts::mtask_s_ckpt(user);
                record.checkpoints = vec![name.clone()];
                save(&prepped, &args.out, &name, &model)?;
                writeln!(out, "{user}: best round {} dev ppl {:.3} -> {name}", record.best_epoch, record.best_perplexity()).context("stdout")?;
                outputs.push(name);
                run.multitask.push(MultitaskRun { user: Some(user.clone()), record });
            }
        }
        Variant::MtaskM => {
            run.variant = "mtask-m".into();
            let mut speakers = SpeakerTable::from_ids(general.iter().map(|t| t.speaker_id.as_str()));
            let config = ModelConfig { layers: cfg.layers, hidden: cfg.hidden, vocab: vocab_size, speakers: speakers.len() };
            let mut persona = training::init_params(config, cfg.init_range, cfg.seed, false);
            persona.speakers = speakers.clone();
            let conv = forward(general_train, Some(&speakers));
            if cfg.pretrain {
                let held = forward(general_held, Some(&speakers));
                run.pretrain = Some(pretrain(&mut persona, &conv, &held, &cfg, PRETRAIN_CKPT)?);
                save(&prepped, &args.out, PRETRAIN_CKPT, &persona)?;
                outputs.push(PRETRAIN_CKPT.into());
            }
            let unseen: Vec<String> = users.iter().filter(|u| speakers.index(u).is_none()).cloned().collect();
            let mut model = training::prepare_mtask_m(&persona, &unseen, &cfg).context("mtask-m")?;
            for u in &unseen {
                speakers.push(u);
            }
            let user_dev = forward(&artifacts::filter_users(dev.clone(), &users), Some(&speakers));
            let user_posts: Vec<EncodedPost> = posts.iter().filter(|p| users.contains(&p.speaker_id)).cloned().collect();
            let mut record = training::multitask_train(&mut model, &conv, &user_dev, &autoencoder(&user_posts, Some(&speakers)), &cfg)
                .context("multi-task training")?;
            record.checkpoints = vec![MTASK_M_CKPT.to_string()];
            save(&prepped, &args.out, MTASK_M_CKPT, &model)?;
            writeln!(out, "mtask-m: best round {} dev ppl {:.3} -> {MTASK_M_CKPT}", record.best_epoch, record.best_perplexity())
                .context("stdout")?;
            outputs.push(MTASK_M_CKPT.into());
            run.multitask.push(MultitaskRun { user: None, record });
        }
    }

    artifacts::write_json(&args.out.join(RUN), &run)?;
    outputs.push(RUN.into());
    let inputs = vec![prepped.path(artifacts::VOCAB), prepped.path("train.shard"), prepped.path("dev.shard"), prepped.path(POSTS_SHARD)];
    let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    artifacts::write_manifest(&args.out, "train", &settings, &inputs, &outputs, serde_json::json!({ "users": users }))
}

pub fn run_reverse(args: &ReverseArgs, settings: Settings, out: &mut dyn Write) -> Result<()> {
    settings.validate()?;
    let cfg = settings.train.clone();
    let prepped = Prepped::open(&args.data)?;
    let general = prepped.triples("train")?;
    let cut = holdout_split(general.len(), settings.holdout)?;
    let reverse = |ts: &[EncodedTriple]| -> Vec<TokenizedExample> { ts.iter().map(EncodedTriple::reverse).collect() };
    let (train, held) = general.split_at(cut);
    let (model, mut record) =
        training::train_reverse_examples(&reverse(train), &reverse(held), prepped.vocab.len(), &cfg).context("reverse training")?;
    record.checkpoints = vec![REVERSE_CKPT.to_string()];
    artifacts::create_dir(&args.out)?;
    save(&prepped, &args.out, REVERSE_CKPT, &model)?;
    writeln!(out, "reverse: best epoch {} held-out ppl {:.3}", record.epochs[record.best_epoch].epoch, record.best_perplexity())
        .context("stdout")?;
    let run = TrainRun { variant: "reverse".into(), users: Vec::new(), pretrain: Some(record), multitask: Vec::new() };
    artifacts::write_json(&args.out.join(RUN), &run)?;
    let inputs = vec![prepped.path(artifacts::VOCAB), prepped.path("train.shard")];
    artifacts::write_manifest(&args.out, "train-reverse", &settings, &inputs, &[REVERSE_CKPT, RUN], serde_json::Value::Null)
}
