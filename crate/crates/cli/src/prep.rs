use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::Serialize;

use persona_mtl::corpus::{self, Loaded, Vocab};
use persona_mtl::shard::{self, EncodedPost, EncodedTriple, Shard};

use crate::artifacts::{self, split_shard, POSTS_SHARD, VOCAB};
use crate::settings::Settings;
use crate::{Common, Result};

#[derive(Debug, Args)]
pub struct PrepArgs {
    /// General-population conversation triples (JSONL).
    #[arg(long)]
    pub train: PathBuf,
    /// Target speakers' conversations used for model selection (JSONL).
    #[arg(long)]
    pub dev: PathBuf,
    /// Target speakers' held-out conversations (JSONL).
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Non-conversational posts of the target speakers (JSONL).
    #[arg(long)]
    pub posts: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Serialize)]
struct FileStats {
    records: usize,
    skipped: usize,
}

#[derive(Debug, Serialize)]
struct PrepStats {
    vocab_size: usize,
    vocab_hash: String,
    files: BTreeMap<String, FileStats>,
    train_speakers: usize,
    posts_per_speaker: BTreeMap<String, usize>,
}

fn stats<T>(loaded: &Loaded<T>) -> FileStats {
    FileStats { records: loaded.records.len(), skipped: loaded.skipped.len() }
}

fn load_triples(path: &Path, strict: bool) -> Result<Loaded<corpus::Triple>> {
    Ok(corpus::load_triples(path, strict).with_context(|| format!("loading triples from {}", path.display()))?)
}

pub fn run(args: &PrepArgs, settings: Settings, out: &mut dyn Write) -> Result<()> {
    settings.validate()?;
    let strict = settings.strict;
    let train = load_triples(&args.train, strict)?;
    let dev = load_triples(&args.dev, strict)?;
    let test = args.test.as_deref().map(|p| load_triples(p, strict)).transpose()?;
    let posts = corpus::load_posts(&args.posts, strict).with_context(|| format!("loading posts from {}", args.posts.display()))?;
    if train.records.is_empty() {
        return Err(crate::data_error(format!("{}: no usable conversation triples", args.train.display())));
    }

    let vocab = Vocab::from_corpus(&train.records, &posts.records, settings.train.vocab_cap);
    artifacts::create_dir(&args.out)?;
    vocab.save(&args.out.join(VOCAB)).context("writing vocab")?;
    let mut outputs = vec![VOCAB.to_string()];
    let mut files = BTreeMap::new();
    let mut splits: Vec<(&str, &Loaded<corpus::Triple>)> = vec![("train", &train), ("dev", &dev)];
    if let Some(t) = &test {
        splits.push(("test", t));
    }
    for (name, loaded) in splits {
        let encoded = loaded.records.iter().map(|t| EncodedTriple::new(t, &vocab)).collect();
        let file = split_shard(name);
        shard::save(&args.out.join(&file), &Shard::Triples(encoded)).context("writing shard")?;
        files.insert(name.to_string(), stats(loaded));
        outputs.push(file);
    }
    let encoded_posts = posts.records.iter().map(|p| EncodedPost::new(p, &vocab)).collect();
    shard::save(&args.out.join(POSTS_SHARD), &Shard::Posts(encoded_posts)).context("writing shard")?;
    files.insert("posts".to_string(), stats(&posts));
    outputs.push(POSTS_SHARD.to_string());

    let summary = PrepStats {
        vocab_size: vocab.len(),
        vocab_hash: vocab.hash(),
        files,
        train_speakers: corpus::SpeakerTable::from_ids(train.records.iter().map(|t| t.speaker_id.as_str())).len(),
        posts_per_speaker: corpus::posts_by_speaker(&posts.records).into_iter().map(|(k, v)| (k, v.len())).collect(),
    };
    let write = |out: &mut dyn Write, line: String| writeln!(out, "{line}").context("writing to stdout");
    write(out, format!("vocab: {} tokens (cap {})", summary.vocab_size, settings.train.vocab_cap))?;
    for (name, s) in &summary.files {
        let noun = if name == "posts" { "posts" } else { "triples" };
        write(out, format!("{name}: {} {noun}, {} skipped", s.records, s.skipped))?;
    }
    write(out, format!("general speakers: {}", summary.train_speakers))?;
    for (speaker, n) in &summary.posts_per_speaker {
        write(out, format!("posts by {speaker}: {n}"))?;
    }

    let mut inputs = vec![args.train.clone(), args.dev.clone()];
    inputs.extend(args.test.clone());
    inputs.push(args.posts.clone());
    let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    artifacts::write_manifest(&args.out, "prep", &settings, &inputs, &outputs, serde_json::to_value(&summary).expect("stats"))
}
