//! On-disk artifacts shared by the subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use persona_mtl::checkpoint;
use persona_mtl::corpus::{SpeakerTable, Vocab};
use persona_mtl::eval::{EvalReport, JudgeSummary};
use persona_mtl::model::Model;
use persona_mtl::shard::{self, EncodedPost, EncodedTriple};
use persona_mtl::training::RunRecord;

use crate::settings::Settings;
use crate::Result;

pub const VOCAB: &str = "vocab.txt";
pub const MANIFEST: &str = "manifest.json";
pub const RUN: &str = "run.json";
pub const NBEST: &str = "nbest.jsonl";
pub const RESPONSES: &str = "responses.jsonl";
pub const WEIGHTS: &str = "weights.json";
pub const EVAL: &str = "eval.json";
pub const POSTS_SHARD: &str = "posts.shard";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const MTASK_M_CKPT: &str = "mtask-m.ckpt";
pub const REVERSE_CKPT: &str = "reverse.ckpt";

pub fn split_shard(split: &str) -> String {
    format!("{split}.shard")
}

/// Per-user MTask-S checkpoint name; characters outside `[A-Za-z0-9_-]`
/// become `_`.
pub fn mtask_s_ckpt(user: &str) -> String {
    let safe: String = user.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect();
    format!("mtask-s.{safe}.ckpt")
}

/// A directory written by `prep`.
pub struct Prepped {
    pub dir: PathBuf,
    pub vocab: Vocab,
}

impl Prepped {
    pub fn open(dir: &Path) -> Result<Prepped> {
        let vocab = Vocab::load(&dir.join(VOCAB)).with_context(|| format!("loading prepped data from {}", dir.display()))?;
        Ok(Prepped { dir: dir.to_path_buf(), vocab })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn triples(&self, split: &str) -> Result<Vec<EncodedTriple>> {
        let path = self.path(&split_shard(split));
        Ok(shard::load_triples(&path).with_context(|| format!("split {split:?}"))?)
    }

    pub fn posts(&self) -> Result<Vec<EncodedPost>> {
        Ok(shard::load_posts(&self.path(POSTS_SHARD)).context("posts")?)
    }

    pub fn load_model(&self, path: &Path) -> Result<Model> {
        Ok(checkpoint::load(path, Some(&self.vocab.hash())).with_context(|| format!("loading {}", path.display()))?)
    }
}

/// Keeps triples of the listed speakers; an empty list keeps everything.
pub fn filter_users(triples: Vec<EncodedTriple>, users: &[String]) -> Vec<EncodedTriple> {
    if users.is_empty() {
        return triples;
    }
    triples.into_iter().filter(|t| users.contains(&t.speaker_id)).collect()
}

/// Speaker index of each triple for `model`: `None` throughout for a
/// speaker-free model, otherwise the forced speaker or each triple's own.
pub fn speaker_indices(model: &Model, triples: &[EncodedTriple], forced: Option<&str>) -> Result<Vec<Option<usize>>> {
    if !model.config().persona() {
        if let Some(s) = forced {
            return Err(crate::data_error(format!("--speaker {s:?} given but the model has no speaker embeddings")));
        }
        return Ok(vec![None; triples.len()]);
    }
    let lookup = |name: &str| model.speakers.index(name).ok_or_else(|| anyhow!("speaker {name:?} is not in the model's speaker table"));
    triples.iter().map(|t| Ok(Some(lookup(forced.unwrap_or(&t.speaker_id))?))).collect()
}

pub fn speaker_table(model: &Model) -> Option<&SpeakerTable> {
    model.config().persona().then_some(&model.speakers)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    Ok(std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    Ok(std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    Ok(std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

pub fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(FileDigest { path: path.display().to_string(), sha256: hex::encode(Sha256::digest(&bytes)) })
}

/// Everything needed to rerun a command: its settings, seed and the hashes
/// of what it read and wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub settings: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    #[serde(default)]
    pub details: serde_json::Value,
}

pub fn write_manifest(
    out_dir: &Path,
    command: &str,
    settings: &Settings,
    inputs: &[PathBuf],
    outputs: &[&str],
    details: serde_json::Value,
) -> Result<()> {
    let inputs = inputs.iter().map(|p| digest(p)).collect::<Result<Vec<_>>>()?;
    let outputs = outputs
        .iter()
        .map(|name| digest(&out_dir.join(name)).map(|d| FileDigest { path: name.to_string(), ..d }))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: settings.train.seed,
        settings: settings.to_map(),
        inputs,
        outputs,
        details,
    };
    write_json(&out_dir.join(MANIFEST), &manifest)
}

/// One multi-task run inside `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultitaskRun {
    /// Target user for MTask-S; `None` for the shared MTask-M model.
    pub user: Option<String>,
    pub record: RunRecord,
}

/// `run.json` of `train` and `train-reverse`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub variant: String,
    pub users: Vec<String>,
    pub pretrain: Option<RunRecord>,
    pub multitask: Vec<MultitaskRun>,
}

/// One line of `responses.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub source: String,
    pub response: String,
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_id: Option<String>,
}

/// Judge aggregation as stored in `eval.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub sd_mult: f64,
    pub summary: JudgeSummary,
    /// `(votes, system items, baseline items)` from unanimous to majority.
    pub upper_bins: Vec<(usize, usize, usize)>,
}

/// `eval.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    #[serde(flatten)]
    pub report: EvalReport,
    pub judges: Option<JudgeReport>,
}
