//! Binary shards of vocabulary-encoded corpus records.
//!
//! Layout: magic `PMTLSHRD`, `u32` version, `u8` kind (0 triples, 1 posts),
//! `u64` record count, then per record a length-prefixed UTF-8 speaker id
//! followed by length-prefixed `u32` id sequences (context, message,
//! response for triples; text for posts). All integers little-endian.

use std::path::Path;

use thiserror::Error;

use crate::corpus::{Post, SpeakerTable, TokenizedExample, Triple, Vocab, EOS};

const MAGIC: &[u8; 8] = b"PMTLSHRD";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt shard: {0}")]
    Corrupt(String),
}

pub type Result<T, E = ShardError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedTriple {
    pub speaker_id: String,
    pub context: Vec<u32>,
    pub message: Vec<u32>,
    pub response: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPost {
    pub speaker_id: String,
    pub text: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Shard {
    Triples(Vec<EncodedTriple>),
    Posts(Vec<EncodedPost>),
}

fn ids(v: Vec<usize>) -> Vec<u32> {
    v.into_iter().map(|i| i as u32).collect()
}

fn widen(v: &[u32]) -> Vec<usize> {
    v.iter().map(|&i| i as usize).collect()
}

impl EncodedTriple {
    pub fn new(t: &Triple, vocab: &Vocab) -> Self {
        EncodedTriple {
            speaker_id: t.speaker_id.clone(),
            context: ids(vocab.encode_text(&t.context)),
            message: ids(vocab.encode_text(&t.message)),
            response: ids(vocab.encode_text(&t.response)),
        }
    }

    /// `context EOS message → response EOS`.
    pub fn forward(&self, speakers: Option<&SpeakerTable>) -> TokenizedExample {
        let mut source_ids = widen(&self.context);
        source_ids.push(EOS);
        source_ids.extend(widen(&self.message));
        let mut target_ids = widen(&self.response);
        target_ids.push(EOS);
        TokenizedExample { source_ids, target_ids, speaker: speakers.and_then(|s| s.index(&self.speaker_id)) }
    }

    /// `response → message EOS`.
    pub fn reverse(&self) -> TokenizedExample {
        let mut source_ids = widen(&self.response);
        if source_ids.is_empty() {
            source_ids.push(EOS);
        }
        let mut target_ids = widen(&self.message);
        target_ids.push(EOS);
        TokenizedExample { source_ids, target_ids, speaker: None }
    }
}

impl EncodedPost {
    pub fn new(p: &Post, vocab: &Vocab) -> Self {
        EncodedPost { speaker_id: p.speaker_id.clone(), text: ids(vocab.encode_text(&p.text)) }
    }

    pub fn autoencoder(&self, speakers: Option<&SpeakerTable>) -> TokenizedExample {
        let source_ids = widen(&self.text);
        let mut target_ids = source_ids.clone();
        target_ids.push(EOS);
        TokenizedExample { source_ids, target_ids, speaker: speakers.and_then(|s| s.index(&self.speaker_id)) }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_ids(out: &mut Vec<u8>, v: &[u32]) {
    put_u32(out, v.len() as u32);
    for &i in v {
        put_u32(out, i);
    }
}

pub fn to_bytes(shard: &Shard) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    match shard {
        Shard::Triples(ts) => {
            out.push(0);
            out.extend_from_slice(&(ts.len() as u64).to_le_bytes());
            for t in ts {
                put_str(&mut out, &t.speaker_id);
                put_ids(&mut out, &t.context);
                put_ids(&mut out, &t.message);
                put_ids(&mut out, &t.response);
            }
        }
        Shard::Posts(ps) => {
            out.push(1);
            out.extend_from_slice(&(ps.len() as u64).to_le_bytes());
            for p in ps {
                put_str(&mut out, &p.speaker_id);
                put_ids(&mut out, &p.text);
            }
        }
    }
    out
}

struct Reader<'a> {
    data: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() < n {
            return Err(ShardError::Corrupt("unexpected end of data".into()));
        }
        let (head, rest) = self.data.split_at(n);
        self.data = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| ShardError::Corrupt(e.to_string()))
    }

    fn ids(&mut self) -> Result<Vec<u32>> {
        let n = self.u32()? as usize;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| ShardError::Corrupt("length overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Shard> {
    let mut r = Reader { data: bytes };
    if r.take(8)? != MAGIC {
        return Err(ShardError::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ShardError::Corrupt(format!("unsupported version {version}")));
    }
    let kind = r.take(1)?[0];
    let n = r.u64()? as usize;
    let shard = match kind {
        0 => {
            let mut v = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                v.push(EncodedTriple { speaker_id: r.string()?, context: r.ids()?, message: r.ids()?, response: r.ids()? });
            }
            Shard::Triples(v)
        }
        1 => {
            let mut v = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                v.push(EncodedPost { speaker_id: r.string()?, text: r.ids()? });
            }
            Shard::Posts(v)
        }
        k => return Err(ShardError::Corrupt(format!("unknown kind {k}"))),
    };
    if !r.data.is_empty() {
        return Err(ShardError::Corrupt("trailing bytes".into()));
    }
    Ok(shard)
}

pub fn save(path: &Path, shard: &Shard) -> Result<()> {
    std::fs::write(path, to_bytes(shard)).map_err(|source| ShardError::Io { path: path.display().to_string(), source })
}

pub fn load(path: &Path) -> Result<Shard> {
    let bytes = std::fs::read(path).map_err(|source| ShardError::Io { path: path.display().to_string(), source })?;
    from_bytes(&bytes)
}

pub fn load_triples(path: &Path) -> Result<Vec<EncodedTriple>> {
    match load(path)? {
        Shard::Triples(t) => Ok(t),
        Shard::Posts(_) => Err(ShardError::Corrupt(format!("{} holds posts, expected triples", path.display()))),
    }
}

pub fn load_posts(path: &Path) -> Result<Vec<EncodedPost>> {
    match load(path)? {
        Shard::Posts(p) => Ok(p),
        Shard::Triples(_) => Err(ShardError::Corrupt(format!("{} holds triples, expected posts", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_post, encode_reverse, encode_triple};

    fn fixture() -> (Vec<Triple>, Vec<Post>, Vocab) {
        let triples = vec![
            Triple { context: "hi".into(), message: "how are you".into(), response: "fine thanks".into(), speaker_id: "b".into() },
            Triple { context: String::new(), message: "ok?".into(), response: "sure".into(), speaker_id: "a".into() },
        ];
        let posts = vec![Post { speaker_id: "a".into(), text: "i like football".into() }];
        let vocab = Vocab::from_corpus(&triples, &posts, 100);
        (triples, posts, vocab)
    }

    #[test]
    fn encoding_matches_text_encoders() {
        let (triples, posts, vocab) = fixture();
        let speakers = SpeakerTable::from_ids(["a", "b"]);
        for t in &triples {
            let e = EncodedTriple::new(t, &vocab);
            assert_eq!(e.forward(Some(&speakers)), encode_triple(t, &vocab, Some(&speakers)));
            assert_eq!(e.reverse(), encode_reverse(t, &vocab));
        }
        let p = EncodedPost::new(&posts[0], &vocab);
        assert_eq!(p.autoencoder(None), encode_post(&posts[0], &vocab, None));
    }

    #[test]
    fn roundtrip_and_corruption() {
        let (triples, posts, vocab) = fixture();
        let ts = Shard::Triples(triples.iter().map(|t| EncodedTriple::new(t, &vocab)).collect());
        let ps = Shard::Posts(posts.iter().map(|p| EncodedPost::new(p, &vocab)).collect());
        for s in [ts, ps] {
            let b = to_bytes(&s);
            assert_eq!(from_bytes(&b).unwrap(), s);
            assert!(from_bytes(&b[..b.len() - 1]).is_err());
        }
    }
}
