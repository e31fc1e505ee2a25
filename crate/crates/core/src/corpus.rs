//! Conversation triples, speaker posts, vocabulary and example encoding.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOS: usize = 2;
pub const BOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<eos>", "<bos>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
    #[error("vocab file: {0}")]
    BadVocab(String),
}

/// One conversational turn: previous response, current message, reply.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    #[serde(default)]
    pub context: String,
    pub message: String,
    pub response: String,
    pub speaker_id: String,
}

/// A single non-conversational post by a speaker.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub speaker_id: String,
    pub text: String,
}

/// Integer-encoded training unit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub source_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub speaker: Option<usize>,
}

impl TokenizedExample {
    pub fn target_len(&self) -> usize {
        self.target_ids.len()
    }
}

/// Lowercases, splits punctuation from adjoining words, then splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in lower.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Keeps the `cap` most frequent tokens, ties broken lexicographically.
    pub fn build<'a, I>(texts: I, cap: usize) -> Vocab
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap);
        Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    /// Vocabulary over both triples and posts.
    pub fn from_corpus(triples: &[Triple], posts: &[Post], cap: usize) -> Vocab {
        let texts = triples
            .iter()
            .flat_map(|t| [t.context.as_str(), t.message.as_str(), t.response.as_str()])
            .chain(posts.iter().map(|p| p.text.as_str()));
        Vocab::build(texts, cap)
    }

    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Vocab {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { token_to_id, id_to_token }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.id_to_token.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        self.encode_tokens(&tokenize(text))
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// `vocab.txt` contents: one token per line, reserved tokens first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.id_to_token {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Vocab, CorpusError> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(CorpusError::BadVocab("missing reserved header".into()));
        }
        let vocab = Vocab::from_tokens(lines[RESERVED.len()..].iter().map(|s| s.to_string()));
        if vocab.token_to_id.len() != vocab.id_to_token.len() {
            return Err(CorpusError::BadVocab("duplicate token".into()));
        }
        Ok(vocab)
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_text()).map_err(|source| io_err(path, source))
    }

    pub fn load(path: &Path) -> Result<Vocab, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| io_err(path, source))?;
        Vocab::from_text(&text)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), source }
}

/// Speaker ids in order of first registration.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerTable {
    names: Vec<String>,
}

impl SpeakerTable {
    pub fn new(names: Vec<String>) -> Self {
        SpeakerTable { names }
    }

    /// Distinct speakers sorted by id.
    pub fn from_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        let set: std::collections::BTreeSet<&str> = ids.into_iter().collect();
        SpeakerTable { names: set.into_iter().map(str::to_string).collect() }
    }

    pub fn index(&self, speaker: &str) -> Option<usize> {
        self.names.iter().position(|n| n == speaker)
    }

    pub fn push(&mut self, speaker: &str) -> usize {
        self.names.push(speaker.to_string());
        self.names.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// `context EOS message → response EOS`.
pub fn encode_triple(t: &Triple, vocab: &Vocab, speakers: Option<&SpeakerTable>) -> TokenizedExample {
    let mut source_ids = vocab.encode_text(&t.context);
    source_ids.push(EOS);
    source_ids.extend(vocab.encode_text(&t.message));
    let mut target_ids = vocab.encode_text(&t.response);
    target_ids.push(EOS);
    TokenizedExample { source_ids, target_ids, speaker: speakers.and_then(|s| s.index(&t.speaker_id)) }
}

/// Reverse direction used for p(M|R): `response → message EOS`.
pub fn encode_reverse(t: &Triple, vocab: &Vocab) -> TokenizedExample {
    let mut source_ids = vocab.encode_text(&t.response);
    if source_ids.is_empty() {
        source_ids.push(EOS);
    }
    let mut target_ids = vocab.encode_text(&t.message);
    target_ids.push(EOS);
    TokenizedExample { source_ids, target_ids, speaker: None }
}

/// Autoencoder example: the post predicts itself.
pub fn encode_post(p: &Post, vocab: &Vocab, speakers: Option<&SpeakerTable>) -> TokenizedExample {
    let source_ids = vocab.encode_text(&p.text);
    let mut target_ids = source_ids.clone();
    target_ids.push(EOS);
    TokenizedExample { source_ids, target_ids, speaker: speakers.and_then(|s| s.index(&p.speaker_id)) }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordKind {
    Triples,
    Posts,
}

/// A record parsed from a JSONL corpus file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Record {
    Triple(Triple),
    Post(Post),
}

#[derive(Clone, Debug, Default)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    /// `(1-based line number, reason)` for each skipped line.
    pub skipped: Vec<(usize, String)>,
}

fn parse_record(line: &str, kind: RecordKind) -> Result<Record, String> {
    match kind {
        RecordKind::Triples => {
            let t: Triple = serde_json::from_str(line).map_err(|e| e.to_string())?;
            if tokenize(&t.response).is_empty() {
                return Err("empty response".into());
            }
            Ok(Record::Triple(t))
        }
        RecordKind::Posts => {
            let p: Post = serde_json::from_str(line).map_err(|e| e.to_string())?;
            if tokenize(&p.text).is_empty() {
                return Err("empty text".into());
            }
            Ok(Record::Post(p))
        }
    }
}

/// Parses JSONL text; blank lines are ignored, CRLF and LF are equivalent.
pub fn parse_jsonl(text: &str, kind: RecordKind, strict: bool, origin: &str) -> Result<Loaded<Record>, CorpusError> {
    let mut out = Loaded { records: Vec::new(), skipped: Vec::new() };
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(line, kind) {
            Ok(r) => out.records.push(r),
            Err(reason) if strict => {
                return Err(CorpusError::Malformed { path: origin.to_string(), line: i + 1, reason });
            }
            Err(reason) => {
                log::warn!("{origin}:{}: skipping malformed line: {reason}", i + 1);
                out.skipped.push((i + 1, reason));
            }
        }
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path, kind: RecordKind, strict: bool) -> Result<Loaded<Record>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| io_err(path, source))?;
    parse_jsonl(&text, kind, strict, &path.display().to_string())
}

pub fn load_triples(path: &Path, strict: bool) -> Result<Loaded<Triple>, CorpusError> {
    let l = load_jsonl(path, RecordKind::Triples, strict)?;
    let records = l
        .records
        .into_iter()
        .filter_map(|r| match r {
            Record::Triple(t) => Some(t),
            Record::Post(_) => None,
        })
        .collect();
    Ok(Loaded { records, skipped: l.skipped })
}

pub fn load_posts(path: &Path, strict: bool) -> Result<Loaded<Post>, CorpusError> {
    let l = load_jsonl(path, RecordKind::Posts, strict)?;
    let records = l
        .records
        .into_iter()
        .filter_map(|r| match r {
            Record::Post(p) => Some(p),
            Record::Triple(_) => None,
        })
        .collect();
    Ok(Loaded { records, skipped: l.skipped })
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serialization"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| io_err(path, source))
}

/// Posts grouped by speaker, speakers in sorted order.
pub fn posts_by_speaker(posts: &[Post]) -> BTreeMap<String, Vec<Post>> {
    let mut map: BTreeMap<String, Vec<Post>> = BTreeMap::new();
    for p in posts {
        map.entry(p.speaker_id.clone()).or_default().push(p.clone());
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(tokenize("Hello, world!"), toks(&["hello", ",", "world", "!"]));
        assert!(tokenize("").is_empty());
        assert!(tokenize("   \t ").is_empty());
        assert_eq!(tokenize("I'm OK..."), toks(&["i", "'", "m", "ok", ".", ".", "."]));
    }

    #[test]
    fn tokenize_is_idempotent_on_joined_output() {
        let sentences: Vec<String> = (0..100)
            .map(|i| format!("Sentence #{i}: Hello, World! It's {}% done; (really?) İstanbul-ÉTÉ", i * 3))
            .collect();
        for s in &sentences {
            let once = tokenize(s);
            let twice = tokenize(&once.join(" "));
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn vocab_cap_keeps_most_frequent() {
        let v = Vocab::build(["a a b"], 1);
        assert_eq!(v.len(), 5);
        assert!(v.contains("a"));
        assert_eq!(v.encode_text("b"), vec![UNK]);
    }

    #[test]
    fn vocab_large_cap_has_no_unk() {
        let v = Vocab::build(["x y z x"], 100);
        assert!(!v.encode_text("x y z").contains(&UNK));
    }

    #[test]
    fn vocab_ties_are_lexicographic() {
        let v = Vocab::build(["a a c b"], 2);
        assert!(v.contains("a") && v.contains("b") && !v.contains("c"));
    }

    #[test]
    fn empty_corpus_gives_reserved_only() {
        let v = Vocab::build(std::iter::empty::<&str>(), 10);
        assert_eq!(v.len(), 4);
        assert_eq!(v.token(EOS), "<eos>");
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = Vocab::build(["the cat sat on the mat"], 10);
        let text = v.to_text();
        assert!(text.starts_with("<pad>\n<unk>\n<eos>\n<bos>\nthe\n"));
        assert_eq!(Vocab::from_text(&text).unwrap(), v);
        assert!(Vocab::from_text("a\nb\n").is_err());
    }

    #[test]
    fn encode_triple_uses_eos_delimiter() {
        let v = Vocab::build(["hi how are you fine"], 100);
        let t = Triple {
            context: "hi".into(),
            message: "how are you".into(),
            response: "fine".into(),
            speaker_id: "u".into(),
        };
        let ex = encode_triple(&t, &v, None);
        assert_eq!(v.decode(&ex.source_ids), toks(&["hi", "<eos>", "how", "are", "you"]));
        assert_eq!(v.decode(&ex.target_ids), toks(&["fine", "<eos>"]));
        assert_eq!(ex.speaker, None);

        let speakers = SpeakerTable::new(vec!["x".into(), "u".into()]);
        let empty_ctx = Triple { context: String::new(), message: "zebra".into(), ..t };
        let ex = encode_triple(&empty_ctx, &v, Some(&speakers));
        assert_eq!(ex.source_ids, vec![EOS, UNK]);
        assert_eq!(ex.speaker, Some(1));
    }

    #[test]
    fn encode_post_predicts_itself() {
        let v = Vocab::build(["good morning"], 100);
        let ex = encode_post(&Post { speaker_id: "s".into(), text: "good morning".into() }, &v, None);
        assert_eq!(v.decode(&ex.source_ids), toks(&["good", "morning"]));
        assert_eq!(v.decode(&ex.target_ids), toks(&["good", "morning", "<eos>"]));
        let ex = encode_post(&Post { speaker_id: "s".into(), text: "good".into() }, &v, None);
        assert_eq!((ex.source_ids.len(), ex.target_ids.len()), (1, 2));
    }

    #[test]
    fn reverse_swaps_message_and_response() {
        let v = Vocab::build(["a b c"], 10);
        let t = Triple { context: "a".into(), message: "b".into(), response: "c".into(), speaker_id: "s".into() };
        let ex = encode_reverse(&t, &v);
        assert_eq!(v.decode(&ex.source_ids), toks(&["c"]));
        assert_eq!(v.decode(&ex.target_ids), toks(&["b", "<eos>"]));
        assert_eq!(ex.speaker, None);
    }

    const THREE: &str = concat!(
        r#"{"context":"a","message":"b","response":"c","speaker_id":"s1"}"#,
        "\n",
        r#"{"context":"","message":"d","response":"e f","speaker_id":"s2"}"#,
        "\n",
        r#"{"message":"g","response":"h","speaker_id":"s1"}"#,
        "\n"
    );

    #[test]
    fn jsonl_three_valid_lines() {
        let l = parse_jsonl(THREE, RecordKind::Triples, true, "t").unwrap();
        assert_eq!(l.records.len(), 3);
        assert!(l.skipped.is_empty());
    }

    #[test]
    fn jsonl_missing_response_lenient_and_strict() {
        let text = format!("{THREE}{}\n", r#"{"context":"a","message":"b","speaker_id":"s"}"#);
        let l = parse_jsonl(&text, RecordKind::Triples, false, "t").unwrap();
        assert_eq!(l.records.len(), 3);
        assert_eq!(l.skipped.len(), 1);
        assert_eq!(l.skipped[0].0, 4);
        let err = parse_jsonl(&text, RecordKind::Triples, true, "t").unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 4, .. }));
    }

    #[test]
    fn jsonl_crlf_matches_lf() {
        let crlf = THREE.replace('\n', "\r\n");
        assert_ne!(crlf.as_bytes(), THREE.as_bytes());
        let a = parse_jsonl(THREE, RecordKind::Triples, true, "t").unwrap();
        let b = parse_jsonl(&crlf, RecordKind::Triples, true, "t").unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn jsonl_posts_reject_empty_text() {
        let text = "{\"speaker_id\":\"a\",\"text\":\"hello\"}\n{\"speaker_id\":\"a\",\"text\":\"  \"}\n";
        let l = parse_jsonl(text, RecordKind::Posts, false, "p").unwrap();
        assert_eq!(l.records.len(), 1);
        assert_eq!(l.skipped[0].0, 2);
    }

    #[test]
    fn load_jsonl_reports_missing_file() {
        let err = load_jsonl(Path::new("/nonexistent/x.jsonl"), RecordKind::Posts, false).unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    proptest! {
        #[test]
        fn encode_decode_identity_in_vocab(words in proptest::collection::vec("[a-z]{1,6}", 1..20)) {
            let text = words.join(" ");
            let v = Vocab::build([text.as_str()], 1000);
            let ids = v.encode_text(&text);
            prop_assert_eq!(v.decode(&ids), tokenize(&text));
        }

        #[test]
        fn examples_satisfy_invariants(ctx in "[ -~]{0,30}", msg in "[ -~]{0,30}", resp in "[ -~]{0,30}") {
            let v = Vocab::build([ctx.as_str(), msg.as_str()], 20);
            let t = Triple { context: ctx, message: msg, response: resp, speaker_id: "s".into() };
            let ex = encode_triple(&t, &v, None);
            prop_assert!(ex.source_ids.iter().chain(&ex.target_ids).all(|&i| i < v.len()));
            prop_assert_eq!(*ex.target_ids.last().unwrap(), EOS);
            let p = encode_post(&Post { speaker_id: "s".into(), text: t.message.clone() }, &v, None);
            prop_assert_eq!(*p.target_ids.last().unwrap(), EOS);
            prop_assert!(p.target_ids.iter().all(|&i| i < v.len()));
        }

        #[test]
        fn vocab_build_is_deterministic(words in proptest::collection::vec("[a-c]{1,2}", 0..40)) {
            let text = words.join(" ");
            let a = Vocab::build([text.as_str()], 3);
            let b = Vocab::build([text.as_str()], 3);
            prop_assert_eq!(a.to_text(), b.to_text());
        }
    }
}
