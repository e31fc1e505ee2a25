//! Scripted synthetic corpora: a general speaker population whose replies
//! are mostly bland, plus two target personas (tech support and a sports
//! fan) with distinctive idiolects. Target personas never appear in the
//! conversational training data; general speakers use their style only
//! occasionally, so it is mostly visible through the personas' posts and
//! held-out conversations.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Post, Triple};

pub const TECH_SUPPORT: &str = "tech_support";
pub const SPORTS_FAN: &str = "sports_fan";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub general_speakers: usize,
    pub triples_per_speaker: usize,
    pub posts_per_persona: usize,
    pub dev_per_persona: usize,
    pub test_per_persona: usize,
    /// Probability that a general speaker answers a tech or sports message
    /// in the matching persona's style.
    pub styled_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            general_speakers: 40,
            triples_per_speaker: 50,
            posts_per_persona: 1000,
            dev_per_persona: 100,
            test_per_persona: 100,
            styled_rate: 0.08,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    /// General-population conversations.
    pub train: Vec<Triple>,
    /// Target-persona conversations for model selection.
    pub dev: Vec<Triple>,
    /// Target-persona conversations for evaluation.
    pub test: Vec<Triple>,
    /// Non-conversational posts of the target personas.
    pub posts: Vec<Post>,
}

type Slots = BTreeMap<&'static str, &'static [&'static str]>;

fn slots() -> Slots {
    let mut s: Slots = BTreeMap::new();
    s.insert("tech", &["phone", "laptop", "wifi", "router", "app", "printer", "tablet", "computer", "modem", "account"]);
    s.insert(
        "problem",
        &["is not working", "keeps crashing", "wo n't turn on", "is so slow", "stopped working again", "keeps freezing", "wo n't connect"],
    );
    s.insert("sport", &["game", "match", "season", "playoffs", "finals"]);
    s.insert("food", &["pizza", "coffee", "tacos", "burger", "pasta", "soup", "cake", "sushi"]);
    s.insert("weather", &["rain", "snow", "heat", "wind", "cold", "storm"]);
    s.insert("show", &["movie", "show", "episode", "series", "trailer"]);
    s.insert("music", &["concert", "album", "song", "band", "playlist"]);
    s.insert("work", &["boss", "meeting", "job", "project", "deadline", "shift"]);
    s.insert("travel", &["flight", "trip", "vacation", "hotel", "beach"]);
    s.insert(
        "adj",
        &["great", "terrible", "awesome", "annoying", "amazing", "weird", "fun", "boring", "crazy", "good", "bad", "nice"],
    );
    s.insert("greet", &["hey", "hi", "hello", "yo", "morning"]);
    s.insert(
        "bland",
        &[
            "i do n't know .",
            "haha yeah",
            "lol me too",
            "thanks for the info .",
            "ah ok . thanks",
            "i know right",
            "same here",
            "that sucks",
            "nice !",
            "i 'm not sure .",
            "ok cool",
            "yeah i guess",
        ],
    );
    s.insert(
        "fix",
        &[
            "restarting your {tech}",
            "clearing the cache",
            "signing out and back in",
            "reinstalling the app",
            "unplugging the router for thirty seconds",
            "updating the firmware",
            "resetting your password",
            "checking the cables",
        ],
    );
    s.insert("info", &["account number", "email address", "order number", "device model", "serial number"]);
    s.insert("setting", &["network settings", "software update", "privacy", "storage", "accounts"]);
    s.insert("service", &["login", "the mobile app", "email delivery", "streaming", "billing", "checkout"]);
    s.insert("team", &["lakers", "yankees", "celtics", "patriots", "warriors", "giants", "dodgers", "bulls"]);
    s.insert("result", &["won", "crushed them", "lost", "came back", "pulled it off"]);
    s.insert("margin", &["by ten", "in overtime", "three to one", "at home", "on the road"]);
    s.insert("player", &["lebron", "jeter", "brady", "curry", "kobe", "ortiz"]);
    s.insert("position", &["shooter", "pitcher", "quarterback", "defender", "captain"]);
    s.insert("event", &["playoffs", "season opener", "derby", "finals", "draft"]);
    s
}

const GENERAL_MESSAGES: &[&str] = &[
    "my {tech} {problem}",
    "anyone know how to fix my {tech} ?",
    "did you see the {sport} last night ?",
    "what a {sport} that was",
    "i just had the best {food} ever",
    "ugh the {weather} is terrible today",
    "have you seen the new {show} ?",
    "going to a {music} tonight",
    "my {work} is driving me crazy",
    "can not wait for my {travel}",
    "{greet} how are you ?",
    "{greet} what are you up to ?",
];

const GENERAL_REPLIES: &[&str] = &[
    "{bland}",
    "{bland}",
    "{bland}",
    "{bland}",
    "yeah the {topic} is {adj}",
    "i love {topic}",
    "my {topic} is {adj} too",
    "that {topic} was {adj}",
    "good luck with the {topic}",
    "have fun with the {topic}",
];

const TECH_MESSAGES: &[&str] = &["my {tech} {problem}", "anyone know how to fix my {tech} ?", "help my {tech} {problem}"];

const TECH_STYLE: &[&str] = &[
    "sorry to hear about the trouble with your {tech} . please try {fix} and let us know if that helps .",
    "thanks for reaching out ! please try {fix} , then {fix2} .",
    "we are sorry for the inconvenience . could you dm us your {info} so we can look into it ?",
    "happy to help ! to reset your {tech} , go to settings and select {setting} .",
    "please make sure your {tech} is updated to the latest version and try {fix} .",
    "thanks for your patience ! our team is looking into the issue with your {tech} .",
];

const TECH_POSTS_ONLY: &[&str] = &[
    "service has been restored for {service} . thanks for your patience !",
    "tip : try {fix} to fix most {tech} issues .",
    "we are performing scheduled maintenance on {service} tonight .",
    "our team is aware of an issue with {service} . we appreciate your patience .",
];

const SPORTS_MESSAGES: &[&str] = &["did you see the {sport} last night ?", "what a {sport} that was", "who do you think wins the {event} ?"];

const SPORTS_STYLE: &[&str] = &[
    "what a {sport} ! the {team} {result} {margin} tonight !",
    "{player} is the best {position} in the league , no doubt .",
    "can not wait for the {event} , go {team} !",
    "that referee was a joke . we were robbed in the {sport} .",
    "{team} fans are the best fans in the world !",
    "huge win for the {team} ! {event} here we come !",
];

const SPORTS_POSTS_ONLY: &[&str] = &[
    "game day ! go {team} !",
    "{player} was unreal tonight . {team} {result} {margin} !",
    "watching the {event} with the crew . let 's go {team} !",
];

/// Expands `{slot}` placeholders. A slot keeps its value across everything
/// expanded with the same bindings; trailing digits name an independent
/// draw from the same list (`{fix2}`).
fn expand(template: &str, slots: &Slots, bindings: &mut BTreeMap<String, String>, rng: &mut ChaCha8Rng) -> String {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push(rest[..open].to_string());
        let close = open + rest[open..].find('}').expect("closed slot");
        let name = &rest[open + 1..close];
        let value = match bindings.get(name) {
            Some(v) => v.clone(),
            None => {
                let list = slots[name.trim_end_matches(|c: char| c.is_ascii_digit())];
                let raw = list.choose(rng).expect("non-empty slot");
                let v = expand(raw, slots, bindings, rng);
                bindings.insert(name.to_string(), v.clone());
                v
            }
        };
        out.push(value);
        rest = &rest[close + 1..];
    }
    out.push(rest.to_string());
    out.concat()
}

/// The topical noun a general reply can echo back.
fn topic_of(bindings: &BTreeMap<String, String>) -> Option<String> {
    ["tech", "sport", "food", "weather", "show", "music", "work", "travel"].iter().find_map(|k| bindings.get(*k).cloned())
}

fn general_triple(speaker: &str, styled_rate: f64, slots: &Slots, rng: &mut ChaCha8Rng) -> Triple {
    let context = if rng.gen_bool(0.2) {
        String::new()
    } else {
        expand(GENERAL_MESSAGES.choose(rng).unwrap(), slots, &mut BTreeMap::new(), rng)
    };
    let mut b = BTreeMap::new();
    let message = expand(GENERAL_MESSAGES.choose(rng).unwrap(), slots, &mut b, rng);
    let style = if b.contains_key("tech") {
        Some(TECH_STYLE)
    } else if b.contains_key("sport") {
        Some(SPORTS_STYLE)
    } else {
        None
    };
    let template = match (style, topic_of(&b)) {
        (Some(style), _) if rng.gen_bool(styled_rate) => style.choose(rng).unwrap(),
        (_, Some(topic)) => {
            b.insert("topic".into(), topic);
            GENERAL_REPLIES.choose(rng).unwrap()
        }
        (_, None) => "{bland}",
    };
    let response = expand(template, slots, &mut b, rng);
    Triple { context, message, response, speaker_id: speaker.to_string() }
}

fn persona_triple(speaker: &str, messages: &[&str], style: &[&str], slots: &Slots, rng: &mut ChaCha8Rng) -> Triple {
    let context = if rng.gen_bool(0.2) {
        String::new()
    } else {
        expand(GENERAL_MESSAGES.choose(rng).unwrap(), slots, &mut BTreeMap::new(), rng)
    };
    let mut b = BTreeMap::new();
    let message = expand(messages.choose(rng).unwrap(), slots, &mut b, rng);
    let response = expand(style.choose(rng).unwrap(), slots, &mut b, rng);
    Triple { context, message, response, speaker_id: speaker.to_string() }
}

fn persona_post(speaker: &str, style: &[&str], extra: &[&str], slots: &Slots, rng: &mut ChaCha8Rng) -> Post {
    let template = if rng.gen_bool(0.25) { extra.choose(rng) } else { style.choose(rng) };
    Post { speaker_id: speaker.to_string(), text: expand(template.unwrap(), slots, &mut BTreeMap::new(), rng) }
}

pub fn generate(cfg: &SynthConfig) -> SynthCorpus {
    let slots = slots();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::with_capacity(cfg.general_speakers * cfg.triples_per_speaker);
    for s in 0..cfg.general_speakers {
        let name = format!("user{s:03}");
        for _ in 0..cfg.triples_per_speaker {
            train.push(general_triple(&name, cfg.styled_rate, &slots, &mut rng));
        }
    }
    train.shuffle(&mut rng);
    let personas: [(&str, &[&str], &[&str], &[&str]); 2] = [
        (TECH_SUPPORT, TECH_MESSAGES, TECH_STYLE, TECH_POSTS_ONLY),
        (SPORTS_FAN, SPORTS_MESSAGES, SPORTS_STYLE, SPORTS_POSTS_ONLY),
    ];
    let (mut dev, mut test, mut posts) = (Vec::new(), Vec::new(), Vec::new());
    for (name, messages, style, extra) in personas {
        for _ in 0..cfg.dev_per_persona {
            dev.push(persona_triple(name, messages, style, &slots, &mut rng));
        }
        for _ in 0..cfg.test_per_persona {
            test.push(persona_triple(name, messages, style, &slots, &mut rng));
        }
        for _ in 0..cfg.posts_per_persona {
            posts.push(persona_post(name, style, extra, &slots, &mut rng));
        }
    }
    SynthCorpus { train, dev, test, posts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;

    #[test]
    fn default_corpus_has_expected_shape() {
        let c = generate(&SynthConfig::default());
        assert_eq!(c.train.len(), 2000);
        assert_eq!(c.posts.len(), 2000);
        assert_eq!((c.dev.len(), c.test.len()), (200, 200));
        assert!(c.train.iter().all(|t| t.speaker_id.starts_with("user")));
        let vocab = Vocab::from_corpus(&c.train, &c.posts, 10_000);
        assert!(vocab.len() <= 500, "vocab {}", vocab.len());
        assert!(c.dev.iter().chain(&c.test).flat_map(|t| [&t.message, &t.response]).all(|s| !s.contains('{')));
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = SynthConfig { general_speakers: 3, triples_per_speaker: 4, posts_per_persona: 5, dev_per_persona: 2, test_per_persona: 2, styled_rate: 0.1, seed: 1 };
        assert_eq!(generate(&cfg), generate(&cfg));
        assert_ne!(generate(&cfg), generate(&SynthConfig { seed: 2, ..cfg.clone() }));
    }

    #[test]
    fn bound_slots_repeat_within_an_exchange() {
        let slots = slots();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = BTreeMap::new();
        let m = expand("my {tech} broke", &slots, &mut b, &mut rng);
        let r = expand("restart the {tech}", &slots, &mut b, &mut rng);
        assert_eq!(m.split(' ').nth(1), r.split(' ').nth(2));
    }
}
