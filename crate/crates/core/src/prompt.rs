//! Spatial prompts: `a <object> <relation> a <object>`.

use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Left,
    Right,
    Above,
    Below,
    Near,
}

impl Relation {
    /// The four directional relations, in benchmark order.
    pub const DIRECTIONAL: [Relation; 4] = [
        Relation::Left,
        Relation::Right,
        Relation::Above,
        Relation::Below,
    ];

    pub const ALL: [Relation; 5] = [
        Relation::Left,
        Relation::Right,
        Relation::Above,
        Relation::Below,
        Relation::Near,
    ];

    /// Phrase used between the two objects in a prompt.
    pub fn phrase(self) -> &'static str {
        match self {
            Relation::Left => "to the left of",
            Relation::Right => "to the right of",
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::Near => "near",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::Near => "near",
        }
    }

    /// The relation that holds when the two objects are swapped.
    pub fn converse(self) -> Relation {
        match self {
            Relation::Left => Relation::Right,
            Relation::Right => Relation::Left,
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
            Relation::Near => Relation::Near,
        }
    }

    pub fn is_directional(self) -> bool {
        self != Relation::Near
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One object class: identifier, display name and its Gaussian template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub id: String,
    pub name: String,
    pub side: usize,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<VocabEntry>", into = "Vec<VocabEntry>")]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
}

impl TryFrom<Vec<VocabEntry>> for Vocabulary {
    type Error = Error;

    fn try_from(entries: Vec<VocabEntry>) -> Result<Self> {
        Vocabulary::new(entries)
    }
}

impl From<Vocabulary> for Vec<VocabEntry> {
    fn from(v: Vocabulary) -> Self {
        v.entries
    }
}

impl Vocabulary {
    pub fn new(entries: Vec<VocabEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.id.is_empty() || e.name.trim().is_empty() {
                return Err(Error::Config(format!("vocabulary entry {i} has an empty id or name")));
            }
            if entries[..i].iter().any(|o| o.id == e.id) {
                return Err(Error::Config(format!("duplicate vocabulary id {:?}", e.id)));
            }
            if entries[..i]
                .iter()
                .any(|o| o.name.eq_ignore_ascii_case(&e.name))
            {
                return Err(Error::Config(format!("duplicate vocabulary name {:?}", e.name)));
            }
            if e.side % 2 == 0 {
                return Err(Error::Config(format!("{}: template side {} is even", e.id, e.side)));
            }
            if !(e.sigma > 0.0) || !e.sigma.is_finite() {
                return Err(Error::Config(format!("{}: sigma must be positive", e.id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    pub fn get(&self, id: &str) -> Option<&VocabEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// A 16-class vocabulary of everyday objects with varied template sizes.
    pub fn default_toy() -> Self {
        const ENTRIES: [(&str, &str, usize, f64); 16] = [
            ("person", "person", 7, 1.6),
            ("bicycle", "bicycle", 7, 1.4),
            ("car", "car", 9, 1.9),
            ("dog", "dog", 7, 1.5),
            ("cat", "cat", 5, 1.2),
            ("horse", "horse", 9, 2.0),
            ("clock", "clock", 5, 1.1),
            ("potted_plant", "potted plant", 7, 1.5),
            ("bench", "bench", 9, 1.8),
            ("bird", "bird", 5, 1.0),
            ("cup", "cup", 5, 1.1),
            ("chair", "chair", 7, 1.4),
            ("laptop", "laptop", 7, 1.7),
            ("umbrella", "umbrella", 9, 1.8),
            ("teddy_bear", "teddy bear", 7, 1.5),
            ("traffic_light", "traffic light", 5, 1.2),
        ];
        Self::new(
            ENTRIES
                .iter()
                .map(|(id, name, side, sigma)| VocabEntry {
                    id: id.to_string(),
                    name: name.to_string(),
                    side: *side,
                    sigma: *sigma,
                })
                .collect(),
        )
        .expect("default vocabulary is valid")
    }
}

/// `<object_a, relation, object_b>` plus the text it came from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTriplet {
    #[serde(rename = "a")]
    pub object_a: String,
    #[serde(rename = "r")]
    pub relation: Relation,
    #[serde(rename = "b")]
    pub object_b: String,
    #[serde(rename = "text")]
    pub raw_text: String,
}

impl PromptTriplet {
    /// Builds a triplet and renders its canonical text.
    pub fn new(object_a: &str, relation: Relation, object_b: &str, vocab: &Vocabulary) -> Result<Self> {
        let a = vocab
            .get(object_a)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown object id {object_a:?}")))?;
        let b = vocab
            .get(object_b)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown object id {object_b:?}")))?;
        if a.id == b.id {
            return Err(Error::MalformedPrompt(format!(
                "both objects are {:?}",
                a.name
            )));
        }
        Ok(Self {
            object_a: a.id.clone(),
            relation,
            object_b: b.id.clone(),
            raw_text: render(&a.name, relation, &b.name),
        })
    }
}

fn article(name: &str) -> &'static str {
    match name.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Canonical prompt text for two display names.
pub fn render(name_a: &str, relation: Relation, name_b: &str) -> String {
    format!(
        "{} {} {} {} {}",
        article(name_a),
        name_a,
        relation.phrase(),
        article(name_b),
        name_b
    )
}

struct Word {
    start: usize,
    end: usize,
    text: String,
}

fn words(text: &str) -> Vec<Word> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(Word {
                    start: s,
                    end: i,
                    text: text[s..i].to_lowercase(),
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Word {
            start: s,
            end: text.len(),
            text: text[s..].to_lowercase(),
        });
    }
    out
}

fn is_article(w: &Word) -> bool {
    w.text == "a" || w.text == "an"
}

fn phrase_matches(words: &[Word], at: usize, phrase: &str) -> Option<usize> {
    let parts: Vec<&str> = phrase.split(' ').collect();
    if at + parts.len() > words.len() {
        return None;
    }
    parts
        .iter()
        .zip(&words[at..])
        .all(|(p, w)| *p == w.text)
        .then_some(parts.len())
}

/// Resolves an object span, longest display-name match first.
fn match_object(span: &[Word], text: &str, vocab: &Vocabulary) -> Result<String> {
    let unknown = || {
        let (start, end) = match (span.first(), span.last()) {
            (Some(f), Some(l)) => (f.start, l.end),
            _ => (0, 0),
        };
        Error::UnknownObject {
            token: text[start..end].to_string(),
            start,
            end,
        }
    };
    let mut best: Option<(usize, &VocabEntry)> = None;
    for entry in vocab.entries() {
        let name = entry.name.to_lowercase();
        if let Some(n) = phrase_matches(span, 0, &name) {
            if best.is_none_or(|(len, _)| n > len) {
                best = Some((n, entry));
            }
        }
    }
    match best {
        Some((n, entry)) if n == span.len() => Ok(entry.id.clone()),
        _ => Err(unknown()),
    }
}

/// Parses `a(n) <A> <relation phrase> a(n) <B>` (case-insensitive).
pub fn parse_prompt(text: &str, vocab: &Vocabulary) -> Result<PromptTriplet> {
    let trimmed = text.trim_end().trim_end_matches('.');
    let words = words(trimmed);
    if words.len() < 5 || !is_article(&words[0]) {
        return Err(Error::MalformedPrompt(format!(
            "expected \"a <object> <relation> a <object>\", got {text:?}"
        )));
    }
    // The first relation phrase that is followed by an article splits the prompt.
    let mut split = None;
    'scan: for at in 2..words.len() {
        for relation in Relation::ALL {
            if let Some(n) = phrase_matches(&words, at, relation.phrase()) {
                if words.get(at + n).is_some_and(is_article) && at + n + 1 < words.len() {
                    split = Some((at, n, relation));
                    break 'scan;
                }
            }
        }
    }
    let (at, n, relation) = split.ok_or_else(|| {
        Error::MalformedPrompt(format!("no supported relation phrase in {text:?}"))
    })?;
    let object_a = match_object(&words[1..at], trimmed, vocab)?;
    let object_b = match_object(&words[at + n + 1..], trimmed, vocab)?;
    if object_a == object_b {
        return Err(Error::MalformedPrompt(format!(
            "both objects are {object_a:?}"
        )));
    }
    Ok(PromptTriplet {
        object_a,
        relation,
        object_b,
        raw_text: text.to_string(),
    })
}

/// Samples `pair_count` distinct unordered pairs and emits each under the
/// four directional relations, pair-major.
pub fn generate_benchmark(vocab: &Vocabulary, pair_count: usize, rng_seed: u64) -> Result<Vec<PromptTriplet>> {
    let k = vocab.len();
    if k < 2 {
        return Err(Error::InvalidArgument(
            "benchmark needs at least two vocabulary entries".into(),
        ));
    }
    let available = k * (k - 1) / 2;
    if pair_count == 0 || pair_count > available {
        return Err(Error::InvalidArgument(format!(
            "pair_count {pair_count} outside 1..={available}"
        )));
    }
    let mut pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| ((i + 1)..k).map(move |j| (i, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    pairs.shuffle(&mut rng);
    let mut out = Vec::with_capacity(pair_count * 4);
    for &(i, j) in &pairs[..pair_count] {
        let (a, b) = if rng.random::<bool>() { (i, j) } else { (j, i) };
        let (a, b) = (&vocab.entries()[a], &vocab.entries()[b]);
        for relation in Relation::DIRECTIONAL {
            out.push(PromptTriplet {
                object_a: a.id.clone(),
                relation,
                object_b: b.id.clone(),
                raw_text: render(&a.name, relation, &b.name),
            });
        }
    }
    Ok(out)
}

/// One JSON object per line.
pub fn write_jsonl(triplets: &[PromptTriplet], mut out: impl Write) -> Result<()> {
    for t in triplets {
        let line = serde_json::to_string(t).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io("writing prompts", e))?;
    }
    Ok(())
}

pub fn read_jsonl(input: impl BufRead) -> Result<Vec<PromptTriplet>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("reading prompts", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Serde(format!("prompt line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}
