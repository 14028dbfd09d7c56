use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Purpose};

/// A family of synthetic text with its own token statistics.
///
/// The four styles stand in for academic, web, encyclopedic and prose text.
/// Each is a first-order Markov chain over the vocabulary whose transition
/// table depends only on the style, so a style is recognisable across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    Academic,
    Web,
    Encyclopedic,
    Prose,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::Academic, Style::Web, Style::Encyclopedic, Style::Prose];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Style::Academic => "academic",
            Style::Web => "web",
            Style::Encyclopedic => "encyclopedic",
            Style::Prose => "prose",
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "academic" | "arxiv" => Ok(Style::Academic),
            "web" | "c4" => Ok(Style::Web),
            "encyclopedic" | "wikipedia" => Ok(Style::Encyclopedic),
            "prose" | "gutenberg" => Ok(Style::Prose),
            _ => Err(Error::Config(format!("unknown corpus style `{s}`"))),
        }
    }
}

/// The 64-symbol character vocabulary: `a-z`, `A-Z`, `0-9`, space and `.`.
pub struct Alphabet;

impl Alphabet {
    pub const SIZE: usize = 64;

    pub fn symbol(id: u16) -> Option<char> {
        let id = id as u8;
        match id {
            0..=25 => Some((b'a' + id) as char),
            26..=51 => Some((b'A' + id - 26) as char),
            52..=61 => Some((b'0' + id - 52) as char),
            62 => Some(' '),
            63 => Some('.'),
            _ => None,
        }
    }

    pub fn id(c: char) -> Option<u16> {
        let id = match c {
            'a'..='z' => c as u16 - 'a' as u16,
            'A'..='Z' => c as u16 - 'A' as u16 + 26,
            '0'..='9' => c as u16 - '0' as u16 + 52,
            ' ' => 62,
            '.' => 63,
            _ => return None,
        };
        Some(id)
    }

    pub fn encode(text: &str) -> Result<Vec<u16>> {
        text.chars()
            .map(|c| Alphabet::id(c).ok_or_else(|| Error::Index(format!("character {c:?} outside the alphabet"))))
            .collect()
    }

    /// Decodes ids; ids outside the alphabet render as `?`.
    pub fn decode(tokens: &[u16]) -> String {
        tokens.iter().map(|&t| Alphabet::symbol(t).unwrap_or('?')).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub tokens: Vec<u16>,
    pub source_label: Style,
    pub vocab_size: usize,
}

impl Corpus {
    pub fn new(tokens: Vec<u16>, source_label: Style, vocab_size: usize) -> Result<Self> {
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Index(format!(
                "token {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(Self {
            tokens,
            source_label,
            vocab_size,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Empirical unigram distribution.
    pub fn unigram(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.vocab_size];
        for &t in &self.tokens {
            counts[t as usize] += 1.0;
        }
        let n = self.tokens.len().max(1) as f64;
        counts.iter_mut().for_each(|c| *c /= n);
        counts
    }
}

const SUCCESSOR_WEIGHTS: [f64; 4] = [0.5, 0.25, 0.15, 0.1];
const SMOOTHING: f64 = 0.02;
const OFF_STYLE_WEIGHT: f64 = 0.05;

/// Row-stochastic transition table of a style.
fn transition_table(style: Style, vocab: usize) -> Vec<Vec<f64>> {
    // Fixed construction seed: the table is a property of the style.
    let mut rng = seed::rng(0x5EED_57E1, Purpose::Corpus, &[style.index() as u64, vocab as u64]);
    let span = (vocab / 2).max(1);
    let start = (style.index() * vocab / 4) % vocab;
    let preference: Vec<f64> = (0..vocab)
        .map(|t| {
            let offset = (t + vocab - start) % vocab;
            if offset < span {
                1.0
            } else {
                OFF_STYLE_WEIGHT
            }
        })
        .collect();
    let total_pref: f64 = preference.iter().sum();

    (0..vocab)
        .map(|_| {
            let mut row = vec![SMOOTHING / vocab as f64; vocab];
            let mut chosen: Vec<usize> = Vec::with_capacity(SUCCESSOR_WEIGHTS.len());
            while chosen.len() < SUCCESSOR_WEIGHTS.len().min(vocab) {
                let mut u = rng.gen::<f64>() * total_pref;
                let mut pick = vocab - 1;
                for (t, &w) in preference.iter().enumerate() {
                    if u < w {
                        pick = t;
                        break;
                    }
                    u -= w;
                }
                if !chosen.contains(&pick) {
                    chosen.push(pick);
                }
            }
            let mass = 1.0 - SMOOTHING;
            let wsum: f64 = SUCCESSOR_WEIGHTS[..chosen.len()].iter().sum();
            for (&t, &w) in chosen.iter().zip(&SUCCESSOR_WEIGHTS) {
                row[t] += mass * w / wsum;
            }
            row
        })
        .collect()
}

/// Deterministic synthetic text for `(style, seed)`.
pub fn generate_corpus(
    style: Style,
    length: usize,
    vocab_size: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Corpus> {
    if vocab_size == 0 || vocab_size > u16::MAX as usize + 1 {
        return Err(Error::Config(format!("vocabulary size {vocab_size} out of range")));
    }
    if length < seq_len + 1 {
        return Err(Error::Config(format!(
            "corpus of {length} tokens is shorter than one window of {}",
            seq_len + 1
        )));
    }
    let table = transition_table(style, vocab_size);
    let mut rng = seed::rng(seed, Purpose::Corpus, &[style.index() as u64]);
    let mut tokens = Vec::with_capacity(length);
    let mut state = rng.gen_range(0..vocab_size);
    for _ in 0..length {
        tokens.push(state as u16);
        let row = &table[state];
        let mut u: f64 = rng.gen();
        let mut next = vocab_size - 1;
        for (t, &p) in row.iter().enumerate() {
            if u < p {
                next = t;
                break;
            }
            u -= p;
        }
        state = next;
    }
    Corpus::new(tokens, style, vocab_size)
}

const MAGIC: &[u8; 4] = b"PHDS";
const VERSION: u32 = 1;

/// Writes `PHDS` | version u32 | vocab u32 | length u32, then u16 LE tokens.
pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let length = u32::try_from(corpus.len())
        .map_err(|_| Error::Config("corpus too long for the export format".into()))?;
    let mut buf = Vec::with_capacity(16 + 2 * corpus.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(corpus.vocab_size as u32).to_le_bytes());
    buf.extend_from_slice(&length.to_le_bytes());
    for t in &corpus.tokens {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path, source_label: Style) -> Result<Corpus> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::integrity(path, "missing PHDS header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let (version, vocab, length) = (word(4), word(8) as usize, word(12) as usize);
    if version != VERSION {
        return Err(Error::integrity(path, format!("unsupported version {version}")));
    }
    if bytes.len() != 16 + 2 * length {
        return Err(Error::integrity(
            path,
            format!("expected {} token bytes, found {}", 2 * length, bytes.len() - 16),
        ));
    }
    let tokens = bytes[16..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Corpus::new(tokens, source_label, vocab)
}
