//! Synthetic symbol sequences with ground-truth word placements.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::trace::ConceptAnnotation;

/// A word placed in the sequence at `start`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub start: usize,
    pub word: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolSequence {
    pub symbols: Vec<char>,
    /// Word placements in order; every symbol not covered is a filler.
    pub parse: Vec<Placement>,
    /// Per-emission probability of each word.
    pub vocab: Vec<(String, f64)>,
    /// Filler symbols (a single null, or a noise alphabet).
    pub fillers: Vec<char>,
    /// Per-emission probability mass of fillers.
    pub filler_prob: f64,
}

impl SymbolSequence {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn text(&self) -> String {
        self.symbols.iter().collect()
    }

    /// Sorted set of distinct symbols.
    pub fn alphabet(&self) -> Vec<char> {
        let mut a = self.symbols.clone();
        a.sort_unstable();
        a.dedup();
        a
    }

    /// Number of segments in the ground-truth segmentation: one per word
    /// placement plus one per filler symbol.
    pub fn ground_truth_parse_length(&self) -> usize {
        let covered: usize = self.parse.iter().map(|p| p.word.chars().count()).sum();
        self.parse.len() + (self.symbols.len() - covered)
    }

    /// Rebuilds the symbol string from the placements, filling gaps from the
    /// original sequence. Returns `None` when a placement disagrees with the
    /// symbols, overlaps its predecessor, or a gap holds a non-filler symbol.
    pub fn reconstruct(&self) -> Option<Vec<char>> {
        let mut out = Vec::with_capacity(self.symbols.len());
        for p in &self.parse {
            if p.start < out.len() {
                return None;
            }
            while out.len() < p.start {
                let c = *self.symbols.get(out.len())?;
                if !self.fillers.contains(&c) {
                    return None;
                }
                out.push(c);
            }
            out.extend(p.word.chars());
        }
        while out.len() < self.symbols.len() {
            let c = self.symbols[out.len()];
            if !self.fillers.contains(&c) {
                return None;
            }
            out.push(c);
        }
        (out == self.symbols).then_some(out)
    }

    /// Writes the symbols as one line of text and everything else as a JSON
    /// sidecar.
    pub fn save(&self, text_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<()> {
        let (tp, sp) = (text_path.as_ref(), sidecar_path.as_ref());
        fs::write(tp, format!("{}\n", self.text())).map_err(|e| Error::io(tp, e))?;
        let sidecar = Sidecar {
            parse: self.parse.clone(),
            vocab: self.vocab.clone(),
            fillers: self.fillers.clone(),
            filler_prob: self.filler_prob,
        };
        fs::write(sp, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(sp, e))
    }

    /// Reads a symbol file; without a sidecar the parse is empty.
    pub fn load(text_path: impl AsRef<Path>, sidecar_path: Option<&Path>) -> Result<Self> {
        let tp = text_path.as_ref();
        let text = fs::read_to_string(tp).map_err(|e| Error::io(tp, e))?;
        let symbols: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
        let sidecar = match sidecar_path {
            Some(sp) => {
                let bytes = fs::read(sp).map_err(|e| Error::io(sp, e))?;
                serde_json::from_slice(&bytes)?
            }
            None => Sidecar::default(),
        };
        let seq = Self {
            symbols,
            parse: sidecar.parse,
            vocab: sidecar.vocab,
            fillers: sidecar.fillers,
            filler_prob: sidecar.filler_prob,
        };
        for p in &seq.parse {
            let end = p.start + p.word.chars().count();
            if end > seq.symbols.len() || seq.symbols[p.start..end].iter().copied().ne(p.word.chars()) {
                return Err(Error::Format(format!(
                    "sidecar places '{}' at {} but the symbols disagree",
                    p.word, p.start
                )));
            }
        }
        Ok(seq)
    }

    /// One annotation per distinct word, indexed at the word's last symbol.
    pub fn word_annotations(&self) -> Vec<ConceptAnnotation> {
        let mut by_word: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for p in &self.parse {
            by_word
                .entry(p.word.as_str())
                .or_default()
                .push(p.start + p.word.chars().count() - 1);
        }
        by_word
            .into_iter()
            .map(|(w, idx)| ConceptAnnotation::new(w, idx))
            .collect()
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Sidecar {
    #[serde(default)]
    parse: Vec<Placement>,
    #[serde(default)]
    vocab: Vec<(String, f64)>,
    #[serde(default)]
    fillers: Vec<char>,
    #[serde(default)]
    filler_prob: f64,
}

pub fn gen_periodic(pattern: &str, repetitions: usize) -> Result<SymbolSequence> {
    if pattern.is_empty() {
        return Err(Error::arg("pattern is empty"));
    }
    let len = pattern.chars().count();
    Ok(SymbolSequence {
        symbols: pattern.chars().cycle().take(len * repetitions).collect(),
        parse: (0..repetitions)
            .map(|i| Placement {
                start: i * len,
                word: pattern.to_string(),
            })
            .collect(),
        vocab: vec![(pattern.to_string(), 1.0)],
        fillers: vec![],
        filler_prob: 0.0,
    })
}

/// `blocks` repetitions of `pattern` followed by a run of `null` whose length
/// is uniform in `[min_reps, max_reps]`.
pub fn gen_pattern_in_null(
    pattern: &str,
    null: char,
    min_reps: usize,
    max_reps: usize,
    blocks: usize,
    seed: u64,
) -> Result<SymbolSequence> {
    if pattern.is_empty() {
        return Err(Error::arg("pattern is empty"));
    }
    if min_reps == 0 || min_reps > max_reps {
        return Err(Error::arg(format!(
            "need 1 <= min_reps <= max_reps, got {min_reps}..{max_reps}"
        )));
    }
    if pattern.contains(null) {
        return Err(Error::arg("null symbol occurs in the pattern"));
    }
    let mut rng = seeded_rng(seed);
    let mut symbols = Vec::new();
    let mut parse = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        parse.push(Placement {
            start: symbols.len(),
            word: pattern.to_string(),
        });
        symbols.extend(pattern.chars());
        let k = rng.random_range(min_reps..=max_reps);
        symbols.extend(std::iter::repeat_n(null, k));
    }
    let mean_run = (min_reps + max_reps) as f64 / 2.0;
    Ok(SymbolSequence {
        symbols,
        parse,
        vocab: vec![(pattern.to_string(), 1.0 / (1.0 + mean_run))],
        fillers: vec![null],
        filler_prob: mean_run / (1.0 + mean_run),
    })
}

/// At each emission point emits the whole pattern with probability
/// `p_pattern`, otherwise one uniformly drawn noise symbol, until at least
/// `length` symbols exist. Patterns are never truncated.
pub fn gen_pattern_in_noise(
    pattern: &str,
    noise: &[char],
    p_pattern: f64,
    length: usize,
    seed: u64,
) -> Result<SymbolSequence> {
    if pattern.is_empty() || noise.is_empty() {
        return Err(Error::arg("pattern and noise alphabet must be non-empty"));
    }
    if let Some(c) = pattern.chars().find(|c| noise.contains(c)) {
        return Err(Error::arg(format!(
            "symbol '{c}' is in both the pattern and the noise alphabet"
        )));
    }
    if !(0.0..=1.0).contains(&p_pattern) {
        return Err(Error::arg("p_pattern must lie in [0, 1]"));
    }
    let mut rng = seeded_rng(seed);
    let mut symbols = Vec::with_capacity(length + pattern.len());
    let mut parse = Vec::new();
    while symbols.len() < length {
        if rng.random::<f64>() < p_pattern {
            parse.push(Placement {
                start: symbols.len(),
                word: pattern.to_string(),
            });
            symbols.extend(pattern.chars());
        } else {
            symbols.push(noise[rng.random_range(0..noise.len())]);
        }
    }
    Ok(SymbolSequence {
        symbols,
        parse,
        vocab: vec![(pattern.to_string(), p_pattern)],
        fillers: noise.to_vec(),
        filler_prob: 1.0 - p_pattern,
    })
}

/// Samples exactly `length` symbols from a word vocabulary embedded in nulls.
///
/// `probs` gives per-word emission probabilities summing to at most one; the
/// remainder goes to the null symbol. A word that would run past the end is
/// replaced by a null.
pub fn sample_words(
    vocab: &[(String, f64)],
    null: char,
    length: usize,
    seed: u64,
) -> Result<SymbolSequence> {
    if vocab.iter().any(|(w, p)| w.is_empty() || p.is_nan() || *p < 0.0) {
        return Err(Error::arg("words must be non-empty with non-negative probability"));
    }
    let mass: f64 = vocab.iter().map(|(_, p)| p).sum();
    if !(0.0..=1.0 + 1e-9).contains(&mass) {
        return Err(Error::arg(format!("word probability mass {mass} outside [0, 1]")));
    }
    if vocab.iter().any(|(w, _)| w.contains(null)) {
        return Err(Error::arg("null symbol occurs inside a word"));
    }
    let mut rng = seeded_rng(seed);
    let mut symbols = Vec::with_capacity(length);
    let mut parse = Vec::new();
    while symbols.len() < length {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = None;
        for (w, p) in vocab {
            acc += p;
            if u < acc {
                chosen = Some(w);
                break;
            }
        }
        match chosen {
            Some(w) if symbols.len() + w.chars().count() <= length => {
                parse.push(Placement {
                    start: symbols.len(),
                    word: w.clone(),
                });
                symbols.extend(w.chars());
            }
            _ => symbols.push(null),
        }
    }
    Ok(SymbolSequence {
        symbols,
        parse,
        vocab: vocab.to_vec(),
        fillers: vec![null],
        filler_prob: (1.0 - mass).max(0.0),
    })
}

/// Words share `word_prob_mass` uniformly.
pub fn gen_vocab_sequence(
    words: &[&str],
    null: char,
    word_prob_mass: f64,
    length: usize,
    seed: u64,
) -> Result<SymbolSequence> {
    if words.is_empty() {
        return Err(Error::arg("vocabulary is empty"));
    }
    if !(0.0..=1.0).contains(&word_prob_mass) {
        return Err(Error::arg(format!(
            "word_prob_mass {word_prob_mass} outside [0, 1]"
        )));
    }
    let p = word_prob_mass / words.len() as f64;
    let vocab: Vec<(String, f64)> = words.iter().map(|w| (w.to_string(), p)).collect();
    sample_words(&vocab, null, length, seed)
}

/// Hierarchical vocabulary: starting from `alphabet`, each of `depth` steps
/// appends one new word made by concatenating a uniformly drawn ordered pair
/// of existing entries. Returns the words only.
pub fn hierarchical_vocab(depth: usize, alphabet: &[char], rng: &mut impl Rng) -> Vec<String> {
    let mut words: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
    for _ in 0..depth {
        // Bounded retries; with >=2 entries a fresh pair always exists eventually.
        for _ in 0..10_000 {
            let a = rng.random_range(0..words.len());
            let b = rng.random_range(0..words.len());
            let candidate = format!("{}{}", words[a], words[b]);
            if !words.contains(&candidate) {
                words.push(candidate);
                break;
            }
        }
    }
    words
}

/// Dirichlet(1, ..., 1) draw via normalized unit exponentials.
fn flat_dirichlet(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

pub const HIERARCHY_WORD_MASS: f64 = 0.2;

pub fn gen_hierarchical(
    depth: usize,
    alphabet: &[char],
    null: char,
    length: usize,
    seed: u64,
) -> Result<SymbolSequence> {
    if alphabet.is_empty() {
        return Err(Error::arg("alphabet is empty"));
    }
    if alphabet.contains(&null) {
        return Err(Error::arg("null symbol is part of the alphabet"));
    }
    let mut rng = seeded_rng(seed);
    let words = hierarchical_vocab(depth, alphabet, &mut rng);
    let probs = flat_dirichlet(words.len(), &mut rng);
    let vocab: Vec<(String, f64)> = words
        .into_iter()
        .zip(probs)
        .map(|(w, p)| (w, p * HIERARCHY_WORD_MASS))
        .collect();
    sample_words(&vocab, null, length, rng.random())
}

pub const DEFAULT_ALPHABET: [char; 4] = ['A', 'B', 'C', 'D'];
