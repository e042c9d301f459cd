//! Discrete sequence chunking.
//!
//! Every neuron is clustered on its own (1-D k-means), so a population state
//! becomes a string of cluster digits. Adjacent symbolic states that recur
//! together are merged into chunks, iteratively, and the chunk vocabulary is
//! used to segment (parse) the state trajectory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

pub const DEFAULT_CLUSTERS: usize = 5;
const MAX_KMEANS_ITERS: usize = 100;

/// Sorted scalar centroids for each neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronClustering {
    pub centroids: Vec<Vec<f64>>,
}

impl NeuronClustering {
    pub fn dim(&self) -> usize {
        self.centroids.len()
    }

    /// Index of the nearest centroid; ties go to the lower index.
    pub fn assign(&self, neuron: usize, value: f64) -> usize {
        let cs = &self.centroids[neuron];
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, &c) in cs.iter().enumerate() {
            let dist = (value - c).abs();
            if dist < best_dist {
                best = i;
                best_dist = dist;
            }
        }
        best
    }
}

/// One population state written as one cluster digit per neuron.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SymbolicState(pub String);

impl SymbolicState {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for SymbolicState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// 1-D k-means with k-means++ seeding. Returns sorted centroids; `k` is
/// reduced to the number of distinct values when there are fewer.
pub fn kmeans_1d(values: &[f64], k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    let k = k.min(distinct.len()).max(1);
    if distinct.len() <= k {
        return distinct;
    }

    let mut centroids = vec![values[rng.random_range(0..values.len())]];
    let mut d2: Vec<f64> = values.iter().map(|v| (v - centroids[0]).powi(2)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = values.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            values[pick]
        } else {
            values[rng.random_range(0..values.len())]
        };
        centroids.push(next);
        for (slot, v) in d2.iter_mut().zip(values) {
            *slot = slot.min((v - next).powi(2));
        }
    }

    let mut labels = vec![usize::MAX; values.len()];
    for _ in 0..MAX_KMEANS_ITERS {
        let mut changed = false;
        for (label, &v) in labels.iter_mut().zip(values) {
            let mut best = 0;
            for (j, c) in centroids.iter().enumerate() {
                if (v - c).abs() < (v - centroids[best]).abs() {
                    best = j;
                }
            }
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&l, &v) in labels.iter().zip(values) {
            sums[l] += v;
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j] / counts[j] as f64;
            }
        }
    }
    centroids.sort_by(|a, b| a.total_cmp(b));
    centroids.dedup();
    centroids
}

/// Clusters every neuron of a row-major `n x dim` state matrix.
pub fn cluster_neurons(states: &[f32], dim: usize, k: usize, seed: u64) -> Result<NeuronClustering> {
    if dim == 0 || states.is_empty() || !states.len().is_multiple_of(dim) {
        return Err(Error::arg("state matrix must be a non-empty n x dim array"));
    }
    if k == 0 || k > 36 {
        return Err(Error::arg("k must lie in 1..=36"));
    }
    let n = states.len() / dim;
    if n < k {
        return Err(Error::arg(format!("need at least k={k} states, got {n}")));
    }
    let mut rng = seeded_rng(seed);
    let mut centroids = Vec::with_capacity(dim);
    for j in 0..dim {
        let column: Vec<f64> = (0..n).map(|t| states[t * dim + j] as f64).collect();
        let cs = kmeans_1d(&column, k, &mut rng);
        if cs.len() < k {
            log::warn!("neuron {j}: only {} distinct clusters (k = {k})", cs.len());
        }
        centroids.push(cs);
    }
    Ok(NeuronClustering { centroids })
}

pub fn symbolize(states: &[f32], clustering: &NeuronClustering) -> Result<Vec<SymbolicState>> {
    let dim = clustering.dim();
    if dim == 0 || !states.len().is_multiple_of(dim) {
        return Err(Error::arg(format!(
            "state matrix of {} values does not match {dim} neurons",
            states.len()
        )));
    }
    Ok(states
        .chunks_exact(dim)
        .map(|row| {
            SymbolicState(
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let idx = clustering.assign(j, v as f64);
                        char::from_digit(idx as u32, 36).expect("k <= 36")
                    })
                    .collect(),
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub states: Vec<SymbolicState>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkVocab {
    pub null_state: Option<SymbolicState>,
    pub chunks: Vec<Chunk>,
}

impl ChunkVocab {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// One parsed segment: `len` states starting at `start`. `chunk` indexes the
/// vocabulary, or is `None` for a unit state missing from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub chunk: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseResult {
    pub segments: Vec<Segment>,
}

impl ParseResult {
    pub fn parse_length(&self) -> usize {
        self.segments.len()
    }

    /// Start positions of every occurrence of vocabulary chunk `chunk`.
    pub fn occurrences(&self, chunk: usize) -> Vec<usize> {
        self.segments
            .iter()
            .filter(|s| s.chunk == Some(chunk))
            .map(|s| s.start)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkingConfig {
    /// Number of most frequent adjacent pairs considered per round.
    pub top_k: usize,
    pub freq_threshold: usize,
    pub iterations: usize,
    /// Exclude pairs touching the most frequent state.
    pub exclude_null: bool,
    /// A merged chunk that is a strict prefix of another chunk holding at
    /// least this fraction of its count is dropped.
    pub prefix_prune_ratio: f64,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            top_k: 20,
            freq_threshold: 5,
            iterations: 20,
            exclude_null: true,
            prefix_prune_ratio: 0.9,
        }
    }
}

/// Id-based vocabulary used while learning.
struct Lexicon {
    chunks: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, usize>,
    /// Chunk lengths available for each leading state, longest first.
    lengths: HashMap<u32, Vec<usize>>,
}

impl Lexicon {
    fn new() -> Self {
        Self {
            chunks: Vec::new(),
            index: HashMap::new(),
            lengths: HashMap::new(),
        }
    }

    fn from_chunks(chunks: Vec<Vec<u32>>) -> Self {
        let mut lex = Self::new();
        for c in chunks {
            lex.insert(c);
        }
        lex
    }

    fn insert(&mut self, chunk: Vec<u32>) -> bool {
        if self.index.contains_key(&chunk) {
            return false;
        }
        let lens = self.lengths.entry(chunk[0]).or_default();
        if !lens.contains(&chunk.len()) {
            lens.push(chunk.len());
            lens.sort_unstable_by(|a, b| b.cmp(a));
        }
        self.index.insert(chunk.clone(), self.chunks.len());
        self.chunks.push(chunk);
        true
    }

    /// Greedy longest-match segmentation, left to right.
    fn parse(&self, seq: &[u32]) -> Vec<Segment> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < seq.len() {
            let mut seg = Segment {
                start: i,
                len: 1,
                chunk: None,
            };
            if let Some(lens) = self.lengths.get(&seq[i]) {
                for &len in lens {
                    if i + len <= seq.len() {
                        if let Some(&id) = self.index.get(&seq[i..i + len]) {
                            seg = Segment {
                                start: i,
                                len,
                                chunk: Some(id),
                            };
                            break;
                        }
                    }
                }
            }
            out.push(seg);
            i += seg.len;
        }
        out
    }

    fn counts(&self, parse: &[Segment]) -> Vec<usize> {
        let mut counts = vec![0; self.chunks.len()];
        for s in parse {
            if let Some(c) = s.chunk {
                counts[c] += 1;
            }
        }
        counts
    }
}

fn intern(states: &[SymbolicState]) -> (Vec<u32>, Vec<SymbolicState>) {
    let mut ids = HashMap::new();
    let mut names = Vec::new();
    let seq = states
        .iter()
        .map(|s| {
            *ids.entry(s).or_insert_with(|| {
                names.push(s.clone());
                (names.len() - 1) as u32
            })
        })
        .collect();
    (seq, names)
}

/// Most frequent state; ties resolved toward the first one seen.
fn most_frequent(seq: &[u32]) -> Option<u32> {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &s in seq {
        *counts.entry(s).or_default() += 1;
    }
    let mut best: Option<(u32, usize)> = None;
    let mut seen = HashSet::new();
    for &s in seq {
        if !seen.insert(s) {
            continue;
        }
        let c = counts[&s];
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((s, c));
        }
    }
    best.map(|(s, _)| s)
}

/// Learns a chunk vocabulary by iterative pair merging and returns the final
/// parse together with the vocabulary.
///
/// Each round counts adjacent chunk pairs in the current parse, takes the
/// `top_k` most frequent, merges those reaching `freq_threshold` (skipping
/// pairs that involve the null state), prunes redundant prefixes and
/// reparses. A round that would lengthen the parse is discarded and ends
/// learning, so the parse length never increases.
pub fn learn_chunks(
    symbolized: &[SymbolicState],
    cfg: &ChunkingConfig,
) -> Result<(ParseResult, ChunkVocab)> {
    if symbolized.is_empty() {
        return Err(Error::arg("cannot chunk an empty state sequence"));
    }
    let (seq, names) = intern(symbolized);
    let null = if cfg.exclude_null {
        most_frequent(&seq)
    } else {
        None
    };
    let null_chunk: Option<Vec<u32>> = null.map(|n| vec![n]);

    let mut lex = Lexicon::from_chunks((0..names.len() as u32).map(|s| vec![s]).collect());
    let mut parse = lex.parse(&seq);

    for _ in 0..cfg.iterations {
        let mut pairs: HashMap<(usize, usize), usize> = HashMap::new();
        for w in parse.windows(2) {
            if let (Some(l), Some(r)) = (w[0].chunk, w[1].chunk) {
                *pairs.entry((l, r)).or_default() += 1;
            }
        }
        let mut ranked: Vec<((usize, usize), usize)> = pairs.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then_with(|| lex.chunks[a.0 .0].cmp(&lex.chunks[b.0 .0]))
                .then_with(|| lex.chunks[a.0 .1].cmp(&lex.chunks[b.0 .1]))
        });

        let counts = lex.counts(&parse);
        let mut chunks = lex.chunks.clone();
        let mut merged_counts: HashMap<Vec<u32>, usize> = HashMap::new();
        for &((l, r), count) in ranked.iter().take(cfg.top_k) {
            if count < cfg.freq_threshold {
                continue;
            }
            let (cl, cr) = (&lex.chunks[l], &lex.chunks[r]);
            if null_chunk.as_ref().is_some_and(|n| n == cl || n == cr) {
                continue;
            }
            let mut m = cl.clone();
            m.extend_from_slice(cr);
            if !lex.index.contains_key(&m) && !merged_counts.contains_key(&m) {
                merged_counts.insert(m.clone(), count);
                chunks.push(m);
            }
        }
        if merged_counts.is_empty() {
            break;
        }

        let count_of = |c: &Vec<u32>| -> usize {
            merged_counts
                .get(c)
                .copied()
                .or_else(|| lex.index.get(c).map(|&i| counts[i]))
                .unwrap_or(0)
        };
        let pruned: Vec<Vec<u32>> = chunks
            .iter()
            .filter(|p| {
                if p.len() == 1 {
                    return true;
                }
                let cp = count_of(p) as f64;
                !chunks.iter().any(|q| {
                    q.len() > p.len()
                        && q.starts_with(p)
                        && count_of(q) as f64 >= cfg.prefix_prune_ratio * cp
                })
            })
            .cloned()
            .collect();

        let candidate = Lexicon::from_chunks(pruned);
        let reparsed = candidate.parse(&seq);
        if reparsed.len() > parse.len() {
            break;
        }
        lex = candidate;
        parse = reparsed;
    }

    let counts = lex.counts(&parse);
    let vocab = ChunkVocab {
        null_state: null.map(|n| names[n as usize].clone()),
        chunks: lex
            .chunks
            .iter()
            .zip(counts)
            .map(|(c, count)| Chunk {
                states: c.iter().map(|&s| names[s as usize].clone()).collect(),
                count,
            })
            .collect(),
    };
    Ok((ParseResult { segments: parse }, vocab))
}

/// Greedy longest-match parse with a fixed vocabulary. States absent from
/// the vocabulary become unit segments without a chunk index.
pub fn parse_states(symbolized: &[SymbolicState], vocab: &ChunkVocab) -> ParseResult {
    let mut ids: HashMap<&SymbolicState, u32> = HashMap::new();
    for c in &vocab.chunks {
        for s in &c.states {
            let next = ids.len() as u32;
            ids.entry(s).or_insert(next);
        }
    }
    let mut lex = Lexicon::new();
    for c in &vocab.chunks {
        lex.insert(c.states.iter().map(|s| ids[s]).collect());
    }
    let mut missing = 0usize;
    let seq: Vec<u32> = symbolized
        .iter()
        .map(|s| {
            ids.get(s).copied().unwrap_or_else(|| {
                missing += 1;
                u32::MAX
            })
        })
        .collect();
    if missing > 0 {
        log::warn!("{missing} states are not in the vocabulary; parsed as unit segments");
    }
    // The lexicon index follows insertion order, which can differ from the
    // vocabulary order when a vocabulary holds duplicates; map back by content.
    let back: HashMap<usize, usize> = vocab
        .chunks
        .iter()
        .enumerate()
        .filter_map(|(vi, c)| {
            let key: Vec<u32> = c.states.iter().map(|s| ids[s]).collect();
            lex.index.get(&key).map(|&li| (li, vi))
        })
        .collect();
    let segments = lex
        .parse(&seq)
        .into_iter()
        .map(|mut s| {
            s.chunk = s.chunk.and_then(|c| back.get(&c).copied());
            s
        })
        .collect();
    ParseResult { segments }
}

/// Concatenates the states of every segment.
pub fn reconstruct(parse: &ParseResult, vocab: &ChunkVocab, symbolized: &[SymbolicState]) -> Vec<SymbolicState> {
    parse
        .segments
        .iter()
        .flat_map(|s| match s.chunk {
            Some(c) => vocab.chunks[c].states.clone(),
            None => symbolized[s.start..s.start + s.len].to_vec(),
        })
        .collect()
}

/// Majority-vote map from symbolic state to the concurrent input symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupTable {
    pub entries: BTreeMap<SymbolicState, char>,
    /// States whose majority vote was tied (first-seen symbol kept).
    pub ambiguous: Vec<SymbolicState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub accuracy: f64,
    /// Fraction of held-out states present verbatim in the table.
    pub coverage: f64,
    pub total: usize,
}

pub fn build_lookup(symbolized: &[SymbolicState], inputs: &[char]) -> Result<LookupTable> {
    if symbolized.len() != inputs.len() {
        return Err(Error::arg(format!(
            "{} states but {} inputs",
            symbolized.len(),
            inputs.len()
        )));
    }
    // state -> (symbol -> (count, first seen))
    let mut votes: HashMap<&SymbolicState, HashMap<char, (usize, usize)>> = HashMap::new();
    for (t, (s, &c)) in symbolized.iter().zip(inputs).enumerate() {
        let e = votes.entry(s).or_default().entry(c).or_insert((0, t));
        e.0 += 1;
    }
    let mut entries = BTreeMap::new();
    let mut ambiguous = Vec::new();
    for (state, tally) in votes {
        let top = tally.values().map(|v| v.0).max().unwrap_or(0);
        let mut leaders: Vec<(char, usize)> = tally
            .iter()
            .filter(|(_, v)| v.0 == top)
            .map(|(&c, v)| (c, v.1))
            .collect();
        leaders.sort_by_key(|&(_, first)| first);
        if leaders.len() > 1 {
            ambiguous.push(state.clone());
        }
        entries.insert(state.clone(), leaders[0].0);
    }
    ambiguous.sort();
    Ok(LookupTable { entries, ambiguous })
}

fn hamming(a: &str, b: &str) -> usize {
    a.chars().zip(b.chars()).filter(|(x, y)| x != y).count()
        + a.chars().count().abs_diff(b.chars().count())
}

impl LookupTable {
    /// Decodes a state; unseen states fall back to the entry at the smallest
    /// Hamming distance (first in state order on ties).
    pub fn decode(&self, state: &SymbolicState) -> Option<char> {
        if let Some(&c) = self.entries.get(state) {
            return Some(c);
        }
        self.entries
            .iter()
            .min_by_key(|(s, _)| hamming(s.as_str(), state.as_str()))
            .map(|(_, &c)| c)
    }

    pub fn evaluate(&self, symbolized: &[SymbolicState], inputs: &[char]) -> Result<DecodeReport> {
        if symbolized.len() != inputs.len() {
            return Err(Error::arg("states and inputs differ in length"));
        }
        let total = inputs.len();
        if total == 0 {
            return Ok(DecodeReport {
                accuracy: 0.0,
                coverage: 0.0,
                total,
            });
        }
        let mut hits = 0;
        let mut known = 0;
        for (s, &c) in symbolized.iter().zip(inputs) {
            if self.entries.contains_key(s) {
                known += 1;
            }
            if self.decode(s) == Some(c) {
                hits += 1;
            }
        }
        Ok(DecodeReport {
            accuracy: hits as f64 / total as f64,
            coverage: known as f64 / total as f64,
            total,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabMetrics {
    pub vocab_size: usize,
    pub filtered_size: usize,
    pub unique_state_count: usize,
}

pub const DEFAULT_MIN_COUNT: usize = 5;

pub fn vocab_metrics(vocab: &ChunkVocab, min_count: usize) -> VocabMetrics {
    VocabMetrics {
        vocab_size: vocab.chunks.len(),
        filtered_size: vocab.chunks.iter().filter(|c| c.count >= min_count).count(),
        unique_state_count: vocab.chunks.iter().filter(|c| c.states.len() == 1).count(),
    }
}

/// Everything produced by running DSC on one layer of a trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DscAnalysis {
    pub clustering: NeuronClustering,
    pub states: Vec<SymbolicState>,
    pub parse: ParseResult,
    pub vocab: ChunkVocab,
}

pub fn analyze(states: &[f32], dim: usize, k: usize, seed: u64, cfg: &ChunkingConfig) -> Result<DscAnalysis> {
    let clustering = cluster_neurons(states, dim, k, seed)?;
    let symbolic = symbolize(states, &clustering)?;
    let (parse, vocab) = learn_chunks(&symbolic, cfg)?;
    Ok(DscAnalysis {
        clustering,
        states: symbolic,
        parse,
        vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(v: &[&str]) -> Vec<SymbolicState> {
        v.iter().map(|s| SymbolicState(s.to_string())).collect()
    }

    #[test]
    fn constant_neuron_single_cluster() {
        let states = vec![0.5f32; 20];
        let c = cluster_neurons(&states, 1, 5, 0).unwrap();
        assert_eq!(c.centroids[0], vec![0.5]);
        let sym = symbolize(&states, &c).unwrap();
        assert!(sym.iter().all(|s| s.as_str() == "0"));
    }

    #[test]
    fn two_groups_recover_means() {
        // Closed-form optimum: each group's mean.
        let lo = [0.9f32, 1.0, 1.1, 1.0];
        let hi = [9.8f32, 10.2, 10.0, 10.0, 10.5];
        let states: Vec<f32> = lo.iter().chain(&hi).copied().collect();
        let lo_mean = lo.iter().map(|&v| v as f64).sum::<f64>() / lo.len() as f64;
        let hi_mean = hi.iter().map(|&v| v as f64).sum::<f64>() / hi.len() as f64;
        for seed in 0..10 {
            let c = cluster_neurons(&states, 1, 2, seed).unwrap();
            assert!((c.centroids[0][0] - lo_mean).abs() < 1e-6);
            assert!((c.centroids[0][1] - hi_mean).abs() < 1e-6);
        }
    }

    #[test]
    fn five_clusters_use_digits_zero_to_four() {
        let states: Vec<f32> = (0..200).map(|i| (i % 5) as f32 * 3.0 + (i % 7) as f32 * 0.01).collect();
        let c = cluster_neurons(&states, 1, 5, 1).unwrap();
        let sym = symbolize(&states, &c).unwrap();
        let mut digits: Vec<String> = sym.iter().map(|s| s.0.clone()).collect();
        digits.sort();
        digits.dedup();
        assert_eq!(digits, vec!["0", "1", "2", "3", "4"]);
    }

    #[test]
    fn too_few_states() {
        assert!(cluster_neurons(&[1.0, 2.0], 1, 5, 0).is_err());
    }

    #[test]
    fn exact_centroid_and_ties() {
        let c = NeuronClustering {
            centroids: vec![vec![0.0, 1.0, 2.0]],
        };
        assert_eq!(c.assign(0, 1.0), 1);
        assert_eq!(c.assign(0, 0.5), 0);
        assert_eq!(c.assign(0, 1.5), 1);
    }

    #[test]
    fn alternating_pair_merge() {
        // Pair counts: (a,b) x3, (b,a) x2. Top-1 pair (a,b) meets threshold 2.
        let seq = st(&["a", "b", "a", "b", "a", "b"]);
        let cfg = ChunkingConfig {
            top_k: 1,
            freq_threshold: 2,
            iterations: 1,
            exclude_null: false,
            ..ChunkingConfig::default()
        };
        let (parse, vocab) = learn_chunks(&seq, &cfg).unwrap();
        assert!(vocab.chunks.iter().any(|c| c.states == st(&["a", "b"])));
        assert_eq!(parse.parse_length(), 3);
        assert_eq!(reconstruct(&parse, &vocab, &seq), seq);
    }

    #[test]
    fn high_threshold_never_merges() {
        let seq = st(&["a", "b", "a", "b", "c"]);
        let cfg = ChunkingConfig {
            freq_threshold: 6,
            exclude_null: false,
            ..ChunkingConfig::default()
        };
        let (parse, vocab) = learn_chunks(&seq, &cfg).unwrap();
        assert_eq!(vocab.len(), 3);
        assert_eq!(parse.parse_length(), 5);
    }

    #[test]
    fn null_pairs_excluded() {
        let seq = st(&["n", "n", "a", "b", "n", "n", "a", "b", "n", "n", "n"]);
        let cfg = ChunkingConfig {
            top_k: 10,
            freq_threshold: 2,
            ..ChunkingConfig::default()
        };
        let (_, vocab) = learn_chunks(&seq, &cfg).unwrap();
        assert_eq!(vocab.null_state, Some(SymbolicState("n".into())));
        for c in vocab.chunks.iter().filter(|c| c.states.len() > 1) {
            assert!(!c.states.contains(&SymbolicState("n".into())));
        }
        assert!(vocab.chunks.iter().any(|c| c.states == st(&["a", "b"])));
    }

    #[test]
    fn unit_vocab_identity_parse() {
        let seq = st(&["x", "y", "z", "x"]);
        let vocab = ChunkVocab {
            null_state: None,
            chunks: ["x", "y", "z"]
                .iter()
                .map(|s| Chunk {
                    states: st(&[s]),
                    count: 0,
                })
                .collect(),
        };
        assert_eq!(parse_states(&seq, &vocab).parse_length(), 4);
    }

    #[test]
    fn whole_sequence_chunk() {
        let seq = st(&["x", "y", "z"]);
        let mut chunks: Vec<Chunk> = seq
            .iter()
            .map(|s| Chunk {
                states: vec![s.clone()],
                count: 0,
            })
            .collect();
        chunks.push(Chunk {
            states: seq.clone(),
            count: 1,
        });
        let vocab = ChunkVocab {
            null_state: None,
            chunks,
        };
        let parse = parse_states(&seq, &vocab);
        assert_eq!(parse.parse_length(), 1);
        assert_eq!(parse.segments[0].chunk, Some(3));
    }

    #[test]
    fn longest_match_wins() {
        // "abc" could split as ab|c or a|bc; greedy longest-match takes ab.
        let seq = st(&["a", "b", "c"]);
        let mk = |v: &[&str]| Chunk {
            states: st(v),
            count: 0,
        };
        let vocab = ChunkVocab {
            null_state: None,
            chunks: vec![mk(&["a"]), mk(&["b"]), mk(&["c"]), mk(&["b", "c"]), mk(&["a", "b"])],
        };
        let parse = parse_states(&seq, &vocab);
        assert_eq!(parse.segments[0].len, 2);
        assert_eq!(parse.segments[0].chunk, Some(4));
        assert_eq!(parse.parse_length(), 2);
    }

    #[test]
    fn unknown_state_falls_back_to_unit() {
        let vocab = ChunkVocab {
            null_state: None,
            chunks: vec![Chunk {
                states: st(&["a"]),
                count: 1,
            }],
        };
        let seq = st(&["a", "q", "a"]);
        let parse = parse_states(&seq, &vocab);
        assert_eq!(parse.parse_length(), 3);
        assert_eq!(parse.segments[1].chunk, None);
        assert_eq!(reconstruct(&parse, &vocab, &seq), seq);
    }

    #[test]
    fn lookup_majority_and_table_row() {
        let states = st(&["221103343111", "221103343111", "221103343111", "021340200433", "004042212403"]);
        let inputs = ['A', 'A', 'E', 'E', 'E'];
        let table = build_lookup(&states, &inputs).unwrap();
        assert_eq!(table.decode(&SymbolicState("221103343111".into())), Some('A'));
        // Many-to-one is legal.
        assert_eq!(table.decode(&SymbolicState("021340200433".into())), Some('E'));
        assert_eq!(table.decode(&SymbolicState("004042212403".into())), Some('E'));
        assert!(table.ambiguous.is_empty());
        let report = table.evaluate(&states, &inputs).unwrap();
        assert!((report.accuracy - 0.8).abs() < 1e-12);
    }

    #[test]
    fn lookup_tie_keeps_first_seen() {
        let states = st(&["1", "1"]);
        let table = build_lookup(&states, &['B', 'A']).unwrap();
        assert_eq!(table.entries[&SymbolicState("1".into())], 'B');
        assert_eq!(table.ambiguous, st(&["1"]));
        assert!(build_lookup(&states, &['A']).is_err());
    }

    #[test]
    fn metrics() {
        let empty = ChunkVocab {
            null_state: None,
            chunks: vec![],
        };
        assert_eq!(
            vocab_metrics(&empty, 5),
            VocabMetrics {
                vocab_size: 0,
                filtered_size: 0,
                unique_state_count: 0
            }
        );
        let seq = st(&["a", "b", "a", "b", "a", "b", "c"]);
        let (_, vocab) = learn_chunks(
            &seq,
            &ChunkingConfig {
                freq_threshold: 2,
                exclude_null: false,
                ..ChunkingConfig::default()
            },
        )
        .unwrap();
        let m = vocab_metrics(&vocab, 1);
        assert_eq!(m.filtered_size, vocab.chunks.iter().filter(|c| c.count >= 1).count());
        assert_eq!(m.unique_state_count, 3);
        let all = ChunkVocab {
            null_state: None,
            chunks: vocab.chunks.iter().map(|c| Chunk { count: c.count.max(1), ..c.clone() }).collect(),
        };
        assert_eq!(vocab_metrics(&all, 1).filtered_size, all.len());
    }

    #[test]
    fn vocab_json_shape() {
        let vocab = ChunkVocab {
            null_state: Some(SymbolicState("00".into())),
            chunks: vec![Chunk {
                states: st(&["01", "02"]),
                count: 7,
            }],
        };
        let json = serde_json::to_value(&vocab).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"null_state": "00", "chunks": [{"states": ["01", "02"], "count": 7}]})
        );
    }
}
