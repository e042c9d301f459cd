//! End-to-end RNN experiments shared by the CLI recipes and the test suites.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsc::{self, ChunkingConfig, DecodeReport, VocabMetrics};
use crate::error::{Error, Result};
use crate::pa::{self, ChunkMeta, Confusion, Normalization, PopulationChunk, WindowView};
use crate::rnnlab::{self, context_centroid, RnnModel, TrainConfig, TransferConfig, TransferGraft};
use crate::synth::{self, SymbolSequence};

fn null_task(cfg: &NullTask, seed: u64) -> Result<SymbolSequence> {
    synth::gen_pattern_in_null(&cfg.pattern, cfg.null, cfg.min_reps, cfg.max_reps, cfg.blocks, seed)
}

/// Pattern blocks separated by null runs of uniform length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NullTask {
    pub pattern: String,
    pub null: char,
    pub min_reps: usize,
    pub max_reps: usize,
    pub blocks: usize,
}

impl Default for NullTask {
    fn default() -> Self {
        Self {
            pattern: "ABCD".into(),
            null: 'E',
            min_reps: 1,
            max_reps: 20,
            blocks: 1000,
        }
    }
}

fn train_on(symbols: &[char], alphabet: &[char], hidden: usize, train: &TrainConfig, seed: u64) -> Result<(RnnModel, Vec<f64>)> {
    let init = RnnModel::init(alphabet, hidden, seed)?;
    let cfg = TrainConfig {
        seed: seed.wrapping_add(1),
        ..train.clone()
    };
    rnnlab::train(&init, symbols, &cfg)
}

fn hidden_flat(model: &RnnModel, symbols: &[char]) -> Result<Vec<f32>> {
    let fwd = model.forward_with_states(symbols)?;
    Ok(fwd.hidden.iter().flatten().map(|&v| v as f32).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LookupExperiment {
    pub task: NullTask,
    pub held_out: usize,
    pub hidden: usize,
    pub clusters: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for LookupExperiment {
    fn default() -> Self {
        Self {
            task: NullTask::default(),
            held_out: 2000,
            hidden: rnnlab::DEFAULT_HIDDEN,
            clusters: dsc::DEFAULT_CLUSTERS,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupResult {
    pub decode: DecodeReport,
    pub table_size: usize,
    pub ambiguous: usize,
    pub final_loss: f64,
}

/// Trains on the null task, fits a state-to-input lookup table on the
/// training trajectory and decodes a held-out segment.
pub fn lookup_experiment(cfg: &LookupExperiment) -> Result<LookupResult> {
    let train_seq = null_task(&cfg.task, cfg.seed)?;
    let test_seq = null_task(&cfg.task, cfg.seed.wrapping_add(1000))?;
    if test_seq.len() < cfg.held_out {
        return Err(Error::arg(format!(
            "held-out sequence has {} symbols, {} requested",
            test_seq.len(),
            cfg.held_out
        )));
    }
    let test = &test_seq.symbols[..cfg.held_out];
    let alphabet = train_seq.alphabet();
    let (model, losses) = train_on(&train_seq.symbols, &alphabet, cfg.hidden, &cfg.train, cfg.seed)?;
    let train_states = hidden_flat(&model, &train_seq.symbols)?;
    let clustering = dsc::cluster_neurons(&train_states, cfg.hidden, cfg.clusters, cfg.seed)?;
    let sym_train = dsc::symbolize(&train_states, &clustering)?;
    let table = dsc::build_lookup(&sym_train, &train_seq.symbols)?;
    let sym_test = dsc::symbolize(&hidden_flat(&model, test)?, &clustering)?;
    Ok(LookupResult {
        decode: table.evaluate(&sym_test, test)?,
        table_size: table.entries.len(),
        ambiguous: table.ambiguous.len(),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignExperiment {
    pub pattern: String,
    pub noise: Vec<char>,
    pub p_pattern: f64,
    pub train_length: usize,
    pub test_length: usize,
    pub hidden: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for AlignExperiment {
    fn default() -> Self {
        Self {
            pattern: "ABCD".into(),
            noise: vec!['E', 'F', 'G'],
            p_pattern: 0.1,
            train_length: 20_000,
            test_length: 5_000,
            hidden: rnnlab::DEFAULT_HIDDEN,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignResult {
    pub chunk: PopulationChunk,
    pub test: Confusion,
    pub true_count: usize,
    pub detected: usize,
    pub mismatches: usize,
    /// Window-template deviation at every held-out window start.
    pub deviation: Vec<f64>,
    pub pattern_starts: Vec<usize>,
}

/// Trains on the pattern-in-noise task and fits a window template over
/// pattern-length windows; reports detection against the true pattern starts.
pub fn align_experiment(cfg: &AlignExperiment) -> Result<AlignResult> {
    let train_seq = synth::gen_pattern_in_noise(&cfg.pattern, &cfg.noise, cfg.p_pattern, cfg.train_length, cfg.seed)?;
    let mut test_seq =
        synth::gen_pattern_in_noise(&cfg.pattern, &cfg.noise, cfg.p_pattern, cfg.test_length, cfg.seed.wrapping_add(1000))?;
    let mut alphabet: Vec<char> = cfg.pattern.chars().chain(cfg.noise.iter().copied()).collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    let (model, _) = train_on(&train_seq.symbols, &alphabet, cfg.hidden, &cfg.train, cfg.seed)?;
    let span = cfg.pattern.chars().count();

    // Held-out sequence cut to exactly the requested length; patterns cut
    // by the boundary are not counted.
    test_seq.symbols.truncate(cfg.test_length);
    let test_starts: Vec<usize> = test_seq
        .parse
        .iter()
        .filter(|p| p.start + span <= test_seq.symbols.len())
        .map(|p| p.start)
        .collect();
    let train_starts: Vec<usize> = train_seq.parse.iter().map(|p| p.start).collect();

    let train_trace = model.export_trace(&train_seq.symbols)?;
    let test_trace = model.export_trace(&test_seq.symbols)?;
    let view = WindowView::new(&train_trace, 0, span)?;
    let meta = ChunkMeta {
        concept: cfg.pattern.clone(),
        layer: 0,
        shift: 0,
    };
    let fit = pa::fit_tolerance(&view, &train_starts, &meta, Normalization::FullWidth)?;
    let test_view = WindowView::new(&test_trace, 0, span)?;
    let conf = pa::evaluate(&fit.chunk, &test_view, &test_starts)?;
    let deviation = pa::template_deviation(&train_trace, &train_starts, &test_trace, 0, span)?;
    Ok(AlignResult {
        chunk: fit.chunk,
        true_count: test_starts.len(),
        detected: conf.detections(),
        mismatches: conf.fp + conf.fn_,
        test: conf,
        deviation,
        pattern_starts: test_starts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraftExperiment {
    pub task: NullTask,
    /// `(previous, current, expected next)` triples.
    pub mappings: Vec<(char, char, char)>,
    pub contexts: usize,
    pub hidden: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for GraftExperiment {
    fn default() -> Self {
        Self {
            task: NullTask::default(),
            mappings: vec![('A', 'B', 'C'), ('B', 'C', 'D'), ('C', 'D', 'E')],
            contexts: 20,
            hidden: rnnlab::DEFAULT_HIDDEN,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraftOutcome {
    pub prev: char,
    pub cur: char,
    pub expected: char,
    pub hits: usize,
    pub trials: usize,
}

impl GraftOutcome {
    pub fn rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.hits as f64 / self.trials as f64
        }
    }
}

/// Grafts each context centroid into random null-task prefixes (with the
/// context's current input fed at the graft step) and checks the argmax.
pub fn graft_experiment(cfg: &GraftExperiment) -> Result<Vec<GraftOutcome>> {
    let train_seq = null_task(&cfg.task, cfg.seed)?;
    let alphabet = train_seq.alphabet();
    let (model, _) = train_on(&train_seq.symbols, &alphabet, cfg.hidden, &cfg.train, cfg.seed)?;
    let fwd = model.forward_with_states(&train_seq.symbols)?;
    let pool = null_task(&cfg.task, cfg.seed.wrapping_add(2000))?.symbols;
    let mut rng = crate::seeded_rng(cfg.seed.wrapping_add(3000));
    let mut out = Vec::new();
    for &(prev, cur, expected) in &cfg.mappings {
        let centroid = context_centroid(&fwd, &train_seq.symbols, prev, cur)
            .ok_or_else(|| Error::arg(format!("context ({prev}, {cur}) never occurs")))?;
        let centroid: Vec<f32> = centroid.iter().map(|&v| v as f32).collect();
        let want = model.symbol_index(expected)?;
        let mut hits = 0;
        for _ in 0..cfg.contexts {
            let cut = rng.random_range(1..pool.len().min(500));
            let mut seq = pool[..cut].to_vec();
            seq.push(cur);
            let t = seq.len() - 1;
            let g = model.graft_hidden(&seq, t, &centroid)?;
            if g.predictions()[t] == want {
                hits += 1;
            }
        }
        out.push(GraftOutcome {
            prev,
            cur,
            expected,
            hits,
            trials: cfg.contexts,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferExperiment {
    pub base: TransferConfig,
    pub seeds: Vec<u64>,
    pub mode: TransferGraft,
}

impl Default for TransferExperiment {
    fn default() -> Self {
        Self {
            base: TransferConfig::default(),
            seeds: (0..5).collect(),
            mode: TransferGraft::Hidden,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferSeed {
    pub seed: u64,
    pub control: f64,
    pub grafted: f64,
    pub curves: rnnlab::TransferCurves,
}

/// Mean continuation accuracy over the transfer phase, control vs grafted,
/// for every seed.
pub fn transfer_seeds(cfg: &TransferExperiment) -> Result<Vec<TransferSeed>> {
    cfg.seeds
        .iter()
        .map(|&seed| {
            let c = TransferConfig {
                seed,
                ..cfg.base.clone()
            };
            let curves = rnnlab::transfer_experiment(&c, cfg.mode)?;
            Ok(TransferSeed {
                seed,
                control: rnnlab::TransferCurves::mean(&curves.control_continuation),
                grafted: rnnlab::TransferCurves::mean(&curves.grafted_continuation),
                curves,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseMetrics {
    pub parse_length: usize,
    pub ground_truth: usize,
    pub metrics: VocabMetrics,
    pub unique_states: usize,
}

fn dsc_metrics(
    model: &RnnModel,
    seq: &SymbolSequence,
    clusters: usize,
    chunking: &ChunkingConfig,
    seed: u64,
) -> Result<ParseMetrics> {
    let states = hidden_flat(model, &seq.symbols)?;
    let a = dsc::analyze(&states, model.hidden_dim, clusters, seed, chunking)?;
    let mut uniq: Vec<&dsc::SymbolicState> = a.states.iter().collect();
    uniq.sort();
    uniq.dedup();
    Ok(ParseMetrics {
        parse_length: a.parse.parse_length(),
        ground_truth: seq.ground_truth_parse_length(),
        metrics: dsc::vocab_metrics(&a.vocab, dsc::DEFAULT_MIN_COUNT),
        unique_states: uniq.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyExperiment {
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub length: usize,
    pub hidden: usize,
    pub clusters: usize,
    pub chunking: ChunkingConfig,
    pub train: TrainConfig,
}

impl Default for HierarchyExperiment {
    fn default() -> Self {
        Self {
            depths: vec![1, 2, 3],
            seeds: (0..5).collect(),
            length: 5000,
            hidden: rnnlab::DEFAULT_HIDDEN,
            clusters: dsc::DEFAULT_CLUSTERS,
            chunking: ChunkingConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyRow {
    pub depth: usize,
    pub seed: u64,
    pub metrics: ParseMetrics,
}

pub fn hierarchy_experiment(cfg: &HierarchyExperiment) -> Result<Vec<HierarchyRow>> {
    let mut rows = Vec::new();
    for &depth in &cfg.depths {
        for &seed in &cfg.seeds {
            let seq = synth::gen_hierarchical(depth, &synth::DEFAULT_ALPHABET, 'E', cfg.length, seed)?;
            let mut alphabet = synth::DEFAULT_ALPHABET.to_vec();
            alphabet.push('E');
            let (model, _) = train_on(&seq.symbols, &alphabet, cfg.hidden, &cfg.train, seed)?;
            let metrics = dsc_metrics(&model, &seq, cfg.clusters, &cfg.chunking, seed)?;
            rows.push(HierarchyRow { depth, seed, metrics });
        }
    }
    Ok(rows)
}

/// Per-depth means of `(filtered chunk count, parse length)`.
pub fn hierarchy_means(rows: &[HierarchyRow]) -> Vec<(usize, f64, f64)> {
    let mut depths: Vec<usize> = rows.iter().map(|r| r.depth).collect();
    depths.sort_unstable();
    depths.dedup();
    depths
        .into_iter()
        .map(|d| {
            let sel: Vec<&HierarchyRow> = rows.iter().filter(|r| r.depth == d).collect();
            let n = sel.len() as f64;
            let filtered = sel.iter().map(|r| r.metrics.metrics.filtered_size as f64).sum::<f64>() / n;
            let parse = sel.iter().map(|r| r.metrics.parse_length as f64).sum::<f64>() / n;
            (d, filtered, parse)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextExperiment {
    pub words: Vec<String>,
    pub null: char,
    pub word_prob_mass: f64,
    pub length: usize,
    pub seeds: Vec<u64>,
    pub hidden: usize,
    pub clusters: usize,
    pub chunking: ChunkingConfig,
    pub train: TrainConfig,
}

impl Default for ContextExperiment {
    fn default() -> Self {
        Self {
            words: vec!["CDAB".into(), "AB".into(), "ABCD".into()],
            null: 'E',
            word_prob_mass: 0.2,
            length: 5000,
            seeds: (0..10).collect(),
            hidden: rnnlab::DEFAULT_HIDDEN,
            clusters: dsc::DEFAULT_CLUSTERS,
            chunking: ChunkingConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRow {
    pub seed: u64,
    pub trained: ParseMetrics,
    pub untrained: ParseMetrics,
}

impl ContextRow {
    /// Trained parse length strictly closer to the ground truth.
    pub fn trained_closer(&self) -> bool {
        let gt = self.trained.ground_truth;
        self.trained.parse_length.abs_diff(gt) < self.untrained.parse_length.abs_diff(gt)
    }
}

pub fn context_experiment(cfg: &ContextExperiment) -> Result<Vec<ContextRow>> {
    let words: Vec<&str> = cfg.words.iter().map(String::as_str).collect();
    cfg.seeds
        .iter()
        .map(|&seed| {
            let seq = synth::gen_vocab_sequence(&words, cfg.null, cfg.word_prob_mass, cfg.length, seed)?;
            let mut alphabet: Vec<char> = cfg.words.iter().flat_map(|w| w.chars()).collect();
            alphabet.push(cfg.null);
            alphabet.sort_unstable();
            alphabet.dedup();
            let untrained = RnnModel::init(&alphabet, cfg.hidden, seed)?;
            let (trained, _) = train_on(&seq.symbols, &alphabet, cfg.hidden, &cfg.train, seed)?;
            Ok(ContextRow {
                seed,
                trained: dsc_metrics(&trained, &seq, cfg.clusters, &cfg.chunking, seed)?,
                untrained: dsc_metrics(&untrained, &seq, cfg.clusters, &cfg.chunking, seed)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedPa {
    pub dim: usize,
    pub support: usize,
    /// Training occurrences; rounded up to an even number.
    pub train_occurrences: usize,
    pub test_occurrences: usize,
    pub train_length: usize,
    pub test_length: usize,
    /// Half-width of the uniform jitter on planted neurons at occurrences.
    pub jitter: f32,
    /// Half-width of the uniform background activity.
    pub background: f32,
    pub seed: u64,
}

impl Default for PlantedPa {
    fn default() -> Self {
        Self {
            dim: 100,
            support: 10,
            train_occurrences: 40,
            test_occurrences: 40,
            train_length: 2000,
            test_length: 2000,
            jitter: 0.05,
            background: 3.0,
            seed: 0,
        }
    }
}

pub const PLANTED_CONCEPT: &str = "planted";

/// Planted-chunk traces and the planted support.
///
/// At occurrences the planted neurons sit at a fixed prototype plus jitter
/// bounded by `jitter`; everything else is uniform background. Training
/// jitter comes in sign-flipped pairs and includes the all-`+jitter` corner,
/// so the training mean is the prototype and the training maximum deviation
/// bounds every held-out occurrence.
pub fn planted_traces(cfg: &PlantedPa) -> Result<(crate::trace::ActivationTrace, crate::trace::ActivationTrace, Vec<usize>)> {
    if cfg.support == 0 || cfg.support > cfg.dim {
        return Err(Error::arg("support size must be in 1..=dim"));
    }
    let mut rng = crate::seeded_rng(cfg.seed);
    let mut support: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.dim, cfg.support).into_vec();
    support.sort_unstable();
    let proto: Vec<f32> = (0..cfg.support).map(|_| rng.random_range(-1.0f32..1.0)).collect();

    let mut build = |n: usize, occ: usize, antithetic: bool| -> Result<crate::trace::ActivationTrace> {
        let occ = if antithetic { occ.div_ceil(2) * 2 } else { occ };
        if occ > n / 2 {
            return Err(Error::arg("too many occurrences for the trace length"));
        }
        let mut positions: Vec<usize> = rand::seq::index::sample(&mut rng, n, occ).into_vec();
        positions.sort_unstable();
        let b = cfg.background;
        let mut acts: Vec<f32> = (0..n * cfg.dim).map(|_| rng.random_range(-b..b)).collect();
        let mut jitters: Vec<Vec<f32>> = Vec::with_capacity(occ);
        if antithetic {
            for p in 0..occ / 2 {
                let u: Vec<f32> = if p == 0 {
                    vec![cfg.jitter; cfg.support]
                } else {
                    (0..cfg.support).map(|_| rng.random_range(-cfg.jitter..cfg.jitter)).collect()
                };
                jitters.push(u.iter().map(|v| -v).collect());
                jitters.push(u);
            }
        } else {
            for _ in 0..occ {
                jitters.push((0..cfg.support).map(|_| rng.random_range(-cfg.jitter..cfg.jitter)).collect());
            }
        }
        for (&t, u) in positions.iter().zip(&jitters) {
            for ((&i, &p), &j) in support.iter().zip(&proto).zip(u) {
                acts[t * cfg.dim + i] = p + j;
            }
        }
        let tokens = (0..n).map(|t| format!("t{t}")).collect();
        let ann = crate::trace::ConceptAnnotation::new(PLANTED_CONCEPT, positions);
        crate::trace::ActivationTrace::new("planted", 1, cfg.dim, tokens, acts, vec![ann])
    };
    let train = build(cfg.train_length, cfg.train_occurrences, true)?;
    let test = build(cfg.test_length, cfg.test_occurrences, false)?;
    Ok((train, test, support))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedResult {
    pub chunk: PopulationChunk,
    pub planted: Vec<usize>,
    pub recovered: f64,
    pub train: Confusion,
    pub test: Confusion,
}

pub fn planted_pa_experiment(cfg: &PlantedPa) -> Result<PlantedResult> {
    let (train, test, planted) = planted_traces(cfg)?;
    let fit = pa::fit_concept(&train, PLANTED_CONCEPT, 0, 0, Normalization::FullWidth)?;
    let test_conf = pa::evaluate_concept(&fit.chunk, &test)?;
    let hit = planted.iter().filter(|i| fit.chunk.support.contains(i)).count();
    Ok(PlantedResult {
        recovered: hit as f64 / planted.len() as f64,
        chunk: fit.chunk,
        planted,
        train: fit.train,
        test: test_conf,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UcdSynthetic {
    pub prototypes: usize,
    pub dim: usize,
    pub sigma: f64,
    pub samples: usize,
    pub ucd: crate::ucd::UcdConfig,
}

impl Default for UcdSynthetic {
    fn default() -> Self {
        Self {
            prototypes: 8,
            dim: 8,
            sigma: 0.1,
            samples: 4096,
            ucd: crate::ucd::UcdConfig::default(),
        }
    }
}

/// `n` orthonormal vectors in `dim` dimensions (Gram-Schmidt on Gaussians).
pub fn orthonormal(n: usize, dim: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    if n > dim {
        return Err(Error::arg(format!("cannot fit {n} orthonormal vectors in {dim} dimensions")));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Ok(basis)
}

/// Embeddings drawn as a random prototype plus isotropic Gaussian noise,
/// with their true prototype labels.
pub fn ucd_synthetic_data(cfg: &UcdSynthetic, seed: u64) -> Result<(Vec<f32>, Vec<usize>)> {
    let mut rng = crate::seeded_rng(seed);
    let protos = orthonormal(cfg.prototypes, cfg.dim, &mut rng)?;
    let normal = rand_distr::Normal::new(0.0, cfg.sigma).map_err(|e| Error::arg(e.to_string()))?;
    let mut data = Vec::with_capacity(cfg.samples * cfg.dim);
    let mut labels = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let k = rng.random_range(0..cfg.prototypes);
        labels.push(k);
        data.extend(protos[k].iter().map(|&p| (p + rng.sample(normal)) as f32));
    }
    Ok((data, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UcdSyntheticResult {
    pub agreement: f64,
    pub log: crate::ucd::UcdTrainLog,
}

pub fn ucd_synthetic_experiment(cfg: &UcdSynthetic) -> Result<UcdSyntheticResult> {
    let (data, labels) = ucd_synthetic_data(cfg, cfg.ucd.seed.wrapping_add(7))?;
    let (dict, log) = crate::ucd::train_ucd(&data, cfg.dim, &cfg.ucd)?;
    let found = crate::ucd::assign_chunks(&dict, &data)?;
    Ok(UcdSyntheticResult {
        agreement: crate::ucd::majority_kappa(&found, &labels),
        log,
    })
}
