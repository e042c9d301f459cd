//! The `chunklens` command line.
//!
//! Every subcommand writes its outputs under `--out` together with a
//! `run-manifest.json` recording the seed, the crate version and SHA-256
//! hashes of every input and output file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::dsc::{self, ChunkingConfig};
use crate::error::{Error, Result};
use crate::intervene::{self, Band, GraftSpec, Mode, Position};
use crate::pa::{self, LayerStat, PopulationChunk};
use crate::recipes::{self, Recipe, Registry, RunOptions};
use crate::report::{self, sha256_hex, ReportBundle, Table};
use crate::rnnlab::{self, RnnModel, TrainConfig, TransferGraft};
use crate::synth::{self, SymbolSequence};
use crate::trace::{read_trace, write_trace, ActivationTrace};
use crate::ucd::{self, Dictionary, UcdConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "chunklens", version, about = "Chunk extraction from neural population activity")]
pub struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Activation trace read by trace-consuming commands.
    #[arg(long, global = true)]
    pub trace: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SeqKind {
    Periodic,
    Null,
    Noise,
    Vocab,
    Context,
    Hier,
}

#[derive(Debug, Args)]
pub struct SeqArgs {
    /// Generator family.
    #[arg(long, alias = "task", value_enum, default_value = "null")]
    pub kind: SeqKind,
    #[arg(long, default_value = "ABCD")]
    pub pattern: String,
    #[arg(long, default_value_t = 'E')]
    pub null: char,
    /// Noise alphabet for `noise`.
    #[arg(long, default_value = "EFG")]
    pub noise: String,
    #[arg(long, default_value_t = 0.1)]
    pub p_pattern: f64,
    #[arg(long, default_value_t = 1)]
    pub min_reps: usize,
    #[arg(long, default_value_t = 20)]
    pub max_reps: usize,
    /// Pattern blocks for `null`.
    #[arg(long, default_value_t = 1000)]
    pub blocks: usize,
    /// Repetitions for `periodic`.
    #[arg(long, default_value_t = 100)]
    pub repetitions: usize,
    /// Vocabulary for `vocab`.
    #[arg(long, value_delimiter = ',', default_value = "CDAB,AB,ABCD")]
    pub words: Vec<String>,
    /// Total word probability mass for `vocab`, `context` and `hier`.
    #[arg(long, default_value_t = 0.2)]
    pub mass: f64,
    #[arg(long, default_value_t = 5000)]
    pub length: usize,
    /// Hierarchy depth for `hier`.
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
}

impl SeqArgs {
    fn generate(&self, seed: u64) -> Result<SymbolSequence> {
        match self.kind {
            SeqKind::Periodic => synth::gen_periodic(&self.pattern, self.repetitions),
            SeqKind::Null => {
                synth::gen_pattern_in_null(&self.pattern, self.null, self.min_reps, self.max_reps, self.blocks, seed)
            }
            SeqKind::Noise => {
                let noise: Vec<char> = self.noise.chars().collect();
                synth::gen_pattern_in_noise(&self.pattern, &noise, self.p_pattern, self.length, seed)
            }
            SeqKind::Vocab => {
                let words: Vec<&str> = self.words.iter().map(String::as_str).collect();
                synth::gen_vocab_sequence(&words, self.null, self.mass, self.length, seed)
            }
            SeqKind::Context => {
                synth::gen_vocab_sequence(&["CDAB", "AB", "ABCD"], self.null, self.mass, self.length, seed)
            }
            SeqKind::Hier => {
                synth::gen_hierarchical(self.depth, &synth::DEFAULT_ALPHABET, self.null, self.length, seed)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CliMode {
    Graft,
    Freeze,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CliTransfer {
    Hidden,
    Input,
    SelfState,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic symbol sequence and its parse sidecar.
    Synth(SeqArgs),
    /// Train the linear RNN on a generated or supplied sequence.
    TrainRnn {
        #[command(flatten)]
        seq: SeqArgs,
        /// Train on this symbol file instead of generating one.
        #[arg(long)]
        sequence: Option<PathBuf>,
        #[arg(long, default_value_t = rnnlab::DEFAULT_HIDDEN)]
        hidden: usize,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Run a trained model over a sequence and record its hidden states.
    ExportTrace {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        /// Parse sidecar; its words become trace annotations.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long, default_value = "trace.actr")]
        name: String,
    },
    /// Discrete sequence chunking on one layer of a trace.
    ExtractDsc {
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Value clusters per neuron.
        #[arg(long, default_value_t = dsc::DEFAULT_CLUSTERS)]
        k: usize,
        /// Candidate pairs considered per merge round.
        #[arg(long = "K")]
        top_k: Option<usize>,
        #[arg(long)]
        threshold: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Fit population-average chunks for a concept at every layer and shift.
    FitPa {
        #[arg(long)]
        train_trace: Option<PathBuf>,
        #[arg(long)]
        test_trace: PathBuf,
        #[arg(long)]
        concept: String,
        #[arg(long, num_args = 1.., allow_negative_numbers = true, default_values_t = [0i64])]
        shifts: Vec<i64>,
    },
    /// Evaluate a fitted chunk on a held-out trace.
    EvalPa {
        #[arg(long)]
        chunk: PathBuf,
        #[arg(long)]
        test_trace: Option<PathBuf>,
    },
    /// Train an unsupervised chunk dictionary on one layer.
    TrainUcd {
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long = "K", default_value_t = 16)]
        k: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
    /// Label every token of one layer with its best dictionary row.
    AssignUcd {
        #[arg(long)]
        dict: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
    },
    /// Similarity histograms, usage and a chunk raster for a dictionary.
    UcdReport {
        #[arg(long)]
        dict: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
    },
    /// Apply a graft spec to an RNN, or run the context-graft experiment.
    GraftRnn {
        #[arg(long, requires = "spec")]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        spec: Option<PathBuf>,
        /// Input symbols for a spec run.
        #[arg(long)]
        input: Option<String>,
    },
    /// Compositional transfer with and without a graft.
    TransferExp {
        #[arg(long, value_enum, default_value = "hidden")]
        mode: CliTransfer,
        /// Number of seeds, counted up from `--seed`.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Turn a fitted chunk into a graft or freeze spec.
    ExportGraftSpec {
        #[arg(long)]
        chunk: PathBuf,
        #[arg(long, value_enum, default_value = "graft")]
        mode: CliMode,
        /// Token index or `all`.
        #[arg(long, default_value = "all")]
        position: String,
        /// Expand over a layer band of a model with `--num-layers` layers.
        #[arg(long, requires = "num_layers")]
        band: Option<String>,
        #[arg(long)]
        num_layers: Option<usize>,
    },
    /// Concept occurrence rates for generated texts, per category and condition.
    ScoreGenerations {
        #[arg(long)]
        generations: PathBuf,
        #[arg(long)]
        sidecar: PathBuf,
        #[arg(long)]
        concept: String,
    },
    /// Render figures from the CSV outputs of earlier runs.
    Report {
        #[arg(long)]
        from: PathBuf,
    },
    /// Run a named experiment recipe and evaluate its checks.
    Replicate {
        /// Recipe name; omit with `--list`.
        recipe: Option<String>,
        /// Number of seeds, counted up from `--seed`.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long, num_args = 1..)]
        depths: Option<Vec<usize>>,
        /// Extra recipe file merged over the built-in registry.
        #[arg(long)]
        recipes: Option<PathBuf>,
        #[arg(long)]
        list: bool,
    },
}

#[derive(Serialize)]
struct FileRecord {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    version: &'static str,
    seed: u64,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
}

struct Run {
    out: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn input(&mut self, path: &Path) -> Result<PathBuf> {
        if !path.is_file() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
            ));
        }
        self.inputs.push(path.to_path_buf());
        Ok(path.to_path_buf())
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn write(&mut self, name: &str, body: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        self.write(name, serde_json::to_vec_pretty(v)?)
    }

    fn csv<T: Serialize>(&mut self, name: &str, records: &[T]) -> Result<()> {
        self.write(name, Table::from_records(records)?.to_csv()?)
    }

    fn bundle(&mut self, bundle: &ReportBundle) -> Result<()> {
        for entry in bundle.write_to(&self.out)? {
            self.outputs.push(self.out.join(entry.file));
        }
        self.outputs.push(self.out.join("manifest.json"));
        Ok(())
    }

    fn manifest(&self, command: &str, args: Vec<String>, seed: u64) -> Result<()> {
        let record = |p: &PathBuf| -> Result<FileRecord> {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok(FileRecord {
                path: p.display().to_string(),
                sha256: sha256_hex(&bytes),
            })
        };
        // Outputs are named relative to the output directory.
        let output = |p: &PathBuf| -> Result<FileRecord> {
            let mut r = record(p)?;
            if let Ok(rel) = p.strip_prefix(&self.out) {
                r.path = rel.display().to_string();
            }
            Ok(r)
        };
        let mut outputs = self.outputs.clone();
        outputs.sort();
        outputs.dedup();
        let m = RunManifest {
            command: command.to_string(),
            args,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            inputs: self.inputs.iter().map(record).collect::<Result<_>>()?,
            outputs: outputs.iter().map(output).collect::<Result<_>>()?,
        };
        let p = self.out.join("run-manifest.json");
        fs::write(&p, serde_json::to_vec_pretty(&m)?).map_err(|e| Error::io(&p, e))
    }
}

enum Status {
    Ok,
    ChecksFailed,
}

fn init_threads() {
    if let Some(n) = std::env::var("CHUNKLENS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // A pool that already exists (repeated in-process runs) is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .try_init();
    init_threads();
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, args) {
        Ok(Status::Ok) => EXIT_OK,
        Ok(Status::ChecksFailed) => EXIT_CHECK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Synth(_) => "synth",
        Command::TrainRnn { .. } => "train-rnn",
        Command::ExportTrace { .. } => "export-trace",
        Command::ExtractDsc { .. } => "extract-dsc",
        Command::FitPa { .. } => "fit-pa",
        Command::EvalPa { .. } => "eval-pa",
        Command::TrainUcd { .. } => "train-ucd",
        Command::AssignUcd { .. } => "assign-ucd",
        Command::UcdReport { .. } => "ucd-report",
        Command::GraftRnn { .. } => "graft-rnn",
        Command::TransferExp { .. } => "transfer-exp",
        Command::ExportGraftSpec { .. } => "export-graft-spec",
        Command::ScoreGenerations { .. } => "score-generations",
        Command::Report { .. } => "report",
        Command::Replicate { .. } => "replicate",
    }
}

fn execute(cli: &Cli, args: Vec<String>) -> Result<Status> {
    if let Command::Replicate { list: true, recipes, .. } = &cli.command {
        for (name, r) in registry(recipes.as_deref())?.iter() {
            println!("{name}\t{}\t{}", r.kind, r.description);
        }
        return Ok(Status::Ok);
    }
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let mut run = Run {
        out: cli.out.clone(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    let status = dispatch(cli, &mut run)?;
    run.manifest(command_name(&cli.command), args, cli.seed)?;
    Ok(status)
}

fn trace_arg(cli: &Cli, run: &mut Run) -> Result<ActivationTrace> {
    let p = cli
        .trace
        .as_deref()
        .ok_or_else(|| Error::arg("this command needs --trace PATH"))?;
    read_trace(run.input(p)?)
}

fn layer_data(trace: &ActivationTrace, layer: usize) -> Result<&[f32]> {
    if layer >= trace.layers {
        return Err(Error::arg(format!("layer {layer} outside trace with {} layers", trace.layers)));
    }
    Ok(trace.layer(layer))
}

#[derive(Serialize)]
struct LossRow {
    iteration: usize,
    loss: f64,
}

fn dispatch(cli: &Cli, run: &mut Run) -> Result<Status> {
    let seed = cli.seed;
    match &cli.command {
        Command::Synth(seq) => {
            let s = seq.generate(seed)?;
            let (t, j) = (run.path("sequence.txt"), run.path("sequence.json"));
            s.save(t, j)?;
        }
        Command::TrainRnn {
            seq,
            sequence,
            hidden,
            iterations,
            lr,
        } => {
            let s = match sequence {
                Some(p) => SymbolSequence::load(run.input(p)?, None)?,
                None => {
                    let s = seq.generate(seed)?;
                    let (t, j) = (run.path("sequence.txt"), run.path("sequence.json"));
                    s.save(t, j)?;
                    s
                }
            };
            let mut cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            if let Some(n) = iterations {
                cfg.iterations = *n;
            }
            if let Some(lr) = lr {
                cfg.learning_rate = *lr;
            }
            let init = RnnModel::init(&s.alphabet(), *hidden, seed)?;
            let (model, losses) = rnnlab::train(&init, &s.symbols, &cfg)?;
            let p = run.path("model.json");
            model.save(p)?;
            let rows: Vec<LossRow> = losses
                .iter()
                .enumerate()
                .map(|(iteration, &loss)| LossRow { iteration, loss })
                .collect();
            run.csv("losses.csv", &rows)?;
        }
        Command::ExportTrace {
            model,
            sequence,
            sidecar,
            name,
        } => {
            let model = RnnModel::load(run.input(model)?)?;
            let side = sidecar.as_deref().map(|p| run.input(p)).transpose()?;
            let seq = SymbolSequence::load(run.input(sequence)?, side.as_deref())?;
            let mut trace = model.export_trace(&seq.symbols)?;
            trace.annotations = seq.word_annotations();
            trace.validate()?;
            let p = run.path(name);
            write_trace(&trace, p)?;
        }
        Command::ExtractDsc {
            layer,
            k,
            top_k,
            threshold,
            iters,
        } => {
            let trace = trace_arg(cli, run)?;
            let mut cfg = ChunkingConfig::default();
            if let Some(v) = top_k {
                cfg.top_k = *v;
            }
            if let Some(v) = threshold {
                cfg.freq_threshold = *v;
            }
            if let Some(v) = iters {
                cfg.iterations = *v;
            }
            let a = dsc::analyze(layer_data(&trace, *layer)?, trace.dim, *k, seed, &cfg)?;
            let p = run.path("vocab.json");
            a.vocab.save(p)?;
            run.json("parse.json", &a.parse)?;
            run.json("clustering.json", &a.clustering)?;
            #[derive(Serialize)]
            struct ChunkRow {
                chunk: usize,
                length: usize,
                count: usize,
                states: String,
            }
            let rows: Vec<ChunkRow> = a
                .vocab
                .chunks
                .iter()
                .enumerate()
                .map(|(i, c)| ChunkRow {
                    chunk: i,
                    length: c.states.len(),
                    count: c.count,
                    states: c.states.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" "),
                })
                .collect();
            run.csv("chunks.csv", &rows)?;
            run.json("metrics.json", &dsc::vocab_metrics(&a.vocab, dsc::DEFAULT_MIN_COUNT))?;
        }
        Command::FitPa {
            train_trace,
            test_trace,
            concept,
            shifts,
        } => {
            let train = match train_trace.as_deref().or(cli.trace.as_deref()) {
                Some(p) => read_trace(run.input(p)?)?,
                None => return Err(Error::arg("fit-pa needs --train-trace or --trace")),
            };
            let test = read_trace(run.input(test_trace)?)?;
            let (stats, chunks) = pa::layer_sweep(&train, &test, concept, shifts)?;
            run.csv("layer_stats.csv", &stats)?;
            run.json("chunks.json", &chunks)?;
            if let Some(best) = best_chunk(&stats, &chunks) {
                let p = run.path("chunk.json");
                best.save(p)?;
            }
            let mut bundle = ReportBundle::default();
            for (name, svg) in report::plot_layer_stats(&stats)? {
                bundle.add_figure(&name, svg);
            }
            run.bundle(&bundle)?;
        }
        Command::EvalPa { chunk, test_trace } => {
            let chunk = PopulationChunk::load(run.input(chunk)?)?;
            let test = match test_trace.as_deref().or(cli.trace.as_deref()) {
                Some(p) => read_trace(run.input(p)?)?,
                None => return Err(Error::arg("eval-pa needs --test-trace or --trace")),
            };
            let c = pa::evaluate_concept(&chunk, &test)?;
            #[derive(Serialize)]
            struct EvalRow {
                concept: String,
                layer: usize,
                shift: i64,
                tp: usize,
                fp: usize,
                tn: usize,
                r#fn: usize,
                tpr: f64,
                fpr: f64,
            }
            run.csv(
                "eval.csv",
                &[EvalRow {
                    concept: chunk.concept.clone(),
                    layer: chunk.layer,
                    shift: chunk.shift,
                    tp: c.tp,
                    fp: c.fp,
                    tn: c.tn,
                    r#fn: c.fn_,
                    tpr: c.tpr(),
                    fpr: c.fpr(),
                }],
            )?;
        }
        Command::TrainUcd {
            layer,
            k,
            epochs,
            lr,
            batch,
        } => {
            let trace = trace_arg(cli, run)?;
            let cfg = UcdConfig {
                k: *k,
                lr: *lr,
                batch: *batch,
                epochs: *epochs,
                seed,
            };
            let (dict, log) = ucd::train_ucd(layer_data(&trace, *layer)?, trace.dim, &cfg)?;
            let p = run.path("dictionary.ucd");
            dict.save(p)?;
            run.json("ucd_config.json", &cfg)?;
            run.json("ucd_log.json", &log)?;
            #[derive(Serialize)]
            struct EpochRow {
                epoch: usize,
                loss: f64,
            }
            let rows: Vec<EpochRow> = std::iter::once(log.initial_loss)
                .chain(log.epoch_loss.iter().copied())
                .enumerate()
                .map(|(epoch, loss)| EpochRow { epoch, loss })
                .collect();
            run.csv("ucd_loss.csv", &rows)?;
        }
        Command::AssignUcd { dict, layer } => {
            let dict = Dictionary::load(run.input(dict)?)?;
            let trace = trace_arg(cli, run)?;
            let (labels, sims) = ucd::assign_with_similarity(&dict, layer_data(&trace, *layer)?);
            #[derive(Serialize)]
            struct AssignRow<'a> {
                index: usize,
                token: &'a str,
                chunk: usize,
                similarity: f32,
            }
            let rows: Vec<AssignRow> = labels
                .iter()
                .zip(&sims)
                .enumerate()
                .map(|(i, (&chunk, &similarity))| AssignRow {
                    index: i,
                    token: &trace.tokens[i],
                    chunk,
                    similarity,
                })
                .collect();
            run.csv("assignments.csv", &rows)?;
        }
        Command::UcdReport { dict, layer } => {
            let dict = Dictionary::load(run.input(dict)?)?;
            let trace = trace_arg(cli, run)?;
            let d = ucd::diagnostics(&dict, layer_data(&trace, *layer)?)?;
            run.json("diagnostics.json", &d)?;
            let raster = ucd::chunk_raster(&dict, &trace)?;
            let mut bundle = ReportBundle::default();
            bundle.add_table("raster", &raster_table(&raster))?;
            #[derive(Serialize)]
            struct UsageRow {
                chunk: usize,
                usage: usize,
                sparsity: f64,
            }
            let usage: Vec<UsageRow> = d
                .usage
                .iter()
                .zip(&d.row_sparsity)
                .enumerate()
                .map(|(chunk, (&usage, &sparsity))| UsageRow { chunk, usage, sparsity })
                .collect();
            bundle.add_table("usage", &Table::from_records(&usage)?)?;
            bundle.add_figure("raster", report::plot_raster(&raster)?);
            let h = &d.max_similarity;
            bundle.add_figure(
                "max_similarity",
                report::plot_histogram("Best-row cosine similarity", h.lo, h.hi, &h.counts)?,
            );
            let h = &d.all_similarity;
            bundle.add_figure(
                "all_similarity",
                report::plot_histogram("Cosine similarity to every row", h.lo, h.hi, &h.counts)?,
            );
            run.bundle(&bundle)?;
        }
        Command::GraftRnn { model, spec, input } => match (model, spec) {
            (Some(model), Some(spec)) => {
                let model = RnnModel::load(run.input(model)?)?;
                let specs = intervene::load_specs(run.input(spec)?)?;
                let symbols: Vec<char> = input
                    .as_deref()
                    .ok_or_else(|| Error::arg("graft-rnn with --spec needs --input SYMBOLS"))?
                    .chars()
                    .collect();
                let control = model.forward_with_states(&symbols)?.predictions();
                #[derive(Serialize)]
                struct StepRow {
                    spec: usize,
                    position: usize,
                    input: char,
                    control: char,
                    grafted: char,
                }
                let mut rows = Vec::new();
                for (i, s) in specs.iter().enumerate() {
                    let grafted = intervene::apply_to_rnn(&model, s, &symbols)?.predictions();
                    for (t, &c) in symbols.iter().enumerate() {
                        rows.push(StepRow {
                            spec: i,
                            position: t,
                            input: c,
                            control: model.alphabet[control[t]],
                            grafted: model.alphabet[grafted[t]],
                        });
                    }
                }
                run.csv("graft.csv", &rows)?;
            }
            _ => {
                let recipe = Recipe {
                    kind: "graft".into(),
                    description: String::new(),
                    params: toml::Table::new(),
                    checks: toml::Table::new(),
                };
                let opts = RunOptions {
                    seeds: Some(vec![seed]),
                    depths: None,
                };
                let outcome = recipes::run_recipe("graft-rnn", &recipe, &opts)?;
                run.bundle(&outcome.bundle)?;
            }
        },
        Command::TransferExp { mode, seeds } => {
            let mode = match mode {
                CliTransfer::Hidden => TransferGraft::Hidden,
                CliTransfer::Input => TransferGraft::Input,
                CliTransfer::SelfState => TransferGraft::SelfState,
            };
            let mut params = toml::Table::new();
            params.insert(
                "mode".into(),
                toml::Value::try_from(mode).map_err(|e| Error::Config(e.to_string()))?,
            );
            let recipe = Recipe {
                kind: "transfer".into(),
                description: String::new(),
                params,
                checks: toml::Table::new(),
            };
            let opts = RunOptions {
                seeds: Some((seed..seed + seeds).collect()),
                depths: None,
            };
            let outcome = recipes::run_recipe("transfer-exp", &recipe, &opts)?;
            run.bundle(&outcome.bundle)?;
        }
        Command::ExportGraftSpec {
            chunk,
            mode,
            position,
            band,
            num_layers,
        } => {
            let chunk = PopulationChunk::load(run.input(chunk)?)?;
            let mode = match mode {
                CliMode::Graft => Mode::Graft,
                CliMode::Freeze => Mode::Freeze,
            };
            let position = parse_position(position)?;
            let spec = intervene::spec_from_chunk(&chunk, mode, position);
            let specs: Vec<GraftSpec> = match (band, num_layers) {
                (Some(b), Some(l)) => intervene::layer_band(&spec, b.parse::<Band>()?, *l)?,
                _ => vec![spec],
            };
            let p = run.path("graft_spec.json");
            intervene::save_specs(&specs, p)?;
        }
        Command::ScoreGenerations {
            generations,
            sidecar,
            concept,
        } => {
            let gens = intervene::load_generations(run.input(generations)?, run.input(sidecar)?)?;
            let rates = intervene::rates_by_condition(&gens, concept)?;
            #[derive(Serialize)]
            struct RateRow<'a> {
                category: &'a str,
                condition: &'a str,
                rate: f64,
            }
            let rows: Vec<RateRow> = rates
                .iter()
                .map(|((category, condition), &rate)| RateRow {
                    category,
                    condition,
                    rate,
                })
                .collect();
            run.csv("rates.csv", &rows)?;
            let (control, grafted) = intervene::split_rates(&rates)?;
            if !control.is_empty() {
                run.csv("graft_report.csv", &intervene::graft_report(&control, &grafted)?)?;
            }
        }
        Command::Report { from } => {
            let bundle = report_from(from, run)?;
            run.bundle(&bundle)?;
        }
        Command::Replicate {
            recipe,
            seeds,
            depths,
            recipes: extra,
            ..
        } => {
            let reg = registry(extra.as_deref())?;
            if let Some(p) = extra {
                run.input(p)?;
            }
            let name = recipe.as_deref().ok_or_else(|| {
                Error::arg(format!("replicate needs a recipe name; available: {}", reg.names().join(", ")))
            })?;
            let opts = RunOptions {
                seeds: seeds.map(|n| (seed..seed + n).collect()),
                depths: depths.clone(),
            };
            let outcome = recipes::run_recipe(name, reg.get(name)?, &opts)?;
            outcome.write_to(&run.out)?;
            for entry in outcome.bundle.manifest() {
                run.outputs.push(run.out.join(entry.file));
            }
            for name in outcome.artifacts.keys().map(String::as_str).chain(["manifest.json", "checks.json"]) {
                run.outputs.push(run.out.join(name));
            }
            for c in &outcome.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if !outcome.passed() {
                return Ok(Status::ChecksFailed);
            }
        }
    }
    Ok(Status::Ok)
}

fn registry(extra: Option<&Path>) -> Result<Registry> {
    let mut reg = Registry::builtin();
    if let Some(p) = extra {
        reg.merge(Registry::load_file(p)?);
    }
    Ok(reg)
}

fn parse_position(s: &str) -> Result<Position> {
    if s == "all" {
        return Ok(Position::All);
    }
    s.parse::<usize>()
        .map(Position::At)
        .map_err(|_| Error::arg(format!("position must be an index or \"all\", got {s:?}")))
}

/// Highest Youden's J on the held-out trace; ties go to the earlier row.
fn best_chunk<'a>(stats: &[LayerStat], chunks: &'a [PopulationChunk]) -> Option<&'a PopulationChunk> {
    let mut best: Option<(f64, &PopulationChunk)> = None;
    for (s, c) in stats.iter().zip(chunks) {
        let j = s.tpr - s.fpr;
        if best.is_none_or(|(b, _)| j > b) {
            best = Some((j, c));
        }
    }
    best.map(|(_, c)| c)
}

fn raster_table(grid: &[Vec<usize>]) -> Table {
    let width = grid.first().map_or(0, Vec::len);
    let mut headers = vec!["layer".to_string()];
    headers.extend((0..width).map(|t| format!("t{t}")));
    Table {
        headers,
        rows: grid
            .iter()
            .enumerate()
            .map(|(l, row)| std::iter::once(l.to_string()).chain(row.iter().map(usize::to_string)).collect())
            .collect(),
    }
}

fn read_table(path: &Path) -> Result<Table> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Table::from_csv(&bytes)
}

fn numeric_column(t: &Table, name: &str) -> Result<Vec<f64>> {
    t.column(name)
        .ok_or_else(|| Error::Format(format!("missing column {name}")))?
        .into_iter()
        .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("column {name}: {v:?} is not a number"))))
        .collect()
}

/// Rebuilds figures from the CSV tables in `dir`. Recognized tables are
/// `layer_stats.csv`, `transfer_curves.csv`, `raster.csv` and `ucd_loss.csv`;
/// every CSV is carried over into the bundle.
fn report_from(dir: &Path, run: &mut Run) -> Result<ReportBundle> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "analysis directory not found"),
        ));
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    entries.sort();
    let mut bundle = ReportBundle::default();
    for p in entries {
        run.input(&p)?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("table").to_string();
        let table = read_table(&p)?;
        match stem.as_str() {
            "layer_stats" => {
                let mut rdr = csv::Reader::from_path(&p)?;
                let stats: Vec<LayerStat> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
                for (name, svg) in report::plot_layer_stats(&stats)? {
                    bundle.add_figure(&name, svg);
                }
            }
            "transfer_curves" => {
                let seeds = numeric_column(&table, "seed")?;
                let mut by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
                for col in ["control_continuation", "grafted_continuation"] {
                    let vals = numeric_column(&table, col)?;
                    let first = seeds.first().copied().unwrap_or(0.0);
                    let n_seeds = {
                        let mut s = seeds.clone();
                        s.dedup();
                        s.len().max(1)
                    };
                    let per = seeds.iter().filter(|&&s| s == first).count().max(1);
                    let mut mean = vec![0.0; per];
                    for (i, v) in vals.iter().enumerate() {
                        mean[i % per] += v / n_seeds as f64;
                    }
                    by.insert(col, mean);
                }
                let series: Vec<(String, Vec<f64>)> = by.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
                bundle.add_figure("transfer_curves", report::plot_curves("Transfer continuation accuracy", &series)?);
            }
            "raster" => {
                let grid: Vec<Vec<usize>> = table
                    .rows
                    .iter()
                    .map(|r| {
                        r.iter()
                            .skip(1)
                            .map(|v| v.parse::<usize>().map_err(|_| Error::Format(format!("raster cell {v:?}"))))
                            .collect()
                    })
                    .collect::<Result<_>>()?;
                bundle.add_figure("raster", report::plot_raster(&grid)?);
            }
            "ucd_loss" => {
                let loss = numeric_column(&table, "loss")?;
                bundle.add_figure("ucd_loss", report::plot_curves("UCD loss by epoch", &[("loss".into(), loss)])?);
            }
            _ => {}
        }
        bundle.add_table(&stem, &table)?;
    }
    if bundle.tables.is_empty() {
        return Err(Error::arg(format!("no CSV tables in {}", dir.display())));
    }
    Ok(bundle)
}
