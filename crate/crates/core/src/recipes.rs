//! Declarative experiment recipes.
//!
//! A recipe names an experiment kind, parameter overrides for that kind and a
//! set of checks. The built-in registry is embedded from `recipes.toml`;
//! additional files in the same layout can be merged over it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{
    self, AlignExperiment, ContextExperiment, GraftExperiment, HierarchyExperiment, LookupExperiment, PlantedPa,
    TransferExperiment, UcdSynthetic,
};
use crate::report::{self, ReportBundle, Table};

const BUILTIN: &str = include_str!("recipes.toml");

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Recipe {
    pub kind: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub params: toml::Table,
    #[serde(default)]
    pub checks: toml::Table,
}

#[derive(Deserialize)]
struct RegistryFile {
    #[serde(default)]
    recipe: BTreeMap<String, Recipe>,
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    recipes: BTreeMap<String, Recipe>,
}

impl Registry {
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN).expect("embedded recipe registry parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: RegistryFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (name, r) in &file.recipe {
            if !KINDS.contains(&r.kind.as_str()) {
                return Err(Error::Config(format!(
                    "recipe {name}: unknown kind {:?} (known: {})",
                    r.kind,
                    KINDS.join(", ")
                )));
            }
        }
        Ok(Self { recipes: file.recipe })
    }

    pub fn load_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Adds or replaces recipes from `other`.
    pub fn merge(&mut self, other: Registry) {
        self.recipes.extend(other.recipes);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Recipe)> {
        self.recipes.iter().map(|(n, r)| (n.as_str(), r))
    }

    pub fn names(&self) -> Vec<&str> {
        self.recipes.keys().map(String::as_str).collect()
    }

    pub fn get(&self, name: &str) -> Result<&Recipe> {
        self.recipes.get(name).ok_or_else(|| {
            Error::arg(format!("unknown recipe {name:?}; available: {}", self.names().join(", ")))
        })
    }
}

pub const KINDS: [&str; 8] = [
    "lookup",
    "align",
    "graft",
    "transfer",
    "hierarchy",
    "context",
    "pa-synthetic",
    "ucd-synthetic",
];

/// Overrides supplied on the command line.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seeds: Option<Vec<u64>>,
    pub depths: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct RecipeOutcome {
    pub recipe: String,
    pub kind: String,
    pub bundle: ReportBundle,
    /// Extra JSON artifacts (fitted chunks, raw results) keyed by file name.
    pub artifacts: BTreeMap<String, String>,
    pub checks: Vec<CheckResult>,
}

impl RecipeOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Writes tables, figures, artifacts, `manifest.json` and `checks.json`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.bundle.write_to(dir)?;
        for (name, body) in &self.artifacts {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        let p = dir.join("checks.json");
        fs::write(&p, serde_json::to_vec_pretty(&self.checks)?).map_err(|e| Error::io(&p, e))
    }
}

fn params<T: DeserializeOwned>(table: &toml::Table) -> Result<T> {
    toml::Value::Table(table.clone())
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

struct Checks<'a> {
    table: &'a toml::Table,
    known: &'static [&'static str],
    out: Vec<CheckResult>,
}

impl<'a> Checks<'a> {
    fn new(table: &'a toml::Table, known: &'static [&'static str]) -> Result<Self> {
        if let Some(bad) = table.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::Config(format!(
                "unknown check {bad:?}; this kind supports: {}",
                known.join(", ")
            )));
        }
        Ok(Self {
            table,
            known,
            out: Vec::new(),
        })
    }

    fn number(&self, key: &str) -> Result<Option<f64>> {
        debug_assert!(self.known.contains(&key));
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(toml::Value::Float(f)) => Ok(Some(*f)),
            Some(v) => Err(Error::Config(format!("check {key} must be a number, got {v}"))),
        }
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.table.get(key) {
            None => Ok(false),
            Some(toml::Value::Boolean(b)) => Ok(*b),
            Some(v) => Err(Error::Config(format!("check {key} must be a boolean, got {v}"))),
        }
    }

    fn at_least(&mut self, key: &str, observed: f64) -> Result<()> {
        if let Some(bound) = self.number(key)? {
            self.out.push(CheckResult {
                name: key.into(),
                passed: observed >= bound,
                detail: format!("observed {observed} vs minimum {bound}"),
            });
        }
        Ok(())
    }

    fn at_most(&mut self, key: &str, observed: f64) -> Result<()> {
        if let Some(bound) = self.number(key)? {
            self.out.push(CheckResult {
                name: key.into(),
                passed: observed <= bound,
                detail: format!("observed {observed} vs maximum {bound}"),
            });
        }
        Ok(())
    }

    fn holds(&mut self, key: &str, passed: bool, detail: String) -> Result<()> {
        if self.flag(key)? {
            self.out.push(CheckResult {
                name: key.into(),
                passed,
                detail,
            });
        }
        Ok(())
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

pub fn run_recipe(name: &str, recipe: &Recipe, opts: &RunOptions) -> Result<RecipeOutcome> {
    log::info!("recipe {name} ({})", recipe.kind);
    let mut outcome = RecipeOutcome {
        recipe: name.to_string(),
        kind: recipe.kind.clone(),
        bundle: ReportBundle::default(),
        artifacts: BTreeMap::new(),
        checks: Vec::new(),
    };
    let checks = match recipe.kind.as_str() {
        "lookup" => run_lookup(recipe, opts, &mut outcome)?,
        "align" => run_align(recipe, opts, &mut outcome)?,
        "graft" => run_graft(recipe, opts, &mut outcome)?,
        "transfer" => run_transfer(recipe, opts, &mut outcome)?,
        "hierarchy" => run_hierarchy(recipe, opts, &mut outcome)?,
        "context" => run_context(recipe, opts, &mut outcome)?,
        "pa-synthetic" => run_planted(recipe, opts, &mut outcome)?,
        "ucd-synthetic" => run_ucd(recipe, opts, &mut outcome)?,
        other => return Err(Error::Config(format!("unknown kind {other:?}"))),
    };
    outcome.checks = checks;
    Ok(outcome)
}

fn seeds_or(opts: &RunOptions, default: u64) -> Vec<u64> {
    opts.seeds.clone().unwrap_or_else(|| vec![default])
}

#[derive(Serialize)]
struct LookupRow {
    seed: u64,
    accuracy: f64,
    coverage: f64,
    total: usize,
    table_size: usize,
    ambiguous: usize,
    final_loss: f64,
}

fn run_lookup(recipe: &Recipe, opts: &RunOptions, out: &mut RecipeOutcome) -> Result<Vec<CheckResult>> {
    let mut checks = Checks::new(&recipe.checks, &["min_accuracy"])?;
    let base: LookupExperiment = params(&recipe.params)?;
    let mut rows = Vec::new();
    for seed in seeds_or(opts, base.seed) {
        let r = experiments::lookup_experiment(&LookupExperiment { seed, ..base.clone() })?;
        rows.push(LookupRow {
            seed,
            accuracy: r.decode.accuracy,
            coverage: r.decode.coverage,
            total: r.decode.total,
            table_size: r.table_size,
            ambiguous: r.ambiguous,
            final_loss: r.final_loss,
        });
    }
    out.bundle.add_table("lookup", &Table::from_records(&rows)?)?;
    let worst = rows.iter().map(|r| r.accuracy).fold(f64::INFINITY, f64::min);
    checks.at_least("min_accuracy", worst)?;
    Ok(checks.out)
}

#[derive(Serialize)]
struct AlignRow {
    seed: u64,
    true_count: usize,
    detected: usize,
    mismatches: usize,
    tp: usize,
    fp: usize,
    fn_: usize,
    support_size: usize,
    tol: f64,
}

fn run_align(recipe: &Recipe, opts: &RunOptions, out: &mut RecipeOutcome) -> Result<Vec<CheckResult>> {
    let mut checks = Checks::new(&recipe.checks, &["max_mismatches"])?;
    let base: AlignExperiment = params(&recipe.params)?;
    let mut rows = Vec::new();
    for seed in seeds_or(opts, base.seed) {
        let r = experiments::align_experiment(&AlignExperiment { seed, ..base.clone() })?;
        rows.push(AlignRow {
            seed,
            true_count: r.true_count,
            detected: r.detected,
            mismatches: r.mismatches,
            tp: r.test.tp,
            fp: r.test.fp,
            fn_: r.test.fn_,
            support_size: r.chunk.support.len(),
            tol: r.chunk.tol,
        });
        out.artifacts.insert(format!("chunk_seed{seed}.json"), json(&r.chunk)?);
        let n = r.deviation.len().min(400);
        let curve: Vec<f64> = r.deviation[..n].to_vec();
        out.bundle.add_figure(
            &format!("template_deviation_seed{seed}"),
            report::plot_curves("Window-template deviation (held-out)", &[("deviation".into(), curve)])?,
        );
    }
    let mut table = Table::from_records(&rows)?;
    if let Some(h) = table.headers.iter_mut().find(|h| *h == "fn_") {
        *h = "fn".into();
    }
    out.bundle.add_table("align", &table)?;
    let worst = rows.iter().map(|r| r.mismatches).max().unwrap_or(0);
    checks.at_most("max_mismatches", worst as f64)?;
    Ok(checks.out)
}

#[derive(Serialize)]
struct GraftRow {
    seed: u64,
    prev: char,
    cur: char,
    expected: char,
    hits: usize,
    trials: usize,
    rate: f64,
}

fn run_graft(recipe: &Recipe, opts: &RunOptions, out: &mut RecipeOutcome) -> Result<Vec<CheckResult>> {
    let mut checks = Checks::new(&recipe.checks, &["min_rate"])?;
    let base: GraftExperiment = params(&recipe.params)?;
    let mut rows = Vec::new();
    for seed in seeds_or(opts, base.seed) {
        for o in experiments::graft_experiment(&GraftExperiment { seed, ..base.clone() })? {
            rows.push(GraftRow {
                seed,
                prev: o.prev,
                cur: o.cur,
                expected: o.expected,
                hits: o.hits,
                trials: o.trials,
                rate: o.rate(),
            });
        }
    }
    out.bundle.add_table("graft", &Table::from_records(&rows)?)?;
    let worst = rows.iter().map(|r| r.rate).fold(f64::INFINITY, f64::min);
    checks.at_least("min_rate", worst)?;
    Ok(checks.out)
}

#[derive(Serialize)]
struct TransferRow {
    seed: u64,
    control: f64,
    grafted: f64,
    graft_fired: usize,
}

#[derive(Serialize)]
struct CurveRow {
    seed: u64,
    iteration: usize,
    control: f64,
    grafted: f64,
    control_continuation: f64,
    grafted_continuation: f64,
}

fn run_transfer(recipe: &Recipe, opts: &RunOptions, out: &mut RecipeOutcome) -> Result<Vec<CheckResult>> {
    let mut checks = Checks::new(&recipe.checks, &["grafted_above_control"])?;
    let mut cfg: TransferExperiment = params(&recipe.params)?;
    if let Some(s) = &opts.seeds {
        cfg.seeds = s.clone();
    }
    let seeds = experiments::transfer_seeds(&cfg)?;
    let rows: Vec<TransferRow> = seeds
        .iter()
        .map(|s| TransferRow {
            seed: s.seed,
            control: s.control,
            grafted: s.grafted,
            graft_fired: s.curves.graft_fired,
        })
        .collect();
    let mut curves = Vec::new();
    for s in &seeds {
        let c = &s.curves;
        for i in 0..c.control.len() {
            curves.push(CurveRow {
                seed: s.seed,
                iteration: i,
                control: c.control[i],
                grafted: c.grafted[i],
                control_continuation: c.control_continuation[i],
                grafted_continuation: c.grafted_continuation[i],
            });
        }
    }
    out.bundle.add_table("transfer", &Table::from_records(&rows)?)?;
    out.bundle.add_table("transfer_curves", &Table::from_records(&curves)?)?;
    if !seeds.is_empty() {
        let n = seeds[0].curves.control_continuation.len();
        let mean = |f: &dyn Fn(&experiments::TransferSeed) -> &Vec<f64>| -> Vec<f64> {
            (0..n)
                .map(|i| seeds.iter().map(|s| f(s)[i]).sum::<f64>() / seeds.len() as f64)
                .collect()
        };
        out.bundle.add_figure(
            "transfer_curves",
            report::plot_curves(
                "Continuation accuracy during transfer (mean over seeds)",
                &[
                    ("control".into(), mean(&|s| &s.curves.control_continuation)),
                    ("grafted".into(), mean(&|s| &s.curves.grafted_continuation)),
                ],
            )?,
        );
    }
    let above = rows.iter().filter(|r| r.grafted > r.control).count();
    checks.holds(
        "grafted_above_control",
        !rows.is_empty() && above == rows.len(),
        format!("grafted strictly above control on {above} of {} seeds", rows.len()),
    )?;
    Ok(checks.out)
}

#[derive(Serialize)]
struct ParseRow {
    depth: usize,
    seed: u64,
    parse_length: usize,
    ground_truth: usize,
    vocab_size: usize,
    filtered_size: usize,
    unique_states: usize,
}

#[derive(Serialize)]
struct DepthMean {
    depth: usize,
    mean_filtered_size: f64,
    mean_parse_length: f64,
}

fn run_hierarchy(recipe: &Recipe, opts: &RunOptions, out: &mut RecipeOutcome) -> Result<Vec<CheckResult>> {
    let mut checks = Checks::new(&recipe.checks, &["filtered_nondecreasing", "parse_decreasing"])?;
    let mut cfg: HierarchyExperiment = params(&recipe.params)?;
    if let Some(s) = &opts.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(d) = &opts.depths {
        cfg.depths = d.clone();
    }
    let rows = experiments::hierarchy_experiment(&cfg)?;
    let table: Vec<ParseRow> = rows
        .iter()
        .map(|r| ParseRow {
            depth: r.depth,
            seed: r.seed,
            parse_length: r.metrics.parse_length,
            ground_truth: r.metrics.ground_truth,
            vocab_size: r.metrics.metrics.vocab_size,
            filtered_size: r.metrics.metrics.filtered_size,
            unique_states: r.metrics.unique_states,
        })
        .collect();
    let means: Vec<DepthMean> = experiments::hierarchy_means(&rows)
        .into_iter()
        .map(|(depth, f, p)| DepthMean {
            depth,
            mean_filtered_size: f,
            mean_parse_length: p,
        })
        .collect();
    out.bundle.add_table("hierarchy", &Table::from_records(&table)?)?;
    out.bundle.add_table("hierarchy_means", &Table::from_records(&means)?)?;
    out.bundle.add_figure(
        "hierarchy_chunks",
        report::line_chart(
            "Filtered chunk count vs depth",
            "depth",
            "mean chunks",
            &[(
                "filtered".into(),
                means.iter().map(|m| (m.depth as f64, m.mean_filtered_size)).collect(),
            )],
        )?,
    );
    let filtered: Vec<f64> = means.iter().map(|m| m.mean_filtered_size).collect();
    let parse: Vec<f64> = means.iter().map(|m| m.mean_parse_length).collect();
    checks.holds(
        "filtered_nondecreasing",
        filtered.windows(2).all(|w| w[1] >= w[0]),
        format!("mean filtered counts {filtered:?}"),
    )?;
    checks.holds(
        "parse_decreasing",
        parse.windows(2).all(|w| w[1] < w[0]),
        format!("mean parse lengths {parse:?}"),
    )?;
    Ok(checks.out)
}

#[derive(Serialize)]
struct ContextCsv {
    seed: u64,
    ground_truth: usize,
    trained_parse_length: usize,
    untrained_parse_length: usize,
    trained_filtered: usize,
    untrained_filtered: usize,
    trained_closer: bool,
}

fn run_context(recipe: &Recipe, opts: &RunOptions, out: &mut RecipeOutcome) -> Result<Vec<CheckResult>> {
    let mut checks = Checks::new(&recipe.checks, &["min_trained_closer"])?;
    let mut cfg: ContextExperiment = params(&recipe.params)?;
    if let Some(s) = &opts.seeds {
        cfg.seeds = s.clone();
    }
    let rows = experiments::context_experiment(&cfg)?;
    let table: Vec<ContextCsv> = rows
        .iter()
        .map(|r| ContextCsv {
            seed: r.seed,
            ground_truth: r.trained.ground_truth,
            trained_parse_length: r.trained.parse_length,
            untrained_parse_length: r.untrained.parse_length,
            trained_filtered: r.trained.metrics.filtered_size,
            untrained_filtered: r.untrained.metrics.filtered_size,
            trained_closer: r.trained_closer(),
        })
        .collect();
    out.bundle.add_table("context", &Table::from_records(&table)?)?;
    let closer = rows.iter().filter(|r| r.trained_closer()).count();
    checks.at_least("min_trained_closer", closer as f64)?;
    Ok(checks.out)
}

#[derive(Serialize)]
struct PlantedRow {
    seed: u64,
    recovered: f64,
    support_size: usize,
    tol: f64,
    delta: f64,
    train_tpr: f64,
    train_fpr: f64,
    test_tpr: f64,
    test_fpr: f64,
}

fn run_planted(recipe: &Recipe, opts: &RunOptions, out: &mut RecipeOutcome) -> Result<Vec<CheckResult>> {
    let mut checks = Checks::new(&recipe.checks, &["min_recovered", "min_tpr", "max_fpr"])?;
    let base: PlantedPa = params(&recipe.params)?;
    let mut rows = Vec::new();
    for seed in seeds_or(opts, base.seed) {
        let r = experiments::planted_pa_experiment(&PlantedPa { seed, ..base.clone() })?;
        out.artifacts.insert(format!("chunk_seed{seed}.json"), json(&r.chunk)?);
        rows.push(PlantedRow {
            seed,
            recovered: r.recovered,
            support_size: r.chunk.support.len(),
            tol: r.chunk.tol,
            delta: r.chunk.delta,
            train_tpr: r.train.tpr(),
            train_fpr: r.train.fpr(),
            test_tpr: r.test.tpr(),
            test_fpr: r.test.fpr(),
        });
    }
    out.bundle.add_table("pa_synthetic", &Table::from_records(&rows)?)?;
    let min = |f: fn(&PlantedRow) -> f64| rows.iter().map(f).fold(f64::INFINITY, f64::min);
    let max = |f: fn(&PlantedRow) -> f64| rows.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    checks.at_least("min_recovered", min(|r| r.recovered))?;
    checks.at_least("min_tpr", min(|r| r.test_tpr))?;
    checks.at_most("max_fpr", max(|r| r.test_fpr))?;
    Ok(checks.out)
}

#[derive(Serialize)]
struct UcdRow {
    seed: u64,
    agreement: f64,
    initial_loss: f64,
    final_loss: f64,
    reinitialized: usize,
}

fn run_ucd(recipe: &Recipe, opts: &RunOptions, out: &mut RecipeOutcome) -> Result<Vec<CheckResult>> {
    let mut checks = Checks::new(&recipe.checks, &["min_agreement", "max_final_loss", "loss_decreases"])?;
    let base: UcdSynthetic = params(&recipe.params)?;
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for seed in seeds_or(opts, base.ucd.seed) {
        let mut cfg = base.clone();
        cfg.ucd.seed = seed;
        let r = experiments::ucd_synthetic_experiment(&cfg)?;
        let mut curve = vec![r.log.initial_loss];
        curve.extend(&r.log.epoch_loss);
        curves.push((format!("seed {seed}"), curve));
        rows.push(UcdRow {
            seed,
            agreement: r.agreement,
            initial_loss: r.log.initial_loss,
            final_loss: r.log.final_loss(),
            reinitialized: r.log.reinitialized.len(),
        });
    }
    out.bundle.add_table("ucd_synthetic", &Table::from_records(&rows)?)?;
    out.bundle.add_figure("ucd_loss", report::plot_curves("UCD loss by epoch", &curves)?);
    let worst_agreement = rows.iter().map(|r| r.agreement).fold(f64::INFINITY, f64::min);
    let worst_loss = rows.iter().map(|r| r.final_loss).fold(f64::NEG_INFINITY, f64::max);
    checks.at_least("min_agreement", worst_agreement)?;
    checks.at_most("max_final_loss", worst_loss)?;
    let decreasing = rows.iter().filter(|r| r.final_loss < r.initial_loss).count();
    checks.holds(
        "loss_decreases",
        decreasing == rows.len(),
        format!("final below initial loss on {decreasing} of {} seeds", rows.len()),
    )?;
    Ok(checks.out)
}
