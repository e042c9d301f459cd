//! Population averaging.
//!
//! A concept chunk is the mean activity of a neuron subset at the concept's
//! occurrences, plus the largest mean-squared deviation seen in training. A
//! state belongs to the chunk iff its deviation on the subset is within that
//! radius. The subset is chosen by sweeping a per-neuron tolerance.

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{annotate_occurrences, shift_annotation, ActivationTrace, ConceptAnnotation};

pub const TOLERANCE_STEPS: usize = 40;

/// `2 * 0.8^i` for `i = 0..40`, loosest first.
pub fn tolerance_schedule() -> Vec<f64> {
    (0..TOLERANCE_STEPS as i32).map(|i| 2.0 * 0.8f64.powi(i)).collect()
}

/// Any indexable sequence of equal-width activity vectors.
pub trait StateSource {
    fn width(&self) -> usize;
    fn len(&self) -> usize;
    fn vector(&self, i: usize) -> Cow<'_, [f32]>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One layer of a trace.
pub struct LayerView<'a> {
    pub trace: &'a ActivationTrace,
    pub layer: usize,
}

impl<'a> LayerView<'a> {
    pub fn new(trace: &'a ActivationTrace, layer: usize) -> Result<Self> {
        if layer >= trace.layers {
            return Err(Error::arg(format!(
                "layer {layer} out of range for a {}-layer trace",
                trace.layers
            )));
        }
        Ok(Self { trace, layer })
    }
}

impl StateSource for LayerView<'_> {
    fn width(&self) -> usize {
        self.trace.dim
    }
    fn len(&self) -> usize {
        self.trace.token_count()
    }
    fn vector(&self, i: usize) -> Cow<'_, [f32]> {
        Cow::Borrowed(self.trace.state(self.layer, i))
    }
}

/// Concatenated states of `span` consecutive tokens starting at each index.
pub struct WindowView<'a> {
    pub trace: &'a ActivationTrace,
    pub layer: usize,
    pub span: usize,
}

impl<'a> WindowView<'a> {
    pub fn new(trace: &'a ActivationTrace, layer: usize, span: usize) -> Result<Self> {
        if layer >= trace.layers {
            return Err(Error::arg(format!("layer {layer} out of range")));
        }
        if span == 0 || span > trace.token_count() {
            return Err(Error::arg(format!(
                "window span {span} invalid for {} tokens",
                trace.token_count()
            )));
        }
        Ok(Self { trace, layer, span })
    }
}

impl StateSource for WindowView<'_> {
    fn width(&self) -> usize {
        self.trace.dim * self.span
    }
    fn len(&self) -> usize {
        self.trace.token_count() + 1 - self.span
    }
    fn vector(&self, i: usize) -> Cow<'_, [f32]> {
        let d = self.trace.dim;
        let layer = self.trace.layer(self.layer);
        Cow::Borrowed(&layer[i * d..(i + self.span) * d])
    }
}

/// Plain in-memory rows.
pub struct Rows<'a> {
    pub data: &'a [f32],
    pub width: usize,
}

impl StateSource for Rows<'_> {
    fn width(&self) -> usize {
        self.width
    }
    fn len(&self) -> usize {
        self.data.len() / self.width
    }
    fn vector(&self, i: usize) -> Cow<'_, [f32]> {
        Cow::Borrowed(&self.data[i * self.width..(i + 1) * self.width])
    }
}

/// Divisor of the squared deviation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Full layer width `d`.
    #[default]
    FullWidth,
    /// Support size `|C(s)|`.
    Support,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationChunk {
    pub concept: String,
    pub layer: usize,
    pub shift: i64,
    pub support: Vec<usize>,
    pub prototype: Vec<f32>,
    pub delta: f64,
    pub tol: f64,
    pub d: usize,
    #[serde(default, skip_serializing_if = "is_full_width")]
    pub normalization: Normalization,
}

fn is_full_width(n: &Normalization) -> bool {
    *n == Normalization::FullWidth
}

impl PopulationChunk {
    pub fn validate(&self) -> Result<()> {
        if self.support.iter().any(|&i| i >= self.d) {
            return Err(Error::validation("support", "index outside [0, d)"));
        }
        if !self.support.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::validation("support", "must be sorted and unique"));
        }
        if self.prototype.len() != self.support.len() {
            return Err(Error::validation("prototype", "length differs from support"));
        }
        if self.delta.is_nan() || self.delta < 0.0 {
            return Err(Error::validation("delta", "must be non-negative"));
        }
        Ok(())
    }

    /// Squared deviation of `h` from the prototype on the support.
    pub fn deviation(&self, h: &[f32]) -> Result<f64> {
        if h.len() != self.d {
            return Err(Error::arg(format!(
                "state has width {}, chunk expects {}",
                h.len(),
                self.d
            )));
        }
        Ok(deviation(h, &self.support, &self.prototype, self.divisor()))
    }

    fn divisor(&self) -> f64 {
        match self.normalization {
            Normalization::FullWidth => self.d as f64,
            Normalization::Support => self.support.len().max(1) as f64,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let chunk: Self = serde_json::from_slice(&bytes)?;
        chunk.validate()?;
        Ok(chunk)
    }
}

fn deviation(h: &[f32], support: &[usize], prototype: &[f32], divisor: f64) -> f64 {
    support
        .iter()
        .zip(prototype)
        .map(|(&i, &p)| {
            let diff = h[i] as f64 - p as f64;
            diff * diff
        })
        .sum::<f64>()
        / divisor
}

/// Membership test: deviation within `delta`, inclusive. A chunk with an
/// empty support never fires.
pub fn detect(chunk: &PopulationChunk, h: &[f32]) -> Result<bool> {
    if chunk.support.is_empty() {
        if h.len() != chunk.d {
            return Err(Error::arg("state width differs from chunk width"));
        }
        return Ok(false);
    }
    Ok(chunk.deviation(h)? <= chunk.delta)
}

fn check_indices(src: &dyn StateSource, v: &[usize]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::arg("occurrence set is empty"));
    }
    if let Some(&bad) = v.iter().find(|&&i| i >= src.len()) {
        return Err(Error::arg(format!(
            "occurrence index {bad} outside [0, {})",
            src.len()
        )));
    }
    Ok(())
}

/// Arithmetic mean of the vectors at `v`.
pub fn mean_response(src: &dyn StateSource, v: &[usize]) -> Result<Vec<f64>> {
    check_indices(src, v)?;
    let mut sum = vec![0.0; src.width()];
    for &j in v {
        for (s, &x) in sum.iter_mut().zip(src.vector(j).iter()) {
            *s += x as f64;
        }
    }
    let n = v.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Neurons whose activity at every occurrence stays within `tol` of their mean.
pub fn support_set(src: &dyn StateSource, v: &[usize], tol: f64) -> Result<Vec<usize>> {
    let mean = mean_response(src, v)?;
    Ok(support_from_mean(src, v, &mean, tol))
}

fn support_from_mean(src: &dyn StateSource, v: &[usize], mean: &[f64], tol: f64) -> Vec<usize> {
    let spread = max_abs_spread(src, v, mean);
    (0..mean.len()).filter(|&i| spread[i] <= tol).collect()
}

/// Per-neuron `max_j |h_ij - mean_i|`.
fn max_abs_spread(src: &dyn StateSource, v: &[usize], mean: &[f64]) -> Vec<f64> {
    let mut spread = vec![0.0f64; mean.len()];
    for &j in v {
        for (i, &x) in src.vector(j).iter().enumerate() {
            spread[i] = spread[i].max((x as f64 - mean[i]).abs());
        }
    }
    spread
}

/// Largest squared deviation over the occurrences, divided by `divisor`.
pub fn max_deviation(
    src: &dyn StateSource,
    v: &[usize],
    support: &[usize],
    prototype: &[f32],
    divisor: f64,
) -> Result<f64> {
    if support.is_empty() {
        return Err(Error::arg("support set is empty"));
    }
    check_indices(src, v)?;
    Ok(v.iter()
        .map(|&j| deviation(&src.vector(j), support, prototype, divisor))
        .fold(0.0, f64::max))
}

/// Builds the chunk for one tolerance, or `None` when the support is empty.
pub fn chunk_at_tolerance(
    src: &dyn StateSource,
    v: &[usize],
    tol: f64,
    normalization: Normalization,
    meta: &ChunkMeta,
) -> Result<Option<PopulationChunk>> {
    let mean = mean_response(src, v)?;
    Ok(chunk_from_mean(src, v, &mean, tol, normalization, meta))
}

fn chunk_from_mean(
    src: &dyn StateSource,
    v: &[usize],
    mean: &[f64],
    tol: f64,
    normalization: Normalization,
    meta: &ChunkMeta,
) -> Option<PopulationChunk> {
    let support = support_from_mean(src, v, mean, tol);
    if support.is_empty() {
        return None;
    }
    // Delta is measured against the stored f32 prototype so the membership
    // test reproduces it exactly on every training occurrence.
    let prototype: Vec<f32> = support.iter().map(|&i| mean[i] as f32).collect();
    let mut chunk = PopulationChunk {
        concept: meta.concept.clone(),
        layer: meta.layer,
        shift: meta.shift,
        support,
        prototype,
        delta: 0.0,
        tol,
        d: src.width(),
        normalization,
    };
    let divisor = chunk.divisor();
    chunk.delta = v
        .iter()
        .map(|&j| deviation(&src.vector(j), &chunk.support, &chunk.prototype, divisor))
        .fold(0.0, f64::max);
    Some(chunk)
}

#[derive(Debug, Clone, Default)]
pub struct ChunkMeta {
    pub concept: String,
    pub layer: usize,
    pub shift: i64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn tpr(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }
    pub fn youden(&self) -> f64 {
        self.tpr() - self.fpr()
    }
    pub fn detections(&self) -> usize {
        self.tp + self.fp
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Runs `detect` at every position: occurrences are positives, all other
/// positions negatives.
pub fn evaluate(chunk: &PopulationChunk, src: &dyn StateSource, positives: &[usize]) -> Result<Confusion> {
    if src.width() != chunk.d {
        return Err(Error::arg(format!(
            "source width {} differs from chunk width {}",
            src.width(),
            chunk.d
        )));
    }
    let mut is_pos = vec![false; src.len()];
    for &p in positives {
        if p < is_pos.len() {
            is_pos[p] = true;
        }
    }
    let mut c = Confusion::default();
    for (t, &pos) in is_pos.iter().enumerate() {
        let hit = detect(chunk, &src.vector(t))?;
        match (pos, hit) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// One evaluated tolerance of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tol: f64,
    pub support_size: usize,
    pub delta: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub chunk: PopulationChunk,
    pub train: Confusion,
    pub sweep: Vec<SweepPoint>,
}

/// Sweeps the tolerance schedule on the training source and keeps the chunk
/// with the highest `TPR - FPR`; ties go to the smaller tolerance. Empty
/// supports make a tolerance infeasible.
pub fn fit_tolerance(
    src: &dyn StateSource,
    v: &[usize],
    meta: &ChunkMeta,
    normalization: Normalization,
) -> Result<FitResult> {
    if v.len() < 2 {
        return Err(Error::arg(format!(
            "concept '{}' needs at least 2 training occurrences, found {}",
            meta.concept,
            v.len()
        )));
    }
    let mean = mean_response(src, v)?;
    let mut best: Option<(PopulationChunk, Confusion)> = None;
    let mut sweep = Vec::new();
    for tol in tolerance_schedule() {
        let Some(chunk) = chunk_from_mean(src, v, &mean, tol, normalization, meta) else {
            continue;
        };
        let conf = evaluate(&chunk, src, v)?;
        sweep.push(SweepPoint {
            tol,
            support_size: chunk.support.len(),
            delta: chunk.delta,
            tpr: conf.tpr(),
            fpr: conf.fpr(),
        });
        // Later tolerances are smaller, so `>=` prefers the stringent one on ties.
        if best.as_ref().is_none_or(|(_, b)| conf.youden() >= b.youden()) {
            best = Some((chunk, conf));
        }
    }
    let (chunk, train) = best.ok_or_else(|| {
        Error::arg(format!(
            "support of '{}' is empty at every tolerance",
            meta.concept
        ))
    })?;
    Ok(FitResult { chunk, train, sweep })
}

/// Occurrences of `concept` in a trace: a stored annotation when present,
/// otherwise matched on the token text.
pub fn occurrences(trace: &ActivationTrace, concept: &str) -> Result<ConceptAnnotation> {
    match trace.annotations.iter().find(|a| a.concept == concept && a.shift == 0) {
        Some(a) => Ok(a.clone()),
        None => annotate_occurrences(&trace.tokens, concept),
    }
}

/// Fits one chunk for `(concept, layer, shift)` on a trace.
pub fn fit_concept(
    trace: &ActivationTrace,
    concept: &str,
    layer: usize,
    shift: i64,
    normalization: Normalization,
) -> Result<FitResult> {
    let view = LayerView::new(trace, layer)?;
    let v = shift_annotation(&occurrences(trace, concept)?, shift, trace.token_count());
    let meta = ChunkMeta {
        concept: concept.to_string(),
        layer,
        shift,
    };
    fit_tolerance(&view, &v.indices, &meta, normalization)
}

pub fn evaluate_concept(chunk: &PopulationChunk, test: &ActivationTrace) -> Result<Confusion> {
    let view = LayerView::new(test, chunk.layer)?;
    let v = shift_annotation(&occurrences(test, &chunk.concept)?, chunk.shift, test.token_count());
    evaluate(chunk, &view, &v.indices)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub concept: String,
    pub layer: usize,
    pub shift: i64,
    pub tol: f64,
    pub support_size: usize,
    pub delta: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Fits on `train` and evaluates on `test` for every layer and shift.
/// Combinations that cannot be fitted are skipped with a warning.
pub fn layer_sweep(
    train: &ActivationTrace,
    test: &ActivationTrace,
    concept: &str,
    shifts: &[i64],
) -> Result<(Vec<LayerStat>, Vec<PopulationChunk>)> {
    if train.layers != test.layers || train.dim != test.dim {
        return Err(Error::arg(format!(
            "train (L={}, d={}) and test (L={}, d={}) shapes differ",
            train.layers, train.dim, test.layers, test.dim
        )));
    }
    let mut rows = Vec::new();
    let mut chunks = Vec::new();
    for layer in 0..train.layers {
        for &shift in shifts {
            let fit = match fit_concept(train, concept, layer, shift, Normalization::FullWidth) {
                Ok(f) => f,
                Err(e) => {
                    log::warn!("skipping '{concept}' layer {layer} shift {shift}: {e}");
                    continue;
                }
            };
            let conf = evaluate_concept(&fit.chunk, test)?;
            rows.push(LayerStat {
                concept: concept.to_string(),
                layer,
                shift,
                tol: fit.chunk.tol,
                support_size: fit.chunk.support.len(),
                delta: fit.chunk.delta,
                tpr: conf.tpr(),
                fpr: conf.fpr(),
            });
            chunks.push(fit.chunk);
        }
    }
    Ok((rows, chunks))
}

/// Window-template deviation: the template is the mean `span`-window of
/// `train` over `starts`; every window of `eval` gets its squared distance to
/// the template averaged over the template size.
pub fn template_deviation(
    train: &ActivationTrace,
    starts: &[usize],
    eval: &ActivationTrace,
    layer: usize,
    span: usize,
) -> Result<Vec<f64>> {
    let template = mean_response(&WindowView::new(train, layer, span)?, starts)?;
    let view = WindowView::new(eval, layer, span)?;
    if view.width() != template.len() {
        return Err(Error::arg("train and eval traces differ in width"));
    }
    let size = template.len() as f64;
    Ok((0..view.len())
        .map(|i| {
            view.vector(i)
                .iter()
                .zip(&template)
                .map(|(&x, &t)| (x as f64 - t).powi(2))
                .sum::<f64>()
                / size
        })
        .collect())
}
