//! Unsupervised chunk discovery.
//!
//! A dictionary of `K` unit-norm rows is fitted so that every embedding has
//! a row with high cosine similarity. Each embedding is then labelled with
//! its best-matching row.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{parse_container, read_container, write_container, ActivationTrace};

pub const UCD_MAGIC: [u8; 4] = *b"UCDD";

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k x dim`, each row unit norm.
    pub rows: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct DictHeader {
    k: usize,
    dim: usize,
}

impl Dictionary {
    pub fn new(k: usize, dim: usize, mut rows: Vec<f32>) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::validation("dictionary", "K and d must be positive"));
        }
        if rows.len() != k * dim {
            return Err(Error::validation("rows", format!("expected {} values, got {}", k * dim, rows.len())));
        }
        for row in rows.chunks_mut(dim) {
            if !normalize(row) {
                return Err(Error::validation("rows", "zero-norm row"));
            }
        }
        Ok(Self { k, dim, rows })
    }

    /// Rows read back from disk are kept bit-for-bit; they must already be
    /// unit norm.
    fn stored(k: usize, dim: usize, rows: Vec<f32>) -> Result<Self> {
        if k == 0 || dim == 0 || rows.len() != k * dim {
            return Err(Error::Format(format!("dictionary shape {k} x {dim} does not match {} values", rows.len())));
        }
        for (i, row) in rows.chunks(dim).enumerate() {
            let n = dot(row, row).sqrt();
            if (n - 1.0).abs() > 1e-4 || n.is_nan() {
                return Err(Error::Format(format!("row {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self { k, dim, rows })
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.rows[k * self.dim..(k + 1) * self.dim]
    }

    /// Cosine similarity of `x` to every row.
    pub fn similarities(&self, x: &[f32]) -> Vec<f32> {
        let inv = inv_norm(x);
        self.rows.chunks(self.dim).map(|r| dot(r, x) * inv).collect()
    }

    /// Best row and its similarity; ties go to the lower index.
    pub fn best(&self, x: &[f32]) -> (usize, f32) {
        let inv = inv_norm(x);
        let mut best = (0, f32::NEG_INFINITY);
        for (k, r) in self.rows.chunks(self.dim).enumerate() {
            let s = dot(r, x) * inv;
            if s > best.1 {
                best = (k, s);
            }
        }
        best
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_container(path.as_ref(), UCD_MAGIC, &DictHeader { k: self.k, dim: self.dim }, &self.rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (h, rows) = read_container(path.as_ref(), UCD_MAGIC, |h: &DictHeader| Ok(h.k * h.dim))?;
        Self::stored(h.k, h.dim, rows)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (h, rows) = parse_container(bytes, UCD_MAGIC, |h: &DictHeader| Ok(h.k * h.dim))?;
        Self::stored(h.k, h.dim, rows)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inv_norm(x: &[f32]) -> f32 {
    let n = dot(x, x).sqrt();
    if n > 0.0 {
        1.0 / n
    } else {
        0.0
    }
}

fn normalize(x: &mut [f32]) -> bool {
    let n = dot(x, x).sqrt();
    if n <= 0.0 || !n.is_finite() {
        return false;
    }
    x.iter_mut().for_each(|v| *v /= n);
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UcdConfig {
    pub k: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for UcdConfig {
    fn default() -> Self {
        Self {
            k: 16,
            lr: 1e-3,
            batch: 32,
            epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UcdTrainLog {
    pub initial_loss: f64,
    /// Full-data loss after each epoch.
    pub epoch_loss: Vec<f64>,
    pub reinitialized: Vec<usize>,
}

impl UcdTrainLog {
    pub fn final_loss(&self) -> f64 {
        self.epoch_loss.last().copied().unwrap_or(self.initial_loss)
    }
}

/// `-mean_m max_k cos(D_k, x_m)`.
pub fn loss(dict: &Dictionary, data: &[f32]) -> f64 {
    let (_, sims) = assign_with_similarity(dict, data);
    if sims.is_empty() {
        return 0.0;
    }
    -sims.iter().map(|&s| s as f64).sum::<f64>() / sims.len() as f64
}

fn check_data(data: &[f32], dim: usize) -> Result<usize> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::arg(format!(
            "embedding buffer of {} values is not a multiple of d = {dim}",
            data.len()
        )));
    }
    let m = data.len() / dim;
    if m == 0 {
        return Err(Error::arg("no embeddings"));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("embeddings contain non-finite values".into()));
    }
    Ok(m)
}

/// Seeds rows from the data, spreading them by sampling each next row with
/// probability proportional to `1 - max cos` against rows already chosen.
fn init_rows(data: &[f32], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f32> {
    let m = data.len() / dim;
    let mut rows = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..m);
    rows.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    let mut best = vec![f32::NEG_INFINITY; m];
    for _ in 1..k {
        let last = &rows[rows.len() - dim..];
        let inv_last = inv_norm(last);
        best.par_iter_mut().enumerate().for_each(|(j, b)| {
            let x = &data[j * dim..(j + 1) * dim];
            *b = b.max(dot(x, last) * inv_last * inv_norm(x));
        });
        let weights: Vec<f64> = best.iter().map(|&b| (1.0 - b as f64).max(0.0)).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            weights
                .iter()
                .position(|&w| {
                    u -= w;
                    u < 0.0
                })
                .unwrap_or(m - 1)
        } else {
            rng.random_range(0..m)
        };
        rows.extend_from_slice(&data[pick * dim..(pick + 1) * dim]);
    }
    for row in rows.chunks_mut(dim) {
        if !normalize(row) {
            for v in row.iter_mut() {
                *v = rng.random::<f32>() - 0.5;
            }
            normalize(row);
        }
    }
    rows
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f32], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            let update = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
            params[i] -= update as f32;
        }
    }
}

/// Fits a dictionary with minibatch Adam. Only the best-matching row of each
/// embedding receives gradient; rows are renormalized after every update and
/// rows unused during an epoch are moved onto the worst-explained embeddings.
pub fn train_ucd(data: &[f32], dim: usize, cfg: &UcdConfig) -> Result<(Dictionary, UcdTrainLog)> {
    let m = check_data(data, dim)?;
    if cfg.k == 0 || cfg.batch == 0 {
        return Err(Error::arg("K and batch size must be positive"));
    }
    let mut rng = crate::seeded_rng(cfg.seed);
    let mut dict = Dictionary::new(cfg.k, dim, init_rows(data, dim, cfg.k, &mut rng))?;
    let mut log = UcdTrainLog {
        initial_loss: loss(&dict, data),
        epoch_loss: Vec::with_capacity(cfg.epochs),
        reinitialized: Vec::new(),
    };
    let mut adam = Adam::new(cfg.k * dim);
    let mut order: Vec<usize> = (0..m).collect();
    let mut grad = vec![0.0f64; cfg.k * dim];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut usage = vec![0usize; cfg.k];
        for batch in order.chunks(cfg.batch) {
            let best: Vec<(usize, f32)> = batch
                .par_iter()
                .map(|&j| dict.best(&data[j * dim..(j + 1) * dim]))
                .collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for (&j, &(k, s)) in batch.iter().zip(&best) {
                usage[k] += 1;
                let x = &data[j * dim..(j + 1) * dim];
                let inv = inv_norm(x) as f64;
                let row = dict.row(k);
                // d(-cos)/dD_k for a unit-norm row.
                for i in 0..dim {
                    grad[k * dim + i] -= scale * (x[i] as f64 * inv - s as f64 * row[i] as f64);
                }
            }
            adam.step(&mut dict.rows, &grad, cfg.lr);
            for row in dict.rows.chunks_mut(dim) {
                if !normalize(row) {
                    return Err(Error::Numerical(format!("dictionary row collapsed in epoch {epoch}")));
                }
            }
        }
        let dead: Vec<usize> = (0..cfg.k).filter(|&k| usage[k] == 0).collect();
        if !dead.is_empty() {
            let (_, sims) = assign_with_similarity(&dict, data);
            let mut worst: Vec<usize> = (0..m).collect();
            worst.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
            for (&k, &j) in dead.iter().zip(&worst) {
                let row = &mut dict.rows[k * dim..(k + 1) * dim];
                row.copy_from_slice(&data[j * dim..(j + 1) * dim]);
                if !normalize(row) {
                    return Err(Error::Numerical("cannot reinitialize from a zero embedding".into()));
                }
                adam.m[k * dim..(k + 1) * dim].iter_mut().for_each(|v| *v = 0.0);
                adam.v[k * dim..(k + 1) * dim].iter_mut().for_each(|v| *v = 0.0);
            }
            log.reinitialized.push(dead.len());
        } else {
            log.reinitialized.push(0);
        }
        let l = loss(&dict, data);
        log::debug!("ucd epoch {epoch}: loss {l:.5}, dead rows {}", dead.len());
        log.epoch_loss.push(l);
    }
    Ok((dict, log))
}

pub fn assign_with_similarity(dict: &Dictionary, data: &[f32]) -> (Vec<usize>, Vec<f32>) {
    data.par_chunks(dict.dim).map(|x| dict.best(x)).unzip()
}

/// Best-matching row per embedding.
pub fn assign_chunks(dict: &Dictionary, data: &[f32]) -> Result<Vec<usize>> {
    check_data(data, dict.dim)?;
    Ok(assign_with_similarity(dict, data).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self {
            lo,
            hi,
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, x: f64) {
        let bins = self.counts.len();
        let f = ((x - self.lo) / (self.hi - self.lo) * bins as f64).floor();
        let i = (f.max(0.0) as usize).min(bins - 1);
        self.counts[i] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UcdDiagnostics {
    pub max_similarity: Histogram,
    pub all_similarity: Histogram,
    pub usage: Vec<usize>,
    /// Shannon entropy of the usage distribution, in nats.
    pub usage_entropy: f64,
    /// Hoyer sparsity of every row, in `[0, 1]`.
    pub row_sparsity: Vec<f64>,
}

pub const DIAGNOSTIC_BINS: usize = 40;

pub fn diagnostics(dict: &Dictionary, data: &[f32]) -> Result<UcdDiagnostics> {
    check_data(data, dict.dim)?;
    let (labels, best) = assign_with_similarity(dict, data);
    let mut max_similarity = Histogram::new(-1.0, 1.0, DIAGNOSTIC_BINS);
    best.iter().for_each(|&s| max_similarity.add(s as f64));
    let all_similarity = data
        .par_chunks(dict.dim)
        .fold(
            || Histogram::new(-1.0, 1.0, DIAGNOSTIC_BINS),
            |mut h, x| {
                dict.similarities(x).into_iter().for_each(|s| h.add(s as f64));
                h
            },
        )
        .reduce(
            || Histogram::new(-1.0, 1.0, DIAGNOSTIC_BINS),
            |mut a, b| {
                a.counts.iter_mut().zip(b.counts).for_each(|(x, y)| *x += y);
                a
            },
        );
    let mut usage = vec![0usize; dict.k];
    labels.iter().for_each(|&k| usage[k] += 1);
    let n = labels.len() as f64;
    let usage_entropy = -usage
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>();
    let row_sparsity = (0..dict.k).map(|k| hoyer(dict.row(k))).collect();
    Ok(UcdDiagnostics {
        max_similarity,
        all_similarity,
        usage,
        usage_entropy,
        row_sparsity,
    })
}

/// `(sqrt(d) - |x|_1 / |x|_2) / (sqrt(d) - 1)`; 0 for a flat vector, 1 for a one-hot.
pub fn hoyer(x: &[f32]) -> f64 {
    let d = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let l1: f64 = x.iter().map(|v| v.abs() as f64).sum();
    let l2: f64 = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    if l2 == 0.0 {
        return 0.0;
    }
    ((d.sqrt() - l1 / l2) / (d.sqrt() - 1.0)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelCorrelation {
    pub chunk: usize,
    pub label: String,
    pub r: f64,
    /// Set when either indicator is constant and `r` is reported as 0.
    pub degenerate: bool,
}

/// Pearson correlation between "assigned to chunk k" and each binary label.
pub fn correlate_with_labels(
    assignments: &[usize],
    k: usize,
    labels: &[(String, Vec<bool>)],
) -> Result<Vec<LabelCorrelation>> {
    let mut out = Vec::with_capacity(k * labels.len());
    for (name, y) in labels {
        if y.len() != assignments.len() {
            return Err(Error::arg(format!(
                "label '{name}' has {} entries for {} assignments",
                y.len(),
                assignments.len()
            )));
        }
        for chunk in 0..k {
            let x: Vec<bool> = assignments.iter().map(|&a| a == chunk).collect();
            let (r, degenerate) = match pearson_binary(&x, y) {
                Some(r) => (r, false),
                None => (0.0, true),
            };
            out.push(LabelCorrelation {
                chunk,
                label: name.clone(),
                r,
                degenerate,
            });
        }
    }
    Ok(out)
}

fn pearson_binary(x: &[bool], y: &[bool]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().filter(|&&b| b).count() as f64 / n;
    let my = y.iter().filter(|&&b| b).count() as f64 / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let dx = a as u8 as f64 - mx;
        let dy = b as u8 as f64 - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Chunk id of every `(layer, token)` state; rows are layers.
pub fn chunk_raster(dict: &Dictionary, trace: &ActivationTrace) -> Result<Vec<Vec<usize>>> {
    if trace.dim != dict.dim {
        return Err(Error::arg(format!(
            "trace width {} differs from dictionary width {}",
            trace.dim, dict.dim
        )));
    }
    (0..trace.layers).map(|l| assign_chunks(dict, trace.layer(l))).collect()
}

/// Cohen's kappa after mapping every found chunk to its majority true label.
pub fn majority_kappa(found: &[usize], truth: &[usize]) -> f64 {
    let kf = found.iter().max().map_or(0, |&m| m + 1);
    let kt = truth.iter().max().map_or(0, |&m| m + 1);
    let mut table = vec![vec![0usize; kt]; kf];
    for (&f, &t) in found.iter().zip(truth) {
        table[f][t] += 1;
    }
    let map: Vec<usize> = table
        .iter()
        .map(|row| (0..kt).max_by_key(|&t| (row[t], std::cmp::Reverse(t))).unwrap_or(0))
        .collect();
    let mapped: Vec<usize> = found.iter().map(|&f| map[f]).collect();
    cohen_kappa(&mapped, truth, kt)
}

pub fn cohen_kappa(a: &[usize], b: &[usize], classes: usize) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let observed = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let mut ca = vec![0.0; classes];
    let mut cb = vec![0.0; classes];
    a.iter().for_each(|&x| ca[x] += 1.0);
    b.iter().for_each(|&x| cb[x] += 1.0);
    let expected: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum::<f64>() / (n * n);
    if expected >= 1.0 {
        return if observed >= 1.0 { 1.0 } else { 0.0 };
    }
    (observed - expected) / (1.0 - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_normalized_and_validated() {
        let d = Dictionary::new(2, 2, vec![3.0, 4.0, 0.0, 2.0]).unwrap();
        assert_eq!(d.row(0), &[0.6, 0.8]);
        assert!(Dictionary::new(1, 2, vec![0.0, 0.0]).is_err());
        assert!(Dictionary::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn best_row_ties_to_lower_index() {
        let d = Dictionary::new(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(d.best(&[2.0, 0.0]), (0, 1.0));
        assert_eq!(d.best(&[0.0, -1.0]).0, 0);
    }

    #[test]
    fn loss_is_minus_mean_max_cosine() {
        let d = Dictionary::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let data = [1.0, 0.0, 1.0, 1.0];
        let expected = -(1.0 + std::f64::consts::FRAC_1_SQRT_2) / 2.0;
        assert!((loss(&d, &data) - expected).abs() < 1e-6);
    }

    #[test]
    fn hoyer_extremes() {
        assert_eq!(hoyer(&[0.0, 0.0, 5.0, 0.0]), 1.0);
        assert!(hoyer(&[1.0, 1.0, 1.0, 1.0]).abs() < 1e-12);
    }

    #[test]
    fn histogram_edges() {
        let mut h = Histogram::new(-1.0, 1.0, 4);
        for x in [-1.0, -0.5, 0.0, 0.99, 1.0] {
            h.add(x);
        }
        assert_eq!(h.counts, vec![1, 1, 1, 2]);
    }

    #[test]
    fn correlation_values() {
        let assign = [0, 0, 1, 1];
        let labels = vec![
            ("a".to_string(), vec![true, true, false, false]),
            ("flat".to_string(), vec![true; 4]),
        ];
        let r = correlate_with_labels(&assign, 3, &labels).unwrap();
        assert!((r[0].r - 1.0).abs() < 1e-12);
        assert!((r[1].r + 1.0).abs() < 1e-12);
        // Chunk 2 is never used: constant indicator.
        assert!(r[2].degenerate && r[2].r == 0.0);
        assert!(r[3..].iter().all(|c| c.degenerate && c.r == 0.0));
        assert!(correlate_with_labels(&assign, 2, &[("x".into(), vec![true])]).is_err());
    }

    #[test]
    fn kappa_is_label_permutation_invariant() {
        let truth = [0, 0, 1, 1, 2, 2];
        assert_eq!(majority_kappa(&[5, 5, 3, 3, 0, 0], &truth), 1.0);
        assert_eq!(cohen_kappa(&[0, 1, 0, 1], &[0, 1, 0, 1], 2), 1.0);
        assert!(cohen_kappa(&[0, 0, 1, 1], &[0, 1, 0, 1], 2).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_loss() {
        let mut rng = crate::seeded_rng(3);
        let mut data = Vec::new();
        for j in 0..400 {
            let c = j % 4;
            for i in 0..4 {
                data.push(if i == c { 1.0 } else { 0.0 } + rng.random::<f32>() * 0.4 - 0.2);
            }
        }
        let cfg = UcdConfig { k: 4, epochs: 5, ..Default::default() };
        let (dict, log) = train_ucd(&data, 4, &cfg).unwrap();
        assert!(log.final_loss() < log.initial_loss);
        for row in dict.rows.chunks(4) {
            assert!((dot(row, row) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_bad_buffers() {
        let cfg = UcdConfig::default();
        assert!(train_ucd(&[1.0, 2.0, 3.0], 2, &cfg).is_err());
        assert!(train_ucd(&[f32::NAN, 1.0], 2, &cfg).is_err());
    }

    #[test]
    fn dictionary_round_trip() {
        let d = Dictionary::new(2, 3, vec![1.0, 2.0, 2.0, 0.0, -1.0, 0.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ucd");
        d.save(&p).unwrap();
        assert_eq!(Dictionary::load(&p).unwrap(), d);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"UCDD");
        assert!(crate::trace::decode_trace(&bytes).is_err());
    }

    #[test]
    fn raster_shape() {
        let trace = ActivationTrace::new(
            "m",
            2,
            2,
            vec!["a".into(), "b".into(), "c".into()],
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.1, 0.0, 1.0, 0.0, 2.0, 3.0, 0.0],
            vec![],
        )
        .unwrap();
        let d = Dictionary::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(chunk_raster(&d, &trace).unwrap(), vec![vec![0, 1, 0], vec![1, 1, 0]]);
    }
}
