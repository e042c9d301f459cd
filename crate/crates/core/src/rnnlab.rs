//! Minimal recurrent next-symbol predictor, its training loop and
//! hidden-state interventions.
//!
//! ```text
//! h_t = W_ch [x_t; h_{t-1}] + b_h        (optionally tanh)
//! o_t = W_co [x_t; h_t] + b_o
//! y_t = log_softmax(o_t)
//! ```
//!
//! `h_0 = 0`. The input block comes first in both concatenations. Parameters
//! are persisted as `f32`; all arithmetic runs in `f64`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::synth::SymbolSequence;
use crate::trace::ActivationTrace;

pub const DEFAULT_HIDDEN: usize = 12;

/// Row-major matrix as stored in model JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnModel {
    pub alphabet: Vec<char>,
    pub hidden_dim: usize,
    #[serde(default)]
    pub tanh: bool,
    pub w_ch: Matrix,
    pub b_h: Vec<f32>,
    pub w_co: Matrix,
    pub b_o: Vec<f32>,
}

/// Flat `f64` parameter vector: `w_ch | b_h | w_co | b_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub vocab: usize,
    pub hidden: usize,
    pub tanh: bool,
    pub data: Vec<f64>,
}

impl Params {
    pub fn zeros(vocab: usize, hidden: usize, tanh: bool) -> Self {
        let len = hidden * (vocab + hidden) + hidden + vocab * (vocab + hidden) + vocab;
        Self {
            vocab,
            hidden,
            tanh,
            data: vec![0.0; len],
        }
    }

    fn width(&self) -> usize {
        self.vocab + self.hidden
    }

    fn offsets(&self) -> [usize; 4] {
        let w = self.width();
        let b_h = self.hidden * w;
        let w_co = b_h + self.hidden;
        let b_o = w_co + self.vocab * w;
        [0, b_h, w_co, b_o]
    }

    fn w_ch(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[0]..o[1]]
    }
    fn b_h(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[1]..o[2]]
    }
    fn w_co(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[2]..o[3]]
    }
    fn b_o(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[3]..]
    }
}

/// Per-step callbacks used to intervene on a forward pass.
pub trait StepHook {
    /// Substitutes the input symbol index seen at step `t`.
    fn input(&mut self, _t: usize, symbol: usize) -> usize {
        symbol
    }

    /// May overwrite entries of `h` (the freshly computed `h_t`). Returns
    /// the overwritten neuron indices; gradients do not flow through them.
    fn hidden(&mut self, _t: usize, _input: usize, _h: &mut [f64]) -> Vec<usize> {
        Vec::new()
    }
}

pub struct NoHook;
impl StepHook for NoHook {}

/// Overwrites a set of neurons at one step (or every step).
#[derive(Debug, Clone)]
pub struct NeuronOverwrite {
    /// `None` applies at every step.
    pub position: Option<usize>,
    pub support: Vec<usize>,
    pub values: Vec<f64>,
}

impl StepHook for NeuronOverwrite {
    fn hidden(&mut self, t: usize, _input: usize, h: &mut [f64]) -> Vec<usize> {
        if self.position.is_some_and(|p| p != t) {
            return Vec::new();
        }
        for (&i, &v) in self.support.iter().zip(&self.values) {
            h[i] = v;
        }
        self.support.clone()
    }
}

/// Replaces the whole hidden state whenever a trigger symbol is the input.
#[derive(Debug, Clone)]
pub struct TriggerGraft {
    pub trigger: usize,
    pub state: Vec<f64>,
    pub fired: usize,
}

impl StepHook for TriggerGraft {
    fn hidden(&mut self, _t: usize, input: usize, h: &mut [f64]) -> Vec<usize> {
        if input != self.trigger {
            return Vec::new();
        }
        self.fired += 1;
        h.copy_from_slice(&self.state);
        (0..h.len()).collect()
    }
}

/// Rewrites the hidden state with its own value on trigger: the value is
/// unchanged but treated as an external constant.
#[derive(Debug, Clone)]
pub struct SelfGraft {
    pub trigger: usize,
}

impl StepHook for SelfGraft {
    fn hidden(&mut self, _t: usize, input: usize, h: &mut [f64]) -> Vec<usize> {
        if input == self.trigger {
            (0..h.len()).collect()
        } else {
            Vec::new()
        }
    }
}

/// Substitutes the input symbol on trigger, leaving the hidden state alone.
#[derive(Debug, Clone)]
pub struct InputGraft {
    pub trigger: usize,
    pub replacement: usize,
}

impl StepHook for InputGraft {
    fn input(&mut self, _t: usize, symbol: usize) -> usize {
        if symbol == self.trigger {
            self.replacement
        } else {
            symbol
        }
    }
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `n x d` hidden states (post-intervention).
    pub hidden: Vec<Vec<f64>>,
    /// `n x |alphabet|` log-probabilities.
    pub log_probs: Vec<Vec<f64>>,
    // Bookkeeping for backprop.
    inputs: Vec<usize>,
    overwritten: Vec<Vec<usize>>,
}

impl Forward {
    pub fn predictions(&self) -> Vec<usize> {
        self.log_probs.iter().map(|lp| argmax(lp)).collect()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(o: &[f64]) -> Vec<f64> {
    let m = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + o.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    o.iter().map(|x| x - lse).collect()
}

/// Runs the recurrence from `h_0 = 0`.
pub fn unroll(p: &Params, inputs: &[usize], hook: &mut dyn StepHook) -> Forward {
    let (a, d, w) = (p.vocab, p.hidden, p.width());
    let (w_ch, b_h, w_co, b_o) = (p.w_ch(), p.b_h(), p.w_co(), p.b_o());
    let mut prev = vec![0.0; d];
    let mut hidden = Vec::with_capacity(inputs.len());
    let mut log_probs = Vec::with_capacity(inputs.len());
    let mut seen = Vec::with_capacity(inputs.len());
    let mut overwritten = Vec::with_capacity(inputs.len());
    for (t, &raw) in inputs.iter().enumerate() {
        let x = hook.input(t, raw);
        let mut h: Vec<f64> = (0..d)
            .map(|r| {
                let row = &w_ch[r * w..(r + 1) * w];
                let mut acc = b_h[r] + row[x];
                for (j, hv) in prev.iter().enumerate() {
                    acc += row[a + j] * hv;
                }
                if p.tanh {
                    acc.tanh()
                } else {
                    acc
                }
            })
            .collect();
        overwritten.push(hook.hidden(t, x, &mut h));
        let o: Vec<f64> = (0..a)
            .map(|r| {
                let row = &w_co[r * w..(r + 1) * w];
                let mut acc = b_o[r] + row[x];
                for (j, hv) in h.iter().enumerate() {
                    acc += row[a + j] * hv;
                }
                acc
            })
            .collect();
        log_probs.push(log_softmax(&o));
        seen.push(x);
        prev.clone_from(&h);
        hidden.push(h);
    }
    Forward {
        hidden,
        log_probs,
        inputs: seen,
        overwritten,
    }
}

/// Mean next-symbol cross-entropy and its exact gradient (full BPTT).
pub fn loss_and_grad(
    p: &Params,
    inputs: &[usize],
    targets: &[usize],
    hook: &mut dyn StepHook,
) -> (f64, Vec<f64>) {
    assert_eq!(inputs.len(), targets.len());
    let fwd = unroll(p, inputs, hook);
    let n = inputs.len();
    let (a, d, w) = (p.vocab, p.hidden, p.width());
    let off = p.offsets();
    let (w_ch, w_co) = (p.w_ch(), p.w_co());
    let mut grad = vec![0.0; p.data.len()];
    let loss = -fwd
        .log_probs
        .iter()
        .zip(targets)
        .map(|(lp, &y)| lp[y])
        .sum::<f64>()
        / n as f64;

    let scale = 1.0 / n as f64;
    let mut dh_next = vec![0.0; d];
    for t in (0..n).rev() {
        let x = fwd.inputs[t];
        let h = &fwd.hidden[t];
        let mut dout: Vec<f64> = fwd.log_probs[t].iter().map(|lp| lp.exp() * scale).collect();
        dout[targets[t]] -= scale;

        let mut dh = dh_next.clone();
        for (r, &g) in dout.iter().enumerate() {
            let row = off[2] + r * w;
            grad[row + x] += g;
            for j in 0..d {
                grad[row + a + j] += g * h[j];
                dh[j] += g * w_co[r * w + a + j];
            }
            grad[off[3] + r] += g;
        }

        // Overwritten neurons are constants: nothing reaches their pre-activation.
        let mut da = dh;
        for &i in &fwd.overwritten[t] {
            da[i] = 0.0;
        }
        if p.tanh {
            for (g, hv) in da.iter_mut().zip(h) {
                *g *= 1.0 - hv * hv;
            }
        }
        let zero = vec![0.0; d];
        let h_prev = if t == 0 { &zero } else { &fwd.hidden[t - 1] };
        dh_next = vec![0.0; d];
        for (r, &g) in da.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = off[0] + r * w;
            grad[row + x] += g;
            for j in 0..d {
                grad[row + a + j] += g * h_prev[j];
                dh_next[j] += g * w_ch[r * w + a + j];
            }
            grad[off[1] + r] += g;
        }
    }
    (loss, grad)
}

impl RnnModel {
    /// Uniform initialization in `±1/sqrt(fan_in)` for every parameter.
    pub fn init(alphabet: &[char], hidden_dim: usize, seed: u64) -> Result<Self> {
        if alphabet.is_empty() || hidden_dim == 0 {
            return Err(Error::arg("alphabet and hidden_dim must be non-empty"));
        }
        let mut sorted = alphabet.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != alphabet.len() {
            return Err(Error::arg("alphabet has duplicate symbols"));
        }
        let mut rng = seeded_rng(seed);
        let mut p = Params::zeros(alphabet.len(), hidden_dim, false);
        let bound = 1.0 / ((alphabet.len() + hidden_dim) as f64).sqrt();
        for v in p.data.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
        Ok(Self::from_params(alphabet.to_vec(), &p))
    }

    pub fn zeros(alphabet: &[char], hidden_dim: usize) -> Self {
        Self::from_params(
            alphabet.to_vec(),
            &Params::zeros(alphabet.len(), hidden_dim, false),
        )
    }

    pub fn from_params(alphabet: Vec<char>, p: &Params) -> Self {
        let w = p.width();
        let to32 = |s: &[f64]| s.iter().map(|&v| v as f32).collect::<Vec<f32>>();
        Self {
            alphabet,
            hidden_dim: p.hidden,
            tanh: p.tanh,
            w_ch: Matrix {
                rows: p.hidden,
                cols: w,
                data: to32(p.w_ch()),
            },
            b_h: to32(p.b_h()),
            w_co: Matrix {
                rows: p.vocab,
                cols: w,
                data: to32(p.w_co()),
            },
            b_o: to32(p.b_o()),
        }
    }

    pub fn params(&self) -> Params {
        let mut p = Params::zeros(self.alphabet.len(), self.hidden_dim, self.tanh);
        let parts = [
            &self.w_ch.data[..],
            &self.b_h[..],
            &self.w_co.data[..],
            &self.b_o[..],
        ];
        p.data = parts
            .iter()
            .flat_map(|s| s.iter().map(|&v| v as f64))
            .collect();
        p
    }

    pub fn validate(&self) -> Result<()> {
        let (a, d) = (self.alphabet.len(), self.hidden_dim);
        let w = a + d;
        if self.w_ch.rows != d || self.w_ch.cols != w || self.w_ch.data.len() != d * w {
            return Err(Error::validation("w_ch", format!("expected {d}x{w}")));
        }
        if self.w_co.rows != a || self.w_co.cols != w || self.w_co.data.len() != a * w {
            return Err(Error::validation("w_co", format!("expected {a}x{w}")));
        }
        if self.b_h.len() != d {
            return Err(Error::validation("b_h", format!("expected length {d}")));
        }
        if self.b_o.len() != a {
            return Err(Error::validation("b_o", format!("expected length {a}")));
        }
        let all = self
            .w_ch
            .data
            .iter()
            .chain(&self.b_h)
            .chain(&self.w_co.data)
            .chain(&self.b_o);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("parameters", "non-finite value"));
        }
        Ok(())
    }

    pub fn symbol_index(&self, c: char) -> Result<usize> {
        self.alphabet
            .iter()
            .position(|&s| s == c)
            .ok_or_else(|| Error::arg(format!("symbol '{c}' is not in the model alphabet")))
    }

    pub fn encode(&self, symbols: &[char]) -> Result<Vec<usize>> {
        symbols.iter().map(|&c| self.symbol_index(c)).collect()
    }

    pub fn forward_with_states(&self, symbols: &[char]) -> Result<Forward> {
        self.forward_hooked(symbols, &mut NoHook)
    }

    pub fn forward_hooked(&self, symbols: &[char], hook: &mut dyn StepHook) -> Result<Forward> {
        let inputs = self.encode(symbols)?;
        Ok(unroll(&self.params(), &inputs, hook))
    }

    /// Overwrites the full hidden state at step `t` with `replacement` before
    /// the output of step `t` is computed; later steps evolve from it.
    pub fn graft_hidden(&self, symbols: &[char], t: usize, replacement: &[f32]) -> Result<Forward> {
        if t >= symbols.len() {
            return Err(Error::arg(format!(
                "graft position {t} outside sequence of length {}",
                symbols.len()
            )));
        }
        if replacement.len() != self.hidden_dim {
            return Err(Error::arg(format!(
                "replacement has length {}, hidden_dim is {}",
                replacement.len(),
                self.hidden_dim
            )));
        }
        let mut hook = NeuronOverwrite {
            position: Some(t),
            support: (0..self.hidden_dim).collect(),
            values: replacement.iter().map(|&v| v as f64).collect(),
        };
        self.forward_hooked(symbols, &mut hook)
    }

    /// Single-layer trace of the hidden states.
    pub fn export_trace(&self, symbols: &[char]) -> Result<ActivationTrace> {
        let fwd = self.forward_with_states(symbols)?;
        let activations = fwd
            .hidden
            .iter()
            .flat_map(|h| h.iter().map(|&v| v as f32))
            .collect();
        ActivationTrace::new(
            format!("rnn-d{}", self.hidden_dim),
            1,
            self.hidden_dim,
            symbols.iter().map(|c| c.to_string()).collect(),
            activations,
            vec![],
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_slice(&bytes)?;
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub subsequence_length: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            iterations: 160,
            subsequence_length: 200,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(Error::validation("learning_rate", "must be non-negative"));
        }
        if self.subsequence_length == 0 {
            return Err(Error::validation("subsequence_length", "must be >= 1"));
        }
        Ok(())
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Stateful training loop; one `step` per sampled window. The hidden state
/// restarts from zero in every window.
pub struct Trainer {
    pub alphabet: Vec<char>,
    pub params: Params,
    config: TrainConfig,
    adam: Adam,
    rng: rand_chacha::ChaCha8Rng,
    sequence: Vec<usize>,
    pub losses: Vec<f64>,
}

impl Trainer {
    pub fn new(model: &RnnModel, symbols: &[char], config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if symbols.len() <= config.subsequence_length {
            return Err(Error::arg(format!(
                "sequence length {} must exceed subsequence_length {}",
                symbols.len(),
                config.subsequence_length
            )));
        }
        let params = model.params();
        Ok(Self {
            alphabet: model.alphabet.clone(),
            adam: Adam::new(params.data.len()),
            params,
            config: config.clone(),
            rng: seeded_rng(config.seed),
            sequence: model.encode(symbols)?,
            losses: Vec::new(),
        })
    }

    pub fn step(&mut self, hook: &mut dyn StepHook) -> Result<f64> {
        let w = self.config.subsequence_length;
        let start = self.rng.random_range(0..self.sequence.len() - w);
        let inputs = &self.sequence[start..start + w];
        let targets = &self.sequence[start + 1..start + w + 1];
        let (loss, grad) = loss_and_grad(&self.params, inputs, targets, hook);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "loss diverged at iteration {} (loss = {loss})",
                self.losses.len()
            )));
        }
        self.adam
            .update(&mut self.params.data, &grad, &self.config);
        self.losses.push(loss);
        Ok(loss)
    }

    pub fn model(&self) -> RnnModel {
        RnnModel::from_params(self.alphabet.clone(), &self.params)
    }
}

/// Trains `model` on random windows of `symbols`; returns the trained model
/// and the per-iteration mean cross-entropy.
pub fn train(model: &RnnModel, symbols: &[char], config: &TrainConfig) -> Result<(RnnModel, Vec<f64>)> {
    train_hooked(model, symbols, config, &mut NoHook)
}

pub fn train_hooked(
    model: &RnnModel,
    symbols: &[char],
    config: &TrainConfig,
    hook: &mut dyn StepHook,
) -> Result<(RnnModel, Vec<f64>)> {
    let mut trainer = Trainer::new(model, symbols, config)?;
    for _ in 0..config.iterations {
        trainer.step(hook)?;
    }
    let model = trainer.model();
    Ok((model, trainer.losses))
}

/// Next-symbol accuracy of predictions made at steps `0..n-1`.
pub fn next_symbol_accuracy(fwd: &Forward, inputs: &[usize]) -> f64 {
    let preds = fwd.predictions();
    let n = inputs.len().saturating_sub(1);
    if n == 0 {
        return 0.0;
    }
    let hits = (0..n).filter(|&t| preds[t] == inputs[t + 1]).count();
    hits as f64 / n as f64
}

/// Mean hidden state over steps whose previous input is `prev` and whose
/// current input is `cur`.
pub fn context_centroid(fwd: &Forward, symbols: &[char], prev: char, cur: char) -> Option<Vec<f64>> {
    let d = fwd.hidden.first()?.len();
    let mut sum = vec![0.0; d];
    let mut count = 0usize;
    for t in 1..symbols.len() {
        if symbols[t - 1] == prev && symbols[t] == cur {
            for (s, v) in sum.iter_mut().zip(&fwd.hidden[t]) {
                *s += v;
            }
            count += 1;
        }
    }
    (count > 0).then(|| sum.into_iter().map(|s| s / count as f64).collect())
}

/// Union alphabet of sequences, sorted.
pub fn alphabet_of<'a>(seqs: impl IntoIterator<Item = &'a [char]>) -> Vec<char> {
    let mut a: Vec<char> = seqs.into_iter().flatten().copied().collect();
    a.sort_unstable();
    a.dedup();
    a
}

/// How the transfer-phase model is perturbed whenever the trigger is the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferGraft {
    /// Replace the hidden state with the donor context centroid.
    Hidden,
    /// Replace the input symbol with the donor context's current input.
    Input,
    /// Rewrite the hidden state with its own value.
    SelfState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub base_words: Vec<String>,
    pub null: char,
    pub transfer_word: String,
    pub word_prob_mass: f64,
    pub base_length: usize,
    pub transfer_length: usize,
    pub eval_length: usize,
    /// Input symbol at which the graft fires.
    pub trigger: char,
    /// `(previous input, current input)` context whose centroid is grafted.
    pub donor: (char, char),
    pub hidden_dim: usize,
    pub base_train: TrainConfig,
    pub transfer_train: TrainConfig,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            base_words: vec!["ABCD".into(), "GHI".into(), "JKLMN".into()],
            null: 'E',
            transfer_word: "ABCDLMN".into(),
            word_prob_mass: 0.2,
            base_length: 20_000,
            transfer_length: 20_000,
            eval_length: 2_000,
            trigger: 'D',
            donor: ('J', 'K'),
            hidden_dim: DEFAULT_HIDDEN,
            base_train: TrainConfig::default(),
            transfer_train: TrainConfig {
                iterations: 60,
                ..TrainConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferCurves {
    /// Overall next-symbol accuracy on the evaluation sequence per iteration.
    pub control: Vec<f64>,
    pub grafted: Vec<f64>,
    /// Accuracy on the continuation that follows the trigger inside each
    /// transfer word (e.g. `LMN` in `ABCDLMN`).
    pub control_continuation: Vec<f64>,
    pub grafted_continuation: Vec<f64>,
    pub graft_fired: usize,
}

impl TransferCurves {
    pub fn mean(v: &[f64]) -> f64 {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// Prediction steps whose target lies in the continuation after the trigger.
fn continuation_steps(seq: &SymbolSequence, word: &str, trigger: char) -> Vec<usize> {
    let chars: Vec<char> = word.chars().collect();
    let Some(tpos) = chars.iter().position(|&c| c == trigger) else {
        return Vec::new();
    };
    let mut steps = Vec::new();
    for p in seq.parse.iter().filter(|p| p.word == word) {
        for k in tpos..chars.len() - 1 {
            steps.push(p.start + k);
        }
    }
    steps
}

fn accuracy_at(fwd: &Forward, inputs: &[usize], steps: &[usize]) -> f64 {
    if steps.is_empty() {
        return 0.0;
    }
    let preds = fwd.predictions();
    let hits = steps
        .iter()
        .filter(|&&t| t + 1 < inputs.len() && preds[t] == inputs[t + 1])
        .count();
    hits as f64 / steps.len() as f64
}

/// Base-trained model plus the donor centroid, shared by both transfer arms.
pub struct TransferBase {
    pub model: RnnModel,
    pub donor_state: Vec<f64>,
    pub alphabet: Vec<char>,
}

pub fn transfer_base(cfg: &TransferConfig) -> Result<TransferBase> {
    let words: Vec<&str> = cfg.base_words.iter().map(String::as_str).collect();
    let base = crate::synth::gen_vocab_sequence(
        &words,
        cfg.null,
        cfg.word_prob_mass,
        cfg.base_length,
        cfg.seed,
    )?;
    let mut extra: Vec<char> = cfg.transfer_word.chars().collect();
    extra.push(cfg.null);
    let alphabet = alphabet_of([&base.symbols[..], &extra[..]]);
    let init = RnnModel::init(&alphabet, cfg.hidden_dim, cfg.seed.wrapping_add(1))?;
    let train_cfg = TrainConfig {
        seed: cfg.seed.wrapping_add(2),
        ..cfg.base_train.clone()
    };
    let (model, _) = train(&init, &base.symbols, &train_cfg)?;
    let fwd = model.forward_with_states(&base.symbols)?;
    let donor_state = context_centroid(&fwd, &base.symbols, cfg.donor.0, cfg.donor.1)
        .ok_or_else(|| {
            Error::arg(format!(
                "donor context {:?} never occurs in the base sequence",
                cfg.donor
            ))
        })?;
    Ok(TransferBase {
        model,
        donor_state,
        alphabet,
    })
}

/// Trains a control and a perturbed copy of the same base model on the
/// transfer sequence and records both learning curves.
pub fn transfer_experiment(cfg: &TransferConfig, mode: TransferGraft) -> Result<TransferCurves> {
    let base = transfer_base(cfg)?;
    transfer_from_base(cfg, &base, mode)
}

pub fn transfer_from_base(
    cfg: &TransferConfig,
    base: &TransferBase,
    mode: TransferGraft,
) -> Result<TransferCurves> {
    let transfer = crate::synth::gen_vocab_sequence(
        &[cfg.transfer_word.as_str()],
        cfg.null,
        cfg.word_prob_mass,
        cfg.transfer_length,
        cfg.seed.wrapping_add(3),
    )?;
    let eval = crate::synth::gen_vocab_sequence(
        &[cfg.transfer_word.as_str()],
        cfg.null,
        cfg.word_prob_mass,
        cfg.eval_length,
        cfg.seed.wrapping_add(4),
    )?;
    let model = &base.model;
    let trigger = model.symbol_index(cfg.trigger)?;
    let donor_input = model.symbol_index(cfg.donor.1)?;
    let eval_inputs = model.encode(&eval.symbols)?;
    let cont = continuation_steps(&eval, &cfg.transfer_word, cfg.trigger);

    let train_cfg = TrainConfig {
        seed: cfg.seed.wrapping_add(5),
        ..cfg.transfer_train.clone()
    };
    let mut control = Trainer::new(model, &transfer.symbols, &train_cfg)?;
    let mut grafted = Trainer::new(model, &transfer.symbols, &train_cfg)?;

    let mut hook: Box<dyn StepHook> = match mode {
        TransferGraft::Hidden => Box::new(TriggerGraft {
            trigger,
            state: base.donor_state.clone(),
            fired: 0,
        }),
        TransferGraft::Input => Box::new(InputGraft {
            trigger,
            replacement: donor_input,
        }),
        TransferGraft::SelfState => Box::new(SelfGraft { trigger }),
    };

    let mut curves = TransferCurves {
        control: Vec::new(),
        grafted: Vec::new(),
        control_continuation: Vec::new(),
        grafted_continuation: Vec::new(),
        graft_fired: 0,
    };
    for _ in 0..train_cfg.iterations {
        control.step(&mut NoHook)?;
        grafted.step(hook.as_mut())?;

        let fc = unroll(&control.params, &eval_inputs, &mut NoHook);
        let fg = unroll(&grafted.params, &eval_inputs, hook.as_mut());
        curves.control.push(next_symbol_accuracy(&fc, &eval_inputs));
        curves.grafted.push(next_symbol_accuracy(&fg, &eval_inputs));
        curves.control_continuation.push(accuracy_at(&fc, &eval_inputs, &cont));
        curves.grafted_continuation.push(accuracy_at(&fg, &eval_inputs, &cont));
    }
    let fires = transfer.symbols.iter().filter(|&&c| c == cfg.trigger).count();
    curves.graft_fired = fires;
    if fires == 0 {
        log::warn!("trigger '{}' never occurs in the transfer sequence", cfg.trigger);
    }
    Ok(curves)
}

/// Counts of `(previous input, current input)` contexts; handy for checking
/// that a donor context exists before grafting.
pub fn context_counts(symbols: &[char]) -> HashMap<(char, char), usize> {
    let mut counts = HashMap::new();
    for w in symbols.windows(2) {
        *counts.entry((w[0], w[1])).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    const ABC: [char; 3] = ['A', 'B', 'C'];

    #[test]
    fn zero_parameters_give_uniform_output() {
        let model = RnnModel::zeros(&['A', 'B', 'C', 'D', 'E'], 4);
        let fwd = model.forward_with_states(&['A', 'C', 'E']).unwrap();
        for lp in &fwd.log_probs {
            for &v in lp {
                assert!((v + 5f64.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_input_block() {
        let mut model = RnnModel::zeros(&ABC, 3);
        for r in 0..3 {
            model.w_ch.data[r * 6 + r] = 1.0;
        }
        let fwd = model.forward_with_states(&['B']).unwrap();
        assert_eq!(fwd.hidden[0], vec![0.0, 1.0, 0.0]);
    }

    /// Straightforward per-step re-implementation with explicit concatenation.
    fn oracle(model: &RnnModel, symbols: &[char]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let a = model.alphabet.len();
        let d = model.hidden_dim;
        let mut h = vec![0.0f64; d];
        let (mut hs, mut ys) = (vec![], vec![]);
        for &c in symbols {
            let mut z = vec![0.0f64; a + d];
            z[model.alphabet.iter().position(|&s| s == c).unwrap()] = 1.0;
            z[a..].copy_from_slice(&h);
            let h_new: Vec<f64> = (0..d)
                .map(|r| {
                    (0..a + d)
                        .map(|j| model.w_ch.data[r * (a + d) + j] as f64 * z[j])
                        .sum::<f64>()
                        + model.b_h[r] as f64
                })
                .collect();
            z[a..].copy_from_slice(&h_new);
            let o: Vec<f64> = (0..a)
                .map(|r| {
                    (0..a + d)
                        .map(|j| model.w_co.data[r * (a + d) + j] as f64 * z[j])
                        .sum::<f64>()
                        + model.b_o[r] as f64
                })
                .collect();
            let m = o.iter().cloned().fold(f64::MIN, f64::max);
            let z_sum: f64 = o.iter().map(|v| (v - m).exp()).sum();
            ys.push(o.iter().map(|v| v - m - z_sum.ln()).collect());
            hs.push(h_new.clone());
            h = h_new;
        }
        (hs, ys)
    }

    #[test]
    fn matches_step_oracle() {
        let model = RnnModel::init(&['A', 'B', 'C', 'D', 'E'], 6, 11).unwrap();
        let seq: Vec<char> = "ABCDEEABCDEEEEABCD".chars().collect();
        let fwd = model.forward_with_states(&seq).unwrap();
        let (hs, ys) = oracle(&model, &seq);
        for t in 0..seq.len() {
            for (a, b) in fwd.hidden[t].iter().zip(&hs[t]) {
                assert!((a - b).abs() < 1e-6);
            }
            for (a, b) in fwd.log_probs[t].iter().zip(&ys[t]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    fn max_rel_grad_error(p: &Params, inputs: &[usize], targets: &[usize], make: &dyn Fn() -> Box<dyn StepHook>) -> f64 {
        let (_, analytic) = loss_and_grad(p, inputs, targets, make().as_mut());
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for (i, &g) in analytic.iter().enumerate() {
            let mut plus = p.clone();
            plus.data[i] += eps;
            let mut minus = p.clone();
            minus.data[i] -= eps;
            let (lp, _) = loss_and_grad(&plus, inputs, targets, make().as_mut());
            let (lm, _) = loss_and_grad(&minus, inputs, targets, make().as_mut());
            let numeric = (lp - lm) / (2.0 * eps);
            let denom = (g.abs() + numeric.abs()).max(1e-7);
            worst = worst.max((g - numeric).abs() / denom);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = RnnModel::init(&['A', 'B', 'C', 'D'], 5, 3).unwrap();
        let p = model.params();
        let inputs = [0, 1, 2, 3, 0];
        let targets = [1, 2, 3, 0, 1];
        let err = max_rel_grad_error(&p, &inputs, &targets, &|| Box::new(NoHook));
        assert!(err < 1e-4, "max relative error {err}");

        let mut tanh = p.clone();
        tanh.tanh = true;
        let err = max_rel_grad_error(&tanh, &inputs, &targets, &|| Box::new(NoHook));
        assert!(err < 1e-4, "tanh max relative error {err}");

        let err = max_rel_grad_error(&p, &inputs, &targets, &|| {
            Box::new(NeuronOverwrite {
                position: Some(2),
                support: vec![0, 3],
                values: vec![0.5, -0.25],
            })
        });
        assert!(err < 1e-4, "grafted max relative error {err}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let seq = crate::synth::gen_pattern_in_null("ABCD", 'E', 1, 20, 60, 1).unwrap();
        let model = RnnModel::init(&['A', 'B', 'C', 'D', 'E'], 12, 2).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            iterations: 5,
            ..TrainConfig::default()
        };
        let (trained, curve) = train(&model, &seq.symbols, &cfg).unwrap();
        assert_eq!(trained, model);
        assert_eq!(curve.len(), 5);
    }

    #[test]
    fn short_sequence_rejected() {
        let model = RnnModel::init(&ABC, 4, 0).unwrap();
        let seq: Vec<char> = "ABCABC".chars().collect();
        assert!(train(&model, &seq, &TrainConfig::default()).is_err());
    }

    #[test]
    fn unknown_symbol_rejected() {
        let model = RnnModel::init(&ABC, 4, 0).unwrap();
        assert!(model.forward_with_states(&['A', 'Z']).is_err());
    }

    #[test]
    fn graft_locality_and_noop() {
        let model = RnnModel::init(&['A', 'B', 'C', 'D', 'E'], 8, 5).unwrap();
        let seq: Vec<char> = "EEABCDEEABCD".chars().collect();
        let plain = model.forward_with_states(&seq).unwrap();
        let state: Vec<f32> = plain.hidden[6].iter().map(|&v| v as f32).collect();
        let same = model.graft_hidden(&seq, 6, &state).unwrap();
        for t in 0..seq.len() {
            for (a, b) in same.log_probs[t].iter().zip(&plain.log_probs[t]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let other = model.graft_hidden(&seq, 6, &[1.0; 8]).unwrap();
        for t in 0..6 {
            assert_eq!(other.log_probs[t], plain.log_probs[t]);
        }
        assert_ne!(other.log_probs[6], plain.log_probs[6]);
        assert!(model.graft_hidden(&seq, 6, &[1.0; 7]).is_err());
        assert!(model.graft_hidden(&seq, 12, &[1.0; 8]).is_err());
    }

    #[test]
    fn export_matches_forward() {
        let model = RnnModel::init(&ABC, 4, 9).unwrap();
        let seq: Vec<char> = "ABCCBA".chars().collect();
        let trace = model.export_trace(&seq).unwrap();
        assert_eq!((trace.layers, trace.dim, trace.token_count()), (1, 4, 6));
        let fwd = model.forward_with_states(&seq).unwrap();
        for t in 0..6 {
            let expect: Vec<f32> = fwd.hidden[t].iter().map(|&v| v as f32).collect();
            assert_eq!(trace.state(0, t), &expect[..]);
        }
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let model = RnnModel::init(&ABC, 4, 9).unwrap();
        model.save(&path).unwrap();
        assert_eq!(RnnModel::load(&path).unwrap(), model);
    }

    #[test]
    fn zero_transfer_iterations() {
        let cfg = TransferConfig {
            base_length: 3000,
            transfer_length: 500,
            eval_length: 300,
            base_train: TrainConfig {
                iterations: 2,
                ..TrainConfig::default()
            },
            transfer_train: TrainConfig {
                iterations: 0,
                ..TrainConfig::default()
            },
            ..TransferConfig::default()
        };
        let curves = transfer_experiment(&cfg, TransferGraft::Hidden).unwrap();
        assert!(curves.control.is_empty() && curves.grafted.is_empty());
    }
}
