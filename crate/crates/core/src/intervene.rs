//! Graft and freeze interventions.
//!
//! A [`GraftSpec`] names a set of neurons in one or more layers and the
//! values they are clamped to at a token position. Specs are applied
//! directly to RNN-lab models and exported as JSON for external capture
//! tools, whose generations are scored back here.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::pa::PopulationChunk;
use crate::rnnlab::{Forward, NeuronOverwrite, RnnModel};
use crate::trace::annotate_occurrences;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Graft,
    Freeze,
}

/// Token position an intervention applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    At(usize),
    All,
}

impl Serialize for Position {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Position::At(i) => s.serialize_u64(*i as u64),
            Position::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for Position {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(Position::At(i)),
            Raw::Word(w) if w == "all" => Ok(Position::All),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "position must be an index or \"all\", got \"{w}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraftSpec {
    pub mode: Mode,
    pub layers: Vec<usize>,
    pub support: Vec<usize>,
    pub values: Vec<f32>,
    pub position: Position,
    pub concept: String,
}

impl GraftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::validation("layers", "at least one layer required"));
        }
        if self.values.len() != self.support.len() {
            return Err(Error::validation(
                "values",
                format!("{} values for {} support neurons", self.values.len(), self.support.len()),
            ));
        }
        if self.mode == Mode::Freeze && self.values.iter().any(|&v| v != 0.0) {
            return Err(Error::validation("values", "freeze specs carry zeros"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("values", "non-finite value"));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_specs(std::slice::from_ref(self), path)
    }
}

/// Writes one spec as an object, several as an array.
pub fn save_specs(specs: &[GraftSpec], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = if specs.len() == 1 {
        serde_json::to_vec_pretty(&specs[0])?
    } else {
        serde_json::to_vec_pretty(specs)?
    };
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Reads a spec file holding one object or an array of objects.
pub fn load_specs(path: impl AsRef<Path>) -> Result<Vec<GraftSpec>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    let specs: Vec<GraftSpec> = if value.is_array() {
        serde_json::from_value(value)?
    } else {
        vec![serde_json::from_value(value)?]
    };
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

/// Graft specs carry the chunk prototype; freeze specs carry zeros over the
/// same support.
pub fn spec_from_chunk(chunk: &PopulationChunk, mode: Mode, position: Position) -> GraftSpec {
    let values = match mode {
        Mode::Graft => chunk.prototype.clone(),
        Mode::Freeze => vec![0.0; chunk.support.len()],
    };
    GraftSpec {
        mode,
        layers: vec![chunk.layer],
        support: chunk.support.clone(),
        values,
        position,
        concept: chunk.concept.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Early,
    Middle,
    Late,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Early, Band::Middle, Band::Late];

    /// Layer range on a 30-layer reference: 1-9, 10-19, 20-29.
    fn reference(self) -> (usize, usize) {
        match self {
            Band::Early => (1, 10),
            Band::Middle => (10, 20),
            Band::Late => (20, 30),
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Band::Early => "early",
            Band::Middle => "middle",
            Band::Late => "late",
        })
    }
}

impl std::str::FromStr for Band {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(Band::Early),
            "middle" => Ok(Band::Middle),
            "late" => Ok(Band::Late),
            _ => Err(Error::arg(format!("unknown band '{s}' (early|middle|late)"))),
        }
    }
}

/// Layers of a band in an `L`-layer model. With `L >= 30` the reference
/// ranges are used as is; smaller models scale them by `L / 30`, keeping at
/// least one layer per band.
pub fn band_layers(band: Band, num_layers: usize) -> Result<Vec<usize>> {
    if num_layers == 0 {
        return Err(Error::arg("model has no layers"));
    }
    let (a, b) = band.reference();
    if num_layers >= 30 {
        return Ok((a..b).collect());
    }
    let lo = (a * num_layers / 30).min(num_layers - 1);
    let hi = (b * num_layers / 30).clamp(lo + 1, num_layers);
    Ok((lo..hi).collect())
}

/// One spec per layer of the band, each a copy of `spec`.
pub fn layer_band(spec: &GraftSpec, band: Band, num_layers: usize) -> Result<Vec<GraftSpec>> {
    Ok(band_layers(band, num_layers)?
        .into_iter()
        .map(|l| GraftSpec {
            layers: vec![l],
            ..spec.clone()
        })
        .collect())
}

/// Runs the RNN with the spec's neurons clamped. RNN models have a single
/// layer, so the spec must target layer 0.
pub fn apply_to_rnn(model: &RnnModel, spec: &GraftSpec, symbols: &[char]) -> Result<Forward> {
    spec.validate()?;
    if spec.layers != [0] {
        return Err(Error::arg(format!(
            "RNN models have one layer; spec targets {:?}",
            spec.layers
        )));
    }
    if let Some(&bad) = spec.support.iter().find(|&&i| i >= model.hidden_dim) {
        return Err(Error::arg(format!(
            "support index {bad} outside hidden width {}",
            model.hidden_dim
        )));
    }
    let position = match spec.position {
        Position::At(t) if t >= symbols.len() => {
            return Err(Error::arg(format!(
                "position {t} outside sequence of length {}",
                symbols.len()
            )))
        }
        Position::At(t) => Some(t),
        Position::All => None,
    };
    let mut hook = NeuronOverwrite {
        position,
        support: spec.support.clone(),
        values: spec.values.iter().map(|&v| v as f64).collect(),
    };
    model.forward_hooked(symbols, &mut hook)
}

/// Fraction of texts containing `concept` as a whole word, case-insensitively.
pub fn concept_occurrence_rate(generations: &[String], concept: &str) -> Result<f64> {
    if generations.is_empty() {
        return Err(Error::arg("no generations to score"));
    }
    let mut hits = 0;
    for text in generations {
        let ann = annotate_occurrences(std::slice::from_ref(text), concept)?;
        if !ann.is_empty() {
            hits += 1;
        }
    }
    Ok(hits as f64 / generations.len() as f64)
}

/// Metadata for one generated text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationMeta {
    #[serde(default)]
    pub prompt: String,
    #[serde(default)]
    pub category: String,
    /// `"control"` or a band name.
    pub condition: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub text: String,
    pub meta: GenerationMeta,
}

/// Reads a one-generation-per-line text file and its JSON sidecar (an array
/// with one metadata object per line).
pub fn load_generations(text_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<Vec<Generation>> {
    let text_path = text_path.as_ref();
    let sidecar_path = sidecar_path.as_ref();
    let text = fs::read_to_string(text_path).map_err(|e| Error::io(text_path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    let bytes = fs::read(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
    let metas: Vec<GenerationMeta> = serde_json::from_slice(&bytes)?;
    if metas.len() != lines.len() {
        return Err(Error::Format(format!(
            "{} generations but {} sidecar records",
            lines.len(),
            metas.len()
        )));
    }
    Ok(lines
        .into_iter()
        .zip(metas)
        .map(|(t, meta)| Generation {
            text: t.to_string(),
            meta,
        })
        .collect())
}

pub fn save_generations(gens: &[Generation], text_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<()> {
    let text_path = text_path.as_ref();
    let sidecar_path = sidecar_path.as_ref();
    if let Some(g) = gens.iter().find(|g| g.text.contains('\n')) {
        return Err(Error::arg(format!("generation spans several lines: {:?}", g.text)));
    }
    let mut text: String = gens.iter().map(|g| format!("{}\n", g.text)).collect();
    if gens.is_empty() {
        text.clear();
    }
    fs::write(text_path, text).map_err(|e| Error::io(text_path, e))?;
    let metas: Vec<&GenerationMeta> = gens.iter().map(|g| &g.meta).collect();
    fs::write(sidecar_path, serde_json::to_vec_pretty(&metas)?).map_err(|e| Error::io(sidecar_path, e))
}

/// Occurrence rate per `(category, condition)`.
pub fn rates_by_condition(gens: &[Generation], concept: &str) -> Result<BTreeMap<(String, String), f64>> {
    let mut groups: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for g in gens {
        groups
            .entry((g.meta.category.clone(), g.meta.condition.clone()))
            .or_default()
            .push(g.text.clone());
    }
    groups
        .into_iter()
        .map(|(k, texts)| Ok((k, concept_occurrence_rate(&texts, concept)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraftReportRow {
    pub category: String,
    pub control: f64,
    pub early: Option<f64>,
    pub middle: Option<f64>,
    pub late: Option<f64>,
    pub delta_early: Option<f64>,
    pub delta_middle: Option<f64>,
    pub delta_late: Option<f64>,
}

/// Per-category table of control and per-band rates with deltas
/// (grafted minus control). Every grafted category needs a control rate.
pub fn graft_report(
    control: &BTreeMap<String, f64>,
    grafted: &BTreeMap<Band, BTreeMap<String, f64>>,
) -> Result<Vec<GraftReportRow>> {
    for (band, rates) in grafted {
        if let Some(cat) = rates.keys().find(|c| !control.contains_key(*c)) {
            return Err(Error::arg(format!(
                "category '{cat}' has a {band} rate but no control rate"
            )));
        }
    }
    let rate = |band: Band, cat: &str| grafted.get(&band).and_then(|r| r.get(cat)).copied();
    Ok(control
        .iter()
        .map(|(cat, &c)| {
            let (e, m, l) = (rate(Band::Early, cat), rate(Band::Middle, cat), rate(Band::Late, cat));
            GraftReportRow {
                category: cat.clone(),
                control: c,
                early: e,
                middle: m,
                late: l,
                delta_early: e.map(|v| v - c),
                delta_middle: m.map(|v| v - c),
                delta_late: l.map(|v| v - c),
            }
        })
        .collect())
}

/// Rate per category.
pub type CategoryRates = BTreeMap<String, f64>;

/// Splits `(category, condition)` rates into the control map and per-band maps.
pub fn split_rates(
    rates: &BTreeMap<(String, String), f64>,
) -> Result<(CategoryRates, BTreeMap<Band, CategoryRates>)> {
    let mut control = BTreeMap::new();
    let mut grafted: BTreeMap<Band, CategoryRates> = BTreeMap::new();
    for ((cat, cond), &r) in rates {
        if cond == "control" {
            control.insert(cat.clone(), r);
        } else {
            grafted.entry(cond.parse()?).or_default().insert(cat.clone(), r);
        }
    }
    Ok((control, grafted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pa::Normalization;

    fn chunk() -> PopulationChunk {
        PopulationChunk {
            concept: "cheese".into(),
            layer: 3,
            shift: 0,
            support: vec![7, 2, 9],
            prototype: vec![0.1, -2.5, 1e-7],
            delta: 0.3,
            tol: 0.5,
            d: 16,
            normalization: Normalization::FullWidth,
        }
    }

    #[test]
    fn graft_and_freeze_values() {
        let g = spec_from_chunk(&chunk(), Mode::Graft, Position::At(4));
        assert_eq!(g.values, chunk().prototype);
        assert_eq!(g.layers, vec![3]);
        let f = spec_from_chunk(&chunk(), Mode::Freeze, Position::All);
        assert_eq!(f.values, vec![0.0; 3]);
        assert_eq!(f.support, chunk().support);
    }

    #[test]
    fn json_layout_and_round_trip() {
        let g = spec_from_chunk(&chunk(), Mode::Graft, Position::All);
        let v = serde_json::to_value(&g).unwrap();
        assert_eq!(v["mode"], "graft");
        assert_eq!(v["position"], "all");
        let back: GraftSpec = serde_json::from_value(v).unwrap();
        assert_eq!(back, g);
        let at: GraftSpec = serde_json::from_str(
            r#"{"mode":"freeze","layers":[2,3],"support":[1],"values":[0.0],"position":5,"concept":"x"}"#,
        )
        .unwrap();
        assert_eq!(at.position, Position::At(5));
        assert!(serde_json::from_str::<Position>("\"first\"").is_err());
    }

    #[test]
    fn validation() {
        let mut g = spec_from_chunk(&chunk(), Mode::Freeze, Position::All);
        g.values[0] = 1.0;
        assert!(g.validate().is_err());
        let mut g = spec_from_chunk(&chunk(), Mode::Graft, Position::All);
        g.values.pop();
        assert!(g.validate().is_err());
    }

    #[test]
    fn bands() {
        assert_eq!(band_layers(Band::Early, 32).unwrap(), (1..=9).collect::<Vec<_>>());
        assert_eq!(band_layers(Band::Middle, 32).unwrap(), (10..=19).collect::<Vec<_>>());
        assert_eq!(band_layers(Band::Late, 32).unwrap(), (20..=29).collect::<Vec<_>>());
        for b in Band::ALL {
            assert_eq!(band_layers(b, 1).unwrap(), vec![0]);
        }
        assert_eq!(band_layers(Band::Early, 12).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(band_layers(Band::Late, 12).unwrap(), vec![8, 9, 10, 11]);
        assert!(band_layers(Band::Early, 0).is_err());
        let specs = layer_band(&spec_from_chunk(&chunk(), Mode::Graft, Position::All), Band::Middle, 32).unwrap();
        assert_eq!(specs.len(), 10);
        assert!(specs.iter().all(|s| s.layers.len() == 1));
    }

    #[test]
    fn occurrence_rates() {
        let g = |s: &str| s.to_string();
        assert_eq!(concept_occurrence_rate(&[g("no dairy"), g("bread")], "cheese").unwrap(), 0.0);
        assert_eq!(concept_occurrence_rate(&[g("Cheese!"), g("more CHEESE please")], "cheese").unwrap(), 1.0);
        assert_eq!(concept_occurrence_rate(&[g("cheesecake"), g("a cheese")], "cheese").unwrap(), 0.5);
        assert!(concept_occurrence_rate(&[], "cheese").is_err());
    }

    #[test]
    fn report_deltas() {
        let control = BTreeMap::from([("ABBR".to_string(), 0.149), ("NUM".to_string(), 0.5)]);
        let grafted = BTreeMap::from([(Band::Early, BTreeMap::from([("ABBR".to_string(), 0.559), ("NUM".to_string(), 0.5)]))]);
        let rows = graft_report(&control, &grafted).unwrap();
        assert_eq!(rows[0].category, "ABBR");
        assert!((rows[0].delta_early.unwrap() - 0.41).abs() < 1e-12);
        assert_eq!(rows[1].delta_early, Some(0.0));
        assert_eq!(rows[0].middle, None);
        let bad = BTreeMap::from([(Band::Late, BTreeMap::from([("LOC".to_string(), 0.1)]))]);
        assert!(graft_report(&control, &bad).is_err());
    }

    #[test]
    fn rnn_graft_is_local() {
        let model = RnnModel::init(&['A', 'B', 'C'], 4, 1).unwrap();
        let seq: Vec<char> = "ABCABCAB".chars().collect();
        let plain = model.forward_with_states(&seq).unwrap();
        let spec = GraftSpec {
            mode: Mode::Graft,
            layers: vec![0],
            support: vec![1, 3],
            values: vec![5.0, -5.0],
            position: Position::At(4),
            concept: "x".into(),
        };
        let g = apply_to_rnn(&model, &spec, &seq).unwrap();
        assert_eq!(g.log_probs[..4], plain.log_probs[..4]);
        assert_ne!(g.log_probs[4], plain.log_probs[4]);
        assert_eq!(g.hidden[4][1], 5.0);
        let mut wide = spec.clone();
        wide.layers = vec![1];
        assert!(apply_to_rnn(&model, &wide, &seq).is_err());
    }

    #[test]
    fn generations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (t, s) = (dir.path().join("g.txt"), dir.path().join("g.json"));
        let gens = vec![
            Generation {
                text: "I like cheese".into(),
                meta: GenerationMeta { prompt: "p".into(), category: "DESC".into(), condition: "control".into() },
            },
            Generation {
                text: "cheese cake".into(),
                meta: GenerationMeta { prompt: "p".into(), category: "DESC".into(), condition: "early".into() },
            },
        ];
        save_generations(&gens, &t, &s).unwrap();
        assert_eq!(load_generations(&t, &s).unwrap(), gens);
        let rates = rates_by_condition(&gens, "cheese").unwrap();
        let (control, grafted) = split_rates(&rates).unwrap();
        assert_eq!(control["DESC"], 1.0);
        assert_eq!(grafted[&Band::Early]["DESC"], 1.0);
        std::fs::write(&s, "[]").unwrap();
        assert!(load_generations(&t, &s).is_err());
    }
}
