//! Files exchanged with the Python capture tool: activation traces written
//! by a producer other than this crate, graft specs read by the hook
//! installer, and generation files scored after a grafted run.

use std::fs;
use std::path::Path;
use std::process::Command;

use chunklens::intervene::{self, Band, Generation, GenerationMeta, GraftSpec, Mode, Position};
use chunklens::pa::{self, Normalization};
use chunklens::trace::read_trace;

/// Bytes as `struct.pack` plus `json.dumps` (default separators) produce them.
fn python_style_actr(layers: usize, dim: usize, tokens: &[&str], values: &[f32], annotations: &str) -> Vec<u8> {
    let toks: Vec<String> = tokens.iter().map(|t| format!("\"{t}\"")).collect();
    let header = format!(
        "{{\"model_id\": \"gpt2\", \"layers\": {layers}, \"dim\": {dim}, \"tokens\": [{}], \"annotations\": {annotations}}}",
        toks.join(", ")
    );
    let mut out = b"ACTR".to_vec();
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn cheese_trace() -> (Vec<&'static str>, Vec<f32>) {
    let tokens = vec!["I", " like", " cheese", " and", " more", " cheese", "."];
    let (layers, dim, n) = (2, 3, tokens.len());
    let mut values = Vec::with_capacity(layers * n * dim);
    for l in 0..layers {
        for (t, tok) in tokens.iter().enumerate() {
            for i in 0..dim {
                let v = if *tok == " cheese" && i == 0 {
                    2.5 + l as f32
                } else {
                    ((l * 31 + t * 7 + i * 3) % 11) as f32 * 0.3 - 1.5
                };
                values.push(v);
            }
        }
    }
    (tokens, values)
}

#[test]
fn reads_python_written_trace() {
    let dir = tempfile::tempdir().unwrap();
    let (tokens, values) = cheese_trace();
    let p = dir.path().join("cheese.actr");
    fs::write(
        &p,
        python_style_actr(2, 3, &tokens, &values, r#"[{"concept": "cheese", "indices": [2, 5]}]"#),
    )
    .unwrap();
    let t = read_trace(&p).unwrap();
    assert_eq!(t.model_id, "gpt2");
    assert_eq!((t.layers, t.dim, t.token_count()), (2, 3, 7));
    assert_eq!(t.state(1, 2), &[3.5, values[7 * 3 + 2 * 3 + 1], values[7 * 3 + 2 * 3 + 2]]);
    let ann = t.annotation("cheese").unwrap();
    assert_eq!((ann.indices.as_slice(), ann.shift), (&[2, 5][..], 0));

    let fit = pa::fit_concept(&t, "cheese", 1, 0, Normalization::FullWidth).unwrap();
    assert!(fit.chunk.support.contains(&0));
    for &i in &ann.indices {
        assert!(pa::detect(&fit.chunk, t.state(1, i)).unwrap());
    }
}

#[test]
fn rejects_python_trace_with_short_payload() {
    let (tokens, values) = cheese_trace();
    let bytes = python_style_actr(2, 3, &tokens, &values[..values.len() - 1], "[]");
    assert!(chunklens::trace::decode_trace(&bytes).is_err());
    let bytes = python_style_actr(2, 3, &tokens, &values, r#"[{"concept": "cheese", "indices": [7]}]"#);
    assert!(chunklens::trace::decode_trace(&bytes).is_err());
}

#[test]
fn graft_spec_json_shape() {
    let at: GraftSpec = serde_json::from_str(
        r#"{"mode": "graft", "layers": [3], "support": [1, 4], "values": [0.5, -1.0], "position": 12, "concept": "cheese"}"#,
    )
    .unwrap();
    assert_eq!(at.position, Position::At(12));
    assert_eq!(at.mode, Mode::Graft);
    let all: GraftSpec = serde_json::from_str(
        r#"{"mode": "freeze", "layers": [0, 1], "support": [2], "values": [0.0], "position": "all", "concept": "c"}"#,
    )
    .unwrap();
    assert_eq!(all.position, Position::All);

    let v: serde_json::Value = serde_json::to_value(&at).unwrap();
    assert_eq!(v["position"], 12);
    assert_eq!(v["mode"], "graft");
    assert_eq!(serde_json::to_value(&all).unwrap()["position"], "all");

    let bad = r#"{"mode": "graft", "layers": [0], "support": [1], "values": [1.0], "position": "first", "concept": "c"}"#;
    assert!(serde_json::from_str::<GraftSpec>(bad).is_err());
}

#[test]
fn exported_band_specs_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (tokens, values) = cheese_trace();
    let trace = d.join("cheese.actr");
    fs::write(
        &trace,
        python_style_actr(2, 3, &tokens, &values, r#"[{"concept": "cheese", "indices": [2, 5]}]"#),
    )
    .unwrap();
    let t = read_trace(&trace).unwrap();
    let chunk = pa::fit_concept(&t, "cheese", 1, 0, Normalization::FullWidth).unwrap().chunk;
    let chunk_path = d.join("chunk.json");
    chunk.save(&chunk_path).unwrap();

    let status = Command::new(env!("CARGO_BIN_EXE_chunklens"))
        .args(["--out", d.to_str().unwrap(), "export-graft-spec", "--chunk"])
        .arg(&chunk_path)
        .args(["--band", "middle", "--num-layers", "12", "--position", "all"])
        .status()
        .unwrap();
    assert!(status.success());
    let specs = intervene::load_specs(d.join("graft_spec.json")).unwrap();
    let layers: Vec<usize> = specs.iter().flat_map(|s| s.layers.clone()).collect();
    assert_eq!(layers, intervene::band_layers(Band::Middle, 12).unwrap());
    assert!(specs.iter().all(|s| s.values == chunk.prototype && s.position == Position::All));
}

fn write_generations(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let meta = |category: &str, condition: &str| GenerationMeta {
        prompt: "Tell me about food".into(),
        category: category.into(),
        condition: condition.into(),
    };
    let gens = vec![
        Generation { text: "Bread is good.".into(), meta: meta("food", "control") },
        Generation { text: "Cheese, always cheese.".into(), meta: meta("food", "control") },
        Generation { text: "I want cheese".into(), meta: meta("food", "middle") },
        Generation { text: "Cheesecake? cheese!".into(), meta: meta("food", "middle") },
        Generation { text: "Nothing here".into(), meta: meta("pets", "control") },
        Generation { text: "A cheese-loving cat".into(), meta: meta("pets", "late") },
    ];
    let (t, j) = (dir.join("gens.txt"), dir.join("gens.json"));
    intervene::save_generations(&gens, &t, &j).unwrap();
    assert_eq!(intervene::load_generations(&t, &j).unwrap(), gens);
    (t, j)
}

#[test]
fn generation_files_are_line_aligned() {
    let dir = tempfile::tempdir().unwrap();
    let (t, j) = write_generations(dir.path());
    assert_eq!(fs::read_to_string(&t).unwrap().lines().count(), 6);
    let side: serde_json::Value = serde_json::from_slice(&fs::read(&j).unwrap()).unwrap();
    assert_eq!(side.as_array().unwrap().len(), 6);
    assert_eq!(side[2]["condition"], "middle");

    fs::write(&t, "one line only\n").unwrap();
    assert!(intervene::load_generations(&t, &j).is_err());
}

#[test]
fn scores_generations_per_condition() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (t, j) = write_generations(d);
    let status = Command::new(env!("CARGO_BIN_EXE_chunklens"))
        .args(["--out", d.to_str().unwrap(), "score-generations", "--concept", "cheese", "--generations"])
        .arg(&t)
        .arg("--sidecar")
        .arg(&j)
        .status()
        .unwrap();
    assert!(status.success());
    let rates = fs::read_to_string(d.join("rates.csv")).unwrap();
    let rows: Vec<&str> = rates.lines().collect();
    assert_eq!(rows[0], "category,condition,rate");
    assert!(rows.contains(&"food,control,0.5"), "{rates}");
    assert!(rows.contains(&"food,middle,1.0"), "{rates}");
    assert!(rows.contains(&"pets,control,0.0"), "{rates}");
    assert!(rows.contains(&"pets,late,1.0"), "{rates}");
    let report = fs::read_to_string(d.join("graft_report.csv")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("food,0.5,,1.0,,,0.5,")), "{report}");
}
