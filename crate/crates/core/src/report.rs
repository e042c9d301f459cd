//! CSV tables, SVG figures and the bundle manifest.
//!
//! Every emitter here is a pure function of its input, so identical analyses
//! produce byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pa::LayerStat;

/// A string table with a header row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self {
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.headers.len() {
            return Err(Error::arg(format!(
                "row has {} cells, table has {} columns",
                row.len(),
                self.headers.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Builds a table from serializable records; headers come from the
    /// first record's field names.
    pub fn from_records<T: Serialize>(records: &[T]) -> Result<Self> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in records {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Self::from_csv(&bytes)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let headers = r.headers()?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { headers, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.headers.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }
}

/// Writes serializable records as CSV.
pub fn write_csv<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv = Table::from_records(records)?.to_csv()?;
    fs::write(path, csv).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: String,
    pub file: String,
    pub sha256: String,
}

/// Named CSV tables and SVG figures written together with a manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportBundle {
    pub tables: BTreeMap<String, String>,
    pub figures: BTreeMap<String, String>,
}

impl ReportBundle {
    pub fn add_table(&mut self, name: &str, table: &Table) -> Result<()> {
        self.tables.insert(name.to_string(), table.to_csv()?);
        Ok(())
    }

    pub fn add_figure(&mut self, name: &str, svg: String) {
        self.figures.insert(name.to_string(), svg);
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let tables = self.tables.iter().map(|(n, b)| ManifestEntry {
            name: n.clone(),
            kind: "table".into(),
            file: format!("{n}.csv"),
            sha256: sha256_hex(b.as_bytes()),
        });
        let figures = self.figures.iter().map(|(n, b)| ManifestEntry {
            name: n.clone(),
            kind: "figure".into(),
            file: format!("{n}.svg"),
            sha256: sha256_hex(b.as_bytes()),
        });
        tables.chain(figures).collect()
    }

    /// Writes every blob plus `manifest.json` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (n, b) in self.tables.iter().map(|(n, b)| (format!("{n}.csv"), b)).chain(
            self.figures.iter().map(|(n, b)| (format!("{n}.svg"), b)),
        ) {
            let p = dir.join(n);
            fs::write(&p, b).map_err(|e| Error::io(&p, e))?;
        }
        let manifest = self.manifest();
        let p = dir.join("manifest.json");
        fs::write(&p, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&p, e))?;
        Ok(manifest)
    }
}

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79", "#e7ba52",
];

/// Stable colour for a chunk id.
pub fn chunk_color(id: usize) -> &'static str {
    // FNV-1a over the little-endian id bytes.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in (id as u64).to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    PALETTE[(h % PALETTE.len() as u64) as usize]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const M: f64 = 48.0;

/// A named series of `(x, y)` points.
pub type Series = (String, Vec<(f64, f64)>);

/// Line chart with axes, tick labels at the data range ends and a legend.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> Result<String> {
    if series.is_empty() {
        return Err(Error::arg("no series to plot"));
    }
    let pts = || series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{M} {} L{M} {} L{} {}" fill="none" stroke="black"/>"#,
        M,
        H - M,
        W - M,
        H - M
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, H - M + 14.0, tick(v));
    }
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(s, r#"<text x="{}" y="{y:.2}" text-anchor="end">{}</text>"#, M - 4.0, tick(v));
    }
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if coords.len() == 1 {
            let (cx, cy) = coords[0].split_once(',').unwrap_or(("0", "0"));
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        } else if !coords.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                coords.join(" ")
            );
        }
        let ly = 30.0 + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="3" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            W - M - 90.0,
            ly - 4.0,
            W - M - 76.0,
            ly,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-3) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Learning curves indexed by iteration.
pub fn plot_curves(title: &str, series: &[(String, Vec<f64>)]) -> Result<String> {
    let s: Vec<Series> = series
        .iter()
        .map(|(n, v)| (n.clone(), v.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect()))
        .collect();
    line_chart(title, "iteration", "value", &s)
}

/// Four panels against layer: tolerance, support size, delta, TPR/FPR.
/// Each shift is its own series.
pub fn plot_layer_stats(rows: &[LayerStat]) -> Result<Vec<(String, String)>> {
    if rows.is_empty() {
        return Err(Error::arg("layer statistics table is empty"));
    }
    let mut shifts: Vec<i64> = rows.iter().map(|r| r.shift).collect();
    shifts.sort_unstable();
    shifts.dedup();
    let concept = &rows[0].concept;
    let by_shift = |f: &dyn Fn(&LayerStat) -> f64, label: &str| -> Vec<Series> {
        shifts
            .iter()
            .map(|&k| {
                let mut pts: Vec<(f64, f64)> =
                    rows.iter().filter(|r| r.shift == k).map(|r| (r.layer as f64, f(r))).collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                (format!("{label} shift {k}"), pts)
            })
            .collect()
    };
    let mut rates = by_shift(&|r| r.tpr, "TPR");
    rates.extend(by_shift(&|r| r.fpr, "FPR"));
    Ok(vec![
        ("tol".into(), line_chart(&format!("{concept}: tolerance"), "layer", "tol", &by_shift(&|r| r.tol, "tol"))?),
        (
            "support".into(),
            line_chart(&format!("{concept}: support size"), "layer", "|C|", &by_shift(&|r| r.support_size as f64, "|C|"))?,
        ),
        ("delta".into(), line_chart(&format!("{concept}: max deviation"), "layer", "delta", &by_shift(&|r| r.delta, "delta"))?),
        ("rates".into(), line_chart(&format!("{concept}: TPR / FPR"), "layer", "rate", &rates)?),
    ])
}

const CELL: usize = 10;

/// Token x layer grid, one cell per chunk id. Rows of `grid` are layers.
pub fn plot_raster(grid: &[Vec<usize>]) -> Result<String> {
    let layers = grid.len();
    let tokens = grid.first().map_or(0, Vec::len);
    if layers == 0 || tokens == 0 {
        return Err(Error::arg("raster grid is empty"));
    }
    if grid.iter().any(|r| r.len() != tokens) {
        return Err(Error::arg("raster rows differ in length"));
    }
    let (w, h) = (tokens * CELL, layers * CELL);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    for (l, row) in grid.iter().enumerate() {
        // Layer 0 at the bottom.
        let y = (layers - 1 - l) * CELL;
        for (t, &id) in row.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"><title>layer {l} token {t} chunk {id}</title></rect>"#,
                t * CELL,
                chunk_color(id)
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Histogram as a bar chart over `[lo, hi]`.
pub fn plot_histogram(title: &str, lo: f64, hi: f64, counts: &[usize]) -> Result<String> {
    if counts.is_empty() {
        return Err(Error::arg("histogram has no bins"));
    }
    let step = (hi - lo) / counts.len() as f64;
    let pts: Vec<(f64, f64)> = counts
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| {
            let a = lo + step * i as f64;
            [(a, c as f64), (a + step, c as f64)]
        })
        .collect();
    line_chart(title, "value", "count", &[("count".into(), pts)])
}
