// SPDX-License-Identifier: MIT OR Apache-2.0

//! CSV tables, SVG line charts and run metadata.
//!
//! Charts are plain SVG with fixed number formatting, so identical input
//! tables give byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A table of strings with a header row.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        Self {
            headers: headers.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: ToString>(&mut self, row: impl IntoIterator<Item = S>) {
        self.rows.push(row.into_iter().map(|v| v.to_string()).collect());
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn require(&self, name: &str, path: &Path) -> Result<usize> {
        self.column(name)
            .ok_or_else(|| Error::Format(format!("{}: missing column \"{name}\"", path.display())))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

pub fn write_csv(path: impl AsRef<Path>, table: &Table) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(&table.headers).map_err(|e| csv_err(path, e))?;
    for r in &table.rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Table> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_err(path, e))?;
    Ok(Table { headers, rows })
}

// ---------------------------------------------------------------------------
// Charts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s == "-0" { "0".into() } else { s.to_string() }
    }
}

/// Evenly spaced ticks, or powers of ten on a log axis.
fn ticks(lo: f64, hi: f64, log: bool) -> Vec<f64> {
    if log {
        let (a, b) = (lo.floor() as i32, hi.ceil() as i32);
        return (a..=b).map(f64::from).filter(|e| *e >= lo - 1e-9 && *e <= hi + 1e-9).collect();
    }
    (0..=4).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
}

impl Chart {
    /// Points that can be drawn: finite, and positive x on a log axis.
    fn drawable(&self, p: &(f64, f64)) -> bool {
        p.0.is_finite() && p.1.is_finite() && (!self.log_x || p.0 > 0.0)
    }

    pub fn render_svg(&self) -> String {
        let tx = |x: f64| if self.log_x { x.log10() } else { x };
        let pts: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().filter(|p| self.drawable(p)).map(|&(x, y)| (tx(x), y)))
            .collect();
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
        let _ = writeln!(
            svg,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let x_label = if self.log_x { format!("{} (log scale)", self.x_label) } else { self.x_label.clone() };
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 10.0,
            escape(&x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="15" y="{:.1}" text-anchor="middle" transform="rotate(-90 15 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        if pts.is_empty() {
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="gray">no data</text>"#,
                LEFT + pw / 2.0,
                TOP + ph / 2.0
            );
            svg.push_str("</svg>\n");
            return svg;
        }
        let (mut x0, mut x1, mut y0, mut y1) = pts.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
        );
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let py = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;
        for t in ticks(x0, x1, self.log_x) {
            let label = if self.log_x { tick_label(10f64.powf(t)) } else { tick_label(t) };
            let _ = writeln!(
                svg,
                r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="black"/><text x="{0:.1}" y="{3:.1}" text-anchor="middle">{4}</text>"#,
                px(t),
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 18.0,
                label
            );
        }
        for t in ticks(y0, y1, false) {
            let _ = writeln!(
                svg,
                r#"<line x1="{0:.1}" y1="{1:.1}" x2="{2:.1}" y2="{1:.1}" stroke="black"/><text x="{3:.1}" y="{4:.1}" text-anchor="end">{5}</text>"#,
                LEFT - 5.0,
                py(t),
                LEFT,
                LEFT - 8.0,
                py(t) + 4.0,
                tick_label(t)
            );
        }
        for (i, s) in self.series.iter().enumerate() {
            let colour = PALETTE[i % PALETTE.len()];
            let coords: Vec<String> = s
                .points
                .iter()
                .filter(|p| self.drawable(p))
                .map(|&(x, y)| format!("{:.2},{:.2}", px(tx(x)), py(y)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline class="series" data-name="{}" data-points="{}" fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
                escape(&s.name),
                coords.len(),
                coords.join(" ")
            );
            let ly = TOP + 12.0 + 14.0 * i as f64;
            if ly < HEIGHT - BOTTOM {
                let _ = writeln!(
                    svg,
                    r#"<line x1="{0:.1}" y1="{1:.1}" x2="{2:.1}" y2="{1:.1}" stroke="{colour}" stroke-width="2"/><text x="{3:.1}" y="{4:.1}">{5}</text>"#,
                    WIDTH - RIGHT + 10.0,
                    ly,
                    WIDTH - RIGHT + 28.0,
                    WIDTH - RIGHT + 32.0,
                    ly + 4.0,
                    escape(&s.name)
                );
            }
        }
        svg.push_str("</svg>\n");
        svg
    }
}

// ---------------------------------------------------------------------------
// Metadata
// ---------------------------------------------------------------------------

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Written as `metadata.json` next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputHash>,
}

impl RunMetadata {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        Self {
            tool: "featrace".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args,
            seed: None,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
        }
    }

    /// Hash `path` and record it; directories are hashed file by file in
    /// sorted order.
    pub fn add_input(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            entries.sort();
            for e in entries {
                self.add_input(e)?;
            }
            return Ok(());
        }
        if self.inputs.iter().any(|i| i.path == path) {
            return Ok(());
        }
        self.inputs.push(InputHash {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// Report bundle
// ---------------------------------------------------------------------------

/// Tables the report knows how to chart, with their required columns.
pub const TRAJECTORY_TABLE: &str = "trajectories.csv";
pub const ABLATION_TABLE: &str = "ablation.csv";
pub const KL_TABLE: &str = "kl.csv";
pub const DIMENSIONALITY_TABLE: &str = "dimensionality.csv";
pub const TRAINING_TABLE: &str = "training.csv";
pub const KNOWN_TABLES: [&str; 5] = [TRAJECTORY_TABLE, ABLATION_TABLE, KL_TABLE, DIMENSIONALITY_TABLE, TRAINING_TABLE];
/// Trajectory charts show at most this many features.
pub const MAX_TRAJECTORY_SERIES: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub out_dir: PathBuf,
    pub tables: Vec<PathBuf>,
    pub charts: Vec<PathBuf>,
    pub metadata: PathBuf,
}

fn parse_f64(table: &Table, row: usize, col: usize, path: &Path) -> Result<f64> {
    let raw = &table.rows[row][col];
    raw.trim().parse::<f64>().map_err(|_| {
        Error::Format(format!(
            "{}: row {} column \"{}\" is not a number: {raw:?}",
            path.display(),
            row + 2,
            table.headers[col]
        ))
    })
}

/// One series per distinct value of `group`, x from `x`, y from `y`, rows
/// kept in file order.
fn grouped_series(table: &Table, path: &Path, group: Option<&str>, x: &str, y: &str) -> Result<Vec<Series>> {
    let xc = table.require(x, path)?;
    let yc = table.require(y, path)?;
    let gc = group.map(|g| table.require(g, path)).transpose()?;
    let mut out: Vec<Series> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for r in 0..table.rows.len() {
        let key = gc.map_or_else(|| y.to_string(), |c| table.rows[r][c].clone());
        let i = *index.entry(key.clone()).or_insert_with(|| {
            out.push(Series {
                name: key,
                points: Vec::new(),
            });
            out.len() - 1
        });
        out[i].points.push((parse_f64(table, r, xc, path)?, parse_f64(table, r, yc, path)?));
    }
    Ok(out)
}

/// Charts for a known table name, as `(file name, chart)`; empty for other
/// names. `path` is only used in error messages.
pub fn chart_for(name: &str, table: &Table, path: &Path) -> Result<Vec<(String, Chart)>> {
    let chart = |title: &str, x: &str, y: &str, log_x: bool, series: Vec<Series>| Chart {
        title: title.into(),
        x_label: x.into(),
        y_label: y.into(),
        log_x,
        series,
    };
    Ok(match name {
        TRAJECTORY_TABLE => {
            let mut s = grouped_series(table, path, Some("feature"), "step", "norm")?;
            s.truncate(MAX_TRAJECTORY_SERIES);
            vec![("decoder_norms.svg".into(), chart("Decoder norm evolution", "step", "decoder norm", true, s))]
        }
        ABLATION_TABLE => {
            let s = grouped_series(table, path, Some("mode"), "k", "recovery")?;
            vec![("ablation.svg".into(), chart("Metric recovery", "features edited (k)", "recovery", false, s))]
        }
        KL_TABLE => {
            let mut s = grouped_series(table, path, None, "step", "unigram_kl")?;
            s.extend(grouped_series(table, path, None, "step", "bigram_kl")?);
            vec![("kl.svg".into(), chart("KL divergence evolution", "step", "KL (nats)", true, s))]
        }
        DIMENSIONALITY_TABLE => {
            let s = grouped_series(table, path, None, "step", "total_ratio")?;
            vec![(
                "dimensionality.svg".into(),
                chart("Total feature dimensionality", "step", "sum D_i / d_model", true, s),
            )]
        }
        TRAINING_TABLE => {
            let s = grouped_series(table, path, None, "step", "smoothed_loss")?;
            vec![("training_loss.svg".into(), chart("Training loss", "step", "smoothed loss", false, s))]
        }
        _ => Vec::new(),
    })
}

/// Chart every known table found in `inputs` and write the bundle to `out`.
///
/// Tables are copied to `out/tables/`, charts go to `out/charts/`, and
/// `out/metadata.json` pins every input by hash. A table with a header but
/// no rows yields a placeholder chart.
pub fn emit_report(inputs: &[PathBuf], out: impl AsRef<Path>, mut meta: RunMetadata) -> Result<ReportBundle> {
    let out = out.as_ref();
    let mut found: BTreeMap<&str, PathBuf> = BTreeMap::new();
    for dir in inputs {
        if !dir.exists() {
            return Err(Error::InvalidInput(format!("input {} does not exist", dir.display())));
        }
        for name in KNOWN_TABLES {
            let p = if dir.is_dir() { dir.join(name) } else { dir.clone() };
            if p.is_file() && p.file_name().is_some_and(|f| f == name) {
                found.entry(name).or_insert(p);
            }
        }
    }
    if found.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no report tables found in {:?}; expected any of {}",
            inputs,
            KNOWN_TABLES.join(", ")
        )));
    }
    let tables_dir = out.join("tables");
    let charts_dir = out.join("charts");
    for d in [&tables_dir, &charts_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut bundle = ReportBundle {
        out_dir: out.to_path_buf(),
        tables: Vec::new(),
        charts: Vec::new(),
        metadata: out.join("metadata.json"),
    };
    for (name, path) in &found {
        meta.add_input(path)?;
        let table = read_csv(path)?;
        let dest = tables_dir.join(name);
        write_csv(&dest, &table)?;
        bundle.tables.push(dest);
        for (file, chart) in chart_for(name, &table, path)? {
            let p = charts_dir.join(file);
            fs::write(&p, chart.render_svg()).map_err(|e| Error::io(&p, e))?;
            bundle.charts.push(p);
        }
    }
    meta.save(&bundle.metadata)?;
    Ok(bundle)
}
