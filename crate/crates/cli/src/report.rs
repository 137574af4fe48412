//! Structured run reports.
//!
//! A [`Report`] is a small metric table with stable column order. It
//! serializes to CSV (header plus rows, nothing else, so identical
//! runs produce byte-identical files) or to JSON lines (one metadata
//! object first, then one object per row).
//!
//! Floating-point cells are rounded to 6 significant digits *before*
//! serialization, and derived columns are computed from the already
//! rounded primitives, so a reader can recompute them from sibling
//! columns exactly.

use std::fmt::Write as _;
use std::path::Path;

/// Rounds to 6 significant digits (the serialization precision).
pub fn round6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().expect("f64 round-trip")
}

/// Formats with exactly 6 significant digits.
pub fn fmt_sig6(x: f64) -> String {
    format!("{x:.5e}")
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => fmt_sig6(round6(*v)),
        }
    }

    fn json(&self) -> serde_json::Value {
        match self {
            Cell::Int(v) => serde_json::json!(v),
            Cell::Float(v) => serde_json::json!(round6(*v)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    JsonLines,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json-lines" => Ok(Format::JsonLines),
            other => Err(format!("unknown format `{other}`, expected csv or json-lines")),
        }
    }
}

/// Run provenance carried by JSON-lines output. CSV omits it so that
/// reruns stay byte-identical.
#[derive(Clone, Debug)]
pub struct Meta {
    pub seed: u64,
    pub config_digest: String,
    pub created_unix: u64,
}

impl Meta {
    pub fn new(seed: u64, config_digest: String) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Meta { seed, config_digest, created_unix }
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    pub meta: Meta,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Report {
    pub fn new(meta: Meta, columns: Vec<&str>) -> Self {
        Report {
            meta,
            columns: columns.into_iter().map(str::to_owned).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width != column count");
        self.rows.push(row);
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Csv => self.render_csv(),
            Format::JsonLines => self.render_json_lines(),
        }
    }

    fn render_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::csv).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    fn render_json_lines(&self) -> String {
        let mut out = String::new();
        let meta = serde_json::json!({
            "meta": {
                "seed": self.meta.seed,
                "config_digest": self.meta.config_digest,
                "created_unix": self.meta.created_unix,
            }
        });
        writeln!(out, "{meta}").expect("string write");
        for row in &self.rows {
            let mut obj = serde_json::Map::new();
            for (name, cell) in self.columns.iter().zip(row) {
                obj.insert(name.clone(), cell.json());
            }
            writeln!(out, "{}", serde_json::Value::Object(obj)).expect("string write");
        }
        out
    }
}

/// Writes the report to `path` in the requested format.
pub fn emit_report(report: &Report, format: Format, path: &Path) -> anyhow::Result<()> {
    std::fs::write(path, report.render(format))
        .map_err(|e| anyhow::anyhow!("writing report {}: {e}", path.display()))
}

/// FNV-1a hash of the canonical serialized config, as fixed-width hex.
pub fn digest(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}
