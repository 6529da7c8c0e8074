//! Output files: CSV tables, a JSON summary and two-column plot data, all
//! written atomically and all carrying the same provenance header.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::HarnessError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// One CSV cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i128),
    Real(f64),
    Flag(bool),
    Text(String),
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Real(x)
    }
}

impl From<u64> for Cell {
    fn from(x: u64) -> Self {
        Cell::Int(x as i128)
    }
}

impl From<u128> for Cell {
    fn from(x: u128) -> Self {
        Cell::Int(x as i128)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i128)
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::Flag(x)
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Text(x.to_string())
    }
}

impl From<String> for Cell {
    fn from(x: String) -> Self {
        Cell::Text(x)
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Text(String::new()), Cell::Real)
    }
}

/// Shortest round-trip decimal; Rust's `Debug` for `f64` guarantees it.
pub fn format_real(x: f64) -> String {
    format!("{x:?}")
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Real(x) => format_real(*x),
            Cell::Flag(b) => b.to_string(),
            Cell::Text(s) => {
                if s.contains([',', '"', '\n']) {
                    format!("\"{}\"", s.replace('"', "\"\""))
                } else {
                    s.clone()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len(), "row width in {}", self.name);
        self.rows.push(row);
    }

    /// The column header and rows, without comment lines.
    pub fn body(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(Cell::render).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// An `(x, y)` trace for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub experiment: String,
    pub config_sha256: String,
    pub version: String,
    pub seed_policy: String,
}

impl Provenance {
    fn header(&self) -> String {
        format!(
            "# experiment: {}\n# config_sha256: {}\n# version: {}\n",
            self.experiment, self.config_sha256, self.version
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Everything one run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleReport {
    pub provenance: Provenance,
    pub tables: Vec<Table>,
    pub traces: Vec<Trace>,
    pub verdicts: Vec<Verdict>,
    pub failed_cells: Vec<String>,
    pub total_cells: usize,
}

#[derive(Serialize)]
struct Summary<'a> {
    provenance: &'a Provenance,
    total_cells: usize,
    failed_cells: &'a [String],
    verdicts: &'a [Verdict],
    tables: Vec<&'a str>,
}

/// Fails early when `dir` cannot be created or written.
pub fn check_writable(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)
        .map_err(|e| HarnessError::Io(format!("cannot create {}: {e}", dir.display())))?;
    let probe = tempfile_in(dir, ".probe")?;
    fs::remove_file(&probe.0).ok();
    Ok(())
}

fn tempfile_in(dir: &Path, stem: &str) -> Result<(PathBuf, fs::File), HarnessError> {
    for k in 0..1000u32 {
        let path = dir.join(format!("{stem}.{}.{k}.tmp", std::process::id()));
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => return Ok((path, f)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => {
                return Err(HarnessError::Io(format!("{} is not writable: {e}", dir.display())))
            }
        }
    }
    Err(HarnessError::Io(format!("no free temporary name in {}", dir.display())))
}

/// Writes via a temporary file in the same directory and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), HarnessError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let (tmp, mut f) = tempfile_in(dir, name)?;
    let result = f
        .write_all(contents.as_bytes())
        .and_then(|_| f.sync_all())
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        fs::remove_file(&tmp).ok();
        return Err(HarnessError::Io(format!("writing {}: {e}", path.display())));
    }
    Ok(())
}

pub fn csv_text(report: &EnsembleReport, table: &Table) -> String {
    let mut out = report.provenance.header();
    let _ = writeln!(out, "# table: {}", table.name);
    out.push_str(&table.body());
    out
}

pub fn plot_text(report: &EnsembleReport, trace: &Trace) -> String {
    let mut out = report.provenance.header();
    let _ = writeln!(out, "# trace: {}", trace.name);
    let _ = writeln!(out, "# {} {}", trace.x_label, trace.y_label);
    for (x, y) in &trace.points {
        let _ = writeln!(out, "{} {}", format_real(*x), format_real(*y));
    }
    out
}

pub fn summary_json(report: &EnsembleReport) -> String {
    let s = Summary {
        provenance: &report.provenance,
        total_cells: report.total_cells,
        failed_cells: &report.failed_cells,
        verdicts: &report.verdicts,
        tables: report.tables.iter().map(|t| t.name.as_str()).collect(),
    };
    let mut text = serde_json::to_string_pretty(&s).expect("summary serializes");
    text.push('\n');
    text
}

/// Writes `<table>.csv`, `summary.json`, `config.resolved.json` and
/// `plot/<trace>.dat` into `dir`; returns the written paths.
pub fn emit(report: &EnsembleReport, resolved_config: &str, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    check_writable(dir)?;
    let mut written = Vec::new();
    for table in &report.tables {
        let path = dir.join(format!("{}.csv", table.name));
        write_atomic(&path, &csv_text(report, table))?;
        written.push(path);
    }
    if !report.traces.is_empty() {
        let plot_dir = dir.join("plot");
        check_writable(&plot_dir)?;
        for trace in &report.traces {
            let path = plot_dir.join(format!("{}.dat", trace.name));
            write_atomic(&path, &plot_text(report, trace))?;
            written.push(path);
        }
    }
    let path = dir.join("summary.json");
    write_atomic(&path, &summary_json(report))?;
    written.push(path);
    let path = dir.join("config.resolved.json");
    write_atomic(&path, &format!("{resolved_config}\n"))?;
    written.push(path);
    Ok(written)
}

/// The CSV text with `#` comment lines removed.
pub fn strip_comments(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(tables: Vec<Table>, traces: Vec<Trace>) -> EnsembleReport {
        EnsembleReport {
            provenance: Provenance {
                experiment: "transfer".into(),
                config_sha256: "abc".into(),
                version: VERSION.into(),
                seed_policy: "none".into(),
            },
            tables,
            traces,
            verdicts: vec![],
            failed_cells: vec![],
            total_cells: 0,
        }
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = Table::new("cells", &["energy", "value"]);
        let r = report(vec![t.clone()], vec![]);
        let text = csv_text(&r, &t);
        assert_eq!(strip_comments(&text), "energy,value\n");
        assert!(text.contains("# experiment: transfer"));
        assert!(text.contains("# config_sha256: abc"));
        assert!(text.contains(&format!("# version: {VERSION}")));
    }

    #[test]
    fn reals_round_trip() {
        for x in [0.1, 1.0 / 3.0, 1e-300, 6.02e23, -0.0, 2.5] {
            let s = format_real(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
        let mut t = Table::new("t", &["x", "s"]);
        t.push(vec![0.1.into(), "a,b".into()]);
        assert_eq!(t.body(), "x,s\n0.1,\"a,b\"\n");
    }

    #[test]
    fn ratio_trace_plotdata() {
        let trace = Trace {
            name: "ratio".into(),
            x_label: "L".into(),
            y_label: "ratio".into(),
            points: vec![(10.0, 0.5), (100.0, 0.25)],
        };
        let r = report(vec![], vec![trace.clone()]);
        let text = plot_text(&r, &trace);
        assert_eq!(strip_comments(&text), "10.0 0.5\n100.0 0.25\n");
        assert!(text.contains("# L ratio"));
    }

    #[test]
    fn emit_writes_everything_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new("cells", &["a"]);
        t.push(vec![1u64.into()]);
        let r = report(vec![t], vec![]);
        let paths = emit(&r, "{}", dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
        let summary = fs::read_to_string(dir.path().join("summary.json")).unwrap();
        assert!(summary.contains("\"config_sha256\": \"abc\""));
    }

    #[test]
    fn unwritable_directory_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, "x").unwrap();
        let err = check_writable(&file.join("sub")).unwrap_err();
        assert!(matches!(err, HarnessError::Io(_)));
    }
}
