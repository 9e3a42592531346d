//! File formats for snapshot history: CSV rows, full-fidelity JSONL records,
//! and plot-ready TSV series.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synchro::{CompositionRegistry, MaterialId, MaterialMatrix, SynchroSnapshot, UnitStatus};
use crate::tmn::{CompartmentId, TmnNetwork};

pub const SNAPSHOTS_CSV: &str = "snapshots.csv";
pub const SNAPSHOTS_JSONL: &str = "snapshots.jsonl";
pub const PLOTS_DIR: &str = "plots";

/// Timestamp columns and fields, excluded when comparing runs.
pub const CSV_TIMESTAMP_COLUMN: &str = "timestamp";
pub const JSON_TIMESTAMP_FIELD: &str = "ts_ms";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("SinkUnavailable: {path}: {source}")]
    SinkUnavailable { path: PathBuf, source: io::Error },
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad record on line {line}: {reason}")]
    BadRecord { line: usize, reason: String },
}

/// One JSONL line. Map keys are decimal ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotRecord {
    pub epoch: u64,
    pub ts_ms: u64,
    pub m_hat: BTreeMap<String, u64>,
    #[serde(rename = "F")]
    pub per_unit_material: BTreeMap<String, BTreeMap<String, u64>>,
    #[serde(rename = "F_total")]
    pub total_material: BTreeMap<String, u64>,
    pub l_hat: u64,
    pub matrices: BTreeMap<String, MaterialMatrix>,
    pub status: BTreeMap<String, UnitStatus>,
}

impl SnapshotRecord {
    pub fn from_snapshot(s: &SynchroSnapshot, ts_ms: u64) -> Self {
        let key = |v: u32| v.to_string();
        SnapshotRecord {
            epoch: s.epoch,
            ts_ms,
            m_hat: s.per_unit_mass.iter().map(|(k, &m)| (key(k.0), m)).collect(),
            // material -> unit, matching the F_<psi>_<k> naming
            per_unit_material: s
                .total_material
                .keys()
                .map(|psi| {
                    let row = s
                        .per_unit_material
                        .iter()
                        .map(|(k, row)| (key(k.0), row.get(psi).copied().unwrap_or(0)))
                        .collect();
                    (key(psi.0), row)
                })
                .collect(),
            total_material: s.total_material.iter().map(|(p, &m)| (key(p.0), m)).collect(),
            l_hat: s.total_mass,
            matrices: s.material_matrices.iter().map(|(p, m)| (key(p.0), m.clone())).collect(),
            status: s.status.iter().map(|(k, &st)| (key(k.0), st)).collect(),
        }
    }

    pub fn to_snapshot(&self) -> Result<SynchroSnapshot, String> {
        fn id(k: &str) -> Result<u32, String> {
            k.parse().map_err(|_| format!("key {k:?} is not an integer"))
        }
        let mut per_unit_material: BTreeMap<CompartmentId, BTreeMap<MaterialId, u64>> = BTreeMap::new();
        for k in self.m_hat.keys() {
            per_unit_material.insert(CompartmentId(id(k)?), BTreeMap::new());
        }
        for (psi, row) in &self.per_unit_material {
            for (k, &v) in row {
                per_unit_material
                    .entry(CompartmentId(id(k)?))
                    .or_default()
                    .insert(MaterialId(id(psi)?), v);
            }
        }
        Ok(SynchroSnapshot {
            epoch: self.epoch,
            per_unit_mass: self
                .m_hat
                .iter()
                .map(|(k, &v)| Ok((CompartmentId(id(k)?), v)))
                .collect::<Result<_, String>>()?,
            per_unit_material,
            total_material: self
                .total_material
                .iter()
                .map(|(k, &v)| Ok((MaterialId(id(k)?), v)))
                .collect::<Result<_, String>>()?,
            total_mass: self.l_hat,
            material_matrices: self
                .matrices
                .iter()
                .map(|(k, m)| Ok((MaterialId(id(k)?), m.clone())))
                .collect::<Result<_, String>>()?,
            status: self
                .status
                .iter()
                .map(|(k, &st)| Ok((CompartmentId(id(k)?), st)))
                .collect::<Result<_, String>>()?,
        })
    }

    /// Canonical single-line JSON (sorted keys), no terminator.
    pub fn to_line(&self) -> String {
        serde_json::to_value(self).expect("record serializes").to_string()
    }
}

/// Column layout of `snapshots.csv`, fixed by the network's units and the
/// registry's materials.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvLayout {
    units: Vec<CompartmentId>,
    materials: Vec<MaterialId>,
}

impl CsvLayout {
    pub fn new(net: &TmnNetwork, reg: &CompositionRegistry) -> Self {
        CsvLayout {
            units: net.mmus().iter().copied().collect(),
            materials: reg.materials().keys().copied().collect(),
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut cols = vec!["epoch".to_string(), CSV_TIMESTAMP_COLUMN.to_string()];
        cols.extend(self.units.iter().map(|k| format!("m_hat_{k}")));
        for psi in &self.materials {
            cols.extend(self.units.iter().map(|k| format!("F_{psi}_{k}")));
        }
        cols.extend(self.materials.iter().map(|psi| format!("F_{psi}_total")));
        cols.push("l_hat".into());
        cols.extend(self.units.iter().map(|k| format!("status_{k}")));
        cols
    }

    pub fn row(&self, s: &SynchroSnapshot, ts_ms: u64) -> Vec<String> {
        let mut cols = vec![s.epoch.to_string(), iso_timestamp(ts_ms)];
        cols.extend(
            self.units
                .iter()
                .map(|k| s.per_unit_mass.get(k).copied().unwrap_or(0).to_string()),
        );
        for &psi in &self.materials {
            cols.extend(
                self.units
                    .iter()
                    .map(|&k| s.unit_material(k, psi).unwrap_or(0).to_string()),
            );
        }
        cols.extend(
            self.materials
                .iter()
                .map(|psi| s.total_material.get(psi).copied().unwrap_or(0).to_string()),
        );
        cols.push(s.total_mass.to_string());
        cols.extend(
            self.units
                .iter()
                .map(|k| s.status.get(k).copied().unwrap_or(UnitStatus::Absent).to_string()),
        );
        cols
    }
}

pub fn iso_timestamp(ms: u64) -> String {
    chrono::DateTime::from_timestamp_millis(ms as i64)
        .map(|t| t.to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
        .unwrap_or_default()
}

fn csv_line(fields: &[String]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(fields).expect("in-memory write");
    w.into_inner().expect("in-memory flush")
}

/// Appends snapshots to `snapshots.csv` and `snapshots.jsonl`. When a file
/// cannot be opened or written, rows are queued and the open is retried on
/// the next call.
pub struct SnapshotSink {
    layout: CsvLayout,
    csv_path: PathBuf,
    jsonl_path: PathBuf,
    csv: Option<File>,
    jsonl: Option<File>,
    pending_csv: Vec<Vec<u8>>,
    pending_jsonl: Vec<Vec<u8>>,
}

impl SnapshotSink {
    pub fn new(out_dir: &Path, layout: CsvLayout) -> Self {
        SnapshotSink {
            layout,
            csv_path: out_dir.join(SNAPSHOTS_CSV),
            jsonl_path: out_dir.join(SNAPSHOTS_JSONL),
            csv: None,
            jsonl: None,
            pending_csv: Vec::new(),
            pending_jsonl: Vec::new(),
        }
    }

    /// Creates both files (CSV with header) even when no snapshot follows.
    pub fn open(&mut self) -> Result<(), OutputError> {
        let r1 = Self::flush_to(&self.csv_path, &mut self.csv, &mut self.pending_csv, Some(&self.layout));
        let r2 = Self::flush_to(&self.jsonl_path, &mut self.jsonl, &mut self.pending_jsonl, None);
        r1.and(r2)
    }

    pub fn persist(&mut self, s: &SynchroSnapshot, ts_ms: u64) -> Result<(), OutputError> {
        self.pending_csv.push(csv_line(&self.layout.row(s, ts_ms)));
        let mut line = SnapshotRecord::from_snapshot(s, ts_ms).to_line().into_bytes();
        line.push(b'\n');
        self.pending_jsonl.push(line);
        self.open()
    }

    pub fn backlog(&self) -> usize {
        self.pending_csv.len().max(self.pending_jsonl.len())
    }

    fn flush_to(
        path: &Path,
        handle: &mut Option<File>,
        pending: &mut Vec<Vec<u8>>,
        header: Option<&CsvLayout>,
    ) -> Result<(), OutputError> {
        let unavailable = |source| OutputError::SinkUnavailable {
            path: path.to_path_buf(),
            source,
        };
        if handle.is_none() {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(unavailable)?;
            if let Some(layout) = header {
                if f.metadata().map_err(unavailable)?.len() == 0 {
                    f.write_all(&csv_line(&layout.header())).map_err(unavailable)?;
                }
            }
            *handle = Some(f);
        }
        let f = handle.as_mut().expect("opened above");
        let result = pending
            .iter()
            .try_for_each(|line| f.write_all(line))
            .and_then(|_| f.flush());
        match result {
            Ok(()) => {
                pending.clear();
                Ok(())
            }
            Err(e) => {
                // partial writes may have landed; reopen next time
                *handle = None;
                Err(unavailable(e))
            }
        }
    }
}

/// Reads every record from a JSONL file.
pub fn read_jsonl(path: &Path) -> Result<Vec<SnapshotRecord>, OutputError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| OutputError::BadRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// JSONL lines with the timestamp field removed, for run-to-run comparison.
pub fn comparable_jsonl(path: &Path) -> Result<Vec<String>, OutputError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let mut v: serde_json::Value = serde_json::from_str(l).map_err(|e| OutputError::BadRecord {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if let Some(obj) = v.as_object_mut() {
                obj.remove(JSON_TIMESTAMP_FIELD);
            }
            Ok(v.to_string())
        })
        .collect()
}

/// CSV rows (header included) with the timestamp column removed.
pub fn comparable_csv(path: &Path) -> Result<Vec<String>, OutputError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| OutputError::BadRecord {
            line: 0,
            reason: e.to_string(),
        })?;
    let mut skip = None;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| OutputError::BadRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if i == 0 {
            skip = rec.iter().position(|c| c == CSV_TIMESTAMP_COLUMN);
        }
        let kept: Vec<&str> = rec
            .iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != skip)
            .map(|(_, c)| c)
            .collect();
        rows.push(kept.join(","));
    }
    Ok(rows)
}

/// Maps epoch indices onto a time axis for plot files.
#[derive(Debug, Clone)]
pub struct TimeAxis {
    /// Column name, e.g. `t_h` or `t_s`.
    pub label: String,
    pub step: f64,
}

impl TimeAxis {
    pub fn hours(step_h: f64) -> Self {
        TimeAxis {
            label: "t_h".into(),
            step: step_h,
        }
    }

    pub fn seconds_from_ms(period_ms: u64) -> Self {
        TimeAxis {
            label: "t_s".into(),
            step: period_ms as f64 / 1000.0,
        }
    }

    pub fn format(&self, epoch: u64) -> String {
        format_decimal(epoch as f64 * self.step)
    }
}

/// Fixed-point with trailing zeros trimmed; hides binary rounding noise such
/// as `10.100000000000001`.
pub fn format_decimal(x: f64) -> String {
    let s = format!("{x:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

type Series = Box<dyn Fn(&SynchroSnapshot) -> u64>;

/// Writes one TSV per series (time vs. `m_hat_k`, `F_psi_k`, `F_psi_total`,
/// `l_hat`) plus `latest_bars.tsv`, one row per material with per-unit and
/// total columns for the most recent snapshot. Writes nothing for an empty
/// history.
pub fn emit_plot_data(
    history: &[SynchroSnapshot],
    reg: &CompositionRegistry,
    axis: &TimeAxis,
    out_dir: &Path,
) -> io::Result<Vec<PathBuf>> {
    let Some(latest) = history.last() else {
        return Ok(Vec::new());
    };
    fs::create_dir_all(out_dir)?;
    let units: Vec<CompartmentId> = latest.per_unit_mass.keys().copied().collect();
    let materials: Vec<MaterialId> = reg.materials().keys().copied().collect();

    let mut series: Vec<(String, Series)> = Vec::new();
    for &k in &units {
        series.push((
            format!("m_hat_{k}"),
            Box::new(move |s: &SynchroSnapshot| s.per_unit_mass.get(&k).copied().unwrap_or(0)),
        ));
    }
    for &psi in &materials {
        for &k in &units {
            series.push((
                format!("F_{psi}_{k}"),
                Box::new(move |s: &SynchroSnapshot| s.unit_material(k, psi).unwrap_or(0)),
            ));
        }
        series.push((
            format!("F_{psi}_total"),
            Box::new(move |s: &SynchroSnapshot| s.total_material.get(&psi).copied().unwrap_or(0)),
        ));
    }
    series.push(("l_hat".into(), Box::new(|s: &SynchroSnapshot| s.total_mass)));

    let mut written = Vec::new();
    for (name, value) in &series {
        let path = out_dir.join(format!("{name}.tsv"));
        let mut text = format!("epoch\t{}\t{name}_mg\n", axis.label);
        for s in history {
            text.push_str(&format!("{}\t{}\t{}\n", s.epoch, axis.format(s.epoch), value(s)));
        }
        fs::write(&path, text)?;
        written.push(path);
    }

    let path = out_dir.join("latest_bars.tsv");
    let mut text = String::from("material_id\tmaterial");
    for k in &units {
        text.push_str(&format!("\tunit_{k}_mg"));
    }
    text.push_str("\ttotal_mg\n");
    for (&psi, name) in reg.materials() {
        text.push_str(&format!("{psi}\t{name}"));
        for &k in &units {
            text.push_str(&format!("\t{}", latest.unit_material(k, psi).unwrap_or(0)));
        }
        text.push_str(&format!(
            "\t{}\n",
            latest.total_material.get(&psi).copied().unwrap_or(0)
        ));
    }
    fs::write(&path, text)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimal_formatting() {
        assert_eq!(format_decimal(101.0 * 0.1), "10.1");
        assert_eq!(format_decimal(0.0), "0");
        assert_eq!(format_decimal(70.0), "70");
        assert_eq!(TimeAxis::seconds_from_ms(50).format(3), "0.15");
    }

    #[test]
    fn iso_timestamps() {
        assert_eq!(iso_timestamp(0), "1970-01-01T00:00:00.000Z");
        assert_eq!(iso_timestamp(36_000_000), "1970-01-01T10:00:00.000Z");
    }
}
