//! JSONL and CSV trace files.
//!
//! JSONL: an optional first line `{"meta": {"L": .., "K": .., "loss_names": [..], "loss_bound": ..}}`
//! followed by one record per line:
//! `{"id": .., "conf": [..], "label": ..|null, "dist": [[..]..]|null, "losses": {..}|null}`.
//!
//! CSV: header `id, conf_1..conf_{L-1}, [label], loss_<name>_1..loss_<name>_L`.
//! Distributions are JSONL-only.
//!
//! Either format may take its meta from a sidecar `<stem>.meta.json`; without
//! one, the shape is inferred from the first record and `loss_bound` defaults to 1.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::validate::{meta_errors, sample_violations};
use super::{ExitTrace, TraceMeta, TraceSet};
use crate::error::{Error, Result};
use crate::output::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Jsonl,
    Csv,
}

impl TraceFormat {
    /// Guess from the file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "jsonl" | "ndjson" | "json" => Some(TraceFormat::Jsonl),
            "csv" => Some(TraceFormat::Csv),
            _ => None,
        }
    }
}

impl FromStr for TraceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(TraceFormat::Jsonl),
            "csv" => Ok(TraceFormat::Csv),
            other => Err(Error::Config(format!("unknown trace format {other:?}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    conf: Vec<f64>,
    #[serde(default)]
    label: Option<usize>,
    #[serde(default)]
    dist: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    losses: Option<BTreeMap<String, Vec<f64>>>,
}

impl From<Record> for ExitTrace {
    fn from(r: Record) -> Self {
        ExitTrace {
            id: r.id,
            confidences: r.conf,
            label: r.label,
            distributions: r.dist,
            losses: r.losses,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: TraceMeta,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn read_sidecar(path: &Path) -> Result<Option<TraceMeta>> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

fn record_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Record {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn infer_meta(first: &ExitTrace) -> TraceMeta {
    TraceMeta {
        num_exits: first.confidences.len() + 1,
        num_classes: first.distributions.as_ref().and_then(|d| d.first()).map(Vec::len),
        loss_names: first
            .losses
            .as_ref()
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default(),
        loss_bound: 1.0,
    }
}

/// Checks one record against `meta`, attributing failures to `line`.
fn check_record(path: &Path, line: usize, meta: &TraceMeta, sample: &ExitTrace) -> Result<()> {
    let violations = sample_violations(meta, sample);
    if violations.is_empty() {
        return Ok(());
    }
    let text = violations
        .iter()
        .map(|(_, m)| m.as_str())
        .collect::<Vec<_>>()
        .join("; ");
    Err(record_err(path, line, text))
}

fn finish(path: &Path, meta: Option<TraceMeta>, rows: Vec<(usize, ExitTrace)>) -> Result<TraceSet> {
    let meta = match meta {
        Some(m) => m,
        None => match rows.first() {
            Some((_, first)) => infer_meta(first),
            None => return Err(Error::InvalidTraces(format!("{}: no records", path.display()))),
        },
    };
    if let Some(e) = meta_errors(&meta).into_iter().next() {
        return Err(Error::InvalidTraces(format!("{}: {e}", path.display())));
    }
    for (line, sample) in &rows {
        check_record(path, *line, &meta, sample)?;
    }
    TraceSet::new(meta, rows.into_iter().map(|(_, s)| s).collect())
}

fn read_jsonl(path: &Path) -> Result<TraceSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut meta = read_sidecar(path)?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if rows.is_empty() && trimmed.contains("\"meta\"") {
            if let Ok(m) = serde_json::from_str::<MetaLine>(trimmed) {
                meta = Some(m.meta);
                continue;
            }
        }
        let record: Record = serde_json::from_str(trimmed)
            .map_err(|e| record_err(path, lineno, format!("malformed record: {e}")))?;
        rows.push((lineno, ExitTrace::from(record)));
    }
    finish(path, meta, rows)
}

enum Column {
    Id,
    Conf(usize),
    Label,
    Loss(String, usize),
}

fn parse_column(name: &str) -> Option<Column> {
    match name {
        "id" => return Some(Column::Id),
        "label" => return Some(Column::Label),
        _ => {}
    }
    if let Some(j) = name.strip_prefix("conf_") {
        return j.parse().ok().filter(|&j| j >= 1).map(Column::Conf);
    }
    let rest = name.strip_prefix("loss_")?;
    let (loss, exit) = rest.rsplit_once('_')?;
    let exit: usize = exit.parse().ok().filter(|&e| e >= 1)?;
    (!loss.is_empty()).then(|| Column::Loss(loss.to_string(), exit))
}

fn parse_cell<T: FromStr>(path: &Path, line: usize, col: &str, cell: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    cell.trim()
        .parse()
        .map_err(|e| record_err(path, line, format!("column {col}: cannot parse {cell:?}: {e}")))
}

fn read_csv(path: &Path) -> Result<TraceSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::InvalidTraces(format!("{}: {other:?}", path.display())),
        })?;
    let headers = reader.headers()?.clone();
    let columns = headers
        .iter()
        .map(|h| {
            parse_column(h.trim()).ok_or_else(|| record_err(path, 1, format!("unrecognized column {h:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if !columns.iter().any(|c| matches!(c, Column::Id)) {
        return Err(record_err(path, 1, "missing id column"));
    }
    let n_conf = columns.iter().filter(|c| matches!(c, Column::Conf(_))).count();
    let mut loss_names: Vec<String> = Vec::new();
    let mut n_exits_by_loss: BTreeMap<String, usize> = BTreeMap::new();
    for c in &columns {
        if let Column::Loss(name, exit) = c {
            if !loss_names.contains(name) {
                loss_names.push(name.clone());
            }
            let e = n_exits_by_loss.entry(name.clone()).or_default();
            *e = (*e).max(*exit);
        }
    }

    let sidecar = read_sidecar(path)?;
    let meta = sidecar.clone().unwrap_or_else(|| TraceMeta {
        num_exits: n_conf + 1,
        num_classes: None,
        loss_names: loss_names.clone(),
        loss_bound: 1.0,
    });
    if meta.num_exits != n_conf + 1 {
        return Err(record_err(
            path,
            1,
            format!(
                "header has {n_conf} confidence columns but L = {}",
                meta.num_exits
            ),
        ));
    }
    if let Some((name, &l)) = n_exits_by_loss.iter().find(|(_, &l)| l != meta.num_exits) {
        return Err(record_err(
            path,
            1,
            format!("loss {name:?} has {l} exit columns but L = {}", meta.num_exits),
        ));
    }

    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| record_err(path, line, format!("malformed record: {e}")))?;
        if record.len() != columns.len() {
            return Err(record_err(
                path,
                line,
                format!("expected {} fields, got {}", columns.len(), record.len()),
            ));
        }
        let mut sample = ExitTrace {
            id: String::new(),
            confidences: vec![f64::NAN; n_conf],
            label: None,
            distributions: None,
            losses: (!loss_names.is_empty()).then(|| {
                loss_names
                    .iter()
                    .map(|n| (n.clone(), vec![f64::NAN; meta.num_exits]))
                    .collect()
            }),
        };
        for ((col, cell), header) in columns.iter().zip(record.iter()).zip(headers.iter()) {
            match col {
                Column::Id => sample.id = cell.to_string(),
                Column::Conf(j) => {
                    let slot = sample
                        .confidences
                        .get_mut(j - 1)
                        .ok_or_else(|| record_err(path, 1, format!("unexpected column {header}")))?;
                    *slot = parse_cell(path, line, header, cell)?;
                }
                Column::Label => {
                    if !cell.trim().is_empty() {
                        sample.label = Some(parse_cell(path, line, header, cell)?);
                    }
                }
                Column::Loss(name, exit) => {
                    let v = parse_cell(path, line, header, cell)?;
                    let losses = sample.losses.as_mut().expect("losses allocated");
                    losses.get_mut(name).expect("declared loss")[exit - 1] = v;
                }
            }
        }
        rows.push((line, sample));
    }
    finish(path, Some(meta), rows)
}

/// Loads and validates a trace file. Sample order follows the file.
pub fn load_traces(path: impl AsRef<Path>, format: TraceFormat) -> Result<TraceSet> {
    let path = path.as_ref();
    match format {
        TraceFormat::Jsonl => read_jsonl(path),
        TraceFormat::Csv => read_csv(path),
    }
}

fn jsonl_bytes(ts: &TraceSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    serde_json::to_writer(
        &mut out,
        &MetaLine {
            meta: ts.meta().clone(),
        },
    )?;
    out.push(b'\n');
    for s in ts.samples() {
        let record = Record {
            id: s.id.clone(),
            conf: s.confidences.clone(),
            label: s.label,
            dist: s.distributions.clone(),
            losses: s.losses.clone(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn csv_bytes(ts: &TraceSet) -> Result<Vec<u8>> {
    if ts.has_distributions() {
        return Err(Error::Config(
            "distributions can only be written as JSONL; drop them first".into(),
        ));
    }
    let l = ts.num_exits();
    let labeled = ts.samples().iter().any(|s| s.label.is_some());
    let mut header = vec!["id".to_string()];
    header.extend((1..l).map(|j| format!("conf_{j}")));
    if labeled {
        header.push("label".into());
    }
    for name in ts.loss_names() {
        header.extend((1..=l).map(|e| format!("loss_{name}_{e}")));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for s in ts.samples() {
        let mut row = vec![s.id.clone()];
        row.extend(s.confidences.iter().map(f64::to_string));
        if labeled {
            row.push(s.label.map(|y| y.to_string()).unwrap_or_default());
        }
        for name in ts.loss_names() {
            let v = s.loss(name).expect("validated");
            row.extend(v.iter().map(f64::to_string));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv buffer>", e))?;
    w.into_inner()
        .map_err(|e| Error::InvalidTraces(format!("csv buffer: {e}")))
}

/// Writes `ts` atomically. CSV output also writes a `<stem>.meta.json` sidecar.
pub fn save_traces(ts: &TraceSet, path: impl AsRef<Path>, format: TraceFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        TraceFormat::Jsonl => write_atomic(path, &jsonl_bytes(ts)?),
        TraceFormat::Csv => {
            let bytes = csv_bytes(ts)?;
            let mut meta = serde_json::to_vec_pretty(ts.meta())?;
            meta.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            write_atomic(&sidecar_path(path), &meta)?;
            write_atomic(path, &bytes)
        }
    }
}
