use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::agents::MetricsSink;
use crate::diagnostics::MetricsRow;
use crate::error::{contract_err, Error, Result};
use crate::networks::{checkpoint_save, Checkpoint};

use super::write_atomic;

/// Renders `x` with nine significant digits, `%.9g` style.
pub fn fmt_sig9(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Append-only metrics log. The header is fixed by the first record; the
/// whole file is rewritten atomically on every append.
#[derive(Debug)]
pub struct CsvLog {
    path: PathBuf,
    jsonl: Option<PathBuf>,
    columns: Option<Vec<String>>,
    csv: String,
    json: String,
}

impl CsvLog {
    pub fn new(path: impl Into<PathBuf>, jsonl_mirror: bool) -> Self {
        let path = path.into();
        let jsonl = jsonl_mirror.then(|| path.with_extension("jsonl"));
        Self {
            path,
            jsonl,
            columns: None,
            csv: String::new(),
            json: String::new(),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one record of `step` followed by named metrics.
    pub fn log_record(&mut self, step: u64, fields: &[(&str, Option<f64>)]) -> Result<()> {
        match &self.columns {
            None => {
                let mut cols = vec!["step".to_string()];
                cols.extend(fields.iter().map(|(n, _)| n.to_string()));
                self.csv.push_str(&cols.join(","));
                self.csv.push('\n');
                self.columns = Some(cols);
            }
            Some(cols) => {
                let same = cols.len() == fields.len() + 1 && cols[1..].iter().zip(fields).all(|(c, (n, _))| c == n);
                if !same {
                    let got: Vec<&str> = fields.iter().map(|(n, _)| *n).collect();
                    return Err(contract_err!(
                        "schema drift in {}: header {:?}, record {:?}",
                        self.path.display(),
                        &cols[1..],
                        got
                    ));
                }
            }
        }
        let _ = write!(self.csv, "{step}");
        for (_, v) in fields {
            self.csv.push(',');
            if let Some(v) = v {
                self.csv.push_str(&fmt_sig9(*v));
            }
        }
        self.csv.push('\n');
        write_atomic(&self.path, self.csv.as_bytes())?;

        if let Some(jp) = &self.jsonl {
            let mut obj = serde_json::Map::new();
            obj.insert("step".into(), step.into());
            for (n, v) in fields {
                let val = v
                    .and_then(serde_json::Number::from_f64)
                    .map_or(serde_json::Value::Null, Into::into);
                obj.insert(n.to_string(), val);
            }
            self.json.push_str(&serde_json::Value::Object(obj).to_string());
            self.json.push('\n');
            write_atomic(jp, self.json.as_bytes())?;
        }
        Ok(())
    }

    pub fn log_row(&mut self, row: &MetricsRow) -> Result<()> {
        let m = row.metrics();
        let fields: Vec<(&str, Option<f64>)> = MetricsRow::COLUMNS[1..].iter().copied().zip(m).collect();
        self.log_record(row.step, &fields)
    }
}

/// Parses a metrics CSV written by [`CsvLog::log_row`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |offset: usize, msg: String| Error::Format {
        offset,
        msg: format!("{}: {msg}", path.display()),
    };
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().ok_or_else(|| bad(0, "empty file".into()))?;
    if header.trim_end() != MetricsRow::COLUMNS.join(",") {
        return Err(bad(0, format!("unexpected header {:?}", header.trim_end())));
    }
    let mut offset = header.len();
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != MetricsRow::COLUMNS.len() {
            return Err(bad(
                offset,
                format!("expected {} fields, got {}", MetricsRow::COLUMNS.len(), fields.len()),
            ));
        }
        let step = fields[0]
            .parse()
            .map_err(|_| bad(offset, format!("bad step {:?}", fields[0])))?;
        let mut m = [None; 15];
        for (slot, f) in m.iter_mut().zip(&fields[1..]) {
            if !f.is_empty() {
                *slot = Some(f.parse().map_err(|_| bad(offset, format!("bad number {f:?}")))?);
            }
        }
        rows.push(MetricsRow::from_metrics(step, m));
        offset += line.len();
    }
    Ok(rows)
}

/// Sink for one experiment cell: metrics CSV plus the latest checkpoint.
#[derive(Debug)]
pub struct CellSink {
    pub log: CsvLog,
    checkpoint_path: PathBuf,
}

impl CellSink {
    pub fn new(dir: &Path, jsonl: bool) -> Self {
        Self {
            log: CsvLog::new(dir.join("metrics.csv"), jsonl),
            checkpoint_path: dir.join("checkpoint.sacx"),
        }
    }
}

impl MetricsSink for CellSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.log.log_row(row)
    }

    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        checkpoint_save(ckpt, &self.checkpoint_path)
    }
}
