//! Training telemetry rows, their CSV form, and plot-series extraction.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// One telemetry row. Optional fields are empty cells when the method or the
/// dataset does not define them (no anchor, unpaired records).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub reward_w: Option<f64>,
    pub reward_l: Option<f64>,
    pub reward_anchor: Option<f64>,
    pub margin: Option<f64>,
    pub accuracy: Option<f64>,
    pub sandwich: Option<f64>,
    pub sandwich_strict: Option<f64>,
    /// Mean full-distribution `KL(π_θ || π_ref)` over the dataset's prompts.
    pub kl_full: f64,
    /// Mean `log π_θ(y_w|x) - log π_ref(y_w|x)` over winning responses.
    pub winner_logratio: Option<f64>,
    pub grad_norm: f64,
    pub loss_winner_term: Option<f64>,
    pub loss_loser_term: Option<f64>,
}

pub const COLUMNS: [&str; 14] = [
    "step",
    "loss",
    "reward_w",
    "reward_l",
    "reward_anchor",
    "margin",
    "accuracy",
    "sandwich",
    "sandwich_strict",
    "kl_full",
    "winner_logratio",
    "grad_norm",
    "loss_winner_term",
    "loss_loser_term",
];

pub fn write_csv(rows: &[MetricsRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(COLUMNS).map_err(|e| LabError::parse("metrics", e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| LabError::parse("metrics", e))?;
    }
    w.flush().map_err(|e| LabError::parse("metrics", e))
}

pub fn to_csv_string(rows: &[MetricsRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    String::from_utf8(buf).map_err(|e| LabError::parse("metrics", e))
}

pub fn read_csv(input: impl Read) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| LabError::parse("metrics", e))?.clone();
    if header.iter().ne(COLUMNS) {
        return Err(LabError::parse("metrics", format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    r.deserialize().map(|row| row.map_err(|e| LabError::parse("metrics", e))).collect()
}

pub fn read_file(path: &Path) -> Result<Vec<MetricsRow>> {
    let f = fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    read_csv(f)
}

/// Write through a temporary sibling and rename, so a crash never leaves a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| LabError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| LabError::io(&tmp, e))?;
    f.sync_all().map_err(|e| LabError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

pub fn write_file(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_atomic(path, to_csv_string(rows)?.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Series {
    /// Winner, anchor and loser rewards.
    Anchor,
    Margin,
    Accuracy,
    /// Both KL readouts.
    Kl,
}

impl FromStr for Series {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor" => Ok(Series::Anchor),
            "margin" => Ok(Series::Margin),
            "accuracy" => Ok(Series::Accuracy),
            "kl" => Ok(Series::Kl),
            other => Err(LabError::Config(format!("unknown series {other:?} (anchor, margin, accuracy, kl)"))),
        }
    }
}

impl Series {
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Series::Anchor => &["reward_w", "reward_anchor", "reward_l"],
            Series::Margin => &["margin"],
            Series::Accuracy => &["accuracy"],
            Series::Kl => &["kl_full", "winner_logratio"],
        }
    }

    fn values(self, r: &MetricsRow) -> Vec<Option<f64>> {
        match self {
            Series::Anchor => vec![r.reward_w, r.reward_anchor, r.reward_l],
            Series::Margin => vec![r.margin],
            Series::Accuracy => vec![r.accuracy],
            Series::Kl => vec![Some(r.kl_full), r.winner_logratio],
        }
    }
}

/// Column-oriented `step,<series columns...>` table.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotTable {
    pub columns: Vec<String>,
    pub steps: Vec<usize>,
    /// `values[row][col]`, aligned with `columns[1..]`.
    pub values: Vec<Vec<Option<f64>>>,
}

pub fn plotdata(rows: &[MetricsRow], series: Series) -> PlotTable {
    let mut columns = vec!["step".to_string()];
    columns.extend(series.columns().iter().map(|c| c.to_string()));
    PlotTable {
        columns,
        steps: rows.iter().map(|r| r.step).collect(),
        values: rows.iter().map(|r| series.values(r)).collect(),
    }
}

impl PlotTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| LabError::parse("plot data", e);
        w.write_record(&self.columns).map_err(err)?;
        for (step, vals) in self.steps.iter().zip(&self.values) {
            let mut rec = vec![step.to_string()];
            rec.extend(vals.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&rec).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| LabError::parse("plot data", e))?;
        String::from_utf8(bytes).map_err(|e| LabError::parse("plot data", e))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let err = |e: csv::Error| LabError::parse("plot data", e);
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let columns: Vec<String> = r.headers().map_err(err)?.iter().map(String::from).collect();
        let (mut steps, mut values) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec.map_err(err)?;
            let num = |s: &str| s.parse::<f64>().map_err(|e| LabError::parse("plot data", e));
            steps.push(rec[0].parse().map_err(|e| LabError::parse("plot data", e))?);
            values.push(
                rec.iter()
                    .skip(1)
                    .map(|s| if s.is_empty() { Ok(None) } else { num(s).map(Some) })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Self { columns, steps, values })
    }
}
