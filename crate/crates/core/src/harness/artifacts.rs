//! Run outputs. Everything is rendered to bytes in memory first and written
//! in one pass at the end, so reruns produce identical files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::optimize::StepRecord;

pub const TRACE_HEADER: &str = "step,risk,qhat,max_row_move,move_bound,min_margin_u,cum_qhat";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

impl Status {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    /// Fail dominates, then inconclusive.
    pub fn combine(statuses: impl IntoIterator<Item = Status>) -> Self {
        let mut out = Status::Pass;
        for s in statuses {
            match s {
                Status::Fail => return Status::Fail,
                Status::Inconclusive => out = Status::Inconclusive,
                Status::Pass => {}
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
}

/// One tracked inequality `observed <relation> threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub observed: f64,
    pub relation: Relation,
    pub threshold: f64,
    pub status: Status,
}

impl Check {
    pub fn at_most(name: impl Into<String>, observed: f64, threshold: f64) -> Self {
        Self::new(name, observed, Relation::AtMost, threshold)
    }

    pub fn at_least(name: impl Into<String>, observed: f64, threshold: f64) -> Self {
        Self::new(name, observed, Relation::AtLeast, threshold)
    }

    /// NaN observations fail.
    pub fn new(name: impl Into<String>, observed: f64, relation: Relation, threshold: f64) -> Self {
        let ok = match relation {
            Relation::AtMost => observed <= threshold,
            Relation::AtLeast => observed >= threshold,
        };
        Self {
            name: name.into(),
            observed,
            relation,
            threshold,
            status: Status::from_bool(ok),
        }
    }

    pub fn with_status(mut self, status: Status) -> Self {
        self.status = status;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    /// Short tag naming the claim under test.
    pub claim: String,
    pub parameters: Value,
    pub observed: Value,
    pub checks: Vec<Check>,
    pub status: Status,
}

/// A lemma-level record: `observed` against `threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub lemma: String,
    pub parameters: Value,
    pub threshold: f64,
    pub observed: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub summary: Summary,
    pub lemma_checks: Vec<LemmaCheck>,
    /// Rendered `train_trace.csv`, when the experiment trains a network.
    pub train_trace: Option<String>,
    /// Further files as `(name, contents)`.
    pub extra: Vec<(String, String)>,
}

impl RunArtifacts {
    pub fn status(&self) -> Status {
        self.summary.status
    }

    /// `(file name, contents)` for every artifact, in write order.
    pub fn files(&self) -> Result<Vec<(String, String)>> {
        let mut files = vec![
            ("config.json".to_string(), to_json(&self.config)?),
            ("summary.json".to_string(), to_json(&self.summary)?),
            (
                "lemma_checks.json".to_string(),
                to_json(&self.lemma_checks)?,
            ),
        ];
        if let Some(trace) = &self.train_trace {
            files.push(("train_trace.csv".to_string(), trace.clone()));
        }
        files.extend(self.extra.iter().cloned());
        Ok(files)
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, contents) in self.files()? {
            std::fs::write(dir.join(name), contents)?;
        }
        Ok(())
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Fixed 17-significant-digit rendering used in every CSV.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn render_trace(records: &[StepRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 160);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step,
            fmt_f64(r.risk),
            fmt_f64(r.qhat),
            fmt_f64(r.max_row_move),
            fmt_f64(r.move_bound),
            fmt_f64(r.min_margin_u),
            fmt_f64(r.cum_qhat)
        );
    }
    out
}

/// A CSV with the given header; floats in the fixed format.
pub fn render_csv(header: &[&str], rows: &[Vec<CsvCell>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(CsvCell::render).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum CsvCell {
    Int(u64),
    Float(f64),
    Text(String),
}

impl CsvCell {
    fn render(&self) -> String {
        match self {
            CsvCell::Int(v) => v.to_string(),
            CsvCell::Float(v) => fmt_f64(*v),
            CsvCell::Text(s) => s.clone(),
        }
    }
}

impl From<usize> for CsvCell {
    fn from(v: usize) -> Self {
        CsvCell::Int(v as u64)
    }
}

impl From<u64> for CsvCell {
    fn from(v: u64) -> Self {
        CsvCell::Int(v)
    }
}

impl From<f64> for CsvCell {
    fn from(v: f64) -> Self {
        CsvCell::Float(v)
    }
}

impl From<&str> for CsvCell {
    fn from(v: &str) -> Self {
        CsvCell::Text(v.into())
    }
}
