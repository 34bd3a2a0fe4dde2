//! CSV and JSON report rows.

use std::io::{Read, Write};

use anyhow::Result;
use clap::ValueEnum;
use effconf_core::profiler::MAddsReport;
use effconf_core::toy::TrainRecord;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// One `profile` row: `config,frames,total_madds,ffn,att_scores,att_proj,conv,stem,head,params`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MAddsRow {
    pub config: String,
    pub frames: usize,
    pub total_madds: u64,
    pub ffn: u64,
    pub att_scores: u64,
    pub att_proj: u64,
    pub conv: u64,
    pub stem: u64,
    pub head: u64,
    pub params: u64,
}

impl From<&MAddsReport> for MAddsRow {
    fn from(r: &MAddsReport) -> Self {
        Self {
            config: r.config.clone(),
            frames: r.frames,
            total_madds: r.total,
            ffn: r.ffn,
            att_scores: r.att_scores,
            att_proj: r.att_proj,
            conv: r.conv,
            stem: r.stem,
            head: r.head,
            params: r.params,
        }
    }
}

/// One `bench` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub preset: String,
    pub frames: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

/// One line of an `equiv` or `gradcheck` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub check: String,
    pub cases: usize,
    pub max_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    pub fn new(check: impl Into<String>, cases: usize, max_err: f64, tolerance: f64) -> Self {
        Self {
            check: check.into(),
            cases,
            max_err,
            tolerance,
            pass: max_err <= tolerance,
        }
    }
}

/// One `train-toy` log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: usize,
    pub loss: Option<f64>,
    pub accuracy: f64,
}

impl From<&TrainRecord> for TrainRow {
    fn from(r: &TrainRecord) -> Self {
        Self {
            step: r.step,
            loss: r.loss,
            accuracy: r.accuracy,
        }
    }
}

pub fn write_rows<T: Serialize, W: Write>(rows: &[T], format: Format, out: W) -> Result<()> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        Format::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, rows)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn read_rows<T: DeserializeOwned, R: Read>(input: R, format: Format) -> Result<Vec<T>> {
    Ok(match format {
        Format::Csv => csv::Reader::from_reader(input)
            .deserialize()
            .collect::<Result<Vec<T>, _>>()?,
        Format::Json => serde_json::from_reader(input)?,
    })
}
