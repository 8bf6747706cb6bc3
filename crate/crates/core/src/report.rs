//! Trace CSVs and multi-trial JSON summaries.
//!
//! Trace CSV: one `# bfa-trace v1` line, then a header and one row per
//! state, starting with the clean model at iteration 0:
//!
//! ```text
//! iteration,N_flip,D_B,sample_loss,val_top1,val_top5,chosen_layer,bit_address,val_loss
//! ```
//!
//! `bit_address` lists the committed bits as `layer:weight:bit`, joined by
//! `;`. Empty cells mean "not applicable".

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackTrace;
use crate::error::Result;

pub const TRACE_HEADER: &str = "# bfa-trace v1";
pub const SUMMARY_FORMAT: &str = "bfa-summary v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    #[serde(rename = "N_flip")]
    pub n_flip: usize,
    #[serde(rename = "D_B")]
    pub hamming: u64,
    pub sample_loss: Option<f64>,
    pub val_top1: f64,
    pub val_top5: Option<f64>,
    pub chosen_layer: Option<usize>,
    pub bit_address: String,
    pub val_loss: f64,
}

pub fn trace_rows(trace: &AttackTrace) -> Vec<TraceRow> {
    let mut rows = vec![TraceRow {
        iteration: 0,
        n_flip: 0,
        hamming: 0,
        sample_loss: trace.clean_sample_loss,
        val_top1: trace.clean.top1,
        val_top5: trace.clean.top5,
        chosen_layer: None,
        bit_address: String::new(),
        val_loss: trace.clean.loss,
    }];
    for s in &trace.steps {
        let addrs: Vec<String> = s
            .record
            .flips
            .iter()
            .map(|f| f.address.to_string())
            .collect();
        rows.push(TraceRow {
            iteration: s.record.iteration,
            n_flip: s.n_flip,
            hamming: s.hamming,
            sample_loss: s.record.sample_loss,
            val_top1: s.validation.top1,
            val_top5: s.validation.top5,
            chosen_layer: Some(s.record.layer),
            bit_address: addrs.join(";"),
            val_loss: s.validation.loss,
        });
    }
    rows
}

pub fn write_trace<W: Write>(trace: &AttackTrace, mut out: W) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    let mut w = csv::Writer::from_writer(out);
    for row in trace_rows(trace) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_csv(trace: &AttackTrace, path: &Path) -> Result<()> {
    write_trace(trace, BufWriter::new(File::create(path)?))
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// N_flip at the first row whose top-1 is at or below `threshold`.
pub fn flips_to_threshold(rows: &[TraceRow], threshold: f64) -> Option<usize> {
    rows.iter()
        .find(|r| r.val_top1 <= threshold)
        .map(|r| r.n_flip)
}

/// Middle value, or the mean of the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub seed: u64,
    pub csv: PathBuf,
    pub clean_top1: f64,
    pub final_top1: f64,
    pub final_top5: Option<f64>,
    pub final_loss_finite: bool,
    pub n_flip: usize,
    pub hamming: u64,
    pub flips_to_threshold: Option<usize>,
    pub status: crate::attack::AttackStatus,
}

impl TrialSummary {
    pub fn new(
        trial: usize,
        seed: u64,
        csv: PathBuf,
        trace: &AttackTrace,
        threshold: Option<f64>,
    ) -> Self {
        let last = trace.final_eval();
        Self {
            trial,
            seed,
            csv,
            clean_top1: trace.clean.top1,
            final_top1: last.top1,
            final_top5: last.top5,
            final_loss_finite: last.loss_is_finite(),
            n_flip: trace.n_flip(),
            hamming: trace.hamming(),
            flips_to_threshold: threshold.and_then(|t| trace.flips_to_reach(t)),
            status: trace.status,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: String,
    pub kind: String,
    pub config: serde_json::Value,
    pub notes: Vec<String>,
    pub threshold: Option<f64>,
    pub trials: Vec<TrialSummary>,
    /// Present only when every trial reached the threshold.
    pub median_flips_to_threshold: Option<f64>,
    pub median_final_top1: Option<f64>,
    /// Median of clean minus final top-1, in accuracy points.
    pub median_degradation: Option<f64>,
}

impl Summary {
    pub fn new(
        kind: &str,
        config: serde_json::Value,
        notes: Vec<String>,
        threshold: Option<f64>,
        trials: Vec<TrialSummary>,
    ) -> Self {
        let reached: Option<Vec<f64>> = trials
            .iter()
            .map(|t| t.flips_to_threshold.map(|n| n as f64))
            .collect();
        let finals: Vec<f64> = trials.iter().map(|t| t.final_top1).collect();
        let drops: Vec<f64> = trials
            .iter()
            .map(|t| 100.0 * (t.clean_top1 - t.final_top1))
            .collect();
        Self {
            format: SUMMARY_FORMAT.into(),
            kind: kind.into(),
            config,
            notes,
            threshold,
            median_flips_to_threshold: threshold.and(reached).and_then(|r| median(&r)),
            median_final_top1: median(&finals),
            median_degradation: median(&drops),
            trials,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(io::BufReader::new(File::open(
            path,
        )?))?)
    }
}

/// Median N_flip-to-threshold recomputed from raw trace CSVs.
pub fn median_flips_from_csvs(paths: &[PathBuf], threshold: f64) -> Result<Option<f64>> {
    let mut flips = Vec::with_capacity(paths.len());
    for p in paths {
        match flips_to_threshold(&read_trace_csv(p)?, threshold) {
            Some(n) => flips.push(n as f64),
            None => return Ok(None),
        }
    }
    Ok(median(&flips))
}
