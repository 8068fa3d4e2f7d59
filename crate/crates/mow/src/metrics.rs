//! Metrics stream: JSONL records (one per logging interval) plus a flat CSV
//! export for plotting.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskLossRecord {
    pub rec: f64,
    pub rew: f64,
    pub con: f64,
    pub task: f64,
    #[serde(rename = "dyn")]
    pub dyn_: f64,
    pub rep: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub phase: String,
    pub per_task: Vec<TaskLossRecord>,
    pub sigmas: Vec<f64>,
    pub balance: f64,
    pub objective: f64,
    pub wm_grad_norm: f64,
    /// Activated expert indices per task.
    pub router: Vec<Vec<usize>>,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub entropy: Option<f64>,
    pub mean_return: Option<f64>,
    /// Mean return of recently finished episodes, per task.
    pub episode_returns: Vec<Option<f64>>,
    /// Mean imagined-frame MSE per task, when measured this interval.
    pub imag_mse: Option<Vec<f64>>,
}

/// Append-only JSONL writer.
pub struct MetricsWriter {
    out: BufWriter<File>,
    last_step: Option<usize>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
            last_step: None,
        })
    }

    pub fn append(&mut self, path_independent_record: &MetricsRecord) -> Result<()> {
        // steps must be monotone within a stream
        if let Some(last) = self.last_step {
            assert!(
                path_independent_record.step >= last,
                "metrics steps must be monotone"
            );
        }
        self.last_step = Some(path_independent_record.step);
        serde_json::to_writer(&mut self.out, path_independent_record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Flatten a JSONL metrics stream into CSV for plotting.
pub fn export_csv(jsonl: &Path, csv: &Path) -> Result<()> {
    let reader = BufReader::new(File::open(jsonl)?);
    let mut out = BufWriter::new(File::create(csv)?);
    let mut wrote_header = false;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: MetricsRecord = serde_json::from_str(&line)?;
        if !wrote_header {
            let mut cols = vec![
                "step".into(),
                "phase".into(),
                "objective".into(),
                "balance".into(),
                "wm_grad_norm".into(),
                "actor_loss".into(),
                "critic_loss".into(),
                "entropy".into(),
                "mean_return".into(),
            ];
            for k in 0..r.per_task.len() {
                cols.push(format!("task{k}_total"));
                cols.push(format!("task{k}_rec"));
                cols.push(format!("task{k}_sigma"));
                cols.push(format!("task{k}_episode_return"));
            }
            writeln!(out, "{}", cols.join(","))?;
            wrote_header = true;
        }
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut row = vec![
            r.step.to_string(),
            r.phase.clone(),
            r.objective.to_string(),
            r.balance.to_string(),
            r.wm_grad_norm.to_string(),
            opt(r.actor_loss),
            opt(r.critic_loss),
            opt(r.entropy),
            opt(r.mean_return),
        ];
        for k in 0..r.per_task.len() {
            row.push(r.per_task[k].total.to_string());
            row.push(r.per_task[k].rec.to_string());
            row.push(r.sigmas.get(k).copied().map(|v| v.to_string()).unwrap_or_default());
            row.push(opt(r.episode_returns.get(k).copied().flatten()));
        }
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Read back every record of a stream (determinism checks, reporting).
pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Append-only invariant helper: open for appending without truncation.
pub fn append_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        OpenOptions::new().create(true).append(true).open(path)?,
    ))
}
