//! CSV and JSON reports derived from a checkpoint.
//!
//! Every file is a pure function of the checkpoint, so identical runs give
//! byte-identical reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TaskRecord};
use crate::config::Mode;
use crate::error::{Error, Result};
use crate::mask::{SparsityReport, TaskId};
use crate::metrics::{self, CapacityBreakdown, CapacityReport, CodebookSize};
use crate::quant::WeightCoding;

pub const ACCURACY_CSV: &str = "accuracy_matrix.csv";
pub const CAPACITY_CSV: &str = "capacity.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const MANIFEST_JSON: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: TaskId,
    pub bits: u8,
    pub full_precision_val_accuracy: f64,
    pub stored_val_accuracy: f64,
    pub final_test_accuracy: f64,
    /// Fraction of each layer this task leaves unused.
    pub task_sparsity: Vec<f64>,
    pub quant_passes: u32,
    pub tolerance_missed: bool,
    pub attempts: u32,
    pub capacity_bits: u64,
    pub capacity_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub tasks_completed: usize,
    pub tasks_planned: usize,
    /// Mean test accuracy over all completed tasks after the last one.
    pub lifelong_accuracy: f64,
    pub forget_violations: Vec<(usize, usize)>,
    /// Share of slots no task uses yet.
    pub store_sparsity: SparsityReport,
    pub dense_bits: u64,
    pub capacity_total_bits: u64,
    pub capacity_total_percent: f64,
    pub tasks: Vec<TaskSummary>,
}

/// Capacity of one committed task.
pub fn task_capacity(cp: &Checkpoint, record: &TaskRecord) -> Result<CapacityBreakdown> {
    let size = match &record.coding {
        WeightCoding::Raw => CodebookSize::Absent,
        WeightCoding::Codebook(cb) => CodebookSize::Actual(cb.layers.iter().map(Vec::len).collect()),
    };
    metrics::capacity(&cp.store, record.task, record.bits(), &size)
}

pub fn capacity_report(cp: &Checkpoint) -> Result<CapacityReport> {
    let tasks = cp
        .tasks
        .iter()
        .map(|r| task_capacity(cp, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(CapacityReport::new(
        metrics::dense_bits(&cp.store.slot_counts()),
        tasks,
    ))
}

pub fn summarize(cp: &Checkpoint, mode: Mode) -> Result<Summary> {
    if cp.tasks.is_empty() {
        return Err(Error::EmptyData("no completed task to report on".into()));
    }
    let cap = capacity_report(cp)?;
    let last = cp.matrix.rows().last().expect("one row per task");
    let tasks = cp
        .tasks
        .iter()
        .zip(&cap.tasks)
        .map(|(r, c)| TaskSummary {
            task: r.task,
            bits: r.bits(),
            full_precision_val_accuracy: r.full_accuracy,
            stored_val_accuracy: r.stored_accuracy,
            final_test_accuracy: last[r.task as usize],
            task_sparsity: r.prune_log.task_sparsity.clone(),
            quant_passes: r.quant_passes,
            tolerance_missed: r.tolerance_missed,
            attempts: r.attempts,
            capacity_bits: c.total_bits,
            capacity_percent: c.percent_of_dense,
        })
        .collect();
    let total = *cap.cumulative_bits.last().unwrap_or(&0);
    Ok(Summary {
        mode,
        tasks_completed: cp.tasks.len(),
        tasks_planned: cp.manifest.n_tasks,
        lifelong_accuracy: metrics::lifelong_accuracy(&cp.matrix)?,
        forget_violations: metrics::forget_check(&cp.matrix),
        store_sparsity: cp.store.weighted_sparsity(),
        dense_bits: cap.dense_bits,
        capacity_total_bits: total,
        capacity_total_percent: 100.0 * total as f64 / cap.dense_bits.max(1) as f64,
        tasks,
    })
}

pub fn accuracy_csv(cp: &Checkpoint) -> String {
    let n = cp.matrix.episodes();
    let mut out = String::from("episode");
    for t in 0..n {
        let _ = write!(out, ",task_{t}");
    }
    out.push('\n');
    for (e, row) in cp.matrix.rows().iter().enumerate() {
        let _ = write!(out, "{e}");
        for t in 0..n {
            match row.get(t) {
                Some(a) => {
                    let _ = write!(out, ",{a}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub fn capacity_csv(cap: &CapacityReport) -> String {
    let mut out = String::from(
        "task,bits,used_slots,weight_bits,codebook_bits,codebook_bits_worst_case,mask_bits,total_bits,percent_of_dense,cumulative_bits,cumulative_percent\n",
    );
    let cum_pct = cap.cumulative_percent();
    for (i, c) in cap.tasks.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            c.task,
            c.bits,
            c.usage.iter().sum::<usize>(),
            c.weight_bits,
            c.codebook_bits,
            c.codebook_bits_worst_case,
            c.mask_bits,
            c.total_bits,
            c.percent_of_dense,
            cap.cumulative_bits[i],
            cum_pct[i]
        );
    }
    out
}

pub fn ablation_csv(summary: &Summary) -> String {
    let mut out = String::from(
        "mode,task,bits,capacity_bits,capacity_percent,stored_val_accuracy,final_test_accuracy\n",
    );
    for t in &summary.tasks {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            summary.mode,
            t.task,
            t.bits,
            t.capacity_bits,
            t.capacity_percent,
            t.stored_val_accuracy,
            t.final_test_accuracy
        );
    }
    out
}

pub fn summary_json(summary: &Summary) -> Result<String> {
    Ok(serde_json::to_string_pretty(summary)? + "\n")
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Writes all report files into `dir` and returns the summary.
pub fn write_reports(dir: &Path, cp: &Checkpoint, mode: Mode) -> Result<Summary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = summarize(cp, mode)?;
    write(dir, ACCURACY_CSV, &accuracy_csv(cp))?;
    write(dir, CAPACITY_CSV, &capacity_csv(&capacity_report(cp)?))?;
    write(dir, SUMMARY_JSON, &summary_json(&summary)?)?;
    write(dir, MANIFEST_JSON, &(serde_json::to_string_pretty(&cp.manifest)? + "\n"))?;
    if mode != Mode::Full {
        write(dir, ABLATION_CSV, &ablation_csv(&summary))?;
    }
    Ok(summary)
}
