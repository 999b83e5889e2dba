//! Per-task storage cost and accuracy bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{TaskId, WeightSlotStore, SLOT_BITS};

/// How the codebook term of the capacity is counted.
#[derive(Debug, Clone, PartialEq)]
pub enum CodebookSize {
    /// `2^bits` centroids in every layer.
    Full,
    /// The actual number of centroids per layer.
    Actual(Vec<usize>),
    /// No codebook (weights stored verbatim).
    Absent,
}

/// Storage cost of one task, in bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityBreakdown {
    pub task: TaskId,
    pub bits: u8,
    /// Slots used per layer.
    pub usage: Vec<usize>,
    /// Used slots times bit-width.
    pub weight_bits: u64,
    /// Centroids times (32 + bit-width).
    pub codebook_bits: u64,
    /// The codebook term with every layer at `2^bits` centroids.
    pub codebook_bits_worst_case: u64,
    /// One bit per used slot.
    pub mask_bits: u64,
    pub total_bits: u64,
    /// `total_bits` relative to the dense 32-bit model.
    pub percent_of_dense: f64,
}

/// Size of the dense model with one 32-bit value per slot.
pub fn dense_bits(slot_counts: &[usize]) -> u64 {
    slot_counts.iter().map(|&n| n as u64 * SLOT_BITS as u64).sum()
}

/// Bits occupied by `task`: its weight codes, its codebooks and its masks.
pub fn capacity(
    store: &WeightSlotStore,
    task: TaskId,
    bits: u8,
    codebook: &CodebookSize,
) -> Result<CapacityBreakdown> {
    let usage = store.task_usage(task)?;
    let layers = store.num_layers() as u64;
    let b = bits as u64;
    let per_code = SLOT_BITS as u64 + b;
    let worst = (1u64 << bits.min(63)).saturating_mul(per_code * layers);
    let used: u64 = usage.iter().map(|&u| u as u64).sum();
    let (codebook_bits, codebook_bits_worst_case) = match codebook {
        CodebookSize::Full => (worst, worst),
        CodebookSize::Actual(lens) => {
            if lens.len() != store.num_layers() {
                return Err(Error::shape(
                    0,
                    format!("{layers} codebook layers"),
                    lens.len(),
                ));
            }
            (lens.iter().map(|&n| n as u64 * per_code).sum(), worst)
        }
        CodebookSize::Absent => (0, 0),
    };
    let weight_bits = used * b;
    let mask_bits = used;
    let total_bits = weight_bits + codebook_bits + mask_bits;
    let dense = dense_bits(&store.slot_counts());
    Ok(CapacityBreakdown {
        task,
        bits,
        usage,
        weight_bits,
        codebook_bits,
        codebook_bits_worst_case,
        mask_bits,
        total_bits,
        percent_of_dense: if dense == 0 { 0.0 } else { 100.0 * total_bits as f64 / dense as f64 },
    })
}

/// Per-task capacities plus running totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub dense_bits: u64,
    pub tasks: Vec<CapacityBreakdown>,
    /// Running sum of `total_bits` after each task.
    pub cumulative_bits: Vec<u64>,
}

impl CapacityReport {
    pub fn new(dense_bits: u64, tasks: Vec<CapacityBreakdown>) -> Self {
        let cumulative_bits = tasks
            .iter()
            .scan(0u64, |acc, t| {
                *acc += t.total_bits;
                Some(*acc)
            })
            .collect();
        Self {
            dense_bits,
            tasks,
            cumulative_bits,
        }
    }

    pub fn cumulative_percent(&self) -> Vec<f64> {
        self.cumulative_bits
            .iter()
            .map(|&c| 100.0 * c as f64 / self.dense_bits.max(1) as f64)
            .collect()
    }
}

/// `rows[e][t]`: test accuracy of task `t` after training task `e`, for
/// `t <= e`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends the row for the next episode, which must cover every task
    /// seen so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::shape(
                self.rows.len(),
                format!("{} accuracies", self.rows.len() + 1),
                row.len(),
            ));
        }
        if let Some(bad) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Corrupt(format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn episodes(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, episode: usize, task: usize) -> Option<f64> {
        self.rows.get(episode)?.get(task).copied()
    }
}

/// Mean final-episode accuracy over all tasks.
pub fn lifelong_accuracy(matrix: &AccuracyMatrix) -> Result<f64> {
    let last = matrix
        .rows()
        .last()
        .ok_or_else(|| Error::EmptyData("accuracy matrix has no rows".into()))?;
    if last.len() != matrix.episodes() {
        return Err(Error::Corrupt(format!(
            "final row has {} entries for {} tasks",
            last.len(),
            matrix.episodes()
        )));
    }
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Every `(episode, task)` with `episode > task` whose accuracy differs, in
/// any bit, from the accuracy right after the task was learned.
pub fn forget_check(matrix: &AccuracyMatrix) -> Vec<(usize, usize)> {
    let rows = matrix.rows();
    let mut out = Vec::new();
    for (e, row) in rows.iter().enumerate() {
        for (t, &a) in row.iter().enumerate().take(e) {
            if a.to_bits() != rows[t][t].to_bits() {
                out.push((e, t));
            }
        }
    }
    out
}
