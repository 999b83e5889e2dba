//! Lottery-ticket population search for a task's sub-network.
//!
//! A population of random masks is drawn from the slots still available in
//! the store, each candidate is briefly trained from the same initial
//! weights, and the best trade-off between validation accuracy and sparsity
//! is trained to completion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{TaskId, TaskMask, WeightSlotStore, DEFAULT_MAX_TASKS_PER_SLOT, DEFAULT_MIN_BITS};
use crate::nn::{self, DenseWeights, ModelSpec, TrainConfig};
use crate::scenario::Dataset;
use crate::seed::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub population: usize,
    /// Weight of the accuracy term in candidate selection.
    pub alpha: f64,
    /// Weight of the sparsity term in candidate selection.
    pub beta: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub short_epochs: usize,
    pub full_epochs: usize,
    /// Most tasks a single slot may hold.
    pub max_tasks_per_slot: usize,
    /// Smallest free bit count for a slot to be offered to a new task.
    pub min_bits: u8,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            population: 16,
            alpha: 0.9,
            beta: 0.1,
            v_min: 0.45,
            v_max: 0.85,
            short_epochs: 5,
            full_epochs: 50,
            max_tasks_per_slot: DEFAULT_MAX_TASKS_PER_SLOT,
            min_bits: DEFAULT_MIN_BITS,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.population == 0 {
            return err("prune.population must be at least 1".into());
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return err(format!(
                "prune.alpha and prune.beta must be >= 0 with a positive sum, got {} / {}",
                self.alpha, self.beta
            ));
        }
        if !(0.0..=1.0).contains(&self.v_min) || !(0.0..=1.0).contains(&self.v_max) {
            return err(format!(
                "sparsity bounds must lie in [0, 1], got [{}, {}]",
                self.v_min, self.v_max
            ));
        }
        if self.v_min > self.v_max {
            return err(format!(
                "prune.v_min ({}) is greater than prune.v_max ({})",
                self.v_min, self.v_max
            ));
        }
        if self.max_tasks_per_slot == 0 {
            return err("prune.max_tasks_per_slot must be at least 1".into());
        }
        if self.min_bits == 0 || self.min_bits > 32 {
            return err(format!("prune.min_bits must be in 1..=32, got {}", self.min_bits));
        }
        Ok(())
    }
}

/// One member of the population after short training.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub mask: TaskMask,
    pub weights: DenseWeights,
    /// Validation accuracy after short training.
    pub accuracy: f64,
    /// Weighted store sparsity if this mask were committed.
    pub sparsity: f64,
    pub target_sparsity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub index: usize,
    pub target_sparsity: Vec<f64>,
    pub kept_slots: Vec<usize>,
    pub accuracy: f64,
    pub sparsity: f64,
    pub score: f64,
}

/// What the search did for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneLog {
    pub task: TaskId,
    pub candidates: Vec<CandidateRecord>,
    pub chosen: usize,
    /// Fraction of each layer the winner leaves unused.
    pub task_sparsity: Vec<f64>,
    pub all_zero_accuracy: bool,
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub mask: TaskMask,
    pub weights: DenseWeights,
    /// Validation accuracy of the fully trained winner.
    pub accuracy: f64,
    pub log: PruneLog,
}

/// `alpha * A_i / max(A) + beta * S_i / max(S)` per candidate. A term whose
/// maximum is not positive contributes zero.
pub fn selection_scores(accuracy: &[f64], sparsity: &[f64], alpha: f64, beta: f64) -> Result<Vec<f64>> {
    if accuracy.is_empty() || accuracy.len() != sparsity.len() {
        return Err(Error::Config(format!(
            "selection needs equal nonempty lists, got {} accuracies and {} sparsities",
            accuracy.len(),
            sparsity.len()
        )));
    }
    let max_a = accuracy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_s = sparsity.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(accuracy
        .iter()
        .zip(sparsity)
        .map(|(&a, &s)| {
            let ta = if max_a > 0.0 { a / max_a } else { 0.0 };
            let ts = if max_s > 0.0 { s / max_s } else { 0.0 };
            alpha * ta + beta * ts
        })
        .collect())
}

/// Index of the highest score; ties go to the lowest index.
pub fn select_best(accuracy: &[f64], sparsity: &[f64], alpha: f64, beta: f64) -> Result<usize> {
    let scores = selection_scores(accuracy, sparsity, alpha, beta)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

fn train_cfg(base: &TrainConfig, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..*base
    }
}

/// Searches a sub-network for `task` among the store's available slots and
/// trains it. Epoch counts come from `cfg`; seeds are derived from
/// `cfg.seed`, so `train.epochs` and `train.seed` are ignored.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_prune(
    task: TaskId,
    store: &WeightSlotStore,
    spec: &ModelSpec,
    train_set: &Dataset,
    val: &Dataset,
    cfg: &PruneConfig,
    train: &TrainConfig,
) -> Result<PruneOutcome> {
    cfg.validate()?;
    train.validate()?;
    if store.slot_counts() != spec.slot_counts() {
        return Err(Error::shape(
            0,
            format!("{:?} slots", spec.slot_counts()),
            format!("{:?} slots", store.slot_counts()),
        ));
    }
    let t = task as u64;
    let init: DenseWeights = nn::xavier_init(spec, seed::derive(cfg.seed, &[stream::INIT, t]));

    let mut drawn = Vec::with_capacity(cfg.population);
    for i in 0..cfg.population {
        let mut rng = seed::rng(seed::derive(cfg.seed, &[stream::CANDIDATE_MASK, t, i as u64]));
        drawn.push(store.sample_candidate_full(cfg.v_min, cfg.v_max, cfg.min_bits, &mut rng)?);
    }

    let candidates: Vec<Candidate> = if cfg.population == 1 {
        let c = drawn.pop().expect("one candidate");
        vec![Candidate {
            sparsity: store.sparsity_with(&c.mask).weighted,
            mask: c.mask,
            weights: init,
            accuracy: 0.0,
            target_sparsity: c.target_sparsity,
        }]
    } else {
        drawn
            .into_par_iter()
            .enumerate()
            .map(|(i, c)| {
                let tc = train_cfg(
                    train,
                    cfg.short_epochs,
                    seed::derive(cfg.seed, &[stream::SHORT_TRAIN, t, i as u64]),
                );
                let (weights, _) = nn::train_masked(spec, init.clone(), &c.mask, train_set, &tc)?;
                let accuracy = nn::evaluate(spec, &weights, &c.mask, val)?;
                Ok(Candidate {
                    sparsity: store.sparsity_with(&c.mask).weighted,
                    mask: c.mask,
                    weights,
                    accuracy,
                    target_sparsity: c.target_sparsity,
                })
            })
            .collect::<Result<_>>()?
    };

    let accuracy: Vec<f64> = candidates.iter().map(|c| c.accuracy).collect();
    let sparsity: Vec<f64> = candidates.iter().map(|c| c.sparsity).collect();
    let all_zero_accuracy = cfg.population > 1 && accuracy.iter().all(|&a| a == 0.0);
    if all_zero_accuracy {
        log::warn!("task {task}: every candidate scored zero accuracy; selecting on sparsity alone");
    }
    let scores = selection_scores(&accuracy, &sparsity, cfg.alpha, cfg.beta)?;
    let chosen = select_best(&accuracy, &sparsity, cfg.alpha, cfg.beta)?;
    let records = candidates
        .iter()
        .enumerate()
        .map(|(index, c)| CandidateRecord {
            index,
            target_sparsity: c.target_sparsity.clone(),
            kept_slots: (0..c.mask.num_layers()).map(|l| c.mask.count(l)).collect(),
            accuracy: c.accuracy,
            sparsity: c.sparsity,
            score: scores[index],
        })
        .collect();

    let winner = candidates.into_iter().nth(chosen).expect("chosen index in range");
    let tc = train_cfg(
        train,
        cfg.full_epochs,
        seed::derive(cfg.seed, &[stream::FULL_TRAIN, t]),
    );
    let (weights, _) = nn::train_masked(spec, winner.weights, &winner.mask, train_set, &tc)?;
    let accuracy = nn::evaluate(spec, &weights, &winner.mask, val)?;
    let task_sparsity = (0..winner.mask.num_layers())
        .map(|l| winner.mask.layer_sparsity(l))
        .collect();
    log::info!(
        "task {task}: candidate {chosen} of {} selected, validation accuracy {accuracy:.4}",
        cfg.population
    );
    Ok(PruneOutcome {
        mask: winner.mask,
        weights,
        accuracy,
        log: PruneLog {
            task,
            candidates: records,
            chosen,
            task_sparsity,
            all_zero_accuracy,
        },
    })
}
