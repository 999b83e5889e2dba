//! The per-task training loop: search, quantize, commit, evaluate,
//! checkpoint.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array1;

use crate::checkpoint::{Checkpoint, TaskRecord};
use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::mask::{TaskId, TaskMask, WeightSlotStore};
use crate::metrics::AccuracyMatrix;
use crate::nn::{self, DenseWeights, ModelSpec};
use crate::pruning::{self, PruneConfig};
use crate::quant::{self, QuantizedTaskWeights};
use crate::report::{self, Summary};
use crate::scenario::{self, BaseData, Dataset, ScenarioKind, ScenarioSuite};
use crate::seed::{self, stream};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";

/// Pruning attempts per task before giving up on finding slots with enough
/// free bits for the chosen width.
pub const MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Stop once this many tasks are committed in total.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Stopped,
    CapacityExhausted {
        task: TaskId,
        layers: Vec<usize>,
        detail: String,
    },
}

/// A task's trained weights before quantization.
#[derive(Debug, Clone)]
pub struct FullPrecision {
    pub task: TaskId,
    pub mask: TaskMask,
    pub weights: DenseWeights,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub checkpoint: Checkpoint,
    /// Tasks trained by this call (not those restored from a checkpoint).
    pub full_precision: Vec<FullPrecision>,
    /// Present when at least one task is committed.
    pub summary: Option<Summary>,
    pub output_dir: PathBuf,
}

pub fn build_scenario(cfg: &RunConfig) -> Result<ScenarioSuite> {
    let s = &cfg.scenario;
    match s.kind {
        ScenarioKind::Permuted => {
            let base = BaseData::load_mnist(&s.mnist_dir)?;
            scenario::permuted_scenario(&base, s.n_tasks, s.seed)
        }
        ScenarioKind::Split => {
            let base = BaseData::load_mnist(&s.mnist_dir)?;
            scenario::split_scenario(&base, s.classes_per_task, s.seed)
        }
        ScenarioKind::Synthetic => scenario::synthetic_blobs(s.n_tasks, s.blobs, s.seed),
    }
}

/// Starts a fresh run in `cfg.run.output_dir`.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let suite = build_scenario(cfg)?;
    run_with_suite(cfg, &suite, opts)
}

/// As [`run`], with an already built scenario.
pub fn run_with_suite(cfg: &RunConfig, suite: &ScenarioSuite, opts: &RunOptions) -> Result<RunOutcome> {
    let spec = cfg.model_spec()?;
    check_suite(&spec, suite)?;
    let dir = cfg.run.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let text = cfg.to_toml()?;
    let config_path = dir.join(CONFIG_FILE);
    std::fs::write(&config_path, &text).map_err(|e| Error::io(&config_path, e))?;
    let cp = Checkpoint {
        config: text,
        store: WeightSlotStore::for_model(&spec, cfg.prune.max_tasks_per_slot),
        spec,
        tasks: Vec::new(),
        manifest: suite.manifest.clone(),
        matrix: AccuracyMatrix::new(),
    };
    drive(cfg, suite, cp, &dir, opts)
}

/// Continues the run saved at `checkpoint`, writing next to it.
pub fn resume(checkpoint: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    let cp = Checkpoint::load(checkpoint)?;
    let cfg = RunConfig::from_toml(&cp.config, &[])?;
    let suite = build_scenario(&cfg)?;
    resume_with_suite(checkpoint, cp, &cfg, &suite, opts)
}

/// As [`resume`], with the checkpoint, its configuration and the scenario
/// already loaded.
pub fn resume_with_suite(
    checkpoint: &Path,
    cp: Checkpoint,
    cfg: &RunConfig,
    suite: &ScenarioSuite,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    if suite.manifest != cp.manifest {
        return Err(Error::Corrupt(
            "the regenerated scenario does not match the checkpoint's manifest".into(),
        ));
    }
    if cfg.model_spec()? != cp.spec {
        return Err(Error::Corrupt("checkpoint model differs from its configuration".into()));
    }
    let dir = checkpoint
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    drive(cfg, suite, cp, &dir, opts)
}

fn check_suite(spec: &ModelSpec, suite: &ScenarioSuite) -> Result<()> {
    if suite.tasks.is_empty() {
        return Err(Error::Config("scenario has no tasks".into()));
    }
    if suite.input_dim() != spec.input_dim() {
        return Err(Error::Config(format!(
            "model input size {} does not match the scenario's {} features",
            spec.input_dim(),
            suite.input_dim()
        )));
    }
    if suite.classes_per_task() != spec.output_dim() {
        return Err(Error::Config(format!(
            "model output size {} does not match the scenario's {} classes per task",
            spec.output_dim(),
            suite.classes_per_task()
        )));
    }
    Ok(())
}

fn drive(
    cfg: &RunConfig,
    suite: &ScenarioSuite,
    mut cp: Checkpoint,
    dir: &Path,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let mut full_precision = Vec::new();
    let mut status = RunStatus::Completed;
    for t in cp.tasks.len()..suite.tasks.len() {
        if opts.stop_after.is_some_and(|n| cp.tasks.len() >= n) {
            status = RunStatus::Stopped;
            break;
        }
        let task = t as TaskId;
        let started = Instant::now();
        let learned = match learn_task(cfg, &cp.spec, &cp.store, task, &suite.tasks[t].train, &suite.tasks[t].val) {
            Ok(l) => l,
            Err(Error::CapacityExhausted { layers, detail }) => {
                cp.save(&ckpt_path)?;
                log::error!("task {task}: capacity exhausted in layer(s) {layers:?}: {detail}");
                status = RunStatus::CapacityExhausted { task, layers, detail };
                break;
            }
            Err(e) => return Err(e),
        };
        cp.store
            .commit(task, &learned.quantized.mask, learned.quantized.bits(), &learned.quantized.codes)?;
        cp.tasks.push(learned.record);
        let row = cp
            .tasks
            .iter()
            .map(|r| evaluate_record(&cp.spec, &cp.store, r, &suite.tasks[r.task as usize].test))
            .collect::<Result<Vec<_>>>()?;
        log::info!(
            "task {task} done in {:.1}s: {} bits, test accuracies {row:?}",
            started.elapsed().as_secs_f64(),
            learned.quantized.bits()
        );
        cp.matrix.push_row(row)?;
        cp.save(&ckpt_path)?;
        full_precision.push(learned.full);
    }
    let summary = if cp.tasks.is_empty() {
        None
    } else {
        Some(report::write_reports(dir, &cp, cfg.run.mode)?)
    };
    Ok(RunOutcome {
        status,
        checkpoint: cp,
        full_precision,
        summary,
        output_dir: dir.to_path_buf(),
    })
}

/// Test accuracy of a committed task, decoded from the store.
pub fn evaluate_record(
    spec: &ModelSpec,
    store: &WeightSlotStore,
    record: &TaskRecord,
    data: &Dataset,
) -> Result<f64> {
    let q = record.quantized(store)?;
    let biases: Vec<Array1<f32>> = record.biases.iter().map(|b| Array1::from(b.clone())).collect();
    let weights = quant::assemble(spec, &q, &biases)?;
    nn::evaluate(spec, &weights, &q.mask, data)
}

struct Learned {
    record: TaskRecord,
    quantized: QuantizedTaskWeights,
    full: FullPrecision,
}

/// Fewest free bits among the slots selected by `mask`.
fn bit_budget(store: &WeightSlotStore, mask: &TaskMask) -> u8 {
    (0..mask.num_layers())
        .flat_map(|l| mask.iter_ones(l).map(move |i| (l, i)))
        .map(|(l, i)| store.slot(l, i).remaining_bits())
        .min()
        .unwrap_or(crate::mask::SLOT_BITS)
}

fn learn_task(
    cfg: &RunConfig,
    spec: &ModelSpec,
    store: &WeightSlotStore,
    task: TaskId,
    train: &Dataset,
    val: &Dataset,
) -> Result<Learned> {
    let base = cfg.effective_prune();
    let quant_cfg = cfg.effective_quant();
    let train_cfg = cfg.train_config(0, 0);
    let mut min_bits = base.min_bits;
    for attempt in 0..MAX_ATTEMPTS {
        let prune_cfg = PruneConfig {
            min_bits,
            seed: if attempt == 0 {
                base.seed
            } else {
                seed::derive(base.seed, &[stream::RETRY, attempt as u64])
            },
            ..base
        };
        let p = pruning::adaptive_prune(task, store, spec, train, val, &prune_cfg, &train_cfg)?;
        let budget = bit_budget(store, &p.mask);
        let (quantized, stored_accuracy, passes, missed) = match cfg.run.mode {
            Mode::PruningOnly => (QuantizedTaskWeights::raw(task, &p.mask, &p.weights), p.accuracy, 0, false),
            Mode::Full | Mode::QuantizationOnly => {
                match quant::adaptive_quantize(task, spec, &p.mask, &p.weights, p.accuracy, val, &quant_cfg, budget) {
                    Ok(a) => (a.weights, a.accuracy, a.passes as u32, a.tolerance_missed),
                    Err(Error::BitBudget { required, available }) => {
                        log::warn!(
                            "task {task}: {required} bits needed but only {available} free; retrying the search"
                        );
                        min_bits = required;
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        let record = TaskRecord {
            task,
            coding: quantized.coding.clone(),
            biases: p.weights.layers.iter().map(|l| l.bias.to_vec()).collect(),
            full_accuracy: p.accuracy,
            stored_accuracy,
            quant_passes: passes,
            tolerance_missed: missed,
            attempts: attempt + 1,
            prune_log: p.log,
        };
        return Ok(Learned {
            record,
            quantized,
            full: FullPrecision {
                task,
                mask: p.mask,
                weights: p.weights,
            },
        });
    }
    Err(Error::CapacityExhausted {
        layers: store.saturated_layers(min_bits),
        detail: format!(
            "no sub-network with {min_bits} free bits per slot found in {MAX_ATTEMPTS} attempts"
        ),
    })
}
