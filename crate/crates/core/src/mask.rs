//! Weight-slot bookkeeping: per-task masks, bit-budgeted slots, sparsity and
//! lottery-ticket candidate sampling.
//!
//! Every weight position of the model is a *slot* with a 32-bit budget. A
//! committed task owns one component of that budget (its bit-width and the
//! code it stored there). Slots are shared by position only; each task's
//! component carries its own value, so nothing a later task does can alter
//! an earlier task's weights.

use bitvec::prelude::*;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::nn::ModelSpec;

pub type TaskId = u32;

/// Storage budget of a single weight slot.
pub const SLOT_BITS: u8 = 32;

/// Default cap on tasks sharing one slot (four 8-bit components in 32 bits).
pub const DEFAULT_MAX_TASKS_PER_SLOT: usize = 4;

/// Default minimum component width a slot must still have room for.
pub const DEFAULT_MIN_BITS: u8 = 2;

/// Binary per-layer masks for one task.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskMask {
    layers: Vec<BitVec<u64, Lsb0>>,
}

impl TaskMask {
    pub fn empty(slot_counts: &[usize]) -> Self {
        Self {
            layers: slot_counts.iter().map(|&n| bitvec![u64, Lsb0; 0; n]).collect(),
        }
    }

    pub fn full(slot_counts: &[usize]) -> Self {
        Self {
            layers: slot_counts.iter().map(|&n| bitvec![u64, Lsb0; 1; n]).collect(),
        }
    }

    pub fn from_layers(layers: Vec<BitVec<u64, Lsb0>>) -> Self {
        Self { layers }
    }

    /// Builds a mask from per-layer boolean vectors.
    pub fn from_bools(layers: &[Vec<bool>]) -> Self {
        Self {
            layers: layers.iter().map(|l| l.iter().collect()).collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, layer: usize) -> &BitSlice<u64, Lsb0> {
        &self.layers[layer]
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.layers[layer].len()
    }

    pub fn slot_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.len()).collect()
    }

    pub fn get(&self, layer: usize, slot: usize) -> bool {
        self.layers[layer][slot]
    }

    pub fn set(&mut self, layer: usize, slot: usize, value: bool) {
        self.layers[layer].set(slot, value);
    }

    /// Number of set entries in `layer`.
    pub fn count(&self, layer: usize) -> usize {
        self.layers[layer].count_ones()
    }

    pub fn total_count(&self) -> usize {
        self.layers.iter().map(|l| l.count_ones()).sum()
    }

    pub fn iter_ones(&self, layer: usize) -> impl Iterator<Item = usize> + '_ {
        self.layers[layer].iter_ones()
    }

    /// Fraction of `layer` this mask does not use.
    pub fn layer_sparsity(&self, layer: usize) -> f64 {
        let n = self.layer_len(layer);
        if n == 0 {
            return 1.0;
        }
        (n - self.count(layer)) as f64 / n as f64
    }
}

/// One task's share of a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Component {
    pub task: TaskId,
    pub bits: u8,
    pub code: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Slot {
    components: SmallVec<[Component; 4]>,
    remaining_bits: u8,
}

impl Default for Slot {
    fn default() -> Self {
        Self {
            components: SmallVec::new(),
            remaining_bits: SLOT_BITS,
        }
    }
}

impl Slot {
    /// Rebuilds a slot from its parts, checking the bit budget.
    pub fn from_parts(components: Vec<Component>, remaining_bits: u8) -> Result<Self> {
        let used: u32 = components.iter().map(|c| c.bits as u32).sum();
        if used + remaining_bits as u32 != SLOT_BITS as u32 {
            return Err(Error::Corrupt(format!(
                "slot budget {used} + {remaining_bits} != {SLOT_BITS}"
            )));
        }
        for (i, c) in components.iter().enumerate() {
            if components[..i].iter().any(|d| d.task == c.task) {
                return Err(Error::Corrupt(format!(
                    "slot holds two components of task {}",
                    c.task
                )));
            }
        }
        Ok(Self {
            components: components.into(),
            remaining_bits,
        })
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn remaining_bits(&self) -> u8 {
        self.remaining_bits
    }

    pub fn is_used(&self) -> bool {
        !self.components.is_empty()
    }

    pub fn component_of(&self, task: TaskId) -> Option<&Component> {
        self.components.iter().find(|c| c.task == task)
    }

    /// A slot can take another component if it is below the task cap and
    /// still has room for `min_bits`.
    pub fn is_eligible(&self, min_bits: u8, max_tasks: usize) -> bool {
        self.components.len() < max_tasks && self.remaining_bits >= min_bits
    }
}

/// Per-layer store of bit-budgeted weight slots shared by all tasks.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WeightSlotStore {
    layers: Vec<Vec<Slot>>,
    max_tasks_per_slot: usize,
    tasks: Vec<TaskId>,
}

/// Result of sampling one layer of a candidate mask.
#[derive(Debug, Clone)]
pub struct LayerSample {
    pub mask: BitVec<u64, Lsb0>,
    /// Number of slots the target sparsity asked for.
    pub requested: usize,
    /// True when fewer eligible slots existed than requested.
    pub shortfall: bool,
}

/// A full candidate: one sampled mask per layer plus the target sparsities
/// used to draw it.
#[derive(Debug, Clone)]
pub struct CandidateMask {
    pub mask: TaskMask,
    pub target_sparsity: Vec<f64>,
    pub shortfall_layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub per_layer: Vec<f64>,
    /// Sum over layers of slot count times layer sparsity.
    pub weighted: f64,
    /// `weighted` divided by the total slot count.
    pub normalized: f64,
}

impl WeightSlotStore {
    pub fn new(slot_counts: &[usize], max_tasks_per_slot: usize) -> Self {
        Self {
            layers: slot_counts.iter().map(|&n| vec![Slot::default(); n]).collect(),
            max_tasks_per_slot,
            tasks: Vec::new(),
        }
    }

    pub fn for_model(spec: &ModelSpec, max_tasks_per_slot: usize) -> Self {
        Self::new(&spec.slot_counts(), max_tasks_per_slot)
    }

    /// Reassembles a store from decoded parts. `tasks` lists every committed
    /// task, including any that own no slots.
    pub fn from_parts(
        layers: Vec<Vec<Slot>>,
        max_tasks_per_slot: usize,
        mut tasks: Vec<TaskId>,
    ) -> Result<Self> {
        tasks.sort_unstable();
        if tasks.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Corrupt("duplicate task in task list".into()));
        }
        for slot in layers.iter().flatten() {
            if slot.components.len() > max_tasks_per_slot {
                return Err(Error::Corrupt(format!(
                    "slot holds {} components, cap is {max_tasks_per_slot}",
                    slot.components.len()
                )));
            }
            if let Some(c) = slot.components.iter().find(|c| tasks.binary_search(&c.task).is_err()) {
                return Err(Error::Corrupt(format!(
                    "component of task {} missing from the task list",
                    c.task
                )));
            }
        }
        Ok(Self {
            layers,
            max_tasks_per_slot,
            tasks,
        })
    }

    /// Registers a task that committed an all-empty mask, so it still counts
    /// as present.
    fn register_task(&mut self, task: TaskId) {
        if let Err(pos) = self.tasks.binary_search(&task) {
            self.tasks.insert(pos, task);
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.layers[layer].len()
    }

    pub fn slot_counts(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn total_slots(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn max_tasks_per_slot(&self) -> usize {
        self.max_tasks_per_slot
    }

    pub fn slot(&self, layer: usize, slot: usize) -> &Slot {
        &self.layers[layer][slot]
    }

    pub fn layer_slots(&self, layer: usize) -> &[Slot] {
        &self.layers[layer]
    }

    /// Tasks with at least one committed component, ascending.
    pub fn tasks(&self) -> &[TaskId] {
        &self.tasks
    }

    pub fn contains_task(&self, task: TaskId) -> bool {
        self.tasks.binary_search(&task).is_ok()
    }

    pub fn eligible(&self, layer: usize, slot: usize, min_bits: u8) -> bool {
        self.layers[layer][slot].is_eligible(min_bits, self.max_tasks_per_slot)
    }

    pub fn eligible_count(&self, layer: usize, min_bits: u8) -> usize {
        self.layers[layer]
            .iter()
            .filter(|s| s.is_eligible(min_bits, self.max_tasks_per_slot))
            .count()
    }

    /// Fraction of `layer`'s slots not yet holding any component.
    pub fn sparsity_level(&self, layer: usize) -> f64 {
        let slots = &self.layers[layer];
        if slots.is_empty() {
            return 1.0;
        }
        let used = slots.iter().filter(|s| s.is_used()).count();
        (slots.len() - used) as f64 / slots.len() as f64
    }

    pub fn weighted_sparsity(&self) -> SparsityReport {
        let per_layer: Vec<f64> = (0..self.num_layers())
            .map(|l| self.sparsity_level(l))
            .collect();
        sparsity_report(&self.slot_counts(), per_layer)
    }

    /// Weighted sparsity the store would have if `mask` were committed on
    /// top of it.
    pub fn sparsity_with(&self, mask: &TaskMask) -> SparsityReport {
        let per_layer = (0..self.num_layers())
            .map(|l| {
                let slots = &self.layers[l];
                if slots.is_empty() {
                    return 1.0;
                }
                let bits = mask.layer(l);
                let used = slots
                    .iter()
                    .enumerate()
                    .filter(|(i, s)| s.is_used() || bits[*i])
                    .count();
                (slots.len() - used) as f64 / slots.len() as f64
            })
            .collect();
        sparsity_report(&self.slot_counts(), per_layer)
    }

    /// Samples one layer of a lottery-ticket candidate at target sparsity
    /// `target` among slots that can still take a `min_bits` component.
    pub fn sample_candidate_mask<R: Rng + ?Sized>(
        &self,
        layer: usize,
        target: f64,
        min_bits: u8,
        rng: &mut R,
    ) -> Result<LayerSample> {
        let slots = &self.layers[layer];
        let n = slots.len();
        let eligible: Vec<usize> = slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_eligible(min_bits, self.max_tasks_per_slot))
            .map(|(i, _)| i)
            .collect();
        if n > 0 && eligible.is_empty() {
            return Err(Error::CapacityExhausted {
                layers: vec![layer],
                detail: format!("no slot has room for a {min_bits}-bit component"),
            });
        }
        let requested = kept_slots(target, n);
        let take = requested.min(eligible.len());
        let mut mask = bitvec![u64, Lsb0; 0; n];
        for i in index::sample(rng, eligible.len(), take) {
            mask.set(eligible[i], true);
        }
        Ok(LayerSample {
            mask,
            requested,
            shortfall: take < requested,
        })
    }

    /// Samples a candidate mask for every layer, drawing each layer's target
    /// sparsity independently and uniformly from `[v_min, v_max]`.
    pub fn sample_candidate_full<R: Rng + ?Sized>(
        &self,
        v_min: f64,
        v_max: f64,
        min_bits: u8,
        rng: &mut R,
    ) -> Result<CandidateMask> {
        if !(0.0..=1.0).contains(&v_min) || !(0.0..=1.0).contains(&v_max) || v_min > v_max {
            return Err(Error::Config(format!(
                "sparsity bounds must satisfy 0 <= v_min <= v_max <= 1, got [{v_min}, {v_max}]"
            )));
        }
        let mut layers = Vec::with_capacity(self.num_layers());
        let mut targets = Vec::with_capacity(self.num_layers());
        let mut shortfall_layers = Vec::new();
        let mut exhausted = Vec::new();
        for layer in 0..self.num_layers() {
            let target = if v_min == v_max {
                v_min
            } else {
                rng.gen_range(v_min..=v_max)
            };
            match self.sample_candidate_mask(layer, target, min_bits, rng) {
                Ok(sample) => {
                    if sample.shortfall {
                        shortfall_layers.push(layer);
                    }
                    layers.push(sample.mask);
                }
                Err(Error::CapacityExhausted { .. }) => exhausted.push(layer),
                Err(e) => return Err(e),
            }
            targets.push(target);
        }
        if !exhausted.is_empty() {
            return Err(Error::CapacityExhausted {
                layers: exhausted,
                detail: format!("no slot has room for a {min_bits}-bit component"),
            });
        }
        if !shortfall_layers.is_empty() {
            log::warn!(
                "fewer eligible slots than requested in layer(s) {shortfall_layers:?}; took all eligible"
            );
        }
        Ok(CandidateMask {
            mask: TaskMask::from_layers(layers),
            target_sparsity: targets,
            shortfall_layers,
        })
    }

    /// Writes one `bits`-wide component per masked slot for `task`.
    ///
    /// `codes[layer]` lists the codes of that layer's masked slots in
    /// ascending slot order. Either every slot is updated or none is.
    pub fn commit(
        &mut self,
        task: TaskId,
        mask: &TaskMask,
        bits: u8,
        codes: &[Vec<u32>],
    ) -> Result<()> {
        if self.contains_task(task) {
            return Err(Error::TaskAlreadyCommitted(task));
        }
        if bits == 0 || bits > SLOT_BITS {
            return Err(Error::Config(format!("component width {bits} out of range")));
        }
        if mask.num_layers() != self.num_layers() || codes.len() != self.num_layers() {
            return Err(Error::shape(
                0,
                format!("{} layers", self.num_layers()),
                format!("{} mask layers, {} code layers", mask.num_layers(), codes.len()),
            ));
        }
        for (layer, layer_codes) in codes.iter().enumerate() {
            if mask.layer_len(layer) != self.layer_len(layer) {
                return Err(Error::shape(layer, self.layer_len(layer), mask.layer_len(layer)));
            }
            let count = mask.count(layer);
            if layer_codes.len() != count {
                return Err(Error::shape(
                    layer,
                    format!("{count} codes"),
                    layer_codes.len(),
                ));
            }
            for (slot, &code) in mask.iter_ones(layer).zip(layer_codes) {
                if bits < 32 && code >> bits != 0 {
                    return Err(Error::IneligibleSlot {
                        layer,
                        slot,
                        reason: format!("code {code} does not fit in {bits} bits"),
                    });
                }
                let s = &self.layers[layer][slot];
                if !s.is_eligible(bits, self.max_tasks_per_slot) {
                    return Err(Error::IneligibleSlot {
                        layer,
                        slot,
                        reason: format!(
                            "{} components, {} bits free, needs {bits}",
                            s.components.len(),
                            s.remaining_bits
                        ),
                    });
                }
            }
        }
        for (layer, layer_codes) in codes.iter().enumerate() {
            for (slot, &code) in mask.iter_ones(layer).zip(layer_codes) {
                let s = &mut self.layers[layer][slot];
                s.components.push(Component { task, bits, code });
                s.remaining_bits -= bits;
            }
        }
        self.register_task(task);
        Ok(())
    }

    /// The mask of slots holding a component of `task`.
    pub fn task_mask(&self, task: TaskId) -> Result<TaskMask> {
        if !self.contains_task(task) {
            return Err(Error::UnknownTask(task));
        }
        Ok(TaskMask::from_layers(
            self.layers
                .iter()
                .map(|slots| slots.iter().map(|s| s.component_of(task).is_some()).collect())
                .collect(),
        ))
    }

    /// Per-layer codes of `task` in ascending slot order, plus its bit-width.
    pub fn task_codes(&self, task: TaskId) -> Result<(u8, Vec<Vec<u32>>)> {
        if !self.contains_task(task) {
            return Err(Error::UnknownTask(task));
        }
        let mut bits = None;
        let codes = self
            .layers
            .iter()
            .map(|slots| {
                slots
                    .iter()
                    .filter_map(|s| s.component_of(task))
                    .map(|c| {
                        bits.get_or_insert(c.bits);
                        c.code
                    })
                    .collect()
            })
            .collect();
        Ok((bits.unwrap_or(0), codes))
    }

    /// Number of slots per layer used by `task`.
    pub fn task_usage(&self, task: TaskId) -> Result<Vec<usize>> {
        if !self.contains_task(task) {
            return Err(Error::UnknownTask(task));
        }
        Ok(self
            .layers
            .iter()
            .map(|slots| slots.iter().filter(|s| s.component_of(task).is_some()).count())
            .collect())
    }

    /// Layers in which no slot could take a `min_bits` component.
    pub fn saturated_layers(&self, min_bits: u8) -> Vec<usize> {
        (0..self.num_layers())
            .filter(|&l| self.layer_len(l) > 0 && self.eligible_count(l, min_bits) == 0)
            .collect()
    }
}

fn sparsity_report(slot_counts: &[usize], per_layer: Vec<f64>) -> SparsityReport {
    let weighted: f64 = slot_counts
        .iter()
        .zip(&per_layer)
        .map(|(&n, &s)| n as f64 * s)
        .sum();
    let total: usize = slot_counts.iter().sum();
    let normalized = if total == 0 { 1.0 } else { weighted / total as f64 };
    SparsityReport {
        per_layer,
        weighted,
        normalized,
    }
}

/// `ceil((1 - target) * n)`, with a small guard so exact products such as
/// `0.55 * 100` do not round up because of representation error.
pub fn kept_slots(target: f64, n: usize) -> usize {
    let exact = (1.0 - target.clamp(0.0, 1.0)) * n as f64;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(n)
}
