//! Binary run checkpoints.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, payload, then a
//! `u64` checksum made of the first 8 bytes of the SHA-256 of everything
//! before it. Floats are stored as raw IEEE-754 bits. The pruning log and the
//! scenario manifest are embedded as length-prefixed JSON.

use std::io::{self, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::{Component, Slot, TaskId, WeightSlotStore};
use crate::metrics::AccuracyMatrix;
use crate::nn::ModelSpec;
use crate::pruning::PruneLog;
use crate::quant::{Codebook, QuantizedTaskWeights, WeightCoding};
use crate::scenario::ScenarioManifest;

pub const MAGIC: [u8; 8] = *b"QPACKCKP";
pub const VERSION: u32 = 1;

/// Everything kept about one committed task besides its slot codes.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub task: TaskId,
    pub coding: WeightCoding,
    pub biases: Vec<Vec<f32>>,
    /// Validation accuracy at full precision.
    pub full_accuracy: f64,
    /// Validation accuracy as stored.
    pub stored_accuracy: f64,
    pub quant_passes: u32,
    pub tolerance_missed: bool,
    /// Pruning attempts needed to find slots with enough free bits.
    pub attempts: u32,
    pub prune_log: PruneLog,
}

impl TaskRecord {
    pub fn bits(&self) -> u8 {
        match &self.coding {
            WeightCoding::Codebook(cb) => cb.bits,
            WeightCoding::Raw => crate::mask::SLOT_BITS,
        }
    }

    /// The task's quantized weights, reassembled from the store.
    pub fn quantized(&self, store: &WeightSlotStore) -> Result<QuantizedTaskWeights> {
        let (_, codes) = store.task_codes(self.task)?;
        Ok(QuantizedTaskWeights {
            task: self.task,
            mask: store.task_mask(self.task)?,
            codes,
            coding: self.coding.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Resolved run configuration as TOML.
    pub config: String,
    pub spec: ModelSpec,
    pub store: WeightSlotStore,
    pub tasks: Vec<TaskRecord>,
    pub manifest: ScenarioManifest,
    pub matrix: AccuracyMatrix,
}

fn len32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Corrupt(format!("{what} too long to encode ({n})")))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.write_u32::<LE>(v).expect("vec write");
    }
    fn u64(&mut self, v: u64) {
        self.0.write_u64::<LE>(v).expect("vec write");
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn f32s(&mut self, v: &[f32]) -> Result<()> {
        self.u32(len32(v.len(), "float array")?);
        for x in v {
            self.u32(x.to_bits());
        }
        Ok(())
    }
}

struct Reader<'a> {
    cur: io::Cursor<&'a [u8]>,
}

impl<'a> Reader<'a> {
    fn at(&self) -> u64 {
        self.cur.position()
    }
    fn eof(&self, what: &str) -> Error {
        Error::Corrupt(format!("checkpoint truncated reading {what} at byte {}", self.at()))
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        self.cur.read_u8().map_err(|_| self.eof(what))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        self.cur.read_u32::<LE>().map_err(|_| self.eof(what))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        self.cur.read_u64::<LE>().map_err(|_| self.eof(what))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }
    fn bytes(&mut self, what: &str) -> Result<Vec<u8>> {
        let n = self.u64(what)?;
        let left = self.cur.get_ref().len() as u64 - self.at();
        if n > left {
            return Err(self.eof(what));
        }
        let mut out = vec![0; n as usize];
        self.cur.read_exact(&mut out).map_err(|_| self.eof(what))?;
        Ok(out)
    }
    fn f32s(&mut self, what: &str) -> Result<Vec<f32>> {
        let n = self.u32(what)? as usize;
        (0..n).map(|_| Ok(f32::from_bits(self.u32(what)?))).collect()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(&MAGIC);
        w.u32(VERSION);
        w.bytes(self.config.as_bytes());

        let sizes = self.spec.layer_sizes();
        w.u32(len32(sizes.len(), "layer list")?);
        for &s in sizes {
            w.u64(s as u64);
        }

        let store = &self.store;
        w.u32(len32(store.max_tasks_per_slot(), "task cap")?);
        w.u32(len32(store.tasks().len(), "task list")?);
        for &t in store.tasks() {
            w.u32(t);
        }
        w.u32(len32(store.num_layers(), "layer count")?);
        for l in 0..store.num_layers() {
            w.u64(store.layer_len(l) as u64);
            for slot in store.layer_slots(l) {
                w.u8(slot.remaining_bits());
                w.u8(slot.components().len() as u8);
                for c in slot.components() {
                    w.u32(c.task);
                    w.u8(c.bits);
                    w.u32(c.code);
                }
            }
        }

        w.u32(len32(self.tasks.len(), "task records")?);
        for r in &self.tasks {
            w.u32(r.task);
            match &r.coding {
                WeightCoding::Raw => w.u8(0),
                WeightCoding::Codebook(cb) => {
                    w.u8(1);
                    w.u8(cb.bits);
                    w.u32(len32(cb.layers.len(), "codebook")?);
                    for layer in &cb.layers {
                        w.f32s(layer)?;
                    }
                }
            }
            w.u32(len32(r.biases.len(), "bias list")?);
            for b in &r.biases {
                w.f32s(b)?;
            }
            w.f64(r.full_accuracy);
            w.f64(r.stored_accuracy);
            w.u32(r.quant_passes);
            w.u8(r.tolerance_missed as u8);
            w.u32(r.attempts);
            w.bytes(&serde_json::to_vec(&r.prune_log)?);
        }

        w.bytes(&serde_json::to_vec(&self.manifest)?);

        w.u32(len32(self.matrix.episodes(), "accuracy matrix")?);
        for row in self.matrix.rows() {
            w.u32(len32(row.len(), "accuracy row")?);
            for &a in row {
                w.f64(a);
            }
        }

        let sum = checksum(&w.0);
        w.u64(sum);
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 {
            return Err(Error::Corrupt(format!(
                "checkpoint is only {} bytes long",
                bytes.len()
            )));
        }
        if bytes[..8] != MAGIC {
            return Err(Error::Corrupt("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(trailer.try_into().unwrap());
        let computed = checksum(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut r = Reader {
            cur: io::Cursor::new(body),
        };
        r.cur.set_position(12);
        let config = String::from_utf8(r.bytes("config")?)
            .map_err(|_| Error::Corrupt("config text is not UTF-8".into()))?;

        let n = r.u32("layer list")?;
        let sizes = (0..n)
            .map(|_| Ok(r.u64("layer size")? as usize))
            .collect::<Result<Vec<_>>>()?;
        let spec = ModelSpec::new(sizes).map_err(|e| Error::Corrupt(format!("model spec: {e}")))?;

        let max_tasks = r.u32("task cap")? as usize;
        let n_tasks = r.u32("task list")?;
        let task_ids = (0..n_tasks)
            .map(|_| r.u32("task id"))
            .collect::<Result<Vec<_>>>()?;
        let n_layers = r.u32("layer count")?;
        let mut layers = Vec::new();
        for _ in 0..n_layers {
            let n_slots = r.u64("slot count")?;
            let mut slots = Vec::new();
            for _ in 0..n_slots {
                let remaining = r.u8("slot budget")?;
                let k = r.u8("component count")?;
                let comps = (0..k)
                    .map(|_| {
                        Ok(Component {
                            task: r.u32("component task")?,
                            bits: r.u8("component width")?,
                            code: r.u32("component code")?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                slots.push(Slot::from_parts(comps, remaining)?);
            }
            layers.push(slots);
        }
        let store = WeightSlotStore::from_parts(layers, max_tasks, task_ids)?;
        if store.slot_counts() != spec.slot_counts() {
            return Err(Error::Corrupt("store shape does not match the model".into()));
        }

        let n_records = r.u32("task records")?;
        let mut tasks = Vec::new();
        for _ in 0..n_records {
            let task = r.u32("record task")?;
            let coding = match r.u8("coding tag")? {
                0 => WeightCoding::Raw,
                1 => {
                    let bits = r.u8("codebook width")?;
                    let n = r.u32("codebook")?;
                    let layers = (0..n)
                        .map(|_| r.f32s("codebook layer"))
                        .collect::<Result<Vec<_>>>()?;
                    WeightCoding::Codebook(Codebook { bits, layers })
                }
                t => return Err(Error::Corrupt(format!("unknown coding tag {t}"))),
            };
            let n = r.u32("bias list")?;
            let biases = (0..n)
                .map(|_| r.f32s("bias"))
                .collect::<Result<Vec<_>>>()?;
            let full_accuracy = r.f64("accuracy")?;
            let stored_accuracy = r.f64("accuracy")?;
            let quant_passes = r.u32("pass count")?;
            let tolerance_missed = r.u8("tolerance flag")? != 0;
            let attempts = r.u32("attempt count")?;
            let prune_log = serde_json::from_slice(&r.bytes("pruning log")?)?;
            tasks.push(TaskRecord {
                task,
                coding,
                biases,
                full_accuracy,
                stored_accuracy,
                quant_passes,
                tolerance_missed,
                attempts,
                prune_log,
            });
        }

        let manifest = serde_json::from_slice(&r.bytes("manifest")?)?;

        let n_rows = r.u32("accuracy matrix")?;
        let mut rows = Vec::new();
        for _ in 0..n_rows {
            let n = r.u32("accuracy row")?;
            rows.push((0..n).map(|_| r.f64("accuracy")).collect::<Result<Vec<_>>>()?);
        }
        let matrix = AccuracyMatrix::from_rows(rows)
            .map_err(|e| Error::Corrupt(format!("accuracy matrix: {e}")))?;

        if r.at() != body.len() as u64 {
            return Err(Error::Corrupt(format!(
                "{} unexpected bytes before the checksum",
                body.len() as u64 - r.at()
            )));
        }
        let cp = Checkpoint {
            config,
            spec,
            store,
            tasks,
            manifest,
            matrix,
        };
        cp.check_consistency()?;
        Ok(cp)
    }

    fn check_consistency(&self) -> Result<()> {
        let ids: Vec<TaskId> = self.tasks.iter().map(|t| t.task).collect();
        if ids != self.store.tasks() {
            return Err(Error::Corrupt(format!(
                "task records {ids:?} do not match stored tasks {:?}",
                self.store.tasks()
            )));
        }
        if self.matrix.episodes() != self.tasks.len() {
            return Err(Error::Corrupt(format!(
                "{} accuracy rows for {} tasks",
                self.matrix.episodes(),
                self.tasks.len()
            )));
        }
        for r in &self.tasks {
            let q = r.quantized(&self.store)?;
            let biases: Vec<ndarray::Array1<f32>> =
                r.biases.iter().map(|b| ndarray::Array1::from(b.clone())).collect();
            crate::quant::assemble(&self.spec, &q, &biases)?;
        }
        Ok(())
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
