//! Continual-learning scenarios: datasets, task splits and generators.

pub mod idx;

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// Share of each class's training samples held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Feature rows with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f32>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn new(features: Array2<f32>, labels: Vec<u32>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::shape(
                0,
                format!("{} labels", features.nrows()),
                labels.len(),
            ));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    /// Number of classes implied by the largest label.
    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }
}

/// Source data a scenario is carved from.
#[derive(Debug, Clone)]
pub struct BaseData {
    pub train: Dataset,
    pub test: Dataset,
    pub classes: usize,
}

impl BaseData {
    /// Loads the four standard MNIST IDX files from `dir`.
    pub fn load_mnist(dir: &Path) -> Result<Self> {
        let (train_images, train_labels) = idx::load_idx(
            &dir.join("train-images-idx3-ubyte"),
            &dir.join("train-labels-idx1-ubyte"),
        )?;
        let (test_images, test_labels) = idx::load_idx(
            &dir.join("t10k-images-idx3-ubyte"),
            &dir.join("t10k-labels-idx1-ubyte"),
        )?;
        let train = Dataset::new(train_images.features, train_labels)?;
        let test = Dataset::new(test_images.features, test_labels)?;
        if train.dim() != test.dim() {
            return Err(Error::Config(format!(
                "train images have {} pixels, test images {}",
                train.dim(),
                test.dim()
            )));
        }
        let classes = train.class_count().max(test.class_count());
        Ok(Self {
            train,
            test,
            classes,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub id: u32,
    pub classes: usize,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    #[default]
    Permuted,
    Split,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobParams {
    pub classes: usize,
    pub dim: usize,
    /// Training samples per class; a quarter as many (at least one) are
    /// drawn for the test split.
    pub samples: usize,
    /// Minimum distance between class means, in units of the per-axis
    /// standard deviation (which is 1).
    pub separation: f64,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            classes: 4,
            dim: 20,
            samples: 200,
            separation: 6.0,
        }
    }
}

/// Everything needed to regenerate a scenario exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub n_tasks: usize,
    pub validation_fraction: f64,
    /// Pixel permutation per task (permuted scenarios).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub permutations: Vec<Vec<u32>>,
    /// Original class ids per task (split scenarios).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_groups: Vec<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped_classes: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blobs: Option<BlobParams>,
}

#[derive(Debug, Clone)]
pub struct ScenarioSuite {
    pub tasks: Vec<TaskData>,
    pub manifest: ScenarioManifest,
}

impl ScenarioSuite {
    pub fn input_dim(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.train.dim())
    }

    pub fn classes_per_task(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.classes)
    }
}

/// Splits `data` into (train, validation), holding out
/// `round(fraction * n_c)` samples of every class `c`.
pub fn stratified_split(data: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let mut rng = seed::rng(seed);
    let classes = data.class_count();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in data.labels.iter().enumerate() {
        by_class[y as usize].push(i);
    }
    let mut train = Vec::with_capacity(data.len());
    let mut val = Vec::new();
    for mut rows in by_class {
        rows.shuffle(&mut rng);
        let held = ((rows.len() as f64 * fraction).round() as usize).min(rows.len());
        val.extend_from_slice(&rows[..held]);
        train.extend_from_slice(&rows[held..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (data.select(&train), data.select(&val))
}

fn task_from_splits(id: u32, classes: usize, train: Dataset, test: Dataset, seed: u64) -> TaskData {
    let (train, val) = stratified_split(
        &train,
        VALIDATION_FRACTION,
        seed::derive(seed, &[stream::VALIDATION, id as u64]),
    );
    TaskData {
        id,
        classes,
        train,
        val,
        test,
    }
}

/// Task 0 sees the original pixels; each later task applies its own random
/// pixel permutation to both train and test images.
pub fn permuted_scenario(base: &BaseData, n_tasks: usize, seed: u64) -> Result<ScenarioSuite> {
    if n_tasks == 0 {
        return Err(Error::Config("a scenario needs at least one task".into()));
    }
    let dim = base.train.dim();
    let mut permutations = Vec::with_capacity(n_tasks);
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let mut perm: Vec<usize> = (0..dim).collect();
        if t > 0 {
            perm.shuffle(&mut seed::rng(seed::derive(
                seed,
                &[stream::PERMUTATION, t as u64],
            )));
        }
        let apply = |d: &Dataset| Dataset {
            features: d.features.select(Axis(1), &perm),
            labels: d.labels.clone(),
        };
        tasks.push(task_from_splits(
            t as u32,
            base.classes,
            apply(&base.train),
            apply(&base.test),
            seed,
        ));
        permutations.push(perm.iter().map(|&p| p as u32).collect());
    }
    Ok(ScenarioSuite {
        tasks,
        manifest: ScenarioManifest {
            kind: ScenarioKind::Permuted,
            seed,
            n_tasks,
            validation_fraction: VALIDATION_FRACTION,
            permutations,
            class_groups: Vec::new(),
            dropped_classes: Vec::new(),
            blobs: None,
        },
    })
}

/// Partitions the classes into disjoint groups of `classes_per_task`
/// (seeded shuffle of class ids) and relabels each group to `0..k`.
/// Leftover classes are dropped.
pub fn split_scenario(base: &BaseData, classes_per_task: usize, seed: u64) -> Result<ScenarioSuite> {
    if classes_per_task == 0 || classes_per_task > base.classes {
        return Err(Error::Config(format!(
            "cannot split {} classes into groups of {classes_per_task}",
            base.classes
        )));
    }
    let mut ids: Vec<u32> = (0..base.classes as u32).collect();
    ids.shuffle(&mut seed::rng(seed::derive(seed, &[stream::CLASS_SPLIT])));
    let n_tasks = base.classes / classes_per_task;
    let dropped: Vec<u32> = ids[n_tasks * classes_per_task..].to_vec();
    if !dropped.is_empty() {
        log::warn!(
            "{} classes do not divide into groups of {classes_per_task}; dropping classes {dropped:?}",
            base.classes
        );
    }
    let groups: Vec<Vec<u32>> = ids[..n_tasks * classes_per_task]
        .chunks(classes_per_task)
        .map(<[u32]>::to_vec)
        .collect();

    let restrict = |d: &Dataset, group: &[u32]| {
        let rows: Vec<usize> = (0..d.len())
            .filter(|&i| group.contains(&d.labels[i]))
            .collect();
        let mut sub = d.select(&rows);
        for y in &mut sub.labels {
            *y = group.iter().position(|g| g == y).unwrap() as u32;
        }
        sub
    };
    let tasks = groups
        .iter()
        .enumerate()
        .map(|(t, g)| {
            task_from_splits(
                t as u32,
                classes_per_task,
                restrict(&base.train, g),
                restrict(&base.test, g),
                seed,
            )
        })
        .collect();
    Ok(ScenarioSuite {
        tasks,
        manifest: ScenarioManifest {
            kind: ScenarioKind::Split,
            seed,
            n_tasks,
            validation_fraction: VALIDATION_FRACTION,
            permutations: Vec::new(),
            class_groups: groups,
            dropped_classes: dropped,
            blobs: None,
        },
    })
}

const MEAN_PLACEMENT_TRIES: usize = 1000;

/// Isotropic unit-variance Gaussian clusters, one per class, with means at
/// least `separation` apart. Each task draws fresh means. Features are
/// affinely rescaled into `[0, 1]` per task.
pub fn synthetic_blobs(n_tasks: usize, params: BlobParams, seed: u64) -> Result<ScenarioSuite> {
    let BlobParams {
        classes,
        dim,
        samples,
        separation,
    } = params;
    if n_tasks == 0 || classes == 0 || dim == 0 {
        return Err(Error::Config(
            "blobs need at least one task, class and dimension".into(),
        ));
    }
    if samples == 0 {
        return Err(Error::Config("blobs need at least one sample per class".into()));
    }
    if separation.is_nan() || separation <= 0.0 {
        return Err(Error::Config(format!("separation must be positive, got {separation}")));
    }
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let spread = Normal::new(0.0, separation).expect("valid normal");
    let test_samples = (samples / 4).max(1);

    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let mut rng = seed::rng(seed::derive(seed, &[stream::BLOBS, t as u64]));
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
        for c in 0..classes {
            let mut placed = false;
            for _ in 0..MEAN_PLACEMENT_TRIES {
                let m: Vec<f64> = (0..dim).map(|_| spread.sample(&mut rng)).collect();
                let far = means.iter().all(|o| {
                    o.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                        >= separation
                });
                if far {
                    means.push(m);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Config(format!(
                    "could not place mean of class {c} at distance {separation} after {MEAN_PLACEMENT_TRIES} tries"
                )));
            }
        }
        let draw = |per_class: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut x = Vec::with_capacity(per_class * classes * dim);
            let mut y = Vec::with_capacity(per_class * classes);
            for i in 0..per_class * classes {
                let c = i % classes;
                x.extend(means[c].iter().map(|m| m + unit.sample(rng)));
                y.push(c as u32);
            }
            (x, y)
        };
        let (train_x, train_y) = draw(samples, &mut rng);
        let (test_x, test_y) = draw(test_samples, &mut rng);
        let (lo, hi) = train_x
            .iter()
            .chain(&test_x)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let scale = if hi > lo { 1.0 / (hi - lo) } else { 1.0 };
        let rescale = |x: Vec<f64>, n: usize| {
            Array2::from_shape_vec(
                (n, dim),
                x.into_iter().map(|v| ((v - lo) * scale) as f32).collect(),
            )
            .expect("sized")
        };
        let n_train = train_y.len();
        let n_test = test_y.len();
        let train = Dataset::new(rescale(train_x, n_train), train_y)?;
        let test = Dataset::new(rescale(test_x, n_test), test_y)?;
        tasks.push(task_from_splits(t as u32, classes, train, test, seed));
    }
    Ok(ScenarioSuite {
        tasks,
        manifest: ScenarioManifest {
            kind: ScenarioKind::Synthetic,
            seed,
            n_tasks,
            validation_fraction: VALIDATION_FRACTION,
            permutations: Vec::new(),
            class_groups: Vec::new(),
            dropped_classes: Vec::new(),
            blobs: Some(params),
        },
    })
}
