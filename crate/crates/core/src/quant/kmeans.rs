//! Scalar k-means.
//!
//! Values are sorted once; in one dimension every nearest-centroid
//! clustering is a run of contiguous sorted values, so assignment is a
//! single merge-style sweep. Candidates come from Lloyd iterations started
//! at evenly spaced quantiles, at seeded random picks, and (optionally) at a
//! caller-supplied warm start. When the problem is small enough, the exact
//! dynamic-programming optimum joins the candidate pool. The lowest
//! within-cluster sum of squares wins.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::seed;

/// Work limit (k · n · log2 n) under which the exact solver also runs.
const EXACT_BUDGET: f64 = 2.0e7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub iters: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            iters: 50,
            restarts: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Strictly ascending.
    pub centroids: Vec<f64>,
    /// Centroid index per input value, in input order.
    pub assignments: Vec<u32>,
    /// Sum of squared distances to the assigned centroids.
    pub sse: f64,
}

struct Sorted {
    xs: Vec<f64>,
    order: Vec<usize>,
}

impl Sorted {
    fn new(values: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let xs = order.iter().map(|&i| values[i]).collect();
        Self { xs, order }
    }

    fn distinct(&self) -> Vec<f64> {
        let mut d = self.xs.clone();
        d.dedup();
        d
    }

    /// Nearest centroid per sorted value; ties go to the lower index.
    /// `centroids` must be strictly ascending.
    fn assign(&self, centroids: &[f64], out: &mut [u32]) {
        let mut j = 0;
        for (a, &x) in out.iter_mut().zip(&self.xs) {
            while j + 1 < centroids.len() && (x - centroids[j + 1]).abs() < (x - centroids[j]).abs() {
                j += 1;
            }
            *a = j as u32;
        }
    }

    fn sse(&self, centroids: &[f64], assign: &[u32]) -> f64 {
        self.xs
            .iter()
            .zip(assign)
            .map(|(&x, &a)| (x - centroids[a as usize]).powi(2))
            .sum()
    }

    /// Contiguous `[start, end)` ranges of each centroid's members.
    fn ranges(&self, k: usize, assign: &[u32]) -> Vec<(usize, usize)> {
        let mut ranges = vec![(0, 0); k];
        let mut start = 0;
        for (c, range) in ranges.iter_mut().enumerate() {
            let mut end = start;
            while end < assign.len() && assign[end] as usize == c {
                end += 1;
            }
            *range = (start, end);
            start = end;
        }
        ranges
    }

    /// Adds centroids until there are `k`, each time at the member of the
    /// worst cluster farthest from its centroid. Never increases the SSE.
    fn fill(&self, mut centroids: Vec<f64>, k: usize) -> Vec<f64> {
        let mut assign = vec![0u32; self.xs.len()];
        while centroids.len() < k {
            self.assign(&centroids, &mut assign);
            let mut worst = None;
            let mut worst_sse = 0.0;
            for (c, &(s, e)) in self.ranges(centroids.len(), &assign).iter().enumerate() {
                let sse: f64 = self.xs[s..e].iter().map(|x| (x - centroids[c]).powi(2)).sum();
                if sse > worst_sse {
                    worst_sse = sse;
                    worst = Some((c, s, e));
                }
            }
            let Some((c, s, e)) = worst else { break };
            let far = self.xs[s..e]
                .iter()
                .copied()
                .max_by(|a, b| (a - centroids[c]).abs().total_cmp(&(b - centroids[c]).abs()))
                .expect("non-empty cluster");
            let pos = centroids.partition_point(|&v| v < far);
            centroids.insert(pos, far);
        }
        centroids
    }

    /// Lloyd iterations from `init`; returns the best state visited.
    fn lloyd(&self, init: Vec<f64>, iters: usize) -> (Vec<f64>, Vec<u32>, f64) {
        let n = self.xs.len();
        let mut centroids = init;
        let mut assign = vec![0u32; n];
        self.assign(&centroids, &mut assign);
        let mut best_sse = self.sse(&centroids, &assign);
        let mut best = (centroids.clone(), assign.clone());

        for _ in 0..iters {
            let k = centroids.len();
            let mut next: Vec<f64> = self
                .ranges(k, &assign)
                .into_iter()
                .filter(|(s, e)| e > s)
                .map(|(s, e)| self.xs[s..e].iter().sum::<f64>() / (e - s) as f64)
                .collect();
            next.dedup();
            if next.len() < k {
                // Empty clusters are re-seeded where they help most.
                next = self.fill(next, k);
            }
            let mut next_assign = vec![0u32; n];
            self.assign(&next, &mut next_assign);
            let sse = self.sse(&next, &next_assign);
            let stable = next_assign == assign;
            centroids = next;
            assign = next_assign;
            if sse < best_sse {
                best_sse = sse;
                best = (centroids.clone(), assign.clone());
            }
            if stable {
                break;
            }
        }
        (best.0, best.1, best_sse)
    }

    fn quantile_init(&self, k: usize) -> Vec<f64> {
        let n = self.xs.len();
        let mut c: Vec<f64> = (0..k)
            .map(|j| self.xs[(((j as f64 + 0.5) * n as f64 / k as f64) as usize).min(n - 1)])
            .collect();
        c.dedup();
        self.fill(c, k)
    }

    fn random_init(&self, distinct: &[f64], k: usize, rng_seed: u64) -> Vec<f64> {
        let mut rng = seed::rng(rng_seed);
        let mut c: Vec<f64> = index::sample(&mut rng, distinct.len(), k)
            .into_iter()
            .map(|i| distinct[i])
            .collect();
        c.sort_by(f64::total_cmp);
        c
    }

    /// Optimal contiguous partition into exactly `k` clusters by dynamic
    /// programming with divide-and-conquer row optimisation.
    fn exact(&self, k: usize) -> Vec<f64> {
        let n = self.xs.len();
        let mean = self.xs.iter().sum::<f64>() / n as f64;
        let mut s1 = vec![0.0; n + 1];
        let mut s2 = vec![0.0; n + 1];
        for (i, &x) in self.xs.iter().enumerate() {
            let d = x - mean;
            s1[i + 1] = s1[i] + d;
            s2[i + 1] = s2[i] + d * d;
        }
        // Cost of one cluster over sorted values [a, b).
        let cost = |a: usize, b: usize| {
            let m = (b - a) as f64;
            let s = s1[b] - s1[a];
            (s2[b] - s2[a] - s * s / m).max(0.0)
        };

        // prev[i]: best cost of covering the first i values with `m` clusters.
        let mut prev: Vec<f64> = (0..=n).map(|i| if i == 0 { 0.0 } else { cost(0, i) }).collect();
        let mut splits: Vec<Vec<usize>> = vec![vec![0; n + 1]];
        for m in 2..=k {
            let mut cur = vec![f64::INFINITY; n + 1];
            let mut arg = vec![0usize; n + 1];
            solve_row(m, n, m - 1, n - 1, &prev, &cost, &mut cur, &mut arg);
            prev = cur;
            splits.push(arg);
        }

        let mut bounds = vec![n];
        let mut end = n;
        for m in (1..k).rev() {
            end = splits[m][end];
            bounds.push(end);
        }
        bounds.push(0);
        bounds.reverse();
        let mut centroids: Vec<f64> = bounds
            .windows(2)
            .map(|w| self.xs[w[0]..w[1]].iter().sum::<f64>() / (w[1] - w[0]) as f64)
            .collect();
        centroids.dedup();
        centroids
    }
}

/// Fills `cur[i]` for `i` in `lo..=hi` given that the optimal last split
/// lies in `opt_lo..=opt_hi` and is monotone in `i`.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
fn solve_row(
    lo: usize,
    hi: usize,
    opt_lo: usize,
    opt_hi: usize,
    prev: &[f64],
    cost: &dyn Fn(usize, usize) -> f64,
    cur: &mut [f64],
    arg: &mut [usize],
) {
    if lo > hi {
        return;
    }
    let mid = (lo + hi) / 2;
    let mut best = f64::INFINITY;
    let mut best_j = opt_lo;
    for j in opt_lo..=opt_hi.min(mid - 1) {
        let v = prev[j] + cost(j, mid);
        if v < best {
            best = v;
            best_j = j;
        }
    }
    cur[mid] = best;
    arg[mid] = best_j;
    if mid > lo {
        solve_row(lo, mid - 1, opt_lo, best_j, prev, cost, cur, arg);
    }
    solve_row(mid + 1, hi, best_j, opt_hi, prev, cost, cur, arg);
}

/// Clusters `values` into at most `k` groups.
pub fn kmeans_1d(values: &[f64], k: usize, cfg: &KMeansConfig) -> Result<Clustering> {
    kmeans_1d_warm(values, k, cfg, None)
}

/// As [`kmeans_1d`], adding a Lloyd run started from `warm` (topped up to
/// `k` centroids) to the candidate pool. The result's SSE is never above
/// the SSE of `warm` itself.
pub fn kmeans_1d_warm(
    values: &[f64],
    k: usize,
    cfg: &KMeansConfig,
    warm: Option<&[f64]>,
) -> Result<Clustering> {
    if values.is_empty() {
        return Err(Error::EmptyData("k-means input".into()));
    }
    if k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Corrupt(format!("non-finite value {bad} in k-means input")));
    }
    let sorted = Sorted::new(values);
    let distinct = sorted.distinct();
    let n = sorted.xs.len();

    let (centroids, sorted_assign, sse) = if distinct.len() <= k {
        let mut a = vec![0u32; n];
        sorted.assign(&distinct, &mut a);
        (distinct, a, 0.0)
    } else {
        let mut pool: Vec<Vec<f64>> = Vec::new();
        if let Some(w) = warm {
            let mut w: Vec<f64> = w.iter().copied().filter(|v| v.is_finite()).collect();
            w.sort_by(f64::total_cmp);
            w.dedup();
            w.truncate(k);
            if !w.is_empty() {
                pool.push(sorted.fill(w, k));
            }
        }
        pool.push(sorted.quantile_init(k));
        for r in 1..cfg.restarts.max(1) {
            pool.push(sorted.random_init(&distinct, k, seed::derive(cfg.seed, &[r as u64])));
        }
        let mut best: Option<(Vec<f64>, Vec<u32>, f64)> = None;
        for init in pool {
            let run = sorted.lloyd(init, cfg.iters);
            if best.as_ref().map_or(true, |b| run.2 < b.2) {
                best = Some(run);
            }
        }
        let log_n = (n as f64).log2().max(1.0);
        if (k as f64) * (n as f64) * log_n <= EXACT_BUDGET {
            let exact = sorted.exact(k);
            let mut a = vec![0u32; n];
            sorted.assign(&exact, &mut a);
            let sse = sorted.sse(&exact, &a);
            if sse < best.as_ref().unwrap().2 {
                best = Some((exact, a, sse));
            }
        }
        best.unwrap()
    };

    let mut assignments = vec![0u32; n];
    for (pos, &orig) in sorted.order.iter().enumerate() {
        assignments[orig] = sorted_assign[pos];
    }
    Ok(Clustering {
        centroids,
        assignments,
        sse,
    })
}
