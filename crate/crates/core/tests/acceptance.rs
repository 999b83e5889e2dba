//! End-to-end acceptance checks, one verdict line per criterion.
//!
//! Criteria 1-3 need the MNIST IDX files, looked up in `$QPACK_MNIST_DIR`
//! or `data/mnist` at the workspace root; without them they print SKIP.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qpack::checkpoint::Checkpoint;
use qpack::config::{RunConfig, MNIST_FILES};
use qpack::mask::{TaskMask, WeightSlotStore, SLOT_BITS};
use qpack::metrics::{self, AccuracyMatrix};
use qpack::nn::{self, DenseWeights, ModelSpec};
use qpack::pruning::select_best;
use qpack::quant::kmeans::{kmeans_1d, KMeansConfig};
use qpack::quant::{self, QuantConfig};
use qpack::report;
use qpack::runner::{self, RunOptions, RunOutcome, RunStatus, CHECKPOINT_FILE};
use qpack::scenario::ScenarioSuite;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("QPACK_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    MNIST_FILES.iter().all(|f| dir.join(f).is_file()).then_some(dir)
}

fn config(dir: &Path, sets: &[String]) -> RunConfig {
    let mut all = sets.to_vec();
    all.push(format!("run.output_dir={:?}", dir.to_str().unwrap()));
    RunConfig::from_toml("", &all).expect("valid config")
}

fn synthetic_sets() -> Vec<String> {
    vec!["scenario.kind=\"synthetic\"".into(), "model.layers=[20, 32, 4]".into()]
}

struct MnistRun {
    outcome: RunOutcome,
    suite: ScenarioSuite,
    dir: tempfile::TempDir,
    seconds: f64,
}

fn mnist_run(data: &Path) -> MnistRun {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[format!("scenario.mnist_dir={:?}", data.to_str().unwrap())]);
    let suite = runner::build_scenario(&cfg).expect("MNIST scenario");
    let start = Instant::now();
    let outcome = runner::run_with_suite(&cfg, &suite, &RunOptions::default()).expect("p-MNIST run");
    MnistRun {
        outcome,
        suite,
        dir,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn criterion_1(run: &MnistRun) -> Verdict {
    let cp = &run.outcome.checkpoint;
    if run.outcome.status != RunStatus::Completed {
        return Verdict::Fail(format!("run ended with {:?}", run.outcome.status));
    }
    let lifelong = metrics::lifelong_accuracy(&cp.matrix).unwrap();
    let bits: Vec<u8> = cp.tasks.iter().map(|r| r.bits()).collect();
    check(
        lifelong >= 0.93 && bits.iter().all(|&b| b <= 4) && cp.tasks.len() == 3,
        format!(
            "lifelong accuracy {lifelong:.4} (need >= 0.93), bit-widths {bits:?} (need <= 4), {:.0}s",
            run.seconds
        ),
    )
}

fn criterion_2(run: &MnistRun) -> Verdict {
    let cp = &run.outcome.checkpoint;
    let cfg = QuantConfig {
        seed: 0,
        ..QuantConfig::default()
    };
    let mut drops = Vec::new();
    for fp in &run.outcome.full_precision {
        let test = &run.suite.tasks[fp.task as usize].test;
        let full = nn::evaluate(&cp.spec, &fp.weights, &fp.mask, test).unwrap();
        let q = quant::nonlinear_quantize(fp.task, 4, &fp.mask, &fp.weights, &cfg).unwrap();
        let rebuilt = quant::assemble(&cp.spec, &q.weights, &fp.weights.biases()).unwrap();
        let at4 = nn::evaluate(&cp.spec, &rebuilt, &fp.mask, test).unwrap();
        drops.push(full - at4);
    }
    let worst = drops.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shown: Vec<String> = drops.iter().map(|d| format!("{:+.2}pp", -100.0 * d)).collect();
    check(
        drops.len() == 3 && worst <= 0.02,
        format!("test accuracy change at 4 bits per task {shown:?} (need drop <= 2pp)"),
    )
}

/// The three-term capacity sum, counted directly from the slots.
fn hand_capacity(store: &WeightSlotStore, task: u32, bits: u8) -> u64 {
    let mut used = 0u64;
    for l in 0..store.num_layers() {
        used += store
            .layer_slots(l)
            .iter()
            .filter(|s| s.components().iter().any(|c| c.task == task))
            .count() as u64;
    }
    let b = bits as u64;
    used * b + store.num_layers() as u64 * (1 << b) * (32 + b) + used
}

fn criterion_3(run: &MnistRun) -> Verdict {
    let cp = &run.outcome.checkpoint;
    let cap = report::capacity_report(cp).unwrap();
    let dense = cp.spec.total_slots() as u64 * SLOT_BITS as u64;
    let mut pct = Vec::new();
    let mut ok = cap.dense_bits == dense;
    for c in &cap.tasks {
        let worst_total = c.weight_bits + c.codebook_bits_worst_case + c.mask_bits;
        let p = 100.0 * worst_total as f64 / dense as f64;
        ok &= p <= 15.0 && c.total_bits <= worst_total;
        pct.push(format!("{p:.2}%"));
    }
    let first = &cp.tasks[0];
    let hand = hand_capacity(&cp.store, first.task, first.bits());
    let reported = cap.tasks[0].weight_bits + cap.tasks[0].codebook_bits_worst_case + cap.tasks[0].mask_bits;
    ok &= hand == reported;
    let sparsity: Vec<String> = cp
        .tasks
        .iter()
        .map(|r| format!("{:.3?}", r.prune_log.task_sparsity))
        .collect();
    check(
        ok,
        format!(
            "per-task capacity {pct:?} of dense (need <= 15%); task 0 hand count {hand} bits vs report {reported}; per-layer task sparsity {sparsity:?}"
        ),
    )
}

/// Re-reads the saved checkpoint and re-evaluates task 0 against the
/// matrix entries recorded during the run.
fn task_zero_is_bit_exact(dir: &Path, suite: &ScenarioSuite) -> (bool, f64) {
    let cp = Checkpoint::load(&dir.join(CHECKPOINT_FILE)).unwrap();
    let again = runner::evaluate_record(&cp.spec, &cp.store, &cp.tasks[0], &suite.tasks[0].test).unwrap();
    let column: Vec<u64> = cp.matrix.rows().iter().map(|r| r[0].to_bits()).collect();
    (column.iter().all(|&b| b == again.to_bits()), again)
}

fn criterion_4(mnist: Option<&MnistRun>) -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for n_tasks in [3usize, 5] {
        let dir = tempfile::tempdir().unwrap();
        let mut sets = synthetic_sets();
        sets.push(format!("scenario.n_tasks={n_tasks}"));
        let cfg = config(dir.path(), &sets);
        let suite = runner::build_scenario(&cfg).unwrap();
        let out = runner::run_with_suite(&cfg, &suite, &RunOptions::default()).unwrap();
        let violations = metrics::forget_check(&out.checkpoint.matrix);
        let (exact, _) = task_zero_is_bit_exact(dir.path(), &suite);
        ok &= violations.is_empty() && exact;
        notes.push(format!("synthetic x{n_tasks}: {} violation(s), task 0 exact {exact}", violations.len()));
    }
    if let Some(run) = mnist {
        let violations = metrics::forget_check(&run.outcome.checkpoint.matrix);
        let (exact, acc) = task_zero_is_bit_exact(run.dir.path(), &run.suite);
        ok &= violations.is_empty() && exact;
        notes.push(format!(
            "p-MNIST: {} violation(s), task 0 re-evaluated {acc} exact {exact}",
            violations.len()
        ));
    }
    check(ok, notes.join("; "))
}

/// Best SSE over every split of the sorted values into at most `k`
/// contiguous groups.
fn brute_force_sse(values: &[f64], k: usize) -> f64 {
    let mut xs = values.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let group_sse = |a: usize, b: usize| {
        let g = &xs[a..b];
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        g.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
    };
    let mut best = f64::INFINITY;
    // Each bit of `cuts` marks a boundary after position i.
    for cuts in 0u32..(1 << (n - 1)) {
        if cuts.count_ones() as usize + 1 > k {
            continue;
        }
        let mut start = 0;
        let mut total = 0.0;
        for i in 0..n - 1 {
            if cuts >> i & 1 == 1 {
                total += group_sse(start, i + 1);
                start = i + 1;
            }
        }
        total += group_sse(start, n);
        best = best.min(total);
    }
    best
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for i in 0..200 {
        let n = rng.gen_range(1..=12);
        let k = rng.gen_range(1..=3);
        let values: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    rng.gen_range(-2..=2) as f64 * 0.5
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            })
            .collect();
        let cfg = KMeansConfig {
            seed: i,
            ..KMeansConfig::default()
        };
        let got = kmeans_1d(&values, k, &cfg).unwrap().sse;
        let opt = brute_force_sse(&values, k);
        let rel = (got - opt).abs() / opt.abs().max(f64::MIN_POSITIVE);
        let ok = if opt == 0.0 { got.abs() < 1e-15 } else { rel <= 1e-9 };
        if !ok {
            failures += 1;
        }
        if opt > 0.0 {
            worst = worst.max(rel);
        }
    }
    check(
        failures == 0,
        format!("200 instances, {failures} off the exhaustive optimum, worst relative gap {worst:.2e} (need <= 1e-9)"),
    )
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-4;
    let mut worst = 0.0f64;
    for net in 0..20u64 {
        let depth = rng.gen_range(2..=4);
        let sizes: Vec<usize> = (0..depth).map(|_| rng.gen_range(2..=6)).collect();
        let spec = ModelSpec::new(sizes).unwrap();
        let mask = TaskMask::from_bools(
            &spec
                .slot_counts()
                .iter()
                .map(|&n| (0..n).map(|_| rng.gen_bool(0.7)).collect())
                .collect::<Vec<_>>(),
        );
        let mut w: DenseWeights<f64> = nn::xavier_init(&spec, net);
        for layer in &mut w.layers {
            layer.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        let rows = 6;
        let x = ndarray::Array2::from_shape_fn((rows, spec.input_dim()), |_| rng.gen_range(-1.0..1.0));
        let y: Vec<u32> = (0..rows).map(|_| rng.gen_range(0..spec.output_dim()) as u32).collect();
        let (_, g) = nn::loss_and_gradients(&spec, &w, &mask, x.view(), &y).unwrap();
        let loss = |w: &DenseWeights<f64>| nn::loss(&spec, w, &mask, x.view(), &y).unwrap();

        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for l in 0..spec.num_layers() {
            let cols = w.layers[l].weights.ncols();
            for i in mask.iter_ones(l) {
                let (r, c) = (i / cols, i % cols);
                let mut p = w.clone();
                p.layers[l].weights[[r, c]] += h;
                let mut m = w.clone();
                m.layers[l].weights[[r, c]] -= h;
                analytic.push(g.weights[l][[r, c]]);
                numeric.push((loss(&p) - loss(&m)) / (2.0 * h));
            }
            for i in 0..w.layers[l].bias.len() {
                let mut p = w.clone();
                p.layers[l].bias[i] += h;
                let mut m = w.clone();
                m.layers[l].bias[i] -= h;
                analytic.push(g.biases[l][i]);
                numeric.push((loss(&p) - loss(&m)) / (2.0 * h));
            }
        }
        let a = Array1::from(analytic);
        let n = Array1::from(numeric);
        let diff = (&a - &n).mapv(|v| v * v).sum().sqrt();
        let scale = a.mapv(|v| v * v).sum().sqrt() + n.mapv(|v| v * v).sum().sqrt();
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        worst = worst.max(rel);
    }
    check(
        worst < 1e-4,
        format!("20 networks, worst relative error {worst:.2e} (need < 1e-4)"),
    )
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (alpha, beta) = (0.9, 0.1);
    let mut mismatches = 0;
    let mut dominated_wins = 0;
    for _ in 0..500 {
        let n = rng.gen_range(1..=32);
        let acc: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.2) { 0.5 } else { rng.gen_range(0.0..=1.0) })
            .collect();
        let sp: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.2) { 100.0 } else { rng.gen_range(0.0..500.0) })
            .collect();
        let max_a = acc.iter().copied().fold(0.0, f64::max);
        let max_s = sp.iter().copied().fold(0.0, f64::max);
        let score = |i: usize| {
            let ta = if max_a > 0.0 { acc[i] / max_a } else { 0.0 };
            let ts = if max_s > 0.0 { sp[i] / max_s } else { 0.0 };
            alpha * ta + beta * ts
        };
        let mut direct = 0;
        for i in 1..n {
            if score(i) > score(direct) {
                direct = i;
            }
        }
        let chosen = select_best(&acc, &sp, alpha, beta).unwrap();
        if chosen != direct {
            mismatches += 1;
        }
        let dominated = (0..n).any(|j| {
            acc[j] >= acc[chosen] && sp[j] >= sp[chosen] && (acc[j] > acc[chosen] || sp[j] > sp[chosen])
        });
        if dominated {
            dominated_wins += 1;
        }
    }
    check(
        mismatches == 0 && dominated_wins == 0,
        format!("500 populations, {mismatches} differ from the direct formula, {dominated_wins} dominated winners"),
    )
}

fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let slots = [9usize, 5];
    let (mut commits, mut rejects, mut violations) = (0u64, 0u64, 0u64);
    for _ in 0..10_000 {
        let cap = rng.gen_range(1..=4);
        let mut store = WeightSlotStore::new(&slots, cap);
        let mut owned: Vec<(u32, u8, Vec<Vec<u32>>)> = Vec::new();
        for _ in 0..rng.gen_range(1..=12) {
            let task = rng.gen_range(0..10u32);
            let bits = rng.gen_range(1..=SLOT_BITS);
            let density = rng.gen_range(0.0..1.0);
            let mask = TaskMask::from_bools(
                &slots
                    .iter()
                    .map(|&n| (0..n).map(|_| rng.gen_bool(density)).collect())
                    .collect::<Vec<_>>(),
            );
            let wide = rng.gen_bool(0.05);
            let codes: Vec<Vec<u32>> = (0..slots.len())
                .map(|l| {
                    mask.iter_ones(l)
                        .map(|_| {
                            let c: u32 = rng.gen();
                            if wide || bits == 32 { c } else { c & ((1 << bits) - 1) }
                        })
                        .collect()
                })
                .collect();
            let before = store.clone();
            match store.commit(task, &mask, bits, &codes) {
                Ok(()) => {
                    commits += 1;
                    if owned.iter().any(|o| o.0 == task) {
                        violations += 1;
                    }
                    owned.push((task, bits, codes));
                }
                Err(_) => {
                    rejects += 1;
                    if store != before {
                        violations += 1;
                    }
                }
            }
            for l in 0..slots.len() {
                for s in store.layer_slots(l) {
                    let used: u32 = s.components().iter().map(|c| c.bits as u32).sum();
                    let mut tasks: Vec<u32> = s.components().iter().map(|c| c.task).collect();
                    tasks.sort_unstable();
                    tasks.dedup();
                    if used + s.remaining_bits() as u32 != SLOT_BITS as u32
                        || s.components().len() > cap
                        || tasks.len() != s.components().len()
                    {
                        violations += 1;
                    }
                }
            }
            for (task, bits, codes) in &owned {
                // A task that claimed no slot has no width on record.
                let width = if codes.iter().all(Vec::is_empty) { 0 } else { *bits };
                match store.task_codes(*task) {
                    Ok((b, c)) if b == width && &c == codes => {}
                    _ => violations += 1,
                }
            }
        }
    }
    check(
        violations == 0,
        format!("10000 sequences ({commits} commits, {rejects} rejections), {violations} invariant violations"),
    )
}

fn criterion_9() -> Verdict {
    let files = |dir: &Path| -> Vec<Vec<u8>> {
        [report::ACCURACY_CSV, report::CAPACITY_CSV, report::SUMMARY_JSON, report::MANIFEST_JSON]
            .iter()
            .map(|n| std::fs::read(dir.join(n)).unwrap())
            .collect()
    };
    let bits = |m: &AccuracyMatrix| -> Vec<Vec<u64>> {
        m.rows().iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect()
    };
    let sets = synthetic_sets();
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    let first = runner::run(&config(a.path(), &sets), &RunOptions::default()).unwrap();
    runner::run(&config(b.path(), &sets), &RunOptions::default()).unwrap();
    let identical = files(a.path()) == files(b.path());

    runner::run(&config(c.path(), &sets), &RunOptions { stop_after: Some(1) }).unwrap();
    let resumed = runner::resume(&c.path().join(CHECKPOINT_FILE), &RunOptions::default()).unwrap();
    let same_state = resumed.checkpoint.store == first.checkpoint.store
        && resumed.checkpoint.tasks == first.checkpoint.tasks
        && bits(&resumed.checkpoint.matrix) == bits(&first.checkpoint.matrix);
    let same_reports = files(c.path()) == files(a.path());
    check(
        identical && same_state && same_reports,
        format!(
            "repeat run reports identical {identical}; resumed after task 0: state identical {same_state}, reports identical {same_reports}"
        ),
    )
}

fn main() -> ExitCode {
    let mnist = mnist_dir().map(|d| mnist_run(&d));
    let skip = || Verdict::Skip("MNIST IDX files not found (set QPACK_MNIST_DIR)".into());
    let verdicts = [
        mnist.as_ref().map_or_else(skip, criterion_1),
        mnist.as_ref().map_or_else(skip, criterion_2),
        mnist.as_ref().map_or_else(skip, criterion_3),
        criterion_4(mnist.as_ref()),
        criterion_5(),
        criterion_6(),
        criterion_7(),
        criterion_8(),
        criterion_9(),
    ];
    let mut failed = 0;
    for (i, v) in verdicts.iter().enumerate() {
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("criterion {}: {tag}: {detail}", i + 1);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
