use proptest::prelude::*;
use qpack::pruning::{select_best, selection_scores};
use qpack::quant::kmeans::{kmeans_1d, kmeans_1d_warm, KMeansConfig};

fn sse_of(values: &[f64], centroids: &[f64], assignments: &[u32]) -> f64 {
    values
        .iter()
        .zip(assignments)
        .map(|(v, &a)| (v - centroids[a as usize]).powi(2))
        .sum()
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, 1..120)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn codes_index_the_codebook(xs in values(), k in 1usize..20, seed in any::<u64>()) {
        let cfg = KMeansConfig { seed, ..KMeansConfig::default() };
        let c = kmeans_1d(&xs, k, &cfg).unwrap();
        prop_assert!(!c.centroids.is_empty() && c.centroids.len() <= k);
        prop_assert!(c.centroids.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(c.assignments.len(), xs.len());
        prop_assert!(c.assignments.iter().all(|&a| (a as usize) < c.centroids.len()));
        let recomputed = sse_of(&xs, &c.centroids, &c.assignments);
        prop_assert!((recomputed - c.sse).abs() <= 1e-9 * (1.0 + recomputed));
        // Each value sits with its nearest centroid.
        for (x, &a) in xs.iter().zip(&c.assignments) {
            let d = (x - c.centroids[a as usize]).abs();
            prop_assert!(c.centroids.iter().all(|m| d <= (x - m).abs() + 1e-12));
        }
    }

    #[test]
    fn few_distinct_values_are_reproduced_exactly(
        pool in prop::collection::vec(-100i32..100, 1..8),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 1..60),
        k in 8usize..16,
    ) {
        let xs: Vec<f64> = picks.iter().map(|i| pool[i.index(pool.len())] as f64 / 8.0).collect();
        let c = kmeans_1d(&xs, k, &KMeansConfig::default()).unwrap();
        prop_assert_eq!(c.sse, 0.0);
        for (x, &a) in xs.iter().zip(&c.assignments) {
            prop_assert_eq!(c.centroids[a as usize], *x);
        }
    }

    #[test]
    fn warm_start_never_raises_the_error(xs in values(), bits in 1u32..5, seed in any::<u64>()) {
        let cfg = KMeansConfig { seed, ..KMeansConfig::default() };
        let narrow = kmeans_1d(&xs, 1 << bits, &cfg).unwrap();
        let wide = kmeans_1d_warm(&xs, 1 << (bits + 1), &cfg, Some(&narrow.centroids)).unwrap();
        prop_assert!(wide.sse <= narrow.sse * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn winner_is_not_dominated(
        pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..50.0), 1..32),
        alpha in 0.01f64..1.0,
    ) {
        let beta = 1.0 - alpha;
        let (acc, sp): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let w = select_best(&acc, &sp, alpha, beta).unwrap();
        for j in 0..acc.len() {
            let dominates = acc[j] >= acc[w] && sp[j] >= sp[w] && (acc[j] > acc[w] || sp[j] > sp[w]);
            prop_assert!(!dominates, "candidate {} dominates winner {}", j, w);
        }
        let scores = selection_scores(&acc, &sp, alpha, beta).unwrap();
        prop_assert!(scores.iter().all(|&s| s <= scores[w]));
        prop_assert!(scores[..w].iter().all(|&s| s < scores[w]));
    }

    #[test]
    fn dominated_newcomers_do_not_change_the_winner(
        pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..50.0), 1..16),
        extra in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 0..16),
    ) {
        let (mut acc, mut sp): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let w = select_best(&acc, &sp, 0.9, 0.1).unwrap();
        let (aw, sw) = (acc[w], sp[w]);
        for (fa, fs) in extra {
            acc.push(aw * fa);
            sp.push(sw * fs);
        }
        prop_assert_eq!(select_best(&acc, &sp, 0.9, 0.1).unwrap(), w);
    }

    #[test]
    fn candidate_order_does_not_change_the_winner(
        pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..50.0), 1..24),
        shuffle_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let (acc, sp): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let scores = selection_scores(&acc, &sp, 0.9, 0.1).unwrap();
        let w = select_best(&acc, &sp, 0.9, 0.1).unwrap();
        prop_assume!(scores.iter().filter(|&&s| s == scores[w]).count() == 1);
        let mut order: Vec<usize> = (0..acc.len()).collect();
        order.shuffle(&mut qpack::seed::rng(shuffle_seed));
        let acc2: Vec<f64> = order.iter().map(|&i| acc[i]).collect();
        let sp2: Vec<f64> = order.iter().map(|&i| sp[i]).collect();
        let w2 = select_best(&acc2, &sp2, 0.9, 0.1).unwrap();
        prop_assert_eq!(order[w2], w);
    }
}
