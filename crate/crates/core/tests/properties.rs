use proptest::prelude::*;
use vflsim_core::data::{partition_features, reassign_task, TaskSpec};
use vflsim_core::defenses::{clip_gradient, compress_topk, dp_gaussian, topk_count};
use vflsim_core::info::{binned_mi, discrete_mi, exact_mi, mi_via_entropies, JointTable};
use vflsim_core::vfl::{aggregate_embeddings, scatter_gradient};
use vflsim_core::Matrix;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

fn joint() -> impl Strategy<Value = JointTable> {
    (1usize..6, 1usize..6).prop_flat_map(|(nx, ny)| {
        prop::collection::vec(0.0f64..1.0, nx * ny)
            .prop_filter("some mass", |w| w.iter().sum::<f64>() > 1e-6)
            .prop_map(move |w| JointTable::from_counts(nx, ny, &w).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn partition_covers_columns_once(d in 1usize..60, k in 1usize..8, seed: u64) {
        prop_assume!(d >= k);
        let parts = partition_features(d, k, seed).unwrap();
        prop_assert_eq!(parts.len(), k);
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..d).collect::<Vec<_>>());
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(sizes[0] - sizes[k - 1] <= 1);
    }

    #[test]
    fn reassignment_stays_in_range(
        c_new in 1usize..6,
        extra in prop::collection::vec(0usize..6, 0..6),
        labels in prop::collection::vec(0usize..64, 0..50),
    ) {
        let mut mapping: Vec<usize> = (0..c_new).collect();
        mapping.extend(extra.iter().map(|m| m % c_new));
        let c_orig = mapping.len();
        let spec = TaskSpec::new("p", mapping.clone(), c_new).unwrap();
        let labels: Vec<usize> = labels.iter().map(|l| l % c_orig).collect();
        let out = reassign_task(&labels, &spec).unwrap();
        prop_assert_eq!(out.len(), labels.len());
        for (y, z) in labels.iter().zip(&out) {
            prop_assert!(*z < c_new);
            prop_assert_eq!(*z, mapping[*y]);
        }
    }

    #[test]
    fn clipped_rows_respect_bound(g in matrix(20, 8), max_norm in 0.01f64..5.0) {
        let out = clip_gradient(&g, max_norm);
        for (a, b) in out.iter_rows().zip(g.iter_rows()) {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(na <= max_norm + 1e-9);
            if nb <= max_norm {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn noiseless_dp_is_clipping(g in matrix(10, 6), clip in 0.1f64..3.0, seed: u64) {
        prop_assert_eq!(dp_gaussian(&g, clip, 0.0, seed), clip_gradient(&g, clip));
    }

    #[test]
    fn topk_keeps_exact_count(g in matrix(10, 12), keep in 0.01f64..=1.0) {
        let k = topk_count(g.cols(), keep);
        let out = compress_topk(&g, keep);
        for (a, b) in out.iter_rows().zip(g.iter_rows()) {
            let nonzero_in = b.iter().filter(|v| **v != 0.0).count();
            let nonzero_out = a.iter().filter(|v| **v != 0.0).count();
            prop_assert_eq!(nonzero_out, k.min(nonzero_in));
            let smallest_kept = a.iter().filter(|v| **v != 0.0).map(|v| v.abs()).fold(f64::INFINITY, f64::min);
            for (x, y) in a.iter().zip(b) {
                if *x == 0.0 && *y != 0.0 {
                    prop_assert!(y.abs() <= smallest_kept);
                }
            }
        }
    }

    #[test]
    fn mi_is_symmetric_and_decomposes(j in joint()) {
        let mi = exact_mi(&j);
        prop_assert!(mi >= -1e-12);
        prop_assert!((mi - exact_mi(&j.transpose())).abs() <= 1e-12);
        prop_assert!((mi - mi_via_entropies(&j)).abs() <= 1e-12);
    }

    #[test]
    fn merging_bins_never_adds_information(
        act in matrix(60, 3),
        labels in prop::collection::vec(0usize..4, 60),
        n_bins in 2usize..12,
    ) {
        let labels = &labels[..act.rows()];
        let coarse = binned_mi(&act, labels, n_bins).unwrap().value;
        let fine = binned_mi(&act, labels, 2 * n_bins).unwrap().value;
        prop_assert!(coarse <= fine + 1e-9);
    }

    #[test]
    fn relabeling_symbols_never_adds_information(
        xs in prop::collection::vec(0usize..8, 1..80),
        ys_seed in prop::collection::vec(0usize..3, 80),
        merge in 1usize..8,
    ) {
        let ys = &ys_seed[..xs.len()];
        let merged: Vec<usize> = xs.iter().map(|x| x % merge).collect();
        prop_assert!(discrete_mi(&merged, ys).unwrap() <= discrete_mi(&xs, ys).unwrap() + 1e-9);
    }

    #[test]
    fn binned_estimate_is_bounded(
        act in matrix(40, 3),
        labels in prop::collection::vec(0usize..5, 40),
        n_bins in 2usize..20,
    ) {
        let labels = &labels[..act.rows()];
        let est = binned_mi(&act, labels, n_bins).unwrap();
        let mut cells: Vec<Vec<i64>> = act.iter_rows().map(|r| r.iter().map(|v| v.to_bits() as i64).collect()).collect();
        cells.sort();
        cells.dedup();
        let mut classes = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let cap = (cells.len().min(classes.len()) as f64).log2();
        prop_assert!(est.value >= 0.0);
        prop_assert!(est.value <= cap + 1e-9);
    }

    #[test]
    fn scatter_inverts_aggregate(
        rows in 1usize..10,
        widths in prop::collection::vec(1usize..5, 1..5),
        seed: u64,
    ) {
        let parts: Vec<Matrix> = widths
            .iter()
            .enumerate()
            .map(|(p, &w)| {
                let v = (0..rows * w).map(|i| (seed % 97) as f64 + (p * 1000 + i) as f64).collect();
                Matrix::from_vec(rows, w, v).unwrap()
            })
            .collect();
        let agg = aggregate_embeddings(&parts).unwrap();
        prop_assert_eq!(agg.cols(), widths.iter().sum::<usize>());
        prop_assert_eq!(scatter_gradient(&agg, &widths).unwrap(), parts);
    }
}
