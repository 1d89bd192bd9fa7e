//! Property tests for the spec-level invariants that hold over whole input
//! families rather than single examples.

use gto_core::mesh::{DirectedEdgeSet, Mesh, NodeType};
use gto_core::partition::{merge_predictions, partition_mesh};
use gto_core::sampler::{flux_filter, orient_edges, point_edge_consistent_sample, sample_edges};
use gto_core::tape::Tape;
use gto_core::tensor::Tensor;
use proptest::prelude::*;
use std::sync::Arc;

fn finite_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-50.0f64..50.0, rows * cols)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(data in finite_matrix(3, 5)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(3, 5, data).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        for i in 0..3 {
            let s: f64 = tape.value(y).row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            for &v in tape.value(y).row(i) {
                prop_assert!(v >= 0.0);
            }
        }
    }

    #[test]
    fn softmax_is_column_permutation_equivariant(data in finite_matrix(2, 4), shift in 0usize..4) {
        let perm: Vec<usize> = (0..4).map(|j| (j + shift) % 4).collect();
        let x = Tensor::from_vec(2, 4, data).unwrap();
        let xp = Tensor::from_fn(2, 4, |i, j| x.at(i, perm[j]));
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(x);
        let b = tape.constant(xp);
        let ya = tape.softmax_rows(a).unwrap();
        let yb = tape.softmax_rows(b).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                prop_assert!((tape.value(yb).at(i, j) - tape.value(ya).at(i, perm[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_invariant_to_constant_logit_shift(data in finite_matrix(2, 4), shift in -30.0f64..30.0) {
        let x = Tensor::from_vec(2, 4, data).unwrap();
        let xs = x.map(|v| v + shift);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(x);
        let b = tape.constant(xs);
        let ya = tape.softmax_rows(a).unwrap();
        let yb = tape.softmax_rows(b).unwrap();
        prop_assert!(tape.value(ya).max_abs_diff(tape.value(yb)) < 1e-9);
    }

    #[test]
    fn concat_then_split_round_trips(a in finite_matrix(3, 2), b in finite_matrix(3, 4)) {
        let ta = Tensor::from_vec(3, 2, a).unwrap();
        let tb = Tensor::from_vec(3, 4, b).unwrap();
        let mut tape = Tape::<f64>::new();
        let va = tape.constant(ta.clone());
        let vb = tape.constant(tb.clone());
        let cat = tape.concat_cols(va, vb).unwrap();
        let (l, r) = tape.split_cols(cat, 2).unwrap();
        prop_assert_eq!(tape.value(l), &ta);
        prop_assert_eq!(tape.value(r), &tb);
    }

    #[test]
    fn segment_mean_recentering(values in finite_matrix(10, 3), segs in proptest::collection::vec(0u32..4, 10)) {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::from_vec(10, 3, values).unwrap());
        let seg = Arc::new(segs);
        let means = tape.segment_mean(v, seg.clone(), 4).unwrap();
        let gathered = tape.gather_rows(means, seg.clone()).unwrap();
        let centered = tape.sub(v, gathered).unwrap();
        let remean = tape.segment_mean(centered, seg, 4).unwrap();
        for &x in tape.value(remean).data() {
            prop_assert!(x.abs() < 1e-9);
        }
    }

    #[test]
    fn normalization_round_trip(values in finite_matrix(20, 2)) {
        use gto_core::encoder::{denormalize_fields, normalize_fields, NormStats, RunningStats};
        let t = Tensor::from_vec(20, 2, values).unwrap();
        let mut rs = RunningStats::new(2);
        for i in 0..20 {
            rs.push_row(t.row(i));
        }
        let (mean, std) = rs.finish::<f64>();
        let stats = NormStats {
            field_mean: mean.clone(),
            field_std: std.clone(),
            global_mean: Tensor::zeros(1, 1),
            global_std: Tensor::filled(1, 1, 1.0),
            target_mean: mean,
            target_std: std,
        };
        let z = normalize_fields(&t, &stats);
        let back = denormalize_fields(&z, &stats);
        prop_assert!(back.max_abs_diff(&t) < 1e-6);
    }

    #[test]
    fn flux_filter_after_closure_is_idempotent(pairs in proptest::collection::vec((0u32..20, 0u32..20), 1..40)) {
        // Dedup to honor the no-duplicate invariant; drop self loops.
        let mut seen = std::collections::BTreeSet::new();
        let mut senders = Vec::new();
        let mut receivers = Vec::new();
        for (s, r) in pairs {
            if s != r && seen.insert((s, r)) {
                senders.push(s);
                receivers.push(r);
            }
        }
        prop_assume!(!senders.is_empty());
        let set = DirectedEdgeSet::new(senders, receivers).unwrap();
        let once = flux_filter(&set.symmetric_closure());
        let twice = flux_filter(&once.symmetric_closure());
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn edge_sampling_is_monotone_in_ratio(seed in any::<u64>(), lo in 0.05f64..0.5, hi in 0.5f64..1.0) {
        let senders: Vec<u32> = (0..300).collect();
        let receivers: Vec<u32> = (300..600).collect();
        let set = DirectedEdgeSet::new(senders, receivers).unwrap();
        let big = sample_edges(&set, hi, seed).unwrap();
        let small = sample_edges(&set, lo, seed).unwrap();
        let big_pairs: std::collections::BTreeSet<_> = big.kept_edges.pairs().collect();
        for p in small.kept_edges.pairs() {
            prop_assert!(big_pairs.contains(&p));
        }
        // Purity: the same call reproduces itself.
        let again = sample_edges(&set, lo, seed).unwrap();
        prop_assert_eq!(small.kept_edges, again.kept_edges);
    }

    #[test]
    fn point_edge_sampling_keeps_endpoints(seed in any::<u64>(), budget in 10usize..60) {
        let n = 64;
        let coords: Vec<f64> = (0..n).flat_map(|i| [(i % 8) as f64, (i / 8) as f64]).collect();
        let mut cells = Vec::new();
        for i in 0..7u32 {
            for j in 0..7u32 {
                let a = i * 8 + j;
                cells.extend_from_slice(&[a, a + 1, a + 9, a, a + 9, a + 8]);
            }
        }
        let mesh = Mesh::new(coords, 2, cells, 3, vec![NodeType::Interior; n]).unwrap();
        let und = gto_core::mesh::edges_from_cells(&mesh).unwrap();
        let edges = orient_edges(&und, &mesh, None).unwrap();
        let s = point_edge_consistent_sample(&mesh, &edges, budget, seed).unwrap();
        prop_assert_eq!(s.kept_nodes.len(), budget);
        s.check_consistent().unwrap();
    }

    #[test]
    fn partition_merge_identity(k in 1usize..5, halo in 0usize..3, seed in any::<u64>()) {
        let mesh = gto_core::synth::gen_mesh(49, 2, seed % 1000).unwrap();
        let und = gto_core::mesh::edges_from_cells(&mesh).unwrap();
        let edges = orient_edges(&und, &mesh, None).unwrap();
        let p = partition_mesh(&mesh, &edges, k, halo).unwrap();
        prop_assert!(p.coverage_complete());
        let field = Tensor::from_fn(49, 2, |i, j| ((i * 2 + j) as f64 * 0.11).sin());
        let outs: Vec<Tensor<f64>> = p
            .parts
            .iter()
            .map(|part| {
                Tensor::from_fn(part.nodes.len(), 2, |li, j| field.at(part.nodes[li] as usize, j))
            })
            .collect();
        let merged = merge_predictions(&p, &outs, 49).unwrap();
        prop_assert_eq!(merged, field);
    }

    #[test]
    fn spe_bands_are_periodic(x in 0.0f64..1.0, bands in 1usize..5) {
        use gto_core::encoder::spe;
        let period = (1u64 << (bands + 1)) as f64;
        let a = spe(&Tensor::from_vec(1, 1, vec![x]).unwrap(), bands).unwrap();
        let b = spe(&Tensor::from_vec(1, 1, vec![x + period]).unwrap(), bands).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-6);
    }
}
