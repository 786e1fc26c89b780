mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;

use common::adjacent;
use rwass::compression::{compress, dequantize, quantize, CompressedField, Codec, Payload};
use rwass::ensemble::{distance, distance_matrix, Member, Method, Preprocess};
use rwass::field::{decode_rsf, encode_rsf, Dtype, ScalarGrid};
use rwass::region::{ground_distance, stride_for, subsample, GroundParams};
use rwass::topology::{compute_merge_tree, simplify, TreeKind};

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 1..=3)
}

fn grid_strategy() -> impl Strategy<Value = ScalarGrid> {
    dims_strategy().prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        prop::collection::vec(-10.0f64..10.0, n).prop_map(move |v| ScalarGrid::new(dims.clone(), v).unwrap())
    })
}

fn grid_2d(lo: usize, hi: usize) -> impl Strategy<Value = ScalarGrid> {
    (lo..=hi, lo..=hi).prop_flat_map(|(a, b)| {
        prop::collection::vec(0.0f64..1.0, a * b).prop_map(move |v| ScalarGrid::new(vec![a, b], v).unwrap())
    })
}

fn grid_pair_2d(lo: usize, hi: usize) -> impl Strategy<Value = (ScalarGrid, ScalarGrid)> {
    (lo..=hi, lo..=hi).prop_flat_map(|(a, b)| {
        let v = prop::collection::vec(0.0f64..1.0, a * b);
        (v.clone(), v).prop_map(move |(x, y)| {
            (ScalarGrid::new(vec![a, b], x).unwrap(), ScalarGrid::new(vec![a, b], y).unwrap())
        })
    })
}

fn kind_strategy() -> impl Strategy<Value = TreeKind> {
    prop_oneof![Just(TreeKind::Split), Just(TreeKind::Join)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn neighbors_match_the_stencil(g in grid_strategy()) {
        for v in 0..g.len() {
            let got: BTreeSet<usize> = g.neighbors(v).unwrap().into_iter().collect();
            let want: BTreeSet<usize> = (0..g.len()).filter(|&u| adjacent(g.dims(), u, v)).collect();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn rsf_round_trips(g in grid_strategy()) {
        prop_assert_eq!(&decode_rsf(&encode_rsf(&g, Dtype::F64).unwrap()).unwrap(), &g);
        let back = decode_rsf(&encode_rsf(&g, Dtype::F32).unwrap()).unwrap();
        for (a, b) in g.values().iter().zip(back.values()) {
            prop_assert_eq!(*a as f32 as f64, *b);
        }
    }

    #[test]
    fn simplification_keeps_a_partition(g in grid_strategy(), kind in kind_strategy(), ratio in 0.0f64..0.6) {
        let topo = compute_merge_tree(&g, kind);
        let (kept, seg) = simplify(&topo.pairs, &topo.segmentation, ratio).unwrap();
        prop_assert_eq!(seg.pair_of.len(), g.len());
        prop_assert!(kept.iter().enumerate().all(|(i, p)| p.id == i));
        prop_assert!(seg.pair_of.iter().all(|&id| id < kept.len()));
        for p in &kept {
            prop_assert_eq!(seg.pair_of[p.extremum_vertex], p.id);
        }
        // Simplified regions are unions of original regions.
        for r in topo.segmentation.regions(topo.pairs.len()) {
            let ids: BTreeSet<usize> = r.iter().map(|&v| seg.pair_of[v]).collect();
            prop_assert!(ids.len() <= 1);
        }
    }

    #[test]
    fn ground_distance_is_symmetric(
        (a, b) in grid_pair_2d(3, 7),
        lambda in 0.0f64..=1.0,
        q in 1.0f64..4.0,
        ia in any::<prop::sample::Index>(),
        ib in any::<prop::sample::Index>(),
    ) {
        let pre = Preprocess { simplify: 0.0, eps1: 0.0, ..Preprocess::default() };
        let ma = Member::prepare(Arc::new(a), &pre).unwrap();
        let mb = Member::prepare(Arc::new(b), &pre).unwrap();
        let x = subsample(&ma.bdt.nodes[ia.index(ma.bdt.len())], lambda).unwrap();
        let y = subsample(&mb.bdt.nodes[ib.index(mb.bdt.len())], lambda).unwrap();
        let gp = GroundParams { q, lambda, ..GroundParams::default() };
        let d = ground_distance(&x, &y, &gp).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, ground_distance(&y, &x, &gp).unwrap());
        prop_assert_eq!(ground_distance(&x, &x, &gp).unwrap(), 0.0);
    }

    #[test]
    fn nested_strides_nest_members(g in grid_2d(4, 12), s in 1usize..4, k in 2usize..4) {
        let m = g.max_extent();
        let pre = Preprocess { simplify: 0.0, ..Preprocess::default() };
        let member = Member::prepare(Arc::new(g), &pre).unwrap();
        let (l1, l2) = ((s - 1) as f64 / m as f64, (s * k - 1) as f64 / m as f64);
        prop_assume!(l2 <= 1.0);
        prop_assert_eq!(stride_for(l2, m), s * k);
        for node in &member.bdt.nodes {
            let coarse = subsample(node, l2).unwrap();
            let fine = subsample(node, l1).unwrap();
            let fine_set: BTreeSet<usize> = fine.members.iter().copied().collect();
            prop_assert!(coarse.members.iter().all(|l| fine_set.contains(l)));
            prop_assert!(coarse.member_at([0; 3]).is_some());
            prop_assert_eq!(subsample(&fine, l2).unwrap().members, coarse.members);
        }
    }

    #[test]
    fn quantizer_error_is_bounded(g in grid_strategy(), rate in 1.0f64..=31.0) {
        let Payload::Quantized { bits, data } = quantize(&g, rate).unwrap() else { unreachable!() };
        let back = dequantize(g.dims(), bits, &data).unwrap();
        let (lo, hi) = g.range();
        // Block headers are rounded outward to f32, which can only widen a block by an ulp.
        let bound = (hi - lo) / 2f64.powi(bits as i32) + 4.0 * f32::EPSILON as f64 * (lo.abs().max(hi.abs()) + 1.0);
        for (a, b) in g.values().iter().zip(back.values()) {
            prop_assert!((a - b).abs() <= bound, "{} vs {} with bound {}", a, b, bound);
        }
    }

    #[test]
    fn containers_round_trip(g in grid_strategy(), tau in 0.0f64..=1.0, bspline in any::<bool>()) {
        let codec = if bspline && g.dims().iter().all(|&d| d >= 4) { Codec::Bspline } else { Codec::Quantizer };
        let membership: Vec<usize> = (0..g.len()).map(|v| v % 7).collect();
        let c = compress(&g, &membership, codec, tau).unwrap();
        let back = CompressedField::decode(&c.encode()).unwrap();
        prop_assert_eq!(&back, &c);
        let out = back.decompress().unwrap();
        prop_assert_eq!(out.dims(), g.dims());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn matrix_entries_match_single_calls(
        grids in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 36), 1..5),
        lambda in 0.0f64..=1.0,
    ) {
        let pre = Preprocess::default();
        let members: Vec<_> = grids
            .into_iter()
            .map(|v| Member::prepare(Arc::new(ScalarGrid::new(vec![6, 6], v).unwrap()), &pre).unwrap())
            .map(|m| m.view(lambda).unwrap())
            .collect();
        let method = Method::default();
        let mat = distance_matrix(&members, &method).unwrap();
        for i in 0..members.len() {
            prop_assert_eq!(mat.get(i, i), 0.0);
            for j in 0..members.len() {
                prop_assert_eq!(mat.get(i, j), mat.get(j, i));
                if i < j {
                    prop_assert_eq!(mat.get(i, j), distance(&members[i], &members[j], &method).unwrap().0);
                }
            }
        }
    }
}
