mod common;

use common::randn;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use ssformers::backbone::{patch_regions, GridSpec};
use ssformers::model::{classify_queries, ForwardOptions, ModelConfig, TaskFeatures, Variant};
use ssformers::pmm::{classify_query, Scorer};
use ssformers::sstl::{attend_and_align, mutual_mask, MaskMode, MutualMask, ProjectionHeads};
use ssformers::{Tape, Tensor};

fn cases() -> ProptestConfig {
    ProptestConfig::with_cases(200)
}

fn scores_for(model: &ModelConfig, heads: &ProjectionHeads, support: &[Tensor], query: &Tensor) -> (Vec<f64>, usize) {
    let mut tape = Tape::new();
    let hv = heads.register(&mut tape, false);
    let s: Vec<&Tensor> = support.iter().collect();
    let task = TaskFeatures::from_tensors(&mut tape, &s, &[query]).unwrap();
    let out = classify_queries(&mut tape, &hv, &task, model, ForwardOptions::default()).unwrap();
    let r = &out[0].classification.result;
    (r.scores.clone(), r.predicted_class)
}

proptest! {
    #![proptest_config(cases())]

    #[test]
    fn attention_rows_sum_to_one(k in 1usize..8, mk in 1usize..10, seed in 0u64..100_000, keep_bits in any::<u16>()) {
        let rel = randn(&[k, mk], seed);
        let keep: Vec<bool> = (0..k).map(|i| keep_bits >> i & 1 == 1).collect();
        let mask = MutualMask { keep, query_to_support: vec![0; k], support_to_query: vec![0; k] };
        let mut tape = Tape::new();
        let r = tape.constant(rel);
        let v = tape.constant(randn(&[mk, 2], seed + 1));
        let p = attend_and_align(&mut tape, &[r], &mask, &[v], MaskMode::PreSoftmax, None).unwrap();
        let a = tape.value(p[0].attention);
        for i in 0..k {
            let s: f64 = a.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_ignores_positive_scaling(k in 1usize..8, cols in 1usize..40, seed in 0u64..100_000, s in 1e-3f64..1e3) {
        let rel = randn(&[k, cols], seed);
        let scaled = rel.scale(s);
        prop_assert_eq!(mutual_mask(&rel).unwrap().keep, mutual_mask(&scaled).unwrap().keep);
    }

    #[test]
    fn mask_keeps_distinct_partners(k in 1usize..8, cols in 1usize..40, seed in 0u64..100_000) {
        let m = mutual_mask(&randn(&[k, cols], seed)).unwrap();
        let mut partners: Vec<usize> = (0..k).filter(|&i| m.keep[i]).map(|i| m.query_to_support[i]).collect();
        let n = partners.len();
        partners.sort_unstable();
        partners.dedup();
        prop_assert_eq!(partners.len(), n);
        prop_assert!(n >= 1 && n <= k.min(cols));
    }

    #[test]
    fn class_score_bounded_by_patch_count(k in 1usize..10, c in 1usize..8, seed in 0u64..100_000) {
        let q = randn(&[k, c], seed);
        let p = randn(&[k, c], seed + 1);
        let mut tape = Tape::new();
        let (qv, pv) = (tape.constant(q.clone()), tape.constant(p));
        let own = tape.constant(q);
        let out = classify_query(&mut tape, qv, &[pv, own], Scorer::PatchMatching, 1.0).unwrap();
        prop_assert!(out.result.scores[0] <= k as f64 + 1e-12);
        prop_assert!((out.result.scores[1] - k as f64).abs() < 1e-12);
    }

    #[test]
    fn prototype_ignores_support_patch_order(k in 1usize..6, m in 1usize..3, kp in 1usize..6, seed in 0u64..100_000) {
        let rows = m * kp;
        let heads = ProjectionHeads::init(4, 4, &mut common::rng(seed));
        let query = randn(&[k, 4], seed + 1);
        let support = randn(&[rows, 4], seed + 2);
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut common::rng(seed + 3));
        let shuffled = Tensor::vstack(&order.iter().map(|&i| support.slice_rows(i, 1)).collect::<Vec<_>>().iter().collect::<Vec<_>>()).unwrap();
        let prototype = |s: &Tensor| {
            let mut tape = Tape::new();
            let hv = heads.register(&mut tape, false);
            let q = tape.constant(query.clone());
            let sv = tape.constant(s.clone());
            let proj = ssformers::sstl::project(&mut tape, q, &[sv], &hv).unwrap();
            let rel = ssformers::sstl::relation_matrices(&mut tape, proj.query_query, &proj.support_keys).unwrap();
            let mask = mutual_mask(&rel.concatenated).unwrap();
            let p = attend_and_align(&mut tape, &rel.per_class, &mask, &proj.support_values, MaskMode::PreSoftmax, None).unwrap();
            tape.value(p[0].prototype).clone()
        };
        let (a, b) = (prototype(&support), prototype(&shuffled));
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn class_permutation_permutes_scores(n in 2usize..5, seed in 0u64..100_000, variant in prop::sample::select(vec![Variant::Full, Variant::NoSstl, Variant::NoPmm])) {
        let config = ModelConfig { variant, grid: GridSpec::parse("2x2", 1.0).unwrap(), ..ModelConfig::default() };
        let heads = ProjectionHeads::init(6, 6, &mut common::rng(seed));
        let support: Vec<Tensor> = (0..n).map(|i| randn(&[4, 6], seed * 7 + i as u64)).collect();
        let query = randn(&[4, 6], seed * 7 + 99);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut common::rng(seed + 11));
        let permuted: Vec<Tensor> = perm.iter().map(|&p| support[p].clone()).collect();
        let (s, pred) = scores_for(&config, &heads, &support, &query);
        let (sp, predp) = scores_for(&config, &heads, &permuted, &query);
        for (new, &old) in perm.iter().enumerate() {
            prop_assert_eq!(sp[new].to_bits(), s[old].to_bits());
        }
        prop_assert_eq!(perm[predp], pred);
    }

    #[test]
    fn unit_expansion_tiles_the_image(side in 4usize..40, g in 1usize..5) {
        prop_assume!(g <= side);
        let regions = patch_regions(side, &GridSpec::new(vec![g], 1.0).unwrap()).unwrap();
        let mut cover = vec![0u8; side * side];
        for r in &regions {
            for y in r.y0..r.y1 {
                for x in r.x0..r.x1 {
                    cover[y * side + x] += 1;
                }
            }
        }
        prop_assert!(cover.iter().all(|&c| c == 1));
    }
}
