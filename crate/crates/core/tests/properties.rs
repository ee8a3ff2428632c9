use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kcrec_core::config::RunConfig;
use kcrec_core::eval::{hit_ratio, ndcg, rank_of, reciprocal_rank, CaseRank, RankingReport};
use kcrec_core::fusion::{dual_head_fuse, predict_score, view_head, FusionParams};
use kcrec_core::implicit::{explain_metapaths, soft_select, ImplicitParams};
use kcrec_core::proto::{infonce_per_anchor, kmeans_prototypes};
use kcrec_core::tensor::{DenseMatrix, ParamStore, SparseMatrix, Tape};

fn matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> DenseMatrix {
    DenseMatrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

fn unit_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
    let mut m = matrix(rng, r, c, -1.0, 1.0);
    for i in 0..r {
        let n = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        m.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn soft_select_stays_between_inputs(seed in any::<u64>(), n in 2usize..7, m in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mats: Vec<SparseMatrix> = (0..m)
            .map(|_| {
                let d = DenseMatrix::from_fn(n, n, |_, _| if rng.random_bool(0.4) { rng.random_range(0.0..3.0) } else { 0.0 });
                SparseMatrix::from_dense(&d)
            })
            .collect();
        let logits: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let out = soft_select(&mats, &logits).unwrap();
        for r in 0..n {
            for c in 0..n {
                let vals: Vec<f64> = mats.iter().map(|a| a.get(r, c)).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = out.get(r, c);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn metapath_weights_sum_to_one(seed in any::<u64>(), relations in 2usize..5, hops in 1usize..4, channels in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = ImplicitParams::init(&mut store, &mut rng, relations, hops, channels, 3, 3, 1).unwrap();
        for id in params.ids() {
            if store.name(id).starts_with("ir.select") {
                let v = matrix(&mut rng, 1, relations, -2.0, 2.0);
                *store.get_mut(id) = v;
            }
        }
        let all = relations.pow(hops as u32);
        let report = explain_metapaths(&store, &params, all).unwrap();
        for paths in &report.channels {
            prop_assert_eq!(paths.len(), all);
            let total: f64 = paths.iter().map(|p| p.weight).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9, "sum {}", total);
            prop_assert!(paths.windows(2).all(|w| w[0].weight >= w[1].weight));
        }
    }

    #[test]
    fn kmeans_monotone_and_centered(seed in any::<u64>(), points in 3usize..40, k in 1usize..6) {
        prop_assume!(k <= points);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = matrix(&mut rng, points, 3, -1.0, 1.0);
        let set = kmeans_prototypes(&x, k, seed).unwrap();
        prop_assert!(set.history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        for c in 0..k {
            let members: Vec<usize> = (0..points).filter(|&i| set.assignment[i] == c).collect();
            prop_assert!(!members.is_empty());
            for d in 0..3 {
                let mean = members.iter().map(|&i| x.get(i, d)).sum::<f64>() / members.len() as f64;
                prop_assert!((set.prototypes.get(c, d) - mean).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn infonce_bounds_on_unit_batches(seed in any::<u64>(), b in 2usize..20, tau in 0.2f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let a = tape.constant(unit_rows(&mut rng, b, 5));
        let p = tape.constant(unit_rows(&mut rng, b, 5));
        let n = tape.constant(unit_rows(&mut rng, b, 5));
        let per = infonce_per_anchor(&mut tape, a, p, n, tau).unwrap();
        let lb = (b as f64).ln();
        for &v in tape.value(per).values() {
            prop_assert!(v >= lb - 2.0 / tau - 1e-12 && v <= lb + 2.0 / tau + 1e-12);
        }
    }

    #[test]
    fn attention_fusion_is_a_convex_mix(seed in any::<u64>(), rows in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = FusionParams::init(&mut store, &mut rng, 3, 4);
        let mut tape = Tape::new();
        let e = tape.constant(matrix(&mut rng, rows, 6, -2.0, 2.0));
        let i = tape.constant(matrix(&mut rng, rows, 6, -2.0, 2.0));
        let (h, w) = dual_head_fuse(&mut tape, &store, e, i, &params).unwrap();
        let (he, _) = view_head(&mut tape, &store, e, &params.explicit, &params).unwrap();
        let (hi, _) = view_head(&mut tape, &store, i, &params.implicit, &params).unwrap();
        for r in 0..rows {
            let (we, wi) = (tape.value(w).get(r, 0), tape.value(w).get(r, 1));
            prop_assert!(we >= 0.0 && wi >= 0.0);
            prop_assert!((we + wi - 1.0).abs() <= 1e-12);
            for c in 0..4 {
                let want = we * tape.value(he).get(r, c) + wi * tape.value(hi).get(r, c);
                prop_assert!((tape.value(h).get(r, c) - want).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn ranking_ignores_positive_user_scaling(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let user: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = user.iter().map(|x| x * scale).collect();
        let items: Vec<Vec<f64>> = (0..12).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let order = |u: &[f64]| {
            let mut idx: Vec<usize> = (0..items.len()).collect();
            let s: Vec<f64> = items.iter().map(|k| predict_score(u, k).unwrap()).collect();
            idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            idx
        };
        prop_assert_eq!(order(&user), order(&scaled));
    }

    #[test]
    fn report_metrics_respect_their_ranges(ranks in proptest::collection::vec(1usize..=100, 1..60)) {
        let report = RankingReport {
            seed: 0,
            config_digest: "x".into(),
            negatives: 99,
            ks: vec![5, 10, 20],
            cases: ranks.iter().enumerate().map(|(i, &r)| CaseRank { user: i, item: 0, rank: r, candidates: 100 }).collect(),
            skipped: 0,
        };
        prop_assert!(report.hr(5) <= report.hr(10) && report.hr(10) <= report.hr(20));
        for k in [5, 10, 20] {
            prop_assert!((0.0..=1.0).contains(&report.ndcg(k)));
            prop_assert!(report.ndcg(k) <= report.hr(k));
        }
        prop_assert!(report.mrr() > 0.0 && report.mrr() <= 1.0);
        prop_assert_eq!(RankingReport::parse(&report.to_text()).unwrap(), report);
    }

    #[test]
    fn rank_matches_sorted_position(scores in proptest::collection::vec(-3i32..3, 1..30), target in 0usize..30) {
        let target = target % scores.len();
        let all: Vec<(usize, f64)> = scores.iter().enumerate().map(|(i, &s)| (i, s as f64)).collect();
        let others: Vec<(usize, f64)> = all.iter().copied().filter(|&(i, _)| i != target).collect();
        let mut sorted = all.clone();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let pos = sorted.iter().position(|&(i, _)| i == target).unwrap() + 1;
        prop_assert_eq!(rank_of(all[target], &others), pos);
    }

    #[test]
    fn config_echo_round_trips(tau in 0.05f64..2.0, beta in 0.0f64..1.0, lr in 1e-4f64..0.1, seed in any::<u64>(), batch in 1usize..5000) {
        let mut cfg = RunConfig::default();
        cfg.set("tau", &tau.to_string()).unwrap();
        cfg.set("beta", &format!("{beta:?}")).unwrap();
        cfg.set("lr", &format!("{lr:?}")).unwrap();
        cfg.set("seed", &seed.to_string()).unwrap();
        cfg.set("batch", &batch.to_string()).unwrap();
        let back = RunConfig::parse(&cfg.echo()).unwrap();
        prop_assert_eq!(back.echo(), cfg.echo());
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn metric_closed_forms_for_every_rank() {
    for rank in 1..=100usize {
        for k in [5, 10, 20] {
            let hit = if rank <= k { 1.0 } else { 0.0 };
            assert_eq!(hit_ratio(rank, k), hit);
            let want = if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 };
            assert!((ndcg(rank, k) - want).abs() <= 1e-15);
        }
        assert_eq!(reciprocal_rank(rank), 1.0 / rank as f64);
    }
}
