use std::collections::HashSet;

use jointdiff::blob::{self, Tensor};
use jointdiff::retrieval::{self, GalleryIndex, QueryResult};
use jointdiff::sampler::{self, GridKind};
use jointdiff::schedule::ScheduleSpec;
use ndarray::Array2;
use proptest::prelude::*;

fn gallery_strategy(max_rows: usize, dim: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dim), 1..max_rows),
        prop::collection::vec(-1.0f64..1.0, dim),
    )
        .prop_filter("nonzero vectors", |(rows, q)| {
            rows.iter().chain(std::iter::once(q)).all(|r| r.iter().any(|v| v.abs() > 1e-3))
        })
}

fn index(rows: &[Vec<f64>]) -> GalleryIndex {
    let dim = rows[0].len();
    let mut embs = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (j, v) in r.iter().enumerate() {
            embs[[i, j]] = v / n;
        }
    }
    // Scrambled ids exercise the id tie-break.
    let ids = (0..rows.len() as u64).map(|i| (i * 7919) % 10_007).collect();
    GalleryIndex::new(ids, embs).unwrap()
}

/// Independent ranking: per-row cosine, then a stable sort on (score, id).
fn brute_force(rows: &[Vec<f64>], ids: &[u64], q: &[f64]) -> Vec<u64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, u64)> = rows
        .iter()
        .zip(ids)
        .map(|(r, &id)| {
            let unit: Vec<f64> = r.iter().map(|v| v / norm(r)).collect();
            let dot: f64 = unit.iter().zip(q).map(|(a, b)| a * b).sum();
            (dot / (norm(&unit) * norm(q)), id)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().map(|s| s.1).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn rank_matches_brute_force((rows, q) in gallery_strategy(40, 6)) {
        let g = index(&rows);
        let got = retrieval::rank(0, &q, &g, None).unwrap();
        prop_assert_eq!(&got.ids, &brute_force(&rows, g.ids(), &q));
        prop_assert!(got.scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rank_is_invariant_to_query_scale((rows, q) in gallery_strategy(30, 5), scale in 1e-3f64..1e3) {
        let g = index(&rows);
        let a = retrieval::rank(0, &q, &g, None).unwrap();
        let scaled: Vec<f64> = q.iter().map(|v| v * scale).collect();
        let b = retrieval::rank(0, &scaled, &g, None).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        // Equal scores up to roundoff may swap; the multiset of top ids is stable.
        let top = |r: &QueryResult| r.ids.iter().zip(&r.scores).filter(|(_, s)| **s > a.scores[0] - 1e-9).map(|(i, _)| *i).collect::<HashSet<_>>();
        prop_assert_eq!(top(&a), top(&b));
    }

    #[test]
    fn truncated_rank_is_a_prefix((rows, q) in gallery_strategy(30, 4), k in 0usize..40) {
        let g = index(&rows);
        let full = retrieval::rank(0, &q, &g, None).unwrap();
        let top = retrieval::rank(0, &q, &g, Some(k)).unwrap();
        prop_assert_eq!(&top.ids[..], &full.ids[..k.min(full.ids.len())]);
    }

    #[test]
    fn metrics_are_bounded_and_monotone(
        n in 5usize..30,
        perms in prop::collection::vec(prop::collection::vec(any::<u64>(), 30), 1..8),
        picks in prop::collection::vec((0usize..30, 0usize..30), 8),
    ) {
        let ids: Vec<u64> = (0..n as u64).collect();
        let g = GalleryIndex::new(ids.clone(), Array2::eye(n)).unwrap();
        let results: Vec<QueryResult> = perms
            .iter()
            .enumerate()
            .map(|(q, keys)| {
                let mut ranked = ids.clone();
                ranked.sort_by_key(|&i| keys[i as usize]);
                QueryResult { query: q, scores: vec![0.0; n], ids: ranked }
            })
            .collect();
        let truth: Vec<u64> = (0..results.len()).map(|i| (picks[i].0 % n) as u64).collect();
        let multi: Vec<Vec<u64>> = (0..results.len())
            .map(|i| {
                let mut t = vec![truth[i], (picks[i].1 % n) as u64];
                t.dedup();
                t
            })
            .collect();
        let subsets: Vec<Vec<u64>> = truth.iter().map(|&t| vec![t, (t + 1) % n as u64, (t + 2) % n as u64]).collect();
        let mut prev = 0.0;
        for k in 1..=n {
            let r = retrieval::recall_at_k(&results, &truth, k, &g).unwrap();
            prop_assert!((0.0..=1.0).contains(&r) && r >= prev);
            prev = r;
            let rs = retrieval::recall_subset_at_k(&results, &subsets, &truth, k, &g).unwrap();
            prop_assert!(rs >= r - 1e-15 && rs <= 1.0);
            let m = retrieval::map_at_k(&results, &multi, k, &g).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
        }
        prop_assert_eq!(prev, 1.0);
        prop_assert_eq!(retrieval::recall_subset_at_k(&results, &subsets, &truth, 3, &g).unwrap(), 1.0);
    }

    #[test]
    fn blob_round_trip_is_f32_rounding(data in prop::collection::vec(-1e6f64..1e6, 1..64), seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        let t = Tensor::new("x", vec![data.len()], data.clone());
        blob::write_bundle(&p, "test", seed, "h".into(), serde_json::json!({}), &[t]).unwrap();
        let b = blob::read_bundle(&p).unwrap();
        let mut expect = data;
        blob::round_f32(&mut expect);
        prop_assert_eq!(&b.tensor("x").unwrap().data, &expect);
        prop_assert_eq!(b.manifest.seed, seed);
    }

    #[test]
    fn cfg_combine_identities(c in prop::collection::vec(-10.0f64..10.0, 1..16), u_shift in -5.0f64..5.0, gamma in 0.0f64..8.0) {
        let u: Vec<f64> = c.iter().map(|v| v + u_shift).collect();
        prop_assert_eq!(sampler::cfg_combine(&c, &u, 0.0), c.clone());
        prop_assert_eq!(sampler::cfg_combine(&c, &c, gamma), c.clone());
        let out = sampler::cfg_combine(&c, &u, gamma);
        for ((o, c), u) in out.iter().zip(&c).zip(&u) {
            prop_assert!((o - ((1.0 + gamma) * c - gamma * u)).abs() < 1e-9);
        }
    }

    #[test]
    fn noising_is_inverted_by_x0_prediction(z0 in prop::collection::vec(-3.0f64..3.0, 8), eps in prop::collection::vec(-3.0f64..3.0, 8), n in 1usize..=100) {
        let s = ScheduleSpec::default().build().unwrap();
        let zn = s.forward_noise(&z0, n, &eps).unwrap();
        let back = s.predict_x0(&zn, n, &eps);
        let tol = 1e-9 / s.alpha_bar(n).sqrt();
        for (a, b) in back.iter().zip(&z0) {
            prop_assert!((a - b).abs() < tol);
        }
    }

    #[test]
    fn ensemble_is_order_free(samples in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 1..6), rot in 0usize..6) {
        let mut shuffled = samples.clone();
        let len = shuffled.len();
        shuffled.rotate_left(rot % len);
        shuffled.reverse();
        prop_assert_eq!(sampler::ensemble(&samples), sampler::ensemble(&shuffled));
    }
}

#[test]
fn solver_grids_are_valid_for_every_step_count() {
    let s = ScheduleSpec::default().build().unwrap();
    for kind in [GridKind::UniformN, GridKind::UniformLambda] {
        for steps in 1..=100 {
            let g = sampler::solver_grid(&s, steps, kind).unwrap();
            assert_eq!(g[0], 100);
            assert!(g.windows(2).all(|w| w[0] > w[1]));
            assert!(g.len() <= steps);
            if steps >= 2 {
                assert_eq!(*g.last().unwrap(), 1);
            }
        }
    }
}
