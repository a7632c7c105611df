//! Graph builders against exhaustive oracles.

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::Rng;
use tractgraph_core::graphbuild::{build_gmg, build_wmg, top_regions};
use tractgraph_core::interpret::top_clusters;
use tractgraph_core::rng::{stream, Rng as ChaCha, Stream};
use tractgraph_core::{ClusterGraph, DistanceMatrix, RegionTable};

/// Symmetric, zero diagonal, values on a coarse grid so ties are common.
fn random_distances(rng: &mut ChaCha, c: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in i + 1..c {
            let v = rng.random_range(1..40) as f64 * 0.25;
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    m
}

fn knn_oracle(m: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    (0..m.len())
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..m.len()).filter(|&j| j != i).map(|j| (m[i][j], j)).collect();
            cand.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut ids: Vec<usize> = cand[..k].iter().map(|&(_, j)| j).collect();
            ids.sort_unstable();
            ids
        })
        .collect()
}

fn adjacency(g: &ClusterGraph) -> Vec<Vec<usize>> {
    (0..g.node_count()).map(|i| g.neighbors(i).to_vec()).collect()
}

#[test]
fn wmg_matches_sort_oracle() {
    let mut rng = stream(2024, Stream::Diagnostics);
    for trial in 0..100 {
        let m = random_distances(&mut rng, 30);
        let dist = DistanceMatrix::from_rows(m.clone()).unwrap();
        for k in [1, 5, 20] {
            let g = build_wmg(&dist, k).unwrap();
            assert!(g.directed());
            assert_eq!(adjacency(&g), knn_oracle(&m, k), "trial {trial}, k {k}");
            assert!((0..30).all(|i| g.neighbors(i).len() == k));
        }
    }
}

/// Two passes of "largest positive entry not yet taken", scanning ids upward
/// so the first maximum wins.
fn top2_oracle(row: &[f64]) -> BTreeSet<usize> {
    let mut taken = BTreeSet::new();
    for _ in 0..2 {
        let mut best: Option<usize> = None;
        for (r, &v) in row.iter().enumerate() {
            if v > 0.0 && !taken.contains(&r) && best.is_none_or(|b| v > row[b]) {
                best = Some(r);
            }
        }
        if let Some(b) = best {
            taken.insert(b);
        }
    }
    taken
}

fn random_table(rng: &mut ChaCha, c: usize, r: usize) -> Vec<Vec<f64>> {
    (0..c)
        .map(|_| {
            let mut row: Vec<f64> =
                (0..r).map(|_| if rng.random_bool(0.4) { 0.0 } else { rng.random_range(1..6) as f64 * 0.1 }).collect();
            if row.iter().all(|&v| v == 0.0) {
                row[rng.random_range(0..r)] = 0.3;
            }
            row
        })
        .collect()
}

#[test]
fn gmg_matches_pairwise_intersection_oracle() {
    let mut rng = stream(7, Stream::Diagnostics);
    for trial in 0..100 {
        let rows = random_table(&mut rng, 50, 10);
        let names = (0..10).map(|r| format!("r{r}")).collect();
        let table = RegionTable::new(names, rows.clone()).unwrap();
        let tops: Vec<BTreeSet<usize>> = rows.iter().map(|r| top2_oracle(r)).collect();
        for (i, t) in tops.iter().enumerate() {
            assert_eq!(&top_regions(&table, i, 2).unwrap(), t);
        }
        let want: Vec<Vec<usize>> = (0..50)
            .map(|i| (0..50).filter(|&j| j != i && !tops[i].is_disjoint(&tops[j])).collect())
            .collect();
        let g = build_gmg(&table).unwrap();
        assert!(!g.directed());
        assert!(g.is_symmetric());
        assert_eq!(adjacency(&g), want, "trial {trial}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wmg_unchanged_by_squaring(seed in 0u64..10_000, k in 1usize..12) {
        let mut rng = stream(seed, Stream::Diagnostics);
        let dist = DistanceMatrix::from_rows(random_distances(&mut rng, 12)).unwrap();
        prop_assert_eq!(build_wmg(&dist, k).unwrap(), build_wmg(&dist.map(|x| x * x), k).unwrap());
    }

    #[test]
    fn top_clusters_unchanged_by_exp(att in prop::collection::vec(0.0f64..1.0, 1..60), t in 1usize..70) {
        let exp: Vec<f64> = att.iter().map(|x| x.exp()).collect();
        prop_assert_eq!(top_clusters(&att, t), top_clusters(&exp, t));
    }

    #[test]
    fn gmg_always_symmetric_without_self_loops(seed in 0u64..10_000) {
        let mut rng = stream(seed, Stream::Diagnostics);
        let table = RegionTable::new((0..6).map(|r| r.to_string()).collect(), random_table(&mut rng, 15, 6)).unwrap();
        let g = build_gmg(&table).unwrap();
        prop_assert!(g.is_symmetric());
        for i in 0..15 {
            prop_assert!(!g.neighbors(i).contains(&i));
        }
    }
}
