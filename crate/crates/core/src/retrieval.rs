//! Gallery indexing, exact cosine ranking and the benchmark metrics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, input, Result};

/// Row-major gallery of unit-norm embeddings with stable ids.
#[derive(Clone, Debug)]
pub struct GalleryIndex {
    ids: Vec<u64>,
    embs: Array2<f64>,
    norms: Vec<f64>,
    lookup: HashMap<u64, usize>,
}

impl GalleryIndex {
    pub fn new(ids: Vec<u64>, embs: Array2<f64>) -> Result<Self> {
        if ids.len() != embs.nrows() {
            return config(format!(
                "gallery has {} ids but {} rows",
                ids.len(),
                embs.nrows()
            ));
        }
        let mut lookup = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if lookup.insert(id, i).is_some() {
                return input(format!("duplicate gallery id {id}"));
            }
        }
        let norms: Vec<f64> = embs.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        if let Some((i, n)) = norms.iter().enumerate().find(|(_, n)| (*n - 1.0).abs() > 1e-6) {
            return input(format!("gallery row {i} has norm {n}, expected 1"));
        }
        Ok(GalleryIndex {
            ids,
            embs,
            norms,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embs.ncols()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embs
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.lookup.get(&id).copied()
    }

    pub fn row(&self, id: u64) -> Option<Vec<f64>> {
        self.position(id).map(|i| self.embs.row(i).to_vec())
    }
}

/// Ranked gallery ids for one query, best first; ties broken by ascending id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: usize,
    pub ids: Vec<u64>,
    pub scores: Vec<f64>,
}

/// Exact cosine ranking. `k = None` returns the full ordering.
pub fn rank(query: usize, emb: &[f64], gallery: &GalleryIndex, k: Option<usize>) -> Result<QueryResult> {
    if emb.len() != gallery.dim() {
        return input(format!(
            "query has length {}, gallery rows have {}",
            emb.len(),
            gallery.dim()
        ));
    }
    let qn = emb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if qn == 0.0 || !qn.is_finite() {
        return input("query embedding has zero or non-finite norm");
    }
    let mut scored: Vec<(f64, u64)> = gallery
        .embs
        .rows()
        .into_iter()
        .zip(&gallery.norms)
        .zip(&gallery.ids)
        .map(|((row, n), &id)| {
            let d: f64 = row.iter().zip(emb).map(|(a, b)| a * b).sum();
            (d / (qn * n), id)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    if let Some(k) = k {
        scored.truncate(k);
    }
    Ok(QueryResult {
        query,
        ids: scored.iter().map(|s| s.1).collect(),
        scores: scored.iter().map(|s| s.0).collect(),
    })
}

/// Ranks every row of `queries` against the gallery, in parallel over queries.
pub fn rank_all(queries: &[Vec<f64>], gallery: &GalleryIndex, k: Option<usize>) -> Result<Vec<QueryResult>> {
    queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| rank(i, q, gallery, k))
        .collect()
}

fn check_truth(gallery: &GalleryIndex, id: u64) -> Result<()> {
    if gallery.position(id).is_none() {
        return input(format!("ground-truth id {id} is not in the gallery"));
    }
    Ok(())
}

fn check_lengths(results: usize, truth: usize) -> Result<()> {
    if results != truth || results == 0 {
        return input(format!(
            "{results} results for {truth} ground-truth entries"
        ));
    }
    Ok(())
}

/// Fraction of queries whose target is among the first `k` ranked ids.
pub fn recall_at_k(results: &[QueryResult], truth: &[u64], k: usize, gallery: &GalleryIndex) -> Result<f64> {
    check_lengths(results.len(), truth.len())?;
    let mut hits = 0usize;
    for (r, &t) in results.iter().zip(truth) {
        check_truth(gallery, t)?;
        if r.ids.iter().take(k).any(|&id| id == t) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Recall after restricting each ranking to the query's candidate subset.
pub fn recall_subset_at_k(
    results: &[QueryResult],
    subsets: &[Vec<u64>],
    truth: &[u64],
    k: usize,
    gallery: &GalleryIndex,
) -> Result<f64> {
    check_lengths(results.len(), truth.len())?;
    check_lengths(subsets.len(), truth.len())?;
    let mut hits = 0usize;
    for ((r, subset), &t) in results.iter().zip(subsets).zip(truth) {
        check_truth(gallery, t)?;
        if !subset.contains(&t) {
            return input(format!("subset for query {} does not contain its target", r.query));
        }
        let members: HashSet<u64> = subset.iter().copied().collect();
        if r.ids
            .iter()
            .filter(|id| members.contains(id))
            .take(k)
            .any(|&id| id == t)
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Average precision at `k` with normalizer `min(k, #targets)`.
pub fn average_precision_at_k(ranked: &[u64], targets: &HashSet<u64>, k: usize) -> f64 {
    if targets.is_empty() || k == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranked.iter().take(k).enumerate() {
        if targets.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / k.min(targets.len()) as f64
}

pub fn map_at_k(results: &[QueryResult], targets: &[Vec<u64>], k: usize, gallery: &GalleryIndex) -> Result<f64> {
    check_lengths(results.len(), targets.len())?;
    let mut total = 0.0;
    for (r, t) in results.iter().zip(targets) {
        for &id in t {
            check_truth(gallery, id)?;
        }
        let set: HashSet<u64> = t.iter().copied().collect();
        total += average_precision_at_k(&r.ids, &set, k);
    }
    Ok(total / results.len() as f64)
}

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 50];
pub const SUBSET_KS: [usize; 3] = [1, 2, 3];
pub const MAP_KS: [usize; 4] = [5, 10, 25, 50];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerQuery {
    pub query: usize,
    pub target: u64,
    /// 1-based rank of the target in the full ordering.
    pub target_rank: usize,
    pub ap_at_50: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall: BTreeMap<usize, f64>,
    pub recall_subset: BTreeMap<usize, f64>,
    pub map: BTreeMap<usize, f64>,
    pub per_query: Vec<PerQuery>,
}

/// Ground truth for a metric run.
pub struct Truth<'a> {
    pub targets: &'a [u64],
    pub subsets: &'a [Vec<u64>],
    pub multi_targets: &'a [Vec<u64>],
}

pub fn evaluate(results: &[QueryResult], truth: &Truth<'_>, gallery: &GalleryIndex) -> Result<MetricReport> {
    let mut recall = BTreeMap::new();
    for k in RECALL_KS {
        recall.insert(k, recall_at_k(results, truth.targets, k, gallery)?);
    }
    let mut recall_subset = BTreeMap::new();
    for k in SUBSET_KS {
        recall_subset.insert(
            k,
            recall_subset_at_k(results, truth.subsets, truth.targets, k, gallery)?,
        );
    }
    let mut map = BTreeMap::new();
    for k in MAP_KS {
        map.insert(k, map_at_k(results, truth.multi_targets, k, gallery)?);
    }
    let per_query = results
        .iter()
        .zip(truth.targets)
        .zip(truth.multi_targets)
        .map(|((r, &t), multi)| {
            let set: HashSet<u64> = multi.iter().copied().collect();
            PerQuery {
                query: r.query,
                target: t,
                target_rank: r.ids.iter().position(|&id| id == t).map_or(0, |p| p + 1),
                ap_at_50: average_precision_at_k(&r.ids, &set, 50),
            }
        })
        .collect();
    Ok(MetricReport {
        recall,
        recall_subset,
        map,
        per_query,
    })
}

/// Plain-text table with one row per named report, percentages with two decimals.
pub fn format_table(rows: &[(String, &MetricReport)]) -> String {
    let mut out = String::new();
    let name_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(7);
    let _ = write!(out, "{:<name_w$} |", "Variant");
    for k in MAP_KS {
        let _ = write!(out, " mAP@{k:<3}");
    }
    out.push_str(" |");
    for k in RECALL_KS {
        let _ = write!(out, "  R@{k:<3} ");
    }
    out.push_str(" |");
    for k in SUBSET_KS {
        let _ = write!(out, " Rs@{k:<2} ");
    }
    out.push('\n');
    for (name, rep) in rows {
        let _ = write!(out, "{name:<name_w$} |");
        for k in MAP_KS {
            let _ = write!(out, " {:>7.2}", 100.0 * rep.map[&k]);
        }
        out.push_str(" |");
        for k in RECALL_KS {
            let _ = write!(out, " {:>7.2}", 100.0 * rep.recall[&k]);
        }
        out.push_str(" |");
        for k in SUBSET_KS {
            let _ = write!(out, " {:>6.2}", 100.0 * rep.recall_subset[&k]);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gallery(rows: &[[f64; 2]], ids: &[u64]) -> GalleryIndex {
        let mut embs = Array2::zeros((rows.len(), 2));
        for (i, r) in rows.iter().enumerate() {
            let n = (r[0] * r[0] + r[1] * r[1]).sqrt();
            embs[[i, 0]] = r[0] / n;
            embs[[i, 1]] = r[1] / n;
        }
        GalleryIndex::new(ids.to_vec(), embs).unwrap()
    }

    #[test]
    fn exact_match_ranks_first() {
        let g = gallery(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], &[7, 3, 5]);
        let r = rank(0, &[0.0, 2.0], &g, None).unwrap();
        assert_eq!(r.ids[0], 3);
        assert!((r.scores[0] - 1.0).abs() < 1e-6);
        assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn orthogonal_query_ties_by_id() {
        let mut embs = Array2::zeros((3, 3));
        embs[[0, 0]] = 1.0;
        embs[[1, 0]] = 1.0;
        embs[[2, 1]] = 1.0;
        let g = GalleryIndex::new(vec![9, 2, 4], embs).unwrap();
        let r = rank(0, &[0.0, 0.0, 1.5], &g, None).unwrap();
        assert_eq!(r.ids, vec![2, 4, 9]);
        assert!(r.scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn zero_query_is_rejected() {
        let g = gallery(&[[1.0, 0.0]], &[1]);
        assert!(matches!(rank(0, &[0.0, 0.0], &g, None), Err(crate::Error::Input(_))));
    }

    #[test]
    fn gallery_validation() {
        let embs = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(GalleryIndex::new(vec![1, 1], embs.clone()).is_err());
        assert!(GalleryIndex::new(vec![1], embs).is_err());
        let unnormalized = Array2::from_shape_vec((1, 2), vec![2.0, 0.0]).unwrap();
        assert!(GalleryIndex::new(vec![1], unnormalized).is_err());
    }

    #[test]
    fn single_query_rank_one() {
        let g = gallery(&[[1.0, 0.0], [0.0, 1.0]], &[1, 2]);
        let r = vec![rank(0, &[1.0, 0.1], &g, None).unwrap()];
        assert_eq!(recall_at_k(&r, &[1], 1, &g).unwrap(), 1.0);
        for k in [1, 2, 5] {
            assert_eq!(map_at_k(&r, &[vec![1]], k, &g).unwrap(), 1.0);
        }
    }

    #[test]
    fn hand_computed_average_precision() {
        // Ranking [a, x, b, y] with targets {a, b}: (1/2)(1/1 + 2/3).
        let targets: HashSet<u64> = [10, 30].into_iter().collect();
        let ap = average_precision_at_k(&[10, 20, 30, 40], &targets, 4);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn subset_recall_constructed_case() {
        // Distractor 2 beats target 1 globally, but 3 (outside the subset)
        // is first; within subset {1, 4} the target is first.
        let g = gallery(&[[1.0, 0.0], [1.0, 0.2], [1.0, 0.1], [0.0, 1.0]], &[1, 2, 3, 4]);
        let r = vec![QueryResult {
            query: 0,
            ids: vec![2, 3, 1, 4],
            scores: vec![0.9, 0.8, 0.7, 0.1],
        }];
        assert_eq!(recall_at_k(&r, &[1], 1, &g).unwrap(), 0.0);
        assert_eq!(recall_subset_at_k(&r, &[vec![1, 4]], &[1], 1, &g).unwrap(), 1.0);
    }

    #[test]
    fn missing_truth_is_input_error() {
        let g = gallery(&[[1.0, 0.0]], &[1]);
        let r = vec![rank(0, &[1.0, 0.0], &g, None).unwrap()];
        assert!(matches!(recall_at_k(&r, &[99], 1, &g), Err(crate::Error::Input(_))));
        assert!(matches!(map_at_k(&r, &[vec![99]], 1, &g), Err(crate::Error::Input(_))));
    }
}
