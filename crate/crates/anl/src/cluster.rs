//! Density-based clustering over a precomputed distance matrix.
//!
//! The neighborhood radius is chosen as a small quantile of all pairwise
//! distances, so cluster granularity follows the distance distribution
//! rather than an absolute scale.

use crate::error::{AnlError, Result};
use crate::math::Mat64;
use crate::par;
use std::collections::VecDeque;
use std::path::Path;

/// Cluster labels per sample; `None` marks outliers. Cluster ids are
/// canonical: numbered 0.. in order of first appearance by sample index,
/// every id below `n_clusters` non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    labels: Vec<Option<usize>>,
    n_clusters: usize,
}

impl ClusterAssignment {
    pub fn new(labels: Vec<Option<usize>>) -> Result<Self> {
        let mut next = 0usize;
        for l in labels.iter().flatten() {
            if *l > next {
                return Err(AnlError::domain(
                    "ClusterAssignment::new",
                    format!("cluster id {} appears before {}", l, next),
                ));
            }
            if *l == next {
                next += 1;
            }
        }
        Ok(ClusterAssignment {
            labels,
            n_clusters: next,
        })
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sample indices of each cluster, ascending within clusters.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                out[*c].push(i);
            }
        }
        out
    }

    pub fn outliers(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_none())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_outliers(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Write `index,label` rows; outliers spelled literally.
    pub fn export_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| AnlError::Parse {
            path: path.display().to_string(),
            line: 0,
            detail: e.to_string(),
        })?;
        w.write_record(["index", "label"]).map_err(|e| AnlError::Parse {
            path: path.display().to_string(),
            line: 0,
            detail: e.to_string(),
        })?;
        for (i, l) in self.labels.iter().enumerate() {
            let text = match l {
                Some(c) => c.to_string(),
                None => "outlier".to_string(),
            };
            w.write_record([i.to_string(), text])
                .map_err(|e| AnlError::Parse {
                    path: path.display().to_string(),
                    line: 0,
                    detail: e.to_string(),
                })?;
        }
        w.flush().map_err(|e| AnlError::io(path, e))
    }

    pub fn import_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| AnlError::Parse {
            path: path.display().to_string(),
            line: 0,
            detail: e.to_string(),
        })?;
        let mut labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| AnlError::Parse {
                path: path.display().to_string(),
                line: line + 2,
                detail: e.to_string(),
            })?;
            let parse_err = |detail: String| AnlError::Parse {
                path: path.display().to_string(),
                line: line + 2,
                detail,
            };
            if rec.len() != 2 {
                return Err(parse_err(format!("{} fields, expected 2", rec.len())));
            }
            let index: usize = rec[0]
                .parse()
                .map_err(|e| parse_err(format!("index: {}", e)))?;
            if index != labels.len() {
                return Err(parse_err(format!(
                    "index {} out of order, expected {}",
                    index,
                    labels.len()
                )));
            }
            let label = if &rec[1] == "outlier" {
                None
            } else {
                Some(
                    rec[1]
                        .parse::<usize>()
                        .map_err(|e| parse_err(format!("label: {}", e)))?,
                )
            };
            labels.push(label);
        }
        ClusterAssignment::new(labels)
    }
}

/// Radius at the `quantile` nearest-rank of all unordered pairwise
/// distances: sort the n(n-1)/2 distances ascending and take the value at
/// rank `ceil(quantile * count)` (1-based). Needs at least two samples and a
/// quantile in (0, 1).
pub fn select_eps(dist: &Mat64, quantile: f64) -> Result<f64> {
    let n = dist.rows();
    if dist.cols() != n {
        return Err(AnlError::dim("select_eps", "distance matrix must be square"));
    }
    if n < 2 {
        return Err(AnlError::domain("select_eps", "need at least two samples"));
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(AnlError::domain(
            "select_eps",
            format!("quantile must lie in (0, 1), got {}", quantile),
        ));
    }
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push(dist.get(i, j));
        }
    }
    pairs.sort_by(f64::total_cmp);
    let count = pairs.len() as f64;
    // Snap ranks that are integral up to float error, so e.g. 0.02 * 100
    // (stored as 2.0000000000000004) still selects rank 2.
    let rank = ((quantile * count) - 1e-9).ceil().max(1.0) as usize;
    Ok(pairs[rank.min(pairs.len()) - 1])
}

/// Density clustering on a symmetric distance matrix. A sample is a core
/// point when at least `min_pts` samples (itself included) lie within `eps`
/// inclusive. Clusters are maximal sets of density-connected core points
/// plus their border points; a border point reachable from several clusters
/// joins the one whose earliest core point has the smallest sample index.
/// Non-reachable samples become outliers. Final ids are renumbered by first
/// appearance in sample order.
pub fn dbscan(dist: &Mat64, eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    let n = dist.rows();
    if dist.cols() != n {
        return Err(AnlError::dim("dbscan", "distance matrix must be square"));
    }
    if !eps.is_finite() || eps < 0.0 {
        return Err(AnlError::domain("dbscan", "eps must be finite and non-negative"));
    }
    if min_pts == 0 {
        return Err(AnlError::domain("dbscan", "min_pts must be positive"));
    }
    let neighbors: Vec<Vec<usize>> = par::map_indexed(n, |i| {
        (0..n).filter(|&j| dist.get(i, j) <= eps).collect()
    });
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next_cluster = 0usize;
    for i in 0..n {
        if !core[i] || labels[i].is_some() {
            continue;
        }
        labels[i] = Some(next_cluster);
        let mut queue: VecDeque<usize> = neighbors[i].iter().copied().collect();
        while let Some(j) = queue.pop_front() {
            if labels[j].is_some() {
                continue;
            }
            labels[j] = Some(next_cluster);
            if core[j] {
                queue.extend(neighbors[j].iter().copied());
            }
        }
        next_cluster += 1;
    }
    ClusterAssignment::new(renumber_by_first_appearance(labels))
}

/// Remap cluster ids to 0.. in order of first appearance by sample index.
fn renumber_by_first_appearance(labels: Vec<Option<usize>>) -> Vec<Option<usize>> {
    let mut remap: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    labels
        .into_iter()
        .map(|l| {
            l.map(|old| {
                let next = remap.len();
                *remap.entry(old).or_insert(next)
            })
        })
        .collect()
}

/// Mean embedding per cluster, row `c` for cluster `c`. Errors when the
/// assignment is empty of clusters or lengths disagree.
pub fn centroids(embeddings: &Mat64, assignment: &ClusterAssignment) -> Result<Mat64> {
    if embeddings.rows() != assignment.len() {
        return Err(AnlError::dim(
            "centroids",
            format!(
                "{} embeddings vs {} labels",
                embeddings.rows(),
                assignment.len()
            ),
        ));
    }
    if assignment.n_clusters() == 0 {
        return Err(AnlError::domain("centroids", "no clusters"));
    }
    let members = assignment.members();
    let mut out = Mat64::zeros(assignment.n_clusters(), embeddings.cols());
    for (c, idxs) in members.iter().enumerate() {
        let inv = 1.0 / idxs.len() as f64;
        let row = out.row_mut(c);
        for &i in idxs {
            for (acc, v) in row.iter_mut().zip(embeddings.row(i)) {
                *acc += v * inv;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{pairwise_distance, Metric};
    use crate::rng::{component_rng, stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn dist_of(points: &[[f64; 2]]) -> Mat64 {
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        let m = Mat64::new(points.len(), 2, flat).unwrap();
        pairwise_distance(&m, Metric::Euclidean).unwrap()
    }

    #[test]
    fn select_eps_nearest_rank_hand_case() {
        // Distances {1..100} as a chain: 101 collinear points at cumulative
        // offsets would tangle pair distances, so build the matrix directly.
        let n = 101;
        let mut d = Mat64::zeros(n, n);
        let mut k = 1.0;
        for i in 0..n {
            for j in i + 1..n {
                d.set(i, j, k);
                d.set(j, i, k);
                k += 1.0;
            }
        }
        // 5050 pairs; quantile low enough to land on rank 2 exactly when
        // count is 100 requires a dedicated 100-pair matrix instead:
        let mut small = Mat64::zeros(15, 15);
        let mut v = 1.0;
        for i in 0..15 {
            for j in i + 1..15 {
                small.set(i, j, v);
                small.set(j, i, v);
                v += 1.0;
            }
        }
        // 105 pairs of distances 1..=105; quantile 0.02 -> rank ceil(2.1)=3.
        assert_eq!(select_eps(&small, 0.02).unwrap(), 3.0);
        // Exact-integer rank: 100 pairs needs n where n(n-1)/2 = 100; no
        // integer n, so check the snap on the big matrix: 5050 pairs,
        // quantile 0.02 -> rank 101 exactly.
        assert_eq!(select_eps(&d, 0.02).unwrap(), 101.0);
    }

    #[test]
    fn select_eps_rejects_bad_inputs() {
        let d = Mat64::zeros(3, 3);
        assert!(select_eps(&d, 0.0).is_err());
        assert!(select_eps(&d, 1.0).is_err());
        assert!(select_eps(&Mat64::zeros(1, 1), 0.5).is_err());
        assert!(select_eps(&Mat64::zeros(2, 3), 0.5).is_err());
    }

    #[test]
    fn select_eps_order_statistics() {
        let pts: Vec<[f64; 2]> = (0..12)
            .map(|i| [(i as f64 * 0.37).sin() * 3.0, (i as f64 * 0.71).cos() * 3.0])
            .collect();
        let d = dist_of(&pts);
        let mut pairs = Vec::new();
        for i in 0..12 {
            for j in i + 1..12 {
                pairs.push(d.get(i, j));
            }
        }
        pairs.sort_by(f64::total_cmp);
        // Quantile close to 1 picks the largest pair; close to 0 the smallest.
        assert_eq!(select_eps(&d, 0.999).unwrap(), *pairs.last().unwrap());
        assert_eq!(select_eps(&d, 1e-6).unwrap(), pairs[0]);
    }

    #[test]
    fn two_blobs_and_one_outlier() {
        let pts = [
            [0.0, 0.0],
            [0.1, 0.0],
            [0.0, 0.1],
            [5.0, 5.0],
            [5.1, 5.0],
            [5.0, 5.1],
            [20.0, 20.0],
        ];
        let asg = dbscan(&dist_of(&pts), 0.5, 3).unwrap();
        assert_eq!(asg.n_clusters(), 2);
        assert_eq!(asg.labels()[..3], [Some(0), Some(0), Some(0)]);
        assert_eq!(asg.labels()[3..6], [Some(1), Some(1), Some(1)]);
        assert_eq!(asg.labels()[6], None);
        assert_eq!(asg.outliers(), vec![6]);
    }

    #[test]
    fn all_points_identical_single_cluster() {
        let pts = [[1.0, 1.0]; 5];
        let asg = dbscan(&dist_of(&pts), 0.0, 5).unwrap();
        assert_eq!(asg.n_clusters(), 1);
        assert!(asg.labels().iter().all(|l| *l == Some(0)));
    }

    #[test]
    fn min_pts_one_makes_every_point_core() {
        let pts = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let asg = dbscan(&dist_of(&pts), 0.5, 1).unwrap();
        assert_eq!(asg.n_clusters(), 3);
        assert_eq!(asg.n_outliers(), 0);
    }

    #[test]
    fn huge_eps_single_cluster() {
        let pts = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [7.0, 7.0]];
        let asg = dbscan(&dist_of(&pts), 1e9, 2).unwrap();
        assert_eq!(asg.n_clusters(), 1);
    }

    #[test]
    fn border_point_joins_smallest_cluster_id() {
        // Two tight 4-point clusters; the last point is within eps of one
        // core from each but has only 3 neighbors total, so with min_pts 4
        // it is a border point and must take the smaller cluster id.
        let pts = [
            [0.0, 0.0],
            [0.1, 0.0],
            [0.2, 0.0],
            [0.3, 0.0],
            [2.65, 0.0],
            [2.75, 0.0],
            [2.85, 0.0],
            [2.95, 0.0],
            [1.45, 0.0],
        ];
        let asg = dbscan(&dist_of(&pts), 1.2, 4).unwrap();
        assert_eq!(asg.n_clusters(), 2);
        assert_eq!(asg.labels()[..4], [Some(0); 4]);
        assert_eq!(asg.labels()[4..8], [Some(1); 4]);
        assert_eq!(asg.labels()[8], Some(0));
    }

    #[test]
    fn centroid_means() {
        let emb = Mat64::new(4, 2, vec![0., 0., 2., 0., 10., 10., 12., 14.]).unwrap();
        let asg = ClusterAssignment::new(vec![Some(0), Some(0), Some(1), Some(1)]).unwrap();
        let c = centroids(&emb, &asg).unwrap();
        assert_eq!(c.row(0), &[1.0, 0.0]);
        assert_eq!(c.row(1), &[11.0, 12.0]);
    }

    #[test]
    fn centroids_reject_empty_or_mismatched() {
        let emb = Mat64::zeros(3, 2);
        let none = ClusterAssignment::new(vec![None, None, None]).unwrap();
        assert!(centroids(&emb, &none).is_err());
        let asg = ClusterAssignment::new(vec![Some(0), Some(0)]).unwrap();
        assert!(centroids(&emb, &asg).is_err());
    }

    #[test]
    fn assignment_rejects_non_canonical_ids() {
        assert!(ClusterAssignment::new(vec![Some(1), Some(0)]).is_err());
        assert!(ClusterAssignment::new(vec![Some(0), Some(2)]).is_err());
        assert!(ClusterAssignment::new(vec![None, Some(0), Some(1)]).is_ok());
    }

    #[test]
    fn assignment_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("assignment.csv");
        let asg =
            ClusterAssignment::new(vec![Some(0), None, Some(1), Some(0), None]).unwrap();
        asg.export_csv(&path).unwrap();
        let back = ClusterAssignment::import_csv(&path).unwrap();
        assert_eq!(asg, back);
    }

    // Independent reference: union-find over core points, then border
    // attachment by smallest cluster id.
    fn brute_force_dbscan(dist: &Mat64, eps: f64, min_pts: usize) -> Vec<Option<usize>> {
        let n = dist.rows();
        let neighbors: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..n).filter(|&j| dist.get(i, j) <= eps).collect())
            .collect();
        let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            if parent[i] != i {
                let r = find(parent, parent[i]);
                parent[i] = r;
            }
            parent[i]
        }
        for i in 0..n {
            if !core[i] {
                continue;
            }
            for &j in &neighbors[i] {
                if core[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        // Components keyed by min core index, numbered in that order.
        let mut roots: Vec<usize> = (0..n)
            .filter(|&i| core[i] && find(&mut parent, i) == i)
            .collect();
        roots.sort_unstable();
        let id_of_root: std::collections::BTreeMap<usize, usize> =
            roots.iter().enumerate().map(|(k, &r)| (r, k)).collect();
        let mut labels = vec![None; n];
        for i in 0..n {
            if core[i] {
                let r = find(&mut parent, i);
                labels[i] = Some(id_of_root[&r]);
            }
        }
        for i in 0..n {
            if core[i] {
                continue;
            }
            let mut best: Option<usize> = None;
            for &j in &neighbors[i] {
                if core[j] {
                    let c = labels[j].unwrap();
                    best = Some(best.map_or(c, |b: usize| b.min(c)));
                }
            }
            labels[i] = best;
        }
        renumber_by_first_appearance(labels)
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = component_rng(5, stream::WORLD_NOISE);
        for _ in 0..60 {
            let n = rng.random_range(2..30);
            let flat: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let m = Mat64::new(n, 2, flat).unwrap();
            let d = pairwise_distance(&m, Metric::Euclidean).unwrap();
            let eps = rng.random_range(0.1..3.0);
            let min_pts = rng.random_range(1..6);
            let fast = dbscan(&d, eps, min_pts).unwrap();
            let slow = brute_force_dbscan(&d, eps, min_pts);
            assert_eq!(fast.labels(), &slow[..], "n={} eps={} min_pts={}", n, eps, min_pts);
        }
    }

    proptest! {
        // Partition sanity on random instances: canonical ids, members
        // consistent, core points never outliers.
        #[test]
        fn partition_is_sound(seed in 0u64..200) {
            let mut rng = component_rng(seed, stream::WORLD_ASSIGN);
            let n = rng.random_range(2..25);
            let flat: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let m = Mat64::new(n, 3, flat).unwrap();
            let d = pairwise_distance(&m, Metric::Euclidean).unwrap();
            let eps = rng.random_range(0.2..2.0);
            let min_pts = rng.random_range(1..5);
            let asg = dbscan(&d, eps, min_pts).unwrap();
            let members = asg.members();
            prop_assert_eq!(members.len(), asg.n_clusters());
            for m in &members {
                prop_assert!(!m.is_empty());
            }
            let covered: usize = members.iter().map(|m| m.len()).sum();
            prop_assert_eq!(covered + asg.n_outliers(), n);
            for i in 0..n {
                let degree = (0..n).filter(|&j| d.get(i, j) <= eps).count();
                if degree >= min_pts {
                    prop_assert!(asg.labels()[i].is_some());
                }
            }
        }
    }
}
