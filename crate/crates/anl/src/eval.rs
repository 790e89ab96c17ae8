//! Retrieval evaluation (CMC, mAP), clustering quality (pairwise F), and
//! the run report.
//!
//! Retrieval follows the cross-camera protocol: for each query, gallery
//! entries sharing both identity and camera are excluded, candidates are
//! ranked by distance with index tie-breaks, and queries with no
//! cross-camera match are dropped with a warning.

use crate::cluster::ClusterAssignment;
use crate::config::PipelineConfig;
use crate::error::{AnlError, Result};
use crate::fda::FdaTraceRow;
use crate::math::Mat64;
use crate::par;
use crate::rss::RssTraceRow;
use crate::trainer::MainTraceRow;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalMeta {
    pub identity: usize,
    pub camera: usize,
}

/// CMC curve and mean average precision for a query/gallery split.
/// Embeddings are compared with Euclidean distance, so pass unit-norm rows
/// when cosine ranking is intended. Returns an error when no query has a
/// cross-camera relevant match.
pub fn cmc_map(
    query: &Mat64,
    query_meta: &[RetrievalMeta],
    gallery: &Mat64,
    gallery_meta: &[RetrievalMeta],
) -> Result<(Vec<f64>, f64)> {
    if query.rows() != query_meta.len() || gallery.rows() != gallery_meta.len() {
        return Err(AnlError::dim("cmc_map", "embedding rows vs metadata length"));
    }
    if query.cols() != gallery.cols() {
        return Err(AnlError::dim(
            "cmc_map",
            format!("query dim {} vs gallery dim {}", query.cols(), gallery.cols()),
        ));
    }
    if query.rows() == 0 || gallery.rows() == 0 {
        return Err(AnlError::domain("cmc_map", "empty query or gallery"));
    }
    // Per query: (first-hit rank, average precision, candidate count),
    // or None when no cross-camera relevant entry exists.
    let per_query: Vec<Option<(usize, f64, usize)>> = par::map_indexed(query.rows(), |qi| {
        let q = query.row(qi);
        let meta = &query_meta[qi];
        let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(gallery.rows());
        for gi in 0..gallery.rows() {
            let gm = &gallery_meta[gi];
            if gm.identity == meta.identity && gm.camera == meta.camera {
                continue;
            }
            let d = q
                .iter()
                .zip(gallery.row(gi))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            candidates.push((d, gi));
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut first_hit = None;
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &(_, gi)) in candidates.iter().enumerate() {
            if gallery_meta[gi].identity == meta.identity {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(rank);
                }
            }
        }
        first_hit.map(|fh| (fh, precision_sum / hits as f64, candidates.len()))
    });
    let mut valid = 0usize;
    let mut map = 0.0;
    let mut depth = 0usize;
    for (qi, r) in per_query.iter().enumerate() {
        match r {
            Some((_, _, len)) => {
                valid += 1;
                depth = depth.max(*len);
            }
            None => log::warn!("query {} has no cross-camera match in gallery; skipped", qi),
        }
    }
    if valid == 0 {
        return Err(AnlError::domain(
            "cmc_map",
            "no query has a cross-camera relevant gallery entry",
        ));
    }
    let mut hits_by_rank = vec![0usize; depth];
    for r in per_query.iter().flatten() {
        let (fh, ap, _) = *r;
        map += ap / valid as f64;
        for slot in hits_by_rank.iter_mut().skip(fh) {
            *slot += 1;
        }
    }
    let cmc = hits_by_rank
        .iter()
        .map(|&h| h as f64 / valid as f64)
        .collect();
    Ok((cmc, map))
}

/// Pairwise precision/recall/F over a predicted partition versus ground
/// truth. Outliers (`None`) contribute no predicted pairs. Empty pair sets
/// yield zero scores rather than errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub f_value: f64,
}

pub fn pairwise_f_value(pred: &[Option<usize>], truth: &[usize]) -> Result<FScore> {
    if pred.len() != truth.len() {
        return Err(AnlError::dim(
            "pairwise_f_value",
            format!("{} predictions vs {} truths", pred.len(), truth.len()),
        ));
    }
    fn choose2(n: usize) -> f64 {
        (n * n.saturating_sub(1) / 2) as f64
    }
    use std::collections::BTreeMap;
    let mut pred_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut true_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut joint_counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (p, &t) in pred.iter().zip(truth) {
        *true_counts.entry(t).or_insert(0) += 1;
        if let Some(c) = p {
            *pred_counts.entry(*c).or_insert(0) += 1;
            *joint_counts.entry((*c, t)).or_insert(0) += 1;
        }
    }
    let pred_pairs: f64 = pred_counts.values().map(|&n| choose2(n)).sum();
    let true_pairs: f64 = true_counts.values().map(|&n| choose2(n)).sum();
    let joint_pairs: f64 = joint_counts.values().map(|&n| choose2(n)).sum();
    let precision = if pred_pairs > 0.0 {
        joint_pairs / pred_pairs
    } else {
        0.0
    };
    let recall = if true_pairs > 0.0 {
        joint_pairs / true_pairs
    } else {
        0.0
    };
    let f_value = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(FScore {
        precision,
        recall,
        f_value,
    })
}

/// F score of a cluster assignment against ground-truth identities.
pub fn assignment_f_value(assignment: &ClusterAssignment, truth: &[usize]) -> Result<FScore> {
    pairwise_f_value(assignment.labels(), truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: String,
    pub cmc: Vec<f64>,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FEntry {
    pub stage: String,
    pub precision: f64,
    pub recall: f64,
    pub f_value: f64,
}

impl FEntry {
    pub fn new(stage: impl Into<String>, score: FScore) -> Self {
        FEntry {
            stage: stage.into(),
            precision: score.precision,
            recall: score.recall,
            f_value: score.f_value,
        }
    }
}

/// Per-correction-round bookkeeping; reliable + rejected + unclustered must
/// cover the target set exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub epoch: usize,
    pub eps: f64,
    pub n_clusters: usize,
    pub n_reliable: usize,
    pub n_rejected: usize,
    pub n_unclustered: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTraces {
    pub alignment: Vec<FdaTraceRow>,
    pub correction: Vec<RssTraceRow>,
    pub main: Vec<MainTraceRow>,
}

/// Everything a pipeline run reports. Serialization is deterministic:
/// fixed field order, no timestamps, no map types with unstable order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config: PipelineConfig,
    pub cmc: Vec<f64>,
    pub map: f64,
    pub stages: Vec<StageMetrics>,
    pub f_trace: Vec<FEntry>,
    pub rounds: Vec<RoundSummary>,
    pub losses: LossTraces,
}

impl MetricsReport {
    /// Scalar sanity: every CMC value, mAP and F component finite and in
    /// [0, 1], CMC curves non-decreasing.
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| -> Result<()> {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(AnlError::domain(
                    "MetricsReport::validate",
                    format!("{} = {} outside [0, 1]", name, v),
                ));
            }
            Ok(())
        };
        let check_curve = |stage: &str, cmc: &[f64], map: f64| -> Result<()> {
            unit(&format!("{} map", stage), map)?;
            let mut prev = 0.0;
            for (k, &v) in cmc.iter().enumerate() {
                unit(&format!("{} cmc[{}]", stage, k), v)?;
                if v + 1e-12 < prev {
                    return Err(AnlError::domain(
                        "MetricsReport::validate",
                        format!("{} cmc decreases at {}", stage, k),
                    ));
                }
                prev = v;
            }
            Ok(())
        };
        check_curve("final", &self.cmc, self.map)?;
        for s in &self.stages {
            check_curve(&s.stage, &s.cmc, s.map)?;
        }
        for f in &self.f_trace {
            unit(&format!("{} precision", f.stage), f.precision)?;
            unit(&format!("{} recall", f.stage), f.recall)?;
            unit(&format!("{} f_value", f.stage), f.f_value)?;
        }
        Ok(())
    }
}

fn csv_err(path: &Path, e: csv::Error) -> AnlError {
    AnlError::Parse {
        path: path.display().to_string(),
        line: 0,
        detail: e.to_string(),
    }
}

/// Write serializable rows as a headered CSV file.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AnlError::io(path, e))
}

/// Validate and write `report.json` plus the loss/F trace CSVs into `dir`.
pub fn write_report(report: &MetricsReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    report.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| AnlError::io(dir, e))?;
    let jpath = dir.join("report.json");
    let text =
        serde_json::to_string_pretty(report).map_err(|e| AnlError::json(&jpath, e))?;
    std::fs::write(&jpath, text).map_err(|e| AnlError::io(&jpath, e))?;
    write_csv(&dir.join("fda_trace.csv"), &report.losses.alignment)?;
    write_csv(&dir.join("rss_trace.csv"), &report.losses.correction)?;
    write_csv(&dir.join("main_trace.csv"), &report.losses.main)?;
    write_csv(&dir.join("f_trace.csv"), &report.f_trace)?;
    Ok(())
}

/// Export embeddings (`index,e0..`) and metadata (`index,role,identity,
/// camera`) CSVs for external evaluation.
pub fn export_embeddings(
    dir: impl AsRef<Path>,
    embeddings: &Mat64,
    roles: &[(usize, &str)],
    meta: &[RetrievalMeta],
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| AnlError::io(dir, e))?;
    let epath = dir.join("embeddings.csv");
    let mut w = csv::Writer::from_path(&epath).map_err(|e| csv_err(&epath, e))?;
    let mut header = vec!["index".to_string()];
    header.extend((0..embeddings.cols()).map(|i| format!("e{}", i)));
    w.write_record(&header).map_err(|e| csv_err(&epath, e))?;
    for i in 0..embeddings.rows() {
        let mut rec = vec![i.to_string()];
        rec.extend(embeddings.row(i).iter().map(|v| format!("{:?}", v)));
        w.write_record(&rec).map_err(|e| csv_err(&epath, e))?;
    }
    w.flush().map_err(|e| AnlError::io(&epath, e))?;
    if roles.len() != meta.len() {
        return Err(AnlError::dim("export_embeddings", "roles vs meta length"));
    }
    let mpath = dir.join("meta.csv");
    let mut w = csv::Writer::from_path(&mpath).map_err(|e| csv_err(&mpath, e))?;
    w.write_record(["index", "role", "identity", "camera"])
        .map_err(|e| csv_err(&mpath, e))?;
    for ((idx, role), m) in roles.iter().zip(meta) {
        w.write_record([
            idx.to_string(),
            role.to_string(),
            m.identity.to_string(),
            m.camera.to_string(),
        ])
        .map_err(|e| csv_err(&mpath, e))?;
    }
    w.flush().map_err(|e| AnlError::io(&mpath, e))
}
