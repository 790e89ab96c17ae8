//! Synthetic embedding worlds with known ground truth.
//!
//! Each identity is a latent point; cameras are orthogonal maps plus a bias;
//! the target domain additionally sits at a fixed offset from the source.
//! Observations are camera-transformed latents plus isotropic noise, so
//! "same identity, different camera" is a real, controllable difficulty.
//!
//! Training code only ever receives feature matrices and camera ids from
//! here; identities leave this module solely through the evaluation-facing
//! accessors.

use crate::error::{AnlError, Result};
use crate::math::{Mat64, Vec64};
use crate::rng::{component_rng, stream, SeededRng};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// One observation. `index` is the position within its domain's sample list.
/// `identity` is ground truth, available to evaluation only; imported
/// datasets may omit it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub domain: Domain,
    pub camera: usize,
    pub identity: Option<usize>,
    pub features: Vec64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Identities per domain; pools are disjoint across domains.
    pub n_identities: usize,
    pub n_cameras: usize,
    pub samples_per_identity: usize,
    pub raw_dim: usize,
    /// Strength of per-camera rotation angles and bias.
    pub camera_scale: f64,
    /// Distance of the target domain's offset from the source.
    pub domain_shift: f64,
    /// Isotropic observation noise.
    pub noise_sigma: f64,
    /// Distinct cameras each identity is seen by.
    pub cameras_per_identity: usize,
    /// Perturbation scale used when deriving variant views.
    pub variant_sigma: f64,
    /// Fraction of an identity's cameras contributing one query image each.
    pub query_fraction: f64,
    /// Junk identities with a single target-domain sample each. They join
    /// the gallery (never the query set) and have no same-identity mate, so
    /// a good clustering leaves them unclustered.
    pub n_distractors: usize,
    /// Correlation between a distractor's latent and a randomly chosen real
    /// identity's latent: 0 = independent junk, near 1 = camouflaged junk
    /// that crowds a real identity's neighborhood.
    pub distractor_blend: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_identities: 50,
            n_cameras: 4,
            samples_per_identity: 8,
            raw_dim: 32,
            camera_scale: 0.18,
            domain_shift: 1.5,
            noise_sigma: 0.15,
            cameras_per_identity: 4,
            variant_sigma: 0.15,
            query_fraction: 0.5,
            n_distractors: 40,
            distractor_blend: 0.9,
            seed: 42,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.samples_per_identity == 0 || self.raw_dim == 0 {
            return Err(AnlError::Config(
                "identities, samples per identity and raw dim must be positive".into(),
            ));
        }
        if self.n_cameras == 0 {
            return Err(AnlError::Config("need at least one camera".into()));
        }
        if self.cameras_per_identity == 0 || self.cameras_per_identity > self.n_cameras {
            return Err(AnlError::Config(format!(
                "cameras_per_identity {} must be in 1..={}",
                self.cameras_per_identity, self.n_cameras
            )));
        }
        for (name, v) in [
            ("camera_scale", self.camera_scale),
            ("domain_shift", self.domain_shift),
            ("noise_sigma", self.noise_sigma),
            ("variant_sigma", self.variant_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(AnlError::Config(format!(
                    "{} must be finite and non-negative, got {}",
                    name, v
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.query_fraction) {
            return Err(AnlError::Config(format!(
                "query_fraction must lie in [0, 1], got {}",
                self.query_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.distractor_blend) {
            return Err(AnlError::Config(format!(
                "distractor_blend must lie in [0, 1], got {}",
                self.distractor_blend
            )));
        }
        Ok(())
    }
}

/// A generated (or imported) world: both domains plus the retrieval split
/// over the target. `query`/`gallery` hold indices into `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub source: Vec<Sample>,
    pub target: Vec<Sample>,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
    pub raw_dim: usize,
}

impl Dataset {
    pub fn source_features(&self) -> Mat64 {
        features_of(&self.source, self.raw_dim)
    }

    pub fn target_features(&self) -> Mat64 {
        features_of(&self.target, self.raw_dim)
    }

    pub fn target_cameras(&self) -> Vec<usize> {
        self.target.iter().map(|s| s.camera).collect()
    }

    /// Source labels for supervised training, remapped to a dense 0..C-1
    /// range in first-appearance order. Errors if any source identity is
    /// missing.
    pub fn source_labels(&self) -> Result<(Vec<usize>, usize)> {
        let mut remap = BTreeMap::new();
        let mut labels = Vec::with_capacity(self.source.len());
        for s in &self.source {
            let id = s.identity.ok_or_else(|| {
                AnlError::domain("Dataset::source_labels", "source sample without identity")
            })?;
            let next = remap.len();
            let label = *remap.entry(id).or_insert(next);
            labels.push(label);
        }
        Ok((labels, remap.len()))
    }

    /// Ground-truth target identities, for evaluation only.
    pub fn target_identities(&self) -> Result<Vec<usize>> {
        self.target
            .iter()
            .map(|s| {
                s.identity.ok_or_else(|| {
                    AnlError::domain(
                        "Dataset::target_identities",
                        "target sample without identity",
                    )
                })
            })
            .collect()
    }

    /// Structural invariants: in-order indices, query/gallery disjoint and
    /// in range, and every query identity visible in the gallery under a
    /// different camera.
    pub fn validate(&self) -> Result<()> {
        for (pos, s) in self.source.iter().enumerate() {
            if s.index != pos || s.domain != Domain::Source {
                return Err(AnlError::domain("Dataset::validate", "bad source indexing"));
            }
        }
        for (pos, s) in self.target.iter().enumerate() {
            if s.index != pos || s.domain != Domain::Target {
                return Err(AnlError::domain("Dataset::validate", "bad target indexing"));
            }
        }
        let mut seen = vec![0u8; self.target.len()];
        for &q in &self.query {
            if q >= self.target.len() {
                return Err(AnlError::domain("Dataset::validate", "query out of range"));
            }
            seen[q] |= 1;
        }
        for &g in &self.gallery {
            if g >= self.target.len() {
                return Err(AnlError::domain("Dataset::validate", "gallery out of range"));
            }
            if seen[g] & 1 != 0 {
                return Err(AnlError::domain(
                    "Dataset::validate",
                    format!("sample {} in both query and gallery", g),
                ));
            }
            seen[g] |= 2;
        }
        for &q in &self.query {
            let qs = &self.target[q];
            if qs.identity.is_none() {
                continue;
            }
            let ok = self.gallery.iter().any(|&g| {
                let gs = &self.target[g];
                gs.identity == qs.identity && gs.camera != qs.camera
            });
            if !ok {
                return Err(AnlError::domain(
                    "Dataset::validate",
                    format!("query {} has no cross-camera gallery match", q),
                ));
            }
        }
        Ok(())
    }
}

fn features_of(samples: &[Sample], dim: usize) -> Mat64 {
    let mut data = Vec::with_capacity(samples.len() * dim);
    for s in samples {
        data.extend_from_slice(s.features.as_slice());
    }
    Mat64::new(samples.len(), dim, data).expect("sample features are validated at construction")
}

/// Orthogonal map (a product of Givens rotations) plus a bias vector.
struct CameraMap {
    rotations: Vec<(usize, usize, f64)>,
    bias: Vec<f64>,
}

impl CameraMap {
    fn generate(dim: usize, scale: f64, rng: &mut SeededRng) -> CameraMap {
        let mut rotations = Vec::new();
        if dim >= 2 {
            for _ in 0..dim {
                let i = rng.random_range(0..dim);
                let mut j = rng.random_range(0..dim - 1);
                if j >= i {
                    j += 1;
                }
                let angle = scale * rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                rotations.push((i, j, angle));
            }
        }
        let bias: Vec<f64> = (0..dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        CameraMap { rotations, bias }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        for &(i, j, angle) in &self.rotations {
            let (s, c) = angle.sin_cos();
            let (xi, xj) = (out[i], out[j]);
            out[i] = c * xi - s * xj;
            out[j] = s * xi + c * xj;
        }
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        out
    }
}

/// Generate a world. Identity pools are disjoint across domains (target ids
/// start at `n_identities`), every identity is observed by exactly
/// `cameras_per_identity` distinct cameras, and the retrieval split is drawn
/// with `query_fraction`.
pub fn generate_world(cfg: &WorldConfig) -> Result<Dataset> {
    cfg.validate()?;
    let dim = cfg.raw_dim;
    let mut latent_rng = component_rng(cfg.seed, stream::WORLD_LATENTS);
    let mut camera_rng = component_rng(cfg.seed, stream::WORLD_CAMERAS);
    let mut assign_rng = component_rng(cfg.seed, stream::WORLD_ASSIGN);
    let mut noise_rng = component_rng(cfg.seed, stream::WORLD_NOISE);
    let mut shift_rng = component_rng(cfg.seed, stream::WORLD_SHIFT);

    let shift_dir: Vec<f64> = (0..dim)
        .map(|_| shift_rng.sample::<f64, _>(StandardNormal))
        .collect();
    let shift_norm = crate::math::norm(&shift_dir).max(1e-12);

    let mut domains_out: Vec<Vec<Sample>> = Vec::with_capacity(2);
    for (d, domain) in [Domain::Source, Domain::Target].into_iter().enumerate() {
        let offset: Vec<f64> = shift_dir
            .iter()
            .map(|v| {
                if domain == Domain::Target {
                    cfg.domain_shift * v / shift_norm
                } else {
                    0.0
                }
            })
            .collect();
        let cameras: Vec<CameraMap> = (0..cfg.n_cameras)
            .map(|_| CameraMap::generate(dim, cfg.camera_scale, &mut camera_rng))
            .collect();
        let mut samples = Vec::with_capacity(cfg.n_identities * cfg.samples_per_identity);
        let mut latents: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_identities);
        for ident in 0..cfg.n_identities {
            let global_id = d * cfg.n_identities + ident;
            let latent: Vec<f64> = (0..dim)
                .map(|_| latent_rng.sample::<f64, _>(StandardNormal))
                .collect();
            latents.push(latent.clone());
            let mut cams: Vec<usize> =
                sample_indices(&mut assign_rng, cfg.n_cameras, cfg.cameras_per_identity)
                    .into_iter()
                    .collect();
            cams.sort_unstable();
            for s in 0..cfg.samples_per_identity {
                let cam = cams[s % cams.len()];
                let mut x = cameras[cam].apply(&latent);
                for (v, o) in x.iter_mut().zip(&offset) {
                    *v += o + cfg.noise_sigma * noise_rng.sample::<f64, _>(StandardNormal);
                }
                samples.push(Sample {
                    index: samples.len(),
                    domain,
                    camera: cam,
                    identity: Some(global_id),
                    features: Vec64::new(x)?,
                });
            }
        }
        if domain == Domain::Target {
            let blend = cfg.distractor_blend;
            let ortho = (1.0 - blend * blend).sqrt();
            for d in 0..cfg.n_distractors {
                let base = &latents[assign_rng.random_range(0..cfg.n_identities)];
                let latent: Vec<f64> = base
                    .iter()
                    .map(|&b| {
                        blend * b + ortho * latent_rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect();
                let cam = assign_rng.random_range(0..cfg.n_cameras);
                let mut x = cameras[cam].apply(&latent);
                for (v, o) in x.iter_mut().zip(&offset) {
                    *v += o + cfg.noise_sigma * noise_rng.sample::<f64, _>(StandardNormal);
                }
                samples.push(Sample {
                    index: samples.len(),
                    domain,
                    camera: cam,
                    identity: Some(2 * cfg.n_identities + d),
                    features: Vec64::new(x)?,
                });
            }
        }
        domains_out.push(samples);
    }
    let target = domains_out.pop().expect("two domains generated");
    let source = domains_out.pop().expect("two domains generated");
    let (query, gallery) = split_query_gallery(&target, cfg.query_fraction, cfg.seed)?;
    let ds = Dataset {
        source,
        target,
        query,
        gallery,
        raw_dim: dim,
    };
    ds.validate()?;
    Ok(ds)
}

/// Perturbed view of a feature vector: `x + sigma * noise`, deterministic in
/// `seed`.
pub fn make_variant(x: &Vec64, sigma: f64, seed: u64) -> Result<Vec64> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(AnlError::domain("make_variant", "sigma must be non-negative"));
    }
    let mut rng = component_rng(seed, stream::VARIANT_OP);
    Vec64::new(
        x.as_slice()
            .iter()
            .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
}

/// Row-wise variants of a whole matrix from one seeded draw sequence.
pub fn make_variants(x: &Mat64, sigma: f64, seed: u64) -> Result<Mat64> {
    let mut rng = component_rng(seed, stream::VARIANT_OP);
    perturb_rows(x, sigma, &mut rng)
}

/// Row-wise variants drawn from a caller-provided rng, for components that
/// manage their own stream (e.g. per-epoch regeneration).
pub fn perturb_rows(x: &Mat64, sigma: f64, rng: &mut SeededRng) -> Result<Mat64> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(AnlError::domain("perturb_rows", "sigma must be non-negative"));
    }
    let data = x
        .as_slice()
        .iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Mat64::new(x.rows(), x.cols(), data)
}

/// Split target samples into query and gallery. Per identity, a seeded
/// `floor(fraction * cameras)` of its cameras (clamped so at least one
/// camera stays out) contribute one random image each to the query; all
/// remaining images land in the gallery. Identities seen by a single camera
/// cannot satisfy cross-camera retrieval and are excluded from the query
/// with a warning.
pub fn split_query_gallery(
    target: &[Sample],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(AnlError::domain(
            "split_query_gallery",
            format!("fraction must lie in [0, 1], got {}", fraction),
        ));
    }
    let mut rng = component_rng(seed, stream::SPLIT);
    // identity -> camera -> sample indices, ordered for determinism.
    let mut by_identity: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
    for s in target {
        let id = s.identity.ok_or_else(|| {
            AnlError::domain("split_query_gallery", "sample without identity")
        })?;
        by_identity
            .entry(id)
            .or_default()
            .entry(s.camera)
            .or_default()
            .push(s.index);
    }
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for (id, cams) in &by_identity {
        let m = cams.len();
        if m < 2 {
            let total: usize = cams.values().map(|v| v.len()).sum();
            if total > 1 {
                log::warn!(
                    "identity {} appears under a single camera; excluded from query",
                    id
                );
            }
            for idxs in cams.values() {
                gallery.extend_from_slice(idxs);
            }
            continue;
        }
        let n_sel = ((fraction * m as f64).floor() as usize).min(m - 1);
        let mut selected: Vec<usize> = sample_indices(&mut rng, m, n_sel).into_iter().collect();
        selected.sort_unstable();
        let cam_ids: Vec<usize> = cams.keys().copied().collect();
        let chosen: Vec<usize> = selected.iter().map(|&c| cam_ids[c]).collect();
        for (&cam, idxs) in cams {
            if chosen.contains(&cam) {
                let pick = rng.random_range(0..idxs.len());
                for (k, &idx) in idxs.iter().enumerate() {
                    if k == pick {
                        query.push(idx);
                    } else {
                        gallery.push(idx);
                    }
                }
            } else {
                gallery.extend_from_slice(idxs);
            }
        }
    }
    query.sort_unstable();
    gallery.sort_unstable();
    Ok((query, gallery))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    raw_dim: usize,
    n_source: usize,
    n_target: usize,
    query: Vec<usize>,
    gallery: Vec<usize>,
    seed: Option<u64>,
}

/// Write `dataset.csv` (one row per sample) and `manifest.json` (dims,
/// counts, split, seed) into `dir`.
pub fn export_dataset(ds: &Dataset, dir: impl AsRef<Path>, seed: Option<u64>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| AnlError::io(dir, e))?;
    let csv_path = dir.join("dataset.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_to_err(&csv_path, e))?;
    let mut header = vec![
        "index".to_string(),
        "domain".to_string(),
        "camera".to_string(),
        "identity".to_string(),
    ];
    header.extend((0..ds.raw_dim).map(|i| format!("f{}", i)));
    w.write_record(&header).map_err(|e| csv_to_err(&csv_path, e))?;
    for s in ds.source.iter().chain(&ds.target) {
        let mut rec = vec![
            s.index.to_string(),
            s.domain.to_string(),
            s.camera.to_string(),
            s.identity.map_or(String::new(), |i| i.to_string()),
        ];
        rec.extend(s.features.as_slice().iter().map(|v| format!("{:?}", v)));
        w.write_record(&rec).map_err(|e| csv_to_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| AnlError::io(&csv_path, e))?;
    let manifest = Manifest {
        raw_dim: ds.raw_dim,
        n_source: ds.source.len(),
        n_target: ds.target.len(),
        query: ds.query.clone(),
        gallery: ds.gallery.clone(),
        seed,
    };
    let mpath = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| AnlError::json(&mpath, e))?;
    std::fs::write(&mpath, text).map_err(|e| AnlError::io(&mpath, e))
}

/// Read a dataset previously written by `export_dataset` (or prepared
/// externally in the same layout).
pub fn import_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    let mtext = std::fs::read_to_string(&mpath).map_err(|e| AnlError::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&mtext).map_err(|e| AnlError::json(&mpath, e))?;
    let csv_path = dir.join("dataset.csv");
    let mut r = csv::Reader::from_path(&csv_path).map_err(|e| csv_to_err(&csv_path, e))?;
    let mut source = Vec::new();
    let mut target = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_to_err(&csv_path, e))?;
        let parse_err = |detail: String| AnlError::Parse {
            path: csv_path.display().to_string(),
            line: line + 2,
            detail,
        };
        if rec.len() != 4 + manifest.raw_dim {
            return Err(parse_err(format!(
                "{} fields, expected {}",
                rec.len(),
                4 + manifest.raw_dim
            )));
        }
        let index: usize = rec[0]
            .parse()
            .map_err(|e| parse_err(format!("index: {}", e)))?;
        let domain = match &rec[1] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(parse_err(format!("unknown domain {:?}", other))),
        };
        let camera: usize = rec[2]
            .parse()
            .map_err(|e| parse_err(format!("camera: {}", e)))?;
        let identity = if rec[3].is_empty() {
            None
        } else {
            Some(
                rec[3]
                    .parse()
                    .map_err(|e| parse_err(format!("identity: {}", e)))?,
            )
        };
        let mut feats = Vec::with_capacity(manifest.raw_dim);
        for k in 0..manifest.raw_dim {
            feats.push(
                rec[4 + k]
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("f{}: {}", k, e)))?,
            );
        }
        let sample = Sample {
            index,
            domain,
            camera,
            identity,
            features: Vec64::new(feats)?,
        };
        match domain {
            Domain::Source => source.push(sample),
            Domain::Target => target.push(sample),
        }
    }
    if source.len() != manifest.n_source || target.len() != manifest.n_target {
        return Err(AnlError::domain(
            "import_dataset",
            format!(
                "manifest promises {}+{} samples, csv has {}+{}",
                manifest.n_source,
                manifest.n_target,
                source.len(),
                target.len()
            ),
        ));
    }
    let ds = Dataset {
        source,
        target,
        query: manifest.query,
        gallery: manifest.gallery,
        raw_dim: manifest.raw_dim,
    };
    ds.validate()?;
    Ok(ds)
}

pub(crate) fn csv_to_err(path: &Path, e: csv::Error) -> AnlError {
    AnlError::Parse {
        path: path.display().to_string(),
        line: 0,
        detail: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::norm;

    fn small_cfg() -> WorldConfig {
        WorldConfig {
            n_identities: 6,
            n_cameras: 3,
            samples_per_identity: 4,
            raw_dim: 8,
            cameras_per_identity: 2,
            n_distractors: 0,
            seed: 9,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = generate_world(&small_cfg()).unwrap();
        let b = generate_world(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let mut other = small_cfg();
        other.seed = 10;
        let c = generate_world(&other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn world_counts_and_pools() {
        let cfg = small_cfg();
        let ds = generate_world(&cfg).unwrap();
        assert_eq!(ds.source.len(), 24);
        assert_eq!(ds.target.len(), 24);
        for s in &ds.source {
            assert!(s.identity.unwrap() < cfg.n_identities);
            assert!(s.camera < cfg.n_cameras);
        }
        for s in &ds.target {
            let id = s.identity.unwrap();
            assert!((cfg.n_identities..2 * cfg.n_identities).contains(&id));
        }
        // Each identity observed by exactly cameras_per_identity cameras.
        let mut cams: BTreeMap<usize, std::collections::BTreeSet<usize>> = BTreeMap::new();
        for s in ds.source.iter().chain(&ds.target) {
            cams.entry(s.identity.unwrap()).or_default().insert(s.camera);
        }
        for set in cams.values() {
            assert_eq!(set.len(), cfg.cameras_per_identity);
        }
    }

    #[test]
    fn rejects_more_cameras_per_identity_than_cameras() {
        let cfg = WorldConfig {
            cameras_per_identity: 5,
            n_cameras: 4,
            ..WorldConfig::default()
        };
        assert!(generate_world(&cfg).is_err());
    }

    #[test]
    fn same_identity_same_camera_differ_only_by_noise() {
        let mut cfg = small_cfg();
        cfg.noise_sigma = 0.0;
        let ds = generate_world(&cfg).unwrap();
        // With zero noise, same identity + same camera collapses to a point.
        for a in &ds.target {
            for b in &ds.target {
                if a.identity == b.identity && a.camera == b.camera {
                    let d: f64 = a
                        .features
                        .as_slice()
                        .iter()
                        .zip(b.features.as_slice())
                        .map(|(x, y)| (x - y).abs())
                        .sum();
                    assert!(d < 1e-12);
                }
            }
        }
    }

    #[test]
    fn variant_distance_concentrates_at_sigma_sqrt_dim() {
        let x = Vec64::zeros(32);
        let mut total = 0.0;
        let n = 500;
        for s in 0..n {
            let v = make_variant(&x, 0.1, s as u64).unwrap();
            total += norm(v.as_slice());
        }
        let mean = total / n as f64;
        let expect = 0.1 * (32f64).sqrt();
        assert!(
            (mean - expect).abs() < 0.03,
            "mean {} vs expected {}",
            mean,
            expect
        );
    }

    #[test]
    fn variant_is_deterministic_in_seed() {
        let x = Vec64::new(vec![0.5; 6]).unwrap();
        let a = make_variant(&x, 0.2, 7).unwrap();
        let b = make_variant(&x, 0.2, 7).unwrap();
        let c = make_variant(&x, 0.2, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_sigma_variant_is_identity() {
        let x = Vec64::new(vec![1.0, -2.0, 3.0]).unwrap();
        let v = make_variant(&x, 0.0, 3).unwrap();
        assert_eq!(x, v);
    }

    #[test]
    fn split_respects_fraction_edges() {
        let ds = generate_world(&small_cfg()).unwrap();
        let (q0, g0) = split_query_gallery(&ds.target, 0.0, 1).unwrap();
        assert!(q0.is_empty());
        assert_eq!(g0.len(), ds.target.len());
        // fraction 1 still leaves at least one camera per identity out.
        let (q1, g1) = split_query_gallery(&ds.target, 1.0, 1).unwrap();
        assert_eq!(q1.len() + g1.len(), ds.target.len());
        for &q in &q1 {
            let qs = &ds.target[q];
            assert!(g1
                .iter()
                .any(|&g| ds.target[g].identity == qs.identity
                    && ds.target[g].camera != qs.camera));
        }
    }

    #[test]
    fn single_camera_identity_never_queries() {
        // One identity, one camera: the whole identity must fall to gallery.
        let cfg = WorldConfig {
            n_identities: 1,
            n_cameras: 2,
            cameras_per_identity: 1,
            samples_per_identity: 3,
            raw_dim: 4,
            n_distractors: 0,
            ..WorldConfig::default()
        };
        let ds = generate_world(&cfg).unwrap();
        assert!(ds.query.is_empty());
        assert_eq!(ds.gallery.len(), 3);
    }

    #[test]
    fn default_world_split_sizes() {
        let ds = generate_world(&WorldConfig::default()).unwrap();
        assert_eq!(ds.target.len(), 440);
        // 4 cameras per identity, fraction 0.5: two query images per
        // identity; the 40 distractors all land in the gallery.
        assert_eq!(ds.query.len(), 100);
        assert_eq!(ds.gallery.len(), 340);
        ds.validate().unwrap();
    }

    #[test]
    fn distractors_are_unique_gallery_only_identities() {
        let mut cfg = small_cfg();
        cfg.n_distractors = 5;
        let ds = generate_world(&cfg).unwrap();
        assert_eq!(ds.target.len(), 6 * 4 + 5);
        let ids = ds.target_identities().unwrap();
        // Distractor ids sit beyond both identity pools and never repeat.
        let distractor_ids: Vec<usize> =
            ids.iter().copied().filter(|&i| i >= 2 * cfg.n_identities).collect();
        assert_eq!(distractor_ids.len(), 5);
        let unique: std::collections::BTreeSet<usize> =
            distractor_ids.iter().copied().collect();
        assert_eq!(unique.len(), 5);
        for &q in &ds.query {
            assert!(ids[q] < 2 * cfg.n_identities);
        }
        ds.validate().unwrap();
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_world(&small_cfg()).unwrap();
        export_dataset(&ds, dir.path(), Some(9)).unwrap();
        let back = import_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn import_rejects_truncated_csv() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_world(&small_cfg()).unwrap();
        export_dataset(&ds, dir.path(), None).unwrap();
        let csv_path = dir.path().join("dataset.csv");
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let keep: Vec<&str> = text.lines().take(10).collect();
        std::fs::write(&csv_path, keep.join("\n")).unwrap();
        assert!(import_dataset(dir.path()).is_err());
    }
}
