//! Pipeline configuration: defaults, validation, file loading, hashing.
//!
//! Configs load from flat `key=value` files (world parameters under a
//! `world.` prefix) or from JSON; unknown keys are errors in both formats
//! so typos cannot silently fall back to defaults.

use crate::error::{AnlError, Result};
use crate::world::WorldConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub world: WorldConfig,

    // Distribution alignment.
    pub alignment_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Contrastive softmax temperature.
    pub temperature: f64,
    /// Memory-cell retention in the moving average.
    pub bank_update_rate: f64,
    /// Nearest same-camera neighbors mined per sample.
    pub intra_neighbors: usize,
    /// Nearest other-camera neighbors mined per sample.
    pub cross_neighbors: usize,
    /// Reuse the first epoch's target variants every alignment epoch.
    pub freeze_variants: bool,

    // Pseudo-label clustering.
    /// Quantile of pairwise distances that sets the clustering radius.
    pub cluster_quantile: f64,
    pub min_pts: usize,

    // Label correction.
    pub correction_enabled: bool,
    /// Main epochs between correction rounds.
    pub correction_period: usize,
    /// Clean samples seeded per cluster.
    pub clean_per_cluster: usize,
    /// Confidence an unlabeled sample must exceed to join the clean set.
    pub confidence_threshold: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Initial label-logit magnitude.
    pub soft_label_scale: f64,
    /// Weight anchoring learned labels to their cluster label.
    pub anchor_weight: f64,
    /// Weight of the entropy sharpening term.
    pub entropy_weight: f64,
    /// Step size for label logits.
    pub label_learning_rate: f64,
    /// Swap the KL direction in the correction loss.
    pub kl_reversed: bool,

    // Main training.
    pub main_epochs: usize,
    /// Pseudo-identities per batch.
    pub p_identities: usize,
    /// Samples per pseudo-identity per batch.
    pub k_samples: usize,
    /// Outlier instances appended to each batch (with their variants).
    pub outliers_per_batch: usize,
    /// Include outlier instances in the triplet term at all.
    pub instance_terms: bool,
    pub triplet_margin: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            world: WorldConfig::default(),
            alignment_epochs: 10,
            batch_size: 64,
            learning_rate: 0.00035,
            temperature: 0.05,
            bank_update_rate: 0.2,
            intra_neighbors: 2,
            cross_neighbors: 4,
            freeze_variants: false,
            cluster_quantile: 1.6e-4,
            min_pts: 4,
            correction_enabled: true,
            correction_period: 5,
            clean_per_cluster: 12,
            confidence_threshold: 0.9,
            stage1_epochs: 10,
            stage2_epochs: 10,
            soft_label_scale: 10.0,
            anchor_weight: 0.1,
            entropy_weight: 0.1,
            label_learning_rate: 100.0 * 0.00035,
            kl_reversed: false,
            main_epochs: 40,
            p_identities: 8,
            k_samples: 4,
            outliers_per_batch: 8,
            instance_terms: true,
            triplet_margin: 0.3,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let positive_counts = [
            ("batch_size", self.batch_size),
            ("min_pts", self.min_pts),
            ("correction_period", self.correction_period),
            ("clean_per_cluster", self.clean_per_cluster),
            ("p_identities", self.p_identities),
            ("k_samples", self.k_samples),
        ];
        for (name, v) in positive_counts {
            if v == 0 {
                return Err(AnlError::Config(format!("{} must be positive", name)));
            }
        }
        let positive_reals = [
            ("learning_rate", self.learning_rate),
            ("temperature", self.temperature),
            ("soft_label_scale", self.soft_label_scale),
            ("label_learning_rate", self.label_learning_rate),
        ];
        for (name, v) in positive_reals {
            if !(v > 0.0) || !v.is_finite() {
                return Err(AnlError::Config(format!("{} must be positive", name)));
            }
        }
        if !(self.cluster_quantile > 0.0 && self.cluster_quantile < 1.0) {
            return Err(AnlError::Config(
                "cluster_quantile must lie strictly inside (0, 1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.bank_update_rate) {
            return Err(AnlError::Config("bank_update_rate must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(AnlError::Config(
                "confidence_threshold must lie in [0, 1]".into(),
            ));
        }
        let non_negative = [
            ("anchor_weight", self.anchor_weight),
            ("entropy_weight", self.entropy_weight),
            ("triplet_margin", self.triplet_margin),
        ];
        for (name, v) in non_negative {
            if v < 0.0 || !v.is_finite() {
                return Err(AnlError::Config(format!("{} must be non-negative", name)));
            }
        }
        Ok(())
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON encoding;
    /// names run directories and ties artifacts to the exact settings.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        let mut out = String::with_capacity(12);
        for byte in digest.iter().take(6) {
            out.push_str(&format!("{:02x}", byte));
        }
        out
    }
}

/// Parse one `key=value` scalar into a JSON value: booleans and numbers
/// pass through, anything else is rejected (no config field is a string).
fn parse_scalar(key: &str, raw: &str, line: usize) -> Result<serde_json::Value> {
    let trimmed = raw.trim();
    match serde_json::from_str::<serde_json::Value>(trimmed) {
        Ok(v) if v.is_boolean() || v.is_number() => Ok(v),
        _ => Err(AnlError::Config(format!(
            "line {}: value {:?} for key {:?} is not a number or boolean",
            line, trimmed, key
        ))),
    }
}

/// Parse the flat `key=value` format: one pair per line, `#` comments,
/// world parameters spelled `world.<field>`. Unknown keys and malformed
/// values are errors.
pub fn parse_flat_config(text: &str) -> Result<PipelineConfig> {
    let mut top = serde_json::Map::new();
    let mut world = serde_json::Map::new();
    for (lineno, raw_line) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(AnlError::Config(format!(
                "line {}: expected key=value, got {:?}",
                line, content
            )));
        };
        let key = key.trim();
        let scalar = parse_scalar(key, value, line)?;
        if let Some(field) = key.strip_prefix("world.") {
            if world.insert(field.to_string(), scalar).is_some() {
                return Err(AnlError::Config(format!(
                    "line {}: key {:?} set twice",
                    line, key
                )));
            }
        } else if top.insert(key.to_string(), scalar).is_some() {
            return Err(AnlError::Config(format!(
                "line {}: key {:?} set twice",
                line, key
            )));
        }
    }
    if !world.is_empty() {
        top.insert("world".into(), serde_json::Value::Object(world));
    }
    let cfg: PipelineConfig = serde_json::from_value(serde_json::Value::Object(top))
        .map_err(|e| AnlError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load a config file, JSON when the extension is `.json`, flat
/// `key=value` otherwise.
pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| AnlError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| AnlError::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    } else {
        parse_flat_config(&text)
    }
}

pub fn save_config(cfg: &PipelineConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(cfg).map_err(|e| AnlError::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| AnlError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_pinned() {
        let c = PipelineConfig::default();
        assert_eq!(c.alignment_epochs, 10);
        assert_eq!(c.main_epochs, 40);
        assert_eq!(c.correction_period, 5);
        assert_eq!(c.cluster_quantile, 1.6e-4);
        assert_eq!(c.temperature, 0.05);
        assert_eq!(c.bank_update_rate, 0.2);
        assert_eq!(c.cross_neighbors, 4);
        assert_eq!(c.intra_neighbors, c.cross_neighbors / 2);
        assert_eq!(c.clean_per_cluster, 12);
        assert_eq!(c.confidence_threshold, 0.9);
        assert_eq!(c.soft_label_scale, 10.0);
        assert_eq!(c.anchor_weight, 0.1);
        assert_eq!(c.entropy_weight, 0.1);
        assert_eq!(c.label_learning_rate, 100.0 * c.learning_rate);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.learning_rate, 0.00035);
        assert_eq!(c.p_identities * c.k_samples, 32);
        c.validate().unwrap();
    }

    #[test]
    fn flat_format_overrides_and_nests() {
        let text = "\
# comment line
seed = 7
temperature=0.5   # trailing comment
instance_terms = false
world.n_identities = 12
world.noise_sigma = 0.05
";
        let cfg = parse_flat_config(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.temperature, 0.5);
        assert!(!cfg.instance_terms);
        assert_eq!(cfg.world.n_identities, 12);
        assert_eq!(cfg.world.noise_sigma, 0.05);
        // Untouched fields keep their defaults.
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.world.n_cameras, 4);
    }

    #[test]
    fn flat_format_rejects_unknown_and_malformed() {
        let unknown = parse_flat_config("tempreature = 0.5\n");
        let msg = format!("{}", unknown.unwrap_err());
        assert!(msg.contains("tempreature"), "{}", msg);

        let unknown_world = parse_flat_config("world.n_ids = 3\n");
        assert!(format!("{}", unknown_world.unwrap_err()).contains("n_ids"));

        let no_eq = parse_flat_config("seed\n");
        assert!(format!("{}", no_eq.unwrap_err()).contains("line 1"));

        let bad_value = parse_flat_config("seed = forty\n");
        assert!(format!("{}", bad_value.unwrap_err()).contains("line 1"));

        let dup = parse_flat_config("seed = 1\nseed = 2\n");
        assert!(format!("{}", dup.unwrap_err()).contains("twice"));

        let out_of_range = parse_flat_config("cluster_quantile = 2.0\n");
        assert!(out_of_range.is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let mut cfg = PipelineConfig::default();
        cfg.seed = 99;
        cfg.world.raw_dim = 16;
        save_config(&cfg, &path).unwrap();
        assert_eq!(load_config(&path).unwrap(), cfg);

        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{\"tau\": 0.05}").unwrap();
        assert!(load_config(&bad).is_err());
    }

    #[test]
    fn flat_file_loads_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed = 5\n").unwrap();
        assert_eq!(load_config(&path).unwrap().seed, 5);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = PipelineConfig::default();
        let b = PipelineConfig::default();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
        assert!(a.hash().chars().all(|c| c.is_ascii_hexdigit()));
        let mut c = PipelineConfig::default();
        c.temperature = 0.051;
        assert_ne!(a.hash(), c.hash());
        // The seed participates too: same settings, different seed, new dir.
        let mut d = PipelineConfig::default();
        d.seed = 43;
        assert_ne!(a.hash(), d.hash());
    }

    #[test]
    fn validation_rejects_out_of_range() {
        let mut c = PipelineConfig::default();
        c.bank_update_rate = 1.2;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.min_pts = 0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.world.cameras_per_identity = 99;
        assert!(c.validate().is_err());
    }
}
