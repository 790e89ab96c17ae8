//! Main-model training and end-to-end pipeline orchestration.
//!
//! The main model trains on reliable pseudo-labeled samples with
//! cross-entropy plus batch-hard triplet loss; unclustered or rejected
//! samples join each batch as their own single-instance identities, each
//! paired with a perturbed variant that serves as its only positive. The
//! pipeline alternates: align distributions once, then loop main epochs
//! with a re-clustering and label-correction round at a fixed period.

use crate::cluster::{dbscan, select_eps, ClusterAssignment};
use crate::config::PipelineConfig;
use crate::error::{AnlError, Result};
use crate::eval::{
    assignment_f_value, cmc_map, pairwise_f_value, FEntry, LossTraces, MetricsReport,
    RetrievalMeta, RoundSummary, StageMetrics,
};
use crate::fda::{fda_train, standard_modules, train_source_only, FdaOptions, MemoryBank};
use crate::math::{normalize_rows_grad, pairwise_distance, Mat64, Metric};
use crate::nn::{adam_step, cross_entropy_loss_grad, AdamState, DenseNet};
use crate::par;
use crate::rng::{component_rng, stream};
use crate::rss::{run_rss_round, RssOptions, RssTraceRow};
use crate::world::{generate_world, perturb_rows, Dataset};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// How a row of a triplet batch participates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Pseudo-labeled sample; positives share the label.
    Labeled(usize),
    /// Single-instance sample; its only positive is the row at `variant`.
    Outlier { variant: usize },
    /// Perturbed copy of an outlier; never an anchor and never a negative.
    Variant,
}

/// Batch-hard triplet loss: per anchor, hinge on (hardest-positive
/// distance − hardest-negative distance + margin), averaged over anchors
/// that have both a positive and a negative (others are excluded with a
/// warning). Labeled anchors take same-label rows as positives and
/// other-label plus outlier rows as negatives; outlier anchors take
/// exactly their variant as positive and all labeled and other outlier
/// rows as negatives. Returns (loss, gradient, counted anchors).
pub fn batch_hard_triplet_loss_grad(
    features: &Mat64,
    roles: &[Role],
    margin: f64,
) -> Result<(f64, Mat64, usize)> {
    let n = features.rows();
    if roles.len() != n {
        return Err(AnlError::dim("batch_hard_triplet_loss_grad", "roles vs rows"));
    }
    if !margin.is_finite() || margin < 0.0 {
        return Err(AnlError::domain(
            "batch_hard_triplet_loss_grad",
            "margin must be non-negative",
        ));
    }
    for (i, r) in roles.iter().enumerate() {
        if let Role::Outlier { variant } = r {
            if *variant >= n || *variant == i {
                return Err(AnlError::domain(
                    "batch_hard_triplet_loss_grad",
                    format!("outlier {} points at invalid variant {}", i, variant),
                ));
            }
            if roles[*variant] != Role::Variant {
                return Err(AnlError::domain(
                    "batch_hard_triplet_loss_grad",
                    format!("row {} is not a variant", variant),
                ));
            }
        }
    }
    let dist = |a: usize, b: usize| -> f64 {
        features
            .row(a)
            .iter()
            .zip(features.row(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    // Per anchor: the active triplet (positive, negative, hinge value), or
    // None when the anchor lacks a positive or negative.
    let picks: Vec<Option<(usize, usize, f64)>> = par::map_indexed(n, |a| {
        let (positives, negatives): (Vec<usize>, Vec<usize>) = match roles[a] {
            Role::Variant => return None,
            Role::Labeled(la) => {
                let mut pos = Vec::new();
                let mut neg = Vec::new();
                for (j, r) in roles.iter().enumerate() {
                    if j == a {
                        continue;
                    }
                    match r {
                        Role::Labeled(lj) if *lj == la => pos.push(j),
                        Role::Labeled(_) => neg.push(j),
                        Role::Outlier { .. } => neg.push(j),
                        Role::Variant => {}
                    }
                }
                (pos, neg)
            }
            Role::Outlier { variant } => {
                let mut neg = Vec::new();
                for (j, r) in roles.iter().enumerate() {
                    if j == a {
                        continue;
                    }
                    match r {
                        Role::Labeled(_) => neg.push(j),
                        Role::Outlier { .. } => neg.push(j),
                        Role::Variant => {}
                    }
                }
                (vec![variant], neg)
            }
        };
        if positives.is_empty() || negatives.is_empty() {
            log::warn!(
                "triplet anchor {} has {} positives and {} negatives; excluded",
                a,
                positives.len(),
                negatives.len()
            );
            return None;
        }
        let mut hardest_pos = positives[0];
        let mut d_ap = dist(a, hardest_pos);
        for &p in &positives[1..] {
            let d = dist(a, p);
            if d > d_ap {
                d_ap = d;
                hardest_pos = p;
            }
        }
        let mut hardest_neg = negatives[0];
        let mut d_an = dist(a, hardest_neg);
        for &g in &negatives[1..] {
            let d = dist(a, g);
            if d < d_an {
                d_an = d;
                hardest_neg = g;
            }
        }
        Some((hardest_pos, hardest_neg, d_ap - d_an + margin))
    });

    let counted = picks.iter().flatten().count();
    let mut grad = Mat64::zeros(n, features.cols());
    if counted == 0 {
        log::warn!("triplet batch has no usable anchors; zero loss");
        return Ok((0.0, grad, 0));
    }
    let scale = 1.0 / counted as f64;
    let mut loss = 0.0;
    // Accumulate pulls in anchor order so the result is independent of
    // the parallel evaluation above.
    let add_pull = |grad: &mut Mat64, from: usize, to: usize, w: f64| {
        let d = dist(from, to);
        if d <= 0.0 {
            return; // coincident points: flat direction, zero subgradient
        }
        for k in 0..features.cols() {
            let g = w * (features.get(from, k) - features.get(to, k)) / d;
            grad.set(from, k, grad.get(from, k) + g);
            grad.set(to, k, grad.get(to, k) - g);
        }
    };
    for (a, pick) in picks.iter().enumerate() {
        let Some((p, ng, hinge)) = pick else { continue };
        if *hinge > 0.0 {
            loss += hinge * scale;
            // d loss / d d_ap = +1, d loss / d d_an = -1.
            add_pull(&mut grad, a, *p, scale);
            add_pull(&mut grad, a, *ng, -scale);
        }
    }
    Ok((loss, grad, counted))
}

/// Mean losses of one main-training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MainTraceRow {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_triplet: f64,
    pub n_reliable: usize,
    pub n_outliers: usize,
}

impl MainTraceRow {
    pub fn idle(epoch: usize) -> Self {
        MainTraceRow {
            epoch,
            l_ce: 0.0,
            l_triplet: 0.0,
            n_reliable: 0,
            n_outliers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainEpochOptions {
    pub p_identities: usize,
    pub k_samples: usize,
    /// Outlier instances appended per batch, each with a variant.
    pub outliers_per_batch: usize,
    /// When false, outliers are left out of the batches entirely.
    pub instance_terms: bool,
    pub triplet_margin: f64,
    pub variant_sigma: f64,
    pub seed: u64,
}

/// One epoch over the reliable set (cross-entropy + triplet) with outlier
/// instances mixed into each batch through the triplet term only. With an
/// empty reliable set the epoch is skipped with a warning.
#[allow(clippy::too_many_arguments)]
pub fn main_epoch(
    encoder: &mut DenseNet,
    head: &mut DenseNet,
    enc_state: &mut AdamState,
    head_state: &mut AdamState,
    target_x: &Mat64,
    reliable: &[(usize, usize)],
    outliers: &[usize],
    opts: &MainEpochOptions,
    epoch: usize,
) -> Result<MainTraceRow> {
    if reliable.is_empty() {
        log::warn!("epoch {}: no reliable samples; skipping", epoch);
        return Ok(MainTraceRow::idle(epoch));
    }
    if opts.p_identities == 0 || opts.k_samples == 0 {
        return Err(AnlError::Config(
            "p_identities and k_samples must be positive".into(),
        ));
    }
    let n_classes = head.output_dim();
    if let Some(&(i, bad)) = reliable.iter().find(|&&(_, l)| l >= n_classes) {
        return Err(AnlError::domain(
            "main_epoch",
            format!("sample {} label {} outside head width {}", i, bad, n_classes),
        ));
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> =
        std::collections::BTreeMap::new();
    for &(i, l) in reliable {
        groups.entry(l).or_default().push(i);
    }
    let mut rng = component_rng(opts.seed, stream::MAIN_BATCH + epoch as u64);
    let mut variant_rng = component_rng(opts.seed, stream::MAIN_VARIANT + epoch as u64);
    let use_outliers = opts.instance_terms && !outliers.is_empty();
    let mut outlier_order: Vec<usize> = outliers.to_vec();
    let mut outlier_cursor = 0usize;
    if use_outliers {
        outlier_order.shuffle(&mut rng);
    }

    let mut cluster_order: Vec<usize> = groups.keys().copied().collect();
    cluster_order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let batch_labeled = opts.p_identities * opts.k_samples;
    let n_batches = reliable.len().div_ceil(batch_labeled).max(1);

    let mut sum_ce = 0.0;
    let mut sum_tri = 0.0;
    for _ in 0..n_batches {
        let mut labeled_idx = Vec::with_capacity(batch_labeled);
        let mut labels = Vec::with_capacity(batch_labeled);
        for _ in 0..opts.p_identities.min(cluster_order.len()) {
            if cursor == cluster_order.len() {
                cluster_order.shuffle(&mut rng);
                cursor = 0;
            }
            let c = cluster_order[cursor];
            cursor += 1;
            let pool = &groups[&c];
            let draws: Vec<usize> = if pool.len() >= opts.k_samples {
                rand::seq::index::sample(&mut rng, pool.len(), opts.k_samples)
                    .into_iter()
                    .map(|p| pool[p])
                    .collect()
            } else {
                use rand::Rng;
                (0..opts.k_samples)
                    .map(|_| pool[rng.random_range(0..pool.len())])
                    .collect()
            };
            for i in draws {
                labeled_idx.push(i);
                labels.push(c);
            }
        }
        let mut batch_out = Vec::new();
        if use_outliers {
            for _ in 0..opts.outliers_per_batch.min(outlier_order.len()) {
                if outlier_cursor == outlier_order.len() {
                    outlier_order.shuffle(&mut rng);
                    outlier_cursor = 0;
                }
                batch_out.push(outlier_order[outlier_cursor]);
                outlier_cursor += 1;
            }
        }

        // Assemble [labeled | outliers | variants] and the roles that give
        // each row its triplet behavior.
        let n_lab = labeled_idx.len();
        let n_out = batch_out.len();
        let labeled_rows = target_x.select_rows(&labeled_idx)?;
        let mut x = Mat64::zeros(n_lab + 2 * n_out, target_x.cols());
        for r in 0..n_lab {
            x.set_row(r, labeled_rows.row(r))?;
        }
        if n_out > 0 {
            let outlier_rows = target_x.select_rows(&batch_out)?;
            let variant_rows =
                perturb_rows(&outlier_rows, opts.variant_sigma, &mut variant_rng)?;
            for r in 0..n_out {
                x.set_row(n_lab + r, outlier_rows.row(r))?;
                x.set_row(n_lab + n_out + r, variant_rows.row(r))?;
            }
        }
        let mut roles: Vec<Role> = labels.iter().map(|&l| Role::Labeled(l)).collect();
        for r in 0..n_out {
            roles.push(Role::Outlier {
                variant: n_lab + n_out + r,
            });
        }
        roles.extend(std::iter::repeat_n(Role::Variant, n_out));

        let (emb, cache) = encoder.forward(&x)?;
        let unit = emb.normalized_rows()?;
        let (l_tri, d_unit, _) = batch_hard_triplet_loss_grad(&unit, &roles, opts.triplet_margin)?;
        let d_emb_tri = normalize_rows_grad(&emb, &d_unit)?;

        // Cross-entropy sees only the labeled rows; outliers contribute no
        // classification term.
        let lab_rows: Vec<usize> = (0..n_lab).collect();
        let emb_lab = emb.select_rows(&lab_rows)?;
        let (logits, head_cache) = head.forward(&emb_lab)?;
        let (l_ce, d_logits) = cross_entropy_loss_grad(&logits, &labels)?;
        let head_tape = head.backward(&head_cache, &d_logits)?;
        let mut d_emb = d_emb_tri;
        for r in 0..n_lab {
            let combined: Vec<f64> = d_emb
                .row(r)
                .iter()
                .zip(head_tape.d_input.row(r))
                .map(|(a, b)| a + b)
                .collect();
            d_emb.set_row(r, &combined)?;
        }
        let enc_tape = encoder.backward(&cache, &d_emb)?;
        adam_step(encoder, &enc_tape, enc_state)?;
        adam_step(head, &head_tape, head_state)?;
        sum_ce += l_ce;
        sum_tri += l_tri;
    }
    Ok(MainTraceRow {
        epoch,
        l_ce: sum_ce / n_batches as f64,
        l_triplet: sum_tri / n_batches as f64,
        n_reliable: reliable.len(),
        n_outliers: if use_outliers { outliers.len() } else { 0 },
    })
}

/// Everything a finished pipeline hands back besides the report.
pub struct PipelineOutcome {
    pub report: MetricsReport,
    pub dataset: Dataset,
    pub encoder: DenseNet,
    pub head: Option<DenseNet>,
    pub bank: MemoryBank,
    pub assignment: Option<ClusterAssignment>,
}

fn retrieval_metrics(unit_embeddings: &Mat64, ds: &Dataset) -> Result<(Vec<f64>, f64)> {
    let ids = ds.target_identities()?;
    let cams = ds.target_cameras();
    let meta_of = |idx: &[usize]| -> Vec<RetrievalMeta> {
        idx.iter()
            .map(|&i| RetrievalMeta {
                identity: ids[i],
                camera: cams[i],
            })
            .collect()
    };
    let q = unit_embeddings.select_rows(&ds.query)?;
    let g = unit_embeddings.select_rows(&ds.gallery)?;
    cmc_map(&q, &meta_of(&ds.query), &g, &meta_of(&ds.gallery))
}

/// Run the full method end to end on a synthetic world and report every
/// stage's metrics and traces. Deterministic in the config (including its
/// seeds): identical configs produce identical reports.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let ds = generate_world(&cfg.world).map_err(|e| e.in_stage("world"))?;
    let source_x = ds.source_features();
    let (source_labels, n_source_classes) = ds.source_labels()?;
    let target_x = ds.target_features();
    let target_cams = ds.target_cameras();
    let target_ids = ds.target_identities()?;
    let n_targets = target_x.rows();

    let mut stages = Vec::new();
    let mut f_trace: Vec<FEntry> = Vec::new();
    let mut rounds: Vec<RoundSummary> = Vec::new();
    let mut correction_trace: Vec<RssTraceRow> = Vec::new();
    let mut main_trace: Vec<MainTraceRow> = Vec::new();

    let mut modules = standard_modules(ds.raw_dim, n_source_classes, cfg.seed)
        .map_err(|e| e.in_stage("alignment"))?;

    // Direct transfer: the same initialization trained on source labels
    // alone, evaluated on the target — the floor alignment must beat.
    {
        let mut enc = modules.encoder.clone();
        let mut head = modules.source_head.clone();
        train_source_only(
            &mut enc,
            &mut head,
            &source_x,
            &source_labels,
            cfg.alignment_epochs,
            cfg.batch_size,
            cfg.learning_rate,
            cfg.seed,
        )
        .map_err(|e| e.in_stage("direct"))?;
        let unit = enc.infer(&target_x)?.normalized_rows()?;
        let (cmc, map) = retrieval_metrics(&unit, &ds).map_err(|e| e.in_stage("direct"))?;
        stages.push(StageMetrics {
            stage: "direct".into(),
            cmc,
            map,
        });
    }

    let fda_opts = FdaOptions {
        epochs: cfg.alignment_epochs,
        batch_size: cfg.batch_size,
        temperature: cfg.temperature,
        bank_update_rate: cfg.bank_update_rate,
        intra_neighbors: cfg.intra_neighbors,
        cross_neighbors: cfg.cross_neighbors,
        learning_rate: cfg.learning_rate,
        variant_sigma: cfg.world.variant_sigma,
        freeze_variants: cfg.freeze_variants,
        seed: cfg.seed,
    };
    let fda_out = fda_train(
        &mut modules,
        &source_x,
        &source_labels,
        &target_x,
        &target_cams,
        &fda_opts,
    )
    .map_err(|e| e.in_stage("alignment"))?;
    {
        let unit = modules.encoder.infer(&target_x)?.normalized_rows()?;
        let (cmc, map) = retrieval_metrics(&unit, &ds).map_err(|e| e.in_stage("alignment"))?;
        stages.push(StageMetrics {
            stage: "alignment".into(),
            cmc,
            map,
        });
    }

    let mut encoder = modules.encoder;
    let mut head: Option<DenseNet> = None;
    let mut head_state = AdamState::new(0, cfg.learning_rate);
    let mut enc_state = AdamState::new(encoder.param_count(), cfg.learning_rate);
    let mut reliable: Vec<(usize, usize)> = Vec::new();
    let mut outliers: Vec<usize> = (0..n_targets).collect();
    let mut last_assignment: Option<ClusterAssignment> = None;

    let epoch_opts = MainEpochOptions {
        p_identities: cfg.p_identities,
        k_samples: cfg.k_samples,
        outliers_per_batch: cfg.outliers_per_batch,
        instance_terms: cfg.instance_terms,
        triplet_margin: cfg.triplet_margin,
        variant_sigma: cfg.world.variant_sigma,
        seed: cfg.seed,
    };

    for epoch in 0..cfg.main_epochs {
        if epoch % cfg.correction_period == 0 {
            let round = epoch / cfg.correction_period;
            let unit = encoder.infer(&target_x)?.normalized_rows()?;
            let dist = pairwise_distance(&unit, Metric::CosineDist)
                .map_err(|e| e.in_stage("clustering"))?;
            let eps =
                select_eps(&dist, cfg.cluster_quantile).map_err(|e| e.in_stage("clustering"))?;
            let assignment =
                dbscan(&dist, eps, cfg.min_pts).map_err(|e| e.in_stage("clustering"))?;
            let cluster_f = assignment_f_value(&assignment, &target_ids)?;
            f_trace.push(FEntry::new(format!("round{}/cluster", round), cluster_f));

            let n_rejected;
            if assignment.n_clusters() == 0 {
                log::warn!(
                    "round {}: clustering produced no clusters; correction skipped",
                    round
                );
                reliable = Vec::new();
                outliers = (0..n_targets).collect();
                n_rejected = 0;
            } else if cfg.correction_enabled {
                let rss_opts = RssOptions {
                    clean_per_cluster: cfg.clean_per_cluster,
                    confidence_threshold: cfg.confidence_threshold,
                    stage1_epochs: cfg.stage1_epochs,
                    stage2_epochs: cfg.stage2_epochs,
                    soft_label_scale: cfg.soft_label_scale,
                    anchor_weight: cfg.anchor_weight,
                    entropy_weight: cfg.entropy_weight,
                    label_learning_rate: cfg.label_learning_rate,
                    learning_rate: cfg.learning_rate,
                    p_identities: cfg.p_identities,
                    k_samples: cfg.k_samples,
                    triplet_margin: cfg.triplet_margin,
                    kl_reversed: cfg.kl_reversed,
                    round,
                    seed: cfg.seed,
                };
                let rss_out = run_rss_round(&encoder, &target_x, &unit, &assignment, &rss_opts)
                    .map_err(|e| e.in_stage("correction"))?;
                correction_trace.extend(rss_out.trace);
                reliable = rss_out
                    .verdicts
                    .iter()
                    .filter(|v| v.kept)
                    .map(|v| (v.sample_index, v.cluster_label))
                    .collect();
                let rejected: Vec<usize> = rss_out
                    .verdicts
                    .iter()
                    .filter(|v| !v.kept)
                    .map(|v| v.sample_index)
                    .collect();
                n_rejected = rejected.len();
                outliers = assignment.outliers();
                outliers.extend(&rejected);
                outliers.sort_unstable();
                // Pseudo-labels after the reliability filter: kept samples
                // keep their cluster label, everything else drops out.
                let mut refined: Vec<Option<usize>> = vec![None; n_targets];
                for &(i, l) in &reliable {
                    refined[i] = Some(l);
                }
                let refined_f = pairwise_f_value(&refined, &target_ids)?;
                f_trace.push(FEntry::new(format!("round{}/refined", round), refined_f));
            } else {
                reliable = assignment
                    .labels()
                    .iter()
                    .enumerate()
                    .filter_map(|(i, l)| l.map(|c| (i, c)))
                    .collect();
                outliers = assignment.outliers();
                n_rejected = 0;
            }

            let n_unclustered = assignment.outliers().len();
            if reliable.len() + n_rejected + n_unclustered != n_targets {
                return Err(AnlError::domain(
                    "run_pipeline",
                    format!(
                        "round {} partition leak: {} reliable + {} rejected + {} unclustered != {}",
                        round,
                        reliable.len(),
                        n_rejected,
                        n_unclustered,
                        n_targets
                    ),
                ));
            }
            rounds.push(RoundSummary {
                round,
                epoch,
                eps,
                n_clusters: assignment.n_clusters(),
                n_reliable: reliable.len(),
                n_rejected,
                n_unclustered,
            });

            if assignment.n_clusters() > 0
                && head
                    .as_ref()
                    .map(|h| h.output_dim() != assignment.n_clusters())
                    .unwrap_or(true)
            {
                let new_head = DenseNet::new(
                    encoder.output_dim(),
                    &[(assignment.n_clusters(), crate::nn::Activation::Identity)],
                    &mut component_rng(cfg.seed, stream::INIT_MAIN_HEAD + round as u64),
                )?;
                head_state = AdamState::new(new_head.param_count(), cfg.learning_rate);
                head = Some(new_head);
            }
            last_assignment = Some(assignment);
        }

        let row = match head.as_mut() {
            Some(h) if !reliable.is_empty() => main_epoch(
                &mut encoder,
                h,
                &mut enc_state,
                &mut head_state,
                &target_x,
                &reliable,
                &outliers,
                &epoch_opts,
                epoch,
            )
            .map_err(|e| e.in_stage("training"))?,
            _ => {
                log::warn!("epoch {}: no labeled clusters yet; skipping", epoch);
                MainTraceRow::idle(epoch)
            }
        };
        main_trace.push(row);
    }

    let unit = encoder.infer(&target_x)?.normalized_rows()?;
    let (cmc, map) = retrieval_metrics(&unit, &ds).map_err(|e| e.in_stage("evaluation"))?;
    stages.push(StageMetrics {
        stage: "final".into(),
        cmc: cmc.clone(),
        map,
    });

    let report = MetricsReport {
        seed: cfg.seed,
        config: cfg.clone(),
        cmc,
        map,
        stages,
        f_trace,
        rounds,
        losses: LossTraces {
            alignment: fda_out.trace,
            correction: correction_trace,
            main: main_trace,
        },
    };
    report.validate()?;
    Ok(PipelineOutcome {
        report,
        dataset: ds,
        encoder,
        head,
        bank: fda_out.bank,
        assignment: last_assignment,
    })
}
