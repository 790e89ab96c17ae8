//! Pseudo-label correction with reliable-sample selection.
//!
//! Clustering the target domain produces noisy labels. Each correction
//! round trains an auxiliary classifier in two stages: first
//! semi-supervised warm-up on a small clean set near each cluster center
//! (confident unlabeled samples migrate in as training proceeds), then
//! joint optimization of the network and a per-sample soft label
//! distribution initialized from the cluster labels. Samples whose learned
//! label still agrees with their cluster label are kept as reliable; the
//! rest are rejected for the following training phase.

use crate::cluster::{centroids, ClusterAssignment};
use crate::error::{AnlError, Result};
use crate::math::{log_softmax, normalize_rows_grad, softmax, Mat64};
use crate::nn::{adam_step, cross_entropy_loss_grad, AdamState, DenseNet};
use crate::par;
use crate::rng::{component_rng, stream, SeededRng};
use crate::trainer::{batch_hard_triplet_loss_grad, Role};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Disjoint labeled/unlabeled partition of the target samples. The labeled
/// side only ever grows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSplit {
    labeled: Vec<(usize, usize)>,
    unlabeled: Vec<usize>,
}

impl SampleSplit {
    pub fn new(labeled: Vec<(usize, usize)>, unlabeled: Vec<usize>) -> Result<Self> {
        let mut split = SampleSplit { labeled, unlabeled };
        split.labeled.sort_by_key(|&(i, _)| i);
        split.unlabeled.sort_unstable();
        for w in split.labeled.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(AnlError::domain(
                    "SampleSplit::new",
                    format!("sample {} labeled twice", w[0].0),
                ));
            }
        }
        if split.unlabeled.windows(2).any(|w| w[0] == w[1]) {
            return Err(AnlError::domain("SampleSplit::new", "duplicate unlabeled sample"));
        }
        let labeled_set: std::collections::BTreeSet<usize> =
            split.labeled.iter().map(|&(i, _)| i).collect();
        if let Some(&both) = split.unlabeled.iter().find(|i| labeled_set.contains(i)) {
            return Err(AnlError::domain(
                "SampleSplit::new",
                format!("sample {} appears on both sides", both),
            ));
        }
        Ok(split)
    }

    pub fn labeled(&self) -> &[(usize, usize)] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    /// Move samples from the unlabeled to the labeled side. Every moved
    /// index must currently be unlabeled.
    pub fn migrate(&mut self, moves: &[(usize, usize)]) -> Result<()> {
        if moves.is_empty() {
            return Ok(());
        }
        let mut incoming: Vec<(usize, usize)> = moves.to_vec();
        incoming.sort_by_key(|&(i, _)| i);
        if incoming.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(AnlError::domain("SampleSplit::migrate", "duplicate move"));
        }
        for &(i, _) in &incoming {
            if self.unlabeled.binary_search(&i).is_err() {
                return Err(AnlError::domain(
                    "SampleSplit::migrate",
                    format!("sample {} is not unlabeled", i),
                ));
            }
        }
        self.unlabeled
            .retain(|i| incoming.binary_search_by_key(i, |&(j, _)| j).is_err());
        self.labeled.extend(incoming);
        self.labeled.sort_by_key(|&(i, _)| i);
        Ok(())
    }
}

/// Seed the labeled side with the `per_cluster` samples nearest each
/// cluster centroid (Euclidean over the given embeddings, ties toward the
/// smaller index). The remaining cluster members start unlabeled;
/// clustering outliers take no part in correction at all.
pub fn init_clean_set(
    embeddings: &Mat64,
    assignment: &ClusterAssignment,
    per_cluster: usize,
) -> Result<SampleSplit> {
    if embeddings.rows() != assignment.len() {
        return Err(AnlError::dim("init_clean_set", "embeddings vs assignment"));
    }
    if assignment.n_clusters() == 0 {
        return Err(AnlError::domain("init_clean_set", "no clusters to seed from"));
    }
    if per_cluster == 0 {
        return Err(AnlError::Config("per_cluster must be positive".into()));
    }
    let centers = centroids(embeddings, assignment)?;
    let mut labeled = Vec::new();
    let mut taken = vec![false; assignment.len()];
    for (c, members) in assignment.members().into_iter().enumerate() {
        let center = centers.row(c);
        let mut ranked: Vec<(f64, usize)> = members
            .iter()
            .map(|&i| {
                let d = embeddings
                    .row(i)
                    .iter()
                    .zip(center)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                (d, i)
            })
            .collect();
        ranked.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for &(_, i) in ranked.iter().take(per_cluster) {
            labeled.push((i, c));
            taken[i] = true;
        }
    }
    let unlabeled = assignment
        .labels()
        .iter()
        .enumerate()
        .filter(|(i, l)| l.is_some() && !taken[*i])
        .map(|(i, _)| i)
        .collect();
    SampleSplit::new(labeled, unlabeled)
}

/// Mean-entropy loss over the softmax of each row and its logit gradient;
/// minimizing it sharpens predictions on unlabeled samples.
pub fn entropy_loss_grad(logits: &Mat64) -> Result<(f64, Mat64)> {
    if logits.rows() == 0 {
        return Err(AnlError::dim("entropy_loss_grad", "empty batch"));
    }
    let b = logits.rows() as f64;
    let per_row: Vec<(f64, Vec<f64>)> = par::map_indexed(logits.rows(), |i| {
        let lz = log_softmax(logits.row(i));
        let z: Vec<f64> = lz.iter().map(|l| l.exp()).collect();
        let h: f64 = z.iter().zip(&lz).map(|(p, l)| -p * l).sum();
        let g: Vec<f64> = z
            .iter()
            .zip(&lz)
            .map(|(p, l)| -p * (l + h) / b)
            .collect();
        (h / b, g)
    });
    let mut loss = 0.0;
    let mut grad = Mat64::zeros(logits.rows(), logits.cols());
    for (i, (h, g)) in per_row.into_iter().enumerate() {
        loss += h;
        grad.set_row(i, &g)?;
    }
    Ok((loss, grad))
}

/// Learnable label distributions for the clustered samples: one row of
/// label logits per cluster member (ascending sample index), initialized
/// to `scale` times the one-hot cluster label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelMatrix {
    sample_indices: Vec<usize>,
    cluster_labels: Vec<usize>,
    logits: Mat64,
}

pub fn init_soft_labels(assignment: &ClusterAssignment, scale: f64) -> Result<SoftLabelMatrix> {
    if assignment.n_clusters() == 0 {
        return Err(AnlError::domain("init_soft_labels", "no clusters"));
    }
    if !scale.is_finite() || scale <= 0.0 {
        return Err(AnlError::Config("soft label scale must be positive".into()));
    }
    let mut sample_indices = Vec::new();
    let mut cluster_labels = Vec::new();
    for (i, l) in assignment.labels().iter().enumerate() {
        if let Some(c) = l {
            sample_indices.push(i);
            cluster_labels.push(*c);
        }
    }
    let mut logits = Mat64::zeros(sample_indices.len(), assignment.n_clusters());
    for (r, &c) in cluster_labels.iter().enumerate() {
        logits.set(r, c, scale);
    }
    Ok(SoftLabelMatrix {
        sample_indices,
        cluster_labels,
        logits,
    })
}

impl SoftLabelMatrix {
    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.logits.cols()
    }

    pub fn sample_indices(&self) -> &[usize] {
        &self.sample_indices
    }

    pub fn cluster_labels(&self) -> &[usize] {
        &self.cluster_labels
    }

    pub fn logits(&self) -> &Mat64 {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Mat64 {
        &mut self.logits
    }

    /// Plain gradient-descent step on the selected rows.
    pub fn sgd_rows(&mut self, rows: &[usize], grad: &Mat64, lr: f64) -> Result<()> {
        if grad.rows() != rows.len() || grad.cols() != self.logits.cols() {
            return Err(AnlError::dim("SoftLabelMatrix::sgd_rows", "gradient shape"));
        }
        for (r, &row) in rows.iter().enumerate() {
            if row >= self.len() {
                return Err(AnlError::dim(
                    "SoftLabelMatrix::sgd_rows",
                    format!("row {} of {}", row, self.len()),
                ));
            }
            let updated: Vec<f64> = self
                .logits
                .row(row)
                .iter()
                .zip(grad.row(r))
                .map(|(v, g)| v - lr * g)
                .collect();
            self.logits.set_row(row, &updated)?;
        }
        Ok(())
    }
}

/// Joint correction losses for one batch and their gradients.
///
/// `l_kl` measures divergence between the classifier posterior and the
/// learnable label distribution (direction controlled by `kl_reversed`),
/// `l_c` anchors the label distribution to the original cluster label,
/// `l_e` is the classifier entropy, and `l_rss` is their weighted sum.
/// The classifier logits receive `d(l_kl + entropy_weight * l_e)`, the
/// label logits `d(l_kl + anchor_weight * l_c)`; all terms are batch
/// means.
pub struct RssLossGrads {
    pub l_kl: f64,
    pub l_c: f64,
    pub l_e: f64,
    pub l_rss: f64,
    pub d_class: Mat64,
    pub d_label: Mat64,
}

pub fn rss_losses(
    class_logits: &Mat64,
    label_logits: &Mat64,
    hard_labels: &[usize],
    anchor_weight: f64,
    entropy_weight: f64,
    kl_reversed: bool,
) -> Result<RssLossGrads> {
    let b = class_logits.rows();
    let c = class_logits.cols();
    if b == 0 {
        return Err(AnlError::dim("rss_losses", "empty batch"));
    }
    if label_logits.rows() != b || label_logits.cols() != c || hard_labels.len() != b {
        return Err(AnlError::dim("rss_losses", "batch shapes differ"));
    }
    if let Some(&bad) = hard_labels.iter().find(|&&l| l >= c) {
        return Err(AnlError::domain(
            "rss_losses",
            format!("label {} outside width {}", bad, c),
        ));
    }
    let bf = b as f64;
    let per_row: Vec<(f64, f64, f64, Vec<f64>, Vec<f64>)> = par::map_indexed(b, |i| {
        let lz = log_softmax(class_logits.row(i));
        let z: Vec<f64> = lz.iter().map(|l| l.exp()).collect();
        let ly = log_softmax(label_logits.row(i));
        let y: Vec<f64> = ly.iter().map(|l| l.exp()).collect();
        let hard = hard_labels[i];

        let (kl, mut du, mut dv): (f64, Vec<f64>, Vec<f64>) = if kl_reversed {
            let kl: f64 = (0..c).map(|k| y[k] * (ly[k] - lz[k])).sum();
            let du: Vec<f64> = (0..c).map(|k| z[k] - y[k]).collect();
            let dv: Vec<f64> = (0..c).map(|k| y[k] * (ly[k] - lz[k] - kl)).collect();
            (kl, du, dv)
        } else {
            let kl: f64 = (0..c).map(|k| z[k] * (lz[k] - ly[k])).sum();
            let du: Vec<f64> = (0..c).map(|k| z[k] * (lz[k] - ly[k] - kl)).collect();
            let dv: Vec<f64> = (0..c).map(|k| y[k] - z[k]).collect();
            (kl, du, dv)
        };

        let lc = -ly[hard];
        let h: f64 = z.iter().zip(&lz).map(|(p, l)| -p * l).sum();
        for k in 0..c {
            du[k] = (du[k] + entropy_weight * (-z[k] * (lz[k] + h))) / bf;
            let dc = if k == hard { y[k] - 1.0 } else { y[k] };
            dv[k] = (dv[k] + anchor_weight * dc) / bf;
        }
        (kl / bf, lc / bf, h / bf, du, dv)
    });
    let mut out = RssLossGrads {
        l_kl: 0.0,
        l_c: 0.0,
        l_e: 0.0,
        l_rss: 0.0,
        d_class: Mat64::zeros(b, c),
        d_label: Mat64::zeros(b, c),
    };
    for (i, (kl, lc, h, du, dv)) in per_row.into_iter().enumerate() {
        out.l_kl += kl;
        out.l_c += lc;
        out.l_e += h;
        out.d_class.set_row(i, &du)?;
        out.d_label.set_row(i, &dv)?;
    }
    out.l_rss = out.l_kl + anchor_weight * out.l_c + entropy_weight * out.l_e;
    Ok(out)
}

/// Auxiliary correction model: its own encoder copy plus a cluster-count
/// classification head.
#[derive(Debug, Clone)]
pub struct AuxModules {
    pub encoder: DenseNet,
    pub head: DenseNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssOptions {
    /// Samples nearest each centroid that seed the clean set.
    pub clean_per_cluster: usize,
    /// Softmax confidence an unlabeled sample must strictly exceed to
    /// migrate into the labeled set.
    pub confidence_threshold: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Label-logit magnitude for the one-hot initialization.
    pub soft_label_scale: f64,
    /// Weight of the cluster-label anchor term.
    pub anchor_weight: f64,
    /// Weight of the entropy sharpening term.
    pub entropy_weight: f64,
    /// Step size for the label logits (plain gradient descent).
    pub label_learning_rate: f64,
    /// Adam step size for the auxiliary networks.
    pub learning_rate: f64,
    /// Clusters per supervised batch.
    pub p_identities: usize,
    /// Samples per cluster per supervised batch.
    pub k_samples: usize,
    pub triplet_margin: f64,
    /// Swap the KL direction between posterior and label distribution.
    pub kl_reversed: bool,
    /// Correction round number; offsets the random streams.
    pub round: usize,
    pub seed: u64,
}

impl Default for RssOptions {
    fn default() -> Self {
        RssOptions {
            clean_per_cluster: 12,
            confidence_threshold: 0.9,
            stage1_epochs: 10,
            stage2_epochs: 10,
            soft_label_scale: 10.0,
            anchor_weight: 0.1,
            entropy_weight: 0.1,
            label_learning_rate: 2.0,
            learning_rate: 0.00035,
            p_identities: 8,
            k_samples: 4,
            triplet_margin: 0.3,
            kl_reversed: false,
            round: 0,
            seed: 42,
        }
    }
}

impl RssOptions {
    pub fn validate(&self) -> Result<()> {
        if self.clean_per_cluster == 0 || self.p_identities == 0 || self.k_samples == 0 {
            return Err(AnlError::Config(
                "clean_per_cluster, p_identities and k_samples must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(AnlError::Config(
                "confidence_threshold must lie in [0, 1]".into(),
            ));
        }
        if !(self.soft_label_scale > 0.0) {
            return Err(AnlError::Config("soft_label_scale must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.label_learning_rate > 0.0) {
            return Err(AnlError::Config("learning rates must be positive".into()));
        }
        if self.anchor_weight < 0.0 || self.entropy_weight < 0.0 || self.triplet_margin < 0.0 {
            return Err(AnlError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// One epoch of either correction stage; unused columns stay zero.
/// `n_active` is the size of the supervised set the stage worked with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RssTraceRow {
    pub round: usize,
    pub stage: usize,
    pub epoch: usize,
    pub l_ce: f64,
    pub l_triplet: f64,
    pub l_ent: f64,
    pub l_kl: f64,
    pub l_c: f64,
    pub l_e: f64,
    pub n_active: usize,
}

impl RssTraceRow {
    fn blank(round: usize, stage: usize, epoch: usize) -> Self {
        RssTraceRow {
            round,
            stage,
            epoch,
            l_ce: 0.0,
            l_triplet: 0.0,
            l_ent: 0.0,
            l_kl: 0.0,
            l_c: 0.0,
            l_e: 0.0,
            n_active: 0,
        }
    }
}

fn group_by_label(labeled: &[(usize, usize)]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(i, l) in labeled {
        groups.entry(l).or_default().push(i);
    }
    groups
}

/// Draw `k` members of `pool`, without replacement while the pool lasts.
fn draw_k(pool: &[usize], k: usize, rng: &mut SeededRng) -> Vec<usize> {
    use rand::Rng;
    if pool.len() >= k {
        rand::seq::index::sample(rng, pool.len(), k)
            .into_iter()
            .map(|p| pool[p])
            .collect()
    } else {
        (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Warm-up epoch: cross-entropy plus batch-hard triplet on the labeled
/// side, entropy sharpening on the unlabeled side, then confident
/// unlabeled samples migrate into the labeled set.
#[allow(clippy::too_many_arguments)]
pub fn stage1_epoch(
    aux: &mut AuxModules,
    enc_state: &mut AdamState,
    head_state: &mut AdamState,
    target_x: &Mat64,
    split: &mut SampleSplit,
    opts: &RssOptions,
    epoch: usize,
) -> Result<RssTraceRow> {
    if split.n_labeled() == 0 {
        return Err(AnlError::domain("stage1_epoch", "empty labeled set"));
    }
    let mut rng = component_rng(
        opts.seed,
        stream::RSS_STAGE1 + (opts.round as u64) * 0x100 + epoch as u64,
    );
    let groups = group_by_label(split.labeled());
    let cluster_ids: Vec<usize> = groups.keys().copied().collect();
    let batch = opts.p_identities * opts.k_samples;
    let n_batches = split.n_labeled().div_ceil(batch).max(1);

    let mut cluster_order = cluster_ids.clone();
    cluster_order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut sum_ce = 0.0;
    let mut sum_tri = 0.0;
    for _ in 0..n_batches {
        let mut batch_idx = Vec::with_capacity(batch);
        let mut roles = Vec::with_capacity(batch);
        for _ in 0..opts.p_identities.min(cluster_order.len()) {
            if cursor == cluster_order.len() {
                cluster_order.shuffle(&mut rng);
                cursor = 0;
            }
            let c = cluster_order[cursor];
            cursor += 1;
            for i in draw_k(&groups[&c], opts.k_samples, &mut rng) {
                batch_idx.push(i);
                roles.push(Role::Labeled(c));
            }
        }
        let x = target_x.select_rows(&batch_idx)?;
        let (emb, cache) = aux.encoder.forward(&x)?;
        let (logits, head_cache) = aux.head.forward(&emb)?;
        let labels: Vec<usize> = roles
            .iter()
            .map(|r| match r {
                Role::Labeled(c) => *c,
                _ => unreachable!(),
            })
            .collect();
        let (l_ce, d_logits) = cross_entropy_loss_grad(&logits, &labels)?;
        let head_tape = aux.head.backward(&head_cache, &d_logits)?;

        let unit = emb.normalized_rows()?;
        let (l_tri, d_unit, _) = batch_hard_triplet_loss_grad(&unit, &roles, opts.triplet_margin)?;
        let d_emb_tri = normalize_rows_grad(&emb, &d_unit)?;

        let enc_tape = aux
            .encoder
            .backward(&cache, &head_tape.d_input.add(&d_emb_tri)?)?;
        adam_step(&mut aux.encoder, &enc_tape, enc_state)?;
        adam_step(&mut aux.head, &head_tape, head_state)?;
        sum_ce += l_ce;
        sum_tri += l_tri;
    }

    let mut sum_ent = 0.0;
    let mut ent_batches = 0usize;
    if split.n_unlabeled() > 0 {
        let mut order: Vec<usize> = split.unlabeled().to_vec();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let x = target_x.select_rows(chunk)?;
            let (emb, cache) = aux.encoder.forward(&x)?;
            let (logits, head_cache) = aux.head.forward(&emb)?;
            let (l_ent, d_logits) = entropy_loss_grad(&logits)?;
            let head_tape = aux.head.backward(&head_cache, &d_logits)?;
            let enc_tape = aux.encoder.backward(&cache, &head_tape.d_input)?;
            adam_step(&mut aux.encoder, &enc_tape, enc_state)?;
            adam_step(&mut aux.head, &head_tape, head_state)?;
            sum_ent += l_ent;
            ent_batches += 1;
        }

        // Migrate samples the refreshed model is now confident about.
        let x = target_x.select_rows(split.unlabeled())?;
        let logits = aux.head.infer(&aux.encoder.infer(&x)?)?;
        let mut moves = Vec::new();
        for (r, &i) in split.unlabeled().iter().enumerate() {
            let p = softmax(logits.row(r))?;
            let (best, &maxp) = p
                .probs()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("non-empty probabilities");
            if maxp > opts.confidence_threshold {
                moves.push((i, best));
            }
        }
        split.migrate(&moves)?;
    }

    let mut row = RssTraceRow::blank(opts.round, 1, epoch);
    row.l_ce = sum_ce / n_batches as f64;
    row.l_triplet = sum_tri / n_batches as f64;
    row.l_ent = if ent_batches > 0 {
        sum_ent / ent_batches as f64
    } else {
        0.0
    };
    row.n_active = split.n_labeled();
    Ok(row)
}

/// Correction epoch: jointly updates the auxiliary networks (Adam) and the
/// soft label logits (plain gradient descent) over shuffled batches of the
/// clustered samples.
#[allow(clippy::too_many_arguments)]
pub fn stage2_epoch(
    aux: &mut AuxModules,
    enc_state: &mut AdamState,
    head_state: &mut AdamState,
    target_x: &Mat64,
    soft: &mut SoftLabelMatrix,
    opts: &RssOptions,
    epoch: usize,
) -> Result<RssTraceRow> {
    if soft.is_empty() {
        return Err(AnlError::domain("stage2_epoch", "no clustered samples"));
    }
    if aux.head.output_dim() != soft.n_classes() {
        return Err(AnlError::dim("stage2_epoch", "head width vs label classes"));
    }
    let mut rng = component_rng(
        opts.seed,
        stream::RSS_STAGE2 + (opts.round as u64) * 0x100 + epoch as u64,
    );
    let mut order: Vec<usize> = (0..soft.len()).collect();
    order.shuffle(&mut rng);
    let batch = opts.p_identities * opts.k_samples;
    let (mut sum_kl, mut sum_c, mut sum_e) = (0.0, 0.0, 0.0);
    let mut n_batches = 0usize;
    for chunk in order.chunks(batch) {
        let sample_idx: Vec<usize> = chunk.iter().map(|&r| soft.sample_indices()[r]).collect();
        let hard: Vec<usize> = chunk.iter().map(|&r| soft.cluster_labels()[r]).collect();
        let x = target_x.select_rows(&sample_idx)?;
        let (emb, cache) = aux.encoder.forward(&x)?;
        let (class_logits, head_cache) = aux.head.forward(&emb)?;
        let label_logits = soft.logits().select_rows(chunk)?;
        let grads = rss_losses(
            &class_logits,
            &label_logits,
            &hard,
            opts.anchor_weight,
            opts.entropy_weight,
            opts.kl_reversed,
        )?;
        let head_tape = aux.head.backward(&head_cache, &grads.d_class)?;
        let enc_tape = aux.encoder.backward(&cache, &head_tape.d_input)?;
        adam_step(&mut aux.encoder, &enc_tape, enc_state)?;
        adam_step(&mut aux.head, &head_tape, head_state)?;
        soft.sgd_rows(chunk, &grads.d_label, opts.label_learning_rate)?;
        sum_kl += grads.l_kl;
        sum_c += grads.l_c;
        sum_e += grads.l_e;
        n_batches += 1;
    }
    let mut row = RssTraceRow::blank(opts.round, 2, epoch);
    let inv = 1.0 / n_batches as f64;
    row.l_kl = sum_kl * inv;
    row.l_c = sum_c * inv;
    row.l_e = sum_e * inv;
    row.n_active = soft.len();
    Ok(row)
}

/// Outcome of the reliability filter for one clustered sample. `kept`
/// means the learned label agrees with the cluster label (agreement
/// through a tie still counts, flagged by `tied`); `corrected_label` is
/// the learned label either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReliableVerdict {
    pub sample_index: usize,
    pub cluster_label: usize,
    pub corrected_label: usize,
    pub kept: bool,
    pub tied: bool,
}

/// Compare each learned label distribution to its cluster label.
pub fn filter_reliable(soft: &SoftLabelMatrix) -> Vec<ReliableVerdict> {
    (0..soft.len())
        .map(|r| {
            let row = soft.logits().row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let tied_set: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|&(_, v)| *v == max)
                .map(|(k, _)| k)
                .collect();
            let cluster_label = soft.cluster_labels()[r];
            let kept = tied_set.contains(&cluster_label);
            ReliableVerdict {
                sample_index: soft.sample_indices()[r],
                cluster_label,
                corrected_label: if kept { cluster_label } else { tied_set[0] },
                kept,
                tied: tied_set.len() > 1,
            }
        })
        .collect()
}

pub fn export_verdicts(path: impl AsRef<Path>, verdicts: &[ReliableVerdict]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::world::csv_to_err(path, e))?;
    for v in verdicts {
        w.serialize(v).map_err(|e| crate::world::csv_to_err(path, e))?;
    }
    w.flush().map_err(|e| AnlError::io(path, e))?;
    Ok(())
}

pub fn import_verdicts(path: impl AsRef<Path>) -> Result<Vec<ReliableVerdict>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| crate::world::csv_to_err(path, e))?;
    let mut out: Vec<ReliableVerdict> = Vec::new();
    for rec in r.deserialize() {
        let v: ReliableVerdict = rec.map_err(|e| crate::world::csv_to_err(path, e))?;
        if let Some(last) = out.last() {
            if v.sample_index <= last.sample_index {
                return Err(AnlError::Parse {
                    path: path.display().to_string(),
                    line: out.len() + 2,
                    detail: "sample indices must increase".into(),
                });
            }
        }
        out.push(v);
    }
    Ok(out)
}

pub struct RssOutcome {
    pub aux: AuxModules,
    pub verdicts: Vec<ReliableVerdict>,
    pub trace: Vec<RssTraceRow>,
    pub final_labeled: usize,
}

/// Run one full correction round against the current cluster assignment:
/// clone the main encoder, warm it up semi-supervised from the clean set,
/// correct the labels jointly, then filter. `embeddings` must be the
/// normalized features the assignment was clustered from.
pub fn run_rss_round(
    main_encoder: &DenseNet,
    target_x: &Mat64,
    embeddings: &Mat64,
    assignment: &ClusterAssignment,
    opts: &RssOptions,
) -> Result<RssOutcome> {
    opts.validate()?;
    if assignment.n_clusters() == 0 {
        return Err(AnlError::domain("run_rss_round", "assignment has no clusters"));
    }
    if target_x.rows() != assignment.len() || embeddings.rows() != assignment.len() {
        return Err(AnlError::dim("run_rss_round", "rows vs assignment"));
    }
    let mut aux = AuxModules {
        encoder: main_encoder.clone(),
        head: DenseNet::new(
            main_encoder.output_dim(),
            &[(assignment.n_clusters(), crate::nn::Activation::Identity)],
            &mut component_rng(opts.seed, stream::INIT_AUX_HEAD + opts.round as u64),
        )?,
    };
    let mut enc_state = AdamState::new(aux.encoder.param_count(), opts.learning_rate);
    let mut head_state = AdamState::new(aux.head.param_count(), opts.learning_rate);

    let mut split = init_clean_set(embeddings, assignment, opts.clean_per_cluster)?;
    let mut trace = Vec::with_capacity(opts.stage1_epochs + opts.stage2_epochs);
    for epoch in 0..opts.stage1_epochs {
        trace.push(stage1_epoch(
            &mut aux,
            &mut enc_state,
            &mut head_state,
            target_x,
            &mut split,
            opts,
            epoch,
        )?);
    }
    let mut soft = init_soft_labels(assignment, opts.soft_label_scale)?;
    for epoch in 0..opts.stage2_epochs {
        trace.push(stage2_epoch(
            &mut aux,
            &mut enc_state,
            &mut head_state,
            target_x,
            &mut soft,
            opts,
            epoch,
        )?);
    }
    let verdicts = filter_reliable(&soft);
    Ok(RssOutcome {
        aux,
        verdicts,
        trace,
        final_labeled: split.n_labeled(),
    })
}
