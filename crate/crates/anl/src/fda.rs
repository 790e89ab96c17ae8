//! Feature distribution alignment across domains.
//!
//! The encoder is pulled three ways at once: supervised cross-entropy on the
//! labeled source domain, a camera-aware contrastive term that drags each
//! target sample toward its own memory cell and its mined intra/cross-camera
//! neighbors, and a least-squares adversarial term that makes target
//! embeddings indistinguishable from source ones. The memory bank holds one
//! unit-norm cell per target sample, refreshed by exponential moving
//! average.

use crate::error::{AnlError, Result};
use crate::math::{dot, log_softmax, Mat64};
use crate::nn::{adam_step, cross_entropy_loss_grad, AdamState, DenseNet};
use crate::par;
use crate::rng::{component_rng, stream, SeededRng};
use crate::world::perturb_rows;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One unit-norm cell per target sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    cells: Mat64,
}

impl MemoryBank {
    /// Initialize from per-sample features; rows are L2-normalized.
    pub fn init(features: &Mat64) -> Result<Self> {
        if features.rows() == 0 {
            return Err(AnlError::domain("MemoryBank::init", "no samples"));
        }
        Ok(MemoryBank {
            cells: features.normalized_rows()?,
        })
    }

    pub fn len(&self) -> usize {
        self.cells.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.cells.cols()
    }

    pub fn cells(&self) -> &Mat64 {
        &self.cells
    }

    /// Blend `rate * cell + (1 - rate) * feature` and renormalize. If the
    /// blend cancels to zero norm the previous cell is kept and a warning
    /// logged.
    pub fn update(&mut self, index: usize, feature: &[f64], rate: f64) -> Result<()> {
        if index >= self.len() {
            return Err(AnlError::dim(
                "MemoryBank::update",
                format!("index {} of {}", index, self.len()),
            ));
        }
        if feature.len() != self.dim() {
            return Err(AnlError::dim(
                "MemoryBank::update",
                format!("feature dim {} vs {}", feature.len(), self.dim()),
            ));
        }
        if !(0.0..=1.0).contains(&rate) {
            return Err(AnlError::domain(
                "MemoryBank::update",
                format!("rate {} outside [0, 1]", rate),
            ));
        }
        let blended: Vec<f64> = self
            .cells
            .row(index)
            .iter()
            .zip(feature)
            .map(|(c, f)| rate * c + (1.0 - rate) * f)
            .collect();
        let n = crate::math::norm(&blended);
        if n <= 0.0 || !n.is_finite() {
            log::warn!("memory cell {} update cancelled to zero norm; keeping previous", index);
            return Ok(());
        }
        let unit: Vec<f64> = blended.iter().map(|v| v / n).collect();
        self.cells.set_row(index, &unit)
    }
}

/// Mined neighbor indices per target sample: nearest same-camera and
/// nearest other-camera samples, ranked by similarity to the memory cells.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSets {
    pub intra: Vec<Vec<usize>>,
    pub cross: Vec<Vec<usize>>,
}

/// Rank every other sample's memory cell by inner product with the anchor
/// embedding and keep the top `r_intra` same-camera and `r_cross`
/// other-camera entries (fewer when not enough exist). Ties break toward
/// the smaller index.
pub fn build_neighbor_sets(
    anchors: &Mat64,
    bank: &MemoryBank,
    cameras: &[usize],
    r_intra: usize,
    r_cross: usize,
) -> Result<NeighborSets> {
    let n = anchors.rows();
    if n != bank.len() || n != cameras.len() {
        return Err(AnlError::dim(
            "build_neighbor_sets",
            format!("{} anchors, {} cells, {} cameras", n, bank.len(), cameras.len()),
        ));
    }
    let sets: Vec<(Vec<usize>, Vec<usize>)> = par::map_indexed(n, |i| {
        let a = anchors.row(i);
        let mut same: Vec<(f64, usize)> = Vec::new();
        let mut other: Vec<(f64, usize)> = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            let s = dot(a, bank.cells().row(j));
            if cameras[j] == cameras[i] {
                same.push((s, j));
            } else {
                other.push((s, j));
            }
        }
        let top = |mut v: Vec<(f64, usize)>, r: usize| -> Vec<usize> {
            v.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            v.truncate(r);
            v.into_iter().map(|(_, j)| j).collect()
        };
        (top(same, r_intra), top(other, r_cross))
    });
    let mut intra = Vec::with_capacity(n);
    let mut cross = Vec::with_capacity(n);
    for (s, o) in sets {
        intra.push(s);
        cross.push(o);
    }
    Ok(NeighborSets { intra, cross })
}

/// Per-sample soft targets: weight 1 on the sample's own cell, cosine
/// similarity on each mined neighbor's cell, zero elsewhere (sparse rows).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTargets {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SimilarityTargets {
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn similarity_targets(
    anchors: &Mat64,
    bank: &MemoryBank,
    sets: &NeighborSets,
) -> Result<SimilarityTargets> {
    let n = anchors.rows();
    if sets.intra.len() != n || sets.cross.len() != n || bank.len() != n {
        return Err(AnlError::dim("similarity_targets", "component lengths differ"));
    }
    let rows: Vec<Vec<(usize, f64)>> = par::map_indexed(n, |i| {
        let a = anchors.row(i);
        let na = crate::math::norm(a).max(1e-300);
        let mut row = vec![(i, 1.0)];
        for &j in sets.intra[i].iter().chain(&sets.cross[i]) {
            // Bank cells are unit norm, so the inner product over the
            // normalized anchor is the cosine.
            let s = dot(a, bank.cells().row(j)) / na;
            row.push((j, s));
        }
        row.sort_by_key(|&(j, _)| j);
        row
    });
    Ok(SimilarityTargets { rows })
}

/// Soft-target contrastive loss against the memory bank at temperature
/// `temperature`, averaged with weight 1/N over the full target count, and
/// its gradient with respect to the raw (unnormalized) batch embeddings.
pub fn contrastive_loss_grad(
    batch_embeddings: &Mat64,
    batch_indices: &[usize],
    bank: &MemoryBank,
    targets: &SimilarityTargets,
    temperature: f64,
) -> Result<(f64, Mat64)> {
    if batch_embeddings.rows() != batch_indices.len() {
        return Err(AnlError::dim(
            "contrastive_loss_grad",
            "batch rows vs indices",
        ));
    }
    if batch_embeddings.cols() != bank.dim() {
        return Err(AnlError::dim("contrastive_loss_grad", "embedding dim vs bank"));
    }
    if targets.len() != bank.len() {
        return Err(AnlError::dim("contrastive_loss_grad", "targets vs bank size"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(AnlError::domain(
            "contrastive_loss_grad",
            "temperature must be positive",
        ));
    }
    let n_total = bank.len() as f64;
    let per_row: Vec<Result<(f64, Vec<f64>)>> =
        par::map_indexed(batch_embeddings.rows(), |r| {
            let i = batch_indices[r];
            if i >= bank.len() {
                return Err(AnlError::dim(
                    "contrastive_loss_grad",
                    format!("sample index {} of {}", i, bank.len()),
                ));
            }
            let raw = batch_embeddings.row(r);
            let norm = crate::math::norm(raw);
            if norm <= 0.0 {
                return Err(AnlError::domain(
                    "contrastive_loss_grad",
                    format!("batch row {} has zero norm", r),
                ));
            }
            let unit: Vec<f64> = raw.iter().map(|v| v / norm).collect();
            let logits: Vec<f64> = (0..bank.len())
                .map(|k| dot(&unit, bank.cells().row(k)) / temperature)
                .collect();
            let lp = log_softmax(&logits);
            let mut loss = 0.0;
            let mut weight_sum = 0.0;
            for &(j, s) in targets.row(i) {
                loss -= s * lp[j];
                weight_sum += s;
            }
            // d loss / d logits_k = weight_sum * p_k - s_k
            let mut d_logits: Vec<f64> = lp.iter().map(|l| weight_sum * l.exp()).collect();
            for &(j, s) in targets.row(i) {
                d_logits[j] -= s;
            }
            // Pull back through the bank product and the normalization.
            let mut g_unit = vec![0.0; raw.len()];
            for (k, dl) in d_logits.iter().enumerate() {
                if *dl == 0.0 {
                    continue;
                }
                for (g, c) in g_unit.iter_mut().zip(bank.cells().row(k)) {
                    *g += dl * c / temperature;
                }
            }
            let radial = dot(&g_unit, &unit);
            let g_raw: Vec<f64> = g_unit
                .iter()
                .zip(&unit)
                .map(|(g, u)| (g - radial * u) / norm / n_total)
                .collect();
            Ok((loss / n_total, g_raw))
        });
    let mut loss = 0.0;
    let mut grad = Mat64::zeros(batch_embeddings.rows(), batch_embeddings.cols());
    for (r, item) in per_row.into_iter().enumerate() {
        let (l, g) = item?;
        loss += l;
        grad.set_row(r, &g)?;
    }
    Ok((loss, grad))
}

/// Least-squares alignment loss on target discriminator outputs,
/// `mean((d - 1)^2)`, with its gradient; pushes target embeddings toward
/// the discriminator's source label.
pub fn alignment_loss_grad(disc_target_out: &Mat64) -> Result<(f64, Mat64)> {
    if disc_target_out.cols() != 1 || disc_target_out.rows() == 0 {
        return Err(AnlError::dim(
            "alignment_loss_grad",
            "expected a non-empty column of scores",
        ));
    }
    let n = disc_target_out.rows() as f64;
    let mut grad = Mat64::zeros(disc_target_out.rows(), 1);
    let mut loss = 0.0;
    for i in 0..disc_target_out.rows() {
        let d = disc_target_out.get(i, 0);
        loss += (d - 1.0) * (d - 1.0) / n;
        grad.set(i, 0, 2.0 * (d - 1.0) / n);
    }
    Ok((loss, grad))
}

/// Least-squares discriminator loss, `mean((d_src - 1)^2) + mean(d_tgt^2)`,
/// with gradients for both score columns.
pub fn discriminator_loss_grad(
    disc_source_out: &Mat64,
    disc_target_out: &Mat64,
) -> Result<(f64, Mat64, Mat64)> {
    for (name, m) in [("source", disc_source_out), ("target", disc_target_out)] {
        if m.cols() != 1 || m.rows() == 0 {
            return Err(AnlError::dim(
                "discriminator_loss_grad",
                format!("expected a non-empty column of {} scores", name),
            ));
        }
    }
    let ns = disc_source_out.rows() as f64;
    let nt = disc_target_out.rows() as f64;
    let mut loss = 0.0;
    let mut gs = Mat64::zeros(disc_source_out.rows(), 1);
    for i in 0..disc_source_out.rows() {
        let d = disc_source_out.get(i, 0);
        loss += (d - 1.0) * (d - 1.0) / ns;
        gs.set(i, 0, 2.0 * (d - 1.0) / ns);
    }
    let mut gt = Mat64::zeros(disc_target_out.rows(), 1);
    for i in 0..disc_target_out.rows() {
        let d = disc_target_out.get(i, 0);
        loss += d * d / nt;
        gt.set(i, 0, 2.0 * d / nt);
    }
    Ok((loss, gs, gt))
}

/// The three networks alignment training touches.
#[derive(Debug, Clone)]
pub struct FdaModules {
    pub encoder: DenseNet,
    pub source_head: DenseNet,
    pub discriminator: DenseNet,
}

/// Standard architecture for a given input dim: encoder
/// `d -> 2d (relu) -> d (identity)`, discriminator `d -> d (relu) -> 1
/// (identity)`, and a single-linear-layer classification head.
pub fn standard_modules(
    raw_dim: usize,
    n_source_classes: usize,
    seed: u64,
) -> Result<FdaModules> {
    use crate::nn::Activation::{Identity, Relu};
    let encoder = DenseNet::new(
        raw_dim,
        &[(2 * raw_dim, Relu), (raw_dim, Identity)],
        &mut component_rng(seed, stream::INIT_ENCODER),
    )?;
    let source_head = DenseNet::new(
        raw_dim,
        &[(n_source_classes, Identity)],
        &mut component_rng(seed, stream::INIT_SOURCE_HEAD),
    )?;
    let discriminator = DenseNet::new(
        raw_dim,
        &[(raw_dim, Relu), (1, Identity)],
        &mut component_rng(seed, stream::INIT_DISCRIMINATOR),
    )?;
    Ok(FdaModules {
        encoder,
        source_head,
        discriminator,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdaOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub bank_update_rate: f64,
    pub intra_neighbors: usize,
    pub cross_neighbors: usize,
    pub learning_rate: f64,
    pub variant_sigma: f64,
    /// Reuse the epoch-0 variants every epoch instead of regenerating.
    pub freeze_variants: bool,
    pub seed: u64,
}

impl Default for FdaOptions {
    fn default() -> Self {
        FdaOptions {
            epochs: 10,
            batch_size: 64,
            temperature: 0.05,
            bank_update_rate: 0.2,
            intra_neighbors: 2,
            cross_neighbors: 4,
            learning_rate: 0.00035,
            variant_sigma: 0.15,
            freeze_variants: false,
            seed: 42,
        }
    }
}

impl FdaOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(AnlError::Config("batch_size must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(AnlError::Config("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bank_update_rate) {
            return Err(AnlError::Config("bank_update_rate must lie in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(AnlError::Config("learning_rate must be positive".into()));
        }
        if !self.variant_sigma.is_finite() || self.variant_sigma < 0.0 {
            return Err(AnlError::Config("variant_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-epoch mean losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdaTraceRow {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_cl: f64,
    pub l_g: f64,
    pub l_d: f64,
}

pub struct FdaOutcome {
    pub bank: MemoryBank,
    pub trace: Vec<FdaTraceRow>,
}

/// Shuffled visit order for one epoch.
fn epoch_order(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn batch_slice(order: &[usize], iter: usize, batch: usize) -> Vec<usize> {
    let n = order.len();
    let start = (iter * batch) % n;
    (0..batch.min(n))
        .map(|k| order[(start + k) % n])
        .collect()
}

/// Run distribution alignment. The bank is initialized from the initial
/// encoder's features of the epoch-0 variants; each epoch regenerates the
/// target variants (unless frozen), re-mines neighbors, then sweeps batches
/// updating encoder, source head and discriminator with Adam and the bank
/// by moving average. With zero epochs the modules are untouched and the
/// initialized bank is returned.
pub fn fda_train(
    modules: &mut FdaModules,
    source_x: &Mat64,
    source_labels: &[usize],
    target_x: &Mat64,
    target_cameras: &[usize],
    opts: &FdaOptions,
) -> Result<FdaOutcome> {
    opts.validate()?;
    if source_x.rows() == 0 || target_x.rows() == 0 {
        return Err(AnlError::domain("fda_train", "both domains need samples"));
    }
    if source_labels.len() != source_x.rows() {
        return Err(AnlError::dim("fda_train", "source labels vs rows"));
    }
    if target_cameras.len() != target_x.rows() {
        return Err(AnlError::dim("fda_train", "target cameras vs rows"));
    }
    let n_classes = modules.source_head.output_dim();
    if let Some(&bad) = source_labels.iter().find(|&&l| l >= n_classes) {
        return Err(AnlError::domain(
            "fda_train",
            format!("label {} outside head width {}", bad, n_classes),
        ));
    }

    let variants_at = |epoch: usize| -> Result<Mat64> {
        let e = if opts.freeze_variants { 0 } else { epoch as u64 };
        let mut rng = component_rng(opts.seed, stream::FDA_VARIANT + e);
        perturb_rows(target_x, opts.variant_sigma, &mut rng)
    };

    let init_variants = variants_at(0)?;
    let mut bank = MemoryBank::init(&modules.encoder.infer(&init_variants)?)?;

    let mut enc_state = AdamState::new(modules.encoder.param_count(), opts.learning_rate);
    let mut head_state = AdamState::new(modules.source_head.param_count(), opts.learning_rate);
    let mut disc_state =
        AdamState::new(modules.discriminator.param_count(), opts.learning_rate);

    let mut trace = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let variants = if epoch == 0 {
            init_variants.clone()
        } else {
            variants_at(epoch)?
        };
        let anchors = modules.encoder.infer(&variants)?.normalized_rows()?;
        let sets = build_neighbor_sets(
            &anchors,
            &bank,
            target_cameras,
            opts.intra_neighbors,
            opts.cross_neighbors,
        )?;
        let targets = similarity_targets(&anchors, &bank, &sets)?;

        let mut rng = component_rng(opts.seed, stream::FDA_BATCH + epoch as u64);
        let src_order = epoch_order(source_x.rows(), &mut rng);
        let tgt_order = epoch_order(target_x.rows(), &mut rng);
        let iters = usize::max(
            source_x.rows().div_ceil(opts.batch_size),
            target_x.rows().div_ceil(opts.batch_size),
        );
        let (mut sum_ce, mut sum_cl, mut sum_g, mut sum_d) = (0.0, 0.0, 0.0, 0.0);
        for it in 0..iters {
            let src_idx = batch_slice(&src_order, it, opts.batch_size);
            let tgt_idx = batch_slice(&tgt_order, it, opts.batch_size);

            // Source supervised pass.
            let src_batch = source_x.select_rows(&src_idx)?;
            let (src_emb, src_cache) = modules.encoder.forward(&src_batch)?;
            let (logits, head_cache) = modules.source_head.forward(&src_emb)?;
            let labels: Vec<usize> = src_idx.iter().map(|&i| source_labels[i]).collect();
            let (l_ce, d_logits) = cross_entropy_loss_grad(&logits, &labels)?;
            let head_tape = modules.source_head.backward(&head_cache, &d_logits)?;

            // Target contrastive pass over this epoch's variants.
            let tgt_batch = variants.select_rows(&tgt_idx)?;
            let (tgt_emb, tgt_cache) = modules.encoder.forward(&tgt_batch)?;
            let (l_cl, d_emb_cl) =
                contrastive_loss_grad(&tgt_emb, &tgt_idx, &bank, &targets, opts.temperature)?;

            // Adversarial passes: the encoder feels only the alignment
            // term; the discriminator only its own separation term.
            let (disc_tgt, disc_tgt_cache) = modules.discriminator.forward(&tgt_emb)?;
            let (l_g, d_disc_tgt_align) = alignment_loss_grad(&disc_tgt)?;
            let align_tape = modules
                .discriminator
                .backward(&disc_tgt_cache, &d_disc_tgt_align)?;
            let d_emb_align = align_tape.d_input;

            let (disc_src, disc_src_cache) = modules.discriminator.forward(&src_emb)?;
            let (l_d, d_src_scores, d_tgt_scores) =
                discriminator_loss_grad(&disc_src, &disc_tgt)?;
            let disc_tape = modules
                .discriminator
                .backward(&disc_src_cache, &d_src_scores)?
                .add(&modules.discriminator.backward(&disc_tgt_cache, &d_tgt_scores)?)?;

            // Encoder gradient: cross-entropy through the head on source
            // rows, contrastive plus alignment on target rows.
            let enc_tape = modules
                .encoder
                .backward(&src_cache, &head_tape.d_input)?
                .add(&modules.encoder.backward(&tgt_cache, &d_emb_cl.add(&d_emb_align)?)?)?;

            adam_step(&mut modules.encoder, &enc_tape, &mut enc_state)?;
            adam_step(&mut modules.source_head, &head_tape, &mut head_state)?;
            adam_step(&mut modules.discriminator, &disc_tape, &mut disc_state)?;

            // Refresh memory with this batch's (pre-step) embeddings.
            for (r, &i) in tgt_idx.iter().enumerate() {
                let row = tgt_emb.row(r);
                let n = crate::math::norm(row);
                if n <= 0.0 {
                    log::warn!("target sample {} embedded to zero norm; bank cell kept", i);
                    continue;
                }
                let unit: Vec<f64> = row.iter().map(|v| v / n).collect();
                bank.update(i, &unit, opts.bank_update_rate)?;
            }

            sum_ce += l_ce;
            sum_cl += l_cl;
            sum_g += l_g;
            sum_d += l_d;
        }
        let inv = 1.0 / iters as f64;
        trace.push(FdaTraceRow {
            epoch,
            l_ce: sum_ce * inv,
            l_cl: sum_cl * inv,
            l_g: sum_g * inv,
            l_d: sum_d * inv,
        });
    }
    Ok(FdaOutcome { bank, trace })
}

/// Source-only baseline: identical supervised loop with the alignment and
/// adversarial terms absent (their trace columns stay zero).
pub fn train_source_only(
    encoder: &mut DenseNet,
    head: &mut DenseNet,
    source_x: &Mat64,
    source_labels: &[usize],
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<Vec<FdaTraceRow>> {
    if batch_size == 0 || !(learning_rate > 0.0) {
        return Err(AnlError::Config(
            "batch_size and learning_rate must be positive".into(),
        ));
    }
    if source_x.rows() == 0 || source_labels.len() != source_x.rows() {
        return Err(AnlError::dim("train_source_only", "source rows vs labels"));
    }
    let mut enc_state = AdamState::new(encoder.param_count(), learning_rate);
    let mut head_state = AdamState::new(head.param_count(), learning_rate);
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut rng = component_rng(seed, stream::FDA_BATCH + epoch as u64);
        let order = epoch_order(source_x.rows(), &mut rng);
        let iters = source_x.rows().div_ceil(batch_size);
        let mut sum_ce = 0.0;
        for it in 0..iters {
            let idx = batch_slice(&order, it, batch_size);
            let batch = source_x.select_rows(&idx)?;
            let (emb, enc_cache) = encoder.forward(&batch)?;
            let (logits, head_cache) = head.forward(&emb)?;
            let labels: Vec<usize> = idx.iter().map(|&i| source_labels[i]).collect();
            let (l_ce, d_logits) = cross_entropy_loss_grad(&logits, &labels)?;
            let head_tape = head.backward(&head_cache, &d_logits)?;
            let enc_tape = encoder.backward(&enc_cache, &head_tape.d_input)?;
            adam_step(encoder, &enc_tape, &mut enc_state)?;
            adam_step(head, &head_tape, &mut head_state)?;
            sum_ce += l_ce;
        }
        trace.push(FdaTraceRow {
            epoch,
            l_ce: sum_ce / iters as f64,
            l_cl: 0.0,
            l_g: 0.0,
            l_d: 0.0,
        });
    }
    Ok(trace)
}

/// Persist the bank alongside encoder checkpoints.
pub fn save_bank(bank: &MemoryBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(bank).map_err(|e| AnlError::json(path, e))?;
    std::fs::write(path, text).map_err(|e| AnlError::io(path, e))
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<MemoryBank> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| AnlError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| AnlError::json(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{finite_diff_grad, max_rel_err, norm};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat64 {
        let mut rng = component_rng(seed, stream::WORLD_NOISE);
        Mat64::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn bank_of(seed: u64, n: usize, d: usize) -> MemoryBank {
        MemoryBank::init(&random_mat(n, d, seed)).unwrap()
    }

    #[test]
    fn bank_cells_unit_norm_after_init_and_update() {
        let mut bank = bank_of(4, 6, 4);
        for i in 0..6 {
            assert_abs_diff_eq!(norm(bank.cells().row(i)), 1.0, epsilon = 1e-12);
        }
        bank.update(2, &[1.0, 0.0, 0.0, 0.0], 0.2).unwrap();
        assert_abs_diff_eq!(norm(bank.cells().row(2)), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bank_update_blends_toward_new_feature() {
        let mut bank = MemoryBank::init(
            &Mat64::new(1, 2, vec![1.0, 0.0]).unwrap(),
        )
        .unwrap();
        // rate 0: cell replaced by the new feature entirely.
        bank.update(0, &[0.0, 1.0], 0.0).unwrap();
        assert_abs_diff_eq!(bank.cells().get(0, 1), 1.0, epsilon = 1e-12);
        // rate 1: cell unchanged.
        bank.update(0, &[1.0, 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(bank.cells().get(0, 1), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bank_update_cancellation_keeps_cell() {
        let mut bank = MemoryBank::init(
            &Mat64::new(1, 2, vec![1.0, 0.0]).unwrap(),
        )
        .unwrap();
        bank.update(0, &[-1.0, 0.0], 0.5).unwrap();
        assert_eq!(bank.cells().row(0), &[1.0, 0.0]);
    }

    #[test]
    fn bank_update_rejects_bad_args() {
        let mut bank = bank_of(1, 3, 4);
        assert!(bank.update(3, &[0.0; 4], 0.5).is_err());
        assert!(bank.update(0, &[0.0; 3], 0.5).is_err());
        assert!(bank.update(0, &[0.0; 4], 1.5).is_err());
    }

    #[test]
    fn neighbor_sets_respect_cameras_and_counts() {
        // Anchors equal to bank cells: similarity ranking is exact cosine.
        let feats = random_mat(8, 5, 9);
        let bank = MemoryBank::init(&feats).unwrap();
        let anchors = feats.normalized_rows().unwrap();
        let cameras = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let sets = build_neighbor_sets(&anchors, &bank, &cameras, 2, 3).unwrap();
        for i in 0..8 {
            assert_eq!(sets.intra[i].len(), 2);
            assert_eq!(sets.cross[i].len(), 3);
            assert!(!sets.intra[i].contains(&i));
            for &j in &sets.intra[i] {
                assert_eq!(cameras[j], cameras[i]);
            }
            for &j in &sets.cross[i] {
                assert_ne!(cameras[j], cameras[i]);
            }
        }
    }

    #[test]
    fn neighbor_sets_clamp_to_available() {
        let feats = random_mat(3, 4, 10);
        let bank = MemoryBank::init(&feats).unwrap();
        let anchors = feats.normalized_rows().unwrap();
        // Only two same-camera peers exist and zero cross-camera peers.
        let cameras = vec![0, 0, 0];
        let sets = build_neighbor_sets(&anchors, &bank, &cameras, 5, 5).unwrap();
        for i in 0..3 {
            assert_eq!(sets.intra[i].len(), 2);
            assert!(sets.cross[i].is_empty());
        }
    }

    #[test]
    fn neighbor_ranking_picks_most_similar() {
        // Bank cells along axes; anchor 0 aligned with cell 1 direction.
        let cells = Mat64::new(
            4,
            3,
            vec![1., 0., 0., 0.9, 0.1, 0., 0., 1., 0., 0., 0., 1.],
        )
        .unwrap();
        let bank = MemoryBank::init(&cells).unwrap();
        let anchors = cells.normalized_rows().unwrap();
        let cameras = vec![0, 1, 1, 1];
        let sets = build_neighbor_sets(&anchors, &bank, &cameras, 0, 1).unwrap();
        assert_eq!(sets.cross[0], vec![1]);
    }

    #[test]
    fn similarity_targets_self_weight_one() {
        let feats = random_mat(5, 4, 11);
        let bank = MemoryBank::init(&feats).unwrap();
        let anchors = feats.normalized_rows().unwrap();
        let cameras = vec![0, 1, 0, 1, 0];
        let sets = build_neighbor_sets(&anchors, &bank, &cameras, 1, 2).unwrap();
        let targets = similarity_targets(&anchors, &bank, &sets).unwrap();
        for i in 0..5 {
            let row = targets.row(i);
            let self_weight = row.iter().find(|(j, _)| *j == i).unwrap().1;
            assert_eq!(self_weight, 1.0);
            assert_eq!(row.len(), 1 + sets.intra[i].len() + sets.cross[i].len());
            for &(j, s) in row {
                if j != i {
                    let want = dot(anchors.row(i), bank.cells().row(j));
                    assert_abs_diff_eq!(s, want, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn contrastive_gradient_matches_finite_difference() {
        let n = 7;
        let d = 4;
        let bank = bank_of(21, n, d);
        let anchors = random_mat(n, d, 22).normalized_rows().unwrap();
        let cameras = vec![0, 1, 0, 1, 0, 1, 0];
        let sets = build_neighbor_sets(&anchors, &bank, &cameras, 1, 2).unwrap();
        let targets = similarity_targets(&anchors, &bank, &sets).unwrap();
        let batch_idx = vec![0usize, 3, 5];
        let batch = random_mat(3, d, 23);
        let (_, grad) =
            contrastive_loss_grad(&batch, &batch_idx, &bank, &targets, 0.05).unwrap();
        let fd = finite_diff_grad(
            |flat| {
                let m = Mat64::new(3, d, flat.to_vec()).unwrap();
                contrastive_loss_grad(&m, &batch_idx, &bank, &targets, 0.05)
                    .unwrap()
                    .0
            },
            batch.as_slice(),
            1e-6,
        )
        .unwrap();
        assert!(max_rel_err(grad.as_slice(), &fd) < 1e-6);
    }

    #[test]
    fn contrastive_loss_scales_with_bank_size() {
        // Identical targets, the loss carries the 1/N factor.
        let d = 3;
        let bank = bank_of(31, 4, d);
        let anchors = bank.cells().clone();
        let cameras = vec![0, 1, 0, 1];
        let sets = build_neighbor_sets(&anchors, &bank, &cameras, 0, 0).unwrap();
        let targets = similarity_targets(&anchors, &bank, &sets).unwrap();
        let batch = bank.cells().select_rows(&[0]).unwrap();
        let (loss, _) = contrastive_loss_grad(&batch, &[0], &bank, &targets, 0.05).unwrap();
        // Self-only target: loss_i = -log softmax_0, scaled by 1/4.
        let logits: Vec<f64> = (0..4)
            .map(|k| dot(batch.row(0), bank.cells().row(k)) / 0.05)
            .collect();
        let want = -log_softmax(&logits)[0] / 4.0;
        assert_abs_diff_eq!(loss, want, epsilon = 1e-12);
    }

    #[test]
    fn alignment_and_discriminator_losses_match_finite_difference() {
        let scores_t = random_mat(5, 1, 41);
        let (_, g) = alignment_loss_grad(&scores_t).unwrap();
        let fd = finite_diff_grad(
            |flat| {
                let m = Mat64::new(5, 1, flat.to_vec()).unwrap();
                alignment_loss_grad(&m).unwrap().0
            },
            scores_t.as_slice(),
            1e-6,
        )
        .unwrap();
        assert!(max_rel_err(g.as_slice(), &fd) < 1e-8);

        let scores_s = random_mat(4, 1, 42);
        let (_, gs, gt) = discriminator_loss_grad(&scores_s, &scores_t).unwrap();
        let fd_s = finite_diff_grad(
            |flat| {
                let m = Mat64::new(4, 1, flat.to_vec()).unwrap();
                discriminator_loss_grad(&m, &scores_t).unwrap().0
            },
            scores_s.as_slice(),
            1e-6,
        )
        .unwrap();
        let fd_t = finite_diff_grad(
            |flat| {
                let m = Mat64::new(5, 1, flat.to_vec()).unwrap();
                discriminator_loss_grad(&scores_s, &m).unwrap().0
            },
            scores_t.as_slice(),
            1e-6,
        )
        .unwrap();
        assert!(max_rel_err(gs.as_slice(), &fd_s) < 1e-8);
        assert!(max_rel_err(gt.as_slice(), &fd_t) < 1e-8);
    }

    #[test]
    fn perfect_discriminator_zero_loss() {
        let src = Mat64::new(3, 1, vec![1.0; 3]).unwrap();
        let tgt = Mat64::new(2, 1, vec![0.0; 2]).unwrap();
        let (l, _, _) = discriminator_loss_grad(&src, &tgt).unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-15);
        // And the aligned case for the generator.
        let aligned = Mat64::new(2, 1, vec![1.0; 2]).unwrap();
        let (lg, _) = alignment_loss_grad(&aligned).unwrap();
        assert_abs_diff_eq!(lg, 0.0, epsilon = 1e-15);
    }

    fn tiny_world() -> (Mat64, Vec<usize>, Mat64, Vec<usize>) {
        let src = random_mat(12, 4, 51);
        let labels = (0..12).map(|i| i % 3).collect();
        let tgt = random_mat(10, 4, 52);
        let cams = (0..10).map(|i| i % 2).collect();
        (src, labels, tgt, cams)
    }

    fn tiny_modules(seed: u64) -> FdaModules {
        standard_modules(4, 3, seed).unwrap()
    }

    #[test]
    fn zero_epochs_leaves_modules_untouched() {
        let (src, labels, tgt, cams) = tiny_world();
        let mut m = tiny_modules(7);
        let before = m.encoder.to_flat();
        let opts = FdaOptions {
            epochs: 0,
            batch_size: 4,
            ..FdaOptions::default()
        };
        let out = fda_train(&mut m, &src, &labels, &tgt, &cams, &opts).unwrap();
        assert_eq!(m.encoder.to_flat(), before);
        assert!(out.trace.is_empty());
        assert_eq!(out.bank.len(), 10);
    }

    #[test]
    fn training_is_deterministic() {
        let (src, labels, tgt, cams) = tiny_world();
        let opts = FdaOptions {
            epochs: 2,
            batch_size: 4,
            ..FdaOptions::default()
        };
        let run = || {
            let mut m = tiny_modules(7);
            let out = fda_train(&mut m, &src, &labels, &tgt, &cams, &opts).unwrap();
            (m.encoder.to_flat(), out.trace)
        };
        let (p1, t1) = run();
        let (p2, t2) = run();
        assert_eq!(
            p1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            p2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(t1, t2);
    }

    #[test]
    fn source_ce_decreases_over_training() {
        let (src, labels, tgt, cams) = tiny_world();
        let mut m = tiny_modules(8);
        let opts = FdaOptions {
            epochs: 8,
            batch_size: 4,
            learning_rate: 0.01,
            ..FdaOptions::default()
        };
        let out = fda_train(&mut m, &src, &labels, &tgt, &cams, &opts).unwrap();
        let first = out.trace.first().unwrap().l_ce;
        let last = out.trace.last().unwrap().l_ce;
        assert!(last < first, "ce {} -> {}", first, last);
    }

    #[test]
    fn bank_stays_unit_norm_through_training() {
        let (src, labels, tgt, cams) = tiny_world();
        let mut m = tiny_modules(9);
        let opts = FdaOptions {
            epochs: 3,
            batch_size: 4,
            ..FdaOptions::default()
        };
        let out = fda_train(&mut m, &src, &labels, &tgt, &cams, &opts).unwrap();
        for i in 0..out.bank.len() {
            assert_abs_diff_eq!(norm(out.bank.cells().row(i)), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn frozen_variants_change_outcome_but_not_determinism() {
        let (src, labels, tgt, cams) = tiny_world();
        let base = FdaOptions {
            epochs: 2,
            batch_size: 4,
            ..FdaOptions::default()
        };
        let frozen = FdaOptions {
            freeze_variants: true,
            ..base.clone()
        };
        let run = |o: &FdaOptions| {
            let mut m = tiny_modules(7);
            fda_train(&mut m, &src, &labels, &tgt, &cams, o).unwrap();
            m.encoder.to_flat()
        };
        assert_ne!(run(&base), run(&frozen));
        assert_eq!(run(&frozen), run(&frozen));
    }

    #[test]
    fn source_only_baseline_learns_source() {
        let (src, labels, _, _) = tiny_world();
        let mut m = tiny_modules(10);
        let trace = train_source_only(
            &mut m.encoder,
            &mut m.source_head,
            &src,
            &labels,
            10,
            4,
            0.01,
            3,
        )
        .unwrap();
        assert!(trace.last().unwrap().l_ce < trace.first().unwrap().l_ce);
        assert!(trace.iter().all(|r| r.l_cl == 0.0 && r.l_g == 0.0 && r.l_d == 0.0));
    }

    #[test]
    fn bank_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        let bank = bank_of(61, 5, 3);
        save_bank(&bank, &path).unwrap();
        let back = load_bank(&path).unwrap();
        assert_eq!(bank, back);
    }

    #[test]
    fn alignment_improves_target_clustering() {
        // Seeded default world: pairwise F of DBSCAN on unit embeddings
        // after training strictly exceeds the untrained encoder's.
        use crate::cluster::{dbscan, select_eps};
        use crate::eval::assignment_f_value;
        use crate::math::{pairwise_distance, Metric};
        use crate::world::{generate_world, WorldConfig};

        let world = WorldConfig::default();
        let ds = generate_world(&world).unwrap();
        let source_x = ds.source_features();
        let (source_labels, n_classes) = ds.source_labels().unwrap();
        let target_x = ds.target_features();
        let target_cams = ds.target_cameras();
        let target_ids = ds.target_identities().unwrap();
        let f_at = |encoder: &DenseNet| -> f64 {
            let unit = encoder.infer(&target_x).unwrap().normalized_rows().unwrap();
            let dist = pairwise_distance(&unit, Metric::CosineDist).unwrap();
            let eps = select_eps(&dist, 0.01).unwrap();
            let a = dbscan(&dist, eps, 4).unwrap();
            assignment_f_value(&a, &target_ids).unwrap().f_value
        };
        let mut modules = standard_modules(ds.raw_dim, n_classes, world.seed).unwrap();
        let before = f_at(&modules.encoder);
        let opts = FdaOptions {
            epochs: 40,
            ..FdaOptions::default()
        };
        fda_train(
            &mut modules, &source_x, &source_labels, &target_x, &target_cams, &opts,
        )
        .unwrap();
        let after = f_at(&modules.encoder);
        assert!(
            after > before,
            "clustering F fell from {} to {}",
            before,
            after
        );
    }
}
