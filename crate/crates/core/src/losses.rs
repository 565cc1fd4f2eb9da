//! Training objectives: knowledge-boosted attention loss, InfoNCE and the
//! mask-enhanced unsupervised/supervised PatchNCE losses, per-scale
//! discriminator losses with the knowledge-aware masked term, and the
//! weighted total.

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::knowledge_mask::{binarize, downsample_mask, DownsampleTo, KnowledgeMask};
use crate::models::{conditioned_pair, MultiScaleDiscriminator, PatchEmbeddingSet};
use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

/// Softmax temperature for patch similarity.
pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub lambda_up: f64,
    pub lambda_sp: f64,
    pub lambda_att: f64,
    pub lambda_gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_up: 1.0,
            lambda_sp: 1.0,
            lambda_att: 4.0,
            lambda_gan: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub up: f64,
    pub sp: f64,
    pub att: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn csv_header() -> &'static str {
        "step,up,sp,att,gan_g,gan_d,total"
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            step, self.up, self.sp, self.att, self.gan_g, self.gan_d, self.total
        )
    }
}

// ---------------------------------------------------------------------------
// Attention loss
// ---------------------------------------------------------------------------

/// `mean((A - m)^2)` with `A = relu(mean_c(f_l) ⊙ m)`. `f_l` is the
/// generator's last activation map (C×H×W), reduced to one channel by mean.
pub fn attention_loss(f_l: &Tensor, mask: &KnowledgeMask) -> Result<Tensor> {
    let sh = f_l.shape();
    if sh.len() != 3 || (sh[1], sh[2]) != mask.resolution() {
        return Err(Error::Contract(format!(
            "attention_loss: activation {sh:?} does not match mask {:?}",
            mask.resolution()
        )));
    }
    let m = mask.values.clone().into_dyn();
    let attention = f_l.channel_mean().mul_const(&m).relu();
    Ok(attention
        .sub(&Tensor::constant(m))
        .square()
        .mean_all())
}

// ---------------------------------------------------------------------------
// InfoNCE
// ---------------------------------------------------------------------------

fn check_rows_nonzero(t: &Tensor, what: &str) -> Result<()> {
    let a = t.to_array();
    let d = *a.shape().last().unwrap();
    for (i, row) in a.iter().cloned().collect::<Vec<_>>().chunks(d).enumerate() {
        let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-9 {
            return Err(Error::Contract(format!("{what}: zero-norm vector at row {i}")));
        }
    }
    Ok(())
}

/// Contrastive loss of one anchor against one positive and N negatives.
/// Similarity is the dot product of unit vectors divided by `tau`.
pub fn info_nce(
    anchor: &Tensor,
    positive: &Tensor,
    negatives: &Tensor,
    tau: f64,
) -> Result<Tensor> {
    let d = *anchor.shape().last().unwrap();
    let n = negatives.shape()[0];
    if n < 1 {
        return Err(Error::Contract("info_nce: need at least one negative".into()));
    }
    check_rows_nonzero(anchor, "info_nce anchor")?;
    check_rows_nonzero(positive, "info_nce positive")?;
    check_rows_nonzero(negatives, "info_nce negatives")?;
    let a = anchor.reshape(&[1, d]);
    let p = positive.reshape(&[1, d]);
    let pos_sim = a.matmul_nt(&p).mul_scalar(1.0 / tau); // 1×1
    let neg_sims = a.matmul_nt(negatives).mul_scalar(1.0 / tau); // 1×N
    // logits row [pos, neg_1..neg_N]
    let logits = crate::autograd::concat_cols(&[pos_sim.clone(), neg_sims]);
    let lse = logits.logsumexp_rows().sum_all();
    Ok(lse.sub(&pos_sim.sum_all()))
}

// ---------------------------------------------------------------------------
// Masked PatchNCE
// ---------------------------------------------------------------------------

/// Shared core of the UP and SP losses: for each sampled location the anchor
/// (generated-frame embedding) takes the other set's embedding at the same
/// location as positive and the other set's remaining locations as negatives.
/// Zero-weight locations are dropped entirely; per-location terms are
/// weighted by the recorded mask weights and renormalized.
pub fn masked_patch_nce(
    gen_embeds: &PatchEmbeddingSet,
    other_embeds: &PatchEmbeddingSet,
    tau: f64,
) -> Result<Tensor> {
    if gen_embeds.locations != other_embeds.locations {
        return Err(Error::Contract(
            "masked_patch_nce: embedding sets sampled at different locations".into(),
        ));
    }
    let levels = gen_embeds.embeddings.len();
    let mut total = Tensor::scalar_const(0.0);
    for lvl in 0..levels {
        let weights = &gen_embeds.weights[lvl];
        let keep: Vec<usize> = weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, _)| i)
            .collect();
        if keep.len() < 2 {
            continue; // no negatives available (or fully masked out)
        }
        let a = gen_embeds.embeddings[lvl].gather_rows(&keep);
        let b = other_embeds.embeddings[lvl].gather_rows(&keep);
        let logits = a.matmul_nt(&b).mul_scalar(1.0 / tau); // n×n, diagonal = positives
        let per_loc = logits.logsumexp_rows().sub(&logits.take_diag());
        let w: Vec<f64> = keep.iter().map(|&i| weights[i]).collect();
        let wsum: f64 = w.iter().sum();
        if wsum <= 0.0 {
            continue;
        }
        let warr = ArrayD::from_shape_vec(IxDyn(&[keep.len()]), w).unwrap();
        let level_loss = per_loc.mul_const(&warr).sum_all().mul_scalar(1.0 / wsum);
        total = total.add(&level_loss);
    }
    Ok(total.mul_scalar(1.0 / levels as f64))
}

/// Mask-enhanced unsupervised PatchNCE: anchors from the generated frame,
/// positives/negatives from the CF image.
pub fn masked_up_loss(
    gen_embeds: &PatchEmbeddingSet,
    cf_embeds: &PatchEmbeddingSet,
    tau: f64,
) -> Result<Tensor> {
    masked_patch_nce(gen_embeds, cf_embeds, tau)
}

/// Mask-enhanced supervised PatchNCE: positives/negatives from the
/// ground-truth frame.
pub fn masked_sp_loss(
    gen_embeds: &PatchEmbeddingSet,
    gt_embeds: &PatchEmbeddingSet,
    tau: f64,
) -> Result<Tensor> {
    masked_patch_nce(gen_embeds, gt_embeds, tau)
}

// ---------------------------------------------------------------------------
// GAN losses
// ---------------------------------------------------------------------------

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.array().iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("{what}: non-finite logits")));
    }
    Ok(())
}

/// Discriminator objective at scale `k` plus the non-saturating generator
/// term. Returns `(d_term, g_term)`:
/// `d = -mean log σ(D(x,y)) - mean log(1-σ(D(x,G(x))))`,
/// `g = -mean log σ(D(x,G(x)))`.
/// The fake frame is detached inside the `d` term so a discriminator update
/// never reaches generator parameters.
pub fn discriminator_loss(
    disc: &MultiScaleDiscriminator,
    k: usize,
    cf: &Array3<f64>,
    real_frame: &Tensor,
    fake_frame: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let real_logits = disc.forward(k, &conditioned_pair(cf, real_frame))?;
    let fake_d_logits = disc.forward(k, &conditioned_pair(cf, &fake_frame.detach()))?;
    let fake_g_logits = disc.forward(k, &conditioned_pair(cf, fake_frame))?;
    check_finite(&real_logits, "discriminator_loss real")?;
    check_finite(&fake_d_logits, "discriminator_loss fake")?;
    let d = real_logits
        .neg_log_sigmoid()
        .mean_all()
        .add(&fake_d_logits.mul_scalar(-1.0).neg_log_sigmoid().mean_all());
    let g = fake_g_logits.neg_log_sigmoid().mean_all();
    Ok((d, g))
}

fn apply_mask(t: &Tensor, mask2d: &ndarray::Array2<f64>) -> Tensor {
    let sh = t.shape();
    let mut m = ArrayD::zeros(IxDyn(&sh));
    for c in 0..sh[0] {
        for i in 0..sh[1] {
            for j in 0..sh[2] {
                m[[c, i, j]] = mask2d[[i, j]];
            }
        }
    }
    t.mul_const(&m)
}

/// Knowledge-aware GAN loss at scale `k`: the plain discriminator loss plus
/// the same loss on mask-multiplied inputs. The binary mask is area-pooled
/// to the scale and re-binarized at 0.5 before multiplication.
pub fn gan_loss_knowledge_aware(
    disc: &MultiScaleDiscriminator,
    k: usize,
    cf: &Array3<f64>,
    real_frame: &Tensor,
    fake_frame: &Tensor,
    mask: &KnowledgeMask,
) -> Result<(Tensor, Tensor)> {
    let (d_plain, g_plain) = discriminator_loss(disc, k, cf, real_frame, fake_frame)?;

    let factor = 1usize << (k - 1);
    let scaled_mask = binarize(&downsample_mask(mask, DownsampleTo::Factor(factor))?, 0.5);
    let pool = |t: &Tensor| if factor == 1 { t.clone() } else { t.avg_pool2(factor) };
    let cf_t = Tensor::constant(cf.clone().into_dyn());
    let cf_masked = apply_mask(&pool(&cf_t), &scaled_mask.values);
    let real_masked = apply_mask(&pool(real_frame), &scaled_mask.values);
    let fake_scaled = pool(fake_frame);
    let fake_masked_d = apply_mask(&fake_scaled.detach(), &scaled_mask.values);
    let fake_masked_g = apply_mask(&fake_scaled, &scaled_mask.values);

    let dk = &disc.scales[k - 1];
    let real_logits = dk.forward(&crate::autograd::concat_channels(&[
        cf_masked.clone(),
        real_masked,
    ]))?;
    let fake_d_logits = dk.forward(&crate::autograd::concat_channels(&[
        cf_masked.clone(),
        fake_masked_d,
    ]))?;
    let fake_g_logits =
        dk.forward(&crate::autograd::concat_channels(&[cf_masked, fake_masked_g]))?;
    check_finite(&real_logits, "gan_loss_knowledge_aware real")?;
    check_finite(&fake_d_logits, "gan_loss_knowledge_aware fake")?;
    let d_masked = real_logits
        .neg_log_sigmoid()
        .mean_all()
        .add(&fake_d_logits.mul_scalar(-1.0).neg_log_sigmoid().mean_all());
    let g_masked = fake_g_logits.neg_log_sigmoid().mean_all();

    Ok((d_plain.add(&d_masked), g_plain.add(&g_masked)))
}

// ---------------------------------------------------------------------------
// Total
// ---------------------------------------------------------------------------

/// Weighted generator objective. The returned tensor is the differentiable
/// total; the breakdown carries the raw part values for logging.
pub fn total_loss(
    up: &Tensor,
    sp: &Tensor,
    att: &Tensor,
    gan_g: &Tensor,
    gan_d: &Tensor,
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    let breakdown = LossBreakdown {
        up: up.scalar(),
        sp: sp.scalar(),
        att: att.scalar(),
        gan_g: gan_g.scalar(),
        gan_d: gan_d.scalar(),
        total: 0.0,
    };
    let total = up
        .mul_scalar(weights.lambda_up)
        .add(&sp.mul_scalar(weights.lambda_sp))
        .add(&att.mul_scalar(weights.lambda_att))
        .add(&gan_g.mul_scalar(weights.lambda_gan));
    let mut breakdown = breakdown;
    breakdown.total = total.scalar();
    if !breakdown.total.is_finite() || !breakdown.gan_d.is_finite() {
        return Err(Error::TrainingDiverged {
            step: 0,
            detail: format!("non-finite loss parts: {breakdown:?}"),
        });
    }
    Ok((total, breakdown))
}
