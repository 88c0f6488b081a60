//! Training objectives: SSIM, masked photometric reconstruction, edge-aware
//! depth smoothness, the combined self-supervised loss, and the supervised
//! L1 loss.

use crate::error::{MvsError, Result};
use crate::geometry::depth_hypotheses;
use crate::network::{forward, forward_depth, DepthPrediction};
use crate::scene::MultiViewSample;
use crate::tensor::{ParamSet, Tensor};

const SSIM_C1: f64 = 1e-4; // 0.01^2 for images in [0,1]
const SSIM_C2: f64 = 9e-4; // 0.03^2

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub gamma_photo: f64,
    pub gamma_ssim: f64,
    pub gamma_smooth: f64,
    /// Weight of the optional mask regularizer `-lambda * mean(log C)`
    /// guarding against confidence collapse; 0 disables it.
    pub mask_reg: f64,
    /// Divide the per-neighbour reconstruction sum by N.
    pub average_views: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma_photo: 5.0,
            gamma_ssim: 1.0,
            gamma_smooth: 0.01,
            mask_reg: 0.01,
            average_views: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_photo < 0.0 || self.gamma_ssim < 0.0 || self.gamma_smooth < 0.0 || self.mask_reg < 0.0 {
            return Err(MvsError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-pixel SSIM between two images `[C,H,W]`, averaged over channels.
/// Local statistics use a 3x3 box filter with reflection padding; output is
/// in [-1, 1] and differentiable in both inputs.
pub fn ssim_map(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(MvsError::shape(format!(
            "ssim_map: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mu_a = a.box_filter3x3()?;
    let mu_b = b.box_filter3x3()?;
    let mu_aa = mu_a.square();
    let mu_bb = mu_b.square();
    let mu_ab = mu_a.mul(&mu_b)?;
    let var_a = a.square().box_filter3x3()?.sub(&mu_aa)?;
    let var_b = b.square().box_filter3x3()?.sub(&mu_bb)?;
    let cov = a.mul(b)?.box_filter3x3()?.sub(&mu_ab)?;

    let num = mu_ab.scale(2.0).add_scalar(SSIM_C1).mul(&cov.scale(2.0).add_scalar(SSIM_C2))?;
    let den = mu_aa.add(&mu_bb)?.add_scalar(SSIM_C1).mul(&var_a.add(&var_b)?.add_scalar(SSIM_C2))?;
    num.div(&den)?.mean_channels()
}

fn expand_mask(mask: &Tensor, channels: usize) -> Result<Tensor> {
    let [h, w] = [mask.shape()[0], mask.shape()[1]];
    let m = mask.reshape(&[1, h, w])?;
    Tensor::concat_channels(&vec![m; channels])
}

/// Photometric reconstruction loss over all neighbours: a confidence- and
/// projection-masked L1 color term plus a projection-masked SSIM
/// dissimilarity term. L1 norms are means over pixels and channels so the
/// value is resolution independent.
pub fn recon_loss(pred: &DepthPrediction, weights: &LossWeights) -> Result<Tensor> {
    if pred.conf_masks.len() != pred.warped.len() {
        return Err(MvsError::shape(format!(
            "recon_loss: {} confidence masks for {} warped views",
            pred.conf_masks.len(),
            pred.warped.len()
        )));
    }
    let n = pred.warped.len();
    let mut total = Tensor::scalar(0.0);
    for i in 0..n {
        let proj3 = expand_mask(&pred.proj_masks[i], 3)?;
        let conf3 = expand_mask(&pred.conf_masks[i], 3)?;
        let diff = pred.ref_small.sub(&pred.warped[i])?;
        let photo = conf3.mul(&proj3)?.mul(&diff)?.abs().mean_all();

        let masked_ref = proj3.mul(&pred.ref_small)?;
        let masked_warp = proj3.mul(&pred.warped[i])?;
        let ssim = ssim_map(&masked_ref, &masked_warp)?;
        let dssim = ssim.neg().add_scalar(1.0).abs().mean_all();

        total = total.add(&photo.scale(weights.gamma_photo))?;
        total = total.add(&dssim.scale(weights.gamma_ssim))?;
        if weights.mask_reg > 0.0 {
            let reg = pred.conf_masks[i].ln().mean_all().scale(-weights.mask_reg);
            total = total.add(&reg)?;
        }
    }
    if weights.average_views {
        total = total.scale(1.0 / n as f64);
    }
    Ok(total)
}

/// Edge-aware smoothness: depth gradients downweighted where the reference
/// image has strong gradients. Forward differences; the last column/row is
/// excluded by construction; mean over the remaining pixels.
pub fn smooth_loss(depth: &Tensor, ref_image: &Tensor) -> Result<Tensor> {
    if depth.shape().len() != 2 || ref_image.shape().len() != 3 {
        return Err(MvsError::shape(format!(
            "smooth_loss: depth {:?}, image {:?}",
            depth.shape(),
            ref_image.shape()
        )));
    }
    if ref_image.shape()[1..] != depth.shape()[..] {
        return Err(MvsError::shape(
            "smooth_loss: image must be at depth resolution".to_string(),
        ));
    }
    let [h, w] = [depth.shape()[0], depth.shape()[1]];
    let mut total = Tensor::scalar(0.0);
    if w >= 2 {
        let ix = ref_image.forward_diff_x().square().sum_channels()?.sqrt();
        total = total.add(&depth.forward_diff_x().abs().mul(&ix.neg().exp())?.mean_all())?;
    }
    if h >= 2 {
        let iy = ref_image.forward_diff_y().square().sum_channels()?.sqrt();
        total = total.add(&depth.forward_diff_y().abs().mul(&iy.neg().exp())?.mean_all())?;
    }
    Ok(total)
}

/// Self-supervised loss for one sample: full forward pass, reconstruction
/// plus weighted smoothness. This is the inner-loop and fine-tuning
/// objective.
pub fn self_loss(
    params: &ParamSet,
    sample: &MultiViewSample,
    num_depths: usize,
    weights: &LossWeights,
) -> Result<Tensor> {
    let depths = depth_hypotheses(sample.depth_min, sample.depth_max, num_depths, false);
    let pred = forward(params, sample, &depths)?;
    let recon = recon_loss(&pred, weights)?;
    let smooth = smooth_loss(&pred.depth, &pred.ref_small)?;
    recon.add(&smooth.scale(weights.gamma_smooth))
}

/// Masked mean absolute depth error against ground truth, ignoring pixels
/// where the ground truth is invalid (0).
pub fn sup_loss_on_pred(depth: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if depth.shape() != gt.shape() {
        return Err(MvsError::shape(format!(
            "sup_loss: prediction {:?} vs ground truth {:?}",
            depth.shape(),
            gt.shape()
        )));
    }
    let valid: Vec<f64> = gt.values().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    let count: f64 = valid.iter().sum();
    if count == 0.0 {
        return Err(MvsError::Numerical("sup_loss: no valid ground-truth pixels".into()));
    }
    let mask = Tensor::from_vec(gt.shape(), valid);
    Ok(depth.sub(gt)?.mul(&mask)?.abs().sum_all().scale(1.0 / count))
}

/// Supervised L1 loss for one sample: depth-only forward pass against the
/// sample's ground-truth depth.
pub fn sup_loss(params: &ParamSet, sample: &MultiViewSample, num_depths: usize) -> Result<Tensor> {
    let gt = sample
        .gt_depth
        .as_ref()
        .ok_or_else(|| MvsError::Config("sup_loss: sample carries no ground-truth depth".into()))?;
    let depths = depth_hypotheses(sample.depth_min, sample.depth_max, num_depths, false);
    let pred = forward_depth(params, sample, &depths)?;
    sup_loss_on_pred(&pred.depth, gt)
}
