//! Plane-sweep stereo network: shared feature extractor, variance cost
//! volume, 3D encoder-decoder regularization, soft-argmin depth regression,
//! and the per-neighbour confidence-mask subnetwork.

use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::error::{MvsError, Result};
use crate::geometry::{warp_feature_volume, warp_with_depth};
use crate::scene::{MultiViewSample, DEPTH_SCALE};
use crate::tensor::{kaiming_uniform, ParamSet, Tensor};

/// Name prefix of the confidence-mask subnetwork parameters (the freezable
/// subset during fine-tuning).
pub const TAU_PREFIX: &str = "mask.";
const FEAT_PREFIX: &str = "feat.";
const REG_PREFIX: &str = "reg.";

/// Encoder-decoder depth of the cost regularizer: every volume axis must be
/// divisible by 2^LEVELS.
pub const REG_LEVELS: usize = 2;

/// Architecture hyperparameters that vary between presets.
#[derive(Debug, Clone, Copy)]
pub struct ArchConfig {
    /// Feature channels C of the extractor and regularizer.
    pub channels: usize,
}

/// Full forward output for one sample.
pub struct DepthPrediction {
    /// Regressed depth map `[H',W']`, a convex combination of the depth
    /// hypotheses.
    pub depth: Tensor,
    /// Per-pixel quality: probability mass in the 4 depth bins around the
    /// per-pixel argmax. Not differentiable.
    pub prob: Tensor,
    /// Per-neighbour confidence masks in (0,1); empty in depth-only mode.
    pub conf_masks: Vec<Tensor>,
    /// Per-neighbour out-of-image projection masks (values in {0,1}).
    pub proj_masks: Vec<Tensor>,
    /// Per-neighbour photometric error maps `[3,H',W']`, gradients blocked.
    pub err_maps: Vec<Tensor>,
    /// Neighbour images warped into the reference view with the predicted
    /// depth, `[3,H',W']` each.
    pub warped: Vec<Tensor>,
    /// Reference image downsampled to the depth resolution.
    pub ref_small: Tensor,
}

fn is_tau(name: &str) -> bool {
    name.starts_with(TAU_PREFIX)
}

/// Update filter excluding the confidence-mask parameters.
pub fn non_tau(name: &str) -> bool {
    !is_tau(name)
}

/// Checks the feat/reg/mask prefixes partition the parameter names.
pub fn validate_partition(params: &ParamSet) -> Result<()> {
    for name in params.names() {
        let known = [FEAT_PREFIX, REG_PREFIX, TAU_PREFIX]
            .iter()
            .filter(|p| name.starts_with(**p))
            .count();
        if known != 1 {
            return Err(MvsError::Config(format!(
                "parameter {name:?} does not belong to exactly one of feat/reg/mask"
            )));
        }
    }
    Ok(())
}

fn conv2d_init(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    out_c: usize,
    in_c: usize,
) {
    let fan_in = in_c * 9;
    params.insert(
        format!("{name}.w"),
        kaiming_uniform(rng, &[out_c, in_c, 3, 3], fan_in),
    );
    params.insert(format!("{name}.b"), Tensor::param(&[out_c], vec![0.0; out_c]));
}

fn conv3d_init(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    out_c: usize,
    in_c: usize,
) {
    let fan_in = in_c * 27;
    params.insert(
        format!("{name}.w"),
        kaiming_uniform(rng, &[out_c, in_c, 3, 3, 3], fan_in),
    );
    params.insert(format!("{name}.b"), Tensor::param(&[out_c], vec![0.0; out_c]));
}

fn norm_init(params: &mut ParamSet, name: &str, c: usize) {
    params.insert(format!("{name}.gain"), Tensor::param(&[c], vec![1.0; c]));
    params.insert(format!("{name}.shift"), Tensor::param(&[c], vec![0.0; c]));
}

/// Fresh model parameters: a 6-layer feature extractor, a 2-level 3D
/// encoder-decoder regularizer, and the 4-layer mask network, all with
/// Kaiming-uniform weights drawn from `rng`.
pub fn init_model_params(rng: &mut ChaCha8Rng, arch: &ArchConfig) -> ParamSet {
    let c = arch.channels;
    let mut p = ParamSet::new();

    conv2d_init(&mut p, rng, "feat.conv0", c, 3);
    for i in 1..6 {
        conv2d_init(&mut p, rng, &format!("feat.conv{i}"), c, c);
    }
    for i in 0..5 {
        norm_init(&mut p, &format!("feat.norm{i}"), c);
    }

    for name in ["reg.enc0", "reg.down1", "reg.enc1", "reg.down2", "reg.mid", "reg.up1", "reg.up2"] {
        conv3d_init(&mut p, rng, name, c, c);
        norm_init(&mut p, &format!("{name}n"), c);
    }
    conv3d_init(&mut p, rng, "reg.out", 1, c);

    conv2d_init(&mut p, rng, "mask.conv0", c, 4);
    conv2d_init(&mut p, rng, "mask.conv1", c, c);
    conv2d_init(&mut p, rng, "mask.conv2", c, c);
    conv2d_init(&mut p, rng, "mask.conv3", 1, c);
    for i in 0..3 {
        norm_init(&mut p, &format!("mask.norm{i}"), c);
    }
    p
}

fn get<'a>(params: &'a ParamSet, name: &str) -> Result<&'a Tensor> {
    params
        .get(name)
        .ok_or_else(|| MvsError::Config(format!("missing parameter {name:?}")))
}

fn conv_norm_relu2d(x: &Tensor, params: &ParamSet, conv: &str, norm: &str, stride: usize) -> Result<Tensor> {
    let y = x.conv2d(get(params, &format!("{conv}.w"))?, get(params, &format!("{conv}.b"))?, stride, 1)?;
    let y = y.spatial_norm(get(params, &format!("{norm}.gain"))?, get(params, &format!("{norm}.shift"))?)?;
    Ok(y.relu())
}

fn conv_norm_relu3d(x: &Tensor, params: &ParamSet, name: &str, stride: usize) -> Result<Tensor> {
    let y = x.conv3d(get(params, &format!("{name}.w"))?, get(params, &format!("{name}.b"))?, stride, 1)?;
    let y = y.spatial_norm(get(params, &format!("{name}n.gain"))?, get(params, &format!("{name}n.shift"))?)?;
    Ok(y.relu())
}

/// Deep features at quarter resolution: 6 conv layers, two stride-2 stages,
/// shared across reference and neighbour images.
pub fn extract_features(image: &Tensor, params: &ParamSet) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[1] % 4 != 0 || shape[2] % 4 != 0 {
        return Err(MvsError::shape(format!(
            "extract_features: image {shape:?} must be [3,H,W] with H, W divisible by 4"
        )));
    }
    let x = conv_norm_relu2d(image, params, "feat.conv0", "feat.norm0", 1)?;
    let x = conv_norm_relu2d(&x, params, "feat.conv1", "feat.norm1", 2)?;
    let x = conv_norm_relu2d(&x, params, "feat.conv2", "feat.norm2", 1)?;
    let x = conv_norm_relu2d(&x, params, "feat.conv3", "feat.norm3", 2)?;
    let x = conv_norm_relu2d(&x, params, "feat.conv4", "feat.norm4", 1)?;
    x.conv2d(get(params, "feat.conv5.w")?, get(params, "feat.conv5.b")?, 1, 1)
}

/// Per-channel variance across the reference features (broadcast over depth)
/// and the N warped feature volumes. Out-of-bounds warped features enter as
/// plain zeros, a bias the confidence masks are meant to discount.
pub fn build_cost_volume(ref_feat: &Tensor, warped: &[Tensor]) -> Result<Tensor> {
    if warped.is_empty() {
        return Err(MvsError::shape("build_cost_volume: no warped views"));
    }
    let d = warped[0].shape().get(1).copied().unwrap_or(0);
    let ref_vol = ref_feat.broadcast_over_depth(d)?;
    for w in warped {
        if w.shape() != ref_vol.shape() {
            return Err(MvsError::shape(format!(
                "build_cost_volume: warped {:?} vs reference {:?}",
                w.shape(),
                ref_vol.shape()
            )));
        }
    }
    let mut views = vec![ref_vol];
    views.extend_from_slice(warped);
    Tensor::variance_over_views(&views)
}

/// 3D encoder-decoder over the cost volume followed by a softmax over depth
/// of the negated cost: high matching cost becomes low probability.
pub fn regularize_volume(cost: &Tensor, params: &ParamSet) -> Result<Tensor> {
    let s = cost.shape();
    if s.len() != 4 {
        return Err(MvsError::shape(format!("regularize_volume: cost {s:?}")));
    }
    let div = 1 << REG_LEVELS;
    if s[1] % div != 0 || s[2] % div != 0 || s[3] % div != 0 {
        return Err(MvsError::shape(format!(
            "regularize_volume: volume dims {:?} must be divisible by {div}",
            &s[1..]
        )));
    }
    let x0 = conv_norm_relu3d(cost, params, "reg.enc0", 1)?;
    let x1 = conv_norm_relu3d(&x0, params, "reg.down1", 2)?;
    let x1 = conv_norm_relu3d(&x1, params, "reg.enc1", 1)?;
    let x2 = conv_norm_relu3d(&x1, params, "reg.down2", 2)?;
    let x2 = conv_norm_relu3d(&x2, params, "reg.mid", 1)?;
    let u1 = conv_norm_relu3d(&x2.upsample2x_nearest3d()?, params, "reg.up1", 1)?.add(&x1)?;
    let u0 = conv_norm_relu3d(&u1.upsample2x_nearest3d()?, params, "reg.up2", 1)?.add(&x0)?;
    let logits = u0.conv3d(get(params, "reg.out.w")?, get(params, "reg.out.b")?, 1, 1)?;
    let logits = logits.reshape(&[s[1], s[2], s[3]])?;
    logits.neg().softmax_over_depth()
}

/// Soft-argmin depth regression plus the fusion quality map: the probability
/// mass in the 4 bins around each pixel's argmax (not differentiable).
pub fn soft_argmin_depth(prob: &Tensor, depth_values: &[f64]) -> Result<(Tensor, Tensor)> {
    let depth = prob.collapse_depth(depth_values)?;
    let s = prob.shape();
    let (d, h, w) = (s[0], s[1], s[2]);
    let pv = prob.values();
    let mut quality = vec![0.0f64; h * w];
    for p in 0..h * w {
        let mut best = 0usize;
        for j in 1..d {
            if pv[j * h * w + p] > pv[best * h * w + p] {
                best = j;
            }
        }
        let lo = best.saturating_sub(1);
        let hi = (best + 2).min(d - 1);
        quality[p] = (lo..=hi).map(|j| pv[j * h * w + p]).sum();
    }
    Ok((depth, Tensor::from_vec(&[h, w], quality)))
}

/// Per-neighbour confidence masks from the detached photometric error map
/// (3 channels) and projection mask (1 channel): a 4-layer CNN with shared
/// weights and a sigmoid output in (0,1).
pub fn predict_confidence(
    err_maps: &[Tensor],
    proj_masks: &[Tensor],
    params: &ParamSet,
) -> Result<Vec<Tensor>> {
    if err_maps.len() != proj_masks.len() {
        return Err(MvsError::shape(format!(
            "predict_confidence: {} error maps vs {} projection masks",
            err_maps.len(),
            proj_masks.len()
        )));
    }
    let mut out = Vec::with_capacity(err_maps.len());
    for (err, proj) in err_maps.iter().zip(proj_masks) {
        let [h, w] = [proj.shape()[0], proj.shape()[1]];
        if err.shape() != [3, h, w] {
            return Err(MvsError::shape(format!(
                "predict_confidence: error map {:?}, projection mask {:?}",
                err.shape(),
                proj.shape()
            )));
        }
        let input = Tensor::concat_channels(&[err.clone(), proj.reshape(&[1, h, w])?])?;
        let x = conv_norm_relu2d(&input, params, "mask.conv0", "mask.norm0", 1)?;
        let x = conv_norm_relu2d(&x, params, "mask.conv1", "mask.norm1", 1)?;
        let x = conv_norm_relu2d(&x, params, "mask.conv2", "mask.norm2", 1)?;
        let x = x.conv2d(get(params, "mask.conv3.w")?, get(params, "mask.conv3.b")?, 1, 1)?;
        out.push(x.sigmoid().reshape(&[h, w])?);
    }
    Ok(out)
}

fn small_camera(cam: &Camera) -> Camera {
    cam.scaled(DEPTH_SCALE)
}

fn run_forward(
    params: &ParamSet,
    sample: &MultiViewSample,
    depth_values: &[f64],
    with_masks: bool,
) -> Result<DepthPrediction> {
    if sample.neighbors.is_empty() {
        return Err(MvsError::shape("forward: sample has no neighbour views"));
    }
    let ref_cam = small_camera(&sample.reference.camera);
    let ref_feat = extract_features(&sample.reference.image, params)?;
    let mut warped_feats = Vec::with_capacity(sample.neighbors.len());
    for nb in &sample.neighbors {
        let feat = extract_features(&nb.image, params)?;
        warped_feats.push(warp_feature_volume(
            &feat,
            &ref_cam,
            &small_camera(&nb.camera),
            depth_values,
        )?);
    }
    let cost = build_cost_volume(&ref_feat, &warped_feats)?;
    let prob_volume = regularize_volume(&cost, params)?;
    let (depth, prob) = soft_argmin_depth(&prob_volume, depth_values)?;

    let ref_small = sample.reference.image.avg_downsample2d(DEPTH_SCALE)?;
    let mut warped = Vec::new();
    let mut proj_masks = Vec::new();
    let mut err_maps = Vec::new();
    for nb in &sample.neighbors {
        let nb_small = nb.image.avg_downsample2d(DEPTH_SCALE)?;
        let (w, proj) = warp_with_depth(&nb_small, &ref_cam, &small_camera(&nb.camera), &depth)?;
        err_maps.push(ref_small.sub(&w)?.abs().detach());
        warped.push(w);
        proj_masks.push(proj);
    }
    let conf_masks = if with_masks {
        predict_confidence(&err_maps, &proj_masks, params)?
    } else {
        Vec::new()
    };
    Ok(DepthPrediction {
        depth,
        prob,
        conf_masks,
        proj_masks,
        err_maps,
        warped,
        ref_small,
    })
}

/// Full forward pass: features, cost volume, regularization, soft-argmin
/// depth, image warping, and confidence masks.
pub fn forward(
    params: &ParamSet,
    sample: &MultiViewSample,
    depth_values: &[f64],
) -> Result<DepthPrediction> {
    run_forward(params, sample, depth_values, true)
}

/// Forward pass without the confidence-mask branch, for purely supervised
/// objectives that never read the masks.
pub fn forward_depth(
    params: &ParamSet,
    sample: &MultiViewSample,
    depth_values: &[f64],
) -> Result<DepthPrediction> {
    run_forward(params, sample, depth_values, false)
}
