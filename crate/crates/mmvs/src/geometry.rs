//! Plane-sweep homographies and differentiable depth-based warping.

use nalgebra::{Matrix3, Vector3};

use crate::camera::Camera;
use crate::error::{MvsError, Result};
use crate::tensor::Tensor;

/// Relative pose taking reference-camera coordinates to source-camera
/// coordinates.
pub fn relative_pose(reference: &Camera, source: &Camera) -> (Matrix3<f64>, Vector3<f64>) {
    let r_rel = source.rotation * reference.rotation.transpose();
    let t_rel = source.translation - r_rel * reference.translation;
    (r_rel, t_rel)
}

/// Homography mapping reference pixels to source pixels for a
/// fronto-parallel plane at depth `d` in the reference frame.
///
/// With the plane `{X : n^T X = d}`, `n = (0,0,1)` in reference-camera
/// coordinates, the map is `H(d) = K_src (R_rel + t_rel n^T / d) K_ref^-1`
/// (equivalently the textbook `-` form with the normal pointing at the
/// camera). Normalized so the bottom-right entry is 1 when nonzero; agrees
/// with project-after-backproject by construction.
pub fn plane_sweep_homography(reference: &Camera, source: &Camera, d: f64) -> Result<Matrix3<f64>> {
    if d <= 0.0 {
        return Err(MvsError::Numerical(format!(
            "plane depth must be positive, got {d}"
        )));
    }
    let k_ref_inv = reference
        .intrinsics
        .try_inverse()
        .ok_or_else(|| MvsError::Numerical("singular reference intrinsics".into()))?;
    let (r_rel, t_rel) = relative_pose(reference, source);
    let mut m = r_rel;
    // Add t_rel * n^T / d, n = e_z: only the last column changes.
    for row in 0..3 {
        m[(row, 2)] += t_rel[row] / d;
    }
    let mut h = source.intrinsics * m * k_ref_inv;
    if h[(2, 2)].abs() > 1e-12 {
        h /= h[(2, 2)];
    }
    Ok(h)
}

fn apply_homography(h: &Matrix3<f64>, x: f64, y: f64) -> [f64; 2] {
    let v = h * Vector3::new(x, y, 1.0);
    [v[0] / v[2], v[1] / v[2]]
}

/// Warps a source image into the reference view using a per-pixel depth map.
///
/// Each reference pixel is back-projected with its predicted depth, projected
/// into the source camera, and bilinearly sampled. Returns the warped image
/// and the out-of-image projection mask, which is 0 where the sample's
/// bilinear neighbours leave the image or the projected depth is
/// non-positive. Differentiable w.r.t. both `src_img` and `depth_map`.
pub fn warp_with_depth(
    src_img: &Tensor,
    ref_cam: &Camera,
    src_cam: &Camera,
    depth_map: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if depth_map.shape().len() != 2 {
        return Err(MvsError::shape(format!(
            "warp_with_depth: depth map {:?}",
            depth_map.shape()
        )));
    }
    let (h, w) = (depth_map.shape()[0], depth_map.shape()[1]);
    let k_ref_inv = ref_cam
        .intrinsics
        .try_inverse()
        .ok_or_else(|| MvsError::Numerical("singular reference intrinsics".into()))?;
    let (r_rel, t_rel) = relative_pose(ref_cam, src_cam);
    let a = src_cam.intrinsics * r_rel * k_ref_inv;
    let t = src_cam.intrinsics * t_rel;
    // Per-pixel source-space rays: y(p) = a * (x, y, 1) * depth + t.
    let n = h * w;
    let mut rays = vec![0.0; 3 * n];
    for py in 0..h {
        for px in 0..w {
            let v = a * Vector3::new(px as f64, py as f64, 1.0);
            let p = py * w + px;
            rays[p] = v[0];
            rays[n + p] = v[1];
            rays[2 * n + p] = v[2];
        }
    }
    let (coords, pos_depth) = Tensor::depth_to_coords(depth_map, &rays, [t[0], t[1], t[2]])?;
    let (warped, valid) = Tensor::bilinear_sample(src_img, &coords)?;
    let proj_mask = valid.mul(&pos_depth)?.detach();
    Ok((warped, proj_mask))
}

/// Plane-sweep warp of source features into the reference view for a list
/// of strictly increasing depth hypotheses. Out-of-bounds samples are 0.
pub fn warp_feature_volume(
    src_feat: &Tensor,
    ref_cam: &Camera,
    src_cam: &Camera,
    depth_values: &[f64],
) -> Result<Tensor> {
    if depth_values.is_empty() {
        return Err(MvsError::shape("warp_feature_volume: empty depth list"));
    }
    if depth_values.windows(2).any(|p| p[1] <= p[0]) || depth_values[0] <= 0.0 {
        return Err(MvsError::Numerical(
            "depth hypotheses must be positive and strictly increasing".into(),
        ));
    }
    let (fh, fw) = (src_feat.shape()[1], src_feat.shape()[2]);
    let mut slices = Vec::with_capacity(depth_values.len());
    for &d in depth_values {
        let h = plane_sweep_homography(ref_cam, src_cam, d)?;
        let mut coords = vec![0.0; 2 * fh * fw];
        let npix = fh * fw;
        for py in 0..fh {
            for px in 0..fw {
                let q = apply_homography(&h, px as f64, py as f64);
                coords[py * fw + px] = q[0];
                coords[npix + py * fw + px] = q[1];
            }
        }
        let coords = Tensor::from_vec(&[2, fh, fw], coords);
        let (warped, _valid) = Tensor::bilinear_sample(src_feat, &coords)?;
        slices.push(warped);
    }
    Tensor::stack_depth(&slices)
}

/// Uniform or inverse-depth hypothesis sampling over `[d_min, d_max]`.
pub fn depth_hypotheses(d_min: f64, d_max: f64, count: usize, inverse: bool) -> Vec<f64> {
    assert!(d_min > 0.0 && d_max > d_min && count >= 1);
    if count == 1 {
        return vec![(d_min + d_max) / 2.0];
    }
    (0..count)
        .map(|i| {
            let a = i as f64 / (count - 1) as f64;
            if inverse {
                1.0 / ((1.0 - a) / d_min + a / d_max)
            } else {
                d_min + a * (d_max - d_min)
            }
        })
        .collect()
}
