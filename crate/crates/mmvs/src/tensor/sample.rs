//! Differentiable sampling primitives: bilinear image sampling, the fused
//! depth-to-pixel projection used by depth-based warping, and the 3x3 box
//! filter backing SSIM statistics.

use super::Tensor;
use crate::error::{MvsError, Result};

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

impl Tensor {
    /// Bilinear sampling of `image [C,H,W]` at continuous pixel coordinates
    /// `coords [2,H',W']` (row 0 = x, row 1 = y).
    ///
    /// Returns `(sampled [C,H',W'], valid [H',W'])`. A location is valid only
    /// if all four bilinear neighbours lie inside the image; invalid samples
    /// are 0. Differentiable w.r.t. both image and coordinates where valid.
    pub fn bilinear_sample(image: &Tensor, coords: &Tensor) -> Result<(Tensor, Tensor)> {
        if image.shape().len() != 3 || coords.shape().len() != 3 || coords.shape()[0] != 2 {
            return Err(MvsError::shape(format!(
                "bilinear_sample: image {:?}, coords {:?}",
                image.shape(),
                coords.shape()
            )));
        }
        let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        let (oh, ow) = (coords.shape()[1], coords.shape()[2]);
        let n = oh * ow;
        let mut out = vec![0.0; c * n];
        let mut valid = vec![0.0; n];
        let iv = image.values();
        let cv = coords.values();
        for p in 0..n {
            let x = cv[p];
            let y = cv[n + p];
            if !in_bounds(x, y, w, h) {
                continue;
            }
            valid[p] = 1.0;
            let (x0, x1, fx) = cell(x, w);
            let (y0, y1, fy) = cell(y, h);
            for ch in 0..c {
                let base = ch * h * w;
                let v00 = iv[base + y0 * w + x0];
                let v01 = iv[base + y0 * w + x1];
                let v10 = iv[base + y1 * w + x0];
                let v11 = iv[base + y1 * w + x1];
                out[ch * n + p] = v00 * (1.0 - fx) * (1.0 - fy)
                    + v01 * fx * (1.0 - fy)
                    + v10 * (1.0 - fx) * fy
                    + v11 * fx * fy;
            }
        }
        let valid_t = Tensor::from_vec(&[oh, ow], valid.clone());
        let sampled = Tensor::from_op(
            vec![c, oh, ow],
            out,
            vec![image.clone(), coords.clone()],
            Box::new(move |grad_out, parents| {
                let (img, crd) = (&parents[0], &parents[1]);
                let gi = img.needs_grad();
                let gc = crd.needs_grad();
                if !gi && !gc {
                    return;
                }
                let iv = img.values();
                let cv = crd.values();
                for p in 0..n {
                    let x = cv[p];
                    let y = cv[n + p];
                    if !in_bounds(x, y, w, h) {
                        continue;
                    }
                    let (x0, x1, fx) = cell(x, w);
                    let (y0, y1, fy) = cell(y, h);
                    let mut gx = 0.0;
                    let mut gy = 0.0;
                    for ch in 0..c {
                        let g = grad_out[ch * n + p];
                        if g == 0.0 {
                            continue;
                        }
                        let base = ch * h * w;
                        let i00 = base + y0 * w + x0;
                        let i01 = base + y0 * w + x1;
                        let i10 = base + y1 * w + x0;
                        let i11 = base + y1 * w + x1;
                        if gi {
                            img.accumulate_grad(i00, g * (1.0 - fx) * (1.0 - fy));
                            img.accumulate_grad(i01, g * fx * (1.0 - fy));
                            img.accumulate_grad(i10, g * (1.0 - fx) * fy);
                            img.accumulate_grad(i11, g * fx * fy);
                        }
                        if gc {
                            gx += g
                                * ((iv[i01] - iv[i00]) * (1.0 - fy) + (iv[i11] - iv[i10]) * fy);
                            gy += g
                                * ((iv[i10] - iv[i00]) * (1.0 - fx) + (iv[i11] - iv[i01]) * fx);
                        }
                    }
                    if gc {
                        crd.accumulate_grad(p, gx);
                        crd.accumulate_grad(n + p, gy);
                    }
                }
            }),
        );
        Ok((sampled, valid_t))
    }

    /// Maps a per-pixel depth map `[H,W]` to source-view pixel coordinates
    /// `[2,H,W]` through a fixed projective transform.
    ///
    /// For each pixel, the source camera point is `y = g * depth + t`, where
    /// `g` (`[3,H,W]`, constant) is the pre-multiplied back-projection ray
    /// and `t` (`[3]`) the translation column; output coordinates are
    /// `(y0/y2, y1/y2)`. Pixels projecting to non-positive source depth get
    /// far out-of-image coordinates and no gradient. Returns the coordinate
    /// tensor and the positive-depth indicator `[H,W]`.
    pub fn depth_to_coords(depth: &Tensor, rays: &[f64], t: [f64; 3]) -> Result<(Tensor, Tensor)> {
        if depth.shape().len() != 2 {
            return Err(MvsError::shape(format!(
                "depth_to_coords: depth {:?}",
                depth.shape()
            )));
        }
        let n = depth.len();
        if rays.len() != 3 * n {
            return Err(MvsError::shape("depth_to_coords: rays size mismatch"));
        }
        let (h, w) = (depth.shape()[0], depth.shape()[1]);
        const FAR: f64 = -1e9;
        let mut out = vec![FAR; 2 * n];
        let mut pos = vec![0.0; n];
        for p in 0..n {
            let d = depth.values()[p];
            let y2 = rays[2 * n + p] * d + t[2];
            if y2 > 1e-9 {
                pos[p] = 1.0;
                out[p] = (rays[p] * d + t[0]) / y2;
                out[n + p] = (rays[n + p] * d + t[1]) / y2;
            }
        }
        let rays_owned = rays.to_vec();
        let coords = Tensor::from_op(
            vec![2, h, w],
            out,
            vec![depth.clone()],
            Box::new(move |grad_out, parents| {
                let dep = &parents[0];
                if !dep.needs_grad() {
                    return;
                }
                for p in 0..n {
                    let d = dep.values()[p];
                    let y2 = rays_owned[2 * n + p] * d + t[2];
                    if y2 <= 1e-9 {
                        continue;
                    }
                    let y0 = rays_owned[p] * d + t[0];
                    let y1 = rays_owned[n + p] * d + t[1];
                    // d(y0/y2)/dd = (g0*y2 - g2*y0) / y2^2
                    let g0 = rays_owned[p];
                    let g1 = rays_owned[n + p];
                    let g2 = rays_owned[2 * n + p];
                    let dqx = (g0 * y2 - g2 * y0) / (y2 * y2);
                    let dqy = (g1 * y2 - g2 * y1) / (y2 * y2);
                    dep.accumulate_grad(p, grad_out[p] * dqx + grad_out[n + p] * dqy);
                }
            }),
        );
        Ok((coords, Tensor::from_vec(&[h, w], pos)))
    }

    /// 3x3 box filter with reflection padding over the spatial axes of a
    /// `[C,H,W]` tensor. Local-mean building block of SSIM.
    pub fn box_filter3x3(&self) -> Result<Tensor> {
        if self.shape().len() != 3 {
            return Err(MvsError::shape(format!(
                "box_filter3x3 expects [C,H,W], got {:?}",
                self.shape()
            )));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let ry = reflect(y as isize + dy, h);
                            let rx = reflect(x as isize + dx, w);
                            acc += self.values()[(ch * h + ry) * w + rx];
                        }
                    }
                    out[(ch * h + y) * w + x] = acc / 9.0;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![c, h, w],
            out,
            vec![self.clone()],
            Box::new(move |grad_out, parents| {
                let a = &parents[0];
                if !a.needs_grad() {
                    return;
                }
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let g = grad_out[(ch * h + y) * w + x] / 9.0;
                            if g == 0.0 {
                                continue;
                            }
                            for dy in -1..=1isize {
                                for dx in -1..=1isize {
                                    let ry = reflect(y as isize + dy, h);
                                    let rx = reflect(x as isize + dx, w);
                                    a.accumulate_grad((ch * h + ry) * w + rx, g);
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }
}

#[inline]
fn in_bounds(x: f64, y: f64, w: usize, h: usize) -> bool {
    x.is_finite()
        && y.is_finite()
        && x >= 0.0
        && y >= 0.0
        && x <= (w - 1) as f64
        && y <= (h - 1) as f64
}

/// Bilinear cell for a coordinate already known to be in `[0, n-1]`. The
/// cell is clamped at the top edge so an integer coordinate of exactly
/// `n-1` stays valid with full weight on the last sample.
#[inline]
fn cell(x: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let x0 = (x.floor() as usize).min(n - 2);
    (x0, x0 + 1, x - x0 as f64)
}
