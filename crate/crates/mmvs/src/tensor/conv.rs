//! Convolutions, pooling, upsampling and the spatial normalization layer.

use super::Tensor;
use crate::error::{MvsError, Result};

impl Tensor {
    /// 2D cross-correlation. `input [C,H,W]`, `kernel [O,C,kh,kw]`, `bias [O]`.
    /// Zero padding; `padding = k/2` with stride 1 preserves the spatial size.
    pub fn conv2d(&self, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        if self.shape().len() != 3 || kernel.shape().len() != 4 {
            return Err(MvsError::shape(format!(
                "conv2d: input {:?}, kernel {:?}",
                self.shape(),
                kernel.shape()
            )));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (o, kc, kh, kw) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        if kc != c || bias.shape() != [o] {
            return Err(MvsError::shape(format!(
                "conv2d: input channels {c} vs kernel {:?}, bias {:?}",
                kernel.shape(),
                bias.shape()
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(MvsError::shape(format!(
                "conv2d: kernel spatial size must be odd, got {kh}x{kw}"
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(MvsError::shape(format!(
                "conv2d: input {h}x{w} too small for kernel {kh}x{kw} with padding {padding}"
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; o * oh * ow];
        let iv = self.values();
        let kv = kernel.values();
        let bv = bias.values();
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bv[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += iv[(ic * h + iy as usize) * w + ix as usize]
                                    * kv[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![o, oh, ow],
            out,
            vec![self.clone(), kernel.clone(), bias.clone()],
            Box::new(move |grad_out, parents| {
                let (inp, ker, bia) = (&parents[0], &parents[1], &parents[2]);
                let gi = inp.needs_grad();
                let gk = ker.needs_grad();
                let gb = bia.needs_grad();
                if !gi && !gk && !gb {
                    return;
                }
                let iv = inp.values();
                let kv = ker.values();
                for oc in 0..o {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = grad_out[(oc * oh + oy) * ow + ox];
                            if g == 0.0 {
                                continue;
                            }
                            if gb {
                                bia.accumulate_grad(oc, g);
                            }
                            for ic in 0..c {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let ii = (ic * h + iy as usize) * w + ix as usize;
                                        let ki = ((oc * c + ic) * kh + ky) * kw + kx;
                                        if gi {
                                            inp.accumulate_grad(ii, g * kv[ki]);
                                        }
                                        if gk {
                                            ker.accumulate_grad(ki, g * iv[ii]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// 3D cross-correlation. `input [C,D,H,W]`, `kernel [O,C,kd,kh,kw]`,
    /// `bias [O]`. Supports stride-2 downsampling for the encoder.
    pub fn conv3d(&self, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        if self.shape().len() != 4 || kernel.shape().len() != 5 {
            return Err(MvsError::shape(format!(
                "conv3d: input {:?}, kernel {:?}",
                self.shape(),
                kernel.shape()
            )));
        }
        let (c, d, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (o, kc, kd, kh, kw) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
            kernel.shape()[4],
        );
        if kc != c || bias.shape() != [o] {
            return Err(MvsError::shape(format!(
                "conv3d: input channels {c} vs kernel {:?}, bias {:?}",
                kernel.shape(),
                bias.shape()
            )));
        }
        if d + 2 * padding < kd || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(MvsError::shape("conv3d: input too small for kernel"));
        }
        let od = (d + 2 * padding - kd) / stride + 1;
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; o * od * oh * ow];
        let iv = self.values();
        let kv = kernel.values();
        let bv = bias.values();
        let pad = padding as isize;
        for oc in 0..o {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bv[oc];
                        for ic in 0..c {
                            for kz in 0..kd {
                                let iz = (oz * stride + kz) as isize - pad;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc += iv[((ic * d + iz as usize) * h + iy as usize) * w
                                            + ix as usize]
                                            * kv[(((oc * c + ic) * kd + kz) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((oc * od + oz) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![o, od, oh, ow],
            out,
            vec![self.clone(), kernel.clone(), bias.clone()],
            Box::new(move |grad_out, parents| {
                let (inp, ker, bia) = (&parents[0], &parents[1], &parents[2]);
                let gi = inp.needs_grad();
                let gk = ker.needs_grad();
                let gb = bia.needs_grad();
                if !gi && !gk && !gb {
                    return;
                }
                let iv = inp.values();
                let kv = ker.values();
                for oc in 0..o {
                    for oz in 0..od {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = grad_out[((oc * od + oz) * oh + oy) * ow + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                if gb {
                                    bia.accumulate_grad(oc, g);
                                }
                                for ic in 0..c {
                                    for kz in 0..kd {
                                        let iz = (oz * stride + kz) as isize - pad;
                                        if iz < 0 || iz >= d as isize {
                                            continue;
                                        }
                                        for ky in 0..kh {
                                            let iy = (oy * stride + ky) as isize - pad;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix = (ox * stride + kx) as isize - pad;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                let ii = ((ic * d + iz as usize) * h
                                                    + iy as usize)
                                                    * w
                                                    + ix as usize;
                                                let ki = (((oc * c + ic) * kd + kz) * kh + ky)
                                                    * kw
                                                    + kx;
                                                if gi {
                                                    inp.accumulate_grad(ii, g * kv[ki]);
                                                }
                                                if gk {
                                                    ker.accumulate_grad(ki, g * iv[ii]);
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Nearest-neighbour x2 upsampling of a `[C,D,H,W]` volume, the decoder
    /// counterpart of stride-2 encoder convolutions.
    pub fn upsample2x_nearest3d(&self) -> Result<Tensor> {
        if self.shape().len() != 4 {
            return Err(MvsError::shape(format!(
                "upsample2x_nearest3d expects [C,D,H,W], got {:?}",
                self.shape()
            )));
        }
        let (c, d, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let mut out = vec![0.0; c * od * oh * ow];
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        out[((ch * od + z) * oh + y) * ow + x] =
                            self.values()[((ch * d + z / 2) * h + y / 2) * w + x / 2];
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![c, od, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |grad_out, parents| {
                let a = &parents[0];
                if !a.needs_grad() {
                    return;
                }
                for ch in 0..c {
                    for z in 0..od {
                        for y in 0..oh {
                            for x in 0..ow {
                                a.accumulate_grad(
                                    ((ch * d + z / 2) * h + y / 2) * w + x / 2,
                                    grad_out[((ch * od + z) * oh + y) * ow + x],
                                );
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Nearest-neighbour x2 upsampling of a `[C,H,W]` map.
    pub fn upsample2x_nearest2d(&self) -> Result<Tensor> {
        if self.shape().len() != 3 {
            return Err(MvsError::shape(format!(
                "upsample2x_nearest2d expects [C,H,W], got {:?}",
                self.shape()
            )));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[(ch * oh + y) * ow + x] = self.values()[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        Ok(Tensor::from_op(
            vec![c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |grad_out, parents| {
                let a = &parents[0];
                if !a.needs_grad() {
                    return;
                }
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            a.accumulate_grad(
                                (ch * h + y / 2) * w + x / 2,
                                grad_out[(ch * oh + y) * ow + x],
                            );
                        }
                    }
                }
            }),
        ))
    }

    /// Average pooling by an integer factor over the two trailing spatial
    /// axes of a `[C,H,W]` image.
    pub fn avg_downsample2d(&self, factor: usize) -> Result<Tensor> {
        if self.shape().len() != 3 {
            return Err(MvsError::shape(format!(
                "avg_downsample2d expects [C,H,W], got {:?}",
                self.shape()
            )));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if h % factor != 0 || w % factor != 0 {
            return Err(MvsError::shape(format!(
                "avg_downsample2d: {h}x{w} not divisible by {factor}"
            )));
        }
        let (oh, ow) = (h / factor, w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.values()[(ch * h + y * factor + dy) * w + x * factor + dx];
                        }
                    }
                    out[(ch * oh + y) * ow + x] = acc * norm;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |grad_out, parents| {
                let a = &parents[0];
                if !a.needs_grad() {
                    return;
                }
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let g = grad_out[(ch * oh + y) * ow + x] * norm;
                            for dy in 0..factor {
                                for dx in 0..factor {
                                    a.accumulate_grad(
                                        (ch * h + y * factor + dy) * w + x * factor + dx,
                                        g,
                                    );
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Per-channel mean over all non-channel axes: `[C, ...]` -> `[C]`.
    pub fn spatial_mean(&self) -> Result<Tensor> {
        if self.shape().is_empty() {
            return Err(MvsError::shape("spatial_mean on 0-d tensor"));
        }
        let c = self.shape()[0];
        let n = self.len() / c;
        let mut out = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for i in 0..n {
                acc += self.values()[ch * n + i];
            }
            out[ch] = acc / n as f64;
        }
        Ok(Tensor::from_op(
            vec![c],
            out,
            vec![self.clone()],
            Box::new(move |grad_out, parents| {
                let a = &parents[0];
                if !a.needs_grad() {
                    return;
                }
                for ch in 0..c {
                    let g = grad_out[ch] / n as f64;
                    for i in 0..n {
                        a.accumulate_grad(ch * n + i, g);
                    }
                }
            }),
        ))
    }

    /// Per-channel population variance over all non-channel axes.
    pub fn spatial_var(&self) -> Result<Tensor> {
        let mean = self.spatial_mean()?;
        let mean_b = mean.broadcast_channels(self.shape())?;
        let centered = self.sub(&mean_b)?;
        centered.square().spatial_mean()
    }

    /// Replicates a `[C]` vector over the trailing axes of `target_shape`
    /// (whose leading axis must be `C`).
    pub fn broadcast_channels(&self, target_shape: &[usize]) -> Result<Tensor> {
        if self.shape().len() != 1 || target_shape.first() != Some(&self.shape()[0]) {
            return Err(MvsError::shape(format!(
                "broadcast_channels: {:?} -> {:?}",
                self.shape(),
                target_shape
            )));
        }
        let c = self.shape()[0];
        let n: usize = target_shape.iter().skip(1).product();
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            for i in 0..n {
                out[ch * n + i] = self.values()[ch];
            }
        }
        Ok(Tensor::from_op(
            target_shape.to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |grad_out, parents| {
                let a = &parents[0];
                if !a.needs_grad() {
                    return;
                }
                for ch in 0..c {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += grad_out[ch * n + i];
                    }
                    a.accumulate_grad(ch, acc);
                }
            }),
        ))
    }

    /// Spatial normalization with learnable per-channel scale and shift.
    ///
    /// Normalizes over all non-channel axes of one sample. This stands in
    /// for batch normalization: desk-scale batches can be a single sample,
    /// so statistics are taken per sample per channel, which keeps results
    /// batch-size independent and deterministic.
    pub fn spatial_norm(&self, gain: &Tensor, shift: &Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        let c = self.shape()[0];
        if gain.shape() != [c] || shift.shape() != [c] {
            return Err(MvsError::shape(format!(
                "spatial_norm: gain {:?} shift {:?} for input {:?}",
                gain.shape(),
                shift.shape(),
                self.shape()
            )));
        }
        let mean = self.spatial_mean()?.broadcast_channels(self.shape())?;
        let var = self.spatial_var()?;
        let std = var.add_scalar(EPS).sqrt();
        let centered = self.sub(&mean)?;
        let std_b = std.broadcast_channels(self.shape())?;
        let normed = centered.div(&std_b)?;
        let g_b = gain.broadcast_channels(self.shape())?;
        let s_b = shift.broadcast_channels(self.shape())?;
        normed.mul(&g_b)?.add(&s_b)
    }
}
