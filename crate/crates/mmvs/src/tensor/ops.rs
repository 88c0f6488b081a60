//! Elementwise ops, reductions and axis helpers.

use super::Tensor;
use crate::error::{MvsError, Result};

impl Tensor {
    fn binary_elementwise(
        &self,
        other: &Tensor,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        // partials w.r.t. (a, b) given (a, b, out)
        df: impl Fn(f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(MvsError::shape(format!(
                "{name}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let values: Vec<f64> = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), other.clone()],
            Box::new(move |grad_out, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                let ga = a.needs_grad();
                let gb = b.needs_grad();
                if !ga && !gb {
                    return;
                }
                for (i, &g) in grad_out.iter().enumerate() {
                    let (da, db) = df(a.values()[i], b.values()[i]);
                    if ga {
                        a.accumulate_grad(i, g * da);
                    }
                    if gb {
                        b.accumulate_grad(i, g * db);
                    }
                }
            }),
        ))
    }

    fn unary_elementwise(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Tensor {
        let values: Vec<f64> = self.values().iter().map(|&a| f(a)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |grad_out, parents| {
                let a = &parents[0];
                if !a.needs_grad() {
                    return;
                }
                for (i, &g) in grad_out.iter().enumerate() {
                    a.accumulate_grad(i, g * df(a.values()[i]));
                }
            }),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "add", |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "sub", |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "mul", |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "div", |a, b| a / b, |a, b| (1.0 / b, -a / (b * b)))
    }

    pub fn neg(&self) -> Tensor {
        self.unary_elementwise(|a| -a, |_| -1.0)
    }

    pub fn abs(&self) -> Tensor {
        self.unary_elementwise(|a| a.abs(), |a| if a >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn relu(&self) -> Tensor {
        self.unary_elementwise(|a| a.max(0.0), |a| if a > 0.0 { 1.0 } else { 0.0 })
    }

    /// Logistic sigmoid clamped to stay strictly inside (0,1) even where
    /// the exact value would round to 0 or 1.
    pub fn sigmoid(&self) -> Tensor {
        // Wide enough that the bound survives rounding to f32.
        const LIM: f64 = 1e-6;
        self.unary_elementwise(
            |a| sigmoid(a).clamp(LIM, 1.0 - LIM),
            |a| {
                let s = sigmoid(a);
                s * (1.0 - s)
            },
        )
    }

    pub fn exp(&self) -> Tensor {
        self.unary_elementwise(|a| a.exp(), |a| a.exp())
    }

    pub fn ln(&self) -> Tensor {
        self.unary_elementwise(|a| a.ln(), |a| 1.0 / a)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary_elementwise(|a| a.sqrt(), |a| 0.5 / a.sqrt())
    }

    pub fn square(&self) -> Tensor {
        self.unary_elementwise(|a| a * a, |a| 2.0 * a)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary_elementwise(move |a| a * c, move |_| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary_elementwise(move |a| a + c, |_| 1.0)
    }

    /// Sum of all elements, 64-bit accumulator.
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.values().iter().sum();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(|grad_out, parents| {
                let a = &parents[0];
                if !a.needs_grad() {
                    return;
                }
                let g = grad_out[0];
                for i in 0..a.len() {
                    a.accumulate_grad(i, g);
                }
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Per-pixel softmax along the leading depth axis of a `[D,H,W]` tensor,
    /// stabilized by max subtraction.
    pub fn softmax_over_depth(&self) -> Result<Tensor> {
        if self.shape().len() != 3 {
            return Err(MvsError::shape(format!(
                "softmax_over_depth expects [D,H,W], got {:?}",
                self.shape()
            )));
        }
        let (d, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let hw = h * w;
        let vals = self.values();
        let mut out = vec![0.0; vals.len()];
        for p in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for j in 0..d {
                m = m.max(vals[j * hw + p]);
            }
            let mut z = 0.0;
            for j in 0..d {
                z += (vals[j * hw + p] - m).exp();
            }
            for j in 0..d {
                out[j * hw + p] = (vals[j * hw + p] - m).exp() / z;
            }
        }
        let out_vals = out.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |grad_out, parents| {
                let a = &parents[0];
                if !a.needs_grad() {
                    return;
                }
                for p in 0..hw {
                    let mut dot = 0.0;
                    for j in 0..d {
                        dot += grad_out[j * hw + p] * out_vals[j * hw + p];
                    }
                    for j in 0..d {
                        let pj = out_vals[j * hw + p];
                        a.accumulate_grad(j * hw + p, pj * (grad_out[j * hw + p] - dot));
                    }
                }
            }),
        ))
    }

    /// `[C,H,W]` -> `[H,W]`, mean over the channel axis.
    pub fn mean_channels(&self) -> Result<Tensor> {
        let t = self.sum_channels()?;
        Ok(t.scale(1.0 / self.shape()[0] as f64))
    }

    /// `[C,H,W]` -> `[H,W]`, sum over the channel axis.
    pub fn sum_channels(&self) -> Result<Tensor> {
        if self.shape().len() != 3 {
            return Err(MvsError::shape(format!(
                "sum_channels expects [C,H,W], got {:?}",
                self.shape()
            )));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let hw = h * w;
        let mut out = vec![0.0; hw];
        for ch in 0..c {
            for p in 0..hw {
                out[p] += self.values()[ch * hw + p];
            }
        }
        Ok(Tensor::from_op(
            vec![h, w],
            out,
            vec![self.clone()],
            Box::new(move |grad_out, parents| {
                let a = &parents[0];
                if !a.needs_grad() {
                    return;
                }
                for ch in 0..c {
                    for p in 0..hw {
                        a.accumulate_grad(ch * hw + p, grad_out[p]);
                    }
                }
            }),
        ))
    }

    /// `[C,H,W]` replicated along a new depth axis -> `[C,D,H,W]`.
    pub fn broadcast_over_depth(&self, depth: usize) -> Result<Tensor> {
        if self.shape().len() != 3 {
            return Err(MvsError::shape(format!(
                "broadcast_over_depth expects [C,H,W], got {:?}",
                self.shape()
            )));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let hw = h * w;
        let mut out = vec![0.0; c * depth * hw];
        for ch in 0..c {
            for j in 0..depth {
                out[(ch * depth + j) * hw..(ch * depth + j + 1) * hw]
                    .copy_from_slice(&self.values()[ch * hw..(ch + 1) * hw]);
            }
        }
        Ok(Tensor::from_op(
            vec![c, depth, h, w],
            out,
            vec![self.clone()],
            Box::new(move |grad_out, parents| {
                let a = &parents[0];
                if !a.needs_grad() {
                    return;
                }
                for ch in 0..c {
                    for j in 0..depth {
                        for p in 0..hw {
                            a.accumulate_grad(ch * hw + p, grad_out[(ch * depth + j) * hw + p]);
                        }
                    }
                }
            }),
        ))
    }

    /// Stacks `D` tensors of shape `[C,H,W]` into `[C,D,H,W]`.
    pub fn stack_depth(slices: &[Tensor]) -> Result<Tensor> {
        if slices.is_empty() {
            return Err(MvsError::shape("stack_depth: empty slice list"));
        }
        let shape = slices[0].shape().to_vec();
        if shape.len() != 3 || slices.iter().any(|s| s.shape() != shape) {
            return Err(MvsError::shape("stack_depth: inconsistent [C,H,W] shapes"));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let d = slices.len();
        let hw = h * w;
        let mut out = vec![0.0; c * d * hw];
        for (j, s) in slices.iter().enumerate() {
            for ch in 0..c {
                out[(ch * d + j) * hw..(ch * d + j + 1) * hw]
                    .copy_from_slice(&s.values()[ch * hw..(ch + 1) * hw]);
            }
        }
        Ok(Tensor::from_op(
            vec![c, d, h, w],
            out,
            slices.to_vec(),
            Box::new(move |grad_out, parents| {
                for (j, p) in parents.iter().enumerate() {
                    if !p.needs_grad() {
                        continue;
                    }
                    for ch in 0..c {
                        for q in 0..hw {
                            p.accumulate_grad(ch * hw + q, grad_out[(ch * d + j) * hw + q]);
                        }
                    }
                }
            }),
        ))
    }

    /// Elementwise population variance across a list of same-shaped views.
    /// Per element the values are accumulated in sorted order, so the result
    /// is exactly invariant under permutation of the view list.
    pub fn variance_over_views(views: &[Tensor]) -> Result<Tensor> {
        if views.len() < 2 {
            return Err(MvsError::shape("variance_over_views: need at least 2 views"));
        }
        let shape = views[0].shape().to_vec();
        if views.iter().any(|v| v.shape() != shape) {
            return Err(MvsError::shape("variance_over_views: shape mismatch"));
        }
        let len = views[0].len();
        let n = views.len() as f64;
        let mut out = vec![0.0; len];
        let mut buf = vec![0.0; views.len()];
        for i in 0..len {
            for (b, v) in buf.iter_mut().zip(views) {
                *b = v.values()[i];
            }
            buf.sort_by(|a, b| a.total_cmp(b));
            let mean: f64 = buf.iter().sum::<f64>() / n;
            out[i] = buf.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        }
        Ok(Tensor::from_op(
            shape.clone(),
            out,
            views.to_vec(),
            Box::new(move |grad_out, parents| {
                // d var / d x_i = 2 (x_i - mean) / n
                for i in 0..grad_out.len() {
                    let mean: f64 =
                        parents.iter().map(|p| p.values()[i]).sum::<f64>() / n;
                    for p in parents {
                        if p.needs_grad() {
                            let g = 2.0 * (p.values()[i] - mean) / n * grad_out[i];
                            p.accumulate_grad(i, g);
                        }
                    }
                }
            }),
        ))
    }

    /// Concatenates `[Ci,H,W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(MvsError::shape("concat_channels: empty list"));
        }
        let (h, w) = (parts[0].shape()[1], parts[0].shape()[2]);
        for p in parts {
            if p.shape().len() != 3 || p.shape()[1] != h || p.shape()[2] != w {
                return Err(MvsError::shape("concat_channels: spatial shape mismatch"));
            }
        }
        let total_c: usize = parts.iter().map(|p| p.shape()[0]).sum();
        let mut out = Vec::with_capacity(total_c * h * w);
        for p in parts {
            out.extend_from_slice(p.values());
        }
        let channel_counts: Vec<usize> = parts.iter().map(|p| p.shape()[0]).collect();
        Ok(Tensor::from_op(
            vec![total_c, h, w],
            out,
            parts.to_vec(),
            Box::new(move |grad_out, parents| {
                let hw = h * w;
                let mut offset = 0;
                for (p, &cc) in parents.iter().zip(&channel_counts) {
                    if p.needs_grad() {
                        p.accumulate_grad_slice(&grad_out[offset..offset + cc * hw]);
                    }
                    offset += cc * hw;
                }
            }),
        ))
    }

    /// Expectation over the depth axis: `[D,H,W]` probabilities collapsed
    /// against a vector of depth hypotheses -> `[H,W]`.
    pub fn collapse_depth(&self, depth_values: &[f64]) -> Result<Tensor> {
        if self.shape().len() != 3 || self.shape()[0] != depth_values.len() {
            return Err(MvsError::shape(format!(
                "collapse_depth: prob {:?} vs {} depth values",
                self.shape(),
                depth_values.len()
            )));
        }
        let (d, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let hw = h * w;
        let dv = depth_values.to_vec();
        let mut out = vec![0.0; hw];
        for j in 0..d {
            for p in 0..hw {
                out[p] += self.values()[j * hw + p] * dv[j];
            }
        }
        Ok(Tensor::from_op(
            vec![h, w],
            out,
            vec![self.clone()],
            Box::new(move |grad_out, parents| {
                let a = &parents[0];
                if !a.needs_grad() {
                    return;
                }
                for j in 0..d {
                    for p in 0..hw {
                        a.accumulate_grad(j * hw + p, grad_out[p] * dv[j]);
                    }
                }
            }),
        ))
    }

    /// Forward difference along the last axis; output loses one column.
    pub fn forward_diff_x(&self) -> Tensor {
        let shape = self.shape().to_vec();
        let w = *shape.last().expect("diff on 0-d tensor");
        assert!(w >= 2, "forward_diff_x needs width >= 2");
        let rows = self.len() / w;
        let mut out = vec![0.0; rows * (w - 1)];
        for r in 0..rows {
            for x in 0..w - 1 {
                out[r * (w - 1) + x] = self.values()[r * w + x + 1] - self.values()[r * w + x];
            }
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = w - 1;
        Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |grad_out, parents| {
                let a = &parents[0];
                if !a.needs_grad() {
                    return;
                }
                for r in 0..rows {
                    for x in 0..w - 1 {
                        let g = grad_out[r * (w - 1) + x];
                        a.accumulate_grad(r * w + x + 1, g);
                        a.accumulate_grad(r * w + x, -g);
                    }
                }
            }),
        )
    }

    /// Forward difference along the second-to-last axis; output loses one row.
    pub fn forward_diff_y(&self) -> Tensor {
        let shape = self.shape().to_vec();
        let n = shape.len();
        assert!(n >= 2, "forward_diff_y needs rank >= 2");
        let w = shape[n - 1];
        let h = shape[n - 2];
        assert!(h >= 2, "forward_diff_y needs height >= 2");
        let planes = self.len() / (h * w);
        let mut out = vec![0.0; planes * (h - 1) * w];
        for pl in 0..planes {
            for y in 0..h - 1 {
                for x in 0..w {
                    out[(pl * (h - 1) + y) * w + x] = self.values()[(pl * h + y + 1) * w + x]
                        - self.values()[(pl * h + y) * w + x];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[n - 2] = h - 1;
        Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |grad_out, parents| {
                let a = &parents[0];
                if !a.needs_grad() {
                    return;
                }
                for pl in 0..planes {
                    for y in 0..h - 1 {
                        for x in 0..w {
                            let g = grad_out[(pl * (h - 1) + y) * w + x];
                            a.accumulate_grad((pl * h + y + 1) * w + x, g);
                            a.accumulate_grad((pl * h + y) * w + x, -g);
                        }
                    }
                }
            }),
        )
    }
}

#[inline]
fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}
