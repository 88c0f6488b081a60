//! Named parameter sets, optimizer steps and the binary checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{MvsError, Result};

const MAGIC: &[u8; 4] = b"MMVS";
const FORMAT_VERSION: u32 = 1;

/// Named parameter tensors with deterministic iteration order.
#[derive(Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Value-identical, independently mutable copy; every tensor becomes a
    /// fresh trainable leaf.
    pub fn clone_params(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in &self.params {
            out.insert(name.clone(), Tensor::param(t.shape(), t.values().to_vec()));
        }
        out
    }

    /// Collects gradients populated by a backward pass into a plain set.
    /// Parameters without a gradient get zeros.
    pub fn grads(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in &self.params {
            let g = t.grad().unwrap_or_else(|| vec![0.0; t.len()]);
            out.insert(name.clone(), Tensor::from_vec(t.shape(), g));
        }
        out
    }

    pub fn zero_grads(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }

    /// One plain gradient-descent step: `p <- p - lr * g`. The input set is
    /// untouched; the result is a fresh set of leaves.
    pub fn sgd_step(&self, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
        self.sgd_step_filtered(grads, lr, |_| true)
    }

    /// SGD step applied only to parameters for which `update(name)` is true;
    /// the rest are copied unchanged (used to freeze the mask subnetwork).
    pub fn sgd_step_filtered(
        &self,
        grads: &ParamSet,
        lr: f64,
        update: impl Fn(&str) -> bool,
    ) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, p) in &self.params {
            let g = grads.get(name).ok_or_else(|| {
                MvsError::shape(format!("sgd_step: missing gradient for {name}"))
            })?;
            if g.shape() != p.shape() {
                return Err(MvsError::shape(format!(
                    "sgd_step: {name} param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let values: Vec<f64> = if update(name) {
                p.values()
                    .iter()
                    .zip(g.values())
                    .map(|(&pv, &gv)| pv - lr * gv)
                    .collect()
            } else {
                p.values().to_vec()
            };
            out.insert(name.clone(), Tensor::param(p.shape(), values));
        }
        if grads.len() != self.len() {
            return Err(MvsError::shape("sgd_step: gradient name set mismatch"));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for (name, t) in &self.params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.values() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(MvsError::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(MvsError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut out = ParamSet::new();
        while !r.is_empty() {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| MvsError::Format("non-UTF8 parameter name".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let count: usize = shape.iter().product();
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                values.push(f32::from_le_bytes(b) as f64);
            }
            out.insert(name, Tensor::param(&shape, values));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
        let bytes = std::fs::read(path)?;
        ParamSet::from_bytes(&bytes)
    }

    /// Content hash over the serialized bytes.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_bytes());
        hex_string(&hasher.finalize())
    }
}

/// Adam with bias correction; first-moment/second-moment state lives in two
/// ParamSets so it serializes through the same checkpoint format as θ.
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (name, t) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(t.shape()));
            v.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        AdamState {
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(
        &mut self,
        params: &ParamSet,
        grads: &ParamSet,
        lr: f64,
        update: impl Fn(&str) -> bool,
    ) -> Result<ParamSet> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let mut out = ParamSet::new();
        let mut new_m = ParamSet::new();
        let mut new_v = ParamSet::new();
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| MvsError::shape(format!("adam: missing gradient for {name}")))?;
            let m_old = self.m.get(name).expect("adam state covers all params");
            let v_old = self.v.get(name).expect("adam state covers all params");
            let mut pv = p.values().to_vec();
            let mut mv = m_old.values().to_vec();
            let mut vv = v_old.values().to_vec();
            if update(name) {
                for i in 0..pv.len() {
                    let gi = g.values()[i];
                    mv[i] = self.beta1 * mv[i] + (1.0 - self.beta1) * gi;
                    vv[i] = self.beta2 * vv[i] + (1.0 - self.beta2) * gi * gi;
                    let mhat = mv[i] / bc1;
                    let vhat = vv[i] / bc2;
                    pv[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
            out.insert(name.clone(), Tensor::param(p.shape(), pv));
            new_m.insert(name.clone(), Tensor::from_vec(p.shape(), mv));
            new_v.insert(name.clone(), Tensor::from_vec(p.shape(), vv));
        }
        self.m = new_m;
        self.v = new_v;
        Ok(out)
    }
}

/// Kaiming-uniform initialization: bound = sqrt(6 / fan_in).
pub fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::param(shape, values)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
