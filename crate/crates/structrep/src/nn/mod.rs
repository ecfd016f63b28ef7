//! Minimal f64 nn toolkit for the reference encoders: named parameters,
//! gradient accumulation, AdamW, warmup+cosine schedule, and length
//! normalization with its backward pass.
//!
//! Everything is f64 and deterministic: parameters iterate in a fixed order,
//! gradients accumulate in name order, and batch reductions happen in sample
//! order regardless of worker count.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

mod conv;
mod text;

pub use conv::{ImageEncoder, ImageEncoderConfig, ImageTrunkCache};
pub(crate) use conv::gaussian as gaussian_sample;
pub use text::{TextEncoder, TextEncoderConfig, TextTrunkCache};

/// A named trainable parameter. Everything is stored as a 2-D array; vectors
/// are 1xN and scalars 1x1.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    /// Whether weight decay applies (off for biases and gains).
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array2<f64>, decay: bool) -> Self {
        Param {
            name: name.into(),
            value,
            decay,
        }
    }
}

/// Gradients accumulated by parameter name. BTreeMap keeps reduction and
/// update order deterministic.
#[derive(Debug, Default, Clone)]
pub struct GradStore {
    map: BTreeMap<String, Array2<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, grad: Array2<f64>) {
        match self.map.get_mut(name) {
            Some(existing) => *existing += &grad,
            None => {
                self.map.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.map.get(name)
    }

    /// Sum another store into this one (used to reduce per-sample gradients).
    pub fn merge(&mut self, other: GradStore) {
        for (name, grad) in other.map {
            match self.map.get_mut(&name) {
                Some(existing) => *existing += &grad,
                None => {
                    self.map.insert(name, grad);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for grad in self.map.values_mut() {
            *grad *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map
            .values()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// AdamW with decoupled weight decay. Moment state is keyed by parameter
/// name so models can hand in `&mut Param` lists in any consistent order.
#[derive(Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param], grads: &GradStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for param in params.iter_mut() {
            let Some(grad) = grads.get(&param.name) else {
                continue;
            };
            let m = self
                .m
                .entry(param.name.clone())
                .or_insert_with(|| Array2::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(param.name.clone())
                .or_insert_with(|| Array2::zeros(grad.raw_dim()));
            azip_update(m, v, grad, self.beta1, self.beta2);
            let wd = if param.decay { self.weight_decay } else { 0.0 };
            let value = &mut param.value;
            for ((pv, mv), vv) in value.iter_mut().zip(m.iter()).zip(v.iter()) {
                let m_hat = mv / bc1;
                let v_hat = vv / bc2;
                *pv -= lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * *pv);
            }
        }
    }
}

fn azip_update(m: &mut Array2<f64>, v: &mut Array2<f64>, g: &Array2<f64>, b1: f64, b2: f64) {
    for ((mv, vv), gv) in m.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
        *mv = b1 * *mv + (1.0 - b1) * gv;
        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
    }
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl WarmupCosine {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let remaining = (self.total_steps - self.warmup_steps).max(1);
        let progress = (step - self.warmup_steps) as f64 / remaining as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }
}

pub const NORM_EPS: f64 = 1e-12;

/// Length-normalize a vector. Errors on (near-)zero input: a zero embedding
/// signals a broken encoder and must not be silently rescaled.
pub fn normalize(v: &Array1<f64>) -> Result<(Array1<f64>, f64)> {
    let norm = v.dot(v).sqrt();
    if !norm.is_finite() || norm < NORM_EPS {
        return Err(Error::Divergence(format!(
            "cannot normalize vector with norm {norm:e}"
        )));
    }
    Ok((v / norm, norm))
}

/// Backward through `unit = z / ||z||`: given d(loss)/d(unit), return
/// d(loss)/dz = (d_unit - unit * <unit, d_unit>) / ||z||.
pub fn normalize_backward(unit: &Array1<f64>, norm: f64, d_unit: &Array1<f64>) -> Array1<f64> {
    let mut dz = d_unit - &(unit * unit.dot(d_unit));
    dz /= norm;
    dz
}

/// Matrix-vector product y = W x (projections are bias-free).
pub fn matvec(w: &Array2<f64>, x: &Array1<f64>) -> Array1<f64> {
    w.dot(x)
}

/// Backward for y = W x: accumulates dW = dy xᵀ and returns dx = Wᵀ dy.
pub fn matvec_backward(
    w: &Array2<f64>,
    x: &Array1<f64>,
    dy: &Array1<f64>,
    grads: &mut GradStore,
    name: &str,
) -> Array1<f64> {
    let dw = outer(dy, x);
    grads.add(name, dw);
    w.t().dot(dy)
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (n, m) = (a.len(), b.len());
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        let ai = a[i];
        for j in 0..m {
            out[[i, j]] = ai * b[j];
        }
    }
    out
}
