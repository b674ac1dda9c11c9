use super::array::Array2;
use super::tape::{Gradients, Var};
use crate::error::{FbError, Result};

/// A trainable array with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Array2,
    pub grad: Array2,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Array2) -> Self {
        let grad = Array2::zeros(value.rows(), value.cols());
        Self { name: name.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Adds the gradient recorded for `var` (if any) into `self.grad`.
    pub fn accumulate(&mut self, grads: &Gradients, var: Var) {
        if let Some(g) = grads.get(var) {
            self.grad.add_assign(g);
        }
    }
}

/// `target ← ζ·target + (1−ζ)·online`, elementwise.
pub fn polyak_update(target: &mut Parameter, online: &Parameter, zeta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&zeta) {
        return Err(FbError::contract(format!("polyak coefficient {zeta} outside [0, 1]")));
    }
    if target.value.shape() != online.value.shape() {
        return Err(FbError::Dimension(format!(
            "polyak target {} is {:?}, online {} is {:?}",
            target.name,
            target.value.shape(),
            online.name,
            online.value.shape()
        )));
    }
    for (t, &o) in target.value.data_mut().iter_mut().zip(online.value.data()) {
        *t = zeta * *t + (1.0 - zeta) * o;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Array2,
    v: Array2,
}

/// Adam with bias correction. Moment buffers are keyed by parameter position,
/// so every call must pass the parameters in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, (0.9, 0.999), 1e-8)
    }

    pub fn with_betas(lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Self { lr, beta1: betas.0, beta2: betas.1, eps, t: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Parameter]) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    m: Array2::zeros(p.value.rows(), p.value.cols()),
                    v: Array2::zeros(p.value.rows(), p.value.cols()),
                })
                .collect();
        }
        debug_assert_eq!(self.moments.len(), params.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = self.lr / bc1;
        for (p, mo) in params.iter_mut().zip(self.moments.iter_mut()) {
            let g = p.grad.data();
            let m = mo.m.data_mut();
            let v = mo.v.data_mut();
            let x = p.value.data_mut();
            for i in 0..x.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                x[i] -= step * m[i] / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// One Adam update of every parameter from a fresh gradient.
pub fn adam_step(opt: &mut Adam, params: &mut [&mut Parameter]) {
    opt.step(params)
}
