//! SGD and Adam over a model's parameter list.
//!
//! Both step functions take gradients indexed like [`Model::params`];
//! `None` entries (constants, frozen layers) are skipped and their state
//! slots stay untouched.

use super::TrainError;
use crate::net::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_grads<T: Scalar>(
    params: &[Param<T>],
    grads: &[Option<Tensor<T>>],
) -> Result<(), TrainError> {
    if params.len() != grads.len() {
        return Err(TrainError::GradientCount { params: params.len(), grads: grads.len() });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.shape() != p.tensor.shape() {
                return Err(TrainError::GradientShape {
                    index: i,
                    name: p.name.clone(),
                    expected: p.tensor.shape(),
                    got: g.shape(),
                });
            }
        }
    }
    Ok(())
}

/// Plain SGD, optionally with heavy-ball momentum (off by default
/// upstream). Velocity buffers appear lazily per parameter.
#[derive(Debug, Clone)]
pub struct SgdOptimizer<T> {
    momentum: f64,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> SgdOptimizer<T> {
    pub fn new(momentum: f64) -> Self {
        SgdOptimizer { momentum, velocity: Vec::new() }
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn step(
        &mut self,
        params: &mut [Param<T>],
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<(), TrainError> {
        check_grads(params, grads)?;
        self.velocity.resize(params.len(), None);
        let lr = T::of_f64(lr);
        let mu = T::of_f64(self.momentum);
        for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            if self.momentum == 0.0 {
                for (pv, &gv) in p.tensor.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
                continue;
            }
            let v = vel.get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, &gv), vv) in
                p.tensor.data_mut().iter_mut().zip(g.data()).zip(v.data_mut())
            {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Adam with the standard bias correction. First and second moments are
/// kept per parameter; `t` counts calls to [`AdamOptimizer::step`].
#[derive(Debug, Clone)]
pub struct AdamOptimizer<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for AdamOptimizer<T> {
    fn default() -> Self {
        AdamOptimizer { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl<T: Scalar> AdamOptimizer<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn beta2(&self) -> f64 {
        self.beta2
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn step(
        &mut self,
        params: &mut [Param<T>],
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<(), TrainError> {
        check_grads(params, grads)?;
        self.m.resize(params.len(), None);
        self.v.resize(params.len(), None);
        self.t += 1;
        let b1 = T::of_f64(self.beta1);
        let b2 = T::of_f64(self.beta2);
        let one_m_b1 = T::of_f64(1.0 - self.beta1);
        let one_m_b2 = T::of_f64(1.0 - self.beta2);
        // Bias corrections computed in f64; t stays small enough that
        // powi is exact to working precision.
        let c1 = T::of_f64(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let c2 = T::of_f64(1.0 / (1.0 - self.beta2.powi(self.t as i32)));
        let lr = T::of_f64(lr);
        let eps = T::of_f64(self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_m_b1 * gv;
                *vv = b2 * *vv + one_m_b2 * gv * gv;
                let m_hat = *mv * c1;
                let v_hat = *vv * c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
