use super::{Array, Tape, Tensor};
use crate::error::{Error, Result};

/// A trainable value carrying its own Adam moment estimates.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    value: Array,
    adam_m: Array,
    adam_v: Array,
    step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Array) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            value,
            adam_m: Array::zeros(shape.clone()),
            adam_v: Array::zeros(shape),
            step_count: 0,
        }
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn set_value(&mut self, value: Array) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.name,
                self.value.shape(),
                value.shape()
            )));
        }
        self.value = value;
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Registers the current value as a leaf of `tape`.
    pub fn bind(&self, tape: &Tape) -> Tensor {
        tape.leaf(self.value.clone())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected Adam update of every parameter. All gradients are
    /// validated before any parameter changes.
    pub fn step(&self, params: &mut [&mut Parameter], grads: &[Array]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter `{}` of shape {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Update(p.name.clone()));
            }
        }
        for (p, g) in params.iter_mut().zip(grads) {
            p.step_count += 1;
            let t = p.step_count as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let m = p.adam_m.data_mut();
            let v = p.adam_v.data_mut();
            let x = p.value.data_mut();
            for i in 0..x.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                x[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
