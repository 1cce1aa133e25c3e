//! Distribution families with grouped log-densities and (where possible)
//! reparameterized sampling.
//!
//! Sampled values have shape `[n_samples?, ...batch]`, where `batch` is the
//! broadcast shape of the parameters (for `Categorical`, the logits without
//! their trailing class axis). `group_ndims` trailing axes of the
//! per-element log-density are summed into one grouped density.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::math::{self, LN_2PI};
use crate::tensor::{broadcast_shapes, Array, Tensor};

/// Relaxed samples are kept this far inside (0, 1) so their log-density stays finite.
const CONCRETE_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub enum Family {
    Normal { mean: Tensor, logstd: Tensor },
    Bernoulli { logits: Tensor },
    /// Class logits on the last axis; values are integer class indices.
    Categorical { logits: Tensor },
    /// Binary Concrete (relaxed Bernoulli) on (0, 1).
    BinConcrete { temperature: f64, logits: Tensor },
}

#[derive(Debug, Clone)]
pub struct Distribution {
    family: Family,
    group_ndims: usize,
}

impl Distribution {
    pub fn normal(mean: Tensor, logstd: Tensor) -> Result<Self> {
        broadcast_shapes(mean.shape(), logstd.shape())?;
        Ok(Self { family: Family::Normal { mean, logstd }, group_ndims: 0 })
    }

    pub fn bernoulli(logits: Tensor) -> Self {
        Self { family: Family::Bernoulli { logits }, group_ndims: 0 }
    }

    pub fn categorical(logits: Tensor) -> Result<Self> {
        if logits.shape().last().copied().unwrap_or(0) == 0 {
            return Err(Error::Shape(format!(
                "categorical logits need a non-empty class axis, got {:?}",
                logits.shape()
            )));
        }
        Ok(Self { family: Family::Categorical { logits }, group_ndims: 0 })
    }

    pub fn bin_concrete(temperature: f64, logits: Tensor) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Domain(format!(
                "concrete temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self { family: Family::BinConcrete { temperature, logits }, group_ndims: 0 })
    }

    pub fn with_group_ndims(mut self, group_ndims: usize) -> Self {
        self.group_ndims = group_ndims;
        self
    }

    pub fn group_ndims(&self) -> usize {
        self.group_ndims
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn is_reparameterized(&self) -> bool {
        matches!(self.family, Family::Normal { .. } | Family::BinConcrete { .. })
    }

    /// Broadcast shape of one draw without a sample axis.
    pub fn batch_shape(&self) -> Vec<usize> {
        match &self.family {
            Family::Normal { mean, logstd } => {
                broadcast_shapes(mean.shape(), logstd.shape()).expect("checked at construction")
            }
            Family::Bernoulli { logits } | Family::BinConcrete { logits, .. } => {
                logits.shape().to_vec()
            }
            Family::Categorical { logits } => {
                let s = logits.shape();
                s[..s.len() - 1].to_vec()
            }
        }
    }

    fn draw_shape(&self, n_samples: Option<usize>) -> Vec<usize> {
        let mut shape = Vec::new();
        shape.extend(n_samples);
        shape.extend(self.batch_shape());
        shape
    }

    /// Grouped log-density of `value`.
    pub fn log_prob(&self, value: &Tensor) -> Result<Tensor> {
        let elementwise = match &self.family {
            Family::Normal { mean, logstd } => {
                let z = value.sub(mean)?.mul(&logstd.neg().exp())?;
                z.square().mul_scalar(-0.5).sub(logstd)?.add_scalar(-0.5 * LN_2PI)
            }
            Family::Bernoulli { logits } => {
                if let Some(bad) = value.value().data().iter().find(|&&x| x != 0.0 && x != 1.0) {
                    return Err(Error::Domain(format!("Bernoulli value {bad} not in {{0, 1}}")));
                }
                let x = value.stop_gradient();
                let one_minus = x.neg().add_scalar(1.0);
                let pos = logits.neg().softplus().mul(&x)?;
                let neg = logits.softplus().mul(&one_minus)?;
                pos.add(&neg)?.neg()
            }
            Family::Categorical { logits } => {
                let last = logits.rank() - 1;
                let log_softmax = logits.sub(&logits.logsumexp(&[last], true)?)?;
                log_softmax.take_last(value.value())?
            }
            Family::BinConcrete { temperature, logits } => {
                if let Some(bad) = value.value().data().iter().find(|&&y| !(y > 0.0 && y < 1.0)) {
                    return Err(Error::Domain(format!("concrete value {bad} outside (0, 1)")));
                }
                let lam = *temperature;
                let log_y = value.log()?;
                let log_1my = value.neg().add_scalar(1.0).log()?;
                let a = logits.sub(&log_y.mul_scalar(lam))?;
                let b = log_1my.mul_scalar(-lam);
                let norm = a.logaddexp(&b)?.mul_scalar(-2.0);
                logits
                    .sub(&log_y.add(&log_1my)?.mul_scalar(lam + 1.0))?
                    .add(&norm)?
                    .add_scalar(lam.ln())
            }
        };
        if self.group_ndims > elementwise.rank() {
            return Err(Error::Shape(format!(
                "group_ndims {} exceeds value rank {}",
                self.group_ndims,
                elementwise.rank()
            )));
        }
        elementwise.sum_trailing(self.group_ndims)
    }

    /// Pathwise draw; gradients flow to the parameters through the sample.
    pub fn rsample(&self, rng: &mut RngState, n_samples: Option<usize>) -> Result<Tensor> {
        let shape = self.draw_shape(n_samples);
        let noise = match &self.family {
            Family::Normal { .. } => rng.normal_array(&shape),
            Family::BinConcrete { .. } => {
                rng.uniform_array(&shape).map(|u| u.ln() - (-u).ln_1p())
            }
            _ => {
                return Err(Error::Contract(
                    "family is not reparameterizable; use sample() instead".into(),
                ))
            }
        };
        self.reparameterize(&noise)
    }

    /// Applies the pathwise transform to caller-supplied base noise: a
    /// standard-normal variate for `Normal`, a standard-logistic variate for
    /// `BinConcrete`.
    pub fn reparameterize(&self, noise: &Array) -> Result<Tensor> {
        let eps = Tensor::constant(noise.clone());
        match &self.family {
            Family::Normal { mean, logstd } => mean.add(&logstd.exp().mul(&eps)?),
            Family::BinConcrete { temperature, logits } => Ok(logits
                .add(&eps)?
                .mul_scalar(1.0 / temperature)
                .sigmoid()
                .clamp(CONCRETE_EPS, 1.0 - CONCRETE_EPS)),
            _ => Err(Error::Contract("family is not reparameterizable".into())),
        }
    }

    /// Draw with no gradient linkage to the parameters.
    pub fn sample(&self, rng: &mut RngState, n_samples: Option<usize>) -> Result<Tensor> {
        match &self.family {
            Family::Bernoulli { logits } => {
                let shape = self.draw_shape(n_samples);
                let p = logits.value().map(math::sigmoid).broadcast_to(&shape)?;
                let draws = p.map(|p| if rng.uniform() < p { 1.0 } else { 0.0 });
                Ok(Tensor::constant(draws))
            }
            Family::Categorical { logits } => {
                Ok(Tensor::constant(sample_categorical(logits.value(), rng, n_samples)))
            }
            _ => Ok(self.rsample(rng, n_samples)?.stop_gradient()),
        }
    }

    /// `rsample` for reparameterizable families, `sample` otherwise.
    pub fn draw(&self, rng: &mut RngState, n_samples: Option<usize>) -> Result<Tensor> {
        if self.is_reparameterized() {
            self.rsample(rng, n_samples)
        } else {
            self.sample(rng, n_samples)
        }
    }
}

fn sample_categorical(logits: &Array, rng: &mut RngState, n_samples: Option<usize>) -> Array {
    let k = *logits.shape().last().expect("non-empty class axis");
    let batch = &logits.shape()[..logits.rank() - 1];
    let nb = logits.numel() / k;
    let n = n_samples.unwrap_or(1);
    let mut probs = vec![0.0; k];
    let mut out = Vec::with_capacity(n * nb);
    for _ in 0..n {
        for b in 0..nb {
            let lane = &logits.data()[b * k..(b + 1) * k];
            let lse = math::logsumexp(lane);
            for (p, &l) in probs.iter_mut().zip(lane) {
                *p = (l - lse).exp();
            }
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut class = k - 1;
            for (c, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    class = c;
                    break;
                }
            }
            out.push(class as f64);
        }
    }
    let mut shape = Vec::new();
    shape.extend(n_samples);
    shape.extend_from_slice(batch);
    Array::new(shape, out).expect("shape matches draw count")
}

/// Expands class indices `[...]` into one-hot rows `[..., k]`.
pub fn one_hot(indices: &Array, k: usize) -> Result<Array> {
    let mut shape = indices.shape().to_vec();
    shape.push(k);
    let mut out = Array::zeros(shape);
    for (i, &c) in indices.data().iter().enumerate() {
        if c < 0.0 || c >= k as f64 || c.fract() != 0.0 {
            return Err(Error::Domain(format!("class index {c} outside [0, {k})")));
        }
        out.data_mut()[i * k + c as usize] = 1.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn c(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn closed_form_log_probs() {
        let n = Distribution::normal(c(0.0), c(0.0)).unwrap();
        approx(n.log_prob(&c(0.0)).unwrap().item().unwrap(), -0.918_938_5, 1e-7);
        let b = Distribution::bernoulli(c(0.0));
        approx(b.log_prob(&c(1.0)).unwrap().item().unwrap(), -std::f64::consts::LN_2, 1e-12);
        for lam in [0.3, 1.0, 2.5] {
            let bc = Distribution::bin_concrete(lam, c(0.0)).unwrap();
            approx(bc.log_prob(&c(0.5)).unwrap().item().unwrap(), lam.ln(), 1e-12);
        }
        let g = Distribution::normal(Tensor::constant(Array::zeros([3])), c(0.0))
            .unwrap()
            .with_group_ndims(1);
        let lp = g.log_prob(&Tensor::constant(Array::zeros([3]))).unwrap();
        assert_eq!(lp.rank(), 0);
        approx(lp.item().unwrap(), -2.756_815_6, 1e-7);
    }

    #[test]
    fn support_and_shape_errors() {
        let b = Distribution::bernoulli(c(0.0));
        assert!(matches!(b.log_prob(&c(0.5)), Err(Error::Domain(_))));
        let bc = Distribution::bin_concrete(0.5, c(0.0)).unwrap();
        assert!(matches!(bc.log_prob(&c(1.0)), Err(Error::Domain(_))));
        assert!(matches!(Distribution::bin_concrete(0.0, c(0.0)), Err(Error::Domain(_))));
        let cat = Distribution::categorical(Tensor::constant(Array::zeros([2, 3]))).unwrap();
        assert!(matches!(cat.log_prob(&Tensor::constant(Array::from_vec(vec![0.0, 3.0]))), Err(Error::Domain(_))));
        let g = Distribution::normal(c(0.0), c(0.0)).unwrap().with_group_ndims(2);
        assert!(matches!(g.log_prob(&Tensor::constant(Array::zeros([4]))), Err(Error::Shape(_))));
    }

    #[test]
    fn bernoulli_logits_are_stable() {
        let b = Distribution::bernoulli(c(800.0));
        assert_eq!(b.log_prob(&c(1.0)).unwrap().item().unwrap(), 0.0);
        approx(b.log_prob(&c(0.0)).unwrap().item().unwrap(), -800.0, 1e-9);
    }

    #[test]
    fn rsample_noise_identity_and_gradient() {
        let tape = Tape::new();
        let mu = tape.leaf(Array::from_vec(vec![1.0, -2.0]));
        let d = Distribution::normal(mu.clone(), c(0.3)).unwrap();
        let z = d.reparameterize(&Array::zeros([2])).unwrap();
        assert_eq!(z.value().data(), mu.value().data());
        let mut rng = RngState::new(3);
        let z = d.rsample(&mut rng, Some(4)).unwrap();
        assert_eq!(z.shape(), &[4, 2]);
        let g = z.sum(&[0], false).unwrap().sum_all().backward().unwrap().wrt(&mu);
        assert_eq!(g.data(), &[4.0, 4.0]);
    }

    #[test]
    fn non_reparameterizable_rsample_is_contract_error() {
        let mut rng = RngState::new(0);
        let b = Distribution::bernoulli(c(0.0));
        assert!(matches!(b.rsample(&mut rng, None), Err(Error::Contract(_))));
    }

    #[test]
    fn saturated_bernoulli_draws_ones() {
        let mut rng = RngState::new(9);
        let b = Distribution::bernoulli(Tensor::constant(Array::full([50], 40.0)));
        let x = b.sample(&mut rng, Some(100)).unwrap();
        assert_eq!(x.shape(), &[100, 50]);
        assert!(x.value().data().iter().all(|&v| v == 1.0));
        assert!(!x.requires_grad());
    }

    #[test]
    fn categorical_sample_shape_and_one_hot() {
        let mut rng = RngState::new(5);
        let cat = Distribution::categorical(Tensor::constant(Array::zeros([3, 4]))).unwrap();
        let s = cat.sample(&mut rng, Some(2)).unwrap();
        assert_eq!(s.shape(), &[2, 3]);
        let oh = one_hot(s.value(), 4).unwrap();
        assert_eq!(oh.shape(), &[2, 3, 4]);
        assert_eq!(oh.sum_all(), 6.0);
    }

    #[test]
    fn group_ndims_is_sum_of_elementwise() {
        let mut rng = RngState::new(11);
        let mean = Tensor::constant(rng.normal_array(&[2, 3, 4]));
        let d0 = Distribution::normal(mean.clone(), c(0.2)).unwrap();
        let x = d0.rsample(&mut rng, None).unwrap();
        let lp0 = d0.log_prob(&x).unwrap();
        for g in 0..=3 {
            let lpg = d0.clone().with_group_ndims(g).log_prob(&x).unwrap();
            let manual = lp0.sum_trailing(g).unwrap();
            assert_eq!(lpg.value(), manual.value());
        }
    }
}
