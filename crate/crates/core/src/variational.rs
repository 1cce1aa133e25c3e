//! Variational objectives and the surrogate costs whose gradients are the
//! standard estimators.
//!
//! | objective | estimator | latent families |
//! |-----------|-----------|-----------------|
//! | ELBO      | [`VariationalObjective::sgvb`]      | reparameterizable |
//! | ELBO      | [`VariationalObjective::reinforce`] | any |
//! | IW bound  | [`VariationalObjective::sgvb`] (IWAE) | reparameterizable |
//! | IW bound  | [`VariationalObjective::vimco`]     | any |
//! | KL(p‖q)   | [`VariationalObjective::rws`]       | any |
//!
//! Every cost is per batch element (the sample axis, if any, is reduced);
//! callers average over the batch before differentiating.

use std::collections::BTreeMap;

use crate::bayesnet::{sum_log_probs, BayesianNet, Observed};
use crate::error::{Error, Result};
use crate::tensor::{lanes, math, Array, Tensor};

/// Samples from the variational (or proposal) net with their log-densities.
#[derive(Debug, Clone, Default)]
pub struct LatentBundle {
    entries: BTreeMap<String, (Tensor, Tensor)>,
    sample_axis: Option<usize>,
}

impl LatentBundle {
    pub fn new(sample_axis: Option<usize>) -> Self {
        Self { entries: BTreeMap::new(), sample_axis }
    }

    pub fn with(mut self, name: &str, sample: Tensor, log_prob: Tensor) -> Self {
        self.entries.insert(name.to_string(), (sample, log_prob));
        self
    }

    /// Queries `names` of a built variational net for outputs and local log-densities.
    pub fn from_net(net: &BayesianNet, names: &[&str], sample_axis: Option<usize>) -> Result<Self> {
        let mut bundle = Self::new(sample_axis);
        for (name, q) in names.iter().zip(net.query(names, true, true)?) {
            let (Some(s), Some(lp)) = (q.output, q.local_log_prob) else {
                unreachable!("queried with outputs and log probs")
            };
            bundle.entries.insert(name.to_string(), (s, lp));
        }
        Ok(bundle)
    }

    pub fn sample_axis(&self) -> Option<usize> {
        self.sample_axis
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn samples(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, (s, _))| (k.as_str(), s))
    }

    /// Sum of the latents' log-densities.
    pub fn log_q(&self) -> Result<Tensor> {
        let terms: Vec<Tensor> = self.entries.values().map(|(_, lp)| lp.clone()).collect();
        sum_log_probs(&terms)
    }

    fn check_sample_axis(&self) -> Result<()> {
        let Some(axis) = self.sample_axis else { return Ok(()) };
        let mut extent = None;
        for (name, (s, lp)) in &self.entries {
            for t in [s, lp] {
                let k = t.shape().get(axis).copied().ok_or_else(|| {
                    Error::Shape(format!("latent `{name}` has no sample axis {axis}: {:?}", t.shape()))
                })?;
                match extent {
                    None => extent = Some(k),
                    Some(e) if e != k => {
                        return Err(Error::Shape(format!(
                            "latent `{name}` has {k} samples on axis {axis}, expected {e}"
                        )))
                    }
                    _ => {}
                }
            }
        }
        if extent == Some(0) {
            return Err(Error::Shape("sample axis has extent 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Elbo,
    ImportanceWeighted,
    Klpq,
}

/// Moving-average baseline for the score-function estimator.
#[derive(Debug, Clone)]
pub struct BaselineState {
    moving_average: f64,
    decay: f64,
    initialized: bool,
}

impl Default for BaselineState {
    fn default() -> Self {
        Self::new(0.99)
    }
}

impl BaselineState {
    pub fn new(decay: f64) -> Self {
        assert!(decay > 0.0 && decay < 1.0, "baseline decay must lie in (0, 1)");
        Self { moving_average: 0.0, decay, initialized: false }
    }

    /// Current baseline; zero before the first update.
    pub fn value(&self) -> f64 {
        self.moving_average
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn update(&mut self, signal_mean: f64) {
        if self.initialized {
            self.moving_average = self.decay * self.moving_average + (1.0 - self.decay) * signal_mean;
        } else {
            self.moving_average = signal_mean;
            self.initialized = true;
        }
    }
}

/// Log-joint and log-q evaluated at one set of latent samples.
#[derive(Debug, Clone)]
pub struct VariationalObjective {
    kind: ObjectiveKind,
    log_joint: Tensor,
    log_q: Tensor,
    log_w: Tensor,
    sample_axis: Option<usize>,
    latents: Vec<(String, Tensor)>,
}

fn evaluate(
    kind: ObjectiveKind,
    log_joint: impl FnOnce(&Observed) -> Result<Tensor>,
    observed: &Observed,
    latent: &LatentBundle,
) -> Result<VariationalObjective> {
    latent.check_sample_axis()?;
    let mut merged = observed.clone();
    for (name, s) in latent.samples() {
        if merged.insert(name.to_string(), s.clone()).is_some() {
            return Err(Error::Contract(format!("`{name}` is both observed and latent")));
        }
    }
    let lj = log_joint(&merged)?;
    let lq = latent.log_q()?;
    let lw = lj.sub(&lq)?;
    if let Some(axis) = latent.sample_axis {
        if axis >= lw.rank() {
            return Err(Error::Shape(format!(
                "log weights of shape {:?} have no sample axis {axis}",
                lw.shape()
            )));
        }
    }
    Ok(VariationalObjective {
        kind,
        log_joint: lj,
        log_q: lq,
        log_w: lw,
        sample_axis: latent.sample_axis,
        latents: latent.samples().map(|(k, v)| (k.to_string(), v.clone())).collect(),
    })
}

fn require_axis(latent: &LatentBundle, what: &str) -> Result<()> {
    if latent.sample_axis.is_none() {
        return Err(Error::Contract(format!("{what} needs a sample axis")));
    }
    Ok(())
}

/// Evidence lower bound E_q[log p(x, z) − log q(z)].
pub fn elbo(
    log_joint: impl FnOnce(&Observed) -> Result<Tensor>,
    observed: &Observed,
    latent: &LatentBundle,
) -> Result<VariationalObjective> {
    evaluate(ObjectiveKind::Elbo, log_joint, observed, latent)
}

/// Importance-weighted bound log (1/K) Σ p(x, zₖ)/q(zₖ) over the sample axis.
pub fn iw_objective(
    log_joint: impl FnOnce(&Observed) -> Result<Tensor>,
    observed: &Observed,
    latent: &LatentBundle,
) -> Result<VariationalObjective> {
    require_axis(latent, "importance weighted objective")?;
    evaluate(ObjectiveKind::ImportanceWeighted, log_joint, observed, latent)
}

/// Inclusive KL(p‖q) objective; surrogate-only (no bound value).
pub fn klpq(
    log_joint: impl FnOnce(&Observed) -> Result<Tensor>,
    observed: &Observed,
    latent: &LatentBundle,
) -> Result<VariationalObjective> {
    require_axis(latent, "klpq objective")?;
    evaluate(ObjectiveKind::Klpq, log_joint, observed, latent)
}

/// Convenience for `klpq(..)?.rws()`.
pub fn klpq_rws_cost(
    log_joint: impl FnOnce(&Observed) -> Result<Tensor>,
    observed: &Observed,
    latent: &LatentBundle,
) -> Result<Tensor> {
    klpq(log_joint, observed, latent)?.rws()
}

impl VariationalObjective {
    pub fn kind(&self) -> ObjectiveKind {
        self.kind
    }

    pub fn log_joint(&self) -> &Tensor {
        &self.log_joint
    }

    pub fn log_q(&self) -> &Tensor {
        &self.log_q
    }

    /// `log p(x, z) − log q(z)` per sample.
    pub fn log_weights(&self) -> &Tensor {
        &self.log_w
    }

    fn n_samples(&self) -> usize {
        self.sample_axis.map_or(1, |a| self.log_w.shape()[a])
    }

    fn reduce_mean(&self, t: &Tensor) -> Result<Tensor> {
        match self.sample_axis {
            Some(a) => t.mean(&[a], false),
            None => Ok(t.clone()),
        }
    }

    /// Bound estimate per batch element. Reading it changes no state.
    pub fn bound(&self) -> Result<Tensor> {
        match (self.kind, self.sample_axis) {
            (ObjectiveKind::Elbo, _) => self.reduce_mean(&self.log_w),
            (ObjectiveKind::ImportanceWeighted, Some(a)) => Ok(self
                .log_w
                .logsumexp(&[a], false)?
                .add_scalar(-(self.n_samples() as f64).ln())),
            (ObjectiveKind::Klpq, _) => {
                Err(Error::Contract("the klpq objective has no bound value".into()))
            }
            (ObjectiveKind::ImportanceWeighted, None) => unreachable!("axis checked at construction"),
        }
    }

    /// Pathwise cost `−bound` (SGVB for ELBO, IWAE for the IW bound).
    pub fn sgvb(&self) -> Result<Tensor> {
        if self.kind == ObjectiveKind::Klpq {
            return Err(Error::Contract("sgvb applies to elbo or iw objectives".into()));
        }
        if let Some((name, _)) = self.latents.iter().find(|(_, s)| !s.requires_grad()) {
            return Err(Error::Contract(format!(
                "latent `{name}` carries no gradient; sgvb needs reparameterized samples"
            )));
        }
        Ok(self.bound()?.neg())
    }

    /// Score-function cost with a moving-average baseline. Updates `baseline`
    /// after the cost is formed, so the baseline never depends on these samples.
    pub fn reinforce(&self, baseline: &mut BaselineState) -> Result<Tensor> {
        if self.kind != ObjectiveKind::Elbo {
            return Err(Error::Contract("reinforce applies to the elbo objective".into()));
        }
        let signal = self.log_w.stop_gradient();
        let centered = signal.add_scalar(-baseline.value());
        let surrogate = centered.mul(&self.log_q)?.add(&self.log_w)?;
        let cost = self.reduce_mean(&surrogate)?.neg();
        baseline.update(signal.value().mean_all());
        Ok(cost)
    }

    /// Leave-one-out multi-sample score-function cost for the IW bound.
    pub fn vimco(&self) -> Result<Tensor> {
        if self.kind != ObjectiveKind::ImportanceWeighted {
            return Err(Error::Contract("vimco applies to the iw objective".into()));
        }
        let axis = self.sample_axis.expect("iw objective has a sample axis");
        if self.n_samples() < 2 {
            return Err(Error::Contract("vimco needs at least 2 samples".into()));
        }
        let signals = Tensor::constant(vimco_signals(self.log_w.value(), axis));
        let score = signals.mul(&self.log_q)?.sum(&[axis], false)?;
        Ok(score.add(&self.bound()?)?.neg())
    }

    /// Self-normalized importance-weighted score cost adapting q toward the posterior.
    pub fn rws(&self) -> Result<Tensor> {
        if self.kind != ObjectiveKind::Klpq {
            return Err(Error::Contract("rws applies to the klpq objective".into()));
        }
        let axis = self.sample_axis.expect("klpq objective has a sample axis");
        let weights = Tensor::constant(normalized_weights(self.log_w.value(), axis)?);
        Ok(weights.mul(&self.log_q)?.sum(&[axis], false)?.neg())
    }
}

/// Softmax of log-weights along `axis`.
pub fn normalized_weights(log_w: &Array, axis: usize) -> Result<Array> {
    let lse = log_w.logsumexp_axes(&[axis], true)?;
    Ok(log_w.sub(&lse)?.map(f64::exp))
}

/// Per-sample learning signals `L̂ − L̂₋ᵢ`, where `L̂₋ᵢ` replaces `ℓᵢ` by
/// the mean of the other log-weights.
fn vimco_signals(log_w: &Array, axis: usize) -> Array {
    let (outer, k, inner) = lanes(log_w.shape(), axis);
    let data = log_w.data();
    let mut out = vec![0.0; data.len()];
    let mut lane = vec![0.0; k];
    let ln_k = (k as f64).ln();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * k + j) * inner + i;
            for (j, l) in lane.iter_mut().enumerate() {
                *l = data[at(j)];
            }
            let full = math::logsumexp(&lane) - ln_k;
            let total: f64 = lane.iter().sum();
            for j in 0..k {
                let own = lane[j];
                lane[j] = (total - own) / (k - 1) as f64;
                let loo = math::logsumexp(&lane) - ln_k;
                lane[j] = own;
                out[at(j)] = full - loo;
            }
        }
    }
    Array::new(log_w.shape().to_vec(), out).expect("same shape")
}
