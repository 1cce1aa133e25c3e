//! Generative models and variational families for the bundled examples.

use indexmap::IndexMap;

use crate::bayesnet::{self, BayesianNet, Observed};
use crate::distributions::Distribution;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::math::{logsumexp, softplus};
use crate::tensor::{gradients, Adam, Array, Parameter, Tape, Tensor};
use crate::variational::LatentBundle;

use super::data::BlrData;

/// Named trainable parameters in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

/// Parameters bound to one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    tensors: IndexMap<String, Tensor>,
}

impl std::ops::Index<&str> for Bound {
    type Output = Tensor;

    fn index(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }
}

impl ParamSet {
    pub fn push(&mut self, name: &str, value: Array) {
        self.params.push(Parameter::new(name, value));
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn set(&mut self, name: &str, value: Array) -> Result<()> {
        let known: Vec<String> = self.params.iter().map(|p| p.name.clone()).collect();
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Lookup { name: name.to_string(), known })?;
        p.set_value(value)
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound { tensors: self.params.iter().map(|p| (p.name.clone(), p.bind(tape))).collect() }
    }

    /// Gradient of `cost` with respect to `bound`, one Adam step.
    pub fn step(&mut self, adam: &Adam, bound: &Bound, cost: &Tensor) -> Result<()> {
        if self.params.is_empty() {
            return Ok(());
        }
        let refs: Vec<&Tensor> = bound.tensors.values().collect();
        let grads = gradients(cost, &refs)?;
        let mut muts: Vec<&mut Parameter> = self.params.iter_mut().collect();
        adam.step(&mut muts, &grads)
    }
}

fn init_weights(rng: &mut RngState, shape: &[usize], scale: f64) -> Array {
    rng.normal_array(shape).scale(scale)
}

/// A model with a variational family, as seen by the training loop.
pub trait LatentModel {
    fn p_params(&self) -> &ParamSet;
    fn q_params(&self) -> &ParamSet;
    fn p_params_mut(&mut self) -> &mut ParamSet;
    fn q_params_mut(&mut self) -> &mut ParamSet;
    fn observed(&self) -> Observed;
    /// Log joint under `observed`; leading sample axis when the latents carry one.
    fn log_joint(&self, p: &Bound, observed: &Observed, relaxed: bool) -> Result<Tensor>;
    /// `k` draws from q with a leading sample axis.
    fn q_latent(
        &self,
        q: &Bound,
        rng: &mut RngState,
        k: usize,
        relaxed: bool,
        reparameterized: bool,
    ) -> Result<LatentBundle>;
    /// `k` draws from the prior, for importance sampling with a prior proposal.
    fn prior_latent(&self, p: &Bound, rng: &mut RngState, k: usize) -> Result<LatentBundle>;
}

fn draw(dist: &Distribution, rng: &mut RngState, k: Option<usize>, reparameterized: bool) -> Result<Tensor> {
    if reparameterized {
        dist.rsample(rng, k)
    } else {
        dist.sample(rng, k)
    }
}

/// Bayesian logistic regression: `w ~ N(0, I)`, `y ~ Bernoulli(σ(X w))`,
/// with a mean-field Normal q over `w`.
#[derive(Debug, Clone)]
pub struct Blr {
    pub x: Array,
    pub y: Array,
    xt: Tensor,
    pub dim: usize,
    q: ParamSet,
    p: ParamSet,
}

impl Blr {
    pub fn new(data: &BlrData) -> Result<Self> {
        let dim = data.x.shape()[1];
        let mut q = ParamSet::default();
        q.push("w_mean", Array::zeros([dim]));
        q.push("w_logstd", Array::zeros([dim]));
        Ok(Self {
            x: data.x.clone(),
            y: data.y.clone(),
            xt: Tensor::constant(data.x.transpose_last()?),
            dim,
            q,
            p: ParamSet::default(),
        })
    }

    pub fn build(&self, observed: &Observed, rng: &mut RngState, n_samples: Option<usize>) -> Result<BayesianNet> {
        let mut net = BayesianNet::new(observed.clone());
        let prior = Distribution::normal(Tensor::constant(Array::zeros([self.dim])), Tensor::scalar(0.0))?
            .with_group_ndims(1);
        let w = net.add_node("w", prior, rng, n_samples)?;
        let logits = if w.rank() == 1 {
            w.reshape([1, self.dim])?.matmul(&self.xt)?.reshape([self.x.shape()[0]])?
        } else {
            w.matmul(&self.xt)?
        };
        net.add_node("y", Distribution::bernoulli(logits).with_group_ndims(1), rng, None)?;
        Ok(net)
    }

    pub fn variational_mean(&self) -> Vec<f64> {
        self.q.get("w_mean").expect("registered").value().data().to_vec()
    }

    pub fn variational_std(&self) -> Vec<f64> {
        self.q.get("w_logstd").expect("registered").value().data().iter().map(|l| l.exp()).collect()
    }
}

impl LatentModel for Blr {
    fn p_params(&self) -> &ParamSet {
        &self.p
    }
    fn q_params(&self) -> &ParamSet {
        &self.q
    }
    fn p_params_mut(&mut self) -> &mut ParamSet {
        &mut self.p
    }
    fn q_params_mut(&mut self) -> &mut ParamSet {
        &mut self.q
    }

    fn observed(&self) -> Observed {
        [("y".to_string(), Tensor::constant(self.y.clone()))].into()
    }

    fn log_joint(&self, _p: &Bound, observed: &Observed, _relaxed: bool) -> Result<Tensor> {
        let builder = |o: &Observed, rng: &mut RngState| self.build(o, rng, None);
        bayesnet::log_joint(&builder, observed, &["w", "y"], &mut RngState::new(0))
    }

    fn q_latent(&self, q: &Bound, rng: &mut RngState, k: usize, _relaxed: bool, reparam: bool) -> Result<LatentBundle> {
        let dist = Distribution::normal(q["w_mean"].clone(), q["w_logstd"].clone())?.with_group_ndims(1);
        let w = draw(&dist, rng, Some(k), reparam)?;
        let lp = dist.log_prob(&w)?;
        Ok(LatentBundle::new(Some(0)).with("w", w, lp))
    }

    fn prior_latent(&self, _p: &Bound, rng: &mut RngState, k: usize) -> Result<LatentBundle> {
        let net = self.build(&Observed::new(), rng, Some(k))?;
        LatentBundle::from_net(&net, &["w"], Some(0))
    }
}

/// Toy VAE: `z ~ N(0, I)`, two-layer decoder to Bernoulli pixels, and an
/// amortized Normal encoder.
#[derive(Debug, Clone)]
pub struct Vae {
    pub x: Array,
    pub n_z: usize,
    p: ParamSet,
    q: ParamSet,
}

impl Vae {
    pub fn new(x: Array, n_z: usize, n_h: usize, rng: &mut RngState) -> Self {
        let n_x = x.shape()[1];
        let mut p = ParamSet::default();
        p.push("dec_w1", init_weights(rng, &[n_z, n_h], 1.0 / (n_z as f64).sqrt()));
        p.push("dec_b1", Array::zeros([n_h]));
        p.push("dec_w2", init_weights(rng, &[n_h, n_x], 1.0 / (n_h as f64).sqrt()));
        p.push("dec_b2", Array::zeros([n_x]));
        let mut q = ParamSet::default();
        q.push("enc_w", init_weights(rng, &[n_x, n_h], 1.0 / (n_x as f64).sqrt()));
        q.push("enc_b", Array::zeros([n_h]));
        q.push("mean_w", init_weights(rng, &[n_h, n_z], 0.1 / (n_h as f64).sqrt()));
        q.push("mean_b", Array::zeros([n_z]));
        q.push("logstd_w", init_weights(rng, &[n_h, n_z], 0.1 / (n_h as f64).sqrt()));
        q.push("logstd_b", Array::zeros([n_z]));
        Self { x, n_z, p, q }
    }

    fn build(&self, p: &Bound, observed: &Observed, rng: &mut RngState, k: Option<usize>) -> Result<BayesianNet> {
        let n = self.x.shape()[0];
        let mut net = BayesianNet::new(observed.clone());
        let prior = Distribution::normal(Tensor::constant(Array::zeros([n, self.n_z])), Tensor::scalar(0.0))?
            .with_group_ndims(1);
        let z = net.add_node("z", prior, rng, k)?;
        let h = z.matmul(&p["dec_w1"])?.add(&p["dec_b1"])?.tanh();
        let logits = h.matmul(&p["dec_w2"])?.add(&p["dec_b2"])?;
        net.add_node("x", Distribution::bernoulli(logits).with_group_ndims(1), rng, None)?;
        Ok(net)
    }
}

impl LatentModel for Vae {
    fn p_params(&self) -> &ParamSet {
        &self.p
    }
    fn q_params(&self) -> &ParamSet {
        &self.q
    }
    fn p_params_mut(&mut self) -> &mut ParamSet {
        &mut self.p
    }
    fn q_params_mut(&mut self) -> &mut ParamSet {
        &mut self.q
    }

    fn observed(&self) -> Observed {
        [("x".to_string(), Tensor::constant(self.x.clone()))].into()
    }

    fn log_joint(&self, p: &Bound, observed: &Observed, _relaxed: bool) -> Result<Tensor> {
        let builder = |o: &Observed, rng: &mut RngState| self.build(p, o, rng, None);
        bayesnet::log_joint(&builder, observed, &["z", "x"], &mut RngState::new(0))
    }

    fn q_latent(&self, q: &Bound, rng: &mut RngState, k: usize, _relaxed: bool, reparam: bool) -> Result<LatentBundle> {
        let x = Tensor::constant(self.x.clone());
        let h = x.matmul(&q["enc_w"])?.add(&q["enc_b"])?.tanh();
        let mean = h.matmul(&q["mean_w"])?.add(&q["mean_b"])?;
        let logstd = h.matmul(&q["logstd_w"])?.add(&q["logstd_b"])?;
        let dist = Distribution::normal(mean, logstd)?.with_group_ndims(1);
        let z = draw(&dist, rng, Some(k), reparam)?;
        let lp = dist.log_prob(&z)?;
        Ok(LatentBundle::new(Some(0)).with("z", z, lp))
    }

    fn prior_latent(&self, p: &Bound, rng: &mut RngState, k: usize) -> Result<LatentBundle> {
        let net = self.build(p, &Observed::new(), rng, Some(k))?;
        LatentBundle::from_net(&net, &["z"], Some(0))
    }
}

/// Two-layer sigmoid belief net `z2 → z1 → x` with a ladder posterior
/// `q(z1 | x) q(z2 | z1)`. With `relaxed`, latent nodes use the binary
/// Concrete relaxation at `temperature`; otherwise they are Bernoulli.
#[derive(Debug, Clone)]
pub struct Dsbn {
    pub x: Array,
    pub n_z: usize,
    pub temperature: f64,
    p: ParamSet,
    q: ParamSet,
}

impl Dsbn {
    pub fn new(x: Array, n_z: usize, temperature: f64, rng: &mut RngState) -> Self {
        let mut s = Self::with_scale(x, n_z, temperature, rng, 0.1);
        s.p.set("z2_logits", Array::zeros([n_z])).expect("registered");
        s
    }

    /// Every parameter drawn from `N(0, scale²)`.
    pub fn with_scale(x: Array, n_z: usize, temperature: f64, rng: &mut RngState, scale: f64) -> Self {
        let n_x = x.shape()[1];
        let mut p = ParamSet::default();
        p.push("z2_logits", init_weights(rng, &[n_z], scale));
        p.push("w21", init_weights(rng, &[n_z, n_z], scale));
        p.push("b1", init_weights(rng, &[n_z], scale));
        p.push("w1x", init_weights(rng, &[n_z, n_x], scale));
        p.push("bx", init_weights(rng, &[n_x], scale));
        let mut q = ParamSet::default();
        q.push("q_wx1", init_weights(rng, &[n_x, n_z], scale));
        q.push("q_b1", init_weights(rng, &[n_z], scale));
        q.push("q_w12", init_weights(rng, &[n_z, n_z], scale));
        q.push("q_b2", init_weights(rng, &[n_z], scale));
        Self { x, n_z, temperature, p, q }
    }

    fn latent_dist(&self, logits: Tensor, relaxed: bool) -> Result<Distribution> {
        let d = if relaxed {
            Distribution::bin_concrete(self.temperature, logits)?
        } else {
            Distribution::bernoulli(logits)
        };
        Ok(d.with_group_ndims(1))
    }

    fn build(
        &self,
        p: &Bound,
        observed: &Observed,
        rng: &mut RngState,
        k: Option<usize>,
        relaxed: bool,
    ) -> Result<BayesianNet> {
        let n = self.x.shape()[0];
        let mut net = BayesianNet::new(observed.clone());
        let top = Tensor::constant(Array::zeros([n, self.n_z])).add(&p["z2_logits"])?;
        let z2 = net.add_node("z2", self.latent_dist(top, relaxed)?, rng, k)?;
        let l1 = z2.matmul(&p["w21"])?.add(&p["b1"])?;
        let z1 = net.add_node("z1", self.latent_dist(l1, relaxed)?, rng, None)?;
        let lx = z1.matmul(&p["w1x"])?.add(&p["bx"])?;
        net.add_node("x", Distribution::bernoulli(lx).with_group_ndims(1), rng, None)?;
        Ok(net)
    }

    /// Exact `log p(x)` per data row by summing over all `2^(2 n_z)` latent states.
    pub fn exact_log_likelihood(&self) -> Result<Vec<f64>> {
        if 2 * self.n_z > 20 {
            return Err(Error::Contract(format!("n_z = {} is too large to enumerate", self.n_z)));
        }
        let val = |name: &str| self.p.get(name).expect("registered").value().clone();
        let (a2, w21, b1, w1x, bx) = (val("z2_logits"), val("w21"), val("b1"), val("w1x"), val("bx"));
        let (nz, nx) = (self.n_z, self.x.shape()[1]);
        let log_bern = |v: f64, l: f64| if v > 0.5 { -softplus(-l) } else { -softplus(l) };
        let bits = |c: usize| (0..nz).map(|i| ((c >> i) & 1) as f64).collect::<Vec<_>>();
        // log p(z2) + log p(z1 | z2) and the logits of x for each state
        let mut states = Vec::new();
        for c2 in 0..1usize << nz {
            let z2 = bits(c2);
            let lp2: f64 = (0..nz).map(|i| log_bern(z2[i], a2.data()[i])).sum();
            for c1 in 0..1usize << nz {
                let z1 = bits(c1);
                let lp1: f64 = (0..nz)
                    .map(|j| {
                        let l = b1.data()[j] + (0..nz).map(|i| z2[i] * w21.data()[i * nz + j]).sum::<f64>();
                        log_bern(z1[j], l)
                    })
                    .sum();
                let lx: Vec<f64> = (0..nx)
                    .map(|d| bx.data()[d] + (0..nz).map(|j| z1[j] * w1x.data()[j * nx + d]).sum::<f64>())
                    .collect();
                states.push((lp2 + lp1, lx));
            }
        }
        let rows = self.x.shape()[0];
        Ok((0..rows)
            .map(|r| {
                let xr = &self.x.data()[r * nx..(r + 1) * nx];
                let terms: Vec<f64> = states
                    .iter()
                    .map(|(lz, lx)| lz + xr.iter().zip(lx).map(|(&v, &l)| log_bern(v, l)).sum::<f64>())
                    .collect();
                logsumexp(&terms)
            })
            .collect())
    }
}

impl LatentModel for Dsbn {
    fn p_params(&self) -> &ParamSet {
        &self.p
    }
    fn q_params(&self) -> &ParamSet {
        &self.q
    }
    fn p_params_mut(&mut self) -> &mut ParamSet {
        &mut self.p
    }
    fn q_params_mut(&mut self) -> &mut ParamSet {
        &mut self.q
    }

    fn observed(&self) -> Observed {
        [("x".to_string(), Tensor::constant(self.x.clone()))].into()
    }

    fn log_joint(&self, p: &Bound, observed: &Observed, relaxed: bool) -> Result<Tensor> {
        let builder = |o: &Observed, rng: &mut RngState| self.build(p, o, rng, None, relaxed);
        bayesnet::log_joint(&builder, observed, &["z2", "z1", "x"], &mut RngState::new(0))
    }

    fn q_latent(&self, q: &Bound, rng: &mut RngState, k: usize, relaxed: bool, reparam: bool) -> Result<LatentBundle> {
        let x = Tensor::constant(self.x.clone());
        let d1 = self.latent_dist(x.matmul(&q["q_wx1"])?.add(&q["q_b1"])?, relaxed)?;
        let z1 = draw(&d1, rng, Some(k), reparam)?;
        let d2 = self.latent_dist(z1.matmul(&q["q_w12"])?.add(&q["q_b2"])?, relaxed)?;
        let z2 = draw(&d2, rng, None, reparam)?;
        let (lp1, lp2) = (d1.log_prob(&z1)?, d2.log_prob(&z2)?);
        Ok(LatentBundle::new(Some(0)).with("z1", z1, lp1).with("z2", z2, lp2))
    }

    fn prior_latent(&self, p: &Bound, rng: &mut RngState, k: usize) -> Result<LatentBundle> {
        let net = self.build(p, &Observed::new(), rng, Some(k), false)?;
        LatentBundle::from_net(&net, &["z2", "z1"], Some(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::data::synth_blr_data;
    use crate::monte_carlo::is_loglikelihood;

    #[test]
    fn blr_log_joint_matches_direct_sum() {
        let data = synth_blr_data(20, 2, 1.0, 1);
        let blr = Blr::new(&data).unwrap();
        let w = [0.3, -0.7];
        let mut o = blr.observed();
        o.insert("w".into(), Tensor::constant(Array::from_vec(w.to_vec())));
        let lj = blr.log_joint(&blr.p.bind(&Tape::new()), &o, false).unwrap().item().unwrap();
        let mut direct = -(crate::tensor::math::LN_2PI) - 0.5 * (w[0] * w[0] + w[1] * w[1]);
        for i in 0..20 {
            let l = data.x.data()[2 * i] * w[0] + data.x.data()[2 * i + 1] * w[1];
            direct += if data.y.data()[i] > 0.5 { -softplus(-l) } else { -softplus(l) };
        }
        assert!((lj - direct).abs() < 1e-10);
    }

    #[test]
    fn dsbn_prior_importance_sampling_is_close_to_enumeration() {
        let mut rng = RngState::new(4);
        let x = Array::new([2, 4], vec![1., 0., 1., 1., 0., 0., 1., 0.]).unwrap();
        let model = Dsbn::with_scale(x, 2, 0.5, &mut rng, 1.0);
        let exact = model.exact_log_likelihood().unwrap();
        let tape = Tape::new();
        let p = model.p.bind(&tape);
        let latent = model.prior_latent(&p, &mut rng, 20000).unwrap();
        let est = is_loglikelihood(|o| model.log_joint(&p, o, false), &model.observed(), &latent).unwrap();
        for (e, x) in est.value().data().iter().zip(&exact) {
            assert!((e - x).abs() < 0.05, "{e} vs {x}");
        }
    }

    #[test]
    fn vae_shapes() {
        let mut rng = RngState::new(0);
        let vae = Vae::new(Array::zeros([5, 6]), 3, 4, &mut rng);
        let tape = Tape::new();
        let (p, q) = (vae.p.bind(&tape), vae.q.bind(&tape));
        let latent = vae.q_latent(&q, &mut rng, 7, false, true).unwrap();
        let mut o = vae.observed();
        for (k, v) in latent.samples() {
            o.insert(k.to_string(), v.clone());
        }
        assert_eq!(vae.log_joint(&p, &o, false).unwrap().shape(), &[7, 5]);
        assert_eq!(latent.log_q().unwrap().shape(), &[7, 5]);
    }
}
