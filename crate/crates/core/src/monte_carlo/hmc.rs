//! Vectorized Hamiltonian Monte Carlo.
//!
//! Every latent is stored with a leading chain axis `[C, ...event]`. Chains
//! share the log-joint evaluation (one tape per gradient) but never share
//! state: momenta, accept decisions and rejections are per chain, and each
//! chain draws from its own RNG stream.
//!
//! Warm-up runs dual-averaging step-size adaptation toward the target
//! acceptance and, optionally, estimates a diagonal mass from pooled
//! positions of the second half of warm-up. When both adaptations are on, the
//! mass window covers the third quarter; the mass is then fixed and dual
//! averaging restarts for the final quarter so the frozen step size matches
//! the new metric.

use std::collections::BTreeMap;

use crate::bayesnet::Observed;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Array, Tape, Tensor};

/// Per-latent arrays with a leading chain axis.
pub type Positions = BTreeMap<String, Array>;

#[derive(Debug, Clone)]
pub struct HmcConfig {
    pub initial_step_size: f64,
    pub n_leapfrogs: usize,
    pub adapt_step_size: bool,
    pub target_acceptance: f64,
    pub adapt_mass: bool,
    pub n_chains: usize,
    pub warmup_iters: usize,
    /// Each transition scales the shared step size by U(1 - j, 1 + j), drawn
    /// from a dedicated stream. Breaks periodic trajectories on near-isotropic
    /// targets; 0 disables.
    pub step_size_jitter: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            initial_step_size: 1e-3,
            n_leapfrogs: 10,
            adapt_step_size: true,
            target_acceptance: 0.8,
            adapt_mass: false,
            n_chains: 1,
            warmup_iters: 0,
            step_size_jitter: 0.0,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Contract(format!("invalid HMC config: {m}")));
        if !(self.initial_step_size > 0.0 && self.initial_step_size.is_finite()) {
            return bad("initial_step_size must be positive");
        }
        if self.n_leapfrogs == 0 {
            return bad("n_leapfrogs must be at least 1");
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return bad("target_acceptance must lie in (0, 1)");
        }
        if self.n_chains == 0 {
            return bad("n_chains must be at least 1");
        }
        if !(0.0..1.0).contains(&self.step_size_jitter) {
            return bad("step_size_jitter must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Nesterov dual-averaging state for the log step size.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    pub log_eps_bar: f64,
    pub h_bar: f64,
    pub t: u64,
    pub mu: f64,
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
}

impl DualAveraging {
    pub fn new(step_size: f64) -> Self {
        Self {
            log_eps_bar: 0.0,
            h_bar: 0.0,
            t: 0,
            mu: (10.0 * step_size).ln(),
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
        }
    }

    /// Feeds one acceptance statistic; returns the next log step size.
    pub fn update(&mut self, target: f64, acceptance: f64) -> f64 {
        self.t += 1;
        let t = self.t as f64;
        let eta = 1.0 / (t + self.t0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (target - acceptance);
        let log_eps = self.mu - t.sqrt() / self.gamma * self.h_bar;
        let w = t.powf(-self.kappa);
        self.log_eps_bar = w * log_eps + (1.0 - w) * self.log_eps_bar;
        log_eps
    }
}

/// Streaming mean/variance per coordinate, pooled over chains.
#[derive(Debug, Clone, Default)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn push(&mut self, x: &[f64]) {
        if self.mean.is_empty() {
            self.mean = vec![0.0; x.len()];
            self.m2 = vec![0.0; x.len()];
        }
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    fn variance(&self) -> Option<Vec<f64>> {
        match self.n {
            0 => None,
            1 => Some(vec![0.0; self.mean.len()]),
            n => Some(self.m2.iter().map(|s| s / (n - 1) as f64).collect()),
        }
    }
}

/// Log joint per chain and its gradient with respect to each latent.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub log_joint: Vec<f64>,
    pub grad: Positions,
}

/// End point of a leapfrog trajectory.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub positions: Positions,
    pub momenta: Positions,
    pub end: Evaluation,
    /// Chains whose gradient or log joint became non-finite along the way.
    pub divergent: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct HmcInfo {
    pub accepted: Vec<bool>,
    pub acceptance_prob: Vec<f64>,
    pub acceptance_rate: f64,
    pub hamiltonian_old: Vec<f64>,
    pub hamiltonian_new: Vec<f64>,
    pub step_size: f64,
    pub divergent: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct HmcChainState {
    pub positions: Positions,
    pub step_size: f64,
    pub dual_avg: DualAveraging,
    /// Per-latent diagonal mass over the event shape (no chain axis).
    pub mass_diag: Positions,
    pub target_acceptance: f64,
    step_size_jitter: Option<(f64, RngState)>,
    warmup_buffer: BTreeMap<String, Welford>,
    n_chains: usize,
    cached: Option<Evaluation>,
}

fn chain_count(positions: &Positions) -> Result<usize> {
    let mut count = None;
    for (name, a) in positions {
        let c = *a.shape().first().ok_or_else(|| {
            Error::Shape(format!("latent `{name}` needs a leading chain axis"))
        })?;
        match count {
            None => count = Some(c),
            Some(n) if n != c => {
                return Err(Error::Shape(format!(
                    "latent `{name}` has {c} chains, expected {n}"
                )))
            }
            _ => {}
        }
    }
    match count {
        Some(c) if c > 0 => Ok(c),
        _ => Err(Error::Contract("HMC needs at least one latent and one chain".into())),
    }
}

impl HmcChainState {
    pub fn new(latent_init: Positions, initial_step_size: f64, target_acceptance: f64) -> Result<Self> {
        let n_chains = chain_count(&latent_init)?;
        for (name, a) in &latent_init {
            if !a.is_finite() {
                return Err(Error::State(format!("initial position of `{name}` is not finite")));
            }
        }
        let mass_diag = latent_init
            .iter()
            .map(|(k, a)| (k.clone(), Array::ones(a.shape()[1..].to_vec())))
            .collect();
        Ok(Self {
            positions: latent_init,
            step_size: initial_step_size,
            dual_avg: DualAveraging::new(initial_step_size),
            mass_diag,
            target_acceptance,
            step_size_jitter: None,
            warmup_buffer: BTreeMap::new(),
            n_chains,
            cached: None,
        })
    }

    pub fn n_chains(&self) -> usize {
        self.n_chains
    }

    /// Enables per-transition step-size jitter of relative width `jitter`.
    pub fn set_step_size_jitter(&mut self, jitter: f64, rng: RngState) {
        self.step_size_jitter = (jitter > 0.0).then_some((jitter, rng));
    }

    /// One dual-averaging step from the across-chain mean acceptance.
    pub fn adapt_step_size(&mut self, mean_acceptance: f64) {
        let log_eps = self.dual_avg.update(self.target_acceptance, mean_acceptance);
        self.step_size = log_eps.exp();
    }

    /// Fixes the step size at the dual-averaged iterate.
    pub fn freeze_step_size(&mut self) {
        if self.dual_avg.t > 0 {
            self.step_size = self.dual_avg.log_eps_bar.exp();
        }
    }

    /// Restarts dual averaging around the current step size.
    pub fn restart_step_size_adaptation(&mut self) {
        self.dual_avg = DualAveraging::new(self.step_size);
    }

    /// Adds every chain's current position to the mass-estimation window.
    pub fn accumulate_warmup(&mut self) {
        let c = self.n_chains;
        for (name, a) in &self.positions {
            let buf = self.warmup_buffer.entry(name.clone()).or_default();
            let e = a.numel() / c;
            for chain in 0..c {
                buf.push(&a.data()[chain * e..(chain + 1) * e]);
            }
        }
    }

    pub fn warmup_samples(&self) -> usize {
        self.warmup_buffer.values().next().map_or(0, |w| w.n)
    }

    /// Sets `mass_diag = 1 / v_reg` from the pooled window; ones when empty.
    pub fn adapt_mass(&mut self) {
        for (name, mass) in self.mass_diag.iter_mut() {
            let var = self.warmup_buffer.get(name).and_then(|w| w.variance().map(|v| (w.n, v)));
            *mass = match var {
                None => Array::ones(mass.shape().to_vec()),
                Some((n, v)) => {
                    let n = n as f64;
                    let data = v
                        .iter()
                        .map(|&v| 1.0 / ((n / (n + 5.0)) * v + (5.0 / (n + 5.0)) * 1e-3))
                        .collect();
                    Array::new(mass.shape().to_vec(), data).expect("event shape")
                }
            };
        }
        self.warmup_buffer.clear();
        self.cached = None;
    }
}

/// Log joint per chain plus gradients, on a fresh tape.
pub fn evaluate_log_joint<F>(log_joint: &mut F, observed: &Observed, positions: &Positions) -> Result<Evaluation>
where
    F: FnMut(&Observed) -> Result<Tensor> + ?Sized,
{
    let n_chains = chain_count(positions)?;
    let tape = Tape::new();
    let mut merged = observed.clone();
    let mut leaves = Vec::with_capacity(positions.len());
    for (name, a) in positions {
        let leaf = tape.leaf(a.clone());
        if merged.insert(name.clone(), leaf.clone()).is_some() {
            return Err(Error::Contract(format!("`{name}` is both observed and latent")));
        }
        leaves.push((name.clone(), leaf));
    }
    let lj = log_joint(&merged)?;
    let per_chain = match lj.shape() {
        [] if n_chains == 1 => lj.reshape([1])?,
        [c, ..] if *c == n_chains => {
            let rest: Vec<usize> = (1..lj.rank()).collect();
            lj.sum(&rest, false)?
        }
        s => {
            return Err(Error::Shape(format!(
                "log joint of shape {s:?} does not lead with {n_chains} chains"
            )))
        }
    };
    let g = per_chain.sum_all().backward()?;
    Ok(Evaluation {
        log_joint: per_chain.value().data().to_vec(),
        grad: leaves.into_iter().map(|(k, leaf)| (k, g.wrt(&leaf))).collect(),
    })
}

/// `½ Σ p² / m` per chain.
pub fn kinetic_energy(momenta: &Positions, mass_diag: &Positions, n_chains: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_chains];
    for (name, p) in momenta {
        let m = mass_diag[name].data();
        let e = m.len();
        for (i, &pi) in p.data().iter().enumerate() {
            out[i / e] += 0.5 * pi * pi / m[i % e];
        }
    }
    out
}

fn kick(momenta: &mut Positions, grad: &Positions, h: f64) {
    for (name, p) in momenta.iter_mut() {
        let g = grad[name].data();
        p.data_mut().iter_mut().zip(g).for_each(|(p, g)| *p += h * g);
    }
}

fn drift(positions: &mut Positions, momenta: &Positions, mass_diag: &Positions, h: f64) {
    for (name, z) in positions.iter_mut() {
        let p = momenta[name].data();
        let m = mass_diag[name].data();
        let e = m.len();
        z.data_mut().iter_mut().enumerate().for_each(|(i, z)| *z += h * p[i] / m[i % e]);
    }
}

fn mark_divergent(eval: &Evaluation, n_chains: usize, divergent: &mut [bool]) {
    for (c, lj) in eval.log_joint.iter().enumerate() {
        if !lj.is_finite() {
            divergent[c] = true;
        }
    }
    for g in eval.grad.values() {
        let e = g.numel() / n_chains;
        for (i, v) in g.data().iter().enumerate() {
            if !v.is_finite() {
                divergent[i / e] = true;
            }
        }
    }
}

/// Leapfrog integration of `n_steps` steps from `(positions, momenta)`,
/// starting from the already-evaluated gradient `start`.
pub fn leapfrog<G>(
    positions: &Positions,
    momenta: &Positions,
    start: &Evaluation,
    step_size: f64,
    n_steps: usize,
    mass_diag: &Positions,
    grad_log_joint: &mut G,
) -> Result<Trajectory>
where
    G: FnMut(&Positions) -> Result<Evaluation> + ?Sized,
{
    let n_chains = chain_count(positions)?;
    let mut z = positions.clone();
    let mut p = momenta.clone();
    let mut divergent = vec![false; n_chains];
    kick(&mut p, &start.grad, 0.5 * step_size);
    let mut eval = start.clone();
    for step in 0..n_steps {
        drift(&mut z, &p, mass_diag, step_size);
        eval = grad_log_joint(&z)?;
        mark_divergent(&eval, n_chains, &mut divergent);
        let h = if step + 1 == n_steps { 0.5 * step_size } else { step_size };
        kick(&mut p, &eval.grad, h);
    }
    Ok(Trajectory { positions: z, momenta: p, end: eval, divergent })
}

fn copy_chain(dst: &mut Array, src: &Array, chain: usize, n_chains: usize) {
    let e = dst.numel() / n_chains;
    dst.data_mut()[chain * e..(chain + 1) * e].copy_from_slice(&src.data()[chain * e..(chain + 1) * e]);
}

/// One HMC transition for every chain. `rngs` holds one stream per chain.
pub fn hmc_transition<F>(
    state: &mut HmcChainState,
    n_leapfrogs: usize,
    log_joint: &mut F,
    observed: &Observed,
    rngs: &mut [RngState],
) -> Result<HmcInfo>
where
    F: FnMut(&Observed) -> Result<Tensor>,
{
    let c = state.n_chains;
    if rngs.len() != c {
        return Err(Error::Contract(format!("{} RNG streams for {c} chains", rngs.len())));
    }
    for (name, a) in &state.positions {
        if a.data().iter().any(|v| v.is_nan()) {
            return Err(Error::State(format!("position of `{name}` contains NaN")));
        }
    }
    let start = match state.cached.take() {
        Some(e) => e,
        None => evaluate_log_joint(log_joint, observed, &state.positions)?,
    };
    if start.log_joint.iter().any(|v| !v.is_finite()) {
        return Err(Error::State("log joint is not finite at the current position".into()));
    }

    let mut momenta = Positions::new();
    for (name, z) in &state.positions {
        let m = state.mass_diag[name].data();
        let e = m.len();
        let mut p = Array::zeros(z.shape().to_vec());
        for (lane, rng) in p.data_mut().chunks_mut(e).zip(rngs.iter_mut()) {
            for (v, m) in lane.iter_mut().zip(m) {
                *v = m.sqrt() * rng.normal();
            }
        }
        momenta.insert(name.clone(), p);
    }

    let k_old = kinetic_energy(&momenta, &state.mass_diag, c);
    let h_old: Vec<f64> = start.log_joint.iter().zip(&k_old).map(|(lj, k)| -lj + k).collect();

    let step_size = match &mut state.step_size_jitter {
        Some((j, rng)) => state.step_size * (1.0 + *j * (2.0 * rng.uniform() - 1.0)),
        None => state.step_size,
    };

    let mut grad_fn = |z: &Positions| evaluate_log_joint(log_joint, observed, z);
    let traj = leapfrog(
        &state.positions,
        &momenta,
        &start,
        step_size,
        n_leapfrogs,
        &state.mass_diag,
        &mut grad_fn,
    )?;
    let k_new = kinetic_energy(&traj.momenta, &state.mass_diag, c);

    let mut info = HmcInfo {
        accepted: vec![false; c],
        acceptance_prob: vec![0.0; c],
        acceptance_rate: 0.0,
        hamiltonian_old: h_old.clone(),
        hamiltonian_new: vec![0.0; c],
        step_size: state.step_size,
        divergent: traj.divergent.clone(),
    };
    let mut current = start;
    for chain in 0..c {
        let h_new = -traj.end.log_joint[chain] + k_new[chain];
        info.hamiltonian_new[chain] = h_new;
        if !h_new.is_finite() {
            info.divergent[chain] = true;
        }
        let prob = if info.divergent[chain] {
            0.0
        } else {
            (h_old[chain] - h_new).exp().min(1.0)
        };
        info.acceptance_prob[chain] = prob;
        let u = rngs[chain].uniform();
        if u < prob {
            info.accepted[chain] = true;
            for (name, z) in state.positions.iter_mut() {
                copy_chain(z, &traj.positions[name], chain, c);
            }
            for (name, g) in current.grad.iter_mut() {
                copy_chain(g, &traj.end.grad[name], chain, c);
            }
            current.log_joint[chain] = traj.end.log_joint[chain];
        }
    }
    info.acceptance_rate = info.accepted.iter().filter(|&&a| a).count() as f64 / c as f64;
    state.cached = Some(current);
    Ok(info)
}

/// Draws and per-iteration diagnostics of a full run.
#[derive(Debug, Clone)]
pub struct HmcRun {
    pub draws: Vec<Positions>,
    pub info: Vec<HmcInfo>,
    pub warmup_info: Vec<HmcInfo>,
    pub state: HmcChainState,
}

/// Warm-up (adapting per `config`) followed by `n_draws` frozen transitions.
pub fn hmc_sample<F>(
    config: &HmcConfig,
    mut log_joint: F,
    observed: &Observed,
    latent_init: Positions,
    n_draws: usize,
    rng: &mut RngState,
) -> Result<HmcRun>
where
    F: FnMut(&Observed) -> Result<Tensor>,
{
    config.validate()?;
    let mut state = HmcChainState::new(latent_init, config.initial_step_size, config.target_acceptance)?;
    if state.n_chains != config.n_chains {
        return Err(Error::Shape(format!(
            "initial positions carry {} chains, config asks for {}",
            state.n_chains, config.n_chains
        )));
    }
    let mut rngs = rng.split(state.n_chains);
    state.set_step_size_jitter(config.step_size_jitter, rng.fork());
    let w = config.warmup_iters;
    let mass_start = w / 2;
    let mass_end = if config.adapt_step_size { mass_start + (w - mass_start) / 2 } else { w };

    let mut warmup_info = Vec::with_capacity(w);
    for i in 0..w {
        let info = hmc_transition(&mut state, config.n_leapfrogs, &mut log_joint, observed, &mut rngs)?;
        if config.adapt_step_size {
            let mean_prob = info.acceptance_prob.iter().sum::<f64>() / state.n_chains as f64;
            state.adapt_step_size(mean_prob);
        }
        if config.adapt_mass && i >= mass_start && i < mass_end {
            state.accumulate_warmup();
            if i + 1 == mass_end {
                state.adapt_mass();
                if config.adapt_step_size {
                    state.restart_step_size_adaptation();
                }
            }
        }
        warmup_info.push(info);
    }
    if config.adapt_step_size && w > 0 {
        state.freeze_step_size();
    }

    let mut draws = Vec::with_capacity(n_draws);
    let mut info = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        info.push(hmc_transition(&mut state, config.n_leapfrogs, &mut log_joint, observed, &mut rngs)?);
        draws.push(state.positions.clone());
    }
    Ok(HmcRun { draws, info, warmup_info, state })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_eval(z: &Positions) -> Result<Evaluation> {
        let x = &z["z"];
        let c = x.shape()[0];
        let e = x.numel() / c;
        let lj = (0..c)
            .map(|ch| -0.5 * x.data()[ch * e..(ch + 1) * e].iter().map(|v| v * v).sum::<f64>())
            .collect();
        Ok(Evaluation { log_joint: lj, grad: [("z".to_string(), x.scale(-1.0))].into() })
    }

    fn one(name: &str, a: Array) -> Positions {
        [(name.to_string(), a)].into()
    }

    #[test]
    fn dual_averaging_signs() {
        let mut d = DualAveraging::new(0.1);
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..100 {
            let l = d.update(0.8, 1.0);
            assert!(l > prev);
            prev = l;
        }
        let mut d = DualAveraging::new(0.1);
        let mut last = d.update(0.8, 0.8);
        for _ in 1..5000 {
            let l = d.update(0.8, 0.8);
            assert!((l - last).abs() < 1e-4 || d.t < 10);
            last = l;
        }
    }

    #[test]
    fn mass_fallback_and_symmetry() {
        let init = one("z", Array::zeros([2, 3]));
        let mut s = HmcChainState::new(init, 0.1, 0.8).unwrap();
        s.adapt_mass();
        assert_eq!(s.mass_diag["z"], Array::ones([3]));
        for k in 0..10 {
            s.positions.insert("z".into(), Array::full([2, 3], k as f64));
            s.accumulate_warmup();
        }
        s.adapt_mass();
        let m = s.mass_diag["z"].data().to_vec();
        assert!(m.iter().all(|&v| v == m[0]));
    }

    #[test]
    fn leapfrog_small_step_is_first_order() {
        let z = one("z", Array::from_vec(vec![1.0]).reshape([1, 1]).unwrap());
        let p = one("z", Array::from_vec(vec![0.7]).reshape([1, 1]).unwrap());
        let m = one("z", Array::from_vec(vec![2.0]));
        let start = gaussian_eval(&z).unwrap();
        let eps = 1e-6;
        let t = leapfrog(&z, &p, &start, eps, 1, &m, &mut gaussian_eval).unwrap();
        let dz = t.positions["z"].data()[0] - 1.0;
        assert!((dz - eps * 0.7 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn nan_initial_position_is_state_error() {
        let init = one("z", Array::full([1, 1], f64::NAN));
        assert!(matches!(HmcChainState::new(init, 0.1, 0.8), Err(Error::State(_))));
    }

    #[test]
    fn divergent_gradient_flags_chain() {
        let z = one("z", Array::new([2, 1], vec![1.0, 1.0]).unwrap());
        let p = one("z", Array::new([2, 1], vec![0.0, 0.0]).unwrap());
        let m = one("z", Array::ones([1]));
        let start = gaussian_eval(&z).unwrap();
        let mut bad = |z: &Positions| {
            let mut e = gaussian_eval(z)?;
            e.grad.get_mut("z").unwrap().data_mut()[1] = f64::INFINITY;
            Ok(e)
        };
        let t = leapfrog(&z, &p, &start, 0.1, 3, &m, &mut bad).unwrap();
        assert_eq!(t.divergent, vec![false, true]);
    }
}
