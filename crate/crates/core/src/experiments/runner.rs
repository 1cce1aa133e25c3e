use std::io::Write;

use crate::bayesnet::Observed;
use crate::error::{Error, Result};
use crate::monte_carlo::{hmc_sample, is_loglikelihood, HmcConfig, Positions};
use crate::rng::RngState;
use crate::tensor::math::logsumexp;
use crate::tensor::{Adam, Array, Tape, Tensor};
use crate::variational::{self, BaselineState};

use super::data::{self, BlrData};
use super::models::{Blr, Dsbn, LatentModel, Vae};
use super::{DataSource, Example, ExperimentConfig, MetricRecord, Method, Recorder, RunError};

/// Particles for the closing log-likelihood estimate of a training run.
const EVAL_PARTICLES: usize = 100;
/// Importance samples per chunk when estimating log-likelihoods.
const IS_CHUNK: usize = 1000;
/// Enumeration is reported only when `2 n_z` stays below this.
const MAX_ENUM_BITS: usize = 12;

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub records: Vec<MetricRecord>,
}

impl RunSummary {
    pub fn last(&self) -> Option<&MetricRecord> {
        self.records.last()
    }
}

/// Runs one experiment, writing a JSON line per reporting interval to `sink`.
pub fn run_experiment(cfg: &ExperimentConfig, sink: &mut dyn Write) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    let mut rec = Recorder::new(sink, cfg.timing);
    let outcome = dispatch(cfg, &mut rec);
    let flushed = rec.flush();
    outcome?;
    flushed?;
    Ok(RunSummary { records: rec.records })
}

fn dispatch(cfg: &ExperimentConfig, rec: &mut Recorder<'_>) -> Result<(), RunError> {
    let data_seed = cfg.seed;
    let mut root = RngState::new(cfg.seed);
    let mut init_rng = root.fork();
    let mut rng = root.fork();
    match cfg.example {
        Example::Blr => {
            let data = blr_data(cfg, data_seed)?;
            let mut blr = Blr::new(&data)?;
            match cfg.method {
                Method::Hmc => run_hmc(cfg, &blr, &mut rng, rec),
                Method::IsEval => run_is_eval(cfg, &blr, None, &mut rng, rec),
                _ => train(cfg, &mut blr, &mut rng, rec, blr_metrics),
            }
        }
        Example::Vae => {
            let x = image_data(cfg, data_seed)?;
            let mut vae = Vae::new(x, cfg.n_z(), cfg.n_h, &mut init_rng);
            match cfg.method {
                Method::IsEval => run_is_eval(cfg, &vae, None, &mut rng, rec),
                _ => train(cfg, &mut vae, &mut rng, rec, |_, _| {}),
            }
        }
        Example::Dsbn => {
            let x = image_data(cfg, data_seed)?;
            let mut dsbn = Dsbn::new(x, cfg.n_z(), cfg.temperature, &mut init_rng);
            match cfg.method {
                Method::IsEval => {
                    let exact = dsbn_exact(&dsbn)?;
                    run_is_eval(cfg, &dsbn, exact, &mut rng, rec)
                }
                _ => train(cfg, &mut dsbn, &mut rng, rec, |_, _| {}),
            }
        }
    }
}

/// Unreadable files stay I/O failures; malformed contents are usage errors.
fn bad_input(e: Error) -> RunError {
    match e {
        Error::Io(io) => RunError::Io(io),
        other => RunError::Usage(other.to_string()),
    }
}

fn blr_data(cfg: &ExperimentConfig, seed: u64) -> Result<BlrData, RunError> {
    match &cfg.data {
        DataSource::Synthetic => Ok(data::synth_blr_data(cfg.n_data(), cfg.dim, cfg.weight_scale, seed)),
        DataSource::Csv(path) => data::load_blr_csv(path).map_err(bad_input),
    }
}

fn image_data(cfg: &ExperimentConfig, seed: u64) -> Result<Array, RunError> {
    match &cfg.data {
        DataSource::Synthetic => Ok(data::synth_binary_images(cfg.n_data(), cfg.n_x(), seed)),
        DataSource::Csv(path) => data::load_binary_csv(path).map_err(bad_input),
    }
}

fn dsbn_exact(model: &Dsbn) -> Result<Option<f64>> {
    if 2 * model.n_z >= MAX_ENUM_BITS {
        return Ok(None);
    }
    let ll = model.exact_log_likelihood()?;
    Ok(Some(ll.iter().sum::<f64>() / ll.len() as f64))
}

fn blr_metrics(blr: &Blr, rec: &mut MetricRecord) {
    let mean = blr.variational_mean();
    rec.set("accuracy", data::accuracy(&blr.x, &blr.y, &mean));
    for (j, m) in mean.iter().enumerate() {
        rec.set(&format!("q_mean_w{j}"), *m);
    }
}

fn check_finite(value: f64, what: &str, iter: usize) -> Result<(), RunError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(RunError::NonFinite(format!("{what} at iteration {iter}")))
    }
}

struct Step {
    p_cost: Tensor,
    q_cost: Tensor,
    bound: f64,
}

fn objective_step<M: LatentModel>(
    model: &M,
    method: Method,
    tape: &Tape,
    rng: &mut RngState,
    k: usize,
    relaxed: bool,
    baseline: &mut BaselineState,
) -> Result<(Step, super::models::Bound, super::models::Bound)> {
    let (pb, qb) = (model.p_params().bind(tape), model.q_params().bind(tape));
    let reparam = matches!(method, Method::Sgvb | Method::Iwae);
    let latent = model.q_latent(&qb, rng, k, relaxed, reparam)?;
    let observed = model.observed();
    let lj = |o: &Observed| model.log_joint(&pb, o, relaxed);
    let step = match method {
        Method::Sgvb | Method::Reinforce => {
            let obj = variational::elbo(lj, &observed, &latent)?;
            let cost = if method == Method::Sgvb { obj.sgvb()? } else { obj.reinforce(baseline)? };
            let cost = cost.mean_all();
            Step { p_cost: cost.clone(), q_cost: cost, bound: obj.bound()?.value().mean_all() }
        }
        Method::Iwae | Method::Vimco => {
            let obj = variational::iw_objective(lj, &observed, &latent)?;
            let cost = if method == Method::Iwae { obj.sgvb()? } else { obj.vimco()? };
            let cost = cost.mean_all();
            Step { p_cost: cost.clone(), q_cost: cost, bound: obj.bound()?.value().mean_all() }
        }
        Method::Rws => {
            let obj = variational::klpq(lj, &observed, &latent)?;
            let iw = obj.log_weights().logsumexp(&[0], false)?.add_scalar(-(k as f64).ln());
            Step {
                p_cost: iw.mean_all().neg(),
                q_cost: obj.rws()?.mean_all(),
                bound: iw.value().mean_all(),
            }
        }
        Method::Hmc | Method::IsEval => unreachable!("not a training method"),
    };
    Ok((step, pb, qb))
}

fn train<M: LatentModel>(
    cfg: &ExperimentConfig,
    model: &mut M,
    rng: &mut RngState,
    rec: &mut Recorder<'_>,
    extra: impl Fn(&M, &mut MetricRecord),
) -> Result<(), RunError> {
    let adam = Adam::new(cfg.learning_rate);
    let mut baseline = BaselineState::default();
    let relaxed = cfg.example == Example::Dsbn && matches!(cfg.method, Method::Sgvb | Method::Iwae);
    let key = if matches!(cfg.method, Method::Sgvb | Method::Reinforce) { "elbo" } else { "iw_bound" };
    let k = cfg.particles();

    for iter in 0..cfg.iters {
        let tape = Tape::new();
        let (step, pb, qb) = objective_step(model, cfg.method, &tape, rng, k, relaxed, &mut baseline)?;
        check_finite(step.bound, key, iter)?;
        check_finite(step.p_cost.item()?, "cost", iter)?;
        check_finite(step.q_cost.item()?, "cost", iter)?;
        if iter % cfg.report_every == 0 {
            let mut r = MetricRecord::new(iter).with(key, step.bound);
            extra(model, &mut r);
            rec.emit(r)?;
        }
        model.p_params_mut().step(&adam, &pb, &step.p_cost)?;
        model.q_params_mut().step(&adam, &qb, &step.q_cost)?;
    }

    let tape = Tape::new();
    let (step, _, qb) = objective_step(model, cfg.method, &tape, rng, k, relaxed, &mut baseline)?;
    let mut last = MetricRecord::new(cfg.iters).with(key, step.bound);
    extra(model, &mut last);
    let pb = model.p_params().bind(&tape);
    let observed = model.observed();
    let ll = chunked_is(EVAL_PARTICLES, |rng, k| {
        let latent = model.q_latent(&qb, rng, k, false, false)?;
        is_loglikelihood(|o| model.log_joint(&pb, o, false), &observed, &latent)
    }, rng)?;
    last.set("log_likelihood_estimate", ll);
    rec.emit(last)
}

/// Importance-sampling log-likelihood over `k` particles in chunks, averaged
/// over data rows.
fn chunked_is(
    k: usize,
    mut estimate: impl FnMut(&mut RngState, usize) -> Result<Tensor>,
    rng: &mut RngState,
) -> Result<f64> {
    let mut per_chunk: Vec<(Array, usize)> = Vec::new();
    let mut left = k;
    while left > 0 {
        let kc = left.min(IS_CHUNK);
        per_chunk.push((estimate(rng, kc)?.value().clone(), kc));
        left -= kc;
    }
    let rows = per_chunk[0].0.numel();
    let total: f64 = (0..rows)
        .map(|r| {
            let terms: Vec<f64> =
                per_chunk.iter().map(|(e, kc)| e.data()[r] + (*kc as f64).ln()).collect();
            logsumexp(&terms) - (k as f64).ln()
        })
        .sum();
    Ok(total / rows as f64)
}

fn run_is_eval<M: LatentModel>(
    cfg: &ExperimentConfig,
    model: &M,
    exact: Option<f64>,
    rng: &mut RngState,
    rec: &mut Recorder<'_>,
) -> Result<(), RunError> {
    let tape = Tape::new();
    let pb = model.p_params().bind(&tape);
    let observed = model.observed();
    let ll = chunked_is(cfg.particles(), |rng, k| {
        let latent = model.prior_latent(&pb, rng, k)?;
        is_loglikelihood(|o| model.log_joint(&pb, o, false), &observed, &latent)
    }, rng)?;
    let mut r = MetricRecord::new(0).with("log_likelihood_estimate", ll);
    if let Some(e) = exact {
        r.set("exact_log_likelihood", e);
    }
    rec.emit(r)
}

fn run_hmc(cfg: &ExperimentConfig, blr: &Blr, rng: &mut RngState, rec: &mut Recorder<'_>) -> Result<(), RunError> {
    let config = HmcConfig {
        initial_step_size: 0.1,
        n_leapfrogs: cfg.n_leapfrogs,
        adapt_step_size: true,
        target_acceptance: 0.8,
        adapt_mass: true,
        n_chains: cfg.n_chains,
        warmup_iters: cfg.warmup,
        step_size_jitter: 0.5,
    };
    let init: Positions = [("w".to_string(), Array::zeros([cfg.n_chains, blr.dim]))].into();
    let empty = crate::experiments::models::ParamSet::default().bind(&Tape::new());
    let run = hmc_sample(&config, |o| blr.log_joint(&empty, o, false), &blr.observed(), init, cfg.iters, rng)?;

    let d = blr.dim;
    let mut sum = vec![0.0; d];
    let mut accepted = 0usize;
    let mut count = 0usize;
    let summary = |sum: &[f64], accepted: usize, count: usize, iter: usize, step_size: f64| {
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let r = MetricRecord::new(iter)
            .with("acceptance_rate", accepted as f64 / count as f64)
            .with("step_size", step_size)
            .with("accuracy", data::accuracy(&blr.x, &blr.y, &mean));
        (r, mean)
    };
    for (i, (draw, info)) in run.draws.iter().zip(&run.info).enumerate() {
        for (j, v) in draw["w"].data().iter().enumerate() {
            sum[j % d] += v;
        }
        count += cfg.n_chains;
        accepted += info.accepted.iter().filter(|&&a| a).count();
        if i % cfg.report_every == 0 {
            rec.emit(summary(&sum, accepted, count, i, info.step_size).0)?;
        }
    }
    if count > 0 {
        let (mut r, mean) = summary(&sum, accepted, count, cfg.iters, run.state.step_size);
        for (j, m) in mean.iter().enumerate() {
            r.set(&format!("posterior_mean_w{j}"), *m);
        }
        rec.emit(r)?;
    }
    Ok(())
}
