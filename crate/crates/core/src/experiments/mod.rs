//! Runnable examples: Bayesian logistic regression, a toy VAE and a
//! two-layer sigmoid belief net, each trainable with the estimators in
//! [`crate::variational`] or sampled with [`crate::monte_carlo`].

pub mod data;
mod metrics;
pub mod models;
mod runner;

use std::fmt;
use std::io::Write;
use std::path::PathBuf;

pub use metrics::{format_float, write_metrics, MetricRecord};
pub use runner::{run_experiment, RunSummary};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Example {
    Blr,
    Vae,
    Dsbn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sgvb,
    Reinforce,
    Iwae,
    Vimco,
    Rws,
    Hmc,
    IsEval,
}

impl fmt::Display for Example {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Example::Blr => "blr",
            Example::Vae => "vae",
            Example::Dsbn => "dsbn",
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Sgvb => "sgvb",
            Method::Reinforce => "reinforce",
            Method::Iwae => "iwae",
            Method::Vimco => "vimco",
            Method::Rws => "rws",
            Method::Hmc => "hmc",
            Method::IsEval => "is-eval",
        })
    }
}

impl Method {
    fn is_multi_sample(self) -> bool {
        matches!(self, Method::Iwae | Method::Vimco | Method::Rws)
    }

    fn default_particles(self) -> usize {
        match self {
            Method::Sgvb | Method::Reinforce | Method::Hmc => 1,
            Method::Iwae | Method::Vimco | Method::Rws => 10,
            Method::IsEval => 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    Csv(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub example: Example,
    pub method: Method,
    pub iters: usize,
    pub learning_rate: f64,
    /// Per-method default when absent.
    pub n_particles: Option<usize>,
    pub n_chains: usize,
    pub warmup: usize,
    pub n_leapfrogs: usize,
    pub seed: u64,
    pub data: DataSource,
    pub n_data: Option<usize>,
    pub dim: usize,
    pub weight_scale: f64,
    pub n_z: Option<usize>,
    pub n_x: Option<usize>,
    pub n_h: usize,
    pub temperature: f64,
    pub report_every: usize,
    /// Adds `wall_ms` to every record; output is then no longer reproducible.
    pub timing: bool,
}

impl ExperimentConfig {
    pub fn new(example: Example, method: Method) -> Self {
        Self {
            example,
            method,
            iters: 1000,
            learning_rate: 0.01,
            n_particles: None,
            n_chains: 4,
            warmup: 500,
            n_leapfrogs: 10,
            seed: 0,
            data: DataSource::Synthetic,
            n_data: None,
            dim: 2,
            weight_scale: 4.0,
            n_z: None,
            n_x: None,
            n_h: 64,
            temperature: 0.5,
            report_every: 50,
            timing: false,
        }
    }

    pub fn particles(&self) -> usize {
        self.n_particles.unwrap_or_else(|| self.method.default_particles())
    }

    pub fn n_data(&self) -> usize {
        self.n_data.unwrap_or(match self.example {
            Example::Blr => 500,
            Example::Vae => 200,
            Example::Dsbn => 100,
        })
    }

    pub fn n_z(&self) -> usize {
        self.n_z.unwrap_or(match self.example {
            Example::Dsbn => 4,
            _ => 8,
        })
    }

    pub fn n_x(&self) -> usize {
        self.n_x.unwrap_or(match self.example {
            Example::Dsbn => 16,
            _ => 64,
        })
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let usage = |m: String| Err(RunError::Usage(m));
        if self.method == Method::Hmc && self.example != Example::Blr {
            return usage(format!("method hmc is only available for blr, not {}", self.example));
        }
        if self.method.is_multi_sample() && self.particles() < 2 {
            return usage(format!("method {} needs --particles >= 2", self.method));
        }
        if self.particles() == 0 || self.n_chains == 0 || self.n_leapfrogs == 0 {
            return usage("particle, chain and leapfrog counts must be positive".into());
        }
        if self.method != Method::IsEval && self.iters == 0 {
            return usage("--iters must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return usage("--lr must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return usage("--temperature must be positive".into());
        }
        if self.report_every == 0 {
            return usage("--report-every must be positive".into());
        }
        if self.n_data() == 0 || self.dim == 0 || self.n_z() == 0 || self.n_x() == 0 || self.n_h == 0 {
            return usage("example sizes must be positive".into());
        }
        Ok(())
    }
}

/// Failure of a run, mapped onto process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Usage(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Model(Error),
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(io) => RunError::Io(io),
            Error::Update(name) => RunError::NonFinite(format!("gradient of `{name}`")),
            other => RunError::Model(other),
        }
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) => 2,
            RunError::NonFinite(_) => 3,
            RunError::Io(_) => 4,
            RunError::Model(_) => 1,
        }
    }
}

/// Writes records to a sink, stamping wall time when asked.
pub(crate) struct Recorder<'a> {
    sink: &'a mut dyn Write,
    start: Option<std::time::Instant>,
    pub(crate) records: Vec<MetricRecord>,
}

impl<'a> Recorder<'a> {
    pub(crate) fn new(sink: &'a mut dyn Write, timing: bool) -> Self {
        Self { sink, start: timing.then(std::time::Instant::now), records: Vec::new() }
    }

    pub(crate) fn emit(&mut self, mut record: MetricRecord) -> Result<(), RunError> {
        if let Some(t) = self.start {
            record.wall_ms = Some(t.elapsed().as_millis() as u64);
        }
        write_metrics(&mut self.sink, &record)?;
        self.records.push(record);
        Ok(())
    }

    pub(crate) fn flush(&mut self) -> Result<(), RunError> {
        self.sink.flush()?;
        Ok(())
    }
}
