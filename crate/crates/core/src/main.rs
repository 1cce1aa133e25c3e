use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use abacus::experiments::{run_experiment, DataSource, Example, ExperimentConfig, Method, RunError};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExampleArg {
    Blr,
    Vae,
    Dsbn,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Sgvb,
    Reinforce,
    Iwae,
    Vimco,
    Rws,
    Hmc,
    IsEval,
}

/// Train or sample the bundled probabilistic models and stream metrics as JSON lines.
#[derive(Debug, Parser)]
#[command(name = "abacus", version)]
struct Cli {
    /// Which model to run.
    #[arg(value_enum)]
    example: ExampleArg,

    #[arg(long, value_enum, default_value = "sgvb")]
    method: MethodArg,

    /// Optimization steps, or post-warm-up draws for hmc.
    #[arg(long, default_value_t = 1000)]
    iters: usize,

    #[arg(long, default_value_t = 0.01)]
    lr: f64,

    /// Samples per step (K); defaults to 1, 10 for multi-sample methods, 1000 for is-eval.
    #[arg(long)]
    particles: Option<usize>,

    #[arg(long, default_value_t = 4)]
    chains: usize,

    #[arg(long, default_value_t = 500)]
    warmup: usize,

    #[arg(long, default_value_t = 10)]
    leapfrogs: usize,

    #[arg(long, env = "ABACUS_SEED", default_value_t = 0)]
    seed: u64,

    /// `synthetic` or a header-free CSV file.
    #[arg(long, default_value = "synthetic")]
    data: String,

    /// Rows of synthetic data.
    #[arg(long)]
    n_data: Option<usize>,

    /// Metric file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,

    /// BLR feature dimension.
    #[arg(long, default_value_t = 2)]
    dim: usize,

    /// Scale of the synthetic BLR weights.
    #[arg(long, default_value_t = 4.0)]
    weight_scale: f64,

    #[arg(long)]
    nz: Option<usize>,

    #[arg(long)]
    nx: Option<usize>,

    #[arg(long, default_value_t = 64)]
    nh: usize,

    /// Concrete relaxation temperature for dsbn.
    #[arg(long, default_value_t = 0.5)]
    temperature: f64,

    #[arg(long, default_value_t = 50)]
    report_every: usize,

    /// Add wall-clock milliseconds to each record.
    #[arg(long)]
    timing: bool,
}

impl Cli {
    fn config(&self) -> ExperimentConfig {
        let example = match self.example {
            ExampleArg::Blr => Example::Blr,
            ExampleArg::Vae => Example::Vae,
            ExampleArg::Dsbn => Example::Dsbn,
        };
        let method = match self.method {
            MethodArg::Sgvb => Method::Sgvb,
            MethodArg::Reinforce => Method::Reinforce,
            MethodArg::Iwae => Method::Iwae,
            MethodArg::Vimco => Method::Vimco,
            MethodArg::Rws => Method::Rws,
            MethodArg::Hmc => Method::Hmc,
            MethodArg::IsEval => Method::IsEval,
        };
        ExperimentConfig {
            iters: self.iters,
            learning_rate: self.lr,
            n_particles: self.particles,
            n_chains: self.chains,
            warmup: self.warmup,
            n_leapfrogs: self.leapfrogs,
            seed: self.seed,
            data: match self.data.as_str() {
                "synthetic" => DataSource::Synthetic,
                path => DataSource::Csv(PathBuf::from(path)),
            },
            n_data: self.n_data,
            dim: self.dim,
            weight_scale: self.weight_scale,
            n_z: self.nz,
            n_x: self.nx,
            n_h: self.nh,
            temperature: self.temperature,
            report_every: self.report_every,
            timing: self.timing,
            ..ExperimentConfig::new(example, method)
        }
    }
}

fn run(cli: &Cli) -> Result<(), RunError> {
    let cfg = cli.config();
    cfg.validate()?;
    let mut sink: Box<dyn Write> = match &cli.out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let summary = run_experiment(&cfg, sink.as_mut())?;
    log::info!("{} records written", summary.records.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("abacus: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
