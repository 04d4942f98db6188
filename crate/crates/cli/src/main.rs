use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedcpf::config::{ExperimentConfig, Method};
use fedcpf::harness::{self, SweepParam, GRADCHECK_TOLERANCE};
use fedcpf::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fedcpf",
    version,
    about = "FedCPF personalized federated learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Defaults to the config's `output_dir`, then `$FEDCPF_OUT/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its history, summary and resolved config.
    Run(Common),
    /// Run several methods over several seeds on identical data and tabulate.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "fedcpf,fedavg")]
        methods: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
    },
    /// One run per value of `rho` or `acc`.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Finite-difference check of the model's analytic gradients.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

fn load(common: &Common, required: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None if required => {
            return Err(Error::Config {
                field: "--config".into(),
                reason: "a config file is required".into(),
            })
        }
        None => ExperimentConfig::new(Method::Fedcpf),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig, name: &str) -> PathBuf {
    harness::resolve_output_dir(common.out.as_deref(), cfg.output_dir.as_deref(), name)
}

fn write(dir: &Path, file: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(file), text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let cfg = load(&common, true)?;
            let dir = out_dir(&common, &cfg, &format!("{}-seed{}", cfg.method, cfg.seed));
            let result = harness::with_workers(common.workers, || harness::execute(&cfg))??;
            harness::write_run(&result, &dir)?;
            let m = &result.final_metrics;
            println!(
                "{} seed {}: {} rounds, final accuracy {:.4}, macro F1 {:.4}",
                cfg.method,
                cfg.seed,
                result.records.len(),
                m.accuracy,
                m.macro_f1
            );
            println!("wrote {}", dir.display());
        }
        Command::Compare { common, methods, seeds } => {
            let cfg = load(&common, false)?;
            let methods: Vec<Method> = methods.iter().map(|m| m.parse()).collect::<Result<_>>()?;
            let report = harness::with_workers(common.workers, || harness::compare(&cfg, &methods, &seeds))??;
            let csv = report.to_csv();
            print!("{csv}");
            for (seed, digest) in report.seeds.iter().zip(&report.digests) {
                println!("partition seed {seed}: {digest}");
            }
            let dir = out_dir(&common, &cfg, "compare");
            write(&dir, "compare.csv", &csv)?;
            write(&dir, "compare_runs.csv", &report.runs_csv())?;
            println!("wrote {}", dir.display());
        }
        Command::Sweep { common, param, values } => {
            let cfg = load(&common, false)?;
            let param: SweepParam = param.parse()?;
            let rows = harness::with_workers(common.workers, || harness::sweep(&cfg, param, &values))??;
            let csv = harness::sweep_csv(param, &rows);
            print!("{csv}");
            let dir = out_dir(&common, &cfg, "sweep");
            write(&dir, "sweep.csv", &csv)?;
            println!("wrote {}", dir.display());
        }
        Command::Gradcheck { seed, corrupt_gradient } => {
            let suite = harness::gradcheck_suite(seed, corrupt_gradient)?;
            for (i, r) in suite.reports.iter().enumerate() {
                println!(
                    "config {i}: max relative error {:e} ({})",
                    r.max_rel_error, r.worst_segment
                );
            }
            let worst = suite.worst();
            println!("max relative error {:e}", worst.max_rel_error);
            if !suite.passed() {
                return Err(Error::Numeric(format!(
                    "gradient check failed: {:e} > {:e} in segment `{}` (index {})",
                    worst.max_rel_error, GRADCHECK_TOLERANCE, worst.worst_segment, worst.worst_index
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
