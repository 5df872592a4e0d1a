//! Command-line front end: run experiments, paired ablations, the oracle and
//! gradient verification suites, and mixture-prior fitting.

use clap::{Args, Parser, Subcommand};
use maskdiff::check::{all_passed, render_csv, run_gradient_checks, run_oracle_checks, CheckResult};
use maskdiff::config::{ExperimentConfig, PriorSection};
use maskdiff::harness::{ablate, run_experiment};
use maskdiff::world::fit_prior;
use maskdiff::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "maskdiff",
    about = "Masked discrete diffusion with measurement-guided sampling on a quantized latent grid"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: Option<String>,
    /// Named preset: toy-inpaint, paper-defaults.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory override.
    #[arg(long)]
    out: Option<String>,
    /// Seed count override.
    #[arg(long)]
    seeds: Option<usize>,
    /// Worker thread override.
    #[arg(long)]
    parallel: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(_), Some(_)) => {
                return Err(maskdiff::Error::invalid(
                    "pass --config or --preset, not both",
                ))
            }
            (Some(path), None) => ExperimentConfig::from_file(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => ExperimentConfig::toy_inpaint(),
        };
        if let Some(out) = &self.out {
            cfg.run.out_dir = out.clone();
        }
        if let Some(seeds) = self.seeds {
            cfg.run.seeds = seeds;
        }
        if let Some(parallel) = self.parallel {
            cfg.run.parallel = parallel;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment; writes runs.csv, summary.csv,
    /// timings.csv, and graymap images.
    Run(ConfigArgs),
    /// Paired comparison across the configured sampler kinds on identical
    /// (ground truth, observation, seed) triples.
    Ablate(ConfigArgs),
    /// Verify closed-form losses, bound identities, and the exact reverse
    /// chain; exit code 0 iff every check passes.
    OracleCheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Also write the results as CSV to this path.
        #[arg(long)]
        out: Option<String>,
    },
    /// Verify straight-through gradients, operator adjoints, and the decoder
    /// pullback against finite differences; exit code 0 iff every check
    /// passes.
    GradCheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<String>,
    },
    /// Draw samples from the configured prior, refit a mixture by EM, and
    /// print the fitted section in config syntax.
    FitPrior {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_checks(results: &[CheckResult]) {
    for r in results {
        let mark = if r.passed { "pass" } else { "FAIL" };
        println!(
            "{mark}  {:<34} metric {:>10.3e}  tolerance {:>9.3e}  {}",
            r.name, r.metric, r.tolerance, r.detail
        );
    }
}

fn finish_checks(results: Vec<CheckResult>, out: Option<String>) -> Result<i32> {
    print_checks(&results);
    if let Some(path) = out {
        std::fs::write(&path, render_csv(&results))
            .map_err(|e| maskdiff::Error::invalid(format!("writing {path}: {e}")))?;
        println!("wrote {path}");
    }
    let ok = all_passed(&results);
    println!(
        "{}: {}/{} checks passed",
        if ok { "ok" } else { "FAILED" },
        results.iter().filter(|r| r.passed).count(),
        results.len()
    );
    Ok(if ok { 0 } else { 1 })
}

#[derive(Serialize)]
struct FittedPrior {
    prior: PriorSection,
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Run(args) => {
            let cfg = args.load()?;
            let out = run_experiment(&cfg)?;
            println!("config {}  ->  {}", cfg.hash()?, cfg.run.out_dir);
            println!(
                "{:<10} {:>5} {:>5} {:>16} {:>12} {:>10}",
                "kind", "runs", "fail", "median residual", "median psnr", "accuracy"
            );
            for s in &out.summary {
                println!(
                    "{:<10} {:>5} {:>5} {:>16} {:>12} {:>10}",
                    s.kind,
                    s.runs,
                    s.failures,
                    s.median_residual.map_or("-".into(), |v| format!("{v:.6}")),
                    s.median_psnr.map_or("-".into(), |v| format!("{v:.2}")),
                    s.mean_token_accuracy.map_or("-".into(), |v| format!("{v:.3}")),
                );
            }
            Ok(0)
        }
        Command::Ablate(args) => {
            let cfg = args.load()?;
            let out = ablate(&cfg)?;
            println!("config {}  ->  {}", cfg.hash()?, cfg.run.out_dir);
            println!("win rate of row over column (ties count half):");
            for w in &out.wins {
                println!(
                    "{:<10} vs {:<10} {:>6.3}  ({} paired seeds)",
                    w.kind_a, w.kind_b, w.rate, w.pairs
                );
            }
            Ok(0)
        }
        Command::OracleCheck { seed, out } => finish_checks(run_oracle_checks(seed)?, out),
        Command::GradCheck { seed, out } => finish_checks(run_gradient_checks(seed)?, out),
        Command::FitPrior { cfg, samples, iters, seed } => {
            let cfg = cfg.load()?;
            let truth = cfg.build_prior()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<Vec<usize>> =
                (0..samples.max(1)).map(|_| truth.sample(&mut rng)).collect();
            let (fitted, report) =
                fit_prior(&data, truth.vocab(), truth.components(), iters, seed)?;
            let section = FittedPrior {
                prior: PriorSection {
                    templates: Some(fitted.templates().to_vec()),
                    weights: Some(fitted.weights().to_vec()),
                    rho: fitted.rho(),
                    components: fitted.components(),
                    seed,
                },
            };
            let rendered = toml::to_string_pretty(&section)
                .map_err(|e| maskdiff::Error::Parse(e.to_string()))?;
            println!("# fitted from {} samples, {} EM iterations", data.len(), iters);
            println!(
                "# train NLL {:.6} -> {:.6}",
                report.train_nll.first().copied().unwrap_or(f64::NAN),
                report.train_nll.last().copied().unwrap_or(f64::NAN)
            );
            print!("{rendered}");
            Ok(0)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
