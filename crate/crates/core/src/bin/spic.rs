use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spic_ssdu::data::{build_dataset_with_precision, save_dataset, NoiseSpec, Precision};
use spic_ssdu::harness::{evaluate, prepare_data, run_ablation_with, train_with, ExperimentConfig, MaskConfig};
use spic_ssdu::perturbation::{generate_perturbation_within, recovery_error, verify_no_overlap};
use spic_ssdu::sampling::ssdu_split;
use spic_ssdu::Result;

/// Self-supervised unrolled MRI reconstruction on synthetic multi-coil data.
#[derive(Parser)]
#[command(name = "spic", version)]
struct Cli {
    /// Overrides the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON experiment configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Runs everything on a single thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Floating-point precision of data and network outputs.
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulates phantoms, coil maps and noisy k-space and saves the dataset.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Number of slices (default: n_train + n_test of the config).
        #[arg(long)]
        slices: Option<usize>,
    },
    /// Writes the acquisition mask as 0/1 bitmap text plus a JSON descriptor.
    Mask {
        #[command(flatten)]
        grid: MaskArgs,
        /// Output prefix; prints the bitmap to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also writes the SSDU splits (`<out>.theta<k>.txt`, `<out>.lambda<k>.txt`).
        #[arg(long)]
        splits: bool,
    },
    /// Draws a perturbation and reports its aliasing and recovery verdicts.
    PerturbCheck {
        #[command(flatten)]
        grid: MaskArgs,
        /// CG iterations of the recovery test.
        #[arg(long, default_value_t = 100)]
        iters: usize,
        /// Relative recovery tolerance of the empirical verdict.
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Trains the configured method and writes checkpoint and log.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluates a checkpoint on a saved dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        grid: MaskArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains weighted-l1 and l2 perturbation consistency from one init and compares them.
    AblatePic {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct MaskArgs {
    /// Acceleration (default from the config).
    #[arg(long)]
    acceleration: Option<usize>,
    /// Central fully sampled rows (default from the config).
    #[arg(long)]
    acs: Option<usize>,
}

impl MaskArgs {
    fn resolve(&self, base: &MaskConfig) -> MaskConfig {
        MaskConfig {
            acceleration: self.acceleration.unwrap_or(base.acceleration),
            acs: self.acs.unwrap_or(base.acs),
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(bits) = &cli.precision {
        let p = Precision::from_bits(bits.parse().expect("validated by clap"))?;
        cfg.dataset.precision = p;
        cfg.model.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if cli.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| spic_ssdu::Error::InvalidArgument(e.to_string()))?;
    }
    let cfg = load_config(&cli)?;
    let d = &cfg.dataset;
    match &cli.command {
        Command::Simulate { out, slices } => {
            let n = slices.unwrap_or(d.n_train + d.n_test);
            let noise = NoiseSpec {
                sigma: d.noise_sigma,
                seed: d.seed,
            };
            let ds = build_dataset_with_precision(n, d.rows, d.cols, d.coils, noise, d.seed, d.precision)?;
            save_dataset(&ds, out)?;
            println!("wrote {n} slices of {}x{} with {} coils to {}", d.rows, d.cols, d.coils, out.display());
        }
        Command::Mask { grid, out, splits } => {
            let mask = grid.resolve(&cfg.mask).build(d.rows, d.cols)?;
            let descriptor = serde_json::to_string_pretty(&mask.descriptor())?;
            match out {
                None => print!("{}", mask.to_bitmap_text()),
                Some(prefix) => {
                    let with = |suffix: &str| PathBuf::from(format!("{}{suffix}", prefix.display()));
                    std::fs::write(with(".txt"), mask.to_bitmap_text())?;
                    std::fs::write(with(".json"), descriptor)?;
                    if *splits {
                        let split = ssdu_split(&mask, cfg.loss.rho, cfg.loss.k, cfg.seed)?;
                        for (k, pair) in split.pairs.iter().enumerate() {
                            std::fs::write(with(&format!(".theta{k}.txt")), pair.theta.to_bitmap_text())?;
                            std::fs::write(with(&format!(".lambda{k}.txt")), pair.lambda.to_bitmap_text())?;
                        }
                    }
                    println!("wrote {}", with(".txt").display());
                }
            }
        }
        Command::PerturbCheck { grid, iters, tol } => {
            let m = grid.resolve(&cfg.mask);
            let ds = build_dataset_with_precision(1, d.rows, d.cols, d.coils, NoiseSpec::noiseless(), d.seed, d.precision)?;
            let coils = &ds.slices[0].coils;
            let mask = m.build(d.rows, d.cols)?;
            let p = generate_perturbation_within(
                coils.support(),
                m.acceleration,
                cfg.loss.perturbation_features,
                cfg.loss.perturbation_amplitude,
                cfg.seed,
            )?;
            let geometric = verify_no_overlap(&p, m.acceleration, d.rows);
            let residual = recovery_error(&p.p, coils, &mask, *iters)?;
            println!("support rows: {:?}", p.support_rows);
            println!(
                "geometric: {}{}",
                if geometric.disjoint { "alias-free" } else { "aliased" },
                if geometric.approximate { " (approximate shifts)" } else { "" }
            );
            println!("empirical: {}", if residual < *tol { "recoverable" } else { "not recoverable" });
            println!("recovery residual: {residual:.3e} after {iters} CG iterations");
        }
        Command::Train { out } => {
            let data = prepare_data(&cfg)?;
            let dir = out.clone().unwrap_or_else(|| cfg.output.dir.clone());
            let t = train_with(&cfg, &data, &dir)?;
            println!("final loss {:.6e}", t.losses.last().copied().unwrap_or(f64::NAN));
            for (step, psnr) in &t.validation {
                println!("validation step {step}: {psnr:.3} dB");
            }
            println!("checkpoint {}", t.checkpoint.display());
            println!("log {}", t.log.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            grid,
            out,
        } => {
            let max_images = if cfg.output.images { cfg.output.max_images } else { 0 };
            let r = evaluate(checkpoint, dataset, &grid.resolve(&cfg.mask), out, max_images)?;
            println!(
                "PSNR {:.3} ± {:.3} dB, SSIM {:.4} ± {:.4} over {} slices",
                r.psnr_mean,
                r.psnr_std,
                r.ssim_mean,
                r.ssim_std,
                r.per_slice.len()
            );
            println!("metrics {}", out.join("metrics.csv").display());
        }
        Command::AblatePic { out } => {
            let data = prepare_data(&cfg)?;
            let dir = out.clone().unwrap_or_else(|| cfg.output.dir.clone());
            let r = run_ablation_with(&cfg, &data, &dir)?;
            print!("{}", std::fs::read_to_string(&r.comparison_csv)?);
            println!("report {}", r.comparison_csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
