//! Command-line interface: toy training, sampling, evaluation, accounting
//! reports, gradient checks, spectrum analysis and dataset dumps.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use ditsr::arch::{count_params, estimate_flops, preset, Denoiser, DenoiserConfig, PRESET_NAMES};
use ditsr::data::{synth_dataset, write_pfm, ToyDatasetSpec};
use ditsr::diffusion::{sample, ShiftSchedule};
use ditsr::eval::{baseline_psnr, convergence_steps, evaluate_psnr, spectrum_trajectory};
use ditsr::train::{config_hash, train, TrainOpts};
use ditsr::{Error, Result};

#[derive(Parser)]
#[command(name = "ditsr", about = "Residual-shifting diffusion transformer for super-resolution, at toy scale")]
struct Cli {
    /// Base seed for all randomness.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON file with a full DenoiserConfig; overrides --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, manifests and dumps.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct SchedArgs {
    #[arg(long, default_value_t = 15)]
    steps: usize,
    #[arg(long, default_value_t = 0.04)]
    eta1: f64,
    #[arg(long = "eta-t", default_value_t = 0.999)]
    eta_t: f64,
    #[arg(long, default_value_t = 2.0)]
    kappa: f64,
}

impl SchedArgs {
    fn build(&self) -> Result<ShiftSchedule> {
        ShiftSchedule::build(self.steps, self.eta1, self.eta_t, self.kappa)
    }
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long = "hr-size", default_value_t = 64)]
    hr_size: usize,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long = "blur-sigma", default_value_t = 1.2)]
    blur_sigma: f64,
    #[arg(long = "noise-sigma", default_value_t = 0.03)]
    noise_sigma: f64,
}

impl DataArgs {
    fn spec(&self, seed: u64) -> ToyDatasetSpec {
        ToyDatasetSpec {
            n_samples: self.samples,
            hr_size: self.hr_size,
            scale: self.scale,
            blur_sigma: self.blur_sigma,
            noise_sigma: self.noise_sigma,
            seed,
            channels: 3,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a denoiser on a synthetic dataset and write a checkpoint.
    Train {
        #[arg(long, default_value = "toy")]
        preset: String,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sched: SchedArgs,
    },
    /// Run the reverse chain on one input and write the prediction.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "toy")]
        preset: String,
        /// PFM image to super-resolve; a synthetic one is used if omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Write per-step predicted x0 images and a JSON index here.
        #[arg(long = "dump-trajectory")]
        dump_trajectory: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        stochastic: bool,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sched: SchedArgs,
    },
    /// PSNR of a checkpoint on held-out synthetic pairs, vs the bicubic baseline.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "toy")]
        preset: String,
        #[arg(long, default_value_t = false)]
        stochastic: bool,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sched: SchedArgs,
    },
    /// Per-stage parameter and FLOPs breakdown as CSV.
    Report {
        #[arg(long, default_value = "ours_adafm")]
        preset: String,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
    /// Finite-difference verification of block and full-network gradients.
    Gradcheck {
        #[arg(long, default_value = "micro")]
        preset: String,
    },
    /// Spectrum trajectory of the reverse chain, as CSV plus convergence steps.
    Spectrum {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "toy")]
        preset: String,
        #[arg(long, default_value_t = 8)]
        bins: usize,
        #[arg(long, default_value_t = false)]
        stochastic: bool,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sched: SchedArgs,
    },
    /// Dump a synthetic dataset as PFM pairs.
    Synth {
        #[command(flatten)]
        data: DataArgs,
    },
}

fn resolve_config(config_file: &Option<PathBuf>, preset_name: &str) -> Result<DenoiserConfig> {
    match config_file {
        Some(path) => {
            let cfg: DenoiserConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            cfg.validate()?;
            Ok(cfg)
        }
        None => preset(preset_name).map_err(|e| {
            Error::Config(format!("{e}; known presets: {}", PRESET_NAMES.join(", ")))
        }),
    }
}

fn load_model(config: &DenoiserConfig, checkpoint: &Path, seed: u64) -> Result<Denoiser> {
    let model = Denoiser::build(config, seed)?;
    ditsr::checkpoint::load_into(checkpoint, &model.named_params())?;
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out)?;
    match &cli.cmd {
        Cmd::Train { preset, iters, lr, data, sched } => {
            let config = resolve_config(&cli.config, preset)?;
            let sched = sched.build()?;
            let dataset = synth_dataset(&data.spec(cli.seed))?;
            let model = Denoiser::build(&config, cli.seed)?;
            let opts = TrainOpts { iters: *iters, lr: *lr, seed: cli.seed };
            let manifest = train(&model, &dataset, &sched, &opts)?;
            let ckpt = cli.out.join("model.ckpt");
            ditsr::checkpoint::save(&ckpt, &model.named_params())?;
            std::fs::write(
                cli.out.join("manifest.json"),
                serde_json::to_string_pretty(&manifest)?,
            )?;
            let last = manifest.loss_curve.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {iters} iters in {:.1}s, final loss {last:.6}, checkpoint {}",
                manifest.wall_time_s,
                ckpt.display()
            );
        }
        Cmd::Sample { checkpoint, preset, input, dump_trajectory, stochastic, data, sched } => {
            let config = resolve_config(&cli.config, preset)?;
            let sched = sched.build()?;
            let model = load_model(&config, checkpoint, cli.seed)?;
            let y0 = match input {
                Some(path) => ditsr::data::read_pfm(path)?,
                None => {
                    let spec = ToyDatasetSpec { n_samples: 1, ..data.spec(cli.seed) };
                    synth_dataset(&spec)?.remove(0).1
                }
            };
            let keep = dump_trajectory.is_some();
            let out = sample(&model, &y0, &sched, cli.seed, *stochastic, keep)?;
            let pred_path = cli.out.join("x0_hat.pfm");
            write_pfm(&pred_path, &out.x0_hat)?;
            if let Some(dir) = dump_trajectory {
                std::fs::create_dir_all(dir)?;
                let mut index = Vec::new();
                for (step, eta, x0_pred) in &out.trajectory {
                    let name = format!("step_{step:03}.pfm");
                    write_pfm(&dir.join(&name), x0_pred)?;
                    index.push(serde_json::json!({ "step": step, "eta": eta, "file": name }));
                }
                std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
            }
            println!("wrote {}", pred_path.display());
        }
        Cmd::Eval { checkpoint, preset, stochastic, data, sched } => {
            let config = resolve_config(&cli.config, preset)?;
            let sched = sched.build()?;
            let model = load_model(&config, checkpoint, cli.seed)?;
            // offset the dataset seed so evaluation pairs are held out from
            // any training run that used the same base seed
            let dataset = synth_dataset(&data.spec(cli.seed.wrapping_add(0x5EED)))?;
            let (scores, mean) = evaluate_psnr(&model, &dataset, &sched, cli.seed, *stochastic)?;
            let baseline = baseline_psnr(&dataset);
            for (i, s) in scores.iter().enumerate() {
                println!("sample {i}: {s:.3} dB");
            }
            println!("mean: {mean:.3} dB (bicubic baseline {baseline:.3} dB)");
        }
        Cmd::Report { preset: name, resolution } => {
            let config = resolve_config(&cli.config, name)?;
            let (total_params, preports) = count_params(&config)?;
            let (total_flops, freports) = estimate_flops(&config, *resolution)?;
            println!("stage,resolution,params,flops,share");
            for (p, f) in preports.iter().zip(&freports) {
                println!(
                    "{},{},{},{:.4e},{:.6}",
                    p.stage, f.resolution, p.params, f.flops, f.share
                );
            }
            println!("# total_params={total_params} total_flops={total_flops:.4e} config_hash={}", config_hash(&config));
        }
        Cmd::Gradcheck { preset: name } => {
            let reports = if name == "micro" {
                ditsr::gradcheck::run_suite()?
            } else {
                let config = resolve_config(&cli.config, name)?;
                let res = config.resolution_multiple();
                ditsr::gradcheck::check_denoiser(&config, 1e-4, 2, res)?
            };
            for r in &reports {
                println!(
                    "{}: rel_err {:.3e} {}",
                    r.name,
                    r.rel_err,
                    if r.pass { "ok" } else { "FAIL" }
                );
            }
            if let Some(bad) = reports.iter().find(|r| !r.pass) {
                return Err(Error::Check(format!(
                    "gradient check failed for {}: rel err {:.3e}",
                    bad.name, bad.rel_err
                )));
            }
            println!("all gradient checks passed");
        }
        Cmd::Spectrum { checkpoint, preset, bins, stochastic, data, sched } => {
            let config = resolve_config(&cli.config, preset)?;
            let sched = sched.build()?;
            let model = load_model(&config, checkpoint, cli.seed)?;
            let spec = ToyDatasetSpec { n_samples: 1, ..data.spec(cli.seed.wrapping_add(0x5EED)) };
            let y0 = synth_dataset(&spec)?.remove(0).1;
            let traj = spectrum_trajectory(&model, &y0, &sched, cli.seed, *stochastic, *bins)?;
            let csv = cli.out.join("spectrum.csv");
            let mut body = String::from("t");
            for b in 0..*bins {
                body.push_str(&format!(",band{b}"));
            }
            body.push('\n');
            for (i, row) in traj.iter().enumerate() {
                body.push_str(&format!("{}", sched.steps - i));
                for v in row {
                    body.push_str(&format!(",{v:.6e}"));
                }
                body.push('\n');
            }
            std::fs::write(&csv, body)?;
            let steps = convergence_steps(&traj);
            println!("wrote {}", csv.display());
            println!(
                "90% convergence step per band: {}",
                steps.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
            );
        }
        Cmd::Synth { data } => {
            let dataset = synth_dataset(&data.spec(cli.seed))?;
            for (i, (x0, y0)) in dataset.iter().enumerate() {
                write_pfm(&cli.out.join(format!("sample_{i:03}_x0.pfm")), x0)?;
                write_pfm(&cli.out.join(format!("sample_{i:03}_y0.pfm")), y0)?;
            }
            println!("wrote {} pairs to {}", dataset.len(), cli.out.display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
