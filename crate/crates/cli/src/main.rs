use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use psnet::data::{load_manifest, synth_generate, SynthConfig};
use psnet::density::{sum_pool_downsample, write_dmap, write_pgm, KernelMode, DEFAULT_FIXED_SIGMA};
use psnet::eval::{evaluate, predict, scale_group_report};
use psnet::losses::DEFAULT_EPSILON;
use psnet::model::{load_checkpoint, OUTPUT_STRIDE};
use psnet::train::{train, RunConfig};

#[derive(Parser)]
#[command(name = "psnet", version, about = "Crowd density estimation with a pyramid scale network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fixed,
    Adaptive,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic crowd dataset with a manifest
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        count_min: usize,
        #[arg(long, default_value_t = 30)]
        count_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write ground-truth density maps for every manifest entry
    Gt {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Fixed)]
        mode: Mode,
        #[arg(long, default_value_t = DEFAULT_FIXED_SIGMA)]
        sigma: f64,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0.3)]
        beta: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write maps sum-pooled to the network's output resolution
        #[arg(long)]
        downsample: bool,
    },
    /// Train from scratch with a JSON run configuration
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report MAE, RMSE and branch similarity on a manifest
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write the density map of one image and print its count
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print branch similarity matrices and per-count-group means
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 10)]
        groups: usize,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            n,
            size,
            count_min,
            count_max,
            seed,
        } => {
            let config = SynthConfig {
                n_images: n,
                image_size: size,
                count_min,
                count_max,
                seed,
            };
            let manifest = synth_generate(&out, &config).context("generating synthetic data")?;
            println!("wrote {} images to {}", manifest.len(), out.display());
        }
        Command::Gt {
            manifest,
            mode,
            sigma,
            k,
            beta,
            out,
            downsample,
        } => {
            let kernel = match mode {
                Mode::Fixed => KernelMode::Fixed { sigma },
                Mode::Adaptive => KernelMode::Adaptive {
                    k,
                    beta,
                    fallback_sigma: sigma,
                },
            };
            ground_truth(&manifest, kernel, &out, downsample)?;
        }
        Command::Train { manifest, config, out } => {
            let run = RunConfig::load(&config).context("loading run configuration")?;
            let data = load_manifest(&manifest)?;
            let outcome = train(&run, &data, &out)?;
            let last = outcome.history.last().expect("at least one step");
            println!(
                "{} steps, final l_e {:.4} l_m {:.4}; checkpoint {}",
                outcome.history.len(),
                last.l_e,
                last.l_m,
                outcome.checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            manifest,
            report,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let data = load_manifest(&manifest)?;
            let r = evaluate(&model, &data, DEFAULT_EPSILON)?;
            println!("images {}", r.per_image.len());
            println!("mae {:.4}", r.mae);
            println!("rmse {:.4}", r.rmse);
            println!("variance_loss {:.4}", r.mean_variance_loss);
            if let Some(path) = report {
                fs::write(&path, serde_json::to_string_pretty(&r)? + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Predict { checkpoint, image, out } => {
            let model = load_checkpoint(&checkpoint)?;
            let map = predict(&model, &image, &out)?;
            println!("{:.2}", map.count());
        }
        Command::Diagnose {
            checkpoint,
            manifest,
            groups,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let data = load_manifest(&manifest)?;
            let r = evaluate(&model, &data, DEFAULT_EPSILON)?;
            for (k, matrix) in r.pairwise_similarity.iter().enumerate() {
                println!("psm {k} branch similarity");
                for row in matrix {
                    let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
                    println!("  {}", cells.join(" "));
                }
            }
            let groups = groups.min(r.per_image.len());
            println!("group images mean_predicted mean_ground_truth");
            for (g, s) in scale_group_report(&r, groups)?.iter().enumerate() {
                println!("{g} {} {:.2} {:.2}", s.images, s.mean_predicted, s.mean_ground_truth);
            }
        }
    }
    Ok(())
}

fn ground_truth(manifest: &Path, kernel: KernelMode, out: &Path, downsample: bool) -> Result<()> {
    let data = load_manifest(manifest)?;
    if data.is_empty() {
        bail!("{} has no entries", manifest.display());
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for i in 0..data.len() {
        let sample = data.load_sample(i)?;
        let map = kernel.density(&sample.annotations)?;
        let stem = data
            .image_path(i)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{i:05}"));
        write_dmap(&map, &out.join(format!("{stem}.dmap")))?;
        write_pgm(&map, &out.join(format!("{stem}.pgm")))?;
        if downsample {
            let small = sum_pool_downsample(&map, OUTPUT_STRIDE)?;
            write_dmap(&small, &out.join(format!("{stem}.small.dmap")))?;
        }
        println!("{stem} {} {:.4}", sample.annotations.len(), map.count());
    }
    Ok(())
}
