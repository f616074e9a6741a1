//! Command-line surface for the full lifecycle: train, enroll, verify,
//! eval-pairs, bench, synth-data.

use clap::{Parser, Subcommand};
use hnfv::config::RunConfig;
use hnfv::data;
use hnfv::error::{Error, Result};
use hnfv::eval::{evaluate_pairs, PairList};
use hnfv::modelio;
use hnfv::pipeline::{self, load_system};
use hnfv::tensor::Tensor;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "hnfv", version, about = "Per-user face verifiers generated by a hypernetwork")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full system and write its artifacts to a directory.
    Train {
        /// JSON run configuration; missing keys fall back to defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a personal verifier model from enrollment images.
    Enroll {
        /// Directory written by `train` (backbone + hypernet).
        #[arg(long)]
        system: PathBuf,
        /// Single enrollment image.
        #[arg(long, conflicts_with = "images")]
        image: Option<PathBuf>,
        /// Directory of enrollment images (embeddings are averaged).
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one probe image against a personal verifier model.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Accept threshold on the verifier probability.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Evaluate a pair list and write an evaluation report.
    EvalPairs {
        #[arg(long)]
        system: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Average scores over both pair directions.
        #[arg(long)]
        symmetric: bool,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report parameter count, FLOPs, and verify latency for a model.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        iters: usize,
    },
    /// Materialize the synthetic identity dataset as an image directory.
    SynthData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_run_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::io(p.display().to_string(), e))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn load_image_tensor(path: &Path, size: usize) -> Result<Tensor> {
    let pixels = data::load_image(path, size)?;
    Ok(Tensor::from_vec(pixels, &[3, size, size]))
}

fn cmd_train(config: &Option<PathBuf>, out: &Path) -> Result<()> {
    let cfg = load_run_config(config)?;
    let outcome = pipeline::run_training(&cfg, out)?;
    eprintln!(
        "backbone classification accuracy {:.3}",
        outcome.backbone_accuracy
    );
    if let Some(last) = outcome.history.last() {
        eprintln!("final training loss {:.4}", last.loss);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_enroll(
    system: &Path,
    image: &Option<PathBuf>,
    images: &Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let sys = load_system(system)?;
    let size = sys.arch.input_size;
    let theta = match (image, images) {
        (Some(p), None) => sys.enroll(&load_image_tensor(p, size)?)?,
        (None, Some(dir)) => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir.display().to_string(), e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Data(format!("no images in {}", dir.display())));
            }
            let tensors = files
                .iter()
                .map(|p| load_image_tensor(p, size))
                .collect::<Result<Vec<_>>>()?;
            sys.enroll_images(&tensors)?
        }
        _ => {
            return Err(Error::Config(
                "enroll needs exactly one of --image or --images".into(),
            ))
        }
    };
    modelio::save_verifier(&theta, &sys.arch.id, size, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Ok(true) on accept, Ok(false) on reject.
fn cmd_verify(model: &Path, image: &Path, threshold: f64) -> Result<bool> {
    let (theta, arch) = modelio::load_verifier(model)?;
    let probe = load_image_tensor(image, arch.input_size)?;
    let p = arch.verify(&probe, &theta)?;
    let accept = p >= threshold;
    println!("{p:.6} {}", if accept { "ACCEPT" } else { "REJECT" });
    Ok(accept)
}

fn cmd_eval_pairs(
    system: &Path,
    pairs: &Path,
    symmetric: bool,
    out: &Option<PathBuf>,
) -> Result<()> {
    let sys = load_system(system)?;
    let list = PairList::from_file(pairs)?;
    let report = evaluate_pairs(&sys, &list, sys.arch.input_size, symmetric)?;
    let text = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => {
            std::fs::write(p, text).map_err(|e| Error::io(p.display().to_string(), e))?;
            println!(
                "accuracy {:.4} +- {:.4}, auc {:.4}, wrote {}",
                report.mean_accuracy,
                report.std_accuracy,
                report.auc,
                p.display()
            );
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_bench(model: &Path, iters: usize) -> Result<()> {
    if iters == 0 {
        return Err(Error::Config("bench needs at least one iteration".into()));
    }
    let (theta, arch) = modelio::load_verifier(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = arch.input_size;
    let pixels: Vec<f64> = (0..3 * s * s)
        .map(|_| rng.next_u32() as f64 / u32::MAX as f64 * 2.0 - 1.0)
        .collect();
    let probe = Tensor::from_vec(pixels, &[3, s, s]);
    arch.verify(&probe, &theta)?;
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        let _ = arch.verify(&probe, &theta)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = times.iter().sum::<f64>() / iters as f64;
    let p95 = times[((iters as f64 * 0.95) as usize).min(iters - 1)];
    println!("architecture: {}", arch.id);
    println!("params: {}", arch.count_params());
    println!("flops: {}", arch.count_flops());
    println!("latency_ms_mean: {mean:.3}");
    println!("latency_ms_p95: {p95:.3}");
    Ok(())
}

fn cmd_synth_data(config: &Option<PathBuf>, out: &Path) -> Result<()> {
    let cfg = load_run_config(config)?;
    let dataset = data::synth_identity_dataset(&cfg.synth_config())?;
    data::write_image_dir(&dataset, out)?;
    println!(
        "wrote {} images for {} identities to {}",
        dataset.len(),
        dataset.identity_count(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, out } => cmd_train(config, out).map(|()| ExitCode::SUCCESS),
        Command::Enroll { system, image, images, out } => {
            cmd_enroll(system, image, images, out).map(|()| ExitCode::SUCCESS)
        }
        Command::Verify { model, image, threshold } => cmd_verify(model, image, *threshold)
            .map(|accept| if accept { ExitCode::SUCCESS } else { ExitCode::from(1) }),
        Command::EvalPairs { system, pairs, symmetric, out } => {
            cmd_eval_pairs(system, pairs, *symmetric, out).map(|()| ExitCode::SUCCESS)
        }
        Command::Bench { model, iters } => cmd_bench(model, *iters).map(|()| ExitCode::SUCCESS),
        Command::SynthData { config, out } => {
            cmd_synth_data(config, out).map(|()| ExitCode::SUCCESS)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
