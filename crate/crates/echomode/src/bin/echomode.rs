//! Command-line front end: synthetic data generation, M-mode extraction,
//! training (supervised / contrastive / fine-tune), evaluation, the
//! limited-label learning curve and a cost benchmark.
//!
//! Every run that produces a model or metrics writes a JSON report (config
//! echo, seed, checkpoint hash, metrics) and, where predictions exist, a
//! CSV with one row per patient.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use echomode::config::TrainConfig;
use echomode::data_model::{load_manifest, load_video, write_video_to, Manifest, Split, VideoTensor};
use echomode::error::{Error, Result};
use echomode::metrics::EvalReport;
use echomode::mmode::{extract_stack, ClipPolicy};
use echomode::model::ModelBundle;
use echomode::synth::synth_dataset;
use echomode::train::{
    bench, evaluate, finetune, learning_curve, pretrain_contrastive, train_supervised, CurveRow,
    Method, PredictionRow, TrainHistory, DEFAULT_SEEDS,
};

#[derive(Parser)]
#[command(name = "echomode", about = "Artificial M-mode EF estimation toolkit", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic pulsating-ellipse dataset (videos + manifest).
    Synth {
        /// Number of patients.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.15)]
        ef_min: f64,
        #[arg(long, default_value_t = 0.75)]
        ef_max: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Frames per video.
        #[arg(long, default_value_t = 112)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract M-mode stacks for every patient in a manifest.
    Extract {
        /// Directory holding the MMV1 videos.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 10)]
        modes: usize,
        /// full | short
        #[arg(long, default_value = "full")]
        clip: ClipPolicy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised end-to-end EF regression.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pre-training (labels unused).
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune (or probe) a pre-trained encoder on labeled data.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Pre-trained checkpoint (.mmck with .json sidecar).
        #[arg(long)]
        ckpt: PathBuf,
        /// Keep the encoder weights fixed.
        #[arg(long)]
        freeze: bool,
        /// Fraction of train labels to use; overrides the config value.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// train | val | test
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "full")]
        clip: ClipPolicy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Limited-label learning curve over methods, fractions and seeds.
    Curve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Comma-separated label fractions in (0, 1].
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
        /// Comma-separated subset of e2e,e2e+,cl,cl+,cl-freeze,cl+-freeze.
        #[arg(long, value_delimiter = ',', default_value = "e2e,cl+")]
        methods: Vec<Method>,
        /// Comma-separated seeds; defaults to 0,1,2,3,4.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time one training step and one inference pass on a real batch.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

#[derive(Serialize)]
struct RunReport<'a> {
    command: &'a str,
    seed: u64,
    config: Option<&'a TrainConfig>,
    checkpoint: Option<String>,
    checkpoint_sha256: Option<String>,
    metrics: Option<&'a EvalReport>,
    history: Option<&'a TrainHistory>,
    curve: Option<&'a [CurveRow]>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::argument(e.to_string()))?;
    std::fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::data(e.to_string()))?;
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn load_inputs(manifest: &Path, videos: &Path) -> Result<Manifest> {
    load_manifest(manifest, videos)
}

/// Save a trained bundle plus its JSON run report and prediction CSV.
fn finish_training_run(
    command: &str,
    out: &Path,
    bundle: &ModelBundle<f32>,
    history: &TrainHistory,
    manifest: &Manifest,
    eval_split: Option<Split>,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let ckpt = out.join("model.mmck");
    bundle.save(&ckpt)?;
    println!("wrote {}", ckpt.display());
    let (metrics, rows) = match eval_split {
        Some(split) if !manifest.split_ids(split).is_empty() => {
            let (report, rows) =
                evaluate(bundle, manifest, split, history.config.clip, history.config.seed)?;
            (Some(report), rows)
        }
        _ => (None, Vec::new()),
    };
    if !rows.is_empty() {
        write_predictions(&out.join("predictions.csv"), &rows)?;
    }
    let report = RunReport {
        command,
        seed: history.config.seed,
        config: Some(&history.config),
        checkpoint: Some(ckpt.display().to_string()),
        checkpoint_sha256: Some(sha256_file(&ckpt)?),
        metrics: metrics.as_ref(),
        history: Some(history),
        curve: None,
    };
    write_json(&out.join("report.json"), &report)
}

#[derive(Serialize)]
struct StackSidecar {
    patient_id: String,
    modes: usize,
    samples_per_line: usize,
    t_clip: usize,
    angles_deg: Vec<f64>,
    frame_indices: Vec<usize>,
    clip: ClipPolicy,
    seed: u64,
}

/// Write one patient stack as an MMV1 tensor with header t=t_clip, h=s,
/// w=M: frame-major over clip frames, each frame an s x M matrix whose
/// column m is scan line m at that frame. Intensities requantized to u8.
fn write_stack(
    dir: &Path,
    stack: &echomode::mmode::MModeStack,
    clip: ClipPolicy,
    seed: u64,
) -> Result<()> {
    let m = stack.images.len();
    let s = stack.images[0].s;
    let t = stack.images[0].t_clip;
    let id = stack.images[0].patient_id.clone();
    let mut frames = Vec::with_capacity(t * s * m);
    for f in 0..t {
        for k in 0..s {
            for img in &stack.images {
                frames.push((img.at(k, f) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let path = dir.join(format!("{id}.mmv"));
    let file = std::fs::File::create(&path)?;
    let tensor = VideoTensor { patient_id: id.clone(), t, h: s, w: m, frames };
    write_video_to(&tensor, std::io::BufWriter::new(file))?;
    let sidecar = StackSidecar {
        patient_id: id,
        modes: m,
        samples_per_line: s,
        t_clip: t,
        angles_deg: stack.angles_deg.clone(),
        frame_indices: stack.frame_indices.clone(),
        clip,
        seed,
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::data(e.to_string()))?;
    std::fs::write(path.with_extension("json"), json)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { n, ef_min, ef_max, seed, frames, out } => {
            let manifest = synth_dataset(n, (ef_min, ef_max), seed, frames, &out)?;
            println!(
                "wrote {n} synthetic patients ({} train / {} val / {} test) to {}",
                manifest.split_ids(Split::Train).len(),
                manifest.split_ids(Split::Val).len(),
                manifest.split_ids(Split::Test).len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Extract { input, manifest, modes, clip, seed, out } => {
            let manifest = load_inputs(&manifest, &input)?;
            std::fs::create_dir_all(&out)?;
            let mut count = 0usize;
            for record in &manifest.records {
                let video = load_video(manifest.video_path(&record.patient_id))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let stack = extract_stack(&video, modes, clip, &mut rng)?;
                write_stack(&out, &stack, clip, seed)?;
                count += 1;
            }
            println!("extracted {count} stacks (M={modes}) to {}", out.display());
            Ok(())
        }
        Cmd::Train { config, manifest, input, out } => {
            let cfg = load_config(&config)?;
            let data = load_inputs(&manifest, &input)?;
            let (bundle, history) = train_supervised(&data, &cfg)?;
            finish_training_run("train", &out, &bundle, &history, &data, Some(Split::Test))
        }
        Cmd::Pretrain { config, manifest, input, out } => {
            let cfg = load_config(&config)?;
            let data = load_inputs(&manifest, &input)?;
            let (bundle, history) = pretrain_contrastive(&data, &cfg)?;
            finish_training_run("pretrain", &out, &bundle, &history, &data, None)
        }
        Cmd::Finetune { config, manifest, input, ckpt, freeze, fraction, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(p) = fraction {
                cfg.label_fraction = p;
            }
            let data = load_inputs(&manifest, &input)?;
            let pretrained = ModelBundle::<f32>::load(&ckpt)?;
            let (bundle, history) = finetune(&data, &pretrained, &cfg, freeze)?;
            finish_training_run("finetune", &out, &bundle, &history, &data, Some(Split::Test))
        }
        Cmd::Eval { ckpt, manifest, input, split, clip, seed, out } => {
            let data = load_inputs(&manifest, &input)?;
            let bundle = ModelBundle::<f32>::load(&ckpt)?;
            let (report, rows) = evaluate(&bundle, &data, split, clip, seed)?;
            std::fs::create_dir_all(&out)?;
            write_predictions(&out.join("predictions.csv"), &rows)?;
            let run = RunReport {
                command: "eval",
                seed,
                config: None,
                checkpoint: Some(ckpt.display().to_string()),
                checkpoint_sha256: Some(sha256_file(&ckpt)?),
                metrics: Some(&report),
                history: None,
                curve: None,
            };
            write_json(&out.join("report.json"), &run)?;
            println!(
                "{split}: mae {:.4}, rmse {:.4}, r2 {:.4}, auroc {}",
                report.mae,
                report.rmse,
                report.r2,
                report.auroc.map_or("n/a".into(), |a| format!("{a:.4}")),
            );
            Ok(())
        }
        Cmd::Curve { config, manifest, input, fractions, methods, seeds, out } => {
            let cfg = load_config(&config)?;
            let data = load_inputs(&manifest, &input)?;
            let seeds = seeds.unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
            let rows = learning_curve(&data, &fractions, &methods, &seeds, &cfg)?;
            std::fs::create_dir_all(&out)?;
            let run = RunReport {
                command: "curve",
                seed: cfg.seed,
                config: Some(&cfg),
                checkpoint: None,
                checkpoint_sha256: None,
                metrics: None,
                history: None,
                curve: Some(&rows),
            };
            write_json(&out.join("curve.json"), &run)?;
            for row in &rows {
                println!(
                    "{:<12} p={:<5} mae {:.4} ± {:.4}  auroc {}",
                    row.method,
                    row.fraction,
                    row.mae.mean,
                    row.mae.std,
                    row.auroc
                        .map_or("n/a".into(), |a| format!("{:.4} ± {:.4}", a.mean, a.std)),
                );
            }
            Ok(())
        }
        Cmd::Bench { ckpt, manifest, input, batch_size, repeats, out } => {
            let data = load_inputs(&manifest, &input)?;
            let bundle = ModelBundle::<f32>::load(&ckpt)?;
            let mut cfg = TrainConfig::default();
            cfg.m = bundle.arch.fusion.m;
            cfg.k = bundle.arch.fusion.k;
            let report = bench(&bundle, &data, &cfg, batch_size, repeats)?;
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("bench.json"), &report)?;
            println!(
                "{:.2} Mio params; train {:.3} s/batch ({:.2} ms/sample); infer {:.3} s/batch ({:.2} ms/sample)",
                report.params_mio,
                report.train_sec_per_batch,
                report.train_msec_per_sample,
                report.infer_sec_per_batch,
                report.infer_msec_per_sample,
            );
            Ok(())
        }
    }
}

fn main() {
    env_logger::init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
