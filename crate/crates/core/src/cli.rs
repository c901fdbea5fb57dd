//! Command-line interface: data generation, training, evaluation, ablation
//! sweeps and pseudo-label dumps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::phantom::{make_dataset_with_manifest, read_dataset, write_dataset, LabeledCase, SpecRanges};
use crate::trainer::{case_metrics, fit, run_variant, inspect_pseudolabels, LogRecord, TrainConfig, Variant};
use crate::vv1::Vv1Tensor;

#[derive(Debug, Parser)]
#[command(name = "voxseed", version, about = "Semi-supervised 3D segmentation with uncertainty and nearest-neighbor pseudo-labels", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_train: usize,
        #[arg(long)]
        n_labeled: usize,
        #[arg(long)]
        n_val: usize,
        #[arg(long)]
        n_test: usize,
        #[arg(long)]
        seed: u64,
        /// Upper bound of the deformation amplitude.
        #[arg(long)]
        delta_max: Option<f64>,
        /// Probability that a phantom carries streak artifacts.
        #[arg(long)]
        artifact_prob: Option<f64>,
        /// Side length of the cubic volumes in voxels.
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Train on a manifest; writes log.jsonl, best.vck1 and final.vck1.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint's teacher on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the baseline and the four loss-ablation rows over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump entropy, threshold, reliability, teacher and neighbor pseudo-labels
    /// for one case as VV1 tensors.
    Pseudolabel {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        case: String,
        #[arg(long)]
        data: PathBuf,
        /// Labeled case donating embeddings (default: first labeled case).
        #[arg(long)]
        labeled_case: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (without the program name) and runs the command. Returns 0
/// on success, 1 on usage errors and 2 on runtime errors.
pub fn run<S: AsRef<str>>(argv: &[S]) -> i32 {
    let args = std::iter::once("voxseed").chain(argv.iter().map(|s| s.as_ref()));
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                0
            } else {
                1
            };
        }
    };
    configure_threads();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Applies `VOXSEED_THREADS` (0 or unset = one thread per core).
fn configure_threads() {
    let n = std::env::var("VOXSEED_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
    if n > 0 {
        // the global pool can only be configured once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn json_line(w: &mut impl Write, path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::json(path, e))?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, n_train, n_labeled, n_val, n_test, seed, delta_max, artifact_prob, size } => {
            let mut ranges = SpecRanges { dims: [size; 3], ..SpecRanges::default() };
            if let Some(d) = delta_max {
                ranges.delta.1 = d;
            }
            if let Some(p) = artifact_prob {
                ranges.artifact_prob = p;
            }
            let (split, manifest) = make_dataset_with_manifest(n_train, n_labeled, n_val, n_test, &ranges, seed)?;
            let path = write_dataset(&out, &split, &manifest)?;
            println!("wrote {} cases, manifest {}", manifest.cases.len(), path.display());
            Ok(())
        }
        Command::Train { config, data, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (_, split) = read_dataset(&data)?;
            create_dir(&out)?;
            let log_path = out.join("log.jsonl");
            let mut log = create(&log_path)?;
            let outcome = fit(&cfg, &split, &mut |r: &LogRecord| json_line(&mut log, &log_path, r))?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            outcome.best.write(out.join("best.vck1"))?;
            outcome.last.write(out.join("final.vck1"))?;
            if let Some(msg) = outcome.aborted {
                return Err(Error::Divergence(format!("training aborted, final.vck1 holds the last healthy state: {msg}")));
            }
            match outcome.best_val {
                Some((i, h)) => println!("best epoch {}: val IoU {i:.4}, val HD95 {h:.3} mm", outcome.best_epoch),
                None => println!("finished {} epochs (no validation set)", cfg.epochs),
            }
            Ok(())
        }
        Command::Eval { checkpoint, data, split, out } => {
            let ckpt = Checkpoint::read(&checkpoint)?;
            let (_, ds) = read_dataset(&data)?;
            let cases: &[LabeledCase] = match split.as_str() {
                "test" => &ds.test,
                "validation" | "val" => &ds.validation,
                "labeled" => &ds.labeled,
                other => return Err(Error::invalid(format!("unknown split {other:?} (test | validation | labeled)"))),
            };
            if cases.is_empty() {
                return Err(Error::invalid(format!("split {split:?} of {} is empty", data.display())));
            }
            let metrics = case_metrics(&ckpt.teacher, cases)?;
            let mut csv = create(&out)?;
            writeln!(csv, "case_id,iou,hd95_mm").map_err(|e| Error::io(&out, e))?;
            let stdout = std::io::stdout();
            let mut so = stdout.lock();
            for m in &metrics {
                writeln!(csv, "{},{},{}", m.case_id, m.iou, m.hd95_mm).map_err(|e| Error::io(&out, e))?;
                json_line(&mut so, Path::new("<stdout>"), m)?;
            }
            csv.flush().map_err(|e| Error::io(&out, e))?;
            let n = metrics.len() as f64;
            let summary = serde_json::json!({
                "split": split,
                "cases": metrics.len(),
                "mean_iou": metrics.iter().map(|m| m.iou).sum::<f64>() / n,
                "mean_hd95_mm": metrics.iter().map(|m| m.hd95_mm).sum::<f64>() / n,
            });
            json_line(&mut so, Path::new("<stdout>"), &summary)
        }
        Command::Ablate { config, data, seeds, out } => {
            let cfg = load_config(config.as_deref())?;
            let (_, ds) = read_dataset(&data)?;
            create_dir(&out)?;
            let runs_path = out.join("runs.jsonl");
            let mut runs = create(&runs_path)?;
            let table_path = out.join("ablation.csv");
            let mut table = create(&table_path)?;
            writeln!(table, "row,iou,hd95_mm").map_err(|e| Error::io(&table_path, e))?;
            for variant in Variant::ALL {
                let (mut iou, mut hd) = (0.0, 0.0);
                for &seed in &seeds {
                    let c = TrainConfig { seed, ..cfg.clone() };
                    let r = run_variant(&c, &ds, variant, &mut |_| Ok(()))?;
                    let record = serde_json::json!({
                        "row": variant.label(), "seed": seed, "iou": r.mean_iou,
                        "hd95_mm": r.mean_hd95, "best_epoch": r.best_epoch,
                    });
                    json_line(&mut runs, &runs_path, &record)?;
                    iou += r.mean_iou;
                    hd += r.mean_hd95;
                }
                let n = seeds.len() as f64;
                writeln!(table, "{},{},{}", variant.label(), iou / n, hd / n).map_err(|e| Error::io(&table_path, e))?;
                println!("{:<9} IoU {:.4}  HD95 {:.3} mm", variant.label(), iou / n, hd / n);
            }
            runs.flush().map_err(|e| Error::io(&runs_path, e))?;
            table.flush().map_err(|e| Error::io(&table_path, e))
        }
        Command::Pseudolabel { checkpoint, case, data, labeled_case, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let ckpt = Checkpoint::read(&checkpoint)?;
            let (_, ds) = read_dataset(&data)?;
            let volume = ds
                .unlabeled
                .iter()
                .map(|c| (&c.id, &c.volume))
                .chain(ds.labeled.iter().chain(&ds.validation).chain(&ds.test).map(|c| (&c.id, &c.volume)))
                .find(|(id, _)| **id == case)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::invalid(format!("case {case:?} not found in {}", data.display())))?;
            let donor = match &labeled_case {
                Some(id) => ds.labeled.iter().find(|c| &c.id == id).ok_or_else(|| Error::invalid(format!("labeled case {id:?} not found")))?,
                None => ds.labeled.first().ok_or_else(|| Error::invalid("dataset has no labeled case"))?,
            };
            let dump = inspect_pseudolabels(&ckpt, donor, volume, &cfg)?;
            create_dir(&out)?;
            let sp = volume.spacing();
            Vv1Tensor::from_field(&dump.entropy, sp).write(out.join("entropy.vv1"))?;
            Vv1Tensor::scalar(dump.lambda as f32).write(out.join("lambda.vv1"))?;
            Vv1Tensor::from_mask(&dump.reliable, sp).write(out.join("reliable.vv1"))?;
            Vv1Tensor::from_mask(&dump.pseudo_teacher, sp).write(out.join("pseudo_teacher.vv1"))?;
            Vv1Tensor::from_field(&dump.similarity.k_plus, sp).write(out.join("k_plus.vv1"))?;
            Vv1Tensor::from_field(&dump.similarity.k_minus, sp).write(out.join("k_minus.vv1"))?;
            Vv1Tensor::from_mask(&dump.pseudo_nn, sp).write(out.join("pseudo_nn.vv1"))?;
            println!(
                "lambda {:.4}, reliable {} of {} voxels, wrote {}",
                dump.lambda,
                dump.reliable.count(),
                dump.reliable.len(),
                out.display()
            );
            Ok(())
        }
    }
}
