use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use tsvit::checkpoint::{load_checkpoint, save_checkpoint};
use tsvit::counting::{count_flops, count_params, count_params_paper_compatible};
use tsvit::data::{gen_synthetic, read_dataset, split, write_dataset, Dataset, SplitSpec};
use tsvit::features::export_features;
use tsvit::train::{evaluate, metrics_csv, run_trials, write_text, EpochRecord};
use tsvit::Model32;

mod run_config;

// Training allocates and frees large activation buffers every step; the system
// allocator returns them to the kernel each time.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use run_config::RunConfig;

#[derive(Parser)]
#[command(name = "tsvit", version, about = "Time-series vision transformer for vibration fault diagnosis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic four-class vibration dataset.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        per_class: usize,
        #[arg(long, default_value_t = 2048)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model per trial and keep each trial's best checkpoint.
    Train {
        /// Training data. Split 80/20 per class unless --test is given.
        #[arg(long)]
        data: PathBuf,
        /// Held-out data; when present --data is used whole for training.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides `trials` from the config file.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Accuracy and confusion matrix of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Parameter and FLOP counts of a configuration.
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report the MLP + convolution FLOPs and the matching parameter subset.
        #[arg(long)]
        paper_compatible: bool,
    },
    /// Dump per-layer class-token features.
    ExportFeatures {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenSynth {
            out,
            per_class,
            length,
            seed,
        } => gen_synth(&out, per_class, length, seed),
        Command::Train {
            data,
            test,
            config,
            out_dir,
            trials,
            quiet,
        } => train(&data, test.as_deref(), &config, &out_dir, trials, quiet),
        Command::Eval {
            data,
            checkpoint,
            out_dir,
        } => eval(&data, &checkpoint, &out_dir),
        Command::Count {
            config,
            paper_compatible,
        } => count(config.as_deref(), paper_compatible),
        Command::ExportFeatures { data, checkpoint, out } => export(&data, &checkpoint, &out),
    }
}

fn gen_synth(out: &Path, per_class: usize, length: usize, seed: u64) -> Result<()> {
    let data = gen_synthetic(per_class, length, seed)?;
    write_dataset(&data, out)?;
    println!("wrote {} samples ({} classes, L={length}) to {}", data.len(), data.num_classes(), out.display());
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset> {
    read_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn train(
    data: &Path,
    test: Option<&Path>,
    config: &Path,
    out_dir: &Path,
    trials: Option<usize>,
    quiet: bool,
) -> Result<()> {
    // Everything is validated before the output directory is touched.
    let mut cfg = RunConfig::load(config)?;
    if let Some(n) = trials {
        cfg.train.trials = n;
    }
    cfg.validate()?;
    let full = load_data(data)?;
    let (train_set, test_set) = match test {
        Some(path) => (full, load_data(path)?),
        None => split(
            &full,
            SplitSpec {
                seed: cfg.train.seed,
                ..SplitSpec::default()
            },
        )?,
    };
    for d in [&train_set, &test_set] {
        cfg.model
            .ensure_data_matches(d.signal_len(), d.channels(), d.num_classes())?;
    }
    if train_set.class_names() != test_set.class_names() {
        bail!("train and test datasets name their classes differently");
    }

    let outcome = run_trials::<f32>(&train_set, &test_set, &cfg.model, &cfg.train, |r: &EpochRecord| {
        if !quiet {
            eprintln!(
                "trial {} epoch {}: train loss {:.4} acc {:.4}, test loss {:.4} acc {:.4}",
                r.trial, r.epoch, r.train_loss, r.train_acc, r.test_loss, r.test_acc
            );
        }
    })?;

    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for t in &outcome.trials {
        save_checkpoint(&t.best_model, out_dir.join(format!("trial_{}.tsvm", t.report.trial)))?;
        write_text(
            out_dir.join(format!("confusion_trial_{}.csv", t.report.trial)),
            &t.report.confusion.to_csv(test_set.class_names()),
        )?;
    }
    write_text(
        out_dir.join("metrics.csv"),
        &metrics_csv(outcome.trials.iter().flat_map(|t| &t.report.epochs)),
    )?;
    let summary = format!("MaxAcc MinAcc AvgAcc\n{}\n", outcome.sweep.summary_line());
    write_text(out_dir.join("summary.txt"), &summary)?;
    for t in &outcome.trials {
        println!(
            "trial {} (seed {}): best test accuracy {:.4} at epoch {}",
            t.report.trial, t.report.seed, t.report.best_test_accuracy, t.report.best_epoch
        );
    }
    print!("{summary}");
    Ok(())
}

fn eval(data: &Path, checkpoint: &Path, out_dir: &Path) -> Result<()> {
    let model: Model32 = load_checkpoint(checkpoint)?;
    let data = load_data(data)?;
    let result = evaluate(&model, &data, 32)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_text(out_dir.join("confusion.csv"), &result.confusion.to_csv(data.class_names()))?;
    println!("accuracy {:.4}", result.accuracy);
    println!("loss {:.6}", result.loss);
    Ok(())
}

fn millions(v: u64) -> String {
    format!("{:.2}M", v as f64 / 1e6)
}

fn count(config: Option<&Path>, paper_compatible: bool) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.model.validate()?;
    let flops = count_flops(&cfg.model);
    if paper_compatible {
        let params = count_params_paper_compatible(&cfg.model);
        let f = flops.paper_compatible();
        println!("params {params} ({})", millions(params));
        println!("flops {f} ({})", millions(f));
        return Ok(());
    }
    let params = count_params(&cfg.model);
    println!("params {params} ({})", millions(params));
    for (name, v) in flops.terms() {
        println!("flops.{name} {v}");
    }
    println!("flops.matmul {} ({})", flops.matmul_total(), millions(flops.matmul_total()));
    println!("flops.total {} ({})", flops.total(), millions(flops.total()));
    Ok(())
}

fn export(data: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let model: Model32 = load_checkpoint(checkpoint)?;
    let data = load_data(data)?;
    let features = export_features(&model, &data, out)?;
    println!(
        "wrote {} records ({} layers x {} samples) to {}",
        features.records.len(),
        features.blocks + 1,
        data.len(),
        out.display()
    );
    Ok(())
}
