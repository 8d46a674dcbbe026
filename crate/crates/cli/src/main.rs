//! Command-line driver: train the head, evaluate checkpoints, run ablation
//! sweeps, and export activation maps or adjacency matrices for plotting.

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

use addgcn_core::config::TrainConfig;
use addgcn_core::data::{load_dataset, save_dataset, Dataset};
use addgcn_core::metrics::MetricsReport;
use addgcn_core::train::{
    ablate, ablation_csv, build_datasets, dump_adjacency, evaluate_model, export_maps, load_model,
    resume, split_specs, train, write_scores_jsonl, AblationAxis, Checkpoint,
};

#[derive(Parser)]
#[command(name = "addgcn", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on the configured dataset and write checkpoint + metrics log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoint.adgk, metrics.csv, report.json.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Resume from a checkpoint written by an earlier run of the same
        /// config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a dataset with a checkpoint; writes scores.jsonl plus the
    /// metrics report as flat JSON and a CSV row.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset index JSON produced by gen-data (or external tooling).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
        /// Apply the 0.5 confidence rule inside the top-3 set as well.
        #[arg(long)]
        top3_threshold: bool,
    },
    /// Train every variant along one ablation axis and write a comparison
    /// CSV. Axes: graph_mode, aggregation, map_mode.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Write per-sample, per-class activation maps and attention scores in
    /// ADGT format with a JSON index.
    ExportMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset index; defaults to the checkpoint config's eval split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "runs/maps")]
        out: PathBuf,
    },
    /// Write one sample's dynamic adjacency (and the static adjacency, if
    /// the mode has one) in ADGT format.
    DumpAdjacency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: String,
        /// Dataset index; defaults to the checkpoint config's eval split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "runs/adjacency")]
        out: PathBuf,
    },
    /// Materialize the config's synthetic train and eval splits as ADGT
    /// files with index.json, for eval or external consumers.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs/data")]
        out: PathBuf,
    },
}

fn print_report(report: &MetricsReport) {
    println!(
        "mAP {:.4} | all CP {:.4} CR {:.4} CF1 {:.4} OP {:.4} OR {:.4} OF1 {:.4}",
        report.map,
        report.all.cp,
        report.all.cr,
        report.all.cf1,
        report.all.op,
        report.all.or_,
        report.all.of1
    );
    println!(
        "         | top3 CP {:.4} CR {:.4} CF1 {:.4} OP {:.4} OR {:.4} OF1 {:.4}",
        report.top3.cp,
        report.top3.cr,
        report.top3.cf1,
        report.top3.op,
        report.top3.or_,
        report.top3.of1
    );
}

fn eval_dataset_for(cfg: &TrainConfig, data: &Option<PathBuf>) -> anyhow::Result<Dataset> {
    match data {
        Some(path) => Ok(load_dataset(path)?),
        None => {
            let (_, eval_ds) = build_datasets(cfg)?;
            Ok(eval_ds)
        }
    }
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train {
            config,
            out,
            resume: resume_path,
        } => {
            let cfg = TrainConfig::from_file(&config)?;
            let output = match resume_path {
                Some(path) => {
                    let ck = Checkpoint::load(&path)?;
                    println!(
                        "resuming from {} at epoch {}",
                        path.display(),
                        ck.epoch
                    );
                    resume(&cfg, &ck, Some(&out))?
                }
                None => train(&cfg, Some(&out))?,
            };
            for rec in &output.history {
                println!(
                    "epoch {:>3}: loss {:.4}  mAP {:.4}  OF1 {:.4}  CF1 {:.4}",
                    rec.epoch,
                    rec.mean_loss,
                    rec.report.map,
                    rec.report.all.of1,
                    rec.report.all.cf1
                );
            }
            if let Some(rec) = output.history.last() {
                println!("final:");
                print_report(&rec.report);
            }
            println!("checkpoint: {}", out.join("checkpoint.adgk").display());
        }
        Cmd::Eval {
            checkpoint,
            data,
            out,
            top3_threshold,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (cfg, store, model) = load_model(&ck)?;
            let ds = load_dataset(&data)?;
            if ds.is_empty() {
                bail!("dataset {} is empty", data.display());
            }
            let (_, scores) = evaluate_model(&model, &store, &ds, cfg.batch_size)?;
            let batch = addgcn_core::metrics::EvalBatch::new(scores.clone(), ds.labels_tensor())?;
            let report = addgcn_core::metrics::evaluate_with(&batch, top3_threshold)?;
            std::fs::create_dir_all(&out)?;
            write_scores_jsonl(out.join("scores.jsonl"), &ds, &scores)?;
            std::fs::write(
                out.join("report.json"),
                serde_json::to_vec_pretty(&report.to_flat_json())?,
            )?;
            std::fs::write(
                out.join("report.csv"),
                format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.to_csv_row()),
            )?;
            print_report(&report);
            println!("wrote {}", out.join("scores.jsonl").display());
        }
        Cmd::Ablate { config, axis, out } => {
            let cfg = TrainConfig::from_file(&config)?;
            let axis = AblationAxis::parse(&axis)?;
            let rows = ablate(&cfg, axis)?;
            std::fs::create_dir_all(&out)?;
            let csv = ablation_csv(&rows);
            std::fs::write(out.join("ablation.csv"), &csv)?;
            for row in &rows {
                println!(
                    "{:<10} loss {:.4}  mAP {:.4}  OF1 {:.4}  CF1 {:.4}",
                    row.variant,
                    row.final_loss,
                    row.report.map,
                    row.report.all.of1,
                    row.report.all.cf1
                );
            }
            println!("wrote {}", out.join("ablation.csv").display());
        }
        Cmd::ExportMaps {
            checkpoint,
            data,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (cfg, store, model) = load_model(&ck)?;
            let ds = eval_dataset_for(&cfg, &data)?;
            if ds.is_empty() {
                bail!("no samples to export");
            }
            let index = export_maps(&model, &store, &ds, cfg.batch_size, &out)?;
            println!("wrote {}", index.display());
        }
        Cmd::DumpAdjacency {
            checkpoint,
            sample,
            data,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (cfg, store, model) = load_model(&ck)?;
            let ds = eval_dataset_for(&cfg, &data)?;
            let written = dump_adjacency(&model, &store, &ds, &sample, &out)?;
            for path in written {
                println!("wrote {}", path.display());
            }
        }
        Cmd::GenData { config, out } => {
            let cfg = TrainConfig::from_file(&config)?;
            let (train_ds, eval_ds) = build_datasets(&cfg)?;
            let specs = split_specs(&cfg).ok();
            save_split(&train_ds, specs.as_ref().map(|s| &s.0), &out.join("train"))?;
            save_split(&eval_ds, specs.as_ref().map(|s| &s.1), &out.join("eval"))?;
            println!(
                "wrote {} train / {} eval samples under {}",
                train_ds.len(),
                eval_ds.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn save_split(
    ds: &Dataset,
    spec: Option<&addgcn_core::data::SyntheticSpec>,
    dir: &Path,
) -> anyhow::Result<()> {
    let index = save_dataset(ds, spec, dir)
        .with_context(|| format!("saving dataset under {}", dir.display()))?;
    println!("wrote {}", index.display());
    Ok(())
}
