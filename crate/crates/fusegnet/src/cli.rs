//! Command-line entry points: train, predict, evaluate, report.

use crate::config::RunConfig;
use crate::dataio;
use crate::ensemble::{self, EnsembleBundle, BINARIZE_THRESHOLD};
use crate::error::{Error, Result};
use crate::metrics::{build_report, MetricsReport};
use crate::report::{
    per_image_rows, read_per_image_csv, write_plots_from_rows, write_report_csvs,
};
use crate::trainer::{self, CheckpointRecord, TrainSink};
use clap::{Parser, Subcommand};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "fusegnet",
    about = "Foot ulcer segmentation: training, ensemble inference, and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train one fold, all folds, or a holdout split, per the configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train only this fold of the configured manifest.
        #[arg(long)]
        fold: Option<usize>,
        /// Output directory (overrides the configured one).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict masks for a directory of images using one checkpoint (single
    /// model) or several (ensemble mean).
    Predict {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint file; repeat for an ensemble.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write 16-bit probability maps.
        #[arg(long)]
        prob_maps: bool,
    },
    /// Score a directory of predicted masks against ground truth.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate the plot suite from stored per-image CSVs.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Per-image CSV files; several inputs overlay the comparison charts.
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, fold, out } => cmd_train(&config, fold, out.as_deref()),
        Command::Predict { config, checkpoints, images, out, prob_maps } => {
            cmd_predict(&config, &checkpoints, &images, &out, prob_maps)
        }
        Command::Evaluate { config, pred, gt, out } => cmd_evaluate(&pred, &gt, &config, &out),
        Command::Report { out, csvs } => cmd_report(&csvs, &out),
    }
}

pub fn cmd_train(config_path: &Path, fold: Option<usize>, out: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let dataset = cfg.dataset_required()?;
    if !dataset.masks_dir.is_dir() {
        return Err(Error::Dataset {
            path: dataset.masks_dir.clone(),
            reason: "masks directory does not exist".into(),
        });
    }
    if !dataset.images_dir.is_dir() {
        return Err(Error::Dataset {
            path: dataset.images_dir.clone(),
            reason: "images directory does not exist".into(),
        });
    }
    let out_dir = cfg.output_dir(out)?;
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let records = dataio::load_dataset(&dataset.images_dir, &dataset.masks_dir)?;
    if records.is_empty() {
        return Err(Error::Dataset {
            path: dataset.images_dir.clone(),
            reason: "no samples found".into(),
        });
    }
    let ts = cfg.train_settings();

    match (&cfg.folds, fold) {
        (None, Some(_)) => Err(Error::Config(
            "--fold was given but the config has no [folds] section".into(),
        )),
        (None, None) => {
            let mut sink = TrainSink::to_dir(&out_dir, "holdout");
            let run = trainer::train_holdout(&records, &cfg.network, &cfg.loss, &cfg.augment, &ts, &mut sink)?;
            println!(
                "holdout: best epoch {} val_loss {:.6} val_iou {:.6}",
                run.checkpoint.epoch, run.checkpoint.best_val_loss, run.checkpoint.best_val_iou
            );
            Ok(())
        }
        (Some(folds), chosen) => {
            let manifest = dataio::make_folds(&records, folds.k, cfg.fold_seed())?;
            manifest.save(&out_dir.join("folds.tsv"))?;
            let targets: Vec<usize> = match chosen {
                Some(f) => vec![f],
                None => (0..folds.k).collect(),
            };
            for f in targets {
                let mut sink = TrainSink::to_dir(&out_dir, format!("fold{f}"));
                let run = trainer::train_fold(
                    &records, &manifest, f, &cfg.network, &cfg.loss, &cfg.augment, &ts, &mut sink,
                )?;
                println!(
                    "fold {f}: best epoch {} val_loss {:.6} val_iou {:.6}",
                    run.checkpoint.epoch, run.checkpoint.best_val_loss, run.checkpoint.best_val_iou
                );
            }
            Ok(())
        }
    }
}

fn png_stems_sorted(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("png"))
            .unwrap_or(false);
        if path.is_file() && is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn cmd_predict(
    config_path: &Path,
    checkpoints: &[PathBuf],
    images_dir: &Path,
    out_dir: &Path,
    prob_maps: bool,
) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    if checkpoints.is_empty() {
        return Err(Error::Config("at least one --checkpoint is required".into()));
    }
    // Validate compatibility before writing anything.
    for path in checkpoints {
        let record = CheckpointRecord::load(path)?;
        if record.network != cfg.network {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with a different network configuration",
                path.display()
            )));
        }
    }
    let bundle = EnsembleBundle::from_checkpoints(checkpoints)?;
    let images = png_stems_sorted(images_dir)?;
    if images.is_empty() {
        return Err(Error::Dataset {
            path: images_dir.into(),
            reason: "no PNG images found".into(),
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (stem, path) in images {
        let image = dataio::load_image_rgb(&path)?;
        let prob = bundle.ensemble_predict(&image)?;
        let mask = ensemble::binarize(&prob, BINARIZE_THRESHOLD);
        ensemble::write_mask_png(&out_dir.join(format!("{stem}.png")), &mask)?;
        if prob_maps {
            ensemble::write_probability_png(&out_dir.join(format!("{stem}_prob.png")), &prob)?;
        }
    }
    Ok(())
}

/// Loads aligned prediction/ground-truth mask directories, erroring with the
/// full list of unmatched ids.
fn load_mask_pairs(
    pred_dir: &Path,
    gt_dir: &Path,
) -> Result<(Vec<String>, Vec<ndarray::Array2<u8>>, Vec<ndarray::Array2<u8>>)> {
    let preds: BTreeMap<String, PathBuf> = png_stems_sorted(pred_dir)?.into_iter().collect();
    let gts: BTreeMap<String, PathBuf> = png_stems_sorted(gt_dir)?.into_iter().collect();
    let missing_gt: Vec<&String> = preds.keys().filter(|k| !gts.contains_key(*k)).collect();
    let missing_pred: Vec<&String> = gts.keys().filter(|k| !preds.contains_key(*k)).collect();
    if !missing_gt.is_empty() || !missing_pred.is_empty() {
        let mut parts = Vec::new();
        if !missing_gt.is_empty() {
            parts.push(format!(
                "predictions without ground truth: {}",
                missing_gt.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ));
        }
        if !missing_pred.is_empty() {
            parts.push(format!(
                "ground truths without prediction: {}",
                missing_pred.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ));
        }
        return Err(Error::Invalid(parts.join("; ")));
    }
    if preds.is_empty() {
        return Err(Error::Invalid("no mask pairs to evaluate".into()));
    }
    let mut ids = Vec::new();
    let mut pred_masks = Vec::new();
    let mut gt_masks = Vec::new();
    for (id, pred_path) in preds {
        let gt_path = &gts[&id];
        pred_masks.push(dataio::load_mask(&pred_path)?);
        gt_masks.push(dataio::load_mask(gt_path)?);
        ids.push(id);
    }
    Ok((ids, pred_masks, gt_masks))
}

/// Library-level evaluation used by the command; returns the report.
pub fn evaluate_directories(
    pred_dir: &Path,
    gt_dir: &Path,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<MetricsReport> {
    let (ids, preds, gts) = load_mask_pairs(pred_dir, gt_dir)?;
    let report = build_report(&ids, &preds, &gts, &cfg.categories)?;
    write_report_csvs(&report, out_dir)?;
    write_plots_from_rows(&[("run".to_string(), per_image_rows(&report))], out_dir)?;
    Ok(report)
}

pub fn cmd_evaluate(pred_dir: &Path, gt_dir: &Path, config_path: &Path, out_dir: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let report = evaluate_directories(pred_dir, gt_dir, &cfg, out_dir)?;
    let d = &report.data_based;
    println!(
        "{:.2} {:.2} {:.2} {:.2}",
        100.0 * d.precision,
        100.0 * d.recall,
        100.0 * d.dsc,
        100.0 * d.iou
    );
    Ok(())
}

pub fn cmd_report(csvs: &[PathBuf], out_dir: &Path) -> Result<()> {
    if csvs.is_empty() {
        return Err(Error::Invalid("no CSV inputs given".into()));
    }
    let mut runs = Vec::with_capacity(csvs.len());
    for path in csvs {
        let label = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("run")
            .to_string();
        let label = if csvs.len() > 1 {
            // Disambiguate same-named files from different directories.
            let mut label = label;
            while runs.iter().any(|(l, _)| *l == label) {
                label.push('_');
            }
            label
        } else {
            label
        };
        runs.push((label, read_per_image_csv(path)?));
    }
    write_plots_from_rows(&runs, out_dir)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_errors_name_the_missing_path() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        fs::create_dir_all(&images).unwrap();
        let config_path = dir.path().join("cfg.toml");
        fs::write(
            &config_path,
            format!(
                "version = 1\n[dataset]\nimages_dir = '{}'\nmasks_dir = '{}'\n[output]\ndir = '{}'\n",
                images.display(),
                dir.path().join("nonexistent_masks").display(),
                dir.path().join("out").display()
            ),
        )
        .unwrap();
        let err = cmd_train(&config_path, None, None).unwrap_err().to_string();
        assert!(err.contains("nonexistent_masks"), "{err}");
    }

    #[test]
    fn evaluate_identity_corpus_scores_hundred() {
        let dir = tempfile::tempdir().unwrap();
        let masks = dir.path().join("masks");
        fs::create_dir_all(&masks).unwrap();
        for (i, size) in [(0, 20u32), (1, 24)] {
            let img = image::GrayImage::from_fn(size, size, |x, y| {
                image::Luma([if x > size / 3 && y > size / 3 && x < 2 * size / 3 { 255 } else { 0 }])
            });
            img.save(masks.join(format!("m{i}.png"))).unwrap();
        }
        let config_path = dir.path().join("cfg.toml");
        fs::write(&config_path, "version = 1\n").unwrap();
        let out = dir.path().join("out");
        cmd_evaluate(&masks, &masks, &config_path, &out).unwrap();
        let report_csv = out.join("per_image.csv");
        assert!(report_csv.exists());
        let rows = read_per_image_csv(&report_csv).unwrap();
        assert!(rows.iter().all(|r| r.dsc == 1.0 && r.iou == 1.0));
    }

    #[test]
    fn evaluate_errors_list_mismatched_ids() {
        let dir = tempfile::tempdir().unwrap();
        let preds = dir.path().join("preds");
        let gts = dir.path().join("gts");
        fs::create_dir_all(&preds).unwrap();
        fs::create_dir_all(&gts).unwrap();
        let img = image::GrayImage::new(8, 8);
        img.save(preds.join("only_pred.png")).unwrap();
        img.save(gts.join("only_gt.png")).unwrap();
        let config_path = dir.path().join("cfg.toml");
        fs::write(&config_path, "version = 1\n").unwrap();
        let err = cmd_evaluate(&preds, &gts, &config_path, &dir.path().join("out"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("only_pred") && err.contains("only_gt"), "{err}");
    }

    #[test]
    fn evaluate_empty_directories_fail() {
        let dir = tempfile::tempdir().unwrap();
        let preds = dir.path().join("preds");
        let gts = dir.path().join("gts");
        fs::create_dir_all(&preds).unwrap();
        fs::create_dir_all(&gts).unwrap();
        let config_path = dir.path().join("cfg.toml");
        fs::write(&config_path, "version = 1\n").unwrap();
        assert!(cmd_evaluate(&preds, &gts, &config_path, &dir.path().join("out")).is_err());
    }
}
