//! End-to-end command-line workflow: train, predict, evaluate, report.

mod common;

use common::synthetic_dataset;
use fusegnet::dataio::SampleRecord;
use fusegnet::ensemble::{binarize, EnsembleBundle, BINARIZE_THRESHOLD};
use std::fs;
use std::path::Path;
use std::process::Command;

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fusegnet"))
}

fn write_dataset(records: &[SampleRecord], images: &Path, masks: &Path) {
    fs::create_dir_all(images).unwrap();
    fs::create_dir_all(masks).unwrap();
    for rec in records {
        let (h, w, _) = rec.image.dim();
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb([
                rec.image[[y as usize, x as usize, 0]],
                rec.image[[y as usize, x as usize, 1]],
                rec.image[[y as usize, x as usize, 2]],
            ])
        });
        img.save(images.join(format!("{}.png", rec.id))).unwrap();
        let mask = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([rec.mask[[y as usize, x as usize]] * 255])
        });
        mask.save(masks.join(format!("{}.png", rec.id))).unwrap();
    }
}

fn toy_config(dir: &Path, out_dir: &Path) -> std::path::PathBuf {
    let config = format!(
        r#"version = 1
seed = 7

[dataset]
images_dir = '{}'
masks_dir = '{}'

[output]
dir = '{}'

[folds]
k = 2

[network]
encoder = "reduced"
decoder_channels = [48, 32, 24, 16, 8]
input_size = 64

[train]
initial_lr = 0.002
max_epochs = 2

[augment]
overall_p = 0.0
sets = []
"#,
        dir.join("images").display(),
        dir.join("masks").display(),
        out_dir.display()
    );
    let path = dir.join("config.toml");
    fs::write(&path, config).unwrap();
    path
}

#[test]
fn train_predict_evaluate_report_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let records = synthetic_dataset(64);
    write_dataset(&records, &dir.path().join("images"), &dir.path().join("masks"));
    let out_dir = dir.path().join("out");
    let config = toy_config(dir.path(), &out_dir);

    // Train both folds.
    let status = binary()
        .args(["train", "--config"])
        .arg(&config)
        .status()
        .unwrap();
    assert!(status.success());
    for tag in ["fold0", "fold1"] {
        assert!(out_dir.join(format!("{tag}.ckpt")).exists());
        assert!(out_dir.join(format!("{tag}.meta.toml")).exists());
        let log = fs::read_to_string(out_dir.join(format!("{tag}_log.csv"))).unwrap();
        assert_eq!(log.lines().count(), 3, "expected header + 2 epochs");
    }
    assert!(out_dir.join("folds.tsv").exists());

    // Fold index propagates into the sidecar metadata.
    let fold_out = dir.path().join("fold_only");
    let status = binary()
        .args(["train", "--fold", "1", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&fold_out)
        .status()
        .unwrap();
    assert!(status.success());
    let meta = fs::read_to_string(fold_out.join("fold1.meta.toml")).unwrap();
    assert!(meta.contains("fold_index = 1"), "{meta}");

    // Ensemble prediction over both fold checkpoints, with probability maps.
    let pred_dir = dir.path().join("preds");
    let status = binary()
        .args(["predict", "--config"])
        .arg(&config)
        .arg("--checkpoint")
        .arg(out_dir.join("fold0.ckpt"))
        .arg("--checkpoint")
        .arg(out_dir.join("fold1.ckpt"))
        .arg("--images")
        .arg(dir.path().join("images"))
        .arg("--out")
        .arg(&pred_dir)
        .arg("--prob-maps")
        .status()
        .unwrap();
    assert!(status.success());
    for rec in &records {
        assert!(pred_dir.join(format!("{}.png", rec.id)).exists());
        assert!(pred_dir.join(format!("{}_prob.png", rec.id)).exists());
    }

    // CLI output is byte-identical to composing the library calls directly.
    let bundle = EnsembleBundle::from_checkpoints(&[
        out_dir.join("fold0.ckpt"),
        out_dir.join("fold1.ckpt"),
    ])
    .unwrap();
    let lib_dir = dir.path().join("lib_preds");
    fs::create_dir_all(&lib_dir).unwrap();
    for rec in &records {
        let prob = bundle.ensemble_predict(&rec.image).unwrap();
        let mask = binarize(&prob, BINARIZE_THRESHOLD);
        let path = lib_dir.join(format!("{}.png", rec.id));
        fusegnet::ensemble::write_mask_png(&path, &mask).unwrap();
        let cli_bytes = fs::read(pred_dir.join(format!("{}.png", rec.id))).unwrap();
        let lib_bytes = fs::read(&path).unwrap();
        assert_eq!(cli_bytes, lib_bytes, "{} differs between CLI and library", rec.id);
    }

    // Single-checkpoint prediction follows the plain predict path.
    let single_dir = dir.path().join("preds_single");
    let status = binary()
        .args(["predict", "--config"])
        .arg(&config)
        .arg("--checkpoint")
        .arg(out_dir.join("fold0.ckpt"))
        .arg("--images")
        .arg(dir.path().join("images"))
        .arg("--out")
        .arg(&single_dir)
        .status()
        .unwrap();
    assert!(status.success());
    let single_bundle =
        EnsembleBundle::from_checkpoints(&[out_dir.join("fold0.ckpt")]).unwrap();
    let prob = single_bundle.ensemble_predict(&records[0].image).unwrap();
    let expect = binarize(&prob, BINARIZE_THRESHOLD);
    let got = fusegnet::dataio::load_mask(&single_dir.join("s0.png")).unwrap();
    assert_eq!(got, expect);

    // Evaluating ground truth against itself prints a perfect line.
    let eval_dir = dir.path().join("eval_identity");
    let output = binary()
        .args(["evaluate", "--config"])
        .arg(&config)
        .arg("--pred")
        .arg(dir.path().join("masks"))
        .arg("--gt")
        .arg(dir.path().join("masks"))
        .arg("--out")
        .arg(&eval_dir)
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert_eq!(stdout.trim(), "100.00 100.00 100.00 100.00");

    // Report regeneration from the stored CSV is idempotent.
    let report_dir = dir.path().join("report");
    let csv = eval_dir.join("per_image.csv");
    let status = binary()
        .args(["report", "--out"])
        .arg(&report_dir)
        .arg(&csv)
        .status()
        .unwrap();
    assert!(status.success());
    let boxplot = report_dir.join("boxplot_image_metrics.svg");
    let pie = report_dir.join("pie_data_dsc.svg");
    let fp = report_dir.join("category1_fp_boxplot.svg");
    for file in [&boxplot, &pie, &fp] {
        let len = fs::metadata(file).unwrap().len();
        assert!(len > 0, "{} is empty", file.display());
    }
    let before = fs::read(&boxplot).unwrap();
    assert!(binary()
        .args(["report", "--out"])
        .arg(&report_dir)
        .arg(&csv)
        .status()
        .unwrap()
        .success());
    assert_eq!(fs::read(&boxplot).unwrap(), before);
}

#[test]
fn evaluate_two_image_fixture_reproduces_the_family_split() {
    let dir = tempfile::tempdir().unwrap();
    let gts = dir.path().join("gts");
    let preds = dir.path().join("preds");
    fs::create_dir_all(&gts).unwrap();
    fs::create_dir_all(&preds).unwrap();

    // Image 1: 10 foreground pixels, predicted perfectly.
    let gt1 = image::GrayImage::from_fn(32, 32, |x, y| {
        image::Luma([if y == 10 && x < 10 { 255 } else { 0 }])
    });
    gt1.save(gts.join("a.png")).unwrap();
    gt1.save(preds.join("a.png")).unwrap();

    // Image 2: 100 foreground pixels, empty prediction.
    let gt2 = image::GrayImage::from_fn(32, 32, |x, y| {
        image::Luma([if x < 10 && y < 10 { 255 } else { 0 }])
    });
    gt2.save(gts.join("b.png")).unwrap();
    image::GrayImage::new(32, 32).save(preds.join("b.png")).unwrap();

    let config = dir.path().join("config.toml");
    fs::write(&config, "version = 1\n").unwrap();
    let out = dir.path().join("out");
    let output = binary()
        .args(["evaluate", "--config"])
        .arg(&config)
        .arg("--pred")
        .arg(&preds)
        .arg("--gt")
        .arg(&gts)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    // Data-based: P = 10/10, R = 10/110, DSC = 20/120, IoU = 10/110.
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert_eq!(stdout.trim(), "100.00 9.09 16.67 9.09");

    let rows = fusegnet::report::read_per_image_csv(&out.join("per_image.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].dsc, 1.0);
    assert_eq!(rows[1].dsc, 0.0);
    let aggregates = fs::read_to_string(out.join("aggregates.csv")).unwrap();
    let data_row = aggregates
        .lines()
        .find(|l| l.starts_with("all,data_based"))
        .unwrap();
    assert!(data_row.contains("0.166667"), "{data_row}");
    let image_row = aggregates
        .lines()
        .find(|l| l.starts_with("all,image_based"))
        .unwrap();
    assert!(image_row.contains("0.500000"), "{image_row}");
}

#[test]
fn report_with_three_csvs_overlays_three_series() {
    let dir = tempfile::tempdir().unwrap();
    let gts = dir.path().join("gts");
    fs::create_dir_all(&gts).unwrap();
    let gt = image::GrayImage::from_fn(32, 32, |x, y| {
        image::Luma([if x > 8 && y > 8 && x < 24 { 255 } else { 0 }])
    });
    gt.save(gts.join("a.png")).unwrap();
    let config = dir.path().join("config.toml");
    fs::write(&config, "version = 1\n").unwrap();

    // One evaluation reused under three run labels.
    let eval_out = dir.path().join("eval");
    assert!(binary()
        .args(["evaluate", "--config"])
        .arg(&config)
        .arg("--pred")
        .arg(&gts)
        .arg("--gt")
        .arg(&gts)
        .arg("--out")
        .arg(&eval_out)
        .status()
        .unwrap()
        .success());
    let mut csvs = Vec::new();
    for label in ["additive", "max-out", "p-scse"] {
        let path = dir.path().join(format!("{label}.csv"));
        fs::copy(eval_out.join("per_image.csv"), &path).unwrap();
        csvs.push(path);
    }
    let report_dir = dir.path().join("report");
    let mut cmd = binary();
    cmd.args(["report", "--out"]).arg(&report_dir);
    for c in &csvs {
        cmd.arg(c);
    }
    assert!(cmd.status().unwrap().success());
    let svg = fs::read_to_string(report_dir.join("comparison_dsc.svg")).unwrap();
    for label in ["additive", "max-out", "p-scse"] {
        assert!(svg.contains(label), "missing series {label}");
    }
}

#[test]
fn malformed_csv_report_fails_with_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    fs::write(
        &csv,
        "id,tp,fp,tn,fn,precision,recall,dsc,iou,pfom,category\nx,1,1,1,1,0.1,0.2,bad,0.4,1.0,3\n",
    )
    .unwrap();
    let output = binary()
        .args(["report", "--out"])
        .arg(dir.path().join("out"))
        .arg(&csv)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("row 2") && stderr.contains("dsc"), "{stderr}");
}
