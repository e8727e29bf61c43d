//! Report persistence: per-image and aggregate CSVs plus the SVG plot suite,
//! and the CSV reader used to regenerate plots from stored results.

use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, PFOM_SENTINEL};
use crate::plots;
use std::fs;
use std::path::{Path, PathBuf};

pub const PER_IMAGE_CSV: &str = "per_image.csv";
pub const AGGREGATES_CSV: &str = "aggregates.csv";

/// One row of the per-image CSV.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PerImageRow {
    pub id: String,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub dsc: f64,
    pub iou: f64,
    pub pfom: f64,
    pub category: usize,
}

pub fn per_image_rows(report: &MetricsReport) -> Vec<PerImageRow> {
    report
        .per_image
        .iter()
        .map(|p| PerImageRow {
            id: p.id.clone(),
            tp: p.counts.tp,
            fp: p.counts.fp,
            tn: p.counts.tn,
            fn_: p.counts.fn_,
            precision: p.metrics.precision,
            recall: p.metrics.recall,
            dsc: p.metrics.dsc,
            iou: p.metrics.iou,
            pfom: p.pfom,
            category: p.category,
        })
        .collect()
}

/// Writes `per_image.csv` and `aggregates.csv`, returning their paths.
pub fn write_report_csvs(report: &MetricsReport, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let per_image_path = out_dir.join(PER_IMAGE_CSV);
    let mut w = csv::Writer::from_path(&per_image_path)
        .map_err(|e| Error::Invalid(format!("cannot write {}: {e}", per_image_path.display())))?;
    for row in per_image_rows(report) {
        w.serialize(row)
            .map_err(|e| Error::Invalid(format!("cannot write per-image row: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(&per_image_path, e))?;

    let aggregates_path = out_dir.join(AGGREGATES_CSV);
    let mut w = csv::Writer::from_path(&aggregates_path)
        .map_err(|e| Error::Invalid(format!("cannot write {}: {e}", aggregates_path.display())))?;
    w.write_record(["scope", "family", "n", "precision", "recall", "dsc", "iou", "pfom_mean"])
        .map_err(|e| Error::Invalid(format!("cannot write aggregates: {e}")))?;
    let n = report.per_image.len();
    let pfom_mean: f64 =
        report.per_image.iter().map(|p| p.pfom).sum::<f64>() / n.max(1) as f64;
    let mut write = |scope: &str, family: &str, n: usize, m: Option<&crate::metrics::MetricFour>, pf: Option<f64>| {
        let blank = String::new();
        let f = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let record = [
            scope.to_string(),
            family.to_string(),
            n.to_string(),
            m.map(|m| format!("{:.6}", m.precision)).unwrap_or_else(|| blank.clone()),
            m.map(|m| format!("{:.6}", m.recall)).unwrap_or_else(|| blank.clone()),
            m.map(|m| format!("{:.6}", m.dsc)).unwrap_or_else(|| blank.clone()),
            m.map(|m| format!("{:.6}", m.iou)).unwrap_or_else(|| blank.clone()),
            f(pf),
        ];
        w.write_record(&record)
            .map_err(|e| Error::Invalid(format!("cannot write aggregates: {e}")))
    };
    write("all", "data_based", n, Some(&report.data_based), Some(pfom_mean))?;
    write("all", "image_based", n, Some(&report.image_based), Some(pfom_mean))?;
    for cat in &report.per_category {
        let scope = format!("category_{}", cat.category);
        let image_mean = if cat.image_scores.is_empty() {
            None
        } else {
            let k = cat.image_scores.len() as f64;
            Some(crate::metrics::MetricFour {
                precision: cat.image_scores.iter().map(|m| m.precision).sum::<f64>() / k,
                recall: cat.image_scores.iter().map(|m| m.recall).sum::<f64>() / k,
                dsc: cat.image_scores.iter().map(|m| m.dsc).sum::<f64>() / k,
                iou: cat.image_scores.iter().map(|m| m.iou).sum::<f64>() / k,
            })
        };
        write(&scope, "data_based", cat.n, cat.data_based.as_ref(), cat.pfom_mean)?;
        write(&scope, "image_based", cat.n, image_mean.as_ref(), cat.pfom_mean)?;
    }
    drop(write);
    w.flush().map_err(|e| Error::io(&aggregates_path, e))?;
    Ok((per_image_path, aggregates_path))
}

/// Reads a per-image CSV back, naming the offending row and column on errors.
pub fn read_per_image_csv(path: &Path) -> Result<Vec<PerImageRow>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?
        .clone();
    let expected = ["id", "tp", "fp", "tn", "fn", "precision", "recall", "dsc", "iou", "pfom", "category"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Invalid(format!(
            "{}: unexpected header {:?}",
            path.display(),
            headers
        )));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let record = record
            .map_err(|e| Error::Invalid(format!("{}: row {line}: {e}", path.display())))?;
        let field = |idx: usize, name: &str| -> Result<String> {
            record
                .get(idx)
                .map(str::to_string)
                .ok_or_else(|| Error::Invalid(format!(
                    "{}: row {line}: missing column `{name}`",
                    path.display()
                )))
        };
        fn parse<T: std::str::FromStr>(path: &Path, line: usize, name: &str, s: &str) -> Result<T> {
            s.parse().map_err(|_| {
                Error::Invalid(format!(
                    "{}: row {line}, column `{name}`: cannot parse `{s}`",
                    path.display()
                ))
            })
        }
        rows.push(PerImageRow {
            id: field(0, "id")?,
            tp: parse(path, line, "tp", &field(1, "tp")?)?,
            fp: parse(path, line, "fp", &field(2, "fp")?)?,
            tn: parse(path, line, "tn", &field(3, "tn")?)?,
            fn_: parse(path, line, "fn", &field(4, "fn")?)?,
            precision: parse(path, line, "precision", &field(5, "precision")?)?,
            recall: parse(path, line, "recall", &field(6, "recall")?)?,
            dsc: parse(path, line, "dsc", &field(7, "dsc")?)?,
            iou: parse(path, line, "iou", &field(8, "iou")?)?,
            pfom: parse(path, line, "pfom", &field(9, "pfom")?)?,
            category: parse(path, line, "category", &field(10, "category")?)?,
        });
    }
    Ok(rows)
}

fn num_categories(rows: &[PerImageRow]) -> usize {
    rows.iter().map(|r| r.category).max().unwrap_or(1).max(10)
}

/// Per-category data-based DSC computed from stored counts; category 1 is
/// excluded (it has no foreground pixels by construction).
fn category_data_dsc(rows: &[PerImageRow], categories: usize) -> Vec<Option<f64>> {
    (1..=categories)
        .map(|cat| {
            if cat == 1 {
                return None;
            }
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            let mut seen = false;
            for r in rows.iter().filter(|r| r.category == cat) {
                tp += r.tp;
                fp += r.fp;
                fn_ += r.fn_;
                seen = true;
            }
            if !seen {
                return None;
            }
            let den = 2 * tp + fp + fn_;
            Some(if den == 0 { 1.0 } else { 2.0 * tp as f64 / den as f64 })
        })
        .collect()
}

fn category_pfom_mean(rows: &[PerImageRow], categories: usize) -> Vec<Option<f64>> {
    (1..=categories)
        .map(|cat| {
            let scores: Vec<f64> = rows
                .iter()
                .filter(|r| r.category == cat)
                .map(|r| r.pfom)
                .collect();
            if scores.is_empty() {
                None
            } else {
                Some(scores.iter().sum::<f64>() / scores.len() as f64)
            }
        })
        .collect()
}

/// Emits the plot suite for one or more labeled runs. Per-run plots carry the
/// run label as a filename suffix when more than one run is given; the
/// category-comparison charts overlay all runs.
pub fn write_plots_from_rows(
    runs: &[(String, Vec<PerImageRow>)],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(Error::Invalid("no runs to plot".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let categories = runs.iter().map(|(_, rows)| num_categories(rows)).max().unwrap();
    let category_labels: Vec<String> = (1..=categories).map(|c| c.to_string()).collect();
    let mut written = Vec::new();
    let multi = runs.len() > 1;

    let mut save = |name: String, content: String| -> Result<PathBuf> {
        let path = out_dir.join(name);
        fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        written.push(path.clone());
        Ok(path)
    };

    for (label, rows) in runs {
        let suffix = if multi { format!("_{}", sanitize(label)) } else { String::new() };

        // Image-based metric distributions per category.
        let metric =
            |f: fn(&PerImageRow) -> f64| -> Vec<(String, Vec<f64>)> {
                (1..=categories)
                    .map(|cat| {
                        (
                            cat.to_string(),
                            rows.iter().filter(|r| r.category == cat).map(f).collect(),
                        )
                    })
                    .collect()
            };
        let panels = vec![
            ("precision".to_string(), metric(|r| r.precision)),
            ("recall".to_string(), metric(|r| r.recall)),
            ("dsc".to_string(), metric(|r| r.dsc)),
            ("iou".to_string(), metric(|r| r.iou)),
        ];
        save(
            format!("boxplot_image_metrics{suffix}.svg"),
            plots::boxplot_panels_svg(
                &format!("Image-based metrics per category ({label})"),
                &panels,
            ),
        )?;

        // Data-based DSC pie over categories 2 and up.
        let dsc = category_data_dsc(rows, categories);
        let slices: Vec<(String, f64)> = dsc
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (format!("category {}", i + 1), v * 100.0)))
            .collect();
        save(
            format!("pie_data_dsc{suffix}.svg"),
            plots::pie_svg(&format!("Data-based DSC (%) per category ({label})"), &slices),
        )?;

        // False-positive pixel counts where the ground truth is empty.
        let fp_counts: Vec<f64> = rows
            .iter()
            .filter(|r| r.category == 1)
            .map(|r| r.fp as f64)
            .collect();
        save(
            format!("category1_fp_boxplot{suffix}.svg"),
            plots::boxplot_panels_svg(
                &format!("Category 1 false-positive pixel counts ({label})"),
                &[("fp pixels".to_string(), vec![("category 1".to_string(), fp_counts)])],
            ),
        )?;
    }

    // Cross-run comparison lines.
    let dsc_series: Vec<(String, Vec<Option<f64>>)> = runs
        .iter()
        .map(|(label, rows)| (label.clone(), category_data_dsc(rows, categories)))
        .collect();
    save(
        "comparison_dsc.svg".to_string(),
        plots::multi_line_svg("Data-based DSC per category", &category_labels, &dsc_series, "dsc"),
    )?;
    let pfom_series: Vec<(String, Vec<Option<f64>>)> = runs
        .iter()
        .map(|(label, rows)| (label.clone(), category_pfom_mean(rows, categories)))
        .collect();
    save(
        "comparison_pfom.svg".to_string(),
        plots::multi_line_svg(
            &format!("Mean PFOM per category (empty-boundary sentinel = {PFOM_SENTINEL})"),
            &category_labels,
            &pfom_series,
            "pfom",
        ),
    )?;
    Ok(written)
}

/// The plot suite for a freshly computed report.
pub fn write_report_plots(report: &MetricsReport, out_dir: &Path, label: &str) -> Result<Vec<PathBuf>> {
    write_plots_from_rows(&[(label.to_string(), per_image_rows(report))], out_dir)
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
