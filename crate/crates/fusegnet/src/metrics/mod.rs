//! Two-family evaluation protocol: data-based and image-based
//! precision/recall/DSC/IoU, boundary accuracy via Pratt's figure of merit,
//! ground-truth-area category binning, and the category-1 false-positive
//! intensity count.

pub mod canny;

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use canny::canny_boundary;

pub const PFOM_BETA: f64 = 1.0 / 9.0;
/// Score reported when at least one boundary set is empty (the miss distance
/// would otherwise be infinite).
pub const PFOM_SENTINEL: f64 = 2.0;

/// Per-image pixel tallies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

fn check_binary(name: &str, mask: &Array2<u8>) -> Result<()> {
    if !mask.iter().all(|&v| v <= 1) {
        return Err(Error::Invalid(format!("{name} mask is not binary")));
    }
    Ok(())
}

pub fn confusion_counts(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<ConfusionCounts> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.dim(),
            gt.dim()
        )));
    }
    check_binary("prediction", pred)?;
    check_binary("ground truth", gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fn_ += 1,
            _ => unreachable!(),
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricFour {
    pub precision: f64,
    pub recall: f64,
    pub dsc: f64,
    pub iou: f64,
}

fn ratio(num: u64, den: u64, empty_agreement: bool) -> f64 {
    if den == 0 {
        // An undefined ratio scores 1 only when prediction and truth agree on
        // emptiness; a one-sided empty set scores 0.
        if empty_agreement {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

/// Per-image ratios of one confusion record.
pub fn image_metrics(c: &ConfusionCounts) -> MetricFour {
    MetricFour {
        precision: ratio(c.tp, c.tp + c.fp, c.fn_ == 0),
        recall: ratio(c.tp, c.tp + c.fn_, c.fp == 0),
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, true),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_, true),
    }
}

/// Sums counts over all images first, then forms each ratio.
pub fn data_based_metrics(counts: &[ConfusionCounts]) -> Result<MetricFour> {
    if counts.is_empty() {
        return Err(Error::Invalid("no confusion counts to aggregate".into()));
    }
    let mut total = ConfusionCounts::default();
    for c in counts {
        total.add(c);
    }
    Ok(image_metrics(&total))
}

/// Forms each per-image ratio, then averages over images.
pub fn image_based_metrics(counts: &[ConfusionCounts]) -> Result<MetricFour> {
    if counts.is_empty() {
        return Err(Error::Invalid("no confusion counts to aggregate".into()));
    }
    let n = counts.len() as f64;
    let mut acc = MetricFour::default();
    for c in counts {
        let m = image_metrics(c);
        acc.precision += m.precision;
        acc.recall += m.recall;
        acc.dsc += m.dsc;
        acc.iou += m.iou;
    }
    Ok(MetricFour {
        precision: acc.precision / n,
        recall: acc.recall / n,
        dsc: acc.dsc / n,
        iou: acc.iou / n,
    })
}

/// Canny edge pixels of a binary mask; empty for constant masks.
pub fn extract_boundary(mask: &Array2<u8>) -> Result<Vec<(usize, usize)>> {
    check_binary("boundary", mask)?;
    Ok(canny_boundary(mask))
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn dt1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let sq = |i: usize| f[i] + (i * i) as f64;
        let mut s = (sq(q) - sq(v[k])) / (2.0 * (q - v[k]) as f64);
        while s <= z[k] {
            k -= 1;
            s = (sq(q) - sq(v[k])) / (2.0 * (q - v[k]) as f64);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let diff = q as f64 - v[k] as f64;
        d[q] = diff * diff + f[v[k]];
    }
    d
}

/// Exact squared Euclidean distance to the nearest seed, over an HxW grid.
fn squared_distance_transform(h: usize, w: usize, seeds: &[(usize, usize)]) -> Array2<f64> {
    const FAR: f64 = 1e18;
    let mut grid = Array2::<f64>::from_elem((h, w), FAR);
    for &(y, x) in seeds {
        grid[[y, x]] = 0.0;
    }
    // Columns first, then rows.
    for x in 0..w {
        let col: Vec<f64> = (0..h).map(|y| grid[[y, x]]).collect();
        for (y, v) in dt1d(&col).into_iter().enumerate() {
            grid[[y, x]] = v;
        }
    }
    for y in 0..h {
        let row: Vec<f64> = (0..w).map(|x| grid[[y, x]]).collect();
        for (x, v) in dt1d(&row).into_iter().enumerate() {
            grid[[y, x]] = v;
        }
    }
    grid
}

/// Pratt's figure of merit between two boundary pixel sets. Empty sets make
/// the score undefined, in which case the sentinel 2.0 is returned.
pub fn pfom(gt_boundary: &[(usize, usize)], pred_boundary: &[(usize, usize)], beta: f64) -> f64 {
    assert!(beta > 0.0, "pfom beta must be positive");
    if gt_boundary.is_empty() || pred_boundary.is_empty() {
        return PFOM_SENTINEL;
    }
    let h = gt_boundary
        .iter()
        .chain(pred_boundary)
        .map(|&(y, _)| y)
        .max()
        .unwrap()
        + 1;
    let w = gt_boundary
        .iter()
        .chain(pred_boundary)
        .map(|&(_, x)| x)
        .max()
        .unwrap()
        + 1;
    let dist_sq = squared_distance_transform(h, w, gt_boundary);
    let sum: f64 = pred_boundary
        .iter()
        .map(|&(y, x)| 1.0 / (1.0 + beta * dist_sq[[y, x]]))
        .sum();
    sum / gt_boundary.len().max(pred_boundary.len()) as f64
}

/// %GT-area category ladder: category 1 holds exactly-empty masks, categories
/// 2..=n+1 are right-open percentage intervals below each upper bound, and the
/// last category is closed at 100%.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategorySpec {
    pub upper_bounds: Vec<f64>,
}

impl Default for CategorySpec {
    fn default() -> Self {
        CategorySpec {
            upper_bounds: vec![0.15, 0.3, 0.6, 1.2, 2.5, 5.0, 10.0, 20.0, 40.0],
        }
    }
}

impl CategorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.upper_bounds.is_empty() {
            return Err(Error::Config("category spec needs at least one bound".into()));
        }
        if !self.upper_bounds.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("category bounds must be strictly ascending".into()));
        }
        if self.upper_bounds.iter().any(|&b| b <= 0.0 || b > 100.0) {
            return Err(Error::Config("category bounds must lie in (0, 100]".into()));
        }
        Ok(())
    }

    pub fn num_categories(&self) -> usize {
        self.upper_bounds.len() + 1
    }

    /// Human-readable label of a category under this spec.
    pub fn label(&self, category: usize) -> String {
        if category == 1 {
            return "%GT area 0".into();
        }
        let idx = category - 2;
        if idx == 0 {
            format!("%GT area < {}", self.upper_bounds[0])
        } else if idx < self.upper_bounds.len() {
            format!(
                "%GT area {} - {}",
                self.upper_bounds[idx - 1],
                self.upper_bounds[idx]
            )
        } else {
            format!("%GT area >= {}", self.upper_bounds.last().unwrap())
        }
    }
}

/// Assigns a ground-truth mask to its category (1-based).
pub fn categorize(gt: &Array2<u8>, spec: &CategorySpec) -> usize {
    let fg = gt.iter().filter(|&&v| v == 1).count();
    if fg == 0 {
        return 1;
    }
    let pct = 100.0 * fg as f64 / gt.len() as f64;
    for (i, &bound) in spec.upper_bounds.iter().enumerate() {
        if pct < bound {
            return i + 2;
        }
    }
    spec.num_categories()
}

/// Non-zero pixels of a prediction whose ground truth is empty.
pub fn category1_fp_count(pred: &Array2<u8>) -> u64 {
    pred.iter().filter(|&&v| v == 1).count() as u64
}

#[derive(Debug, Clone)]
pub struct PerImageReport {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: MetricFour,
    pub pfom: f64,
    pub category: usize,
}

#[derive(Debug, Clone)]
pub struct CategoryReport {
    pub category: usize,
    pub label: String,
    pub n: usize,
    /// Data-based four-tuple over the category's images (absent when empty).
    pub data_based: Option<MetricFour>,
    /// Per-image scores, for distribution plots.
    pub image_scores: Vec<MetricFour>,
    pub pfom_scores: Vec<f64>,
    pub pfom_mean: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub per_image: Vec<PerImageReport>,
    pub data_based: MetricFour,
    pub image_based: MetricFour,
    pub per_category: Vec<CategoryReport>,
    pub category1_fp_counts: Vec<u64>,
    pub spec: CategorySpec,
}

/// Computes every report field from aligned prediction/ground-truth lists.
pub fn build_report(
    ids: &[String],
    preds: &[Array2<u8>],
    gts: &[Array2<u8>],
    spec: &CategorySpec,
) -> Result<MetricsReport> {
    spec.validate()?;
    if ids.len() != preds.len() || ids.len() != gts.len() {
        return Err(Error::Invalid(format!(
            "misaligned inputs: {} ids, {} predictions, {} ground truths",
            ids.len(),
            preds.len(),
            gts.len()
        )));
    }
    if ids.is_empty() {
        return Err(Error::Invalid("cannot build a report from no images".into()));
    }

    let mut per_image = Vec::with_capacity(ids.len());
    let mut category1_fp_counts = Vec::new();
    for ((id, pred), gt) in ids.iter().zip(preds).zip(gts) {
        let counts = confusion_counts(pred, gt)?;
        let category = categorize(gt, spec);
        let gt_boundary = extract_boundary(gt)?;
        let pred_boundary = extract_boundary(pred)?;
        let pfom_score = pfom(&gt_boundary, &pred_boundary, PFOM_BETA);
        if category == 1 {
            category1_fp_counts.push(category1_fp_count(pred));
        }
        per_image.push(PerImageReport {
            id: id.clone(),
            counts,
            metrics: image_metrics(&counts),
            pfom: pfom_score,
            category,
        });
    }

    let all_counts: Vec<ConfusionCounts> = per_image.iter().map(|p| p.counts).collect();
    let data_based = data_based_metrics(&all_counts)?;
    let image_based = image_based_metrics(&all_counts)?;

    let mut per_category = Vec::with_capacity(spec.num_categories());
    for category in 1..=spec.num_categories() {
        let members: Vec<&PerImageReport> =
            per_image.iter().filter(|p| p.category == category).collect();
        let counts: Vec<ConfusionCounts> = members.iter().map(|p| p.counts).collect();
        let pfom_scores: Vec<f64> = members.iter().map(|p| p.pfom).collect();
        per_category.push(CategoryReport {
            category,
            label: spec.label(category),
            n: members.len(),
            data_based: if counts.is_empty() {
                None
            } else {
                Some(data_based_metrics(&counts)?)
            },
            image_scores: members.iter().map(|p| p.metrics).collect(),
            pfom_mean: if pfom_scores.is_empty() {
                None
            } else {
                Some(pfom_scores.iter().sum::<f64>() / pfom_scores.len() as f64)
            },
            pfom_scores,
        });
    }

    Ok(MetricsReport {
        per_image,
        data_based,
        image_based,
        per_category,
        category1_fp_counts,
        spec: spec.clone(),
    })
}
