//! Dataset ingestion, preprocessing, and deterministic k-fold splitting.

use crate::attention::FeatureMap;
use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

/// One dataset unit: RGB image plus its binary ground-truth mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    /// HxWx3, 0-255.
    pub image: Array3<u8>,
    /// HxW, strictly {0, 1}.
    pub mask: Array2<u8>,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image.dim();
        if c != 3 {
            return Err(Error::Invalid(format!("sample {}: image must be RGB", self.id)));
        }
        if self.mask.dim() != (h, w) {
            return Err(Error::Invalid(format!(
                "sample {}: mask {:?} does not match image {h}x{w}",
                self.id,
                self.mask.dim()
            )));
        }
        if !self.mask.iter().all(|&v| v <= 1) {
            return Err(Error::Invalid(format!("sample {}: mask is not binary", self.id)));
        }
        Ok(())
    }
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("png"))
            .unwrap_or(false);
        if path.is_file() && is_png {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Dataset {
                    path: path.clone(),
                    reason: "file stem is not valid utf-8".into(),
                })?
                .to_string();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_image_rgb(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Dataset { path: path.into(), reason: e.to_string() })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<u8>::zeros((h as usize, w as usize, 3));
    for (x, y, pixel) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[y as usize, x as usize, ch]] = pixel.0[ch];
        }
    }
    Ok(out)
}

/// Loads a grayscale mask and binarizes at a threshold of 128.
pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Dataset { path: path.into(), reason: e.to_string() })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = u8::from(pixel.0[0] >= 128);
    }
    Ok(out)
}

/// Pairs same-named PNG images and masks, sorted by id.
pub fn load_dataset(images_dir: &Path, masks_dir: &Path) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::new();
    for (id, image_path) in png_stems(images_dir)? {
        let mask_path = masks_dir.join(format!("{id}.png"));
        if !mask_path.is_file() {
            return Err(Error::Dataset {
                path: mask_path,
                reason: format!("missing mask for image `{id}`"),
            });
        }
        let image = load_image_rgb(&image_path)?;
        let mask = load_mask(&mask_path)?;
        let record = SampleRecord { id, image, mask };
        if let Err(e) = record.validate() {
            return Err(Error::Dataset { path: image_path, reason: e.to_string() });
        }
        records.push(record);
    }
    Ok(records)
}

/// Channel statistics of the backbone's pretraining corpus, on the 0-1 scale.
pub const CHANNEL_MEANS: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STDS: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSettings {
    pub means: [f64; 3],
    pub stds: [f64; 3],
}

impl Default for PreprocessSettings {
    fn default() -> Self {
        PreprocessSettings { means: CHANNEL_MEANS, stds: CHANNEL_STDS }
    }
}

impl PreprocessSettings {
    pub fn validate(&self) -> Result<()> {
        if self.stds.iter().any(|&s| s == 0.0) {
            return Err(Error::Config("channel std of zero is degenerate".into()));
        }
        Ok(())
    }
}

/// Standardizes the image per channel and normalizes the mask to {0.0, 1.0}.
pub fn preprocess(s: &SampleRecord, settings: &PreprocessSettings) -> Result<(FeatureMap, Array2<f64>)> {
    settings.validate()?;
    s.validate()?;
    let (h, w, _) = s.image.dim();
    let mut image = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = s.image[[y, x, c]] as f64 / 255.0;
                image[[y, x, c]] = (v - settings.means[c]) / settings.stds[c];
            }
        }
    }
    let mask = s.mask.mapv(|v| v as f64);
    Ok((FeatureMap::new(image)?, mask))
}

/// Deterministic assignment of samples to k cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldManifest {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldManifest {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    pub fn ids_in_fold(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn validate(&self, records: &[SampleRecord]) -> Result<()> {
        if self.assignment.len() != records.len() {
            return Err(Error::Invalid(format!(
                "manifest covers {} samples, dataset has {}",
                self.assignment.len(),
                records.len()
            )));
        }
        for r in records {
            match self.assignment.get(&r.id) {
                None => {
                    return Err(Error::Invalid(format!("sample {} missing from manifest", r.id)))
                }
                Some(&f) if f >= self.k => {
                    return Err(Error::Invalid(format!("sample {} assigned to fold {f} >= k", r.id)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Plain-text table: a header recording k and seed, then one
    /// `sample_id<TAB>fold` row per sample.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("k={}\tseed={}\n", self.k, self.seed);
        for (id, fold) in &self.assignment {
            out.push_str(&format!("{id}\t{fold}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Invalid(format!("{}: empty manifest", path.display())))?;
        let parse_header = || -> Option<(usize, u64)> {
            let mut k = None;
            let mut seed = None;
            for field in header.split('\t') {
                let (key, value) = field.split_once('=')?;
                match key {
                    "k" => k = value.parse().ok(),
                    "seed" => seed = value.parse().ok(),
                    _ => return None,
                }
            }
            Some((k?, seed?))
        };
        let (k, seed) = parse_header().ok_or_else(|| {
            Error::Invalid(format!("{}: bad manifest header `{header}`", path.display()))
        })?;
        let mut assignment = BTreeMap::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, fold) = line.split_once('\t').ok_or_else(|| {
                Error::Invalid(format!("{}: bad row {} `{line}`", path.display(), lineno + 2))
            })?;
            let fold: usize = fold.parse().map_err(|_| {
                Error::Invalid(format!("{}: bad fold index on row {}", path.display(), lineno + 2))
            })?;
            if assignment.insert(id.to_string(), fold).is_some() {
                return Err(Error::Invalid(format!("{}: duplicate id {id}", path.display())));
            }
        }
        Ok(FoldManifest { k, seed, assignment })
    }
}

/// Shuffled round-robin split into k folds; sizes differ by at most one.
pub fn make_folds(records: &[SampleRecord], k: usize, seed: u64) -> Result<FoldManifest> {
    if k < 2 {
        return Err(Error::Invalid("fold count must be at least 2".into()));
    }
    if records.len() < k {
        return Err(Error::Invalid(format!(
            "cannot split {} samples into {k} folds",
            records.len()
        )));
    }
    let mut ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignment = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(FoldManifest { k, seed, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn synthetic_record(id: &str, h: usize, w: usize, fill: u8) -> SampleRecord {
        let image = Array3::from_elem((h, w, 3), fill);
        let mut mask = Array2::<u8>::zeros((h, w));
        for y in h / 4..3 * h / 4 {
            for x in w / 4..3 * w / 4 {
                mask[[y, x]] = 1;
            }
        }
        SampleRecord { id: id.into(), image, mask }
    }

    fn records(n: usize) -> Vec<SampleRecord> {
        (0..n)
            .map(|i| synthetic_record(&format!("img{i:03}"), 8, 8, 100))
            .collect()
    }

    #[test]
    fn preprocess_centers_channel_means() {
        let settings = PreprocessSettings::default();
        let mut rec = synthetic_record("a", 4, 4, 0);
        for (c, &m) in settings.means.iter().enumerate() {
            let v = (m * 255.0).round() as u8;
            for y in 0..4 {
                for x in 0..4 {
                    rec.image[[y, x, c]] = v;
                }
            }
        }
        let (fm, mask) = preprocess(&rec, &settings).unwrap();
        // Means are not exactly representable in u8, so allow quantization.
        assert!(fm.values().iter().all(|v| v.abs() < 0.01));
        assert!(mask.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn preprocess_matches_scalar_formula() {
        let settings = PreprocessSettings::default();
        let mut rec = synthetic_record("a", 2, 2, 0);
        rec.image[[0, 0, 0]] = 200;
        rec.image[[1, 1, 2]] = 37;
        let (fm, _) = preprocess(&rec, &settings).unwrap();
        let want = (200.0 / 255.0 - settings.means[0]) / settings.stds[0];
        assert!((fm.values()[[0, 0, 0]] - want).abs() < 1e-6);
        let want = (37.0 / 255.0 - settings.means[2]) / settings.stds[2];
        assert!((fm.values()[[1, 1, 2]] - want).abs() < 1e-6);
    }

    #[test]
    fn zero_std_is_rejected() {
        let settings = PreprocessSettings { stds: [0.0, 1.0, 1.0], ..Default::default() };
        let rec = synthetic_record("a", 2, 2, 10);
        assert!(matches!(preprocess(&rec, &settings), Err(Error::Config(_))));
    }

    #[test]
    fn folds_balance_and_partition() {
        let recs = records(10);
        let m = make_folds(&recs, 5, 1).unwrap();
        m.validate(&recs).unwrap();
        for fold in 0..5 {
            assert_eq!(m.ids_in_fold(fold).len(), 2);
        }

        let recs = records(11);
        let m = make_folds(&recs, 5, 1).unwrap();
        let mut sizes: Vec<usize> = (0..5).map(|f| m.ids_in_fold(f).len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
    }

    #[test]
    fn folds_are_deterministic_per_seed() {
        let recs = records(12);
        assert_eq!(make_folds(&recs, 5, 7).unwrap(), make_folds(&recs, 5, 7).unwrap());
        assert_ne!(
            make_folds(&recs, 5, 7).unwrap().assignment,
            make_folds(&recs, 5, 8).unwrap().assignment
        );
    }

    #[test]
    fn too_many_folds_is_an_error() {
        let recs = records(3);
        assert!(make_folds(&recs, 5, 1).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let recs = records(7);
        let m = make_folds(&recs, 3, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("folds.tsv");
        m.save(&path).unwrap();
        assert_eq!(FoldManifest::load(&path).unwrap(), m);
    }

    #[test]
    fn dataset_loading_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        let masks = dir.path().join("masks");
        fs::create_dir_all(&images).unwrap();
        fs::create_dir_all(&masks).unwrap();

        // Empty directories load to an empty list.
        assert!(load_dataset(&images, &masks).unwrap().is_empty());

        for id in ["b", "a", "c"] {
            let img = image::RgbImage::from_fn(6, 4, |x, y| {
                image::Rgb([x as u8 * 10, y as u8 * 10, 7])
            });
            img.save(images.join(format!("{id}.png"))).unwrap();
            let mask = image::GrayImage::from_fn(6, 4, |x, _| {
                image::Luma([if x < 3 { 0u8 } else { 255u8 }])
            });
            mask.save(masks.join(format!("{id}.png"))).unwrap();
        }
        let records = load_dataset(&images, &masks).unwrap();
        assert_eq!(
            records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
            vec!["a", "b", "c"]
        );
        // 0/255 mask loads as exactly {0,1}.
        let values: std::collections::BTreeSet<u8> =
            records[0].mask.iter().cloned().collect();
        assert_eq!(values, [0u8, 1u8].into_iter().collect());
        assert_eq!(records[0].image.dim(), (4, 6, 3));

        // A missing mask is a named per-file error.
        let img = image::RgbImage::new(4, 4);
        img.save(images.join("orphan.png")).unwrap();
        match load_dataset(&images, &masks) {
            Err(Error::Dataset { path, .. }) => {
                assert!(path.to_string_lossy().contains("orphan"))
            }
            other => panic!("expected a dataset error, got {other:?}"),
        }
    }
}
