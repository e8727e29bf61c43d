//! Ensemble inference: average the probability maps of the fold models and
//! binarize at 0.5; single-model paths share the same machinery.

use crate::dataio::{preprocess, PreprocessSettings, SampleRecord};
use crate::error::{Error, Result};
use crate::network::{image_to_batch, FusegNet};
use crate::nn::{self, Mode};
use crate::trainer::CheckpointRecord;
use ndarray::{Array2, Array3, Ix4};
use std::path::Path;

pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// Standardizes a raw RGB image and runs one model, producing an HxW
/// probability map. The spatial size must be a multiple of 32; no implicit
/// resizing happens.
pub fn predict(model: &FusegNet, image: &Array3<u8>) -> Result<Array2<f64>> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {c} channels")));
    }
    let record = SampleRecord {
        id: String::new(),
        image: image.clone(),
        mask: Array2::<u8>::zeros((h, w)),
    };
    let (standardized, _) = preprocess(&record, &PreprocessSettings::default())?;
    let x = image_to_batch(&standardized);
    let out = nn::no_grad(|| model.forward_t(&x, Mode::Eval))?;
    let d = out.to_data().into_dimensionality::<Ix4>().unwrap();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| d[[0, 0, y, x]]))
}

/// The fold models of one cross-validated training, plus their shared
/// network configuration.
pub struct EnsembleBundle {
    members: Vec<FusegNet>,
}

impl EnsembleBundle {
    pub fn new(members: Vec<FusegNet>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Invalid("an ensemble needs at least one member".into()));
        }
        let reference = members[0].config().clone();
        for (i, m) in members.iter().enumerate() {
            if *m.config() != reference {
                return Err(Error::Config(format!(
                    "ensemble member {i} was built with a different network configuration"
                )));
            }
        }
        Ok(EnsembleBundle { members })
    }

    /// Loads and validates checkpoints, restoring each member model.
    pub fn from_checkpoints(paths: &[impl AsRef<Path>]) -> Result<Self> {
        let mut members = Vec::with_capacity(paths.len());
        for path in paths {
            let record = CheckpointRecord::load(path.as_ref())?;
            members.push(record.instantiate()?);
        }
        EnsembleBundle::new(members)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[FusegNet] {
        &self.members
    }

    /// Pixelwise arithmetic mean of the members' probability maps.
    pub fn ensemble_predict(&self, image: &Array3<u8>) -> Result<Array2<f64>> {
        ensemble_mean(&self.members, image)
    }
}

pub fn ensemble_mean(members: &[FusegNet], image: &Array3<u8>) -> Result<Array2<f64>> {
    if members.is_empty() {
        return Err(Error::Invalid("an ensemble needs at least one member".into()));
    }
    let mut acc: Option<Array2<f64>> = None;
    for model in members {
        let map = predict(model, image)?;
        match acc.as_mut() {
            None => acc = Some(map),
            Some(sum) => {
                if sum.dim() != map.dim() {
                    return Err(Error::Shape(
                        "ensemble members produced differently shaped outputs".into(),
                    ));
                }
                *sum += &map;
            }
        }
    }
    let mut mean = acc.unwrap();
    mean.mapv_inplace(|v| v / members.len() as f64);
    Ok(mean)
}

/// Thresholds a probability map; values greater than or equal to the
/// threshold map to 1.
pub fn binarize(prob: &Array2<f64>, threshold: f64) -> Array2<u8> {
    prob.mapv(|v| u8::from(v >= threshold))
}

/// Writes a binary mask as an 8-bit grayscale PNG with foreground 255.
pub fn write_mask_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([mask[[y as usize, x as usize]] * 255])
    });
    img.save(path)
        .map_err(|e| Error::Invalid(format!("cannot write {}: {e}", path.display())))
}

/// Writes a probability map as a 16-bit grayscale PNG scaled by 65535.
pub fn write_probability_png(path: &Path, prob: &Array2<f64>) -> Result<()> {
    let (h, w) = prob.dim();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(
        w as u32,
        h as u32,
        |x, y| {
            let v = prob[[y as usize, x as usize]].clamp(0.0, 1.0);
            image::Luma([(v * 65535.0).round() as u16])
        },
    );
    img.save(path)
        .map_err(|e| Error::Invalid(format!("cannot write {}: {e}", path.display())))
}
