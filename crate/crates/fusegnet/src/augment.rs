//! Seeded augmentation pipeline.
//!
//! One gated pass: the whole pipeline fires with `overall_p`; each set is then
//! an independent Bernoulli draw, and a firing set applies exactly one of its
//! transforms chosen uniformly, gated again by that transform's probability.
//! Geometric transforms warp image and mask together (nearest-neighbor for
//! the mask, preserving binarity); photometric transforms touch the image only.

use crate::dataio::SampleRecord;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    HorizontalFlip,
    VerticalFlip,
    /// Uniform zoom about the center, factor in `[1-limit, 1+limit]`.
    Scale { limit: f64 },
    /// Rotation about the center, angle in `[-limit, limit]` degrees.
    Rotate { limit_degrees: f64 },
    /// Translation by a fraction of the image size in `[-limit, limit]`.
    Shift { limit: f64 },
    /// Shift, scale, and rotation combined into a single warp.
    ShiftScaleRotate { shift_limit: f64, scale_limit: f64, rotate_limit: f64 },
    /// Random four-corner perspective jitter.
    Perspective { scale_min: f64, scale_max: f64 },
    /// Additive per-pixel Gaussian noise with variance drawn from the range
    /// (0-255 intensity scale).
    GaussianNoise { var_min: f64, var_max: f64 },
    /// Unsharp-mask sharpening.
    Sharpen { alpha_min: f64, alpha_max: f64, lightness_min: f64, lightness_max: f64 },
    /// Box blur with an odd kernel size drawn from `{3, 5, ..} <= limit`.
    Blur { limit: usize },
    MedianBlur { limit: usize },
    /// Contrast-limited adaptive histogram equalization on the luma channel.
    Clahe { clip_min: f64, clip_max: f64, tiles: usize },
    /// Brightness and contrast jitter, both drawn from `[-limit, limit]`.
    BrightnessContrast { limit: f64 },
    /// Gamma correction with exponent drawn from the range.
    Gamma { min: f64, max: f64 },
    HueSaturation { hue_limit_degrees: f64, sat_limit: f64, val_limit: f64 },
}

impl Transform {
    pub fn name(&self) -> &'static str {
        match self {
            Transform::HorizontalFlip => "horizontal_flip",
            Transform::VerticalFlip => "vertical_flip",
            Transform::Scale { .. } => "scale",
            Transform::Rotate { .. } => "rotate",
            Transform::Shift { .. } => "shift",
            Transform::ShiftScaleRotate { .. } => "shift_scale_rotate",
            Transform::Perspective { .. } => "perspective",
            Transform::GaussianNoise { .. } => "gaussian_noise",
            Transform::Sharpen { .. } => "sharpen",
            Transform::Blur { .. } => "blur",
            Transform::MedianBlur { .. } => "median_blur",
            Transform::Clahe { .. } => "clahe",
            Transform::BrightnessContrast { .. } => "brightness_contrast",
            Transform::Gamma { .. } => "gamma",
            Transform::HueSaturation { .. } => "hue_saturation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    pub transform: Transform,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetSpec {
    pub probability: f64,
    pub transforms: Vec<TransformSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPlan {
    pub overall_p: f64,
    pub sets: Vec<SetSpec>,
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        Self::standard()
    }
}

impl AugmentationPlan {
    /// The full four-set augmentation table. Numeric ranges the table leaves
    /// open take common augmentation-toolkit defaults and are recorded here
    /// verbatim so configurations can pin them.
    pub fn standard() -> Self {
        let t = |transform: Transform, probability: f64| TransformSpec { transform, probability };
        AugmentationPlan {
            overall_p: 0.9,
            sets: vec![
                SetSpec {
                    probability: 0.5,
                    transforms: vec![
                        t(Transform::HorizontalFlip, 0.8),
                        t(Transform::VerticalFlip, 0.4),
                    ],
                },
                SetSpec {
                    probability: 0.9,
                    transforms: vec![
                        t(Transform::Scale { limit: 0.5 }, 1.0),
                        t(Transform::Rotate { limit_degrees: 30.0 }, 1.0),
                        t(Transform::Shift { limit: 0.1 }, 1.0),
                        t(
                            Transform::ShiftScaleRotate {
                                shift_limit: 0.1,
                                scale_limit: 0.5,
                                rotate_limit: 30.0,
                            },
                            1.0,
                        ),
                    ],
                },
                SetSpec {
                    probability: 0.2,
                    transforms: vec![
                        t(Transform::Perspective { scale_min: 0.05, scale_max: 0.1 }, 1.0),
                        t(Transform::GaussianNoise { var_min: 10.0, var_max: 50.0 }, 1.0),
                        t(
                            Transform::Sharpen {
                                alpha_min: 0.2,
                                alpha_max: 0.5,
                                lightness_min: 0.5,
                                lightness_max: 1.0,
                            },
                            1.0,
                        ),
                        t(Transform::Blur { limit: 3 }, 1.0),
                        t(Transform::MedianBlur { limit: 3 }, 1.0),
                    ],
                },
                SetSpec {
                    probability: 0.2,
                    transforms: vec![
                        t(Transform::Clahe { clip_min: 1.0, clip_max: 4.0, tiles: 8 }, 1.0),
                        t(Transform::BrightnessContrast { limit: 0.2 }, 1.0),
                        t(Transform::Gamma { min: 0.8, max: 1.2 }, 1.0),
                        t(
                            Transform::HueSaturation {
                                hue_limit_degrees: 20.0,
                                sat_limit: 0.12,
                                val_limit: 0.08,
                            },
                            1.0,
                        ),
                    ],
                },
            ],
        }
    }

    /// A disabled pipeline (identity).
    pub fn disabled() -> Self {
        AugmentationPlan { overall_p: 0.0, sets: Vec::new() }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !prob_ok(self.overall_p) {
            return Err(crate::Error::Config("overall_p must lie in [0,1]".into()));
        }
        for set in &self.sets {
            if !prob_ok(set.probability) {
                return Err(crate::Error::Config("set probability must lie in [0,1]".into()));
            }
            if set.transforms.is_empty() {
                return Err(crate::Error::Config("augmentation set has no transforms".into()));
            }
            for t in &set.transforms {
                if !prob_ok(t.probability) {
                    return Err(crate::Error::Config(
                        "transform probability must lie in [0,1]".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Record of what an augmentation pass actually did.
#[derive(Debug, Clone, PartialEq)]
pub enum AppliedOp {
    /// Inverse-warp matrix mapping output coordinates to source coordinates.
    Geometric { name: &'static str, matrix: [[f64; 3]; 3] },
    Photometric { name: &'static str },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentTrace {
    pub applied: Vec<AppliedOp>,
}

impl AugmentTrace {
    pub fn is_identity(&self) -> bool {
        self.applied.is_empty()
    }
}

/// Per-sample seed derivation: stable FNV-1a over (seed, id, epoch).
pub fn derive_seed(global_seed: u64, sample_id: &str, epoch: usize) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(PRIME);
    };
    for b in global_seed.to_le_bytes() {
        eat(b);
    }
    for b in sample_id.as_bytes() {
        eat(*b);
    }
    for b in (epoch as u64).to_le_bytes() {
        eat(b);
    }
    h
}

/// Applies the plan; deterministic for a given seed.
pub fn augment(s: &SampleRecord, plan: &AugmentationPlan, seed: u64) -> SampleRecord {
    augment_with_trace(s, plan, seed).0
}

pub fn augment_with_trace(
    s: &SampleRecord,
    plan: &AugmentationPlan,
    seed: u64,
) -> (SampleRecord, AugmentTrace) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = s.clone();
    let mut trace = AugmentTrace::default();
    if !rng.gen_bool(plan.overall_p) {
        return (out, trace);
    }
    for set in &plan.sets {
        if !rng.gen_bool(set.probability) {
            continue;
        }
        let pick = rng.gen_range(0..set.transforms.len());
        let spec = &set.transforms[pick];
        if !rng.gen_bool(spec.probability) {
            continue;
        }
        apply_transform(&mut out, &spec.transform, &mut rng, &mut trace);
    }
    (out, trace)
}

/// Replays the recorded geometric part of a trace on a mask.
pub fn apply_trace_to_mask(mask: &Array2<u8>, trace: &AugmentTrace) -> Array2<u8> {
    let mut out = mask.clone();
    for op in &trace.applied {
        if let AppliedOp::Geometric { matrix, .. } = op {
            out = warp_mask_nearest(&out, matrix);
        }
    }
    out
}

fn apply_transform(
    s: &mut SampleRecord,
    t: &Transform,
    rng: &mut ChaCha8Rng,
    trace: &mut AugmentTrace,
) {
    let (h, w, _) = s.image.dim();
    match t {
        Transform::HorizontalFlip => apply_warp(s, t.name(), hflip_matrix(w), trace),
        Transform::VerticalFlip => apply_warp(s, t.name(), vflip_matrix(h), trace),
        Transform::Scale { limit } => {
            let factor = 1.0 + rng.gen_range(-limit..=*limit);
            apply_warp(s, t.name(), affine_about_center(h, w, 0.0, factor, 0.0, 0.0), trace);
        }
        Transform::Rotate { limit_degrees } => {
            let angle = rng.gen_range(-limit_degrees..=*limit_degrees).to_radians();
            apply_warp(s, t.name(), affine_about_center(h, w, angle, 1.0, 0.0, 0.0), trace);
        }
        Transform::Shift { limit } => {
            let tx = rng.gen_range(-limit..=*limit) * w as f64;
            let ty = rng.gen_range(-limit..=*limit) * h as f64;
            apply_warp(s, t.name(), affine_about_center(h, w, 0.0, 1.0, tx, ty), trace);
        }
        Transform::ShiftScaleRotate { shift_limit, scale_limit, rotate_limit } => {
            let tx = rng.gen_range(-shift_limit..=*shift_limit) * w as f64;
            let ty = rng.gen_range(-shift_limit..=*shift_limit) * h as f64;
            let factor = 1.0 + rng.gen_range(-scale_limit..=*scale_limit);
            let angle = rng.gen_range(-rotate_limit..=*rotate_limit).to_radians();
            apply_warp(s, t.name(), affine_about_center(h, w, angle, factor, tx, ty), trace);
        }
        Transform::Perspective { scale_min, scale_max } => {
            let scale = rng.gen_range(*scale_min..=*scale_max);
            let jitter = scale * h.min(w) as f64;
            let corners = [
                (0.0, 0.0),
                (w as f64 - 1.0, 0.0),
                (w as f64 - 1.0, h as f64 - 1.0),
                (0.0, h as f64 - 1.0),
            ];
            let jittered: Vec<(f64, f64)> = corners
                .iter()
                .map(|&(x, y)| {
                    (
                        x + rng.gen_range(-jitter..=jitter),
                        y + rng.gen_range(-jitter..=jitter),
                    )
                })
                .collect();
            if let Some(m) = homography_from_pairs(&corners, &jittered) {
                apply_warp(s, t.name(), m, trace);
            }
        }
        Transform::GaussianNoise { var_min, var_max } => {
            let sigma = rng.gen_range(*var_min..=*var_max).sqrt();
            let normal = Normal::new(0.0, sigma).expect("valid sigma");
            for v in s.image.iter_mut() {
                *v = (*v as f64 + normal.sample(rng)).round().clamp(0.0, 255.0) as u8;
            }
            trace.applied.push(AppliedOp::Photometric { name: t.name() });
        }
        Transform::Sharpen { alpha_min, alpha_max, lightness_min, lightness_max } => {
            let alpha = rng.gen_range(*alpha_min..=*alpha_max);
            let lightness = rng.gen_range(*lightness_min..=*lightness_max);
            let amount = alpha * (1.0 + lightness);
            let blurred = box_blur(&s.image, 3);
            for ((y, x, c), v) in s.image.indexed_iter_mut() {
                let sharp = *v as f64 + amount * (*v as f64 - blurred[[y, x, c]]);
                *v = sharp.round().clamp(0.0, 255.0) as u8;
            }
            trace.applied.push(AppliedOp::Photometric { name: t.name() });
        }
        Transform::Blur { limit } => {
            let kernel = random_odd_kernel(rng, *limit);
            let blurred = box_blur(&s.image, kernel);
            for ((y, x, c), v) in s.image.indexed_iter_mut() {
                *v = blurred[[y, x, c]].round().clamp(0.0, 255.0) as u8;
            }
            trace.applied.push(AppliedOp::Photometric { name: t.name() });
        }
        Transform::MedianBlur { limit } => {
            let kernel = random_odd_kernel(rng, *limit);
            s.image = median_blur(&s.image, kernel);
            trace.applied.push(AppliedOp::Photometric { name: t.name() });
        }
        Transform::Clahe { clip_min, clip_max, tiles } => {
            let clip = rng.gen_range(*clip_min..=*clip_max);
            s.image = clahe_luma(&s.image, clip, *tiles);
            trace.applied.push(AppliedOp::Photometric { name: t.name() });
        }
        Transform::BrightnessContrast { limit } => {
            let brightness = rng.gen_range(-limit..=*limit);
            let contrast = rng.gen_range(-limit..=*limit);
            for v in s.image.iter_mut() {
                let out = *v as f64 * (1.0 + contrast) + brightness * 255.0;
                *v = out.round().clamp(0.0, 255.0) as u8;
            }
            trace.applied.push(AppliedOp::Photometric { name: t.name() });
        }
        Transform::Gamma { min, max } => {
            let gamma = rng.gen_range(*min..=*max);
            for v in s.image.iter_mut() {
                let out = 255.0 * (*v as f64 / 255.0).powf(gamma);
                *v = out.round().clamp(0.0, 255.0) as u8;
            }
            trace.applied.push(AppliedOp::Photometric { name: t.name() });
        }
        Transform::HueSaturation { hue_limit_degrees, sat_limit, val_limit } => {
            let dh = rng.gen_range(-hue_limit_degrees..=*hue_limit_degrees);
            let ds = rng.gen_range(-sat_limit..=*sat_limit);
            let dv = rng.gen_range(-val_limit..=*val_limit);
            for y in 0..h {
                for x in 0..w {
                    let rgb = [
                        s.image[[y, x, 0]] as f64 / 255.0,
                        s.image[[y, x, 1]] as f64 / 255.0,
                        s.image[[y, x, 2]] as f64 / 255.0,
                    ];
                    let (hh, ss, vv) = rgb_to_hsv(rgb);
                    let rgb = hsv_to_rgb(
                        (hh + dh).rem_euclid(360.0),
                        (ss + ds).clamp(0.0, 1.0),
                        (vv + dv).clamp(0.0, 1.0),
                    );
                    for c in 0..3 {
                        s.image[[y, x, c]] = (rgb[c] * 255.0).round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
            trace.applied.push(AppliedOp::Photometric { name: t.name() });
        }
    }
}

fn random_odd_kernel(rng: &mut ChaCha8Rng, limit: usize) -> usize {
    let choices: Vec<usize> = (3..=limit.max(3)).step_by(2).collect();
    choices[rng.gen_range(0..choices.len())]
}

fn apply_warp(s: &mut SampleRecord, name: &'static str, matrix: [[f64; 3]; 3], trace: &mut AugmentTrace) {
    s.image = warp_image_bilinear(&s.image, &matrix);
    s.mask = warp_mask_nearest(&s.mask, &matrix);
    trace.applied.push(AppliedOp::Geometric { name, matrix });
}

fn hflip_matrix(w: usize) -> [[f64; 3]; 3] {
    [[-1.0, 0.0, w as f64 - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

fn vflip_matrix(h: usize) -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, -1.0, h as f64 - 1.0], [0.0, 0.0, 1.0]]
}

/// Inverse-warp affine for content rotated by `angle`, zoomed by `scale`, and
/// shifted by `(tx, ty)`: maps destination pixels back to source pixels.
fn affine_about_center(
    h: usize,
    w: usize,
    angle: f64,
    scale: f64,
    tx: f64,
    ty: f64,
) -> [[f64; 3]; 3] {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = (-angle).sin_cos();
    let s = 1.0 / scale;
    // src = R(-angle) * ((dst - t) - c) / scale + c
    let a = s * cos;
    let b = -s * sin;
    let c0 = s * sin;
    let d = s * cos;
    let ox = cx - a * (cx + tx) - b * (cy + ty);
    let oy = cy - c0 * (cx + tx) - d * (cy + ty);
    [[a, b, ox], [c0, d, oy], [0.0, 0.0, 1.0]]
}

/// Homography mapping `from` points to `to` points, via an 8x8 solve.
fn homography_from_pairs(from: &[(f64, f64)], to: &[(f64, f64)]) -> Option<[[f64; 3]; 3]> {
    assert_eq!(from.len(), 4);
    assert_eq!(to.len(), 4);
    let mut a = [[0.0f64; 9]; 8];
    for (i, (&(x, y), &(u, v))) in from.iter().zip(to.iter()).enumerate() {
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Gaussian elimination with partial pivoting on the augmented system.
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        for row in 0..8 {
            if row != col {
                let factor = a[row][col] / a[col][col];
                for k in col..9 {
                    a[row][k] -= factor * a[col][k];
                }
            }
        }
    }
    let sol: Vec<f64> = (0..8).map(|i| a[i][8] / a[i][i]).collect();
    Some([
        [sol[0], sol[1], sol[2]],
        [sol[3], sol[4], sol[5]],
        [sol[6], sol[7], 1.0],
    ])
}

fn project(m: &[[f64; 3]; 3], x: f64, y: f64) -> (f64, f64) {
    let d = m[2][0] * x + m[2][1] * y + m[2][2];
    (
        (m[0][0] * x + m[0][1] * y + m[0][2]) / d,
        (m[1][0] * x + m[1][1] * y + m[1][2]) / d,
    )
}

pub fn warp_image_bilinear(img: &Array3<u8>, m: &[[f64; 3]; 3]) -> Array3<u8> {
    let (h, w, ch) = img.dim();
    let mut out = Array3::<u8>::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = project(m, x as f64, y as f64);
            let x0 = sx.floor();
            let y0 = sy.floor();
            let (fx, fy) = (sx - x0, sy - y0);
            for c in 0..ch {
                let sample = |ix: f64, iy: f64| -> f64 {
                    if ix < 0.0 || iy < 0.0 || ix >= w as f64 || iy >= h as f64 {
                        0.0
                    } else {
                        img[[iy as usize, ix as usize, c]] as f64
                    }
                };
                let v = (1.0 - fy) * ((1.0 - fx) * sample(x0, y0) + fx * sample(x0 + 1.0, y0))
                    + fy * ((1.0 - fx) * sample(x0, y0 + 1.0) + fx * sample(x0 + 1.0, y0 + 1.0));
                out[[y, x, c]] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

pub fn warp_mask_nearest(mask: &Array2<u8>, m: &[[f64; 3]; 3]) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = project(m, x as f64, y as f64);
            let ix = sx.round();
            let iy = sy.round();
            out[[y, x]] = if ix < 0.0 || iy < 0.0 || ix >= w as f64 || iy >= h as f64 {
                0
            } else {
                mask[[iy as usize, ix as usize]]
            };
        }
    }
    out
}

fn box_blur(img: &Array3<u8>, kernel: usize) -> Array3<f64> {
    let (h, w, ch) = img.dim();
    let r = (kernel / 2) as isize;
    let mut out = Array3::<f64>::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut sum = 0.0;
                let mut count = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (iy, ix) = (y as isize + dy, x as isize + dx);
                        if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                            sum += img[[iy as usize, ix as usize, c]] as f64;
                            count += 1.0;
                        }
                    }
                }
                out[[y, x, c]] = sum / count;
            }
        }
    }
    out
}

fn median_blur(img: &Array3<u8>, kernel: usize) -> Array3<u8> {
    let (h, w, ch) = img.dim();
    let r = (kernel / 2) as isize;
    let mut out = img.clone();
    let mut window = Vec::with_capacity(kernel * kernel);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                window.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (iy, ix) = (y as isize + dy, x as isize + dx);
                        if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                            window.push(img[[iy as usize, ix as usize, c]]);
                        }
                    }
                }
                window.sort_unstable();
                out[[y, x, c]] = window[window.len() / 2];
            }
        }
    }
    out
}

/// Equalizes the luma channel tile-wise with a clipped histogram, then scales
/// RGB by the per-pixel luma ratio.
fn clahe_luma(img: &Array3<u8>, clip_limit: f64, tiles: usize) -> Array3<u8> {
    let (h, w, _) = img.dim();
    let tiles = tiles.max(1).min(h.min(w).max(1));
    let luma = |y: usize, x: usize| -> f64 {
        0.299 * img[[y, x, 0]] as f64 + 0.587 * img[[y, x, 1]] as f64 + 0.114 * img[[y, x, 2]] as f64
    };

    // Per-tile clipped-histogram CDF lookup tables.
    let tile_h = h.div_ceil(tiles);
    let tile_w = w.div_ceil(tiles);
    let ny = h.div_ceil(tile_h);
    let nx = w.div_ceil(tile_w);
    let mut luts = vec![vec![0.0f64; 256]; ny * nx];
    for ty in 0..ny {
        for tx in 0..nx {
            let y0 = ty * tile_h;
            let x0 = tx * tile_w;
            let y1 = (y0 + tile_h).min(h);
            let x1 = (x0 + tile_w).min(w);
            let mut hist = [0.0f64; 256];
            let total = ((y1 - y0) * (x1 - x0)) as f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[luma(y, x).round().clamp(0.0, 255.0) as usize] += 1.0;
                }
            }
            // Clip and redistribute the excess uniformly.
            let clip = (clip_limit * total / 256.0).max(1.0);
            let mut excess = 0.0;
            for v in hist.iter_mut() {
                if *v > clip {
                    excess += *v - clip;
                    *v = clip;
                }
            }
            let bonus = excess / 256.0;
            let lut = &mut luts[ty * nx + tx];
            let mut cum = 0.0;
            for (i, v) in hist.iter().enumerate() {
                cum += v + bonus;
                lut[i] = 255.0 * cum / total;
            }
        }
    }

    // Bilinear interpolation between the four neighboring tile mappings.
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let fy = (y as f64 - tile_h as f64 / 2.0) / tile_h as f64;
            let fx = (x as f64 - tile_w as f64 / 2.0) / tile_w as f64;
            let ty0 = fy.floor().clamp(0.0, ny as f64 - 1.0) as usize;
            let tx0 = fx.floor().clamp(0.0, nx as f64 - 1.0) as usize;
            let ty1 = (ty0 + 1).min(ny - 1);
            let tx1 = (tx0 + 1).min(nx - 1);
            let wy = (fy - fy.floor()).clamp(0.0, 1.0);
            let wx = (fx - fx.floor()).clamp(0.0, 1.0);
            let lv = luma(y, x);
            let bin = lv.round().clamp(0.0, 255.0) as usize;
            let mapped = (1.0 - wy) * ((1.0 - wx) * luts[ty0 * nx + tx0][bin] + wx * luts[ty0 * nx + tx1][bin])
                + wy * ((1.0 - wx) * luts[ty1 * nx + tx0][bin] + wx * luts[ty1 * nx + tx1][bin]);
            let ratio = if lv > 0.0 { mapped / lv } else { 1.0 };
            for c in 0..3 {
                let v = img[[y, x, c]] as f64 * ratio;
                out[[y, x, c]] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}
