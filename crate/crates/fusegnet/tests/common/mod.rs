//! Shared fixtures for the integration suites.

use fusegnet::dataio::SampleRecord;
use fusegnet::network::NetworkConfig;
use fusegnet::trainer::TrainSettings;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bright disk on a dark noisy background; the mask marks the disk.
pub fn synthetic_sample(id: &str, size: usize, cy: f64, cx: f64, radius: f64, seed: u64) -> SampleRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = Array3::<u8>::zeros((size, size, 3));
    let mut mask = Array2::<u8>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            let inside = d <= radius;
            if inside {
                mask[[y, x]] = 1;
            }
            for c in 0..3 {
                let base: f64 = if inside { 190.0 } else { 60.0 };
                let v = base + rng.gen_range(-25.0..25.0);
                image[[y, x, c]] = v.clamp(0.0, 255.0) as u8;
            }
        }
    }
    SampleRecord { id: id.into(), image, mask }
}

/// Four synthetic 64x64 samples with distinct disk placements.
pub fn synthetic_dataset(size: usize) -> Vec<SampleRecord> {
    let s = size as f64;
    vec![
        synthetic_sample("s0", size, s * 0.40, s * 0.40, s * 0.20, 10),
        synthetic_sample("s1", size, s * 0.55, s * 0.60, s * 0.26, 11),
        synthetic_sample("s2", size, s * 0.60, s * 0.35, s * 0.17, 12),
        synthetic_sample("s3", size, s * 0.42, s * 0.58, s * 0.23, 13),
    ]
}

/// Small network for CPU-scale tests.
pub fn toy_network() -> NetworkConfig {
    NetworkConfig {
        encoder: "reduced".into(),
        decoder_channels: vec![48, 32, 24, 16, 8],
        input_size: 64,
        ..Default::default()
    }
}

/// Fast-converging settings for toy runs.
pub fn toy_train_settings(max_epochs: usize) -> TrainSettings {
    TrainSettings {
        initial_lr: 2e-3,
        max_epochs,
        plateau_patience: 10,
        early_stop_patience: 30,
        batch_size: 2,
        seed: 7,
        ..Default::default()
    }
}
