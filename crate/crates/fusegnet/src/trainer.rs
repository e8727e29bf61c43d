//! Training recipe: adaptive-moment optimization, plateau learning-rate
//! schedule, dual-signal checkpointing (validation loss down or IoU up),
//! early stopping, and per-fold runs feeding the inference ensemble.

use crate::augment::{augment, derive_seed, AugmentationPlan};
use crate::checkpoint;
use crate::dataio::{preprocess, FoldManifest, PreprocessSettings, SampleRecord};
use crate::error::{Error, Result};
use crate::losses::{hybrid_loss_t, LossSettings};
use crate::network::{FusegNet, NetworkConfig};
use crate::nn::{self, Adam, Mode, StateDict, Tensor};
use ndarray::{Array4, Ix4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub initial_lr: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Validation fraction for runs without a fold manifest.
    pub holdout_fraction: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            initial_lr: 1e-4,
            weight_decay: 1e-5,
            plateau_factor: 0.1,
            plateau_patience: 10,
            max_epochs: 200,
            batch_size: 2,
            early_stop_patience: 30,
            seed: 42,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.initial_lr <= 0.0
            || self.weight_decay < 0.0
            || self.plateau_factor <= 0.0
            || self.plateau_factor >= 1.0
        {
            return Err(Error::Config(
                "learning rate, decay, and plateau factor must be positive (factor < 1)".into(),
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.plateau_patience == 0 {
            return Err(Error::Config("batch size, epochs, and patience must be positive".into()));
        }
        // Short smoke runs (max_epochs below the patience values) are legal;
        // the patience ordering itself must still make sense.
        if self.plateau_patience >= self.early_stop_patience {
            return Err(Error::Config(
                "expected plateau_patience < early_stop_patience".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) || self.holdout_fraction == 0.0 {
            return Err(Error::Config("holdout_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Schedule and stopping counters carried across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub current_lr: f64,
    pub best_plateau_loss: f64,
    pub epochs_since_loss_improvement: usize,
    pub epochs_since_any_improvement: usize,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(ts: &TrainSettings) -> Self {
        TrainState {
            current_lr: ts.initial_lr,
            best_plateau_loss: f64::INFINITY,
            epochs_since_loss_improvement: 0,
            epochs_since_any_improvement: 0,
            epoch: 0,
        }
    }
}

/// One plateau-schedule update: on a validation-loss improvement the counter
/// resets; after `plateau_patience` consecutive flat epochs the learning rate
/// is multiplied by `plateau_factor` and the counter restarts.
pub fn plateau_step(mut state: TrainState, val_loss: f64, ts: &TrainSettings) -> TrainState {
    if val_loss < state.best_plateau_loss {
        state.best_plateau_loss = val_loss;
        state.epochs_since_loss_improvement = 0;
    } else {
        state.epochs_since_loss_improvement += 1;
        if state.epochs_since_loss_improvement >= ts.plateau_patience {
            state.current_lr *= ts.plateau_factor;
            state.epochs_since_loss_improvement = 0;
        }
    }
    state
}

/// Save whenever the validation loss decreases or the IoU increases.
pub fn checkpoint_decision(
    prev_best_loss: f64,
    prev_best_iou: f64,
    val_loss: f64,
    val_iou: f64,
) -> bool {
    val_loss < prev_best_loss || val_iou > prev_best_iou
}

pub fn early_stop_decision(epochs_since_any_improvement: usize, ts: &TrainSettings) -> bool {
    epochs_since_any_improvement >= ts.early_stop_patience
}

/// Best checkpoint of a training run, as returned and as persisted.
#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub model_state: StateDict,
    pub epoch: usize,
    pub best_val_loss: f64,
    pub best_val_iou: f64,
    pub settings: TrainSettings,
    pub fold_index: Option<usize>,
    pub network: NetworkConfig,
    pub loss: LossSettings,
}

/// Sidecar metadata file contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarMeta {
    format_version: u32,
    epoch: usize,
    best_val_loss: f64,
    best_val_iou: f64,
    fold_index: Option<usize>,
    settings: TrainSettings,
    network: NetworkConfig,
    loss: LossSettings,
}

pub fn sidecar_path(ckpt_path: &Path) -> PathBuf {
    ckpt_path.with_extension("meta.toml")
}

impl CheckpointRecord {
    pub fn save(&self, ckpt_path: &Path) -> Result<()> {
        checkpoint::write_tensors(ckpt_path, &self.model_state)?;
        let meta = SidecarMeta {
            format_version: 1,
            epoch: self.epoch,
            best_val_loss: self.best_val_loss,
            best_val_iou: self.best_val_iou,
            fold_index: self.fold_index,
            settings: self.settings.clone(),
            network: self.network.clone(),
            loss: self.loss,
        };
        let text = toml::to_string_pretty(&meta)
            .map_err(|e| Error::Checkpoint(format!("cannot serialize metadata: {e}")))?;
        let path = sidecar_path(ckpt_path);
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(ckpt_path: &Path) -> Result<Self> {
        let model_state = checkpoint::read_tensors(ckpt_path)?;
        let meta_path = sidecar_path(ckpt_path);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: SidecarMeta = toml::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", meta_path.display())))?;
        if meta.format_version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {}",
                meta.format_version
            )));
        }
        Ok(CheckpointRecord {
            model_state,
            epoch: meta.epoch,
            best_val_loss: meta.best_val_loss,
            best_val_iou: meta.best_val_iou,
            settings: meta.settings,
            fold_index: meta.fold_index,
            network: meta.network,
            loss: meta.loss,
        })
    }

    /// Rebuilds the trained model from the stored state.
    pub fn instantiate(&self) -> Result<FusegNet> {
        let net = FusegNet::new(self.network.clone(), 0)?;
        nn::load_state_dict(&net, &self.model_state).map_err(Error::Checkpoint)?;
        Ok(net)
    }
}

/// Per-epoch log row, also written as CSV.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_iou: f64,
    pub lr: f64,
    pub saved: bool,
}

/// Test/instrumentation hook into the training loop.
pub enum TrainEvent<'a> {
    Augmented { id: &'a str, epoch: usize },
    GradientStep { ids: &'a [String], epoch: usize },
    EpochEnd(&'a EpochRow),
}

pub type Observer<'a> = &'a mut dyn FnMut(TrainEvent<'_>);

pub struct TrainRun {
    pub checkpoint: CheckpointRecord,
    pub log: Vec<EpochRow>,
    pub stopped_early: bool,
}

/// Where training artifacts land: `<tag>.ckpt`, `<tag>.meta.toml`,
/// `<tag>_log.csv` under `out_dir` when given.
pub struct TrainSink<'a> {
    pub out_dir: Option<&'a Path>,
    pub tag: String,
    pub observer: Option<Observer<'a>>,
}

impl<'a> TrainSink<'a> {
    pub fn in_memory() -> Self {
        TrainSink { out_dir: None, tag: "run".into(), observer: None }
    }

    pub fn to_dir(out_dir: &'a Path, tag: impl Into<String>) -> Self {
        TrainSink { out_dir: Some(out_dir), tag: tag.into(), observer: None }
    }

    fn emit(&mut self, event: TrainEvent<'_>) {
        if let Some(obs) = self.observer.as_mut() {
            obs(event);
        }
    }
}

fn stack_batch(images: &[ndarray::Array3<f64>], masks: &[ndarray::Array2<f64>]) -> (Tensor, Tensor) {
    let n = images.len();
    let (h, w, c) = images[0].dim();
    let mut x = Array4::<f64>::zeros((n, c, h, w));
    let mut t = Array4::<f64>::zeros((n, 1, h, w));
    for (i, (img, mask)) in images.iter().zip(masks).enumerate() {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    x[[i, ch, y, xx]] = img[[y, xx, ch]];
                }
                t[[i, 0, y, xx]] = mask[[y, xx]];
            }
        }
    }
    (Tensor::constant(x.into_dyn()), Tensor::constant(t.into_dyn()))
}

/// Validation pass: mean per-sample hybrid loss and fold-level IoU at 0.5.
fn validate_epoch(
    net: &FusegNet,
    val: &[&SampleRecord],
    loss_cfg: &LossSettings,
    pre: &PreprocessSettings,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for rec in val {
        let (image, mask) = preprocess(rec, pre)?;
        let (x, t) = stack_batch(
            std::slice::from_ref(image.values()),
            std::slice::from_ref(&mask),
        );
        let (loss, pred) = nn::no_grad(|| -> Result<(f64, nn::Data)> {
            let y = net.forward_t(&x, Mode::Eval)?;
            let loss = hybrid_loss_t(&y, &t, loss_cfg).scalar();
            Ok((loss, y.to_data()))
        })?;
        loss_sum += loss;
        let pred = pred.into_dimensionality::<Ix4>().unwrap();
        for (y, xx) in ndarray::indices([pred.dim().2, pred.dim().3]) {
            let p = pred[[0, 0, y, xx]] >= 0.5;
            let g = mask[[y, xx]] == 1.0;
            match (p, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let val_loss = loss_sum / val.len() as f64;
    let denom = tp + fp + fn_;
    let val_iou = if denom == 0 { 1.0 } else { tp as f64 / denom as f64 };
    Ok((val_loss, val_iou))
}

/// Trains on every fold except `fold`, validating on `fold` each epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_fold(
    records: &[SampleRecord],
    manifest: &FoldManifest,
    fold: usize,
    net_cfg: &NetworkConfig,
    loss_cfg: &LossSettings,
    plan: &AugmentationPlan,
    ts: &TrainSettings,
    sink: &mut TrainSink<'_>,
) -> Result<TrainRun> {
    if fold >= manifest.k {
        return Err(Error::Invalid(format!(
            "fold {fold} out of range for a {}-fold manifest",
            manifest.k
        )));
    }
    manifest.validate(records)?;
    let train: Vec<&SampleRecord> = records
        .iter()
        .filter(|r| manifest.fold_of(&r.id) != Some(fold))
        .collect();
    let val: Vec<&SampleRecord> = records
        .iter()
        .filter(|r| manifest.fold_of(&r.id) == Some(fold))
        .collect();
    run_training(&train, &val, net_cfg, loss_cfg, plan, ts, Some(fold), sink)
}

/// Simple shuffled holdout run for configurations without a manifest.
#[allow(clippy::too_many_arguments)]
pub fn train_holdout(
    records: &[SampleRecord],
    net_cfg: &NetworkConfig,
    loss_cfg: &LossSettings,
    plan: &AugmentationPlan,
    ts: &TrainSettings,
    sink: &mut TrainSink<'_>,
) -> Result<TrainRun> {
    if records.len() < 2 {
        return Err(Error::Invalid("holdout training needs at least 2 samples".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ts.seed, "holdout-split", 0));
    order.shuffle(&mut rng);
    let n_val = ((records.len() as f64 * ts.holdout_fraction).round() as usize)
        .clamp(1, records.len() - 1);
    let val: Vec<&SampleRecord> = order[..n_val].iter().map(|&i| &records[i]).collect();
    let train: Vec<&SampleRecord> = order[n_val..].iter().map(|&i| &records[i]).collect();
    run_training(&train, &val, net_cfg, loss_cfg, plan, ts, None, sink)
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    train: &[&SampleRecord],
    val: &[&SampleRecord],
    net_cfg: &NetworkConfig,
    loss_cfg: &LossSettings,
    plan: &AugmentationPlan,
    ts: &TrainSettings,
    fold_index: Option<usize>,
    sink: &mut TrainSink<'_>,
) -> Result<TrainRun> {
    ts.validate()?;
    loss_cfg.validate()?;
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::Training("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Training("validation split is empty".into()));
    }

    let pre = PreprocessSettings::default();
    let net = FusegNet::new(net_cfg.clone(), ts.seed)?;
    let mut opt = Adam::new(nn::parameters(&net), ts.initial_lr, ts.weight_decay);
    let mut state = TrainState::new(ts);

    let ckpt_path = sink.out_dir.map(|d| d.join(format!("{}.ckpt", sink.tag)));
    let log_path = sink.out_dir.map(|d| d.join(format!("{}_log.csv", sink.tag)));
    let mut log_writer = match &log_path {
        Some(path) => Some(
            csv::Writer::from_path(path)
                .map_err(|e| Error::Training(format!("cannot open log {}: {e}", path.display())))?,
        ),
        None => None,
    };

    let mut best: Option<CheckpointRecord> = None;
    let mut best_loss = f64::INFINITY;
    let mut best_iou = f64::NEG_INFINITY;
    let mut log = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=ts.max_epochs {
        state.epoch = epoch;
        opt.set_lr(state.current_lr);

        // Deterministic epoch shuffle.
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ts.seed, "epoch-shuffle", epoch));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(ts.batch_size) {
            let mut images = Vec::with_capacity(batch.len());
            let mut masks = Vec::with_capacity(batch.len());
            let mut ids = Vec::with_capacity(batch.len());
            for &idx in batch {
                let rec = train[idx];
                // Training samples only: the validation path never augments.
                let aug = augment(rec, plan, derive_seed(ts.seed, &rec.id, epoch));
                sink.emit(TrainEvent::Augmented { id: &rec.id, epoch });
                let (image, mask) = preprocess(&aug, &pre)?;
                images.push(image.into_values());
                masks.push(mask);
                ids.push(rec.id.clone());
            }
            let (x, t) = stack_batch(&images, &masks);
            let y = net.forward_t(&x, Mode::Train)?;
            let loss = hybrid_loss_t(&y, &t, loss_cfg);
            let loss_value = loss.scalar();
            if !loss_value.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss_value} at epoch {epoch}"
                )));
            }
            loss.backward();
            opt.step();
            sink.emit(TrainEvent::GradientStep { ids: &ids, epoch });
            epoch_loss += loss_value * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = epoch_loss / seen as f64;

        let (val_loss, val_iou) = validate_epoch(&net, val, loss_cfg, &pre)?;

        let saved = checkpoint_decision(best_loss, best_iou, val_loss, val_iou);
        if saved {
            best_loss = best_loss.min(val_loss);
            best_iou = best_iou.max(val_iou);
            let record = CheckpointRecord {
                model_state: nn::state_dict(&net),
                epoch,
                best_val_loss: best_loss,
                best_val_iou: best_iou,
                settings: ts.clone(),
                fold_index,
                network: net_cfg.clone(),
                loss: *loss_cfg,
            };
            if let Some(path) = &ckpt_path {
                record.save(path)?;
            }
            best = Some(record);
            state.epochs_since_any_improvement = 0;
        } else {
            state.epochs_since_any_improvement += 1;
        }

        state = plateau_step(state, val_loss, ts);

        let row = EpochRow { epoch, train_loss, val_loss, val_iou, lr: state.current_lr, saved };
        if let Some(w) = log_writer.as_mut() {
            w.serialize(&row)
                .and_then(|()| w.flush().map_err(Into::into))
                .map_err(|e| Error::Training(format!("cannot write epoch log: {e}")))?;
        }
        sink.emit(TrainEvent::EpochEnd(&row));
        log.push(row);

        if early_stop_decision(state.epochs_since_any_improvement, ts) {
            stopped_early = true;
            break;
        }
    }

    let checkpoint = best.expect("at least the first epoch always checkpoints");
    Ok(TrainRun { checkpoint, log, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts() -> TrainSettings {
        TrainSettings::default()
    }

    #[test]
    fn plateau_reduces_after_exactly_ten_flat_epochs() {
        let settings = ts();
        let mut state = TrainState::new(&settings);
        state = plateau_step(state, 1.0, &settings); // improvement epoch
        for i in 0..9 {
            state = plateau_step(state, 1.0, &settings);
            assert_eq!(state.current_lr, 1e-4, "reduced too early at flat epoch {}", i + 1);
        }
        state = plateau_step(state, 1.0, &settings);
        assert!((state.current_lr - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn plateau_counter_resets_on_improvement() {
        let settings = ts();
        let mut state = TrainState::new(&settings);
        state = plateau_step(state, 1.0, &settings);
        for _ in 0..8 {
            state = plateau_step(state, 1.0, &settings);
        }
        // Improvement at epoch 9 of the streak: no reduction, counter resets.
        state = plateau_step(state, 0.5, &settings);
        assert_eq!(state.current_lr, 1e-4);
        assert_eq!(state.epochs_since_loss_improvement, 0);
    }

    #[test]
    fn twenty_flat_epochs_reduce_twice() {
        let settings = ts();
        let mut state = TrainState::new(&settings);
        state = plateau_step(state, 1.0, &settings);
        for _ in 0..20 {
            state = plateau_step(state, 1.0, &settings);
        }
        assert!((state.current_lr - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn checkpoint_decision_truth_table() {
        // (loss improves, iou improves) -> save is the OR.
        for (dl, di) in [(true, true), (true, false), (false, true), (false, false)] {
            let val_loss = if dl { 0.9 } else { 1.1 };
            let val_iou = if di { 0.6 } else { 0.4 };
            assert_eq!(checkpoint_decision(1.0, 0.5, val_loss, val_iou), dl || di);
        }
        // Exact equality on both counts as no improvement.
        assert!(!checkpoint_decision(1.0, 0.5, 1.0, 0.5));
    }

    #[test]
    fn early_stop_boundary() {
        let settings = ts();
        assert!(!early_stop_decision(29, &settings));
        assert!(early_stop_decision(30, &settings));
    }

    #[test]
    fn early_stop_counter_simulation() {
        // Improvement at epoch 29, then 30 flat epochs: stop fires exactly at
        // the 30th flat epoch.
        let settings = ts();
        let mut counter = 0usize;
        let mut stopped_at = None;
        for epoch in 1..=100 {
            let improved = epoch == 29;
            if improved {
                counter = 0;
            } else {
                counter += 1;
            }
            if early_stop_decision(counter, &settings) {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(59));
    }

    #[test]
    fn settings_validation() {
        let mut s = ts();
        assert!(s.validate().is_ok());
        s.plateau_patience = 40;
        assert!(s.validate().is_err());
        let mut s = ts();
        s.plateau_factor = 1.5;
        assert!(s.validate().is_err());
        // Short smoke runs are allowed.
        let s = TrainSettings { max_epochs: 1, ..ts() };
        assert!(s.validate().is_ok());
    }
}
