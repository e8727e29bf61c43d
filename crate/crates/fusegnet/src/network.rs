//! FUSegNet: pretrained-backbone encoder, five decoder stages with mid-stage
//! parallel scSE fusion, and a sigmoid segmentation head.

use crate::attention::{FeatureMap, ScseBlock, ScseSettings};
use crate::checkpoint;
use crate::encoder::{backbone_scale, Encoder};
use crate::error::{Error, Result};
use crate::nn::{
    self, join, ops, BatchNorm2d, Conv2d, Mode, Tensor, TensorRole, UpsampleMode, Visit,
};
use ndarray::{Array3, Array4, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

pub const ENCODER_WEIGHTS_CACHE_ENV: &str = "FUSEGNET_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Backbone preset; the paper-scale default is the b7 variant.
    pub encoder: String,
    /// Output channels of the five decoder stages, shallow-to-deep order of
    /// application (first entry consumes the deepest features).
    pub decoder_channels: Vec<usize>,
    /// Nominal input resolution; any multiple of 32 is accepted at runtime.
    pub input_size: usize,
    /// Load published backbone weights instead of random initialization.
    pub pretrained: bool,
    /// Explicit weight blob path; otherwise `$FUSEGNET_CACHE_DIR/<encoder>.tensors`.
    pub encoder_weights: Option<PathBuf>,
    pub upsample: UpsampleMode,
    /// Insert a Conv-BN-ReLU before the attention module in every stage.
    pub pre_block: bool,
    /// Channel-excitation reduction ratio of the decoder attention blocks.
    pub reduction_ratio: usize,
    /// Stages whose incoming channel count falls below this threshold use the
    /// shorted attention variant (the final stage always does).
    pub shorted_channel_threshold: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            encoder: "efficientnet-b7".into(),
            decoder_channels: vec![256, 128, 64, 32, 16],
            input_size: 512,
            pretrained: false,
            encoder_weights: None,
            upsample: UpsampleMode::Bilinear,
            pre_block: false,
            reduction_ratio: 16,
            shorted_channel_threshold: 32,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        backbone_scale(&self.encoder)?;
        if self.decoder_channels.len() != 5 {
            return Err(Error::Config(format!(
                "decoder_channels must list exactly 5 stages, got {}",
                self.decoder_channels.len()
            )));
        }
        if !self.decoder_channels.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::Config(
                "decoder_channels must be strictly decreasing toward the output".into(),
            ));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.reduction_ratio == 0 {
            return Err(Error::Config("reduction_ratio must be at least 1".into()));
        }
        Ok(())
    }
}

/// Encoder feature pyramid, shallow to deep.
pub struct EncoderStages {
    pub stages: Vec<Tensor>,
    pub strides: [usize; 5],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderStageConfig {
    pub out_channels: usize,
    pub use_skip: bool,
    pub shorted: bool,
    pub pre_block: bool,
}

/// One decoder stage: upsample, concatenate the skip, fuse attention
/// mid-stage, then Conv-BN-ReLU.
struct DecoderBlock {
    cfg: DecoderStageConfig,
    upsample: UpsampleMode,
    pre: Option<(Conv2d, BatchNorm2d)>,
    attention: ScseBlock,
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl DecoderBlock {
    fn new(
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        cfg: DecoderStageConfig,
        upsample: UpsampleMode,
        reduction_ratio: usize,
    ) -> Result<Self> {
        let pre = cfg.pre_block.then(|| {
            let conv = Conv2d::new(rng, in_channels, cfg.out_channels, 3, 1, false);
            (conv, BatchNorm2d::new(cfg.out_channels))
        });
        let attention_channels = if cfg.pre_block { cfg.out_channels } else { in_channels };
        let attention = ScseBlock::new(
            attention_channels,
            ScseSettings {
                reduction_ratio,
                shorted: cfg.shorted,
                ..Default::default()
            },
            rng,
        )?;
        let conv = Conv2d::new(rng, attention_channels, cfg.out_channels, 3, 1, false);
        let bn = BatchNorm2d::new(cfg.out_channels);
        Ok(DecoderBlock { cfg, upsample, pre, attention, conv, bn })
    }

    fn forward(&self, prev: &Tensor, skip: Option<&Tensor>, mode: Mode) -> Result<Tensor> {
        let up = nn::resize::upsample_2x(prev, self.upsample);
        let mut h = match skip {
            Some(skip) => {
                let (us, ss) = (up.shape(), skip.shape());
                if (us[2], us[3]) != (ss[2], ss[3]) {
                    return Err(Error::Shape(format!(
                        "decoder stage: upsampled map {}x{} does not match skip {}x{}",
                        us[2], us[3], ss[2], ss[3]
                    )));
                }
                ops::concat_channels(&[up, skip.clone()])
            }
            None => up,
        };
        if let Some((conv, bn)) = &self.pre {
            h = ops::relu(&bn.forward(&conv.forward(&h), mode));
        }
        h = self.attention.forward_t(&h);
        Ok(ops::relu(&self.bn.forward(&self.conv.forward(&h), mode)))
    }
}

impl Visit for DecoderBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        if let Some((conv, bn)) = &self.pre {
            conv.visit(&join(prefix, "pre.conv"), f);
            bn.visit(&join(prefix, "pre.bn"), f);
        }
        self.attention.visit(&join(prefix, "scse"), f);
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

pub struct FusegNet {
    cfg: NetworkConfig,
    encoder: Encoder,
    decoder: Vec<DecoderBlock>,
    head: Conv2d,
}

impl FusegNet {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&cfg.encoder, &mut rng)?;
        let stage_channels = encoder.stage_channels();

        let mut decoder = Vec::with_capacity(5);
        let mut prev_channels = stage_channels[4];
        for (i, &out_channels) in cfg.decoder_channels.iter().enumerate() {
            let use_skip = i < 4;
            let skip_channels = if use_skip { stage_channels[3 - i] } else { 0 };
            let in_channels = prev_channels + skip_channels;
            let is_final = i == 4;
            let stage_cfg = DecoderStageConfig {
                out_channels,
                use_skip,
                shorted: is_final || in_channels < cfg.shorted_channel_threshold,
                pre_block: cfg.pre_block,
            };
            decoder.push(DecoderBlock::new(
                &mut rng,
                in_channels,
                stage_cfg,
                cfg.upsample,
                cfg.reduction_ratio,
            )?);
            prev_channels = out_channels;
        }
        let head = Conv2d::new(&mut rng, prev_channels, 1, 3, 1, true);

        let net = FusegNet { cfg, encoder, decoder, head };
        if net.cfg.pretrained {
            net.load_pretrained_encoder()?;
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder_stage_configs(&self) -> Vec<DecoderStageConfig> {
        self.decoder.iter().map(|d| d.cfg).collect()
    }

    pub fn num_params(&self) -> usize {
        nn::num_parameters(self)
    }

    fn load_pretrained_encoder(&self) -> Result<()> {
        let path = match &self.cfg.encoder_weights {
            Some(path) => path.clone(),
            None => {
                let cache = std::env::var_os(ENCODER_WEIGHTS_CACHE_ENV).ok_or_else(|| {
                    Error::Config(format!(
                        "pretrained = true but no encoder_weights path is configured and \
                         {ENCODER_WEIGHTS_CACHE_ENV} is unset"
                    ))
                })?;
                PathBuf::from(cache).join(format!("{}.tensors", self.cfg.encoder))
            }
        };
        let sd = checkpoint::read_tensors(&path)?;
        nn::load_state_dict(&self.encoder, &sd).map_err(Error::Checkpoint)
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!(
                "expected an (N,3,H,W) input, got {shape:?}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input spatial size {h}x{w} must be a positive multiple of 32"
            )));
        }
        Ok((h, w))
    }

    /// Runs the backbone, returning stage maps at strides 2..32.
    pub fn encode(&self, x: &Tensor, mode: Mode) -> Result<EncoderStages> {
        self.check_input(x)?;
        Ok(EncoderStages {
            stages: self.encoder.forward(x, mode),
            strides: [2, 4, 8, 16, 32],
        })
    }

    /// Runs the decoder chain over encoder stages, returning pre-head features.
    pub fn decode(&self, stages: &EncoderStages, mode: Mode) -> Result<Tensor> {
        let mut h = stages.stages[4].clone();
        for (i, block) in self.decoder.iter().enumerate() {
            let skip = block.cfg.use_skip.then(|| &stages.stages[3 - i]);
            h = block.forward(&h, skip, mode)?;
        }
        Ok(h)
    }

    /// Runs a single decoder stage on explicit inputs. The previous-stage map
    /// is upsampled by two and concatenated with the skip, the attention
    /// module fuses mid-stage, and a Conv-BN-ReLU closes the stage.
    pub fn decoder_stage(
        &self,
        index: usize,
        prev: &Tensor,
        skip: Option<&Tensor>,
        mode: Mode,
    ) -> Result<Tensor> {
        let block = self.decoder.get(index).ok_or_else(|| {
            Error::Config(format!("decoder stage {index} out of range (5 stages)"))
        })?;
        if block.cfg.use_skip != skip.is_some() {
            return Err(Error::Config(format!(
                "decoder stage {index} expects use_skip = {}",
                block.cfg.use_skip
            )));
        }
        block.forward(prev, skip, mode)
    }

    /// Full forward pass to a probability map `(N,1,H,W)`.
    pub fn forward_t(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let stages = self.encode(x, mode)?;
        let features = self.decode(&stages, mode)?;
        Ok(ops::sigmoid(&self.head.forward(&features)))
    }

    /// Single-image inference on an HxWx3 map, producing an HxWx1 probability
    /// map. Runs in evaluation mode without building a tape.
    pub fn forward(&self, image: &FeatureMap) -> Result<FeatureMap> {
        if image.channels() != 3 {
            return Err(Error::Shape(format!(
                "expected a 3-channel image, got {} channels",
                image.channels()
            )));
        }
        let (h, w) = (image.height(), image.width());
        let x = image_to_batch(image);
        let out = nn::no_grad(|| self.forward_t(&x, Mode::Eval))?;
        let d = out.to_data().into_dimensionality::<Ix4>().unwrap();
        let mut map = Array3::<f64>::zeros((h, w, 1));
        for y in 0..h {
            for xx in 0..w {
                map[[y, xx, 0]] = d[[0, 0, y, xx]];
            }
        }
        FeatureMap::new(map)
    }
}

/// Converts an HxWx3 feature map to a batch-1 NCHW tensor.
pub fn image_to_batch(image: &FeatureMap) -> Tensor {
    let (h, w, c) = image.values().dim();
    let mut out = Array4::<f64>::zeros((1, c, h, w));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[0, ch, y, x]] = image.values()[[y, x, ch]];
            }
        }
    }
    Tensor::constant(out.into_dyn())
}

impl Visit for FusegNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        for (i, block) in self.decoder.iter().enumerate() {
            block.visit(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    pub(crate) fn toy_config() -> NetworkConfig {
        NetworkConfig {
            encoder: "reduced".into(),
            decoder_channels: vec![48, 32, 24, 16, 8],
            input_size: 64,
            ..Default::default()
        }
    }

    fn random_input(n: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[n, 3, size, size]), |_| {
            rng.gen_range(-1.0..1.0)
        }))
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = NetworkConfig::default();
        cfg.input_size = 100;
        assert!(cfg.validate().is_err());
        cfg.input_size = 512;
        cfg.decoder_channels = vec![256, 256, 64, 32, 16];
        assert!(cfg.validate().is_err());
        cfg.decoder_channels = vec![256, 128, 64, 32];
        assert!(cfg.validate().is_err());
        cfg.decoder_channels = vec![256, 128, 64, 32, 16];
        cfg.encoder = "mystery".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_preserves_spatial_size_and_probability_range() {
        let net = FusegNet::new(toy_config(), 7).unwrap();
        let x = random_input(1, 64, 8);
        let y = nn::no_grad(|| net.forward_t(&x, Mode::Eval)).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 64, 64]);
        let d = y.to_data();
        assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn forward_is_deterministic_in_eval_mode() {
        let net = FusegNet::new(toy_config(), 9).unwrap();
        let x = random_input(1, 64, 10);
        let a = nn::no_grad(|| net.forward_t(&x, Mode::Eval)).unwrap().to_data();
        let b = nn::no_grad(|| net.forward_t(&x, Mode::Eval)).unwrap().to_data();
        assert_eq!(a, b);
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let net = FusegNet::new(toy_config(), 11).unwrap();
        let x = random_input(1, 48, 12);
        assert!(matches!(net.forward_t(&x, Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn final_stage_is_shorted_and_skipless() {
        let net = FusegNet::new(toy_config(), 13).unwrap();
        let stage_cfgs = net.decoder_stage_configs();
        assert!(stage_cfgs[..4].iter().all(|c| c.use_skip));
        let last = stage_cfgs.last().unwrap();
        assert!(!last.use_skip);
        assert!(last.shorted);
    }

    #[test]
    fn zeroing_an_encoder_stage_changes_the_output() {
        let net = FusegNet::new(toy_config(), 14).unwrap();
        let x = random_input(1, 64, 15);
        nn::no_grad(|| {
            let stages = net.encode(&x, Mode::Eval).unwrap();
            let base = ops::sigmoid(&net.head.forward(&net.decode(&stages, Mode::Eval).unwrap()))
                .to_data();
            for i in 0..5 {
                let mut tampered = net.encode(&x, Mode::Eval).unwrap();
                let zeroed = Tensor::constant(ArrayD::zeros(IxDyn(&tampered.stages[i].shape())));
                tampered.stages[i] = zeroed;
                let out = ops::sigmoid(
                    &net.head.forward(&net.decode(&tampered, Mode::Eval).unwrap()),
                )
                .to_data();
                assert_ne!(out, base, "stage {i} appears disconnected");
            }
        });
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let net = FusegNet::new(toy_config(), 16).unwrap();
        let params = nn::parameters(&net);
        let mut got = vec![0.0f64; params.len()];
        for trial in 0..2 {
            let x = random_input(2, 64, 17 + trial);
            let y = net.forward_t(&x, Mode::Train).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(40 + trial);
            let gt = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&y.shape()), |_| {
                f64::from(rng.gen_bool(0.5))
            }));
            let loss = crate::losses::hybrid_loss_t(&y, &gt, &Default::default());
            loss.backward();
            for (i, p) in params.iter().enumerate() {
                if let Some(g) = p.take_grad() {
                    got[i] += g.mapv(f64::abs).sum();
                }
            }
        }
        let dead: Vec<usize> = got
            .iter()
            .enumerate()
            .filter(|(_, g)| **g == 0.0)
            .map(|(i, _)| i)
            .collect();
        assert!(dead.is_empty(), "parameters with zero gradient: {dead:?}");
    }

    #[test]
    fn b7_parameter_budget_and_first_stage_contract() {
        let net = FusegNet::new(NetworkConfig::default(), 1).unwrap();
        // One-time recorded fixture: the published b7 feature extractor.
        assert_eq!(nn::num_parameters(net.encoder()), 62_143_440);
        let total = net.num_params() as f64;
        let target = 64_900_000.0;
        let rel = (total - target).abs() / target;
        assert!(
            rel <= 0.03,
            "total {total} deviates {:.2}% from the 64.90M budget",
            rel * 100.0
        );

        // First decoder stage: 16x16x640 previous map plus 32x32x224 skip
        // yields a 32x32x256 output.
        nn::no_grad(|| {
            let prev = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 640, 16, 16])));
            let skip = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 224, 32, 32])));
            let out = net.decoder_stage(0, &prev, Some(&skip), Mode::Eval).unwrap();
            assert_eq!(out.shape(), vec![1, 256, 32, 32]);

            // Mismatched skip resolution is a shape error.
            let bad_skip = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 224, 16, 16])));
            assert!(matches!(
                net.decoder_stage(0, &prev, Some(&bad_skip), Mode::Eval),
                Err(Error::Shape(_))
            ));
        });
    }

    #[test]
    fn final_decoder_stage_is_skipless_and_doubles_resolution() {
        let net = FusegNet::new(toy_config(), 30).unwrap();
        nn::no_grad(|| {
            let prev = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 16, 32, 32])));
            let out = net.decoder_stage(4, &prev, None, Mode::Eval).unwrap();
            assert_eq!(out.shape(), vec![1, 8, 64, 64]);
            // A skip where none is expected is rejected.
            assert!(net.decoder_stage(4, &prev, Some(&prev), Mode::Eval).is_err());
        });
    }

    #[test]
    fn annihilated_stage_weights_zero_the_output() {
        let net = FusegNet::new(toy_config(), 31).unwrap();
        // Zero the closing convolution and normalization scale of stage 4.
        net.visit("", &mut |name, t, _| {
            if name.starts_with("decoder.4.conv.") || name == "decoder.4.bn.weight" {
                t.set_data(ArrayD::zeros(IxDyn(&t.shape())));
            }
        });
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let prev = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[1, 16, 32, 32]), |_| {
            rng.gen_range(-1.0..1.0)
        }));
        let out = nn::no_grad(|| net.decoder_stage(4, &prev, None, Mode::Eval)).unwrap();
        assert!(out.to_data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pretrained_without_weights_is_a_configuration_error() {
        let cfg = NetworkConfig {
            pretrained: true,
            ..toy_config()
        };
        // No env var, no explicit path.
        std::env::remove_var(ENCODER_WEIGHTS_CACHE_ENV);
        assert!(matches!(FusegNet::new(cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn pretrained_round_trip_through_weight_blob() {
        let dir = tempfile::tempdir().unwrap();
        let donor = FusegNet::new(toy_config(), 21).unwrap();
        let weights_path = dir.path().join("reduced.tensors");
        checkpoint::write_tensors(&weights_path, &nn::state_dict(donor.encoder())).unwrap();

        let cfg = NetworkConfig {
            pretrained: true,
            encoder_weights: Some(weights_path),
            ..toy_config()
        };
        let net = FusegNet::new(cfg, 22).unwrap();
        let x = random_input(1, 64, 23);
        let a = nn::no_grad(|| {
            donor
                .encode(&x, Mode::Eval)
                .unwrap()
                .stages
                .pop()
                .unwrap()
                .to_data()
        });
        let b = nn::no_grad(|| {
            net.encode(&x, Mode::Eval)
                .unwrap()
                .stages
                .pop()
                .unwrap()
                .to_data()
        });
        assert_eq!(a, b, "loaded encoder must reproduce the donor's features");
    }
}
