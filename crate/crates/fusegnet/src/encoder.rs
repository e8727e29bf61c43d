//! Compound-scaled convolutional backbone used as the encoder.
//!
//! The backbone is built from the standard inverted-bottleneck (MBConv) block
//! table, scaled by per-preset width/depth coefficients. Five feature maps are
//! exposed at strides 2, 4, 8, 16, and 32; the classifier head is never
//! constructed since only the feature pyramid feeds the decoder.

use crate::error::{Error, Result};
use crate::nn::{
    self, join, ops, BatchNorm2d, Conv2d, Mode, Tensor, TensorRole, Visit,
};
use rand_chacha::ChaCha8Rng;

/// Base block table: (expand_ratio, channels, repeats, stride, kernel).
const BLOCK_TABLE: [(usize, usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1, 3),
    (6, 24, 2, 2, 3),
    (6, 40, 2, 2, 5),
    (6, 80, 3, 2, 3),
    (6, 112, 3, 1, 5),
    (6, 192, 4, 2, 5),
    (6, 320, 1, 1, 3),
];

const STEM_CHANNELS: usize = 32;
const SE_RATIO: f64 = 0.25;
const BN_EPS: f64 = 1e-3;
const BN_MOMENTUM: f64 = 0.01;

#[derive(Debug, Clone, Copy)]
pub struct BackboneScale {
    pub width: f64,
    pub depth: f64,
}

/// Known encoder presets. `reduced` is a deliberately tiny scale for CPU
/// tests and toy training runs.
pub fn backbone_scale(name: &str) -> Result<BackboneScale> {
    let (width, depth) = match name {
        "efficientnet-b0" => (1.0, 1.0),
        "efficientnet-b1" => (1.0, 1.1),
        "efficientnet-b2" => (1.1, 1.2),
        "efficientnet-b3" => (1.2, 1.4),
        "efficientnet-b4" => (1.4, 1.8),
        "efficientnet-b5" => (1.6, 2.2),
        "efficientnet-b6" => (1.8, 2.6),
        "efficientnet-b7" => (2.0, 3.1),
        "reduced" => (0.35, 0.35),
        other => {
            return Err(Error::Config(format!(
                "unknown encoder `{other}` (expected efficientnet-b0..b7 or reduced)"
            )))
        }
    };
    Ok(BackboneScale { width, depth })
}

/// Width scaling rounded to the nearest multiple of 8, never dropping below
/// 90% of the unrounded value.
fn round_filters(filters: usize, width: f64) -> usize {
    const DIVISOR: usize = 8;
    let scaled = filters as f64 * width;
    let mut new = ((scaled + DIVISOR as f64 / 2.0) as usize / DIVISOR * DIVISOR).max(DIVISOR);
    if (new as f64) < 0.9 * scaled {
        new += DIVISOR;
    }
    new
}

fn round_repeats(repeats: usize, depth: f64) -> usize {
    (depth * repeats as f64).ceil() as usize
}

/// Channel attention inside each block: pool, reduce with swish, expand with
/// sigmoid, rescale. Distinct from the decoder's scSE family.
struct SqueezeExcite {
    reduce_w: Tensor,
    reduce_b: Tensor,
    expand_w: Tensor,
    expand_b: Tensor,
}

impl SqueezeExcite {
    fn new(rng: &mut ChaCha8Rng, channels: usize, squeezed: usize) -> Self {
        SqueezeExcite {
            reduce_w: Tensor::parameter(nn::init::fan_in_uniform(
                rng,
                &[squeezed, channels],
                channels,
            )),
            reduce_b: Tensor::parameter(nn::init::fan_in_uniform(rng, &[squeezed], channels)),
            expand_w: Tensor::parameter(nn::init::fan_in_uniform(
                rng,
                &[channels, squeezed],
                squeezed,
            )),
            expand_b: Tensor::parameter(nn::init::fan_in_uniform(rng, &[channels], squeezed)),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let pooled = ops::global_avg_pool(x);
        let hidden = ops::swish(&ops::linear(&pooled, &self.reduce_w, Some(&self.reduce_b)));
        let gate = ops::sigmoid(&ops::linear(&hidden, &self.expand_w, Some(&self.expand_b)));
        ops::scale_channels(x, &gate)
    }
}

impl Visit for SqueezeExcite {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        f(&join(prefix, "reduce.weight"), &self.reduce_w, TensorRole::Param);
        f(&join(prefix, "reduce.bias"), &self.reduce_b, TensorRole::Param);
        f(&join(prefix, "expand.weight"), &self.expand_w, TensorRole::Param);
        f(&join(prefix, "expand.bias"), &self.expand_b, TensorRole::Param);
    }
}

/// Inverted-bottleneck block: optional 1x1 expansion, depthwise convolution,
/// squeeze-and-excitation, 1x1 projection, residual when shapes allow.
struct MbConv {
    expand: Option<(Conv2d, BatchNorm2d)>,
    depthwise: Conv2d,
    depthwise_bn: BatchNorm2d,
    se: SqueezeExcite,
    project: Conv2d,
    project_bn: BatchNorm2d,
    residual: bool,
}

impl MbConv {
    fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        expand_ratio: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let expanded = cin * expand_ratio;
        let bn = |c: usize| {
            let mut bn = BatchNorm2d::new(c);
            bn.eps = BN_EPS;
            bn.momentum = BN_MOMENTUM;
            bn
        };
        let expand = (expand_ratio != 1).then(|| {
            let conv = Conv2d::new(rng, cin, expanded, 1, 1, false);
            (conv, bn(expanded))
        });
        let depthwise = Conv2d::depthwise(rng, expanded, kernel, stride, false);
        let depthwise_bn = bn(expanded);
        let squeezed = ((cin as f64 * SE_RATIO) as usize).max(1);
        let se = SqueezeExcite::new(rng, expanded, squeezed);
        let project = Conv2d::new(rng, expanded, cout, 1, 1, false);
        let project_bn = bn(cout);
        MbConv {
            expand,
            depthwise,
            depthwise_bn,
            se,
            project,
            project_bn,
            residual: stride == 1 && cin == cout,
        }
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Tensor {
        let mut h = x.clone();
        if let Some((conv, bn)) = &self.expand {
            h = ops::swish(&bn.forward(&conv.forward(&h), mode));
        }
        h = ops::swish(&self.depthwise_bn.forward(&self.depthwise.forward(&h), mode));
        h = self.se.forward(&h);
        h = self.project_bn.forward(&self.project.forward(&h), mode);
        if self.residual {
            h = ops::add(&h, x);
        }
        h
    }
}

impl Visit for MbConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        if let Some((conv, bn)) = &self.expand {
            conv.visit(&join(prefix, "expand.conv"), f);
            bn.visit(&join(prefix, "expand.bn"), f);
        }
        self.depthwise.visit(&join(prefix, "depthwise.conv"), f);
        self.depthwise_bn.visit(&join(prefix, "depthwise.bn"), f);
        self.se.visit(&join(prefix, "se"), f);
        self.project.visit(&join(prefix, "project.conv"), f);
        self.project_bn.visit(&join(prefix, "project.bn"), f);
    }
}

pub struct Encoder {
    name: String,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<MbConv>,
    /// Block indices after which stage features are extracted (strides
    /// 4, 8, 16, 32); the stride-2 feature is the stem output.
    extract_after: [usize; 4],
    stage_channels: [usize; 5],
}

impl Encoder {
    pub fn new(name: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        let scale = backbone_scale(name)?;
        let stem_out = round_filters(STEM_CHANNELS, scale.width);
        let stem = Conv2d::new(rng, 3, stem_out, 3, 2, false);
        let mut stem_bn = BatchNorm2d::new(stem_out);
        stem_bn.eps = BN_EPS;
        stem_bn.momentum = BN_MOMENTUM;

        let mut blocks = Vec::new();
        let mut extract_after = [0usize; 4];
        let mut stage_channels = [0usize; 5];
        stage_channels[0] = stem_out;
        let mut cin = stem_out;
        let mut extract_idx = 0;
        for (stage, &(expand, channels, repeats, stride, kernel)) in BLOCK_TABLE.iter().enumerate()
        {
            let cout = round_filters(channels, scale.width);
            let repeats = round_repeats(repeats, scale.depth);
            for rep in 0..repeats {
                let stride = if rep == 0 { stride } else { 1 };
                blocks.push(MbConv::new(rng, cin, cout, expand, kernel, stride));
                cin = cout;
            }
            // Stage indices 1, 2, 4, 6 close the stride-4/8/16/32 resolutions.
            if matches!(stage, 1 | 2 | 4 | 6) {
                extract_after[extract_idx] = blocks.len() - 1;
                stage_channels[extract_idx + 1] = cout;
                extract_idx += 1;
            }
        }
        Ok(Encoder {
            name: name.to_string(),
            stem,
            stem_bn,
            blocks,
            extract_after,
            stage_channels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Channel counts of the five extracted stages, shallow to deep.
    pub fn stage_channels(&self) -> [usize; 5] {
        self.stage_channels
    }

    /// Runs the backbone and returns the five stage maps, shallow to deep
    /// (strides 2, 4, 8, 16, 32).
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Vec<Tensor> {
        let mut features = Vec::with_capacity(5);
        let mut h = ops::swish(&self.stem_bn.forward(&self.stem.forward(x), mode));
        features.push(h.clone());
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, mode);
            if self.extract_after.contains(&i) {
                features.push(h.clone());
            }
        }
        features
    }
}

impl Visit for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        self.stem.visit(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit(&join(prefix, "stem.bn"), f);
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
    }
}
