//! Squeeze-and-excitation block family.
//!
//! `cSE` squeezes spatially (global average pool) and excites per channel
//! through a reduction bottleneck; `sSE` squeezes channels (1x1 projection)
//! and excites per location. `scSE` combines both under an aggregation
//! operator, and the parallel variant sums a max-out-aggregated branch with an
//! additive one, both sharing a single cSE and sSE evaluation. The shorted
//! variant bypasses the max-out branch and adds the block input instead.

use crate::error::{Error, Result};
use crate::nn::{self, ops, Tensor, TensorRole, Visit};
use ndarray::{Array1, Array2, Array3, Array4, Ix3, Ix4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};

/// A single-image activation map, height x width x channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Array3<f64>);

impl FeatureMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (h, w, c) = values.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!(
                "feature map dimensions must be at least 1, got {h}x{w}x{c}"
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("feature map contains non-finite values".into()));
        }
        Ok(FeatureMap(values))
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }

    pub fn channels(&self) -> usize {
        self.0.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_values(self) -> Array3<f64> {
        self.0
    }

    /// Batch-1 NCHW tensor view of this map.
    pub(crate) fn to_tensor(&self) -> Tensor {
        let (h, w, c) = self.0.dim();
        let mut out = Array4::<f64>::zeros((1, c, h, w));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[[0, ch, y, x]] = self.0[[y, x, ch]];
                }
            }
        }
        Tensor::constant(out.into_dyn())
    }

    pub(crate) fn from_tensor(t: &Tensor) -> Self {
        let d = t.to_data().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = d.dim();
        assert_eq!(n, 1, "from_tensor expects a batch-1 tensor");
        let mut out = Array3::<f64>::zeros((h, w, c));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[[y, x, ch]] = d[[0, ch, y, x]];
                }
            }
        }
        FeatureMap(out)
    }
}

/// Per-channel multiplicative gains, each strictly inside (0,1).
#[derive(Debug, Clone)]
pub struct ChannelGate(pub Array1<f64>);

/// Per-location multiplicative gains, each strictly inside (0,1).
#[derive(Debug, Clone)]
pub struct SpatialGate(pub Array2<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    MaxOut,
    Additive,
    Multiplicative,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScseSettings {
    /// Reduction ratio of the channel-excitation bottleneck. Clamped so the
    /// bottleneck keeps at least one unit.
    pub reduction_ratio: usize,
    pub aggregation: Aggregation,
    /// Bypass switch: replaces the max-out branch with the block input.
    pub shorted: bool,
}

impl Default for ScseSettings {
    fn default() -> Self {
        ScseSettings {
            reduction_ratio: 16,
            aggregation: Aggregation::MaxOut,
            shorted: false,
        }
    }
}

impl ScseSettings {
    pub fn validate(&self) -> Result<()> {
        if self.reduction_ratio == 0 {
            return Err(Error::Config("reduction_ratio must be at least 1".into()));
        }
        Ok(())
    }
}

pub struct ScseBlock {
    channels: usize,
    settings: ScseSettings,
    cse_reduce_w: Tensor,
    cse_reduce_b: Tensor,
    cse_expand_w: Tensor,
    cse_expand_b: Tensor,
    sse_proj_w: Tensor,
    sse_proj_b: Tensor,
    cse_evals: AtomicUsize,
    sse_evals: AtomicUsize,
}

impl ScseBlock {
    pub fn new(channels: usize, settings: ScseSettings, rng: &mut ChaCha8Rng) -> Result<Self> {
        settings.validate()?;
        if channels == 0 {
            return Err(Error::Config("channel count must be at least 1".into()));
        }
        let r = settings.reduction_ratio.min(channels);
        let bottleneck = (channels / r).max(1);
        Ok(ScseBlock {
            channels,
            settings,
            cse_reduce_w: Tensor::parameter(nn::init::fan_in_uniform(
                rng,
                &[bottleneck, channels],
                channels,
            )),
            cse_reduce_b: Tensor::parameter(nn::init::fan_in_uniform(rng, &[bottleneck], channels)),
            cse_expand_w: Tensor::parameter(nn::init::fan_in_uniform(
                rng,
                &[channels, bottleneck],
                bottleneck,
            )),
            cse_expand_b: Tensor::parameter(nn::init::fan_in_uniform(rng, &[channels], bottleneck)),
            sse_proj_w: Tensor::parameter(nn::init::fan_in_uniform(
                rng,
                &[1, channels, 1, 1],
                channels,
            )),
            sse_proj_b: Tensor::parameter(nn::init::fan_in_uniform(rng, &[1], channels)),
            cse_evals: AtomicUsize::new(0),
            sse_evals: AtomicUsize::new(0),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn settings(&self) -> ScseSettings {
        self.settings
    }

    pub fn bottleneck(&self) -> usize {
        self.cse_reduce_w.shape()[0]
    }

    /// Sets every learned tensor to zero; with zero weights and biases both
    /// gates sit at sigmoid(0) = 0.5, which several fixtures rely on.
    pub fn zero_parameters(&self) {
        for t in nn::parameters(self) {
            t.set_data(nn::init::zeros(&t.shape()));
        }
    }

    /// Number of cSE and sSE evaluations since construction or reset.
    pub fn eval_counts(&self) -> (usize, usize) {
        (
            self.cse_evals.load(Ordering::Relaxed),
            self.sse_evals.load(Ordering::Relaxed),
        )
    }

    pub fn reset_eval_counts(&self) {
        self.cse_evals.store(0, Ordering::Relaxed);
        self.sse_evals.store(0, Ordering::Relaxed);
    }

    fn check_channels(&self, c: usize) -> Result<()> {
        if c != self.channels {
            return Err(Error::Config(format!(
                "block built for {} channels was applied to a {}-channel map",
                self.channels, c
            )));
        }
        Ok(())
    }

    /// Channel gate: sigmoid(W2 relu(W1 gap(x) + b1) + b2), shape (N,C).
    pub fn cse_gate_t(&self, x: &Tensor) -> Tensor {
        let pooled = ops::global_avg_pool(x);
        let hidden = ops::relu(&ops::linear(&pooled, &self.cse_reduce_w, Some(&self.cse_reduce_b)));
        ops::sigmoid(&ops::linear(&hidden, &self.cse_expand_w, Some(&self.cse_expand_b)))
    }

    /// Channel squeeze-and-excitation over an NCHW tensor.
    pub fn cse_t(&self, x: &Tensor) -> Tensor {
        self.cse_evals.fetch_add(1, Ordering::Relaxed);
        ops::scale_channels(x, &self.cse_gate_t(x))
    }

    /// Spatial gate: sigmoid of the 1x1 channel projection, shape (N,H,W).
    pub fn sse_gate_t(&self, x: &Tensor) -> Tensor {
        let proj = nn::conv::conv2d(x, &self.sse_proj_w, Some(&self.sse_proj_b), 1, 0);
        let d = proj.to_data().into_dimensionality::<Ix4>().unwrap();
        let (n, _, h, w) = d.dim();
        // Drop the singleton channel axis; backward restores it.
        let squeezed = Tensor::from_op(
            d.into_shape((n, h, w)).unwrap().into_dyn(),
            vec![proj],
            Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let (n, h, w) = g3.dim();
                vec![Some(g3.to_owned().into_shape((n, 1, h, w)).unwrap().into_dyn())]
            }),
        );
        ops::sigmoid(&squeezed)
    }

    /// Spatial squeeze-and-excitation over an NCHW tensor.
    pub fn sse_t(&self, x: &Tensor) -> Tensor {
        self.sse_evals.fetch_add(1, Ordering::Relaxed);
        ops::scale_spatial(x, &self.sse_gate_t(x))
    }

    fn aggregate(cse: &Tensor, sse: &Tensor, aggregation: Aggregation) -> Tensor {
        match aggregation {
            Aggregation::MaxOut => ops::maximum(cse, sse),
            Aggregation::Additive => ops::add(cse, sse),
            Aggregation::Multiplicative => ops::mul(cse, sse),
            Aggregation::Concat => ops::concat_channels(&[cse.clone(), sse.clone()]),
        }
    }

    /// Combined scSE with the settings' aggregation operator.
    pub fn scse_t(&self, x: &Tensor) -> Tensor {
        let (c, s) = (self.cse_t(x), self.sse_t(x));
        Self::aggregate(&c, &s, self.settings.aggregation)
    }

    /// Parallel scSE: max-out branch plus additive branch, evaluated from one
    /// shared cSE/sSE pair. No further recalibration is applied.
    pub fn p_scse_t(&self, x: &Tensor) -> Tensor {
        let (c, s) = (self.cse_t(x), self.sse_t(x));
        let max_branch = Self::aggregate(&c, &s, Aggregation::MaxOut);
        let add_branch = Self::aggregate(&c, &s, Aggregation::Additive);
        ops::add(&max_branch, &add_branch)
    }

    /// Shorted parallel scSE: the block input replaces the max-out branch.
    pub fn shorted_p_scse_t(&self, x: &Tensor) -> Tensor {
        let (c, s) = (self.cse_t(x), self.sse_t(x));
        let add_branch = Self::aggregate(&c, &s, Aggregation::Additive);
        ops::add(x, &add_branch)
    }

    /// Dispatches on the shorted switch; the decoder's entry point.
    pub fn forward_t(&self, x: &Tensor) -> Tensor {
        if self.settings.shorted {
            self.shorted_p_scse_t(x)
        } else {
            self.p_scse_t(x)
        }
    }

    pub fn channel_gate(&self, x: &FeatureMap) -> Result<ChannelGate> {
        self.check_channels(x.channels())?;
        let gate = nn::no_grad(|| self.cse_gate_t(&x.to_tensor()));
        let d = gate.to_data();
        Ok(ChannelGate(Array1::from_iter(d.iter().cloned())))
    }

    pub fn spatial_gate(&self, x: &FeatureMap) -> Result<SpatialGate> {
        self.check_channels(x.channels())?;
        let gate = nn::no_grad(|| self.sse_gate_t(&x.to_tensor()));
        let d = gate.to_data().into_dimensionality::<Ix3>().unwrap();
        let (_, h, w) = d.dim();
        Ok(SpatialGate(d.into_shape((h, w)).unwrap()))
    }

    /// Channel squeeze-and-excitation recalibration of a single map.
    pub fn cse(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_channels(x.channels())?;
        Ok(nn::no_grad(|| FeatureMap::from_tensor(&self.cse_t(&x.to_tensor()))))
    }

    /// Spatial squeeze-and-excitation recalibration of a single map.
    pub fn sse(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_channels(x.channels())?;
        Ok(nn::no_grad(|| FeatureMap::from_tensor(&self.sse_t(&x.to_tensor()))))
    }

    /// Aggregated scSE; the concat aggregation doubles the channel count.
    pub fn scse(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_channels(x.channels())?;
        Ok(nn::no_grad(|| FeatureMap::from_tensor(&self.scse_t(&x.to_tensor()))))
    }

    pub fn p_scse(&self, x: &FeatureMap) -> Result<FeatureMap> {
        if self.settings.shorted {
            return Err(Error::Config(
                "p_scse called on a block configured as shorted; use shorted_p_scse".into(),
            ));
        }
        self.check_channels(x.channels())?;
        Ok(nn::no_grad(|| FeatureMap::from_tensor(&self.p_scse_t(&x.to_tensor()))))
    }

    pub fn shorted_p_scse(&self, x: &FeatureMap) -> Result<FeatureMap> {
        if !self.settings.shorted {
            return Err(Error::Config(
                "shorted_p_scse called on a block configured as parallel; use p_scse".into(),
            ));
        }
        self.check_channels(x.channels())?;
        Ok(nn::no_grad(|| {
            FeatureMap::from_tensor(&self.shorted_p_scse_t(&x.to_tensor()))
        }))
    }
}

impl Visit for ScseBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        use crate::nn::join;
        f(&join(prefix, "cse_reduce.weight"), &self.cse_reduce_w, TensorRole::Param);
        f(&join(prefix, "cse_reduce.bias"), &self.cse_reduce_b, TensorRole::Param);
        f(&join(prefix, "cse_expand.weight"), &self.cse_expand_w, TensorRole::Param);
        f(&join(prefix, "cse_expand.bias"), &self.cse_expand_b, TensorRole::Param);
        f(&join(prefix, "sse_proj.weight"), &self.sse_proj_w, TensorRole::Param);
        f(&join(prefix, "sse_proj.bias"), &self.sse_proj_b, TensorRole::Param);
    }
}
