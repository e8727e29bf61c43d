//! Layer containers, the named-tensor visitor used for checkpoints, and
//! convenience constructors.

use super::conv::{conv2d, depthwise_conv2d};
use super::init;
use super::tensor::{Data, Tensor};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    /// Trainable parameter (receives gradients, counted in the budget).
    Param,
    /// Persistent state that is serialized but not trained (e.g. running stats).
    Buffer,
}

/// Walks every named tensor of a module tree in construction order.
pub trait Visit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, TensorRole));
}

pub fn parameters(root: &dyn Visit) -> Vec<Tensor> {
    let mut out = Vec::new();
    root.visit("", &mut |_, t, role| {
        if role == TensorRole::Param {
            out.push(t.clone());
        }
    });
    out
}

pub fn num_parameters(root: &dyn Visit) -> usize {
    let mut total = 0;
    root.visit("", &mut |_, t, role| {
        if role == TensorRole::Param {
            total += t.len();
        }
    });
    total
}

pub type StateDict = BTreeMap<String, Data>;

pub fn state_dict(root: &dyn Visit) -> StateDict {
    let mut out = StateDict::new();
    root.visit("", &mut |name, t, _| {
        let prev = out.insert(name.to_string(), t.to_data());
        assert!(prev.is_none(), "duplicate tensor name {name}");
    });
    out
}

/// Strict load: every stored tensor must match a model tensor by name and
/// shape, and vice versa.
pub fn load_state_dict(root: &dyn Visit, sd: &StateDict) -> Result<(), String> {
    let mut seen = 0usize;
    let mut err: Option<String> = None;
    root.visit("", &mut |name, t, _| {
        if err.is_some() {
            return;
        }
        match sd.get(name) {
            None => err = Some(format!("checkpoint is missing tensor `{name}`")),
            Some(data) => {
                if data.shape() != t.shape().as_slice() {
                    err = Some(format!(
                        "tensor `{name}` shape mismatch: checkpoint {:?}, model {:?}",
                        data.shape(),
                        t.shape()
                    ));
                } else {
                    t.set_data(data.clone());
                    seen += 1;
                }
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if seen != sd.len() {
        let mut names: Vec<&str> = sd.keys().map(|s| s.as_str()).collect();
        root.visit("", &mut |name, _, _| names.retain(|n| *n != name));
        return Err(format!("checkpoint has unknown tensors: {}", names.join(", ")));
    }
    Ok(())
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Dense or depthwise 2-D convolution layer.
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
    depthwise: bool,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        Conv2d {
            weight: Tensor::parameter(init::fan_in_uniform(
                rng,
                &[cout, cin, kernel, kernel],
                fan_in,
            )),
            bias: bias.then(|| Tensor::parameter(init::fan_in_uniform(rng, &[cout], fan_in))),
            stride,
            pad: kernel / 2,
            depthwise: false,
        }
    }

    pub fn depthwise(
        rng: &mut ChaCha8Rng,
        channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = kernel * kernel;
        Conv2d {
            weight: Tensor::parameter(init::fan_in_uniform(
                rng,
                &[channels, 1, kernel, kernel],
                fan_in,
            )),
            bias: bias.then(|| Tensor::parameter(init::fan_in_uniform(rng, &[channels], fan_in))),
            stride,
            pad: kernel / 2,
            depthwise: true,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        if self.depthwise {
            depthwise_conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad)
        } else {
            conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad)
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Visit for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        f(&join(prefix, "weight"), &self.weight, TensorRole::Param);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, TensorRole::Param);
        }
    }
}

impl Visit for super::norm::BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        f(&join(prefix, "weight"), &self.weight, TensorRole::Param);
        f(&join(prefix, "bias"), &self.bias, TensorRole::Param);
        f(
            &join(prefix, "running_mean"),
            &self.running_mean,
            TensorRole::Buffer,
        );
        f(
            &join(prefix, "running_var"),
            &self.running_var,
            TensorRole::Buffer,
        );
    }
}
