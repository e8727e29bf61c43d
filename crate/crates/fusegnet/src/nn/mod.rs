//! Minimal tensor/autodiff engine backing the segmentation network.

pub mod adam;
pub mod conv;
pub mod init;
pub mod layers;
pub mod norm;
pub mod ops;
pub mod resize;
pub mod tensor;

#[cfg(test)]
pub(crate) mod gradcheck;

pub use adam::Adam;
pub use layers::{
    join, load_state_dict, num_parameters, parameters, state_dict, Conv2d, StateDict, TensorRole,
    Visit,
};
pub use norm::{BatchNorm2d, Mode};
pub use resize::UpsampleMode;
pub use tensor::{no_grad, Data, Tensor};
