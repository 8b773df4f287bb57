//! Reverse-mode automatic differentiation over dense `ndarray` tensors.
//!
//! This crate is the numeric platform under the flow estimator: a small
//! define-by-run tape ([`Tensor`], [`backward`]), batched im2col convolution,
//! pooling and bilinear resampling, Adam, parameter storage with a bit-exact
//! archive format, and finite-difference checking utilities. Domain kernels
//! (warping, cost volumes, photometric measures) live downstream and hook in
//! through [`Tensor::from_op`].
//!
//! Everything is generic over [`Element`] (`f32` for training, `f64` for
//! gradient checks). Ops are deterministic: parallel loops only ever write
//! disjoint output regions, so repeated runs are bitwise identical.

mod check;
mod conv;
mod element;
mod init;
mod ops;
mod optim;
mod store;
mod tensor;

pub use check::{finite_diff_gradient, global_rel_err};
pub use conv::{avg_pool2, bilinear_resize, bilinear_resize_planes, conv2d, resize_plane, Conv2dSpec};
pub use element::Element;
pub use init::{kaiming_uniform, zeros};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use store::{read_archive, write_archive, ParamStore, StoreError};
pub use tensor::{backward, GradStore, Node, ParamId, Tensor};
