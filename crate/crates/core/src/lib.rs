//! Robustness-inducing training objectives for small convolutional
//! classifiers: stability training (plain and symmetric), data augmentation
//! and FGSM adversarial training, together with the distortion suite and the
//! grid-evaluation harness used to compare them.

pub mod autodiff;
pub mod bilinear;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distortions;
pub mod error;
pub mod harness;
pub mod image;
pub mod kernels;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autodiff::{input_gradient, Padding, Tape, Var};
pub use error::{Category, Error, Result};
pub use image::{psnr, Image};
pub use tensor::{DType, Scalar, Tensor};
