//! Self-supervised contrastive pretraining for skeleton action sequences.
//!
//! The crate provides a small f64 autodiff tape, skeleton data handling with
//! joint/bone/motion streams, the normal and extreme augmentation pipelines,
//! a graph-convolution encoder pair with momentum-tracked keys, the
//! energy-based attention-guided drop module, the InfoNCE / distributional
//! divergence / nearest-neighbor-mining losses, a two-stage training loop,
//! and the downstream evaluation protocols (KNN, linear probe,
//! semi-supervised and full finetune, multi-stream fusion).

pub mod augment;
pub mod checkpoint;
pub mod contrast;
pub mod eadm;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod rng;
pub mod skeleton;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
