//! Volumetric segmentation with a large-kernel-attention U-net (ULKANet),
//! dual local/global encoding (LoGoNet), and masked multi-task
//! pre-training against k-means pseudo-labels.
//!
//! Everything runs on a small dense tensor type with tape-based reverse-mode
//! differentiation; see [`autograd`].

pub mod ablation;
pub mod autograd;
pub mod blocks;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod logonet;
pub mod losses;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod perf;
pub mod rng;
pub mod ssl;
pub mod tensor;
pub mod training;
pub mod ulkanet;

pub use autograd::{Ctx, ParamId, ParamKind, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{LabelVolume, Real, Shape, Tensor};
