//! Iterative crowd counting: a two-branch density-estimation network
//! (low-resolution branch feeding its features and prediction into a
//! high-resolution branch), stacked into multi-stage refinement, with
//! everything it needs built in: a small reverse-mode tensor engine,
//! density-map ground truth, SGD training, evaluation and file formats.

pub mod density;
pub mod error;
pub mod eval;
pub mod gradient_suite;
pub mod io;
pub mod model;
pub mod tensor;
pub mod train;

pub use density::{DensityMap, DotAnnotations, Point, Resolution};
pub use error::{Error, Result};
pub use model::{NetConfig, Network, StageOutputs, Variant};
pub use tensor::{Tape, Tensor, Var};
pub use train::{TrainConfig, TrainSample};
