//! Person-specific interaction-graph reasoning over spatio-temporal feature
//! grids: dynamic relations, dynamic walks, the surrounding training loop, a
//! cost analyzer, and a synthetic feature-level benchmark.

pub mod complexity;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod model;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{DinError, Result};
pub use grid::{clamp_coord, extract_field, Coord, FeatureGrid, FieldSpec};
pub use model::{DinConfig, ModelParams, Variant};
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorId, Tape};
