//! Area-level small area estimation: direct survey estimates, spatial
//! weights, Fay-Herriot and spatial Fay-Herriot models, bootstrap MSE and
//! the end-to-end pipeline.

pub mod bootstrap;
pub mod direct;
pub mod error;
pub mod flags;
pub mod fh;
pub mod geo;
pub mod optim;
pub mod pipeline;
pub mod serde_na;
pub mod sfh;
pub mod simulate;
pub mod table;
pub mod weights;

pub use error::{Error, Result};
pub use fh::{FhFit, FhInput, FitOptions, Likelihood, Method};
pub use flags::{Flag, Flags};
pub use sfh::{SfhFit, SfhInput};
pub use table::{AreaTable, EstimatorKind, Prediction};
pub use weights::{NeighborRule, SpatialWeights};
