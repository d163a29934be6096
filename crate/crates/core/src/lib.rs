pub mod audit;
pub mod backbone;
pub mod config;
pub mod error;
pub mod exshortcut;
pub mod io;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use config::{Profile, Rho, VariantConfig};
pub use error::{Error, Result};
pub use model::ModelGraph;
pub use tensor::{Activation, Scalar, Tape, Tensor, Var};
