pub mod error;
pub mod tensor;
pub mod util;

pub mod aggregation;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod train;
pub mod modulation;
pub mod queries;
pub mod params;
pub mod scene;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor};
