pub mod augment;
pub mod backbone;
pub mod error;
pub mod extractor;
pub mod graph;
pub mod inversion;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
