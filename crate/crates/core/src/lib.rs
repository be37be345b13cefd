pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod grkan;
pub mod layers;
pub mod model;
pub mod spectral;
pub mod studies;
pub mod tensor;
pub mod train;

pub use error::{KfsError, Result};
