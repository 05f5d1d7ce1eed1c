pub mod analysis;
pub mod container;
pub mod convnet;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod imageio;
pub mod jointbayes;
pub mod pipeline;
pub mod supervision;
pub mod tensor;
pub mod threshold;
pub mod trainer;

pub use error::{Error, Result};
