pub mod curvsample;
pub mod diffengine;
pub mod error;
pub mod encoders;
pub mod geom;
pub mod neuralfield;
pub mod protolearn;
pub mod renderer;
pub mod selfcheck;
pub mod synthscene;
pub mod trainer;

pub use error::{Error, Result};
