pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod head;
pub mod model;
pub mod backbone;
pub mod data_io;
pub mod nn;
pub mod template_update;
pub mod tensor;
pub mod tracker;
pub mod training;

pub use error::{Result, TsfError};
pub use geometry::{BBox, CropSpec, Image};
