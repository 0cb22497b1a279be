//! Pose refinement by local-global contextual adaptation.

pub mod cmp;
pub mod coco;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod kem;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod refine;
pub mod sample;
pub mod skeleton;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
