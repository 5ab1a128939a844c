//! Joint B-scan alignment and 3D layer surface regression for retinal OCT
//! volumes.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod trainer;
pub mod types;

pub use error::{OctError, Result};
pub use types::{
    apply_displacement_to_surfaces, round_half_up, surfaces_to_labelmap, DisplacementVector, LabelMap, OctVolume,
    Spacing, SurfaceDistribution, SurfaceSet,
};
