//! Spatiotemporal (3D+t) clutter filtering for contrast-enhanced ultrasound.

pub mod error;
pub mod filters;
pub mod inference;
pub mod io;
pub mod labeling;
pub mod ops4d;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod tracking;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{ComplexVolume, Fill, Tensor6D};
