//! Few-shot radiance field training under varying illumination.
//!
//! The crate is organised bottom-up: [`autodiff`] provides the gradient
//! substrate, [`camera`] the pinhole geometry and cross-view transfer,
//! [`field`] the radiance field and its volume rendering, [`intrinsic`] the
//! albedo/shading decomposition, [`losses`] every training objective,
//! [`synth`] analytic test scenes, [`io`] dataset persistence and
//! [`trainer`] the optimization loop and evaluation metrics.

pub mod autodiff;
pub mod camera;
pub mod error;
pub mod field;
pub mod intrinsic;
pub mod io;
pub mod losses;
pub mod synth;
pub mod trainer;

pub use camera::{Camera, Correspondence, Ray};
pub use error::{Error, ErrorKind, Result};
