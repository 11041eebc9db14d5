//! Deep Gaussian CRF denoising: parameter generation network, unrolled
//! half-quadratic-splitting inference, analytic gradients and training.

pub(crate) mod dense;
pub mod error;
pub mod gmm;
pub mod grad;
pub mod gradcheck;
pub mod image;
pub mod inference;
pub mod lbfgs;
pub mod model;
pub mod par;
pub mod params;
pub mod patch;
pub mod pgnet;
pub mod synth;
pub mod train;

pub use error::{Error, ModelError, Result};
pub use image::Image;
pub use inference::{denoise, dgcrf_forward, HqsSchedule};
pub use model::{load_model, save_model, Architecture, DgcrfModel};
pub use pgnet::{PotentialBank, SoftmaxVariant};
