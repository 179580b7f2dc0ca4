//! Single-image generative modelling with an external low-resolution prior
//! and differentiable patch transfer.
//!
//! The pipeline trains three cooperating pieces against one photograph:
//!
//! * a low-resolution generator `G` that learns global layout from an
//!   external prior over downscaled variants of the image
//!   ([`depnet`], [`external_prior`]);
//! * an upscaling network `F = IR ∘ PT` where `PT` is a differentiable
//!   patch-transfer step that re-paints a low-resolution layout with
//!   patches of the reference image and `IR` restores a seamless
//!   high-resolution result ([`dipnet`]);
//! * a multi-scale dilated patch discriminator that sharpens `F`'s output
//!   distribution at full resolution ([`patch_disc`]).
//!
//! [`trainer`] wires these together; [`patchdist`] provides the patch
//! distribution machinery used by the evaluation harness; [`eval_apps`]
//! contains metrics (Fréchet feature distance, pairwise diversity) and the
//! two applications (super-resolution plug-in, exemplar-guided image
//! manipulation); [`imaging`] and [`rng`] are the deterministic I/O and
//! randomness substrate.

pub mod checkpoint;
pub mod depnet;
pub mod dipnet;
pub mod error;
pub mod eval_apps;
pub mod external_prior;
pub mod imaging;
pub mod nn;
pub mod patch_disc;
pub mod patchdist;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
