//! Minimal neural-network substrate: a reverse-mode autodiff graph over
//! `ndarray`, convolution kernels, parameterized layers, Adam, and a
//! finite-difference gradient checker.
//!
//! Everything is generic over [`Real`] so the same op implementations run
//! in f32 for training and in f64 for gradient verification.

pub mod adam;
pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod layers;
pub mod linalg;

/// Scalar type the graph operates on. Implemented for `f32` and `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64 (named to avoid clashing with
    /// `num_traits::FromPrimitive::from_f64`).
    fn of_f64(v: f64) -> Self;
    /// Widening conversion to f64.
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}
