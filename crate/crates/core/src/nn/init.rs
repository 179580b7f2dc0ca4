//! Weight initialization helpers. All draws go through the crate's seeded
//! [`Rng`](crate::rng::Rng), so initialization is a pure function of
//! `(seed, stream label)`.

use ndarray::{Array1, Array4, ArrayD};

use crate::rng::Rng;

/// He-normal convolution kernel `[co, ci, kh, kw]`:
/// `std = sqrt(2 / (ci * kh * kw))`.
pub fn conv_kernel(rng: &mut Rng, co: usize, ci: usize, kh: usize, kw: usize) -> ArrayD<f32> {
    let std = (2.0 / (ci * kh * kw) as f32).sqrt();
    let mut w = Array4::<f32>::zeros((co, ci, kh, kw));
    for v in w.iter_mut() {
        *v = rng.normal_f32() * std;
    }
    w.into_dyn()
}

/// Zero bias of length `c`.
pub fn zero_bias(c: usize) -> ArrayD<f32> {
    Array1::<f32>::zeros(c).into_dyn()
}

/// All-ones vector (instance-norm scale).
pub fn ones(c: usize) -> ArrayD<f32> {
    Array1::<f32>::from_elem(c, 1.0).into_dyn()
}
