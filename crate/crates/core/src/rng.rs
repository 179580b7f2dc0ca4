//! Deterministic random number generation.
//!
//! Every random decision in the crate flows through [`Rng`], which is a
//! ChaCha generator keyed by `(seed, stream_id)`. Independent subsystems
//! derive their own labelled streams (`"init/g"`, `"epoch42/noise"`, ...)
//! so that the sequence each subsystem sees depends only on the seed and
//! its own label — never on how many draws some other subsystem made.
//! That property is what makes checkpoint-resume bit-exact: an epoch's
//! streams can be re-derived from `(seed, epoch)` alone.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Seeded, labelled random stream. Cloning yields an identical generator
/// (same position); use [`Rng::stream`] to fork an independent one.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream_id: String,
    inner: ChaCha12Rng,
}

/// FNV-1a over bytes, with a caller-chosen offset basis so we can derive
/// several independent 64-bit digests from one string.
fn fnv1a(bytes: &[u8], basis: u64) -> u64 {
    let mut h = basis;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Rng {
    /// Create the stream identified by `(seed, stream_id)`.
    pub fn new(seed: u64, stream_id: &str) -> Self {
        let bytes = stream_id.as_bytes();
        let h1 = fnv1a(bytes, 0xcbf2_9ce4_8422_2325);
        let h2 = fnv1a(bytes, 0x9e37_79b9_7f4a_7c15);
        let h3 = fnv1a(bytes, 0x2545_f491_4f6c_dd1d);
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&h1.to_le_bytes());
        key[16..24].copy_from_slice(&h2.to_le_bytes());
        key[24..32].copy_from_slice(&h3.to_le_bytes());
        Rng {
            seed,
            stream_id: stream_id.to_owned(),
            inner: ChaCha12Rng::from_seed(key),
        }
    }

    /// Fork a child stream. The child's sequence depends only on
    /// `(seed, parent_id + "/" + label)`, not on this stream's position.
    pub fn stream(&self, label: &str) -> Rng {
        Rng::new(self.seed, &format!("{}/{}", self.stream_id, label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    /// Standard normal draw.
    pub fn normal_f32(&mut self) -> f32 {
        let x: f64 = self.inner.sample(StandardNormal);
        x as f32
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform_f32(&mut self) -> f32 {
        self.inner.gen::<f64>() as f32
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.inner.gen_range(0..n)
    }

    /// Fill a slice with `N(0, std^2)` draws.
    pub fn fill_normal(&mut self, out: &mut [f32], std: f32) {
        for v in out.iter_mut() {
            *v = self.normal_f32() * std;
        }
    }

    /// Fill a slice with uniform draws in `[lo, hi)`.
    pub fn fill_uniform(&mut self, out: &mut [f32], lo: f32, hi: f32) {
        for v in out.iter_mut() {
            *v = lo + (hi - lo) * self.uniform_f32();
        }
    }

    /// Position within the ChaCha stream, for checkpoint validation.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}
