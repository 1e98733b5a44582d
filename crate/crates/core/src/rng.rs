//! Seeded random streams.
//!
//! Every worker owns its own ChaCha stream and the master owns stream 0, so the
//! values drawn never depend on which thread runs which worker or in what order.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

pub const MASTER_STREAM: u64 = 0;

/// Stream `id` of the generator family identified by `seed`.
pub fn stream(seed: u64, id: u64) -> Stream {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Stream reserved for worker `i` (0-based).
pub fn worker_stream(seed: u64, i: usize) -> Stream {
    stream(seed, i as u64 + 1)
}

pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut DVector<f64>) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    fill_normal(rng, &mut v);
    v
}
