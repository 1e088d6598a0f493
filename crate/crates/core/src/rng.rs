//! Counter-addressed random substreams.
//!
//! Every random draw in a refinement comes from a ChaCha20 stream keyed by the
//! master seed and addressed by `(purpose, source, step)`, so results do not
//! depend on the order in which sources or steps are evaluated.

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    ForwardInit = 1,
    PriorStep = 2,
    Scene = 3,
    Degrade = 4,
    Probe = 5,
}

/// Generator for the substream `(purpose, source, step)` under `seed`.
pub fn substream(seed: u64, purpose: Purpose, source: usize, step: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let id = ((purpose as u64) << 56) | ((source as u64 & 0xff_ffff) << 32) | (step as u64 & 0xffff_ffff);
    rng.set_stream(id);
    rng
}

/// `F × L` draw of `CN(0, 2I)`: independent standard normals on the real and
/// imaginary parts, filled frequency-major.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, n_freqs: usize, n_frames: usize) -> Array2<Complex64> {
    Array2::from_shape_simple_fn((n_freqs, n_frames), || {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re, im)
    })
}
