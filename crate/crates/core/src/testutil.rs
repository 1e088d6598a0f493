//! Random fixtures shared by unit tests.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fcp::AtfFilter;
use crate::spectral::{MultiSpectrogram, Spectrogram, StftParams};

fn cn(rng: &mut ChaCha8Rng) -> Complex64 {
    Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

pub fn random_spec(n_freqs: usize, n_frames: usize, seed: u64) -> Spectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array2::from_shape_simple_fn((n_freqs, n_frames), || cn(&mut rng));
    Spectrogram::from_raw(data, StftParams::default())
}

pub fn random_multi(n_ch: usize, n_freqs: usize, n_frames: usize, seed: u64) -> MultiSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array3::from_shape_simple_fn((n_ch, n_freqs, n_frames), || cn(&mut rng));
    MultiSpectrogram::from_raw(data, StftParams::default())
}

pub fn random_filter(n_ch: usize, n_taps: usize, n_freqs: usize, seed: u64) -> AtfFilter {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let taps = Array3::from_shape_fn((n_ch, n_taps, n_freqs), |(_, j, _)| cn(&mut rng) * 0.6f64.powi(j as i32));
    AtfFilter::new(taps, 0).unwrap()
}
