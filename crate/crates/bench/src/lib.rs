//! Shared inputs for the benchmarks.

use tunnelmag::FrameSequence;
use tunnelmag::grid::Fft2;
use tunnelmag::synth::{fourier_shift, generate, noise_texture, Motion, SceneSpec};
use tunnelmag::Grid;

/// Band-limited noise in `[0, 1]`, the same texture family the tests use.
pub fn texture(size: usize, seed: u64) -> Grid {
    noise_texture(size, size, 5, 32.0, 0.35, seed)
}

/// A reference frame and a copy shifted by a subpixel amount.
pub fn shifted_pair(size: usize) -> (Grid, Grid) {
    let reference = texture(size, 1);
    let fft = Fft2::new(size, size);
    let moved = fourier_shift(&fft, &fft.forward_real(&reference), 0.4, -0.3);
    (reference, moved)
}

/// A slowly translating scene sampled once a minute.
pub fn drifting_sequence(size: usize, n_frames: usize) -> FrameSequence {
    let mut spec = SceneSpec::new(size, size, n_frames, 60.0);
    spec.rng_seed = 7;
    spec.motion.push(Motion::Translation {
        amplitude_px: 0.002,
        frequency_hz: 0.0,
        direction_deg: 20.0,
        phase_deg: 0.0,
    });
    generate(&spec).expect("valid scene").0
}
