//! Frequency-domain complex steerable pyramid with full-resolution
//! (undecimated) subbands.
//!
//! Radial windows are raised cosines in `log2(radius)`, one or more per
//! octave (narrower bands magnify larger motions more faithfully);
//! angular windows are `cos^(K-1)` lobes restricted to the half-plane
//! around each orientation, which makes every subband analytic. Masks are
//! normalised so that
//!
//! ```text
//! H(w)^2 + L(w)^2 + sum_b [ B_b(w)^2 + B_b(-w)^2 ] = 1
//! ```
//!
//! at every DFT sample, i.e. the conjugate half-plane carries the second
//! half of each band's energy. Reconstruction therefore takes `2 Re(.)` of
//! the band synthesis.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Zip;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{bin_frequency, ComplexGrid, Fft2, Grid};
use crate::imageio;

pub const DEFAULT_ORIENTATIONS: usize = 4;
pub const MAX_BANDS_PER_OCTAVE: usize = 4;

/// Largest scale count a `width x height` frame supports.
pub fn max_scales(width: usize, height: usize) -> usize {
    let min_side = width.min(height).max(1);
    (min_side as f64).log2().floor().max(2.0) as usize - 2
}

#[derive(Debug, Clone)]
pub struct FilterBank {
    width: usize,
    height: usize,
    n_scales: usize,
    n_orientations: usize,
    bands_per_octave: usize,
    band_masks: Vec<Grid>,
    /// Nonzero `(flat index, mask value)` pairs of each band mask.
    band_support: Vec<Vec<(usize, f64)>>,
    lowpass_mask: Grid,
    highpass_mask: Grid,
    fft: Fft2,
}

/// Smooth transition in `log2(rho)`: 0 below `-1`, 1 above `0`.
fn rise(x: f64) -> f64 {
    let t = (-x).clamp(0.0, 1.0);
    (0.5 * PI * t).cos()
}

fn fall(x: f64) -> f64 {
    let t = (-x).clamp(0.0, 1.0);
    (0.5 * PI * t).sin()
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl FilterBank {
    pub fn new(width: usize, height: usize, n_scales: usize, n_orientations: usize) -> Result<Self> {
        Self::with_bands_per_octave(width, height, n_scales, n_orientations, 1)
    }

    /// Bank whose radial bands are `1 / bands_per_octave` octave wide; at
    /// most `bands_per_octave * max_scales(width, height)` scales fit.
    pub fn with_bands_per_octave(
        width: usize,
        height: usize,
        n_scales: usize,
        n_orientations: usize,
        bands_per_octave: usize,
    ) -> Result<Self> {
        if !(1..=MAX_BANDS_PER_OCTAVE).contains(&bands_per_octave) {
            return Err(Error::param(
                "bands_per_octave",
                format!("must be between 1 and {MAX_BANDS_PER_OCTAVE}"),
            ));
        }
        if width < 16 || height < 16 || width % 2 != 0 || height % 2 != 0 {
            return Err(Error::DegenerateDimensions { width, height });
        }
        if n_scales < 1 {
            return Err(Error::param("n_scales", "must be at least 1"));
        }
        if n_orientations < 2 {
            return Err(Error::param("n_orientations", "must be at least 2"));
        }
        let max = bands_per_octave * max_scales(width, height);
        if n_scales > max {
            return Err(Error::TooManyScales {
                requested: n_scales,
                max,
                width,
                height,
            });
        }

        let order = n_orientations - 1;
        let angular_gain =
            (4f64.powi(order as i32) / (n_orientations as f64 * binomial(2 * order, order))).sqrt();

        let mut highpass_mask = Grid::zeros((height, width));
        let mut lowpass_mask = Grid::zeros((height, width));
        let mut radial: Vec<Grid> = vec![Grid::zeros((height, width)); n_scales];
        let mut angle = Grid::zeros((height, width));

        for ky in 0..height {
            let wy = bin_frequency(ky, height);
            for kx in 0..width {
                let wx = bin_frequency(kx, width);
                let rho = (wx * wx + wy * wy).sqrt() / PI;
                angle[[ky, kx]] = wy.atan2(wx);
                if rho == 0.0 {
                    lowpass_mask[[ky, kx]] = 1.0;
                    continue;
                }
                let lr = bands_per_octave as f64 * rho.log2();
                highpass_mask[[ky, kx]] = rise(lr);
                let mut pass = fall(lr);
                for (s, r) in radial.iter_mut().enumerate() {
                    let j = (s + 1) as f64;
                    r[[ky, kx]] = pass * rise(lr + j);
                    pass *= fall(lr + j);
                }
                lowpass_mask[[ky, kx]] = pass;
            }
        }

        let mut band_masks = Vec::with_capacity(n_scales * n_orientations);
        for r in &radial {
            for k in 0..n_orientations {
                let theta_k = PI * k as f64 / n_orientations as f64;
                let mut m = Grid::zeros((height, width));
                Zip::from(&mut m)
                    .and(r)
                    .and(&angle)
                    .for_each(|m, &rad, &theta| {
                        let c = (theta - theta_k).cos();
                        if c > 0.0 && rad > 0.0 {
                            *m = angular_gain * c.powi(order as i32) * rad;
                        }
                    });
                band_masks.push(m);
            }
        }

        let band_support = band_masks
            .iter()
            .map(|m| m.iter().copied().enumerate().filter(|&(_, v)| v != 0.0).collect())
            .collect();
        Ok(Self {
            width,
            height,
            n_scales,
            n_orientations,
            bands_per_octave,
            band_masks,
            band_support,
            lowpass_mask,
            highpass_mask,
            fft: Fft2::new(width, height),
        })
    }

    /// Bank with the conventional depth `floor(log2(min side)) - 2`.
    pub fn with_default_scales(width: usize, height: usize, n_orientations: usize) -> Result<Self> {
        Self::new(width, height, max_scales(width, height).max(1), n_orientations)
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn n_scales(&self) -> usize {
        self.n_scales
    }
    pub fn n_orientations(&self) -> usize {
        self.n_orientations
    }
    pub fn bands_per_octave(&self) -> usize {
        self.bands_per_octave
    }
    pub fn n_bands(&self) -> usize {
        self.band_masks.len()
    }
    pub fn band_mask(&self, band: usize) -> &Grid {
        &self.band_masks[band]
    }
    pub fn lowpass_mask(&self) -> &Grid {
        &self.lowpass_mask
    }
    pub fn highpass_mask(&self) -> &Grid {
        &self.highpass_mask
    }
    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    pub fn band_index(&self, scale: usize, orientation: usize) -> usize {
        scale * self.n_orientations + orientation
    }

    pub fn band_scale_orientation(&self, band: usize) -> (usize, usize) {
        (band / self.n_orientations, band % self.n_orientations)
    }

    /// Peak radial frequency of a scale, radians per pixel.
    pub fn center_frequency(&self, scale: usize) -> f64 {
        PI * 0.5f64.powf((scale + 1) as f64 / self.bands_per_octave as f64)
    }

    /// Orientation angle of the band's frequency support, radians.
    pub fn orientation_angle(&self, orientation: usize) -> f64 {
        PI * orientation as f64 / self.n_orientations as f64
    }

    /// Per-sample deviation of the tiling sum from 1, maximised over the
    /// frequency plane.
    pub fn tiling_error(&self) -> f64 {
        let (h, w) = (self.height, self.width);
        let mut worst: f64 = 0.0;
        for ky in 0..h {
            for kx in 0..w {
                let (ny, nx) = ((h - ky) % h, (w - kx) % w);
                let mut sum = self.highpass_mask[[ky, kx]].powi(2) + self.lowpass_mask[[ky, kx]].powi(2);
                for m in &self.band_masks {
                    sum += m[[ky, kx]].powi(2) + m[[ny, nx]].powi(2);
                }
                worst = worst.max((sum - 1.0).abs());
            }
        }
        worst
    }

    fn check_frame(&self, frame: &Grid) -> Result<()> {
        let (h, w) = frame.dim();
        if (w, h) != (self.width, self.height) {
            return Err(Error::DimensionMismatch {
                expected: (self.width, self.height),
                found: (w, h),
            });
        }
        Ok(())
    }

    pub fn spectrum(&self, frame: &Grid) -> Result<ComplexGrid> {
        self.check_frame(frame)?;
        Ok(self.fft.forward_real(frame))
    }

    /// Complex subband coefficients from a precomputed frame spectrum.
    pub fn band_from_spectrum(&self, spectrum: &ComplexGrid, band: usize) -> ComplexGrid {
        let mut c = ComplexGrid::from_elem((self.height, self.width), Complex64::new(0.0, 0.0));
        self.band_into(spectrum, band, &mut c);
        c
    }

    /// [`Self::band_from_spectrum`] into an existing buffer, touching only
    /// the band's frequency support.
    pub fn band_into(&self, spectrum: &ComplexGrid, band: usize, out: &mut ComplexGrid) {
        let norm = 1.0 / (self.width * self.height) as f64;
        let src = spectrum.as_slice().expect("spectra are kept in standard layout");
        let dst = out.as_slice_mut().expect("complex grids are kept in standard layout");
        dst.fill(Complex64::new(0.0, 0.0));
        for &(i, m) in &self.band_support[band] {
            dst[i] = src[i] * (m * norm);
        }
        self.fft.inverse_unscaled(out);
    }

    /// [`Self::accumulate_band`] transforming `coeffs` in place.
    pub fn accumulate_band_in_place(&self, acc: &mut ComplexGrid, band: usize, coeffs: &mut ComplexGrid) {
        self.fft.forward(coeffs);
        let src = coeffs.as_slice().expect("complex grids are kept in standard layout");
        let dst = acc.as_slice_mut().expect("complex grids are kept in standard layout");
        for &(i, m) in &self.band_support[band] {
            dst[i] += src[i] * (2.0 * m);
        }
    }

    fn filtered_real(&self, spectrum: &ComplexGrid, mask: &Grid) -> Grid {
        let mut c = spectrum.clone();
        Zip::from(&mut c).and(mask).for_each(|c, &m| *c *= m);
        self.fft.inverse(&mut c);
        c.mapv(|v| v.re)
    }

    /// Adds the synthesis contribution `2 FFT(coeffs) B` of one band into a
    /// spectral accumulator.
    pub fn accumulate_band(&self, acc: &mut ComplexGrid, band: usize, coeffs: &ComplexGrid) {
        self.accumulate_band_owned(acc, band, coeffs.clone());
    }

    /// [`Self::accumulate_band`] reusing the coefficient buffer.
    pub fn accumulate_band_owned(&self, acc: &mut ComplexGrid, band: usize, mut c: ComplexGrid) {
        self.accumulate_band_in_place(acc, band, &mut c);
    }

    /// Synthesis contribution of the untouched residuals, given the frame
    /// spectrum.
    pub fn residual_spectrum(&self, spectrum: &ComplexGrid) -> ComplexGrid {
        let mut out = spectrum.clone();
        Zip::from(&mut out)
            .and(&self.highpass_mask)
            .and(&self.lowpass_mask)
            .for_each(|c, &h, &l| *c *= h * h + l * l);
        out
    }

    /// Real part of the inverse transform of a synthesis accumulator.
    pub fn synthesize(&self, mut acc: ComplexGrid) -> Grid {
        self.fft.inverse(&mut acc);
        acc.mapv(|c| c.re)
    }

    pub fn decompose(&self, frame: &Grid) -> Result<ComplexPyramid> {
        let spectrum = self.spectrum(frame)?;
        let bands = (0..self.n_bands())
            .into_par_iter()
            .map(|b| self.band_from_spectrum(&spectrum, b))
            .collect();
        Ok(ComplexPyramid {
            bands,
            low_residual: self.filtered_real(&spectrum, &self.lowpass_mask),
            high_residual: self.filtered_real(&spectrum, &self.highpass_mask),
            provenance: self.provenance(),
        })
    }

    pub fn reconstruct(&self, pyr: &ComplexPyramid) -> Result<Grid> {
        if pyr.provenance != self.provenance() || pyr.bands.len() != self.n_bands() {
            return Err(Error::ProvenanceMismatch);
        }
        let mut acc = self.fft.forward_real(&pyr.high_residual);
        Zip::from(&mut acc)
            .and(&self.highpass_mask)
            .for_each(|c, &m| *c *= m);
        let mut low = self.fft.forward_real(&pyr.low_residual);
        Zip::from(&mut low).and(&self.lowpass_mask).for_each(|c, &m| *c *= m);
        acc += &low;
        for (b, coeffs) in pyr.bands.iter().enumerate() {
            self.accumulate_band(&mut acc, b, coeffs);
        }
        Ok(self.synthesize(acc))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            width: self.width,
            height: self.height,
            n_scales: self.n_scales,
            n_orientations: self.n_orientations,
            bands_per_octave: self.bands_per_octave,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub width: usize,
    pub height: usize,
    pub n_scales: usize,
    pub n_orientations: usize,
    pub bands_per_octave: usize,
}

#[derive(Debug, Clone)]
pub struct ComplexPyramid {
    /// Indexed `scale * n_orientations + orientation`, each at full
    /// frame resolution.
    pub bands: Vec<ComplexGrid>,
    pub low_residual: Grid,
    pub high_residual: Grid,
    pub provenance: Provenance,
}

impl ComplexPyramid {
    pub fn zeros(bank: &FilterBank) -> Self {
        let shape = (bank.height, bank.width);
        Self {
            bands: vec![ComplexGrid::zeros(shape); bank.n_bands()],
            low_residual: Grid::zeros(shape),
            high_residual: Grid::zeros(shape),
            provenance: bank.provenance(),
        }
    }

    pub fn band_energy(&self, band: usize) -> f64 {
        self.bands[band].iter().map(|c| c.norm_sqr()).sum()
    }
}

pub fn make_filter_bank(
    width: usize,
    height: usize,
    n_scales: usize,
    n_orientations: usize,
) -> Result<FilterBank> {
    FilterBank::new(width, height, n_scales, n_orientations)
}

pub fn decompose(frame: &Grid, bank: &FilterBank) -> Result<ComplexPyramid> {
    bank.decompose(frame)
}

pub fn reconstruct(pyr: &ComplexPyramid, bank: &FilterBank) -> Result<Grid> {
    bank.reconstruct(pyr)
}

/// Writes per-band magnitude and phase as 16-bit PGM files, each with a
/// `.txt` sidecar carrying scale, orientation and centre frequency.
pub fn dump_pyramid(pyr: &ComplexPyramid, bank: &FilterBank, dir: &Path, prefix: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (b, band) in pyr.bands.iter().enumerate() {
        let (s, o) = bank.band_scale_orientation(b);
        let mag = band.mapv(|c| c.norm());
        let max_mag = mag.iter().cloned().fold(0.0, f64::max);
        let norm = if max_mag > 0.0 { 1.0 / max_mag } else { 0.0 };
        let phase = band.mapv(|c| (c.arg() + PI) / (2.0 * PI));
        let stem = format!("{prefix}_s{s}_o{o}");
        imageio::write_pgm16(&mag.mapv(|m| m * norm), &dir.join(format!("{stem}_mag.pgm")))?;
        imageio::write_pgm16(&phase, &dir.join(format!("{stem}_phase.pgm")))?;
        let header = format!(
            "scale = {s}\norientation = {o}\norientation_rad = {}\ncenter_frequency_rad_per_px = {}\nmagnitude_max = {max_mag}\nphase_encoding = \"(phase + pi) / (2 pi)\"\n",
            bank.orientation_angle(o),
            bank.center_frequency(s),
        );
        let path = dir.join(format!("{stem}.txt"));
        std::fs::write(&path, header).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_shape_fn((h, w), |_| rng.random::<f64>())
    }

    #[test]
    fn half_octave_bank_is_a_tight_frame() {
        let bank = FilterBank::with_bands_per_octave(64, 64, 8, 4, 2).unwrap();
        assert_eq!(bank.n_bands(), 32);
        assert!(bank.tiling_error() < 1e-12);
        let f = Grid::from_shape_fn((64, 64), |(y, x)| ((x * 7 + y * 13) % 17) as f64 / 17.0);
        let r = bank.reconstruct(&bank.decompose(&f).unwrap()).unwrap();
        assert!((&r - &f).iter().all(|d| d.abs() < 1e-10));
        assert!((bank.center_frequency(1) - PI / 2.0).abs() < 1e-15);
        assert!(FilterBank::with_bands_per_octave(64, 64, 9, 4, 2).is_err());
        assert!(FilterBank::with_bands_per_octave(64, 64, 4, 4, 0).is_err());
    }

    #[test]
    fn tiling_identity_64x64() {
        let bank = make_filter_bank(64, 64, 3, 4).unwrap();
        assert!(bank.tiling_error() < 1e-6, "{}", bank.tiling_error());
        for m in bank.band_masks.iter().chain([&bank.lowpass_mask, &bank.highpass_mask]) {
            assert!(m.iter().all(|&v| (0.0..=1.0 + 1e-9).contains(&v)));
        }
    }

    #[test]
    fn tiling_identity_two_orientations() {
        let bank = make_filter_bank(64, 64, 3, 2).unwrap();
        assert!(bank.tiling_error() < 1e-6);
        // cos^1 lobes: the horizontal band at angle 0 peaks at the band gain.
        let m = bank.band_mask(bank.band_index(0, 0));
        let peak = m.iter().cloned().fold(0.0, f64::max);
        assert!((peak - 1.0).abs() < 1e-9);
    }

    #[test]
    fn too_many_scales_and_degenerate_sizes() {
        assert!(matches!(
            make_filter_bank(64, 64, 5, 4),
            Err(Error::TooManyScales { max: 4, .. })
        ));
        assert!(make_filter_bank(64, 64, 4, 4).is_ok());
        assert!(matches!(
            make_filter_bank(8, 64, 1, 4),
            Err(Error::DegenerateDimensions { .. })
        ));
        assert!(matches!(
            make_filter_bank(33, 64, 1, 4),
            Err(Error::DegenerateDimensions { .. })
        ));
    }

    #[test]
    fn constant_frame_lives_in_lowpass() {
        let bank = make_filter_bank(32, 32, 2, 4).unwrap();
        let f = Grid::from_elem((32, 32), 0.7);
        let p = bank.decompose(&f).unwrap();
        for b in &p.bands {
            assert!(b.iter().all(|c| c.norm() < 1e-10));
        }
        assert!(p.low_residual.iter().all(|&v| (v - 0.7).abs() < 1e-12));
        assert!(p.high_residual.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn impulse_round_trip() {
        let bank = make_filter_bank(64, 64, 4, 4).unwrap();
        let mut f = Grid::zeros((64, 64));
        f[[32, 32]] = 1.0;
        let r = bank.reconstruct(&bank.decompose(&f).unwrap()).unwrap();
        assert!(crate::grid::rms_diff(&f, &r) < 1e-6);
    }

    #[test]
    fn noise_round_trip_and_zero_pyramid() {
        let bank = make_filter_bank(48, 32, 2, 3).unwrap();
        let f = noise(48, 32, 3);
        let p = bank.decompose(&f).unwrap();
        let r = bank.reconstruct(&p).unwrap();
        assert!(crate::grid::rms_diff(&f, &r) < 1e-6);

        let z = bank.reconstruct(&ComplexPyramid::zeros(&bank)).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));

        // Zero phase rotation is an identity modification.
        let mut rotated = p.clone();
        for b in &mut rotated.bands {
            b.mapv_inplace(|c| c * Complex64::from_polar(1.0, 0.0));
        }
        let r2 = bank.reconstruct(&rotated).unwrap();
        assert!(crate::grid::rms_diff(&r, &r2) < 1e-12);
    }

    #[test]
    fn provenance_mismatch() {
        let a = make_filter_bank(32, 32, 2, 4).unwrap();
        let b = make_filter_bank(32, 32, 3, 4).unwrap();
        let p = a.decompose(&Grid::zeros((32, 32))).unwrap();
        assert!(matches!(b.reconstruct(&p), Err(Error::ProvenanceMismatch)));
        assert!(matches!(
            a.decompose(&Grid::zeros((16, 32))),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sinusoid_energy_concentrates_in_matching_band() {
        let n = 64;
        let bank = make_filter_bank(n, n, 4, 4).unwrap();
        // Scale 1 centre: pi/4 rad/px, i.e. 8 cycles across 64 px.
        let omega = bank.center_frequency(1);
        let f = Grid::from_shape_fn((n, n), |(_, x)| (omega * x as f64).cos());
        let p = bank.decompose(&f).unwrap();
        let energies: Vec<f64> = (0..bank.n_bands()).map(|b| p.band_energy(b)).collect();
        let total: f64 = energies.iter().sum();
        let in_scale: f64 = (0..4).map(|o| energies[bank.band_index(1, o)]).sum();
        assert!(in_scale / total > 0.99, "scale fraction {}", in_scale / total);
        // Angular share at the band centre: alpha_K^2 cos^6(0) = 64/80.
        let target = energies[bank.band_index(1, 0)];
        assert!((target / total - 0.8).abs() < 0.01, "fraction {}", target / total);
    }

    #[test]
    fn shift_maps_to_phase() {
        let n = 64;
        let bank = make_filter_bank(n, n, 4, 4).unwrap();
        let omega = bank.center_frequency(1);
        let delta = 0.6;
        let a = Grid::from_shape_fn((n, n), |(_, x)| (omega * x as f64).cos());
        let b = Grid::from_shape_fn((n, n), |(_, x)| (omega * (x as f64 - delta)).cos());
        let band = bank.band_index(1, 0);
        let ca = &bank.decompose(&a).unwrap().bands[band];
        let cb = &bank.decompose(&b).unwrap().bands[band];
        let dphi = (cb[[20, 20]] * ca[[20, 20]].conj()).arg();
        assert!((dphi.abs() - omega * delta).abs() < 0.05 * omega * delta);
        // Positive shift gives negative phase for positive-frequency content.
        assert!(dphi < 0.0);
    }

    #[test]
    fn energy_budget_parseval() {
        let bank = make_filter_bank(64, 64, 4, 4).unwrap();
        let f = noise(64, 64, 11);
        let p = bank.decompose(&f).unwrap();
        let frame_e: f64 = f.iter().map(|v| v * v).sum();
        let bands_e: f64 = (0..bank.n_bands()).map(|b| 2.0 * p.band_energy(b)).sum();
        let res_e: f64 = p
            .high_residual
            .iter()
            .chain(p.low_residual.iter())
            .map(|v| v * v)
            .sum();
        assert!(((bands_e + res_e) - frame_e).abs() / frame_e < 1e-3);
    }
}
