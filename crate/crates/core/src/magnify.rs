//! Phase-based magnification of the quasi-static deformation mode.
//!
//! Per subband coefficient the phase difference to a reference frame is
//! filtered in time with an ideal DFT band, multiplied by `alpha` and added
//! back onto the coefficient phase, so band-limited motion `d(t)` is
//! re-rendered as `(1 + alpha) d(t)`.
//!
//! A finite DFT window treats a monotone drift as a sawtooth whose
//! harmonics spill over every bin, so an ideal low-pass returns roughly
//! half the drift at the last frame. When the band keeps DC the filter
//! therefore also carries the linear-drift component of each series: its
//! slope is estimated from the first stopband harmonic only (where the
//! ramp's sawtooth has its largest out-of-band component), leaving every
//! other DFT bin exactly passed or zeroed. The result is still a linear,
//! idempotent projection. Filtered phases are finally anchored to zero at
//! the reference frame, which leaves that frame unmodified.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI, TAU};
use std::sync::Arc;

use ndarray::{Array2, Zip};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::{box_mean, ComplexGrid, Grid};
use crate::ingest::FrameSequence;
use crate::pyramid::{ComplexPyramid, FilterBank};

pub const DEFAULT_ALPHA: f64 = 15.0;
pub const DEFAULT_CUTOFF_PERIOD_HOURS: f64 = 12.0;
pub const DEFAULT_AMPLITUDE_FLOOR: f64 = 1e-4;
pub const DEFAULT_WIENER_WINDOW: usize = 5;

/// Temporal passband in Hz. `low_cutoff_hz == 0` keeps DC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalBand {
    pub low_cutoff_hz: f64,
    pub high_cutoff_hz: f64,
    /// Carry the linear drift of each phase series through the filter
    /// (only meaningful when DC is kept).
    pub carry_drift: bool,
}

impl TemporalBand {
    pub fn new(low_cutoff_hz: f64, high_cutoff_hz: f64) -> Self {
        Self {
            low_cutoff_hz,
            high_cutoff_hz,
            carry_drift: true,
        }
    }

    /// Everything with a period longer than `hours`, DC included.
    pub fn longer_than_hours(hours: f64) -> Self {
        Self::new(0.0, 1.0 / (hours * 3600.0))
    }

    pub fn deformation() -> Self {
        Self::longer_than_hours(DEFAULT_CUTOFF_PERIOD_HOURS)
    }

    pub fn without_drift(mut self) -> Self {
        self.carry_drift = false;
        self
    }

    pub fn validate(&self, frame_interval_s: f64) -> Result<()> {
        let nyquist = 0.5 / frame_interval_s;
        if !(self.low_cutoff_hz >= 0.0) {
            return Err(Error::param("band.low_hz", "must be non-negative"));
        }
        if !(self.high_cutoff_hz > self.low_cutoff_hz) {
            return Err(Error::param("band.high_hz", "must exceed band.low_hz"));
        }
        if self.high_cutoff_hz > nyquist * (1.0 + 1e-9) {
            return Err(Error::param(
                "band.high_hz",
                format!("{} Hz exceeds the Nyquist frequency {} Hz", self.high_cutoff_hz, nyquist),
            ));
        }
        Ok(())
    }
}

impl Default for TemporalBand {
    fn default() -> Self {
        Self::deformation()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagnificationParams {
    pub alpha: f64,
    pub band: TemporalBand,
    pub reference_index: usize,
    /// Coefficients weaker than this fraction of the band's peak magnitude
    /// in the reference frame keep their phase.
    pub amplitude_floor: f64,
}

impl Default for MagnificationParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            band: TemporalBand::deformation(),
            reference_index: 0,
            amplitude_floor: DEFAULT_AMPLITUDE_FLOOR,
        }
    }
}

impl MagnificationParams {
    pub fn validate(&self, n_frames: usize) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::param("alpha", "must be a finite value >= 0"));
        }
        if !(self.amplitude_floor >= 0.0) {
            return Err(Error::param("amplitude_floor", "must be >= 0"));
        }
        if self.reference_index >= n_frames {
            return Err(Error::param(
                "reference_index",
                format!("{} is out of range for {} frames", self.reference_index, n_frames),
            ));
        }
        Ok(())
    }
}

/// Passbands with at most this many DFT bins are applied by direct
/// projection rather than FFT.
const DIRECT_MAX_BINS: usize = 8;

/// Ideal DFT band filter along time for one series length, with optional
/// linear-drift carry.
#[derive(Clone)]
pub struct TemporalFilter {
    len: usize,
    pass: Vec<bool>,
    drift: Option<DriftCarry>,
    /// `(cos, sin)` tables of every passed bin when there are few enough
    /// that projecting onto them beats two FFTs.
    direct: Option<Vec<(Vec<f64>, Vec<f64>)>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

#[derive(Clone, Debug)]
struct DriftCarry {
    /// Real weights whose inner product with a series estimates its slope.
    weights: Vec<f64>,
    /// Out-of-band part of the unit ramp.
    ramp_stop: Vec<f64>,
}

impl std::fmt::Debug for TemporalFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TemporalFilter")
            .field("len", &self.len)
            .field("pass", &self.pass)
            .field("drift", &self.drift.is_some())
            .finish()
    }
}

/// Checks uniform sampling (within 1%) and returns the mean interval.
pub fn uniform_interval(timestamps: &[f64]) -> Result<f64> {
    if timestamps.len() < 2 {
        return Err(Error::TooFewFrames {
            found: timestamps.len(),
            required: 2,
        });
    }
    let n = timestamps.len() - 1;
    let mean = (timestamps[n] - timestamps[0]) / n as f64;
    let deviation = timestamps
        .windows(2)
        .map(|p| ((p[1] - p[0]) - mean).abs() / mean)
        .fold(0.0, f64::max);
    if !(mean > 0.0) || deviation > 0.01 {
        return Err(Error::NonUniformSampling { deviation });
    }
    Ok(mean)
}

impl TemporalFilter {
    pub fn new(band: &TemporalBand, timestamps: &[f64]) -> Result<Self> {
        let n = timestamps.len();
        if n < 4 {
            return Err(Error::TooFewFrames { found: n, required: 4 });
        }
        let dt = uniform_interval(timestamps)?;
        band.validate(dt)?;

        let tol = 1e-9;
        let pass: Vec<bool> = (0..n)
            .map(|k| {
                let f = k.min(n - k) as f64 / (n as f64 * dt);
                f >= band.low_cutoff_hz * (1.0 - tol) && f <= band.high_cutoff_hz * (1.0 + tol)
            })
            .collect();

        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);

        let passed: Vec<usize> = (0..n).filter(|&k| pass[k]).collect();
        let direct = (passed.len() <= DIRECT_MAX_BINS).then(|| {
            passed
                .iter()
                .map(|&k| {
                    (0..n)
                        .map(|t| {
                            let w = 2.0 * PI * ((k * t) % n) as f64 / n as f64;
                            (w.cos(), w.sin())
                        })
                        .unzip()
                })
                .collect()
        });
        let mut filter = Self {
            len: n,
            pass,
            drift: None,
            direct,
            fwd,
            inv,
        };

        let first_stop = (1..=n / 2).find(|&k| !filter.pass[k]);
        if let (true, true, Some(ks)) = (band.carry_drift, filter.pass[0], first_stop) {
            let ramp: Vec<Complex64> = (0..n).map(|t| Complex64::new(t as f64, 0.0)).collect();
            let mut spec = ramp.clone();
            filter.fwd.process(&mut spec);

            let mut harmonic = vec![Complex64::new(0.0, 0.0); n];
            harmonic[ks] = spec[ks];
            harmonic[n - ks] = spec[n - ks];
            filter.inverse_scaled(&mut harmonic);
            let norm: f64 = harmonic.iter().map(|c| c.re * c.re).sum();
            let weights = harmonic.iter().map(|c| c.re / norm).collect();

            let mut stop = spec;
            for (k, c) in stop.iter_mut().enumerate() {
                if filter.pass[k] {
                    *c = Complex64::new(0.0, 0.0);
                }
            }
            filter.inverse_scaled(&mut stop);
            filter.drift = Some(DriftCarry {
                weights,
                ramp_stop: stop.iter().map(|c| c.re).collect(),
            });
        }
        Ok(filter)
    }

    fn inverse_scaled(&self, buf: &mut [Complex64]) {
        self.inv.process(buf);
        let s = 1.0 / self.len as f64;
        buf.iter_mut().for_each(|c| *c *= s);
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Per-bin pass flags in DFT order.
    pub fn passband(&self) -> &[bool] {
        &self.pass
    }

    pub fn carries_drift(&self) -> bool {
        self.drift.is_some()
    }

    /// Filters a complex series in place. Real and imaginary parts are
    /// filtered independently, which lets two real series share one FFT.
    pub fn apply_complex(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.len);
        let slope = self.drift.as_ref().map(|d| {
            buf.iter()
                .zip(&d.weights)
                .fold(Complex64::new(0.0, 0.0), |acc, (z, w)| acc + z * w)
        });
        self.fwd.process(buf);
        for (c, &p) in buf.iter_mut().zip(&self.pass) {
            if !p {
                *c = Complex64::new(0.0, 0.0);
            }
        }
        self.inverse_scaled(buf);
        if let (Some(d), Some(s)) = (&self.drift, slope) {
            for (c, r) in buf.iter_mut().zip(&d.ramp_stop) {
                *c += s * r;
            }
        }
    }

    pub fn apply(&self, series: &mut [f64]) {
        let mut buf: Vec<Complex64> = series.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.apply_complex(&mut buf);
        for (s, c) in series.iter_mut().zip(&buf) {
            *s = c.re;
        }
    }

    /// Real-series equivalent of [`apply`](Self::apply) by projection onto
    /// the passed bins.
    fn apply_direct(&self, basis: &[(Vec<f64>, Vec<f64>)], series: &mut [f64]) {
        let n = self.len as f64;
        let slope = self
            .drift
            .as_ref()
            .map(|d| series.iter().zip(&d.weights).map(|(x, w)| x * w).sum::<f64>());
        let coeffs: Vec<(f64, f64)> = basis
            .iter()
            .map(|(c, s)| {
                let (mut a, mut b) = (0.0, 0.0);
                for ((x, c), s) in series.iter().zip(c).zip(s) {
                    a += x * c;
                    b += x * s;
                }
                (a / n, b / n)
            })
            .collect();
        for (t, v) in series.iter_mut().enumerate() {
            *v = coeffs
                .iter()
                .zip(basis)
                .map(|((a, b), (c, s))| a * c[t] + b * s[t])
                .sum();
        }
        if let (Some(d), Some(s)) = (&self.drift, slope) {
            for (v, r) in series.iter_mut().zip(&d.ramp_stop) {
                *v += s * r;
            }
        }
    }

    /// Filters every contiguous length-`len` series in `data`.
    pub fn apply_rows(&self, data: &mut [f64]) {
        let n = self.len;
        assert_eq!(data.len() % n, 0);
        if let Some(basis) = &self.direct {
            data.par_chunks_mut(n).for_each(|row| self.apply_direct(basis, row));
            return;
        }
        data.par_chunks_mut(2 * n).for_each_init(
            || vec![Complex64::new(0.0, 0.0); n],
            |buf, chunk| {
                if chunk.len() == 2 * n {
                    let (a, b) = chunk.split_at_mut(n);
                    for ((z, &x), &y) in buf.iter_mut().zip(a.iter()).zip(b.iter()) {
                        *z = Complex64::new(x, y);
                    }
                    self.apply_complex(buf);
                    for ((z, x), y) in buf.iter().zip(a.iter_mut()).zip(b.iter_mut()) {
                        *x = z.re;
                        *y = z.im;
                    }
                } else {
                    self.apply(chunk);
                }
            },
        );
    }
}

impl TemporalFilter {
    /// Filters every row, then, if DC passes, shifts each row so it is zero
    /// at `reference`. Noise in the reference frame's own phase is a
    /// constant offset of every difference and would otherwise pass the
    /// DC bin and be magnified into every output frame.
    pub fn apply_rows_anchored(&self, data: &mut [f64], reference: usize) {
        assert!(reference < self.len);
        self.apply_rows(data);
        if self.pass[0] {
            data.par_chunks_mut(self.len).for_each(|row| {
                let r = row[reference];
                row.iter_mut().for_each(|v| *v -= r);
            });
        }
    }
}

/// Wrapped phase differences to a reference frame, one `(pixels x frames)`
/// array per band (row `y * width + x`, column = frame).
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSeries {
    pub bands: Vec<Array2<f64>>,
    pub reference_index: usize,
    pub width: usize,
    pub height: usize,
}

impl PhaseSeries {
    pub fn n_frames(&self) -> usize {
        self.bands.first().map_or(0, |b| b.ncols())
    }

    pub fn series(&self, band: usize, x: usize, y: usize) -> ndarray::ArrayView1<'_, f64> {
        self.bands[band].row(y * self.width + x)
    }
}

/// `atan(x)` for `x` in `[0, 1]`: one angle-addition step down to
/// `|x| <= tan(pi/12)`, then the odd series to `x^13` (error below 1e-9).
#[inline]
fn atan_unit(x: f64) -> f64 {
    const TAN_PI_12: f64 = 0.267_949_192_431_122_7;
    const SQRT_3: f64 = 1.732_050_807_568_877_2;
    let (x, offset) = if x > TAN_PI_12 {
        ((x * SQRT_3 - 1.0) / (x + SQRT_3), FRAC_PI_6)
    } else {
        (x, 0.0)
    };
    let z = x * x;
    let series = 1.0
        + z * (-1.0 / 3.0 + z * (1.0 / 5.0 + z * (-1.0 / 7.0 + z * (1.0 / 9.0 + z * (-1.0 / 11.0 + z / 13.0)))));
    offset + x * series
}

/// `arg(c)` in `(-pi, pi]`, about twice as fast as `f64::atan2` and within
/// 1e-9 rad of it. Phase extraction dominates magnification cost.
#[inline]
pub fn fast_arg(c: Complex64) -> f64 {
    let (ax, ay) = (c.re.abs(), c.im.abs());
    if ax == 0.0 && ay == 0.0 {
        return c.im.atan2(c.re);
    }
    let a = if ay <= ax {
        atan_unit(ay / ax)
    } else {
        FRAC_PI_2 - atan_unit(ax / ay)
    };
    let a = if c.re < 0.0 { PI - a } else { a };
    if c.im.is_sign_negative() {
        -a
    } else {
        a
    }
}

/// `exp(i theta)`. The argument is reduced to `[-pi, pi]` in double
/// precision and evaluated in single precision: the 1e-7 error sits far
/// below the 16-bit output quantisation and halves the cost.
#[inline]
fn unit_phasor(theta: f64) -> Complex64 {
    let r = theta - TAU * (theta / TAU).round();
    let (s, c) = (r as f32).sin_cos();
    Complex64::new(c as f64, s as f64)
}

/// Per-pixel amplitude gate: `floor` as a fraction of the reference peak.
fn amplitude_threshold(reference: &ComplexGrid, floor: f64) -> f64 {
    let peak = reference.iter().map(|c| c.norm()).fold(0.0, f64::max);
    floor * peak
}

/// Phase differences of one band, frame-major (`out[t * npix + i]`).
/// Pixels under the amplitude floor in the reference or the frame, and the
/// whole reference frame, get zero.
fn band_phase_frame_major(coeffs: &[ComplexGrid], reference_index: usize, floor: f64, out: &mut [f64]) {
    let reference = &coeffs[reference_index];
    let threshold = amplitude_threshold(reference, floor);
    let npix = reference.len();
    let threshold_sqr = threshold * threshold;
    let conj_ref: Vec<Option<Complex64>> = reference
        .iter()
        .map(|c| (c.norm() >= threshold && c.norm() > 0.0).then(|| c.conj()))
        .collect();
    out.par_chunks_mut(npix)
        .zip(coeffs.par_iter())
        .enumerate()
        .for_each(|(t, (row, c))| {
            if t == reference_index {
                row.fill(0.0);
                return;
            }
            for ((o, c_t), r) in row.iter_mut().zip(c.iter()).zip(&conj_ref) {
                *o = match r {
                    Some(r) if c_t.norm_sqr() >= threshold_sqr => fast_arg(c_t * r),
                    _ => 0.0,
                };
            }
        });
}

/// Phase differences of one band across frames, pixel-major.
fn band_phase_differences(coeffs: &[ComplexGrid], reference_index: usize, floor: f64) -> Array2<f64> {
    let (n, npix) = (coeffs.len(), coeffs[reference_index].len());
    let mut frame_major = vec![0.0; n * npix];
    band_phase_frame_major(coeffs, reference_index, floor, &mut frame_major);
    let mut out = vec![0.0; n * npix];
    transpose::transpose(&frame_major, &mut out, npix, n);
    Array2::from_shape_vec((npix, n), out).expect("shape matches buffer")
}

/// Counts pixel steps between consecutive frames larger than `pi / 2`,
/// given frame-major phases.
fn count_large_steps(frame_major: &[f64], npix: usize) -> usize {
    let frames: Vec<&[f64]> = frame_major.chunks(npix).collect();
    frames
        .par_windows(2)
        .map(|p| {
            p[0].iter()
                .zip(p[1])
                .filter(|(a, b)| {
                    let d = (*b - *a).abs();
                    // |d| < 2 pi since both lie in (-pi, pi].
                    d.min(2.0 * PI - d) > 0.5 * PI
                })
                .count()
        })
        .sum()
}

fn check_pyramids(pyramids: &[ComplexPyramid]) -> Result<()> {
    let first = pyramids.first().ok_or(Error::EmptySeries)?;
    if pyramids.iter().any(|p| p.provenance != first.provenance || p.bands.len() != first.bands.len()) {
        return Err(Error::ProvenanceMismatch);
    }
    Ok(())
}

/// `arg(c_t conj(c_ref))` per coefficient; coefficients under the
/// amplitude floor carry zero.
pub fn phase_differences(
    pyramids: &[ComplexPyramid],
    reference_index: usize,
    amplitude_floor: f64,
) -> Result<PhaseSeries> {
    check_pyramids(pyramids)?;
    if reference_index >= pyramids.len() {
        return Err(Error::param("reference_index", "out of range"));
    }
    let prov = pyramids[0].provenance;
    let bands = (0..pyramids[0].bands.len())
        .map(|b| {
            let coeffs: Vec<ComplexGrid> = pyramids.iter().map(|p| p.bands[b].clone()).collect();
            band_phase_differences(&coeffs, reference_index, amplitude_floor)
        })
        .collect();
    Ok(PhaseSeries {
        bands,
        reference_index,
        width: prov.width,
        height: prov.height,
    })
}

pub fn temporal_filter(series: &PhaseSeries, band: &TemporalBand, timestamps: &[f64]) -> Result<PhaseSeries> {
    if timestamps.len() != series.n_frames() {
        return Err(Error::ShapeMismatch(format!(
            "{} timestamps for {} frames",
            timestamps.len(),
            series.n_frames()
        )));
    }
    let filter = TemporalFilter::new(band, timestamps)?;
    let mut out = series.clone();
    for b in &mut out.bands {
        filter.apply_rows_anchored(b.as_slice_mut().expect("phase arrays are contiguous"), series.reference_index);
    }
    Ok(out)
}

fn amplify_in_place(coeffs: &mut ComplexGrid, phases: &[f64], alpha: f64) {
    for (c, &phi) in coeffs.iter_mut().zip(phases) {
        if phi != 0.0 {
            *c *= unit_phasor(alpha * phi);
        }
    }
}

/// Multiplies each coefficient by `exp(i alpha phi_filtered)`, passes the
/// residuals through and reconstructs frames clamped to `[0, 1]`.
pub fn amplify_and_reconstruct(
    pyramids: &[ComplexPyramid],
    filtered: &PhaseSeries,
    p: &MagnificationParams,
    bank: &FilterBank,
    timestamps: &[f64],
) -> Result<FrameSequence> {
    check_pyramids(pyramids)?;
    if filtered.n_frames() != pyramids.len()
        || filtered.bands.len() != bank.n_bands()
        || timestamps.len() != pyramids.len()
    {
        return Err(Error::ShapeMismatch(
            "pyramids, phase series and timestamps disagree".into(),
        ));
    }
    let frames = pyramids
        .par_iter()
        .enumerate()
        .map(|(t, pyr)| {
            let mut modified = pyr.clone();
            for (b, band) in modified.bands.iter_mut().enumerate() {
                let column: Vec<f64> = filtered.bands[b].column(t).to_vec();
                amplify_in_place(band, &column, p.alpha);
            }
            bank.reconstruct(&modified).map(|f| f.mapv(|v| v.clamp(0.0, 1.0)))
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, timestamps.to_vec())
}

#[derive(Debug, Clone)]
pub struct Magnified {
    pub frames: FrameSequence,
    pub warnings: Vec<String>,
}

/// Band-by-band magnification of a whole sequence. Equivalent to
/// `decompose -> phase_differences -> temporal_filter ->
/// amplify_and_reconstruct` but holds only one band of every frame at a
/// time.
pub fn magnify_sequence(seq: &FrameSequence, bank: &FilterBank, p: &MagnificationParams) -> Result<Magnified> {
    p.validate(seq.len())?;
    let filter = TemporalFilter::new(&p.band, seq.timestamps())?;
    let spectra = seq
        .frames()
        .par_iter()
        .map(|f| bank.spectrum(f))
        .collect::<Result<Vec<_>>>()?;
    let mut acc: Vec<ComplexGrid> = spectra.par_iter().map(|s| bank.residual_spectrum(s)).collect();

    let (n, npix) = (seq.len(), bank.width() * bank.height());
    let zero = Complex64::new(0.0, 0.0);
    let mut coeffs: Vec<ComplexGrid> = (0..n)
        .map(|_| ComplexGrid::from_elem((bank.height(), bank.width()), zero))
        .collect();
    let mut frame_major = vec![0.0; n * npix];
    let mut pixel_major = vec![0.0; n * npix];
    let mut warnings = Vec::new();
    for b in 0..bank.n_bands() {
        coeffs
            .par_iter_mut()
            .zip(spectra.par_iter())
            .for_each(|(c, s)| bank.band_into(s, b, c));
        band_phase_frame_major(&coeffs, p.reference_index, p.amplitude_floor, &mut frame_major);
        let steps = count_large_steps(&frame_major, npix);
        if steps > 0 {
            let (s, o) = bank.band_scale_orientation(b);
            let msg = format!(
                "band (scale {s}, orientation {o}): {steps} inter-frame phase steps exceed pi/2; motion may be too large for unwrapped phase"
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        transpose::transpose(&frame_major, &mut pixel_major, npix, n);
        filter.apply_rows_anchored(&mut pixel_major, p.reference_index);
        transpose::transpose(&pixel_major, &mut frame_major, n, npix);
        acc.par_iter_mut()
            .zip(coeffs.par_iter_mut())
            .zip(frame_major.par_chunks(npix))
            .for_each(|((acc, c), phi)| {
                amplify_in_place(c, phi, p.alpha);
                bank.accumulate_band_in_place(acc, b, c);
            });
    }
    let frames: Vec<Grid> = acc
        .into_par_iter()
        .map(|a| bank.synthesize(a).mapv(|v| v.clamp(0.0, 1.0)))
        .collect();
    Ok(Magnified {
        frames: FrameSequence::new(frames, seq.timestamps().to_vec())?,
        warnings,
    })
}

/// Adaptive local-statistics Wiener filter with reflective boundary.
///
/// `noise_variance = None` estimates the noise as the mean of all local
/// variances.
pub fn wiener_smooth(frame: &Grid, window: usize, noise_variance: Option<f64>) -> Result<Grid> {
    if window % 2 == 0 {
        return Err(Error::EvenWindow(window));
    }
    if window < 3 {
        return Err(Error::param("wiener.window", "must be at least 3"));
    }
    if let Some(nv) = noise_variance {
        if !(nv >= 0.0) {
            return Err(Error::param("wiener.noise_variance", "must be >= 0"));
        }
    }
    // Statistics are taken on values relative to one pixel so that flat
    // regions produce exact zeros.
    let origin = frame.first().copied().unwrap_or(0.0);
    let d = frame.mapv(|v| v - origin);
    let mean = box_mean(&d, window);
    let mean_sq = box_mean(&d.mapv(|v| v * v), window);
    let var = Zip::from(&mean_sq).and(&mean).map_collect(|&m2, &m| (m2 - m * m).max(0.0));
    let nu2 = noise_variance.unwrap_or_else(|| var.mean().unwrap_or(0.0));

    let mut out = frame.clone();
    Zip::from(&mut out)
        .and(&d)
        .and(&mean)
        .and(&var)
        .for_each(|o, &dv, &m, &s2| {
            let denom = s2.max(nu2);
            let gain = if denom > 0.0 { (s2 - nu2).max(0.0) / denom } else { 1.0 };
            if gain < 1.0 {
                *o += (gain - 1.0) * (dv - m);
            }
        });
    Ok(out)
}
