//! Loading and normalising image sequences.
//!
//! A manifest is a UTF-8 text file with one `<relative_path>,<timestamp_seconds>`
//! line per frame; paths are resolved against the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Zip;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use rustfft::num_complex::Complex64;

use crate::grid::{crop_even, gaussian_kernel, ComplexGrid, Fft2, Grid};
use crate::imageio::{self, Planes};

pub const MANIFEST_NAME: &str = "manifest.csv";

/// Ordered stack of grey frames in `[0, 1]` with strictly increasing
/// timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Grid>,
    timestamps: Vec<f64>,
    width: usize,
    height: usize,
    frame_interval_s: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<Grid>, timestamps: Vec<f64>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::TooFewFrames {
                found: frames.len(),
                required: 2,
            });
        }
        if timestamps.len() != frames.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} frames but {} timestamps",
                frames.len(),
                timestamps.len()
            )));
        }
        let (height, width) = frames[0].dim();
        for f in &frames {
            let (h, w) = f.dim();
            if (w, h) != (width, height) {
                return Err(Error::DimensionMismatch {
                    expected: (width, height),
                    found: (w, h),
                });
            }
        }
        for (i, pair) in timestamps.windows(2).enumerate() {
            if !(pair[1] > pair[0]) {
                return Err(Error::NonMonotoneTimestamps { index: i + 1 });
            }
        }
        for (i, f) in frames.iter().enumerate() {
            if let Some(&v) = f.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                if !v.is_finite() {
                    return Err(Error::NonFiniteInput);
                }
                return Err(Error::IntensityOutOfRange { frame: i, value: v });
            }
        }
        let mut deltas: Vec<f64> = timestamps.windows(2).map(|p| p[1] - p[0]).collect();
        deltas.sort_by(|a, b| a.total_cmp(b));
        let m = deltas.len();
        let frame_interval_s = if m % 2 == 1 {
            deltas[m / 2]
        } else {
            0.5 * (deltas[m / 2 - 1] + deltas[m / 2])
        };
        Ok(Self {
            frames,
            timestamps,
            width,
            height,
            frame_interval_s,
        })
    }

    /// Builds a sequence sampled every `interval_s` seconds from zero.
    pub fn uniform(frames: Vec<Grid>, interval_s: f64) -> Result<Self> {
        let ts = (0..frames.len()).map(|i| i as f64 * interval_s).collect();
        Self::new(frames, ts)
    }

    pub fn frames(&self) -> &[Grid] {
        &self.frames
    }
    pub fn frame(&self, i: usize) -> &Grid {
        &self.frames[i]
    }
    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }
    pub fn len(&self) -> usize {
        self.frames.len()
    }
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn frame_interval_s(&self) -> f64 {
        self.frame_interval_s
    }

    pub fn into_frames(self) -> Vec<Grid> {
        self.frames
    }

    /// Applies `f` to every frame (in parallel) and revalidates.
    pub fn map_frames<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&Grid) -> Grid + Sync + Send,
    {
        let frames = self.frames.par_iter().map(f).collect();
        Self::new(frames, self.timestamps.clone())
    }

    /// Frames rounded to the 16-bit storage grid.
    pub fn quantized(&self) -> Self {
        let frames = self.frames.par_iter().map(imageio::quantize_grid).collect();
        Self {
            frames,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IlluminationMode {
    /// Flat-field: `f * mean(b) / max(b, eps)`.
    #[default]
    Divide,
    /// Background subtraction: `f - b + mean(b)`, which keeps the frame mean.
    Subtract,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IlluminationParams {
    pub sigma_px: f64,
    pub mode: IlluminationMode,
    pub epsilon: f64,
}

impl IlluminationParams {
    pub const DEFAULT_EPSILON: f64 = 1e-6;

    /// Background sigma of `min(width, height) / 8`, divide mode.
    pub fn default_for(width: usize, height: usize) -> Self {
        Self {
            sigma_px: width.min(height) as f64 / 8.0,
            mode: IlluminationMode::Divide,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma_px > 0.0 && self.sigma_px.is_finite()) {
            return Err(Error::param("sigma_px", "must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::param("epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// Manifest entries as `(path, timestamp)`, paths resolved against the
/// manifest directory.
pub fn read_manifest(manifest_path: &Path) -> Result<Vec<(PathBuf, f64)>> {
    if !manifest_path.is_file() {
        return Err(Error::MissingFile(manifest_path.to_path_buf()));
    }
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (path, ts) = line.rsplit_once(',').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected `<path>,<timestamp>`".into(),
        })?;
        let ts: f64 = ts.trim().parse().map_err(|_| Error::Parse {
            line: i + 1,
            message: format!("bad timestamp `{}`", ts.trim()),
        })?;
        if !ts.is_finite() {
            return Err(Error::Parse {
                line: i + 1,
                message: "timestamp must be finite".into(),
            });
        }
        entries.push((base.join(path.trim()), ts));
    }
    Ok(entries)
}

/// Reads a manifest and every frame it lists into a [`FrameSequence`].
/// RGB frames are converted with [`to_grayscale`].
pub fn load_sequence(manifest_path: &Path) -> Result<FrameSequence> {
    let entries = read_manifest(manifest_path)?;
    if entries.len() < 2 {
        return Err(Error::TooFewFrames {
            found: entries.len(),
            required: 2,
        });
    }
    for (i, pair) in entries.windows(2).enumerate() {
        if !(pair[1].1 > pair[0].1) {
            return Err(Error::NonMonotoneTimestamps { index: i + 1 });
        }
    }
    let frames = entries
        .par_iter()
        .map(|(path, _)| match imageio::read_planes(path)? {
            Planes::Gray(g) => Ok(g),
            Planes::Rgb(rgb) => to_grayscale(&rgb),
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, entries.into_iter().map(|(_, t)| t).collect())
}

/// Writes `frame_NNNNN.png` (16-bit) files and a manifest into `dir`,
/// returning the manifest path.
pub fn write_sequence(seq: &FrameSequence, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    seq.frames
        .par_iter()
        .enumerate()
        .try_for_each(|(i, f)| imageio::write_png16(f, &dir.join(frame_file_name(i))))?;
    let mut manifest = String::new();
    for (i, t) in seq.timestamps.iter().enumerate() {
        writeln!(manifest, "{},{}", frame_file_name(i), t).unwrap();
    }
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn frame_file_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

/// Rec.601 luma.
pub fn to_grayscale(rgb: &[Grid; 3]) -> Result<Grid> {
    let [r, g, b] = rgb;
    if r.dim() != g.dim() || r.dim() != b.dim() {
        let (h, w) = r.dim();
        let (hg, wg) = if r.dim() != g.dim() { g.dim() } else { b.dim() };
        return Err(Error::DimensionMismatch {
            expected: (w, h),
            found: (wg, hg),
        });
    }
    if r.iter().chain(g.iter()).chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let mut out = Grid::zeros(r.dim());
    Zip::from(&mut out)
        .and(r)
        .and(g)
        .and(b)
        .for_each(|o, &r, &g, &b| *o = (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0));
    Ok(out)
}

/// Area-average downsampling of one grid; trailing rows/columns that do
/// not fill a block are dropped.
pub fn downsample_grid(g: &Grid, factor: usize) -> Result<Grid> {
    if factor == 0 {
        return Err(Error::ZeroFactor);
    }
    if factor == 1 {
        return Ok(g.clone());
    }
    let (h, w) = g.dim();
    let (oh, ow) = (h / factor, w / factor);
    if oh == 0 || ow == 0 {
        return Err(Error::DegenerateDimensions { width: ow, height: oh });
    }
    let norm = 1.0 / (factor * factor) as f64;
    Ok(Grid::from_shape_fn((oh, ow), |(y, x)| {
        g.slice(ndarray::s![y * factor..(y + 1) * factor, x * factor..(x + 1) * factor])
            .sum()
            * norm
    }))
}

pub fn downsample(seq: &FrameSequence, factor: usize) -> Result<FrameSequence> {
    if factor == 0 {
        return Err(Error::ZeroFactor);
    }
    let frames = seq
        .frames
        .par_iter()
        .map(|f| downsample_grid(f, factor))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, seq.timestamps.clone())
}

/// Drops a trailing row and/or column so both sides are even.
pub fn crop_to_even(seq: &FrameSequence) -> Result<FrameSequence> {
    if seq.width % 2 == 0 && seq.height % 2 == 0 {
        return Ok(seq.clone());
    }
    seq.map_frames(crop_even)
}

/// Smooth background: a Gaussian-weighted local plane fit evaluated at each
/// pixel. Away from the border this equals a Gaussian blur; at the border
/// it stays unbiased for linear shading, where a padded blur would not.
///
/// The weighted moments of the pixel grid do not depend on the frame and
/// are computed once; each frame then needs two zero-padded FFT
/// convolutions.
pub struct BackgroundModel {
    width: usize,
    height: usize,
    fft: Fft2,
    kernel: ComplexGrid,
    /// Per pixel: `[s0, sx, sy, sxx, sxy, syy]` in coordinates centred on
    /// the pixel.
    moments: Vec<[f64; 6]>,
}

impl std::fmt::Debug for BackgroundModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackgroundModel")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish()
    }
}

impl BackgroundModel {
    pub fn new(width: usize, height: usize, sigma_px: f64) -> Self {
        let k = gaussian_kernel(sigma_px);
        let r = k.len() / 2;
        let (pw, ph) = (smooth_size(width + r), smooth_size(height + r));
        let fft = Fft2::new(pw, ph);
        let mut kernel = ComplexGrid::zeros((ph, pw));
        for (i, &ky) in k.iter().enumerate() {
            let y = (i as isize - r as isize).rem_euclid(ph as isize) as usize;
            for (j, &kx) in k.iter().enumerate() {
                let x = (j as isize - r as isize).rem_euclid(pw as isize) as usize;
                kernel[[y, x]] += Complex64::new(ky * kx, 0.0);
            }
        }
        fft.forward(&mut kernel);
        let mut model = Self {
            width,
            height,
            fft,
            kernel,
            moments: Vec::new(),
        };
        let (cx, cy) = (0.5 * (width as f64 - 1.0), 0.5 * (height as f64 - 1.0));
        let xs = Grid::from_shape_fn((height, width), |(_, x)| x as f64 - cx);
        let ys = Grid::from_shape_fn((height, width), |(y, _)| y as f64 - cy);
        let (m0, _) = model.convolve_pair(&Grid::ones((height, width)), None);
        let (mx, my) = model.convolve_pair(&xs, Some(&ys));
        let (mxx, myy) = model.convolve_pair(&(&xs * &xs), Some(&(&ys * &ys)));
        let (mxy, _) = model.convolve_pair(&(&xs * &ys), None);
        model.moments = (0..height * width)
            .map(|i| {
                let (y, x) = (i / width, i % width);
                let (px, py) = (xs[[y, x]], ys[[y, x]]);
                let s0 = m0[[y, x]];
                let (mx, my) = (mx[[y, x]], my[[y, x]]);
                [
                    s0,
                    mx - px * s0,
                    my - py * s0,
                    mxx[[y, x]] - 2.0 * px * mx + px * px * s0,
                    mxy[[y, x]] - px * my - py * mx + px * py * s0,
                    myy[[y, x]] - 2.0 * py * my + py * py * s0,
                ]
            })
            .collect();
        model
    }

    /// Zero-padded convolution of `a` (and optionally `b`, sharing the
    /// transform as the imaginary part) with the Gaussian.
    fn convolve_pair(&self, a: &Grid, b: Option<&Grid>) -> (Grid, Grid) {
        let (pw, ph) = (self.fft.width(), self.fft.height());
        let mut buf = ComplexGrid::zeros((ph, pw));
        for ((y, x), &v) in a.indexed_iter() {
            buf[[y, x]] = Complex64::new(v, b.map_or(0.0, |b| b[[y, x]]));
        }
        self.fft.forward(&mut buf);
        buf.zip_mut_with(&self.kernel, |c, k| *c *= k);
        self.fft.inverse(&mut buf);
        let (h, w) = (self.height, self.width);
        (
            Grid::from_shape_fn((h, w), |(y, x)| buf[[y, x]].re),
            Grid::from_shape_fn((h, w), |(y, x)| buf[[y, x]].im),
        )
    }

    pub fn estimate(&self, f: &Grid) -> Grid {
        assert_eq!(f.dim(), (self.height, self.width));
        let (cx, cy) = (0.5 * (self.width as f64 - 1.0), 0.5 * (self.height as f64 - 1.0));
        let (f0, _) = self.convolve_pair(f, None);
        let fxs = Grid::from_shape_fn(f.dim(), |(y, x)| f[[y, x]] * (x as f64 - cx));
        let fys = Grid::from_shape_fn(f.dim(), |(y, x)| f[[y, x]] * (y as f64 - cy));
        let (fx, fy) = self.convolve_pair(&fxs, Some(&fys));
        Grid::from_shape_fn(f.dim(), |(y, x)| {
            let [s0, sx, sy, sxx, sxy, syy] = self.moments[y * self.width + x];
            let (px, py) = (x as f64 - cx, y as f64 - cy);
            let g0 = f0[[y, x]];
            let gx = fx[[y, x]] - px * g0;
            let gy = fy[[y, x]] - py * g0;
            // Solve [[s0 sx sy] [sx sxx sxy] [sy sxy syy]] [a b c]^T = [g0 gx gy]^T
            // for the intercept a by Cramer's rule.
            let det = s0 * (sxx * syy - sxy * sxy) - sx * (sx * syy - sxy * sy) + sy * (sx * sxy - sxx * sy);
            let num = g0 * (sxx * syy - sxy * sxy) - sx * (gx * syy - sxy * gy) + sy * (gx * sxy - sxx * gy);
            if det.abs() > 1e-12 * s0.powi(3).max(f64::MIN_POSITIVE) {
                num / det
            } else {
                g0 / s0
            }
        })
    }
}

/// Smallest `m >= n` whose only prime factors are 2, 3 and 5.
fn smooth_size(n: usize) -> usize {
    (n.max(1)..)
        .find(|&m| {
            let mut m = m;
            for p in [2, 3, 5] {
                while m % p == 0 {
                    m /= p;
                }
            }
            m == 1
        })
        .expect("unbounded search")
}

pub fn estimate_background(f: &Grid, sigma_px: f64) -> Grid {
    let (h, w) = f.dim();
    BackgroundModel::new(w, h, sigma_px).estimate(f)
}

pub fn correct_frame(f: &Grid, p: &IlluminationParams) -> Grid {
    let (h, w) = f.dim();
    correct_with(&BackgroundModel::new(w, h, p.sigma_px), f, p)
}

fn correct_with(model: &BackgroundModel, f: &Grid, p: &IlluminationParams) -> Grid {
    let background = model.estimate(f);
    match p.mode {
        IlluminationMode::Divide => {
            let mean_b = background.mean().unwrap_or(0.0);
            let mut out = f.clone();
            Zip::from(&mut out)
                .and(&background)
                .for_each(|o, &b| *o = (*o * mean_b / b.max(p.epsilon)).clamp(0.0, 1.0));
            out
        }
        IlluminationMode::Subtract => {
            let mean_b = background.mean().unwrap_or(0.0);
            let mut out = f.clone();
            Zip::from(&mut out)
                .and(&background)
                .for_each(|o, &b| *o = (*o - b + mean_b).clamp(0.0, 1.0));
            out
        }
    }
}

pub fn correct_illumination(seq: &FrameSequence, p: &IlluminationParams) -> Result<FrameSequence> {
    p.validate()?;
    let model = BackgroundModel::new(seq.width(), seq.height(), p.sigma_px);
    seq.map_frames(|f| correct_with(&model, f, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{pearson, rms_diff};

    fn seq_of(frames: Vec<Grid>) -> FrameSequence {
        FrameSequence::uniform(frames, 1.0).unwrap()
    }

    fn texture(w: usize, h: usize) -> Grid {
        // Deterministic smooth-ish texture with period well under the blur.
        Grid::from_shape_fn((h, w), |(y, x)| {
            let (x, y) = (x as f64, y as f64);
            0.5 + 0.2 * (0.9 * x).sin() * (0.7 * y).cos() + 0.1 * (1.3 * x + 0.4 * y).sin()
        })
    }

    #[test]
    fn sequence_invariants() {
        let f = Grid::zeros((4, 4));
        assert!(matches!(
            FrameSequence::new(vec![f.clone()], vec![0.0]),
            Err(Error::TooFewFrames { .. })
        ));
        assert!(matches!(
            FrameSequence::new(vec![f.clone(), f.clone(), f.clone()], vec![0.0, 10.0, 5.0]),
            Err(Error::NonMonotoneTimestamps { index: 2 })
        ));
        assert!(matches!(
            FrameSequence::new(vec![f.clone(), Grid::zeros((4, 5))], vec![0.0, 1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            FrameSequence::new(vec![f.clone(), Grid::from_elem((4, 4), 1.5)], vec![0.0, 1.0]),
            Err(Error::IntensityOutOfRange { frame: 1, .. })
        ));
        let s = FrameSequence::new(vec![f.clone(), f.clone(), f.clone(), f], vec![0.0, 2.0, 3.0, 5.0]).unwrap();
        assert_eq!(s.frame_interval_s(), 2.0);
    }

    #[test]
    fn grayscale_weights() {
        let one = Grid::from_elem((3, 3), 1.0);
        let zero = Grid::zeros((3, 3));
        let white = to_grayscale(&[one.clone(), one.clone(), one.clone()]).unwrap();
        assert!(white.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let red = to_grayscale(&[one.clone(), zero.clone(), zero.clone()]).unwrap();
        assert!(red.iter().all(|&v| v == 0.299));
        let black = to_grayscale(&[zero.clone(), zero.clone(), zero.clone()]).unwrap();
        assert!(black.iter().all(|&v| v == 0.0));
        let mut bad = zero.clone();
        bad[[1, 1]] = f64::NAN;
        assert!(matches!(to_grayscale(&[bad, zero.clone(), zero]), Err(Error::NonFiniteInput)));
    }

    #[test]
    fn downsample_cases() {
        let f = ndarray::arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        let s = seq_of(vec![f.clone(), f.clone()]);
        assert_eq!(downsample(&s, 1).unwrap(), s);
        let d = downsample(&s, 2).unwrap();
        assert_eq!(d.frame(0), &ndarray::arr2(&[[0.5]]));
        assert!(matches!(downsample(&s, 0), Err(Error::ZeroFactor)));

        let checker = Grid::from_shape_fn((256, 256), |(y, x)| ((x + y) % 2) as f64);
        let d = downsample_grid(&checker, 2).unwrap();
        assert_eq!(d.dim(), (128, 128));
        assert!(d.iter().all(|&v| v == 0.5));

        // Trailing partial blocks are dropped.
        let odd = Grid::from_elem((7, 9), 0.25);
        assert_eq!(downsample_grid(&odd, 2).unwrap().dim(), (3, 4));
    }

    #[test]
    fn downsample_composes() {
        let g = Grid::from_shape_fn((24, 36), |(y, x)| ((x * 7 + y * 13) % 17) as f64 / 17.0);
        let a = downsample_grid(&downsample_grid(&g, 2).unwrap(), 3).unwrap();
        let b = downsample_grid(&g, 6).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn illumination_uniform_and_zero_frames() {
        let p = IlluminationParams::default_for(32, 32);
        let c = Grid::from_elem((32, 32), 0.37);
        let out = correct_frame(&c, &p);
        assert!(out.iter().all(|&v| (v - 0.37).abs() < 1e-12));
        let z = correct_frame(&Grid::zeros((32, 32)), &p);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn illumination_removes_ramp() {
        let (w, h) = (128, 128);
        let t = texture(w, h);
        let shaded = Grid::from_shape_fn((h, w), |(y, x)| t[[y, x]] * (0.5 + 0.5 * x as f64 / (w - 1) as f64));
        let p = IlluminationParams {
            sigma_px: 16.0,
            ..IlluminationParams::default_for(w, h)
        };
        let before = pearson(&shaded, &t);
        let out = correct_frame(&shaded, &p);
        let after = pearson(&out, &t);
        assert!(after > 0.99, "r = {after} (was {before})");
    }

    #[test]
    fn illumination_is_nearly_idempotent() {
        let (w, h) = (96, 96);
        let t = texture(w, h);
        let shaded = Grid::from_shape_fn((h, w), |(y, x)| t[[y, x]] * (0.6 + 0.4 * y as f64 / h as f64));
        for mode in [IlluminationMode::Divide, IlluminationMode::Subtract] {
            let p = IlluminationParams {
                sigma_px: 12.0,
                mode,
                epsilon: 1e-6,
            };
            let once = correct_frame(&shaded, &p);
            let twice = correct_frame(&once, &p);
            let first = rms_diff(&shaded, &once);
            let second = rms_diff(&once, &twice);
            assert!(second < 0.01 * first, "{mode:?}: {second} vs {first}");
        }
    }

    #[test]
    fn subtract_preserves_mean() {
        let t = texture(64, 48);
        let p = IlluminationParams {
            sigma_px: 8.0,
            mode: IlluminationMode::Subtract,
            epsilon: 1e-6,
        };
        let out = correct_frame(&t, &p);
        assert!((out.mean().unwrap() - t.mean().unwrap()).abs() < 1e-6);
    }

    #[test]
    fn illumination_rejects_bad_params() {
        let s = seq_of(vec![Grid::zeros((8, 8)), Grid::zeros((8, 8))]);
        let p = IlluminationParams {
            sigma_px: 0.0,
            mode: IlluminationMode::Divide,
            epsilon: 1e-6,
        };
        assert!(matches!(correct_illumination(&s, &p), Err(Error::InvalidParameter { .. })));
    }

    #[test]
    fn manifest_errors_and_white_frames() {
        let dir = tempfile::tempdir().unwrap();
        let white = Grid::from_elem((8, 8), 1.0);
        for i in 0..3 {
            imageio::write_png16(&white, &dir.path().join(format!("w{i}.png"))).unwrap();
        }
        let m = dir.path().join("m.csv");
        std::fs::write(&m, "w0.png,0\nw1.png,1\nw2.png,2\n").unwrap();
        let s = load_sequence(&m).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.frames().iter().all(|f| f.iter().all(|&v| v == 1.0)));

        std::fs::write(&m, "w0.png,0\nw1.png,10\nw2.png,5\n").unwrap();
        assert!(matches!(load_sequence(&m), Err(Error::NonMonotoneTimestamps { .. })));
        std::fs::write(&m, "w0.png,0\n").unwrap();
        assert!(matches!(load_sequence(&m), Err(Error::TooFewFrames { .. })));
        std::fs::write(&m, "w0.png,0\nnope.png,1\n").unwrap();
        assert!(matches!(load_sequence(&m), Err(Error::MissingFile(_))));

        imageio::write_png16(&Grid::zeros((8, 6)), &dir.path().join("small.png")).unwrap();
        std::fs::write(&m, "w0.png,0\nsmall.png,1\n").unwrap();
        assert!(matches!(load_sequence(&m), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn rgb_frames_are_converted() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_pixel(4, 4, image::Rgb([255, 0, 0]));
        img.save(dir.path().join("r0.png")).unwrap();
        img.save(dir.path().join("r1.png")).unwrap();
        let m = dir.path().join("m.csv");
        std::fs::write(&m, "r0.png,0\nr1.png,0.5\n").unwrap();
        let s = load_sequence(&m).unwrap();
        assert!(s.frame(0).iter().all(|&v| (v - 0.299).abs() < 1e-12));
    }

    #[test]
    fn write_then_load_is_exact_on_quantised_frames() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Grid> = (0..4).map(|i| texture(20, 12).mapv(|v| (v + 0.01 * i as f64).min(1.0))).collect();
        let s = FrameSequence::new(frames, vec![0.0, 0.1, 0.25, 1.0 / 3.0]).unwrap().quantized();
        let m = write_sequence(&s, dir.path()).unwrap();
        assert_eq!(load_sequence(&m).unwrap(), s);
    }
}
