//! Dense coarse-to-fine Lucas–Kanade optical flow.
//!
//! Every pixel solves the windowed 2x2 normal equations of the linearised
//! brightness-constancy residual against target samples warped with
//! cubic B-spline interpolation.
//! Window sums use a triangular weight (a box convolved with itself) whose
//! frequency response is non-negative; with plain box sums the dense
//! iteration amplifies spatial error modes that fall on the box response's
//! negative lobes and diverges.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{
    bspline_coefficients, convolve_separable, reflect_index, sample_bilinear, sample_bilinear_clamped, sample_bspline_clamped,
    Grid,
};
use crate::ingest::FrameSequence;

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
pub const PFLO_MAGIC: &[u8; 4] = b"PFLO";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    pub n_levels: usize,
    pub window: usize,
    pub iterations: usize,
    /// Threshold on the smaller eigenvalue of the window-averaged structure
    /// tensor (intensities in `[0, 1]`).
    pub min_eig: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            n_levels: 3,
            window: 15,
            iterations: 10,
            min_eig: 1e-4,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_levels < 1 {
            return Err(Error::param("flow.n_levels", "must be at least 1"));
        }
        if self.window % 2 == 0 {
            return Err(Error::EvenWindow(self.window));
        }
        if self.window < 5 {
            return Err(Error::param("flow.window", "must be at least 5"));
        }
        if self.iterations < 1 {
            return Err(Error::param("flow.iterations", "must be at least 1"));
        }
        if !(self.min_eig > 0.0) {
            return Err(Error::param("flow.min_eig", "must be positive"));
        }
        Ok(())
    }
}

/// Per-pixel displacement in pixels (positive right / down) with a
/// validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub u: Grid,
    pub v: Grid,
    pub valid: Array2<bool>,
}

impl DisplacementField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            u: Grid::zeros((height, width)),
            v: Grid::zeros((height, width)),
            valid: Array2::from_elem((height, width), true),
        }
    }

    /// A field of constant displacement, valid everywhere.
    pub fn uniform(width: usize, height: usize, u: f64, v: f64) -> Self {
        Self {
            u: Grid::from_elem((height, width), u),
            v: Grid::from_elem((height, width), v),
            valid: Array2::from_elem((height, width), true),
        }
    }

    pub fn width(&self) -> usize {
        self.u.ncols()
    }

    pub fn height(&self) -> usize {
        self.u.nrows()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Mean `(u, v)` over valid pixels, `None` if nothing is valid.
    pub fn mean_valid(&self) -> Option<(f64, f64)> {
        let mut su = 0.0;
        let mut sv = 0.0;
        let mut n = 0usize;
        Zip::from(&self.u).and(&self.v).and(&self.valid).for_each(|&u, &v, &ok| {
            if ok {
                su += u;
                sv += v;
                n += 1;
            }
        });
        (n > 0).then(|| (su / n as f64, sv / n as f64))
    }

    /// Mean over valid pixels inside `[x0, x1) x [y0, y1)`.
    pub fn mean_valid_in(&self, x0: usize, x1: usize, y0: usize, y1: usize) -> Option<(f64, f64)> {
        let sub = |g: &Grid| g.slice(ndarray::s![y0..y1, x0..x1]).to_owned();
        Self {
            u: sub(&self.u),
            v: sub(&self.v),
            valid: self.valid.slice(ndarray::s![y0..y1, x0..x1]).to_owned(),
        }
        .mean_valid()
    }

    /// Field rounded through `f32`, the precision of flow dump files.
    pub fn rounded_f32(&self) -> Self {
        Self {
            u: self.u.mapv(|x| x as f32 as f64),
            v: self.v.mapv(|x| x as f32 as f64),
            valid: self.valid.clone(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            u: self.u.mapv(|x| x * factor),
            v: self.v.mapv(|x| x * factor),
            valid: self.valid.clone(),
        }
    }

    /// Writes the binary `PFLO` layout: magic, width and height as u32
    /// little-endian, row-major f32-LE `u` then `v`, then validity bits
    /// packed row-major, least significant bit first.
    pub fn write_pflo(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        let mut out = Vec::with_capacity(12 + 8 * w * h + (w * h).div_ceil(8));
        out.extend_from_slice(PFLO_MAGIC);
        out.extend_from_slice(&(w as u32).to_le_bytes());
        out.extend_from_slice(&(h as u32).to_le_bytes());
        for g in [&self.u, &self.v] {
            for &x in g.iter() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let mut bits = vec![0u8; (w * h).div_ceil(8)];
        for (i, &ok) in self.valid.iter().enumerate() {
            if ok {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bits);
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read_pflo(path: &Path) -> Result<Self> {
        let bad = |message: &str| Error::FlowFormat {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        if !path.is_file() {
            return Err(Error::MissingIntermediate(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[..4] != PFLO_MAGIC {
            return Err(bad("missing PFLO header"));
        }
        let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = w * h;
        let expected = 12 + 8 * n + n.div_ceil(8);
        if bytes.len() != expected {
            return Err(bad(&format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let plane = |offset: usize| {
            Grid::from_shape_fn((h, w), |(y, x)| {
                let i = offset + 4 * (y * w + x);
                f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as f64
            })
        };
        let u = plane(12);
        let v = plane(12 + 4 * n);
        let bits = &bytes[12 + 8 * n..];
        let valid = Array2::from_shape_fn((h, w), |(y, x)| {
            let i = y * w + x;
            bits[i / 8] & (1 << (i % 8)) != 0
        });
        Ok(Self { u, v, valid })
    }
}

fn pyr_down(g: &Grid) -> Grid {
    let blurred = convolve_separable(g, &BINOMIAL5);
    let (h, w) = g.dim();
    Grid::from_shape_fn((h.div_ceil(2), w.div_ceil(2)), |(y, x)| blurred[[2 * y, 2 * x]])
}

fn gaussian_pyramid(g: &Grid, levels: usize) -> Vec<Grid> {
    let mut out = vec![g.clone()];
    for _ in 1..levels {
        let next = pyr_down(out.last().unwrap());
        out.push(next);
    }
    out
}

/// Normalised triangular window spanning `window` taps (odd).
fn triangle_kernel(window: usize) -> Vec<f64> {
    let k = window.div_ceil(2);
    let norm = (k * k) as f64;
    (0..window)
        .map(|i| (k - (i as isize - (k as isize - 1)).unsigned_abs()) as f64 / norm)
        .collect()
}

fn window_mean(g: &Grid, kernel: &[f64]) -> Grid {
    convolve_separable(g, kernel)
}

/// Five-point central differences.
fn gradients(g: &Grid) -> (Grid, Grid) {
    let (h, w) = g.dim();
    let d = |a: f64, b: f64, c: f64, e: f64| (8.0 * (c - b) - (e - a)) / 12.0;
    let gx = Grid::from_shape_fn((h, w), |(y, x)| {
        let at = |o: isize| g[[y, reflect_index(x as isize + o, w)]];
        d(at(-2), at(-1), at(1), at(2))
    });
    let gy = Grid::from_shape_fn((h, w), |(y, x)| {
        let at = |o: isize| g[[reflect_index(y as isize + o, h), x]];
        d(at(-2), at(-1), at(1), at(2))
    });
    (gx, gy)
}

struct Level {
    image: Grid,
    gx: Grid,
    gy: Grid,
    sxx: Grid,
    sxy: Grid,
    syy: Grid,
}

impl Level {
    fn new(image: Grid, kernel: &[f64]) -> Self {
        let (gx, gy) = gradients(&image);
        let sxx = window_mean(&(&gx * &gx), kernel);
        let sxy = window_mean(&(&gx * &gy), kernel);
        let syy = window_mean(&(&gy * &gy), kernel);
        Self {
            image,
            gx,
            gy,
            sxx,
            sxy,
            syy,
        }
    }
}

fn min_eigenvalue(a: f64, b: f64, c: f64) -> f64 {
    // [[a, b], [b, c]]
    let tr = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    tr - disc
}

/// Reference frame prepared once for repeated flow estimation against
/// many targets.
pub struct FlowReference {
    levels: Vec<Level>,
    params: FlowParams,
    kernel: Vec<f64>,
}

impl FlowReference {
    pub fn new(reference: &Grid, params: &FlowParams) -> Result<Self> {
        params.validate()?;
        let (h, w) = reference.dim();
        let need = (1usize << (params.n_levels - 1)) * params.window;
        if w.min(h) < need {
            return Err(Error::FrameTooSmallForLevels {
                width: w,
                height: h,
                levels: params.n_levels,
                window: params.window,
            });
        }
        let kernel = triangle_kernel(params.window);
        let levels = gaussian_pyramid(reference, params.n_levels)
            .into_iter()
            .map(|g| Level::new(g, &kernel))
            .collect();
        Ok(Self {
            levels,
            params: *params,
            kernel,
        })
    }

    pub fn flow_to(&self, target: &Grid) -> Result<DisplacementField> {
        let reference = &self.levels[0].image;
        if target.dim() != reference.dim() {
            let (h, w) = reference.dim();
            let (th, tw) = target.dim();
            return Err(Error::DimensionMismatch {
                expected: (w, h),
                found: (tw, th),
            });
        }
        let p = &self.params;
        // Brightness constancy up to a global gain: a uniform exposure
        // change would otherwise read as motion wherever the texture has
        // a gradient.
        let (mr, mt) = (reference.mean().unwrap_or(0.0), target.mean().unwrap_or(0.0));
        let normalized;
        let target = if mt > 0.0 && mr > 0.0 && mr != mt {
            normalized = target * (mr / mt);
            &normalized
        } else {
            target
        };
        let targets = gaussian_pyramid(target, p.n_levels);
        let (mut u, mut v) = {
            let (h, w) = self.levels[p.n_levels - 1].image.dim();
            (Grid::zeros((h, w)), Grid::zeros((h, w)))
        };

        for lvl in (0..p.n_levels).rev() {
            let level = &self.levels[lvl];
            let tgt = &targets[lvl];
            let (h, w) = level.image.dim();
            if u.dim() != (h, w) {
                let (cu, cv) = (u, v);
                u = Grid::from_shape_fn((h, w), |(y, x)| {
                    2.0 * sample_bilinear_clamped(&cu, x as f64 * 0.5, y as f64 * 0.5)
                });
                v = Grid::from_shape_fn((h, w), |(y, x)| {
                    2.0 * sample_bilinear_clamped(&cv, x as f64 * 0.5, y as f64 * 0.5)
                });
            }
            let coeffs = bspline_coefficients(tgt);
            for _ in 0..p.iterations {
                let mut it = Grid::zeros((h, w));
                Zip::indexed(&mut it)
                    .and(&u)
                    .and(&v)
                    .and(&level.image)
                    .for_each(|(y, x), it, &du, &dv, &i0| {
                        *it = sample_bspline_clamped(&coeffs, x as f64 + du, y as f64 + dv) - i0;
                    });
                let bx = window_mean(&(&level.gx * &it), &self.kernel);
                let by = window_mean(&(&level.gy * &it), &self.kernel);
                for ((y, x), du) in u.indexed_iter_mut() {
                    let (a, b, c) = (level.sxx[[y, x]], level.sxy[[y, x]], level.syy[[y, x]]);
                    let (rx, ry) = (bx[[y, x]], by[[y, x]]);
                    let det = a * c - b * b;
                    if det > 1e-18 {
                        *du -= (c * rx - b * ry) / det;
                        v[[y, x]] -= (a * ry - b * rx) / det;
                    }
                }
            }
        }

        let top = &self.levels[0];
        let (h, w) = top.image.dim();
        let mut valid = Array2::from_elem((h, w), false);
        for ((y, x), ok) in valid.indexed_iter_mut() {
            let (du, dv) = (u[[y, x]], v[[y, x]]);
            *ok = du.is_finite()
                && dv.is_finite()
                && min_eigenvalue(top.sxx[[y, x]], top.sxy[[y, x]], top.syy[[y, x]]) >= p.min_eig
                && sample_bilinear(target, x as f64 + du, y as f64 + dv).is_some();
        }
        Ok(DisplacementField { u, v, valid })
    }
}

pub fn compute_flow(reference: &Grid, target: &Grid, p: &FlowParams) -> Result<DisplacementField> {
    FlowReference::new(reference, p)?.flow_to(target)
}

/// One field per frame, each estimated directly from the reference frame.
/// The reference frame's own field is exactly zero.
pub fn flow_series(seq: &FrameSequence, reference_index: usize, p: &FlowParams) -> Result<Vec<DisplacementField>> {
    if reference_index >= seq.len() {
        return Err(Error::param("reference_index", "out of range"));
    }
    let reference = FlowReference::new(seq.frame(reference_index), p)?;
    seq.frames()
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            if i == reference_index {
                let mut z = DisplacementField::zeros(seq.width(), seq.height());
                let probe = reference.flow_to(f)?;
                z.valid = probe.valid;
                Ok(z)
            } else {
                reference.flow_to(f)
            }
        })
        .collect()
}
