//! Dense 2D grids and the small set of spatial primitives shared by every
//! stage: reflective indexing, separable convolution, box statistics,
//! interpolation and a cached 2D FFT.
//!
//! Grids are `ndarray` arrays indexed `[row, col]`, i.e. `[y, x]`.

use std::sync::Arc;

use ndarray::{Array2, Zip};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub type Grid = Array2<f64>;
pub type ComplexGrid = Array2<Complex64>;

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`), valid
/// for any offset.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Normalised sampled Gaussian with radius `ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let denom = 2.0 * sigma * sigma;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / denom).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn convolve_rows(src: &Grid, kernel: &[f64], zero_pad: bool) -> Grid {
    let (h, w) = src.dim();
    let r = (kernel.len() / 2) as isize;
    let mut out = Grid::zeros((h, w));
    Zip::from(out.rows_mut())
        .and(src.rows())
        .for_each(|mut orow, irow| {
            let padded: Vec<f64> = (-r..w as isize + r)
                .map(|i| {
                    if !zero_pad {
                        irow[reflect_index(i, w)]
                    } else if (0..w as isize).contains(&i) {
                        irow[i as usize]
                    } else {
                        0.0
                    }
                })
                .collect();
            for x in 0..w {
                let window = &padded[x..x + kernel.len()];
                orow[x] = window.iter().zip(kernel).map(|(a, b)| a * b).sum();
            }
        });
    out
}

/// Separable convolution with a symmetric kernel and reflective boundary.
pub fn convolve_separable(src: &Grid, kernel: &[f64]) -> Grid {
    convolve_padded(src, kernel, false)
}

/// Separable convolution treating everything outside the grid as zero.
pub fn convolve_separable_zero(src: &Grid, kernel: &[f64]) -> Grid {
    convolve_padded(src, kernel, true)
}

fn convolve_padded(src: &Grid, kernel: &[f64], zero_pad: bool) -> Grid {
    let rows = convolve_rows(src, kernel, zero_pad);
    let t = rows.t().as_standard_layout().to_owned();
    convolve_rows(&t, kernel, zero_pad).t().as_standard_layout().to_owned()
}

pub fn gaussian_blur(src: &Grid, sigma: f64) -> Grid {
    convolve_separable(src, &gaussian_kernel(sigma))
}

fn box_rows(src: &Grid, window: usize) -> Grid {
    let (h, w) = src.dim();
    let r = (window / 2) as isize;
    let mut out = Grid::zeros((h, w));
    Zip::from(out.rows_mut())
        .and(src.rows())
        .for_each(|mut orow, irow| {
            let mut acc: f64 = (-r..=r).map(|i| irow[reflect_index(i, w)]).sum();
            orow[0] = acc;
            for x in 1..w as isize {
                acc += irow[reflect_index(x + r, w)] - irow[reflect_index(x - r - 1, w)];
                orow[x as usize] = acc;
            }
        });
    out
}

/// Mean over a `window x window` neighbourhood with reflective boundary.
/// `window` is expected to be odd.
pub fn box_mean(src: &Grid, window: usize) -> Grid {
    let rows = box_rows(src, window);
    let t = rows.t().as_standard_layout().to_owned();
    let mut out = box_rows(&t, window).t().as_standard_layout().to_owned();
    let norm = 1.0 / (window * window) as f64;
    out.mapv_inplace(|v| v * norm);
    out
}

/// Bilinear sample at fractional `(x, y)`. Returns `None` outside
/// `[0, w-1] x [0, h-1]`.
#[inline]
pub fn sample_bilinear(g: &Grid, x: f64, y: f64) -> Option<f64> {
    let (h, w) = g.dim();
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let top = g[[y0, x0]] * (1.0 - fx) + g[[y0, x1]] * fx;
    let bottom = g[[y1, x0]] * (1.0 - fx) + g[[y1, x1]] * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

/// Bilinear sample with clamped coordinates; never fails.
#[inline]
pub fn sample_bilinear_clamped(g: &Grid, x: f64, y: f64) -> f64 {
    let (h, w) = g.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    sample_bilinear(g, x, y).unwrap_or(0.0)
}

#[inline]
fn keys_weight(t: f64) -> f64 {
    // Keys cubic convolution, a = -0.5.
    let t = t.abs();
    if t < 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

#[inline]
fn bicubic_with(g: &Grid, x: f64, y: f64, wrap: impl Fn(isize, usize) -> usize) -> f64 {
    let (h, w) = g.dim();
    let xf = x.floor();
    let yf = y.floor();
    let fx = x - xf;
    let fy = y - yf;
    let wx: [f64; 4] = std::array::from_fn(|i| keys_weight(fx - i as f64 + 1.0));
    let cols: [usize; 4] = std::array::from_fn(|i| wrap(xf as isize + i as isize - 1, w));
    let mut acc = 0.0;
    for j in 0..4 {
        let wy = keys_weight(fy - j as f64 + 1.0);
        let row = g.row(wrap(yf as isize + j as isize - 1, h));
        let racc: f64 = (0..4).map(|i| wx[i] * row[cols[i]]).sum();
        acc += wy * racc;
    }
    acc
}

/// Bicubic (Keys) sample with periodic wrap-around, matching the periodic
/// textures produced by the scene generator.
pub fn sample_bicubic_periodic(g: &Grid, x: f64, y: f64) -> f64 {
    bicubic_with(g, x, y, |i, n| i.rem_euclid(n as isize) as usize)
}

/// Bicubic (Keys) sample with coordinates clamped to the grid and edge
/// samples replicated.
pub fn sample_bicubic_clamped(g: &Grid, x: f64, y: f64) -> f64 {
    let (h, w) = g.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    bicubic_with(g, x, y, |i, n| i.clamp(0, n as isize - 1) as usize)
}

fn mirror_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn bspline_prefilter_line(line: &mut [f64]) {
    let n = line.len();
    if n < 2 {
        return;
    }
    let z = 3f64.sqrt() - 2.0;
    line.iter_mut().for_each(|v| *v *= 6.0);
    let horizon = ((1e-12f64).ln() / z.abs().ln()).ceil() as usize;
    let mut zk = 1.0;
    let mut c0 = 0.0;
    for k in 0..horizon.min(2 * n) {
        c0 += zk * line[mirror_index(k as isize, n)];
        zk *= z;
    }
    line[0] = c0;
    for k in 1..n {
        line[k] += z * line[k - 1];
    }
    line[n - 1] = z / (z * z - 1.0) * (line[n - 1] + z * line[n - 2]);
    for k in (0..n - 1).rev() {
        line[k] = z * (line[k + 1] - line[k]);
    }
}

/// Cubic B-spline interpolation coefficients with whole-sample mirror
/// boundary; sample them with [`sample_bspline_clamped`].
pub fn bspline_coefficients(g: &Grid) -> Grid {
    let mut c = g.clone();
    for mut row in c.rows_mut() {
        let mut line = row.to_vec();
        bspline_prefilter_line(&mut line);
        row.iter_mut().zip(line).for_each(|(d, s)| *d = s);
    }
    for mut col in c.columns_mut() {
        let mut line = col.to_vec();
        bspline_prefilter_line(&mut line);
        col.iter_mut().zip(line).for_each(|(d, s)| *d = s);
    }
    c
}

#[inline]
fn bspline_weights(t: f64) -> [f64; 4] {
    let u = 1.0 - t;
    [
        u * u * u / 6.0,
        (4.0 - 6.0 * t * t + 3.0 * t * t * t) / 6.0,
        (1.0 + 3.0 * t + 3.0 * t * t - 3.0 * t * t * t) / 6.0,
        t * t * t / 6.0,
    ]
}

/// Evaluates the cubic B-spline with coefficients `c` at `(x, y)`,
/// coordinates clamped to the grid.
pub fn sample_bspline_clamped(c: &Grid, x: f64, y: f64) -> f64 {
    let (h, w) = c.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (xf, yf) = (x.floor(), y.floor());
    let wx = bspline_weights(x - xf);
    let wy = bspline_weights(y - yf);
    let cols: [usize; 4] = std::array::from_fn(|i| mirror_index(xf as isize + i as isize - 1, w));
    let mut acc = 0.0;
    for (j, wyj) in wy.iter().enumerate() {
        let row = c.row(mirror_index(yf as isize + j as isize - 1, h));
        acc += wyj * (0..4).map(|i| wx[i] * row[cols[i]]).sum::<f64>();
    }
    acc
}

/// Row/column FFT plans for one frame size. Forward transforms are
/// unnormalised; inverse transforms scale by `1/N`.
#[derive(Clone)]
pub struct Fft2 {
    width: usize,
    height: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish()
    }
}

thread_local! {
    static FFT_BUFFERS: std::cell::RefCell<(Vec<Complex64>, Vec<Complex64>)> =
        const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

impl Fft2 {
    pub fn new(width: usize, height: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            width,
            height,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    fn run(&self, data: &mut ComplexGrid, rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        assert_eq!(data.dim(), (self.height, self.width));
        let buf = data
            .as_slice_mut()
            .expect("complex grids are kept in standard layout");
        let scratch_len = rows.get_inplace_scratch_len().max(cols.get_inplace_scratch_len());
        // Per-thread buffers: fresh megabyte-sized allocations on every
        // transform cost more in page faults than the transform itself.
        FFT_BUFFERS.with(|cell| {
            let (scratch, t) = &mut *cell.borrow_mut();
            let zero = Complex64::new(0.0, 0.0);
            scratch.resize(scratch_len, zero);
            t.resize(buf.len(), zero);
            rows.process_with_scratch(buf, scratch);
            transpose::transpose(buf, t, self.width, self.height);
            cols.process_with_scratch(t, scratch);
            transpose::transpose(t, buf, self.height, self.width);
        });
    }

    /// Inverse transform without the `1 / (width height)` normalisation.
    pub fn inverse_unscaled(&self, data: &mut ComplexGrid) {
        self.run(data, &self.row_inv, &self.col_inv);
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn forward(&self, data: &mut ComplexGrid) {
        self.run(data, &self.row_fwd, &self.col_fwd);
    }

    pub fn inverse(&self, data: &mut ComplexGrid) {
        self.run(data, &self.row_inv, &self.col_inv);
        let norm = 1.0 / (self.width * self.height) as f64;
        data.mapv_inplace(|c| c * norm);
    }

    pub fn forward_real(&self, g: &Grid) -> ComplexGrid {
        let mut c = g.mapv(|v| Complex64::new(v, 0.0));
        self.forward(&mut c);
        c
    }
}

/// Signed DFT frequency of bin `k` in a transform of length `n`, in
/// radians per sample, in `[-pi, pi)`.
#[inline]
pub fn bin_frequency(k: usize, n: usize) -> f64 {
    let k = k as isize;
    let n_i = n as isize;
    let s = if 2 * k >= n_i { k - n_i } else { k };
    2.0 * std::f64::consts::PI * s as f64 / n as f64
}

/// Pearson correlation of two equally shaped grids.
pub fn pearson(a: &Grid, b: &Grid) -> f64 {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    Zip::from(a).and(b).for_each(|&x, &y| {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    });
    sab / (saa * sbb).sqrt()
}

pub fn rms_diff(a: &Grid, b: &Grid) -> f64 {
    let n = a.len() as f64;
    let ss: f64 = Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
    (ss / n).sqrt()
}

/// Crop to even width and height by dropping the trailing row/column.
pub fn crop_even(g: &Grid) -> Grid {
    let (h, w) = g.dim();
    g.slice(ndarray::s![..h - h % 2, ..w - w % 2]).to_owned()
}
