//! Synthetic scenes with analytic ground truth.
//!
//! A frame is rendered by shifting a periodic texture by the uniform part of
//! the motion in the Fourier domain (exact for sub-pixel shifts), then
//! inverse-warping the result with bicubic sampling when a spatially varying
//! ring field is present. Illumination and noise are applied afterwards.
//! Unless `prism_targets = false`, a small checker target is blended into
//! the texture at each prism so the calibration points can be tracked.
//!
//! # Truth file
//!
//! `truth.toml` holds the scene description under `[scene]` plus one
//! `[[rings]]` table per ring component:
//!
//! ```toml
//! timestamps = [0.0, 60.0]          # seconds
//! translation_px = [[0.0, 0.0], ...] # uniform displacement per frame
//! [[rings]]
//! prisms_px = [[128.0, 32.0], [128.0, 224.0]]        # crown, invert at rest
//! prism_positions_px = [[[128.0, 32.0], [128.0, 224.0]], ...] # per frame
//! convergence_mm = [0.0, ...]                          # per frame
//! sample_angles_deg = [0.0, 60.0, ...]                 # from crown, clockwise
//! sample_points_px = [[128.0, 32.0], ...]
//! radial_mm = [[0.0, ...], ...]                        # per frame, per sample
//! ```

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::analysis::relative_radial;
use crate::error::{Error, Result};
use crate::grid::{sample_bicubic_periodic, ComplexGrid, Fft2, Grid};
use crate::imageio::{read_planes, Planes};
use crate::ingest::{to_grayscale, write_sequence, FrameSequence};

pub const TRUTH_FILE: &str = "truth.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Texture {
    /// Multi-octave periodic value noise, coarsest lattice cell
    /// `base_cell_px`, each further octave half the cell size and half the
    /// weight.
    Noise {
        #[serde(default = "default_octaves")]
        octaves: usize,
        #[serde(default = "default_cell")]
        base_cell_px: f64,
        /// Highest retained spatial frequency as a fraction of Nyquist; the
        /// spectrum rolls off from two thirds of this value.
        #[serde(default = "default_band_limit")]
        band_limit: f64,
    },
    /// Grayscale image of exactly the scene size, treated as periodic.
    Image { path: PathBuf },
}

fn default_octaves() -> usize {
    4
}

fn default_cell() -> f64 {
    32.0
}

fn default_band_limit() -> f64 {
    0.75
}

impl Default for Texture {
    fn default() -> Self {
        Texture::Noise {
            octaves: default_octaves(),
            base_cell_px: default_cell(),
            band_limit: default_band_limit(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    /// Uniform translation. With `frequency_hz = 0` this is a linear drift of
    /// `amplitude_px` per frame; otherwise a sinusoid of that amplitude.
    Translation {
        amplitude_px: f64,
        #[serde(default)]
        frequency_hz: f64,
        #[serde(default)]
        direction_deg: f64,
        #[serde(default)]
        phase_deg: f64,
    },
    /// Uniform sinusoidal translation; `frequency_hz` must be positive.
    Sinusoid {
        amplitude_px: f64,
        frequency_hz: f64,
        #[serde(default)]
        direction_deg: f64,
        #[serde(default)]
        phase_deg: f64,
    },
    /// Elliptical ovalisation of a ring: radial `-a cos 2θ` and tangential
    /// `(a/2) sin 2θ`, θ measured clockwise from the crown, with Gaussian
    /// falloff away from the ring radius. `settlement` adds a downward
    /// translation of `a` with the same falloff, so the invert stays put and
    /// the crown drops by `2a`. With `frequency_hz = 0` the amplitude ramps
    /// linearly to `amplitude_mm` at the last frame.
    RingSqueeze {
        amplitude_mm: f64,
        scale_mm_per_px: f64,
        center_px: [f64; 2],
        radius_px: f64,
        falloff_px: f64,
        #[serde(default)]
        settlement: bool,
        #[serde(default)]
        frequency_hz: f64,
        #[serde(default = "default_samples")]
        n_samples: usize,
    },
}

fn default_samples() -> usize {
    6
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Illumination {
    /// Multiplicative left-to-right ramp `1 + s (x/(w-1) - 1/2)`.
    #[serde(default)]
    pub ramp_strength: f64,
    /// Global gain `1 + d t` at frame index `t`.
    #[serde(default)]
    pub drift_per_frame: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub frame_interval_s: f64,
    #[serde(default)]
    pub texture: Texture,
    #[serde(default)]
    pub motion: Vec<Motion>,
    #[serde(default)]
    pub illumination: Illumination,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub rng_seed: u64,
    /// Paint a checker target at every prism so calibration points carry
    /// trackable texture.
    #[serde(default = "default_true")]
    pub prism_targets: bool,
}

fn default_true() -> bool {
    true
}

impl SceneSpec {
    pub fn new(width: usize, height: usize, n_frames: usize, frame_interval_s: f64) -> Self {
        Self {
            width,
            height,
            n_frames,
            frame_interval_s,
            texture: Texture::default(),
            motion: Vec::new(),
            illumination: Illumination::default(),
            noise_sigma: 0.0,
            rng_seed: 0,
            prism_targets: true,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::SpecInvalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.n_frames).map(|i| i as f64 * self.frame_interval_s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInvalid(m));
        if self.width < 8 || self.height < 8 {
            return bad(format!("scene {}x{} is smaller than 8x8", self.width, self.height));
        }
        if self.n_frames < 2 {
            return bad("n_frames must be at least 2".into());
        }
        if !(self.frame_interval_s > 0.0 && self.frame_interval_s.is_finite()) {
            return bad("frame_interval_s must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be non-negative".into());
        }
        let nyquist = 0.5 / self.frame_interval_s;
        let check_freq = |f: f64, what: &str| -> Result<()> {
            if !(f >= 0.0 && f <= nyquist * (1.0 + 1e-12)) {
                return bad(format!("{what}: frequency {f} Hz outside [0, {nyquist}]"));
            }
            Ok(())
        };
        if let Texture::Noise {
            octaves,
            base_cell_px,
            band_limit,
        } = &self.texture
        {
            if *octaves < 1 || !(*base_cell_px >= 2.0) {
                return bad("noise texture needs octaves >= 1 and base_cell_px >= 2".into());
            }
            if !(*band_limit > 0.0 && *band_limit <= 1.0) {
                return bad("noise texture band_limit must be in (0, 1]".into());
            }
        }
        for m in &self.motion {
            match *m {
                Motion::Translation {
                    amplitude_px,
                    frequency_hz,
                    ..
                } => {
                    if !(amplitude_px >= 0.0) {
                        return bad("translation amplitude must be non-negative".into());
                    }
                    check_freq(frequency_hz, "translation")?;
                }
                Motion::Sinusoid {
                    amplitude_px,
                    frequency_hz,
                    ..
                } => {
                    if !(amplitude_px >= 0.0) {
                        return bad("sinusoid amplitude must be non-negative".into());
                    }
                    if frequency_hz <= 0.0 {
                        return bad("sinusoid needs a positive frequency".into());
                    }
                    check_freq(frequency_hz, "sinusoid")?;
                }
                Motion::RingSqueeze {
                    amplitude_mm,
                    scale_mm_per_px,
                    radius_px,
                    falloff_px,
                    frequency_hz,
                    n_samples,
                    center_px,
                    ..
                } => {
                    if !(amplitude_mm >= 0.0) || !(scale_mm_per_px > 0.0) {
                        return bad("ring amplitude must be >= 0 and scale > 0".into());
                    }
                    if !(radius_px > 0.0) || !(falloff_px > 0.0) {
                        return bad("ring radius and falloff must be positive".into());
                    }
                    if n_samples < 2 {
                        return bad("ring needs at least 2 samples".into());
                    }
                    if !center_px.iter().all(|c| c.is_finite()) {
                        return bad("ring centre must be finite".into());
                    }
                    check_freq(frequency_hz, "ring_squeeze")?;
                }
            }
        }
        Ok(())
    }
}

fn unit(direction_deg: f64) -> [f64; 2] {
    let r = direction_deg.to_radians();
    [r.cos(), r.sin()]
}

impl Motion {
    /// Uniform displacement contributed at frame `index`, time `t` seconds.
    fn uniform_at(&self, index: usize, t: f64) -> [f64; 2] {
        match *self {
            Motion::Translation {
                amplitude_px,
                frequency_hz,
                direction_deg,
                phase_deg,
            }
            | Motion::Sinusoid {
                amplitude_px,
                frequency_hz,
                direction_deg,
                phase_deg,
            } => {
                let mag = if frequency_hz == 0.0 {
                    amplitude_px * index as f64
                } else {
                    amplitude_px * (2.0 * PI * frequency_hz * t + phase_deg.to_radians()).sin()
                };
                let d = unit(direction_deg);
                [mag * d[0], mag * d[1]]
            }
            Motion::RingSqueeze { .. } => [0.0, 0.0],
        }
    }
}

/// Geometry and time profile of one ring component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingField {
    pub amplitude_px: f64,
    pub center_px: [f64; 2],
    pub radius_px: f64,
    pub falloff_px: f64,
    pub settlement: bool,
    pub frequency_hz: f64,
}

impl RingField {
    fn from_motion(m: &Motion) -> Option<Self> {
        match *m {
            Motion::RingSqueeze {
                amplitude_mm,
                scale_mm_per_px,
                center_px,
                radius_px,
                falloff_px,
                settlement,
                frequency_hz,
                ..
            } => Some(Self {
                amplitude_px: amplitude_mm / scale_mm_per_px,
                center_px,
                radius_px,
                falloff_px,
                settlement,
                frequency_hz,
            }),
            _ => None,
        }
    }

    /// Fraction of full amplitude at frame `index` of `n`, time `t`.
    pub fn profile(&self, index: usize, n: usize, t: f64) -> f64 {
        if self.frequency_hz == 0.0 {
            index as f64 / (n - 1) as f64
        } else {
            (2.0 * PI * self.frequency_hz * t).sin()
        }
    }

    /// Displacement at `(x, y)` for unit time profile.
    pub fn displacement(&self, x: f64, y: f64) -> [f64; 2] {
        let dx = x - self.center_px[0];
        let dy = y - self.center_px[1];
        let r = dx.hypot(dy);
        let g = (-(r - self.radius_px).powi(2) / (2.0 * self.falloff_px * self.falloff_px)).exp();
        let a = self.amplitude_px * g;
        let theta = dx.atan2(-dy);
        let (s, c) = theta.sin_cos();
        let er = [s, -c];
        let et = [c, s];
        let ur = -a * (2.0 * theta).cos();
        let ut = 0.5 * a * (2.0 * theta).sin();
        let settle = if self.settlement { a } else { 0.0 };
        [ur * er[0] + ut * et[0], ur * er[1] + ut * et[1] + settle]
    }

    /// Point on the ring at angle `deg`, clockwise from the crown.
    pub fn point_at(&self, deg: f64) -> [f64; 2] {
        let (s, c) = deg.to_radians().sin_cos();
        [self.center_px[0] + self.radius_px * s, self.center_px[1] - self.radius_px * c]
    }

    pub fn outward_normal(deg: f64) -> [f64; 2] {
        let (s, c) = deg.to_radians().sin_cos();
        [s, -c]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingTruth {
    pub scale_mm_per_px: f64,
    pub prisms_px: [[f64; 2]; 2],
    pub prism_positions_px: Vec<[[f64; 2]; 2]>,
    pub convergence_mm: Vec<f64>,
    pub sample_angles_deg: Vec<f64>,
    pub sample_points_px: Vec<[f64; 2]>,
    pub radial_mm: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub scene: SceneSpec,
    pub timestamps: Vec<f64>,
    pub translation_px: Vec<[f64; 2]>,
    #[serde(default)]
    pub rings: Vec<RingTruth>,
}

impl GroundTruth {
    pub fn from_spec(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let ts = spec.timestamps();
        let n = spec.n_frames;
        let translation_px: Vec<[f64; 2]> = ts
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                spec.motion.iter().fold([0.0, 0.0], |acc, m| {
                    let d = m.uniform_at(i, t);
                    [acc[0] + d[0], acc[1] + d[1]]
                })
            })
            .collect();
        let mut rings = Vec::new();
        for m in &spec.motion {
            let Motion::RingSqueeze {
                scale_mm_per_px,
                n_samples,
                ..
            } = *m
            else {
                continue;
            };
            let ring = RingField::from_motion(m).expect("ring motion");
            let prisms_px = [ring.point_at(0.0), ring.point_at(180.0)];
            let angles: Vec<f64> = (0..n_samples).map(|j| j as f64 * 360.0 / n_samples as f64).collect();
            let points: Vec<[f64; 2]> = angles.iter().map(|&d| ring.point_at(d)).collect();
            let normals: Vec<[f64; 2]> = angles.iter().map(|&d| RingField::outward_normal(d)).collect();
            let field_at = |p: [f64; 2], i: usize| -> [f64; 2] {
                let k = ring.profile(i, n, ts[i]);
                let u = ring.displacement(p[0], p[1]);
                let tr = translation_px[i];
                [k * u[0] + tr[0], k * u[1] + tr[1]]
            };
            let rest = dist(prisms_px[0], prisms_px[1]);
            let mut prism_positions_px = Vec::with_capacity(n);
            let mut convergence_mm = Vec::with_capacity(n);
            let mut radial_mm = Vec::with_capacity(n);
            for i in 0..n {
                let q: [[f64; 2]; 2] = std::array::from_fn(|j| {
                    let u = field_at(prisms_px[j], i);
                    [prisms_px[j][0] + u[0], prisms_px[j][1] + u[1]]
                });
                prism_positions_px.push(q);
                convergence_mm.push((dist(q[0], q[1]) - rest) * scale_mm_per_px);
                let disp: Vec<[f64; 2]> = points.iter().map(|&p| field_at(p, i)).collect();
                radial_mm.push(
                    relative_radial(&disp, &normals)
                        .into_iter()
                        .map(|r| r * scale_mm_per_px)
                        .collect(),
                );
            }
            rings.push(RingTruth {
                scale_mm_per_px,
                prisms_px,
                prism_positions_px,
                convergence_mm,
                sample_angles_deg: angles,
                sample_points_px: points,
                radial_mm,
            });
        }
        Ok(Self {
            scene: spec.clone(),
            timestamps: ts,
            translation_px,
            rings,
        })
    }

    /// Exact displacement field `(u, v)` in pixels at frame `index`.
    pub fn field(&self, index: usize) -> (Grid, Grid) {
        let (w, h) = (self.scene.width, self.scene.height);
        let tr = self.translation_px[index];
        let mut u = Grid::from_elem((h, w), tr[0]);
        let mut v = Grid::from_elem((h, w), tr[1]);
        for ring in self.scene.motion.iter().filter_map(RingField::from_motion) {
            let k = ring.profile(index, self.scene.n_frames, self.timestamps[index]);
            for ((y, x), uu) in u.indexed_iter_mut() {
                let d = ring.displacement(x as f64, y as f64);
                *uu += k * d[0];
                v[[y, x]] += k * d[1];
            }
        }
        (u, v)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::SpecInvalid(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::SpecInvalid(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn value_noise(w: usize, h: usize, cell: f64, rng: &mut ChaCha8Rng) -> Grid {
    let cx = ((w as f64 / cell).round() as usize).max(1);
    let cy = ((h as f64 / cell).round() as usize).max(1);
    let lattice: Vec<f64> = (0..cx * cy).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * t * (t * (6.0 * t - 15.0) + 10.0);
    Grid::from_shape_fn((h, w), |(y, x)| {
        let gx = x as f64 * cx as f64 / w as f64;
        let gy = y as f64 * cy as f64 / h as f64;
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (smooth(gx - x0 as f64), smooth(gy - y0 as f64));
        let at = |i: usize, j: usize| lattice[(j % cy) * cx + (i % cx)];
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Procedural periodic texture: value-noise octaves, band-limited in the
/// Fourier domain (raised-cosine roll-off from `2/3 · band_limit · π` to
/// `band_limit · π` rad/px, Nyquist removed) and rescaled to `[0.1, 0.9]`.
pub fn noise_texture(w: usize, h: usize, octaves: usize, base_cell_px: f64, band_limit: f64, seed: u64) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tex = Grid::zeros((h, w));
    let mut weight = 1.0;
    let mut cell = base_cell_px;
    for _ in 0..octaves {
        tex.scaled_add(weight, &value_noise(w, h, cell.max(1.0), &mut rng));
        weight *= 0.5;
        cell *= 0.5;
    }
    let fft = Fft2::new(w, h);
    let mut spec = fft.forward_real(&tex);
    for ((ky, kx), c) in spec.indexed_iter_mut() {
        let wx = crate::grid::bin_frequency(kx, w);
        let wy = crate::grid::bin_frequency(ky, h);
        let nyquist = (w % 2 == 0 && kx == w / 2) || (h % 2 == 0 && ky == h / 2);
        let rho = wx.hypot(wy) / PI;
        let knee = band_limit * 2.0 / 3.0;
        let gain = if nyquist || rho >= band_limit {
            0.0
        } else if rho <= knee {
            1.0
        } else {
            0.5 * (1.0 + (PI * (rho - knee) / (band_limit - knee)).cos())
        };
        *c *= gain;
    }
    fft.inverse(&mut spec);
    let tex = spec.mapv(|c| c.re);
    let lo = tex.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = tex.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    tex.mapv(|v| 0.1 + 0.8 * (v - lo) / span)
}

/// Circularly shifts `spectrum` (of a real grid) by `(dx, dy)` pixels and
/// returns the real result. Positive `dx` moves content right. Nyquist
/// bins are dropped so the result stays real for fractional shifts.
pub fn fourier_shift(fft: &Fft2, spectrum: &ComplexGrid, dx: f64, dy: f64) -> Grid {
    let (h, w) = spectrum.dim();
    let mut s = spectrum.clone();
    for ((ky, kx), c) in s.indexed_iter_mut() {
        let nyquist = (w % 2 == 0 && kx == w / 2) || (h % 2 == 0 && ky == h / 2);
        if nyquist && (dx.fract() != 0.0 || dy.fract() != 0.0) {
            *c = Complex64::new(0.0, 0.0);
            continue;
        }
        let phase = -(crate::grid::bin_frequency(kx, w) * dx + crate::grid::bin_frequency(ky, h) * dy);
        *c *= Complex64::from_polar(1.0, phase);
    }
    fft.inverse(&mut s);
    s.mapv(|c| c.re)
}

pub const TARGET_RADIUS_PX: f64 = 10.0;
const TARGET_PERIOD_PX: f64 = 16.0;

/// Blends a Gaussian-windowed checker into `g` around `center`. The pattern
/// is smooth and band-limited so it survives Fourier shifting unchanged.
fn paint_target(g: &mut Grid, center: [f64; 2]) {
    let k = 2.0 * PI / TARGET_PERIOD_PX;
    for ((y, x), v) in g.indexed_iter_mut() {
        let (dx, dy) = (x as f64 - center[0], y as f64 - center[1]);
        let m = (-(dx * dx + dy * dy) / (2.0 * TARGET_RADIUS_PX * TARGET_RADIUS_PX)).exp();
        if m > 1e-6 {
            let pattern = 0.5 + 0.35 * (k * dx).cos() * (k * dy).cos();
            *v = *v * (1.0 - m) + m * pattern;
        }
    }
}

fn load_texture(spec: &SceneSpec) -> Result<Grid> {
    match &spec.texture {
        Texture::Noise {
            octaves,
            base_cell_px,
            band_limit,
        } => Ok(noise_texture(
            spec.width,
            spec.height,
            *octaves,
            *base_cell_px,
            *band_limit,
            spec.rng_seed,
        )),
        Texture::Image { path } => {
            let g = match read_planes(path)? {
                Planes::Gray(g) => g,
                Planes::Rgb(rgb) => to_grayscale(&rgb)?,
            };
            if g.dim() != (spec.height, spec.width) {
                return Err(Error::SpecInvalid(format!(
                    "texture image {} is {}x{}, scene is {}x{}",
                    path.display(),
                    g.ncols(),
                    g.nrows(),
                    spec.width,
                    spec.height
                )));
            }
            Ok(g)
        }
    }
}

/// Renders the scene. Frames are clamped to `[0, 1]` but not quantised.
pub fn generate(spec: &SceneSpec) -> Result<(FrameSequence, GroundTruth)> {
    let truth = GroundTruth::from_spec(spec)?;
    let mut texture = load_texture(spec)?;
    if spec.prism_targets {
        for r in &truth.rings {
            for p in &r.prisms_px {
                paint_target(&mut texture, *p);
            }
        }
    }
    let (w, h) = (spec.width, spec.height);
    let fft = Fft2::new(w, h);
    let tex_spec = fft.forward_real(&texture);
    let rings: Vec<RingField> = spec.motion.iter().filter_map(RingField::from_motion).collect();
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("valid sigma"));
    let ill = &spec.illumination;

    let frames: Vec<Grid> = (0..spec.n_frames)
        .into_par_iter()
        .map(|i| {
            let [tx, ty] = truth.translation_px[i];
            let shifted = fourier_shift(&fft, &tex_spec, tx, ty);
            let mut frame = if rings.is_empty() {
                shifted
            } else {
                let t = truth.timestamps[i];
                Grid::from_shape_fn((h, w), |(y, x)| {
                    let (xf, yf) = (x as f64, y as f64);
                    let (mut ux, mut uy) = (0.0, 0.0);
                    for r in &rings {
                        let k = r.profile(i, spec.n_frames, t);
                        let d = r.displacement(xf, yf);
                        ux += k * d[0];
                        uy += k * d[1];
                    }
                    sample_bicubic_periodic(&shifted, xf - ux, yf - uy)
                })
            };
            if ill.ramp_strength != 0.0 || ill.drift_per_frame != 0.0 {
                let gain = 1.0 + ill.drift_per_frame * i as f64;
                for ((_, x), v) in frame.indexed_iter_mut() {
                    let ramp = 1.0 + ill.ramp_strength * (x as f64 / (w - 1) as f64 - 0.5);
                    *v *= gain * ramp;
                }
            }
            if let Some(dist) = noise {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
                rng.set_stream(i as u64 + 1);
                frame.mapv_inplace(|v| v + dist.sample(&mut rng));
            }
            frame.mapv_inplace(|v| v.clamp(0.0, 1.0));
            frame
        })
        .collect();
    let seq = FrameSequence::new(frames, truth.timestamps.clone())?;
    Ok((seq, truth))
}

/// Writes frames plus manifest and `truth.toml` into `dir`, creating it.
/// Returns the manifest path.
pub fn write_scene(seq: &FrameSequence, truth: &GroundTruth, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = write_sequence(seq, dir)?;
    let truth_path = dir.join(TRUTH_FILE);
    std::fs::write(&truth_path, truth.to_toml()?).map_err(|e| Error::io(&truth_path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::load_sequence;

    fn small(n: usize) -> SceneSpec {
        let mut s = SceneSpec::new(64, 48, n, 1.0);
        s.rng_seed = 7;
        s
    }

    #[test]
    fn zero_motion_frames_are_identical() {
        let (seq, truth) = generate(&small(4)).unwrap();
        for f in seq.frames() {
            assert_eq!(f, seq.frame(0));
        }
        assert!(truth.translation_px.iter().all(|t| *t == [0.0, 0.0]));
    }

    #[test]
    fn drift_truth_is_analytic() {
        let mut s = small(51);
        s.motion.push(Motion::Translation {
            amplitude_px: 0.01,
            frequency_hz: 0.0,
            direction_deg: 0.0,
            phase_deg: 0.0,
        });
        let truth = GroundTruth::from_spec(&s).unwrap();
        let (u, v) = truth.field(50);
        assert!(u.iter().all(|&x| (x - 0.5).abs() < 1e-12));
        assert!(v.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn ring_crown_radial_truth() {
        let mut s = SceneSpec::new(64, 64, 100, 60.0);
        s.motion.push(Motion::RingSqueeze {
            amplitude_mm: 2.0,
            scale_mm_per_px: 10.0,
            center_px: [32.0, 32.0],
            radius_px: 20.0,
            falloff_px: 8.0,
            settlement: false,
            frequency_hz: 0.0,
            n_samples: 6,
        });
        let truth = GroundTruth::from_spec(&s).unwrap();
        let ring = &truth.rings[0];
        // Crown radial -0.2 px at the last frame, 2.0 mm at 10 mm/px.
        let crown_px = ring.radial_mm[99][0] / 10.0;
        assert!((crown_px + 0.2).abs() < 1e-12, "{crown_px}");
        assert!((ring.radial_mm[99][1] - 1.0).abs() < 1e-12);
        assert!((ring.convergence_mm[99] + 4.0).abs() < 1e-9);
        assert!(ring.radial_mm[0].iter().all(|&r| r == 0.0));
    }

    #[test]
    fn settlement_keeps_invert_fixed() {
        let r = RingField {
            amplitude_px: 0.3,
            center_px: [0.0, 0.0],
            radius_px: 10.0,
            falloff_px: 3.0,
            settlement: true,
            frequency_hz: 0.0,
        };
        let crown = r.point_at(0.0);
        let invert = r.point_at(180.0);
        let dc = r.displacement(crown[0], crown[1]);
        let di = r.displacement(invert[0], invert[1]);
        assert!(dc[0].abs() < 1e-12 && (dc[1] - 0.6).abs() < 1e-12);
        assert!(di[0].abs() < 1e-12 && di[1].abs() < 1e-12);
    }

    #[test]
    fn deterministic_per_seed() {
        let mut s = small(3);
        s.noise_sigma = 0.01;
        let (a, _) = generate(&s).unwrap();
        let (b, _) = generate(&s).unwrap();
        assert_eq!(a.frames(), b.frames());
        s.rng_seed += 1;
        let (c, _) = generate(&s).unwrap();
        assert_ne!(a.frames(), c.frames());
    }

    #[test]
    fn mean_is_constant_without_noise_or_illumination() {
        let mut s = small(6);
        s.motion.push(Motion::Sinusoid {
            amplitude_px: 0.7,
            frequency_hz: 0.2,
            direction_deg: 30.0,
            phase_deg: 0.0,
        });
        let (seq, _) = generate(&s).unwrap();
        let m0 = seq.frame(0).mean().unwrap();
        for f in seq.frames() {
            assert!((f.mean().unwrap() - m0).abs() < 1e-9);
        }
    }

    #[test]
    fn integer_fourier_shift_is_a_roll() {
        let t = noise_texture(32, 32, 3, 8.0, 0.75, 1);
        let fft = Fft2::new(32, 32);
        let s = fft.forward_real(&t);
        let shifted = fourier_shift(&fft, &s, 3.0, -2.0);
        for y in 0..32 {
            for x in 0..32 {
                let src = t[[(y + 2) % 32, (x + 32 - 3) % 32]];
                assert!((shifted[[y, x]] - src).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn write_scene_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("nested/scene");
        let mut s = small(3);
        s.motion.push(Motion::RingSqueeze {
            amplitude_mm: 1.0,
            scale_mm_per_px: 5.0,
            center_px: [32.0, 24.0],
            radius_px: 15.0,
            falloff_px: 5.0,
            settlement: true,
            frequency_hz: 0.0,
            n_samples: 6,
        });
        let (seq, truth) = generate(&s).unwrap();
        let manifest = write_scene(&seq, &truth, &out).unwrap();
        let back = load_sequence(&manifest).unwrap();
        for (a, b) in back.frames().iter().zip(seq.frames()) {
            let err = (a - b).iter().fold(0.0f64, |m, d| m.max(d.abs()));
            assert!(err <= 0.5 / 65535.0 + 1e-12);
        }
        assert_eq!(GroundTruth::read(&out.join(TRUTH_FILE)).unwrap(), truth);
    }

    #[test]
    fn invalid_specs() {
        let mut s = small(3);
        s.motion.push(Motion::Sinusoid {
            amplitude_px: 0.1,
            frequency_hz: 0.8,
            direction_deg: 0.0,
            phase_deg: 0.0,
        });
        assert!(matches!(generate(&s), Err(Error::SpecInvalid(_))));
        assert!(matches!(SceneSpec::from_toml("width = 3"), Err(Error::SpecInvalid(_))));
        assert!(matches!(
            SceneSpec::from_toml("width = 64\nheight = 64\nn_frames = 2\nframe_interval_s = 1.0\nbogus = 1"),
            Err(Error::SpecInvalid(_))
        ));
    }

    #[test]
    fn spec_parses_from_toml() {
        let text = r#"
            width = 64
            height = 64
            n_frames = 10
            frame_interval_s = 3600.0
            noise_sigma = 0.005
            rng_seed = 3
            [texture]
            kind = "noise"
            octaves = 3
            [illumination]
            ramp_strength = 0.2
            [[motion]]
            kind = "translation"
            amplitude_px = 0.01
            [[motion]]
            kind = "ring_squeeze"
            amplitude_mm = 0.8
            scale_mm_per_px = 10.0
            center_px = [32.0, 32.0]
            radius_px = 20.0
            falloff_px = 6.0
        "#;
        let s = SceneSpec::from_toml(text).unwrap();
        assert_eq!(s.motion.len(), 2);
        assert_eq!(
            s.texture,
            Texture::Noise {
                octaves: 3,
                base_cell_px: 32.0,
                band_limit: 0.75
            }
        );
    }
}
