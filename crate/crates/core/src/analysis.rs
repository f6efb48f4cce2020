//! Engineering quantities from displacement fields: spatiotemporal median
//! smoothing, pixel-to-millimetre scaling, unmagnification, prism-pair
//! convergence and ring deformation profiles.
//!
//! Sign conventions: image `x` grows to the right and `y` downwards;
//! convergence is negative when the prisms approach each other; radial ring
//! displacement is positive outwards.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::DisplacementField;

/// Median of a non-empty slice (mean of the two central values for even
/// lengths). Reorders the slice.
pub fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    debug_assert!(n > 0);
    let mid = n / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Per-pixel, per-component median over a `spatial x spatial x temporal`
/// neighbourhood of valid samples, truncated at the borders. An output
/// pixel is valid when at least half of its (truncated) neighbourhood is.
pub fn st_median(fields: &[DisplacementField], spatial_window: usize, temporal_window: usize) -> Result<Vec<DisplacementField>> {
    if fields.is_empty() {
        return Err(Error::EmptySeries);
    }
    for w in [spatial_window, temporal_window] {
        if w % 2 == 0 {
            return Err(Error::EvenWindow(w));
        }
    }
    let (w, h) = (fields[0].width(), fields[0].height());
    if let Some(f) = fields.iter().find(|f| (f.width(), f.height()) != (w, h)) {
        return Err(Error::DimensionMismatch {
            expected: (w, h),
            found: (f.width(), f.height()),
        });
    }
    let rs = (spatial_window / 2) as isize;
    let rt = (temporal_window / 2) as isize;
    let n = fields.len() as isize;
    Ok((0..fields.len())
        .into_par_iter()
        .map(|t| {
            let t0 = (t as isize - rt).max(0) as usize;
            let t1 = (t as isize + rt).min(n - 1) as usize;
            let mut out = DisplacementField::zeros(w, h);
            let mut us = Vec::with_capacity(spatial_window * spatial_window * temporal_window);
            let mut vs = Vec::with_capacity(us.capacity());
            for y in 0..h {
                let y0 = (y as isize - rs).max(0) as usize;
                let y1 = (y as isize + rs).min(h as isize - 1) as usize;
                for x in 0..w {
                    let x0 = (x as isize - rs).max(0) as usize;
                    let x1 = (x as isize + rs).min(w as isize - 1) as usize;
                    us.clear();
                    vs.clear();
                    for f in &fields[t0..=t1] {
                        for yy in y0..=y1 {
                            for xx in x0..=x1 {
                                if f.valid[[yy, xx]] {
                                    us.push(f.u[[yy, xx]]);
                                    vs.push(f.v[[yy, xx]]);
                                }
                            }
                        }
                    }
                    let total = (t1 - t0 + 1) * (y1 - y0 + 1) * (x1 - x0 + 1);
                    if !us.is_empty() && 2 * us.len() >= total {
                        out.u[[y, x]] = median(&mut us);
                        out.v[[y, x]] = median(&mut vs);
                    } else {
                        out.valid[[y, x]] = false;
                    }
                }
            }
            out
        })
        .collect())
}

/// Quantities that can be scaled uniformly.
pub trait Scalable: Sized {
    fn scale_by(&self, factor: f64) -> Self;
}

impl Scalable for f64 {
    fn scale_by(&self, factor: f64) -> Self {
        self * factor
    }
}

impl Scalable for [f64; 2] {
    fn scale_by(&self, factor: f64) -> Self {
        [self[0] * factor, self[1] * factor]
    }
}

impl Scalable for DisplacementField {
    fn scale_by(&self, factor: f64) -> Self {
        self.scaled(factor)
    }
}

/// Divides a measured (magnified) displacement by `1 + alpha`.
pub fn unmagnify<T: Scalable>(measured: &T, alpha: f64) -> T {
    measured.scale_by(1.0 / (1.0 + alpha))
}

/// Converts pixels to millimetres with the ring's scale factor.
pub fn metric_scale<T: Scalable>(displacement_px: &T, cal: &RingCalibration) -> T {
    displacement_px.scale_by(cal.scale_mm_per_px())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingCalibration {
    pub ring_id: String,
    pub prism_a_px: [f64; 2],
    pub prism_b_px: [f64; 2],
    pub prism_separation_mm: f64,
}

impl RingCalibration {
    pub fn new(ring_id: impl Into<String>, prism_a_px: [f64; 2], prism_b_px: [f64; 2], prism_separation_mm: f64) -> Result<Self> {
        let cal = Self {
            ring_id: ring_id.into(),
            prism_a_px,
            prism_b_px,
            prism_separation_mm,
        };
        cal.validate()?;
        Ok(cal)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.prism_a_px.iter().chain(&self.prism_b_px).all(|v| v.is_finite()) {
            return Err(Error::param("prism_px", "prism coordinates must be finite"));
        }
        if self.pixel_distance() == 0.0 {
            return Err(Error::param("prism_px", "prism positions must be distinct"));
        }
        if !(self.prism_separation_mm > 0.0 && self.prism_separation_mm.is_finite()) {
            return Err(Error::param("prism_separation_mm", "must be positive"));
        }
        Ok(())
    }

    pub fn pixel_distance(&self) -> f64 {
        dist(self.prism_a_px, self.prism_b_px)
    }

    pub fn scale_mm_per_px(&self) -> f64 {
        self.prism_separation_mm / self.pixel_distance()
    }
}

/// Ordered sample points on a ring with outward unit normals. Angles are
/// measured clockwise (as seen in the image) from the crown.
#[derive(Debug, Clone, PartialEq)]
pub struct RingProfile {
    center_px: [f64; 2],
    points: Vec<[f64; 2]>,
    normals: Vec<[f64; 2]>,
    angles_deg: Vec<f64>,
}

impl RingProfile {
    /// Points with normals pointing away from `center_px`.
    pub fn from_points(center_px: [f64; 2], points: Vec<[f64; 2]>) -> Result<Self> {
        let normals = points
            .iter()
            .map(|p| {
                let d = [p[0] - center_px[0], p[1] - center_px[1]];
                let r = d[0].hypot(d[1]);
                [d[0] / r, d[1] / r]
            })
            .collect();
        let angles_deg = points.iter().map(|p| angle_from_crown(center_px, *p)).collect();
        Self::with_normals(center_px, points, normals, angles_deg)
    }

    /// `m` points equally spaced in angle on an axis-aligned ellipse, the
    /// first at the crown.
    pub fn ellipse(center_px: [f64; 2], semi_axis_x: f64, semi_axis_y: f64, m: usize) -> Result<Self> {
        if !(semi_axis_x > 0.0 && semi_axis_y > 0.0) {
            return Err(Error::param("profile.semi_axes", "must be positive"));
        }
        let angles_deg: Vec<f64> = (0..m).map(|j| j as f64 * 360.0 / m as f64).collect();
        let mut points = Vec::with_capacity(m);
        let mut normals = Vec::with_capacity(m);
        for &a in &angles_deg {
            let (s, c) = a.to_radians().sin_cos();
            points.push([center_px[0] + semi_axis_x * s, center_px[1] - semi_axis_y * c]);
            let n = [s / semi_axis_x, -c / semi_axis_y];
            let len = n[0].hypot(n[1]);
            normals.push([n[0] / len, n[1] / len]);
        }
        Self::with_normals(center_px, points, normals, angles_deg)
    }

    pub fn with_normals(center_px: [f64; 2], points: Vec<[f64; 2]>, normals: Vec<[f64; 2]>, angles_deg: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::param("profile", "needs at least 2 sample points"));
        }
        if normals.len() != points.len() || angles_deg.len() != points.len() {
            return Err(Error::param("profile", "points, normals and angles differ in length"));
        }
        for n in &normals {
            if !((n[0].hypot(n[1]) - 1.0).abs() <= 1e-9) {
                return Err(Error::param("profile", "normals must be unit length"));
            }
        }
        for (i, a) in points.iter().enumerate() {
            if !a.iter().all(|v| v.is_finite()) {
                return Err(Error::param("profile", "points must be finite"));
            }
            if points[..i].iter().any(|b| b == a) {
                return Err(Error::param("profile", "points must be distinct"));
            }
        }
        Ok(Self {
            center_px,
            points,
            normals,
            angles_deg,
        })
    }

    pub fn center_px(&self) -> [f64; 2] {
        self.center_px
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn normals(&self) -> &[[f64; 2]] {
        &self.normals
    }

    pub fn angles_deg(&self) -> &[f64] {
        &self.angles_deg
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn angle_from_crown(center: [f64; 2], p: [f64; 2]) -> f64 {
    let a = (p[0] - center[0]).atan2(center[1] - p[1]).to_degrees();
    if a < 0.0 {
        a + 360.0
    } else {
        a
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn inside(field: &DisplacementField, p: [f64; 2]) -> bool {
    let (x, y) = (p[0].round(), p[1].round());
    x >= 0.0 && y >= 0.0 && x < field.width() as f64 && y < field.height() as f64
}

/// Largest Chebyshev radius searched for valid pixels around an untracked
/// point; about half the default flow window.
pub const FALLBACK_RADIUS_PX: usize = 7;

/// Displacement at the pixel nearest `p`. When that pixel is invalid, the
/// mean over the valid pixels of the smallest square neighbourhood (radius
/// up to [`FALLBACK_RADIUS_PX`]) that contains any.
pub fn displacement_at(field: &DisplacementField, p: [f64; 2]) -> Option<[f64; 2]> {
    if !inside(field, p) {
        return None;
    }
    let (x, y) = (p[0].round() as usize, p[1].round() as usize);
    if field.valid[[y, x]] {
        return Some([field.u[[y, x]], field.v[[y, x]]]);
    }
    for r in 1..=FALLBACK_RADIUS_PX {
        let mut acc = [0.0, 0.0];
        let mut n = 0usize;
        for yy in y.saturating_sub(r)..=(y + r).min(field.height() - 1) {
            for xx in x.saturating_sub(r)..=(x + r).min(field.width() - 1) {
                if field.valid[[yy, xx]] {
                    acc[0] += field.u[[yy, xx]];
                    acc[1] += field.v[[yy, xx]];
                    n += 1;
                }
            }
        }
        if n > 0 {
            return Some([acc[0] / n as f64, acc[1] / n as f64]);
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSeries {
    pub ring_id: String,
    pub alpha: f64,
    pub timestamps: Vec<f64>,
    pub values_mm: Vec<f64>,
}

/// Change in prism-pair distance per frame, in millimetres, unmagnified.
pub fn convergence(fields: &[DisplacementField], cal: &RingCalibration, alpha: f64, timestamps: &[f64]) -> Result<ConvergenceSeries> {
    cal.validate()?;
    if fields.is_empty() {
        return Err(Error::EmptySeries);
    }
    if fields.len() != timestamps.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} fields for {} timestamps",
            fields.len(),
            timestamps.len()
        )));
    }
    for p in [cal.prism_a_px, cal.prism_b_px] {
        if !inside(&fields[0], p) {
            return Err(Error::PrismOutOfFrame(p));
        }
    }
    let (pa, pb) = (cal.prism_a_px, cal.prism_b_px);
    let chord = [pa[0] - pb[0], pa[1] - pb[1]];
    let rest = chord[0].hypot(chord[1]);
    let factor = cal.scale_mm_per_px() / (1.0 + alpha);
    let values_mm = fields
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let ua = displacement_at(f, pa).ok_or(Error::PrismUntracked { position: pa, frame: t })?;
            let ub = displacement_at(f, pb).ok_or(Error::PrismUntracked { position: pb, frame: t })?;
            let moved = [chord[0] + (ua[0] - ub[0]), chord[1] + (ua[1] - ub[1])];
            Ok((moved[0].hypot(moved[1]) - rest) * factor + 0.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ConvergenceSeries {
        ring_id: cal.ring_id.clone(),
        alpha,
        timestamps: timestamps.to_vec(),
        values_mm,
    })
}

/// Displacements minus their component-wise median, projected onto the
/// given unit normals.
pub fn relative_radial(displacements: &[[f64; 2]], normals: &[[f64; 2]]) -> Vec<f64> {
    let mut xs: Vec<f64> = displacements.iter().map(|d| d[0]).collect();
    let mut ys: Vec<f64> = displacements.iter().map(|d| d[1]).collect();
    let (mx, my) = (median(&mut xs), median(&mut ys));
    displacements
        .iter()
        .zip(normals)
        .map(|(d, n)| (d[0] - mx) * n[0] + (d[1] - my) * n[1] + 0.0)
        .collect()
}

/// Relative radial displacement (mm, outward positive, unmagnified) of
/// every profile point at one frame.
pub fn ring_shape(
    fields: &[DisplacementField],
    profile: &RingProfile,
    cal: &RingCalibration,
    alpha: f64,
    frame_index: usize,
) -> Result<Vec<f64>> {
    let field = fields
        .get(frame_index)
        .ok_or_else(|| Error::param("frame_index", format!("{frame_index} out of range")))?;
    let disp = profile
        .points()
        .iter()
        .enumerate()
        .map(|(i, &p)| displacement_at(field, p).ok_or(Error::PointUntracked { index: i }))
        .collect::<Result<Vec<_>>>()?;
    let factor = cal.scale_mm_per_px() / (1.0 + alpha);
    Ok(relative_radial(&disp, profile.normals())
        .into_iter()
        .map(|r| r * factor + 0.0)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationMap {
    pub ring_id: String,
    pub angles_deg: Vec<f64>,
    /// `radial_mm[frame][point]`.
    pub radial_mm: Vec<Vec<f64>>,
}

pub fn deformation_map(fields: &[DisplacementField], profile: &RingProfile, cal: &RingCalibration, alpha: f64) -> Result<DeformationMap> {
    let radial_mm = (0..fields.len())
        .map(|t| ring_shape(fields, profile, cal, alpha, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(DeformationMap {
        ring_id: cal.ring_id.clone(),
        angles_deg: profile.angles_deg().to_vec(),
        radial_mm,
    })
}

impl DeformationMap {
    pub fn max_abs(&self) -> f64 {
        self.radial_mm.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn convergence_csv(series: &[ConvergenceSeries]) -> String {
    let mut out = String::from("timestamp_s,ring_id,convergence_mm\n");
    for s in series {
        for (t, v) in s.timestamps.iter().zip(&s.values_mm) {
            writeln!(out, "{t},{},{v}", s.ring_id).expect("writing to a String cannot fail");
        }
    }
    out
}

pub fn deformation_csv(map: &DeformationMap) -> String {
    let mut out = String::from("frame_index,point_index,angle_deg,radial_mm\n");
    for (f, row) in map.radial_mm.iter().enumerate() {
        for (i, (a, r)) in map.angles_deg.iter().zip(row).enumerate() {
            writeln!(out, "{f},{i},{a},{r}").expect("writing to a String cannot fail");
        }
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_convergence_csv(path: &Path, series: &[ConvergenceSeries]) -> Result<()> {
    write_text(path, &convergence_csv(series))
}

pub fn write_deformation_csv(path: &Path, map: &DeformationMap) -> Result<()> {
    write_text(path, &deformation_csv(map))
}

fn diverging_color(v: f64, limit: f64) -> Rgb<u8> {
    let t = if limit > 0.0 { (v / limit).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |x: f64| (255.0 * (1.0 - x.abs())).round() as u8;
    if t >= 0.0 {
        Rgb([255, fade(t), fade(t)])
    } else {
        Rgb([fade(t), fade(t), 255])
    }
}

/// Renders one frame of a deformation map as the closed ring polyline on a
/// black `width x height` canvas, coloured blue (inward, `-limit_mm`)
/// through white to red (outward, `+limit_mm`).
pub fn render_ring_png(
    map: &DeformationMap,
    profile: &RingProfile,
    frame: usize,
    width: usize,
    height: usize,
    limit_mm: f64,
    path: &Path,
) -> Result<()> {
    let row = map
        .radial_mm
        .get(frame)
        .ok_or_else(|| Error::param("frame", format!("{frame} out of range")))?;
    let mut img = RgbImage::new(width as u32, height as u32);
    let pts = profile.points();
    let m = pts.len();
    for i in 0..m {
        let (a, b) = (pts[i], pts[(i + 1) % m]);
        let (va, vb) = (row[i], row[(i + 1) % m]);
        let steps = (dist(a, b).ceil() as usize * 2).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (a[0] + t * (b[0] - a[0])).round();
            let y = (a[1] + t * (b[1] - a[1])).round();
            if x >= 0.0 && y >= 0.0 && (x as usize) < width && (y as usize) < height {
                img.put_pixel(x as u32, y as u32, diverging_color(va + t * (vb - va), limit_mm));
            }
        }
    }
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Sidecar describing the fixed colour scale of rendered ring maps.
pub fn color_scale_text(limit_mm: f64) -> String {
    format!(
        "colormap = blue-white-red\nmin_radial_mm = {}\nmax_radial_mm = {}\nnegative = inward\n",
        -limit_mm, limit_mm
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn field_fn(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> DisplacementField {
        let mut d = DisplacementField::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = f(x, y);
                d.u[[y, x]] = u;
                d.v[[y, x]] = v;
            }
        }
        d
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&mut [7.0]), 7.0);
    }

    #[test]
    fn unit_windows_are_identity() {
        let f = field_fn(7, 5, |x, y| (x as f64 * 0.3, y as f64 - 1.0));
        let out = st_median(&[f.clone(), f.clone()], 1, 1).unwrap();
        assert_eq!(out[0], f);
    }

    #[test]
    fn impulse_is_removed() {
        let mut f = DisplacementField::uniform(9, 9, 2.0, 2.0);
        f.u[[4, 4]] = 50.0;
        let fields = vec![f.clone(), f.clone(), f];
        let out = st_median(&fields, 3, 3).unwrap();
        assert_eq!(out[1].u[[4, 4]], 2.0);
    }

    #[test]
    fn noise_is_reduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let fields: Vec<DisplacementField> = (0..12)
            .map(|_| field_fn(24, 24, |_, _| (noise.sample(&mut rng), noise.sample(&mut rng))))
            .collect();
        let out = st_median(&fields, 5, 3).unwrap();
        // Interior pixels of interior frames, per-pixel spread across frames.
        let mut sum_sq = 0.0;
        let mut n = 0usize;
        for f in &out[1..11] {
            for y in 2..22 {
                for x in 2..22 {
                    sum_sq += f.u[[y, x]] * f.u[[y, x]];
                    n += 1;
                }
            }
        }
        let std = (sum_sq / n as f64).sqrt();
        assert!(std < 0.04, "std {std}");
    }

    #[test]
    fn invalid_majority_propagates() {
        let mut f = DisplacementField::uniform(5, 5, 1.0, 0.0);
        f.valid = Array2::from_elem((5, 5), false);
        f.valid[[2, 2]] = true;
        let out = st_median(&[f], 3, 1).unwrap();
        assert!(!out[0].valid[[2, 2]]);
        assert!(matches!(st_median(&[], 3, 1), Err(Error::EmptySeries)));
        let g = DisplacementField::zeros(4, 4);
        assert!(matches!(st_median(&[g], 2, 1), Err(Error::EvenWindow(2))));
    }

    #[test]
    fn scaling_examples() {
        assert_eq!(unmagnify(&1.6, 15.0), 0.1);
        assert_eq!(unmagnify(&0.7, 0.0), 0.7);
        let f = DisplacementField::uniform(3, 2, 3.2, -1.6);
        let g = unmagnify(&f, 15.0);
        assert_eq!(g.u[[1, 2]], 0.2);
        assert_eq!(g.v[[0, 0]], -0.1);
        let cal = RingCalibration::new("R", [0.0, 0.0], [0.0, 100.0], 1000.0).unwrap();
        assert_eq!(cal.scale_mm_per_px(), 10.0);
        assert_eq!(metric_scale(&0.1, &cal), 1.0);
        assert_eq!(metric_scale(&0.0, &cal), 0.0);
    }

    #[test]
    fn calibration_rejects_bad_input() {
        assert!(RingCalibration::new("R", [1.0, 1.0], [1.0, 1.0], 10.0).is_err());
        assert!(RingCalibration::new("R", [1.0, 1.0], [2.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn convergence_definition() {
        let cal = RingCalibration::new("R", [10.0, 2.0], [10.0, 22.0], 200.0).unwrap();
        let zero = vec![DisplacementField::zeros(20, 25); 3];
        let ts = [0.0, 1.0, 2.0];
        let c = convergence(&zero, &cal, 15.0, &ts).unwrap();
        assert!(c.values_mm.iter().all(|&v| v == 0.0));

        // Prism A moves 0.8 px towards B.
        let mut f = DisplacementField::zeros(20, 25);
        f.v[[2, 10]] = 0.8;
        let c = convergence(&[DisplacementField::zeros(20, 25), f], &cal, 15.0, &[0.0, 1.0]).unwrap();
        assert!((c.values_mm[1] + 0.5).abs() < 1e-12, "{}", c.values_mm[1]);
    }

    #[test]
    fn convergence_falls_back_to_neighbourhood() {
        let cal = RingCalibration::new("R", [5.0, 5.0], [5.0, 15.0], 10.0).unwrap();
        let mut f = DisplacementField::uniform(12, 20, 0.0, 0.5);
        f.valid[[5, 5]] = false;
        f.v[[5, 5]] = 100.0;
        let c = convergence(&[f.clone()], &cal, 0.0, &[0.0]).unwrap();
        assert!(c.values_mm[0].abs() < 1e-12);
        f.valid.fill(false);
        f.valid[[5 + FALLBACK_RADIUS_PX, 5]] = true;
        let c = convergence(&[f.clone()], &cal, 0.0, &[0.0]).unwrap();
        assert!(c.values_mm[0].is_finite());
        f.valid.fill(false);
        assert!(matches!(
            convergence(&[f], &cal, 0.0, &[0.0]),
            Err(Error::PrismUntracked { frame: 0, .. })
        ));
        let out = RingCalibration::new("R", [5.0, 5.0], [5.0, 30.0], 10.0).unwrap();
        assert!(matches!(
            convergence(&[DisplacementField::zeros(12, 20)], &out, 0.0, &[0.0]),
            Err(Error::PrismOutOfFrame(_))
        ));
    }

    #[test]
    fn rigid_translation_leaves_shape_flat() {
        let profile = RingProfile::ellipse([20.0, 20.0], 10.0, 10.0, 6).unwrap();
        let cal = RingCalibration::new("R", [20.0, 10.0], [20.0, 30.0], 20.0).unwrap();
        let fields = vec![DisplacementField::uniform(40, 40, 0.37, -1.25)];
        let r = ring_shape(&fields, &profile, &cal, 15.0, 0).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn two_sample_profile_is_antisymmetric() {
        let profile = RingProfile::from_points([10.0, 10.0], vec![[10.0, 4.0], [10.0, 16.0]]).unwrap();
        let cal = RingCalibration::new("R", [10.0, 4.0], [10.0, 16.0], 12.0).unwrap();
        let mut f = DisplacementField::zeros(20, 20);
        f.v[[4, 10]] = 0.4;
        let r = ring_shape(&[f], &profile, &cal, 0.0, 0).unwrap();
        // Median of two is their mean, so the two points split the motion.
        assert!((r[0] + 0.2).abs() < 1e-12 && (r[1] + 0.2).abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn profile_geometry() {
        let p = RingProfile::ellipse([0.0, 0.0], 4.0, 2.0, 4).unwrap();
        assert_eq!(p.angles_deg(), &[0.0, 90.0, 180.0, 270.0]);
        let crown = p.points()[0];
        assert!((crown[0]).abs() < 1e-12 && (crown[1] + 2.0).abs() < 1e-12);
        assert!((p.normals()[1][0] - 1.0).abs() < 1e-12);
        let q = RingProfile::from_points([0.0, 0.0], vec![[0.0, -3.0], [3.0, 0.0], [0.0, 3.0]]).unwrap();
        assert_eq!(q.angles_deg(), &[0.0, 90.0, 180.0]);
        assert!(RingProfile::from_points([0.0, 0.0], vec![[1.0, 1.0]]).is_err());
        assert!(RingProfile::from_points([0.0, 0.0], vec![[1.0, 1.0], [1.0, 1.0]]).is_err());
    }

    #[test]
    fn csv_layout() {
        let s = ConvergenceSeries {
            ring_id: "R27".into(),
            alpha: 15.0,
            timestamps: vec![0.0, 60.0],
            values_mm: vec![0.0, -1.5],
        };
        assert_eq!(convergence_csv(&[s]), "timestamp_s,ring_id,convergence_mm\n0,R27,0\n60,R27,-1.5\n");
        let m = DeformationMap {
            ring_id: "R27".into(),
            angles_deg: vec![0.0, 180.0],
            radial_mm: vec![vec![0.0, 0.0], vec![-0.8, 0.25]],
        };
        assert_eq!(
            deformation_csv(&m),
            "frame_index,point_index,angle_deg,radial_mm\n0,0,0,0\n0,1,180,0\n1,0,0,-0.8\n1,1,180,0.25\n"
        );
    }

    #[test]
    fn ring_png_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let profile = RingProfile::ellipse([16.0, 16.0], 10.0, 10.0, 6).unwrap();
        let m = DeformationMap {
            ring_id: "R".into(),
            angles_deg: profile.angles_deg().to_vec(),
            radial_mm: vec![vec![-1.0, 0.5, 0.5, -1.0, 0.5, 0.5]],
        };
        let p = dir.path().join("ring.png");
        render_ring_png(&m, &profile, 0, 32, 32, 1.0, &p).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        // The crown is fully inward: pure blue.
        assert_eq!(img.get_pixel(16, 6), &Rgb([0, 0, 255]));
        assert!(color_scale_text(1.0).contains("max_radial_mm = 1"));
    }
}
