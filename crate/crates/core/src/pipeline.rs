//! Config-driven processing: ingest -> magnify (+ Wiener) -> flow ->
//! analyze, plus scene synthesis.
//!
//! Every stage reads and writes documented files inside the output
//! directory, so any stage can be re-run on the intermediates of an
//! earlier run:
//!
//! ```text
//! <output.dir>/
//!   ingested/manifest.csv, frame_NNNNN.png    ingest: downsampled, illumination-corrected
//!   magnified/manifest.csv, frame_NNNNN.png   magnify: magnified and Wiener-smoothed
//!   flow/manifest.csv, flow_NNNNN.pflo        flow: raw reference-to-frame fields
//!   convergence.csv                           analyze: all rings
//!   deformation_map_<ring_id>.csv             analyze: one per ring
//!   ring_<ring_id>.png, ring_<ring_id>.txt    analyze: final-frame map and colour scale
//!   report.json                               every run, also on failure
//! ```
//!
//! A full run quantises frames to 16 bits and flow to `f32` at the same
//! boundaries, so its results match a chain of single-stage runs exactly.
//! Ring coordinates in the config are in original (pre-downsampling)
//! pixels.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    color_scale_text, convergence, deformation_map, render_ring_png, st_median, write_convergence_csv,
    write_deformation_csv, ConvergenceSeries, RingCalibration, RingProfile,
};
use crate::error::{Error, Result};
use crate::flow::{flow_series, DisplacementField, FlowParams};
use crate::ingest::{
    correct_illumination, crop_to_even, downsample, load_sequence, read_manifest, write_sequence, FrameSequence,
    IlluminationMode, IlluminationParams, MANIFEST_NAME,
};
use crate::magnify::{
    magnify_sequence, uniform_interval, wiener_smooth, MagnificationParams, TemporalBand, DEFAULT_ALPHA,
    DEFAULT_AMPLITUDE_FLOOR, DEFAULT_CUTOFF_PERIOD_HOURS, DEFAULT_WIENER_WINDOW,
};
use crate::pyramid::{dump_pyramid, max_scales, FilterBank, DEFAULT_ORIENTATIONS, MAX_BANDS_PER_OCTAVE};
use crate::synth::{generate, write_scene, SceneSpec};

pub const REPORT_FILE: &str = "report.json";
pub const LOCK_FILE: &str = ".lock";
pub const INGESTED_DIR: &str = "ingested";
pub const MAGNIFIED_DIR: &str = "magnified";
pub const FLOW_DIR: &str = "flow";
pub const PYRAMID_DIR: &str = "pyramid";
pub const CONVERGENCE_FILE: &str = "convergence.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: InputConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub pyramid: PyramidConfig,
    #[serde(default)]
    pub magnify: MagnifyConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub median: MedianConfig,
    #[serde(default)]
    pub rings: Vec<RingConfig>,
    pub output: OutputConfig,
    /// Scene rendered by the `synth` stage into the directory of
    /// `input.manifest_path`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SceneSpec>,
    /// Directory that relative paths are resolved against; the config
    /// file's directory when loaded from disk.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub manifest_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub downsample_factor: usize,
    pub illumination: IlluminationConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            downsample_factor: 1,
            illumination: IlluminationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IlluminationConfig {
    pub enabled: bool,
    /// Background scale; `min(width, height) / 8` of the processed frame
    /// when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_px: Option<f64>,
    pub mode: IlluminationMode,
}

impl Default for IlluminationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            sigma_px: None,
            mode: IlluminationMode::Divide,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidConfig {
    /// Every scale that fits, `bands_per_octave * (floor(log2(min side)) - 2)`,
    /// when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_scales: Option<usize>,
    pub n_orientations: usize,
    /// Radial bands per octave; narrower bands track larger magnified
    /// motions more faithfully at proportionally higher cost.
    pub bands_per_octave: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            n_scales: None,
            n_orientations: DEFAULT_ORIENTATIONS,
            bands_per_octave: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MagnifyConfig {
    pub alpha: f64,
    pub band: BandConfig,
    pub wiener: WienerConfig,
    pub reference_index: usize,
    pub amplitude_floor: f64,
}

impl Default for MagnifyConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            band: BandConfig::default(),
            wiener: WienerConfig::default(),
            reference_index: 0,
            amplitude_floor: DEFAULT_AMPLITUDE_FLOOR,
        }
    }
}

/// Either `cutoff_period_hours` (keep everything slower) or an explicit
/// `low_hz`/`high_hz` pair. An empty table means a 12 h cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cutoff_period_hours: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub low_hz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub high_hz: Option<f64>,
    pub carry_drift: bool,
}

impl Default for BandConfig {
    fn default() -> Self {
        Self {
            cutoff_period_hours: None,
            low_hz: None,
            high_hz: None,
            carry_drift: true,
        }
    }
}

impl BandConfig {
    pub fn to_band(&self) -> Result<TemporalBand> {
        let band = match (self.cutoff_period_hours, self.low_hz, self.high_hz) {
            (Some(h), None, None) => {
                if !(h > 0.0 && h.is_finite()) {
                    return Err(Error::config("magnify.band.cutoff_period_hours", "must be positive"));
                }
                TemporalBand::longer_than_hours(h)
            }
            (None, Some(lo), Some(hi)) => TemporalBand::new(lo, hi),
            (None, None, None) => TemporalBand::longer_than_hours(DEFAULT_CUTOFF_PERIOD_HOURS),
            _ => {
                return Err(Error::config(
                    "magnify.band",
                    "give either cutoff_period_hours or both low_hz and high_hz",
                ))
            }
        };
        Ok(if self.carry_drift { band } else { band.without_drift() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WienerConfig {
    pub enabled: bool,
    pub window: usize,
    /// Estimated per frame as the mean local variance when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_variance: Option<f64>,
}

impl Default for WienerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            window: DEFAULT_WIENER_WINDOW,
            noise_variance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub n_levels: usize,
    pub window: usize,
    pub iterations: usize,
    pub min_eig: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let p = FlowParams::default();
        Self {
            n_levels: p.n_levels,
            window: p.window,
            iterations: p.iterations,
            min_eig: p.min_eig,
        }
    }
}

impl FlowConfig {
    pub fn params(&self) -> FlowParams {
        FlowParams {
            n_levels: self.n_levels,
            window: self.window,
            iterations: self.iterations,
            min_eig: self.min_eig,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MedianConfig {
    pub spatial_window: usize,
    pub temporal_window: usize,
}

impl Default for MedianConfig {
    fn default() -> Self {
        Self {
            spatial_window: 5,
            temporal_window: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingConfig {
    pub ring_id: String,
    pub prism_a_px: [f64; 2],
    pub prism_b_px: [f64; 2],
    pub prism_separation_mm: f64,
    pub profile: ProfileConfig,
}

/// Explicit `sample_points`, or `m` points on an axis-aligned ellipse with
/// `semi_axes` starting at the crown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub center_px: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_points: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semi_axes: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    #[serde(default)]
    pub dumps: DumpConfig,
}

/// Which optional artifacts a full run writes. Single-stage runs always
/// write their stage's intermediate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DumpConfig {
    pub ingested: bool,
    pub magnified: bool,
    pub flow: bool,
    pub png: bool,
    /// Per-band magnitude/phase of the reference frame.
    pub pyramid: bool,
}

impl Default for DumpConfig {
    fn default() -> Self {
        Self {
            ingested: false,
            magnified: false,
            flow: true,
            png: true,
            pyramid: false,
        }
    }
}

/// Maps a coordinate in original pixels to the downsampled grid, where
/// output pixel `i` averages source pixels `k i .. k i + k - 1`.
pub fn downsample_coord(v: f64, factor: usize) -> f64 {
    let k = factor as f64;
    (v - 0.5 * (k - 1.0)) / k
}

fn with_field(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidParameter { name, reason } => {
            let field = if name.starts_with(section) {
                name.to_string()
            } else {
                format!("{section}.{name}")
            };
            Error::Config { field, reason }
        }
        Error::EvenWindow(w) => Error::Config {
            field: section.to_string(),
            reason: format!("window {w} must be odd"),
        },
        Error::TooManyScales { requested, max, .. } => Error::Config {
            field: "pyramid.n_scales".into(),
            reason: format!("{requested} requested, at most {max} fit the frame"),
        },
        Error::FrameTooSmallForLevels { width, height, .. } => Error::Config {
            field: "flow.n_levels".into(),
            reason: format!("too many levels for the window on a {width}x{height} frame"),
        },
        other => other,
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config {
            field: "<config>".into(),
            reason: e.to_string(),
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<config>", e.to_string()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.resolve(&self.input.manifest_path)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output.dir)
    }

    pub fn magnification_params(&self) -> Result<MagnificationParams> {
        Ok(MagnificationParams {
            alpha: self.magnify.alpha,
            band: self.magnify.band.to_band()?,
            reference_index: self.magnify.reference_index,
            amplitude_floor: self.magnify.amplitude_floor,
        })
    }

    /// Calibration and profile of every ring on the processed frame grid.
    pub fn ring_geometry(&self) -> Result<Vec<(RingCalibration, RingProfile)>> {
        let k = self.preprocess.downsample_factor.max(1);
        let map = |p: [f64; 2]| [downsample_coord(p[0], k), downsample_coord(p[1], k)];
        self.rings
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let field = |name: &str| format!("rings[{i}].{name}");
                let cal = RingCalibration::new(r.ring_id.clone(), map(r.prism_a_px), map(r.prism_b_px), r.prism_separation_mm)
                    .map_err(|e| match e {
                        Error::InvalidParameter { name, reason } => Error::Config { field: field(name), reason },
                        other => other,
                    })?;
                let pr = &r.profile;
                let center = map(pr.center_px);
                let profile = match (&pr.sample_points, pr.semi_axes, pr.m) {
                    (Some(points), None, None) => {
                        RingProfile::from_points(center, points.iter().map(|&p| map(p)).collect())
                    }
                    (None, Some([ax, ay]), Some(m)) => RingProfile::ellipse(center, ax / k as f64, ay / k as f64, m),
                    _ => {
                        return Err(Error::Config {
                            field: field("profile"),
                            reason: "give either sample_points or semi_axes with m".into(),
                        })
                    }
                }
                .map_err(|e| match e {
                    Error::InvalidParameter { reason, .. } => Error::Config {
                        field: field("profile"),
                        reason,
                    },
                    other => other,
                })?;
                Ok((cal, profile))
            })
            .collect()
    }

    /// Checks everything that can be checked without running a stage.
    /// Frame-dependent constraints use the first frame listed in the input
    /// manifest when `stage` reads it.
    pub fn validate(&self, stage: Stage) -> Result<()> {
        if self.output.dir.as_os_str().is_empty() {
            return Err(Error::config("output.dir", "must not be empty"));
        }
        if self.preprocess.downsample_factor == 0 {
            return Err(Error::config("preprocess.downsample_factor", "must be at least 1"));
        }
        if let Some(s) = self.preprocess.illumination.sigma_px {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("preprocess.illumination.sigma_px", "must be positive"));
            }
        }
        if self.pyramid.n_orientations < 2 {
            return Err(Error::config("pyramid.n_orientations", "must be at least 2"));
        }
        if !(1..=MAX_BANDS_PER_OCTAVE).contains(&self.pyramid.bands_per_octave) {
            return Err(Error::config(
                "pyramid.bands_per_octave",
                format!("must be between 1 and {MAX_BANDS_PER_OCTAVE}"),
            ));
        }
        if self.pyramid.n_scales == Some(0) {
            return Err(Error::config("pyramid.n_scales", "must be at least 1"));
        }
        let m = &self.magnify;
        if !(m.alpha >= 0.0 && m.alpha.is_finite()) {
            return Err(Error::config("magnify.alpha", format!("{} is not a finite value >= 0", m.alpha)));
        }
        if !(m.amplitude_floor >= 0.0 && m.amplitude_floor.is_finite()) {
            return Err(Error::config("magnify.amplitude_floor", "must be >= 0"));
        }
        let band = m.band.to_band()?;
        if m.wiener.window % 2 == 0 || m.wiener.window < 3 {
            return Err(Error::config("magnify.wiener.window", "must be odd and at least 3"));
        }
        if let Some(nv) = m.wiener.noise_variance {
            if !(nv >= 0.0 && nv.is_finite()) {
                return Err(Error::config("magnify.wiener.noise_variance", "must be >= 0"));
            }
        }
        self.flow.params().validate().map_err(|e| with_field("flow", e))?;
        for (name, w) in [
            ("median.spatial_window", self.median.spatial_window),
            ("median.temporal_window", self.median.temporal_window),
        ] {
            if w % 2 == 0 {
                return Err(Error::config(name, "must be odd"));
            }
        }
        let geometry = self.ring_geometry()?;
        for (i, r) in self.rings.iter().enumerate() {
            if r.ring_id.is_empty()
                || !r.ring_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            {
                return Err(Error::Config {
                    field: format!("rings[{i}].ring_id"),
                    reason: "use letters, digits, '-', '_' or '.'".into(),
                });
            }
            if self.rings[..i].iter().any(|o| o.ring_id == r.ring_id) {
                return Err(Error::Config {
                    field: format!("rings[{i}].ring_id"),
                    reason: format!("duplicate ring id {}", r.ring_id),
                });
            }
        }

        match stage {
            Stage::Synth => {
                let spec = self
                    .synth
                    .as_ref()
                    .ok_or_else(|| Error::config("synth", "the synth stage needs a [synth] scene table"))?;
                spec.validate()?;
                if self.manifest_path().file_name().and_then(|n| n.to_str()) != Some(MANIFEST_NAME) {
                    return Err(Error::config(
                        "input.manifest_path",
                        format!("must name a `{MANIFEST_NAME}` file for the synth stage"),
                    ));
                }
            }
            Stage::Full | Stage::Ingest => {
                let manifest = self.manifest_path();
                if !manifest.is_file() {
                    return Err(Error::config(
                        "input.manifest_path",
                        format!("{} does not exist", manifest.display()),
                    ));
                }
                let entries = read_manifest(&manifest)?;
                let (first, _) = entries
                    .first()
                    .ok_or(Error::TooFewFrames { found: 0, required: 2 })?;
                if !first.is_file() {
                    return Err(Error::MissingFile(first.clone()));
                }
                let (w, h) = image::image_dimensions(first).map_err(|e| Error::Decode {
                    path: first.clone(),
                    message: e.to_string(),
                })?;
                let k = self.preprocess.downsample_factor;
                let (w, h) = ((w as usize / k) & !1, (h as usize / k) & !1);
                self.validate_frame_geometry(w, h, entries.len())?;
                let ts: Vec<f64> = entries.iter().map(|e| e.1).collect();
                if let Ok(dt) = uniform_interval(&ts) {
                    band.validate(dt).map_err(|e| with_field("magnify.band", e))?;
                }
                for (i, (cal, profile)) in geometry.iter().enumerate() {
                    let inside = |p: [f64; 2]| p[0] > -0.5 && p[1] > -0.5 && p[0] < w as f64 - 0.5 && p[1] < h as f64 - 0.5;
                    if !inside(cal.prism_a_px) || !inside(cal.prism_b_px) {
                        return Err(Error::Config {
                            field: format!("rings[{i}]"),
                            reason: "prism outside the processed frame".into(),
                        });
                    }
                    if !profile.points().iter().all(|&p| inside(p)) {
                        return Err(Error::Config {
                            field: format!("rings[{i}].profile"),
                            reason: "sample point outside the processed frame".into(),
                        });
                    }
                }
            }
            Stage::Magnify | Stage::Flow | Stage::Analyze => {}
        }
        Ok(())
    }

    fn validate_frame_geometry(&self, w: usize, h: usize, n_frames: usize) -> Result<()> {
        if w < 16 || h < 16 {
            return Err(Error::config(
                "preprocess.downsample_factor",
                format!("processed frames would be {w}x{h}; at least 16x16 is needed"),
            ));
        }
        if let Some(n) = self.pyramid.n_scales {
            let max = self.pyramid.bands_per_octave * max_scales(w, h);
            if n > max {
                return Err(Error::config(
                    "pyramid.n_scales",
                    format!("{n} requested, at most {max} fit a {w}x{h} frame"),
                ));
            }
        }
        let need = (1usize << (self.flow.n_levels - 1)) * self.flow.window;
        if w.min(h) < need {
            return Err(Error::config(
                "flow.n_levels",
                format!("{} levels with window {} need frames of at least {need} px", self.flow.n_levels, self.flow.window),
            ));
        }
        if self.magnify.reference_index >= n_frames {
            return Err(Error::config(
                "magnify.reference_index",
                format!("{} is out of range for {n_frames} frames", self.magnify.reference_index),
            ));
        }
        Ok(())
    }

    fn filter_bank(&self, w: usize, h: usize) -> Result<FilterBank> {
        let (k, per_octave) = (self.pyramid.n_orientations, self.pyramid.bands_per_octave);
        let n = self
            .pyramid
            .n_scales
            .unwrap_or(per_octave * max_scales(w, h).max(1));
        FilterBank::with_bands_per_octave(w, h, n, k, per_octave).map_err(|e| with_field("pyramid", e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Full,
    Ingest,
    Magnify,
    Flow,
    Analyze,
    Synth,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Full,
        Stage::Ingest,
        Stage::Magnify,
        Stage::Flow,
        Stage::Analyze,
        Stage::Synth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Full => "full",
            Stage::Ingest => "ingest",
            Stage::Magnify => "magnify",
            Stage::Flow => "flow",
            Stage::Analyze => "analyze",
            Stage::Synth => "synth",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::UnknownStage(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCounts {
    pub input: usize,
    pub processed: usize,
    pub flow_fields: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub command: String,
    pub success: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: PipelineConfig,
    pub timings: Vec<StageTiming>,
    pub frames: FrameCounts,
    pub warnings: Vec<String>,
    pub outputs: Vec<OutputFile>,
}

impl RunReport {
    fn new(command: Stage, config: &PipelineConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            success: false,
            failed_stage: None,
            error: None,
            config: config.clone(),
            timings: Vec::new(),
            frames: FrameCounts::default(),
            warnings: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn output(&self, path: &str) -> Option<&OutputFile> {
        self.outputs.iter().find(|o| o.path == path)
    }
}

/// Holds `<dir>/.lock` for the lifetime of a run.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// Results of the analysis stage, kept for callers that want numbers
/// rather than files.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub convergence: Vec<ConvergenceSeries>,
    pub deformation: Vec<crate::analysis::DeformationMap>,
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
    report: RunReport,
}

impl Run<'_> {
    fn timed<T>(&mut self, stage: Stage, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        log::info!("stage {stage} started");
        let t0 = Instant::now();
        let r = f(self);
        let seconds = t0.elapsed().as_secs_f64();
        self.report.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds,
        });
        match &r {
            Ok(_) => log::info!("stage {stage} finished in {seconds:.2} s"),
            Err(e) => {
                log::error!("stage {stage} failed: {e}");
                self.report.failed_stage = Some(stage.to_string());
                self.report.error = Some(e.to_string());
            }
        }
        r
    }

    fn record(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let rel = path
            .strip_prefix(&self.out)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        self.report.outputs.push(OutputFile {
            path: rel,
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    fn record_dir(&mut self, dir: &Path) -> Result<()> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        files.iter().try_for_each(|p| self.record(p))
    }

    fn write_frames(&mut self, seq: &FrameSequence, name: &str) -> Result<()> {
        let dir = self.out.join(name);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        write_sequence(seq, &dir)?;
        self.record_dir(&dir)
    }

    fn read_frames(&self, name: &str) -> Result<FrameSequence> {
        let manifest = self.out.join(name).join(MANIFEST_NAME);
        if !manifest.is_file() {
            return Err(Error::MissingIntermediate(manifest));
        }
        load_sequence(&manifest)
    }

    fn ingest(&mut self) -> Result<FrameSequence> {
        let cfg = self.cfg;
        let raw = load_sequence(&cfg.manifest_path())?;
        self.report.frames.input = raw.len();
        let mut seq = raw;
        if cfg.preprocess.downsample_factor > 1 {
            seq = downsample(&seq, cfg.preprocess.downsample_factor)?;
        }
        if seq.width() % 2 == 1 || seq.height() % 2 == 1 {
            self.report
                .warnings
                .push(format!("frames cropped from {}x{} to even size", seq.width(), seq.height()));
            seq = crop_to_even(&seq)?;
        }
        let ill = &cfg.preprocess.illumination;
        if ill.enabled {
            let mut p = IlluminationParams::default_for(seq.width(), seq.height());
            p.mode = ill.mode;
            if let Some(s) = ill.sigma_px {
                p.sigma_px = s;
            }
            seq = correct_illumination(&seq, &p)?;
        }
        Ok(seq.quantized())
    }

    fn magnify(&mut self, seq: &FrameSequence) -> Result<FrameSequence> {
        let cfg = self.cfg;
        let p = cfg.magnification_params()?;
        p.band
            .validate(uniform_interval(seq.timestamps())?)
            .map_err(|e| with_field("magnify.band", e))?;
        let bank = cfg.filter_bank(seq.width(), seq.height())?;
        if cfg.output.dumps.pyramid {
            let dir = self.out.join(PYRAMID_DIR);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let pyr = bank.decompose(seq.frame(p.reference_index))?;
            dump_pyramid(&pyr, &bank, &dir, "reference")?;
            self.record_dir(&dir)?;
        }
        let m = magnify_sequence(seq, &bank, &p)?;
        self.report.warnings.extend(m.warnings);
        let w = &cfg.magnify.wiener;
        let frames = if w.enabled {
            m.frames.map_frames(|f| {
                wiener_smooth(f, w.window, w.noise_variance).expect("window validated with the config")
            })?
        } else {
            m.frames
        };
        self.report.frames.processed = frames.len();
        Ok(frames.quantized())
    }

    fn flow(&mut self, seq: &FrameSequence) -> Result<Vec<DisplacementField>> {
        let p = self.cfg.flow.params();
        let fields: Vec<DisplacementField> = flow_series(seq, self.cfg.magnify.reference_index, &p)?
            .iter()
            .map(DisplacementField::rounded_f32)
            .collect();
        let npix = (seq.width() * seq.height()) as f64;
        for (t, f) in fields.iter().enumerate() {
            let frac = f.n_valid() as f64 / npix;
            if frac < 0.5 {
                self.report
                    .warnings
                    .push(format!("frame {t}: only {:.0}% of flow vectors are valid", 100.0 * frac));
            }
        }
        self.report.frames.flow_fields = fields.len();
        Ok(fields)
    }

    fn write_flow(&mut self, fields: &[DisplacementField], timestamps: &[f64]) -> Result<()> {
        let dir = self.out.join(FLOW_DIR);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut manifest = String::new();
        for (i, (f, t)) in fields.iter().zip(timestamps).enumerate() {
            let name = format!("flow_{i:05}.pflo");
            f.write_pflo(&dir.join(&name))?;
            manifest.push_str(&format!("{name},{t}\n"));
        }
        let path = dir.join(MANIFEST_NAME);
        std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        self.record_dir(&dir)
    }

    fn read_flow(&self) -> Result<(Vec<DisplacementField>, Vec<f64>)> {
        let manifest = self.out.join(FLOW_DIR).join(MANIFEST_NAME);
        if !manifest.is_file() {
            return Err(Error::MissingIntermediate(manifest));
        }
        let entries = read_manifest(&manifest)?;
        let fields = entries
            .iter()
            .map(|(p, _)| DisplacementField::read_pflo(p))
            .collect::<Result<Vec<_>>>()?;
        Ok((fields, entries.into_iter().map(|e| e.1).collect()))
    }

    fn analyze(&mut self, fields: &[DisplacementField], timestamps: &[f64]) -> Result<Analysis> {
        let cfg = self.cfg;
        let med = st_median(fields, cfg.median.spatial_window, cfg.median.temporal_window)?;
        let alpha = cfg.magnify.alpha;
        let mut series = Vec::new();
        let mut maps = Vec::new();
        for (cal, profile) in cfg.ring_geometry()? {
            series.push(convergence(&med, &cal, alpha, timestamps)?);
            maps.push((deformation_map(&med, &profile, &cal, alpha)?, profile));
        }
        let conv_path = self.out.join(CONVERGENCE_FILE);
        write_convergence_csv(&conv_path, &series)?;
        self.record(&conv_path)?;
        let (w, h) = (fields[0].width(), fields[0].height());
        for (map, profile) in &maps {
            let path = self.out.join(format!("deformation_map_{}.csv", map.ring_id));
            write_deformation_csv(&path, map)?;
            self.record(&path)?;
            if cfg.output.dumps.png {
                let limit = match map.max_abs() {
                    l if l > 0.0 => l,
                    _ => 1.0,
                };
                let png = self.out.join(format!("ring_{}.png", map.ring_id));
                render_ring_png(map, profile, map.radial_mm.len() - 1, w, h, limit, &png)?;
                self.record(&png)?;
                let txt = self.out.join(format!("ring_{}.txt", map.ring_id));
                std::fs::write(&txt, color_scale_text(limit)).map_err(|e| Error::io(&txt, e))?;
                self.record(&txt)?;
            }
        }
        Ok(Analysis {
            convergence: series,
            deformation: maps.into_iter().map(|(m, _)| m).collect(),
        })
    }

    fn synth(&mut self) -> Result<()> {
        let spec = self.cfg.synth.as_ref().expect("validated");
        let (seq, truth) = generate(spec)?;
        self.report.frames.processed = seq.len();
        let manifest = self.cfg.manifest_path();
        let dir = manifest.parent().unwrap_or(Path::new("."));
        write_scene(&seq, &truth, dir)?;
        Ok(())
    }

    fn finish(mut self, result: Result<Option<Analysis>>) -> Result<(RunReport, Option<Analysis>)> {
        self.report.success = result.is_ok();
        let path = self.out.join(REPORT_FILE);
        let json = serde_json::to_string_pretty(&self.report).expect("report is serialisable");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        match result {
            Ok(a) => Ok((self.report, a)),
            Err(e) => Err(Error::StageFailed {
                stage: self.report.failed_stage.clone().unwrap_or_default(),
                source: Box::new(e),
            }),
        }
    }
}

/// Validates `config` for `stage`, then runs it inside the (locked) output
/// directory. `output_override` replaces `output.dir`.
///
/// Validation failures return before anything is written. Stage failures
/// still write `report.json`, naming the failing stage, and come back as
/// [`Error::StageFailed`].
pub fn run(stage: Stage, config: &PipelineConfig, output_override: Option<&Path>) -> Result<(RunReport, Option<Analysis>)> {
    let mut cfg = config.clone();
    if let Some(o) = output_override {
        cfg.output.dir = if o.is_absolute() {
            o.to_path_buf()
        } else {
            std::env::current_dir().map_err(|e| Error::io(".", e))?.join(o)
        };
    }
    cfg.validate(stage)?;
    let out = cfg.output_dir();
    let _lock = DirLock::acquire(&out)?;
    let mut run = Run {
        cfg: &cfg,
        out,
        report: RunReport::new(stage, &cfg),
    };
    let result = execute(&mut run, stage);
    run.finish(result)
}

fn execute(run: &mut Run<'_>, stage: Stage) -> Result<Option<Analysis>> {
    let dumps = run.cfg.output.dumps.clone();
    match stage {
        Stage::Full => {
            let seq = run.timed(Stage::Ingest, |r| r.ingest())?;
            if dumps.ingested {
                run.timed(Stage::Ingest, |r| r.write_frames(&seq, INGESTED_DIR))?;
            }
            let mag = run.timed(Stage::Magnify, |r| r.magnify(&seq))?;
            if dumps.magnified {
                run.timed(Stage::Magnify, |r| r.write_frames(&mag, MAGNIFIED_DIR))?;
            }
            let fields = run.timed(Stage::Flow, |r| {
                let f = r.flow(&mag)?;
                if dumps.flow {
                    r.write_flow(&f, mag.timestamps())?;
                }
                Ok(f)
            })?;
            let a = run.timed(Stage::Analyze, |r| r.analyze(&fields, mag.timestamps()))?;
            Ok(Some(a))
        }
        Stage::Ingest => run.timed(Stage::Ingest, |r| {
            let seq = r.ingest()?;
            r.report.frames.processed = seq.len();
            r.write_frames(&seq, INGESTED_DIR).map(|_| None)
        }),
        Stage::Magnify => run.timed(Stage::Magnify, |r| {
            let seq = r.read_frames(INGESTED_DIR)?;
            r.report.frames.input = seq.len();
            let mag = r.magnify(&seq)?;
            r.write_frames(&mag, MAGNIFIED_DIR).map(|_| None)
        }),
        Stage::Flow => run.timed(Stage::Flow, |r| {
            let seq = r.read_frames(MAGNIFIED_DIR)?;
            r.report.frames.input = seq.len();
            let fields = r.flow(&seq)?;
            r.write_flow(&fields, seq.timestamps()).map(|_| None)
        }),
        Stage::Analyze => run.timed(Stage::Analyze, |r| {
            let (fields, ts) = r.read_flow()?;
            r.report.frames.input = fields.len();
            r.analyze(&fields, &ts).map(Some)
        }),
        Stage::Synth => run.timed(Stage::Synth, |r| r.synth().map(|_| None)),
    }
}

/// Loads the config at `config_path` and runs `stage`.
pub fn run_file(stage: Stage, config_path: &Path, output_override: Option<&Path>) -> Result<RunReport> {
    let cfg = PipelineConfig::from_file(config_path)?;
    run(stage, &cfg, output_override).map(|(r, _)| r)
}

pub fn run_full(config: &PipelineConfig) -> Result<RunReport> {
    run(Stage::Full, config, None).map(|(r, _)| r)
}

/// Runs one stage by name; unknown names give [`Error::UnknownStage`].
pub fn run_stage(stage_name: &str, config: &PipelineConfig, output_override: Option<&Path>) -> Result<RunReport> {
    let stage: Stage = stage_name.parse()?;
    run(stage, config, output_override).map(|(r, _)| r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> PipelineConfig {
        PipelineConfig::from_toml(
            r#"
            [input]
            manifest_path = "scene/manifest.csv"
            [output]
            dir = "out"
            "#,
            Path::new("/tmp/cfg"),
        )
        .unwrap()
    }

    #[test]
    fn defaults_follow_the_modules() {
        let c = base();
        assert_eq!(c.magnify.alpha, 15.0);
        assert_eq!(c.magnify.band.to_band().unwrap(), TemporalBand::longer_than_hours(12.0));
        assert_eq!(c.flow.params(), FlowParams::default());
        assert_eq!(c.preprocess.downsample_factor, 1);
        assert_eq!(c.manifest_path(), Path::new("/tmp/cfg/scene/manifest.csv"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_toml(
            "[input]\nmanifest_path = \"m.csv\"\nbogus = 1\n[output]\ndir = \"o\"\n",
            Path::new("."),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
    }

    #[test]
    fn negative_alpha_names_the_field() {
        let mut c = base();
        c.magnify.alpha = -1.0;
        match c.validate(Stage::Analyze) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "magnify.alpha"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn band_forms_are_exclusive() {
        let b = BandConfig {
            cutoff_period_hours: Some(12.0),
            low_hz: Some(0.0),
            ..BandConfig::default()
        };
        assert!(b.to_band().is_err());
        let b = BandConfig {
            low_hz: Some(0.001),
            high_hz: Some(0.01),
            ..BandConfig::default()
        };
        assert_eq!(b.to_band().unwrap(), TemporalBand::new(0.001, 0.01));
    }

    #[test]
    fn ring_coordinates_follow_downsampling() {
        assert_eq!(downsample_coord(0.5, 2), 0.0);
        assert_eq!(downsample_coord(10.0, 1), 10.0);
        assert_eq!(downsample_coord(4.0, 3), 1.0);
        let mut c = base();
        c.preprocess.downsample_factor = 2;
        c.rings.push(RingConfig {
            ring_id: "R1".into(),
            prism_a_px: [100.5, 20.5],
            prism_b_px: [100.5, 180.5],
            prism_separation_mm: 800.0,
            profile: ProfileConfig {
                center_px: [100.5, 100.5],
                sample_points: None,
                semi_axes: Some([80.0, 80.0]),
                m: Some(6),
            },
        });
        let g = c.ring_geometry().unwrap();
        assert_eq!(g[0].0.prism_a_px, [50.0, 10.0]);
        assert_eq!(g[0].0.scale_mm_per_px(), 10.0);
        assert_eq!(g[0].1.points()[0], [50.0, 10.0]);
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert!(matches!("warp".parse::<Stage>(), Err(Error::UnknownStage(_))));
    }

    #[test]
    fn config_round_trips_through_toml_and_json() {
        let mut c = base();
        c.magnify.wiener.noise_variance = Some(1e-5);
        c.rings.push(RingConfig {
            ring_id: "R27".into(),
            prism_a_px: [1.0, 2.0],
            prism_b_px: [1.0, 40.0],
            prism_separation_mm: 100.0,
            profile: ProfileConfig {
                center_px: [1.0, 20.0],
                sample_points: Some(vec![[1.0, 2.0], [10.0, 20.0]]),
                semi_axes: None,
                m: None,
            },
        });
        let back = PipelineConfig::from_toml(&c.to_toml().unwrap(), &c.base_dir).unwrap();
        assert_eq!(back, c);
        let mut j: PipelineConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        j.base_dir = c.base_dir.clone();
        assert_eq!(j, c);
    }
}
