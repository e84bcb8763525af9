//! Scenario files: one JSON document describing the measurement geometry,
//! the current trace, the NV bias and line shape, and the microwave sweep.
//!
//! ```json
//! {
//!   "grid": {"width": 96, "height": 64, "pitch": 2e-6},
//!   "standoff": 6e-6,
//!   "depth": 0.0,
//!   "trace": "kgd_trace.json",
//!   "bias_field_t": [0.0018, 0.0006, 0.0003],
//!   "line_shape": {"contrast": 0.02, "linewidth_fwhm_hz": 8e6, "photon_noise_sigma": 0.0},
//!   "sweep": {"start_hz": 2.79e9, "stop_hz": 2.95e9, "points": 321}
//! }
//! ```
//!
//! The trace path is resolved relative to the scenario file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fault_analysis::TraceConfig;
use crate::magnetostatics::CurrentTrace;
use crate::maps_io::GridGeometry;
use crate::nv_model::{
    linear_sweep, tetrahedral_axes, LineShapeParams, NVConstants, NVFrame, Vec3,
    DEFAULT_SIGN_MARGIN_T,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub pitch: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub start_hz: f64,
    pub stop_hz: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineShapeSpec {
    pub contrast: f64,
    pub linewidth_fwhm_hz: f64,
    pub photon_noise_sigma: f64,
}

impl Default for LineShapeSpec {
    fn default() -> Self {
        let d = LineShapeParams::default();
        Self {
            contrast: d.contrast,
            linewidth_fwhm_hz: d.linewidth_fwhm_hz,
            photon_noise_sigma: d.photon_noise_sigma,
        }
    }
}

/// Optional path-tracing settings for `trace` and `compare`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceSpec {
    pub step: f64,
    pub max_steps: usize,
    pub stop_fraction: f64,
}

impl Default for TraceSpec {
    fn default() -> Self {
        let d = TraceConfig::default();
        Self {
            step: d.step,
            max_steps: d.max_steps,
            stop_fraction: d.stop_fraction,
        }
    }
}

impl From<TraceSpec> for TraceConfig {
    fn from(s: TraceSpec) -> Self {
        Self {
            step: s.step,
            max_steps: s.max_steps,
            stop_fraction: s.stop_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub grid: GridSpec,
    /// Sensor plane height, m.
    pub standoff: f64,
    /// Current sheet height, m.
    #[serde(default)]
    pub depth: f64,
    pub trace: PathBuf,
    pub bias_field_t: [f64; 3],
    #[serde(default = "default_used_axes")]
    pub used_axes: [usize; 3],
    #[serde(default = "default_margin")]
    pub sign_margin_t: f64,
    #[serde(default)]
    pub constants: NVConstants,
    #[serde(default)]
    pub line_shape: LineShapeSpec,
    /// Noise seed used when no explicit seed is given.
    #[serde(default)]
    pub seed: Option<u64>,
    pub sweep: SweepSpec,
    /// Entry pixel for path tracing, (col, row).
    #[serde(default)]
    pub entry_px: Option<[usize; 2]>,
    #[serde(default)]
    pub tracing: TraceSpec,
    #[serde(skip)]
    base_dir: PathBuf,
}

fn default_used_axes() -> [usize; 3] {
    [0, 1, 2]
}

fn default_margin() -> f64 {
    DEFAULT_SIGN_MARGIN_T
}

impl Scenario {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut s: Scenario = serde_json::from_str(text)?;
        s.base_dir = base_dir.to_path_buf();
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        if !(self.depth.is_finite() && self.depth >= 0.0 && self.standoff > self.depth) {
            return Err(Error::StandoffBelowDepth {
                standoff: self.standoff,
                depth: self.depth,
            });
        }
        self.constants.validate()?;
        self.line_shape(0).validate()?;
        self.frame()?;
        let SweepSpec {
            start_hz,
            stop_hz,
            points,
        } = self.sweep;
        if !(start_hz.is_finite() && stop_hz.is_finite() && stop_hz > start_hz && points >= 2) {
            return Err(Error::InvalidArgument(
                "sweep needs start < stop and >= 2 points".into(),
            ));
        }
        Ok(())
    }

    /// Sensor-plane grid.
    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::new(
            self.grid.width,
            self.grid.height,
            self.grid.pitch,
            self.standoff,
        )
    }

    /// Current-sheet grid.
    pub fn sheet_geometry(&self) -> Result<GridGeometry> {
        GridGeometry::new(
            self.grid.width,
            self.grid.height,
            self.grid.pitch,
            self.depth,
        )
    }

    pub fn trace_path(&self) -> PathBuf {
        self.base_dir.join(&self.trace)
    }

    pub fn load_trace(&self) -> Result<CurrentTrace> {
        CurrentTrace::load(&self.trace_path())
    }

    pub fn frame(&self) -> Result<NVFrame> {
        NVFrame::new(
            tetrahedral_axes(),
            self.used_axes,
            Vec3::from(self.bias_field_t),
            self.sign_margin_t,
        )
    }

    pub fn line_shape(&self, seed: u64) -> LineShapeParams {
        LineShapeParams {
            contrast: self.line_shape.contrast,
            linewidth_fwhm_hz: self.line_shape.linewidth_fwhm_hz,
            photon_noise_sigma: self.line_shape.photon_noise_sigma,
            rng_seed: seed,
        }
    }

    pub fn freqs(&self) -> Vec<f64> {
        linear_sweep(self.sweep.start_hz, self.sweep.stop_hz, self.sweep.points)
    }

    pub fn trace_config(&self) -> TraceConfig {
        self.tracing.into()
    }
}
