//! Failure-analysis tools: I-V screening, lock-in thermography demodulation,
//! hotspot detection, current-path tracing and defective-vs-reference
//! comparison.

use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::magnetostatics::median;
use crate::maps_io::{CurrentDensityMap, FieldMap, GridGeometry, UNIT_DIMENSIONLESS};

pub const MIN_IV_SAMPLES: usize = 5;

/// Voltage sweep with measured currents; voltages strictly increase.
#[derive(Debug, Clone, PartialEq)]
pub struct IvCurve {
    samples: Vec<(f64, f64)>,
}

impl IvCurve {
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.len() < MIN_IV_SAMPLES {
            return Err(Error::TooFewSamples {
                got: samples.len(),
                need: MIN_IV_SAMPLES,
            });
        }
        if samples
            .iter()
            .any(|(v, i)| !v.is_finite() || !i.is_finite())
        {
            return Err(Error::NonFinite("I-V sample".into()));
        }
        if samples.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidArgument(
                "voltages must be strictly increasing".into(),
            ));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    /// Reads CSV with header `voltage_v,current_a`.
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() != 2
            || headers.get(0).map(str::trim) != Some("voltage_v")
            || headers.get(1).map(str::trim) != Some("current_a")
        {
            return Err(Error::Format(format!(
                "expected header \"voltage_v,current_a\", got {:?}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut samples = Vec::new();
        for rec in rdr.deserialize::<(f64, f64)>() {
            samples.push(rec?);
        }
        Self::new(samples)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(std::fs::File::open(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IvConfig {
    pub r2_threshold: f64,
    pub open_floor_a: f64,
}

impl Default for IvConfig {
    fn default() -> Self {
        Self {
            r2_threshold: 0.999,
            open_floor_a: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class")]
pub enum IvClass {
    ShortSuspected { resistance_ohm: f64 },
    Nominal,
    Open,
}

/// Least-squares line `I = V/R + c` and its coefficient of determination.
pub fn fit_line(curve: &IvCurve) -> (f64, f64, f64) {
    let n = curve.samples.len() as f64;
    let (sv, si) = curve
        .samples
        .iter()
        .fold((0.0, 0.0), |(a, b), (v, i)| (a + v, b + i));
    let (mv, mi) = (sv / n, si / n);
    let (mut svv, mut svi, mut sii) = (0.0, 0.0, 0.0);
    for (v, i) in &curve.samples {
        let (dv, di) = (v - mv, i - mi);
        svv += dv * dv;
        svi += dv * di;
        sii += di * di;
    }
    let slope = svi / svv;
    let intercept = mi - slope * mv;
    let ss_res: f64 = curve
        .samples
        .iter()
        .map(|(v, i)| (i - slope * v - intercept).powi(2))
        .sum();
    let r2 = if sii > 0.0 { 1.0 - ss_res / sii } else { 0.0 };
    (slope, intercept, r2)
}

/// Linear curves suggest a resistive short; the expected device is nonlinear.
pub fn classify_iv(curve: &IvCurve, config: &IvConfig) -> IvClass {
    let max_i = curve
        .samples
        .iter()
        .map(|(_, i)| i.abs())
        .fold(0.0, f64::max);
    if max_i < config.open_floor_a {
        return IvClass::Open;
    }
    let (slope, _, r2) = fit_line(curve);
    if r2 >= config.r2_threshold && slope != 0.0 {
        IvClass::ShortSuspected {
            resistance_ohm: 1.0 / slope,
        }
    } else {
        IvClass::Nominal
    }
}

/// Frames sampled at `sample_rate_hz` while the device is driven at `drive_frequency_hz`.
#[derive(Debug, Clone, PartialEq)]
pub struct LockInSeries {
    frames: Vec<FieldMap>,
    sample_rate_hz: f64,
    drive_frequency_hz: f64,
}

impl LockInSeries {
    pub fn new(
        frames: Vec<FieldMap>,
        sample_rate_hz: f64,
        drive_frequency_hz: f64,
    ) -> Result<Self> {
        if !(sample_rate_hz.is_finite()
            && drive_frequency_hz.is_finite()
            && drive_frequency_hz > 0.0)
        {
            return Err(Error::InvalidArgument(
                "rates must be finite and > 0".into(),
            ));
        }
        if !(sample_rate_hz > 2.0 * drive_frequency_hz) {
            return Err(Error::InvalidArgument(format!(
                "sample rate {sample_rate_hz} Hz must exceed twice the drive frequency {drive_frequency_hz} Hz"
            )));
        }
        let Some(first) = frames.first() else {
            return Err(Error::TooFewPeriods(0));
        };
        for f in &frames {
            if !f.geometry().same_lateral(first.geometry()) || f.unit() != first.unit() {
                return Err(Error::GridMismatch("lock-in frames differ".into()));
            }
        }
        let s = Self {
            frames,
            sample_rate_hz,
            drive_frequency_hz,
        };
        s.window_len()?;
        Ok(s)
    }

    pub fn frames(&self) -> &[FieldMap] {
        &self.frames
    }

    /// Samples in the largest whole number of drive periods.
    pub fn window_len(&self) -> Result<usize> {
        window_len(
            self.frames.len(),
            self.sample_rate_hz,
            self.drive_frequency_hz,
        )
    }
}

fn window_len(n: usize, fs: f64, f: f64) -> Result<usize> {
    let per_period = fs / f;
    let periods = ((n as f64 + 1e-9) / per_period).floor() as usize;
    if periods < 2 {
        return Err(Error::TooFewPeriods(periods));
    }
    Ok(((periods as f64 * per_period) + 1e-9).floor() as usize)
}

/// Amplitude and sine-referenced phase of one series: `A sin(2 pi f t + phi)`
/// gives `(A, phi)`, phase in `(-pi, pi]`.
pub fn demodulate_samples(
    samples: &[f64],
    sample_rate_hz: f64,
    drive_frequency_hz: f64,
) -> Result<(f64, f64)> {
    let n = window_len(samples.len(), sample_rate_hz, drive_frequency_hz)?;
    let w = 2.0 * PI * drive_frequency_hz / sample_rate_hz;
    let (mut x, mut y) = (0.0, 0.0);
    for (k, s) in samples[..n].iter().enumerate() {
        let (sin, cos) = (w * k as f64).sin_cos();
        x += s * sin;
        y += s * cos;
    }
    let (x, y) = (2.0 * x / n as f64, 2.0 * y / n as f64);
    let mut phase = y.atan2(x);
    if phase <= -PI {
        phase = PI;
    }
    Ok((x.hypot(y), phase))
}

/// Per-pixel demodulation; amplitude keeps the frame unit, phase is in radians.
pub fn lockin_demodulate(series: &LockInSeries) -> Result<(FieldMap, FieldMap)> {
    let first = &series.frames[0];
    let g = *first.geometry();
    let results: Vec<(f64, f64)> = (0..g.len())
        .into_par_iter()
        .map(|p| {
            let s: Vec<f64> = series.frames.iter().map(|f| f.data()[p]).collect();
            demodulate_samples(&s, series.sample_rate_hz, series.drive_frequency_hz)
        })
        .collect::<Result<_>>()?;
    let (amp, phase): (Vec<f64>, Vec<f64>) = results.into_iter().unzip();
    Ok((
        FieldMap::new(g, first.unit(), amp)?,
        FieldMap::new(g, UNIT_DIMENSIONLESS, phase)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HotspotConfig {
    pub sigma_threshold: f64,
}

impl Default for HotspotConfig {
    fn default() -> Self {
        Self {
            sigma_threshold: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hotspot {
    /// Intensity-weighted centroid, fractional (col, row).
    pub location_px: [f64; 2],
    pub location_m: [f64; 2],
    pub peak: f64,
    /// Pixel count of the component.
    pub extent_px: usize,
}

/// 8-connected components of `mask`, each as a list of pixel indices.
pub(crate) fn components(mask: &[bool], w: usize, h: usize) -> Vec<Vec<usize>> {
    let mut label = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] {
            continue;
        }
        let mut comp = vec![start];
        label[start] = true;
        let mut k = 0;
        while k < comp.len() {
            let p = comp[k];
            k += 1;
            let (c, r) = ((p % w) as i64, (p / w) as i64);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nc, nr) = (c + dc, r + dr);
                    if nc < 0 || nr < 0 || nc >= w as i64 || nr >= h as i64 {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if mask[q] && !label[q] {
                        label[q] = true;
                        comp.push(q);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Components above `median + sigma_threshold * 1.4826 MAD`, strongest first.
pub fn detect_hotspot(amplitude: &FieldMap, config: &HotspotConfig) -> Vec<Hotspot> {
    let g = *amplitude.geometry();
    let data = amplitude.data();
    let mut sorted = data.to_vec();
    let med = median(&mut sorted);
    let mut dev: Vec<f64> = data.iter().map(|v| (v - med).abs()).collect();
    let sigma = 1.4826 * median(&mut dev);
    let threshold = med + config.sigma_threshold * sigma;
    let mask: Vec<bool> = data.iter().map(|v| *v > threshold).collect();

    let mut spots: Vec<Hotspot> = components(&mask, g.width, g.height)
        .into_iter()
        .map(|comp| {
            let (mut sw, mut sx, mut sy, mut peak) = (0.0, 0.0, 0.0, f64::NEG_INFINITY);
            for &p in &comp {
                let wgt = data[p] - med;
                sw += wgt;
                sx += wgt * (p % g.width) as f64;
                sy += wgt * (p / g.width) as f64;
                peak = peak.max(data[p]);
            }
            let (cx, cy) = (sx / sw, sy / sw);
            Hotspot {
                location_px: [cx, cy],
                location_m: [cx * g.pitch, cy * g.pitch],
                peak,
                extent_px: comp.len(),
            }
        })
        .collect();
    spots.sort_by(|a, b| b.peak.total_cmp(&a.peak));
    spots
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceConfig {
    /// Step length in pixels.
    pub step: f64,
    pub max_steps: usize,
    /// Stop when |J| drops below this fraction of max |J|.
    pub stop_fraction: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            step: 0.5,
            max_steps: 10_000,
            stop_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StopReason {
    Terminated,
    LeftGrid,
    MaxSteps,
    Loop,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Terminated => "Terminated",
            StopReason::LeftGrid => "LeftGrid",
            StopReason::MaxSteps => "MaxSteps",
            StopReason::Loop => "Loop",
        }
    }
}

/// Streamline through a seed, in fractional pixel coordinates (col, row).
#[derive(Debug, Clone, PartialEq)]
pub struct TracedPath {
    pub points: Vec<[f64; 2]>,
    /// Index of the seed in `points`.
    pub seed_index: usize,
    /// Why the downstream (along +J) half stopped.
    pub reason: StopReason,
    /// Why the upstream half stopped; `None` when the path closed on itself.
    pub upstream_reason: Option<StopReason>,
}

impl TracedPath {
    /// Seed followed by the downstream points.
    pub fn downstream(&self) -> &[[f64; 2]] {
        &self.points[self.seed_index..]
    }

    pub fn points_m(&self, pitch: f64) -> Vec<[f64; 2]> {
        self.points
            .iter()
            .map(|p| [p[0] * pitch, p[1] * pitch])
            .collect()
    }
}

/// Bilinear sampler over a current-density map.
struct Sampler<'a> {
    jx: &'a [f64],
    jy: &'a [f64],
    w: usize,
    h: usize,
}

impl<'a> Sampler<'a> {
    fn new(j: &'a CurrentDensityMap) -> Self {
        Self {
            jx: j.jx().data(),
            jy: j.jy().data(),
            w: j.geometry().width,
            h: j.geometry().height,
        }
    }

    fn inside(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (self.w - 1) as f64 && p[1] <= (self.h - 1) as f64
    }

    fn sample(&self, p: [f64; 2]) -> [f64; 2] {
        let cell = |u: f64, n: usize| {
            let i = (u.floor() as usize).min(n.saturating_sub(2));
            (i, (i + 1).min(n - 1), u - i as f64)
        };
        let (i0, i1, fx) = cell(p[0], self.w);
        let (k0, k1, fy) = cell(p[1], self.h);
        let at = |m: &[f64]| {
            m[k0 * self.w + i0] * (1.0 - fx) * (1.0 - fy)
                + m[k0 * self.w + i1] * fx * (1.0 - fy)
                + m[k1 * self.w + i0] * (1.0 - fx) * fy
                + m[k1 * self.w + i1] * fx * fy
        };
        [at(self.jx), at(self.jy)]
    }

    fn magnitude(&self, p: [f64; 2]) -> f64 {
        let v = self.sample(p);
        v[0].hypot(v[1])
    }

    /// Unit direction, or `None` outside the grid or where J vanishes.
    fn direction(&self, p: [f64; 2], sign: f64) -> Option<[f64; 2]> {
        if !self.inside(p) {
            return None;
        }
        let v = self.sample(p);
        let m = v[0].hypot(v[1]);
        (m > 0.0).then(|| [sign * v[0] / m, sign * v[1] / m])
    }

    fn clamp(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0].clamp(0.0, (self.w - 1) as f64),
            p[1].clamp(0.0, (self.h - 1) as f64),
        ]
    }

    /// Distance along `d` from `p` to the grid boundary.
    fn exit_distance(&self, p: [f64; 2], d: [f64; 2]) -> f64 {
        let mut t = f64::INFINITY;
        for (x, dx, hi) in [
            (p[0], d[0], (self.w - 1) as f64),
            (p[1], d[1], (self.h - 1) as f64),
        ] {
            if dx > 0.0 {
                t = t.min((hi - x) / dx);
            } else if dx < 0.0 {
                t = t.min(-x / dx);
            }
        }
        t.max(0.0)
    }
}

fn add(p: [f64; 2], d: [f64; 2], s: f64) -> [f64; 2] {
    [p[0] + s * d[0], p[1] + s * d[1]]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Distance from `p` to the segment `a`-`b`.
fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let l = [b[0] - a[0], b[1] - a[1]];
    let len2 = l[0] * l[0] + l[1] * l[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * l[0] + (p[1] - a[1]) * l[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, add(a, l, t))
}

fn integrate(
    s: &Sampler,
    seed: [f64; 2],
    sign: f64,
    floor: f64,
    cfg: &TraceConfig,
    detect_loop: bool,
) -> (Vec<[f64; 2]>, StopReason) {
    let h = cfg.step;
    let mut pts = vec![seed];
    let mut travelled = 0.0;
    for _ in 0..cfg.max_steps {
        let p = *pts.last().expect("non-empty");
        let Some(k1) = s.direction(p, sign) else {
            return (pts, StopReason::Terminated);
        };
        let rk4 = || {
            let k2 = s.direction(add(p, k1, h / 2.0), sign)?;
            let k3 = s.direction(add(p, k2, h / 2.0), sign)?;
            let k4 = s.direction(add(p, k3, h), sign)?;
            let d = [
                (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]) / 6.0,
                (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]) / 6.0,
            ];
            let q = add(p, d, h);
            s.inside(q).then_some(q)
        };
        let next = match rk4() {
            Some(q) => q,
            None => {
                let t = s.exit_distance(p, k1);
                if t <= h {
                    if t > 0.0 {
                        pts.push(s.clamp(add(p, k1, t)));
                    }
                    return (pts, StopReason::LeftGrid);
                }
                add(p, k1, h)
            }
        };
        travelled += dist(p, next);
        pts.push(next);
        if detect_loop && travelled > 2.0 * h && seg_dist(seed, p, next) <= h / 2.0 {
            return (pts, StopReason::Loop);
        }
        if s.magnitude(next) < floor {
            return (pts, StopReason::Terminated);
        }
    }
    (pts, StopReason::MaxSteps)
}

/// Bidirectional RK4 streamline of `J / |J|` from the seed pixel.
pub fn trace_current(
    j: &CurrentDensityMap,
    seed: (usize, usize),
    config: &TraceConfig,
) -> Result<TracedPath> {
    let g = j.geometry();
    if seed.0 >= g.width || seed.1 >= g.height {
        return Err(Error::InvalidArgument(format!(
            "seed ({}, {}) outside the {}x{} grid",
            seed.0, seed.1, g.width, g.height
        )));
    }
    if !(config.step > 0.0 && config.stop_fraction >= 0.0 && config.stop_fraction < 1.0) {
        return Err(Error::InvalidArgument("invalid trace configuration".into()));
    }
    let s = Sampler::new(j);
    let floor = config.stop_fraction * j.max_magnitude();
    let start = [seed.0 as f64, seed.1 as f64];
    let m = s.magnitude(start);
    if m == 0.0 || m < floor {
        return Err(Error::SeedBelowThreshold {
            col: seed.0,
            row: seed.1,
        });
    }
    let (down, reason) = integrate(&s, start, 1.0, floor, config, true);
    if reason == StopReason::Loop {
        return Ok(TracedPath {
            points: down,
            seed_index: 0,
            reason,
            upstream_reason: None,
        });
    }
    let (up, up_reason) = integrate(&s, start, -1.0, floor, config, false);
    let seed_index = up.len() - 1;
    let mut points: Vec<[f64; 2]> = up.into_iter().rev().collect();
    points.extend_from_slice(&down[1..]);
    Ok(TracedPath {
        points,
        seed_index,
        reason,
        upstream_reason: Some(up_reason),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AnomalyKind {
    Termination,
    Kink,
    MissingBranch,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareConfig {
    pub trace: TraceConfig,
    /// Paths farther apart than this (pixels) have separated.
    pub separation_px: f64,
    pub kink_angle_deg: f64,
    pub kink_steps: usize,
    /// Ridge crests below this fraction of each map's max |J| are ignored.
    pub ridge_fraction: f64,
    /// Smallest reference-only ridge (pixels) counted as a branch.
    pub min_branch_px: usize,
    /// A missing branch must come this close (pixels) to the split point.
    pub branch_search_px: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            trace: TraceConfig::default(),
            separation_px: 2.0,
            kink_angle_deg: 30.0,
            kink_steps: 3,
            ridge_fraction: 0.25,
            min_branch_px: 6,
            branch_search_px: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnomalyReport {
    pub kind: AnomalyKind,
    pub location_px: [usize; 2],
    pub location_m: [f64; 2],
    pub confidence: f64,
    pub peak_differential_a_per_m: f64,
    pub ref_path: Vec<[f64; 2]>,
    pub dut_path: Vec<[f64; 2]>,
    pub termination_reason: StopReason,
}

fn nearest_on_path(path: &[[f64; 2]], p: [f64; 2]) -> (usize, f64) {
    path.iter()
        .enumerate()
        .map(|(i, q)| (i, dist(*q, p)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((0, f64::INFINITY))
}

fn polyline_dist(path: &[[f64; 2]], p: [f64; 2]) -> f64 {
    if path.len() == 1 {
        return dist(path[0], p);
    }
    path.windows(2)
        .map(|w| seg_dist(p, w[0], w[1]))
        .fold(f64::INFINITY, f64::min)
}

fn heading(path: &[[f64; 2]], i: usize) -> [f64; 2] {
    let (a, b) = if i + 1 < path.len() {
        (path[i], path[i + 1])
    } else {
        (path[i.saturating_sub(1)], path[i])
    };
    let d = dist(a, b);
    if d == 0.0 {
        [0.0, 0.0]
    } else {
        [(b[0] - a[0]) / d, (b[1] - a[1]) / d]
    }
}

/// Traces both devices from a shared entry seed and classifies how the
/// defective (`dut`) path departs from the reference.
pub fn compare_paths(
    j_ref: &CurrentDensityMap,
    j_dut: &CurrentDensityMap,
    seed: (usize, usize),
    config: &CompareConfig,
) -> Result<AnomalyReport> {
    let g: GridGeometry = *j_ref.geometry();
    if !g.same_lateral(j_dut.geometry()) {
        return Err(Error::GridMismatch(
            "reference and device maps are not co-registered".into(),
        ));
    }
    let ref_path = trace_current(j_ref, seed, &config.trace)?;
    let dut_path = trace_current(j_dut, seed, &config.trace)?;

    let mag_ref = j_ref.magnitude();
    let mag_dut = j_dut.magnitude();
    let max_ref = mag_ref.iter().cloned().fold(0.0, f64::max);
    let max_dut = mag_dut.iter().cloned().fold(0.0, f64::max);
    let norm = max_ref.max(max_dut);
    let diff: Vec<f64> = mag_dut.iter().zip(&mag_ref).map(|(d, r)| d - r).collect();
    let peak_differential = diff
        .iter()
        .cloned()
        .max_by(|a, b| a.abs().total_cmp(&b.abs()))
        .unwrap_or(0.0);

    let local_diff = |p: [f64; 2]| {
        let (c, r) = (p[0].round() as i64, p[1].round() as i64);
        let mut m: f64 = 0.0;
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (cc, rr) = (c + dc, r + dr);
                if cc >= 0 && rr >= 0 && cc < g.width as i64 && rr < g.height as i64 {
                    m = m.max(diff[rr as usize * g.width + cc as usize].abs());
                }
            }
        }
        m
    };
    let clamp01 = |v: f64| {
        if v.is_finite() {
            v.clamp(0.0, 1.0)
        } else {
            0.0
        }
    };

    let report = |kind: AnomalyKind, at: [f64; 2], confidence: f64| {
        let col = (at[0].round().max(0.0) as usize).min(g.width - 1);
        let row = (at[1].round().max(0.0) as usize).min(g.height - 1);
        AnomalyReport {
            kind,
            location_px: [col, row],
            location_m: [at[0] * g.pitch, at[1] * g.pitch],
            confidence: clamp01(confidence),
            peak_differential_a_per_m: peak_differential,
            ref_path: ref_path.points_m(g.pitch),
            dut_path: dut_path.points_m(g.pitch),
            termination_reason: dut_path.reason,
        }
    };

    let ref_down = ref_path.downstream();
    let dut_down = dut_path.downstream();
    let split = separation(ref_down, dut_down, config.separation_px);

    let Some((at, dut_strays)) = split else {
        // Paths stay paired: look for a sustained heading disagreement.
        let cos_limit = config.kink_angle_deg.to_radians().cos();
        let mut run = 0;
        for i in 0..dut_down.len() {
            let (k, _) = nearest_on_path(ref_down, dut_down[i]);
            let (a, b) = (heading(dut_down, i), heading(ref_down, k));
            if a[0] * b[0] + a[1] * b[1] < cos_limit {
                run += 1;
                if run >= config.kink_steps {
                    let at = dut_down[i + 1 - run];
                    return Ok(report(AnomalyKind::Kink, at, local_diff(at) / norm));
                }
            } else {
                run = 0;
            }
        }
        return Ok(report(
            AnomalyKind::None,
            [seed.0 as f64, seed.1 as f64],
            0.0,
        ));
    };

    // A reference ridge with no device ridge alongside it, near the split.
    let ref_crest = crest_mask(j_ref, &mag_ref, config.ridge_fraction * max_ref);
    let dut_crest = crest_mask(j_dut, &mag_dut, config.ridge_fraction * max_dut);
    let reach = config.separation_px.ceil() as i64;
    let ridge_only: Vec<bool> = (0..ref_crest.len())
        .map(|i| {
            let (c, r) = ((i % g.width) as i64, (i / g.width) as i64);
            ref_crest[i]
                && !(-reach..=reach).any(|dr| {
                    (-reach..=reach).any(|dc| {
                        let (cc, rr) = (c + dc, r + dr);
                        cc >= 0
                            && rr >= 0
                            && cc < g.width as i64
                            && rr < g.height as i64
                            && ((dc * dc + dr * dr) as f64).sqrt() <= config.separation_px
                            && dut_crest[rr as usize * g.width + cc as usize]
                    })
                })
        })
        .collect();
    let branch_near = components(&ridge_only, g.width, g.height)
        .into_iter()
        .filter(|c| c.len() >= config.min_branch_px)
        .any(|c| {
            c.iter().any(|&p| {
                dist([(p % g.width) as f64, (p / g.width) as f64], at) <= config.branch_search_px
            })
        });
    let kind = if branch_near {
        AnomalyKind::MissingBranch
    } else if !dut_strays && dut_path.reason == StopReason::Terminated {
        AnomalyKind::Termination
    } else {
        AnomalyKind::Kink
    };
    Ok(report(kind, at, local_diff(at) / norm))
}

/// Ridge crest: pixels at or above `floor` whose |J| is not exceeded one pixel
/// to either side across the local flow direction.
fn crest_mask(j: &CurrentDensityMap, mag: &[f64], floor: f64) -> Vec<bool> {
    let s = Sampler::new(j);
    (0..mag.len())
        .map(|i| {
            let m = mag[i];
            if !(m > 0.0 && m >= floor) {
                return false;
            }
            let p = [(i % s.w) as f64, (i / s.w) as f64];
            let v = s.sample(p);
            let n = [-v[1] / m, v[0] / m];
            [1.0, -1.0].into_iter().all(|t| {
                let q = add(p, n, t);
                !s.inside(q) || s.magnitude(q) <= m
            })
        })
        .collect()
}

/// First split of two paths from a common seed: walks both by arc length and
/// returns the last point still within a quarter of `limit` of the other path
/// before either strays beyond `limit`, plus whether the device path is the
/// one that strays (as opposed to simply ending).
fn separation(ref_p: &[[f64; 2]], dut_p: &[[f64; 2]], limit: f64) -> Option<([f64; 2], bool)> {
    let first_out = |path: &[[f64; 2]], other: &[[f64; 2]]| {
        let mut s = 0.0;
        for (i, p) in path.iter().enumerate() {
            if i > 0 {
                s += dist(path[i - 1], *p);
            }
            if polyline_dist(other, *p) > limit {
                return Some((i, s));
            }
        }
        None
    };
    let on_ref = first_out(ref_p, dut_p);
    let on_dut = first_out(dut_p, ref_p);
    let (path, other, i, dut_strays) = match (on_ref, on_dut) {
        (None, None) => return None,
        (Some((i, _)), None) => (ref_p, dut_p, i, false),
        (None, Some((i, _))) => (dut_p, ref_p, i, true),
        (Some((i, si)), Some((j, sj))) => {
            if si <= sj {
                (ref_p, dut_p, i, true)
            } else {
                (dut_p, ref_p, j, true)
            }
        }
    };
    let k = (0..i)
        .rev()
        .find(|&k| polyline_dist(other, path[k]) <= 0.25 * limit)
        .unwrap_or(0);
    Some((path[k], dut_strays))
}
