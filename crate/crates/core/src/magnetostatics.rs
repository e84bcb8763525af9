//! Magnetostatics of thin current sheets.
//!
//! Two forward paths: the closed-form finite-segment Biot–Savart sum over a
//! [`CurrentTrace`] (the reference everything else is checked against) and a
//! Fourier propagator for a rasterized sheet. The inverse recovers a stream
//! function from B_z, so the reconstructed current is divergence-free by
//! construction.
//!
//! Heights are absolute z coordinates: a field map sits at `standoff`, a
//! current sheet at `depth`, and their separation is `d = standoff - depth`.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft2::{crop, embed, Fft2};
use crate::lm::{levenberg_marquardt, LeastSquares};
use crate::maps_io::{
    CurrentDensityMap, FieldMap, FilterMetadata, GridGeometry, VectorFieldMap, WindowKind,
    UNIT_AMPERE, UNIT_DIVERGENCE, UNIT_TESLA,
};
use crate::nv_model::Vec3;
use nalgebra::{DMatrix, DVector};

/// Vacuum permeability, T m / A.
pub const MU0: f64 = 4.0e-7 * PI;

/// One polyline carrying a signed current; positive flows in point order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<[f64; 3]>,
    pub current_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentTrace {
    pub segments: Vec<Polyline>,
}

impl CurrentTrace {
    pub fn new(segments: Vec<Polyline>) -> Result<Self> {
        let t = Self { segments };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidArgument("trace has no polylines".into()));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.points.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "polyline {i} needs at least 2 points"
                )));
            }
            if !(s.current_a.is_finite() && s.current_a != 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "polyline {i} current must be finite and non-zero"
                )));
            }
            if s.points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("polyline {i} coordinates")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    /// The same geometry with every current multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.segments
                .iter()
                .map(|s| Polyline {
                    points: s.points.clone(),
                    current_a: s.current_a * factor,
                })
                .collect(),
        )
    }

    /// Straight pieces `(start, end, current)`.
    pub fn pieces(&self) -> impl Iterator<Item = (Vec3, Vec3, f64)> + '_ {
        self.segments.iter().flat_map(|s| {
            s.points
                .windows(2)
                .map(move |w| (Vec3::from(w[0]), Vec3::from(w[1]), s.current_a))
        })
    }
}

fn distance_to_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let l = b - a;
    let len2 = l.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(&l) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + l * t)).norm()
}

/// Field of one straight segment carrying `current` from `a` to `b`.
pub fn segment_field(p: &Vec3, a: &Vec3, b: &Vec3, current: f64) -> Vec3 {
    let l = b - a;
    let r1 = p - a;
    let r2 = p - b;
    let c = l.cross(&r1);
    let c2 = c.norm_squared();
    // Collinear with the segment (but off it): no field.
    if c2 <= 1e-24 * l.norm_squared() * r1.norm_squared() {
        return Vec3::zeros();
    }
    let g = l.dot(&r1) / r1.norm() - l.dot(&r2) / r2.norm();
    c * (MU0 * current / (4.0 * PI) * g / c2)
}

/// Field of the whole trace at `p`; errors when `p` is within `min_distance` of a piece.
pub fn biot_savart_point(trace: &CurrentTrace, p: &Vec3, min_distance: f64) -> Result<Vec3> {
    let mut b = Vec3::zeros();
    for (a, e, i) in trace.pieces() {
        let dist = distance_to_segment(p, &a, &e);
        if dist <= min_distance {
            return Err(Error::PointOnSegment(dist));
        }
        b += segment_field(p, &a, &e, i);
    }
    Ok(b)
}

/// Exact field of `trace` at every pixel centre of the plane `z = geometry.standoff`.
pub fn biot_savart_polyline(
    trace: &CurrentTrace,
    geometry: &GridGeometry,
) -> Result<VectorFieldMap> {
    trace.validate()?;
    geometry.validate()?;
    let tol = geometry.pitch / 100.0;
    let vectors: Vec<[f64; 3]> = (0..geometry.len())
        .into_par_iter()
        .map(|i| {
            let p = Vec3::new(
                geometry.x(i % geometry.width),
                geometry.y(i / geometry.width),
                geometry.standoff,
            );
            biot_savart_point(trace, &p, tol).map(|b| [b.x, b.y, b.z])
        })
        .collect::<Result<_>>()?;
    VectorFieldMap::from_vectors(*geometry, &vectors)
}

/// Deposits the trace onto the sheet `z = depth` with linear (cloud-in-cell)
/// weights integrated exactly along each piece.
///
/// Current that runs off the grid is dropped. An axis-aligned wire through
/// pixel centres lands on a single row or column with `|J| = I / pitch`.
pub fn rasterize_trace(
    trace: &CurrentTrace,
    geometry: &GridGeometry,
    depth: f64,
) -> Result<CurrentDensityMap> {
    trace.validate()?;
    let sheet = geometry.with_standoff(depth)?;
    let p = sheet.pitch;
    for (a, b, _) in trace.pieces() {
        for z in [a.z, b.z] {
            if (z - depth).abs() > p / 10.0 {
                return Err(Error::OutOfPlaneTrace(format!(
                    "point at z = {z} m, sheet at {depth} m"
                )));
            }
        }
    }

    let (w, h) = (sheet.width as i64, sheet.height as i64);
    let mut jx = vec![0.0; sheet.len()];
    let mut jy = vec![0.0; sheet.len()];
    for (a, b, current) in trace.pieces() {
        let (u0, v0) = (a.x / p, a.y / p);
        let (du, dv) = (b.x / p - u0, b.y / p - v0);
        let length = ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt();
        if length == 0.0 {
            continue;
        }
        let (tx, ty) = ((b.x - a.x) / length, (b.y - a.y) / length);

        // Only the part within one cell of the grid can deposit anything.
        let (mut s_lo, mut s_hi) = (0.0_f64, 1.0_f64);
        for (start, delta, n) in [(u0, du, w), (v0, dv, h)] {
            let (lo, hi) = (-1.0, n as f64);
            if delta == 0.0 {
                if start <= lo || start >= hi {
                    s_hi = -1.0;
                }
            } else {
                let (a, b) = ((lo - start) / delta, (hi - start) / delta);
                s_lo = s_lo.max(a.min(b));
                s_hi = s_hi.min(a.max(b));
            }
        }
        if s_hi <= s_lo {
            continue;
        }

        // Break points where the piece crosses integer u or v.
        let mut cuts = vec![s_lo, s_hi];
        for (start, delta) in [(u0, du), (v0, dv)] {
            if delta != 0.0 {
                let (ua, ub) = (start + delta * s_lo, start + delta * s_hi);
                let (lo, hi) = (ua.min(ub), ua.max(ub));
                let mut k = lo.floor() + 1.0;
                while k < hi {
                    cuts.push((k - start) / delta);
                    k += 1.0;
                }
            }
        }
        cuts.sort_by(f64::total_cmp);

        for s in cuts.windows(2) {
            let (s0, s1) = (s[0], s[1]);
            if s1 <= s0 {
                continue;
            }
            let mid = 0.5 * (s0 + s1);
            let (ci, cj) = ((u0 + du * mid).floor(), (v0 + dv * mid).floor());
            // Simpson is exact: the weights are quadratic in s.
            let mut wts = [0.0; 4];
            for (s, coef) in [(s0, 1.0), (mid, 4.0), (s1, 1.0)] {
                let fx = u0 + du * s - ci;
                let fy = v0 + dv * s - cj;
                wts[0] += coef * (1.0 - fx) * (1.0 - fy);
                wts[1] += coef * fx * (1.0 - fy);
                wts[2] += coef * (1.0 - fx) * fy;
                wts[3] += coef * fx * fy;
            }
            let dl = length * (s1 - s0) / 6.0;
            for (k, (oi, oj)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
                let (col, row) = (ci as i64 + oi, cj as i64 + oj);
                if col < 0 || row < 0 || col >= w || row >= h {
                    continue;
                }
                let idx = sheet.index(col as usize, row as usize);
                let q = current * wts[k] * dl / (p * p);
                jx[idx] += q * tx;
                jy[idx] += q * ty;
            }
        }
    }
    CurrentDensityMap::from_components(sheet, jx, jy, None)
}

fn separation(standoff: f64, depth: f64) -> Result<f64> {
    let d = standoff - depth;
    if d > 0.0 {
        Ok(d)
    } else {
        Err(Error::StandoffBelowDepth { standoff, depth })
    }
}

/// Zero-padding factor used by the forward propagator.
const FORWARD_PAD: usize = 2;

/// Field of the sheet `j` at height `standoff` by Fourier propagation.
///
/// Per mode, with `d = standoff - depth` and `k = |k|`:
/// `Bx = (mu0/2) e^{-kd} Jy`, `By = -(mu0/2) e^{-kd} Jx`,
/// `Bz = i (mu0/2) e^{-kd} (kx Jy - ky Jx) / k`. The DC mode is zeroed.
pub fn sheet_forward(j: &CurrentDensityMap, standoff: f64) -> Result<VectorFieldMap> {
    let g = *j.geometry();
    let d = separation(standoff, j.depth())?;
    let (nx, ny) = (FORWARD_PAD * g.width, FORWARD_PAD * g.height);
    let fft = Fft2::new(nx, ny);
    let mut jx = embed(j.jx().data(), g.width, g.height, nx, ny);
    let mut jy = embed(j.jy().data(), g.width, g.height, nx, ny);
    fft.forward(&mut jx);
    fft.forward(&mut jy);

    let zero = Complex64::new(0.0, 0.0);
    let mut bx = vec![zero; nx * ny];
    let mut by = vec![zero; nx * ny];
    let mut bz = vec![zero; nx * ny];
    for r in 0..ny {
        for c in 0..nx {
            let i = r * nx + c;
            let (kx, ky) = fft.wavenumber(c, r, g.pitch);
            let k = kx.hypot(ky);
            if k == 0.0 {
                continue;
            }
            let a = 0.5 * MU0 * (-k * d).exp();
            bx[i] = jy[i] * a;
            by[i] = -jx[i] * a;
            bz[i] = Complex64::new(0.0, a / k) * (jy[i] * kx - jx[i] * ky);
        }
    }
    let out = g.with_standoff(standoff)?;
    let comps: Vec<FieldMap> = [bx, by, bz]
        .into_iter()
        .map(|mut buf| {
            fft.inverse(&mut buf);
            FieldMap::new(out, UNIT_TESLA, crop(&buf, nx, g.width, g.height))
        })
        .collect::<Result<_>>()?;
    let [bx, by, bz]: [FieldMap; 3] = comps.try_into().expect("three components");
    VectorFieldMap::new(bx, by, bz)
}

/// Cutoff wavenumber of the inverse filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cutoff {
    /// Where the `e^{kd}` gain reaches the inverse noise-to-peak ratio, capped at Nyquist.
    Auto,
    /// Fixed value in rad/m.
    Value(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionConfig {
    pub window: WindowKind,
    pub cutoff: Cutoff,
    pub pad_factor: usize,
    /// Only the stream-function reconstruction exists; `false` is rejected.
    pub assume_divergence_free: bool,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            window: WindowKind::Hann,
            cutoff: Cutoff::Auto,
            pad_factor: 2,
            assume_divergence_free: true,
        }
    }
}

/// Border pixels tapered to zero before transforming.
pub const TAPER_PIXELS: usize = 8;

/// Noise sigma from the median absolute deviation of the outer frame of width
/// [`TAPER_PIXELS`].
pub fn border_noise(map: &FieldMap) -> f64 {
    let (w, h) = (map.width(), map.height());
    let band = TAPER_PIXELS.min(w.div_ceil(2)).min(h.div_ceil(2));
    let mut vals: Vec<f64> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (c, r)))
        .filter(|&(c, r)| c < band || r < band || c + band >= w || r + band >= h)
        .map(|(c, r)| map.get(c, r))
        .collect();
    let med = median(&mut vals);
    let mut dev: Vec<f64> = vals.iter().map(|v| (v - med).abs()).collect();
    1.4826 * median(&mut dev)
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Resolves the cutoff for a map at separation `d`.
pub fn resolve_cutoff(bz: &FieldMap, d: f64, cutoff: Cutoff) -> Result<f64> {
    let nyquist = PI / bz.pitch();
    match cutoff {
        Cutoff::Value(k) => {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::InvalidArgument(format!("cutoff {k} must be > 0")));
            }
            if k > nyquist * (1.0 + 1e-12) {
                return Err(Error::CutoffAboveNyquist { cutoff: k, nyquist });
            }
            Ok(k)
        }
        Cutoff::Auto => {
            let peak = bz.max_abs();
            if peak == 0.0 {
                return Ok(nyquist);
            }
            let eps = border_noise(bz) / peak;
            if eps == 0.0 {
                return Ok(nyquist);
            }
            // Keep at least the lowest non-zero mode of the unpadded grid.
            let floor = 2.0 * PI / (bz.pitch() * bz.width().max(bz.height()) as f64);
            Ok((eps.recip().ln() / d).clamp(floor.min(nyquist), nyquist))
        }
    }
}

fn taper(w: usize, h: usize) -> Vec<f64> {
    let ramp = |i: usize, n: usize| {
        let band = TAPER_PIXELS.min(n / 2);
        let e = i.min(n - 1 - i);
        if e >= band {
            1.0
        } else {
            0.5 * (1.0 - (PI * (e as f64 + 0.5) / band as f64).cos())
        }
    };
    (0..h)
        .flat_map(|r| (0..w).map(move |c| ramp(c, w) * ramp(r, h)))
        .collect()
}

/// Central differences along x, one-sided at the first and last column.
fn diff_x(data: &[f64], w: usize, h: usize, pitch: f64) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    if w < 2 {
        return out;
    }
    for r in 0..h {
        let row = &data[r * w..(r + 1) * w];
        for c in 0..w {
            out[r * w + c] = if c == 0 {
                (row[1] - row[0]) / pitch
            } else if c == w - 1 {
                (row[c] - row[c - 1]) / pitch
            } else {
                (row[c + 1] - row[c - 1]) / (2.0 * pitch)
            };
        }
    }
    out
}

/// Central differences along y, one-sided at the first and last row.
fn diff_y(data: &[f64], w: usize, h: usize, pitch: f64) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    if h < 2 {
        return out;
    }
    for r in 0..h {
        for c in 0..w {
            let at = |rr: usize| data[rr * w + c];
            out[r * w + c] = if r == 0 {
                (at(1) - at(0)) / pitch
            } else if r == h - 1 {
                (at(r) - at(r - 1)) / pitch
            } else {
                (at(r + 1) - at(r - 1)) / (2.0 * pitch)
            };
        }
    }
    out
}

/// Stream function `g` of the sheet at `depth` whose field matches `bz`.
///
/// `J = (dg/dy, -dg/dx)`; in Fourier space `g = 2 Bz e^{kd} / (mu0 k)`.
pub fn stream_function(
    bz: &FieldMap,
    depth: f64,
    config: &InversionConfig,
) -> Result<(FieldMap, f64)> {
    if !config.assume_divergence_free {
        return Err(Error::InvalidArgument(
            "only the divergence-free (stream function) reconstruction is available".into(),
        ));
    }
    if config.pad_factor < 1 {
        return Err(Error::InvalidArgument("pad_factor must be >= 1".into()));
    }
    let g = *bz.geometry();
    if !(depth.is_finite() && depth >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "depth {depth} must be >= 0"
        )));
    }
    let d = separation(g.standoff, depth)?;
    let kc = resolve_cutoff(bz, d, config.cutoff)?;

    let tapered: Vec<f64> = bz
        .data()
        .iter()
        .zip(taper(g.width, g.height))
        .map(|(v, t)| v * t)
        .collect();
    let (nx, ny) = (config.pad_factor * g.width, config.pad_factor * g.height);
    let fft = Fft2::new(nx, ny);
    let mut buf = embed(&tapered, g.width, g.height, nx, ny);
    fft.forward(&mut buf);
    buf.par_chunks_mut(nx).enumerate().for_each(|(r, row)| {
        for (c, v) in row.iter_mut().enumerate() {
            let (kx, ky) = fft.wavenumber(c, r, g.pitch);
            let k = kx.hypot(ky);
            *v = if k == 0.0 || k >= kc {
                Complex64::new(0.0, 0.0)
            } else {
                let window = match config.window {
                    WindowKind::Hann => 0.5 * (1.0 + (PI * k / kc).cos()),
                };
                *v * (2.0 * (k * d).exp() / (MU0 * k) * window)
            };
        }
    });
    fft.inverse(&mut buf);
    let sheet = g.with_standoff(depth)?;
    Ok((
        FieldMap::new(sheet, UNIT_AMPERE, crop(&buf, nx, g.width, g.height))?,
        kc,
    ))
}

/// Regularized inverse: sheet current at `depth` from the B_z map.
pub fn invert_bz(bz: &FieldMap, depth: f64, config: &InversionConfig) -> Result<CurrentDensityMap> {
    if bz.unit() != UNIT_TESLA {
        return Err(Error::InvalidArgument(format!(
            "B_z map has unit {:?}, expected \"T\"",
            bz.unit()
        )));
    }
    let (g, kc) = stream_function(bz, depth, config)?;
    let geo = *g.geometry();
    let jx = diff_y(g.data(), geo.width, geo.height, geo.pitch);
    let jy: Vec<f64> = diff_x(g.data(), geo.width, geo.height, geo.pitch)
        .into_iter()
        .map(|v| -v)
        .collect();
    CurrentDensityMap::from_components(
        geo,
        jx,
        jy,
        Some(FilterMetadata {
            window: config.window,
            cutoff_wavenumber: kc,
        }),
    )
}

/// `dJx/dx + dJy/dy` with the same stencil as the inverse.
pub fn divergence(j: &CurrentDensityMap) -> Result<FieldMap> {
    let g = *j.geometry();
    let dx = diff_x(j.jx().data(), g.width, g.height, g.pitch);
    let dy = diff_y(j.jy().data(), g.width, g.height, g.pitch);
    FieldMap::new(
        g,
        UNIT_DIVERGENCE,
        dx.iter().zip(&dy).map(|(a, b)| a + b).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthFitConfig {
    /// Largest accepted `|residual| / |profile|` (L2).
    pub residual_limit: f64,
    pub max_iterations: usize,
}

impl Default for DepthFitConfig {
    fn default() -> Self {
        Self {
            residual_limit: 0.1,
            max_iterations: 200,
        }
    }
}

/// Straight-wire fit of a B_z map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthEstimate {
    /// Wire-to-sensor distance `d`, m.
    pub distance_m: f64,
    /// Source height `standoff - d`, m.
    pub source_z_m: f64,
    /// Lateral wire position, m.
    pub position_m: f64,
    /// Current along +y, A.
    pub current_a: f64,
    /// Normalized L2 residual of the profile fit.
    pub residual: f64,
}

/// Profile `-mu0 I / (2 pi) (x - x0) / ((x - x0)^2 + d^2)` of a wire along +y.
struct WireProfile<'a> {
    x: &'a [f64],
    y: &'a [f64],
    pitch: f64,
    current_scale: f64,
}

impl WireProfile<'_> {
    fn unpack(&self, p: &[f64]) -> (f64, f64, f64) {
        (
            p[0] * self.pitch,
            p[1].abs() * self.pitch,
            p[2] * self.current_scale,
        )
    }

    fn model(&self, p: &[f64], x: f64) -> f64 {
        let (x0, d, i) = self.unpack(p);
        let u = x - x0;
        -MU0 * i / (2.0 * PI) * u / (u * u + d * d)
    }
}

impl LeastSquares for WireProfile<'_> {
    fn n_residuals(&self) -> usize {
        self.x.len()
    }

    fn evaluate(&self, p: &[f64], r: &mut DVector<f64>, jac: &mut DMatrix<f64>) {
        let (x0, d, i) = self.unpack(p);
        let k = -MU0 / (2.0 * PI);
        for (n, (&x, &y)) in self.x.iter().zip(self.y).enumerate() {
            let u = x - x0;
            let den = u * u + d * d;
            let m = k * i * u / den;
            r[n] = y - m;
            // d/du [u / den] = (d^2 - u^2) / den^2, du/dx0 = -1.
            jac[(n, 0)] = -k * i * (d * d - u * u) / (den * den) * self.pitch;
            jac[(n, 1)] = -k * i * u * 2.0 * d / (den * den) * self.pitch * p[1].signum();
            jac[(n, 2)] = k * u / den * self.current_scale;
        }
    }

    fn residuals(&self, p: &[f64], r: &mut DVector<f64>) {
        for (n, (&x, &y)) in self.x.iter().zip(self.y).enumerate() {
            r[n] = y - self.model(p, x);
        }
    }
}

/// Fits a straight wire along y to the column-averaged B_z profile.
///
/// Multi-start over five separations log-spaced in `[pitch, 50 pitch]`; the
/// best fit wins.
pub fn estimate_depth(bz: &FieldMap, config: &DepthFitConfig) -> Result<DepthEstimate> {
    let g = *bz.geometry();
    if g.width < 4 {
        return Err(Error::TooFewSamples {
            got: g.width,
            need: 4,
        });
    }
    let x: Vec<f64> = (0..g.width).map(|c| g.x(c)).collect();
    let profile: Vec<f64> = (0..g.width)
        .map(|c| (0..g.height).map(|r| bz.get(c, r)).sum::<f64>() / g.height as f64)
        .collect();
    let norm = profile.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::NotWireLike {
            residual: 1.0,
            limit: config.residual_limit,
        });
    }

    let (imax, imin) = profile.iter().enumerate().fold((0, 0), |(a, b), (i, v)| {
        (
            if *v > profile[a] { i } else { a },
            if *v < profile[b] { i } else { b },
        )
    });
    let span = profile[imax] - profile[imin];
    let x0 = 0.5 * (imax + imin) as f64;
    // Positive lobe on the left means current along +y.
    let sign = if imax <= imin { 1.0 } else { -1.0 };
    let current_scale = 2.0 * PI * g.pitch * span.max(f64::MIN_POSITIVE) / MU0;
    let problem = WireProfile {
        x: &x,
        y: &profile,
        pitch: g.pitch,
        current_scale,
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    for s in 0..5 {
        let d0 = 50f64.powf(s as f64 / 4.0);
        // span = mu0 I / (2 pi d), so I = d * current_scale in pitch units.
        let i0 = sign * d0;
        let out = levenberg_marquardt(&problem, &[x0, d0, i0], config.max_iterations, 1e-10);
        if !out.converged || !out.cost.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|(c, _)| out.cost < *c) {
            best = Some((out.cost, out.params));
        }
    }
    let Some((cost, params)) = best else {
        return Err(Error::NoConvergence(f64::NAN));
    };
    let residual = cost.sqrt() / norm;
    if !(residual <= config.residual_limit) {
        return Err(Error::NotWireLike {
            residual,
            limit: config.residual_limit,
        });
    }
    let (position_m, distance_m, current_a) = problem.unpack(&params);
    Ok(DepthEstimate {
        distance_m,
        source_z_m: g.standoff - distance_m,
        position_m,
        current_a,
        residual,
    })
}
