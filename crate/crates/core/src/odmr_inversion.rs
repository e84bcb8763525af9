//! Per-pixel ODMR spectral fitting and vector field reconstruction.
//!
//! Each spectrum is fitted with one joint model of all expected Lorentzian
//! dips (centre, FWHM, contrast per dip), seeded at the positions the bias
//! field predicts. Fitted dips are matched back to (axis, branch) labels, the
//! Zeeman splitting of each used axis gives the field projection, and a 3x3
//! solve recovers the vector. Pixels that fail any step are masked, never
//! filled in.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lm::{levenberg_marquardt, LeastSquares};
use crate::maps_io::{FieldMap, ODMRCube, VectorFieldMap, UNIT_DIMENSIONLESS};
use crate::nv_model::{
    lorentzian, predicted_dips, LineShapeParams, NVConstants, NVFrame, PredictedDip, Vec3,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    /// Detection threshold as a fraction of the expected contrast.
    pub dip_threshold: f64,
    pub max_iterations: usize,
    /// Relative parameter change that ends the iteration.
    pub convergence_tol: f64,
    /// Minimum separation of distinguishable dips; `None` means half the linewidth.
    pub merge_tolerance_hz: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            dip_threshold: 0.3,
            max_iterations: 100,
            convergence_tol: 1e-8,
            merge_tolerance_hz: None,
        }
    }
}

impl FitConfig {
    pub fn merge_tolerance(&self, shape: &LineShapeParams) -> f64 {
        self.merge_tolerance_hz
            .unwrap_or(0.5 * shape.linewidth_fwhm_hz)
    }

    fn validate(&self) -> Result<()> {
        if !(self.dip_threshold > 0.0 && self.dip_threshold < 1.0) {
            return Err(Error::InvalidArgument(
                "dip_threshold must be in (0, 1)".into(),
            ));
        }
        if !(self.convergence_tol > 0.0) || self.max_iterations == 0 {
            return Err(Error::InvalidArgument("fit tolerances must be > 0".into()));
        }
        if let Some(m) = self.merge_tolerance_hz {
            if !(m > 0.0) {
                return Err(Error::InvalidArgument("merge tolerance must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// One fitted Lorentzian dip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FittedDip {
    pub center_hz: f64,
    pub fwhm_hz: f64,
    pub contrast: f64,
    /// RMS of data minus model over the samples within one FWHM of the centre.
    pub residual: f64,
}

/// Multi-dip model; parameters per dip are (centre offset, width, depth) scaled
/// by the nominal linewidth and contrast so all are order one.
struct MultiDip<'a> {
    freqs: &'a [f64],
    values: &'a [f64],
    seeds: Vec<f64>,
    width_scale: f64,
    contrast_scale: f64,
}

impl MultiDip<'_> {
    fn unpack(&self, p: &[f64], k: usize) -> (f64, f64, f64) {
        (
            self.seeds[k] + self.width_scale * p[3 * k],
            self.width_scale * p[3 * k + 1],
            self.contrast_scale * p[3 * k + 2],
        )
    }

    fn model(&self, p: &[f64], f: f64) -> f64 {
        1.0 - (0..self.seeds.len())
            .map(|k| {
                let (c, w, a) = self.unpack(p, k);
                a * lorentzian(f, c, w)
            })
            .sum::<f64>()
    }
}

impl LeastSquares for MultiDip<'_> {
    fn n_residuals(&self) -> usize {
        self.freqs.len()
    }

    fn evaluate(&self, p: &[f64], r: &mut DVector<f64>, jac: &mut DMatrix<f64>) {
        let s = self.width_scale;
        for (i, (&f, &y)) in self.freqs.iter().zip(self.values).enumerate() {
            let mut model = 1.0;
            for k in 0..self.seeds.len() {
                let (c, w, a) = self.unpack(p, k);
                let h = 0.5 * w;
                let x = f - c;
                let den = x * x + h * h;
                let l = h * h / den;
                let dl_dc = 2.0 * x * h * h / (den * den);
                let dl_dh = 2.0 * h * x * x / (den * den);
                model -= a * l;
                jac[(i, 3 * k)] = -a * dl_dc * s;
                jac[(i, 3 * k + 1)] = -a * dl_dh * 0.5 * s;
                jac[(i, 3 * k + 2)] = -self.contrast_scale * l;
            }
            r[i] = y - model;
        }
    }

    fn residuals(&self, p: &[f64], r: &mut DVector<f64>) {
        for (i, (&f, &y)) in self.freqs.iter().zip(self.values).enumerate() {
            r[i] = y - self.model(p, f);
        }
    }
}

fn noise_floor(shape: &LineShapeParams) -> f64 {
    shape.photon_noise_sigma.max(1e-6 * shape.contrast)
}

/// Fits one Lorentzian per expected dip and returns them sorted by centre.
pub fn fit_spectrum(
    freqs: &[f64],
    values: &[f64],
    expected: &[f64],
    shape: &LineShapeParams,
    config: &FitConfig,
) -> Result<Vec<FittedDip>> {
    shape.validate()?;
    config.validate()?;
    if freqs.len() != values.len() {
        return Err(Error::InvalidArgument(format!(
            "{} frequencies but {} values",
            freqs.len(),
            values.len()
        )));
    }
    if freqs.len() < 3 {
        return Err(Error::TooFewSamples {
            got: freqs.len(),
            need: 3,
        });
    }
    if freqs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument(
            "frequencies must be strictly increasing".into(),
        ));
    }
    let max_step = freqs.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    if max_step > shape.linewidth_fwhm_hz / 4.0 {
        return Err(Error::InvalidArgument(format!(
            "sweep step {max_step} Hz is coarser than a quarter linewidth"
        )));
    }
    if expected.is_empty() {
        return Err(Error::InvalidArgument("no expected dips".into()));
    }

    let threshold = 1.0 - config.dip_threshold * shape.contrast;
    let has_dip = (0..values.len()).any(|i| {
        let left = if i > 0 { values[i - 1] } else { f64::INFINITY };
        let right = values.get(i + 1).copied().unwrap_or(f64::INFINITY);
        values[i] < threshold && values[i] <= left && values[i] <= right
    });
    if !has_dip {
        return Err(Error::NoDipsFound);
    }

    let mut seeds = expected.to_vec();
    seeds.sort_by(f64::total_cmp);
    let merge = config.merge_tolerance(shape);
    if let Some(w) = seeds.windows(2).find(|w| w[1] - w[0] < merge) {
        return Err(Error::DegenerateResonances(w[0], w[1]));
    }

    let problem = MultiDip {
        freqs,
        values,
        seeds,
        width_scale: shape.linewidth_fwhm_hz,
        contrast_scale: shape.contrast,
    };
    let initial: Vec<f64> = (0..problem.seeds.len())
        .flat_map(|_| [0.0, 1.0, 1.0])
        .collect();
    let out = levenberg_marquardt(
        &problem,
        &initial,
        config.max_iterations,
        config.convergence_tol,
    );

    let rms = (out.cost / freqs.len() as f64).sqrt();
    let limit = 10.0 * noise_floor(shape);
    if !out.converged && rms > limit {
        return Err(Error::NoConvergence(rms));
    }
    if !(rms <= limit) {
        return Err(Error::PoorFit { rms, limit });
    }

    let mut dips: Vec<FittedDip> = (0..problem.seeds.len())
        .map(|k| {
            let (c, w, a) = problem.unpack(&out.params, k);
            let w = w.abs();
            let (sum, count) = freqs
                .iter()
                .zip(values)
                .filter(|(f, _)| (**f - c).abs() <= w)
                .fold((0.0, 0usize), |(s, n), (&f, &y)| {
                    let d = y - problem.model(&out.params, f);
                    (s + d * d, n + 1)
                });
            FittedDip {
                center_hz: c,
                fwhm_hz: w,
                contrast: a,
                residual: if count > 0 {
                    (sum / count as f64).sqrt()
                } else {
                    rms
                },
            }
        })
        .collect();
    dips.sort_by(|a, b| a.center_hz.total_cmp(&b.center_hz));
    Ok(dips)
}

/// Solves `A b = p` where the rows of `A` are the frame's used axes.
pub fn solve_vector(projections: [f64; 3], frame: &NVFrame) -> Result<Vec3> {
    let a = frame.used_axis_matrix();
    let det = a.determinant();
    if det.abs() < 1e-12 {
        return Err(Error::SingularAxes(det.abs()));
    }
    a.lu()
        .solve(&Vec3::from(projections))
        .ok_or(Error::SingularAxes(det.abs()))
}

/// Projections of `b` onto the frame's used axes.
pub fn project(b: &Vec3, frame: &NVFrame) -> [f64; 3] {
    frame.used_axes().map(|i| b.dot(&frame.axes()[i]))
}

/// Resonance pair recovered for one used axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisResonance {
    pub axis: usize,
    pub f_minus: f64,
    pub f_plus: f64,
    pub fit_residual: f64,
}

/// Per-pixel resonances of the used axes; `None` for masked pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ResonanceSet {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Option<[AxisResonance; 3]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// Signal field with the bias removed; masked pixels hold 0.
    pub field: VectorFieldMap,
    /// 1 for valid pixels, 0 for masked ones.
    pub mask: FieldMap,
    pub resonances: ResonanceSet,
    /// Error code of each masked pixel.
    pub failures: Vec<Option<&'static str>>,
}

impl Reconstruction {
    pub fn valid_count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }
}

/// Greedy nearest matching of fitted centres to labelled predictions.
fn assign(
    fitted: &[FittedDip],
    predicted: &[PredictedDip],
    merge: f64,
) -> Result<Vec<(usize, usize)>> {
    let mut pairs: Vec<(f64, usize, usize)> = fitted
        .iter()
        .enumerate()
        .flat_map(|(i, f)| {
            predicted
                .iter()
                .enumerate()
                .map(move |(j, p)| ((f.center_hz - p.freq_hz).abs(), i, j))
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut fit_used = vec![false; fitted.len()];
    let mut pred_used = vec![false; predicted.len()];
    let mut out = Vec::with_capacity(fitted.len());
    for (d, i, j) in pairs {
        if fit_used[i] || pred_used[j] {
            continue;
        }
        let second = predicted
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != j)
            .map(|(_, p)| (fitted[i].center_hz - p.freq_hz).abs())
            .fold(f64::INFINITY, f64::min);
        if second - d < merge {
            return Err(Error::AmbiguousAssignment(fitted[i].center_hz));
        }
        fit_used[i] = true;
        pred_used[j] = true;
        out.push((i, j));
    }
    Ok(out)
}

fn reconstruct_pixel(
    freqs: &[f64],
    spectrum: &[f64],
    predicted: &[PredictedDip],
    frame: &NVFrame,
    constants: &NVConstants,
    shape: &LineShapeParams,
    config: &FitConfig,
) -> Result<(Vec3, [AxisResonance; 3])> {
    let expected: Vec<f64> = predicted.iter().map(|d| d.freq_hz).collect();
    let fitted = fit_spectrum(freqs, spectrum, &expected, shape, config)?;
    let merge = config.merge_tolerance(shape);
    let pairs = assign(&fitted, predicted, merge)?;

    let lookup = |axis: usize, upper: bool| -> &FittedDip {
        let (i, _) = pairs
            .iter()
            .find(|(_, j)| predicted[*j].axis == axis && predicted[*j].upper == upper)
            .expect("every prediction is matched");
        &fitted[*i]
    };
    let used = frame.used_axes();
    let bias = frame.bias_field();
    let mut projections = [0.0; 3];
    let mut resonances = [AxisResonance {
        axis: 0,
        f_minus: 0.0,
        f_plus: 0.0,
        fit_residual: 0.0,
    }; 3];
    for (slot, &axis) in used.iter().enumerate() {
        let lo = lookup(axis, false);
        let hi = lookup(axis, true);
        let sign = bias.dot(&frame.axes()[axis]).signum();
        projections[slot] =
            sign * (hi.center_hz - lo.center_hz) / (2.0 * constants.gyromagnetic_hz_per_t);
        resonances[slot] = AxisResonance {
            axis,
            f_minus: lo.center_hz,
            f_plus: hi.center_hz,
            fit_residual: lo.residual.max(hi.residual),
        };
    }
    let total = solve_vector(projections, frame)?;
    Ok((total - bias, resonances))
}

/// Reconstructs the signal vector field from an ODMR cube.
///
/// Refuses outright when the bias cannot fix projection signs; otherwise every
/// per-pixel failure lands in the mask.
pub fn reconstruct_map(
    cube: &ODMRCube,
    frame: &NVFrame,
    constants: &NVConstants,
    shape: &LineShapeParams,
    config: &FitConfig,
    standoff: f64,
) -> Result<Reconstruction> {
    constants.validate()?;
    shape.validate()?;
    config.validate()?;
    frame.check_bias()?;
    let geometry = cube.geometry(standoff)?;
    let freqs = cube.freqs();

    let mut predicted = predicted_dips(&frame.bias_field(), frame, constants).to_vec();
    predicted.sort_by(|a, b| a.freq_hz.total_cmp(&b.freq_hz));
    let (start, stop) = (freqs[0], freqs[freqs.len() - 1]);
    if let Some(d) = predicted
        .iter()
        .find(|d| d.freq_hz < start || d.freq_hz > stop)
    {
        return Err(Error::SweepTooNarrow {
            freq_hz: d.freq_hz,
            start_hz: start,
            stop_hz: stop,
        });
    }

    let results: Vec<Result<(Vec3, [AxisResonance; 3])>> = (0..cube.n_pixels())
        .into_par_iter()
        .map(|p| {
            reconstruct_pixel(
                freqs,
                cube.spectrum(p),
                &predicted,
                frame,
                constants,
                shape,
                config,
            )
        })
        .collect();

    let mut vectors = Vec::with_capacity(results.len());
    let mut mask = Vec::with_capacity(results.len());
    let mut pixels = Vec::with_capacity(results.len());
    let mut failures = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok((b, res)) => {
                vectors.push([b.x, b.y, b.z]);
                mask.push(1.0);
                pixels.push(Some(res));
                failures.push(None);
            }
            Err(e) => {
                vectors.push([0.0; 3]);
                mask.push(0.0);
                pixels.push(None);
                failures.push(Some(e.code()));
            }
        }
    }
    Ok(Reconstruction {
        field: VectorFieldMap::from_vectors(geometry, &vectors)?,
        mask: FieldMap::new(geometry, UNIT_DIMENSIONLESS, mask)?,
        resonances: ResonanceSet {
            width: geometry.width,
            height: geometry.height,
            pixels,
        },
        failures,
    })
}
