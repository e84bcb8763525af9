//! Forward NV-centre physics: orientation geometry, first-order Zeeman
//! resonance positions, and synthetic ODMR cubes.
//!
//! Each NV axis contributes two ground-state transitions, m_s = 0 -> -1 and
//! m_s = 0 -> +1, at `D -/+ gamma * |B . n|`. Higher-order Hamiltonian terms
//! are not modelled.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps_io::{ODMRCube, VectorFieldMap};

pub type Vec3 = Vector3<f64>;

/// Zero-field splitting and electron gyromagnetic ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NVConstants {
    pub zero_field_splitting_hz: f64,
    pub gyromagnetic_hz_per_t: f64,
}

impl Default for NVConstants {
    fn default() -> Self {
        Self {
            zero_field_splitting_hz: 2.870e9,
            gyromagnetic_hz_per_t: 28.024e9,
        }
    }
}

impl NVConstants {
    pub fn new(zero_field_splitting_hz: f64, gyromagnetic_hz_per_t: f64) -> Result<Self> {
        let c = Self {
            zero_field_splitting_hz,
            gyromagnetic_hz_per_t,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.zero_field_splitting_hz > 0.0 && self.zero_field_splitting_hz.is_finite())
            || !(self.gyromagnetic_hz_per_t > 0.0 && self.gyromagnetic_hz_per_t.is_finite())
        {
            return Err(Error::InvalidArgument(
                "NV constants must be finite and strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// The four <111> orientations of a (100)-cut diamond in the lab frame.
pub fn tetrahedral_axes() -> [Vec3; 4] {
    let s = 1.0 / 3.0_f64.sqrt();
    [
        Vec3::new(s, s, s),
        Vec3::new(s, -s, -s),
        Vec3::new(-s, s, -s),
        Vec3::new(-s, -s, s),
    ]
}

/// Default margin by which the bias projection must exceed signal fields.
pub const DEFAULT_SIGN_MARGIN_T: f64 = 1e-4;
const MIN_AXIS_DET: f64 = 0.1;
const BIAS_RANGE_T: (f64, f64) = (1e-4, 1e-1);

/// NV orientation frame, the three axes used for vector reconstruction, and
/// the static bias field.
#[derive(Debug, Clone, PartialEq)]
pub struct NVFrame {
    axes: [Vec3; 4],
    used_axes: [usize; 3],
    bias_field: Vec3,
    sign_margin_t: f64,
}

impl NVFrame {
    pub fn new(
        axes: [Vec3; 4],
        used_axes: [usize; 3],
        bias_field: Vec3,
        sign_margin_t: f64,
    ) -> Result<Self> {
        for (i, a) in axes.iter().enumerate() {
            if (a.norm() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "NV axis {i} has norm {}",
                    a.norm()
                )));
            }
            for (j, b) in axes.iter().enumerate().skip(i + 1) {
                if (a.dot(b) + 1.0 / 3.0).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(format!(
                        "NV axes {i} and {j} are not tetrahedral (dot {})",
                        a.dot(b)
                    )));
                }
            }
        }
        if used_axes.iter().any(|&u| u > 3)
            || used_axes[0] == used_axes[1]
            || used_axes[1] == used_axes[2]
            || used_axes[0] == used_axes[2]
        {
            return Err(Error::InvalidArgument(format!(
                "used axes {used_axes:?} must be three distinct indices in 0..4"
            )));
        }
        if !bias_field.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("bias field".into()));
        }
        if !(sign_margin_t >= 0.0 && sign_margin_t.is_finite()) {
            return Err(Error::InvalidArgument("sign margin must be >= 0".into()));
        }
        let frame = Self {
            axes,
            used_axes,
            bias_field,
            sign_margin_t,
        };
        let det = frame.used_axis_matrix().determinant();
        if det.abs() < MIN_AXIS_DET {
            return Err(Error::SingularAxes(det.abs()));
        }
        Ok(frame)
    }

    /// Tetrahedral axes, axes 0..3 used, default sign margin.
    pub fn with_bias(bias_field: Vec3) -> Result<Self> {
        Self::new(
            tetrahedral_axes(),
            [0, 1, 2],
            bias_field,
            DEFAULT_SIGN_MARGIN_T,
        )
    }

    pub fn axes(&self) -> &[Vec3; 4] {
        &self.axes
    }
    pub fn used_axes(&self) -> [usize; 3] {
        self.used_axes
    }
    pub fn bias_field(&self) -> Vec3 {
        self.bias_field
    }
    pub fn sign_margin_t(&self) -> f64 {
        self.sign_margin_t
    }

    /// Rows are the used unit axes.
    pub fn used_axis_matrix(&self) -> Matrix3<f64> {
        let [a, b, c] = self.used_axes.map(|i| self.axes[i]);
        Matrix3::from_rows(&[a.transpose(), b.transpose(), c.transpose()])
    }

    /// Checks that the bias can lift degeneracy and fixes the projection sign
    /// on every used axis.
    pub fn check_bias(&self) -> Result<()> {
        let mag = self.bias_field.norm();
        if !(BIAS_RANGE_T.0..=BIAS_RANGE_T.1).contains(&mag) {
            return Err(Error::BiasMarginViolated(format!(
                "|bias| = {mag} T outside [{}, {}] T",
                BIAS_RANGE_T.0, BIAS_RANGE_T.1
            )));
        }
        for &i in &self.used_axes {
            let p = self.bias_field.dot(&self.axes[i]);
            if p.abs() <= self.sign_margin_t {
                return Err(Error::BiasMarginViolated(format!(
                    "bias projection {p} T on axis {i} does not exceed margin {} T",
                    self.sign_margin_t
                )));
            }
        }
        Ok(())
    }
}

/// Lorentzian dip parameters and noise settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineShapeParams {
    pub contrast: f64,
    pub linewidth_fwhm_hz: f64,
    pub photon_noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for LineShapeParams {
    fn default() -> Self {
        Self {
            contrast: 0.02,
            linewidth_fwhm_hz: 8e6,
            photon_noise_sigma: 0.0,
            rng_seed: 0,
        }
    }
}

impl LineShapeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.contrast > 0.0 && self.contrast <= 0.2) {
            return Err(Error::InvalidArgument(format!(
                "contrast {} outside (0, 0.2]",
                self.contrast
            )));
        }
        if !(self.linewidth_fwhm_hz > 0.0 && self.linewidth_fwhm_hz.is_finite()) {
            return Err(Error::InvalidArgument("linewidth must be > 0".into()));
        }
        if !(self.photon_noise_sigma >= 0.0 && self.photon_noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument("noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// First-order Zeeman pair `(D - gamma|b.n|, D + gamma|b.n|)`.
pub fn resonance_pair(b: &Vec3, axis: &Vec3, constants: &NVConstants) -> (f64, f64) {
    let shift = constants.gyromagnetic_hz_per_t * b.dot(axis).abs();
    (
        constants.zero_field_splitting_hz - shift,
        constants.zero_field_splitting_hz + shift,
    )
}

/// Unit-peak Lorentzian.
#[inline]
pub fn lorentzian(f: f64, center: f64, fwhm: f64) -> f64 {
    let hw = 0.5 * fwhm;
    let x = f - center;
    hw * hw / (x * x + hw * hw)
}

/// Which transition of which axis a resonance belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedDip {
    pub axis: usize,
    /// `false` for m_s = -1 (lower), `true` for m_s = +1 (upper).
    pub upper: bool,
    pub freq_hz: f64,
}

/// All eight resonances for a total field, in axis-major order.
pub fn predicted_dips(total: &Vec3, frame: &NVFrame, constants: &NVConstants) -> [PredictedDip; 8] {
    let mut out = [PredictedDip {
        axis: 0,
        upper: false,
        freq_hz: 0.0,
    }; 8];
    for (i, axis) in frame.axes().iter().enumerate() {
        let (lo, hi) = resonance_pair(total, axis, constants);
        out[2 * i] = PredictedDip {
            axis: i,
            upper: false,
            freq_hz: lo,
        };
        out[2 * i + 1] = PredictedDip {
            axis: i,
            upper: true,
            freq_hz: hi,
        };
    }
    out
}

/// Noise-free fluorescence for one pixel's resonance set.
pub fn spectrum_model(freqs: &[f64], dips: &[PredictedDip], shape: &LineShapeParams) -> Vec<f64> {
    freqs
        .iter()
        .map(|&f| {
            let depth: f64 = dips
                .iter()
                .map(|d| shape.contrast * lorentzian(f, d.freq_hz, shape.linewidth_fwhm_hz))
                .sum();
            (1.0 - depth).max(0.0)
        })
        .collect()
}

/// Per-pixel noise stream: independent of evaluation order.
pub(crate) fn pixel_rng(seed: u64, pixel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel as u64);
    rng
}

/// Synthesizes the ODMR cube seen through `frame` for the signal `field`.
///
/// The bias field is added to every pixel before computing resonances.
pub fn synthesize_odmr(
    field: &VectorFieldMap,
    frame: &NVFrame,
    freqs: &[f64],
    shape: &LineShapeParams,
    constants: &NVConstants,
) -> Result<ODMRCube> {
    shape.validate()?;
    constants.validate()?;
    if freqs.len() < 2 || freqs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument(
            "sweep frequencies must be strictly increasing".into(),
        ));
    }
    let (start, stop) = (freqs[0], freqs[freqs.len() - 1]);
    let geometry = *field.geometry();
    let n = geometry.len();
    let noise = if shape.photon_noise_sigma > 0.0 {
        Some(Normal::new(0.0, shape.photon_noise_sigma).expect("sigma validated"))
    } else {
        None
    };

    let per_pixel: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|pixel| {
            let total = Vec3::from(field.vector(pixel)) + frame.bias_field();
            let dips = predicted_dips(&total, frame, constants);
            if let Some(d) = dips.iter().find(|d| d.freq_hz < start || d.freq_hz > stop) {
                return Err(Error::SweepTooNarrow {
                    freq_hz: d.freq_hz,
                    start_hz: start,
                    stop_hz: stop,
                });
            }
            let mut values = spectrum_model(freqs, &dips, shape);
            if let Some(normal) = &noise {
                let mut rng = pixel_rng(shape.rng_seed, pixel);
                for v in &mut values {
                    *v += normal.sample(&mut rng);
                }
            }
            Ok(values)
        })
        .collect::<Result<_>>()?;

    ODMRCube::new(
        geometry.width,
        geometry.height,
        geometry.pitch,
        freqs.to_vec(),
        per_pixel.concat(),
    )
}

/// `n` evenly spaced frequencies from `start` to `stop` inclusive.
pub fn linear_sweep(start: f64, stop: f64, n: usize) -> Vec<f64> {
    let step = (stop - start) / (n - 1) as f64;
    (0..n).map(|i| start + step * i as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps_io::GridGeometry;
    use proptest::prelude::*;

    const D: f64 = 2.870e9;
    const GAMMA: f64 = 28.024e9;

    #[test]
    fn tetrahedral_geometry() {
        let axes = tetrahedral_axes();
        let sum = axes.iter().fold(Vec3::zeros(), |s, a| s + a);
        assert!(sum.norm() < 1e-15);
        for a in &axes {
            assert!((a.norm() - 1.0).abs() < 1e-15);
        }
        assert!((axes[0].dot(&axes[1]) + 1.0 / 3.0).abs() < 1e-15);
        for i in 0..4 {
            for j in i + 1..4 {
                assert!((axes[i].dot(&axes[j]) + 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_field_is_degenerate() {
        let c = NVConstants::default();
        let (lo, hi) = resonance_pair(&Vec3::zeros(), &tetrahedral_axes()[0], &c);
        assert_eq!((lo, hi), (D, D));
        // perpendicular field
        let axis = tetrahedral_axes()[0];
        let b = Vec3::new(1e-3, -1e-3, 0.0);
        assert_eq!(resonance_pair(&b, &axis, &c), (D, D));
    }

    #[test]
    fn one_millitesla_along_z() {
        let c = NVConstants::default();
        let axis = tetrahedral_axes()[0];
        let (lo, hi) = resonance_pair(&Vec3::new(0.0, 0.0, 1e-3), &axis, &c);
        // 1e-3 / sqrt(3) = 5.7735e-4 T; gamma * that = 1.61797e7 Hz.
        let shift = GAMMA * 1e-3 / 3.0_f64.sqrt();
        assert!((shift - 1.61797e7).abs() < 1e2);
        assert!((lo - (D - shift)).abs() < 1e-6);
        assert!((hi - (D + shift)).abs() < 1e-6);
        assert!((lo - 2.85382e9).abs() < 5e3);
        assert!((hi - 2.88618e9).abs() < 5e3);
    }

    #[test]
    fn frame_rejects_bad_axes() {
        let mut axes = tetrahedral_axes();
        axes[1] = Vec3::new(1.0, 0.0, 0.0);
        assert!(NVFrame::new(axes, [0, 1, 2], Vec3::zeros(), 0.0).is_err());
        assert!(NVFrame::new(tetrahedral_axes(), [0, 0, 2], Vec3::zeros(), 0.0).is_err());
    }

    #[test]
    fn bias_margin_enforced() {
        let s = 3.0_f64.sqrt();
        // Perpendicular to axis 2: projection 0 on a used axis.
        let b = Vec3::new(1.0, -1.0, 0.0) * 2e-3;
        let frame = NVFrame::new(tetrahedral_axes(), [0, 1, 2], b, 1e-4).unwrap();
        assert!(matches!(
            frame.check_bias(),
            Err(Error::BiasMarginViolated(_))
        ));
        let ok = NVFrame::with_bias(Vec3::new(1.0, 1.0, 1.0) / s * 2e-3).unwrap();
        ok.check_bias().unwrap();
        let tiny = NVFrame::with_bias(Vec3::new(1.0, 1.0, 1.0) * 1e-6).unwrap();
        assert!(tiny.check_bias().is_err());
    }

    fn single_pixel(b: [f64; 3]) -> VectorFieldMap {
        VectorFieldMap::uniform(GridGeometry::new(1, 1, 1e-6, 1e-5).unwrap(), b).unwrap()
    }

    #[test]
    fn merged_dip_at_zero_field() {
        let frame = NVFrame::new(tetrahedral_axes(), [0, 1, 2], Vec3::zeros(), 0.0).unwrap();
        let shape = LineShapeParams::default();
        let freqs = linear_sweep(D - 50e6, D + 50e6, 101);
        let cube = synthesize_odmr(
            &single_pixel([0.0; 3]),
            &frame,
            &freqs,
            &shape,
            &NVConstants::default(),
        )
        .unwrap();
        let s = cube.spectrum(0);
        let (imin, vmin) =
            s.iter()
                .enumerate()
                .fold((0, f64::MAX), |a, (i, &v)| if v < a.1 { (i, v) } else { a });
        assert_eq!(freqs[imin], D);
        assert!((vmin - (1.0 - 8.0 * shape.contrast)).abs() < 1e-12);
    }

    #[test]
    fn saturated_merged_dip_clamps_at_zero() {
        let frame = NVFrame::new(tetrahedral_axes(), [0, 1, 2], Vec3::zeros(), 0.0).unwrap();
        let shape = LineShapeParams {
            contrast: 0.2,
            ..Default::default()
        };
        let freqs = linear_sweep(D - 50e6, D + 50e6, 101);
        let cube = synthesize_odmr(
            &single_pixel([0.0; 3]),
            &frame,
            &freqs,
            &shape,
            &NVConstants::default(),
        )
        .unwrap();
        assert_eq!(cube.spectrum(0)[50], 0.0);
    }

    #[test]
    fn bias_along_111_dip_positions() {
        let s = 3.0_f64.sqrt();
        let bias = Vec3::new(1.0, 1.0, 1.0) / s * 2e-3;
        let frame = NVFrame::with_bias(bias).unwrap();
        let dips = predicted_dips(&bias, &frame, &NVConstants::default());
        let axis1 = GAMMA * 2e-3;
        let others = GAMMA * 2e-3 / 3.0;
        assert!((axis1 - 56.048e6).abs() < 1.0);
        assert!((others - 18.683e6).abs() < 1e3);
        assert!((dips[0].freq_hz - (D - axis1)).abs() < 1e-3);
        assert!((dips[1].freq_hz - (D + axis1)).abs() < 1e-3);
        for d in &dips[2..] {
            let off = (d.freq_hz - D).abs();
            assert!((off - others).abs() < 1e-3, "{off}");
        }
    }

    #[test]
    fn narrow_sweep_rejected() {
        let frame = NVFrame::with_bias(Vec3::new(2e-3, 0.0, 0.0)).unwrap();
        let freqs = linear_sweep(D - 10e6, D + 10e6, 41);
        let err = synthesize_odmr(
            &single_pixel([0.0; 3]),
            &frame,
            &freqs,
            &LineShapeParams::default(),
            &NVConstants::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SweepTooNarrow { .. }));
    }

    #[test]
    fn noise_is_seeded_and_per_pixel() {
        let g = GridGeometry::new(3, 2, 1e-6, 1e-5).unwrap();
        let frame = NVFrame::with_bias(Vec3::new(1.0, 0.3, 0.2) * 1e-3).unwrap();
        let freqs = linear_sweep(D - 40e6, D + 40e6, 81);
        let shape = LineShapeParams {
            photon_noise_sigma: 1e-3,
            rng_seed: 42,
            ..Default::default()
        };
        let field = VectorFieldMap::uniform(g, [0.0; 3]).unwrap();
        let c = NVConstants::default();
        let a = synthesize_odmr(&field, &frame, &freqs, &shape, &c).unwrap();
        let b = synthesize_odmr(&field, &frame, &freqs, &shape, &c).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.spectrum(0), a.spectrum(1));
        let other = LineShapeParams {
            rng_seed: 43,
            ..shape
        };
        assert_ne!(
            a,
            synthesize_odmr(&field, &frame, &freqs, &other, &c).unwrap()
        );
    }

    proptest! {
        #[test]
        fn resonance_pair_even_and_linear(
            bx in -1e-2f64..1e-2, by in -1e-2f64..1e-2, bz in -1e-2f64..1e-2, k in 0usize..4,
        ) {
            let c = NVConstants::default();
            let b = Vec3::new(bx, by, bz);
            let axis = tetrahedral_axes()[k];
            let (lo, hi) = resonance_pair(&b, &axis, &c);
            prop_assert_eq!((lo, hi), resonance_pair(&(-b), &axis, &c));
            prop_assert!(lo <= hi);
            let split = 2.0 * c.gyromagnetic_hz_per_t * b.dot(&axis).abs();
            prop_assert!(((hi - lo) - split).abs() <= 1e-6 * split.max(1.0));
        }

        #[test]
        fn noiseless_spectra_bounded_and_local(
            b in proptest::collection::vec(-5e-5f64..5e-5, 6),
        ) {
            let g = GridGeometry::new(2, 1, 1e-6, 1e-5).unwrap();
            let frame = NVFrame::with_bias(Vec3::new(1.0, 0.4, 0.15).normalize() * 2e-3).unwrap();
            let freqs = linear_sweep(D - 80e6, D + 80e6, 101);
            let shape = LineShapeParams::default();
            let c = NVConstants::default();
            let f1 = VectorFieldMap::from_vectors(g, &[[b[0], b[1], b[2]], [b[3], b[4], b[5]]]).unwrap();
            let f2 = VectorFieldMap::from_vectors(g, &[[b[0], b[1], b[2]], [0.0, 0.0, 0.0]]).unwrap();
            let c1 = synthesize_odmr(&f1, &frame, &freqs, &shape, &c).unwrap();
            let c2 = synthesize_odmr(&f2, &frame, &freqs, &shape, &c).unwrap();
            prop_assert!(c1.spectra().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(c1.spectrum(0), c2.spectrum(0));
        }
    }
}
