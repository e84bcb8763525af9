//! Row-major 2D FFT on top of rustfft, plus the matching wavenumber grid.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub(crate) struct Fft2 {
    pub nx: usize,
    pub ny: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(nx: usize, ny: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            nx,
            ny,
            row_fwd: planner.plan_fft_forward(nx),
            row_inv: planner.plan_fft_inverse(nx),
            col_fwd: planner.plan_fft_forward(ny),
            col_inv: planner.plan_fft_inverse(ny),
        }
    }

    /// In-place forward transform (kernel `e^{-ikx}`), unnormalized.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, &self.row_fwd, &self.col_fwd);
    }

    /// In-place inverse transform, normalized by `1/(nx ny)`.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, &self.row_inv, &self.col_inv);
        let scale = 1.0 / (self.nx * self.ny) as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }

    fn run(&self, data: &mut [Complex64], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        let (nx, ny) = (self.nx, self.ny);
        data.par_chunks_mut(nx).for_each(|r| row.process(r));
        let mut t = transpose(data, nx, ny);
        t.par_chunks_mut(ny).for_each(|c| col.process(c));
        data.copy_from_slice(&transpose(&t, ny, nx));
    }

    /// Angular wavenumbers `(kx, ky)` of bin `(i, j)` for sample spacing `pitch`.
    pub fn wavenumber(&self, i: usize, j: usize, pitch: f64) -> (f64, f64) {
        (freq(i, self.nx, pitch), freq(j, self.ny, pitch))
    }
}

fn freq(i: usize, n: usize, pitch: f64) -> f64 {
    let signed = if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    };
    2.0 * PI * signed / (n as f64 * pitch)
}

fn transpose(data: &[Complex64], w: usize, h: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); w * h];
    for r in 0..h {
        for c in 0..w {
            out[c * h + r] = data[r * w + c];
        }
    }
    out
}

/// Copies a `w x h` real image into the corner of a zeroed `nx x ny` buffer.
pub(crate) fn embed(src: &[f64], w: usize, h: usize, nx: usize, ny: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); nx * ny];
    for r in 0..h {
        for c in 0..w {
            out[r * nx + c] = Complex64::new(src[r * w + c], 0.0);
        }
    }
    out
}

/// Real part of the `w x h` corner of an `nx`-wide buffer.
pub(crate) fn crop(src: &[Complex64], nx: usize, w: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        out.extend(src[r * nx..r * nx + w].iter().map(|v| v.re));
    }
    out
}
