//! Reconstruction quality metrics.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::Volume;

/// `‖est − ref‖₂ / ‖ref‖₂`.
pub fn nrmse(est: &Volume, reference: &Volume) -> Result<f64> {
    est.check_shape(reference.shape())?;
    let (mut err, mut norm) = (0.0, 0.0);
    for (&e, &r) in est.data().iter().zip(reference.data()) {
        err += (e - r) * (e - r);
        norm += r * r;
    }
    if norm == 0.0 {
        return Err(Error::invalid("NRMSE reference is identically zero"));
    }
    Ok((err / norm).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 7,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Mean SSIM over axial slices, each slice averaged over all fully contained
/// `window × window` uniform windows. The dynamic range is taken from the
/// reference volume.
pub fn ssim(est: &Volume, reference: &Volume, window: usize, k1: f64, k2: f64) -> Result<f64> {
    est.check_shape(reference.shape())?;
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!("SSIM window must be odd and >= 3, got {window}")));
    }
    let s = reference.shape();
    if s.nx < window || s.ny < window {
        return Err(Error::invalid(format!("slices of {}x{} are smaller than the SSIM window", s.nx, s.ny)));
    }
    let range = reference.max() - reference.min();
    if range <= 0.0 {
        return Err(Error::invalid("SSIM reference is constant"));
    }
    let c1 = (k1 * range).powi(2);
    let c2 = (k2 * range).powi(2);
    let per_slice: Vec<f64> = (0..s.nz)
        .into_par_iter()
        .map(|z| slice_ssim(est.slice(z), reference.slice(z), s.nx, s.ny, window, c1, c2))
        .collect();
    Ok(per_slice.iter().sum::<f64>() / s.nz as f64)
}

pub fn ssim_default(est: &Volume, reference: &Volume) -> Result<f64> {
    let p = SsimParams::default();
    ssim(est, reference, p.window, p.k1, p.k2)
}

/// Summed-area table with a zero first row and column.
fn integral(values: impl Iterator<Item = f64>, nx: usize, ny: usize) -> Vec<f64> {
    let w = nx + 1;
    let mut table = vec![0.0; w * (ny + 1)];
    let mut it = values;
    for y in 0..ny {
        let mut row = 0.0;
        for x in 0..nx {
            row += it.next().unwrap_or(0.0);
            table[(y + 1) * w + x + 1] = table[y * w + x + 1] + row;
        }
    }
    table
}

fn slice_ssim(a: &[f64], b: &[f64], nx: usize, ny: usize, win: usize, c1: f64, c2: f64) -> f64 {
    let sa = integral(a.iter().copied(), nx, ny);
    let sb = integral(b.iter().copied(), nx, ny);
    let saa = integral(a.iter().map(|v| v * v), nx, ny);
    let sbb = integral(b.iter().map(|v| v * v), nx, ny);
    let sab = integral(a.iter().zip(b).map(|(x, y)| x * y), nx, ny);
    let w = nx + 1;
    let box_sum = |t: &[f64], x: usize, y: usize| {
        t[(y + win) * w + x + win] - t[y * w + x + win] - t[(y + win) * w + x] + t[y * w + x]
    };
    let n = (win * win) as f64;
    // sample covariance, as in the common uniform-window formulation
    let cov_norm = n / (n - 1.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=(ny - win) {
        for x in 0..=(nx - win) {
            let ma = box_sum(&sa, x, y) / n;
            let mb = box_sum(&sb, x, y) / n;
            let va = ((box_sum(&saa, x, y) / n - ma * ma) * cov_norm).max(0.0);
            let vb = ((box_sum(&sbb, x, y) / n - mb * mb) * cov_norm).max(0.0);
            let cov = (box_sum(&sab, x, y) / n - ma * mb) * cov_norm;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}
