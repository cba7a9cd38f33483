//! Canny edge detection applied slice by slice along z.
//!
//! Each axial slice goes through Gaussian smoothing, Sobel gradients,
//! non-maximum suppression and hysteresis. The slices are stacked into a
//! binary [`EdgeVolume`]. A one-voxel border of the volume is always cleared.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{EdgeVolume, Volume};

/// Edge detector settings with thresholds given as quantiles of the
/// gradient-magnitude distribution over the whole volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyParams {
    pub sigma: f64,
    pub low_quantile: f64,
    pub high_quantile: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams {
            sigma: 1.0,
            low_quantile: 0.80,
            high_quantile: 0.90,
        }
    }
}

impl CannyParams {
    pub fn detect(&self, vol: &Volume) -> Result<EdgeVolume> {
        canny_edges_quantile(vol, self.sigma, self.low_quantile, self.high_quantile)
    }
}

/// Canny with absolute hysteresis thresholds on the gradient magnitude.
pub fn canny_edges(vol: &Volume, sigma: f64, low_thresh: f64, high_thresh: f64) -> Result<EdgeVolume> {
    check_sigma(sigma)?;
    if !(low_thresh > 0.0 && low_thresh < high_thresh && high_thresh.is_finite()) {
        return Err(Error::invalid(format!(
            "thresholds must satisfy 0 < low < high, got low={low_thresh} high={high_thresh}"
        )));
    }
    let grads = gradients(vol, sigma);
    Ok(hysteresis_volume(vol, &grads, low_thresh, high_thresh))
}

/// Canny with thresholds taken as quantiles (in (0, 1)) of the gradient
/// magnitude over the volume interior.
pub fn canny_edges_quantile(vol: &Volume, sigma: f64, low_q: f64, high_q: f64) -> Result<EdgeVolume> {
    check_sigma(sigma)?;
    if !(low_q > 0.0 && low_q < high_q && high_q < 1.0) {
        return Err(Error::invalid(format!(
            "quantiles must satisfy 0 < low < high < 1, got low={low_q} high={high_q}"
        )));
    }
    let grads = gradients(vol, sigma);
    let mut mags: Vec<f64> = grads
        .iter()
        .enumerate()
        .filter(|(z, _)| !is_z_border(*z, vol.shape().nz))
        .flat_map(|(_, g)| interior(&g.magnitude, vol.shape().nx, vol.shape().ny))
        .collect();
    if mags.is_empty() {
        return Ok(EdgeVolume::empty(vol.shape(), vol.voxel_pitch()));
    }
    let low = quantile(&mut mags, low_q);
    let high = quantile(&mut mags, high_q);
    Ok(hysteresis_volume(vol, &grads, low, high))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

fn is_z_border(z: usize, nz: usize) -> bool {
    nz > 2 && (z == 0 || z == nz - 1)
}

fn interior(values: &[f64], nx: usize, ny: usize) -> impl Iterator<Item = f64> + '_ {
    (1..ny.saturating_sub(1)).flat_map(move |y| values[y * nx + 1..(y + 1) * nx - 1].iter().copied())
}

/// Nearest-rank quantile; reorders `values`.
fn quantile(values: &mut [f64], q: f64) -> f64 {
    let k = ((values.len() - 1) as f64 * q).floor() as usize;
    let (_, v, _) = values.select_nth_unstable_by(k, f64::total_cmp);
    *v
}

struct SliceGradient {
    magnitude: Vec<f64>,
    /// magnitude after non-maximum suppression, zero elsewhere
    thinned: Vec<f64>,
}

fn gradients(vol: &Volume, sigma: f64) -> Vec<SliceGradient> {
    let s = vol.shape();
    let kernel = gaussian_kernel(sigma);
    // shift to a zero minimum so a constant offset cannot leak through the
    // rounding of the smoothing sums
    let lo = vol.min();
    (0..s.nz)
        .into_par_iter()
        .map(|z| {
            let img: Vec<f64> = vol.slice(z).iter().map(|v| v - lo).collect();
            slice_gradient(&img, s.nx, s.ny, &kernel)
        })
        .collect()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn clamp(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

fn smooth(img: &[f64], nx: usize, ny: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..ny {
        for x in 0..nx {
            let mut acc = 0.0;
            for (j, w) in kernel.iter().enumerate() {
                acc += w * img[y * nx + clamp(x as i64 + j as i64 - r, nx)];
            }
            tmp[y * nx + x] = acc;
        }
    }
    let mut out = vec![0.0; img.len()];
    for y in 0..ny {
        for x in 0..nx {
            let mut acc = 0.0;
            for (j, w) in kernel.iter().enumerate() {
                acc += w * tmp[clamp(y as i64 + j as i64 - r, ny) * nx + x];
            }
            out[y * nx + x] = acc;
        }
    }
    out
}

fn slice_gradient(img: &[f64], nx: usize, ny: usize, kernel: &[f64]) -> SliceGradient {
    let smoothed = smooth(img, nx, ny, kernel);
    let at = |x: i64, y: i64| smoothed[clamp(y, ny) * nx + clamp(x, nx)];
    let n = nx * ny;
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    let mut magnitude = vec![0.0; n];
    for y in 0..ny as i64 {
        for x in 0..nx as i64 {
            let i = y as usize * nx + x as usize;
            gx[i] = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            gy[i] = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            magnitude[i] = gx[i].hypot(gy[i]);
        }
    }

    let mut thinned = vec![0.0; n];
    for y in 1..ny.saturating_sub(1) {
        for x in 1..nx.saturating_sub(1) {
            let i = y * nx + x;
            let m = magnitude[i];
            if m <= 0.0 {
                continue;
            }
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            // (dx, dy) of the neighbour along the gradient direction
            let (dx, dy): (i64, i64) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let fwd = magnitude[((y as i64 + dy) as usize) * nx + (x as i64 + dx) as usize];
            let back = magnitude[((y as i64 - dy) as usize) * nx + (x as i64 - dx) as usize];
            // asymmetric test keeps exactly one pixel of a two-pixel plateau
            if m > back && m >= fwd {
                thinned[i] = m;
            }
        }
    }
    SliceGradient { magnitude, thinned }
}

fn hysteresis_volume(vol: &Volume, grads: &[SliceGradient], low: f64, high: f64) -> EdgeVolume {
    let s = vol.shape();
    let slices: Vec<Vec<bool>> = grads
        .par_iter()
        .enumerate()
        .map(|(z, g)| {
            if is_z_border(z, s.nz) {
                vec![false; s.slice_len()]
            } else {
                hysteresis(&g.thinned, s.nx, s.ny, low, high)
            }
        })
        .collect();
    let mask: Vec<bool> = slices.into_iter().flatten().collect();
    EdgeVolume::from_mask(s, vol.voxel_pitch(), &mask).expect("mask matches shape")
}

fn hysteresis(thinned: &[f64], nx: usize, ny: usize, low: f64, high: f64) -> Vec<bool> {
    let mut edge = vec![false; thinned.len()];
    let weak = |i: usize| thinned[i] > 0.0 && thinned[i] >= low;
    let mut stack = Vec::new();
    for i in 0..thinned.len() {
        if edge[i] || !(thinned[i] > 0.0 && thinned[i] >= high) {
            continue;
        }
        edge[i] = true;
        stack.push(i);
        while let Some(j) = stack.pop() {
            let (x, y) = ((j % nx) as i64, (j / nx) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (xx, yy) = (x + dx, y + dy);
                    if xx < 1 || yy < 1 || xx >= nx as i64 - 1 || yy >= ny as i64 - 1 {
                        continue;
                    }
                    let k = yy as usize * nx + xx as usize;
                    if !edge[k] && weak(k) {
                        edge[k] = true;
                        stack.push(k);
                    }
                }
            }
        }
    }
    edge
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Shape3;
    use imageproc::image::{GrayImage, Luma};

    fn square_volume(n: usize, side: usize, nz: usize) -> Volume {
        let start = (n - side) / 2;
        let mut v = Volume::zeros(Shape3::new(n, n, nz), 1.0);
        for z in 0..nz {
            for y in start..start + side {
                for x in start..start + side {
                    v.set(x, y, z, 1.0);
                }
            }
        }
        v
    }

    #[test]
    fn constant_volume_has_no_edges() {
        let v = Volume::filled(Shape3::new(16, 16, 4), 1.0, 3.5);
        assert_eq!(CannyParams::default().detect(&v).unwrap().count(), 0);
        assert_eq!(canny_edges(&v, 1.0, 0.1, 0.2).unwrap().count(), 0);
    }

    #[test]
    fn invalid_thresholds_are_rejected() {
        let v = Volume::zeros(Shape3::new(8, 8, 1), 1.0);
        assert!(canny_edges(&v, 1.0, 0.5, 0.2).is_err());
        assert!(canny_edges(&v, 1.0, 0.0, 0.2).is_err());
        assert!(canny_edges(&v, 0.0, 0.1, 0.2).is_err());
        assert!(canny_edges_quantile(&v, 1.0, 0.9, 0.8).is_err());
        assert!(canny_edges_quantile(&v, 1.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn weak_ramp_is_rejected() {
        // slope 0.01 per pixel gives a Sobel magnitude of 0.08 in the interior
        let s = Shape3::new(20, 20, 3);
        let v = Volume::from_fn(s, 1.0, |p| 0.01 * p[0]);
        let e = canny_edges(&v, 1.0, 0.5, 1.0).unwrap();
        assert_eq!(e.count(), 0);
    }

    #[test]
    fn square_gives_one_pixel_ring() {
        let (n, side) = (32, 16);
        let v = square_volume(n, side, 3);
        let e = CannyParams::default().detect(&v).unwrap();
        let expected = 4.0 * (side as f64 - 1.0);
        let count = e.slice_count(1) as f64;
        assert!((count - expected).abs() <= 0.2 * expected, "{count} vs {expected}");
        // border slices are cleared
        assert_eq!(e.slice_count(0), 0);
        assert_eq!(e.slice_count(2), 0);
        // every edge pixel lies within one pixel of the square boundary
        let start = (n - side) as i64 / 2;
        let end = start + side as i64 - 1;
        for y in 0..n {
            for x in 0..n {
                if e.is_edge(x, y, 1) {
                    let (x, y) = (x as i64, y as i64);
                    let dx = (x - start).abs().min((x - end).abs());
                    let dy = (y - start).abs().min((y - end).abs());
                    let inside = x >= start - 1 && x <= end + 1 && y >= start - 1 && y <= end + 1;
                    assert!(inside && (dx <= 1 || dy <= 1), "stray edge at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn square_matches_reference_implementation() {
        let (n, side) = (32, 16);
        let v = square_volume(n, side, 3);
        let ours = CannyParams::default().detect(&v).unwrap();
        let ours: Vec<(i64, i64)> = (0..n)
            .flat_map(|y| (0..n).map(move |x| (x, y)))
            .filter(|&(x, y)| ours.is_edge(x, y, 1))
            .map(|(x, y)| (x as i64, y as i64))
            .collect();

        let start = (n - side) as u32 / 2;
        let img = GrayImage::from_fn(n as u32, n as u32, |x, y| {
            let inside = (start..start + side as u32).contains(&x) && (start..start + side as u32).contains(&y);
            Luma([if inside { 255 } else { 0 }])
        });
        // the reference keeps both pixels of a tied pair across a step edge,
        // so compare locations rather than counts
        let reference = imageproc::edges::canny(&img, 50.0, 100.0);
        let theirs: Vec<(i64, i64)> = reference
            .enumerate_pixels()
            .filter(|(_, _, p)| p.0[0] > 0)
            .map(|(x, y, _)| (x as i64, y as i64))
            .collect();
        assert!(!theirs.is_empty());
        assert_eq!(ours.len(), 4 * (side - 1));
        let near = |a: (i64, i64), set: &[(i64, i64)]| set.iter().any(|b| (a.0 - b.0).abs() <= 1 && (a.1 - b.1).abs() <= 1);
        assert!(ours.iter().all(|&p| near(p, &theirs)));
        assert!(theirs.iter().all(|&p| near(p, &ours)));
    }

    #[test]
    fn quantile_thresholds_ignore_affine_rescaling() {
        let v = square_volume(24, 10, 4);
        let p = CannyParams::default();
        let a = p.detect(&v).unwrap();
        let rescale = |v: &Volume, k: f64, c: f64| {
            Volume::from_vec(v.shape(), 1.0, v.data().iter().map(|x| k * x + c).collect()).unwrap()
        };
        // power-of-two gains are exact in floating point
        assert_eq!(a, p.detect(&rescale(&v, 8.0, 2.0)).unwrap());

        let blob = Volume::from_fn(Shape3::new(32, 32, 4), 1.0, |q| {
            let r = (q[0] * q[0] + 0.6 * q[1] * q[1]).sqrt() + 0.3 * q[0];
            if r < 9.0 { 1.0 + 0.02 * q[1] } else { 0.1 * (q[0] * 0.2).sin() }
        });
        let b = p.detect(&blob).unwrap();
        let c = p.detect(&rescale(&blob, 7.3, -4.1)).unwrap();
        let differ = b.as_volume().data().iter().zip(c.as_volume().data()).filter(|(x, y)| x != y).count();
        assert!(b.count() > 50);
        assert!(differ * 100 <= b.count(), "{differ} of {}", b.count());
    }

    #[test]
    fn edges_follow_integer_translation() {
        let n = 32;
        let mut a = Volume::zeros(Shape3::new(n, n, 3), 1.0);
        let mut b = a.clone();
        for z in 0..3 {
            for y in 10..20 {
                for x in 8..18 {
                    a.set(x, y, z, 1.0);
                    b.set(x + 3, y + 2, z, 1.0);
                }
            }
        }
        let ea = canny_edges(&a, 1.0, 0.5, 1.0).unwrap();
        let eb = canny_edges(&b, 1.0, 0.5, 1.0).unwrap();
        assert!(ea.count() > 0);
        for y in 0..n - 2 {
            for x in 0..n - 3 {
                assert_eq!(ea.is_edge(x, y, 1), eb.is_edge(x + 3, y + 2, 1));
            }
        }
    }

    #[test]
    fn kernel_is_normalised() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
