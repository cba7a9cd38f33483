//! Ray-driven cone-beam forward projector and its exact transpose.
//!
//! Every detector pixel defines a ray from the source through the pixel
//! centre. The ray is sampled at a fixed step of half a voxel and each sample
//! reads the volume by trilinear interpolation (voxels outside the grid read
//! as zero). Samples are weighted by the step length in millimetres, so a
//! projection approximates the continuous line integral.
//!
//! Backprojection scatters the very same interpolation weights, which makes
//! [`back_project`] the matrix transpose of [`forward_project`] up to
//! floating-point rounding.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::ConeBeamGeometry;
use crate::volume::{Projection, Shape3, Volume};

/// Sample spacing along a ray, in voxels.
const STEP: f64 = 0.5;

/// Backprojection splits the detector into this many row blocks, each
/// accumulated privately and summed in block order. Fixed so results do not
/// depend on the thread count.
const BP_BLOCKS: usize = 4;

#[derive(Debug, Clone, Copy)]
struct Ray {
    origin: [f64; 3],
    dir: [f64; 3],
    t0: f64,
    samples: usize,
}

/// Per-angle ray setup, expressed in continuous voxel-index coordinates.
struct RayCaster {
    shape: Shape3,
    src: [f64; 3],
    pixel0: [f64; 3],
    du: [f64; 3],
    dv: [f64; 3],
    rows: usize,
    cols: usize,
    weight: f64,
}

impl RayCaster {
    fn new(geom: &ConeBeamGeometry, angle: f64) -> Self {
        let shape = geom.vol_shape();
        let vp = geom.voxel_pitch();
        let (s, c) = angle.to_radians().sin_cos();
        // object frame = lab frame rotated by −θ
        let rot = |x: f64, y: f64| [x * c + y * s, -x * s + y * c];

        let src_xy = rot(0.0, -geom.sod());
        let det_xy = rot(0.0, geom.sdd() - geom.sod());
        let u_xy = rot(1.0, 0.0);

        let offs = [
            (shape.nx as f64 - 1.0) * 0.5,
            (shape.ny as f64 - 1.0) * 0.5,
            (shape.nz as f64 - 1.0) * 0.5,
        ];
        let to_index = |p: [f64; 3]| [p[0] / vp + offs[0], p[1] / vp + offs[1], p[2] / vp + offs[2]];

        let rows = geom.det_rows();
        let cols = geom.det_cols();
        let dp = geom.det_pitch();
        let u0 = -(cols as f64 - 1.0) * 0.5 * dp;
        let v0 = -(rows as f64 - 1.0) * 0.5 * dp;
        let pixel0 = [det_xy[0] + u0 * u_xy[0], det_xy[1] + u0 * u_xy[1], v0];

        RayCaster {
            shape,
            src: to_index([src_xy[0], src_xy[1], 0.0]),
            pixel0: to_index(pixel0),
            du: [u_xy[0] * dp / vp, u_xy[1] * dp / vp, 0.0],
            dv: [0.0, 0.0, dp / vp],
            rows,
            cols,
            weight: STEP * vp,
        }
    }

    fn ray(&self, row: usize, col: usize) -> Option<Ray> {
        let (r, c) = (row as f64, col as f64);
        let target = [
            self.pixel0[0] + c * self.du[0] + r * self.dv[0],
            self.pixel0[1] + c * self.du[1] + r * self.dv[1],
            self.pixel0[2] + c * self.du[2] + r * self.dv[2],
        ];
        let d = [target[0] - self.src[0], target[1] - self.src[1], target[2] - self.src[2]];
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let dir = [d[0] / len, d[1] / len, d[2] / len];

        // interpolation support: samples strictly inside (−1, n) touch the grid
        let hi = [self.shape.nx as f64, self.shape.ny as f64, self.shape.nz as f64];
        let (t_in, t_out) = slab(self.src, dir, [-1.0; 3], hi)?;
        let samples = ((t_out - t_in) / STEP).ceil() as usize;
        Some(Ray {
            origin: self.src,
            dir,
            t0: t_in,
            samples,
        })
    }

    /// Sample indices of `ray` that can touch voxels inside the inclusive index
    /// box `[lo, hi]`. Samples outside the returned range contribute exactly 0.
    fn clip(&self, ray: &Ray, lo: [usize; 3], hi: [usize; 3]) -> Range<usize> {
        let lo_f = [lo[0] as f64 - 1.0, lo[1] as f64 - 1.0, lo[2] as f64 - 1.0];
        let hi_f = [hi[0] as f64 + 1.0, hi[1] as f64 + 1.0, hi[2] as f64 + 1.0];
        match slab(ray.origin, ray.dir, lo_f, hi_f) {
            None => 0..0,
            Some((a, b)) => {
                let first = ((a - ray.t0) / STEP - 0.5).floor().max(0.0) as usize;
                let last = (((b - ray.t0) / STEP - 0.5).ceil() + 1.0).max(0.0) as usize;
                first.min(ray.samples)..last.min(ray.samples)
            }
        }
    }

    /// Calls `f(voxel_index, weight)` for every trilinear corner touched by the
    /// samples in `range`. Weights exclude the step length.
    #[inline(always)]
    fn visit<F: FnMut(usize, f64)>(&self, ray: &Ray, range: Range<usize>, mut f: F) {
        let Shape3 { nx, ny, nz } = self.shape;
        let sy = nx;
        let sz = nx * ny;
        for k in range {
            let t = ray.t0 + (k as f64 + 0.5) * STEP;
            let fx = ray.origin[0] + t * ray.dir[0];
            let fy = ray.origin[1] + t * ray.dir[1];
            let fz = ray.origin[2] + t * ray.dir[2];
            let (x0, y0, z0) = (fx.floor(), fy.floor(), fz.floor());
            let (bx, by, bz) = (fx - x0, fy - y0, fz - z0);
            let (ax, ay, az) = (1.0 - bx, 1.0 - by, 1.0 - bz);
            let (ix, iy, iz) = (x0 as isize, y0 as isize, z0 as isize);

            if ix >= 0
                && iy >= 0
                && iz >= 0
                && (ix as usize) + 1 < nx
                && (iy as usize) + 1 < ny
                && (iz as usize) + 1 < nz
            {
                let base = (iz as usize) * sz + (iy as usize) * sy + ix as usize;
                let (ayz, byz) = (ay * az, by * az);
                let (aybz, bybz) = (ay * bz, by * bz);
                f(base, ax * ayz);
                f(base + 1, bx * ayz);
                f(base + sy, ax * byz);
                f(base + sy + 1, bx * byz);
                f(base + sz, ax * aybz);
                f(base + sz + 1, bx * aybz);
                f(base + sz + sy, ax * bybz);
                f(base + sz + sy + 1, bx * bybz);
            } else {
                for (dz, wz) in [(0, az), (1, bz)] {
                    let z = iz + dz;
                    if z < 0 || z as usize >= nz {
                        continue;
                    }
                    for (dy, wy) in [(0, ay), (1, by)] {
                        let y = iy + dy;
                        if y < 0 || y as usize >= ny {
                            continue;
                        }
                        for (dx, wx) in [(0, ax), (1, bx)] {
                            let x = ix + dx;
                            if x < 0 || x as usize >= nx {
                                continue;
                            }
                            f(z as usize * sz + y as usize * sy + x as usize, wx * wy * wz);
                        }
                    }
                }
            }
        }
    }
}

/// Ray/box intersection. Returns the parameter interval of `origin + t·dir`
/// inside the open box, or `None` when the ray misses it.
fn slab(origin: [f64; 3], dir: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
    let mut t_in = f64::NEG_INFINITY;
    let mut t_out = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] <= lo[a] || origin[a] >= hi[a] {
                return None;
            }
        } else {
            let t1 = (lo[a] - origin[a]) / dir[a];
            let t2 = (hi[a] - origin[a]) / dir[a];
            t_in = t_in.max(t1.min(t2));
            t_out = t_out.min(t1.max(t2));
        }
    }
    let t_in = t_in.max(0.0);
    (t_out > t_in).then_some((t_in, t_out))
}

fn check_volume(vol: &Volume, geom: &ConeBeamGeometry) -> Result<()> {
    vol.check_shape(geom.vol_shape())?;
    let (a, b) = (vol.voxel_pitch(), geom.voxel_pitch());
    if (a - b).abs() > 1e-9 * b {
        return Err(Error::shape(format!("voxel pitch {b}"), format!("voxel pitch {a}")));
    }
    Ok(())
}

/// Line integrals of `vol` for every detector pixel at view `angle` (degrees).
pub fn forward_project(vol: &Volume, geom: &ConeBeamGeometry, angle: f64) -> Result<Projection> {
    let mut out = vec![0.0; geom.det_len()];
    forward_project_into(vol, geom, angle, &mut out)?;
    Projection::from_vec(geom.det_rows(), geom.det_cols(), angle, out)
}

/// [`forward_project`] writing into a caller buffer of `det_rows · det_cols`.
pub fn forward_project_into(
    vol: &Volume,
    geom: &ConeBeamGeometry,
    angle: f64,
    out: &mut [f64],
) -> Result<()> {
    check_volume(vol, geom)?;
    if out.len() != geom.det_len() {
        return Err(Error::shape(geom.det_len(), out.len()));
    }
    let Some((lo, hi)) = vol.support_bounds() else {
        out.fill(0.0);
        return Ok(());
    };
    let caster = RayCaster::new(geom, angle);
    let data = vol.data();
    out.par_chunks_mut(caster.cols)
        .enumerate()
        .for_each(|(row, line)| {
            for (col, px) in line.iter_mut().enumerate() {
                *px = match caster.ray(row, col) {
                    None => 0.0,
                    Some(ray) => {
                        let range = caster.clip(&ray, lo, hi);
                        let mut acc = 0.0;
                        caster.visit(&ray, range, |i, w| acc += data[i] * w);
                        acc * caster.weight
                    }
                };
            }
        });
    Ok(())
}

/// Unfiltered backprojection: the transpose of [`forward_project`] at the
/// projection's angle.
pub fn back_project(proj: &Projection, geom: &ConeBeamGeometry) -> Result<Volume> {
    let mut out = vec![0.0; geom.vol_shape().len()];
    back_project_add(proj.data(), geom, proj.angle(), &mut out)?;
    Volume::from_vec(geom.vol_shape(), geom.voxel_pitch(), out)
}

/// Adds `Aᵀ_θ · values` into `acc`.
pub fn back_project_add(
    values: &[f64],
    geom: &ConeBeamGeometry,
    angle: f64,
    acc: &mut [f64],
) -> Result<()> {
    if values.len() != geom.det_len() {
        return Err(Error::shape(
            format!("{}x{} detector", geom.det_rows(), geom.det_cols()),
            format!("{} values", values.len()),
        ));
    }
    let n = geom.vol_shape().len();
    if acc.len() != n {
        return Err(Error::shape(n, acc.len()));
    }
    let caster = RayCaster::new(geom, angle);
    let rows = caster.rows;
    let cols = caster.cols;
    let per_block = rows.div_ceil(BP_BLOCKS);

    let blocks: Vec<Vec<f64>> = (0..BP_BLOCKS)
        .into_par_iter()
        .map(|b| {
            let mut local = vec![0.0; n];
            for row in (b * per_block)..((b + 1) * per_block).min(rows) {
                for col in 0..cols {
                    let value = values[row * cols + col];
                    if value == 0.0 {
                        continue;
                    }
                    if let Some(ray) = caster.ray(row, col) {
                        let v = value * caster.weight;
                        caster.visit(&ray, 0..ray.samples, |i, w| local[i] += w * v);
                    }
                }
            }
            local
        })
        .collect();

    acc.par_chunks_mut(4096).enumerate().for_each(|(c, chunk)| {
        let start = c * 4096;
        for (j, a) in chunk.iter_mut().enumerate() {
            let i = start + j;
            let mut s = 0.0;
            for block in &blocks {
                s += block[i];
            }
            *a += s;
        }
    });
    Ok(())
}
