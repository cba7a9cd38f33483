use std::fmt;

use crate::error::{Error, Result};

/// Volume dimensions. Data is stored x-fastest: `index = (z·ny + y)·nx + x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Shape3 {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Shape3 { nx, ny, nz }
    }

    pub const fn cubic(n: usize) -> Self {
        Shape3 { nx: n, ny: n, nz: n }
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    /// Physical coordinate (mm) of a voxel centre along an axis of length `n`.
    #[inline]
    pub fn centre(i: usize, n: usize, pitch: f64) -> f64 {
        (i as f64 - (n as f64 - 1.0) * 0.5) * pitch
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// 3D grid of attenuation coefficients (mm⁻¹).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: Shape3,
    voxel_pitch: f64,
    data: Vec<f64>,
}

impl Volume {
    pub fn zeros(shape: Shape3, voxel_pitch: f64) -> Self {
        Volume {
            shape,
            voxel_pitch,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape3, voxel_pitch: f64, value: f64) -> Self {
        Volume {
            shape,
            voxel_pitch,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape3, voxel_pitch: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(shape.len(), data.len()));
        }
        if !(voxel_pitch.is_finite() && voxel_pitch > 0.0) {
            return Err(Error::invalid(format!("voxel pitch must be positive, got {voxel_pitch}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("volume contains non-finite values"));
        }
        Ok(Volume {
            shape,
            voxel_pitch,
            data,
        })
    }

    /// Builds a volume by evaluating `f` at every voxel centre (mm coordinates).
    pub fn from_fn(shape: Shape3, voxel_pitch: f64, mut f: impl FnMut([f64; 3]) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for z in 0..shape.nz {
            let pz = Shape3::centre(z, shape.nz, voxel_pitch);
            for y in 0..shape.ny {
                let py = Shape3::centre(y, shape.ny, voxel_pitch);
                for x in 0..shape.nx {
                    data.push(f([Shape3::centre(x, shape.nx, voxel_pitch), py, pz]));
                }
            }
        }
        Volume {
            shape,
            voxel_pitch,
            data,
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn voxel_pitch(&self) -> f64 {
        self.voxel_pitch
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.shape.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f64) {
        let i = self.shape.index(x, y, z);
        self.data[i] = value;
    }

    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.shape.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn scaled(&self, factor: f64) -> Volume {
        Volume {
            shape: self.shape,
            voxel_pitch: self.voxel_pitch,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    pub(crate) fn check_shape(&self, shape: Shape3) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(shape, self.shape));
        }
        Ok(())
    }

    /// Inclusive index bounds `[lo, hi]` per axis of the non-zero voxels, or
    /// `None` for an all-zero volume.
    pub fn support_bounds(&self) -> Option<([usize; 3], [usize; 3])> {
        let s = self.shape;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for z in 0..s.nz {
            for y in 0..s.ny {
                let row = &self.data[s.index(0, y, z)..s.index(0, y, z) + s.nx];
                let first = row.iter().position(|&v| v != 0.0);
                if let Some(first) = first {
                    let last = row.iter().rposition(|&v| v != 0.0).unwrap_or(first);
                    any = true;
                    lo[0] = lo[0].min(first);
                    hi[0] = hi[0].max(last);
                    lo[1] = lo[1].min(y);
                    hi[1] = hi[1].max(y);
                    lo[2] = lo[2].min(z);
                    hi[2] = hi[2].max(z);
                }
            }
        }
        any.then_some((lo, hi))
    }
}

/// One detector image of post-log line integrals, `rows × cols`, row-major,
/// rows along +z and columns along the detector u axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    rows: usize,
    cols: usize,
    angle: f64,
    data: Vec<f64>,
}

impl Projection {
    pub fn zeros(rows: usize, cols: usize, angle: f64) -> Self {
        Projection {
            rows,
            cols,
            angle,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, angle: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{rows}x{cols}"), format!("{} values", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("projection contains non-finite values"));
        }
        Ok(Projection {
            rows,
            cols,
            angle,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Projection {
        Projection {
            rows: self.rows,
            cols: self.cols,
            angle: self.angle,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Binary edge map with the same layout as the volume it was computed from.
/// Values are exactly 0.0 or 1.0 so it can be projected like any volume.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeVolume {
    inner: Volume,
}

impl EdgeVolume {
    pub fn from_mask(shape: Shape3, voxel_pitch: f64, mask: &[bool]) -> Result<Self> {
        if mask.len() != shape.len() {
            return Err(Error::shape(shape.len(), mask.len()));
        }
        let data = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Ok(EdgeVolume {
            inner: Volume::from_vec(shape, voxel_pitch, data)?,
        })
    }

    pub fn empty(shape: Shape3, voxel_pitch: f64) -> Self {
        EdgeVolume {
            inner: Volume::zeros(shape, voxel_pitch),
        }
    }

    pub fn as_volume(&self) -> &Volume {
        &self.inner
    }

    pub fn shape(&self) -> Shape3 {
        self.inner.shape()
    }

    pub fn is_edge(&self, x: usize, y: usize, z: usize) -> bool {
        self.inner.get(x, y, z) != 0.0
    }

    pub fn count(&self) -> usize {
        self.inner.data().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn slice_count(&self, z: usize) -> usize {
        self.inner.slice(z).iter().filter(|&&v| v != 0.0).count()
    }
}
