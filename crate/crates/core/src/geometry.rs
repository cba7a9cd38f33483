//! Circular-trajectory cone-beam geometry.
//!
//! Conventions used everywhere in the crate:
//!
//! - The rotation axis is the volume z axis; the source lies in the z = 0 plane.
//! - Angles are in degrees. A view at angle θ is the object rotated by +θ about
//!   z while source and detector stay fixed. In the object frame this is the
//!   source/detector pair rotated by −θ.
//! - At θ = 0 the source sits at (0, −SOD, 0) and the flat detector is centred
//!   at (0, SDD − SOD, 0) with its column axis along +x and its row axis along +z.
//! - Voxel (ix, iy, iz) has its centre at `(i − (n − 1)/2) · voxel_pitch` on each
//!   axis, so the volume is centred on the rotation axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Shape3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryParams {
    pub source_object_dist: f64,
    pub source_detector_dist: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    pub det_pitch: f64,
    pub vol_shape: [usize; 3],
    pub voxel_pitch: f64,
}

/// A validated scan geometry. Every voxel centre projects onto the detector at
/// every rotation angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeBeamGeometry {
    params: GeometryParams,
}

pub fn make_geometry(params: GeometryParams) -> Result<ConeBeamGeometry> {
    ConeBeamGeometry::new(params)
}

impl ConeBeamGeometry {
    pub fn new(params: GeometryParams) -> Result<Self> {
        let GeometryParams {
            source_object_dist: sod,
            source_detector_dist: sdd,
            det_rows,
            det_cols,
            det_pitch,
            vol_shape,
            voxel_pitch,
        } = params;

        for (name, v) in [
            ("source_object_dist", sod),
            ("source_detector_dist", sdd),
            ("det_pitch", det_pitch),
            ("voxel_pitch", voxel_pitch),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Geometry(format!("{name} must be positive, got {v}")));
            }
        }
        if det_rows == 0 || det_cols == 0 || vol_shape.contains(&0) {
            return Err(Error::Geometry("detector and volume sizes must be non-zero".into()));
        }
        if sdd <= sod {
            return Err(Error::Geometry(format!(
                "source_detector_dist ({sdd}) must exceed source_object_dist ({sod})"
            )));
        }

        let geom = ConeBeamGeometry { params };
        let (u_max, v_max) = geom.max_projected_extent()?;
        let (u_half, v_half) = geom.detector_half_extent();
        if u_max > u_half || v_max > v_half {
            return Err(Error::Geometry(format!(
                "volume is truncated: projected half-extent ({u_max:.3}, {v_max:.3}) mm \
                 exceeds detector half-extent ({u_half:.3}, {v_half:.3}) mm"
            )));
        }
        Ok(geom)
    }

    /// Largest detector coordinates (|u|, |v|) reached by any voxel centre over
    /// a full rotation.
    ///
    /// Voxel centres sweep a cylinder of radius `r` (the in-plane half-diagonal).
    /// A point at radius `r` reaches `|u| = SDD·r / sqrt(SOD² − r²)` where its
    /// projection line is tangent to the circle, and the top corners reach
    /// `|v| = SDD·h / (SOD − r)` when closest to the source.
    fn max_projected_extent(&self) -> Result<(f64, f64)> {
        let p = &self.params;
        let half = |n: usize| (n as f64 - 1.0) * 0.5 * p.voxel_pitch;
        let r = half(p.vol_shape[0]).hypot(half(p.vol_shape[1]));
        let h = half(p.vol_shape[2]);
        let sod = p.source_object_dist;
        if r >= sod {
            return Err(Error::Geometry(format!(
                "volume half-diagonal {r:.3} mm reaches the source (SOD {sod} mm)"
            )));
        }
        let sdd = p.source_detector_dist;
        Ok((sdd * r / (sod * sod - r * r).sqrt(), sdd * h / (sod - r)))
    }

    pub fn detector_half_extent(&self) -> (f64, f64) {
        let p = &self.params;
        (
            p.det_cols as f64 * p.det_pitch * 0.5,
            p.det_rows as f64 * p.det_pitch * 0.5,
        )
    }

    pub fn params(&self) -> &GeometryParams {
        &self.params
    }

    pub fn magnification(&self) -> f64 {
        self.params.source_detector_dist / self.params.source_object_dist
    }

    pub fn sod(&self) -> f64 {
        self.params.source_object_dist
    }

    pub fn sdd(&self) -> f64 {
        self.params.source_detector_dist
    }

    pub fn det_rows(&self) -> usize {
        self.params.det_rows
    }

    pub fn det_cols(&self) -> usize {
        self.params.det_cols
    }

    pub fn det_pitch(&self) -> f64 {
        self.params.det_pitch
    }

    pub fn voxel_pitch(&self) -> f64 {
        self.params.voxel_pitch
    }

    pub fn vol_shape(&self) -> Shape3 {
        let [nx, ny, nz] = self.params.vol_shape;
        Shape3::new(nx, ny, nz)
    }

    pub fn det_len(&self) -> usize {
        self.params.det_rows * self.params.det_cols
    }

    /// Same geometry with source and detector distances multiplied by `factor`.
    /// Large factors approach the parallel-beam limit.
    pub fn with_distance_scale(&self, factor: f64) -> Result<Self> {
        let mut params = self.params;
        params.source_object_dist *= factor;
        params.source_detector_dist *= factor;
        // keep the magnified footprint on the same detector
        Self::new(params)
    }

    /// Detector (row, col) coordinates, in pixel units, of a point given in
    /// object-frame millimetres at view `angle`.
    pub fn project_point(&self, point: [f64; 3], angle: f64) -> (f64, f64) {
        let (s, c) = angle.to_radians().sin_cos();
        // rotate the object by +θ into the lab frame
        let lx = point[0] * c - point[1] * s;
        let ly = point[0] * s + point[1] * c;
        let depth = ly + self.sod();
        let scale = self.sdd() / depth;
        let u = lx * scale;
        let v = point[2] * scale;
        let p = &self.params;
        (
            v / p.det_pitch + (p.det_rows as f64 - 1.0) * 0.5,
            u / p.det_pitch + (p.det_cols as f64 - 1.0) * 0.5,
        )
    }
}

/// Ordered set of candidate view angles in degrees, each in [0, 360).
#[derive(Debug, Clone, PartialEq)]
pub struct AngleGrid {
    angles: Vec<f64>,
}

/// `count` angles uniformly spaced over [0, 360).
pub fn candidate_angles(count: usize) -> Result<AngleGrid> {
    if count < 2 {
        return Err(Error::invalid(format!("angle grid needs at least 2 angles, got {count}")));
    }
    let spacing = 360.0 / count as f64;
    Ok(AngleGrid {
        angles: (0..count).map(|k| k as f64 * spacing).collect(),
    })
}

impl AngleGrid {
    pub fn from_angles(angles: Vec<f64>) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::invalid("angle grid is empty"));
        }
        if let Some(a) = angles.iter().find(|a| !(a.is_finite() && (0.0..360.0).contains(*a))) {
            return Err(Error::invalid(format!("angle {a} outside [0, 360)")));
        }
        if angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("angles must be strictly increasing"));
        }
        Ok(AngleGrid { angles })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn angle(&self, index: usize) -> f64 {
        self.angles[index]
    }

    /// Index of the grid angle closest to `angle` (circular distance).
    pub fn nearest_index(&self, angle: f64) -> usize {
        let target = angle.rem_euclid(360.0);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &a) in self.angles.iter().enumerate() {
            let d = (a - target).abs();
            let d = d.min(360.0 - d);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(sod: f64, sdd: f64) -> GeometryParams {
        GeometryParams {
            source_object_dist: sod,
            source_detector_dist: sdd,
            det_rows: 64,
            det_cols: 64,
            det_pitch: 3.0,
            vol_shape: [32, 32, 32],
            voxel_pitch: 1.0,
        }
    }

    #[test]
    fn magnification_is_sdd_over_sod() {
        let g = make_geometry(params(400.0, 800.0)).unwrap();
        assert_eq!(g.magnification(), 2.0);
    }

    #[test]
    fn rejects_detector_closer_than_axis() {
        assert!(matches!(make_geometry(params(400.0, 300.0)), Err(Error::Geometry(_))));
        assert!(make_geometry(params(400.0, 400.0)).is_err());
    }

    #[test]
    fn rejects_non_positive_lengths() {
        assert!(make_geometry(params(-1.0, 300.0)).is_err());
        let mut p = params(400.0, 800.0);
        p.det_pitch = 0.0;
        assert!(make_geometry(p).is_err());
    }

    #[test]
    fn rejects_truncated_volume() {
        let mut p = params(400.0, 800.0);
        p.det_cols = 8;
        assert!(make_geometry(p).is_err());
        // volume swallowing the source
        let mut p = params(20.0, 800.0);
        p.det_cols = 4096;
        p.det_rows = 4096;
        assert!(make_geometry(p).is_err());
    }

    #[test]
    fn footprint_rule_for_large_scan() {
        // 200³ at 0.5 mm: the face-on footprint is 200 mm, but at 45° the
        // corners sweep out to ~143 mm off-axis, so a 256 mm panel truncates.
        let p = GeometryParams {
            source_object_dist: 400.0,
            source_detector_dist: 800.0,
            det_rows: 256,
            det_cols: 256,
            det_pitch: 1.0,
            vol_shape: [200, 200, 200],
            voxel_pitch: 0.5,
        };
        assert!(make_geometry(p).is_err());
        let p = GeometryParams { det_cols: 288, ..p };
        let g = make_geometry(p).unwrap();
        assert_eq!(g.magnification(), 2.0);
    }

    #[test]
    fn accepted_geometry_keeps_every_voxel_on_detector() {
        let g = make_geometry(GeometryParams {
            source_object_dist: 60.0,
            source_detector_dist: 120.0,
            det_rows: 36,
            det_cols: 40,
            det_pitch: 2.0,
            vol_shape: [12, 10, 8],
            voxel_pitch: 1.5,
        })
        .unwrap();
        let grid = candidate_angles(72).unwrap();
        let s = g.vol_shape();
        let vp = g.voxel_pitch();
        for &a in grid.angles() {
            for iz in 0..s.nz {
                for iy in 0..s.ny {
                    for ix in 0..s.nx {
                        let p = [
                            (ix as f64 - (s.nx as f64 - 1.0) / 2.0) * vp,
                            (iy as f64 - (s.ny as f64 - 1.0) / 2.0) * vp,
                            (iz as f64 - (s.nz as f64 - 1.0) / 2.0) * vp,
                        ];
                        let (r, c) = g.project_point(p, a);
                        assert!(r >= -0.5 && r <= g.det_rows() as f64 - 0.5, "row {r} at {a}");
                        assert!(c >= -0.5 && c <= g.det_cols() as f64 - 0.5, "col {c} at {a}");
                    }
                }
            }
        }
    }

    #[test]
    fn candidate_grid_is_uniform() {
        let g = candidate_angles(4).unwrap();
        assert_eq!(g.angles(), &[0.0, 90.0, 180.0, 270.0]);
        let g = candidate_angles(200).unwrap();
        let spacing = g.angle(1) - g.angle(0);
        assert!((spacing - 1.8).abs() < 1e-12);
        assert!((spacing * 200.0 - 360.0).abs() < 1e-9);
        assert!(g.angles().windows(2).all(|w| w[1] > w[0]));
        assert!(candidate_angles(1).is_err());
        assert!(candidate_angles(0).is_err());
    }

    #[test]
    fn from_angles_validates() {
        assert!(AngleGrid::from_angles(vec![0.0, 10.0, 10.0]).is_err());
        assert!(AngleGrid::from_angles(vec![0.0, 360.0]).is_err());
        assert!(AngleGrid::from_angles(vec![5.0, 1.0]).is_err());
        assert!(AngleGrid::from_angles(vec![1.0, 5.0]).is_ok());
    }

    #[test]
    fn nearest_index_wraps() {
        let g = candidate_angles(4).unwrap();
        assert_eq!(g.nearest_index(359.0), 0);
        assert_eq!(g.nearest_index(100.0), 1);
    }
}
