//! Shared fixtures for the criterion benchmarks.

use epvs_core::{make_geometry, ConeBeamGeometry, GeometryParams, Shape3, Volume};

/// Cubic volume of side `n` at 1 mm with a detector sized to avoid truncation.
pub fn bench_geometry(n: usize) -> ConeBeamGeometry {
    let det = n;
    make_geometry(GeometryParams {
        source_object_dist: 3.125 * n as f64,
        source_detector_dist: 6.25 * n as f64,
        det_rows: det,
        det_cols: det,
        det_pitch: 3.0,
        vol_shape: [n, n, n],
        voxel_pitch: 1.0,
    })
    .expect("benchmark geometry is valid")
}

/// Smooth blob phantom filling most of the volume.
pub fn blob(n: usize) -> Volume {
    let r = 0.35 * n as f64;
    Volume::from_fn(Shape3::cubic(n), 1.0, |p| {
        let d2 = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) / (r * r);
        (-d2).exp() * 0.02
    })
}
