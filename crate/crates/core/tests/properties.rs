use epvs_core::metrics::{nrmse, ssim_default};
use epvs_core::projector::forward_project;
use epvs_core::scoring::{dispersion_score, lambda_schedule, DispersionParams, DistanceMatrix};
use epvs_core::selection::{uniform_indices, wrap180};
use epvs_core::{make_geometry, ConeBeamGeometry, GeometryParams, Shape3, Volume};
use proptest::prelude::*;

fn small_geom() -> ConeBeamGeometry {
    make_geometry(GeometryParams {
        source_object_dist: 40.0,
        source_detector_dist: 80.0,
        det_rows: 16,
        det_cols: 16,
        det_pitch: 1.5,
        vol_shape: [6, 6, 6],
        voxel_pitch: 1.0,
    })
    .unwrap()
}

fn vol(values: Vec<f64>) -> Volume {
    Volume::from_vec(Shape3::cubic(6), 1.0, values).unwrap()
}

fn distances(n: usize, raw: &[f64]) -> DistanceMatrix {
    let mut values = vec![0.0; n * n];
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            values[i * n + j] = raw[k];
            values[j * n + i] = raw[k];
            k += 1;
        }
    }
    DistanceMatrix::from_values(n, values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projection_is_linear(
        a in proptest::collection::vec(-1.0f64..1.0, 216),
        b in proptest::collection::vec(-1.0f64..1.0, 216),
        s in -3.0f64..3.0,
        angle in 0.0f64..360.0,
    ) {
        let g = small_geom();
        let mix = vol(a.iter().zip(&b).map(|(x, y)| s * x + y).collect());
        let pa = forward_project(&vol(a), &g, angle).unwrap();
        let pb = forward_project(&vol(b), &g, angle).unwrap();
        let pm = forward_project(&mix, &g, angle).unwrap();
        for ((m, x), y) in pm.data().iter().zip(pa.data()).zip(pb.data()) {
            prop_assert!((m - (s * x + y)).abs() < 1e-9);
        }
    }

    #[test]
    fn nonnegative_volumes_project_nonnegative(
        a in proptest::collection::vec(0.0f64..1.0, 216),
        angle in 0.0f64..360.0,
    ) {
        let p = forward_project(&vol(a), &small_geom(), angle).unwrap();
        prop_assert!(p.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn dispersion_stays_in_unit_interval_and_decreases(
        raw in proptest::collection::vec(0.01f64..5.0, 28),
        gamma in 0.001f64..2.0,
        order in Just((1..8).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let dmat = distances(8, &raw);
        let p = DispersionParams::new(gamma, 1e-12).unwrap();
        let mut prev = dispersion_score(0, &[], &dmat, p).unwrap();
        prop_assert_eq!(prev, 1.0);
        for k in 1..order.len() {
            let d = dispersion_score(0, &order[..k], &dmat, p).unwrap();
            prop_assert!(d > 0.0 && d < prev);
            prev = d;
        }
    }

    #[test]
    fn lambda_is_a_clamped_decreasing_ramp(n_init in 0usize..20, extra in 1usize..40, n in 0usize..80) {
        let budget = n_init + extra;
        let l = lambda_schedule(n, n_init, budget).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
        prop_assert!(lambda_schedule(n + 1, n_init, budget).unwrap() <= l);
    }

    #[test]
    fn uniform_indices_are_unique_and_sorted(grid in 1usize..400, frac in 0.0f64..1.0) {
        let n = 1 + ((grid - 1) as f64 * frac) as usize;
        let idx = uniform_indices(grid, n).unwrap();
        prop_assert_eq!(idx.len(), n);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < grid));
    }

    #[test]
    fn wrap180_folds_opposite_views(d in -720.0f64..720.0) {
        let w = wrap180(d);
        prop_assert!((0.0..=90.0).contains(&w));
        prop_assert!((wrap180(-d) - w).abs() < 1e-9);
        prop_assert!((wrap180(d + 180.0) - w).abs() < 1e-9);
    }

    #[test]
    fn nrmse_of_a_scaled_reference(
        a in proptest::collection::vec(0.1f64..1.0, 216),
        c in 0.0f64..3.0,
    ) {
        let r = vol(a);
        let e = nrmse(&r.scaled(c), &r).unwrap();
        prop_assert!((e - (c - 1.0).abs()).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_bounded_and_maximal_on_the_reference(
        a in proptest::collection::vec(0.0f64..1.0, 128),
        b in proptest::collection::vec(0.0f64..1.0, 128),
    ) {
        let shape = Shape3::new(8, 8, 2);
        let x = Volume::from_vec(shape, 1.0, a).unwrap();
        let y = Volume::from_vec(shape, 1.0, b).unwrap();
        prop_assert!(ssim_default(&x, &y).unwrap() <= 1.0 + 1e-12);
        prop_assert!((ssim_default(&y, &y).unwrap() - 1.0).abs() < 1e-12);
    }
}
