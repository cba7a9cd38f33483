//! Synthetic scan data: CAD/ground-truth phantoms, polychromatic noisy
//! projections, and the polynomial linearization that undoes beam hardening.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ConeBeamGeometry;
use crate::projector::forward_project;
use crate::volume::{Projection, Shape3, Volume};

/// A placed primitive. Solids are painted in order; each one overwrites the
/// voxels whose centres it contains, so an attenuation of 0 drills a hole.
/// Coordinates are millimetres from the volume centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Solid {
    Box {
        center: [f64; 3],
        half_size: [f64; 3],
        /// rotation about z, degrees
        #[serde(default)]
        rotation: f64,
        attenuation: f64,
    },
    /// z-aligned cylinder
    Cylinder {
        center: [f64; 3],
        radius: f64,
        half_height: f64,
        attenuation: f64,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        attenuation: f64,
    },
}

impl Solid {
    fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Solid::Box {
                center,
                half_size,
                rotation,
                ..
            } => {
                let (s, c) = rotation.to_radians().sin_cos();
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                let lx = dx * c + dy * s;
                let ly = -dx * s + dy * c;
                lx.abs() <= half_size[0] && ly.abs() <= half_size[1] && (p[2] - center[2]).abs() <= half_size[2]
            }
            Solid::Cylinder {
                center,
                radius,
                half_height,
                ..
            } => {
                (p[0] - center[0]).hypot(p[1] - center[1]) <= radius && (p[2] - center[2]).abs() <= half_height
            }
            Solid::Sphere { center, radius, .. } => {
                let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= radius * radius
            }
        }
    }

    fn attenuation(&self) -> f64 {
        match *self {
            Solid::Box { attenuation, .. }
            | Solid::Cylinder { attenuation, .. }
            | Solid::Sphere { attenuation, .. } => attenuation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoreSpec {
    pub count: usize,
    /// radius range in voxels
    pub radius_min: f64,
    pub radius_max: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub vol_shape: Shape3,
    pub voxel_pitch: f64,
    pub solids: Vec<Solid>,
    pub pores: PoreSpec,
}

impl PhantomSpec {
    /// Machined-part default: a block rotated 20° about z with two drilled
    /// through-holes and a notch, 0.02 mm⁻¹, plus 20 pores of 1–3 voxels.
    pub fn default_part(vol_shape: Shape3, voxel_pitch: f64, seed: u64) -> Self {
        PhantomSpec {
            vol_shape,
            voxel_pitch,
            solids: default_solids(vol_shape, voxel_pitch),
            pores: PoreSpec {
                count: 20,
                radius_min: 1.0,
                radius_max: 3.0,
                seed,
            },
        }
    }
}

pub fn default_solids(shape: Shape3, voxel_pitch: f64) -> Vec<Solid> {
    let lx = shape.nx as f64 * voxel_pitch;
    let ly = shape.ny as f64 * voxel_pitch;
    let lz = shape.nz as f64 * voxel_pitch;
    let rotation = 20.0f64;
    let (s, c) = rotation.to_radians().sin_cos();
    let place = |u: f64, v: f64| [u * c - v * s, u * s + v * c, 0.0];
    let mu = 0.02;
    vec![
        Solid::Box {
            center: [0.0; 3],
            half_size: [0.30 * lx, 0.20 * ly, 0.32 * lz],
            rotation,
            attenuation: mu,
        },
        Solid::Cylinder {
            center: place(-0.14 * lx, 0.02 * ly),
            radius: 0.07 * lx,
            half_height: lz,
            attenuation: 0.0,
        },
        Solid::Cylinder {
            center: place(0.12 * lx, -0.05 * ly),
            radius: 0.045 * lx,
            half_height: lz,
            attenuation: 0.0,
        },
        Solid::Box {
            center: place(0.26 * lx, 0.16 * ly),
            half_size: [0.08 * lx, 0.08 * ly, lz],
            rotation,
            attenuation: 0.0,
        },
    ]
}

/// Builds the nominal (CAD) volume and the ground truth, which is the CAD
/// volume with spherical pores carved out of solid material.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume, Volume)> {
    let shape = spec.vol_shape;
    let vp = spec.voxel_pitch;
    if vp.is_nan() || vp <= 0.0 {
        return Err(Error::Phantom("voxel pitch must be positive".into()));
    }
    let cad = Volume::from_fn(shape, vp, |p| {
        spec.solids
            .iter()
            .fold(0.0, |acc, s| if s.contains(p) { s.attenuation() } else { acc })
    });
    let mut truth = cad.clone();
    let pores = &spec.pores;
    if pores.count == 0 {
        return Ok((cad, truth));
    }
    if !(pores.radius_min > 0.0 && pores.radius_min <= pores.radius_max) {
        return Err(Error::Phantom(format!(
            "pore radius range [{}, {}] is invalid",
            pores.radius_min, pores.radius_max
        )));
    }
    let Some((lo, hi)) = cad.support_bounds() else {
        return Err(Error::Phantom("part is empty; nowhere to place pores".into()));
    };

    let mut rng = ChaCha8Rng::seed_from_u64(pores.seed);
    let mut placed: Vec<([f64; 3], f64)> = Vec::new();
    const MAX_TRIES: usize = 10_000;
    for k in 0..pores.count {
        let mut ok = false;
        for _ in 0..MAX_TRIES {
            let c = [
                rng.gen_range(lo[0] as f64..=hi[0] as f64),
                rng.gen_range(lo[1] as f64..=hi[1] as f64),
                rng.gen_range(lo[2] as f64..=hi[2] as f64),
            ];
            let r = if pores.radius_max > pores.radius_min {
                rng.gen_range(pores.radius_min..=pores.radius_max)
            } else {
                pores.radius_min
            };
            let separated = placed
                .iter()
                .all(|(q, rq)| dist(c, *q) > r + rq + 1.0);
            if separated && inside_material(&cad, c, r + 1.0) {
                placed.push((c, r));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Phantom(format!(
                "could not place pore {} of {} after {MAX_TRIES} tries",
                k + 1,
                pores.count
            )));
        }
    }
    for (c, r) in &placed {
        for_ball(shape, *c, *r, |i| truth.data_mut()[i] = 0.0);
    }
    Ok((cad, truth))
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Visits voxels whose centre is within `r` voxels of `c` (index coordinates).
/// Returns false if the ball leaves the grid.
fn for_ball(shape: Shape3, c: [f64; 3], r: f64, mut f: impl FnMut(usize)) -> bool {
    let n = [shape.nx, shape.ny, shape.nz];
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let l = (c[a] - r).ceil();
        let h = (c[a] + r).floor();
        if l < 0.0 || h > (n[a] - 1) as f64 {
            return false;
        }
        lo[a] = l as usize;
        hi[a] = h as usize;
    }
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                if dist([x as f64, y as f64, z as f64], c) <= r {
                    f(shape.index(x, y, z));
                }
            }
        }
    }
    true
}

fn inside_material(cad: &Volume, c: [f64; 3], r: f64) -> bool {
    let mut all = true;
    let data = cad.data();
    let in_grid = for_ball(cad.shape(), c, r, |i| all &= data[i] > 0.0);
    in_grid && all
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBin {
    /// relative fluence
    pub weight: f64,
    /// attenuation at this energy relative to the nominal volume values
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumModel {
    pub bins: Vec<EnergyBin>,
    /// standard deviation of the additive Gaussian noise on post-log data
    pub noise_sigma: f64,
}

impl SpectrumModel {
    pub fn monochromatic() -> Self {
        SpectrumModel {
            bins: vec![EnergyBin { weight: 1.0, scale: 1.0 }],
            noise_sigma: 0.0,
        }
    }

    /// Two-bin default: weights {0.6, 0.4}, attenuation scales {1.0, 0.6}.
    pub fn two_bin(noise_sigma: f64) -> Self {
        SpectrumModel {
            bins: vec![
                EnergyBin { weight: 0.6, scale: 1.0 },
                EnergyBin { weight: 0.4, scale: 0.6 },
            ],
            noise_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins.is_empty() {
            return Err(Error::invalid("spectrum has no energy bins"));
        }
        if self.bins.iter().any(|b| !(b.weight > 0.0 && b.scale > 0.0 && b.weight.is_finite() && b.scale.is_finite())) {
            return Err(Error::invalid("spectrum weights and scales must be positive"));
        }
        let total: f64 = self.bins.iter().map(|b| b.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("spectrum weights sum to {total}, expected 1")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise sigma must be finite and >= 0"));
        }
        Ok(())
    }

    /// Post-log polychromatic response to a nominal line integral `ell`.
    pub fn response(&self, ell: f64) -> f64 {
        let t: f64 = self.bins.iter().map(|b| b.weight * (-b.scale * ell).exp()).sum();
        -t.ln()
    }
}

fn noise_rng(seed: u64, angle: f64) -> ChaCha8Rng {
    // splitmix-style mixing of the angle bits into the seed
    let mut z = seed ^ angle.to_bits().wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Polychromatic, noisy post-log projection of `truth`. The noise stream
/// depends only on `(seed, angle)`.
pub fn simulate_measurement(
    truth: &Volume,
    geom: &ConeBeamGeometry,
    angle: f64,
    spectrum: &SpectrumModel,
    seed: u64,
) -> Result<Projection> {
    spectrum.validate()?;
    let ideal = forward_project(truth, geom, angle)?;
    let mut out = ideal.map(|ell| spectrum.response(ell));
    if spectrum.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spectrum.noise_sigma).expect("sigma validated");
        let mut rng = noise_rng(seed, angle);
        for v in out.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

/// Polynomial `p ↦ Σ_k c_k p^k` mapping polychromatic post-log values back to
/// nominal line integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    coeffs: Vec<f64>,
}

impl Linearization {
    pub fn identity() -> Self {
        Linearization { coeffs: vec![0.0, 1.0] }
    }

    pub fn from_coeffs(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Calibration("coefficients must be finite and non-empty".into()));
        }
        Ok(Linearization { coeffs })
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn eval(&self, p: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * p + c)
    }

    fn derivative(&self, p: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, &c)| acc * p + k as f64 * c)
    }

    /// True if the map is strictly increasing on `[lo, hi]` (dense sampling).
    pub fn is_monotone_on(&self, lo: f64, hi: f64) -> bool {
        const SAMPLES: usize = 1024;
        (0..=SAMPLES).all(|i| self.derivative(lo + (hi - lo) * i as f64 / SAMPLES as f64) > 0.0)
    }
}

/// Applies the calibration to every pixel.
pub fn linearize(proj: &Projection, calib: &Linearization) -> Result<Projection> {
    let lo = proj.data().iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = proj.max().max(0.0);
    if !calib.is_monotone_on(lo, hi) {
        return Err(Error::Calibration(format!(
            "calibration is not monotone over the data range [{lo}, {hi}]"
        )));
    }
    Ok(proj.map(|p| calib.eval(p)))
}

/// Least-squares fit of the nominal path integral `ℓ` as a polynomial of
/// degree `degree` in the polychromatic response, over `ℓ ∈ [0, max_path]`.
pub fn calibrate_linearization(spectrum: &SpectrumModel, max_path: f64, degree: usize) -> Result<Linearization> {
    spectrum.validate()?;
    if degree < 1 {
        return Err(Error::Calibration("degree must be at least 1".into()));
    }
    if !(max_path.is_finite() && max_path > 0.0) {
        return Err(Error::Calibration(format!("max_path must be positive, got {max_path}")));
    }
    const SAMPLES: usize = 256;
    let ell: Vec<f64> = (0..SAMPLES).map(|i| max_path * i as f64 / (SAMPLES - 1) as f64).collect();
    let p: Vec<f64> = ell.iter().map(|&l| spectrum.response(l)).collect();
    // scale the abscissa so the Vandermonde columns stay well conditioned
    let p_max = p.iter().copied().fold(0.0, f64::max);
    if p_max <= 0.0 {
        return Err(Error::Calibration("spectrum response is degenerate".into()));
    }
    let a = DMatrix::from_fn(SAMPLES, degree + 1, |i, k| (p[i] / p_max).powi(k as i32));
    let b = DVector::from_vec(ell);
    let svd = a.svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    if sv.min() <= 1e-12 * smax {
        return Err(Error::Calibration("degenerate least-squares system".into()));
    }
    let x = svd
        .solve(&b, 1e-14 * smax)
        .map_err(|e| Error::Calibration(e.to_string()))?;
    let coeffs: Vec<f64> = x.iter().enumerate().map(|(k, c)| c / p_max.powi(k as i32)).collect();
    let lin = Linearization::from_coeffs(coeffs)?;
    if !lin.is_monotone_on(0.0, p_max) {
        return Err(Error::Calibration("fitted map is not monotone over the calibration range".into()));
    }
    Ok(lin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_geometry, GeometryParams};

    fn geom(n: usize) -> ConeBeamGeometry {
        make_geometry(GeometryParams {
            source_object_dist: 4.0 * n as f64,
            source_detector_dist: 8.0 * n as f64,
            det_rows: 2 * n,
            det_cols: 2 * n,
            det_pitch: 1.5,
            vol_shape: [n, n, n],
            voxel_pitch: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn no_pores_means_truth_equals_cad() {
        let mut spec = PhantomSpec::default_part(Shape3::cubic(24), 1.0, 1);
        spec.pores.count = 0;
        let (cad, truth) = make_phantom(&spec).unwrap();
        assert_eq!(cad, truth);
        assert!(cad.max() > 0.0);
    }

    #[test]
    fn pores_only_remove_material() {
        let spec = PhantomSpec::default_part(Shape3::cubic(48), 1.0, 42);
        let (cad, truth) = make_phantom(&spec).unwrap();
        let mut removed = 0;
        for (&c, &t) in cad.data().iter().zip(truth.data()) {
            assert!(t <= c);
            if t < c {
                assert_eq!(t, 0.0);
                assert!(c > 0.0);
                removed += 1;
            }
        }
        // 20 pores of at least a 1-voxel radius (7 voxels each)
        assert!(removed >= 20 * 7, "{removed}");
        let (cad2, truth2) = make_phantom(&spec).unwrap();
        assert_eq!((cad, truth), (cad2, truth2));
    }

    #[test]
    fn default_size_matches_request() {
        let mut spec = PhantomSpec::default_part(Shape3::cubic(200), 0.5, 3);
        spec.pores.count = 0;
        let (cad, _) = make_phantom(&spec).unwrap();
        assert_eq!(cad.shape(), Shape3::cubic(200));
    }

    #[test]
    fn unplaceable_pores_fail() {
        let spec = PhantomSpec {
            vol_shape: Shape3::cubic(10),
            voxel_pitch: 1.0,
            solids: vec![Solid::Box {
                center: [0.0; 3],
                half_size: [1.0, 1.0, 1.0],
                rotation: 0.0,
                attenuation: 1.0,
            }],
            pores: PoreSpec {
                count: 1,
                radius_min: 3.0,
                radius_max: 3.0,
                seed: 0,
            },
        };
        assert!(matches!(make_phantom(&spec), Err(Error::Phantom(_))));
    }

    #[test]
    fn monochromatic_noiseless_is_the_line_integral() {
        let g = geom(10);
        let (_, truth) = make_phantom(&PhantomSpec::default_part(Shape3::cubic(10), 1.0, 5).with_no_pores()).unwrap();
        let p = simulate_measurement(&truth, &g, 33.0, &SpectrumModel::monochromatic(), 9).unwrap();
        let lin = linearize(&p, &Linearization::identity()).unwrap();
        let direct = forward_project(&truth, &g, 33.0).unwrap();
        for (a, b) in lin.data().iter().zip(direct.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let zero = simulate_measurement(&Volume::zeros(g.vol_shape(), 1.0), &g, 0.0, &SpectrumModel::two_bin(0.0), 1)
            .unwrap();
        assert!(zero.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn noise_is_reproducible_per_angle_and_seed() {
        let g = geom(8);
        let (_, truth) = make_phantom(&PhantomSpec::default_part(Shape3::cubic(8), 1.0, 5).with_no_pores()).unwrap();
        let s = SpectrumModel::two_bin(0.01);
        let a = simulate_measurement(&truth, &g, 10.0, &s, 7).unwrap();
        let b = simulate_measurement(&truth, &g, 10.0, &s, 7).unwrap();
        let c = simulate_measurement(&truth, &g, 10.0, &s, 8).unwrap();
        let d = simulate_measurement(&truth, &g, 12.0, &s, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.data(), c.data());
        assert_ne!(a.data(), d.data());
    }

    #[test]
    fn beam_hardening_bends_response_down() {
        let s = SpectrumModel {
            bins: vec![EnergyBin { weight: 0.5, scale: 1.0 }, EnergyBin { weight: 0.5, scale: 0.5 }],
            noise_sigma: 0.0,
        };
        // −ln(½e^{−ℓ} + ½e^{−ℓ/2}) evaluated independently
        for (ell, expected) in [(1.0, 0.719_070_196_379_838_6), (2.0, 1.379_885_493_041_722_4), (4.0, 2.566_219_169_516_972_7)] {
            let p = s.response(ell);
            assert!((p - expected).abs() < 1e-12, "{ell}: {p}");
            assert!(p < ell);
        }
    }

    #[test]
    fn single_bin_calibration_is_identity() {
        let lin = calibrate_linearization(&SpectrumModel::monochromatic(), 3.0, 3).unwrap();
        let c = lin.coeffs();
        assert!((c[1] - 1.0).abs() < 1e-9, "{c:?}");
        for (k, v) in c.iter().enumerate() {
            if k != 1 {
                assert!(v.abs() < 1e-9, "{c:?}");
            }
        }
    }

    #[test]
    fn two_bin_calibration_fits_well() {
        let s = SpectrumModel::two_bin(0.0);
        let max_path = 3.0;
        let lin = calibrate_linearization(&s, max_path, 3).unwrap();
        let n = 500;
        let (mut lin_err, mut raw_err) = (0.0, 0.0);
        for i in 0..n {
            let ell = max_path * (i as f64 + 0.5) / n as f64;
            let p = s.response(ell);
            lin_err += (lin.eval(p) - ell).powi(2);
            raw_err += (p - ell).powi(2);
        }
        let (lin_rms, raw_rms) = ((lin_err / n as f64).sqrt(), (raw_err / n as f64).sqrt());
        assert!(lin_rms < 0.01 * max_path, "{lin_rms}");
        assert!(raw_rms >= 10.0 * lin_rms, "{raw_rms} vs {lin_rms}");
    }

    #[test]
    fn calibration_argument_checks() {
        let s = SpectrumModel::two_bin(0.0);
        assert!(calibrate_linearization(&s, 0.0, 3).is_err());
        assert!(calibrate_linearization(&s, 1.0, 0).is_err());
        let bad = SpectrumModel {
            bins: vec![EnergyBin { weight: 0.7, scale: 1.0 }],
            noise_sigma: 0.0,
        };
        assert!(calibrate_linearization(&bad, 1.0, 2).is_err());
    }

    #[test]
    fn non_monotone_calibration_is_rejected() {
        let p = Projection::from_vec(1, 3, 0.0, vec![0.0, 1.0, 2.0]).unwrap();
        let lin = Linearization::from_coeffs(vec![0.0, 1.0, -1.0]).unwrap();
        assert!(linearize(&p, &lin).is_err());
        let same = linearize(&p, &Linearization::identity()).unwrap();
        assert_eq!(same, p);
    }

    impl PhantomSpec {
        fn with_no_pores(mut self) -> Self {
            self.pores.count = 0;
            self
        }
    }
}
