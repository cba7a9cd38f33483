//! End-to-end comparison study: one phantom, one geometry, one set of noisy
//! measurements shared by every policy.
//!
//! Measurements, the CAD distance matrix and the CAD alignment scores are
//! computed lazily and cached, so policies that never look at a view never
//! pay for it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use crate::config::Config;
use crate::edges::canny_edges_quantile;
use crate::error::{Error, Result};
use crate::geometry::{AngleGrid, ConeBeamGeometry};
use crate::io::{write_atomic, write_volume};
use crate::metrics::{nrmse, ssim_default};
use crate::projector::forward_project;
use crate::recon::Sirt;
use crate::scoring::{alignment_scores, build_distance_matrix, DistanceMatrix};
use crate::selection::{run_policy, Policy, SelectionTrace};
use crate::sim::{calibrate_linearization, linearize, make_phantom, simulate_measurement, Linearization, SpectrumModel};
use crate::volume::{Projection, Volume};

pub struct Experiment {
    config: Config,
    geom: ConeBeamGeometry,
    grid: AngleGrid,
    cad: Volume,
    truth: Volume,
    spectrum: SpectrumModel,
    linearization: Linearization,
    measurements: Vec<OnceLock<Projection>>,
    dmat: OnceLock<Arc<DistanceMatrix>>,
    cad_alignment: OnceLock<Arc<Vec<f64>>>,
    evaluations: Mutex<BTreeMap<Vec<usize>, (f64, f64)>>,
    snapshots: Mutex<BTreeMap<Vec<usize>, Volume>>,
}

/// Longest possible chord through the volume, mm.
fn volume_diagonal(geom: &ConeBeamGeometry) -> f64 {
    let s = geom.vol_shape();
    let p = geom.voxel_pitch();
    ((s.nx * s.nx + s.ny * s.ny + s.nz * s.nz) as f64).sqrt() * p
}

impl Experiment {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let geom = config.geometry()?;
        let grid = config.grid()?;
        let (cad, truth) = make_phantom(&config.phantom_spec())?;
        let mut spectrum = config.spectrum_model();
        let max_scale = spectrum.bins.iter().map(|b| b.scale).fold(0.0, f64::max);
        let max_path = truth.max().max(cad.max()) * max_scale.max(1.0) * volume_diagonal(&geom);
        let linearization = if spectrum.bins.len() == 1 && spectrum.bins[0].scale == 1.0 {
            Linearization::identity()
        } else {
            calibrate_linearization(&spectrum, max_path, config.spectrum.linearization_degree)?
        };
        if config.spectrum.noise_relative > 0.0 {
            let reference = forward_project(&truth, &geom, grid.angle(0))?.map(|l| spectrum.response(l));
            spectrum.noise_sigma = config.spectrum.noise_relative * reference.max();
        }
        let measurements = (0..grid.len()).map(|_| OnceLock::new()).collect();
        Ok(Experiment {
            config,
            geom,
            grid,
            cad,
            truth,
            spectrum,
            linearization,
            measurements,
            dmat: OnceLock::new(),
            cad_alignment: OnceLock::new(),
            evaluations: Mutex::new(BTreeMap::new()),
            snapshots: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn geometry(&self) -> &ConeBeamGeometry {
        &self.geom
    }

    pub fn grid(&self) -> &AngleGrid {
        &self.grid
    }

    pub fn cad(&self) -> &Volume {
        &self.cad
    }

    pub fn truth(&self) -> &Volume {
        &self.truth
    }

    /// Spectrum with the absolute noise level resolved.
    pub fn spectrum(&self) -> &SpectrumModel {
        &self.spectrum
    }

    pub fn linearization(&self) -> &Linearization {
        &self.linearization
    }

    /// Linearized noisy measurement at grid index `i`.
    pub fn measurement(&self, i: usize) -> Result<&Projection> {
        let cell = self
            .measurements
            .get(i)
            .ok_or_else(|| Error::invalid(format!("grid index {i} out of range")))?;
        if let Some(p) = cell.get() {
            return Ok(p);
        }
        let raw = simulate_measurement(&self.truth, &self.geom, self.grid.angle(i), &self.spectrum, self.config.spectrum.seed)?;
        let p = linearize(&raw, &self.linearization)?;
        Ok(cell.get_or_init(|| p))
    }

    pub fn distance_matrix(&self) -> Result<Arc<DistanceMatrix>> {
        if let Some(d) = self.dmat.get() {
            return Ok(d.clone());
        }
        let d = Arc::new(build_distance_matrix(&self.cad, &self.geom, &self.grid)?);
        Ok(self.dmat.get_or_init(|| d).clone())
    }

    /// Unnormalised edge alignment of every grid angle with the CAD edges.
    pub fn cad_alignment(&self) -> Result<Arc<Vec<f64>>> {
        if let Some(a) = self.cad_alignment.get() {
            return Ok(a.clone());
        }
        let sc = &self.config.scoring;
        let edges = canny_edges_quantile(&self.cad, sc.canny_sigma, sc.canny_low_quantile, sc.canny_high_quantile)?;
        let all: Vec<usize> = (0..self.grid.len()).collect();
        let a = Arc::new(alignment_scores(&edges, &self.geom, &self.grid, &all, sc.softmax()?)?);
        Ok(self.cad_alignment.get_or_init(|| a).clone())
    }

    /// Cold-start reconstruction from the listed views with the evaluation
    /// iteration count.
    pub fn reconstruct(&self, views: &[usize]) -> Result<Volume> {
        if views.is_empty() {
            return Err(Error::invalid("no views to reconstruct from"));
        }
        let mut sorted = views.to_vec();
        sorted.sort_unstable();
        let mut sirt = Sirt::new(self.geom);
        for &i in &sorted {
            sirt.add_view(self.measurement(i)?)?;
        }
        let mut x = Volume::zeros(self.geom.vol_shape(), self.geom.voxel_pitch());
        sirt.iterate(&mut x, &self.config.recon.eval_sirt())?;
        Ok(x)
    }

    /// NRMSE and SSIM of the checkpoint reconstruction against the truth.
    /// Results depend only on the view set and are memoised.
    pub fn evaluate(&self, views: &[usize]) -> Result<(f64, f64)> {
        let mut key = views.to_vec();
        key.sort_unstable();
        if let Some(&m) = self.evaluations.lock().expect("poisoned").get(&key) {
            return Ok(m);
        }
        let x = self.reconstruct(&key)?;
        let m = (nrmse(&x, &self.truth)?, ssim_default(&x, &self.truth)?);
        self.evaluations.lock().expect("poisoned").insert(key.clone(), m);
        if self.config.output.snapshots {
            self.snapshots.lock().expect("poisoned").insert(key, x);
        }
        Ok(m)
    }

    fn snapshot(&self, views: &[usize]) -> Option<Volume> {
        let mut key = views.to_vec();
        key.sort_unstable();
        self.snapshots.lock().expect("poisoned").get(&key).cloned()
    }
}

pub const TRACE_COLUMNS: [&str; 10] = [
    "step", "angle", "i_cad", "i_recon", "dispersion", "lambda", "total", "nrmse", "ssim", "select_seconds",
];

pub const SUMMARY_COLUMNS: [&str; 7] = [
    "policy",
    "checkpoint",
    "views",
    "nrmse",
    "ssim",
    "mean_select_seconds",
    "setup_seconds",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// RFC 4180 CSV of one trace, one row per acquired view.
pub fn trace_csv(trace: &SelectionTrace, record_timing: bool) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRACE_COLUMNS)?;
    for r in trace.all_records() {
        let s = r.score;
        let timed = record_timing && trace.policy != Policy::Uniform;
        w.write_record([
            r.step.to_string(),
            r.angle.to_string(),
            opt(s.map(|s| s.i_cad)),
            opt(s.map(|s| s.i_recon)),
            opt(s.map(|s| s.dispersion)),
            opt(s.map(|s| s.lambda)),
            opt(s.map(|s| s.total)),
            opt(r.nrmse),
            opt(r.ssim),
            opt(timed.then_some(r.select_seconds)),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// One row per policy and checkpoint.
pub fn summary_csv(traces: &[SelectionTrace], checkpoints: &[usize], record_timing: bool) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_COLUMNS)?;
    for t in traces {
        for &n in checkpoints {
            let Some(r) = t.record(n) else { continue };
            w.write_record([
                t.policy.name().to_string(),
                n.to_string(),
                n.to_string(),
                opt(r.nrmse),
                opt(r.ssim),
                opt(t.mean_select_seconds().filter(|_| record_timing)),
                opt(record_timing.then_some(t.setup_seconds)),
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub traces: Vec<SelectionTrace>,
    pub files: Vec<PathBuf>,
}

impl ExperimentReport {
    pub fn trace(&self, policy: Policy) -> Option<&SelectionTrace> {
        self.traces.iter().find(|t| t.policy == policy)
    }
}

/// Runs the policies in the given order on one shared experiment.
pub fn run_policies(exp: &Experiment, policies: &[Policy]) -> Result<Vec<SelectionTrace>> {
    policies.iter().map(|&p| run_policy(exp, p)).collect()
}

/// Runs the policies and writes `trace_<policy>.csv`, `summary.csv` and,
/// if enabled, checkpoint volumes under `snapshots/` into `out`.
pub fn run_experiment(config: Config, policies: &[Policy], out: &Path) -> Result<ExperimentReport> {
    if policies.is_empty() {
        return Err(Error::invalid("no policies to run"));
    }
    let exp = Experiment::new(config)?;
    let traces = run_policies(&exp, policies)?;
    let files = write_outputs(&exp, &traces, out)?;
    Ok(ExperimentReport { traces, files })
}

pub fn write_outputs(exp: &Experiment, traces: &[SelectionTrace], out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let cfg = exp.config();
    let timing = cfg.output.record_timing;
    let mut files = Vec::new();
    for t in traces {
        let path = out.join(format!("trace_{}.csv", t.policy));
        write_atomic(&path, &trace_csv(t, timing)?)?;
        files.push(path);
    }
    let path = out.join("summary.csv");
    write_atomic(&path, &summary_csv(traces, &cfg.selection.checkpoints, timing)?)?;
    files.push(path);
    if cfg.output.snapshots {
        let dir = out.join("snapshots");
        std::fs::create_dir_all(&dir)?;
        for t in traces {
            let selected = t.selected();
            for &n in &cfg.selection.checkpoints {
                let views = if t.policy == Policy::Uniform {
                    crate::selection::uniform_indices(exp.grid().len(), n)?
                } else if n <= selected.len() {
                    selected[..n].to_vec()
                } else {
                    continue;
                };
                if let Some(v) = exp.snapshot(&views) {
                    let path = dir.join(format!("{}_n{n:03}.epv", t.policy));
                    write_volume(&path, &v)?;
                    files.push(path);
                }
            }
        }
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GeometryParams;

    pub(crate) fn small_config() -> Config {
        let mut c = Config::with_geometry(GeometryParams {
            source_object_dist: 80.0,
            source_detector_dist: 160.0,
            det_rows: 24,
            det_cols: 24,
            det_pitch: 2.5,
            vol_shape: [16, 16, 16],
            voxel_pitch: 1.0,
        });
        c.phantom.pores = 2;
        c.phantom.pore_radius_max = 1.5;
        c.selection.candidates = 24;
        c.selection.n_init = 3;
        c.selection.budget = 6;
        c.selection.checkpoints = vec![4, 6];
        c.recon.iterations = 3;
        c.recon.eval_iterations = 5;
        c.output.record_timing = false;
        c
    }

    #[test]
    fn measurements_are_cached_and_reproducible() {
        let exp = Experiment::new(small_config()).unwrap();
        let a = exp.measurement(3).unwrap().clone();
        assert!(std::ptr::eq(exp.measurement(3).unwrap(), exp.measurement(3).unwrap()));
        let again = Experiment::new(small_config()).unwrap();
        assert_eq!(again.measurement(3).unwrap(), &a);
        assert!(exp.measurement(24).is_err());
        assert!(exp.spectrum().noise_sigma > 0.0);
    }

    #[test]
    fn linearized_noiseless_data_matches_line_integrals() {
        let mut c = small_config();
        c.spectrum.noise_relative = 0.0;
        let exp = Experiment::new(c).unwrap();
        let ideal = forward_project(exp.truth(), exp.geometry(), exp.grid().angle(5)).unwrap();
        let meas = exp.measurement(5).unwrap();
        let peak = ideal.max();
        for (a, b) in meas.data().iter().zip(ideal.data()) {
            assert!((a - b).abs() < 0.01 * peak);
        }
    }

    #[test]
    fn every_policy_respects_budget_and_uniqueness() {
        let exp = Experiment::new(small_config()).unwrap();
        for p in Policy::ALL {
            let t = run_policy(&exp, p).unwrap();
            let mut s = t.selected();
            assert_eq!(s.len(), 6);
            assert_eq!(t.initial.len(), 3);
            assert_eq!(t.records.len(), 3);
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 6, "{p}");
            for n in [4, 6] {
                assert!(t.record(n).unwrap().nrmse.is_some());
            }
        }
    }

    #[test]
    fn budget_equal_to_init_has_no_adaptive_steps() {
        let mut c = small_config();
        c.selection.budget = 3;
        c.selection.checkpoints = vec![3];
        let exp = Experiment::new(c).unwrap();
        let t = run_policy(&exp, Policy::Epvs).unwrap();
        assert_eq!(t.initial.len(), 3);
        assert!(t.records.is_empty());
        assert!(t.initial.iter().all(|r| r.score.unwrap().lambda == 1.0));
    }

    #[test]
    fn csv_outputs_are_byte_identical_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        run_experiment(small_config(), &[Policy::Epvs, Policy::Uniform], &a).unwrap();
        run_experiment(small_config(), &[Policy::Epvs, Policy::Uniform], &b).unwrap();
        for name in ["trace_epvs.csv", "trace_uniform.csv", "summary.csv"] {
            let x = std::fs::read(a.join(name)).unwrap();
            assert_eq!(x, std::fs::read(b.join(name)).unwrap(), "{name}");
            assert!(!x.is_empty());
        }
        let header = std::fs::read_to_string(a.join("trace_epvs.csv")).unwrap();
        assert!(header.starts_with("step,angle,i_cad,i_recon,dispersion,lambda,total,nrmse,ssim,select_seconds\n"));
    }

    #[test]
    fn snapshots_are_written_per_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small_config();
        c.output.snapshots = true;
        let report = run_experiment(c, &[Policy::Uniform], dir.path()).unwrap();
        let snap = dir.path().join("snapshots").join("uniform_n004.epv");
        assert!(report.files.contains(&snap));
        let v = crate::io::read_volume(&snap).unwrap();
        assert_eq!(v.shape(), crate::volume::Shape3::cubic(16));
    }
}
