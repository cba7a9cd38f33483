//! Greedy sequential view selection and the two baselines.
//!
//! All three policies share the same loop shape: after each acquired view the
//! SIRT estimate is warm-started with the new measurement, the next view is
//! chosen from the remaining grid angles, and metric checkpoints are
//! evaluated with a cold-start reconstruction that is identical across
//! policies.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::edges::canny_edges_quantile;
use crate::error::{Error, Result};
use crate::experiment::Experiment;
use crate::geometry::{AngleGrid, ConeBeamGeometry};
use crate::recon::Sirt;
use crate::scoring::{
    alignment_scores, dispersion_score, lambda_schedule, objective, DispersionParams, DistanceMatrix,
    ObjectiveParams, ScoreBreakdown,
};
use crate::volume::{EdgeVolume, Shape3, Volume};

/// Loop state: candidate grid, views chosen so far and the current estimate.
#[derive(Debug, Clone)]
pub struct SelectionState {
    pub geom: ConeBeamGeometry,
    pub grid: AngleGrid,
    pub selected: Vec<usize>,
    pub dmat: Arc<DistanceMatrix>,
    pub recon: Volume,
    pub step: usize,
}

impl SelectionState {
    pub fn new(geom: ConeBeamGeometry, grid: AngleGrid, dmat: Arc<DistanceMatrix>) -> Result<Self> {
        if dmat.len() != grid.len() {
            return Err(Error::shape(
                format!("{0}x{0} distance matrix", grid.len()),
                format!("{0}x{0}", dmat.len()),
            ));
        }
        Ok(SelectionState {
            geom,
            recon: Volume::zeros(geom.vol_shape(), geom.voxel_pitch()),
            grid,
            selected: Vec::new(),
            dmat,
            step: 0,
        })
    }

    /// Grid indices not selected yet, in ascending angle order.
    pub fn candidates(&self) -> Vec<usize> {
        (0..self.grid.len()).filter(|i| !self.selected.contains(i)).collect()
    }

    pub fn push(&mut self, index: usize) -> Result<()> {
        if index >= self.grid.len() {
            return Err(Error::invalid(format!("grid index {index} out of range")));
        }
        if self.selected.contains(&index) {
            return Err(Error::AlreadySelected(index));
        }
        self.selected.push(index);
        self.step = self.selected.len();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub score: ScoreBreakdown,
}

/// Index of the best candidate. Candidates must be listed in ascending grid
/// order, so keeping the first maximum breaks ties towards the smallest angle.
pub fn argmax(cands: &[Candidate]) -> Result<usize> {
    let mut best: Option<&Candidate> = None;
    for c in cands {
        if best.is_none_or(|b| c.score.total > b.score.total) {
            best = Some(c);
        }
    }
    best.map(|c| c.index).ok_or(Error::NoCandidates)
}

/// Objective breakdown of every remaining candidate.
pub fn score_candidates(
    state: &SelectionState,
    edge_cad: &EdgeVolume,
    edge_recon: &EdgeVolume,
    params: &ObjectiveParams,
) -> Result<Vec<Candidate>> {
    state
        .candidates()
        .par_iter()
        .map(|&index| {
            Ok(Candidate {
                index,
                score: objective(index, state, edge_cad, edge_recon, params)?,
            })
        })
        .collect()
}

/// One greedy step: the remaining grid index with the largest objective.
pub fn select_next_view(
    state: &SelectionState,
    edge_cad: &EdgeVolume,
    edge_recon: &EdgeVolume,
    params: &ObjectiveParams,
) -> Result<usize> {
    if state.selected.len() >= state.grid.len() {
        return Err(Error::NoCandidates);
    }
    argmax(&score_candidates(state, edge_cad, edge_recon, params)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    Epvs,
    Uniform,
    Eavs,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Epvs, Policy::Uniform, Policy::Eavs];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Epvs => "epvs",
            Policy::Uniform => "uniform",
            Policy::Eavs => "eavs",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "epvs" => Ok(Policy::Epvs),
            "uniform" => Ok(Policy::Uniform),
            "eavs" => Ok(Policy::Eavs),
            other => Err(Error::invalid(format!("unknown policy '{other}' (expected epvs, uniform or eavs)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// fixed or CAD-only views acquired before the first reconstruction
    Init,
    /// views chosen from a reconstruction
    Adaptive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// number of views acquired once this one is added (1-based)
    pub step: usize,
    pub index: usize,
    pub angle: f64,
    pub phase: Phase,
    /// breakdown of the chosen view; `None` for non-scoring policies
    pub score: Option<ScoreBreakdown>,
    /// breakdown of every candidate that was considered
    pub candidates: Vec<Candidate>,
    /// wall time of the selection decision, excluding reconstruction
    pub select_seconds: f64,
    pub nrmse: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionTrace {
    pub policy: Policy,
    pub initial: Vec<StepRecord>,
    /// one record per view acquired beyond initialization
    pub records: Vec<StepRecord>,
    /// one-off cost shared by all steps (CAD scores, distance matrix)
    pub setup_seconds: f64,
}

impl SelectionTrace {
    fn new(policy: Policy) -> Self {
        SelectionTrace {
            policy,
            initial: Vec::new(),
            records: Vec::new(),
            setup_seconds: 0.0,
        }
    }

    pub fn all_records(&self) -> impl Iterator<Item = &StepRecord> {
        self.initial.iter().chain(&self.records)
    }

    pub fn selected(&self) -> Vec<usize> {
        self.all_records().map(|r| r.index).collect()
    }

    pub fn record(&self, step: usize) -> Option<&StepRecord> {
        self.all_records().find(|r| r.step == step)
    }

    fn record_mut(&mut self, step: usize) -> Option<&mut StepRecord> {
        self.initial.iter_mut().chain(self.records.iter_mut()).find(|r| r.step == step)
    }

    /// Mean wall time of one recon-driven selection; `None` without any.
    pub fn mean_select_seconds(&self) -> Option<f64> {
        if self.records.is_empty() || self.policy == Policy::Uniform {
            return None;
        }
        Some(self.records.iter().map(|r| r.select_seconds).sum::<f64>() / self.records.len() as f64)
    }
}

/// `k`-th of `n` evenly spaced grid indices: `round(k·G/n) mod G`.
pub fn uniform_indices(grid_len: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > grid_len {
        return Err(Error::invalid(format!("cannot pick {n} uniform views from a grid of {grid_len}")));
    }
    let idx: Vec<usize> = (0..n)
        .map(|k| ((k as f64 * grid_len as f64 / n as f64).round() as usize) % grid_len)
        .collect();
    let mut sorted = idx.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != n {
        return Err(Error::invalid(format!("uniform spacing of {n} views on {grid_len} angles collides")));
    }
    Ok(idx)
}

/// Angular distance where views 180° apart count as identical.
pub fn wrap180(delta_deg: f64) -> f64 {
    let m = delta_deg.rem_euclid(180.0);
    m.min(180.0 - m)
}

/// Mask-overlap alignment of view `angle`: for every edge pixel, the number
/// of other edge pixels of its slice inside a `band_width` pixel wide band
/// through it along the in-plane ray direction, summed over the volume.
pub fn mask_alignment(edges: &EdgeVolume, angle: f64, band_width: usize) -> f64 {
    let shape = edges.shape();
    let (nx, ny) = (shape.nx as isize, shape.ny as isize);
    let (s, c) = angle.to_radians().sin_cos();
    let half = band_width as f64 / 2.0;
    let reach = (shape.nx.max(shape.ny) as f64 * std::f64::consts::SQRT_2).ceil() as isize;
    let offsets = (half.ceil() as isize).max(1);
    (0..shape.nz)
        .into_par_iter()
        .map(|z| {
            let slice = edges.as_volume().slice(z);
            let at = |x: isize, y: isize| x >= 0 && y >= 0 && x < nx && y < ny && slice[(y * nx + x) as usize] > 0.0;
            let mut mask = vec![false; slice.len()];
            let mut total = 0u64;
            for y in 0..ny {
                for x in 0..nx {
                    if !at(x, y) {
                        continue;
                    }
                    // rasterise the band through (x, y) and count overlapping edge pixels
                    let mut touched = Vec::new();
                    for t in -reach..=reach {
                        for o in -offsets..=offsets {
                            let fx = x as f64 + t as f64 * s + o as f64 * 0.5 * c;
                            let fy = y as f64 + t as f64 * c - o as f64 * 0.5 * s;
                            let (px, py) = (fx.round() as isize, fy.round() as isize);
                            if px < 0 || py < 0 || px >= nx || py >= ny {
                                continue;
                            }
                            let perp = ((px - x) as f64 * c - (py - y) as f64 * s).abs();
                            let k = (py * nx + px) as usize;
                            if perp <= half && !mask[k] {
                                mask[k] = true;
                                touched.push(k);
                            }
                        }
                    }
                    let own = (y * nx + x) as usize;
                    total += touched.iter().filter(|&&k| k != own && slice[k] > 0.0).count() as u64;
                    for k in touched {
                        mask[k] = false;
                    }
                }
            }
            total as f64
        })
        .sum()
}

fn check_budget(grid_len: usize, n_init: usize, budget: usize) -> Result<()> {
    if n_init == 0 || budget < n_init {
        return Err(Error::invalid(format!("need 1 <= n_init ({n_init}) <= budget ({budget})")));
    }
    if budget > grid_len {
        return Err(Error::invalid(format!("budget {budget} exceeds the {grid_len} candidate angles")));
    }
    Ok(())
}

/// Warm-started reconstruction shared by the adaptive policies.
struct Reconstructor<'a> {
    exp: &'a Experiment,
    sirt: Sirt,
}

impl<'a> Reconstructor<'a> {
    fn new(exp: &'a Experiment) -> Self {
        Reconstructor {
            exp,
            sirt: Sirt::new(*exp.geometry()),
        }
    }

    fn add(&mut self, index: usize) -> Result<()> {
        self.sirt.add_view(self.exp.measurement(index)?)
    }

    fn refine(&self, x: &mut Volume) -> Result<()> {
        self.sirt.iterate(x, &self.exp.config().recon.sirt())?;
        Ok(())
    }
}

fn fill_checkpoints(exp: &Experiment, trace: &mut SelectionTrace) -> Result<()> {
    let selected = trace.selected();
    for &n in &exp.config().selection.checkpoints {
        if n > selected.len() {
            continue;
        }
        let views = if trace.policy == Policy::Uniform {
            uniform_indices(exp.grid().len(), n)?
        } else {
            selected[..n].to_vec()
        };
        let (nrmse, ssim) = exp.evaluate(&views)?;
        if let Some(r) = trace.record_mut(n) {
            r.nrmse = Some(nrmse);
            r.ssim = Some(ssim);
        }
    }
    Ok(())
}

fn record(step: usize, index: usize, grid: &AngleGrid, phase: Phase) -> StepRecord {
    StepRecord {
        step,
        index,
        angle: grid.angle(index),
        phase,
        score: None,
        candidates: Vec::new(),
        select_seconds: 0.0,
        nrmse: None,
        ssim: None,
    }
}

/// Proposed policy: CAD-only initialization with λ = 1, then the scheduled
/// blend of CAD and reconstruction edge alignment plus dispersion.
pub fn run_epvs(exp: &Experiment) -> Result<SelectionTrace> {
    let cfg = exp.config();
    let grid = exp.grid();
    let (n_init, budget) = (cfg.selection.n_init, cfg.selection.budget);
    check_budget(grid.len(), n_init, budget)?;
    let mut trace = SelectionTrace::new(Policy::Epvs);

    let setup = Instant::now();
    let dmat = exp.distance_matrix()?;
    let cad_raw = exp.cad_alignment()?;
    trace.setup_seconds = setup.elapsed().as_secs_f64();
    let dispersion = DispersionParams::auto(&dmat, cfg.scoring.gamma_scale)?;
    let cad_scale = positive_or_one(cad_raw.iter().copied().fold(0.0, f64::max));
    let mut state = SelectionState::new(*exp.geometry(), grid.clone(), dmat)?;
    let mut recon = Reconstructor::new(exp);

    for step in 1..=n_init {
        let t = Instant::now();
        let cands = blend(&state, &cad_raw, cad_scale, None, 1.0, dispersion)?;
        let index = argmax(&cands)?;
        let mut r = record(step, index, grid, Phase::Init);
        r.select_seconds = t.elapsed().as_secs_f64();
        r.score = cands.iter().find(|c| c.index == index).map(|c| c.score);
        r.candidates = cands;
        state.push(index)?;
        recon.add(index)?;
        trace.initial.push(r);
    }

    let mut recon_scale = None;
    for step in n_init + 1..=budget {
        recon.refine(&mut state.recon)?;
        let t = Instant::now();
        let edges = canny_edges_quantile(
            &state.recon,
            cfg.scoring.canny_sigma,
            cfg.scoring.canny_low_quantile,
            cfg.scoring.canny_high_quantile,
        )?;
        let candidates = state.candidates();
        let raw = alignment_scores(&edges, &state.geom, grid, &candidates, cfg.scoring.softmax()?)?;
        let scale = *recon_scale.get_or_insert_with(|| positive_or_one(raw.iter().copied().fold(0.0, f64::max)));
        let lambda = lambda_schedule(step, n_init, budget)?;
        let cands = blend(&state, &cad_raw, cad_scale, Some((&raw, scale)), lambda, dispersion)?;
        let index = argmax(&cands)?;
        let elapsed = t.elapsed().as_secs_f64();
        let mut r = record(step, index, grid, Phase::Adaptive);
        r.select_seconds = elapsed;
        r.score = cands.iter().find(|c| c.index == index).map(|c| c.score);
        r.candidates = cands;
        state.push(index)?;
        recon.add(index)?;
        trace.records.push(r);
    }
    fill_checkpoints(exp, &mut trace)?;
    Ok(trace)
}

fn positive_or_one(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        1.0
    }
}

/// Combines cached CAD scores and per-candidate reconstruction scores (given
/// in candidate order) into objective breakdowns.
fn blend(
    state: &SelectionState,
    cad_raw: &[f64],
    cad_scale: f64,
    recon: Option<(&[f64], f64)>,
    lambda: f64,
    dispersion: DispersionParams,
) -> Result<Vec<Candidate>> {
    state
        .candidates()
        .into_iter()
        .enumerate()
        .map(|(k, index)| {
            let d = dispersion_score(index, &state.selected, &state.dmat, dispersion)?;
            let i_recon = recon.map_or(0.0, |(raw, scale)| raw[k] / scale);
            Ok(Candidate {
                index,
                score: ScoreBreakdown::combine(cad_raw[index] / cad_scale, i_recon, d, lambda),
            })
        })
        .collect()
}

/// Evenly spaced views over the full circle.
pub fn run_uniform(exp: &Experiment) -> Result<SelectionTrace> {
    let cfg = exp.config();
    let grid = exp.grid();
    let (n_init, budget) = (cfg.selection.n_init, cfg.selection.budget);
    check_budget(grid.len(), n_init, budget)?;
    let mut trace = SelectionTrace::new(Policy::Uniform);
    for (k, index) in uniform_indices(grid.len(), budget)?.into_iter().enumerate() {
        let phase = if k < n_init { Phase::Init } else { Phase::Adaptive };
        let r = record(k + 1, index, grid, phase);
        if phase == Phase::Init {
            trace.initial.push(r);
        } else {
            trace.records.push(r);
        }
    }
    fill_checkpoints(exp, &mut trace)?;
    Ok(trace)
}

/// Mask-overlap baseline: uniform initialization, then greedy selection on
/// band-mask alignment with the edges of the reconstruction's central axial
/// slice plus an angular dispersion that treats opposite views as identical.
pub fn run_eavs(exp: &Experiment) -> Result<SelectionTrace> {
    let cfg = exp.config();
    let grid = exp.grid();
    let (n_init, budget) = (cfg.selection.n_init, cfg.selection.budget);
    check_budget(grid.len(), n_init, budget)?;
    let mut trace = SelectionTrace::new(Policy::Eavs);

    let setup = Instant::now();
    let dispersion = angular_dispersion(grid, cfg.scoring.gamma_scale)?;
    trace.setup_seconds = setup.elapsed().as_secs_f64();

    let mut selected = Vec::with_capacity(budget);
    let mut recon = Reconstructor::new(exp);
    let geom = exp.geometry();
    let mut x = Volume::zeros(geom.vol_shape(), geom.voxel_pitch());
    for (k, index) in uniform_indices(grid.len(), n_init)?.into_iter().enumerate() {
        trace.initial.push(record(k + 1, index, grid, Phase::Init));
        selected.push(index);
        recon.add(index)?;
    }
    for step in n_init + 1..=budget {
        recon.refine(&mut x)?;
        let t = Instant::now();
        let edges = canny_edges_quantile(
            &central_slice(&x)?,
            cfg.scoring.canny_sigma,
            cfg.scoring.canny_low_quantile,
            cfg.scoring.canny_high_quantile,
        )?;
        let candidates: Vec<usize> = (0..grid.len()).filter(|i| !selected.contains(i)).collect();
        let raw: Vec<f64> = candidates
            .par_iter()
            .map(|&i| mask_alignment(&edges, grid.angle(i), cfg.selection.eavs_band_width))
            .collect();
        let scale = positive_or_one(raw.iter().copied().fold(0.0, f64::max));
        let cands: Vec<Candidate> = candidates
            .iter()
            .zip(&raw)
            .map(|(&index, &a)| {
                let d = angular_dispersion_score(grid, index, &selected, dispersion);
                Candidate {
                    index,
                    score: ScoreBreakdown::combine(0.0, a / scale, d, 0.0),
                }
            })
            .collect();
        let index = argmax(&cands)?;
        let mut r = record(step, index, grid, Phase::Adaptive);
        r.select_seconds = t.elapsed().as_secs_f64();
        r.score = cands.iter().find(|c| c.index == index).map(|c| c.score);
        r.candidates = cands;
        selected.push(index);
        recon.add(index)?;
        trace.records.push(r);
    }
    fill_checkpoints(exp, &mut trace)?;
    Ok(trace)
}

/// The central axial slice as a one-slice volume.
fn central_slice(x: &Volume) -> Result<Volume> {
    let s = x.shape();
    Volume::from_vec(Shape3::new(s.nx, s.ny, 1), x.voxel_pitch(), x.slice(s.nz / 2).to_vec())
}

/// γ = `gamma_scale` × median wrapped angular distance over grid pairs.
fn angular_dispersion(grid: &AngleGrid, gamma_scale: f64) -> Result<DispersionParams> {
    let a = grid.angles();
    let mut d: Vec<f64> = (0..a.len())
        .flat_map(|i| (i + 1..a.len()).map(move |j| (i, j)))
        .map(|(i, j)| wrap180(a[i] - a[j]))
        .collect();
    if d.is_empty() {
        return Err(Error::invalid("angle grid needs at least two angles"));
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    DispersionParams::new(gamma_scale * median, 1e-12 * 90.0)
}

fn angular_dispersion_score(grid: &AngleGrid, index: usize, selected: &[usize], p: DispersionParams) -> f64 {
    let theta = grid.angle(index);
    let sum: f64 = selected
        .iter()
        .map(|&j| 1.0 / wrap180(theta - grid.angle(j)).max(p.epsilon_d))
        .sum();
    (-p.gamma * sum).exp()
}

pub fn run_policy(exp: &Experiment, policy: Policy) -> Result<SelectionTrace> {
    match policy {
        Policy::Epvs => run_epvs(exp),
        Policy::Uniform => run_uniform(exp),
        Policy::Eavs => run_eavs(exp),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{candidate_angles, make_geometry, GeometryParams};
    use crate::scoring::SoftmaxParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_geom() -> ConeBeamGeometry {
        make_geometry(GeometryParams {
            source_object_dist: 40.0,
            source_detector_dist: 80.0,
            det_rows: 6,
            det_cols: 6,
            det_pitch: 2.0,
            vol_shape: [4, 4, 4],
            voxel_pitch: 1.0,
        })
        .unwrap()
    }

    fn random_dmat(n: usize, rng: &mut ChaCha8Rng) -> DistanceMatrix {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = rng.gen_range(0.01..1.0);
                v[i * n + j] = d;
                v[j * n + i] = d;
            }
        }
        DistanceMatrix::from_values(n, v).unwrap()
    }

    fn random_edges(shape: Shape3, rng: &mut ChaCha8Rng) -> EdgeVolume {
        let mask: Vec<bool> = (0..shape.len()).map(|_| rng.gen_bool(0.2)).collect();
        EdgeVolume::from_mask(shape, 1.0, &mask).unwrap()
    }

    fn params(lambda: f64) -> ObjectiveParams {
        ObjectiveParams {
            softmax: SoftmaxParams::new(1.0).unwrap(),
            dispersion: DispersionParams::new(0.05, 1e-12).unwrap(),
            lambda,
            cad_scale: 1.0,
            recon_scale: 1.0,
        }
    }

    #[test]
    fn singleton_domain_returns_the_remaining_view() {
        let g = tiny_geom();
        let grid = candidate_angles(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = SelectionState::new(g, grid, Arc::new(random_dmat(4, &mut rng))).unwrap();
        for i in [3, 0, 1] {
            state.push(i).unwrap();
        }
        let e = random_edges(g.vol_shape(), &mut rng);
        assert_eq!(select_next_view(&state, &e, &e, &params(0.5)).unwrap(), 2);
        state.push(2).unwrap();
        assert!(matches!(select_next_view(&state, &e, &e, &params(0.5)), Err(Error::NoCandidates)));
        assert!(matches!(state.push(2), Err(Error::AlreadySelected(2))));
    }

    #[test]
    fn exact_ties_pick_the_smallest_angle() {
        let g = tiny_geom();
        let grid = candidate_angles(8).unwrap();
        let dmat = DistanceMatrix::from_values(8, (0..64).map(|k| if k % 9 == 0 { 0.0 } else { 1.0 }).collect()).unwrap();
        let mut state = SelectionState::new(g, grid, Arc::new(dmat)).unwrap();
        state.push(0).unwrap();
        let empty = EdgeVolume::empty(g.vol_shape(), 1.0);
        assert_eq!(select_next_view(&state, &empty, &empty, &params(0.3)).unwrap(), 1);
    }

    #[test]
    fn chosen_view_dominates_every_candidate() {
        let g = tiny_geom();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = candidate_angles(12).unwrap();
        let mut state = SelectionState::new(g, grid, Arc::new(random_dmat(12, &mut rng))).unwrap();
        state.push(4).unwrap();
        let (ec, er) = (random_edges(g.vol_shape(), &mut rng), random_edges(g.vol_shape(), &mut rng));
        let p = params(0.4);
        let best = select_next_view(&state, &ec, &er, &p).unwrap();
        let best_total = objective(best, &state, &ec, &er, &p).unwrap().total;
        for c in state.candidates() {
            assert!(best_total >= objective(c, &state, &ec, &er, &p).unwrap().total);
        }
    }

    #[test]
    fn randomized_mini_runs_never_repeat_a_view() {
        let g = tiny_geom();
        let grid = candidate_angles(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let dmat = Arc::new(random_dmat(16, &mut rng));
            let mut state = SelectionState::new(g, grid.clone(), dmat).unwrap();
            let budget = rng.gen_range(1..=16);
            let (ec, er) = (random_edges(g.vol_shape(), &mut rng), random_edges(g.vol_shape(), &mut rng));
            for n in 0..budget {
                let p = params(lambda_schedule(n + 1, 1, 17).unwrap());
                let i = select_next_view(&state, &ec, &er, &p).unwrap();
                assert!(!state.selected.contains(&i));
                state.push(i).unwrap();
            }
            let mut s = state.selected.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), budget);
        }
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_indices(360, 4).unwrap(), vec![0, 90, 180, 270]);
        let idx = uniform_indices(200, 35).unwrap();
        for (k, &i) in idx.iter().enumerate() {
            assert_eq!(i, ((k as f64 * 200.0 / 35.0).round() as usize) % 200);
        }
        let mut s = idx.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 35);
        assert_eq!(uniform_indices(10, 10).unwrap(), (0..10).collect::<Vec<_>>());
        assert!(uniform_indices(10, 11).is_err());
        assert!(uniform_indices(10, 0).is_err());
    }

    #[test]
    fn wrap180_examples() {
        assert_eq!(wrap180(185.0), 5.0);
        assert_eq!(wrap180(180.0), 0.0);
        assert_eq!(wrap180(-10.0), 10.0);
        assert_eq!(wrap180(90.0), 90.0);
        assert_eq!(wrap180(350.0), 10.0);
    }

    #[test]
    fn empty_edges_give_no_mask_overlap() {
        let e = EdgeVolume::empty(Shape3::new(16, 16, 2), 1.0);
        assert_eq!(mask_alignment(&e, 30.0, 3), 0.0);
    }

    #[test]
    fn mask_prefers_views_along_a_line() {
        let shape = Shape3::new(24, 24, 1);
        // line of edge pixels along y at x = 12; rays at θ = 0 travel along +y
        let mask: Vec<bool> = (0..shape.len()).map(|i| i % 24 == 12 && (4..20).contains(&(i / 24))).collect();
        let e = EdgeVolume::from_mask(shape, 1.0, &mask).unwrap();
        let along = mask_alignment(&e, 0.0, 3);
        let across = mask_alignment(&e, 90.0, 3);
        assert_eq!(along, 16.0 * 15.0);
        // across the line the ±1.5 px band only reaches the two neighbours
        assert_eq!(across, 14.0 * 2.0 + 2.0);
        assert_eq!(mask_alignment(&e, 180.0, 3), along);
    }

    #[test]
    fn opposite_views_have_no_angular_dispersion() {
        let grid = candidate_angles(8).unwrap();
        let p = angular_dispersion(&grid, 0.1).unwrap();
        assert!(angular_dispersion_score(&grid, 4, &[0], p) < 1e-100);
        assert!(angular_dispersion_score(&grid, 2, &[0], p) > 0.5);
        assert_eq!(angular_dispersion_score(&grid, 2, &[], p), 1.0);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!("greedy".parse::<Policy>().is_err());
    }
}
