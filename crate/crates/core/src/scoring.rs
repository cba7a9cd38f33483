//! View scoring: edge alignment, backprojection distance between views, the
//! dispersion penalty built on it, and the combined greedy objective.
//!
//! The alignment of view θ with an edge volume x̃ is the softmax-weighted mean
//! of its projection ỹ = A_θ x̃:
//!
//! ```text
//! I(θ) = Σ_s w_s ỹ_s,   w_s = exp(β ỹ_s) / Σ_k exp(β ỹ_k)
//! ```
//!
//! so rays that run along long edges dominate. Two views are far apart when
//! the unfiltered backprojections of the CAD model's projections differ:
//!
//! ```text
//! d(θi, θj) = ‖BP(A_θi x_cad) − BP(A_θj x_cad)‖₁ / #voxels
//! ```
//!
//! and a candidate close to already chosen views is penalised by
//! `D = exp(−γ Σ_j 1 / d(θ, θj))`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{AngleGrid, ConeBeamGeometry};
use crate::projector::{back_project, forward_project};
use crate::selection::SelectionState;
use crate::volume::{EdgeVolume, Projection, Volume};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftmaxParams {
    pub beta: f64,
}

impl SoftmaxParams {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::invalid(format!("beta must be finite and >= 0, got {beta}")));
        }
        Ok(SoftmaxParams { beta })
    }
}

impl Default for SoftmaxParams {
    fn default() -> Self {
        SoftmaxParams { beta: 1.0 }
    }
}

/// Softmax weights over all detector pixels of `y`, computed with the
/// maximum subtracted so large `beta` cannot overflow.
pub fn softmax_weights(y: &Projection, params: SoftmaxParams) -> Vec<f64> {
    softmax(y.data(), params.beta)
}

fn softmax(values: &[f64], beta: f64) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = values.iter().map(|&v| (beta * (v - m)).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= sum);
    w
}

/// `Σ w_s y_s` with softmax weights, without materialising the weights.
pub(crate) fn softmax_mean(values: &[f64], beta: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for &v in values {
        let e = (beta * (v - m)).exp();
        num += e * v;
        den += e;
    }
    num / den
}

/// Edge alignment score I(θ, x; β) of view `angle` for the binary edge volume.
pub fn edge_alignment_score(
    edge_vol: &EdgeVolume,
    geom: &ConeBeamGeometry,
    angle: f64,
    params: SoftmaxParams,
) -> Result<f64> {
    let y = forward_project(edge_vol.as_volume(), geom, angle)?;
    Ok(softmax_mean(y.data(), params.beta))
}

/// Edge alignment scores for the listed grid indices.
pub fn alignment_scores(
    edge_vol: &EdgeVolume,
    geom: &ConeBeamGeometry,
    grid: &AngleGrid,
    indices: &[usize],
    params: SoftmaxParams,
) -> Result<Vec<f64>> {
    indices
        .par_iter()
        .map(|&i| edge_alignment_score(edge_vol, geom, grid.angle(i), params))
        .collect()
}

fn cad_backprojection(cad: &Volume, geom: &ConeBeamGeometry, angle: f64) -> Result<Vec<f64>> {
    let y = forward_project(cad, geom, angle)?;
    Ok(back_project(&y, geom)?.into_data())
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    sum / a.len() as f64
}

/// Backprojection distance d(θi, θj; x_cad).
pub fn pairwise_view_distance(cad: &Volume, geom: &ConeBeamGeometry, theta_i: f64, theta_j: f64) -> Result<f64> {
    let a = cad_backprojection(cad, geom, theta_i)?;
    let b = cad_backprojection(cad, geom, theta_j)?;
    Ok(mean_abs_diff(&a, &b))
}

/// Symmetric matrix of backprojection distances over an angle grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    /// Builds the matrix from one backprojection per grid angle.
    pub fn from_backprojections(bps: &[Vec<f64>]) -> Self {
        let n = bps.len();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| ((i + 1)..n).map(|j| mean_abs_diff(&bps[i], &bps[j])).collect())
            .collect();
        let mut values = vec![0.0; n * n];
        for (i, row) in rows.iter().enumerate() {
            for (k, &d) in row.iter().enumerate() {
                let j = i + 1 + k;
                values[i * n + j] = d;
                values[j * n + i] = d;
            }
        }
        DistanceMatrix { n, values }
    }

    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::shape(n * n, values.len()));
        }
        for i in 0..n {
            if values[i * n + i] != 0.0 {
                return Err(Error::invalid("distance matrix diagonal must be zero"));
            }
            for j in 0..n {
                let v = values[i * n + j];
                if !(v.is_finite() && v >= 0.0) || v != values[j * n + i] {
                    return Err(Error::invalid("distance matrix must be finite, non-negative and symmetric"));
                }
            }
        }
        Ok(DistanceMatrix { n, values })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn median_offdiagonal(&self) -> f64 {
        let mut off: Vec<f64> = (0..self.n)
            .flat_map(|i| ((i + 1)..self.n).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect();
        if off.is_empty() {
            return 0.0;
        }
        off.sort_by(f64::total_cmp);
        let m = off.len();
        if m % 2 == 1 {
            off[m / 2]
        } else {
            0.5 * (off[m / 2 - 1] + off[m / 2])
        }
    }
}

/// Backprojection distances between every pair of grid angles. Each
/// backprojection is computed once.
pub fn build_distance_matrix(cad: &Volume, geom: &ConeBeamGeometry, grid: &AngleGrid) -> Result<DistanceMatrix> {
    let bps: Vec<Vec<f64>> = grid
        .angles()
        .par_iter()
        .map(|&a| cad_backprojection(cad, geom, a))
        .collect::<Result<_>>()?;
    Ok(DistanceMatrix::from_backprojections(&bps))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispersionParams {
    pub gamma: f64,
    pub epsilon_d: f64,
}

impl DispersionParams {
    pub fn new(gamma: f64, epsilon_d: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0 && epsilon_d.is_finite() && epsilon_d > 0.0) {
            return Err(Error::invalid(format!(
                "gamma and epsilon_d must be positive, got gamma={gamma} epsilon_d={epsilon_d}"
            )));
        }
        Ok(DispersionParams { gamma, epsilon_d })
    }

    /// γ = `gamma_scale` × median off-diagonal distance, ε = 1e-12 × max distance.
    pub fn auto(dmat: &DistanceMatrix, gamma_scale: f64) -> Result<Self> {
        let eps = (1e-12 * dmat.max()).max(f64::MIN_POSITIVE);
        Self::new(gamma_scale * dmat.median_offdiagonal(), eps)
    }
}

/// Dispersion score D(θ, Θ*) in (0, 1].
pub fn dispersion_score(
    theta_index: usize,
    selected: &[usize],
    dmat: &DistanceMatrix,
    params: DispersionParams,
) -> Result<f64> {
    if theta_index >= dmat.len() {
        return Err(Error::invalid(format!("grid index {theta_index} out of range")));
    }
    if selected.contains(&theta_index) {
        return Err(Error::AlreadySelected(theta_index));
    }
    let sum: f64 = selected
        .iter()
        .map(|&j| 1.0 / dmat.get(theta_index, j).max(params.epsilon_d))
        .sum();
    Ok((-params.gamma * sum).exp())
}

/// Weight on the CAD alignment term at selection step `n`: 1 at `n_init`,
/// decaying linearly to 0 at `n_budget`.
pub fn lambda_schedule(n: usize, n_init: usize, n_budget: usize) -> Result<f64> {
    if n_budget <= n_init {
        return Err(Error::invalid(format!(
            "budget ({n_budget}) must exceed the initial view count ({n_init})"
        )));
    }
    let l = (n_budget as f64 - n as f64) / (n_budget - n_init) as f64;
    Ok(l.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoreBreakdown {
    pub i_cad: f64,
    pub i_recon: f64,
    pub dispersion: f64,
    pub lambda: f64,
    pub total: f64,
}

impl ScoreBreakdown {
    pub fn combine(i_cad: f64, i_recon: f64, dispersion: f64, lambda: f64) -> Self {
        ScoreBreakdown {
            i_cad,
            i_recon,
            dispersion,
            lambda,
            total: lambda * i_cad + (1.0 - lambda) * i_recon + dispersion,
        }
    }
}

/// Everything the objective needs besides the state. Alignment scores are
/// divided by `cad_scale` / `recon_scale` so the three terms are commensurate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParams {
    pub softmax: SoftmaxParams,
    pub dispersion: DispersionParams,
    pub lambda: f64,
    pub cad_scale: f64,
    pub recon_scale: f64,
}

impl ObjectiveParams {
    pub(crate) fn normalise_cad(&self, raw: f64) -> f64 {
        raw / self.cad_scale
    }

    pub(crate) fn normalise_recon(&self, raw: f64) -> f64 {
        raw / self.recon_scale
    }
}

/// Per-term breakdown of the greedy objective for one candidate view.
pub fn objective(
    theta_index: usize,
    state: &SelectionState,
    edge_cad: &EdgeVolume,
    edge_recon: &EdgeVolume,
    params: &ObjectiveParams,
) -> Result<ScoreBreakdown> {
    if state.selected.contains(&theta_index) {
        return Err(Error::AlreadySelected(theta_index));
    }
    let angle = state.grid.angle(theta_index);
    let dispersion = dispersion_score(theta_index, &state.selected, &state.dmat, params.dispersion)?;
    let i_cad = params.normalise_cad(edge_alignment_score(edge_cad, &state.geom, angle, params.softmax)?);
    let i_recon = params.normalise_recon(edge_alignment_score(edge_recon, &state.geom, angle, params.softmax)?);
    Ok(ScoreBreakdown::combine(i_cad, i_recon, dispersion, params.lambda))
}
