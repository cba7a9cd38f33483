//! SIRT reconstruction on top of the projector pair.
//!
//! One iteration is `x ← x + relax · C · Aᵀ · R · (y − A x)` where `R` holds
//! inverse ray sums and `C` inverse voxel sums of the stacked system matrix.
//! With `subsets > 1` the same update is applied to interleaved subsets of the
//! views in turn (ordered-subsets SIRT), each with its own voxel sums; one
//! iteration is still one pass over all views.
//! Views can be appended one at a time so a selection loop can keep warm
//! starting from its previous estimate.

use crate::error::{Error, Result};
use crate::geometry::ConeBeamGeometry;
use crate::projector::{back_project_add, forward_project_into};
use crate::volume::{Projection, Volume};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SirtParams {
    pub iterations: usize,
    pub relax: f64,
    pub nonneg: bool,
    /// 1 for plain SIRT
    pub subsets: usize,
}

impl Default for SirtParams {
    fn default() -> Self {
        SirtParams {
            iterations: 50,
            relax: 1.0,
            nonneg: true,
            subsets: 1,
        }
    }
}

impl SirtParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("SIRT needs at least one iteration"));
        }
        if !(self.relax > 0.0 && self.relax <= 2.0) {
            return Err(Error::invalid(format!("relaxation must be in (0, 2], got {}", self.relax)));
        }
        if self.subsets == 0 {
            return Err(Error::invalid("SIRT needs at least one subset"));
        }
        Ok(())
    }
}

struct View {
    angle: f64,
    data: Vec<f64>,
    inv_ray_sum: Vec<f64>,
}

/// Incrementally extended SIRT system.
pub struct Sirt {
    geom: ConeBeamGeometry,
    views: Vec<View>,
    voxel_sum: Vec<f64>,
}

impl Sirt {
    pub fn new(geom: ConeBeamGeometry) -> Self {
        Sirt {
            geom,
            views: Vec::new(),
            voxel_sum: vec![0.0; geom.vol_shape().len()],
        }
    }

    pub fn geometry(&self) -> &ConeBeamGeometry {
        &self.geom
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn add_view(&mut self, proj: &Projection) -> Result<()> {
        let g = &self.geom;
        if proj.rows() != g.det_rows() || proj.cols() != g.det_cols() {
            return Err(Error::shape(
                format!("{}x{} projection", g.det_rows(), g.det_cols()),
                format!("{}x{}", proj.rows(), proj.cols()),
            ));
        }
        let ones = Volume::filled(g.vol_shape(), g.voxel_pitch(), 1.0);
        let mut ray_sum = vec![0.0; g.det_len()];
        forward_project_into(&ones, g, proj.angle(), &mut ray_sum)?;
        let inv_ray_sum = ray_sum.iter().map(|&s| if s > 0.0 { 1.0 / s } else { 0.0 }).collect();
        let unit = vec![1.0; g.det_len()];
        back_project_add(&unit, g, proj.angle(), &mut self.voxel_sum)?;
        self.views.push(View {
            angle: proj.angle(),
            data: proj.data().to_vec(),
            inv_ray_sum,
        });
        Ok(())
    }

    /// Runs `params.iterations` passes on `x` in place. Returns the
    /// ray-sum-weighted residual norm `‖y − A x‖_R` accumulated over each pass
    /// (for plain SIRT: the residual before each update).
    pub fn iterate(&self, x: &mut Volume, params: &SirtParams) -> Result<Vec<f64>> {
        params.validate()?;
        x.check_shape(self.geom.vol_shape())?;
        if self.views.is_empty() {
            return Err(Error::invalid("SIRT needs at least one projection"));
        }
        let subsets = params.subsets.min(self.views.len());
        let members: Vec<Vec<&View>> = (0..subsets)
            .map(|k| self.views.iter().skip(k).step_by(subsets).collect())
            .collect();
        let voxel_sums: Vec<Vec<f64>> = if subsets == 1 {
            vec![self.voxel_sum.clone()]
        } else {
            members.iter().map(|m| self.subset_voxel_sum(m)).collect::<Result<_>>()?
        };
        let inv_voxel_sums: Vec<Vec<f64>> = voxel_sums
            .into_iter()
            .map(|v| v.into_iter().map(|s| if s > 0.0 { 1.0 / s } else { 0.0 }).collect())
            .collect();
        let mut norms = Vec::with_capacity(params.iterations);
        let mut ax = vec![0.0; self.geom.det_len()];
        let mut update = vec![0.0; x.voxel_count()];
        for _ in 0..params.iterations {
            let mut norm2 = 0.0;
            for (views, inv_voxel_sum) in members.iter().zip(&inv_voxel_sums) {
                update.fill(0.0);
                for view in views {
                    forward_project_into(x, &self.geom, view.angle, &mut ax)?;
                    for ((r, &y), &w) in ax.iter_mut().zip(&view.data).zip(&view.inv_ray_sum) {
                        let diff = y - *r;
                        norm2 += diff * diff * w;
                        *r = diff * w;
                    }
                    back_project_add(&ax, &self.geom, view.angle, &mut update)?;
                }
                for ((v, &u), &c) in x.data_mut().iter_mut().zip(&update).zip(inv_voxel_sum) {
                    *v += params.relax * c * u;
                    if params.nonneg && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            norms.push(norm2.sqrt());
        }
        Ok(norms)
    }

    fn subset_voxel_sum(&self, views: &[&View]) -> Result<Vec<f64>> {
        let mut sum = vec![0.0; self.voxel_sum.len()];
        let unit = vec![1.0; self.geom.det_len()];
        for view in views {
            back_project_add(&unit, &self.geom, view.angle, &mut sum)?;
        }
        Ok(sum)
    }

    /// Plain Euclidean data residual `‖y − A x‖₂` over all views.
    pub fn residual_norm(&self, x: &Volume) -> Result<f64> {
        let mut ax = vec![0.0; self.geom.det_len()];
        let mut norm2 = 0.0;
        for view in &self.views {
            forward_project_into(x, &self.geom, view.angle, &mut ax)?;
            norm2 += ax.iter().zip(&view.data).map(|(a, y)| (y - a) * (y - a)).sum::<f64>();
        }
        Ok(norm2.sqrt())
    }
}

/// Cold-start SIRT from a set of projections.
pub fn reconstruct_sirt(
    projs: &[Projection],
    geom: &ConeBeamGeometry,
    iterations: usize,
    relax: f64,
    nonneg: bool,
) -> Result<Volume> {
    let params = SirtParams {
        iterations,
        relax,
        nonneg,
        subsets: 1,
    };
    reconstruct_with(projs, geom, &params)
}

/// Cold-start reconstruction with explicit parameters.
pub fn reconstruct_with(projs: &[Projection], geom: &ConeBeamGeometry, params: &SirtParams) -> Result<Volume> {
    params.validate()?;
    if projs.is_empty() {
        return Err(Error::invalid("SIRT needs at least one projection"));
    }
    let mut sirt = Sirt::new(*geom);
    for p in projs {
        sirt.add_view(p)?;
    }
    let mut x = Volume::zeros(geom.vol_shape(), geom.voxel_pitch());
    sirt.iterate(&mut x, params)?;
    Ok(x)
}
