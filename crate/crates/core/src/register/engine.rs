use std::time::{Duration, Instant};

use crate::deform::{
    apply_upstream, bending_energy, bending_energy_accumulate, downsample_mean, jacobian_determinant_min, upsample_ddf,
    warp_trilinear, warp_with_image_gradient, Ddf,
};
use crate::error::{Error, Result};
use crate::lowrank::{build_projector, LowRankProjector, SliceLayout};
use crate::register::adam::Adam;
use crate::register::config::{LossKind, RegConfig};
use crate::scalar::Real;
use crate::similarity::{mse_loss, mse_loss_and_grad, ncc_loss, ncc_loss_and_grad};
use crate::volume::Volume;

/// `total = similarity + λ · regularization`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub similarity: f64,
    pub regularization: f64,
}

/// Similarity term bound to one fixed image.
///
/// The low-rank residual enters the objective per slice pixel, i.e. divided
/// by the slice area, so that its scale against the bending term matches the
/// per-voxel MSE and one λ serves every loss.
pub enum Similarity<'a, T> {
    Lrr(&'a LowRankProjector<T>),
    Mse,
    Ncc,
}

impl<'a, T: Real> Similarity<'a, T> {
    pub fn value(&self, warped: &Volume<T>, fixed: &Volume<T>) -> Result<f64> {
        match self {
            Similarity::Lrr(p) => Ok(p.loss(warped)? * lrr_weight(p)),
            Similarity::Mse => mse_loss(warped, fixed),
            Similarity::Ncc => ncc_loss(warped, fixed),
        }
    }

    pub fn value_and_grad(&self, warped: &Volume<T>, fixed: &Volume<T>) -> Result<(f64, Volume<T>)> {
        match self {
            Similarity::Lrr(p) => {
                let w = lrr_weight(p);
                let (v, g) = p.loss_and_grad(warped)?;
                let k = T::lit(w);
                Ok((v * w, g.map(|x| x * k)))
            }
            Similarity::Mse => mse_loss_and_grad(warped, fixed),
            Similarity::Ncc => ncc_loss_and_grad(warped, fixed),
        }
    }
}

fn lrr_weight<T: Real>(p: &LowRankProjector<T>) -> f64 {
    let l = p.layout();
    1.0 / (l.rows * l.cols) as f64
}

fn similarity_for<'a, T: Real>(
    cfg: &RegConfig,
    fixed: &Volume<T>,
    projector: Option<&'a LowRankProjector<T>>,
) -> Result<Similarity<'a, T>> {
    match (cfg.loss, projector) {
        (LossKind::Lrr, Some(p)) => {
            fixed.dims().check_same(p.dims())?;
            if p.rank() != cfg.rank || p.axis() != cfg.axis {
                return Err(Error::InvalidArgument(format!(
                    "projector (rank {}, axis {}) does not match config (rank {}, axis {})",
                    p.rank(),
                    p.axis(),
                    cfg.rank,
                    cfg.axis
                )));
            }
            // The projector must come from this fixed image: U_rᵀ F V_r = Σ_r.
            let anchor = p.loss(fixed)?;
            let energy: f64 = p.slices().iter().map(|s| s.sigma.iter().map(|x| x.as_f64().powi(2)).sum::<f64>()).sum::<f64>()
                / p.slices().len() as f64;
            if anchor > 1e-6 * energy.max(f64::MIN_POSITIVE) {
                return Err(Error::InvalidArgument("projector was not built from this fixed image".into()));
            }
            Ok(Similarity::Lrr(p))
        }
        (LossKind::Lrr, None) => Err(Error::InvalidArgument("LRR loss needs a projector".into())),
        (LossKind::Mse, _) => Ok(Similarity::Mse),
        (LossKind::Ncc, _) => Ok(Similarity::Ncc),
    }
}

/// Value of the registration objective for an already-warped image.
pub fn objective<T: Real>(
    warped: &Volume<T>,
    fixed: &Volume<T>,
    ddf: &Ddf<T>,
    cfg: &RegConfig,
    projector: Option<&LowRankProjector<T>>,
) -> Result<ObjectiveValue> {
    fixed.dims().check_same(warped.dims())?;
    fixed.dims().check_same(ddf.dims())?;
    let sim = similarity_for(cfg, fixed, projector)?;
    let similarity = sim.value(warped, fixed)?;
    let regularization = bending_energy(ddf)?;
    Ok(ObjectiveValue { total: similarity + cfg.lambda * regularization, similarity, regularization })
}

/// Objective at `ddf` (warping `moving` internally) and its gradient with
/// respect to every displacement component.
pub fn objective_and_grad<T: Real>(
    moving: &Volume<T>,
    fixed: &Volume<T>,
    ddf: &Ddf<T>,
    cfg: &RegConfig,
    projector: Option<&LowRankProjector<T>>,
) -> Result<(ObjectiveValue, Ddf<T>)> {
    fixed.dims().check_same(ddf.dims())?;
    let sim = similarity_for(cfg, fixed, projector)?;
    eval_with_grad(&sim, moving, fixed, ddf, cfg.lambda)
}

fn eval_with_grad<T: Real>(
    sim: &Similarity<'_, T>,
    moving: &Volume<T>,
    fixed: &Volume<T>,
    ddf: &Ddf<T>,
    lambda: f64,
) -> Result<(ObjectiveValue, Ddf<T>)> {
    let (warped, mut grad) = warp_with_image_gradient(moving, ddf)?;
    let (similarity, upstream) = sim.value_and_grad(&warped, fixed)?;
    apply_upstream(&mut grad, upstream.data());
    let regularization = if lambda > 0.0 { bending_energy_accumulate(ddf, &mut grad, lambda)? } else { bending_energy(ddf)? };
    Ok((ObjectiveValue { total: similarity + lambda * regularization, similarity, regularization }, grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    /// Step index within the level.
    pub step: usize,
    /// Pyramid level, 0 = coarsest.
    pub level: usize,
    pub lr: f64,
    pub total: f64,
    pub similarity: f64,
    pub regularization: f64,
}

#[derive(Clone, Debug)]
pub struct RegResult<T> {
    pub ddf: Ddf<T>,
    /// Objective before every optimizer update, all levels in order.
    pub trace: Vec<TraceRow>,
    pub steps_per_level: Vec<usize>,
    pub converged_per_level: Vec<bool>,
    /// Objective of the returned field at full resolution.
    pub final_objective: ObjectiveValue,
    pub min_jacobian: f64,
    pub duration: Duration,
}

impl<T: Real> RegResult<T> {
    pub fn steps_taken(&self) -> usize {
        self.steps_per_level.iter().sum()
    }
}

/// Per-pair optimization of a dense displacement field, coarse to fine.
pub fn register<T: Real>(moving: &Volume<T>, fixed: &Volume<T>, cfg: &RegConfig) -> Result<RegResult<T>> {
    cfg.validate()?;
    fixed.dims().check_same(moving.dims())?;
    if !moving.is_finite() || !fixed.is_finite() {
        return Err(Error::NonFinite("input volume"));
    }
    let start = Instant::now();

    // pyramid[levels - 1] is full resolution
    let mut pyramid = vec![(moving.clone(), fixed.clone())];
    for _ in 1..cfg.levels {
        let (m, f) = pyramid.last().unwrap();
        pyramid.push((downsample_mean(m), downsample_mean(f)));
    }
    pyramid.reverse();
    if let Some((m, _)) = pyramid.first() {
        if m.dims().min_axis() < 3 {
            return Err(Error::TooSmall { dims: m.dims(), min: 3 });
        }
    }

    let schedule = cfg.schedule();
    let mut trace = Vec::new();
    let mut steps_per_level = Vec::with_capacity(cfg.levels);
    let mut converged_per_level = Vec::with_capacity(cfg.levels);
    let mut ddf: Option<Ddf<T>> = None;
    let mut last_projector = None;

    for (level, (mov, fix)) in pyramid.iter().enumerate() {
        let dims = fix.dims();
        let mut field = match ddf.take() {
            None => Ddf::zeros(dims),
            Some(prev) => upsample_ddf(&prev, dims),
        };
        let projector = match cfg.loss {
            LossKind::Lrr => {
                let max = SliceLayout::new(dims, cfg.axis).max_rank();
                let rank = cfg.rank_at_level(level);
                if level + 1 == cfg.levels && rank > max {
                    return Err(Error::RankOutOfRange { rank, max });
                }
                Some(build_projector(fix, rank.min(max), cfg.axis)?)
            }
            _ => None,
        };
        let sim = match &projector {
            Some(p) => Similarity::Lrr(p),
            None if cfg.loss == LossKind::Mse => Similarity::Mse,
            None => Similarity::Ncc,
        };

        let mut adam = Adam::<T>::new(&[dims.len(); 3], cfg.beta1, cfg.beta2, cfg.eps);
        let level_start = trace.len();
        let mut converged = false;
        let mut taken = 0;
        for step in 0..cfg.steps {
            let lr = schedule.at(step);
            let (value, grad) = eval_with_grad(&sim, mov, fix, &field, cfg.lambda)?;
            if !value.total.is_finite() {
                return Err(Error::NumericalAbort { level, step, what: format!("objective is {value:?}") });
            }
            if !grad.is_finite() {
                return Err(Error::NumericalAbort { level, step, what: "gradient has non-finite entries".into() });
            }
            trace.push(TraceRow {
                step,
                level,
                lr,
                total: value.total,
                similarity: value.similarity,
                regularization: value.regularization,
            });
            taken = step + 1;
            let here = trace.len() - 1;
            if here - level_start >= cfg.tol_window {
                let past = trace[here - cfg.tol_window].total;
                let rel = (value.total - past).abs() / past.abs().max(f64::MIN_POSITIVE);
                if rel < cfg.tol {
                    converged = true;
                    break;
                }
            }
            adam.step_scaled(field.components_mut(), grad.components(), lr, cfg.displacement_scale);
        }
        steps_per_level.push(taken);
        converged_per_level.push(converged);
        ddf = Some(field);
        last_projector = projector;
    }

    let ddf = ddf.expect("at least one level");
    let sim = match &last_projector {
        Some(p) => Similarity::Lrr(p),
        None if cfg.loss == LossKind::Mse => Similarity::Mse,
        None => Similarity::Ncc,
    };
    let warped = warp_trilinear(moving, &ddf)?;
    let similarity = sim.value(&warped, fixed)?;
    let regularization = bending_energy(&ddf)?;
    let final_objective = ObjectiveValue { total: similarity + cfg.lambda * regularization, similarity, regularization };
    if !final_objective.total.is_finite() {
        return Err(Error::NumericalAbort {
            level: cfg.levels - 1,
            step: cfg.steps,
            what: format!("final objective is {final_objective:?}"),
        });
    }
    let min_jacobian = jacobian_determinant_min(&ddf)?;
    Ok(RegResult {
        ddf,
        trace,
        steps_per_level,
        converged_per_level,
        final_objective,
        min_jacobian,
        duration: start.elapsed(),
    })
}
