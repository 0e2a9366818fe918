//! Low-rank similarity anchored to the fixed image.
//!
//! Each 2D slice `F_s` of the fixed image is decomposed once as
//! `F_s = U Σ Vᵀ`. The projection of any image slice `W_s` is the `r×r` matrix
//! `U_rᵀ W_s V_r`, and because `U_rᵀ F_s V_r = Σ_r` the similarity between a
//! warped image and the fixed image reduces to `‖U_rᵀ W_s V_r − Σ_r‖_F`. The
//! factors never depend on the warped image, so the loss is a quadratic in the
//! warped intensities with a closed-form gradient.
//!
//! Slice matrices have the slower remaining axis as rows and the faster one as
//! columns: Z-slices are `ny × nx`, Y-slices `nz × nx`, X-slices `nz × ny`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, thin_svd, truncate, MatMut, MatRef, Matrix};
use crate::scalar::Real;
use crate::volume::{Dims, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceAxis {
    X,
    Y,
    #[default]
    Z,
}

impl fmt::Display for SliceAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SliceAxis::X => "x",
            SliceAxis::Y => "y",
            SliceAxis::Z => "z",
        })
    }
}

impl FromStr for SliceAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(SliceAxis::X),
            "y" => Ok(SliceAxis::Y),
            "z" => Ok(SliceAxis::Z),
            other => Err(Error::InvalidArgument(format!("unknown slice axis `{other}`"))),
        }
    }
}

/// How slices along one axis map onto the linear voxel buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SliceLayout {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    row_stride: usize,
    col_stride: usize,
    slice_stride: usize,
}

impl SliceLayout {
    pub fn new(dims: Dims, axis: SliceAxis) -> Self {
        let Dims { nx, ny, nz } = dims;
        match axis {
            SliceAxis::Z => SliceLayout { count: nz, rows: ny, cols: nx, row_stride: nx, col_stride: 1, slice_stride: nx * ny },
            SliceAxis::Y => SliceLayout { count: ny, rows: nz, cols: nx, row_stride: nx * ny, col_stride: 1, slice_stride: nx },
            SliceAxis::X => SliceLayout { count: nx, rows: nz, cols: ny, row_stride: nx * ny, col_stride: nx, slice_stride: 1 },
        }
    }

    pub fn max_rank(&self) -> usize {
        self.rows.min(self.cols)
    }

    fn view<'a, T: Real>(&self, data: &'a [T], s: usize) -> MatRef<'a, T> {
        MatRef::new(data, s * self.slice_stride, self.rows, self.cols, self.row_stride as isize, self.col_stride as isize)
    }

    fn view_mut<'a, T: Real>(&self, data: &'a mut [T], s: usize) -> MatMut<'a, T> {
        MatMut::new(data, s * self.slice_stride, self.rows, self.cols, self.row_stride as isize, self.col_stride as isize)
    }

    /// Copies slice `s` into an owned matrix.
    pub fn extract<T: Real, U: Real>(&self, data: &[T], s: usize) -> Matrix<U> {
        let base = s * self.slice_stride;
        Matrix::from_fn(self.rows, self.cols, |i, j| U::lit(data[base + i * self.row_stride + j * self.col_stride].as_f64()))
    }

    /// Writes an owned matrix into slice `s`.
    pub fn insert<T: Real>(&self, data: &mut [T], s: usize, m: &Matrix<T>) {
        let base = s * self.slice_stride;
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[base + i * self.row_stride + j * self.col_stride] = m[(i, j)];
            }
        }
    }
}

/// Truncated factors of one fixed-image slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceFactors<T> {
    /// `rows × r`
    pub u: Matrix<T>,
    /// `cols × r`
    pub v: Matrix<T>,
    pub sigma: Vec<T>,
    /// Full singular spectrum of the slice (all `min(rows, cols)` values).
    pub spectrum: Vec<f64>,
}

/// Per-slice rank-`r` bases of the fixed image. Immutable once built.
#[derive(Clone, Debug)]
pub struct LowRankProjector<T> {
    axis: SliceAxis,
    rank: usize,
    dims: Dims,
    layout: SliceLayout,
    slices: Vec<SliceFactors<T>>,
}

/// Builds the projector with one thin SVD per slice (computed in `f64`).
pub fn build_projector<T: Real>(fixed: &Volume<T>, rank: usize, axis: SliceAxis) -> Result<LowRankProjector<T>> {
    let dims = fixed.dims();
    let layout = SliceLayout::new(dims, axis);
    let max = layout.max_rank();
    if rank == 0 || rank > max {
        return Err(Error::RankOutOfRange { rank, max });
    }
    let data = fixed.data();
    let slices = (0..layout.count)
        .into_par_iter()
        .map(|s| -> Result<SliceFactors<T>> {
            let m: Matrix<f64> = layout.extract(data, s);
            let svd = thin_svd(&m)?;
            let tr = truncate(&svd, rank)?;
            Ok(SliceFactors { u: tr.u.cast(), v: tr.v.cast(), sigma: tr.s.iter().map(|&x| T::lit(x)).collect(), spectrum: svd.s })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LowRankProjector { axis, rank, dims, layout, slices })
}

/// Squared and unsquared forms of the slice-averaged residual.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrrTerms {
    /// `mean_s ‖U_rᵀ W_s V_r − Σ_r‖_F²`, the optimized quantity.
    pub mean_squared: f64,
    /// `mean_s ‖U_rᵀ W_s V_r − Σ_r‖_F`.
    pub mean_norm: f64,
}

impl<T: Real> LowRankProjector<T> {
    pub fn axis(&self) -> SliceAxis {
        self.axis
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn layout(&self) -> SliceLayout {
        self.layout
    }

    pub fn slices(&self) -> &[SliceFactors<T>] {
        &self.slices
    }

    fn check(&self, v: &Volume<T>) -> Result<()> {
        self.dims.check_same(v.dims())
    }

    /// `U_rᵀ W_s V_r` for one slice.
    fn project_slice(&self, data: &[T], s: usize) -> Matrix<T> {
        let f = &self.slices[s];
        let r = self.rank;
        let mut wv = Matrix::zeros(self.layout.rows, r);
        gemm(T::one(), self.layout.view(data, s), f.v.view(), T::zero(), wv.view_mut());
        let mut p = Matrix::zeros(r, r);
        gemm(T::one(), f.u.view().t(), wv.view(), T::zero(), p.view_mut());
        p
    }

    fn residual_slice(&self, data: &[T], s: usize) -> Matrix<T> {
        let mut p = self.project_slice(data, s);
        for (i, &sv) in self.slices[s].sigma.iter().enumerate() {
            p[(i, i)] -= sv;
        }
        p
    }

    /// `U_r · M · V_rᵀ` accumulated into slice `s` of `out` as `alpha * (...) + beta * out`.
    fn lift_slice(&self, m: &Matrix<T>, s: usize, alpha: T, beta: T, out: &mut [T]) {
        let f = &self.slices[s];
        let mut um = Matrix::zeros(self.layout.rows, self.rank);
        gemm(T::one(), f.u.view(), m.view(), T::zero(), um.view_mut());
        gemm(alpha, um.view(), f.v.view().t(), beta, self.layout.view_mut(out, s));
    }

    /// Stack of `r×r` projections, one per slice.
    pub fn project(&self, v: &Volume<T>) -> Result<Vec<Matrix<T>>> {
        self.check(v)?;
        let data = v.data();
        Ok((0..self.layout.count).into_par_iter().map(|s| self.project_slice(data, s)).collect())
    }

    /// Mean over slices of the squared Frobenius residual.
    pub fn loss(&self, warped: &Volume<T>) -> Result<f64> {
        Ok(self.loss_terms(warped)?.mean_squared)
    }

    pub fn loss_terms(&self, warped: &Volume<T>) -> Result<LrrTerms> {
        self.check(warped)?;
        let data = warped.data();
        let per_slice: Vec<f64> = (0..self.layout.count)
            .into_par_iter()
            .map(|s| {
                let r = self.residual_slice(data, s);
                r.data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>()
            })
            .collect();
        let n = per_slice.len() as f64;
        Ok(LrrTerms {
            mean_squared: per_slice.iter().sum::<f64>() / n,
            mean_norm: per_slice.iter().map(|x| x.sqrt()).sum::<f64>() / n,
        })
    }

    /// Loss and its gradient `(2/n) U_r (U_rᵀ W V_r − Σ_r) V_rᵀ` per slice.
    pub fn loss_and_grad(&self, warped: &Volume<T>) -> Result<(f64, Volume<T>)> {
        self.check(warped)?;
        let data = warped.data();
        let residuals: Vec<Matrix<T>> = (0..self.layout.count).into_par_iter().map(|s| self.residual_slice(data, s)).collect();
        let n = residuals.len();
        let loss = residuals.iter().map(|r| r.data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>()).sum::<f64>() / n as f64;
        let mut grad = Volume::zeros(self.dims).with_spacing(warped.spacing());
        let scale = T::lit(2.0 / n as f64);
        for (s, r) in residuals.iter().enumerate() {
            self.lift_slice(r, s, scale, T::zero(), grad.data_mut());
        }
        Ok((loss, grad))
    }

    pub fn grad(&self, warped: &Volume<T>) -> Result<Volume<T>> {
        Ok(self.loss_and_grad(warped)?.1)
    }

    /// Full-size rank-`r` image `U_r U_rᵀ W_s V_r V_rᵀ` per slice.
    pub fn reconstruct(&self, v: &Volume<T>) -> Result<Volume<T>> {
        self.check(v)?;
        let data = v.data();
        let projections: Vec<Matrix<T>> = (0..self.layout.count).into_par_iter().map(|s| self.project_slice(data, s)).collect();
        let mut out = Volume::zeros(self.dims).with_spacing(v.spacing());
        for (s, p) in projections.iter().enumerate() {
            self.lift_slice(p, s, T::one(), T::zero(), out.data_mut());
        }
        Ok(out)
    }
}

pub fn project<T: Real>(p: &LowRankProjector<T>, v: &Volume<T>) -> Result<Vec<Matrix<T>>> {
    p.project(v)
}

pub fn lrr_loss<T: Real>(p: &LowRankProjector<T>, warped: &Volume<T>) -> Result<f64> {
    p.loss(warped)
}

pub fn lrr_loss_grad<T: Real>(p: &LowRankProjector<T>, warped: &Volume<T>) -> Result<Volume<T>> {
    p.grad(warped)
}

pub fn reconstruct_lowrank_image<T: Real>(p: &LowRankProjector<T>, v: &Volume<T>) -> Result<Volume<T>> {
    p.reconstruct(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: Dims, seed: u64) -> Volume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, |_, _, _| rng.random_range(0.0..1.0))
    }

    fn diag_err(p: &Matrix<f64>, sigma: &[f64]) -> f64 {
        let mut e = 0.0;
        for i in 0..p.rows() {
            for j in 0..p.cols() {
                let t = if i == j { sigma[i] } else { 0.0 };
                e += (p[(i, j)] - t).powi(2);
            }
        }
        e.sqrt()
    }

    #[test]
    fn layouts_cover_every_voxel_once() {
        let dims = Dims::new(4, 3, 2);
        for axis in [SliceAxis::X, SliceAxis::Y, SliceAxis::Z] {
            let l = SliceLayout::new(dims, axis);
            let mut seen = vec![0u8; dims.len()];
            let data: Vec<f64> = (0..dims.len()).map(|i| i as f64).collect();
            for s in 0..l.count {
                let m: Matrix<f64> = l.extract(&data, s);
                for &v in m.data() {
                    seen[v as usize] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1), "{axis}");
        }
        let z = SliceLayout::new(dims, SliceAxis::Z);
        assert_eq!((z.rows, z.cols), (3, 4));
        let x = SliceLayout::new(dims, SliceAxis::X);
        assert_eq!((x.rows, x.cols), (2, 3));
    }

    #[test]
    fn identity_anchor_all_axes() {
        let fixed = random_volume(Dims::new(9, 7, 6), 1);
        for axis in [SliceAxis::X, SliceAxis::Y, SliceAxis::Z] {
            let p = build_projector(&fixed, 3, axis).unwrap();
            let proj = p.project(&fixed).unwrap();
            for (m, f) in proj.iter().zip(p.slices()) {
                assert!(diag_err(m, &f.sigma) <= 1e-6);
            }
            assert!(p.loss(&fixed).unwrap() <= 1e-10);
            let g = p.grad(&fixed).unwrap();
            assert!(g.data().iter().all(|x| x.abs() <= 1e-8));
        }
    }

    #[test]
    fn rank_bounds() {
        let fixed = random_volume(Dims::new(6, 5, 4), 2);
        assert!(matches!(build_projector(&fixed, 0, SliceAxis::Z), Err(Error::RankOutOfRange { .. })));
        assert!(matches!(build_projector(&fixed, 6, SliceAxis::Z), Err(Error::RankOutOfRange { max: 5, .. })));
        assert!(build_projector(&fixed, 5, SliceAxis::Z).is_ok());
        assert!(build_projector(&fixed, 4, SliceAxis::X).is_ok());
        assert!(build_projector(&fixed, 5, SliceAxis::X).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let p = build_projector(&random_volume(Dims::new(6, 5, 4), 2), 2, SliceAxis::Z).unwrap();
        let other = random_volume(Dims::new(5, 5, 4), 3);
        assert!(matches!(p.loss(&other), Err(Error::DimMismatch { .. })));
        assert!(p.project(&other).is_err());
        assert!(p.grad(&other).is_err());
        assert!(p.reconstruct(&other).is_err());
    }

    #[test]
    fn zero_and_linearity() {
        let dims = Dims::new(8, 6, 5);
        let p = build_projector(&random_volume(dims, 4), 3, SliceAxis::Y).unwrap();
        let zero = p.project(&Volume::zeros(dims)).unwrap();
        assert!(zero.iter().all(|m| m.data().iter().all(|&x| x == 0.0)));
        let a = random_volume(dims, 5);
        let b = random_volume(dims, 6);
        let (al, be) = (0.7, -1.3);
        let mut comb = a.clone();
        for (c, (&x, &y)) in comb.data_mut().iter_mut().zip(a.data().iter().zip(b.data())) {
            *c = al * x + be * y;
        }
        let pa = p.project(&a).unwrap();
        let pb = p.project(&b).unwrap();
        let pc = p.project(&comb).unwrap();
        for s in 0..pa.len() {
            for k in 0..pa[s].data().len() {
                let lhs = pc[s].data()[k];
                let rhs = al * pa[s].data()[k] + be * pb[s].data()[k];
                assert!((lhs - rhs).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn reconstruction_of_fixed_is_truncated_svd() {
        let dims = Dims::new(10, 8, 3);
        let fixed = random_volume(dims, 8);
        let p = build_projector(&fixed, 4, SliceAxis::Z).unwrap();
        let rec = p.reconstruct(&fixed).unwrap();
        let layout = p.layout();
        for s in 0..layout.count {
            let f = &p.slices()[s];
            let direct = crate::linalg::reconstruct(&f.u, &f.sigma, &f.v).unwrap();
            let got: Matrix<f64> = layout.extract(rec.data(), s);
            assert!(got.sub(&direct).unwrap().frobenius_norm() <= 1e-6);
        }
        let twice = p.reconstruct(&rec).unwrap();
        assert!(twice.distance(&rec).unwrap() <= 1e-6);
    }

    #[test]
    fn reconstruction_error_monotone_in_rank() {
        let dims = Dims::new(9, 9, 2);
        let fixed = random_volume(dims, 10);
        let v = random_volume(dims, 11);
        let mut prev = f64::INFINITY;
        for r in 1..=9 {
            let p = build_projector(&fixed, r, SliceAxis::Z).unwrap();
            let e = p.reconstruct(&v).unwrap().distance(&v).unwrap();
            assert!(e <= prev + 1e-9, "rank {r}: {e} > {prev}");
            prev = e;
        }
        assert!(prev <= 1e-9);
    }

    #[test]
    fn loss_terms_relation() {
        let dims = Dims::new(7, 6, 4);
        let p = build_projector(&random_volume(dims, 12), 2, SliceAxis::Z).unwrap();
        let t = p.loss_terms(&random_volume(dims, 13)).unwrap();
        assert!(t.mean_norm > 0.0);
        // Jensen: mean of norms squared <= mean of squared norms
        assert!(t.mean_norm * t.mean_norm <= t.mean_squared + 1e-12);
    }
}
