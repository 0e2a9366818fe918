//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns of a working copy of `A` are rotated pairwise until every pair is
//! numerically orthogonal; the accumulated rotations form `V`, the column norms
//! are the singular values and the normalized columns form `U`. Wide matrices
//! are handled through their transpose.

use crate::error::{Error, Result};
use crate::linalg::matrix::Matrix;
use crate::scalar::{dot, Real};

/// Upper bound on full sweeps over all column pairs.
pub const MAX_SWEEPS: usize = 60;

/// `A = U · diag(s) · Vᵀ` with `k = min(rows, cols)` columns in `U` and `V`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThinSvd<T> {
    pub u: Matrix<T>,
    pub s: Vec<T>,
    pub v: Matrix<T>,
}

impl<T: Real> ThinSvd<T> {
    pub fn rank_capacity(&self) -> usize {
        self.s.len()
    }
}

/// Leading `r` singular triples of a decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct Truncated<T> {
    pub u: Matrix<T>,
    pub s: Vec<T>,
    pub v: Matrix<T>,
}

impl<T: Real> Truncated<T> {
    pub fn rank(&self) -> usize {
        self.s.len()
    }
}

pub fn thin_svd<T: Real>(a: &Matrix<T>) -> Result<ThinSvd<T>> {
    let m = a.rows().max(a.cols());
    thin_svd_with_tol(a, T::epsilon().as_f64() * m as f64)
}

/// [`thin_svd`] with an explicit pair-orthogonality tolerance: a pair is
/// rotated while `|bᵢ·bⱼ| > tol · ‖bᵢ‖ ‖bⱼ‖`.
pub fn thin_svd_with_tol<T: Real>(a: &Matrix<T>, tol: f64) -> Result<ThinSvd<T>> {
    if !a.is_finite() {
        return Err(Error::NonFinite("matrix passed to thin_svd"));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("svd tolerance must be positive, got {tol}")));
    }
    let tol = T::lit(tol);
    if a.rows() < a.cols() {
        let t = jacobi_tall(&a.transpose(), tol);
        let mut out = ThinSvd { u: t.v, s: t.s, v: t.u };
        apply_sign_convention(&mut out);
        Ok(out)
    } else {
        let mut out = jacobi_tall(a, tol);
        apply_sign_convention(&mut out);
        Ok(out)
    }
}

/// Jacobi on a matrix with `rows >= cols`; columns are kept contiguous.
fn jacobi_tall<T: Real>(a: &Matrix<T>, tol: T) -> ThinSvd<T> {
    let (m, n) = a.shape();
    // Column-major working copies.
    let mut b = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            b[j * m + i] = a[(i, j)];
        }
    }
    let mut v = vec![T::zero(); n * n];
    for j in 0..n {
        v[j * n + j] = T::one();
    }

    let mut norms: Vec<T> = (0..n).map(|j| dot(col(&b, m, j), col(&b, m, j))).collect();
    let frob = norms.iter().copied().sum::<T>().sqrt();
    // squared column norms below this are rounding noise and end up as null columns
    let negligible = (frob * T::epsilon()).powi(2);

    for sweep in 0..MAX_SWEEPS {
        if sweep > 0 {
            // the in-sweep updates drift; start every sweep from exact norms
            for (j, nj) in norms.iter_mut().enumerate() {
                *nj = dot(col(&b, m, j), col(&b, m, j));
            }
        }
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(col(&b, m, p), col(&b, m, q));
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut b, m, p, q, c, s);
                rotate_pair(&mut v, n, p, q, c, s);
                norms[p] = (alpha - t * gamma).max(T::zero());
                norms[q] = (beta + t * gamma).max(T::zero());
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<T> = (0..n).map(|j| dot(col(&b, m, j), col(&b, m, j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap().then(i.cmp(&j)));

    let null_below = frob * T::epsilon();

    let mut u = Matrix::zeros(m, n);
    let mut vm = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut null_cols = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let sj = sigma[j];
        if sj > null_below && sj > T::zero() {
            let inv = T::one() / sj;
            for i in 0..m {
                u[(i, k)] = b[j * m + i] * inv;
            }
            s.push(sj);
        } else {
            null_cols.push(k);
            s.push(T::zero());
        }
        for i in 0..n {
            vm[(i, k)] = v[j * n + i];
        }
    }
    complete_orthonormal(&mut u, &null_cols);
    ThinSvd { u, s, v: vm }
}

#[inline]
fn col<T>(data: &[T], m: usize, j: usize) -> &[T] {
    &data[j * m..(j + 1) * m]
}

fn rotate_pair<T: Real>(data: &mut [T], m: usize, p: usize, q: usize, c: T, s: T) {
    debug_assert!(p < q);
    let (head, tail) = data.split_at_mut(q * m);
    let cp = &mut head[p * m..(p + 1) * m];
    let cq = &mut tail[..m];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every other
/// column, picking the standard basis vector with the largest residual.
fn complete_orthonormal<T: Real>(u: &mut Matrix<T>, fill: &[usize]) {
    if fill.is_empty() {
        return;
    }
    let (m, k) = u.shape();
    let mut basis: Vec<Vec<T>> = (0..k).filter(|j| !fill.contains(j)).map(|j| u.column(j)).collect();
    for &target in fill {
        // Σ_e ‖(I − QQᵀ)e‖² = m − |Q|, so some basis vector clears half the average.
        let floor = T::lit(0.5 * (m - basis.len()) as f64 / m as f64);
        let mut chosen = None;
        for e in 0..m {
            let resid = T::one() - basis.iter().map(|q| q[e] * q[e]).sum::<T>();
            if resid < floor {
                continue;
            }
            let mut cand = vec![T::zero(); m];
            cand[e] = T::one();
            for _ in 0..2 {
                for q in &basis {
                    let proj = dot(q, &cand);
                    for (c, &qv) in cand.iter_mut().zip(q) {
                        *c -= proj * qv;
                    }
                }
            }
            let norm2 = dot(&cand, &cand);
            if norm2 >= floor {
                chosen = Some((norm2.sqrt(), cand));
                break;
            }
        }
        let (norm, mut cand) = chosen.expect("a standard basis vector with a large residual exists");
        let inv = T::one() / norm;
        cand.iter_mut().for_each(|c| *c *= inv);
        for i in 0..m {
            u[(i, target)] = cand[i];
        }
        basis.push(cand);
    }
}

/// Flips `(u_j, v_j)` so that the first entry of `u_j` above rounding level is
/// non-negative.
fn apply_sign_convention<T: Real>(svd: &mut ThinSvd<T>) {
    let (m, k) = svd.u.shape();
    let thresh = T::epsilon() * T::lit(16.0);
    for j in 0..k {
        let lead = (0..m).map(|i| svd.u[(i, j)]).find(|x| x.abs() > thresh);
        if matches!(lead, Some(x) if x < T::zero()) {
            for i in 0..m {
                svd.u[(i, j)] = -svd.u[(i, j)];
            }
            for i in 0..svd.v.rows() {
                svd.v[(i, j)] = -svd.v[(i, j)];
            }
        }
    }
}

/// Keeps the leading `r` singular triples.
pub fn truncate<T: Real>(svd: &ThinSvd<T>, r: usize) -> Result<Truncated<T>> {
    let k = svd.rank_capacity();
    if r == 0 || r > k {
        return Err(Error::RankOutOfRange { rank: r, max: k });
    }
    Ok(Truncated { u: svd.u.leading_columns(r), s: svd.s[..r].to_vec(), v: svd.v.leading_columns(r) })
}

/// `U_r · diag(S_r) · V_rᵀ`.
pub fn reconstruct<T: Real>(u: &Matrix<T>, s: &[T], v: &Matrix<T>) -> Result<Matrix<T>> {
    let r = s.len();
    if r == 0 {
        return Err(Error::RankOutOfRange { rank: 0, max: u.cols() });
    }
    if u.cols() != r || v.cols() != r {
        return Err(Error::Shape(format!(
            "factors U {:?}, S {}, V {:?} do not conform",
            u.shape(),
            r,
            v.shape()
        )));
    }
    let mut us = u.clone();
    for i in 0..us.rows() {
        for j in 0..r {
            us[(i, j)] *= s[j];
        }
    }
    us.matmul(&v.transpose())
}

impl<T: Real> Truncated<T> {
    pub fn reconstruct(&self) -> Result<Matrix<T>> {
        reconstruct(&self.u, &self.s, &self.v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn orth_err(q: &Matrix<f64>) -> f64 {
        let g = q.t_matmul(q).unwrap();
        g.sub(&Matrix::identity(q.cols())).unwrap().frobenius_norm()
    }

    #[test]
    fn identity_and_diagonal() {
        let svd = thin_svd(&Matrix::<f64>::identity(3)).unwrap();
        assert_eq!(svd.s, vec![1.0, 1.0, 1.0]);
        let d = Matrix::from_diag(&[1.0, 3.0, 2.0]);
        let svd = thin_svd(&d).unwrap();
        assert_eq!(svd.s, vec![3.0, 2.0, 1.0]);
        for j in 0..3 {
            let uj = svd.u.column(j);
            assert_eq!(uj.iter().filter(|x: &&f64| x.abs() == 1.0).count(), 1);
        }
    }

    #[test]
    fn wide_and_tall_invariants() {
        for &(m, n) in &[(8, 6), (6, 8), (1, 5), (5, 1), (17, 17)] {
            let a = random(m, n, (m * 31 + n) as u64);
            let svd = thin_svd(&a).unwrap();
            let k = m.min(n);
            assert_eq!(svd.u.shape(), (m, k));
            assert_eq!(svd.v.shape(), (n, k));
            assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
            assert!(orth_err(&svd.u) < 1e-10 && orth_err(&svd.v) < 1e-10);
            let rec = reconstruct(&svd.u, &svd.s, &svd.v).unwrap();
            assert!(rec.sub(&a).unwrap().frobenius_norm() <= 1e-8 * a.frobenius_norm());
        }
    }

    #[test]
    fn rank_deficient_and_zero() {
        let z = Matrix::<f64>::zeros(4, 3);
        let svd = thin_svd(&z).unwrap();
        assert_eq!(svd.s, vec![0.0; 3]);
        assert!(orth_err(&svd.u) < 1e-12);
        // rank one
        let a = Matrix::from_fn(6, 5, |i, j| (i as f64 + 1.0) * (j as f64 - 2.0));
        let svd = thin_svd(&a).unwrap();
        assert!(svd.s[1] < 1e-12 * svd.s[0]);
        assert!(orth_err(&svd.u) < 1e-10 && orth_err(&svd.v) < 1e-10);
    }

    #[test]
    fn sign_convention_holds() {
        let svd = thin_svd(&random(9, 7, 4)).unwrap();
        for j in 0..7 {
            let first = svd.u.column(j).into_iter().find(|x| x.abs() > 1e-14).unwrap();
            assert!(first > 0.0);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = Matrix::<f64>::identity(2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(thin_svd(&a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn truncate_bounds() {
        let svd = thin_svd(&Matrix::from_diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(truncate(&svd, 1).unwrap().s, vec![3.0]);
        assert_eq!(truncate(&svd, 3).unwrap().u, svd.u);
        assert!(matches!(truncate(&svd, 0), Err(Error::RankOutOfRange { .. })));
        assert!(matches!(truncate(&svd, 4), Err(Error::RankOutOfRange { .. })));
        assert!(reconstruct(&svd.u, &[], &svd.v).is_err());
        assert!(reconstruct(&svd.u, &svd.s[..2], &svd.v).is_err());
    }

    #[test]
    fn f32_decomposition() {
        let a: Matrix<f32> = random(12, 7, 8).cast();
        let svd = thin_svd(&a).unwrap();
        let rec = reconstruct(&svd.u, &svd.s, &svd.v).unwrap();
        assert!(rec.sub(&a).unwrap().frobenius_norm() <= 1e-5 * a.frobenius_norm());
    }
}
