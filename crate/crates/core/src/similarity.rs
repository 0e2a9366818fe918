//! Intensity baselines: mean squared error and global normalized cross
//! correlation. NCC is used in the `1 − NCC` form, so the loss lies in `[0, 2]`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::Volume;

const CHUNK: usize = 1 << 14;

/// Deterministic chunked reduction: chunk sums are combined in index order.
fn chunked_sum<T: Real>(a: &[T], b: &[T], f: impl Fn(f64, f64) -> f64 + Sync) -> f64 {
    a.par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| f(p.as_f64(), q.as_f64())).sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

pub fn mse_loss<T: Real>(warped: &Volume<T>, fixed: &Volume<T>) -> Result<f64> {
    fixed.dims().check_same(warped.dims())?;
    let n = warped.len() as f64;
    Ok(chunked_sum(warped.data(), fixed.data(), |w, f| (w - f) * (w - f)) / n)
}

/// `(2/N)(w − f)`.
pub fn mse_grad<T: Real>(warped: &Volume<T>, fixed: &Volume<T>) -> Result<Volume<T>> {
    fixed.dims().check_same(warped.dims())?;
    let k = T::lit(2.0 / warped.len() as f64);
    let mut g = warped.clone();
    g.data_mut().par_iter_mut().zip(fixed.data().par_iter()).for_each(|(w, &f)| *w = k * (*w - f));
    Ok(g)
}

pub fn mse_loss_and_grad<T: Real>(warped: &Volume<T>, fixed: &Volume<T>) -> Result<(f64, Volume<T>)> {
    Ok((mse_loss(warped, fixed)?, mse_grad(warped, fixed)?))
}

struct NccStats {
    mean_w: f64,
    mean_f: f64,
    sww: f64,
    sff: f64,
    swf: f64,
}

fn ncc_stats<T: Real>(w: &Volume<T>, f: &Volume<T>) -> Result<NccStats> {
    f.dims().check_same(w.dims())?;
    let n = w.len() as f64;
    let mean_w = chunked_sum(w.data(), f.data(), |a, _| a) / n;
    let mean_f = chunked_sum(w.data(), f.data(), |_, b| b) / n;
    let sww = chunked_sum(w.data(), f.data(), |a, _| (a - mean_w) * (a - mean_w));
    let sff = chunked_sum(w.data(), f.data(), |_, b| (b - mean_f) * (b - mean_f));
    let swf = chunked_sum(w.data(), f.data(), |a, b| (a - mean_w) * (b - mean_f));
    if !(sww > 0.0) || !(sff > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok(NccStats { mean_w, mean_f, sww, sff, swf })
}

/// `1 − Σ(w−w̄)(f−f̄) / sqrt(Σ(w−w̄)² Σ(f−f̄)²)` over the whole volume.
pub fn ncc_loss<T: Real>(warped: &Volume<T>, fixed: &Volume<T>) -> Result<f64> {
    let s = ncc_stats(warped, fixed)?;
    Ok(1.0 - s.swf / (s.sww * s.sff).sqrt())
}

pub fn ncc_loss_and_grad<T: Real>(warped: &Volume<T>, fixed: &Volume<T>) -> Result<(f64, Volume<T>)> {
    let s = ncc_stats(warped, fixed)?;
    let denom = (s.sww * s.sff).sqrt();
    let ncc = s.swf / denom;
    // d(1 − NCC)/dw_i = −(f_i − f̄)/denom + NCC (w_i − w̄)/Sww
    let a = T::lit(-1.0 / denom);
    let b = T::lit(ncc / s.sww);
    let (mw, mf) = (T::lit(s.mean_w), T::lit(s.mean_f));
    let mut g = warped.clone();
    g.data_mut()
        .par_iter_mut()
        .zip(fixed.data().par_iter())
        .for_each(|(w, &f)| *w = a * (f - mf) + b * (*w - mw));
    Ok((1.0 - ncc, g))
}

pub fn ncc_grad<T: Real>(warped: &Volume<T>, fixed: &Volume<T>) -> Result<Volume<T>> {
    Ok(ncc_loss_and_grad(warped, fixed)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: Dims, seed: u64) -> Volume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn mse_cases() {
        let dims = Dims::new(5, 4, 3);
        let f = random_volume(dims, 1);
        assert_eq!(mse_loss(&f, &f).unwrap(), 0.0);
        assert!(mse_grad(&f, &f).unwrap().data().iter().all(|&g| g == 0.0));
        let w = f.map(|x| x + 0.1);
        assert!((mse_loss(&w, &f).unwrap() - 0.01).abs() < 1e-12);
        assert!(mse_loss(&w, &random_volume(Dims::cube(3), 2)).is_err());
    }

    #[test]
    fn ncc_cases() {
        let dims = Dims::new(6, 5, 4);
        let f = random_volume(dims, 3);
        assert!(ncc_loss(&f, &f).unwrap().abs() < 1e-12);
        let anti = f.map(|x| 0.7 - x);
        assert!((ncc_loss(&anti, &f).unwrap() - 2.0).abs() < 1e-12);
        let aff = f.map(|x| 3.5 * x - 1.25);
        assert!(ncc_loss(&aff, &f).unwrap().abs() < 1e-12);
        assert!(ncc_loss(&f, &aff).unwrap().abs() < 1e-12);
        let (_, g) = ncc_loss_and_grad(&aff, &f).unwrap();
        assert!(g.data().iter().all(|x| x.abs() < 1e-12));
        let flat = Volume::filled(dims, 0.5);
        assert!(matches!(ncc_loss(&flat, &f), Err(Error::ZeroVariance)));
        assert!(matches!(ncc_grad(&f, &flat), Err(Error::ZeroVariance)));
    }

    #[test]
    fn ncc_range() {
        let dims = Dims::new(4, 4, 4);
        for s in 0..20 {
            let l = ncc_loss(&random_volume(dims, 100 + s), &random_volume(dims, 200 + s)).unwrap();
            assert!((0.0..=2.0).contains(&l));
        }
    }
}
