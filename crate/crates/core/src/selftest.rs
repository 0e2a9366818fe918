//! Fast invariant checks runnable from the command line.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deform::{bending_energy, bending_energy_and_grad, jacobian_determinant_min, warp_gradient, warp_trilinear, Ddf};
use crate::eval::{dice, wilcoxon_signed_rank, PairedSamples};
use crate::io::{decode, encode_ddf};
use crate::linalg::{thin_svd_with_tol, truncate, Matrix};
use crate::lowrank::{build_projector, SliceAxis};
use crate::phantom::{generate_phantom, PhantomSpec, StructureKind};
use crate::register::{objective_and_grad, LossKind, RegConfig};
use crate::similarity::{mse_loss, mse_loss_and_grad, ncc_loss, ncc_loss_and_grad};
use crate::volume::{normalize_intensity, Dims, LabelMap, Volume};

#[derive(Clone, Copy, Debug)]
pub struct Options {
    /// Pair-orthogonality tolerance handed to the SVD under test.
    pub svd_tol: f64,
}

impl Default for Options {
    fn default() -> Self {
        Options { svd_tol: f64::EPSILON * 64.0 }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub outcome: Result<(), String>,
    pub elapsed: Duration,
}

type Check = fn(&Options) -> Result<(), String>;

const CHECKS: &[(&str, Check)] = &[
    ("svd_orthonormal", svd_orthonormal),
    ("svd_reconstruction", svd_reconstruction),
    ("svd_eckart_young", svd_eckart_young),
    ("projector_identity", projector_identity),
    ("lrr_gradient", lrr_gradient),
    ("mse_gradient", mse_gradient),
    ("ncc_gradient", ncc_gradient),
    ("warp_gradient", warp_gradient_check),
    ("bending_gradient", bending_gradient),
    ("objective_gradient", objective_gradient),
    ("warp_identity", warp_identity),
    ("warp_integer_shift", warp_integer_shift),
    ("bending_affine_zero", bending_affine_zero),
    ("dice_trivia", dice_trivia),
    ("wilcoxon_exact", wilcoxon_exact),
    ("normalize_range", normalize_range),
    ("phantom_fold_free", phantom_fold_free),
    ("vol1_roundtrip", vol1_roundtrip),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

pub fn run(opts: &Options) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, f)| {
            let start = Instant::now();
            let outcome = std::panic::catch_unwind(|| f(opts)).unwrap_or_else(|_| Err("panicked".into()));
            CheckResult { name, outcome, elapsed: start.elapsed() }
        })
        .collect()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: crate::Error) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

fn shapes() -> [(usize, usize); 4] {
    [(24, 24), (40, 17), (9, 31), (64, 48)]
}

fn svd_orthonormal(o: &Options) -> Result<(), String> {
    let mut r = rng(1);
    for (m, n) in shapes() {
        let svd = thin_svd_with_tol(&random_matrix(&mut r, m, n), o.svd_tol).map_err(err)?;
        for (name, q) in [("U", &svd.u), ("V", &svd.v)] {
            let g = q.t_matmul(q).map_err(err)?;
            let dev = (0..g.rows())
                .flat_map(|i| (0..g.cols()).map(move |j| (i, j)))
                .map(|(i, j)| (g[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs())
                .fold(0.0, f64::max);
            ensure(dev <= 1e-10, || format!("{m}x{n}: {name}ᵀ{name} off identity by {dev:e}"))?;
        }
    }
    Ok(())
}

fn svd_reconstruction(o: &Options) -> Result<(), String> {
    let mut r = rng(2);
    for (m, n) in shapes() {
        let a = random_matrix(&mut r, m, n);
        let svd = thin_svd_with_tol(&a, o.svd_tol).map_err(err)?;
        let back = crate::linalg::reconstruct(&svd.u, &svd.s, &svd.v).map_err(err)?;
        let rel = back.sub(&a).map_err(err)?.frobenius_norm() / a.frobenius_norm();
        ensure(rel <= 1e-8, || format!("{m}x{n}: relative error {rel:e}"))?;
        ensure(svd.s.windows(2).all(|w| w[0] >= w[1]), || format!("{m}x{n}: singular values not sorted"))?;
    }
    Ok(())
}

fn svd_eckart_young(o: &Options) -> Result<(), String> {
    let mut r = rng(3);
    let a = random_matrix(&mut r, 30, 20);
    let svd = thin_svd_with_tol(&a, o.svd_tol).map_err(err)?;
    for rank in [1, 4, 10] {
        let t = truncate(&svd, rank).map_err(err)?;
        let best = t.reconstruct().map_err(err)?.sub(&a).map_err(err)?.frobenius_norm();
        let tail: f64 = svd.s[rank..].iter().map(|s| s * s).sum::<f64>().sqrt();
        ensure((best - tail).abs() <= 1e-8 * (1.0 + tail), || format!("rank {rank}: error {best} vs tail {tail}"))?;
        for _ in 0..50 {
            let b = random_matrix(&mut r, 30, rank).matmul(&random_matrix(&mut r, rank, 20)).map_err(err)?;
            let e = b.sub(&a).map_err(err)?.frobenius_norm();
            ensure(best <= e + 1e-12, || format!("rank {rank}: random candidate {e} beats truncation {best}"))?;
        }
    }
    Ok(())
}

fn small_phantom(seed: u64) -> Result<crate::phantom::Phantom<f64>, String> {
    generate_phantom::<f64>(&PhantomSpec::new(StructureKind::Cardiac, Dims::cube(24), 1.5, seed)).map_err(err)
}

fn projector_identity(_: &Options) -> Result<(), String> {
    let p = small_phantom(4)?;
    for axis in [SliceAxis::X, SliceAxis::Y, SliceAxis::Z] {
        let proj = build_projector(&p.fixed, 8, axis).map_err(err)?;
        for (s, m) in proj.project(&p.fixed).map_err(err)?.iter().enumerate() {
            let sigma = &proj.slices()[s].sigma;
            let e: f64 = (0..8)
                .flat_map(|i| (0..8).map(move |j| (i, j)))
                .map(|(i, j)| (m[(i, j)] - if i == j { sigma[i] } else { 0.0 }).powi(2))
                .sum::<f64>()
                .sqrt();
            ensure(e <= 1e-6, || format!("axis {axis} slice {s}: residual {e:e}"))?;
        }
    }
    Ok(())
}

fn smooth(dims: Dims, seed: u64) -> Volume<f64> {
    let mut r = rng(seed);
    let k: Vec<[f64; 4]> = (0..3).map(|_| [0, 0, 0, 0].map(|_| r.random_range(0.2..0.9))).collect();
    Volume::from_fn(dims, |x, y, z| {
        0.5 + 0.2 * k.iter().map(|[a, b, c, p]| (a * x as f64 + b * y as f64 + c * z as f64 + 6.0 * p).sin()).sum::<f64>()
    })
}

fn random_ddf(dims: Dims, amp: f64, seed: u64) -> Ddf<f64> {
    let mut r = rng(seed);
    Ddf::from_fn(dims, |_, _, _| [0; 3].map(|_| r.random_range(-amp..amp)))
}

/// Central differences on 12 random entries of a volume-shaped input.
fn fd_volume(v: &Volume<f64>, g: &Volume<f64>, f: impl Fn(&Volume<f64>) -> f64) -> Result<(), String> {
    let mut r = rng(5);
    let h = 1e-5;
    for _ in 0..12 {
        let i = r.random_range(0..v.len());
        let (mut p, mut m) = (v.clone(), v.clone());
        p.data_mut()[i] += h;
        m.data_mut()[i] -= h;
        let fd = (f(&p) - f(&m)) / (2.0 * h);
        let an = g.data()[i];
        ensure((fd - an).abs() <= 1e-4 * (1e-3 + an.abs().max(fd.abs())), || format!("voxel {i}: analytic {an:e}, fd {fd:e}"))?;
    }
    Ok(())
}

fn fd_ddf(d: &Ddf<f64>, g: &Ddf<f64>, f: impl Fn(&Ddf<f64>) -> f64) -> Result<(), String> {
    let mut r = rng(6);
    let h = 1e-6;
    for _ in 0..12 {
        let (c, i) = (r.random_range(0..3), r.random_range(0..d.dims().len()));
        let (mut p, mut m) = (d.clone(), d.clone());
        p.component_mut(c)[i] += h;
        m.component_mut(c)[i] -= h;
        let fd = (f(&p) - f(&m)) / (2.0 * h);
        let an = g.component(c)[i];
        ensure((fd - an).abs() <= 1e-4 * (1e-3 + an.abs().max(fd.abs())), || format!("comp {c} voxel {i}: analytic {an:e}, fd {fd:e}"))?;
    }
    Ok(())
}

const FD_DIMS: Dims = Dims::new(9, 8, 7);

fn lrr_gradient(_: &Options) -> Result<(), String> {
    let (a, b) = (smooth(FD_DIMS, 7), smooth(FD_DIMS, 8));
    let p = build_projector(&b, 3, SliceAxis::Z).map_err(err)?;
    let (_, g) = p.loss_and_grad(&a).map_err(err)?;
    fd_volume(&a, &g, |v| p.loss(v).unwrap())
}

fn mse_gradient(_: &Options) -> Result<(), String> {
    let (a, b) = (smooth(FD_DIMS, 9), smooth(FD_DIMS, 10));
    let (_, g) = mse_loss_and_grad(&a, &b).map_err(err)?;
    fd_volume(&a, &g, |v| mse_loss(v, &b).unwrap())
}

fn ncc_gradient(_: &Options) -> Result<(), String> {
    let (a, b) = (smooth(FD_DIMS, 11), smooth(FD_DIMS, 12));
    let (_, g) = ncc_loss_and_grad(&a, &b).map_err(err)?;
    fd_volume(&a, &g, |v| ncc_loss(v, &b).unwrap())
}

fn warp_gradient_check(_: &Options) -> Result<(), String> {
    let (moving, fixed) = (smooth(FD_DIMS, 13), smooth(FD_DIMS, 14));
    let d = random_ddf(FD_DIMS, 1.2, 15);
    let w = warp_trilinear(&moving, &d).map_err(err)?;
    let up = Volume::new(FD_DIMS, [1.0; 3], w.data().iter().zip(fixed.data()).map(|(a, b)| a - b).collect()).map_err(err)?;
    let g = warp_gradient(&moving, &d, &up).map_err(err)?;
    fd_ddf(&d, &g, |d| {
        let w = warp_trilinear(&moving, d).unwrap();
        0.5 * w.data().iter().zip(fixed.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    })
}

fn bending_gradient(_: &Options) -> Result<(), String> {
    let d = random_ddf(FD_DIMS, 1.0, 16);
    let (_, g) = bending_energy_and_grad(&d).map_err(err)?;
    fd_ddf(&d, &g, |d| bending_energy(d).unwrap())
}

fn objective_gradient(_: &Options) -> Result<(), String> {
    let (moving, fixed) = (smooth(FD_DIMS, 17), smooth(FD_DIMS, 18));
    let d = random_ddf(FD_DIMS, 0.8, 19);
    for loss in [LossKind::Lrr, LossKind::Mse, LossKind::Ncc] {
        let cfg = RegConfig { loss, rank: 4, lambda: 0.5, ..RegConfig::default() };
        let p = build_projector(&fixed, 4, cfg.axis).map_err(err)?;
        let proj = (loss == LossKind::Lrr).then_some(&p);
        let (_, g) = objective_and_grad(&moving, &fixed, &d, &cfg, proj).map_err(err)?;
        fd_ddf(&d, &g, |d| objective_and_grad(&moving, &fixed, d, &cfg, proj).unwrap().0.total).map_err(|e| format!("{loss}: {e}"))?;
    }
    Ok(())
}

fn warp_identity(_: &Options) -> Result<(), String> {
    let v = smooth(FD_DIMS, 20);
    let w = warp_trilinear(&v, &Ddf::zeros(FD_DIMS)).map_err(err)?;
    ensure(w == v, || "zero field changed the image".into())
}

fn warp_integer_shift(_: &Options) -> Result<(), String> {
    let v = smooth(FD_DIMS, 21);
    let d = Ddf::from_fn(FD_DIMS, |_, _, _| [1.0, 0.0, -1.0]);
    let w = warp_trilinear(&v, &d).map_err(err)?;
    for z in 1..FD_DIMS.nz {
        for y in 0..FD_DIMS.ny {
            for x in 0..FD_DIMS.nx - 1 {
                let (a, b) = (w.get(x, y, z), v.get(x + 1, y, z - 1));
                ensure((a - b).abs() <= 1e-12, || format!("({x},{y},{z}): {a} vs {b}"))?;
            }
        }
    }
    Ok(())
}

fn bending_affine_zero(_: &Options) -> Result<(), String> {
    let d = Ddf::from_fn(FD_DIMS, |x, y, z| {
        let (x, y, z) = (x as f64, y as f64, z as f64);
        [0.1 * x - 0.3 * y + 2.0, 0.2 * z + 0.05 * x, -0.4 * y + 0.1 * z - 1.0]
    });
    let e = bending_energy(&d).map_err(err)?;
    ensure(e <= 1e-20, || format!("affine field has energy {e:e}"))
}

fn dice_trivia(_: &Options) -> Result<(), String> {
    let dims = Dims::new(4, 4, 1);
    let a = LabelMap::new(dims, (0..16).map(|i| (i < 8) as u8).collect()).map_err(err)?;
    let b = LabelMap::new(dims, (0..16).map(|i| (i >= 8) as u8).collect()).map_err(err)?;
    let empty = LabelMap::zeros(dims);
    ensure(dice(&a, &a, 1).map_err(err)? == 1.0, || "self overlap is not 1".into())?;
    ensure(dice(&a, &b, 1).map_err(err)? == 0.0, || "disjoint overlap is not 0".into())?;
    ensure(dice(&empty, &empty, 1).map_err(err)? == 1.0, || "two empty sets are not 1".into())?;
    ensure(dice(&a, &b, 1).map_err(err)? == dice(&b, &a, 1).map_err(err)?, || "not symmetric".into())
}

fn wilcoxon_exact(_: &Options) -> Result<(), String> {
    let s = PairedSamples::from_differences(vec![1.0, 2.0, 3.0, 4.0, 5.0]).map_err(err)?;
    let w = wilcoxon_signed_rank(&s).map_err(err)?;
    ensure(w.p == 0.0625 && w.w == 0.0, || format!("got W = {}, p = {}", w.w, w.p))?;
    let neg = PairedSamples::from_differences(vec![-1.0, -2.0, -3.0, -4.0, -5.0]).map_err(err)?;
    let wn = wilcoxon_signed_rank(&neg).map_err(err)?;
    ensure(wn.p == w.p && wn.w_plus == w.w_minus, || "negation is not symmetric".into())
}

fn normalize_range(_: &Options) -> Result<(), String> {
    let v = smooth(FD_DIMS, 22).map(|x| 7.0 * x - 3.0);
    let n = normalize_intensity(&v);
    let (lo, hi) = n.min_max();
    ensure(lo == 0.0 && hi == 1.0, || format!("range [{lo}, {hi}]"))?;
    let twice = normalize_intensity(&n);
    let d = twice.distance(&n).map_err(err)?;
    ensure(d <= 1e-7, || format!("not idempotent: {d:e}"))
}

fn phantom_fold_free(_: &Options) -> Result<(), String> {
    let p = small_phantom(23)?;
    let j = jacobian_determinant_min(&p.gt_ddf).map_err(err)?;
    ensure(j > 0.0, || format!("min Jacobian {j}"))?;
    let peak = p.gt_ddf.max_norm();
    ensure((peak - 1.5).abs() <= 1e-9, || format!("peak displacement {peak}"))
}

fn vol1_roundtrip(_: &Options) -> Result<(), String> {
    let d = random_ddf(FD_DIMS, 2.0, 24).cast::<f32>();
    let bytes = encode_ddf(&d);
    let (h, payload) = decode(std::path::Path::new("<memory>"), &bytes).map_err(err)?;
    ensure(h.channels == 3 && h.dims == FD_DIMS, || format!("header {h:?}"))?;
    let back: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    ensure(back == d.to_interleaved(), || "payload differs".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let results = run(&Options::default());
        assert!(results.len() >= 12);
        for r in &results {
            assert!(r.outcome.is_ok(), "{}: {:?}", r.name, r.outcome);
        }
    }

    #[test]
    fn loose_svd_tolerance_is_caught() {
        let results = run(&Options { svd_tol: 0.5 });
        let failed: Vec<&str> = results.iter().filter(|r| r.outcome.is_err()).map(|r| r.name).collect();
        assert!(failed.contains(&"svd_orthonormal"), "{failed:?}");
    }
}
