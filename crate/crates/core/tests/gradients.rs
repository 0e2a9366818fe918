//! Analytic gradients checked against central finite differences.

use lowreg::deform::{bending_energy, bending_energy_and_grad, warp_gradient, warp_trilinear};
use lowreg::lowrank::build_projector;
use lowreg::register::objective_and_grad;
use lowreg::similarity::{mse_loss, mse_loss_and_grad, ncc_loss, ncc_loss_and_grad};
use lowreg::{Ddf, Dims, LossKind, RegConfig, SliceAxis, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn smooth_volume(dims: Dims, seed: u64) -> Volume<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k: Vec<[f64; 4]> = (0..4).map(|_| [rng.random_range(0.2..0.9), rng.random_range(0.2..0.9), rng.random_range(0.2..0.9), rng.random_range(0.0..6.0)]).collect();
    Volume::from_fn(dims, |x, y, z| {
        k.iter().map(|[a, b, c, p]| (a * x as f64 + b * y as f64 + c * z as f64 + p).sin()).sum::<f64>() * 0.25 + 0.5
    })
}

fn random_ddf(dims: Dims, amp: f64, seed: u64) -> Ddf<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ddf::from_fn(dims, |_, _, _| [0; 3].map(|_| rng.random_range(-amp..amp)))
}

/// Central differences of `f` at a spread of entries of `ddf`.
fn fd_check(ddf: &Ddf<f64>, grad: &Ddf<f64>, h: f64, tol: f64, f: impl Fn(&Ddf<f64>) -> f64) {
    let n = ddf.dims().len();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut picks: Vec<usize> = vec![0, n - 1, n / 2];
    picks.extend((0..20).map(|_| rng.random_range(0..n)));
    for c in 0..3 {
        for &i in &picks {
            let mut p = ddf.clone();
            p.component_mut(c)[i] += h;
            let mut m = ddf.clone();
            m.component_mut(c)[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let an = grad.component(c)[i];
            let err = (fd - an).abs();
            assert!(err <= tol * (1.0 + an.abs().max(fd.abs())), "comp {c} voxel {i}: analytic {an:e}, fd {fd:e}");
        }
    }
}

#[test]
fn bending_gradient_matches_differences() {
    for dims in [Dims::new(7, 5, 6), Dims::cube(3), Dims::new(3, 8, 4)] {
        let ddf = random_ddf(dims, 1.0, 1);
        let (_, g) = bending_energy_and_grad(&ddf).unwrap();
        // quadratic, so central differences are exact up to rounding
        fd_check(&ddf, &g, 1e-3, 1e-7, |d| bending_energy(d).unwrap());
    }
}

#[test]
fn bending_gradient_covers_every_voxel() {
    let dims = Dims::new(6, 5, 4);
    let mut ddf = Ddf::<f64>::zeros(dims);
    for (i, c) in [(0, 0), (dims.len() - 1, 1), (dims.index(5, 0, 3), 2)] {
        ddf.component_mut(c)[i] = 1.0;
        assert!(bending_energy(&ddf).unwrap() > 0.0, "corner voxel {i} unconstrained");
        ddf.component_mut(c)[i] = 0.0;
    }
}

#[test]
fn warp_gradient_matches_differences() {
    let dims = Dims::new(9, 8, 7);
    let moving = smooth_volume(dims, 2);
    let ddf = random_ddf(dims, 1.3, 3);
    let fixed = smooth_volume(dims, 4);
    // upstream = d(0.5 Σ (w - f)²)/dw
    let warped = warp_trilinear(&moving, &ddf).unwrap();
    let up = Volume::new(dims, [1.0; 3], warped.data().iter().zip(fixed.data()).map(|(w, f)| w - f).collect()).unwrap();
    let g = warp_gradient(&moving, &ddf, &up).unwrap();
    fd_check(&ddf, &g, 1e-6, 1e-5, |d| {
        let w = warp_trilinear(&moving, d).unwrap();
        0.5 * w.data().iter().zip(fixed.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    });
}

fn volume_fd(v: &Volume<f64>, g: &Volume<f64>, h: f64, tol: f64, f: impl Fn(&Volume<f64>) -> f64) {
    let n = v.len();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..25 {
        let i = rng.random_range(0..n);
        let mut p = v.clone();
        p.data_mut()[i] += h;
        let mut m = v.clone();
        m.data_mut()[i] -= h;
        let fd = (f(&p) - f(&m)) / (2.0 * h);
        let an = g.data()[i];
        assert!((fd - an).abs() <= tol * (1e-3 + an.abs().max(fd.abs())), "voxel {i}: analytic {an:e}, fd {fd:e}");
    }
}

#[test]
fn similarity_gradients_match_differences() {
    let dims = Dims::new(8, 7, 6);
    let a = smooth_volume(dims, 6);
    let b = smooth_volume(dims, 7);
    let (_, g) = mse_loss_and_grad(&a, &b).unwrap();
    volume_fd(&a, &g, 1e-5, 1e-6, |v| mse_loss(v, &b).unwrap());
    let (_, g) = ncc_loss_and_grad(&a, &b).unwrap();
    volume_fd(&a, &g, 1e-5, 1e-5, |v| ncc_loss(v, &b).unwrap());
    for axis in [SliceAxis::X, SliceAxis::Y, SliceAxis::Z] {
        let p = build_projector(&b, 3, axis).unwrap();
        let (_, g) = p.loss_and_grad(&a).unwrap();
        volume_fd(&a, &g, 1e-5, 1e-6, |v| p.loss(v).unwrap());
    }
}

#[test]
fn composed_objective_matches_differences() {
    let dims = Dims::new(10, 9, 8);
    let moving = smooth_volume(dims, 8);
    let fixed = smooth_volume(dims, 9);
    let ddf = random_ddf(dims, 0.8, 10);
    for loss in [LossKind::Lrr, LossKind::Mse, LossKind::Ncc] {
        let cfg = RegConfig { loss, rank: 4, lambda: 0.3, ..RegConfig::default() };
        let p = build_projector(&fixed, 4, cfg.axis).unwrap();
        let proj = (loss == LossKind::Lrr).then_some(&p);
        let (_, g) = objective_and_grad(&moving, &fixed, &ddf, &cfg, proj).unwrap();
        fd_check(&ddf, &g, 1e-6, 1e-5, |d| objective_and_grad(&moving, &fixed, d, &cfg, proj).unwrap().0.total);
    }
}
