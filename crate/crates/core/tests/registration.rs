//! End-to-end behaviour of the optimizer on small phantoms.

use lowreg::deform::bending_energy;
use lowreg::eval::dice;
use lowreg::lowrank::build_projector;
use lowreg::phantom::{generate_phantom, PhantomSpec, StructureKind};
use lowreg::register::{objective, register};
use lowreg::{Dims, Error, LossKind, RegConfig, SliceAxis, Volume};

fn small(seed: u64) -> lowreg::phantom::Phantom<f32> {
    generate_phantom(&PhantomSpec::new(StructureKind::Cardiac, Dims::cube(24), 1.5, seed)).unwrap()
}

fn quick(loss: LossKind) -> RegConfig {
    RegConfig { loss, rank: 8, steps: 60, cycle: 20, ..RegConfig::default() }
}

#[test]
fn stiffer_regularization_bends_less() {
    for seed in 0..10 {
        let p = small(seed);
        let soft = register(&p.moving, &p.fixed, &RegConfig { lambda: 0.5, ..quick(LossKind::Mse) }).unwrap();
        let stiff = register(&p.moving, &p.fixed, &RegConfig { lambda: 1e3, ..quick(LossKind::Mse) }).unwrap();
        let (a, b) = (bending_energy(&soft.ddf).unwrap(), bending_energy(&stiff.ddf).unwrap());
        assert!(b < a, "seed {seed}: stiff {b} vs soft {a}");
    }
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let p = small(3);
    for loss in [LossKind::Mse, LossKind::Ncc, LossKind::Lrr] {
        let cfg = quick(loss);
        let a = register(&p.moving, &p.fixed, &cfg).unwrap();
        let b = register(&p.moving, &p.fixed, &cfg).unwrap();
        assert_eq!(a.ddf, b.ddf, "{loss}");
        assert_eq!(a.trace, b.trace, "{loss}");
    }
}

#[test]
fn learning_rate_cycles_between_bounds() {
    let p = small(4);
    let cfg = RegConfig { levels: 1, steps: 40, cycle: 20, tol: 0.0, ..quick(LossKind::Mse) };
    let r = register(&p.moving, &p.fixed, &cfg).unwrap();
    assert_eq!(r.trace.len(), 40);
    let lrs: Vec<f64> = r.trace.iter().map(|t| t.lr).collect();
    assert_eq!(lrs[0], cfg.lr_min);
    assert_eq!(lrs[20], cfg.lr_min);
    assert!((lrs[10] - cfg.lr_max).abs() < 1e-18);
    assert!(lrs.iter().all(|&l| l >= cfg.lr_min && l <= cfg.lr_max));
    assert!(r.trace.iter().all(|t| t.total.is_finite() && t.similarity.is_finite() && t.regularization.is_finite()));
    assert!(r.trace.iter().enumerate().all(|(i, t)| t.step == i && t.level == 0));
}

#[test]
fn identical_pair_stays_put() {
    let p = small(5);
    let r = register(&p.fixed, &p.fixed, &quick(LossKind::Mse)).unwrap();
    assert!(r.ddf.max_abs() < 0.1, "max |d| = {}", r.ddf.max_abs());
    assert!(r.min_jacobian > 0.5);
}

#[test]
fn every_loss_improves_overlap() {
    let p = generate_phantom::<f32>(&PhantomSpec::new(StructureKind::Cardiac, Dims::cube(32), 2.5, 6)).unwrap();
    let before = dice(&p.moving_labels, &p.fixed_labels, 1).unwrap();
    for loss in [LossKind::Mse, LossKind::Ncc, LossKind::Lrr] {
        let r = register(&p.moving, &p.fixed, &RegConfig { steps: 120, rank: 12, ..quick(loss) }).unwrap();
        let warped = lowreg::deform::warp_labels_nn(&p.moving_labels, &r.ddf).unwrap();
        let after = dice(&warped, &p.fixed_labels, 1).unwrap();
        assert!(after > before, "{loss}: {before} -> {after}");
        let last = r.trace.iter().filter(|t| t.level == r.steps_per_level.len() - 1);
        let first = last.clone().next().unwrap();
        assert!(r.final_objective.similarity < first.similarity, "{loss}");
    }
}

#[test]
fn final_objective_agrees_with_standalone_evaluation() {
    let p = small(7);
    let cfg = quick(LossKind::Mse);
    let r = register(&p.moving, &p.fixed, &cfg).unwrap();
    let warped = lowreg::deform::warp_trilinear(&p.moving, &r.ddf).unwrap();
    let o = objective(&warped, &p.fixed, &r.ddf, &cfg, None).unwrap();
    assert!((o.total - r.final_objective.total).abs() <= 1e-9 * o.total.abs().max(1e-12));
}

#[test]
fn rank_and_projector_errors() {
    let p = small(8);
    let too_big = RegConfig { rank: 25, ..quick(LossKind::Lrr) };
    assert!(matches!(register(&p.moving, &p.fixed, &too_big), Err(Error::RankOutOfRange { rank: 25, max: 24 })));
    let zero = RegConfig { rank: 0, ..quick(LossKind::Lrr) };
    assert!(matches!(register(&p.moving, &p.fixed, &zero), Err(Error::InvalidArgument(_))));

    let cfg = quick(LossKind::Lrr);
    let zero_ddf = lowreg::Ddf::zeros(p.fixed.dims());
    // a projector built from another image is refused
    let wrong = build_projector(&p.moving, 8, SliceAxis::Z).unwrap();
    assert!(objective(&p.moving, &p.fixed, &zero_ddf, &cfg, Some(&wrong)).is_err());
    let other_rank = build_projector(&p.fixed, 4, SliceAxis::Z).unwrap();
    assert!(objective(&p.moving, &p.fixed, &zero_ddf, &cfg, Some(&other_rank)).is_err());
    assert!(objective(&p.moving, &p.fixed, &zero_ddf, &cfg, None).is_err());
    let right = build_projector(&p.fixed, 8, SliceAxis::Z).unwrap();
    assert!(objective(&p.moving, &p.fixed, &zero_ddf, &cfg, Some(&right)).is_ok());
}

#[test]
fn bad_inputs_are_rejected() {
    let p = small(9);
    let mut nan = p.moving.clone();
    nan.data_mut()[17] = f32::NAN;
    assert!(matches!(register(&nan, &p.fixed, &quick(LossKind::Mse)), Err(Error::NonFinite(_))));
    let other = Volume::<f32>::zeros(Dims::cube(20));
    assert!(matches!(register(&other, &p.fixed, &quick(LossKind::Mse)), Err(Error::DimMismatch { .. })));
    let tiny = Volume::<f32>::zeros(Dims::cube(8));
    let deep = RegConfig { levels: 3, ..quick(LossKind::Mse) };
    assert!(matches!(register(&tiny, &tiny, &deep), Err(Error::TooSmall { .. })));
}

#[test]
fn f64_and_f32_agree_roughly() {
    let p = small(10);
    let cfg = quick(LossKind::Mse);
    let a = register(&p.moving, &p.fixed, &cfg).unwrap();
    let b = register(&p.moving.cast::<f64>(), &p.fixed.cast::<f64>(), &cfg).unwrap();
    let diff = a.ddf.cast::<f64>().components().iter().zip(b.ddf.components()).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max);
    assert!(diff < 0.05, "{diff}");
}
