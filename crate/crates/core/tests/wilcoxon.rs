//! Signed-rank test against brute-force enumeration and a null simulation.

use lowreg::eval::{wilcoxon_signed_rank, wilcoxon_signed_rank_normal, PairedSamples};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Two-sided p by listing every sign assignment of the (mid)ranks.
fn enumerate_p(d: &[f64]) -> f64 {
    let nz: Vec<f64> = d.iter().copied().filter(|&x| x != 0.0).collect();
    let n = nz.len();
    let ranks: Vec<f64> = nz
        .iter()
        .map(|x| {
            let below = nz.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let tied = nz.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let observed = (w_plus - total / 2.0).abs();
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if (s - total / 2.0).abs() >= observed - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[test]
fn exact_p_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..200 {
        let n = rng.random_range(5..=12);
        let shift = rng.random_range(-1.0..1.0);
        // rounding makes ties and zeros common
        let d: Vec<f64> = (0..n).map(|_| ((rng.random_range(-2.0..2.0) + shift) * 4.0f64).round() / 4.0).collect();
        if d.iter().filter(|&&x| x != 0.0).count() < 5 {
            continue;
        }
        let w = wilcoxon_signed_rank(&PairedSamples::from_differences(d.clone()).unwrap()).unwrap();
        assert!(w.exact);
        let want = enumerate_p(&d);
        assert!((w.p - want).abs() < 1e-12, "trial {trial}: {d:?} gave {} want {want}", w.p);
    }
}

#[test]
fn known_small_table_values() {
    // all positive, n = 6: only one of 64 patterns on each side is as extreme
    let all_pos = PairedSamples::from_differences(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let w = wilcoxon_signed_rank(&all_pos).unwrap();
    assert_eq!((w.w_plus, w.w_minus, w.w), (21.0, 0.0, 0.0));
    assert!((w.p - 2.0 / 64.0).abs() < 1e-15);
    // perfectly balanced signs
    let balanced = PairedSamples::from_differences(vec![1.0, -1.0, 2.0, -2.0, 3.0, -3.0]).unwrap();
    assert_eq!(wilcoxon_signed_rank(&balanced).unwrap().p, 1.0);
}

#[test]
fn normal_approximation_is_close_at_twelve() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let shift = rng.random_range(-0.8..0.8);
        let d: Vec<f64> = (0..12).map(|_| normal(&mut rng) + shift).collect();
        let s = PairedSamples::from_differences(d).unwrap();
        let exact = wilcoxon_signed_rank(&s).unwrap();
        let approx = wilcoxon_signed_rank_normal(&s).unwrap();
        assert!(exact.exact && !approx.exact);
        assert_eq!(exact.w, approx.w);
        assert!((exact.p - approx.p).abs() < 0.02, "{} vs {}", exact.p, approx.p);
    }
}

#[test]
fn size_under_the_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let trials = 500;
    let mut rejected = 0;
    for _ in 0..trials {
        let a: Vec<f64> = (0..20).map(|_| normal(&mut rng)).collect();
        let b: Vec<f64> = (0..20).map(|_| normal(&mut rng)).collect();
        let w = wilcoxon_signed_rank(&PairedSamples::new(a, b).unwrap()).unwrap();
        assert!(!w.exact);
        if w.p < 0.05 {
            rejected += 1;
        }
    }
    let rate = rejected as f64 / trials as f64;
    assert!(rate <= 0.07, "rejection rate {rate}");
}

#[test]
fn power_against_a_clear_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let d: Vec<f64> = (0..20).map(|_| normal(&mut rng) * 0.1 + 0.5).collect();
    assert!(wilcoxon_signed_rank(&PairedSamples::from_differences(d).unwrap()).unwrap().p < 1e-3);
}

#[test]
fn too_few_differences_is_an_error() {
    let s = PairedSamples::from_differences(vec![0.0, 0.0, 1.0, -2.0, 3.0, 0.0, 4.0]).unwrap();
    assert!(wilcoxon_signed_rank(&s).is_err());
    assert!(PairedSamples::new(vec![1.0], vec![1.0, 2.0]).is_err());
}
