//! Overlap and displacement metrics, and the Wilcoxon signed-rank test.

use crate::deform::Ddf;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::LabelMap;

/// `2|A∩B| / (|A|+|B|)` over voxels carrying `label`; 1 when both are empty.
pub fn dice(a: &LabelMap, b: &LabelMap, label: u8) -> Result<f64> {
    a.dims().check_same(b.dims())?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Mean and max Euclidean distance between two fields, voxel units.
pub fn endpoint_error<T: Real>(est: &Ddf<T>, gt: &Ddf<T>) -> Result<(f64, f64)> {
    est.dims().check_same(gt.dims())?;
    let n = est.dims().len();
    let (mut sum, mut max) = (0.0f64, 0.0f64);
    for i in 0..n {
        let (a, b) = (est.at(i), gt.at(i));
        let e = (0..3).map(|c| (a[c].as_f64() - b[c].as_f64()).powi(2)).sum::<f64>().sqrt();
        sum += e;
        max = max.max(e);
    }
    Ok((sum / n as f64, max))
}

/// Sample mean and (n − 1) standard deviation; the deviation is 0 for one sample.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Paired per-case scores of two methods.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSamples {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl PairedSamples {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Shape(format!("paired samples of length {} and {}", a.len(), b.len())));
        }
        if a.is_empty() {
            return Err(Error::TooFewSamples { n: 0, min: 1 });
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("paired samples"));
        }
        Ok(PairedSamples { a, b })
    }

    /// Signed differences `a − b`.
    pub fn from_differences(d: Vec<f64>) -> Result<Self> {
        let zeros = vec![0.0; d.len()];
        Self::new(d, zeros)
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn differences(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(x, y)| x - y).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wilcoxon {
    /// `min(W⁺, W⁻)`.
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Non-zero differences used.
    pub n: usize,
    /// Two-sided p-value.
    pub p: f64,
    pub exact: bool,
}

/// Largest `n` tested by full enumeration of sign patterns.
pub const EXACT_MAX_N: usize = 12;
const MIN_N: usize = 5;

/// Ranks of `|d|` with ties averaged, doubled so they stay integral.
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&i, &j| abs[i].total_cmp(&abs[j]));
    let mut ranks = vec![0u64; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // positions i..=j share rank (i+1 + j+1)/2
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test. Zero differences are dropped. Exact
/// for up to [`EXACT_MAX_N`] non-zero differences, normal approximation above.
pub fn wilcoxon_signed_rank(s: &PairedSamples) -> Result<Wilcoxon> {
    wilcoxon_with(s, false)
}

/// The normal approximation (tie and continuity corrected) at any `n`.
pub fn wilcoxon_signed_rank_normal(s: &PairedSamples) -> Result<Wilcoxon> {
    wilcoxon_with(s, true)
}

fn wilcoxon_with(s: &PairedSamples, force_normal: bool) -> Result<Wilcoxon> {
    let d: Vec<f64> = s.differences().into_iter().filter(|&x| x != 0.0).collect();
    if d.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    let n = d.len();
    if n < MIN_N {
        return Err(Error::TooFewSamples { n, min: MIN_N });
    }
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let total: u64 = ranks.iter().sum();
    let plus2: u64 = ranks.iter().zip(&d).filter(|(_, &x)| x > 0.0).map(|(r, _)| r).sum();
    let w2 = plus2.min(total - plus2);
    let (w_plus, w_minus) = (plus2 as f64 / 2.0, (total - plus2) as f64 / 2.0);

    let (p, exact) = if n <= EXACT_MAX_N && !force_normal {
        let mut hits = 0u64;
        for mask in 0u32..(1u32 << n) {
            let sp: u64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if sp.min(total - sp) <= w2 {
                hits += 1;
            }
        }
        (hits as f64 / (1u64 << n) as f64, true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
        let w = w2 as f64 / 2.0;
        let z = ((mean - w).abs() - 0.5).max(0.0) / var.sqrt();
        ((libm::erfc(z / std::f64::consts::SQRT_2)).min(1.0), false)
    };
    Ok(Wilcoxon { w: w2 as f64 / 2.0, w_plus, w_minus, n, p, exact })
}
