//! Synthetic noise models in normalized-intensity units.
//!
//! Random numbers come from ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`)
//! and Gaussian deviates from `rand_distr::StandardNormal` (ziggurat). Voxels
//! are visited in linear order; for Rician noise the real-channel deviate is
//! drawn before the imaginary-channel deviate at every voxel. Outputs are not
//! clipped.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Awgn,
    Rician,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Awgn => "awgn",
            NoiseKind::Rician => "rician",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "awgn" | "gaussian" => Ok(NoiseKind::Awgn),
            "rician" | "rn" => Ok(NoiseKind::Rician),
            other => Err(Error::InvalidArgument(format!("unknown noise kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn awgn(sigma: f64, seed: u64) -> Self {
        NoiseSpec { kind: NoiseKind::Awgn, sigma, seed }
    }

    pub fn rician(sigma: f64, seed: u64) -> Self {
        NoiseSpec { kind: NoiseKind::Rician, sigma, seed }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("noise sigma must be finite and >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Dispatches on `spec.kind`.
pub fn add_noise<T: Real>(v: &Volume<T>, spec: &NoiseSpec) -> Result<Volume<T>> {
    match spec.kind {
        NoiseKind::Awgn => add_awgn(v, spec),
        NoiseKind::Rician => add_rician(v, spec),
    }
}

/// `out[i] = v[i] + n_i`, `n_i ~ N(0, sigma^2)` iid.
pub fn add_awgn<T: Real>(v: &Volume<T>, spec: &NoiseSpec) -> Result<Volume<T>> {
    if spec.kind != NoiseKind::Awgn {
        return Err(Error::WrongNoiseKind { expected: "awgn", found: spec.kind.name() });
    }
    spec.validate()?;
    let mut out = v.clone();
    if spec.sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for x in out.data_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *x = T::lit(x.as_f64() + spec.sigma * n);
    }
    Ok(out)
}

/// `out[i] = sqrt((v[i] + a_i)^2 + b_i^2)`, `a_i, b_i ~ N(0, sigma^2)` iid.
pub fn add_rician<T: Real>(v: &Volume<T>, spec: &NoiseSpec) -> Result<Volume<T>> {
    if spec.kind != NoiseKind::Rician {
        return Err(Error::WrongNoiseKind { expected: "rician", found: spec.kind.name() });
    }
    spec.validate()?;
    if let Some((index, value)) = v.data().iter().enumerate().find(|(_, x)| **x < T::zero()) {
        return Err(Error::NegativeIntensity { index, value: value.as_f64() });
    }
    let mut out = v.clone();
    if spec.sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for x in out.data_mut() {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        let re = x.as_f64() + spec.sigma * a;
        let im = spec.sigma * b;
        *x = T::lit(re.hypot(im));
    }
    Ok(out)
}
