//! One benchmark trial: phantom, noise on both images, registration, scores.

use crate::deform::warp_labels_nn;
use crate::error::Result;
use crate::eval::{dice, endpoint_error};
use crate::noise::{add_noise, NoiseSpec};
use crate::phantom::{generate_phantom, Phantom, PhantomSpec};
use crate::register::{register, RegConfig, RegResult};
use crate::scalar::Real;
use crate::volume::Volume;

/// SplitMix64 finalizer over `base` and `tag`; used to derive independent
/// seeds for the parts of an experiment.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Noisy copies of both phantom images. The two draws use seeds derived from
/// `noise.seed` so they are independent of each other.
pub fn noisy_pair<T: Real>(p: &Phantom<T>, noise: &NoiseSpec) -> Result<(Volume<T>, Volume<T>)> {
    let m = NoiseSpec { seed: derive_seed(noise.seed, 1), ..*noise };
    let f = NoiseSpec { seed: derive_seed(noise.seed, 2), ..*noise };
    Ok((add_noise(&p.moving, &m)?, add_noise(&p.fixed, &f)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    /// `(label, dice)` for every labeled structure of the phantom kind.
    pub dice: Vec<(u8, f64)>,
    pub mean_dice: f64,
    pub epe_mean: f64,
    pub epe_max: f64,
    pub min_jacobian: f64,
}

/// Dice of the moving labels warped by `result`, plus field errors.
pub fn score<T: Real>(spec: &PhantomSpec, p: &Phantom<T>, result: &RegResult<T>) -> Result<Scores> {
    let warped = warp_labels_nn(&p.moving_labels, &result.ddf)?;
    let dice = spec
        .kind
        .labels()
        .iter()
        .map(|&(l, _)| Ok((l, dice(&warped, &p.fixed_labels, l)?)))
        .collect::<Result<Vec<_>>>()?;
    let mean_dice = dice.iter().map(|d| d.1).sum::<f64>() / dice.len() as f64;
    let (epe_mean, epe_max) = endpoint_error(&result.ddf, &p.gt_ddf)?;
    Ok(Scores { dice, mean_dice, epe_mean, epe_max, min_jacobian: result.min_jacobian })
}

#[derive(Clone, Debug)]
pub struct Trial {
    pub phantom: PhantomSpec,
    pub noise: NoiseSpec,
    pub reg: RegConfig,
}

#[derive(Clone, Debug)]
pub struct TrialOutcome<T> {
    pub scores: Scores,
    pub result: RegResult<T>,
}

impl Trial {
    pub fn run<T: Real>(&self) -> Result<TrialOutcome<T>> {
        let p = generate_phantom::<T>(&self.phantom)?;
        self.run_on(&p)
    }

    /// As [`Trial::run`] with the phantom already rendered.
    pub fn run_on<T: Real>(&self, p: &Phantom<T>) -> Result<TrialOutcome<T>> {
        let (moving, fixed) = noisy_pair(p, &self.noise)?;
        let result = register(&moving, &fixed, &self.reg)?;
        Ok(TrialOutcome { scores: score(&self.phantom, p, &result)?, result })
    }
}
