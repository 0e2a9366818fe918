//! Labeled synthetic phantoms with a smooth ground-truth deformation.
//!
//! The fixed image is rendered analytically. The moving image is the same
//! analytic scene sampled at the inverse of `x ↦ x + g(x)`, so that
//! `warp(moving, g) ≈ fixed` for the returned ground truth `g`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{jacobian_determinant_min, Ddf};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{normalize_intensity, Dims, LabelMap, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    /// Myocardial ring around a blood-pool core: MYO = 1, LV = 2.
    #[default]
    Cardiac,
    /// Two separated kidney-like blobs: RK = 1, LK = 2.
    Abdominal,
}

impl StructureKind {
    pub fn name(self) -> &'static str {
        match self {
            StructureKind::Cardiac => "cardiac",
            StructureKind::Abdominal => "abdominal",
        }
    }

    /// `(label, name)` for every foreground label the phantom renders.
    pub fn labels(self) -> &'static [(u8, &'static str)] {
        match self {
            StructureKind::Cardiac => &[(1, "MYO"), (2, "LV")],
            StructureKind::Abdominal => &[(1, "RK"), (2, "LK")],
        }
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StructureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cardiac" => Ok(StructureKind::Cardiac),
            "abdominal" => Ok(StructureKind::Abdominal),
            other => Err(Error::InvalidArgument(format!("unknown structure `{other}`"))),
        }
    }
}

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn sphere(center: [f64; 3], r: f64) -> Self {
        Ellipsoid { center, radii: [r; 3] }
    }

    /// Normalized radius: `< 1` inside, `1` on the surface.
    fn q(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>().sqrt()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.q(p) <= 1.0
    }

    /// Approximate signed distance, exact for spheres.
    fn signed_distance(&self, p: [f64; 3]) -> f64 {
        let q = self.q(p);
        let r: f64 = (0..3).map(|a| (p[a] - self.center[a]).powi(2)).sum::<f64>().sqrt();
        if q < 1e-12 {
            -self.radii.iter().cloned().fold(f64::INFINITY, f64::min)
        } else {
            r * (1.0 - 1.0 / q)
        }
    }

    fn fits(&self, dims: Dims, margin: f64) -> bool {
        let n = dims.as_array();
        (0..3).all(|a| self.center[a] - self.radii[a] >= margin && self.center[a] + self.radii[a] <= n[a] as f64 - 1.0 - margin)
    }

    fn within(&self, outer: &Ellipsoid) -> bool {
        (0..3).all(|a| {
            self.center[a] - self.radii[a] > outer.center[a] - outer.radii[a]
                && self.center[a] + self.radii[a] < outer.center[a] + outer.radii[a]
        })
    }
}

/// Scene layout. Label 1 and label 2 ellipsoids are given explicitly so
/// tests can place exact shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub body: Ellipsoid,
    /// Cardiac: myocardium outer wall. Abdominal: right kidney.
    pub first: Ellipsoid,
    /// Cardiac: LV cavity, inside `first`. Abdominal: left kidney.
    pub second: Ellipsoid,
    /// Unlabeled bright column behind the organs; sets the top of the
    /// intensity range.
    pub spine: Ellipsoid,
}

impl Geometry {
    /// Default layout scaled to `dims`, jittered by `seed`.
    pub fn default_for(kind: StructureKind, dims: Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let n = dims.as_array().map(|v| v as f64);
        let mut j = |s: f64| rng.random_range(-s..=s);
        let mid = n.map(|v| (v - 1.0) / 2.0);
        let body = Ellipsoid {
            center: mid,
            radii: [0.40 * n[0], 0.36 * n[1], 0.40 * n[2]],
        };
        let spine = Ellipsoid {
            center: [mid[0], mid[1] + 0.30 * n[1], mid[2]],
            radii: [0.045 * n[0], 0.04 * n[1], 0.30 * n[2]],
        };
        match kind {
            StructureKind::Cardiac => {
                let c = [mid[0] + j(0.03) * n[0], mid[1] + j(0.03) * n[1], mid[2] + j(0.02) * n[2]];
                let outer = [
                    (0.22 + j(0.02)) * n[0],
                    (0.20 + j(0.02)) * n[1],
                    (0.24 + j(0.02)) * n[2],
                ];
                let wall = 0.075 + j(0.01);
                let inner = [outer[0] - wall * n[0], outer[1] - wall * n[1], outer[2] - wall * n[2]];
                let shift = [j(0.015) * n[0], j(0.015) * n[1], 0.0];
                Geometry {
                    body,
                    first: Ellipsoid { center: c, radii: outer },
                    second: Ellipsoid { center: [c[0] + shift[0], c[1] + shift[1], c[2]], radii: inner },
                    spine,
                }
            }
            StructureKind::Abdominal => {
                let off = (0.19 + j(0.02)) * n[0];
                let cy = mid[1] + (0.05 + j(0.02)) * n[1];
                let kidney = |j: &mut dyn FnMut(f64) -> f64| [(0.10 + j(0.015)) * n[0], (0.09 + j(0.015)) * n[1], (0.17 + j(0.02)) * n[2]];
                let rk = kidney(&mut j);
                let lk = kidney(&mut j);
                Geometry {
                    body,
                    first: Ellipsoid { center: [mid[0] - off, cy + j(0.02) * n[1], mid[2] + j(0.03) * n[2]], radii: rk },
                    second: Ellipsoid { center: [mid[0] + off, cy + j(0.02) * n[1], mid[2] + j(0.03) * n[2]], radii: lk },
                    spine,
                }
            }
        }
    }
}

/// Tissue intensities before normalization, loosely CT-like: soft tissue
/// sits in a narrow band well below bone.
const BACKGROUND: f64 = 0.0;
const BODY: f64 = 0.40;
const MYOCARDIUM: f64 = 0.55;
const BLOOD: f64 = 0.70;
const KIDNEY: f64 = 0.58;
const BONE: f64 = 1.0;
/// Edge width of the rendered intensity transitions, in voxels.
const EDGE: f64 = 0.75;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub kind: StructureKind,
    pub geometry: Geometry,
    /// Peak ground-truth displacement, voxels.
    pub magnitude: f64,
    /// Number of Gaussian bumps in the ground-truth field.
    pub bumps: usize,
    /// Multiplies every organ's intensity offset from the surrounding body.
    pub contrast: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(kind: StructureKind, dims: Dims, magnitude: f64, seed: u64) -> Self {
        PhantomSpec { dims, kind, geometry: Geometry::default_for(kind, dims, seed), magnitude, bumps: 4, contrast: 1.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if d.min_axis() < 8 {
            return Err(Error::TooSmall { dims: d, min: 8 });
        }
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return Err(Error::InvalidArgument(format!("magnitude must be finite and >= 0, got {}", self.magnitude)));
        }
        if !(self.contrast > 0.0 && self.contrast.is_finite()) {
            return Err(Error::InvalidArgument(format!("contrast must be positive, got {}", self.contrast)));
        }
        let g = &self.geometry;
        for (name, e) in [("body", &g.body), ("structure 1", &g.first), ("structure 2", &g.second), ("spine", &g.spine)] {
            if e.radii.iter().any(|&r| !(r > 0.0)) {
                return Err(Error::Geometry(format!("{name} has non-positive radius")));
            }
            if !e.fits(d, self.magnitude) {
                return Err(Error::Geometry(format!(
                    "{name} (centre {:?}, radii {:?}) does not fit in {d} with margin {}",
                    e.center, e.radii, self.magnitude
                )));
            }
        }
        if self.kind == StructureKind::Cardiac && !g.second.within(&g.first) {
            return Err(Error::Geometry("LV cavity must lie inside the myocardial wall".into()));
        }
        Ok(())
    }

    /// Label at a continuous position; structure 2 wins over structure 1.
    fn label_at(&self, p: [f64; 3]) -> u8 {
        let g = &self.geometry;
        if g.second.contains(p) {
            2
        } else if g.first.contains(p) {
            1
        } else {
            0
        }
    }

    fn intensity_at(&self, p: [f64; 3]) -> f64 {
        let g = &self.geometry;
        let s = |e: &Ellipsoid| 1.0 / (1.0 + (e.signed_distance(p) / EDGE).exp());
        let body = BACKGROUND + (BODY - BACKGROUND) * s(&g.body) + (BONE - BODY) * s(&g.spine);
        let k = self.contrast;
        match self.kind {
            StructureKind::Cardiac => body + k * ((MYOCARDIUM - BODY) * s(&g.first) + (BLOOD - MYOCARDIUM) * s(&g.second)),
            StructureKind::Abdominal => body + k * (KIDNEY - BODY) * (s(&g.first) + s(&g.second)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Phantom<T> {
    pub moving: Volume<T>,
    pub fixed: Volume<T>,
    pub moving_labels: LabelMap,
    pub fixed_labels: LabelMap,
    /// `warp(moving, gt_ddf) ≈ fixed`.
    pub gt_ddf: Ddf<T>,
}

struct Bump {
    center: [f64; 3],
    dir: [f64; 3],
    amp: f64,
    width: f64,
}

fn field_at(bumps: &[Bump], p: [f64; 3]) -> [f64; 3] {
    let mut d = [0.0; 3];
    for b in bumps {
        let r2: f64 = (0..3).map(|a| (p[a] - b.center[a]).powi(2)).sum();
        let w = b.amp * (-r2 / (2.0 * b.width * b.width)).exp();
        for a in 0..3 {
            d[a] += w * b.dir[a];
        }
    }
    d
}

/// Bumps scaled so the largest displacement on the grid equals `magnitude`.
fn draw_bumps(spec: &PhantomSpec, rng: &mut ChaCha8Rng, width_factor: f64) -> Vec<Bump> {
    let body = &spec.geometry.body;
    let min_dim = spec.dims.min_axis() as f64;
    let width = (0.14 * min_dim).max(3.0 * spec.magnitude) * width_factor;
    let mut bumps: Vec<Bump> = (0..spec.bumps.max(1))
        .map(|_| {
            let center = [0, 1, 2].map(|a| body.center[a] + rng.random_range(-0.6..=0.6) * body.radii[a]);
            let mut dir: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-1.0..=1.0));
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            dir = dir.map(|v| v / n);
            Bump { center, dir, amp: rng.random_range(0.5..=1.0), width: width * rng.random_range(0.85..=1.15) }
        })
        .collect();
    let d = spec.dims;
    let mut peak: f64 = 0.0;
    for z in 0..d.nz {
        for y in 0..d.ny {
            for x in 0..d.nx {
                let v = field_at(&bumps, [x as f64, y as f64, z as f64]);
                peak = peak.max(v.iter().map(|c| c * c).sum::<f64>().sqrt());
            }
        }
    }
    let k = if peak > 0.0 { spec.magnitude / peak } else { 0.0 };
    for b in &mut bumps {
        b.amp *= k;
    }
    bumps
}

/// Upper bound on the spectral norm of the field's Jacobian.
fn lipschitz_bound(bumps: &[Bump]) -> f64 {
    bumps.iter().map(|b| b.amp.abs() * (-0.5f64).exp() / b.width).sum()
}

/// Solves `x + g(x) = y` for `x` by fixed-point iteration.
fn invert(bumps: &[Bump], y: [f64; 3]) -> [f64; 3] {
    let mut x = y;
    for _ in 0..60 {
        let g = field_at(bumps, x);
        let next = [y[0] - g[0], y[1] - g[1], y[2] - g[2]];
        let delta = (0..3).map(|a| (next[a] - x[a]).abs()).fold(0.0, f64::max);
        x = next;
        if delta < 1e-10 {
            break;
        }
    }
    x
}

/// Renders the fixed scene, the deformed moving scene, both label maps and
/// the ground-truth field. Intensities are normalized to `[0, 1]`.
pub fn generate_phantom<T: Real>(spec: &PhantomSpec) -> Result<Phantom<T>> {
    spec.validate()?;
    let d = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Contraction keeps x + g(x) invertible; widen the bumps until it holds.
    let mut bumps = Vec::new();
    if spec.magnitude > 0.0 {
        let mut factor = 1.0;
        loop {
            bumps = draw_bumps(spec, &mut rng, factor);
            if lipschitz_bound(&bumps) < 0.5 {
                break;
            }
            factor *= 1.25;
        }
    }

    let coords = |i: usize| {
        let (x, y, z) = d.coords(i);
        [x as f64, y as f64, z as f64]
    };
    let samples: Vec<(f64, u8, f64, u8, [f64; 3])> = (0..d.len())
        .into_par_iter()
        .map(|i| {
            let p = coords(i);
            if bumps.is_empty() {
                let (v, l) = (spec.intensity_at(p), spec.label_at(p));
                (v, l, v, l, [0.0; 3])
            } else {
                let q = invert(&bumps, p);
                (spec.intensity_at(p), spec.label_at(p), spec.intensity_at(q), spec.label_at(q), field_at(&bumps, p))
            }
        })
        .collect();
    let fixed = samples.iter().map(|s| s.0).collect::<Vec<_>>();
    let fixed_labels = samples.iter().map(|s| s.1).collect::<Vec<_>>();
    let moving = samples.iter().map(|s| s.2).collect::<Vec<_>>();
    let moving_labels = samples.iter().map(|s| s.3).collect::<Vec<_>>();
    let mut gt = Ddf::zeros(d);
    for (i, s) in samples.iter().enumerate() {
        gt.set(i, s.4.map(T::lit));
    }
    let to_volume = |v: Vec<f64>| Volume::new(d, [1.0; 3], v.into_iter().map(T::lit).collect());
    let fixed = to_volume(fixed)?;
    let moving = to_volume(moving)?;
    // one intensity map for both so equal tissue stays equal
    let (lo, hi) = fixed.min_max();
    let (lo, hi) = (lo.min(moving.min_max().0), hi.max(moving.min_max().1));
    let span = hi - lo;
    let norm = |v: &Volume<T>| {
        if span > T::zero() {
            v.map(|x| ((x - lo) / span).max(T::zero()).min(T::one()))
        } else {
            normalize_intensity(v)
        }
    };
    let phantom = Phantom {
        fixed: norm(&fixed),
        moving: norm(&moving),
        fixed_labels: LabelMap::new(d, fixed_labels)?,
        moving_labels: LabelMap::new(d, moving_labels)?,
        gt_ddf: gt,
    };
    if spec.magnitude > 0.0 && jacobian_determinant_min(&phantom.gt_ddf)? <= 0.0 {
        return Err(Error::Geometry("ground-truth field folds".into()));
    }
    Ok(phantom)
}
