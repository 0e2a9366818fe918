//! Rank × noise-level grid of LRR registrations.
//!
//! Every cell `(rank, σ, pair)` is an independent trial whose seeds derive
//! from the base seed and the cell coordinates, so cells can run in any order,
//! on any number of workers, and a partial run can be resumed exactly.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::mean_std;
use crate::experiment::{derive_seed, Trial};
use crate::io::Table;
use crate::noise::{NoiseKind, NoiseSpec};
use crate::phantom::{PhantomSpec, StructureKind};
use crate::register::{LossKind, RegConfig};
use crate::volume::Dims;

pub const DEFAULT_RANKS: [usize; 5] = [12, 24, 48, 72, 96];
pub const DEFAULT_SIGMAS: [f64; 5] = [0.0, 0.05, 0.1, 0.15, 0.2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub ranks: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub pairs: usize,
    pub kind: StructureKind,
    pub dims: Dims,
    pub magnitude: f64,
    pub noise: NoiseKind,
    pub seed: u64,
    pub reg: RegConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            ranks: DEFAULT_RANKS.to_vec(),
            sigmas: DEFAULT_SIGMAS.to_vec(),
            pairs: 3,
            kind: StructureKind::Cardiac,
            dims: Dims::cube(96),
            magnitude: 3.0,
            noise: NoiseKind::Awgn,
            seed: 0,
            reg: RegConfig::default(),
        }
    }
}

/// One grid cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub rank: usize,
    pub sigma: f64,
    pub pair: usize,
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ranks.is_empty() || self.sigmas.is_empty() || self.pairs == 0 {
            return Err(Error::InvalidArgument("ablation needs at least one rank, one sigma and one pair".into()));
        }
        if self.ranks.contains(&0) {
            return Err(Error::InvalidArgument("ranks must be >= 1".into()));
        }
        if self.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("sigmas must be finite and >= 0".into()));
        }
        self.reg.validate()
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &rank in &self.ranks {
            for &sigma in &self.sigmas {
                for pair in 0..self.pairs {
                    out.push(Cell { rank, sigma, pair });
                }
            }
        }
        out
    }

    /// The phantom depends on the pair only, so every rank and σ sees the
    /// same anatomy and deformation for a given pair.
    pub fn phantom_seed(&self, pair: usize) -> u64 {
        derive_seed(self.seed, pair as u64)
    }

    pub fn cell_seed(&self, c: Cell) -> u64 {
        let s = derive_seed(self.phantom_seed(c.pair), c.rank as u64);
        derive_seed(s, c.sigma.to_bits())
    }

    pub fn trial(&self, c: Cell) -> Trial {
        Trial {
            phantom: PhantomSpec::new(self.kind, self.dims, self.magnitude, self.phantom_seed(c.pair)),
            noise: NoiseSpec { kind: self.noise, sigma: c.sigma, seed: self.cell_seed(c) },
            reg: RegConfig { loss: LossKind::Lrr, rank: c.rank, seed: self.cell_seed(c), ..self.reg.clone() },
        }
    }
}

/// Per-cell Dice for every structure.
#[derive(Clone, Debug, PartialEq)]
pub struct CellRow {
    pub structure: String,
    pub rank: usize,
    pub sigma: f64,
    pub pair: usize,
    pub seed: u64,
    pub dice: f64,
}

const CELL_HEADER: [&str; 6] = ["structure", "rank", "sigma", "pair", "seed", "dice"];
const SUMMARY_HEADER: [&str; 5] = ["structure", "rank", "sigma", "mean_dice", "std_dice"];

type Key = (String, usize, u64, u64);

fn key(r: &CellRow) -> Key {
    (r.structure.clone(), r.rank, r.sigma.to_bits(), r.seed)
}

fn sort_rows(rows: &mut [CellRow]) {
    rows.sort_by(|a, b| {
        (&a.structure, a.rank, a.sigma, a.pair).partial_cmp(&(&b.structure, b.rank, b.sigma, b.pair)).expect("finite sigma")
    });
}

pub fn cells_table(rows: &[CellRow]) -> Table {
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    let mut t = Table::new(CELL_HEADER);
    for r in rows {
        t.push(vec![r.structure, r.rank.to_string(), r.sigma.to_string(), r.pair.to_string(), r.seed.to_string(), r.dice.to_string()]);
    }
    t
}

pub fn parse_cells(t: &Table) -> Result<Vec<CellRow>> {
    if t.header != CELL_HEADER {
        return Err(Error::InvalidArgument(format!("cell table header {:?}", t.header)));
    }
    let bad = |v: &str| Error::InvalidArgument(format!("bad cell table value `{v}`"));
    t.rows
        .iter()
        .map(|r| {
            Ok(CellRow {
                structure: r[0].clone(),
                rank: r[1].parse().map_err(|_| bad(&r[1]))?,
                sigma: r[2].parse().map_err(|_| bad(&r[2]))?,
                pair: r[3].parse().map_err(|_| bad(&r[3]))?,
                seed: r[4].parse().map_err(|_| bad(&r[4]))?,
                dice: r[5].parse().map_err(|_| bad(&r[5]))?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub structure: String,
    pub rank: usize,
    pub sigma: f64,
    pub mean_dice: f64,
    pub std_dice: f64,
}

/// Mean and standard deviation over pairs, sorted by (structure, rank, σ).
pub fn summarize(rows: &[CellRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, usize, u64), Vec<(usize, f64, f64)>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.structure.clone(), r.rank, r.sigma.to_bits())).or_default().push((r.pair, r.sigma, r.dice));
    }
    let mut out: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((structure, rank, _), mut v)| {
            v.sort_by_key(|x| x.0);
            let dice: Vec<f64> = v.iter().map(|x| x.2).collect();
            let (mean_dice, std_dice) = mean_std(&dice);
            SummaryRow { structure, rank, sigma: v[0].1, mean_dice, std_dice }
        })
        .collect();
    out.sort_by(|a, b| (&a.structure, a.rank, a.sigma).partial_cmp(&(&b.structure, b.rank, b.sigma)).expect("finite sigma"));
    out
}

pub fn summary_table(rows: &[SummaryRow]) -> Table {
    let mut t = Table::new(SUMMARY_HEADER);
    for r in rows {
        t.push(vec![r.structure.clone(), r.rank.to_string(), r.sigma.to_string(), r.mean_dice.to_string(), r.std_dice.to_string()]);
    }
    t
}

/// Runs one cell and returns a row per structure.
pub fn run_cell(cfg: &AblationConfig, c: Cell) -> Result<Vec<CellRow>> {
    let trial = cfg.trial(c);
    let out = trial.run::<f32>()?;
    let seed = cfg.cell_seed(c);
    Ok(cfg
        .kind
        .labels()
        .iter()
        .zip(&out.scores.dice)
        .map(|(&(_, name), &(_, d))| CellRow { structure: name.to_string(), rank: c.rank, sigma: c.sigma, pair: c.pair, seed, dice: d })
        .collect())
}

/// Runs every cell not already in `done` on a pool of `jobs` workers.
/// `on_cell` is called after each finished cell with all rows so far, which
/// lets the caller checkpoint.
pub fn run_grid(
    cfg: &AblationConfig,
    done: Vec<CellRow>,
    jobs: usize,
    on_cell: impl Fn(Cell, &[CellRow]) -> Result<()> + Sync,
) -> Result<Vec<CellRow>> {
    cfg.validate()?;
    let names: Vec<&str> = cfg.kind.labels().iter().map(|l| l.1).collect();
    let have: std::collections::HashSet<Key> = done.iter().map(key).collect();
    let pending: Vec<Cell> = cfg
        .cells()
        .into_iter()
        .filter(|&c| {
            let seed = cfg.cell_seed(c);
            !names.iter().all(|n| have.contains(&(n.to_string(), c.rank, c.sigma.to_bits(), seed)))
        })
        .collect();
    // keep only rows that belong to this grid
    let wanted: std::collections::HashSet<Key> = cfg
        .cells()
        .into_iter()
        .flat_map(|c| names.iter().map(move |n| (n.to_string(), c.rank, c.sigma.to_bits(), cfg.cell_seed(c))))
        .collect();
    let rows = Mutex::new(done.into_iter().filter(|r| wanted.contains(&key(r))).collect::<Vec<_>>());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| {
        pending.par_iter().with_max_len(1).try_for_each(|&c| -> Result<()> {
            let new = run_cell(cfg, c)?;
            let mut rows = rows.lock().expect("poisoned");
            rows.retain(|r| !(r.rank == c.rank && r.sigma.to_bits() == c.sigma.to_bits() && r.pair == c.pair));
            rows.extend(new);
            on_cell(c, &rows)
        })
    })?;
    let mut rows = rows.into_inner().expect("poisoned");
    sort_rows(&mut rows);
    Ok(rows)
}

/// `max − min` of the mean Dice over σ, per (structure, rank).
pub fn sigma_spread(summary: &[SummaryRow]) -> BTreeMap<(String, usize), f64> {
    let mut m: BTreeMap<(String, usize), (f64, f64)> = BTreeMap::new();
    for r in summary {
        let e = m.entry((r.structure.clone(), r.rank)).or_insert((f64::INFINITY, f64::NEG_INFINITY));
        e.0 = e.0.min(r.mean_dice);
        e.1 = e.1.max(r.mean_dice);
    }
    m.into_iter().map(|(k, (lo, hi))| (k, hi - lo)).collect()
}

/// Loads per-cell rows from `path` if it exists.
pub fn load_cells(path: &Path) -> Result<Vec<CellRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    parse_cells(&Table::read(path)?)
}
