//! Command-line front end.
//!
//! Every command reads its settings from three layers: built-in defaults, an
//! optional TOML file given by `--config`, and flags, later layers winning.
//! The file mirrors the flag names, one table per command:
//!
//! ```toml
//! seed = 3
//! out = "runs/a"
//!
//! [synth]
//! kind = "cardiac"
//! size = 96
//!
//! [register]
//! loss = "lrr"
//! rank = 48
//!
//! [optimizer]     # every RegConfig field, shared by register and ablate
//! lr_max = 1e-4
//!
//! [ablate]
//! ranks = [12, 48]
//! sigmas = [0.0, 0.1]
//! ```
//!
//! Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numerical abort or a
//! failed self-test.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::ablation::{self, AblationConfig};
use crate::deform::{warp_labels_nn, warp_trilinear};
use crate::error::Error;
use crate::eval::{dice, endpoint_error, mean_std, wilcoxon_signed_rank, PairedSamples};
use crate::io::{read_ddf, read_labels, read_volume, write_ddf, write_labels, write_volume, Table};
use crate::linalg::thin_svd;
use crate::lowrank::{build_projector, SliceAxis, SliceLayout};
use crate::noise::{add_noise, NoiseKind, NoiseSpec};
use crate::phantom::{generate_phantom, PhantomSpec, StructureKind};
use crate::register::{register, LossKind, RegConfig};
use crate::selftest;
use crate::volume::{normalize_intensity, Dims, LabelMap, Volume};

#[derive(Parser, Debug)]
#[command(name = "lowreg", version, about = "Deformable registration of noisy volumes with a low-rank similarity loss")]
pub struct Cli {
    /// TOML file with per-command tables; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker count for `ablate`.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a phantom pair with labels and the ground-truth field.
    Synth(SynthArgs),
    /// Add AWGN or Rician noise to a volume.
    Noise(NoiseArgs),
    /// Low-rank reconstruction of a volume and its per-slice spectra.
    Project(ProjectArgs),
    /// Register a moving volume to a fixed one.
    Register(RegisterArgs),
    /// Dice per label, endpoint error, and paired Wilcoxon tests.
    Evaluate(EvaluateArgs),
    /// Rank × noise-level grid of LRR registrations on phantoms.
    Ablate(AblateArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    #[arg(long)]
    pub kind: Option<StructureKind>,
    /// Edge length of the cubic grid.
    #[arg(long)]
    pub size: Option<usize>,
    /// Peak ground-truth displacement, voxels.
    #[arg(long)]
    pub magnitude: Option<f64>,
    #[arg(long)]
    pub contrast: Option<f64>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<NoiseKind>,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub axis: Option<SliceAxis>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterArgs {
    #[arg(long)]
    pub moving: Option<PathBuf>,
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    /// Labels of the moving volume, warped alongside it.
    #[arg(long)]
    pub moving_labels: Option<PathBuf>,
    /// Min-max normalize both inputs first.
    #[arg(long)]
    #[serde(default)]
    pub normalize: bool,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub axis: Option<SliceAxis>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub warped_labels: Option<PathBuf>,
    #[arg(long)]
    pub fixed_labels: Option<PathBuf>,
    /// Estimated and ground-truth fields for endpoint error.
    #[arg(long)]
    pub ddf: Option<PathBuf>,
    #[arg(long)]
    pub gt_ddf: Option<PathBuf>,
    /// Two CSV files with paired scores in `--column`, for a Wilcoxon test.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub compare: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub column: Option<String>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateArgs {
    #[arg(long, value_delimiter = ',')]
    pub ranks: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    /// Phantom pairs per cell.
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub kind: Option<StructureKind>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub magnitude: Option<f64>,
    #[arg(long)]
    pub noise: Option<NoiseKind>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

/// Contents of a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub synth: Option<SynthArgs>,
    pub noise: Option<NoiseArgs>,
    pub project: Option<ProjectArgs>,
    pub register: Option<RegisterArgs>,
    pub evaluate: Option<EvaluateArgs>,
    pub ablate: Option<AblateArgs>,
    pub optimizer: Option<RegConfig>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Lib(Error::io(path, e)))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] Error),
    #[error("self-test failed: {0}")]
    SelftestFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(e) => match e {
                Error::Io { .. } | Error::Format { .. } | Error::Csv(_) => 2,
                Error::NumericalAbort { .. } | Error::NonFinite(_) | Error::ZeroVariance => 3,
                _ => 1,
            },
            CliError::SelftestFailed(_) => 3,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Picks the flag, then the file value, then the default.
fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn required(flag: Option<PathBuf>, file: Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or(file).ok_or_else(|| CliError::Usage(format!("missing --{name}")))
}

struct Ctx {
    seed: u64,
    jobs: usize,
    out: PathBuf,
    file: ExperimentConfig,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn optimizer(&self) -> RegConfig {
        self.file.optimizer.clone().unwrap_or_default()
    }
}

fn describe_volume<T: crate::Real>(path: &Path, v: &Volume<T>) -> String {
    let (lo, hi) = v.min_max();
    format!("wrote {} {} f32 range [{:.4}, {:.4}]", path.display(), v.dims(), lo.as_f64(), hi.as_f64())
}

fn describe_labels(path: &Path, l: &LabelMap) -> String {
    let mut s = format!("wrote {} {} u8 labels", path.display(), l.dims());
    for label in l.labels_present() {
        let _ = write!(s, " {label}:{}", l.count(label));
    }
    s
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn init_threads() -> CliResult {
    let Ok(v) = std::env::var("LOWREG_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Usage(format!("LOWREG_THREADS must be a positive integer, got `{v}`")))?;
    // a second initialization in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> CliResult {
    init_threads()?;
    let file = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let ctx = Ctx {
        seed: pick(cli.seed, file.seed, 0),
        jobs: pick(cli.jobs, file.jobs, 1),
        out: pick(cli.out, file.out.clone(), PathBuf::from("out")),
        file,
    };
    if ctx.jobs == 0 {
        return Err(CliError::Usage("--jobs must be >= 1".into()));
    }
    if !matches!(cli.command, Command::Selftest) {
        std::fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Noise(a) => cmd_noise(&ctx, a),
        Command::Project(a) => cmd_project(&ctx, a),
        Command::Register(a) => cmd_register(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::Ablate(a) => cmd_ablate(&ctx, a),
        Command::Selftest => cmd_selftest(),
    }
}

fn cmd_synth(ctx: &Ctx, a: SynthArgs) -> CliResult {
    let f = ctx.file.synth.as_ref();
    let kind = pick(a.kind, f.and_then(|f| f.kind), StructureKind::Cardiac);
    let size = pick(a.size, f.and_then(|f| f.size), 96);
    let magnitude = pick(a.magnitude, f.and_then(|f| f.magnitude), 3.0);
    let mut spec = PhantomSpec::new(kind, Dims::cube(size), magnitude, ctx.seed);
    spec.contrast = pick(a.contrast, f.and_then(|f| f.contrast), spec.contrast);
    let p = generate_phantom::<f32>(&spec)?;
    for (name, v) in [("moving.vol", &p.moving), ("fixed.vol", &p.fixed)] {
        let path = ctx.path(name);
        write_volume(&path, v)?;
        println!("{}", describe_volume(&path, v));
    }
    for (name, l) in [("moving_labels.vol", &p.moving_labels), ("fixed_labels.vol", &p.fixed_labels)] {
        let path = ctx.path(name);
        write_labels(&path, l)?;
        println!("{}", describe_labels(&path, l));
    }
    let path = ctx.path("gt_ddf.vol");
    write_ddf(&path, &p.gt_ddf)?;
    println!("wrote {} {} f32 x3 peak |d| {:.4}", path.display(), p.gt_ddf.dims(), p.gt_ddf.max_norm());
    Ok(())
}

fn cmd_noise(ctx: &Ctx, a: NoiseArgs) -> CliResult {
    let f = ctx.file.noise.as_ref();
    let input = required(a.input, f.and_then(|f| f.input.clone()), "input")?;
    let kind = pick(a.kind, f.and_then(|f| f.kind), NoiseKind::Awgn);
    let sigma = pick(a.sigma, f.and_then(|f| f.sigma), 0.1);
    let v = read_volume::<f32>(&input)?;
    let noisy = add_noise(&v, &NoiseSpec { kind, sigma, seed: ctx.seed })?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    let path = ctx.path(&format!("{stem}_noisy.vol"));
    if path == input {
        return Err(CliError::Usage(format!("output {} would overwrite the input", path.display())));
    }
    write_volume(&path, &noisy)?;
    println!("{}", describe_volume(&path, &noisy));
    Ok(())
}

fn cmd_project(ctx: &Ctx, a: ProjectArgs) -> CliResult {
    let f = ctx.file.project.as_ref();
    let input = required(a.input, f.and_then(|f| f.input.clone()), "input")?;
    let rank = pick(a.rank, f.and_then(|f| f.rank), 5);
    let axis = pick(a.axis, f.and_then(|f| f.axis), SliceAxis::Z);
    let v = read_volume::<f64>(&input)?;
    let p = build_projector(&v, rank, axis)?;
    let rec = p.reconstruct(&v)?.cast::<f32>();
    let path = ctx.path("lowrank.vol");
    write_volume(&path, &rec)?;
    println!("{}", describe_volume(&path, &rec));

    let layout = SliceLayout::new(v.dims(), axis);
    let k = layout.max_rank();
    let mut t = Table::new(std::iter::once("slice".to_string()).chain((1..=k).map(|i| format!("s{i}"))));
    for s in 0..layout.count {
        let svd = thin_svd(&layout.extract::<f64, f64>(v.data(), s))?;
        t.push(std::iter::once(s.to_string()).chain(svd.s.iter().map(|x| x.to_string())).collect());
    }
    let path = ctx.path("spectra.csv");
    t.write(&path)?;
    println!("wrote {} {} slices x {k} singular values", path.display(), layout.count);
    Ok(())
}

fn cmd_register(ctx: &Ctx, a: RegisterArgs) -> CliResult {
    let f = ctx.file.register.as_ref();
    let moving_path = required(a.moving, f.and_then(|f| f.moving.clone()), "moving")?;
    let fixed_path = required(a.fixed, f.and_then(|f| f.fixed.clone()), "fixed")?;
    let labels_path = a.moving_labels.or(f.and_then(|f| f.moving_labels.clone()));
    let normalize = a.normalize || f.is_some_and(|f| f.normalize);
    let base = ctx.optimizer();
    let cfg = RegConfig {
        loss: pick(a.loss, f.and_then(|f| f.loss), base.loss),
        rank: pick(a.rank, f.and_then(|f| f.rank), base.rank),
        lambda: pick(a.lambda, f.and_then(|f| f.lambda), base.lambda),
        levels: pick(a.levels, f.and_then(|f| f.levels), base.levels),
        steps: pick(a.steps, f.and_then(|f| f.steps), base.steps),
        axis: pick(a.axis, f.and_then(|f| f.axis), base.axis),
        seed: ctx.seed,
        ..base
    };
    let mut moving = read_volume::<f32>(&moving_path)?;
    let mut fixed = read_volume::<f32>(&fixed_path)?;
    if normalize {
        moving = normalize_intensity(&moving);
        fixed = normalize_intensity(&fixed);
    }
    let labels = labels_path.as_deref().map(read_labels).transpose()?;
    let r = register(&moving, &fixed, &cfg)?;

    let path = ctx.path("ddf.vol");
    write_ddf(&path, &r.ddf)?;
    println!("wrote {} peak |d| {:.4} min det J {:.4}", path.display(), r.ddf.max_norm(), r.min_jacobian);
    let warped = warp_trilinear(&moving, &r.ddf)?;
    let path = ctx.path("warped.vol");
    write_volume(&path, &warped)?;
    println!("{}", describe_volume(&path, &warped));
    if let Some(l) = labels {
        let wl = warp_labels_nn(&l, &r.ddf)?;
        let path = ctx.path("warped_labels.vol");
        write_labels(&path, &wl)?;
        println!("{}", describe_labels(&path, &wl));
    }
    let mut t = Table::new(["level", "step", "lr", "total", "similarity", "regularization"]);
    for row in &r.trace {
        t.push(vec![
            row.level.to_string(),
            row.step.to_string(),
            row.lr.to_string(),
            row.total.to_string(),
            row.similarity.to_string(),
            row.regularization.to_string(),
        ]);
    }
    let path = ctx.path("trace.csv");
    t.write(&path)?;
    let first = r.trace.first().map_or(f64::NAN, |t| t.total);
    println!(
        "wrote {} {} steps, loss {} {:.6} -> {:.6}, converged per level {:?}",
        path.display(),
        r.steps_taken(),
        cfg.loss,
        first,
        r.final_objective.total,
        r.converged_per_level
    );
    Ok(())
}

fn read_column(path: &Path, column: &str) -> CliResult<Vec<f64>> {
    let t = Table::read(path)?;
    let c = t.column(column).ok_or_else(|| CliError::Usage(format!("{}: no column `{column}`", path.display())))?;
    t.rows
        .iter()
        .map(|r| r[c].parse::<f64>().map_err(|_| Error::format(path, format!("`{}` is not a number", r[c])).into()))
        .collect()
}

fn cmd_evaluate(ctx: &Ctx, a: EvaluateArgs) -> CliResult {
    let f = ctx.file.evaluate.as_ref();
    let warped = a.warped_labels.or(f.and_then(|f| f.warped_labels.clone()));
    let fixed = a.fixed_labels.or(f.and_then(|f| f.fixed_labels.clone()));
    let ddf = a.ddf.or(f.and_then(|f| f.ddf.clone()));
    let gt = a.gt_ddf.or(f.and_then(|f| f.gt_ddf.clone()));
    let compare = a.compare.or(f.and_then(|f| f.compare.clone()));
    let column = pick(a.column, f.and_then(|f| f.column.clone()), "dice".to_string());

    let mut t = Table::new(["metric", "label", "value"]);
    let mut any = false;
    match (warped, fixed) {
        (Some(w), Some(fx)) => {
            let (w, fx) = (read_labels(&w)?, read_labels(&fx)?);
            let mut labels = w.labels_present();
            labels.extend(fx.labels_present());
            labels.sort_unstable();
            labels.dedup();
            for l in labels.into_iter().filter(|&l| l != 0) {
                let d = dice(&w, &fx, l)?;
                println!("dice label {l}: {d:.6}");
                t.push(vec!["dice".into(), l.to_string(), d.to_string()]);
            }
            any = true;
        }
        (None, None) => {}
        _ => return Err(CliError::Usage("--warped-labels and --fixed-labels go together".into())),
    }
    match (ddf, gt) {
        (Some(d), Some(g)) => {
            let (mean, max) = endpoint_error(&read_ddf::<f64>(&d)?, &read_ddf::<f64>(&g)?)?;
            println!("endpoint error mean {mean:.6} max {max:.6}");
            t.push(vec!["epe_mean".into(), String::new(), mean.to_string()]);
            t.push(vec!["epe_max".into(), String::new(), max.to_string()]);
            any = true;
        }
        (None, None) => {}
        _ => return Err(CliError::Usage("--ddf and --gt-ddf go together".into())),
    }
    if let Some(paths) = compare {
        let [pa, pb] = paths.as_slice() else {
            return Err(CliError::Usage("--compare takes two files".into()));
        };
        let (xa, xb) = (read_column(pa, &column)?, read_column(pb, &column)?);
        let (ma, _) = mean_std(&xa);
        let (mb, _) = mean_std(&xb);
        let w = wilcoxon_signed_rank(&PairedSamples::new(xa, xb)?)?;
        println!("wilcoxon {column}: mean A {ma:.6} mean B {mb:.6} W {} n {} p {:.6} ({})", w.w, w.n, w.p, if w.exact { "exact" } else { "normal" });
        t.push(vec!["wilcoxon_w".into(), String::new(), w.w.to_string()]);
        t.push(vec!["wilcoxon_p".into(), String::new(), w.p.to_string()]);
        any = true;
    }
    if !any {
        return Err(CliError::Usage("nothing to evaluate: give label maps, fields or --compare".into()));
    }
    let path = ctx.path("evaluation.csv");
    t.write(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, a: AblateArgs) -> CliResult {
    let f = ctx.file.ablate.as_ref();
    let base = ctx.optimizer();
    let defaults = AblationConfig::default();
    let cfg = AblationConfig {
        ranks: pick(a.ranks, f.and_then(|f| f.ranks.clone()), defaults.ranks),
        sigmas: pick(a.sigmas, f.and_then(|f| f.sigmas.clone()), defaults.sigmas),
        pairs: pick(a.pairs, f.and_then(|f| f.pairs), defaults.pairs),
        kind: pick(a.kind, f.and_then(|f| f.kind), defaults.kind),
        dims: Dims::cube(pick(a.size, f.and_then(|f| f.size), defaults.dims.nx)),
        magnitude: pick(a.magnitude, f.and_then(|f| f.magnitude), defaults.magnitude),
        noise: pick(a.noise, f.and_then(|f| f.noise), defaults.noise),
        seed: ctx.seed,
        reg: RegConfig {
            lambda: pick(a.lambda, f.and_then(|f| f.lambda), base.lambda),
            levels: pick(a.levels, f.and_then(|f| f.levels), base.levels),
            steps: pick(a.steps, f.and_then(|f| f.steps), base.steps),
            ..base
        },
    };
    cfg.validate()?;
    let cells_path = ctx.path("ablation_cells.csv");
    let done = ablation::load_cells(&cells_path)?;
    let total = cfg.cells().len();
    let started = std::sync::atomic::AtomicUsize::new(0);
    let rows = ablation::run_grid(&cfg, done, ctx.jobs, |c, rows| {
        let n = started.fetch_add(1, std::sync::atomic::Ordering::SeqCst) + 1;
        eprintln!("cell rank {} sigma {} pair {} done ({n} new, {total} in grid)", c.rank, c.sigma, c.pair);
        ablation::cells_table(rows).write(&cells_path)
    })?;
    let summary = ablation::summarize(&rows);
    let path = ctx.path("ablation.csv");
    ablation::summary_table(&summary).write(&path)?;
    for ((structure, rank), spread) in ablation::sigma_spread(&summary) {
        println!("{structure} rank {rank}: Dice spread over sigma {spread:.4}");
    }
    println!("wrote {} ({} rows)", path.display(), summary.len());
    Ok(())
}

fn cmd_selftest() -> CliResult {
    let results = selftest::run(&selftest::Options::default());
    let mut failed = Vec::new();
    for r in &results {
        match &r.outcome {
            Ok(()) => println!("PASS {:<22} {:>8.1} ms", r.name, r.elapsed.as_secs_f64() * 1e3),
            Err(msg) => {
                println!("FAIL {:<22} {msg}", r.name);
                failed.push(r.name);
            }
        }
    }
    println!("{} of {} checks passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::SelftestFailed(failed.join(", ")))
    }
}
