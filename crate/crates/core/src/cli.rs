//! Command-line orchestration: sample generation and filtering, pipeline
//! stages, randomization, gap analysis and figure-data emission.
//!
//! Every command writes its outputs plus one `manifest.json` into `--out`.
//! A manifest records the resolved invocation, so `rerun` reproduces the
//! deterministic outputs bit for bit.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{
    build_energy_table, count_solutions, filter_table, generate_instance, randomize_table, CostVariant, EnergyTable,
    Provenance, SaConfig, TrainingSet, DEFAULT_MIN_SOLUTIONS, DEFAULT_SA_TRIALS,
};
use crate::numeric::linspace;
use crate::optimize::{
    dqa_optimum, qaoa1, qaoa2, run_sweep, transfer, BfgsConfig, PipelineConfig, PipelineRun, Qaoa2Strategy,
    QaoaResult, ResultRecord, Stage, SweepPlan, DEFAULT_GRAD_TOL, DEFAULT_MAX_ITERS,
};
use crate::schedules::{write_effective_s_csv, DtLandscape, ScheduleParams, DEFAULT_DT_MAX, DEFAULT_DT_MIN, DEFAULT_DT_POINTS};
use crate::spectrum::{gap_curve, EigenConfig, GapConfig, DEFAULT_EIG_TOL, DEFAULT_GRID_POINTS, DEFAULT_REFINE_POINTS, DEFAULT_S_MAX};
use crate::statevec::{MixerConfig, Propagator};

/// Environment variable read for the worker-thread count.
pub const THREADS_ENV: &str = "QAOA_PERCEPTRON_THREADS";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Parser)]
#[command(name = "qaoa-perceptron", version, about = "Digitized quantum annealing and QAOA on binary perceptron samples")]
pub struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = THREADS_ENV, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate candidate samples and optionally filter them.
    Gen(GenArgs),
    /// Scan the Δt landscape of linear digitized-QA schedules.
    ScanDt(ScanDtArgs),
    /// Run one QAOA stage.
    Qaoa(QaoaArgs),
    /// Instantaneous spectral gap along the annealing path.
    Gap(GapArgs),
    /// Chain figure-data recipes from a JSON config.
    Repro(ReproArgs),
    /// Re-execute the invocation stored in a manifest.
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::ScanDt(_) => "scan-dt",
            Command::Qaoa(_) => "qaoa",
            Command::Gap(_) => "gap",
            Command::Repro(_) => "repro",
            Command::Rerun(_) => "rerun",
        }
    }

    pub fn out_dir(&self) -> &Path {
        match self {
            Command::Gen(a) => &a.out,
            Command::ScanDt(a) => &a.out,
            Command::Qaoa(a) => &a.out,
            Command::Gap(a) => &a.out,
            Command::Repro(a) => &a.out,
            Command::Rerun(a) => a.out.as_deref().unwrap_or(Path::new(".")),
        }
    }

    fn set_out(&mut self, out: PathBuf) {
        match self {
            Command::Gen(a) => a.out = out,
            Command::ScanDt(a) => a.out = out,
            Command::Qaoa(a) => a.out = out,
            Command::Gap(a) => a.out = out,
            Command::Repro(a) => a.out = out,
            Command::Rerun(a) => a.out = Some(out),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GenArgs {
    /// Number of spins `N`.
    #[arg(long)]
    pub n: usize,
    /// Number of patterns `M`.
    #[arg(long)]
    pub m: usize,
    /// Seed of the first candidate; candidate `k` uses `seed + k`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    /// Keep only candidates with enough solutions on which SA fails.
    #[arg(long, overrides_with = "no_filter")]
    pub filter: bool,
    #[arg(long, overrides_with = "filter")]
    pub no_filter: bool,
    /// Accepted samples need strictly more solutions than this.
    #[arg(long, default_value_t = DEFAULT_MIN_SOLUTIONS)]
    pub min_solutions: usize,
    #[arg(long, default_value_t = SaConfig::default().n_sweeps)]
    pub sa_sweeps: usize,
    #[arg(long, default_value_t = DEFAULT_SA_TRIALS)]
    pub sa_trials: usize,
    /// Base seed of the SA restarts.
    #[arg(long, default_value_t = 0)]
    pub sa_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

impl GenArgs {
    pub fn filtering(&self) -> bool {
        self.filter && !self.no_filter
    }
}

/// Sample, cost variant and optional randomization of the energy table.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TableArgs {
    /// Training-set JSON written by `gen`.
    #[arg(long)]
    pub instance: PathBuf,
    /// Cost exponent (0 or 1).
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
    pub nc: u8,
    /// Shuffle the energy table with this seed.
    #[arg(long)]
    pub randomize_seed: Option<u64>,
    /// Transverse-field strength.
    #[arg(long, default_value_t = 1.0)]
    pub gamma0: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DtArgs {
    #[arg(long, default_value_t = DEFAULT_DT_MIN)]
    pub dt_min: f64,
    #[arg(long, default_value_t = DEFAULT_DT_MAX)]
    pub dt_max: f64,
    /// Grid points of the Δt scan.
    #[arg(long, default_value_t = DEFAULT_DT_POINTS)]
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ScanDtArgs {
    #[command(flatten)]
    pub table: TableArgs,
    /// Number of Trotter steps `P`.
    #[arg(long)]
    pub p: usize,
    #[command(flatten)]
    pub dt: DtArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageArg {
    Qaoa1,
    Qaoa2,
    Transfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyArg {
    /// Smooth-and-restart for nc=0 originals, interpolation otherwise.
    Auto,
    SmoothRestart,
    /// Interpolate the `--warm` second-shot solution to `P`.
    Interpolate,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct QaoaArgs {
    #[command(flatten)]
    pub table: TableArgs,
    #[arg(long)]
    pub p: usize,
    #[arg(long, value_enum, default_value_t = StageArg::Qaoa2)]
    pub stage: StageArg,
    #[arg(long, value_enum, default_value_t = StrategyArg::Auto)]
    pub strategy: StrategyArg,
    /// Stored second-shot result at a smaller `P` used by interpolation.
    #[arg(long)]
    pub warm: Option<PathBuf>,
    /// Schedule CSV or result JSON used as the start of `--stage transfer`.
    #[arg(long)]
    pub ansatz: Option<PathBuf>,
    #[command(flatten)]
    pub dt: DtArgs,
    #[arg(long, default_value_t = DEFAULT_GRAD_TOL)]
    pub grad_tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GapArgs {
    #[command(flatten)]
    pub table: TableArgs,
    /// Points of the uniform grid on `[0, s_max]`; a single point is `s = 0`.
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    pub grid: usize,
    #[arg(long, default_value_t = DEFAULT_S_MAX)]
    pub s_max: f64,
    #[arg(long, default_value_t = DEFAULT_REFINE_POINTS)]
    pub refine_points: usize,
    /// Eigenpair residual tolerance.
    #[arg(long, default_value_t = DEFAULT_EIG_TOL)]
    pub tol: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReproArgs {
    /// JSON recipe, see [`ReproConfig`].
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write into this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub invocation: Command,
    /// Settings derived from config files, if any.
    pub resolved: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
    pub threads: usize,
    pub version: String,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    /// Writes through a temporary sibling and renames it into place.
    pub fn write_atomic(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer_pretty(&mut w, self)?;
            w.write_all(b"\n")?;
            w.flush()?;
            w.get_ref().sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Paths and seeds touched by a command.
#[derive(Debug, Default)]
struct Artifacts {
    resolved: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
}

impl Artifacts {
    fn output(&mut self, path: PathBuf) -> PathBuf {
        self.outputs.push(path.clone());
        path
    }
}

/// Sizes the global rayon pool; a no-op once the pool exists.
pub fn init_threads(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

/// Executes a command and writes its manifest.
pub fn run(command: Command) -> Result<RunManifest> {
    if let Command::Rerun(args) = &command {
        let stored = RunManifest::read_json(&args.manifest)?;
        let mut invocation = stored.invocation;
        if let Command::Rerun(_) = invocation {
            return Err(Error::InvalidArgument("manifest records another rerun".into()));
        }
        if let Some(out) = &args.out {
            invocation.set_out(out.clone());
        }
        return run(invocation);
    }

    let start = Instant::now();
    let out = command.out_dir().to_path_buf();
    fs::create_dir_all(&out)?;
    let artifacts = match &command {
        Command::Gen(a) => cmd_gen(a)?,
        Command::ScanDt(a) => cmd_scan_dt(a)?,
        Command::Qaoa(a) => cmd_qaoa(a)?,
        Command::Gap(a) => cmd_gap(a)?,
        Command::Repro(a) => cmd_repro(a)?,
        Command::Rerun(_) => unreachable!("handled above"),
    };
    let manifest = RunManifest {
        command: command.name().to_string(),
        invocation: command,
        resolved: artifacts.resolved,
        inputs: artifacts.inputs,
        outputs: artifacts.outputs,
        seeds: artifacts.seeds,
        threads: rayon::current_num_threads(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        duration_secs: start.elapsed().as_secs_f64(),
    };
    manifest.write_atomic(out.join(MANIFEST_FILE))?;
    info!("{} finished in {:.1} s", manifest.command, manifest.duration_secs);
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SummaryRow {
    seed: u64,
    n_solutions: usize,
    sa_best_energy: Option<f64>,
    accepted: bool,
}

fn cmd_gen(a: &GenArgs) -> Result<Artifacts> {
    if a.n == 0 || a.m == 0 || a.count == 0 {
        return Err(Error::InvalidArgument("--n, --m and --count must be positive".into()));
    }
    let filtering = a.filtering();
    let sa_cfg = SaConfig {
        n_sweeps: a.sa_sweeps,
        seed: a.sa_seed,
        ..SaConfig::default()
    };
    sa_cfg.validate()?;
    let seeds: Vec<u64> = (0..a.count).map(|k| a.seed + k).collect();
    let rows: Vec<(TrainingSet, SummaryRow)> = seeds
        .par_iter()
        .map(|&seed| {
            let ts = generate_instance(a.n, a.m, seed);
            let table = build_energy_table(&ts, CostVariant::Count)?;
            let row = if filtering {
                let d = filter_table(&table, &sa_cfg, a.min_solutions, a.sa_trials)?;
                SummaryRow {
                    seed,
                    n_solutions: d.n_solutions,
                    sa_best_energy: Some(d.sa_best_energy),
                    accepted: d.accepted,
                }
            } else {
                SummaryRow {
                    seed,
                    n_solutions: count_solutions(&table),
                    sa_best_energy: None,
                    accepted: true,
                }
            };
            Ok((ts, row))
        })
        .collect::<Result<_>>()?;

    let mut art = Artifacts::default();
    art.seeds.insert("seed".into(), a.seed);
    if filtering {
        art.seeds.insert("sa_seed".into(), a.sa_seed);
    }
    let summary = art.output(a.out.join("summary.csv"));
    let mut w = csv::Writer::from_path(&summary)?;
    for (ts, row) in &rows {
        w.serialize(row)?;
        if row.accepted {
            ts.write_json(art.output(a.out.join(instance_file(row.seed))))?;
        }
    }
    w.flush()?;
    let accepted = rows.iter().filter(|(_, r)| r.accepted).count();
    info!("gen: {accepted} of {} candidates accepted", rows.len());
    Ok(art)
}

/// File name of sample `seed` written by `gen`.
pub fn instance_file(seed: u64) -> String {
    format!("instance_{seed}.json")
}

/// Energy table of one sample, randomized when requested.
pub fn load_table(ts: &TrainingSet, nc: u8, randomize_seed: Option<u64>) -> Result<EnergyTable> {
    let table = build_energy_table(ts, CostVariant::from_nc(nc)?)?;
    match randomize_seed {
        Some(seed) => randomize_table(&table, seed),
        None => Ok(table),
    }
}

fn open_table(t: &TableArgs, art: &mut Artifacts) -> Result<(TrainingSet, EnergyTable, MixerConfig)> {
    let ts = TrainingSet::read_json(&t.instance)?;
    art.inputs.push(t.instance.clone());
    art.seeds.insert("instance_seed".into(), ts.seed());
    if let Some(seed) = t.randomize_seed {
        art.seeds.insert("randomize_seed".into(), seed);
    }
    let table = load_table(&ts, t.nc, t.randomize_seed)?;
    Ok((ts, table, MixerConfig::new(t.gamma0)?))
}

/// Refined optimum of a Δt scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtOptimum {
    #[serde(rename = "P")]
    pub n_steps: usize,
    pub nc: u8,
    pub dt: f64,
    pub energy_density: f64,
    /// Best grid point before refinement.
    pub grid_dt: f64,
    pub grid_energy_density: f64,
    pub provenance: Provenance,
    pub instance_seed: u64,
}

impl DtOptimum {
    pub fn new(landscape: &DtLandscape, nc: u8, provenance: Provenance, instance_seed: u64) -> Self {
        DtOptimum {
            n_steps: landscape.n_steps,
            nc,
            dt: landscape.argmin_dt,
            energy_density: landscape.argmin_energy,
            grid_dt: landscape.dt_grid[landscape.grid_argmin],
            grid_energy_density: landscape.energies[landscape.grid_argmin],
            provenance,
            instance_seed,
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn pipeline_config(gamma0: f64, dt: &DtArgs, bfgs: BfgsConfig) -> Result<PipelineConfig> {
    bfgs.validate()?;
    Ok(PipelineConfig {
        mixer: MixerConfig::new(gamma0)?,
        bfgs,
        dt_min: dt.dt_min,
        dt_max: dt.dt_max,
        dt_points: dt.points,
        ..PipelineConfig::default()
    })
}

fn cmd_scan_dt(a: &ScanDtArgs) -> Result<Artifacts> {
    let mut art = Artifacts::default();
    let (ts, table, _) = open_table(&a.table, &mut art)?;
    let cfg = pipeline_config(a.table.gamma0, &a.dt, BfgsConfig::default())?;
    let prop = Propagator::new(&table, cfg.mixer)?;
    let (landscape, _) = dqa_optimum(&prop, a.p, &cfg)?;
    landscape.write_csv(art.output(a.out.join("landscape.csv")))?;
    let optimum = DtOptimum::new(&landscape, a.table.nc, table.provenance(), ts.seed());
    write_json(&optimum, &art.output(a.out.join("optimum.json")))?;
    info!("scan-dt: P={} optimum Δt={:.6} ε={:.6e}", a.p, optimum.dt, optimum.energy_density);
    Ok(art)
}

fn read_ansatz(path: &Path) -> Result<ScheduleParams> {
    if path.extension().is_some_and(|e| e == "json") {
        Ok(ResultRecord::read_json(path)?.params)
    } else {
        ScheduleParams::read_csv(path)
    }
}

fn cmd_qaoa(a: &QaoaArgs) -> Result<Artifacts> {
    let ansatz = match (a.stage, &a.ansatz) {
        (StageArg::Transfer, None) => {
            return Err(Error::InvalidArgument("--stage transfer requires --ansatz".into()));
        }
        (StageArg::Transfer, Some(path)) => Some(read_ansatz(path)?),
        _ => None,
    };
    let mut art = Artifacts::default();
    if let Some(path) = &a.ansatz {
        art.inputs.push(path.clone());
    }
    let (ts, table, _) = open_table(&a.table, &mut art)?;
    let bfgs = BfgsConfig {
        grad_tol: a.grad_tol,
        max_iters: a.max_iters,
        ..BfgsConfig::default()
    };
    let cfg = pipeline_config(a.table.gamma0, &a.dt, bfgs)?;
    let prop = Propagator::new(&table, cfg.mixer)?;
    let nc = a.table.nc;
    let provenance = table.provenance();
    let record = |r: &QaoaResult| ResultRecord::new(r, nc, provenance, ts.seed());

    let mut stages: Vec<QaoaResult> = Vec::new();
    if let Some(ansatz) = ansatz {
        stages.push(transfer(&prop, &ansatz, a.p, &cfg)?);
    } else {
        let (landscape, dqa) = dqa_optimum(&prop, a.p, &cfg)?;
        landscape.write_csv(art.output(a.out.join("landscape.csv")))?;
        let first = qaoa1(&prop, &dqa, &cfg)?;
        stages.push(dqa);
        stages.push(first.clone());
        if a.stage == StageArg::Qaoa2 {
            let (strategy, store) = qaoa2_start(a, table.variant(), provenance, &mut art)?;
            stages.push(qaoa2(&prop, &first, strategy, &store, &cfg)?);
        }
    }

    let chosen = stages.last().expect("at least one stage ran");
    record(chosen).write_json(art.output(a.out.join("result.json")))?;
    let records: Vec<ResultRecord> = stages.iter().map(record).collect();
    write_json(&records, &art.output(a.out.join("stages.json")))?;
    chosen.params.write_csv(art.output(a.out.join("schedule.csv")))?;
    chosen.write_trace_csv(art.output(a.out.join("trace.csv")))?;
    write_effective_s_csv(&chosen.params, art.output(a.out.join("effective_s.csv")))?;
    info!(
        "qaoa: {} at P={} ε={:.6e} after {} iterations",
        chosen.stage, a.p, chosen.energy_density, chosen.n_iters
    );
    Ok(art)
}

fn qaoa2_start(
    a: &QaoaArgs,
    variant: CostVariant,
    provenance: Provenance,
    art: &mut Artifacts,
) -> Result<(Qaoa2Strategy, Vec<QaoaResult>)> {
    let interpolate = match a.strategy {
        StrategyArg::SmoothRestart => false,
        StrategyArg::Interpolate => true,
        StrategyArg::Auto => {
            let plan = SweepPlan::recommended(variant, provenance);
            a.warm.is_some() && plan != SweepPlan::SmoothRestart
        }
    };
    if !interpolate {
        return Ok((Qaoa2Strategy::SmoothRestart, Vec::new()));
    }
    let path = a
        .warm
        .as_ref()
        .ok_or_else(|| Error::MissingSolution("--strategy interpolate requires --warm".into()))?;
    art.inputs.push(path.clone());
    let warm = ResultRecord::read_json(path)?;
    if warm.stage != Stage::Qaoa2 {
        return Err(Error::MissingSolution(format!(
            "{} holds a {} result, not qaoa2",
            path.display(),
            warm.stage
        )));
    }
    let p0 = warm.n_steps;
    Ok((Qaoa2Strategy::InterpolateFrom { p0 }, vec![warm.to_result()]))
}

/// Uniform grid on `[0, s_max]`.
pub fn s_grid(points: usize, s_max: f64) -> Result<Vec<f64>> {
    if points == 0 || !(s_max > 0.0 && s_max <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "gap grid needs at least one point on (0, 1], got {points} points up to {s_max}"
        )));
    }
    Ok(linspace(0.0, s_max, points))
}

fn cmd_gap(a: &GapArgs) -> Result<Artifacts> {
    let mut art = Artifacts::default();
    let (_, table, mixer) = open_table(&a.table, &mut art)?;
    let cfg = GapConfig {
        eigen: EigenConfig::with_tol(a.tol),
        refine_points: a.refine_points,
    };
    let curve = gap_curve(&table, table.provenance(), &mixer, &s_grid(a.grid, a.s_max)?, &cfg)?;
    curve.write_csv(art.output(a.out.join("gap.csv")))?;
    curve.write_summary_json(art.output(a.out.join("gap_summary.json")))?;
    info!("gap: min {:.6e} at s={:.4}", curve.min_gap, curve.s_at_min);
    Ok(art)
}

/// Figure-data recipe selectable in a [`ReproConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    /// Δt landscapes at the largest `P`, original and randomized, every sample.
    DtLandscapes,
    /// dQA / QAOA-1 / QAOA-2 minima versus `P` on the first sample.
    EnergyMinima,
    /// Largest-`P` QAOA-2 schedule of the first sample as a start on the others.
    Transfer,
    /// Gap curves and effective-s profiles of the first sample.
    Gap,
    /// Energy minima versus `P` of the randomized first sample.
    Randomized,
    /// Optimal Δt versus `P`, original and randomized, every sample.
    DtOptima,
}

fn default_steps() -> Vec<usize> {
    vec![4, 8, 16, 32, 64]
}

fn default_ncs() -> Vec<u8> {
    vec![0, 1]
}

fn default_randomize_seed() -> u64 {
    1
}

fn default_gap_points() -> usize {
    DEFAULT_GRID_POINTS
}

fn default_s_max() -> f64 {
    DEFAULT_S_MAX
}

fn all_recipes() -> Vec<Recipe> {
    vec![
        Recipe::DtLandscapes,
        Recipe::EnergyMinima,
        Recipe::Transfer,
        Recipe::Gap,
        Recipe::Randomized,
        Recipe::DtOptima,
    ]
}

/// JSON recipe of the `repro` command. Relative instance paths resolve
/// against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReproConfig {
    pub instances: Vec<PathBuf>,
    #[serde(default = "default_steps")]
    pub steps: Vec<usize>,
    #[serde(default = "default_ncs")]
    pub nc: Vec<u8>,
    #[serde(default = "default_randomize_seed")]
    pub randomize_seed: u64,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default = "default_gap_points")]
    pub gap_points: usize,
    #[serde(default = "default_s_max")]
    pub s_max: f64,
    #[serde(default)]
    pub gap: GapConfig,
    #[serde(default = "all_recipes")]
    pub recipes: Vec<Recipe>,
}

impl ReproConfig {
    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: ReproConfig = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut cfg.instances {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::InvalidArgument("repro config lists no instances".into()));
        }
        if self.steps.is_empty() || self.steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!("steps must be ascending and non-empty, got {:?}", self.steps)));
        }
        for &nc in &self.nc {
            CostVariant::from_nc(nc)?;
        }
        self.pipeline.bfgs.validate()?;
        self.gap.eigen.validate()?;
        s_grid(self.gap_points, self.s_max)?;
        Ok(())
    }
}

type SweepKey = (usize, u8, bool);

/// Shared state of one `repro` run: loaded samples and completed sweeps.
struct Repro<'a> {
    cfg: &'a ReproConfig,
    out: &'a Path,
    samples: Vec<TrainingSet>,
    sweeps: BTreeMap<SweepKey, Vec<PipelineRun>>,
    landscapes: BTreeMap<(SweepKey, usize), DtLandscape>,
    art: Artifacts,
}

fn provenance_tag(randomized: bool) -> &'static str {
    if randomized {
        "randomized"
    } else {
        "original"
    }
}

impl Repro<'_> {
    fn table(&self, sample: usize, nc: u8, randomized: bool) -> Result<EnergyTable> {
        load_table(&self.samples[sample], nc, randomized.then_some(self.cfg.randomize_seed))
    }

    fn sweep(&mut self, key: SweepKey) -> Result<&[PipelineRun]> {
        if !self.sweeps.contains_key(&key) {
            let (sample, nc, randomized) = key;
            let table = self.table(sample, nc, randomized)?;
            let prop = Propagator::new(&table, self.cfg.pipeline.mixer)?;
            let plan = SweepPlan::recommended(table.variant(), table.provenance());
            info!("repro: sweep sample {sample} nc={nc} {}", provenance_tag(randomized));
            let runs = run_sweep(&prop, &self.cfg.steps, plan, &self.cfg.pipeline)?;
            for r in &runs {
                self.landscapes.insert((key, r.n_steps), r.landscape.clone());
            }
            self.sweeps.insert(key, runs);
        }
        Ok(&self.sweeps[&key])
    }

    fn landscape(&mut self, key: SweepKey, p: usize) -> Result<DtLandscape> {
        if let Some(l) = self.landscapes.get(&(key, p)) {
            return Ok(l.clone());
        }
        let (sample, nc, randomized) = key;
        let table = self.table(sample, nc, randomized)?;
        let prop = Propagator::new(&table, self.cfg.pipeline.mixer)?;
        let (landscape, _) = dqa_optimum(&prop, p, &self.cfg.pipeline)?;
        self.landscapes.insert((key, p), landscape.clone());
        Ok(landscape)
    }

    fn path(&mut self, dir: &str, file: String) -> Result<PathBuf> {
        let d = self.out.join(dir);
        fs::create_dir_all(&d)?;
        Ok(self.art.output(d.join(file)))
    }

    fn seed(&self, sample: usize) -> u64 {
        self.samples[sample].seed()
    }

    fn provenance(&self, randomized: bool) -> Provenance {
        if randomized {
            Provenance::Randomized {
                seed: self.cfg.randomize_seed,
            }
        } else {
            Provenance::Original
        }
    }

    fn dt_landscapes(&mut self) -> Result<()> {
        let p = *self.cfg.steps.last().expect("validated");
        let mut rows = Vec::new();
        for sample in 0..self.samples.len() {
            for &nc in &self.cfg.nc.clone() {
                for randomized in [false, true] {
                    let l = self.landscape((sample, nc, randomized), p)?;
                    let file = format!("landscape_{}_nc{nc}_{}.csv", self.seed(sample), provenance_tag(randomized));
                    l.write_csv(self.path("dt_landscapes", file)?)?;
                    rows.push(DtOptimum::new(&l, nc, self.provenance(randomized), self.seed(sample)));
                }
            }
        }
        write_optima(&rows, &self.path("dt_landscapes", "optima.csv".into())?)
    }

    fn dt_optima(&mut self) -> Result<()> {
        let mut rows = Vec::new();
        for sample in 0..self.samples.len() {
            for &nc in &self.cfg.nc.clone() {
                for randomized in [false, true] {
                    for &p in &self.cfg.steps.clone() {
                        let l = self.landscape((sample, nc, randomized), p)?;
                        rows.push(DtOptimum::new(&l, nc, self.provenance(randomized), self.seed(sample)));
                    }
                }
            }
        }
        write_optima(&rows, &self.path("dt_optima", "optima.csv".into())?)
    }

    fn energy_minima(&mut self, randomized: bool) -> Result<()> {
        let dir = if randomized { "randomized" } else { "energy_minima" };
        let seed = self.seed(0);
        let mut rows = Vec::new();
        for &nc in &self.cfg.nc.clone() {
            let provenance = self.provenance(randomized);
            let runs = self.sweep((0, nc, randomized))?.to_vec();
            for run in &runs {
                for r in [&run.dqa, &run.qaoa1, &run.qaoa2] {
                    rows.push(ResultRecord::new(r, nc, provenance, seed));
                }
                let file = format!("qaoa2_nc{nc}_P{}.csv", run.n_steps);
                run.qaoa2.params.write_csv(self.path(dir, file)?)?;
            }
        }
        write_minima(&rows, &self.path(dir, "minima.csv".into())?)
    }

    fn transfer(&mut self) -> Result<()> {
        let p = *self.cfg.steps.last().expect("validated");
        let mut rows = Vec::new();
        for &nc in &self.cfg.nc.clone() {
            let ansatz = self.sweep((0, nc, false))?.last().expect("validated").qaoa2.params.clone();
            ansatz.write_csv(self.path("transfer", format!("ansatz_nc{nc}.csv"))?)?;
            for sample in 1..self.samples.len() {
                let table = self.table(sample, nc, false)?;
                let prop = Propagator::new(&table, self.cfg.pipeline.mixer)?;
                let r = transfer(&prop, &ansatz, p, &self.cfg.pipeline)?;
                let file = format!("transferred_{}_nc{nc}.csv", self.seed(sample));
                r.params.write_csv(self.path("transfer", file)?)?;
                rows.push(ResultRecord::new(&r, nc, Provenance::Original, self.seed(sample)));
            }
        }
        write_minima(&rows, &self.path("transfer", "results.csv".into())?)
    }

    fn gap(&mut self) -> Result<()> {
        let grid = s_grid(self.cfg.gap_points, self.cfg.s_max)?;
        let p = *self.cfg.steps.last().expect("validated");
        for &nc in &self.cfg.nc.clone() {
            for randomized in [false, true] {
                let tag = provenance_tag(randomized);
                let table = self.table(0, nc, randomized)?;
                info!("repro: gap nc={nc} {tag}");
                let curve = gap_curve(&table, table.provenance(), &self.cfg.pipeline.mixer, &grid, &self.cfg.gap)?;
                curve.write_csv(self.path("gap", format!("gap_nc{nc}_{tag}.csv"))?)?;
                curve.write_summary_json(self.path("gap", format!("gap_nc{nc}_{tag}.json"))?)?;
                let params = self
                    .sweep((0, nc, randomized))?
                    .iter()
                    .find(|r| r.n_steps == p)
                    .expect("sweep covers the largest P")
                    .qaoa2
                    .params
                    .clone();
                write_effective_s_csv(&params, self.path("gap", format!("effective_s_nc{nc}_{tag}.csv"))?)?;
            }
        }
        Ok(())
    }
}

fn write_optima(rows: &[DtOptimum], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["instance_seed", "nc", "provenance", "P", "dt", "energy_density"])?;
    for r in rows {
        w.write_record([
            r.instance_seed.to_string(),
            r.nc.to_string(),
            provenance_tag(r.provenance != Provenance::Original).to_string(),
            r.n_steps.to_string(),
            r.dt.to_string(),
            r.energy_density.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_minima(rows: &[ResultRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "instance_seed",
        "nc",
        "provenance",
        "P",
        "stage",
        "energy_density",
        "ground_overlap",
        "n_iters",
        "converged",
        "fallback",
    ])?;
    for r in rows {
        w.write_record([
            r.instance_seed.to_string(),
            r.nc.to_string(),
            provenance_tag(r.provenance != Provenance::Original).to_string(),
            r.n_steps.to_string(),
            r.stage.to_string(),
            r.energy_density.to_string(),
            r.ground_overlap.to_string(),
            r.n_iters.to_string(),
            r.converged.to_string(),
            r.fallback.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_repro(a: &ReproArgs) -> Result<Artifacts> {
    let cfg = ReproConfig::read_json(&a.config)?;
    let samples = cfg
        .instances
        .iter()
        .map(TrainingSet::read_json)
        .collect::<Result<Vec<_>>>()?;
    let mut art = Artifacts {
        resolved: serde_json::to_value(&cfg)?,
        inputs: std::iter::once(a.config.clone()).chain(cfg.instances.iter().cloned()).collect(),
        ..Artifacts::default()
    };
    art.seeds.insert("randomize_seed".into(), cfg.randomize_seed);
    for ts in &samples {
        art.seeds.insert(format!("instance_{}", ts.seed()), ts.seed());
    }
    let mut repro = Repro {
        cfg: &cfg,
        out: &a.out,
        samples,
        sweeps: BTreeMap::new(),
        landscapes: BTreeMap::new(),
        art,
    };
    let mut recipes = cfg.recipes.clone();
    recipes.sort();
    recipes.dedup();
    for recipe in recipes {
        info!("repro: {recipe:?}");
        match recipe {
            Recipe::DtLandscapes => repro.dt_landscapes()?,
            Recipe::EnergyMinima => repro.energy_minima(false)?,
            Recipe::Transfer => repro.transfer()?,
            Recipe::Gap => repro.gap()?,
            Recipe::Randomized => repro.energy_minima(true)?,
            Recipe::DtOptima => repro.dt_optima()?,
        }
    }
    Ok(repro.art)
}
