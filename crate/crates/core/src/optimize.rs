//! Quasi-Newton minimization with exact gradients and the warm-start
//! pipelines built on it: optimal linear schedule, first and second QAOA
//! shots, and transfer of a smooth ansatz to other samples.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{CostVariant, Provenance};
use crate::schedules::{
    interpolate, scan_dt_with, smooth, DtLandscape, ScheduleParams, DEFAULT_DT_MAX, DEFAULT_DT_MIN,
    DEFAULT_DT_POINTS, DEFAULT_SMOOTH_WINDOW,
};
use crate::statevec::{MixerConfig, Propagator};

pub const DEFAULT_GRAD_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 2000;
/// Slack allowed when comparing energies of successive pipeline stages.
pub const DESCENT_SLACK: f64 = 1e-12;

/// Stopping rule and strong-Wolfe line-search parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfgsConfig {
    /// Convergence threshold on the gradient ∞-norm.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_line_evals: usize,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        BfgsConfig {
            grad_tol: DEFAULT_GRAD_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            c1: 1e-4,
            c2: 0.9,
            max_line_evals: 40,
        }
    }
}

impl BfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) || self.max_iters == 0 || self.max_line_evals == 0 {
            return Err(Error::InvalidArgument(
                "BFGS needs grad_tol > 0, max_iters > 0 and a line-search budget".into(),
            ));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "Wolfe constants must satisfy 0 < c1 < c2 < 1, got c1={} c2={}",
                self.c1, self.c2
            )));
        }
        Ok(())
    }
}

/// Objective value and gradient ∞-norm after each accepted iteration
/// (iteration 0 is the starting point).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iter: usize,
    pub value: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub n_iters: usize,
    pub n_evals: usize,
    pub converged: bool,
    /// Set when a line search failed and the best point so far was returned.
    pub line_search_failed: bool,
    pub trace: Vec<TracePoint>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[derive(Debug, Clone)]
struct Trial {
    alpha: f64,
    x: Vec<f64>,
    value: f64,
    grad: Vec<f64>,
    slope: f64,
}

enum Search {
    Found(Trial),
    /// Best decreasing point seen, if any.
    Failed(Option<Trial>),
}

struct LineSearch<'a, F> {
    oracle: &'a mut F,
    x: &'a [f64],
    dir: &'a [f64],
    f0: f64,
    d0: f64,
    cfg: &'a BfgsConfig,
    evals: usize,
    best: Option<Trial>,
}

impl<F> LineSearch<'_, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn eval(&mut self, alpha: f64) -> Result<Trial> {
        let x: Vec<f64> = self.x.iter().zip(self.dir).map(|(a, d)| a + alpha * d).collect();
        let (value, grad) = (self.oracle)(&x)?;
        self.evals += 1;
        let slope = dot(&grad, self.dir);
        let t = Trial {
            alpha,
            x,
            value,
            grad,
            slope,
        };
        if t.value < self.f0 && self.best.as_ref().is_none_or(|b| t.value < b.value) {
            self.best = Some(t.clone());
        }
        Ok(t)
    }

    fn sufficient_decrease(&self, t: &Trial) -> bool {
        t.value.is_finite() && t.value <= self.f0 + self.cfg.c1 * t.alpha * self.d0
    }

    fn curvature(&self, t: &Trial) -> bool {
        t.slope.abs() <= -self.cfg.c2 * self.d0
    }

    fn run(mut self, alpha0: f64) -> Result<(Search, usize)> {
        let mut prev = Trial {
            alpha: 0.0,
            x: self.x.to_vec(),
            value: self.f0,
            grad: Vec::new(),
            slope: self.d0,
        };
        let mut alpha = alpha0;
        let mut first = true;
        while self.evals < self.cfg.max_line_evals {
            let t = self.eval(alpha)?;
            if !self.sufficient_decrease(&t) || (!first && t.value >= prev.value) {
                return self.zoom(prev, t);
            }
            if self.curvature(&t) {
                let evals = self.evals;
                return Ok((Search::Found(t), evals));
            }
            if t.slope >= 0.0 {
                return self.zoom(t, prev);
            }
            alpha *= 2.0;
            prev = t;
            first = false;
        }
        let evals = self.evals;
        Ok((Search::Failed(self.best), evals))
    }

    /// Bracket refinement; `lo` always satisfies sufficient decrease.
    fn zoom(mut self, mut lo: Trial, mut hi: Trial) -> Result<(Search, usize)> {
        while self.evals < self.cfg.max_line_evals {
            let width = (hi.alpha - lo.alpha).abs();
            if width <= 1e-16 * lo.alpha.abs().max(1.0) {
                break;
            }
            let alpha = cubic_step(&lo, &hi);
            let t = self.eval(alpha)?;
            if !self.sufficient_decrease(&t) || t.value >= lo.value {
                hi = t;
            } else {
                if self.curvature(&t) {
                    let evals = self.evals;
                    return Ok((Search::Found(t), evals));
                }
                if t.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = t;
            }
        }
        let evals = self.evals;
        Ok((Search::Failed(self.best), evals))
    }
}

/// Minimizer of the cubic through both bracket ends, kept away from the
/// ends; falls back to bisection.
fn cubic_step(a: &Trial, b: &Trial) -> f64 {
    let (lo, hi) = (a.alpha.min(b.alpha), a.alpha.max(b.alpha));
    let mid = 0.5 * (lo + hi);
    if !(a.value.is_finite() && b.value.is_finite()) {
        return mid;
    }
    let d1 = a.slope + b.slope - 3.0 * (a.value - b.value) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.slope * b.slope;
    if !(disc >= 0.0) {
        return mid;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let denom = b.slope - a.slope + 2.0 * d2;
    if denom == 0.0 {
        return mid;
    }
    let alpha = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / denom;
    let margin = 0.1 * (hi - lo);
    if alpha.is_finite() && alpha >= lo + margin && alpha <= hi - margin {
        alpha
    } else {
        mid
    }
}

/// BFGS on an unconstrained objective.
///
/// `oracle(x)` returns the value and gradient at `x`. The inverse-Hessian
/// estimate starts from the identity, is rescaled after the first step, and
/// is reset to the identity whenever it stops producing descent directions.
pub fn bfgs_minimize<F>(mut oracle: F, x0: &[f64], cfg: &BfgsConfig) -> Result<BfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut value, mut grad) = oracle(&x)?;
    if grad.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: grad.len(),
        });
    }
    if !value.is_finite() {
        return Err(Error::InvalidArgument(format!("objective is {value} at the start")));
    }
    let mut n_evals = 1;
    let mut trace = vec![TracePoint {
        iter: 0,
        value,
        grad_norm: norm_inf(&grad),
    }];
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut h_is_identity = true;
    let mut n_iters = 0;
    let mut line_search_failed = false;
    let mut converged = norm_inf(&grad) < cfg.grad_tol;

    while !converged && n_iters < cfg.max_iters {
        let g = DVector::from_column_slice(&grad);
        let mut dir: Vec<f64> = (-(&h * &g)).as_slice().to_vec();
        let mut d0 = dot(&dir, &grad);
        if !(d0 < 0.0) {
            h.fill_with_identity();
            h_is_identity = true;
            dir = grad.iter().map(|v| -v).collect();
            d0 = -dot(&grad, &grad);
        }
        let alpha0 = if n_iters == 0 {
            (1.0 / norm_inf(&grad)).min(1.0)
        } else {
            1.0
        };
        let search = LineSearch {
            oracle: &mut oracle,
            x: &x,
            dir: &dir,
            f0: value,
            d0,
            cfg,
            evals: 0,
            best: None,
        };
        let (outcome, evals) = search.run(alpha0)?;
        n_evals += evals;
        let trial = match outcome {
            Search::Found(t) => t,
            Search::Failed(best) if !h_is_identity => {
                // retry along steepest descent before giving up
                debug!("line search failed at iteration {n_iters}; resetting curvature estimate");
                h.fill_with_identity();
                h_is_identity = true;
                if let Some(t) = best {
                    t
                } else {
                    continue;
                }
            }
            Search::Failed(best) => {
                line_search_failed = true;
                if let Some(t) = best {
                    x = t.x;
                    value = t.value;
                    grad = t.grad;
                    n_iters += 1;
                    trace.push(TracePoint {
                        iter: n_iters,
                        value,
                        grad_norm: norm_inf(&grad),
                    });
                }
                warn!("line search failed after {n_iters} iterations; returning best point");
                break;
            }
        };

        let s: Vec<f64> = trial.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let yy = dot(&y, &y);
        if sy > 1e-14 * (dot(&s, &s) * yy).sqrt() && sy > 0.0 {
            if h_is_identity {
                h *= sy / yy;
            }
            let rho = 1.0 / sy;
            let sv = DVector::from_column_slice(&s);
            let yv = DVector::from_column_slice(&y);
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            h -= (&sv * hy.transpose() + &hy * sv.transpose()) * rho;
            h += (&sv * sv.transpose()) * (rho * rho * yhy + rho);
            h_is_identity = false;
        }
        x = trial.x;
        value = trial.value;
        grad = trial.grad;
        n_iters += 1;
        let grad_norm = norm_inf(&grad);
        trace.push(TracePoint {
            iter: n_iters,
            value,
            grad_norm,
        });
        converged = grad_norm < cfg.grad_tol;
    }
    Ok(BfgsOutcome {
        x,
        value,
        gradient: grad,
        n_iters,
        n_evals,
        converged,
        line_search_failed,
        trace,
    })
}

/// Pipeline stage that produced a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Dqa,
    Qaoa1,
    Qaoa2,
    Transferred,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Dqa => "dqa",
            Stage::Qaoa1 => "qaoa1",
            Stage::Qaoa2 => "qaoa2",
            Stage::Transferred => "transferred",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dqa" => Ok(Stage::Dqa),
            "qaoa1" => Ok(Stage::Qaoa1),
            "qaoa2" => Ok(Stage::Qaoa2),
            "transferred" | "transfer" => Ok(Stage::Transferred),
            other => Err(Error::InvalidArgument(format!("unknown stage {other:?}"))),
        }
    }
}

/// Optimized schedule with its variational energy; trace values are energy
/// densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaoaResult {
    pub stage: Stage,
    pub params: ScheduleParams,
    pub energy_density: f64,
    pub ground_overlap: f64,
    pub n_iters: usize,
    pub converged: bool,
    pub line_search_failed: bool,
    /// Set when a second shot did not beat the first and its schedule was kept.
    pub fallback: bool,
    pub trace: Vec<TracePoint>,
}

impl QaoaResult {
    pub fn n_steps(&self) -> usize {
        self.params.len()
    }

    pub fn write_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iter", "energy_density", "grad_norm"])?;
        for t in &self.trace {
            w.write_record([t.iter.to_string(), t.value.to_string(), t.grad_norm.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Settings shared by every pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mixer: MixerConfig,
    pub bfgs: BfgsConfig,
    pub dt_min: f64,
    pub dt_max: f64,
    pub dt_points: usize,
    pub smooth_window: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mixer: MixerConfig::default(),
            bfgs: BfgsConfig::default(),
            dt_min: DEFAULT_DT_MIN,
            dt_max: DEFAULT_DT_MAX,
            dt_points: DEFAULT_DT_POINTS,
            smooth_window: DEFAULT_SMOOTH_WINDOW,
        }
    }
}

fn evaluated(prop: &Propagator, stage: Stage, params: ScheduleParams) -> Result<QaoaResult> {
    let report = prop.energy(&params)?;
    Ok(QaoaResult {
        stage,
        params,
        energy_density: report.energy_density,
        ground_overlap: report.ground_overlap,
        n_iters: 0,
        converged: false,
        line_search_failed: false,
        fallback: false,
        trace: vec![TracePoint {
            iter: 0,
            value: report.energy_density,
            grad_norm: f64::NAN,
        }],
    })
}

/// BFGS on the variational energy starting from `start`.
pub fn optimize_schedule(
    prop: &Propagator,
    start: &ScheduleParams,
    stage: Stage,
    cfg: &BfgsConfig,
) -> Result<QaoaResult> {
    let n = prop.n_spins() as f64;
    let outcome = bfgs_minimize(
        |x| {
            let (report, grad) = prop.energy_and_gradient(&ScheduleParams::from_flat(x)?)?;
            Ok((report.energy, grad))
        },
        &start.to_flat(),
        cfg,
    )?;
    let mut result = evaluated(prop, stage, ScheduleParams::from_flat(&outcome.x)?)?;
    result.n_iters = outcome.n_iters;
    result.converged = outcome.converged;
    result.line_search_failed = outcome.line_search_failed;
    result.trace = outcome
        .trace
        .iter()
        .map(|t| TracePoint {
            value: t.value / n,
            ..*t
        })
        .collect();
    debug!(
        "{stage} P={} finished: ε={:.6e} after {} iterations ({} evaluations)",
        start.len(),
        result.energy_density,
        outcome.n_iters,
        outcome.n_evals
    );
    Ok(result)
}

/// Optimal-Δt linear schedule at `n_steps` together with its landscape.
pub fn dqa_optimum(prop: &Propagator, n_steps: usize, cfg: &PipelineConfig) -> Result<(DtLandscape, QaoaResult)> {
    let landscape = scan_dt_with(prop, n_steps, cfg.dt_min, cfg.dt_max, cfg.dt_points)?;
    let result = evaluated(prop, Stage::Dqa, landscape.optimal_schedule())?;
    Ok((landscape, result))
}

/// First QAOA shot: BFGS from the optimal linear schedule.
pub fn qaoa1(prop: &Propagator, dqa: &QaoaResult, cfg: &PipelineConfig) -> Result<QaoaResult> {
    optimize_schedule(prop, &dqa.params, Stage::Qaoa1, &cfg.bfgs)
}

/// Warm start of the second QAOA shot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Qaoa2Strategy {
    /// Smooth the first-shot schedule at the same `P`, then optimize again.
    SmoothRestart,
    /// Resample a stored second-shot solution at `p0 < P`, then optimize.
    InterpolateFrom { p0: usize },
}

/// Second QAOA shot at the `P` of `first`.
///
/// `store` holds earlier second-shot results that `InterpolateFrom` may draw
/// on. The returned energy never exceeds that of `first`: if the restart
/// lands higher, the first-shot schedule is returned with `fallback` set.
pub fn qaoa2(
    prop: &Propagator,
    first: &QaoaResult,
    strategy: Qaoa2Strategy,
    store: &[QaoaResult],
    cfg: &PipelineConfig,
) -> Result<QaoaResult> {
    let p = first.n_steps();
    let start = match strategy {
        Qaoa2Strategy::SmoothRestart => smooth(&first.params, cfg.smooth_window.min(odd_floor(p)))?,
        Qaoa2Strategy::InterpolateFrom { p0 } => {
            if p0 >= p {
                return Err(Error::InvalidArgument(format!(
                    "interpolation source P0={p0} must be below P={p}"
                )));
            }
            let source = store
                .iter()
                .filter(|r| r.stage == Stage::Qaoa2 && r.n_steps() == p0)
                .min_by(|a, b| a.energy_density.total_cmp(&b.energy_density))
                .ok_or_else(|| Error::MissingSolution(format!("no second-shot solution at P0={p0}")))?;
            interpolate(&source.params, p)?
        }
    };
    let result = optimize_schedule(prop, &start, Stage::Qaoa2, &cfg.bfgs)?;
    if result.energy_density <= first.energy_density + DESCENT_SLACK {
        return Ok(result);
    }
    warn!(
        "second shot at P={p} ended above the first ({:.6e} > {:.6e}); keeping the first-shot schedule",
        result.energy_density, first.energy_density
    );
    Ok(QaoaResult {
        stage: Stage::Qaoa2,
        fallback: true,
        n_iters: result.n_iters,
        trace: result.trace,
        ..first.clone()
    })
}

fn odd_floor(p: usize) -> usize {
    if p % 2 == 0 {
        p.saturating_sub(1).max(1)
    } else {
        p
    }
}

/// BFGS on another sample's energy, started from a converged ansatz.
pub fn transfer(prop: &Propagator, ansatz: &ScheduleParams, n_steps: usize, cfg: &PipelineConfig) -> Result<QaoaResult> {
    if ansatz.len() != n_steps {
        return Err(Error::DimensionMismatch {
            expected: n_steps,
            actual: ansatz.len(),
        });
    }
    optimize_schedule(prop, ansatz, Stage::Transferred, &cfg.bfgs)
}

/// How the second shot is seeded along a sweep in `P`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepPlan {
    /// Smooth-and-restart at every `P`.
    SmoothRestart,
    /// Smooth-and-restart up to `from`, then interpolate each larger `P`
    /// from the previous one in the sweep.
    InterpolateChain { from: usize },
}

/// First `P` of the interpolation chain.
pub const CHAIN_START: usize = 16;

impl SweepPlan {
    /// Smooth-and-restart for the original misclassification-count cost;
    /// interpolation chains from `CHAIN_START` otherwise.
    pub fn recommended(variant: CostVariant, provenance: Provenance) -> SweepPlan {
        match (variant, provenance) {
            (CostVariant::Count, Provenance::Original) => SweepPlan::SmoothRestart,
            _ => SweepPlan::InterpolateChain { from: CHAIN_START },
        }
    }

    /// Strategy for `p`, given the previous `P` of an ascending sweep.
    pub fn strategy(&self, p: usize, previous: Option<usize>) -> Qaoa2Strategy {
        match (*self, previous) {
            (SweepPlan::InterpolateChain { from }, Some(p0)) if p > from && p0 >= from => {
                Qaoa2Strategy::InterpolateFrom { p0 }
            }
            _ => Qaoa2Strategy::SmoothRestart,
        }
    }
}

/// All stages at one `P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub n_steps: usize,
    pub landscape: DtLandscape,
    pub dqa: QaoaResult,
    pub qaoa1: QaoaResult,
    pub qaoa2: QaoaResult,
    pub strategy: Qaoa2Strategy,
}

/// Runs dQA, QAOA-1 and QAOA-2 for each `P` of an ascending sweep.
pub fn run_sweep(prop: &Propagator, steps: &[usize], plan: SweepPlan, cfg: &PipelineConfig) -> Result<Vec<PipelineRun>> {
    if steps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!("P sweep must be ascending, got {steps:?}")));
    }
    let mut runs: Vec<PipelineRun> = Vec::with_capacity(steps.len());
    for (k, &p) in steps.iter().enumerate() {
        let (landscape, dqa) = dqa_optimum(prop, p, cfg)?;
        let first = qaoa1(prop, &dqa, cfg)?;
        let strategy = plan.strategy(p, k.checked_sub(1).map(|i| steps[i]));
        let store: Vec<QaoaResult> = runs.iter().map(|r| r.qaoa2.clone()).collect();
        let second = qaoa2(prop, &first, strategy, &store, cfg)?;
        runs.push(PipelineRun {
            n_steps: p,
            landscape,
            dqa,
            qaoa1: first,
            qaoa2: second,
            strategy,
        });
    }
    Ok(runs)
}

/// Mean squared second difference of β and γ (averaged over both).
/// Zero exactly for affine sequences.
pub fn smoothness_metric(params: &ScheduleParams) -> Result<f64> {
    if params.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "smoothness needs P >= 3, got {}",
            params.len()
        )));
    }
    let curvature = |x: &[f64]| {
        let d: Vec<f64> = x.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).collect();
        d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64
    };
    Ok(0.5 * (curvature(params.betas()) + curvature(params.gammas())))
}

/// Serialized form of a result together with the table it was run on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub stage: Stage,
    #[serde(rename = "P")]
    pub n_steps: usize,
    pub nc: u8,
    pub energy_density: f64,
    pub ground_overlap: f64,
    pub n_iters: usize,
    pub converged: bool,
    pub line_search_failed: bool,
    pub fallback: bool,
    pub params: ScheduleParams,
    pub provenance: Provenance,
    pub instance_seed: u64,
}

impl ResultRecord {
    pub fn new(result: &QaoaResult, nc: u8, provenance: Provenance, instance_seed: u64) -> Self {
        ResultRecord {
            stage: result.stage,
            n_steps: result.n_steps(),
            nc,
            energy_density: result.energy_density,
            ground_overlap: result.ground_overlap,
            n_iters: result.n_iters,
            converged: result.converged,
            line_search_failed: result.line_search_failed,
            fallback: result.fallback,
            params: result.params.clone(),
            provenance,
            instance_seed,
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let record: ResultRecord = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if record.params.len() != record.n_steps {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("P={} but {} angle pairs", record.n_steps, record.params.len()),
            });
        }
        Ok(record)
    }

    /// Result view of the record; the optimizer trace is not stored.
    pub fn to_result(&self) -> QaoaResult {
        QaoaResult {
            stage: self.stage,
            params: self.params.clone(),
            energy_density: self.energy_density,
            ground_overlap: self.ground_overlap,
            n_iters: self.n_iters,
            converged: self.converged,
            line_search_failed: self.line_search_failed,
            fallback: self.fallback,
            trace: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{build_energy_table, generate_instance, CostVariant, Diagonal, DiagonalTable};
    use crate::schedules::{dqa_schedule, DqaConfig};

    fn quadratic(a: Vec<f64>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |x: &[f64]| {
            let d: Vec<f64> = x.iter().zip(&a).map(|(x, a)| x - a).collect();
            Ok((dot(&d, &d), d.iter().map(|v| 2.0 * v).collect()))
        }
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn quadratic_converges_in_few_iterations() {
        let a = vec![0.3, -1.2, 2.5, 0.0];
        for start in [vec![0.0; 4], vec![10.0, -3.0, 4.0, 1.0], vec![-100.0, 50.0, 0.1, 7.0]] {
            let out = bfgs_minimize(quadratic(a.clone()), &start, &BfgsConfig::default()).unwrap();
            assert!(out.converged);
            assert!(out.n_iters <= 3, "{} iterations", out.n_iters);
            assert!(out.x.iter().zip(&a).all(|(x, a)| (x - a).abs() < 1e-8));
        }
    }

    #[test]
    fn rosenbrock_reaches_the_valley_floor() {
        let out = bfgs_minimize(rosenbrock, &[-1.2, 1.0], &BfgsConfig::default()).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6, "{:?}", out.x);
        assert!(out.trace.windows(2).all(|w| w[1].value <= w[0].value));
    }

    #[test]
    fn stationary_start_returns_immediately() {
        let out = bfgs_minimize(quadratic(vec![1.0, 2.0]), &[1.0, 2.0], &BfgsConfig::default()).unwrap();
        assert_eq!(out.n_iters, 0);
        assert_eq!(out.n_evals, 1);
        assert!(out.converged);
    }

    #[test]
    fn line_search_failure_keeps_best_point() {
        // descent is only visible below the gradient resolution of a step function
        let staircase = |x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok(((x[0] * 1e3).round(), vec![1.0])) };
        let out = bfgs_minimize(staircase, &[0.3], &BfgsConfig::default()).unwrap();
        assert!(out.line_search_failed);
        assert!(out.value <= 300.0);
    }

    #[test]
    fn wolfe_constants_are_validated() {
        let cfg = BfgsConfig {
            c1: 0.95,
            ..BfgsConfig::default()
        };
        assert!(bfgs_minimize(rosenbrock, &[0.0, 0.0], &cfg).is_err());
    }

    #[test]
    fn qaoa1_matches_grid_search_at_one_step() {
        let ts = generate_instance(3, 1, 5);
        let table = build_energy_table(&ts, CostVariant::Count).unwrap();
        let prop = Propagator::new(&table, MixerConfig::default()).unwrap();
        let cfg = PipelineConfig::default();
        let (_, dqa) = dqa_optimum(&prop, 1, &cfg).unwrap();
        let first = qaoa1(&prop, &dqa, &cfg).unwrap();
        assert!(first.energy_density <= dqa.energy_density + DESCENT_SLACK);

        let n = 400;
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in 0..n {
                let beta = std::f64::consts::PI * i as f64 / n as f64;
                let gamma = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
                let params = ScheduleParams::new(vec![beta], vec![gamma]).unwrap();
                best = best.min(prop.energy(&params).unwrap().energy_density);
            }
        }
        // BFGS is local; the linear warm start must still reach the grid optimum
        assert!(first.energy_density <= best + 1e-3, "{} vs grid {best}", first.energy_density);
    }

    #[test]
    fn constant_table_has_flat_landscape() {
        let table = DiagonalTable::new(4, vec![3.0; 16]).unwrap();
        let prop = Propagator::new(&table, MixerConfig::default()).unwrap();
        let start = dqa_schedule(&DqaConfig::new(1, 0.7).unwrap());
        let (report, grad) = prop.energy_and_gradient(&start).unwrap();
        assert!((report.energy_density - 3.0 / 4.0).abs() < 1e-12);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
        let result = optimize_schedule(&prop, &start, Stage::Qaoa1, &BfgsConfig::default()).unwrap();
        assert_eq!(result.n_iters, 0);
    }

    #[test]
    fn results_reevaluate_to_stored_energy() {
        let ts = generate_instance(7, 5, 21);
        let table = build_energy_table(&ts, CostVariant::Linear).unwrap();
        let prop = Propagator::new(&table, MixerConfig::default()).unwrap();
        let cfg = PipelineConfig::default();
        let runs = run_sweep(&prop, &[2, 4], SweepPlan::InterpolateChain { from: 2 }, &cfg).unwrap();
        for run in &runs {
            for r in [&run.dqa, &run.qaoa1, &run.qaoa2] {
                let again = prop.energy(&r.params).unwrap().energy_density;
                assert!((again - r.energy_density).abs() <= 1e-12);
            }
            assert!(run.dqa.energy_density + DESCENT_SLACK >= run.qaoa1.energy_density);
            assert!(run.qaoa1.energy_density + DESCENT_SLACK >= run.qaoa2.energy_density);
        }
        assert_eq!(runs[1].strategy, Qaoa2Strategy::InterpolateFrom { p0: 2 });
    }

    #[test]
    fn smooth_restart_of_smooth_solution_is_a_no_op() {
        let ts = generate_instance(6, 4, 2);
        let table = build_energy_table(&ts, CostVariant::Count).unwrap();
        let prop = Propagator::new(&table, MixerConfig::default()).unwrap();
        let cfg = PipelineConfig::default();
        let (_, dqa) = dqa_optimum(&prop, 6, &cfg).unwrap();
        let first = qaoa1(&prop, &dqa, &cfg).unwrap();
        let second = qaoa2(&prop, &first, Qaoa2Strategy::SmoothRestart, &[], &cfg).unwrap();
        assert!(!second.fallback);
        assert!((second.energy_density - first.energy_density).abs() <= 1e-10);
    }

    #[test]
    fn interpolation_requires_stored_solution() {
        let table = DiagonalTable::new(3, (0..8).map(f64::from).collect()).unwrap();
        let prop = Propagator::new(&table, MixerConfig::default()).unwrap();
        let cfg = PipelineConfig::default();
        let first = evaluated(&prop, Stage::Qaoa1, dqa_schedule(&DqaConfig::new(4, 0.5).unwrap())).unwrap();
        let err = qaoa2(&prop, &first, Qaoa2Strategy::InterpolateFrom { p0: 2 }, &[], &cfg).unwrap_err();
        assert!(matches!(err, Error::MissingSolution(_)));
    }

    #[test]
    fn transfer_to_the_same_table_stays_put() {
        let ts = generate_instance(7, 5, 4);
        let table = build_energy_table(&ts, CostVariant::Count).unwrap();
        let prop = Propagator::new(&table, MixerConfig::default()).unwrap();
        let cfg = PipelineConfig::default();
        let (_, dqa) = dqa_optimum(&prop, 4, &cfg).unwrap();
        let first = qaoa1(&prop, &dqa, &cfg).unwrap();
        let moved = transfer(&prop, &first.params, 4, &cfg).unwrap();
        assert!((moved.energy_density - first.energy_density).abs() <= 1e-10);
        assert!(moved.n_iters <= 2);
        assert!(transfer(&prop, &first.params, 5, &cfg).is_err());
    }

    #[test]
    fn analytic_and_finite_difference_gradients_agree() {
        let ts = generate_instance(6, 4, 13);
        let table = build_energy_table(&ts, CostVariant::Count).unwrap();
        let prop = Propagator::new(&table, MixerConfig::default()).unwrap();
        let start = dqa_schedule(&DqaConfig::new(3, 0.6).unwrap());
        let cfg = BfgsConfig {
            grad_tol: 1e-6,
            ..BfgsConfig::default()
        };
        let exact = optimize_schedule(&prop, &start, Stage::Qaoa1, &cfg).unwrap();
        let h = 1e-6;
        let numeric = bfgs_minimize(
            |x| {
                let e = |v: &[f64]| prop.energy(&ScheduleParams::from_flat(v).unwrap()).map(|r| r.energy);
                let f = e(x)?;
                let mut g = vec![0.0; x.len()];
                for k in 0..x.len() {
                    let (mut up, mut down) = (x.to_vec(), x.to_vec());
                    up[k] += h;
                    down[k] -= h;
                    g[k] = (e(&up)? - e(&down)?) / (2.0 * h);
                }
                Ok((f, g))
            },
            &start.to_flat(),
            &cfg,
        )
        .unwrap();
        let n = table.n_spins() as f64;
        assert!((exact.energy_density - numeric.value / n).abs() < 1e-6);
    }

    #[test]
    fn smoothness_metric_examples() {
        let affine = ScheduleParams::new((0..8).map(|m| 0.1 * m as f64).collect(), vec![0.5; 8]).unwrap();
        assert!(smoothness_metric(&affine).unwrap() < 1e-24);
        let alt: Vec<f64> = (0..8).map(|m| if m % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let rough = ScheduleParams::new(alt.clone(), alt).unwrap();
        let smoothed = smooth(&rough, 3).unwrap();
        assert!(smoothness_metric(&rough).unwrap() > smoothness_metric(&smoothed).unwrap());
        let short = ScheduleParams::new(vec![0.1, 0.2], vec![0.3, 0.4]).unwrap();
        assert!(smoothness_metric(&short).is_err());
    }

    #[test]
    fn recommended_plans() {
        let rand = Provenance::Randomized { seed: 1 };
        assert_eq!(SweepPlan::recommended(CostVariant::Count, Provenance::Original), SweepPlan::SmoothRestart);
        for (v, p) in [(CostVariant::Linear, Provenance::Original), (CostVariant::Count, rand), (CostVariant::Linear, rand)] {
            let plan = SweepPlan::recommended(v, p);
            assert_eq!(plan.strategy(16, Some(8)), Qaoa2Strategy::SmoothRestart);
            assert_eq!(plan.strategy(32, Some(16)), Qaoa2Strategy::InterpolateFrom { p0: 16 });
        }
    }

    #[test]
    fn record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let table = DiagonalTable::new(3, (0..8).map(f64::from).collect()).unwrap();
        let prop = Propagator::new(&table, MixerConfig::default()).unwrap();
        let r = evaluated(&prop, Stage::Dqa, dqa_schedule(&DqaConfig::new(3, 0.5).unwrap())).unwrap();
        let rec = ResultRecord::new(&r, 1, Provenance::Randomized { seed: 9 }, 42);
        let path = dir.path().join("r.json");
        rec.write_json(&path).unwrap();
        assert_eq!(ResultRecord::read_json(&path).unwrap(), rec);
        let back = rec.to_result();
        assert_eq!((back.params, back.energy_density, back.stage), (r.params.clone(), r.energy_density, r.stage));
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"stage\": \"dqa\"") && text.contains("\"P\": 3"));
        r.write_trace_csv(dir.path().join("t.csv")).unwrap();
        let trace = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert!(trace.starts_with("iter,energy_density,grad_norm\n"));
    }
}
