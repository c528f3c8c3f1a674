//! Angle sequences: linear digitized-annealing schedules, the Δt landscape,
//! smoothing, resampling in P, and the effective annealing coordinate.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::Diagonal;
use crate::numeric::{golden_section, linspace};
use crate::statevec::{MixerConfig, Propagator};

/// The `2P` angles `(β_m, γ_m)` of a protocol, `m = 1..P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    betas: Vec<f64>,
    gammas: Vec<f64>,
}

impl ScheduleParams {
    pub fn new(betas: Vec<f64>, gammas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.len() != gammas.len() {
            return Err(Error::InvalidArgument(format!(
                "need equal non-empty beta/gamma sequences, got {} and {}",
                betas.len(),
                gammas.len()
            )));
        }
        if betas.iter().chain(&gammas).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("angles must be finite".into()));
        }
        Ok(ScheduleParams { betas, gammas })
    }

    /// Inverse of [`ScheduleParams::to_flat`]: betas then gammas.
    pub fn from_flat(x: &[f64]) -> Result<Self> {
        if x.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!("odd parameter vector length {}", x.len())));
        }
        let (b, g) = x.split_at(x.len() / 2);
        ScheduleParams::new(b.to_vec(), g.to_vec())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.betas.iter().chain(&self.gammas).copied().collect()
    }

    /// Number of steps `P`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    /// Writes the `m,beta,gamma` CSV (m is 1-based).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["m", "beta", "gamma"])?;
        for (m, (b, g)) in self.betas.iter().zip(&self.gammas).enumerate() {
            w.write_record([(m + 1).to_string(), b.to_string(), g.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = csv::Reader::from_path(path)?;
        if r.headers()? != vec!["m", "beta", "gamma"] {
            return Err(bad("expected header m,beta,gamma".into()));
        }
        let (mut betas, mut gammas) = (Vec::new(), Vec::new());
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            let m: usize = rec[0].parse().map_err(|e| bad(format!("row {k}: {e}")))?;
            if m != k + 1 {
                return Err(bad(format!("row {k}: step index {m} out of order")));
            }
            betas.push(rec[1].parse().map_err(|e| bad(format!("row {k}: {e}")))?);
            gammas.push(rec[2].parse().map_err(|e| bad(format!("row {k}: {e}")))?);
        }
        ScheduleParams::new(betas, gammas).map_err(|e| bad(e.to_string()))
    }
}

/// Linear digitized-annealing protocol with `P` steps of length `Δt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DqaConfig {
    pub n_steps: usize,
    pub dt: f64,
}

impl DqaConfig {
    pub fn new(n_steps: usize, dt: f64) -> Result<Self> {
        if n_steps == 0 || !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need P >= 1 and dt > 0, got P={n_steps}, dt={dt}"
            )));
        }
        Ok(DqaConfig { n_steps, dt })
    }

    /// Total annealing time `τ = P Δt`.
    pub fn total_time(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }
}

/// `β_m = (1 - s_m) Δt`, `γ_m = s_m Δt`, `s_m = m / P`.
pub fn dqa_schedule(cfg: &DqaConfig) -> ScheduleParams {
    let p = cfg.n_steps as f64;
    let (betas, gammas) = (1..=cfg.n_steps)
        .map(|m| {
            let s = m as f64 / p;
            ((1.0 - s) * cfg.dt, s * cfg.dt)
        })
        .unzip();
    ScheduleParams { betas, gammas }
}

/// Defaults for the Δt scan: 60 points on `[0.02, 3.0]`.
pub const DEFAULT_DT_MIN: f64 = 0.02;
pub const DEFAULT_DT_MAX: f64 = 3.0;
pub const DEFAULT_DT_POINTS: usize = 60;
/// Relative Δt tolerance of the golden-section refinement.
pub const DT_REFINE_TOL: f64 = 1e-4;

/// Energy density of optimal-linear protocols versus Δt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtLandscape {
    pub n_steps: usize,
    pub dt_grid: Vec<f64>,
    pub energies: Vec<f64>,
    /// Grid point with the lowest energy.
    pub grid_argmin: usize,
    /// Refined optimum.
    pub argmin_dt: f64,
    pub argmin_energy: f64,
}

impl DtLandscape {
    pub fn optimal_schedule(&self) -> ScheduleParams {
        dqa_schedule(&DqaConfig {
            n_steps: self.n_steps,
            dt: self.argmin_dt,
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["dt", "energy_density"])?;
        for (dt, e) in self.dt_grid.iter().zip(&self.energies) {
            w.write_record([dt.to_string(), e.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates `ε_P(Δt)` on a uniform grid, then refines around the grid
/// minimum by golden-section search.
pub fn scan_dt(
    table: &impl Diagonal,
    n_steps: usize,
    dt_min: f64,
    dt_max: f64,
    n_points: usize,
    cfg: &MixerConfig,
) -> Result<DtLandscape> {
    let prop = Propagator::new(table, *cfg)?;
    scan_dt_with(&prop, n_steps, dt_min, dt_max, n_points)
}

pub fn scan_dt_with(
    prop: &Propagator,
    n_steps: usize,
    dt_min: f64,
    dt_max: f64,
    n_points: usize,
) -> Result<DtLandscape> {
    if !(dt_min > 0.0 && dt_max > dt_min && dt_max.is_finite()) || n_points < 2 || n_steps == 0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate Δt grid: [{dt_min}, {dt_max}] with {n_points} points, P={n_steps}"
        )));
    }
    let density = |dt: f64| -> Result<f64> {
        let params = dqa_schedule(&DqaConfig { n_steps, dt });
        Ok(prop.energy(&params)?.energy_density)
    };
    let dt_grid = linspace(dt_min, dt_max, n_points);
    let energies = dt_grid
        .par_iter()
        .map(|&dt| density(dt))
        .collect::<Result<Vec<_>>>()?;
    let grid_argmin = energies
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .expect("non-empty grid");

    let lo = dt_grid[grid_argmin.saturating_sub(1)];
    let hi = dt_grid[(grid_argmin + 1).min(n_points - 1)];
    let mut failure = None;
    let refined = golden_section(
        |dt| match density(dt) {
            Ok(e) => e,
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        },
        lo,
        hi,
        DT_REFINE_TOL,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let (argmin_dt, argmin_energy) = if refined.value < energies[grid_argmin] {
        (refined.x, refined.value)
    } else {
        (dt_grid[grid_argmin], energies[grid_argmin])
    };
    Ok(DtLandscape {
        n_steps,
        dt_grid,
        energies,
        grid_argmin,
        argmin_dt,
        argmin_energy,
    })
}

pub const DEFAULT_SMOOTH_WINDOW: usize = 3;

fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let last = x.len() - 1;
    (0..x.len())
        .map(|m| {
            let lo = m.saturating_sub(half);
            let hi = (m + half).min(last);
            x[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Centered moving average of β and γ separately; windows are truncated at
/// the ends of the sequence.
pub fn smooth(params: &ScheduleParams, window: usize) -> Result<ScheduleParams> {
    if window % 2 == 0 || window > params.len() {
        return Err(Error::InvalidArgument(format!(
            "smoothing window must be odd and at most P={}, got {window}",
            params.len()
        )));
    }
    Ok(ScheduleParams {
        betas: moving_average(&params.betas, window),
        gammas: moving_average(&params.gammas, window),
    })
}

fn resample(x: &[f64], new_len: usize) -> Vec<f64> {
    let intervals = x.len() - 1;
    (0..new_len)
        .map(|k| {
            // position on the old step grid, exact at both ends
            let pos = (k * intervals) as f64 / (new_len - 1) as f64;
            let i = (pos.floor() as usize).min(intervals);
            if i == intervals {
                x[intervals]
            } else {
                let frac = pos - i as f64;
                x[i] + frac * (x[i + 1] - x[i])
            }
        })
        .collect()
}

/// Piecewise-linear resampling in `m̃ = (m-1)/(P-1)` onto `new_p` steps.
pub fn interpolate(params: &ScheduleParams, new_p: usize) -> Result<ScheduleParams> {
    if params.len() < 2 || new_p < 2 {
        return Err(Error::InvalidArgument(format!(
            "interpolation needs P >= 2 and new P >= 2, got {} -> {new_p}",
            params.len()
        )));
    }
    Ok(ScheduleParams {
        betas: resample(&params.betas, new_p),
        gammas: resample(&params.gammas, new_p),
    })
}

/// `s_m = γ_m / (γ_m + β_m)`.
pub fn effective_s(params: &ScheduleParams) -> Result<Vec<f64>> {
    params
        .betas
        .iter()
        .zip(&params.gammas)
        .enumerate()
        .map(|(m, (b, g))| {
            let sum = b + g;
            if sum == 0.0 {
                Err(Error::ZeroAngleSum { step: m + 1 })
            } else {
                Ok(g / sum)
            }
        })
        .collect()
}

pub fn write_effective_s_csv(params: &ScheduleParams, path: impl AsRef<Path>) -> Result<()> {
    let s = effective_s(params)?;
    let p = params.len();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["m", "m_tilde", "s"])?;
    for (k, s) in s.iter().enumerate() {
        let m_tilde = if p > 1 { k as f64 / (p - 1) as f64 } else { 0.0 };
        w.write_record([(k + 1).to_string(), m_tilde.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
