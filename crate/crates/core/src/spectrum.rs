//! Low-lying spectrum of the interpolating Hamiltonian
//! `H(s) = s·H_z + (1−s)·(−Γ0 Σ_j X_j)` by matrix-free thick-restart
//! Lanczos with full reorthogonalization and deflation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::debug;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{Diagonal, Provenance};
use crate::numeric::{linspace, symmetric_eigen};
use crate::statevec::MixerConfig;

pub const DEFAULT_EIG_TOL: f64 = 1e-8;
pub const DEFAULT_GRID_POINTS: usize = 97;
pub const DEFAULT_S_MAX: f64 = 0.96;
pub const DEFAULT_REFINE_POINTS: usize = 10;
/// Numerical floor below which a negative gap is treated as zero.
pub const GAP_FLOOR: f64 = 1e-9;

const CHUNK: usize = 1 << 12;
/// Grid points per sequential warm-started run.
const SWEEP_CHUNK: usize = 8;
const START_SEED: u64 = 0x6761_705f_6c61_6e63;
/// Weight of the random admixture added to warm starts.
const WARM_NOISE: f64 = 1e-2;

/// Eigensolver budget and accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenConfig {
    /// Absolute tolerance on the eigenpair residual norm.
    pub tol: f64,
    /// Largest Krylov basis before a restart.
    pub krylov_dim: usize,
    /// Ritz vectors carried across a restart.
    pub keep: usize,
    pub max_restarts: usize,
}

impl Default for EigenConfig {
    fn default() -> Self {
        EigenConfig {
            tol: DEFAULT_EIG_TOL,
            krylov_dim: 24,
            keep: 6,
            max_restarts: 4000,
        }
    }
}

impl EigenConfig {
    pub fn with_tol(tol: f64) -> Self {
        EigenConfig {
            tol,
            ..EigenConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("eigensolver tolerance must be positive, got {}", self.tol)));
        }
        if self.krylov_dim < 3 || self.keep == 0 || self.keep + 1 >= self.krylov_dim || self.max_restarts == 0 {
            return Err(Error::InvalidArgument(format!(
                "need krylov_dim >= 3 and 0 < keep < krylov_dim - 1, got krylov_dim={} keep={}",
                self.krylov_dim, self.keep
            )));
        }
        Ok(())
    }
}

struct Operator<'a> {
    n_spins: usize,
    s: f64,
    field: f64,
    values: &'a [f64],
}

impl<'a> Operator<'a> {
    fn new(s: f64, table: &'a impl Diagonal, mixer: &MixerConfig) -> Result<Self> {
        Self::from_parts(s, table.n_spins(), table.values(), mixer)
    }

    fn from_parts(s: f64, n_spins: usize, values: &'a [f64], mixer: &MixerConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::InvalidArgument(format!("s must lie in [0, 1], got {s}")));
        }
        Ok(Operator {
            n_spins,
            s,
            field: (1.0 - s) * mixer.gamma0,
            values,
        })
    }

    fn dim(&self) -> usize {
        self.values.len()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        out.par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(k, o)| self.apply_chunk(v, k * CHUNK, o));
    }

    /// `H·v` followed by its coefficients along `basis`, in one sweep.
    fn apply_and_project(&self, v: &[f64], basis: &[&[f64]], out: &mut [f64]) -> Vec<f64> {
        let partial = out
            .par_chunks_mut(CHUNK)
            .enumerate()
            .map(|(k, o)| {
                self.apply_chunk(v, k * CHUNK, o);
                chunk_dots(basis, k * CHUNK, o)
            })
            .collect();
        reduce(partial, basis.len())
    }

    fn apply_chunk(&self, v: &[f64], base: usize, o: &mut [f64]) {
        let low_bits = self.n_spins.min(CHUNK.trailing_zeros() as usize);
        {
            let len = o.len();
            let mut acc = vec![0.0; len];
            let local = &v[base..base + len];
            for j in 0..low_bits {
                let h = 1 << j;
                for lo in (0..len).step_by(2 * h) {
                    let (a, b) = acc[lo..lo + 2 * h].split_at_mut(h);
                    let (x, y) = local[lo..lo + 2 * h].split_at(h);
                    a.iter_mut().zip(y).for_each(|(a, y)| *a += y);
                    b.iter_mut().zip(x).for_each(|(b, x)| *b += x);
                }
            }
            for j in low_bits..self.n_spins {
                let partner = base ^ (1 << j);
                acc.iter_mut().zip(&v[partner..partner + len]).for_each(|(a, p)| *a += p);
            }
            let d = &self.values[base..base + len];
            for i in 0..len {
                o[i] = self.s * d[i] * local[i] - self.field * acc[i];
            }
        }
    }
}

/// `H(s)·v` in the computational basis.
pub fn hamiltonian_matvec(s: f64, table: &impl Diagonal, mixer: &MixerConfig, v: &[f64]) -> Result<Vec<f64>> {
    let op = Operator::new(s, table, mixer)?;
    if v.len() != op.dim() {
        return Err(Error::DimensionMismatch {
            expected: op.dim(),
            actual: v.len(),
        });
    }
    let mut out = vec![0.0; v.len()];
    op.apply(v, &mut out);
    Ok(out)
}

#[cfg(test)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let partial: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
        .collect();
    partial.iter().sum()
}

fn scale(a: &mut [f64], factor: f64) {
    a.par_iter_mut().for_each(|x| *x *= factor);
}

fn chunk_dots(basis: &[&[f64]], base: usize, wc: &[f64]) -> Vec<f64> {
    basis
        .iter()
        .map(|b| wc.iter().zip(&b[base..base + wc.len()]).map(|(p, q)| p * q).sum())
        .collect()
}

fn chunk_subtract(basis: &[&[f64]], h: &[f64], base: usize, wc: &mut [f64]) {
    let len = wc.len();
    for (b, &c) in basis.iter().zip(h) {
        wc.iter_mut().zip(&b[base..base + len]).for_each(|(w, b)| *w -= c * b);
    }
}

fn reduce(partial: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut h = vec![0.0; len];
    for p in &partial {
        h.iter_mut().zip(p).for_each(|(h, p)| *h += p);
    }
    h
}

/// Coefficients of `w` along each vector of `basis`.
fn coefficients(basis: &[&[f64]], w: &[f64]) -> Vec<f64> {
    let partial = w
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(k, wc)| chunk_dots(basis, k * CHUNK, wc))
        .collect();
    reduce(partial, basis.len())
}

/// `w -= Σ_i h_i basis_i`, then the coefficients of the result, in one sweep.
fn subtract_and_project(basis: &[&[f64]], h: &[f64], w: &mut [f64]) -> Vec<f64> {
    let partial = w
        .par_chunks_mut(CHUNK)
        .enumerate()
        .map(|(k, wc)| {
            chunk_subtract(basis, h, k * CHUNK, wc);
            chunk_dots(basis, k * CHUNK, wc)
        })
        .collect();
    reduce(partial, basis.len())
}

/// `w -= Σ_i h_i basis_i`; returns `‖w‖`.
fn subtract_and_norm(basis: &[&[f64]], h: &[f64], w: &mut [f64]) -> f64 {
    let partial: Vec<f64> = w
        .par_chunks_mut(CHUNK)
        .enumerate()
        .map(|(k, wc)| {
            chunk_subtract(basis, h, k * CHUNK, wc);
            wc.iter().map(|x| x * x).sum()
        })
        .collect();
    partial.iter().sum::<f64>().sqrt()
}

fn slices<'v>(locked: &'v [Vec<f64>], basis: &'v [Vec<f64>]) -> Vec<&'v [f64]> {
    locked.iter().chain(basis).map(Vec::as_slice).collect()
}

/// Two passes of classical Gram-Schmidt against `locked` and `basis`
/// together, starting from precomputed first-pass coefficients `h`.
/// Returns the summed coefficients along `basis` and the remaining norm.
fn finish_orthogonalization(locked: &[Vec<f64>], basis: &[Vec<f64>], mut h: Vec<f64>, w: &mut [f64]) -> (Vec<f64>, f64) {
    let all = slices(locked, basis);
    let h2 = subtract_and_project(&all, &h, w);
    let norm = subtract_and_norm(&all, &h2, w);
    h.iter_mut().zip(&h2).for_each(|(a, b)| *a += b);
    (h.split_off(locked.len()), norm)
}

fn orthogonalize(locked: &[Vec<f64>], basis: &[Vec<f64>], w: &mut [f64]) -> (Vec<f64>, f64) {
    let h = coefficients(&slices(locked, basis), w);
    finish_orthogonalization(locked, basis, h, w)
}

/// `Σ_i u_i basis_i`.
fn combine(basis: &[Vec<f64>], u: &[f64]) -> Vec<f64> {
    let dim = basis[0].len();
    let mut out = vec![0.0; dim];
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(k, oc)| {
        let base = k * CHUNK;
        for (b, &c) in basis.iter().zip(u) {
            let len = oc.len();
            oc.iter_mut().zip(&b[base..base + len]).for_each(|(o, b)| *o += c * b);
        }
    });
    out
}

fn random_vector(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

struct Eigenpair {
    value: f64,
    vector: Vec<f64>,
    residual: f64,
    /// Next Ritz vector of the final basis, a warm start for the next level.
    next: Option<Vec<f64>>,
}

/// Lowest eigenpair of `H` restricted to the complement of `locked`.
fn lowest_in_complement(
    op: &Operator,
    locked: &[Vec<f64>],
    start: Vec<f64>,
    cfg: &EigenConfig,
    seed: u64,
    matvecs: &mut usize,
) -> Result<Eigenpair> {
    let dim = op.dim();
    let free = dim - locked.len();
    let m_max = cfg.krylov_dim.min(free);
    let keep = cfg.keep.min(m_max.saturating_sub(1)).max(1);
    let scale_h = op.s * op.values.iter().fold(0.0f64, |a, v| a.max(v.abs())) + op.field * op.n_spins as f64;
    let tiny = 1e-14 * scale_h.max(1.0);

    let prepare = |mut v: Vec<f64>, salt: u64| -> Vec<f64> {
        for attempt in 0..4u64 {
            let (_, nv) = orthogonalize(locked, &[], &mut v);
            if nv > 1e-8 * (dim as f64).sqrt() {
                scale(&mut v, 1.0 / nv);
                return v;
            }
            v = random_vector(dim, seed ^ salt.wrapping_add(attempt + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        }
        v
    };

    let mut basis: Vec<Vec<f64>> = vec![prepare(start, 0)];
    let mut t = DMatrix::<f64>::zeros(m_max, m_max);
    let mut residuals = Vec::new();
    let mut w = vec![0.0; dim];
    for restart in 0..cfg.max_restarts {
        let (eig, beta, j) = loop {
            let j = basis.len() - 1;
            let h1 = op.apply_and_project(&basis[j], &slices(locked, &basis), &mut w);
            *matvecs += 1;
            let (h, beta) = finish_orthogonalization(locked, &basis, h1, &mut w);
            for (i, &hi) in h.iter().enumerate() {
                t[(i, j)] = hi;
                t[(j, i)] = hi;
            }
            let eig = symmetric_eigen(&t.view((0, 0), (j + 1, j + 1)).into_owned());
            let res = beta * eig.vectors[(j, 0)].abs();
            if res <= 0.5 * cfg.tol || beta <= tiny || j + 1 == m_max {
                break (eig, beta, j);
            }
            scale(&mut w, 1.0 / beta);
            basis.push(w.clone());
        };
        let ritz = |c: usize| -> Vec<f64> {
            let u: Vec<f64> = eig.vectors.column(c).iter().copied().collect();
            combine(&basis, &u)
        };
        let estimate = beta * eig.vectors[(j, 0)].abs();
        residuals.push(estimate);

        if estimate <= 0.5 * cfg.tol || beta <= tiny {
            let mut y = ritz(0);
            let (_, ny) = orthogonalize(locked, &[], &mut y);
            scale(&mut y, 1.0 / ny);
            // explicit residual guards against a Ritz value that only looks converged
            let hy = {
                let yy = [y.as_slice()];
                let mut hy = vec![0.0; dim];
                let value = op.apply_and_project(&y, &yy, &mut hy)[0];
                *matvecs += 1;
                (hy, value)
            };
            let (mut r, value) = hy;
            r.par_iter_mut().zip(&y).for_each(|(r, y)| *r -= value * y);
            let (_, residual) = orthogonalize(locked, &[], &mut r);
            if residual <= cfg.tol {
                debug!(
                    "s={:.4}: eigenvalue {value:.12} after {restart} restarts, residual {residual:.2e}",
                    op.s
                );
                return Ok(Eigenpair {
                    value,
                    vector: y,
                    residual,
                    next: (j > 0).then(|| ritz(1)),
                });
            }
            basis = vec![prepare(y, restart as u64 + 1)];
            t.fill(0.0);
            continue;
        }

        let kept = keep.min(eig.values.len());
        let mut next: Vec<Vec<f64>> = (0..kept).map(ritz).collect();
        t.fill(0.0);
        for (i, &theta) in eig.values.iter().take(kept).enumerate() {
            t[(i, i)] = theta;
        }
        scale(&mut w, 1.0 / beta);
        next.push(w.clone());
        basis = next;
    }
    let tail = residuals.len().saturating_sub(8);
    Err(Error::NoConvergence {
        iterations: cfg.max_restarts,
        residuals: residuals[tail..].to_vec(),
    })
}

/// Two lowest eigenvalues (with multiplicity) at one `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowestTwo {
    pub ground: f64,
    pub excited: f64,
    pub residuals: [f64; 2],
    pub matvecs: usize,
}

impl LowestTwo {
    pub fn gap(&self) -> f64 {
        self.excited - self.ground
    }
}

fn solve_pair(op: &Operator, cfg: &EigenConfig, warm: Option<&[Vec<f64>; 2]>) -> Result<(LowestTwo, [Vec<f64>; 2])> {
    let dim = op.dim();
    let seed = START_SEED ^ op.s.to_bits();
    // the random admixture keeps every eigenspace reachable, including a
    // second copy of a degenerate level
    let start = |k: u64, guess: Option<&[f64]>| -> Vec<f64> {
        let mut v = random_vector(dim, seed.wrapping_add(k));
        if let Some(g) = guess {
            let weight = WARM_NOISE / (dim as f64).sqrt();
            v.par_iter_mut().zip(g).for_each(|(v, g)| *v = g + weight * *v);
        }
        v
    };
    let mut matvecs = 0;
    let first = lowest_in_complement(op, &[], start(0, warm.map(|w| w[0].as_slice())), cfg, seed, &mut matvecs)?;
    let guess = first.next.as_deref().or(warm.map(|w| w[1].as_slice()));
    let mut locked = vec![first.vector];
    let second = lowest_in_complement(op, &locked, start(1, guess), cfg, seed ^ 1, &mut matvecs)?;
    let mut found = vec![(first.value, first.residual), (second.value, second.residual)];
    locked.push(second.vector);
    if second.value < first.value - cfg.tol && dim > 2 {
        // the first solve missed the ground level; one more deflation settles the pair
        let third = lowest_in_complement(op, &locked, start(2, None), cfg, seed ^ 2, &mut matvecs)?;
        found.push((third.value, third.residual));
        locked.push(third.vector);
    }
    let mut levels: Vec<((f64, f64), Vec<f64>)> = found.into_iter().zip(locked).collect();
    levels.sort_by(|a, b| a.0 .0.total_cmp(&b.0 .0));
    levels.truncate(2);
    let ((e1, r1), v1) = levels.pop().unwrap();
    let ((e0, r0), v0) = levels.pop().unwrap();
    let result = LowestTwo {
        ground: e0,
        excited: e1,
        residuals: [r0, r1],
        matvecs,
    };
    Ok((result, [v0, v1]))
}

/// Two lowest eigenvalues `(E_gs, E_ex)` of `H(s)`, counted with multiplicity.
pub fn lowest_two(s: f64, table: &impl Diagonal, mixer: &MixerConfig, tol: f64) -> Result<(f64, f64)> {
    let r = lowest_two_with(s, table, mixer, &EigenConfig::with_tol(tol))?;
    Ok((r.ground, r.excited))
}

pub fn lowest_two_with(s: f64, table: &impl Diagonal, mixer: &MixerConfig, cfg: &EigenConfig) -> Result<LowestTwo> {
    cfg.validate()?;
    let op = Operator::new(s, table, mixer)?;
    if op.dim() < 2 {
        return Err(Error::InvalidArgument("need at least two basis states".into()));
    }
    Ok(solve_pair(&op, cfg, None)?.0)
}

/// Default grid: uniform on `[0, 0.96]`.
pub fn default_s_grid() -> Vec<f64> {
    linspace(0.0, DEFAULT_S_MAX, DEFAULT_GRID_POINTS)
}

/// Settings for a gap sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapConfig {
    pub eigen: EigenConfig,
    /// Extra points placed between the neighbours of the coarse minimum.
    pub refine_points: usize,
}

impl Default for GapConfig {
    fn default() -> Self {
        GapConfig {
            eigen: EigenConfig::default(),
            refine_points: DEFAULT_REFINE_POINTS,
        }
    }
}

/// `Δ(s) = E_ex(s) − E_gs(s)` along a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCurve {
    pub s_grid: Vec<f64>,
    pub gaps: Vec<f64>,
    pub ground: Vec<f64>,
    pub excited: Vec<f64>,
    pub min_gap: f64,
    pub s_at_min: f64,
    pub provenance: Provenance,
}

/// Serialized summary of a curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub min_gap: f64,
    pub s_at_min: f64,
    pub provenance: Provenance,
}

impl GapCurve {
    pub fn summary(&self) -> GapSummary {
        GapSummary {
            min_gap: self.min_gap,
            s_at_min: self.s_at_min,
            provenance: self.provenance,
        }
    }

    /// Minimum gap over grid points with `s <= s_max`.
    pub fn min_gap_below(&self, s_max: f64) -> Option<(f64, f64)> {
        self.s_grid
            .iter()
            .zip(&self.gaps)
            .filter(|(s, _)| **s <= s_max)
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(s, g)| (*s, *g))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["s", "gap"])?;
        for (s, g) in self.s_grid.iter().zip(&self.gaps) {
            w.write_record([s.to_string(), g.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &self.summary())?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

/// Warm-started sweep over an ascending grid, in fixed-size runs evaluated
/// concurrently.
fn sweep(table: &(impl Diagonal + Sync), mixer: &MixerConfig, grid: &[f64], cfg: &EigenConfig) -> Result<Vec<LowestTwo>> {
    let runs: Vec<Result<Vec<LowestTwo>>> = grid
        .par_chunks(SWEEP_CHUNK)
        .map(|run| {
            let mut warm: Option<[Vec<f64>; 2]> = None;
            let mut out = Vec::with_capacity(run.len());
            for &s in run {
                let op = Operator::new(s, table, mixer)?;
                let (pair, vectors) = solve_pair(&op, cfg, warm.as_ref())?;
                debug!("s={s:.4}: gap {:.6e} ({} matvecs)", pair.gap(), pair.matvecs);
                out.push(pair);
                warm = Some(vectors);
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(grid.len());
    for r in runs {
        all.extend(r?);
    }
    Ok(all)
}

/// Gap along `s_grid`, refined around the coarse minimum when
/// `cfg.refine_points > 0`.
pub fn gap_curve(
    table: &(impl Diagonal + Sync),
    provenance: Provenance,
    mixer: &MixerConfig,
    s_grid: &[f64],
    cfg: &GapConfig,
) -> Result<GapCurve> {
    cfg.eigen.validate()?;
    if s_grid.is_empty() {
        return Err(Error::InvalidArgument("empty s grid".into()));
    }
    if s_grid.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::InvalidArgument("s grid must lie within [0, 1]".into()));
    }
    if s_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("s grid must be strictly ascending".into()));
    }
    if table.values().len() < 2 {
        return Err(Error::InvalidArgument("need at least two basis states".into()));
    }
    let mut points: Vec<(f64, LowestTwo)> = s_grid.iter().copied().zip(sweep(table, mixer, s_grid, &cfg.eigen)?).collect();

    if cfg.refine_points > 0 && s_grid.len() >= 2 {
        let k = (0..points.len())
            .min_by(|&a, &b| points[a].1.gap().total_cmp(&points[b].1.gap()))
            .unwrap();
        let lo = s_grid[k.saturating_sub(1)];
        let hi = s_grid[(k + 1).min(s_grid.len() - 1)];
        let extra: Vec<f64> = linspace(lo, hi, cfg.refine_points + 2)[1..=cfg.refine_points]
            .iter()
            .copied()
            .filter(|s| !s_grid.contains(s))
            .collect();
        let refined = sweep(table, mixer, &extra, &cfg.eigen)?;
        points.extend(extra.into_iter().zip(refined));
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        points.dedup_by(|a, b| a.0 == b.0);
    }

    let gaps: Vec<f64> = points.iter().map(|(_, p)| p.gap()).collect();
    let (k_min, _) = gaps
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    Ok(GapCurve {
        s_grid: points.iter().map(|(s, _)| *s).collect(),
        min_gap: gaps[k_min],
        s_at_min: points[k_min].0,
        ground: points.iter().map(|(_, p)| p.ground).collect(),
        excited: points.iter().map(|(_, p)| p.excited).collect(),
        gaps,
        provenance,
    })
}
