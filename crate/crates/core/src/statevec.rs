//! Exact state-vector engine for alternating phase / transverse-field layers.
//!
//! Amplitudes are stored as separate real and imaginary arrays so that both
//! layer kernels reduce to contiguous elementwise loops. `ħ = 1`; the mixer
//! `exp(-iβ H_x)` with `H_x = -Γ0 Σ_j X_j` is applied as `Π_j exp(+iβΓ0 X_j)`.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{Diagonal, DEFAULT_MAX_SPINS, ZERO_ENERGY_TOL};
use crate::schedules::ScheduleParams;

/// Low qubits rotated together while a block sits in cache.
const BLOCK_BITS: usize = 12;
/// Work unit for parallel loops over high-qubit pairs.
const PAR_CHUNK: usize = 1 << 12;
/// Fixed partition for reductions, independent of the thread count.
const SUM_CHUNK: usize = 1 << 12;
/// Elements per tile of the high-qubit pass.
const TILE_BITS: usize = 15;
/// Shortest contiguous run kept per row inside a tile.
const MIN_RUN_BITS: usize = 6;
/// Tables with at most this many distinct energies use a phase lookup.
const MAX_PHASE_LEVELS: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    n_spins: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl StateVector {
    pub fn from_amplitudes(n_spins: usize, amplitudes: &[Complex64]) -> Result<Self> {
        check_capacity(n_spins)?;
        if amplitudes.len() != 1usize << n_spins {
            return Err(Error::InvalidArgument(format!(
                "{} amplitudes for {n_spins} spins",
                amplitudes.len()
            )));
        }
        Ok(StateVector {
            n_spins,
            re: amplitudes.iter().map(|a| a.re).collect(),
            im: amplitudes.iter().map(|a| a.im).collect(),
        })
    }

    /// Computational basis state `|config⟩`.
    pub fn basis(n_spins: usize, config: usize) -> Result<Self> {
        check_capacity(n_spins)?;
        let dim = 1usize << n_spins;
        if config >= dim {
            return Err(Error::IndexOutOfRange { index: config, limit: dim });
        }
        let mut re = vec![0.0; dim];
        re[config] = 1.0;
        Ok(StateVector {
            n_spins,
            re,
            im: vec![0.0; dim],
        })
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn dim(&self) -> usize {
        self.re.len()
    }

    pub fn amplitude(&self, config: usize) -> Complex64 {
        Complex64::new(self.re[config], self.im[config])
    }

    pub fn amplitudes(&self) -> Vec<Complex64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| Complex64::new(r, i))
            .collect()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .collect()
    }

    pub fn norm_sqr(&self) -> f64 {
        fixed_order_sum(self.dim(), |range| {
            self.re[range.clone()]
                .iter()
                .zip(&self.im[range])
                .map(|(r, i)| r * r + i * i)
                .sum()
        })
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &StateVector) -> Result<Complex64> {
        check_dims(self.n_spins, other.n_spins)?;
        let re = fixed_order_sum(self.dim(), |r| {
            (r.start..r.end)
                .map(|k| self.re[k] * other.re[k] + self.im[k] * other.im[k])
                .sum()
        });
        let im = fixed_order_sum(self.dim(), |r| {
            (r.start..r.end)
                .map(|k| self.re[k] * other.im[k] - self.im[k] * other.re[k])
                .sum()
        });
        Ok(Complex64::new(re, im))
    }
}

fn check_capacity(n_spins: usize) -> Result<()> {
    if n_spins == 0 {
        return Err(Error::InvalidArgument("register needs at least one spin".into()));
    }
    if n_spins > DEFAULT_MAX_SPINS {
        return Err(Error::CapacityExceeded {
            n_spins,
            cap: DEFAULT_MAX_SPINS,
        });
    }
    Ok(())
}

fn check_dims(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// Sums `partial(range)` over fixed consecutive ranges, in index order.
fn fixed_order_sum<F>(len: usize, partial: F) -> f64
where
    F: Fn(std::ops::Range<usize>) -> f64 + Sync,
{
    let n_chunks = len.div_ceil(SUM_CHUNK);
    let partials: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .map(|k| partial(k * SUM_CHUNK..((k + 1) * SUM_CHUNK).min(len)))
        .collect();
    partials.iter().sum()
}

/// Uniform superposition `|+⟩^{⊗N}`.
pub fn plus_state(n_spins: usize) -> Result<StateVector> {
    check_capacity(n_spins)?;
    let dim = 1usize << n_spins;
    let mut amp = 2f64.powi(-((n_spins / 2) as i32));
    if n_spins % 2 == 1 {
        amp *= std::f64::consts::FRAC_1_SQRT_2;
    }
    Ok(StateVector {
        n_spins,
        re: vec![amp; dim],
        im: vec![0.0; dim],
    })
}

/// Transverse-field strength `Γ0` of `H_x = -Γ0 Σ_j X_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub gamma0: f64,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig { gamma0: 1.0 }
    }
}

impl MixerConfig {
    pub fn new(gamma0: f64) -> Result<Self> {
        if !(gamma0 > 0.0 && gamma0.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma0 must be positive, got {gamma0}")));
        }
        Ok(MixerConfig { gamma0 })
    }
}

/// Variational energy of a state on a diagonal cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub energy: f64,
    pub energy_density: f64,
    /// Probability mass on zero-energy configurations.
    pub ground_overlap: f64,
}

/// `amplitude[c] *= exp(-i γ values[c])`.
pub fn apply_diagonal_phase(state: &mut StateVector, table: &impl Diagonal, gamma: f64) -> Result<()> {
    check_dims(state.n_spins, table.n_spins())?;
    if gamma == 0.0 {
        return Ok(());
    }
    let values = table.values();
    state
        .re
        .par_chunks_mut(PAR_CHUNK)
        .zip(state.im.par_chunks_mut(PAR_CHUNK))
        .zip(values.par_chunks(PAR_CHUNK))
        .for_each(|((re, im), v)| {
            for k in 0..re.len() {
                let (sin, cos) = (gamma * v[k]).sin_cos();
                rotate_phase(&mut re[k], &mut im[k], cos, -sin);
            }
        });
    Ok(())
}

#[inline(always)]
fn rotate_phase(re: &mut f64, im: &mut f64, cr: f64, ci: f64) {
    let (r, i) = (*re, *im);
    *re = r * cr - i * ci;
    *im = r * ci + i * cr;
}

/// Applies `Π_j exp(+i β Γ0 X_j)` in place.
pub fn apply_mixer(state: &mut StateVector, beta: f64, cfg: &MixerConfig) -> Result<()> {
    if beta == 0.0 {
        return Ok(());
    }
    let (sin, cos) = (beta * cfg.gamma0).sin_cos();
    let n = state.n_spins;
    mixer_kernel(&mut state.re, &mut state.im, n, cos, sin, None, PhaseOrder::Before);
    Ok(())
}

/// Single-qubit rotation `[[c, i s], [i s, c]]` on one amplitude pair.
#[inline(always)]
fn rot(ar: f64, ai: f64, br: f64, bi: f64, c: f64, s: f64) -> (f64, f64, f64, f64) {
    (c * ar - s * bi, c * ai + s * br, c * br - s * ai, c * bi + s * ar)
}

/// Rotation on a pair of amplitude slices.
#[inline(always)]
fn rotate_pairs(r0: &mut [f64], i0: &mut [f64], r1: &mut [f64], i1: &mut [f64], c: f64, s: f64) {
    let len = r0.len();
    let (i0, r1, i1) = (&mut i0[..len], &mut r1[..len], &mut i1[..len]);
    for k in 0..len {
        (r0[k], i0[k], r1[k], i1[k]) = rot(r0[k], i0[k], r1[k], i1[k], c, s);
    }
}

/// Rotates every pair `(k, k + stride)` of a block aligned to `2 * stride`.
fn rotate_stride(re: &mut [f64], im: &mut [f64], stride: usize, c: f64, s: f64) {
    for (rc, ic) in re.chunks_exact_mut(2 * stride).zip(im.chunks_exact_mut(2 * stride)) {
        let (r0, r1) = rc.split_at_mut(stride);
        let (i0, i1) = ic.split_at_mut(stride);
        rotate_pairs(r0, i0, r1, i1, c, s);
    }
}

/// Rotates the two qubits with strides `lo < hi` in one sweep.
fn rotate_two_strides(re: &mut [f64], im: &mut [f64], lo: usize, hi: usize, c: f64, s: f64) {
    for (rc, ic) in re.chunks_exact_mut(2 * hi).zip(im.chunks_exact_mut(2 * hi)) {
        let (ra, rb) = rc.split_at_mut(hi);
        let (ia, ib) = ic.split_at_mut(hi);
        let quads = ra
            .chunks_exact_mut(2 * lo)
            .zip(rb.chunks_exact_mut(2 * lo))
            .zip(ia.chunks_exact_mut(2 * lo).zip(ib.chunks_exact_mut(2 * lo)));
        for ((ra, rb), (ia, ib)) in quads {
            let (r00, r01) = ra.split_at_mut(lo);
            let (r10, r11) = rb.split_at_mut(lo);
            let (i00, i01) = ia.split_at_mut(lo);
            let (i10, i11) = ib.split_at_mut(lo);
            let (r01, r10, r11) = (&mut r01[..lo], &mut r10[..lo], &mut r11[..lo]);
            let (i00, i01, i10, i11) = (&mut i00[..lo], &mut i01[..lo], &mut i10[..lo], &mut i11[..lo]);
            for k in 0..lo {
                let (a0r, a0i, a1r, a1i) = rot(r00[k], i00[k], r01[k], i01[k], c, s);
                let (b0r, b0i, b1r, b1i) = rot(r10[k], i10[k], r11[k], i11[k], c, s);
                (r00[k], i00[k], r10[k], i10[k]) = rot(a0r, a0i, b0r, b0i, c, s);
                (r01[k], i01[k], r11[k], i11[k]) = rot(a1r, a1i, b1r, b1i, c, s);
            }
        }
    }
}

/// Rotates qubits with the given ascending strides, two per sweep.
fn rotate_strides(re: &mut [f64], im: &mut [f64], strides: impl Iterator<Item = usize>, c: f64, s: f64) {
    let strides: Vec<usize> = strides.collect();
    for pair in strides.chunks(2) {
        match *pair {
            [lo, hi] => rotate_two_strides(re, im, lo, hi, c, s),
            [single] => rotate_stride(re, im, single, c, s),
            _ => unreachable!("chunks of two"),
        }
    }
}

/// Rotates qubits `0..bits` of a contiguous block.
fn rotate_low_qubits(re: &mut [f64], im: &mut [f64], bits: usize, c: f64, s: f64) {
    match bits {
        0 => {}
        1 => rotate_stride(re, im, 1, c, s),
        _ => {
            // qubits 0 and 1 together on runs of four amplitudes
            for (r, i) in re.chunks_exact_mut(4).zip(im.chunks_exact_mut(4)) {
                let (a0r, a0i, a1r, a1i) = rot(r[0], i[0], r[1], i[1], c, s);
                let (b0r, b0i, b1r, b1i) = rot(r[2], i[2], r[3], i[3], c, s);
                (r[0], i[0], r[2], i[2]) = rot(a0r, a0i, b0r, b0i, c, s);
                (r[1], i[1], r[3], i[3]) = rot(a1r, a1i, b1r, b1i, c, s);
            }
            rotate_strides(re, im, (2..bits).map(|j| 1 << j), c, s);
        }
    }
}

/// Exact per-amplitude phases via a lookup over distinct energy levels.
struct PhaseLevels {
    levels: Vec<f64>,
    index: Vec<u16>,
}

impl PhaseLevels {
    fn build(values: &[f64]) -> Option<Self> {
        let mut levels: Vec<f64> = values.to_vec();
        levels.par_sort_unstable_by(f64::total_cmp);
        levels.dedup_by(|a, b| a.to_bits() == b.to_bits());
        if levels.len() > MAX_PHASE_LEVELS {
            return None;
        }
        let index = values
            .par_iter()
            .map(|v| levels.binary_search_by(|l| l.total_cmp(v)).expect("level present") as u16)
            .collect();
        Some(PhaseLevels { levels, index })
    }

    fn factors(&self, gamma: f64) -> Vec<(f64, f64)> {
        self.levels
            .iter()
            .map(|v| {
                let (sin, cos) = (gamma * v).sin_cos();
                (cos, -sin)
            })
            .collect()
    }
}

/// Phase to apply on each block before the mixer of the same layer.
enum BlockPhase<'a> {
    Lookup(&'a [u16], &'a [(f64, f64)]),
    Direct(&'a [f64], f64),
}

impl BlockPhase<'_> {
    fn apply(&self, offset: usize, re: &mut [f64], im: &mut [f64]) {
        match *self {
            BlockPhase::Lookup(index, factors) => {
                let index = &index[offset..offset + re.len()];
                for k in 0..re.len() {
                    let (cr, ci) = factors[index[k] as usize];
                    rotate_phase(&mut re[k], &mut im[k], cr, ci);
                }
            }
            BlockPhase::Direct(values, gamma) => {
                let values = &values[offset..offset + re.len()];
                for k in 0..re.len() {
                    let (sin, cos) = (gamma * values[k]).sin_cos();
                    rotate_phase(&mut re[k], &mut im[k], cos, -sin);
                }
            }
        }
    }
}

/// Where a fused phase sits relative to the rotations of the same call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PhaseOrder {
    Before,
    After,
}

/// Mixer with an optional phase fused into the cache-blocked low-qubit pass.
fn mixer_kernel(
    re: &mut [f64],
    im: &mut [f64],
    n: usize,
    c: f64,
    s: f64,
    phase: Option<&BlockPhase>,
    order: PhaseOrder,
) {
    let low = n.min(BLOCK_BITS);
    let block = 1usize << low;
    let rotate = !(s == 0.0 && c == 1.0);
    if rotate && order == PhaseOrder::After {
        rotate_high_qubits(re, im, low, n, c, s);
    }
    re.par_chunks_mut(block)
        .zip(im.par_chunks_mut(block))
        .enumerate()
        .for_each(|(b, (r, i))| {
            if let (Some(p), PhaseOrder::Before) = (phase, order) {
                p.apply(b * block, r, i);
            }
            if rotate {
                rotate_low_qubits(r, i, low, c, s);
            }
            if let (Some(p), PhaseOrder::After) = (phase, order) {
                p.apply(b * block, r, i);
            }
        });
    if rotate && order == PhaseOrder::Before {
        rotate_high_qubits(re, im, low, n, c, s);
    }
}

/// Splits `data` into tiles for the qubit group `b0..b0+g`: tile `t` holds
/// one contiguous run from each of the `2^g` rows that the group couples.
fn tile_rows<T, S>(data: S, b0: usize, g: usize) -> Vec<Vec<S>>
where
    S: SplitRows<T>,
{
    let row = 1usize << b0;
    let run = 1usize << b0.min(TILE_BITS - g);
    let mut tiles: Vec<Vec<S>> = Vec::with_capacity(data.length() / (run << g));
    for chunk in data.split_into(row << g) {
        let first = tiles.len();
        tiles.extend((0..row / run).map(|_| Vec::with_capacity(1 << g)));
        for r in chunk.split_into(row) {
            for (t, piece) in r.split_into(run).into_iter().enumerate() {
                tiles[first + t].push(piece);
            }
        }
    }
    tiles
}

/// Slice types that can be cut into consecutive pieces.
trait SplitRows<T>: Sized {
    fn length(&self) -> usize;
    fn split_into(self, size: usize) -> Vec<Self>;
}

impl<'a, T> SplitRows<T> for &'a mut [T] {
    fn length(&self) -> usize {
        self.len()
    }
    fn split_into(self, size: usize) -> Vec<Self> {
        self.chunks_mut(size).collect()
    }
}

impl<'a, T> SplitRows<T> for &'a [T] {
    fn length(&self) -> usize {
        self.len()
    }
    fn split_into(self, size: usize) -> Vec<Self> {
        self.chunks(size).collect()
    }
}

/// Largest qubit group handled in one tiled pass.
fn group_size(b0: usize, n: usize) -> usize {
    (n - b0).min(TILE_BITS - MIN_RUN_BITS)
}

fn gather<T: AsRef<[f64]>>(rows: &[T], buf: &mut Vec<f64>) {
    buf.clear();
    for r in rows {
        buf.extend_from_slice(r.as_ref());
    }
}

fn scatter(buf: &[f64], rows: &mut [&mut [f64]]) {
    let run = buf.len() / rows.len();
    for (r, src) in rows.iter_mut().zip(buf.chunks_exact(run)) {
        r.copy_from_slice(src);
    }
}

/// Rotates qubits `low..n`. Each group of qubits is applied on contiguous
/// copies of its tiles, since the rows of a tile sit at power-of-two strides.
fn rotate_high_qubits(re: &mut [f64], im: &mut [f64], low: usize, n: usize, c: f64, s: f64) {
    let mut b0 = low;
    while b0 < n {
        let g = group_size(b0, n);
        let mut tiles: Vec<_> = tile_rows(&mut *re, b0, g)
            .into_iter()
            .zip(tile_rows(&mut *im, b0, g))
            .collect();
        tiles.par_iter_mut().for_each_init(
            || (Vec::new(), Vec::new()),
            |(buf_re, buf_im), (rows_re, rows_im)| {
                gather(rows_re, buf_re);
                gather(rows_im, buf_im);
                let run = rows_re[0].len();
                rotate_strides(buf_re, buf_im, (0..g).map(|q| run << q), c, s);
                scatter(buf_re, rows_re);
                scatter(buf_im, rows_im);
            },
        );
        b0 += g;
    }
}

/// Sum over pairs `(k, k + stride)` of `Im(conj(λ_a) ψ_b) + Im(conj(λ_b) ψ_a)`.
fn pair_sum_stride(lr: &[f64], li: &[f64], pr: &[f64], pi: &[f64], stride: usize) -> f64 {
    let mut acc = 0.0;
    let width = 2 * stride;
    for base in (0..lr.len()).step_by(width) {
        let (a, b) = (base..base + stride, base + stride..base + width);
        let (lar, lai, par, pai) = (&lr[a.clone()], &li[a.clone()], &pr[a.clone()], &pi[a]);
        let (lbr, lbi, pbr, pbi) = (&lr[b.clone()], &li[b.clone()], &pr[b.clone()], &pi[b]);
        for k in 0..stride {
            acc += lar[k] * pbi[k] - lai[k] * pbr[k] + lbr[k] * pai[k] - lbi[k] * par[k];
        }
    }
    acc
}

/// `Im ⟨λ|Σ_j X_j|ψ⟩`, accumulated over a fixed partition.
fn flip_sum_im(lambda: &StateVector, psi: &StateVector) -> f64 {
    let n = psi.n_spins;
    let low = n.min(BLOCK_BITS);
    let block = 1usize << low;
    let low_part: Vec<f64> = (0..psi.dim() / block)
        .into_par_iter()
        .map(|b| {
            let r = b * block..(b + 1) * block;
            let (lr, li) = (&lambda.re[r.clone()], &lambda.im[r.clone()]);
            let (pr, pi) = (&psi.re[r.clone()], &psi.im[r]);
            (0..low).map(|j| pair_sum_stride(lr, li, pr, pi, 1 << j)).sum()
        })
        .collect();
    let mut total: f64 = low_part.iter().sum();
    let mut b0 = low;
    while b0 < n {
        let g = group_size(b0, n);
        let tiles: Vec<_> = tile_rows(&lambda.re[..], b0, g)
            .into_iter()
            .zip(tile_rows(&lambda.im[..], b0, g))
            .zip(tile_rows(&psi.re[..], b0, g).into_iter().zip(tile_rows(&psi.im[..], b0, g)))
            .collect();
        let partials: Vec<f64> = tiles
            .par_iter()
            .map_init(
                || [Vec::new(), Vec::new(), Vec::new(), Vec::new()],
                |bufs, ((lr, li), (pr, pi))| {
                    for (buf, rows) in bufs.iter_mut().zip([lr, li, pr, pi]) {
                        gather(rows, buf);
                    }
                    let run = lr[0].len();
                    let [blr, bli, bpr, bpi] = &bufs;
                    (0..g).map(|q| pair_sum_stride(blr, bli, bpr, bpi, run << q)).sum()
                },
            )
            .collect();
        total += partials.iter().sum::<f64>();
        b0 += g;
    }
    total
}

/// Re-usable evolution engine bound to one diagonal cost.
///
/// Preprocesses the diagonal once (distinct-level phase lookup) so repeated
/// energy and gradient evaluations avoid per-amplitude transcendental calls.
pub struct Propagator<'a> {
    n_spins: usize,
    values: &'a [f64],
    levels: Option<PhaseLevels>,
    mixer: MixerConfig,
}

impl<'a> Propagator<'a> {
    pub fn new(table: &'a impl Diagonal, mixer: MixerConfig) -> Result<Self> {
        check_capacity(table.n_spins())?;
        let values = table.values();
        Ok(Propagator {
            n_spins: table.n_spins(),
            values,
            levels: PhaseLevels::build(values),
            mixer,
        })
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn mixer(&self) -> MixerConfig {
        self.mixer
    }

    /// Mixer `M(β)` and phase `D(γ)`, with the phase first or last.
    fn apply(&self, state: &mut StateVector, beta: f64, gamma: f64, order: PhaseOrder) {
        let (s, c) = (beta * self.mixer.gamma0).sin_cos();
        let factors = match &self.levels {
            Some(levels) if gamma != 0.0 => levels.factors(gamma),
            _ => Vec::new(),
        };
        let phase = if gamma == 0.0 {
            None
        } else if let Some(levels) = &self.levels {
            Some(BlockPhase::Lookup(&levels.index, &factors))
        } else {
            Some(BlockPhase::Direct(self.values, gamma))
        };
        mixer_kernel(&mut state.re, &mut state.im, self.n_spins, c, s, phase.as_ref(), order);
    }

    /// One layer: phase `D(γ)` followed by mixer `M(β)`.
    fn layer(&self, state: &mut StateVector, beta: f64, gamma: f64) {
        self.apply(state, beta, gamma, PhaseOrder::Before);
    }

    /// Inverse of [`Propagator::layer`].
    fn unlayer(&self, state: &mut StateVector, beta: f64, gamma: f64) {
        self.apply(state, -beta, -gamma, PhaseOrder::After);
    }

    pub fn evolve(&self, params: &ScheduleParams) -> Result<StateVector> {
        let mut state = plus_state(self.n_spins)?;
        for (&beta, &gamma) in params.betas().iter().zip(params.gammas()) {
            self.layer(&mut state, beta, gamma);
        }
        Ok(state)
    }

    pub fn report(&self, state: &StateVector) -> Result<EnergyReport> {
        check_dims(self.n_spins, state.n_spins)?;
        Ok(report_on(state, self.values))
    }

    pub fn energy(&self, params: &ScheduleParams) -> Result<EnergyReport> {
        let state = self.evolve(params)?;
        Ok(report_on(&state, self.values))
    }

    /// Energy plus `[∂E/∂β_1..∂E/∂β_P, ∂E/∂γ_1..∂E/∂γ_P]`.
    ///
    /// Adjoint sweep: after the forward pass, the state and the co-state
    /// `λ = H_z ψ` are propagated backwards through inverse layers, so memory
    /// stays at three vectors regardless of `P`.
    pub fn energy_and_gradient(&self, params: &ScheduleParams) -> Result<(EnergyReport, Vec<f64>)> {
        let p = params.len();
        let mut psi = self.evolve(params)?;
        let report = report_on(&psi, self.values);

        let mut lambda = psi.clone();
        lambda
            .re
            .par_iter_mut()
            .zip(lambda.im.par_iter_mut())
            .zip(self.values.par_iter())
            .for_each(|((r, i), v)| {
                *r *= v;
                *i *= v;
            });

        // H_z commutes with the phase, so its matrix element for step m can
        // be taken after the whole step is undone.
        let mut grad = vec![0.0; 2 * p];
        for m in (0..p).rev() {
            grad[m] = -2.0 * self.mixer.gamma0 * flip_sum_im(&lambda, &psi);
            self.unlayer(&mut psi, params.betas()[m], params.gammas()[m]);
            self.unlayer(&mut lambda, params.betas()[m], params.gammas()[m]);
            grad[p + m] = 2.0 * diagonal_matrix_element_im(&lambda, &psi, self.values);
        }
        Ok((report, grad))
    }
}

/// `Im ⟨λ|diag(values)|ψ⟩`.
fn diagonal_matrix_element_im(lambda: &StateVector, psi: &StateVector, values: &[f64]) -> f64 {
    fixed_order_sum(psi.dim(), |range| {
        range
            .map(|c| values[c] * (lambda.re[c] * psi.im[c] - lambda.im[c] * psi.re[c]))
            .sum()
    })
}

fn report_on(state: &StateVector, values: &[f64]) -> EnergyReport {
    let energy = fixed_order_sum(state.dim(), |range| {
        range
            .map(|c| (state.re[c] * state.re[c] + state.im[c] * state.im[c]) * values[c])
            .sum()
    });
    let ground_overlap = fixed_order_sum(state.dim(), |range| {
        range
            .filter(|&c| values[c].abs() <= ZERO_ENERGY_TOL)
            .map(|c| state.re[c] * state.re[c] + state.im[c] * state.im[c])
            .sum()
    });
    EnergyReport {
        energy,
        energy_density: energy / state.n_spins as f64,
        ground_overlap: ground_overlap.clamp(0.0, 1.0),
    }
}

/// Runs the full protocol from `|+⟩^{⊗N}`: phase `γ_m` then mixer `β_m`.
pub fn evolve(params: &ScheduleParams, table: &impl Diagonal, cfg: &MixerConfig) -> Result<StateVector> {
    Propagator::new(table, *cfg)?.evolve(params)
}

pub fn expectation(state: &StateVector, table: &impl Diagonal) -> Result<EnergyReport> {
    check_dims(state.n_spins, table.n_spins())?;
    Ok(report_on(state, table.values()))
}

/// Exact gradient of the variational energy, betas first then gammas.
pub fn gradient(params: &ScheduleParams, table: &impl Diagonal, cfg: &MixerConfig) -> Result<Vec<f64>> {
    Propagator::new(table, *cfg)?
        .energy_and_gradient(params)
        .map(|(_, g)| g)
}
