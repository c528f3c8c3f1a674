//! Binary-perceptron training sets and their classical energy landscapes.
//!
//! Basis convention, shared by every module of the crate: bit `j` of a
//! configuration index encodes spin `j`, with bit value 0 meaning `σ_j = +1`
//! and bit value 1 meaning `σ_j = -1`.
//!
//! Overlaps are accumulated as integers `Σ_j σ_j τ ξ_j` and scaled by `1/√N`
//! only when a real-valued energy is produced, so the Gray-code table builder
//! and the direct per-configuration evaluator agree bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest register for which exact 2^N tables are materialized by default.
pub const DEFAULT_MAX_SPINS: usize = 28;

/// Tolerance used to recognize zero energies of the linear-cost variant.
pub const ZERO_ENERGY_TOL: f64 = 1e-12;

/// Spin value (+1 or -1) of site `j` in basis state `config`.
#[inline]
pub fn spin_value(config: usize, j: usize) -> i32 {
    1 - 2 * ((config >> j) & 1) as i32
}

/// Random patterns and labels defining one perceptron sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSet {
    n_spins: usize,
    n_patterns: usize,
    seed: u64,
    labels: Vec<i8>,
    patterns: Vec<Vec<i8>>,
}

impl TrainingSet {
    /// Builds a training set after checking shapes and that all entries are ±1.
    pub fn new(patterns: Vec<Vec<i8>>, labels: Vec<i8>, seed: u64) -> Result<Self> {
        let ts = TrainingSet {
            n_spins: patterns.first().map_or(0, Vec::len),
            n_patterns: patterns.len(),
            seed,
            labels,
            patterns,
        };
        ts.validate()?;
        Ok(ts)
    }

    fn validate(&self) -> Result<()> {
        if self.n_spins == 0 || self.n_patterns == 0 {
            return Err(Error::InvalidArgument(
                "training set needs at least one spin and one pattern".into(),
            ));
        }
        if self.patterns.len() != self.n_patterns || self.labels.len() != self.n_patterns {
            return Err(Error::InvalidArgument(format!(
                "expected {} patterns and labels, got {} and {}",
                self.n_patterns,
                self.patterns.len(),
                self.labels.len()
            )));
        }
        for (mu, row) in self.patterns.iter().enumerate() {
            if row.len() != self.n_spins {
                return Err(Error::InvalidArgument(format!(
                    "pattern {mu} has {} entries, expected {}",
                    row.len(),
                    self.n_spins
                )));
            }
            if row.iter().any(|&x| x != 1 && x != -1) {
                return Err(Error::InvalidArgument(format!("pattern {mu} has a non-±1 entry")));
            }
        }
        if self.labels.iter().any(|&x| x != 1 && x != -1) {
            return Err(Error::InvalidArgument("labels must be ±1".into()));
        }
        Ok(())
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn n_patterns(&self) -> usize {
        self.n_patterns
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn patterns(&self) -> &[Vec<i8>] {
        &self.patterns
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    /// Load density `M / N`.
    pub fn alpha(&self) -> f64 {
        self.n_patterns as f64 / self.n_spins as f64
    }

    /// Patterns with their labels folded in (`τ^μ ξ^μ`), so that a pattern is
    /// classified correctly exactly when its overlap is positive.
    pub fn folded_patterns(&self) -> Vec<Vec<i32>> {
        self.patterns
            .iter()
            .zip(&self.labels)
            .map(|(row, &tau)| row.iter().map(|&x| i32::from(x) * i32::from(tau)).collect())
            .collect()
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ts: TrainingSet = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        ts.validate().map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(ts)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

/// Draws `n_patterns` fair ±1 patterns of length `n_spins`; labels are all +1.
pub fn generate_instance(n_spins: usize, n_patterns: usize, seed: u64) -> TrainingSet {
    assert!(n_spins >= 1 && n_patterns >= 1, "instance needs N >= 1 and M >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patterns = (0..n_patterns)
        .map(|_| {
            (0..n_spins)
                .map(|_| if rng.gen::<bool>() { 1 } else { -1 })
                .collect()
        })
        .collect();
    TrainingSet {
        n_spins,
        n_patterns,
        seed,
        labels: vec![1; n_patterns],
        patterns,
    }
}

/// Exponent of the per-pattern penalty `|m|^nc Θ(-m)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum CostVariant {
    /// `nc = 0`: one unit per misclassified pattern.
    Count,
    /// `nc = 1`: penalty proportional to the magnitude of the wrong overlap.
    Linear,
}

impl CostVariant {
    pub fn nc(self) -> u8 {
        match self {
            CostVariant::Count => 0,
            CostVariant::Linear => 1,
        }
    }

    pub fn from_nc(nc: u8) -> Result<Self> {
        match nc {
            0 => Ok(CostVariant::Count),
            1 => Ok(CostVariant::Linear),
            other => Err(Error::InvalidArgument(format!("nc must be 0 or 1, got {other}"))),
        }
    }
}

impl From<CostVariant> for u8 {
    fn from(v: CostVariant) -> u8 {
        v.nc()
    }
}

impl TryFrom<u8> for CostVariant {
    type Error = Error;
    fn try_from(nc: u8) -> Result<Self> {
        CostVariant::from_nc(nc)
    }
}

/// Penalty in integer units for one pattern with integer overlap `s`.
/// Zero overlap counts as misclassified.
#[inline]
fn pattern_penalty(s: i32, variant: CostVariant) -> u32 {
    if s > 0 {
        0
    } else {
        match variant {
            CostVariant::Count => 1,
            CostVariant::Linear => s.unsigned_abs(),
        }
    }
}

#[inline]
fn scale_penalty(units: u32, variant: CostVariant, n_spins: usize) -> f64 {
    match variant {
        CostVariant::Count => f64::from(units),
        CostVariant::Linear => f64::from(units) / (n_spins as f64).sqrt(),
    }
}

fn integer_overlap(config: usize, pattern: &[i32]) -> i32 {
    pattern
        .iter()
        .enumerate()
        .map(|(j, &x)| spin_value(config, j) * x)
        .sum()
}

fn check_config(config: usize, n_spins: usize) -> Result<()> {
    if n_spins >= usize::BITS as usize || config >= 1usize << n_spins {
        return Err(Error::IndexOutOfRange {
            index: config,
            limit: 1usize.checked_shl(n_spins as u32).unwrap_or(usize::MAX),
        });
    }
    Ok(())
}

/// Normalized overlap `m_μ = (1/√N) Σ_j σ_j τ^μ ξ^μ_j`.
pub fn overlap(config: usize, pattern_index: usize, ts: &TrainingSet) -> Result<f64> {
    check_config(config, ts.n_spins)?;
    if pattern_index >= ts.n_patterns {
        return Err(Error::IndexOutOfRange {
            index: pattern_index,
            limit: ts.n_patterns,
        });
    }
    let tau = i32::from(ts.labels[pattern_index]);
    let s: i32 = ts.patterns[pattern_index]
        .iter()
        .enumerate()
        .map(|(j, &x)| spin_value(config, j) * i32::from(x) * tau)
        .sum();
    Ok(f64::from(s) / (ts.n_spins as f64).sqrt())
}

/// Cost `Σ_μ |m_μ|^nc Θ(-m_μ)` of a single configuration.
pub fn classical_energy(config: usize, ts: &TrainingSet, variant: CostVariant) -> Result<f64> {
    check_config(config, ts.n_spins)?;
    let units: u32 = ts
        .folded_patterns()
        .iter()
        .map(|p| pattern_penalty(integer_overlap(config, p), variant))
        .sum();
    Ok(scale_penalty(units, variant, ts.n_spins))
}

/// Where an energy table came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    Original,
    Randomized { seed: u64 },
}

/// Anything that acts as a diagonal operator in the computational basis.
pub trait Diagonal {
    fn n_spins(&self) -> usize;
    fn values(&self) -> &[f64];
}

/// Full diagonal of the perceptron cost over all `2^N` configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTable {
    n_spins: usize,
    variant: CostVariant,
    provenance: Provenance,
    values: Vec<f64>,
}

impl EnergyTable {
    /// Wraps raw values, checking length and non-negativity.
    pub fn from_values(
        n_spins: usize,
        variant: CostVariant,
        provenance: Provenance,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != 1usize << n_spins {
            return Err(Error::InvalidArgument(format!(
                "table for {n_spins} spins needs {} values, got {}",
                1usize << n_spins,
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "energy table values must be finite and non-negative".into(),
            ));
        }
        Ok(EnergyTable {
            n_spins,
            variant,
            provenance,
            values,
        })
    }

    pub fn variant(&self) -> CostVariant {
        self.variant
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same values shifted by a constant, kept as a generic diagonal.
    pub fn shifted(&self, offset: f64) -> DiagonalTable {
        DiagonalTable::new(self.n_spins, self.values.iter().map(|v| v + offset).collect())
            .expect("length preserved")
    }

    pub fn write_eqtb(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(EQTB_MAGIC)?;
        w.write_all(&[EQTB_VERSION, self.variant.nc()])?;
        let (prov, seed) = match self.provenance {
            Provenance::Original => (0u8, 0u64),
            Provenance::Randomized { seed } => (1u8, seed),
        };
        w.write_all(&[prov])?;
        w.write_all(&(self.n_spins as u32).to_le_bytes())?;
        w.write_all(&seed.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_eqtb(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_eqtb_with_cap(path, DEFAULT_MAX_SPINS)
    }

    pub fn read_eqtb_with_cap(path: impl AsRef<Path>, cap: usize) -> Result<Self> {
        let path = path.as_ref();
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut header = [0u8; EQTB_HEADER_LEN];
        r.read_exact(&mut header)?;
        if &header[0..4] != EQTB_MAGIC {
            return Err(bad("bad magic"));
        }
        if header[4] != EQTB_VERSION {
            return Err(bad("unsupported version"));
        }
        let variant = CostVariant::from_nc(header[5]).map_err(|_| bad("bad nc byte"))?;
        let n_spins = u32::from_le_bytes(header[7..11].try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(header[11..19].try_into().unwrap());
        let provenance = match header[6] {
            0 => Provenance::Original,
            1 => Provenance::Randomized { seed },
            _ => return Err(bad("bad provenance byte")),
        };
        if n_spins > cap {
            return Err(Error::CapacityExceeded { n_spins, cap });
        }
        let mut raw = vec![0u8; 8usize << n_spins];
        r.read_exact(&mut raw)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes after table"));
        }
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        EnergyTable::from_values(n_spins, variant, provenance, values).map_err(|e| bad(&e.to_string()))
    }
}

impl Diagonal for EnergyTable {
    fn n_spins(&self) -> usize {
        self.n_spins
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
}

const EQTB_MAGIC: &[u8; 4] = b"EQTB";
const EQTB_VERSION: u8 = 1;
const EQTB_HEADER_LEN: usize = 19;

/// Diagonal operator with arbitrary real entries (e.g. the quadratic model).
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalTable {
    n_spins: usize,
    values: Vec<f64>,
}

impl DiagonalTable {
    pub fn new(n_spins: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != 1usize << n_spins {
            return Err(Error::InvalidArgument(format!(
                "diagonal for {n_spins} spins needs {} values, got {}",
                1usize << n_spins,
                values.len()
            )));
        }
        Ok(DiagonalTable { n_spins, values })
    }
}

impl Diagonal for DiagonalTable {
    fn n_spins(&self) -> usize {
        self.n_spins
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Low bits enumerated by a Gray code inside each parallel chunk.
const GRAY_CHUNK_BITS: usize = 14;

pub fn build_energy_table(ts: &TrainingSet, variant: CostVariant) -> Result<EnergyTable> {
    build_energy_table_with_cap(ts, variant, DEFAULT_MAX_SPINS)
}

/// Materializes the cost over all configurations.
///
/// The index space is split into contiguous chunks sharing their high bits;
/// inside a chunk the low bits follow a reflected Gray code, so each step
/// flips one spin and updates every overlap in O(1).
pub fn build_energy_table_with_cap(
    ts: &TrainingSet,
    variant: CostVariant,
    cap: usize,
) -> Result<EnergyTable> {
    let n = ts.n_spins;
    if n > cap {
        return Err(Error::CapacityExceeded { n_spins: n, cap });
    }
    let patterns = ts.folded_patterns();
    // column-major copy: flipping spin j touches patterns[..][j]
    let columns: Vec<Vec<i32>> = (0..n)
        .map(|j| patterns.iter().map(|p| p[j]).collect())
        .collect();
    let low_bits = n.min(GRAY_CHUNK_BITS);
    let chunk_len = 1usize << low_bits;
    let mut values = vec![0.0; 1usize << n];

    values
        .par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(chunk, out)| {
            let base = chunk << low_bits;
            let mut overlaps: Vec<i32> = patterns.iter().map(|p| integer_overlap(base, p)).collect();
            let mut gray = 0usize;
            let units: u32 = overlaps.iter().map(|&s| pattern_penalty(s, variant)).sum();
            out[0] = scale_penalty(units, variant, n);
            for i in 1..chunk_len {
                let j = i.trailing_zeros() as usize;
                // spin j goes from +1 to -1 when its bit turns on
                let before = spin_value(base | gray, j);
                gray ^= 1 << j;
                let delta = -2 * before;
                let mut units = 0u32;
                for (s, &x) in overlaps.iter_mut().zip(&columns[j]) {
                    *s += delta * x;
                    units += pattern_penalty(*s, variant);
                }
                out[gray] = scale_penalty(units, variant, n);
            }
        });

    Ok(EnergyTable {
        n_spins: n,
        variant,
        provenance: Provenance::Original,
        values,
    })
}

/// Number of zero-energy configurations (exact solutions).
pub fn count_solutions(table: &EnergyTable) -> usize {
    let is_zero: fn(&f64) -> bool = match table.variant {
        CostVariant::Count => |v| *v == 0.0,
        CostVariant::Linear => |v| v.abs() <= ZERO_ENERGY_TOL,
    };
    table.values.par_iter().filter(|v| is_zero(v)).count()
}

/// Uniformly permutes the table entries with a seeded Fisher–Yates shuffle.
pub fn randomize_table(table: &EnergyTable, seed: u64) -> Result<EnergyTable> {
    if let Provenance::Randomized { seed } = table.provenance {
        return Err(Error::AlreadyRandomized { seed });
    }
    let mut values = table.values.clone();
    values.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(EnergyTable {
        n_spins: table.n_spins,
        variant: table.variant,
        provenance: Provenance::Randomized { seed },
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureSchedule {
    Linear,
    Geometric,
}

/// Simulated-annealing parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaConfig {
    pub n_sweeps: usize,
    pub temp_initial: f64,
    pub temp_final: f64,
    pub seed: u64,
    pub schedule: TemperatureSchedule,
}

impl Default for SaConfig {
    fn default() -> Self {
        SaConfig {
            n_sweeps: 1000,
            temp_initial: 2.0,
            temp_final: 0.01,
            seed: 0,
            schedule: TemperatureSchedule::Geometric,
        }
    }
}

impl SaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sweeps == 0 {
            return Err(Error::InvalidArgument("n_sweeps must be positive".into()));
        }
        if !(self.temp_initial > 0.0 && self.temp_initial >= self.temp_final && self.temp_final >= 0.0) {
            return Err(Error::InvalidArgument(
                "temperatures must satisfy temp_initial >= temp_final >= 0, temp_initial > 0".into(),
            ));
        }
        if self.schedule == TemperatureSchedule::Geometric && self.temp_final == 0.0 {
            return Err(Error::InvalidArgument(
                "geometric schedule needs a positive final temperature".into(),
            ));
        }
        Ok(())
    }

    /// Temperature used during sweep `k` of `n_sweeps`.
    pub fn temperature(&self, k: usize) -> f64 {
        if self.n_sweeps == 1 {
            return self.temp_initial;
        }
        let x = k as f64 / (self.n_sweeps - 1) as f64;
        match self.schedule {
            TemperatureSchedule::Linear => self.temp_initial + (self.temp_final - self.temp_initial) * x,
            TemperatureSchedule::Geometric => self.temp_initial * (self.temp_final / self.temp_initial).powf(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaOutcome {
    pub best_config: usize,
    pub best_energy: f64,
    pub initial_energy: f64,
    /// Best-so-far energy after each sweep.
    pub trajectory: Vec<f64>,
    /// Fraction of accepted proposals in each sweep.
    pub acceptance: Vec<f64>,
}

/// Single-spin-flip Metropolis annealing on a tabulated energy function.
pub fn simulated_annealing(table: &impl Diagonal, cfg: &SaConfig) -> Result<SaOutcome> {
    cfg.validate()?;
    let n = table.n_spins();
    let values = table.values();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut config = rng.gen_range(0..values.len());
    let mut energy = values[config];
    let initial_energy = energy;
    let (mut best_config, mut best_energy) = (config, energy);
    let mut trajectory = Vec::with_capacity(cfg.n_sweeps);
    let mut acceptance = Vec::with_capacity(cfg.n_sweeps);

    for k in 0..cfg.n_sweeps {
        let temp = cfg.temperature(k);
        let mut accepted = 0usize;
        for j in 0..n {
            let proposal = config ^ (1 << j);
            let delta = values[proposal] - energy;
            let accept = delta <= 0.0 || (temp > 0.0 && rng.gen::<f64>() < (-delta / temp).exp());
            if accept {
                config = proposal;
                energy = values[proposal];
                accepted += 1;
                if energy < best_energy {
                    best_energy = energy;
                    best_config = config;
                }
            }
        }
        trajectory.push(best_energy);
        acceptance.push(accepted as f64 / n as f64);
    }

    Ok(SaOutcome {
        best_config,
        best_energy,
        initial_energy,
        trajectory,
        acceptance,
    })
}

/// Outcome of the candidate-sample filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub accepted: bool,
    pub n_solutions: usize,
    pub sa_best_energy: f64,
    pub enough_solutions: bool,
    pub sa_failed: bool,
}

/// Number of SA restarts used when filtering candidates.
pub const DEFAULT_SA_TRIALS: usize = 20;
/// Samples need strictly more solutions than this.
pub const DEFAULT_MIN_SOLUTIONS: usize = 21;

/// Seed of SA trial `trial` derived from a base seed (SplitMix64 step).
pub fn trial_seed(base: u64, trial: u64) -> u64 {
    let mut z = base.wrapping_add(trial.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keeps samples with many solutions on which SA never reaches zero energy.
/// SA runs on the misclassification-count cost.
pub fn filter_instance(
    ts: &TrainingSet,
    sa_cfg: &SaConfig,
    min_solutions: usize,
    sa_trials: usize,
) -> Result<FilterDecision> {
    let table = build_energy_table(ts, CostVariant::Count)?;
    filter_table(&table, sa_cfg, min_solutions, sa_trials)
}

pub fn filter_table(
    table: &EnergyTable,
    sa_cfg: &SaConfig,
    min_solutions: usize,
    sa_trials: usize,
) -> Result<FilterDecision> {
    let n_solutions = count_solutions(table);
    let outcomes: Vec<f64> = (0..sa_trials as u64)
        .into_par_iter()
        .map(|t| {
            let cfg = SaConfig {
                seed: trial_seed(sa_cfg.seed, t),
                ..sa_cfg.clone()
            };
            simulated_annealing(table, &cfg).map(|o| o.best_energy)
        })
        .collect::<Result<_>>()?;
    let sa_best_energy = outcomes.iter().copied().fold(f64::INFINITY, f64::min);
    let enough_solutions = n_solutions > min_solutions;
    let sa_failed = sa_best_energy > ZERO_ENERGY_TOL;
    Ok(FilterDecision {
        accepted: enough_solutions && sa_failed,
        n_solutions,
        sa_best_energy,
        enough_solutions,
        sa_failed,
    })
}

/// Quadratic (Hebbian) approximation of the linear cost.
#[derive(Debug, Clone, PartialEq)]
pub struct SkHamiltonian {
    n_spins: usize,
    fields: Vec<f64>,
    /// Row-major N×N, symmetric, zero diagonal.
    couplings: Vec<f64>,
}

impl SkHamiltonian {
    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn fields(&self) -> &[f64] {
        &self.fields
    }

    pub fn coupling(&self, j: usize, k: usize) -> f64 {
        self.couplings[j * self.n_spins + k]
    }

    /// Energy `-Σ h_j σ_j + Σ_{j≠k} J_jk σ_j σ_k` of one configuration.
    pub fn energy(&self, config: usize) -> f64 {
        let n = self.n_spins;
        let spins: Vec<f64> = (0..n).map(|j| f64::from(spin_value(config, j))).collect();
        let field: f64 = self.fields.iter().zip(&spins).map(|(h, s)| h * s).sum();
        let mut pair = 0.0;
        for j in 0..n {
            let row = &self.couplings[j * n..(j + 1) * n];
            pair += spins[j] * row.iter().zip(&spins).map(|(c, s)| c * s).sum::<f64>();
        }
        pair - field
    }

    /// Materializes the model as a diagonal over all configurations.
    pub fn diagonal(&self) -> Result<DiagonalTable> {
        if self.n_spins > DEFAULT_MAX_SPINS {
            return Err(Error::CapacityExceeded {
                n_spins: self.n_spins,
                cap: DEFAULT_MAX_SPINS,
            });
        }
        let values = (0..1usize << self.n_spins)
            .into_par_iter()
            .map(|c| self.energy(c))
            .collect();
        DiagonalTable::new(self.n_spins, values)
    }
}

pub fn build_sk_hamiltonian(ts: &TrainingSet) -> SkHamiltonian {
    let n = ts.n_spins;
    let folded = ts.folded_patterns();
    let sqrt_n = (n as f64).sqrt();
    let fields = (0..n)
        .map(|j| f64::from(folded.iter().map(|p| p[j]).sum::<i32>()) / sqrt_n)
        .collect();
    let mut couplings = vec![0.0; n * n];
    for j in 0..n {
        for k in 0..n {
            if j != k {
                let sum: i32 = folded.iter().map(|p| p[j] * p[k]).sum();
                couplings[j * n + k] = f64::from(sum) / n as f64;
            }
        }
    }
    SkHamiltonian {
        n_spins: n,
        fields,
        couplings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(patterns: Vec<Vec<i8>>) -> TrainingSet {
        let m = patterns.len();
        TrainingSet::new(patterns, vec![1; m], 0).unwrap()
    }

    fn naive_table(ts: &TrainingSet, variant: CostVariant) -> Vec<f64> {
        (0..1usize << ts.n_spins())
            .map(|c| classical_energy(c, ts, variant).unwrap())
            .collect()
    }

    #[test]
    fn generation_is_reproducible_and_shaped() {
        let a = generate_instance(21, 17, 99);
        let b = generate_instance(21, 17, 99);
        assert_eq!(a, b);
        let small = generate_instance(3, 2, 5);
        assert_eq!(small.patterns().len(), 2);
        assert!(small.patterns().iter().all(|r| r.len() == 3));
        assert!(small.patterns().iter().flatten().all(|&x| x == 1 || x == -1));
        assert_eq!(small.labels(), &[1, 1]);
        assert!((a.alpha() - 17.0 / 21.0).abs() < 1e-15);
    }

    #[test]
    fn pattern_entries_are_fair_coins() {
        let (n, m, seeds) = (21usize, 17usize, 10_000u64);
        let mut sum = 0i64;
        for seed in 0..seeds {
            let ts = generate_instance(n, m, seed);
            sum += ts.patterns().iter().flatten().map(|&x| i64::from(x)).sum::<i64>();
        }
        let count = (n * m) as f64 * seeds as f64;
        let mean = sum as f64 / count;
        let stderr = 1.0 / count.sqrt();
        assert!(mean.abs() < 4.0 * stderr, "mean {mean} vs stderr {stderr}");
    }

    #[test]
    fn overlap_direct_substitution() {
        let ts = toy(vec![vec![1, 1, 1, 1]]);
        assert!((overlap(0, 0, &ts).unwrap() - 2.0).abs() < 1e-15);
        let ts = toy(vec![vec![-1, -1, -1, -1]]);
        assert!((overlap(0, 0, &ts).unwrap() + 2.0).abs() < 1e-15);
        // σ = (+,+,-) is bit pattern 0b100
        let ts = toy(vec![vec![1, -1, 1]]);
        let m = overlap(0b100, 0, &ts).unwrap();
        assert!((m + 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert!(overlap(8, 0, &ts).is_err());
        assert!(overlap(0, 1, &ts).is_err());
    }

    #[test]
    fn overlap_folds_labels() {
        let ts = TrainingSet::new(vec![vec![1, 1, 1]], vec![-1], 0).unwrap();
        assert!((overlap(0, 0, &ts).unwrap() + 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn classical_energy_examples() {
        let ts = toy(vec![vec![1, 1, 1]]);
        assert_eq!(classical_energy(0, &ts, CostVariant::Count).unwrap(), 0.0);
        assert_eq!(classical_energy(0b111, &ts, CostVariant::Count).unwrap(), 1.0);
        let lin = classical_energy(0b111, &ts, CostVariant::Linear).unwrap();
        assert!((lin - 3f64.sqrt()).abs() < 1e-15);

        let ts = generate_instance(3, 2, 17);
        let mean: f64 = naive_table(&ts, CostVariant::Count).iter().sum::<f64>() / 8.0;
        assert_eq!(mean, 1.0);
    }

    #[test]
    fn zero_overlap_is_misclassified() {
        let ts = toy(vec![vec![1, 1]]);
        // σ = (+,-): overlap 0
        assert_eq!(classical_energy(0b10, &ts, CostVariant::Count).unwrap(), 1.0);
        assert_eq!(classical_energy(0b10, &ts, CostVariant::Linear).unwrap(), 0.0);
    }

    #[test]
    fn toy_table_by_majority() {
        let ts = toy(vec![vec![1, 1, 1]]);
        let table = build_energy_table(&ts, CostVariant::Count).unwrap();
        // brute force: solution iff at most one spin is down
        let expected: Vec<f64> = (0..8usize)
            .map(|c| if c.count_ones() <= 1 { 0.0 } else { 1.0 })
            .collect();
        assert_eq!(table.values(), expected.as_slice());
        assert_eq!(count_solutions(&table), 4);
    }

    #[test]
    fn gray_table_equals_naive() {
        for seed in 0..5 {
            let ts = generate_instance(10, 7, seed);
            for variant in [CostVariant::Count, CostVariant::Linear] {
                let table = build_energy_table(&ts, variant).unwrap();
                let naive = naive_table(&ts, variant);
                assert_eq!(table.values(), naive.as_slice());
            }
        }
        // more than one Gray chunk
        let ts = generate_instance(16, 5, 3);
        let table = build_energy_table(&ts, CostVariant::Linear).unwrap();
        for c in (0..1usize << 16).step_by(97) {
            assert_eq!(table.values()[c], classical_energy(c, &ts, CostVariant::Linear).unwrap());
        }
    }

    #[test]
    fn count_table_is_integer_bounded() {
        let ts = generate_instance(9, 6, 4);
        let table = build_energy_table(&ts, CostVariant::Count).unwrap();
        assert!(table
            .values()
            .iter()
            .all(|&v| v.fract() == 0.0 && (0.0..=6.0).contains(&v)));
    }

    #[test]
    fn spin_flip_symmetry_for_odd_n() {
        let ts = generate_instance(9, 6, 11);
        let table = build_energy_table(&ts, CostVariant::Count).unwrap();
        let mask = (1usize << 9) - 1;
        for c in 0..table.len() {
            assert_eq!(table.values()[c] + table.values()[c ^ mask], 6.0);
        }
    }

    #[test]
    fn capacity_is_enforced() {
        let ts = generate_instance(12, 2, 0);
        assert!(matches!(
            build_energy_table_with_cap(&ts, CostVariant::Count, 10),
            Err(Error::CapacityExceeded { n_spins: 12, cap: 10 })
        ));
    }

    #[test]
    fn solution_counts_agree_across_variants() {
        // odd N: no configuration has a zero overlap
        for seed in 0..20 {
            let ts = generate_instance(11, 6, seed);
            let a = count_solutions(&build_energy_table(&ts, CostVariant::Count).unwrap());
            let b = count_solutions(&build_energy_table(&ts, CostVariant::Linear).unwrap());
            let brute = (0..1usize << 11)
                .filter(|&c| (0..6).all(|mu| overlap(c, mu, &ts).unwrap() > 0.0))
                .count();
            assert_eq!(a, brute);
            assert_eq!(b, brute);
        }
    }

    #[test]
    fn even_n_zero_overlaps_split_the_variants() {
        // Θ(0) = 1 penalizes a zero overlap only in the counting cost
        let ts = toy(vec![vec![1, 1]]);
        let count = count_solutions(&build_energy_table(&ts, CostVariant::Count).unwrap());
        let linear = count_solutions(&build_energy_table(&ts, CostVariant::Linear).unwrap());
        assert_eq!((count, linear), (1, 3));
    }

    #[test]
    fn shifted_table_has_no_solutions() {
        let ts = toy(vec![vec![1, 1, 1]]);
        let table = build_energy_table(&ts, CostVariant::Count).unwrap();
        let shifted = EnergyTable::from_values(
            3,
            CostVariant::Count,
            Provenance::Original,
            table.shifted(1.0).values().to_vec(),
        )
        .unwrap();
        assert_eq!(count_solutions(&shifted), 0);
    }

    #[test]
    fn randomization_preserves_multiset() {
        let ts = generate_instance(10, 8, 2);
        let table = build_energy_table(&ts, CostVariant::Linear).unwrap();
        let shuffled = randomize_table(&table, 7).unwrap();
        assert_eq!(shuffled.provenance(), Provenance::Randomized { seed: 7 });
        assert_ne!(shuffled.values(), table.values());
        let mut a = table.values().to_vec();
        let mut b = shuffled.values().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert_eq!(count_solutions(&shuffled), count_solutions(&table));
        assert_eq!(randomize_table(&table, 7).unwrap(), shuffled);
        assert!(matches!(
            randomize_table(&shuffled, 1),
            Err(Error::AlreadyRandomized { seed: 7 })
        ));
    }

    #[test]
    fn sa_infinite_temperature_accepts_everything() {
        let ts = generate_instance(10, 8, 1);
        let table = build_energy_table(&ts, CostVariant::Count).unwrap();
        let cfg = SaConfig {
            n_sweeps: 1,
            temp_initial: 1e12,
            temp_final: 1e12,
            ..SaConfig::default()
        };
        let out = simulated_annealing(&table, &cfg).unwrap();
        assert!((out.acceptance[0] - 1.0).abs() <= 0.01);
    }

    #[test]
    fn sa_solves_toy_and_is_monotone() {
        let ts = toy(vec![vec![1, 1, 1]]);
        let table = build_energy_table(&ts, CostVariant::Count).unwrap();
        assert!(count_solutions(&table) > 0);
        let out = simulated_annealing(&table, &SaConfig::default()).unwrap();
        assert_eq!(out.best_energy, 0.0);
        assert_eq!(table.values()[out.best_config], 0.0);

        let ts = generate_instance(12, 9, 3);
        let table = build_energy_table(&ts, CostVariant::Linear).unwrap();
        let out = simulated_annealing(&table, &SaConfig { seed: 4, ..SaConfig::default() }).unwrap();
        assert!(out.best_energy <= out.initial_energy);
        assert!(out.trajectory.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn sa_rejects_bad_temperatures() {
        let ts = toy(vec![vec![1, 1, 1]]);
        let table = build_energy_table(&ts, CostVariant::Count).unwrap();
        let cfg = SaConfig {
            temp_initial: 0.5,
            temp_final: 1.0,
            ..SaConfig::default()
        };
        assert!(simulated_annealing(&table, &cfg).is_err());
    }

    #[test]
    fn filter_requires_strictly_more_solutions() {
        // find a sample with exactly 21 solutions
        let mut found = None;
        for seed in 0..2000 {
            let ts = generate_instance(10, 5, seed);
            let table = build_energy_table(&ts, CostVariant::Count).unwrap();
            if count_solutions(&table) == 21 {
                found = Some(ts);
                break;
            }
        }
        let ts = found.expect("some sample has 21 solutions");
        let d = filter_instance(&ts, &SaConfig::default(), 21, 2).unwrap();
        assert_eq!(d.n_solutions, 21);
        assert!(!d.enough_solutions);
        assert!(!d.accepted);
        let d = filter_instance(&ts, &SaConfig::default(), 20, 2).unwrap();
        assert!(d.enough_solutions);
    }

    #[test]
    fn filter_rejects_when_sa_succeeds() {
        let ts = generate_instance(8, 2, 0);
        let d = filter_instance(&ts, &SaConfig::default(), 0, DEFAULT_SA_TRIALS).unwrap();
        assert!(d.n_solutions > 0);
        assert_eq!(d.sa_best_energy, 0.0);
        assert!(!d.sa_failed);
        assert!(!d.accepted);
    }

    #[test]
    fn sk_model_definitions() {
        let ts = toy(vec![vec![1, 1, 1]]);
        let sk = build_sk_hamiltonian(&ts);
        for j in 0..3 {
            assert!((sk.fields()[j] - 1.0 / 3f64.sqrt()).abs() < 1e-15);
            for k in 0..3 {
                let expected = if j == k { 0.0 } else { 1.0 / 3.0 };
                assert!((sk.coupling(j, k) - expected).abs() < 1e-15);
            }
        }
        let ts = toy(vec![vec![1, -1, 1, 1], vec![-1, 1, -1, -1]]);
        assert!(build_sk_hamiltonian(&ts).fields().iter().all(|&h| h == 0.0));

        let ts = generate_instance(10, 8, 6);
        let sk = build_sk_hamiltonian(&ts);
        for j in 0..10 {
            assert_eq!(sk.coupling(j, j), 0.0);
            for k in 0..10 {
                assert_eq!(sk.coupling(j, k), sk.coupling(k, j));
            }
        }
    }

    #[test]
    fn sk_diagonal_matches_quadratic_expansion() {
        // Σ_μ (m_μ² - m_μ) = SK energy + M
        let ts = generate_instance(7, 5, 8);
        let diag = build_sk_hamiltonian(&ts).diagonal().unwrap();
        for c in 0..128usize {
            let quad: f64 = (0..5)
                .map(|mu| {
                    let m = overlap(c, mu, &ts).unwrap();
                    m * m - m
                })
                .sum();
            assert!((diag.values()[c] + 5.0 - quad).abs() < 1e-12);
        }
    }

    #[test]
    fn json_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ts.json");
        let ts = generate_instance(5, 3, 42);
        ts.write_json(&path).unwrap();
        assert_eq!(TrainingSet::read_json(&path).unwrap(), ts);

        std::fs::write(
            &path,
            r#"{"n_spins":2,"n_patterns":1,"seed":0,"labels":[1],"patterns":[[1,0]]}"#,
        )
        .unwrap();
        assert!(TrainingSet::read_json(&path).is_err());
    }

    #[test]
    fn eqtb_round_trip_and_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.eqtb");
        let ts = generate_instance(6, 4, 1);
        let table = randomize_table(&build_energy_table(&ts, CostVariant::Linear).unwrap(), 0xABCD).unwrap();
        table.write_eqtb(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"EQTB");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(bytes[6], 1);
        assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 6);
        assert_eq!(u64::from_le_bytes(bytes[11..19].try_into().unwrap()), 0xABCD);
        assert_eq!(bytes.len(), 19 + 8 * 64);
        assert_eq!(EnergyTable::read_eqtb(&path).unwrap(), table);

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(EnergyTable::read_eqtb(&path).is_err());
    }
}
