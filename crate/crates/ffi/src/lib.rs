//! C ABI over the perceptron simulation toolkit.
//!
//! Objects cross the boundary as opaque handles created by the constructor
//! functions and released with the matching `qp_*_free`. Every fallible
//! call returns a [`QpStatus`] code; the message of the last failure on the
//! calling thread is available from [`qp_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use qaoa_perceptron::instance::{
    build_energy_table, count_solutions, generate_instance, randomize_table, CostVariant, Diagonal, EnergyTable, TrainingSet,
};
use qaoa_perceptron::optimize::{optimize_schedule, BfgsConfig, Stage};
use qaoa_perceptron::schedules::ScheduleParams;
use qaoa_perceptron::spectrum::lowest_two;
use qaoa_perceptron::statevec::{MixerConfig, Propagator};
use qaoa_perceptron::Error;

/// Status codes returned by every fallible function.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    CapacityExceeded = 4,
    NoConvergence = 5,
    Io = 6,
    Format = 7,
    Panic = 8,
    Other = 9,
}

impl From<&Error> for QpStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::AlreadyRandomized { .. } | Error::ZeroAngleSum { .. } => {
                QpStatus::InvalidArgument
            }
            Error::DimensionMismatch { .. } | Error::IndexOutOfRange { .. } => QpStatus::DimensionMismatch,
            Error::CapacityExceeded { .. } => QpStatus::CapacityExceeded,
            Error::NoConvergence { .. } => QpStatus::NoConvergence,
            Error::Io(_) => QpStatus::Io,
            Error::Format { .. } | Error::Json(_) | Error::Csv(_) => QpStatus::Format,
            Error::MissingSolution(_) => QpStatus::Other,
        }
    }
}

/// Opaque training set.
pub struct QpInstance(TrainingSet);

/// Opaque energy table.
pub struct QpTable(EnergyTable);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(QpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(QpStatus::from(&e), e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> QpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QpStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("panic inside the library".into());
            QpStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(QpStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> std::result::Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> std::result::Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> std::result::Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(QpStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn schedule_arg(betas: *const f64, gammas: *const f64, p: usize) -> std::result::Result<ScheduleParams, Failure> {
    if betas.is_null() || gammas.is_null() {
        return Err(null("schedule"));
    }
    let b = slice::from_raw_parts(betas, p).to_vec();
    let g = slice::from_raw_parts(gammas, p).to_vec();
    Ok(ScheduleParams::new(b, g)?)
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn qp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Random training set of `n_patterns` patterns over `n_spins` spins.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn qp_instance_generate(n_spins: usize, n_patterns: usize, seed: u64, out: *mut *mut QpInstance) -> QpStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        if n_spins == 0 || n_patterns == 0 {
            return Err(Failure(QpStatus::InvalidArgument, "sizes must be positive".into()));
        }
        *out = Box::into_raw(Box::new(QpInstance(generate_instance(n_spins, n_patterns, seed))));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` as in [`qp_instance_generate`].
#[no_mangle]
pub unsafe extern "C" fn qp_instance_read_json(path: *const c_char, out: *mut *mut QpInstance) -> QpStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let ts = TrainingSet::read_json(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(QpInstance(ts)));
        Ok(())
    })
}

/// # Safety
/// `instance` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn qp_instance_write_json(instance: *const QpInstance, path: *const c_char) -> QpStatus {
    guard(|| {
        let ts = borrow(instance, "instance")?;
        ts.0.write_json(path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `instance` must be a live handle; `n_spins` and `n_patterns` writable.
#[no_mangle]
pub unsafe extern "C" fn qp_instance_shape(instance: *const QpInstance, n_spins: *mut usize, n_patterns: *mut usize) -> QpStatus {
    guard(|| {
        let ts = borrow(instance, "instance")?;
        *out_ref(n_spins, "n_spins")? = ts.0.n_spins();
        *out_ref(n_patterns, "n_patterns")? = ts.0.n_patterns();
        Ok(())
    })
}

/// Releases a handle; NULL is ignored.
///
/// # Safety
/// `instance` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qp_instance_free(instance: *mut QpInstance) {
    if !instance.is_null() {
        drop(Box::from_raw(instance));
    }
}

/// Energy table of the `nc` cost variant (0 or 1).
///
/// # Safety
/// `instance` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qp_table_build(instance: *const QpInstance, nc: u8, out: *mut *mut QpTable) -> QpStatus {
    guard(|| {
        let ts = borrow(instance, "instance")?;
        let out = out_ref(out, "out")?;
        let table = build_energy_table(&ts.0, CostVariant::from_nc(nc)?)?;
        *out = Box::into_raw(Box::new(QpTable(table)));
        Ok(())
    })
}

/// Copy of `table` with its entries permuted by `seed`.
///
/// # Safety
/// `table` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qp_table_randomize(table: *const QpTable, seed: u64, out: *mut *mut QpTable) -> QpStatus {
    guard(|| {
        let t = borrow(table, "table")?;
        let out = out_ref(out, "out")?;
        *out = Box::into_raw(Box::new(QpTable(randomize_table(&t.0, seed)?)));
        Ok(())
    })
}

/// # Safety
/// `table` must be a live handle; `n_spins` and `n_solutions` writable.
#[no_mangle]
pub unsafe extern "C" fn qp_table_info(table: *const QpTable, n_spins: *mut usize, n_solutions: *mut usize) -> QpStatus {
    guard(|| {
        let t = borrow(table, "table")?;
        *out_ref(n_spins, "n_spins")? = t.0.n_spins();
        *out_ref(n_solutions, "n_solutions")? = count_solutions(&t.0);
        Ok(())
    })
}

/// # Safety
/// `table` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qp_table_free(table: *mut QpTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Energy density and solution probability of the protocol `(betas, gammas)`
/// of length `p`. `gradient`, when not NULL, receives `2p` entries: the
/// derivatives by each β, then by each γ.
///
/// # Safety
/// `table` must be a live handle; `betas` and `gammas` must hold `p`
/// values; `gradient` must be NULL or hold `2p` values.
#[no_mangle]
pub unsafe extern "C" fn qp_energy(
    table: *const QpTable,
    betas: *const f64,
    gammas: *const f64,
    p: usize,
    gamma0: f64,
    energy_density: *mut f64,
    ground_overlap: *mut f64,
    gradient: *mut f64,
) -> QpStatus {
    guard(|| {
        let t = borrow(table, "table")?;
        let params = schedule_arg(betas, gammas, p)?;
        let prop = Propagator::new(&t.0, MixerConfig::new(gamma0)?)?;
        let report = if gradient.is_null() {
            prop.energy(&params)?
        } else {
            let (report, grad) = prop.energy_and_gradient(&params)?;
            slice::from_raw_parts_mut(gradient, 2 * p).copy_from_slice(&grad);
            report
        };
        *out_ref(energy_density, "energy_density")? = report.energy_density;
        *out_ref(ground_overlap, "ground_overlap")? = report.ground_overlap;
        Ok(())
    })
}

/// BFGS minimization of the energy from `(betas, gammas)`, overwritten in
/// place with the optimum.
///
/// # Safety
/// `table` must be a live handle; `betas` and `gammas` must hold `p`
/// writable values; the remaining outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn qp_optimize(
    table: *const QpTable,
    betas: *mut f64,
    gammas: *mut f64,
    p: usize,
    gamma0: f64,
    grad_tol: f64,
    max_iters: usize,
    energy_density: *mut f64,
    n_iters: *mut usize,
    converged: *mut bool,
) -> QpStatus {
    guard(|| {
        let t = borrow(table, "table")?;
        let start = schedule_arg(betas, gammas, p)?;
        let prop = Propagator::new(&t.0, MixerConfig::new(gamma0)?)?;
        let cfg = BfgsConfig {
            grad_tol,
            max_iters,
            ..BfgsConfig::default()
        };
        cfg.validate()?;
        let r = optimize_schedule(&prop, &start, Stage::Qaoa1, &cfg)?;
        slice::from_raw_parts_mut(betas, p).copy_from_slice(r.params.betas());
        slice::from_raw_parts_mut(gammas, p).copy_from_slice(r.params.gammas());
        *out_ref(energy_density, "energy_density")? = r.energy_density;
        *out_ref(n_iters, "n_iters")? = r.n_iters;
        *out_ref(converged, "converged")? = r.converged;
        Ok(())
    })
}

/// Two lowest eigenvalues of `s H_z + (1 - s) H_x`.
///
/// # Safety
/// `table` must be a live handle; `ground` and `excited` writable.
#[no_mangle]
pub unsafe extern "C" fn qp_lowest_two(
    table: *const QpTable,
    s: f64,
    gamma0: f64,
    tol: f64,
    ground: *mut f64,
    excited: *mut f64,
) -> QpStatus {
    guard(|| {
        let t = borrow(table, "table")?;
        let (e0, e1) = lowest_two(s, &t.0, &MixerConfig::new(gamma0)?, tol)?;
        *out_ref(ground, "ground")? = e0;
        *out_ref(excited, "excited")? = e1;
        Ok(())
    })
}
