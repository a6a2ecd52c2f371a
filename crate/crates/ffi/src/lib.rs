//! C ABI for epictrl.
//!
//! Objects cross the boundary as opaque handles created by `*_new`-style
//! constructors and released with the matching `*_free`. Every fallible call
//! returns an [`EpictrlStatus`]; on failure, [`epictrl_last_error`] describes
//! the cause for the calling thread. Arrays are caller-allocated and their
//! lengths follow from [`epictrl_model_dims`] unless stated otherwise.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use epictrl::estimation::closed_form_rates;
use epictrl::model::{build_sidher, estimate_lipschitz};
use epictrl::observer::{assemble_sdp, run_observer, solve_observer_sdp, verify_gains, ObserverGains};
use epictrl::pipeline::{Pipeline, PipelineConfig};
use epictrl::sim::{generate_dataset, integrate, NominalInput, StepControl};
use epictrl::{DataSet, Domain, Error, NoiseSpec, ParameterVector, StructuredModel};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpictrlStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument or input document was rejected.
    InvalidArgument = 2,
    /// Integration, factorization or an optimizer failed.
    NumericalFailure = 3,
    /// The observer LMIs have no solution or the gains fail verification.
    Infeasible = 4,
    /// A file could not be read or written.
    Io = 5,
    /// The library panicked; this is a bug.
    Panic = 6,
}

/// A structured model `ẋ = A x + G f(H x, u)`, `y = C x`.
pub struct EpictrlModel(StructuredModel);

/// Sampled input and output records.
pub struct EpictrlDataSet(DataSet);

/// Verified observer gains with the model they were designed for.
pub struct EpictrlObserver {
    gains: ObserverGains,
    model: StructuredModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(EpictrlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidParameter { .. }
            | Error::DimensionMismatch { .. }
            | Error::InvalidInput(_)
            | Error::OutOfRange { .. }
            | Error::UnknownNonlinearity(_)
            | Error::Json(_)
            | Error::Csv { .. } => EpictrlStatus::InvalidArgument,
            Error::Integration { .. } | Error::RankDeficient { .. } | Error::Optimization(_) => {
                EpictrlStatus::NumericalFailure
            }
            Error::Io { .. } => EpictrlStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(name: &str) -> Failure {
    Failure(EpictrlStatus::NullPointer, format!("`{name}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EpictrlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EpictrlStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            EpictrlStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn string<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(EpictrlStatus::InvalidArgument, format!("`{name}` is not UTF-8")))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn epictrl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failure on this thread, or an empty string if none
/// occurred. The pointer stays valid until the next failure on the same thread.
#[no_mangle]
pub extern "C" fn epictrl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds the SIDHER model from the 9 parameters
/// `(beta, gamma, rho, sigma, xi, lambda, phi, tau, nu)`.
///
/// # Safety
/// `theta` must point to 9 readable doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn epictrl_model_sidher(theta: *const f64, out: *mut *mut EpictrlModel) -> EpictrlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let v: [f64; 9] = slice(theta, 9, "theta")?.try_into().expect("length 9");
        let model = build_sidher(&ParameterVector::from_array(v))?;
        emit(out, EpictrlModel(model));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`epictrl_model_sidher`] and not be freed already; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn epictrl_model_free(model: *mut EpictrlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the state, input and output dimensions.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn epictrl_model_dims(
    model: *const EpictrlModel,
    n_x: *mut usize,
    n_u: *mut usize,
    n_y: *mut usize,
) -> EpictrlStatus {
    guard(|| {
        let d = deref(model, "model")?.0.dims();
        if n_x.is_null() || n_u.is_null() || n_y.is_null() {
            return Err(null("dims output"));
        }
        *n_x = d.n_x;
        *n_u = d.n_u;
        *n_y = d.n_y;
        Ok(())
    })
}

/// Evaluates `dx = A x + G f(H x, u)`.
///
/// # Safety
/// `x` and `dx` hold `n_x` doubles, `u` holds `n_u`.
#[no_mangle]
pub unsafe extern "C" fn epictrl_model_rhs(
    model: *const EpictrlModel,
    x: *const f64,
    u: *const f64,
    dx: *mut f64,
) -> EpictrlStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let d = m.dims();
        let v = m.eval_dynamics(slice(x, d.n_x, "x")?, slice(u, d.n_u, "u")?)?;
        slice_mut(dx, d.n_x, "dx")?.copy_from_slice(&v);
        Ok(())
    })
}

/// Integrates the model under the nominal input and writes the state at each
/// of the `n_times` increasing times, row-major into `states` (`n_times × n_x`).
///
/// # Safety
/// `x0` holds `n_x` doubles, `times` holds `n_times`, `states` holds `n_times · n_x`.
#[no_mangle]
pub unsafe extern "C" fn epictrl_model_simulate(
    model: *const EpictrlModel,
    x0: *const f64,
    times: *const f64,
    n_times: usize,
    states: *mut f64,
) -> EpictrlStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let n_x = m.dims().n_x;
        let traj = integrate(
            m,
            slice(x0, n_x, "x0")?,
            &NominalInput,
            slice(times, n_times, "times")?,
            &StepControl::default(),
        )?;
        let out = slice_mut(states, n_times * n_x, "states")?;
        for (row, x) in out.chunks_mut(n_x).zip(&traj.states) {
            row.copy_from_slice(x);
        }
        Ok(())
    })
}

/// Simulates the model under the nominal input on `[t0, t1]` and samples it
/// every `sample_dt` with Gaussian input and output noise drawn from `seed`.
///
/// # Safety
/// `model` must be a live handle, `x0` holds `n_x` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn epictrl_dataset_generate(
    model: *const EpictrlModel,
    x0: *const f64,
    t0: f64,
    t1: f64,
    sample_dt: f64,
    input_noise_std: f64,
    output_noise_std: f64,
    seed: u64,
    out: *mut *mut EpictrlDataSet,
) -> EpictrlStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let (data, _) = generate_dataset(
            m,
            slice(x0, m.dims().n_x, "x0")?,
            &NominalInput,
            t0,
            t1,
            sample_dt,
            &NoiseSpec::uniform(input_noise_std, output_noise_std, seed),
            &StepControl::default(),
        )?;
        emit(out, EpictrlDataSet(data));
        Ok(())
    })
}

/// Parses a data set from CSV text with a `t,u1..,y1..` header.
///
/// # Safety
/// `csv` must be a NUL-terminated string and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn epictrl_dataset_from_csv(csv: *const c_char, out: *mut *mut EpictrlDataSet) -> EpictrlStatus {
    guard(|| {
        let text = string(csv, "csv")?;
        if out.is_null() {
            return Err(null("out"));
        }
        emit(out, EpictrlDataSet(DataSet::from_csv(text, "<ffi>")?));
        Ok(())
    })
}

/// Serializes a data set to CSV. Release the string with [`epictrl_string_free`].
///
/// # Safety
/// `data` must be a live handle and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn epictrl_dataset_to_csv(data: *const EpictrlDataSet, out: *mut *mut c_char) -> EpictrlStatus {
    guard(|| {
        let d = deref(data, "data")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = CString::new(d.0.to_csv()).expect("csv has no NUL").into_raw();
        Ok(())
    })
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `data` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn epictrl_dataset_len(data: *const EpictrlDataSet) -> usize {
    data.as_ref().map_or(0, |d| d.0.times.len())
}

/// # Safety
/// `data` must come from this library and not be freed already; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn epictrl_dataset_free(data: *mut EpictrlDataSet) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// # Safety
/// `s` must come from this library and not be freed already; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn epictrl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Closed-form estimates of `(rho, phi, sigma, xi)` from SIDHER records.
///
/// # Safety
/// `data` must be a live handle and `rates` must hold 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn epictrl_closed_form_rates(data: *const EpictrlDataSet, rates: *mut f64) -> EpictrlStatus {
    guard(|| {
        let r = closed_form_rates(&deref(data, "data")?.0)?;
        slice_mut(rates, 4, "rates")?.copy_from_slice(&[r.rho, r.phi, r.sigma, r.xi]);
        Ok(())
    })
}

/// Solves the observer LMIs for `model` and verifies the gains at `verify_tol`.
/// A negative `lipschitz` selects the bound estimated over the state simplex.
///
/// # Safety
/// `model` must be a live handle and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn epictrl_observer_design(
    model: *const EpictrlModel,
    lipschitz: f64,
    margin: f64,
    verify_tol: f64,
    out: *mut *mut EpictrlObserver,
) -> EpictrlStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let ell = if lipschitz < 0.0 {
            estimate_lipschitz(m, &Domain::sidher_simplex(), 21)?.value
        } else {
            lipschitz
        };
        let problem = assemble_sdp(m, ell, margin)?;
        let syn = solve_observer_sdp(&problem)?;
        let gains = syn
            .gains
            .ok_or_else(|| Failure(EpictrlStatus::Infeasible, format!("observer SDP not solved: {:?}", syn.status)))?;
        let v = verify_gains(&gains, &problem, verify_tol);
        if !v.passed {
            return Err(Failure(
                EpictrlStatus::Infeasible,
                format!("gains fail verification: {}", v.violated().join(", ")),
            ));
        }
        emit(out, EpictrlObserver { gains, model: m.clone() });
        Ok(())
    })
}

/// Copies the output-injection gain `L` (`n_x × n_y`, row-major).
///
/// # Safety
/// `observer` must be a live handle and `l` must hold `n_x · n_y` doubles.
#[no_mangle]
pub unsafe extern "C" fn epictrl_observer_gain_l(observer: *const EpictrlObserver, l: *mut f64) -> EpictrlStatus {
    guard(|| {
        let g = &deref(observer, "observer")?.gains.l;
        let out = slice_mut(l, g.nrows() * g.ncols(), "l")?;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                out[i * g.ncols() + j] = g[(i, j)];
            }
        }
        Ok(())
    })
}

/// Runs the observer over `data` from `x_hat0` and writes the state estimate
/// at the last sample.
///
/// # Safety
/// `x_hat0` and `x_hat_final` hold `n_x` doubles; handles must be live.
#[no_mangle]
pub unsafe extern "C" fn epictrl_observer_run(
    observer: *const EpictrlObserver,
    data: *const EpictrlDataSet,
    x_hat0: *const f64,
    x_hat_final: *mut f64,
) -> EpictrlStatus {
    guard(|| {
        let o = deref(observer, "observer")?;
        let n_x = o.model.dims().n_x;
        let run = run_observer(
            &o.gains,
            &o.model,
            &deref(data, "data")?.0,
            slice(x_hat0, n_x, "x_hat0")?,
            None,
            &StepControl::default(),
        )?;
        if let Some(f) = run.failure {
            return Err(Failure(
                EpictrlStatus::NumericalFailure,
                format!("observer stopped at t = {}: {}", f.time, f.reason),
            ));
        }
        let last = run.x_hat.last().ok_or_else(|| null("observer output"))?;
        slice_mut(x_hat_final, n_x, "x_hat_final")?.copy_from_slice(last);
        Ok(())
    })
}

/// # Safety
/// `observer` must come from this library and not be freed already; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn epictrl_observer_free(observer: *mut EpictrlObserver) {
    if !observer.is_null() {
        drop(Box::from_raw(observer));
    }
}

/// Runs every pipeline stage with the JSON configuration `config_json` (null
/// for defaults) into `output_dir`. `exit_code` receives the code the CLI
/// would exit with: 0 on success, 2 for invalid input, 3–7 for the failing stage.
///
/// # Safety
/// `config_json` is null or NUL-terminated, `output_dir` is NUL-terminated and
/// `exit_code` must be writable.
#[no_mangle]
pub unsafe extern "C" fn epictrl_pipeline_run(
    config_json: *const c_char,
    output_dir: *const c_char,
    exit_code: *mut i32,
) -> EpictrlStatus {
    guard(|| {
        let dir = string(output_dir, "output_dir")?;
        if exit_code.is_null() {
            return Err(null("exit_code"));
        }
        let config = if config_json.is_null() {
            Ok(PipelineConfig::default())
        } else {
            PipelineConfig::from_json(string(config_json, "config_json")?)
        };
        let result = config.and_then(|c| Pipeline::new(c, Path::new(dir), false)?.run_all());
        match result {
            Ok(()) => *exit_code = 0,
            Err(e) => {
                *exit_code = e.exit_code();
                set_error(e.to_string());
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn null_arguments_are_reported() {
        let status = unsafe { epictrl_model_sidher(ptr::null(), ptr::null_mut()) };
        assert_eq!(status, EpictrlStatus::NullPointer);
        let msg = unsafe { CStr::from_ptr(epictrl_last_error()) };
        assert!(msg.to_str().unwrap().contains("null"));
    }

    #[test]
    fn error_mapping_follows_error_kind() {
        let Failure(s, _) = Error::InvalidInput("x".into()).into();
        assert_eq!(s, EpictrlStatus::InvalidArgument);
        let Failure(s, _) = Error::Optimization("x".into()).into();
        assert_eq!(s, EpictrlStatus::NumericalFailure);
    }
}
