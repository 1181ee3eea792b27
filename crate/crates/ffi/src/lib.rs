//! C ABI over the `intracell` library.
//!
//! Models are opaque heap handles created by `ic_model_*` constructors and
//! released with `ic_model_free`. Every fallible call returns an
//! [`IcStatus`]; on failure `ic_last_error_message` describes the error for
//! the calling thread. Output pointers are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use nalgebra::DMatrix;
use intracell::renewal::{self, CycleOptions};
use intracell::spatial::{self, RhoProfile, SpatialOptions};
use intracell::{spectral, Error, ModelSpec};

/// Opaque model handle.
pub struct IcModel {
    inner: ModelSpec,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidModel = 3,
    Singular = 4,
    Domain = 5,
    Io = 6,
    Parse = 7,
    BufferTooSmall = 8,
    Numerical = 9,
    Panic = 10,
}

/// Renewal-reward estimate with standard errors.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct IcRenewalEstimate {
    pub v_eff: f64,
    pub sigma_eff: f64,
    pub v_eff_se: f64,
    pub sigma_eff_se: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> IcStatus {
    match e {
        Error::InvalidModel(_) | Error::Reducible | Error::ZeroExitRate { .. } => IcStatus::InvalidModel,
        Error::Singular(_) | Error::KernelDimension | Error::Solvability { .. } => IcStatus::Singular,
        Error::Domain(_) => IcStatus::Domain,
        Error::Io { .. } => IcStatus::Io,
        Error::Parse { .. } => IcStatus::Parse,
        Error::InvalidArgument(_) => IcStatus::InvalidArgument,
        Error::RunawayCycle { .. }
        | Error::Cfl { .. }
        | Error::NegativeMass { .. }
        | Error::ZeroMass
        | Error::AllStartsFailed(_) => IcStatus::Numerical,
    }
}

struct Fail(IcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(IcStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            IcStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            IcStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(m: *const IcModel) -> Result<&'a ModelSpec, Fail> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn boxed(model: ModelSpec) -> Result<*mut IcModel, Fail> {
    model.ensure_valid()?;
    Ok(Box::into_raw(Box::new(IcModel { inner: model })))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next `ic_*` call on the same thread.
#[no_mangle]
pub extern "C" fn ic_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ic_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Loads a model from a TOML file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ic_model_from_toml(path: *const c_char, out: *mut *mut IcModel) -> IcStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(IcStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let model = ModelSpec::from_file(Path::new(path))?;
        write(out, boxed(model)?, "out")
    })
}

/// Moving/diffusing model: state 0 moves at `c` and leaves at `beta1`,
/// state 1 diffuses with `d` and leaves at `beta2`.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ic_model_two_state(c: f64, d: f64, beta1: f64, beta2: f64, out: *mut *mut IcModel) -> IcStatus {
    guard(|| write(out, boxed(ModelSpec::two_state(c, d, beta1, beta2))?, "out"))
}

/// Builds an `n`-state model. `rates` is row-major `n × n` with
/// `rates[i * n + j]` the rate from state `j` to state `i`; the diagonal is
/// ignored and recomputed so columns sum to zero.
///
/// # Safety
/// `speeds` and `diffusivities` must point to `n` values, `rates` to `n * n`,
/// and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ic_model_new(
    n: usize,
    speeds: *const f64,
    diffusivities: *const f64,
    rates: *const f64,
    out: *mut *mut IcModel,
) -> IcStatus {
    guard(|| {
        if n == 0 {
            return Err(Fail(IcStatus::InvalidArgument, "model needs at least one state".into()));
        }
        let nn = n.checked_mul(n).ok_or_else(|| Fail(IcStatus::InvalidArgument, "state count overflows".into()))?;
        let c = slice(speeds, n, "speeds")?.to_vec();
        let d = slice(diffusivities, n, "diffusivities")?.to_vec();
        let mut a = DMatrix::from_row_slice(n, n, slice(rates, nn, "rates")?);
        for i in 0..n {
            a[(i, i)] = 0.0;
        }
        let model = ModelSpec::from_transition_rates(c, d, a)?;
        write(out, boxed(model)?, "out")
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from an `ic_model_*` constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ic_model_free(model: *mut IcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ic_model_num_states(model: *const IcModel, out: *mut usize) -> IcStatus {
    guard(|| write(out, model_ref(model)?.n_states(), "out"))
}

/// Writes the stationary distribution into `out[0..n]`.
///
/// # Safety
/// `model` must be a live handle and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ic_stationary_distribution(model: *const IcModel, out: *mut f64, len: usize) -> IcStatus {
    guard(|| {
        let m = model_ref(model)?;
        if len < m.n_states() {
            return Err(Fail(IcStatus::BufferTooSmall, format!("need {} values, got {len}", m.n_states())));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let pi = m.stationary_distribution()?.pi;
        std::slice::from_raw_parts_mut(out, pi.len()).copy_from_slice(&pi);
        Ok(())
    })
}

/// Effective velocity and diffusivity of the homogeneous model.
///
/// # Safety
/// `model` must be a live handle; `v_eff` and `sigma_eff` writable.
#[no_mangle]
pub unsafe extern "C" fn ic_effective_transport(model: *const IcModel, v_eff: *mut f64, sigma_eff: *mut f64) -> IcStatus {
    guard(|| {
        if v_eff.is_null() || sigma_eff.is_null() {
            return Err(null("output"));
        }
        let e = spectral::effective_transport(model_ref(model)?)?;
        write(v_eff, e.v_eff, "v_eff")?;
        write(sigma_eff, e.sigma_eff, "sigma_eff")
    })
}

/// Principal eigenvalue of the Fourier-transformed operator at `nu`.
///
/// # Safety
/// `model` must be a live handle and `lambda` writable.
#[no_mangle]
pub unsafe extern "C" fn ic_dispersion_eigenvalue(model: *const IcModel, nu: f64, lambda: *mut f64) -> IcStatus {
    guard(|| {
        let p = spectral::dispersion_eigenvalue(model_ref(model)?, nu)?;
        write(lambda, p.lambda, "lambda")
    })
}

/// Renewal-reward Monte Carlo estimate from `cycles` seeded cycles.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ic_renewal_estimate(
    model: *const IcModel,
    cycles: u64,
    seed: u64,
    out: *mut IcRenewalEstimate,
) -> IcStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let sojourn = renewal::sojourn_from_model(m, None)?;
        let samples = renewal::simulate_cycles(&sojourn, m, cycles, seed, CycleOptions::default())?;
        let e = renewal::estimate_effective(&samples)?;
        write(
            out,
            IcRenewalEstimate { v_eff: e.v_eff, sigma_eff: e.sigma_eff, v_eff_se: e.v_eff_se, sigma_eff_se: e.sigma_eff_se },
            "out",
        )
    })
}

/// Effective transport under an availability table `(x[k], rho[k])` on
/// `[0, 1]`, solved on `points` grid points (0 selects the default).
/// Binding states are the states with nonzero speed.
///
/// # Safety
/// `model` must be a live handle, `x` and `rho` must hold `len` values, and
/// `v_eff`, `sigma_eff` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ic_spatial_effective(
    model: *const IcModel,
    x: *const f64,
    rho: *const f64,
    len: usize,
    points: usize,
    v_eff: *mut f64,
    sigma_eff: *mut f64,
) -> IcStatus {
    guard(|| {
        let m = model_ref(model)?;
        if v_eff.is_null() || sigma_eff.is_null() {
            return Err(null("output"));
        }
        let profile = RhoProfile::table(slice(x, len, "x")?.to_vec(), slice(rho, len, "rho")?.to_vec())?;
        let opts = if points == 0 { SpatialOptions::default() } else { SpatialOptions::with_points(points) };
        let e = spatial::spatial_effective_transport(m, &profile, &opts)?;
        write(v_eff, e.v_eff, "v_eff")?;
        write(sigma_eff, e.sigma_eff, "sigma_eff")
    })
}
