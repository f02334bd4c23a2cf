//! C ABI over the `ntk-limits` kernels.
//!
//! Every fallible call returns an [`NtkStatus`] and writes its result through
//! an out-pointer. On failure the message is kept per thread and can be read
//! with [`ntk_last_error`]. Nonlinearities and graphs are opaque handles that
//! the caller releases with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use ntk_limits::dcnn::checkerboard_profile;
use ntk_limits::fc_kernel::FcArchitecture;
use ntk_limits::netgraph::PositionGraph;
use ntk_limits::nonlin::{Nonlinearity, NonlinearitySpec, Regime};
use ntk_limits::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NtkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Domain = 3,
    Numerical = 4,
    Precondition = 5,
    Degenerate = 6,
    Graph = 7,
    Config = 8,
    Dimension = 9,
    Io = 10,
    Json = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NtkRegime {
    Order = 0,
    Edge = 1,
    Chaos = 2,
}

/// Opaque nonlinearity handle.
pub struct NtkNonlinearity(Nonlinearity);

/// Opaque position-graph handle.
pub struct NtkGraph(PositionGraph);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NtkStatus {
    match e {
        Error::Domain(_) => NtkStatus::Domain,
        Error::Numerical(_) => NtkStatus::Numerical,
        Error::Precondition(_) => NtkStatus::Precondition,
        Error::Degenerate(_) => NtkStatus::Degenerate,
        Error::Graph(_) => NtkStatus::Graph,
        Error::Config(_) => NtkStatus::Config,
        Error::Dimension(_) => NtkStatus::Dimension,
        Error::Io(_) => NtkStatus::Io,
        Error::Json(_) => NtkStatus::Json,
    }
}

struct Fail(NtkStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(NtkStatus::NullPointer, format!("{what} is null"))
}

/// Run `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NtkStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NtkStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            NtkStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(NtkStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn ntk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ntk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Standardized ReLU, `√2·max(x, 0)`. Never fails.
#[no_mangle]
pub extern "C" fn ntk_nonlinearity_standardized_relu() -> *mut NtkNonlinearity {
    Box::into_raw(Box::new(NtkNonlinearity(Nonlinearity::standardized_relu())))
}

/// Build a nonlinearity from its JSON description, e.g.
/// `{"kind": "relu", "normalization": "normalized"}`.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ntk_nonlinearity_from_json(
    json: *const c_char,
    out: *mut *mut NtkNonlinearity,
) -> NtkStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let spec: NonlinearitySpec = serde_json::from_str(text).map_err(Error::from)?;
        let sigma = spec.build()?;
        write(out, Box::into_raw(Box::new(NtkNonlinearity(sigma))))
    })
}

/// # Safety
/// `sigma` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ntk_nonlinearity_free(sigma: *mut NtkNonlinearity) {
    if !sigma.is_null() {
        drop(Box::from_raw(sigma));
    }
}

/// `R_σ(ρ)`.
///
/// # Safety
/// `sigma` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ntk_dual(sigma: *const NtkNonlinearity, rho: f64, out: *mut f64) -> NtkStatus {
    guard(|| write(out, handle(sigma, "sigma")?.0.dual(rho)?))
}

/// `R_σ̇(ρ)`.
///
/// # Safety
/// `sigma` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ntk_dual_derivative(
    sigma: *const NtkNonlinearity,
    rho: f64,
    out: *mut f64,
) -> NtkStatus {
    guard(|| write(out, handle(sigma, "sigma")?.0.dual_derivative(rho)?))
}

/// `r = (1-β²)·E[σ̇(Z)²]`.
///
/// # Safety
/// `sigma` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ntk_characteristic_value(
    sigma: *const NtkNonlinearity,
    beta: f64,
    out: *mut f64,
) -> NtkStatus {
    guard(|| write(out, handle(sigma, "sigma")?.0.characteristic_value(beta)?))
}

/// Regime, characteristic value and fixed point (NaN when there is none).
///
/// # Safety
/// `sigma` must be a live handle and every output pointer writable.
#[no_mangle]
pub unsafe extern "C" fn ntk_classify(
    sigma: *const NtkNonlinearity,
    beta: f64,
    regime: *mut NtkRegime,
    r: *mut f64,
    fixed_point: *mut f64,
) -> NtkStatus {
    guard(|| {
        let rep = handle(sigma, "sigma")?.0.classify(beta)?;
        let reg = match rep.regime {
            Regime::Order => NtkRegime::Order,
            Regime::Edge => NtkRegime::Edge,
            Regime::Chaos => NtkRegime::Chaos,
        };
        write(regime, reg)?;
        write(r, rep.r)?;
        write(fixed_point, rep.fixed_point.unwrap_or(f64::NAN))
    })
}

fn fc(sigma: &NtkNonlinearity, beta: f64, depth: usize) -> Result<FcArchitecture, Fail> {
    Ok(FcArchitecture::new(sigma.0.clone(), beta, depth, 1)?)
}

/// Activation kernel `Σ^(layer)(ρ)` of a depth-`depth` fully-connected network.
///
/// # Safety
/// `sigma` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ntk_fc_activation_kernel(
    sigma: *const NtkNonlinearity,
    beta: f64,
    depth: usize,
    layer: usize,
    rho: f64,
    out: *mut f64,
) -> NtkStatus {
    guard(|| {
        let arch = fc(handle(sigma, "sigma")?, beta, depth)?;
        write(out, arch.activation_kernel(rho, layer)?)
    })
}

/// Limiting NTK `Θ^(L)(ρ)`.
///
/// # Safety
/// `sigma` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ntk_fc_ntk(
    sigma: *const NtkNonlinearity,
    beta: f64,
    depth: usize,
    rho: f64,
    out: *mut f64,
) -> NtkStatus {
    guard(|| write(out, fc(handle(sigma, "sigma")?, beta, depth)?.ntk(rho)?))
}

/// `ϑ^(L)(ρ) = Θ(ρ)/Θ(1)`.
///
/// # Safety
/// `sigma` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ntk_fc_normalized_ntk(
    sigma: *const NtkNonlinearity,
    beta: f64,
    depth: usize,
    rho: f64,
    out: *mut f64,
) -> NtkStatus {
    guard(|| write(out, fc(handle(sigma, "sigma")?, beta, depth)?.normalized_ntk(rho)?))
}

/// Checkerboard NTK `Θ(v)` for `v = 0..L-1` followed by the diagonal, so
/// `len` must be at least `depth + 1`. `written` receives `depth + 1`, also
/// when the buffer is too small.
///
/// # Safety
/// `sigma` must be a live handle, `out` must hold `len` doubles and `written`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn ntk_checkerboard_ntk(
    sigma: *const NtkNonlinearity,
    beta: f64,
    depth: usize,
    out: *mut f64,
    len: usize,
    written: *mut usize,
) -> NtkStatus {
    guard(|| {
        let prof = checkerboard_profile(&handle(sigma, "sigma")?.0, beta, depth)?;
        write(written, prof.ntk.len())?;
        if len < prof.ntk.len() {
            return Err(Fail(
                NtkStatus::BufferTooSmall,
                format!("need {} values, buffer holds {len}", prof.ntk.len()),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, prof.ntk.len()).copy_from_slice(&prof.ntk);
        Ok(())
    })
}

/// Parse a position graph from its JSON document.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ntk_graph_from_json(json: *const c_char, out: *mut *mut NtkGraph) -> NtkStatus {
    guard(|| {
        let g = PositionGraph::from_json(str_arg(json, "json")?)?;
        write(out, Box::into_raw(Box::new(NtkGraph(g))))
    })
}

/// # Safety
/// `graph` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ntk_graph_free(graph: *mut NtkGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Number of layers above the input.
///
/// # Safety
/// `graph` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ntk_graph_depth(graph: *const NtkGraph, out: *mut usize) -> NtkStatus {
    guard(|| write(out, handle(graph, "graph")?.0.depth()))
}

/// Structural checks. `violations` receives their count; when nonzero the
/// first message is available from `ntk_last_error` and the status is `Graph`.
///
/// # Safety
/// `graph` must be a live handle and `violations` writable.
#[no_mangle]
pub unsafe extern "C" fn ntk_graph_validate(graph: *const NtkGraph, violations: *mut usize) -> NtkStatus {
    guard(|| {
        let v = handle(graph, "graph")?.0.validate();
        write(violations, v.len())?;
        match v.first() {
            None => Ok(()),
            Some(first) => Err(Fail(
                NtkStatus::Graph,
                format!("layer {}: {}", first.layer, first.message),
            )),
        }
    })
}
