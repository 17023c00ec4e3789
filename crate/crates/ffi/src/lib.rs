//! C ABI over the `gluon` library.
//!
//! Every fallible call returns a [`GluonStatus`]; on failure the message is
//! kept per thread and can be read with [`gluon_last_error_message`].
//! Matrices cross the boundary as row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{self, AssertUnwindSafe};
use std::ptr;

use gluon::optimizer::OptimError;
use gluon::smoothness::{fit_constants, suggest_stepsize};
use gluon::theory::{self, RateInputs, TheoryError};
use gluon::{Gluon, Matrix, MomentumRule, NormSpec, ParamGroup, StepsizeSchedule};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GluonStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Numerical = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Groups collected before the optimizer is built.
pub struct GluonBuilder {
    groups: Vec<ParamGroup>,
}

/// Opaque optimizer state.
pub struct GluonOptimizer {
    inner: Gluon,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(status: GluonStatus, msg: impl Into<String>) -> GluonStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guard(f: impl FnOnce() -> GluonStatus) -> GluonStatus {
    LAST_ERROR.with(|e| e.borrow_mut().clear());
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => set_error(GluonStatus::Panic, "internal panic"),
    }
}

fn optim_status(e: OptimError) -> GluonStatus {
    let status = match e {
        OptimError::ShapeMismatch { .. } | OptimError::GroupCount { .. } => GluonStatus::ShapeMismatch,
        OptimError::Norm { .. } => GluonStatus::Numerical,
        _ => GluonStatus::InvalidArgument,
    };
    set_error(status, e.to_string())
}

fn theory_status(e: TheoryError) -> GluonStatus {
    let status = match e {
        TheoryError::Overflow(_) => GluonStatus::Numerical,
        _ => GluonStatus::InvalidArgument,
    };
    set_error(status, e.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, GluonStatus> {
    if p.is_null() {
        return Err(set_error(GluonStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| set_error(GluonStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], GluonStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(set_error(GluonStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! out_ptr {
    ($p:expr, $name:literal) => {
        if $p.is_null() {
            return set_error(GluonStatus::NullPointer, concat!($name, " is null"));
        }
    };
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string, truncating if needed. Returns the full message
/// length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn gluon_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

#[no_mangle]
pub extern "C" fn gluon_builder_new() -> *mut GluonBuilder {
    Box::into_raw(Box::new(GluonBuilder { groups: Vec::new() }))
}

/// # Safety
/// `builder` must be null or a pointer from [`gluon_builder_new`] that was
/// not passed to [`gluon_builder_build`].
#[no_mangle]
pub unsafe extern "C" fn gluon_builder_free(builder: *mut GluonBuilder) {
    if !builder.is_null() {
        drop(Box::from_raw(builder));
    }
}

/// Appends a parameter group. `norm` uses the `family[:scale]` form
/// (`spectral:1.5`, `max:2`, `euclid`) and `schedule` the
/// `constant:T`, `poly:T`, `adaptive:L0:L1` or `adaptive_stoch:L0:L1:Z` form.
///
/// # Safety
/// `builder` must be a live builder, the strings NUL-terminated, and `data`
/// must point to `rows * cols` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn gluon_builder_add_group(
    builder: *mut GluonBuilder,
    id: *const c_char,
    rows: usize,
    cols: usize,
    data: *const f64,
    norm: *const c_char,
    schedule: *const c_char,
) -> GluonStatus {
    guard(|| {
        out_ptr!(builder, "builder");
        let id = tri!(str_arg(id, "id"));
        let norm_text = tri!(str_arg(norm, "norm"));
        let schedule_text = tri!(str_arg(schedule, "schedule"));
        let Some(len) = rows.checked_mul(cols) else {
            return set_error(GluonStatus::InvalidArgument, "rows * cols overflows");
        };
        let values = tri!(slice_arg(data, len, "data"));
        let x = match Matrix::new(rows, cols, values.to_vec()) {
            Ok(x) => x,
            Err(e) => return set_error(GluonStatus::InvalidArgument, e.to_string()),
        };
        let norm: NormSpec = match norm_text.parse() {
            Ok(n) => n,
            Err(e) => return set_error(GluonStatus::InvalidArgument, format!("norm: {e}")),
        };
        let schedule: StepsizeSchedule = match schedule_text.parse() {
            Ok(s) => s,
            Err(e) => return set_error(GluonStatus::InvalidArgument, format!("schedule: {e}")),
        };
        (*builder).groups.push(ParamGroup::new(id, x, norm, schedule));
        GluonStatus::Ok
    })
}

/// Consumes the builder and writes a new optimizer to `out`. `momentum` is
/// `none`, `constant:B` or `sqrt`. The builder is freed even on failure.
///
/// # Safety
/// `builder` must be a live builder and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gluon_builder_build(
    builder: *mut GluonBuilder,
    momentum: *const c_char,
    out: *mut *mut GluonOptimizer,
) -> GluonStatus {
    guard(|| {
        out_ptr!(builder, "builder");
        let groups = Box::from_raw(builder).groups;
        out_ptr!(out, "out");
        let rule: MomentumRule = match tri!(str_arg(momentum, "momentum")).parse() {
            Ok(r) => r,
            Err(e) => return set_error(GluonStatus::InvalidArgument, format!("momentum: {e}")),
        };
        match Gluon::new(groups, rule) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(GluonOptimizer { inner }));
                GluonStatus::Ok
            }
            Err(e) => optim_status(e),
        }
    })
}

/// # Safety
/// `opt` must be null or a pointer from [`gluon_builder_build`].
#[no_mangle]
pub unsafe extern "C" fn gluon_optimizer_free(opt: *mut GluonOptimizer) {
    if !opt.is_null() {
        drop(Box::from_raw(opt));
    }
}

/// # Safety
/// `opt` must be a live optimizer.
#[no_mangle]
pub unsafe extern "C" fn gluon_optimizer_group_count(opt: *const GluonOptimizer) -> usize {
    opt.as_ref().map_or(0, |o| o.inner.groups().len())
}

/// # Safety
/// `opt` must be a live optimizer.
#[no_mangle]
pub unsafe extern "C" fn gluon_optimizer_iteration(opt: *const GluonOptimizer) -> u64 {
    opt.as_ref().map_or(0, |o| o.inner.iteration())
}

/// # Safety
/// `opt` must be a live optimizer; `rows` and `cols` writable.
#[no_mangle]
pub unsafe extern "C" fn gluon_optimizer_group_shape(
    opt: *const GluonOptimizer,
    index: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> GluonStatus {
    guard(|| {
        out_ptr!(opt, "opt");
        out_ptr!(rows, "rows");
        out_ptr!(cols, "cols");
        let Some(g) = (*opt).inner.groups().get(index) else {
            return set_error(GluonStatus::InvalidArgument, format!("no group {index}"));
        };
        (*rows, *cols) = g.x.shape();
        GluonStatus::Ok
    })
}

/// One step. `grads[i]` points to the row-major gradient of group `i`.
/// With `stochastic` the momentum buffer is updated and drives the LMO.
/// If `radii_out` is non-null it receives one radius per group.
///
/// # Safety
/// `opt` must be a live optimizer, `grads` must hold `n_groups` pointers each
/// to a buffer of the group's size, and `radii_out` must be null or hold
/// `n_groups` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gluon_optimizer_step(
    opt: *mut GluonOptimizer,
    grads: *const *const f64,
    n_groups: usize,
    stochastic: bool,
    radii_out: *mut f64,
) -> GluonStatus {
    guard(|| {
        out_ptr!(opt, "opt");
        let opt = &mut (*opt).inner;
        if n_groups != opt.groups().len() {
            return set_error(
                GluonStatus::ShapeMismatch,
                format!("{n_groups} gradients for {} groups", opt.groups().len()),
            );
        }
        out_ptr!(grads, "grads");
        let mut mats = Vec::with_capacity(n_groups);
        for (i, g) in opt.groups().iter().enumerate() {
            let (r, c) = g.x.shape();
            let values = tri!(slice_arg(*grads.add(i), r * c, "gradient"));
            match Matrix::new(r, c, values.to_vec()) {
                Ok(m) => mats.push(m),
                Err(e) => return set_error(GluonStatus::InvalidArgument, format!("group {}: {e}", g.id)),
            }
        }
        let report = if stochastic {
            opt.step_stochastic(&mats)
        } else {
            opt.step_deterministic(&mats)
        };
        match report {
            Ok(report) => {
                if !radii_out.is_null() {
                    for (i, s) in report.groups.iter().enumerate() {
                        *radii_out.add(i) = s.radius;
                    }
                }
                GluonStatus::Ok
            }
            Err(e) => optim_status(e),
        }
    })
}

/// Copies group `index`'s parameters into `out`, which holds `len` doubles.
///
/// # Safety
/// `opt` must be a live optimizer and `out` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gluon_optimizer_get_params(
    opt: *const GluonOptimizer,
    index: usize,
    out: *mut f64,
    len: usize,
) -> GluonStatus {
    guard(|| {
        out_ptr!(opt, "opt");
        let Some(g) = (*opt).inner.groups().get(index) else {
            return set_error(GluonStatus::InvalidArgument, format!("no group {index}"));
        };
        let values = g.x.as_slice();
        if len < values.len() {
            return set_error(
                GluonStatus::BufferTooSmall,
                format!("group {} needs {} values, buffer holds {len}", g.id, values.len()),
            );
        }
        out_ptr!(out, "out");
        ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
        GluonStatus::Ok
    })
}

/// Writes the LMO direction of `g` under `norm` to `out` (`rows * cols` values).
///
/// # Safety
/// `norm` must be NUL-terminated; `g` and `out` must hold `rows * cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn gluon_lmo_direction(
    norm: *const c_char,
    rows: usize,
    cols: usize,
    g: *const f64,
    out: *mut f64,
) -> GluonStatus {
    guard(|| {
        let spec: NormSpec = match tri!(str_arg(norm, "norm")).parse() {
            Ok(n) => n,
            Err(e) => return set_error(GluonStatus::InvalidArgument, format!("norm: {e}")),
        };
        let Some(len) = rows.checked_mul(cols) else {
            return set_error(GluonStatus::InvalidArgument, "rows * cols overflows");
        };
        let values = tri!(slice_arg(g, len, "g"));
        out_ptr!(out, "out");
        let g = match Matrix::new(rows, cols, values.to_vec()) {
            Ok(m) => m,
            Err(e) => return set_error(GluonStatus::InvalidArgument, e.to_string()),
        };
        match spec.lmo_direction(&g) {
            Ok(d) => {
                ptr::copy_nonoverlapping(d.as_slice().as_ptr(), out, len);
                GluonStatus::Ok
            }
            Err(e) => set_error(GluonStatus::Numerical, e.to_string()),
        }
    })
}

unsafe fn rate_inputs(
    delta0: f64,
    l0: *const f64,
    l1: *const f64,
    p: usize,
    epsilon: f64,
) -> Result<RateInputs, GluonStatus> {
    if p == 0 {
        return Err(set_error(GluonStatus::InvalidArgument, "p must be positive"));
    }
    let l0 = slice_arg(l0, p, "l0")?.to_vec();
    let l1 = slice_arg(l1, p, "l1")?.to_vec();
    Ok(RateInputs::new(delta0, l0, l1, epsilon))
}

/// Deterministic iteration count; `weighted` selects the harmonic-mean variant.
///
/// # Safety
/// `l0` and `l1` must hold `p` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gluon_det_iterations(
    delta0: f64,
    l0: *const f64,
    l1: *const f64,
    p: usize,
    epsilon: f64,
    weighted: bool,
    out: *mut u64,
) -> GluonStatus {
    guard(|| {
        out_ptr!(out, "out");
        let inp = tri!(rate_inputs(delta0, l0, l1, p, epsilon));
        let k = if weighted {
            theory::det_iterations_weighted(&inp)
        } else {
            theory::det_iterations_plain(&inp)
        };
        match k {
            Ok(k) => {
                *out = k;
                GluonStatus::Ok
            }
            Err(e) => theory_status(e),
        }
    })
}

/// Iteration count under the linear-rate condition with constant `mu`.
///
/// # Safety
/// `l0` and `l1` must hold `p` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gluon_pl_iterations(
    delta0: f64,
    l0: *const f64,
    l1: *const f64,
    p: usize,
    epsilon: f64,
    mu: f64,
    l1_zero: bool,
    out: *mut u64,
) -> GluonStatus {
    guard(|| {
        out_ptr!(out, "out");
        let mut inp = tri!(rate_inputs(delta0, l0, l1, p, epsilon));
        inp.mu = Some(mu);
        match theory::pl_iterations(&inp, l1_zero) {
            Ok(k) => {
                *out = k;
                GluonStatus::Ok
            }
            Err(e) => theory_status(e),
        }
    })
}

/// Stochastic bound after `k` iterations. With `l1_zero`, `radii` must hold
/// `p` base radii; otherwise it may be null.
///
/// # Safety
/// `l0`, `l1` and a non-null `radii` must hold `p` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gluon_stoch_bound(
    k: u64,
    delta0: f64,
    l0: *const f64,
    l1: *const f64,
    p: usize,
    sigma: f64,
    radii: *const f64,
    l1_zero: bool,
    out: *mut f64,
) -> GluonStatus {
    guard(|| {
        out_ptr!(out, "out");
        let mut inp = tri!(rate_inputs(delta0, l0, l1, p, 1.0));
        inp.sigma = sigma;
        if !radii.is_null() {
            inp.radii = Some(tri!(slice_arg(radii, p, "radii")).to_vec());
        }
        match theory::stoch_bound(k, &inp, l1_zero) {
            Ok(b) => {
                *out = b;
                GluonStatus::Ok
            }
            Err(e) => theory_status(e),
        }
    })
}

/// Fits `(L0, L1)` to `n` trajectory-smoothness samples.
///
/// # Safety
/// `l_hat` and `g` must hold `n` doubles; `l0_out` and `l1_out` writable.
#[no_mangle]
pub unsafe extern "C" fn gluon_fit_constants(
    l_hat: *const f64,
    g: *const f64,
    n: usize,
    lambda: f64,
    l0_out: *mut f64,
    l1_out: *mut f64,
) -> GluonStatus {
    guard(|| {
        out_ptr!(l0_out, "l0_out");
        out_ptr!(l1_out, "l1_out");
        let l_hat = tri!(slice_arg(l_hat, n, "l_hat"));
        let g = tri!(slice_arg(g, n, "g"));
        match fit_constants(l_hat, g, lambda) {
            Ok(fit) => {
                *l0_out = fit.l0;
                *l1_out = fit.l1;
                GluonStatus::Ok
            }
            Err(e) => set_error(GluonStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Stepsize `g / (L0 + L1 g)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gluon_suggest_stepsize(l0: f64, l1: f64, g: f64, out: *mut f64) -> GluonStatus {
    guard(|| {
        out_ptr!(out, "out");
        if !(l0 >= 0.0 && l1 >= 0.0) {
            return set_error(GluonStatus::InvalidArgument, "L0 and L1 must be nonnegative");
        }
        let fit = gluon::smoothness::SmoothnessFit {
            l0,
            l1,
            lambda: 0.0,
            mse_rel: None,
            n_points: 0,
            tie_broken: false,
        };
        match suggest_stepsize(&fit, g) {
            Ok(t) => {
                *out = t;
                GluonStatus::Ok
            }
            Err(e) => set_error(GluonStatus::InvalidArgument, e.to_string()),
        }
    })
}
