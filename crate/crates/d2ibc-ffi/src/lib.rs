//! C ABI for the d2ibc toolkit.
//!
//! All handles are opaque pointers created and destroyed by this library.
//! Every fallible call returns a `D2ibcStatus`; on any non-OK status the
//! message is retrievable with `d2ibc_last_error` (thread local).

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use libc::{c_char, size_t};

use d2ibc::nic::{rho_constants, NicController, SolverConfig};
use d2ibc::pipeline::{exit_code, run_pipeline, Artifacts, PipelineConfig};
use d2ibc::signals::{DataRecord, Regressor};
use d2ibc::sysid::{identify, predict, IdConfig, RegressionModel};
use d2ibc::vrft::{design_pid, PidController, ReferenceModel};
use d2ibc::Error;

/// Status codes; nonzero values match the CLI exit codes where applicable.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum D2ibcStatus {
    Ok = 0,
    ErrOther = 1,
    ErrConfig = 2,
    ErrData = 3,
    ErrAssumption = 4,
    ErrBound = 5,
    ErrNullArg = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|c| *c != '\0').collect();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::new(sanitized).unwrap());
}

fn fail(err: &Error) -> D2ibcStatus {
    set_error(&err.to_string());
    match exit_code(err) {
        2 => D2ibcStatus::ErrConfig,
        3 => D2ibcStatus::ErrData,
        4 => D2ibcStatus::ErrAssumption,
        5 => D2ibcStatus::ErrBound,
        _ => D2ibcStatus::ErrOther,
    }
}

fn null_arg(what: &str) -> D2ibcStatus {
    set_error(&format!("null argument: {what}"));
    D2ibcStatus::ErrNullArg
}

/// Copy the message for the most recent error on this thread into `buf`
/// (NUL-terminated, truncated to `cap`). Returns the full message length.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_last_error(buf: *mut c_char, cap: size_t) -> size_t {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static string; never freed by the caller.
#[no_mangle]
pub extern "C" fn d2ibc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, D2ibcStatus> {
    if s.is_null() {
        return Err(null_arg(what));
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        D2ibcStatus::ErrConfig
    })
}

fn out_json(json: String, out: *mut *mut c_char) -> D2ibcStatus {
    let cstr = CString::new(json).expect("serde_json output has no NUL bytes");
    unsafe { *out = cstr.into_raw() };
    D2ibcStatus::Ok
}

// ---------------------------------------------------------------------------
// Data records
// ---------------------------------------------------------------------------

/// Opaque handle to an input/output data record.
pub struct D2ibcRecord(DataRecord);

/// Build a record from parallel input/output arrays of length `len`.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_record_new(
    u: *const f64,
    y: *const f64,
    len: size_t,
    out: *mut *mut D2ibcRecord,
) -> D2ibcStatus {
    if u.is_null() || y.is_null() || out.is_null() {
        return null_arg("u/y/out");
    }
    let u = std::slice::from_raw_parts(u, len).to_vec();
    let y = std::slice::from_raw_parts(y, len).to_vec();
    match DataRecord::new(u, y) {
        Ok(record) => {
            *out = Box::into_raw(Box::new(D2ibcRecord(record)));
            D2ibcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Load a record from a `t,u,y` CSV file.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_record_load(
    path: *const c_char,
    out: *mut *mut D2ibcRecord,
) -> D2ibcStatus {
    if out.is_null() {
        return null_arg("out");
    }
    let path = match str_arg(path, "path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    match d2ibc::signals::load_record(Path::new(path)) {
        Ok(record) => {
            *out = Box::into_raw(Box::new(D2ibcRecord(record)));
            D2ibcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn d2ibc_record_len(record: *const D2ibcRecord) -> size_t {
    record.as_ref().map_or(0, |r| r.0.len())
}

#[no_mangle]
pub unsafe extern "C" fn d2ibc_record_free(record: *mut D2ibcRecord) {
    if !record.is_null() {
        drop(Box::from_raw(record));
    }
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

/// Opaque handle to a one-step regression model.
pub struct D2ibcModel(RegressionModel);

/// Identify a polynomial one-step model of order `n` and total degree
/// `degree` from a record. Set `affine_in_u` nonzero to restrict the model
/// to terms affine in the current input.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_model_identify(
    record: *const D2ibcRecord,
    n: size_t,
    degree: u32,
    ridge: f64,
    affine_in_u: i32,
    out: *mut *mut D2ibcModel,
) -> D2ibcStatus {
    let Some(record) = record.as_ref() else {
        return null_arg("record");
    };
    if out.is_null() {
        return null_arg("out");
    }
    let cfg = IdConfig {
        n,
        degree,
        ridge,
        affine_in_u: affine_in_u != 0,
    };
    match identify(&record.0, &cfg) {
        Ok(model) => {
            *out = Box::into_raw(Box::new(D2ibcModel(model)));
            D2ibcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn d2ibc_model_from_json(
    json: *const c_char,
    out: *mut *mut D2ibcModel,
) -> D2ibcStatus {
    if out.is_null() {
        return null_arg("out");
    }
    let json = match str_arg(json, "json") {
        Ok(s) => s,
        Err(status) => return status,
    };
    match RegressionModel::from_json(json) {
        Ok(model) => {
            *out = Box::into_raw(Box::new(D2ibcModel(model)));
            D2ibcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Serialize the model; free the result with `d2ibc_string_free`.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_model_to_json(
    model: *const D2ibcModel,
    out: *mut *mut c_char,
) -> D2ibcStatus {
    let Some(model) = model.as_ref() else {
        return null_arg("model");
    };
    if out.is_null() {
        return null_arg("out");
    }
    match model.0.to_json() {
        Ok(json) => out_json(json, out),
        Err(e) => fail(&e),
    }
}

/// One-step prediction. `q` holds the regressor entries
/// (y_t..y_{t-n+1}, u_{t-1}..u_{t-n+1}), so `q_len` must be `2n - 1`.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_model_predict(
    model: *const D2ibcModel,
    q: *const f64,
    q_len: size_t,
    u: f64,
    y_next: *mut f64,
) -> D2ibcStatus {
    let Some(model) = model.as_ref() else {
        return null_arg("model");
    };
    if q.is_null() || y_next.is_null() {
        return null_arg("q/y_next");
    }
    let entries = std::slice::from_raw_parts(q, q_len).to_vec();
    let q = match Regressor::from_parts(entries, model.0.n) {
        Ok(q) => q,
        Err(e) => return fail(&e),
    };
    match predict(&model.0, &q, u) {
        Ok(y) => {
            *y_next = y;
            D2ibcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn d2ibc_model_free(model: *mut D2ibcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---------------------------------------------------------------------------
// Inversion controller
// ---------------------------------------------------------------------------

/// Opaque handle to the nonlinear inversion controller.
pub struct D2ibcNic(NicController);

/// Build the inversion controller from a model and the record that sets the
/// normalization constants. Inputs are clipped into `[u_min, u_max]`.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_nic_new(
    model: *const D2ibcModel,
    record: *const D2ibcRecord,
    mu: f64,
    u_min: f64,
    u_max: f64,
    out: *mut *mut D2ibcNic,
) -> D2ibcStatus {
    let Some(model) = model.as_ref() else {
        return null_arg("model");
    };
    let Some(record) = record.as_ref() else {
        return null_arg("record");
    };
    if out.is_null() {
        return null_arg("out");
    }
    let (rho_y, rho_u) = match rho_constants(&record.0) {
        Ok(pair) => pair,
        Err(e) => return fail(&e),
    };
    match NicController::new(
        model.0.clone(),
        mu,
        rho_y,
        rho_u,
        u_min,
        u_max,
        SolverConfig::default(),
    ) {
        Ok(nic) => {
            *out = Box::into_raw(Box::new(D2ibcNic(nic)));
            D2ibcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Solve the one-step command problem for regressor `q` (length `2n - 1`)
/// and next reference sample `r_next`.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_nic_solve(
    nic: *const D2ibcNic,
    q: *const f64,
    q_len: size_t,
    r_next: f64,
    u_out: *mut f64,
) -> D2ibcStatus {
    let Some(nic) = nic.as_ref() else {
        return null_arg("nic");
    };
    if q.is_null() || u_out.is_null() {
        return null_arg("q/u_out");
    }
    let entries = std::slice::from_raw_parts(q, q_len).to_vec();
    let q = match Regressor::from_parts(entries, nic.0.model.n) {
        Ok(q) => q,
        Err(e) => return fail(&e),
    };
    match nic.0.solve(&q, r_next) {
        Ok(u) => {
            *u_out = u;
            D2ibcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Serialize the controller; free the result with `d2ibc_string_free`.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_nic_to_json(
    nic: *const D2ibcNic,
    out: *mut *mut c_char,
) -> D2ibcStatus {
    let Some(nic) = nic.as_ref() else {
        return null_arg("nic");
    };
    if out.is_null() {
        return null_arg("out");
    }
    match nic.0.to_json() {
        Ok(json) => out_json(json, out),
        Err(e) => fail(&e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn d2ibc_nic_free(nic: *mut D2ibcNic) {
    if !nic.is_null() {
        drop(Box::from_raw(nic));
    }
}

// ---------------------------------------------------------------------------
// PID controller and VRFT design
// ---------------------------------------------------------------------------

/// Opaque handle to the extended PID controller (stateful).
pub struct D2ibcPid(PidController);

#[no_mangle]
pub unsafe extern "C" fn d2ibc_pid_new(
    theta: *const f64,
    theta_len: size_t,
    out: *mut *mut D2ibcPid,
) -> D2ibcStatus {
    if theta.is_null() || out.is_null() {
        return null_arg("theta/out");
    }
    let theta = std::slice::from_raw_parts(theta, theta_len).to_vec();
    match PidController::new(theta) {
        Ok(pid) => {
            *out = Box::into_raw(Box::new(D2ibcPid(pid)));
            D2ibcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Advance the controller one step with tracking error `e` and return the
/// accumulated command.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_pid_step(
    pid: *mut D2ibcPid,
    e: f64,
    u_out: *mut f64,
) -> D2ibcStatus {
    let Some(pid) = pid.as_mut() else {
        return null_arg("pid");
    };
    if u_out.is_null() {
        return null_arg("u_out");
    }
    match pid.0.step(e) {
        Ok(u) => {
            *u_out = u;
            D2ibcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn d2ibc_pid_reset(pid: *mut D2ibcPid) {
    if let Some(pid) = pid.as_mut() {
        pid.0.reset();
    }
}

#[no_mangle]
pub unsafe extern "C" fn d2ibc_pid_free(pid: *mut D2ibcPid) {
    if !pid.is_null() {
        drop(Box::from_raw(pid));
    }
}

/// Virtual-reference design of the PID on a record, against a first-order
/// reference model with pole `lambda`. A controller of order `order` has
/// `order + 1` parameters, so `theta_cap` must be at least `order + 1`;
/// exactly that many are written on success, plus the squared fit residual.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_design_pid(
    record: *const D2ibcRecord,
    nic: *const D2ibcNic,
    lambda: f64,
    order: size_t,
    theta_out: *mut f64,
    theta_cap: size_t,
    residual_out: *mut f64,
) -> D2ibcStatus {
    let Some(record) = record.as_ref() else {
        return null_arg("record");
    };
    let Some(nic) = nic.as_ref() else {
        return null_arg("nic");
    };
    if theta_out.is_null() || residual_out.is_null() {
        return null_arg("theta_out/residual_out");
    }
    if theta_cap < order + 1 {
        set_error(&format!(
            "theta_cap {theta_cap} < parameter count {}",
            order + 1
        ));
        return D2ibcStatus::ErrConfig;
    }
    let reference = match ReferenceModel::first_order(lambda) {
        Ok(m) => m,
        Err(e) => return fail(&e),
    };
    match design_pid(&record.0, &nic.0, &reference, order) {
        Ok((result, _)) => {
            ptr::copy_nonoverlapping(result.theta.as_ptr(), theta_out, result.theta.len());
            *residual_out = result.residual;
            D2ibcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Run the full pipeline: parse the TOML config text and write every
/// artifact into `out_dir`. Pass NULL config for the built-in demo setup.
#[no_mangle]
pub unsafe extern "C" fn d2ibc_run_pipeline(
    config_toml: *const c_char,
    out_dir: *const c_char,
) -> D2ibcStatus {
    let out_dir = match str_arg(out_dir, "out_dir") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let cfg = if config_toml.is_null() {
        PipelineConfig::demo()
    } else {
        let text = match str_arg(config_toml, "config_toml") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let cfg: PipelineConfig = match toml::from_str(text) {
            Ok(cfg) => cfg,
            Err(e) => {
                set_error(&format!("invalid config: {e}"));
                return D2ibcStatus::ErrConfig;
            }
        };
        if let Err(e) = cfg.validate() {
            return fail(&e);
        }
        cfg
    };
    match run_pipeline(&cfg, &Artifacts::new(out_dir)) {
        Ok(_) => D2ibcStatus::Ok,
        Err(e) => fail(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn status_of<F: FnOnce() -> D2ibcStatus>(f: F) -> D2ibcStatus {
        f()
    }

    fn last_error_string() -> String {
        let mut buf = vec![0i8; 256];
        let n = unsafe { d2ibc_last_error(buf.as_mut_ptr().cast(), buf.len()) };
        let bytes: Vec<u8> = buf[..n.min(buf.len() - 1)]
            .iter()
            .map(|&c| c as u8)
            .collect();
        String::from_utf8(bytes).unwrap()
    }

    fn demo_record() -> *mut D2ibcRecord {
        // y+ = 0.5 y + u driven by an alternating input.
        let len = 60usize;
        let mut u = Vec::with_capacity(len);
        let mut y = vec![0.0f64];
        for k in 0..len {
            let uk = if k % 2 == 0 { 1.0 } else { -0.7 };
            u.push(uk);
            if k + 1 < len {
                let last = *y.last().unwrap();
                y.push(0.5 * last + uk);
            }
        }
        let mut handle = ptr::null_mut();
        let status = unsafe { d2ibc_record_new(u.as_ptr(), y.as_ptr(), len, &mut handle) };
        assert_eq!(status, D2ibcStatus::Ok);
        handle
    }

    #[test]
    fn record_round_trip_and_len() {
        let record = demo_record();
        assert_eq!(unsafe { d2ibc_record_len(record) }, 60);
        unsafe { d2ibc_record_free(record) };
    }

    #[test]
    fn null_arguments_are_rejected_with_message() {
        let status = status_of(|| unsafe {
            d2ibc_record_new(ptr::null(), ptr::null(), 3, ptr::null_mut())
        });
        assert_eq!(status, D2ibcStatus::ErrNullArg);
        assert!(last_error_string().contains("null argument"));
    }

    #[test]
    fn identify_predict_solve_design_chain() {
        let record = demo_record();
        let mut model = ptr::null_mut();
        let status = unsafe { d2ibc_model_identify(record, 1, 1, 0.0, 1, &mut model) };
        assert_eq!(status, D2ibcStatus::Ok);

        // The identified model reproduces the linear plant.
        let q = [0.8f64];
        let mut y_next = 0.0;
        let status = unsafe { d2ibc_model_predict(model, q.as_ptr(), 1, 0.3, &mut y_next) };
        assert_eq!(status, D2ibcStatus::Ok);
        assert!((y_next - (0.5 * 0.8 + 0.3)).abs() < 1e-8, "{y_next}");

        let mut nic = ptr::null_mut();
        let status = unsafe { d2ibc_nic_new(model, record, 0.0, -5.0, 5.0, &mut nic) };
        assert_eq!(status, D2ibcStatus::Ok);

        // Exact inversion: from y = 0.8, reaching r = 1.0 needs u = 0.6.
        let mut u = 0.0;
        let status = unsafe { d2ibc_nic_solve(nic, q.as_ptr(), 1, 1.0, &mut u) };
        assert_eq!(status, D2ibcStatus::Ok);
        assert!((u - 0.6).abs() < 1e-9, "{u}");

        let mut theta = [0.0f64; 3];
        let mut residual = -1.0;
        let status = unsafe {
            d2ibc_design_pid(record, nic, 0.6, 2, theta.as_mut_ptr(), 3, &mut residual)
        };
        assert_eq!(status, D2ibcStatus::Ok);
        assert!(residual >= 0.0);
        assert!(theta.iter().all(|t| t.is_finite()));

        unsafe {
            d2ibc_nic_free(nic);
            d2ibc_model_free(model);
            d2ibc_record_free(record);
        }
    }

    #[test]
    fn model_json_round_trip_via_ffi() {
        let record = demo_record();
        let mut model = ptr::null_mut();
        unsafe { d2ibc_model_identify(record, 1, 1, 0.0, 1, &mut model) };
        let mut json = ptr::null_mut();
        assert_eq!(
            unsafe { d2ibc_model_to_json(model, &mut json) },
            D2ibcStatus::Ok
        );
        let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
        let mut back = ptr::null_mut();
        let c_text = CString::new(text).unwrap();
        assert_eq!(
            unsafe { d2ibc_model_from_json(c_text.as_ptr(), &mut back) },
            D2ibcStatus::Ok
        );
        unsafe {
            d2ibc_string_free(json);
            d2ibc_model_free(back);
            d2ibc_model_free(model);
            d2ibc_record_free(record);
        }
    }

    #[test]
    fn pid_step_matches_recursion() {
        let theta = [0.4f64, 0.2];
        let mut pid = ptr::null_mut();
        assert_eq!(
            unsafe { d2ibc_pid_new(theta.as_ptr(), 2, &mut pid) },
            D2ibcStatus::Ok
        );
        let mut u = 0.0;
        unsafe { d2ibc_pid_step(pid, 1.0, &mut u) };
        assert!((u - 0.4).abs() < 1e-15);
        unsafe { d2ibc_pid_step(pid, 0.5, &mut u) };
        // u = 0.4 + 0.4*0.5 + 0.2*1.0
        assert!((u - 0.8).abs() < 1e-15, "{u}");
        unsafe { d2ibc_pid_reset(pid) };
        unsafe { d2ibc_pid_step(pid, 1.0, &mut u) };
        assert!((u - 0.4).abs() < 1e-15);
        unsafe { d2ibc_pid_free(pid) };
    }

    #[test]
    fn pipeline_runs_from_ffi_and_reports_bad_config() {
        let dir = tempfile::tempdir().unwrap();
        let out = CString::new(dir.path().to_str().unwrap()).unwrap();
        assert_eq!(
            unsafe { d2ibc_run_pipeline(ptr::null(), out.as_ptr()) },
            D2ibcStatus::Ok
        );
        assert!(dir.path().join("report.json").exists());

        let bad = CString::new("definitely not toml [").unwrap();
        assert_eq!(
            unsafe { d2ibc_run_pipeline(bad.as_ptr(), out.as_ptr()) },
            D2ibcStatus::ErrConfig
        );
        assert!(last_error_string().contains("invalid config"));
    }

    #[test]
    fn version_is_nul_terminated_semver() {
        let v = unsafe { CStr::from_ptr(d2ibc_version()) }.to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}
