//! C ABI over the `fecim` simulator.
//!
//! Parameter sets and calibrated rows are opaque handles created and freed
//! through this interface. Every fallible call returns a [`FecimStatus`];
//! on failure a message is kept per thread and can be copied out with
//! [`fecim_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fecim::analysis::SweepSpec;
use fecim::array::{self, envelope, nmr, RowConfig};
use fecim::device::Temperature;
use fecim::error::Error;
use fecim::params::Params;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FecimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Solver = 3,
    CalibrationFailed = 4,
    Io = 5,
    Format = 6,
    Panic = 7,
}

/// Opaque parameter set.
pub struct FecimParams(Params);

/// Opaque row with decode thresholds placed over a temperature grid.
pub struct FecimRow(RowConfig);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FecimCellOutput {
    /// Output node voltage after the read (V).
    pub v_o: f64,
    /// Energy drawn from the supply (J).
    pub energy: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FecimMacResult {
    pub v_acc: f64,
    pub decoded: usize,
    pub energy: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FecimNmr {
    pub nmr_min: f64,
    pub argmin: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> FecimStatus {
    match e {
        Error::Io { .. } => FecimStatus::Io,
        Error::Format { .. } => FecimStatus::Format,
        Error::CalibrationFailed { .. } => FecimStatus::CalibrationFailed,
        e if e.is_solver_failure() => FecimStatus::Solver,
        _ => FecimStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), FecimStatus>) -> FecimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FecimStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            FecimStatus::Panic
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, FecimStatus>;
}

impl<T> OrStatus<T> for fecim::error::Result<T> {
    fn or_status(self) -> Result<T, FecimStatus> {
        self.map_err(|e| {
            set_error(e.to_string());
            status_of(&e)
        })
    }
}

fn null(what: &str) -> FecimStatus {
    set_error(format!("null pointer: {what}"));
    FecimStatus::NullPointer
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, FecimStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        FecimStatus::InvalidArgument
    })
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, FecimStatus> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], FecimStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn temp(celsius: f64) -> Result<Temperature, FecimStatus> {
    Temperature::from_celsius(celsius).or_status()
}

fn grid(t_min: f64, t_max: f64, t_step: f64) -> Result<Vec<Temperature>, FecimStatus> {
    SweepSpec::new(t_min, t_max, t_step).and_then(|s| s.grid()).or_status()
}

fn emit_params(p: Params, out: *mut *mut FecimParams) -> Result<(), FecimStatus> {
    let out = unsafe { out_arg(out, "out")? };
    *out = Box::into_raw(Box::new(FecimParams(p)));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fecim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (always
/// NUL-terminated when `len > 0`) and returns its full length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fecim_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Built-in calibrated parameter set.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fecim_params_default(out: *mut *mut FecimParams) -> FecimStatus {
    guard(|| emit_params(Params::default(), out))
}

/// Parameter document (TOML text) layered over the defaults.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fecim_params_parse(text: *const c_char, out: *mut *mut FecimParams) -> FecimStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        emit_params(Params::parse(text).or_status()?, out)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fecim_params_load(path: *const c_char, out: *mut *mut FecimParams) -> FecimStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        emit_params(Params::load(Path::new(path)).or_status()?, out)
    })
}

/// # Safety
/// `params` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fecim_params_free(params: *mut FecimParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// # Safety
/// `params` must be a live handle, `key` a NUL-terminated string, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn fecim_params_get(
    params: *const FecimParams,
    key: *const c_char,
    out: *mut f64,
) -> FecimStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        let key = str_arg(key, "key")?;
        *out_arg(out, "out")? = p.0.get(key).or_status()?;
        Ok(())
    })
}

/// Sets one key. The handle is left unchanged if the result fails validation.
///
/// # Safety
/// `params` must be a live handle and `key` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fecim_params_set(params: *mut FecimParams, key: *const c_char, value: f64) -> FecimStatus {
    guard(|| {
        let p = params.as_mut().ok_or_else(|| null("params"))?;
        let key = str_arg(key, "key")?;
        let mut next = p.0;
        next.set(key, value).or_status()?;
        next.validate().or_status()?;
        p.0 = next;
        Ok(())
    })
}

/// One cell multiplication at `temp_c`.
///
/// # Safety
/// `params` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn fecim_multiply(
    params: *const FecimParams,
    input: bool,
    stored: bool,
    temp_c: f64,
    vth_offset: f64,
    out: *mut FecimCellOutput,
) -> FecimStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        let o = array::multiply(&p.0, input, stored, temp(temp_c)?, vth_offset).or_status()?;
        *out_arg(out, "out")? = FecimCellOutput {
            v_o: o.v_o,
            energy: o.energy,
        };
        Ok(())
    })
}

/// Charge sharing of `n` output capacitors onto the accumulation capacitor.
///
/// # Safety
/// `per_cell_vo` must point to `n` doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn fecim_charge_share(
    per_cell_vo: *const f64,
    n: usize,
    c_o: f64,
    c_acc: f64,
    out: *mut f64,
) -> FecimStatus {
    guard(|| {
        let vo = slice_arg(per_cell_vo, n, "per_cell_vo")?;
        if !(c_o > 0.0 && c_acc >= 0.0) {
            set_error("c_o must be > 0 and c_acc >= 0");
            return Err(FecimStatus::InvalidArgument);
        }
        *out_arg(out, "out")? = array::charge_share(vo, c_o, c_acc);
        Ok(())
    })
}

/// Row whose decode thresholds are placed over `[t_min, t_max]` in steps
/// of `t_step` (°C). The parameter handle is copied.
///
/// # Safety
/// `params` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn fecim_row_new(
    params: *const FecimParams,
    t_min: f64,
    t_max: f64,
    t_step: f64,
    out: *mut *mut FecimRow,
) -> FecimStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        let out = out_arg(out, "out")?;
        let cfg = RowConfig::calibrated(p.0, &grid(t_min, t_max, t_step)?).or_status()?;
        *out = Box::into_raw(Box::new(FecimRow(cfg)));
        Ok(())
    })
}

/// # Safety
/// `row` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fecim_row_free(row: *mut FecimRow) {
    if !row.is_null() {
        drop(Box::from_raw(row));
    }
}

/// Number of cells in the row.
///
/// # Safety
/// `row` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fecim_row_cells(row: *const FecimRow) -> usize {
    row.as_ref().map_or(0, |r| r.0.n_cells())
}

/// Decode threshold `index` (V); `index < cells`.
///
/// # Safety
/// `row` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn fecim_row_threshold(row: *const FecimRow, index: usize, out: *mut f64) -> FecimStatus {
    guard(|| {
        let r = row.as_ref().ok_or_else(|| null("row"))?;
        let th = r.0.decode_thresholds.get(index).ok_or_else(|| {
            set_error(format!("threshold index {index} out of range"));
            FecimStatus::InvalidArgument
        })?;
        *out_arg(out, "out")? = *th;
        Ok(())
    })
}

/// One in-memory MAC. `inputs` and `weights` hold `len` bytes of 0 or 1;
/// `vth_offsets` may be null for a nominal row.
///
/// # Safety
/// Pointers must reference `len` elements and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn fecim_row_mac(
    row: *const FecimRow,
    inputs: *const u8,
    weights: *const u8,
    vth_offsets: *const f64,
    len: usize,
    temp_c: f64,
    out: *mut FecimMacResult,
) -> FecimStatus {
    guard(|| {
        let r = row.as_ref().ok_or_else(|| null("row"))?;
        let bits = |p: *const u8, what: &str| -> Result<Vec<bool>, FecimStatus> {
            let s = slice_arg(p, len, what)?;
            s.iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    _ => {
                        set_error(format!("{what} must hold 0 or 1"));
                        Err(FecimStatus::InvalidArgument)
                    }
                })
                .collect()
        };
        let x = bits(inputs, "inputs")?;
        let w = bits(weights, "weights")?;
        let offsets = if vth_offsets.is_null() {
            vec![0.0; len]
        } else {
            slice_arg(vth_offsets, len, "vth_offsets")?.to_vec()
        };
        let m = array::mac_row(&x, &w, temp(temp_c)?, &r.0, &offsets).or_status()?;
        *out_arg(out, "out")? = FecimMacResult {
            v_acc: m.v_acc,
            decoded: m.decoded,
            energy: m.energy,
        };
        Ok(())
    })
}

/// Minimum noise-margin rate of the row envelope over a temperature grid.
///
/// # Safety
/// `row` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn fecim_row_nmr(
    row: *const FecimRow,
    t_min: f64,
    t_max: f64,
    t_step: f64,
    out: *mut FecimNmr,
) -> FecimStatus {
    guard(|| {
        let r = row.as_ref().ok_or_else(|| null("row"))?;
        let env = envelope(&r.0, &grid(t_min, t_max, t_step)?).or_status()?;
        let rep = nmr(&env).or_status()?;
        *out_arg(out, "out")? = FecimNmr {
            nmr_min: rep.nmr_min,
            argmin: rep.argmin,
        };
        Ok(())
    })
}
