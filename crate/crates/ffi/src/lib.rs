//! C ABI over the `uktl` crate.
//!
//! Every fallible call returns a [`UktlStatus`]. On failure the message is
//! kept per thread and can be read with [`uktl_last_error`]. Handles are
//! opaque; free each one with its matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use uktl::kernel::{bases_of, tensor_kernel, Combine, KernelConfig};
use uktl::subspace::tensor_subspaces;
use uktl::tensor::{decode_tensor, encode_tensor, Tensor};
use uktl::UktlError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UktlStatus {
    Ok = 0,
    InvalidArgument = 1,
    DimensionMismatch = 2,
    Parse = 3,
    Io = 4,
    NotFitted = 5,
    Numerical = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UktlCombine {
    Sum = 0,
    Product = 1,
    SumProduct = 2,
}

impl From<UktlCombine> for Combine {
    fn from(c: UktlCombine) -> Self {
        match c {
            UktlCombine::Sum => Combine::Sum,
            UktlCombine::Product => Combine::Product,
            UktlCombine::SumProduct => Combine::SumProduct,
        }
    }
}

/// Opaque dense tensor.
pub struct UktlTensor(Tensor);

/// Opaque trained classifier loaded from a checkpoint.
pub struct UktlModel(uktl::model::UktlModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &UktlError) -> UktlStatus {
    match err {
        UktlError::DimensionMismatch(_) | UktlError::ModeOutOfRange { .. } => UktlStatus::DimensionMismatch,
        UktlError::InvalidArgument(_) | UktlError::Empty(_) | UktlError::UnknownLabel(_) => {
            UktlStatus::InvalidArgument
        }
        UktlError::Parse { .. } | UktlError::Json(_) => UktlStatus::Parse,
        UktlError::Io { .. } => UktlStatus::Io,
        UktlError::NotFitted(_) => UktlStatus::NotFitted,
        UktlError::NonFinite(_) | UktlError::Degenerate(_) | UktlError::Diverged { .. } => UktlStatus::Numerical,
    }
}

struct Fail(UktlStatus, String);

impl From<UktlError> for Fail {
    fn from(e: UktlError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(UktlStatus::InvalidArgument, msg.to_string())
}

/// Runs `f`, recording any error or panic for `uktl_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> UktlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            UktlStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("panic: {msg}"));
            UktlStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not valid UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    out.write(value);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn uktl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next `uktl_*` call on the same thread.
#[no_mangle]
pub extern "C" fn uktl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Frees a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn uktl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a tensor from `order` dims and `len` row-major values.
///
/// # Safety
/// `dims` must point to `order` readable values and `values` to `len`.
#[no_mangle]
pub unsafe extern "C" fn uktl_tensor_new(
    dims: *const usize,
    order: usize,
    values: *const f64,
    len: usize,
    out: *mut *mut UktlTensor,
) -> UktlStatus {
    guard(|| {
        let dims = slice(dims, order, "dims")?.to_vec();
        let values = slice(values, len, "values")?.to_vec();
        let t = Tensor::new(dims, values)?;
        write_out(out, Box::into_raw(Box::new(UktlTensor(t))), "out")
    })
}

/// # Safety
/// `t` must be NULL or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn uktl_tensor_free(t: *mut UktlTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Number of modes, or 0 for NULL.
///
/// # Safety
/// `t` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn uktl_tensor_order(t: *const UktlTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.order())
}

/// Number of stored values, or 0 for NULL.
///
/// # Safety
/// `t` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn uktl_tensor_len(t: *const UktlTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// Copies the dims into `out`, which must hold at least `cap` entries.
///
/// # Safety
/// `t` must be a live handle and `out` writable for `cap` entries.
#[no_mangle]
pub unsafe extern "C" fn uktl_tensor_dims(t: *const UktlTensor, out: *mut usize, cap: usize) -> UktlStatus {
    guard(|| {
        let t = borrow(t, "tensor")?;
        copy_into(t.0.dims(), out, cap)
    })
}

/// Copies the row-major values into `out`.
///
/// # Safety
/// `t` must be a live handle and `out` writable for `cap` entries.
#[no_mangle]
pub unsafe extern "C" fn uktl_tensor_values(t: *const UktlTensor, out: *mut f64, cap: usize) -> UktlStatus {
    guard(|| {
        let t = borrow(t, "tensor")?;
        copy_into(t.0.values(), out, cap)
    })
}

unsafe fn copy_into<T: Copy>(src: &[T], out: *mut T, cap: usize) -> Result<(), Fail> {
    if cap < src.len() {
        return Err(Fail(
            UktlStatus::DimensionMismatch,
            format!("buffer holds {cap} entries, {} needed", src.len()),
        ));
    }
    if src.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(invalid("output buffer is null"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

/// Parses a tensor from TNS text.
///
/// # Safety
/// `text` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn uktl_tensor_decode(text: *const c_char, out: *mut *mut UktlTensor) -> UktlStatus {
    guard(|| {
        let t = decode_tensor(c_str(text, "text")?)?;
        write_out(out, Box::into_raw(Box::new(UktlTensor(t))), "out")
    })
}

/// Serializes a tensor to TNS text. Free the result with `uktl_string_free`.
///
/// # Safety
/// `t` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn uktl_tensor_encode(t: *const UktlTensor, out: *mut *mut c_char) -> UktlStatus {
    guard(|| {
        let t = borrow(t, "tensor")?;
        let s = CString::new(encode_tensor(&t.0)).map_err(|_| invalid("encoded text contains NUL"))?;
        write_out(out, s.into_raw(), "out")
    })
}

/// # Safety
/// `t` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn uktl_tensor_frobenius_norm(t: *const UktlTensor, out: *mut f64) -> UktlStatus {
    guard(|| write_out(out, borrow(t, "tensor")?.0.frobenius_norm(), "out"))
}

/// Kernel value between two tensors of equal shape, using the leading `p`
/// left singular vectors of every unfolding and unit uncertainty.
///
/// # Safety
/// `a` and `b` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn uktl_tensor_kernel(
    a: *const UktlTensor,
    b: *const UktlTensor,
    p: usize,
    bandwidth: f64,
    mu: f64,
    combine: UktlCombine,
    out: *mut f64,
) -> UktlStatus {
    guard(|| {
        let (a, b) = (borrow(a, "a")?, borrow(b, "b")?);
        if a.0.dims() != b.0.dims() {
            return Err(Fail(UktlStatus::DimensionMismatch, "tensor shapes differ".into()));
        }
        let cfg = KernelConfig {
            bandwidth,
            mu,
            combine: combine.into(),
        };
        cfg.validate()?;
        let orders = vec![p; a.0.order()];
        let sa = bases_of(&tensor_subspaces(&a.0, &orders)?);
        let sb = bases_of(&tensor_subspaces(&b.0, &orders)?);
        write_out(out, tensor_kernel(&sa, &sb, &cfg)?, "out")
    })
}

/// Loads a model checkpoint from a JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn uktl_model_load(path: *const c_char, out: *mut *mut UktlModel) -> UktlStatus {
    guard(|| {
        let m = uktl::model::load_checkpoint(Path::new(c_str(path, "path")?))?;
        write_out(out, Box::into_raw(Box::new(UktlModel(m))), "out")
    })
}

/// Loads a model checkpoint from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn uktl_model_load_json(json: *const c_char, out: *mut *mut UktlModel) -> UktlStatus {
    guard(|| {
        let m = uktl::model::UktlModel::from_json(c_str(json, "json")?)?;
        write_out(out, Box::into_raw(Box::new(UktlModel(m))), "out")
    })
}

/// # Safety
/// `m` must be NULL or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn uktl_model_free(m: *mut UktlModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of classes, or 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn uktl_model_num_classes(m: *const UktlModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.num_classes())
}

/// Dataset label of class slot `index`.
///
/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn uktl_model_label(m: *const UktlModel, index: usize, out: *mut usize) -> UktlStatus {
    guard(|| {
        let m = borrow(m, "model")?;
        let label = *m
            .0
            .labels
            .get(index)
            .ok_or_else(|| invalid(&format!("class index {index} out of range")))?;
        write_out(out, label, "out")
    })
}

/// Writes one logit per class slot into `logits`.
///
/// # Safety
/// `m` and `t` must be live handles and `logits` writable for `cap` entries.
#[no_mangle]
pub unsafe extern "C" fn uktl_model_forward(
    m: *const UktlModel,
    t: *const UktlTensor,
    logits: *mut f64,
    cap: usize,
) -> UktlStatus {
    guard(|| {
        let (m, t) = (borrow(m, "model")?, borrow(t, "tensor")?);
        copy_into(&m.0.forward(&t.0)?, logits, cap)
    })
}

/// Predicted dataset label and its softmax probability.
///
/// # Safety
/// `m` and `t` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn uktl_model_predict(
    m: *const UktlModel,
    t: *const UktlTensor,
    label: *mut usize,
    confidence: *mut f64,
) -> UktlStatus {
    guard(|| {
        let (m, t) = (borrow(m, "model")?, borrow(t, "tensor")?);
        if label.is_null() {
            return Err(invalid("label is null"));
        }
        let pred = m.0.predict(std::slice::from_ref(&t.0))?[0];
        label.write(pred.label);
        if !confidence.is_null() {
            confidence.write(pred.confidence);
        }
        Ok(())
    })
}
