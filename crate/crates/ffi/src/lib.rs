//! C ABI over the `exmvit` crate.
//!
//! Every fallible function returns an `ExmvitStatus`; on failure the message
//! is available from [`exmvit_last_error`] on the same thread. Models are
//! opaque handles released with [`exmvit_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use exmvit::audit;
use exmvit::config::{self, Overrides};
use exmvit::io::weights;
use exmvit::{Error, ModelGraph, Tensor};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExmvitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownVariant = 3,
    Config = 4,
    Io = 5,
    Parse = 6,
    WeightsMismatch = 7,
    Shape = 8,
    /// A panic was caught at the boundary.
    Internal = 99,
}

/// Opaque model handle.
pub struct ExmvitModel {
    inner: ModelGraph,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExmvitModelInfo {
    pub input_size: usize,
    pub class_count: usize,
    pub classifier_width: usize,
    pub parameter_count: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExmvitAuditTotals {
    pub strict_total: usize,
    pub paper_convention_total: usize,
    pub baseline_total: usize,
    pub classifier_width: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> ExmvitStatus {
    match e {
        Error::UnknownVariant { .. } => ExmvitStatus::UnknownVariant,
        Error::Config(_) => ExmvitStatus::Config,
        Error::Io { .. } => ExmvitStatus::Io,
        Error::Parse { .. } | Error::Json(_) => ExmvitStatus::Parse,
        Error::WeightsMismatch(_) => ExmvitStatus::WeightsMismatch,
        Error::Shape { .. } => ExmvitStatus::Shape,
        _ => ExmvitStatus::InvalidArgument,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ExmvitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ExmvitStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            ExmvitStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            ExmvitStatus::Internal
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(Error::InvalidArgument(format!("{what} is not UTF-8"))))
}

unsafe fn model_ref<'a>(p: *const ExmvitModel) -> Result<&'a ModelGraph, Failure> {
    p.as_ref().map(|m| &m.inner).ok_or(Failure::Null("model"))
}

fn publish(out: *mut *mut ExmvitModel, model: ModelGraph) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    let handle = Box::into_raw(Box::new(ExmvitModel { inner: model }));
    unsafe { *out = handle };
    Ok(())
}

/// Message of the last failure on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn exmvit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn exmvit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a registered variant with parameters drawn from `seed`.
///
/// # Safety
/// `variant` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn exmvit_model_build(variant: *const c_char, seed: u64, out: *mut *mut ExmvitModel) -> ExmvitStatus {
    guard(|| {
        let name = c_str(variant, "variant")?;
        let cfg = config::resolve_variant(name, &Overrides::default())?;
        let model = if name.starts_with("mobilevit-s") {
            ModelGraph::build_baseline(&cfg, Some(seed))?
        } else {
            ModelGraph::build(&cfg, seed)?
        };
        publish(out, model)
    })
}

/// Loads a weights file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn exmvit_model_load(path: *const c_char, out: *mut *mut ExmvitModel) -> ExmvitStatus {
    guard(|| {
        let path = PathBuf::from(c_str(path, "path")?);
        publish(out, weights::load(path)?)
    })
}

/// Writes a weights file.
///
/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn exmvit_model_save(model: *const ExmvitModel, path: *const c_char) -> ExmvitStatus {
    guard(|| {
        let m = model_ref(model)?;
        weights::save(m, c_str(path, "path")?)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn exmvit_model_free(model: *mut ExmvitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library and `info` be writable.
#[no_mangle]
pub unsafe extern "C" fn exmvit_model_info(model: *const ExmvitModel, info: *mut ExmvitModelInfo) -> ExmvitStatus {
    guard(|| {
        let m = model_ref(model)?;
        let info = info.as_mut().ok_or(Failure::Null("info"))?;
        *info = ExmvitModelInfo {
            input_size: m.config().input_size,
            class_count: m.config().class_count,
            classifier_width: m.classifier_width(),
            parameter_count: m.params().parameter_count(),
        };
        Ok(())
    })
}

/// Eval-mode forward pass on one `3 × S × S` channel-major image, where
/// `S` is the model's input size. Writes `class_count` logits.
///
/// # Safety
/// `image` must hold `image_len` floats and `logits` room for `logits_len`.
#[no_mangle]
pub unsafe extern "C" fn exmvit_infer(
    model: *const ExmvitModel,
    image: *const f32,
    image_len: usize,
    logits: *mut f32,
    logits_len: usize,
) -> ExmvitStatus {
    guard(|| {
        let m = model_ref(model)?;
        if image.is_null() {
            return Err(Failure::Null("image"));
        }
        if logits.is_null() {
            return Err(Failure::Null("logits"));
        }
        let s = m.config().input_size;
        let classes = m.config().class_count;
        if image_len != 3 * s * s {
            return Err(Error::InvalidArgument(format!("image has {image_len} floats, expected {}", 3 * s * s)).into());
        }
        if logits_len < classes {
            return Err(Error::InvalidArgument(format!("logits buffer holds {logits_len}, need {classes}")).into());
        }
        let data = std::slice::from_raw_parts(image, image_len).to_vec();
        let out = m.infer(&Tensor::new(vec![1, 3, s, s], data)?)?;
        std::slice::from_raw_parts_mut(logits, classes).copy_from_slice(out.logits.data());
        Ok(())
    })
}

/// Parameter totals of a registered variant.
///
/// # Safety
/// `variant` must be NUL-terminated and `totals` writable.
#[no_mangle]
pub unsafe extern "C" fn exmvit_audit(variant: *const c_char, totals: *mut ExmvitAuditTotals) -> ExmvitStatus {
    guard(|| {
        let name = c_str(variant, "variant")?;
        let totals = totals.as_mut().ok_or(Failure::Null("totals"))?;
        let cfg = config::resolve_variant(name, &Overrides::default())?;
        let model = if name.starts_with("mobilevit-s") {
            ModelGraph::build_baseline(&cfg, None)?
        } else {
            ModelGraph::structure(&cfg)?
        };
        let r = audit::count_params(&model)?;
        *totals = ExmvitAuditTotals {
            strict_total: r.strict_total,
            paper_convention_total: r.paper_convention_total,
            baseline_total: r.baseline_total,
            classifier_width: r.classifier_width,
        };
        Ok(())
    })
}
