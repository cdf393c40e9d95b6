//! C ABI over seulab.
//!
//! Every fallible function returns a [`SeuStatus`]; on failure the message
//! is kept per thread and read with [`seu_last_error_message`]. Handles are
//! opaque and released with their `_free` function. Strings and buffers
//! returned by the library are released with [`seu_string_free`] and
//! [`seu_buffer_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use seulab::campaign::{run_campaign, CampaignError, RunOptions};
use seulab::checkpoint::{bit_statistics, CheckpointError, CheckpointStore, CheckpointView};
use seulab::config::{parse_config, ConfigError};
use seulab::half16::{decode_half, encode_half, flip_bit, BitPosition, Half16};
use seulab::injector::InjectionError;
use seulab::metrics::{clip_like_score, MetricError};
use seulab::selector::{NamingScheme, TensorSelector, UnetTopology};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeuStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    MalformedHeader = 3,
    RangeError = 4,
    DtypeError = 5,
    UnknownTensor = 6,
    IndexError = 7,
    UnknownTarget = 8,
    RecordMismatch = 9,
    ZeroNorm = 10,
    ConfigError = 11,
    RuntimeError = 12,
    Panic = 13,
}

/// Parsed checkpoint. Immutable; shared by every view created from it.
pub struct SeuCheckpoint {
    store: Arc<CheckpointStore>,
}

/// Copy-on-write view over a checkpoint.
pub struct SeuView {
    view: CheckpointView,
}

/// Byte buffer owned by the library.
#[repr(C)]
pub struct SeuBuffer {
    pub data: *mut u8,
    pub len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: SeuStatus, msg: impl Into<String>) -> SeuStatus {
    set_error(msg);
    status
}

fn checkpoint_status(e: &CheckpointError) -> SeuStatus {
    match e {
        CheckpointError::MalformedHeader(_) | CheckpointError::DuplicateName(_) => SeuStatus::MalformedHeader,
        CheckpointError::RangeError(_) => SeuStatus::RangeError,
        CheckpointError::DtypeError { .. } => SeuStatus::DtypeError,
        CheckpointError::UnknownTensor(_) => SeuStatus::UnknownTensor,
        CheckpointError::IndexError { .. } => SeuStatus::IndexError,
        CheckpointError::UnknownTarget(_) => SeuStatus::UnknownTarget,
    }
}

fn from_checkpoint(e: CheckpointError) -> SeuStatus {
    fail(checkpoint_status(&e), e.to_string())
}

/// Runs `f`, turning panics into `SeuStatus::Panic`.
fn guard(f: impl FnOnce() -> SeuStatus) -> SeuStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == SeuStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            s
        }
        Err(_) => fail(SeuStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, SeuStatus> {
    if p.is_null() {
        return Err(fail(SeuStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SeuStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn into_c_string(s: String, out: *mut *mut c_char) -> SeuStatus {
    match CString::new(s) {
        Ok(c) => {
            // SAFETY: callers check `out` for null before calling.
            unsafe { *out = c.into_raw() };
            SeuStatus::Ok
        }
        Err(_) => fail(SeuStatus::RuntimeError, "string contains NUL"),
    }
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(SeuStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn seu_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn seu_half_decode(bits: u16) -> f64 {
    decode_half(Half16(bits))
}

/// Round-to-nearest-even binary16 encoding.
#[no_mangle]
pub extern "C" fn seu_half_encode(value: f64) -> u16 {
    encode_half(value).0
}

/// # Safety
/// `out` must be a valid pointer to a `uint16_t`.
#[no_mangle]
pub unsafe extern "C" fn seu_half_flip_bit(bits: u16, bit: u32, out: *mut u16) -> SeuStatus {
    guard(|| {
        non_null!(out);
        let p = try_status!(BitPosition::new(bit).map_err(|e| fail(SeuStatus::InvalidArgument, e.to_string())));
        *out = flip_bit(Half16(bits), p).0;
        SeuStatus::Ok
    })
}

/// Parses a checkpoint container. The bytes are copied.
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn seu_checkpoint_parse(bytes: *const u8, len: usize, out: *mut *mut SeuCheckpoint) -> SeuStatus {
    guard(|| {
        non_null!(bytes, out);
        let data = std::slice::from_raw_parts(bytes, len);
        let store = try_status!(CheckpointStore::parse(data).map_err(from_checkpoint));
        *out = Box::into_raw(Box::new(SeuCheckpoint { store: Arc::new(store) }));
        SeuStatus::Ok
    })
}

/// # Safety
/// `ckpt` must be NULL or a handle from [`seu_checkpoint_parse`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn seu_checkpoint_free(ckpt: *mut SeuCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// # Safety
/// `ckpt` must be a live handle, `name` a NUL-terminated string and `out`
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn seu_checkpoint_element_count(
    ckpt: *const SeuCheckpoint,
    name: *const c_char,
    out: *mut usize,
) -> SeuStatus {
    guard(|| {
        non_null!(ckpt, out);
        let name = try_status!(str_arg(name, "name"));
        let entry = try_status!((*ckpt).store.entry(name).map_err(from_checkpoint));
        *out = entry.element_count();
        SeuStatus::Ok
    })
}

/// Fraction of set bits per position (index 0 = mantissa LSB) over the named
/// tensors.
///
/// # Safety
/// `names` must point to `count` NUL-terminated strings; `out` to 16 doubles.
#[no_mangle]
pub unsafe extern "C" fn seu_checkpoint_bit_statistics(
    ckpt: *const SeuCheckpoint,
    names: *const *const c_char,
    count: usize,
    out: *mut f64,
) -> SeuStatus {
    guard(|| {
        non_null!(ckpt, out);
        if count > 0 && names.is_null() {
            return fail(SeuStatus::NullPointer, "names is null");
        }
        let mut list = Vec::with_capacity(count);
        for i in 0..count {
            list.push(try_status!(str_arg(*names.add(i), "names[i]")));
        }
        let view = CheckpointView::new((*ckpt).store.clone());
        let stats = try_status!(bit_statistics(&view, &list).map_err(from_checkpoint));
        std::slice::from_raw_parts_mut(out, 16).copy_from_slice(&stats);
        SeuStatus::Ok
    })
}

/// Pristine view over `ckpt`. The view keeps the checkpoint data alive, so
/// the checkpoint handle may be freed first.
///
/// # Safety
/// `ckpt` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn seu_view_new(ckpt: *const SeuCheckpoint, out: *mut *mut SeuView) -> SeuStatus {
    guard(|| {
        non_null!(ckpt, out);
        let view = CheckpointView::new((*ckpt).store.clone());
        *out = Box::into_raw(Box::new(SeuView { view }));
        SeuStatus::Ok
    })
}

/// # Safety
/// `view` must be NULL or a live handle from [`seu_view_new`].
#[no_mangle]
pub unsafe extern "C" fn seu_view_free(view: *mut SeuView) {
    if !view.is_null() {
        drop(Box::from_raw(view));
    }
}

/// Flips `bit` of element `index` of tensor `name` in place. Writes the old
/// and new patterns when the out pointers are non-NULL.
///
/// # Safety
/// `view` must be a live handle, `name` a NUL-terminated string; the out
/// pointers must be NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn seu_view_flip(
    view: *mut SeuView,
    name: *const c_char,
    index: usize,
    bit: u32,
    original: *mut u16,
    flipped: *mut u16,
) -> SeuStatus {
    guard(|| {
        non_null!(view);
        let name = try_status!(str_arg(name, "name"));
        let p = try_status!(BitPosition::new(bit).map_err(|e| fail(SeuStatus::InvalidArgument, e.to_string())));
        let v = &mut (*view).view;
        let old = try_status!(v.read(name, index).map_err(from_checkpoint));
        *v = try_status!(v.flip_element(name, index, p).map_err(from_checkpoint));
        if !original.is_null() {
            *original = old.0;
        }
        if !flipped.is_null() {
            *flipped = flip_bit(old, p).0;
        }
        SeuStatus::Ok
    })
}

/// # Safety
/// `view` must be a live handle, `name` a NUL-terminated string, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn seu_view_read(
    view: *const SeuView,
    name: *const c_char,
    index: usize,
    out: *mut u16,
) -> SeuStatus {
    guard(|| {
        non_null!(view, out);
        let name = try_status!(str_arg(name, "name"));
        *out = try_status!((*view).view.read(name, index).map_err(from_checkpoint)).0;
        SeuStatus::Ok
    })
}

/// Serializes the view (overlay applied) into a new buffer.
///
/// # Safety
/// `view` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn seu_view_write(view: *const SeuView, out: *mut SeuBuffer) -> SeuStatus {
    guard(|| {
        non_null!(view, out);
        let bytes = (*view).view.to_bytes().into_boxed_slice();
        let len = bytes.len();
        *out = SeuBuffer {
            data: Box::into_raw(bytes) as *mut u8,
            len,
        };
        SeuStatus::Ok
    })
}

/// # Safety
/// `buf` must come from [`seu_view_write`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn seu_buffer_free(buf: SeuBuffer) {
    if !buf.data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(buf.data, buf.len)));
    }
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn seu_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Tensor name for a selector such as `down.0.t0.sa.wv`. `scheme` is
/// `canonical` (toy model, default topology) or `sd2-diffusers`.
///
/// # Safety
/// `selector` and `scheme` must be NUL-terminated strings; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn seu_resolve_selector(
    selector: *const c_char,
    scheme: *const c_char,
    out: *mut *mut c_char,
) -> SeuStatus {
    guard(|| {
        non_null!(out);
        let selector = try_status!(str_arg(selector, "selector"));
        let scheme_name = try_status!(str_arg(scheme, "scheme"));
        let sel: TensorSelector = try_status!(selector
            .parse()
            .map_err(|e: seulab::selector::SelectorParseError| fail(SeuStatus::InvalidArgument, e.to_string())));
        let scheme = try_status!(NamingScheme::builtin(scheme_name)
            .ok_or_else(|| fail(SeuStatus::InvalidArgument, format!("unknown scheme `{scheme_name}`"))));
        let topology = if scheme.name == "canonical" {
            seulab::DiffuserConfig::default().topology()
        } else {
            UnetTopology::SD2
        };
        let name = try_status!(scheme.resolve(&sel, &topology).map_err(from_checkpoint));
        into_c_string(name, out)
    })
}

/// `100 * max(0, cos(a, b))` over two `len`-element vectors.
///
/// # Safety
/// `a` and `b` must point to `len` doubles; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn seu_clip_score(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> SeuStatus {
    guard(|| {
        non_null!(a, b, out);
        let (a, b) = (std::slice::from_raw_parts(a, len), std::slice::from_raw_parts(b, len));
        match clip_like_score(a, b) {
            Ok(v) => {
                *out = v;
                SeuStatus::Ok
            }
            Err(e @ MetricError::ZeroNorm) => fail(SeuStatus::ZeroNorm, e.to_string()),
            Err(e) => fail(SeuStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Runs a campaign described by TOML text and returns the result as JSON.
/// `threads` of 0 uses the default pool.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn seu_campaign_run_json(
    config_toml: *const c_char,
    threads: u32,
    out_json: *mut *mut c_char,
) -> SeuStatus {
    guard(|| {
        non_null!(out_json);
        let text = try_status!(str_arg(config_toml, "config_toml"));
        let cfg = try_status!(parse_config(text).map_err(|e| match e {
            ConfigError::Io { .. } => fail(SeuStatus::RuntimeError, e.to_string()),
            _ => fail(SeuStatus::ConfigError, e.to_string()),
        }));
        let opts = RunOptions {
            threads: (threads > 0).then_some(threads as usize),
        };
        let run = try_status!(run_campaign(&cfg, &opts).map_err(|e| match e {
            CampaignError::Config(_) => fail(SeuStatus::ConfigError, e.to_string()),
            CampaignError::Injection(InjectionError::Checkpoint(c)) => from_checkpoint(c),
            CampaignError::Injection(InjectionError::RecordMismatch { .. }) => {
                fail(SeuStatus::RecordMismatch, e.to_string())
            }
            _ => fail(SeuStatus::RuntimeError, e.to_string()),
        }));
        into_c_string(run.result.to_json(), out_json)
    })
}
