//! C ABI over the depthroute library.
//!
//! Every function returns one of the `DR_*` status codes. On failure the
//! message is available from [`dr_last_error`] on the same thread until the
//! next call. Handles are opaque and must be released with their `_free`
//! function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use depthroute::backbone::{answer_with_path, load_checkpoint, AnyBackbone, Backbone, CounterModel, ExecutionPath};
use depthroute::routing::{control_interpolate, load_routed, routed_forward, RouterStack};
use depthroute::search::path_to_labels;
use depthroute::supervision::{effective_number_weights, focal_loss, ClassCounts};
use depthroute::Error;

pub const DR_OK: i32 = 0;
pub const DR_ERR_NULL: i32 = 1;
pub const DR_ERR_INPUT: i32 = 2;
pub const DR_ERR_DIMENSION: i32 = 3;
pub const DR_ERR_CONSTRAINT: i32 = 4;
pub const DR_ERR_FORMAT: i32 = 5;
pub const DR_ERR_IO: i32 = 6;
pub const DR_ERR_NUMERIC: i32 = 7;
pub const DR_ERR_PANIC: i32 = 8;

/// Frozen backbone.
pub struct DrBackbone(AnyBackbone);

/// Trained routers, one per backbone layer.
pub struct DrRouterStack(RouterStack);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("nul bytes removed"));
}

fn code_of(e: &Error) -> i32 {
    match e {
        Error::Dimension { .. } => DR_ERR_DIMENSION,
        Error::Input(_) | Error::Config(_) | Error::Record { .. } => DR_ERR_INPUT,
        Error::Constraint(_) => DR_ERR_CONSTRAINT,
        Error::Format(_) => DR_ERR_FORMAT,
        Error::Io { .. } => DR_ERR_IO,
        Error::Training { .. } => DR_ERR_NUMERIC,
    }
}

struct Fail(i32, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(code_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DR_ERR_NULL, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DR_OK
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            DR_ERR_PANIC
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DR_ERR_INPUT, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

/// Copies `text` and a terminating NUL into `buf` when it fits. `needed`
/// always receives the full size including the NUL.
unsafe fn write_text(text: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), Fail> {
    let n = text.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if cap < n {
        return Err(Fail(DR_ERR_INPUT, format!("answer needs {n} bytes, buffer has {cap}")));
    }
    let out = slice_mut(buf, cap, "answer buffer")?;
    for (o, &b) in out.iter_mut().zip(text.as_bytes()) {
        *o = b as c_char;
    }
    out[n - 1] = 0;
    Ok(())
}

fn path_from(layers: &[usize], depth: usize) -> Result<ExecutionPath, Fail> {
    Ok(ExecutionPath::new(layers.to_vec(), depth).map_err(Error::from)?)
}

/// Message of the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn dr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Counter backbone with `layers` layers and hidden width `dim`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn dr_counter_backbone_new(layers: usize, dim: usize, seed: u64, out: *mut *mut DrBackbone) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = CounterModel::new(layers, dim, seed)?;
        *out = Box::into_raw(Box::new(DrBackbone(AnyBackbone::Counter(m))));
        Ok(())
    })
}

/// Loads a backbone checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dr_backbone_load(path: *const c_char, out: *mut *mut DrBackbone) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let b = load_checkpoint(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(DrBackbone(b)));
        Ok(())
    })
}

/// # Safety
/// `b` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dr_backbone_free(b: *mut DrBackbone) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

/// # Safety
/// `b` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dr_backbone_num_layers(b: *const DrBackbone, out: *mut usize) -> i32 {
    guard(|| {
        let b = b.as_ref().ok_or_else(|| null("backbone"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Backbone::<f32>::num_layers(&b.0);
        Ok(())
    })
}

/// `DR_OK` when the layer sequence is a valid path for a `depth`-layer model,
/// `DR_ERR_CONSTRAINT` naming the broken rule otherwise.
///
/// # Safety
/// `layers` must point to `len` values.
#[no_mangle]
pub unsafe extern "C" fn dr_validate_path(layers: *const usize, len: usize, depth: usize) -> i32 {
    guard(|| {
        path_from(slice(layers, len, "layers")?, depth)?;
        Ok(())
    })
}

/// Per-layer application counts of a valid path into `labels_out[0..depth]`.
///
/// # Safety
/// `layers` must point to `len` values and `labels_out` to `depth` bytes.
#[no_mangle]
pub unsafe extern "C" fn dr_path_to_labels(layers: *const usize, len: usize, depth: usize, labels_out: *mut u8) -> i32 {
    guard(|| {
        let path = path_from(slice(layers, len, "layers")?, depth)?;
        slice_mut(labels_out, depth, "labels_out")?.copy_from_slice(&path_to_labels(&path));
        Ok(())
    })
}

/// Runs the backbone along `path` and writes the answer text.
///
/// # Safety
/// Pointers must cover the given lengths; `answer` must hold `cap` bytes.
/// `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn dr_forward_with_path(
    b: *const DrBackbone,
    tokens: *const u32,
    n_tokens: usize,
    layers: *const usize,
    len: usize,
    answer: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> i32 {
    guard(|| {
        let b = b.as_ref().ok_or_else(|| null("backbone"))?;
        let depth = Backbone::<f32>::num_layers(&b.0);
        let path = path_from(slice(layers, len, "layers")?, depth)?;
        let text = answer_with_path::<f32, _>(&b.0, slice(tokens, n_tokens, "tokens")?, &path)?;
        write_text(&text, answer, cap, needed)
    })
}

/// Loads a routed checkpoint into a backbone handle and a router handle.
///
/// # Safety
/// `path` must be NUL-terminated; both outputs writable.
#[no_mangle]
pub unsafe extern "C" fn dr_router_stack_load(
    path: *const c_char,
    out_backbone: *mut *mut DrBackbone,
    out_stack: *mut *mut DrRouterStack,
) -> i32 {
    guard(|| {
        if out_backbone.is_null() || out_stack.is_null() {
            return Err(null("out"));
        }
        let (b, s) = load_routed(&path_arg(path)?)?;
        *out_backbone = Box::into_raw(Box::new(DrBackbone(b)));
        *out_stack = Box::into_raw(Box::new(DrRouterStack(s)));
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dr_router_stack_free(s: *mut DrRouterStack) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Greedy routed inference. Pass NaN as `control` for the plain router.
/// `decisions_out` receives one action per layer (0 skip, 1 execute, 2 repeat).
///
/// # Safety
/// `decisions_out` must hold as many bytes as the backbone has layers;
/// `executed` and `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn dr_routed_forward(
    b: *const DrBackbone,
    s: *const DrRouterStack,
    tokens: *const u32,
    n_tokens: usize,
    control: f64,
    decisions_out: *mut u8,
    executed: *mut usize,
    answer: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> i32 {
    guard(|| {
        let b = b.as_ref().ok_or_else(|| null("backbone"))?;
        let s = s.as_ref().ok_or_else(|| null("router stack"))?;
        let toks = slice(tokens, n_tokens, "tokens")?;
        let ctl = if control.is_nan() { None } else { Some(control) };
        let out = routed_forward(&b.0, &s.0, toks, ctl)?;
        slice_mut(decisions_out, out.decisions.len(), "decisions_out")?.copy_from_slice(&out.decisions);
        if !executed.is_null() {
            *executed = out.executed;
        }
        write_text(&b.0.render_answer(toks, &out.logits), answer, cap, needed)
    })
}

/// Class weights `alpha[0..3]` for skip, execute and repeat.
///
/// # Safety
/// `alpha_out` must hold three doubles.
#[no_mangle]
pub unsafe extern "C" fn dr_effective_number_weights(
    n_skip: u64,
    n_execute: u64,
    n_repeat: u64,
    beta: f64,
    alpha_out: *mut f64,
) -> i32 {
    guard(|| {
        let counts = ClassCounts { skip: n_skip, execute: n_execute, repeat: n_repeat };
        let a = effective_number_weights(&counts, beta)?;
        slice_mut(alpha_out, 3, "alpha_out")?.copy_from_slice(&a);
        Ok(())
    })
}

/// Mean focal loss over `n` rows of probabilities (row-major, three per row).
///
/// # Safety
/// `probs` must hold `3 * n` doubles, `labels` `n` bytes, `alpha` three doubles.
#[no_mangle]
pub unsafe extern "C" fn dr_focal_loss(
    probs: *const f64,
    labels: *const u8,
    n: usize,
    alpha: *const f64,
    gamma: f64,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let p = slice(probs, 3 * n, "probs")?;
        let rows: Vec<[f64; 3]> = p.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let a = slice(alpha, 3, "alpha")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = focal_loss(&rows, slice(labels, n, "labels")?, [a[0], a[1], a[2]], gamma)?;
        Ok(())
    })
}

/// Blends a probability triple by the control value `p` in [-1, 1].
///
/// # Safety
/// `probs` and `out` must each hold three doubles; they may alias.
#[no_mangle]
pub unsafe extern "C" fn dr_control_interpolate(probs: *const f64, p: f64, out: *mut f64) -> i32 {
    guard(|| {
        let r = slice(probs, 3, "probs")?;
        let blended = control_interpolate([r[0], r[1], r[2]], p)?;
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(blended.as_ptr(), out, 3);
        Ok(())
    })
}
