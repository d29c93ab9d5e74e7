//! C ABI over the `kdsm` crate.
//!
//! Every function returns a [`KdsmStatus`]; on failure the message is
//! available from [`kdsm_last_error`] on the same thread. Models are opaque
//! handles created by [`kdsm_model_load`] and released by
//! [`kdsm_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use kdsm::eval::{nme, pck};
use kdsm::heatmap::KeypointSet;
use kdsm::matching::{greedy_assign, max_value_assign};
use kdsm::network::Mode;
use kdsm::pipeline::{infer, AssignMode, Checkpoint};
use kdsm::text::build_prompt;
use kdsm::{KdsmError, Tensor};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KdsmStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Invalid configuration, usage or capacity.
    Config = 2,
    /// Bad input data, shapes or lookups.
    Data = 3,
    /// Non-finite numerics.
    Numeric = 4,
    /// File could not be read or written.
    Io = 5,
    /// Malformed, truncated, corrupted or wrong-version file.
    Format = 6,
    /// Internal panic caught at the boundary.
    Panic = 7,
}

/// Prompt-to-group assignment used by [`kdsm_model_infer`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KdsmAssign {
    Max = 0,
    Greedy = 1,
}

/// One located keypoint, in input-image pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KdsmKeypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
    /// Heatmap group, or -1 (baseline model or unassigned prompt).
    pub group: i64,
    /// 1 when the prediction is usable, 0 otherwise.
    pub valid: i32,
}

/// Opaque model handle.
pub struct KdsmModel {
    ck: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &KdsmError) -> KdsmStatus {
    match e {
        KdsmError::Config(_) | KdsmError::Usage(_) | KdsmError::Capacity { .. } => KdsmStatus::Config,
        KdsmError::Numeric(_) => KdsmStatus::Numeric,
        KdsmError::Io { .. } => KdsmStatus::Io,
        KdsmError::Parse(_) | KdsmError::Version { .. } | KdsmError::Checksum { .. } | KdsmError::Truncated(_) => {
            KdsmStatus::Format
        }
        _ => KdsmStatus::Data,
    }
}

enum Failure {
    Null(&'static str),
    Kdsm(KdsmError),
}

impl From<KdsmError> for Failure {
    fn from(e: KdsmError) -> Self {
        Failure::Kdsm(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KdsmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            KdsmStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer passed for `{what}`"));
            KdsmStatus::NullArgument
        }
        Ok(Err(Failure::Kdsm(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {msg}"));
            KdsmStatus::Panic
        }
    }
}

fn nonnull<T>(p: *const T, what: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    let p = nonnull(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Kdsm(KdsmError::Usage(format!("`{what}` is not valid UTF-8"))))
}

/// Message of the last failed call on this thread (empty after a success).
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn kdsm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file into a new handle written to `*out`.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kdsm_model_load(path: *const c_char, out: *mut *mut KdsmModel) -> KdsmStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        nonnull(out, "out")?;
        let ck = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(KdsmModel { ck }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`kdsm_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn kdsm_model_free(model: *mut KdsmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Prompt capacity `K` of the model.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kdsm_model_capacity(model: *const KdsmModel, out: *mut usize) -> KdsmStatus {
    guard(|| {
        let m = &*nonnull(model, "model")?;
        nonnull(out, "out")?;
        *out = m.ck.meta.config.model.k;
        Ok(())
    })
}

/// Writes 1 for a KDSM model, 0 for a baseline model.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kdsm_model_is_kdsm(model: *const KdsmModel, out: *mut i32) -> KdsmStatus {
    guard(|| {
        let m = &*nonnull(model, "model")?;
        nonnull(out, "out")?;
        *out = i32::from(m.ck.meta.config.model.mode == Mode::Kdsm);
        Ok(())
    })
}

/// Locates `n_prompts` keypoints on a `height x width` grayscale image
/// (row-major, values in [0, 1]). Each prompt is `"species:category"`.
/// Writes `n_prompts` entries to `out`.
///
/// # Safety
/// `image` must hold `height * width` doubles, `prompts` `n_prompts`
/// nul-terminated strings, and `out` room for `n_prompts` keypoints.
#[no_mangle]
pub unsafe extern "C" fn kdsm_model_infer(
    model: *const KdsmModel,
    image: *const f64,
    height: usize,
    width: usize,
    prompts: *const *const c_char,
    n_prompts: usize,
    assign: KdsmAssign,
    out: *mut KdsmKeypoint,
) -> KdsmStatus {
    guard(|| {
        let m = &*nonnull(model, "model")?;
        let image = nonnull(image, "image")?;
        let prompts = nonnull(prompts, "prompts")?;
        nonnull(out, "out")?;
        if height == 0 || width == 0 {
            return Err(KdsmError::Usage("image extents must be positive".into()).into());
        }
        let pixels = std::slice::from_raw_parts(image, height * width).to_vec();
        let img = Tensor::new(vec![1, height, width], pixels)?;
        let mut specs = Vec::with_capacity(n_prompts);
        for i in 0..n_prompts {
            let s = c_str(*prompts.add(i), "prompts[i]")?;
            let (species, category) = s
                .split_once(':')
                .ok_or_else(|| KdsmError::Usage(format!("prompt {s:?} is not `species:category`")))?;
            specs.push(build_prompt(species.trim(), category.trim())?);
        }
        let mode = match assign {
            KdsmAssign::Max => AssignMode::Max,
            KdsmAssign::Greedy => AssignMode::Greedy,
        };
        let found = infer(&m.ck, &img, &specs, mode)?;
        for (i, k) in found.iter().enumerate() {
            *out.add(i) = KdsmKeypoint {
                x: k.x,
                y: k.y,
                score: k.score,
                group: k.group.map_or(-1, |g| g as i64),
                valid: i32::from(k.valid),
            };
        }
        Ok(())
    })
}

unsafe fn assignment(
    p: *const f64,
    rows: usize,
    cols: usize,
    out: *mut i64,
    f: fn(&Tensor) -> kdsm::Result<Vec<i64>>,
) -> KdsmStatus {
    guard(|| {
        let p = nonnull(p, "p")?;
        nonnull(out, "out")?;
        let t = Tensor::new(vec![rows, cols], std::slice::from_raw_parts(p, rows * cols).to_vec())?;
        let a = f(&t)?;
        std::slice::from_raw_parts_mut(out, rows).copy_from_slice(&a);
        Ok(())
    })
}

/// Greedy one-to-one assignment of a row-major `rows x cols` score
/// matrix; `out[k]` is the chosen column or -1.
///
/// # Safety
/// `p` must hold `rows * cols` doubles and `out` room for `rows` values.
#[no_mangle]
pub unsafe extern "C" fn kdsm_greedy_assign(p: *const f64, rows: usize, cols: usize, out: *mut i64) -> KdsmStatus {
    assignment(p, rows, cols, out, greedy_assign)
}

/// First maximum of every row.
///
/// # Safety
/// As [`kdsm_greedy_assign`].
#[no_mangle]
pub unsafe extern "C" fn kdsm_max_assign(p: *const f64, rows: usize, cols: usize, out: *mut i64) -> KdsmStatus {
    assignment(p, rows, cols, out, max_value_assign)
}

#[allow(clippy::too_many_arguments)]
unsafe fn metric(
    pred_xy: *const f64,
    pred_valid: *const u8,
    gt_xy: *const f64,
    gt_visible: *const u8,
    n: usize,
    bbox: *const f64,
    out: *mut f64,
    f: impl FnOnce(&[Option<(f64, f64)>], &KeypointSet) -> kdsm::Result<Option<f64>>,
) -> KdsmStatus {
    guard(|| {
        let pxy = std::slice::from_raw_parts(nonnull(pred_xy, "pred_xy")?, 2 * n);
        let pv = std::slice::from_raw_parts(nonnull(pred_valid, "pred_valid")?, n);
        let gxy = std::slice::from_raw_parts(nonnull(gt_xy, "gt_xy")?, 2 * n);
        let gv = std::slice::from_raw_parts(nonnull(gt_visible, "gt_visible")?, n);
        let b = std::slice::from_raw_parts(nonnull(bbox, "bbox")?, 4);
        nonnull(out, "out")?;
        let pred: Vec<Option<(f64, f64)>> = (0..n).map(|i| (pv[i] != 0).then(|| (pxy[2 * i], pxy[2 * i + 1]))).collect();
        let gt = KeypointSet::new(
            (0..n).map(|i| (gxy[2 * i], gxy[2 * i + 1])).collect(),
            gv.iter().map(|&v| v != 0).collect(),
            [b[0], b[1], b[2], b[3]],
        )?;
        *out = f(&pred, &gt)?.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// PCK of `n` keypoints (interleaved x, y). Writes NaN when no keypoint is
/// visible. `bbox` is `[x0, y0, x1, y1]`.
///
/// # Safety
/// Coordinate arrays must hold `2 * n` doubles, flag arrays `n` bytes and
/// `bbox` four doubles.
#[no_mangle]
pub unsafe extern "C" fn kdsm_pck(
    pred_xy: *const f64,
    pred_valid: *const u8,
    gt_xy: *const f64,
    gt_visible: *const u8,
    n: usize,
    bbox: *const f64,
    threshold: f64,
    out: *mut f64,
) -> KdsmStatus {
    metric(pred_xy, pred_valid, gt_xy, gt_visible, n, bbox, out, |p, g| pck(p, g, threshold))
}

/// NME (x100) of `n` keypoints; NaN when no keypoint is visible.
///
/// # Safety
/// As [`kdsm_pck`].
#[no_mangle]
pub unsafe extern "C" fn kdsm_nme(
    pred_xy: *const f64,
    pred_valid: *const u8,
    gt_xy: *const f64,
    gt_visible: *const u8,
    n: usize,
    bbox: *const f64,
    out: *mut f64,
) -> KdsmStatus {
    metric(pred_xy, pred_valid, gt_xy, gt_visible, n, bbox, out, nme)
}
