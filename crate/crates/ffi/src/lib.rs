//! C interface: load a trained model, render it, score images, or run the
//! command line in-process.
//!
//! Every fallible call returns a [`DyneditStatus`]. On failure the message
//! is kept per thread and read back with [`dynedit_last_error`]. Handles are
//! opaque and owned by the caller until passed to [`dynedit_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dynedit::gaussians::Camera;
use dynedit::image::Image;
use dynedit::trainer::SceneModel;
use dynedit::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DyneditStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// Bad input: malformed files, invalid camera, out-of-range values.
    Invalid = 2,
    /// The engine failed while running (non-finite state, I/O).
    Runtime = 3,
    /// The caller's output buffer has the wrong length.
    BufferSize = 4,
    /// A string argument was not UTF-8.
    Utf8 = 5,
    /// An internal panic was caught at the boundary.
    Panic = 6,
}

/// Pinhole camera, OpenCV convention, row-major world-to-camera matrix.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DyneditCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub world_to_cam: [f64; 16],
}

impl From<&DyneditCamera> for Camera {
    fn from(c: &DyneditCamera) -> Self {
        Camera {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            world_to_cam: c.world_to_cam,
        }
    }
}

/// Opaque handle to a loaded model.
pub struct DyneditModel {
    inner: SceneModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.as_bytes().to_vec());
}

fn fail(status: DyneditStatus, msg: impl AsRef<str>) -> DyneditStatus {
    set_error(msg.as_ref());
    status
}

fn from_engine(e: Error) -> DyneditStatus {
    let status = if e.is_validation() {
        DyneditStatus::Invalid
    } else {
        DyneditStatus::Runtime
    };
    fail(status, e.to_string())
}

/// Runs `f`, mapping panics to [`DyneditStatus::Panic`] and clearing the
/// last error on success.
fn guard(f: impl FnOnce() -> DyneditStatus) -> DyneditStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(DyneditStatus::Ok) => {
            set_error("");
            DyneditStatus::Ok
        }
        Ok(s) => s,
        Err(_) => fail(DyneditStatus::Panic, "internal panic"),
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, DyneditStatus> {
    if p.is_null() {
        return Err(fail(DyneditStatus::NullArgument, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(DyneditStatus::Utf8, "path is not UTF-8"))
}

/// Copies the last error of this thread into `buf` as a NUL-terminated
/// string, truncating to `len - 1` bytes. Returns the full message length
/// without the terminator, so a caller can size a second attempt.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dynedit_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dynedit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model directory written by `train`, `edit` or `refine`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dynedit_model_load(dir: *const c_char, out: *mut *mut DyneditModel) -> DyneditStatus {
    guard(|| {
        if out.is_null() {
            return fail(DyneditStatus::NullArgument, "out is null");
        }
        *out = ptr::null_mut();
        let dir = match path_arg(dir) {
            Ok(d) => d,
            Err(s) => return s,
        };
        match SceneModel::load(&dir) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(DyneditModel { inner }));
                DyneditStatus::Ok
            }
            Err(e) => from_engine(e),
        }
    })
}

/// Writes the model to `dir` in the same layout `dynedit_model_load` reads.
///
/// # Safety
/// `model` must come from `dynedit_model_load`; `dir` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dynedit_model_save(model: *const DyneditModel, dir: *const c_char) -> DyneditStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(DyneditStatus::NullArgument, "model is null");
        };
        let dir = match path_arg(dir) {
            Ok(d) => d,
            Err(s) => return s,
        };
        m.inner.save(&dir).map_or_else(from_engine, |_| DyneditStatus::Ok)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or come from `dynedit_model_load` and not have been
/// freed already.
#[no_mangle]
pub unsafe extern "C" fn dynedit_model_free(model: *mut DyneditModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of Gaussians, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dynedit_model_num_gaussians(model: *const DyneditModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.cloud.len())
}

/// Number of dataset timesteps the model was trained on, or 0.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dynedit_model_num_timesteps(model: *const DyneditModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.info.num_timesteps)
}

/// Renders the model at scene time `t` in [0, 1] into `out_rgb`, row-major
/// `height × width × 3`, so `out_len` must equal `width·height·3`.
///
/// # Safety
/// `model` and `camera` must be valid; `out_rgb` must point to `out_len`
/// writable floats.
#[no_mangle]
pub unsafe extern "C" fn dynedit_render(
    model: *const DyneditModel,
    camera: *const DyneditCamera,
    t: f64,
    out_rgb: *mut f32,
    out_len: usize,
) -> DyneditStatus {
    guard(|| {
        let (Some(m), Some(c)) = (model.as_ref(), camera.as_ref()) else {
            return fail(DyneditStatus::NullArgument, "model or camera is null");
        };
        if out_rgb.is_null() {
            return fail(DyneditStatus::NullArgument, "out_rgb is null");
        }
        let want = c.width as usize * c.height as usize * 3;
        if out_len != want {
            return fail(
                DyneditStatus::BufferSize,
                format!("out_len is {out_len}, the image needs {want}"),
            );
        }
        if !(0.0..=1.0).contains(&t) {
            return fail(DyneditStatus::Invalid, format!("t = {t} outside [0, 1]"));
        }
        let cam = Camera::from(c);
        if let Err(e) = cam.validate() {
            return from_engine(e);
        }
        match m.inner.render(&cam, t) {
            Ok(img) => {
                let out = std::slice::from_raw_parts_mut(out_rgb, out_len);
                for (o, v) in out.iter_mut().zip(&img.rgb.data) {
                    *o = *v as f32;
                }
                DyneditStatus::Ok
            }
            Err(e) => from_engine(e),
        }
    })
}

unsafe fn image_arg(data: *const f32, width: u32, height: u32) -> Result<Image, DyneditStatus> {
    if data.is_null() {
        return Err(fail(DyneditStatus::NullArgument, "image is null"));
    }
    let n = width as usize * height as usize * 3;
    let values = std::slice::from_raw_parts(data, n).iter().map(|&v| v as f64).collect();
    Image::new(width, height, values).map_err(from_engine)
}

/// PSNR and SSIM of two `height × width × 3` images with values in [0, 1].
/// Identical images score PSNR 99.
///
/// # Safety
/// `a` and `b` must each point to `width·height·3` floats; the outputs
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn dynedit_image_quality(
    a: *const f32,
    b: *const f32,
    width: u32,
    height: u32,
    psnr_out: *mut f64,
    ssim_out: *mut f64,
) -> DyneditStatus {
    guard(|| {
        if psnr_out.is_null() || ssim_out.is_null() {
            return fail(DyneditStatus::NullArgument, "output is null");
        }
        let (a, b) = match (image_arg(a, width, height), image_arg(b, width, height)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match (dynedit::scene_io::psnr(&a, &b), dynedit::scene_io::ssim(&a, &b)) {
            (Ok(p), Ok(s)) => {
                *psnr_out = p;
                *ssim_out = s;
                DyneditStatus::Ok
            }
            (Err(e), _) | (_, Err(e)) => from_engine(e),
        }
    })
}

/// Runs the `dynedit` command line in-process with `argv[0..argc]`
/// (`argv[0]` is the program name) and returns its exit code: 0 success,
/// 2 invalid input, 3 runtime failure.
///
/// # Safety
/// `argv` must hold `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn dynedit_cli_run(argc: c_int, argv: *const *const c_char) -> c_int {
    if argv.is_null() || argc < 1 {
        set_error("argv is empty");
        return dynedit::cli::EXIT_INVALID;
    }
    let mut args = Vec::with_capacity(argc as usize);
    for i in 0..argc as usize {
        let p = *argv.add(i);
        if p.is_null() {
            set_error("argv entry is null");
            return dynedit::cli::EXIT_INVALID;
        }
        match CStr::from_ptr(p).to_str() {
            Ok(s) => args.push(s.to_string()),
            Err(_) => {
                set_error("argv entry is not UTF-8");
                return dynedit::cli::EXIT_INVALID;
            }
        }
    }
    catch_unwind(|| dynedit::cli::main_with(args)).unwrap_or_else(|_| {
        set_error("internal panic");
        dynedit::cli::EXIT_RUNTIME
    })
}
