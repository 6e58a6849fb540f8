//! C ABI over `panofill`.
//!
//! Objects are opaque handles created by `pf_*_new`/`pf_*_load` style calls
//! and released with the matching `pf_*_free`. Every fallible call returns a
//! [`PfStatus`]; on failure [`pf_last_error_message`] describes the error for
//! the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use panofill::erp::{apply_mask_gray, make_fov_mask, FovSpec, Image};
use panofill::metrics::seam_discontinuity;
use panofill::pipeline::{complete, PipelineBundle, PipelineConfig, SceneSpec};
use panofill::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Contract = 3,
    Io = 4,
    Format = 5,
    Divergence = 6,
    Panic = 7,
}

/// Opaque panorama image (`h x w` RGB, values in `[0, 1]`).
pub struct PfImage(Image);

/// Opaque trained pipeline bundle.
pub struct PfBundle(PipelineBundle);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PfStatus {
    match e {
        Error::Contract(_) | Error::Shape { .. } | Error::NonFinite { .. } => PfStatus::Contract,
        Error::Config(_) => PfStatus::InvalidArgument,
        Error::Io { .. } => PfStatus::Io,
        Error::Format { .. } | Error::Image(_) => PfStatus::Format,
        Error::Divergence { .. } => PfStatus::Divergence,
    }
}

fn fail(status: PfStatus, msg: impl Into<String>) -> PfStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, mapping errors and panics to a status code.
fn guard(f: impl FnOnce() -> Result<(), PfStatus>) -> PfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PfStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(PfStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: panofill::Result<T>) -> Result<T, PfStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn null(what: &str) -> PfStatus {
    fail(PfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, PfStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(PfStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), PfStatus> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, PfStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Creates an image from `h * w * 3` row-major RGB values.
///
/// # Safety
/// `data` must point to `h * w * 3` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_image_new(h: usize, w: usize, data: *const f64, out: *mut *mut PfImage) -> PfStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let n = h.checked_mul(w).and_then(|x| x.checked_mul(3)).ok_or_else(|| fail(PfStatus::InvalidArgument, "image too large"))?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        put(out, PfImage(lift(Image::new(h, w, values))?))
    })
}

/// Loads a PNG or PNM image.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_image_load(path: *const c_char, out: *mut *mut PfImage) -> PfStatus {
    guard(|| {
        let p = PathBuf::from(str_arg(path, "path")?);
        put(out, PfImage(lift(Image::load(&p))?))
    })
}

/// Saves an image; the format follows the file extension.
///
/// # Safety
/// `img` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pf_image_save(img: *const PfImage, path: *const c_char) -> PfStatus {
    guard(|| {
        let img = handle(img, "image")?;
        let p = PathBuf::from(str_arg(path, "path")?);
        lift(img.0.save(&p))
    })
}

/// # Safety
/// `img` must be a live handle; `h` and `w` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_image_dims(img: *const PfImage, h: *mut usize, w: *mut usize) -> PfStatus {
    guard(|| {
        let img = handle(img, "image")?;
        if h.is_null() || w.is_null() {
            return Err(null("dimension output"));
        }
        (*h, *w) = img.0.dims();
        Ok(())
    })
}

/// Copies the `h * w * 3` values into `out`, which holds `len` doubles.
///
/// # Safety
/// `img` must be a live handle and `out` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pf_image_copy_data(img: *const PfImage, out: *mut f64, len: usize) -> PfStatus {
    guard(|| {
        let img = handle(img, "image")?;
        if out.is_null() {
            return Err(null("output buffer"));
        }
        let d = img.0.data();
        if len < d.len() {
            return Err(fail(PfStatus::InvalidArgument, format!("buffer holds {len} values, image needs {}", d.len())));
        }
        std::ptr::copy_nonoverlapping(d.as_ptr(), out, d.len());
        Ok(())
    })
}

/// # Safety
/// `img` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_image_free(img: *mut PfImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// Renders one procedural `h x 2h` panorama.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_synth_panorama(h: usize, seed: u64, out: *mut *mut PfImage) -> PfStatus {
    guard(|| put(out, PfImage(lift(SceneSpec::random(seed).render(h))?)))
}

/// # Safety
/// `img` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_seam_discontinuity(img: *const PfImage, out: *mut f64) -> PfStatus {
    guard(|| {
        let img = handle(img, "image")?;
        if out.is_null() {
            return Err(null("output"));
        }
        *out = seam_discontinuity(&img.0);
        Ok(())
    })
}

/// Loads a bundle checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_bundle_load(path: *const c_char, out: *mut *mut PfBundle) -> PfStatus {
    guard(|| {
        let p = PathBuf::from(str_arg(path, "path")?);
        put(out, PfBundle(lift(PipelineBundle::load(&p))?))
    })
}

/// Randomly initialised bundle with the small test configuration
/// (`32 x 64` training size).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_bundle_untrained_smoke(seed: u64, out: *mut *mut PfBundle) -> PfStatus {
    guard(|| put(out, PfBundle(lift(PipelineBundle::untrained(PipelineConfig::smoke(), seed))?)))
}

/// # Safety
/// `bundle` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pf_bundle_save(bundle: *const PfBundle, path: *const c_char) -> PfStatus {
    guard(|| {
        let b = handle(bundle, "bundle")?;
        let p = PathBuf::from(str_arg(path, "path")?);
        lift(b.0.save(&p))
    })
}

/// Writes the bundle's hex digest (64 characters plus NUL) into `buf`.
///
/// # Safety
/// `bundle` must be a live handle and `buf` must hold `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pf_bundle_digest(bundle: *const PfBundle, buf: *mut c_char, len: usize) -> PfStatus {
    guard(|| {
        let b = handle(bundle, "bundle")?;
        if buf.is_null() {
            return Err(null("buffer"));
        }
        let d = b.0.digest();
        if len < d.len() + 1 {
            return Err(fail(PfStatus::InvalidArgument, format!("buffer holds {len} bytes, digest needs {}", d.len() + 1)));
        }
        std::ptr::copy_nonoverlapping(d.as_ptr().cast(), buf, d.len());
        *buf.add(d.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `bundle` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_bundle_free(bundle: *mut PfBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Completes `input`, known inside `fov` (e.g. `angular:90x90@0`), with
/// the bundle's sampler and sampling seed `seed`. Pixels outside the field
/// of view are ignored.
///
/// # Safety
/// `bundle` and `input` must be live handles, `fov` a NUL-terminated string
/// and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_complete(
    bundle: *const PfBundle,
    input: *const PfImage,
    fov: *const c_char,
    seed: u64,
    out: *mut *mut PfImage,
) -> PfStatus {
    guard(|| {
        let b = handle(bundle, "bundle")?;
        let img = handle(input, "input")?;
        let spec = lift(FovSpec::parse(str_arg(fov, "fov")?))?;
        let mask = lift(make_fov_mask(&spec, img.0.height(), img.0.width()))?;
        let masked = lift(apply_mask_gray(&img.0, &mask))?;
        let sc = b.0.config.sampler.clone().with_seed(seed);
        let mut outs = lift(complete(&b.0, &masked, &mask, 1, &sc))?;
        put(out, PfImage(outs.remove(0)))
    })
}
