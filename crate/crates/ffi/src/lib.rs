//! C ABI over `fedsda`.
//!
//! Every function returns a [`FedsdaStatus`]; on failure the message is kept
//! per thread and can be read with [`fedsda_last_error`]. Stain matrices
//! cross the boundary as 6 doubles in column-major order (hematoxylin column
//! first), images as tightly packed 8-bit RGB rows, and density maps as
//! `2 * width * height` doubles with the hematoxylin row first.
//!
//! Models are opaque handles created by [`fedsda_model_load`] or
//! [`fedsda_model_from_bytes`] and released with [`fedsda_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use fedsda::diffusion::{load_model, read_model, sample_many, DiffusionModel};
use fedsda::metrics::{frechet_distance, ssim, summarize_stain_set, wasserstein_1d};
use fedsda::rng::{derive, Domain};
use fedsda::stain::{reconstruct, separate, DensityMap, RgbImage, SeparationParams, StainMatrix};
use fedsda::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedsdaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// The image has too little tissue to separate.
    Degenerate = 3,
    Io = 4,
    /// Malformed model file.
    Format = 5,
    /// Numerical failure (non-finite values, rejected samples, matrix root).
    Numeric = 6,
    Panic = 7,
}

/// Trained conditional stain generator.
pub struct FedsdaModel {
    inner: DiffusionModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> FedsdaStatus {
    match err {
        Error::Stage { source, .. } => status_of(source),
        Error::DegenerateImage { .. } => FedsdaStatus::Degenerate,
        Error::Io { .. } | Error::Image(_) | Error::Csv(_) => FedsdaStatus::Io,
        Error::ModelFormat(_) | Error::Json(_) => FedsdaStatus::Format,
        Error::NonFinite(_) | Error::MatrixSqrt { .. } | Error::SampleRejected(_) => {
            FedsdaStatus::Numeric
        }
        _ => FedsdaStatus::InvalidArgument,
    }
}

struct Fail(FedsdaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(FedsdaStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> Fail {
    Fail(FedsdaStatus::InvalidArgument, msg)
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FedsdaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FedsdaStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FedsdaStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn pixel_count(width: usize, height: usize) -> Result<usize, Fail> {
    width
        .checked_mul(height)
        .filter(|&n| n > 0 && n.checked_mul(3).is_some())
        .ok_or_else(|| invalid(format!("bad image size {width}x{height}")))
}

unsafe fn image(rgb: *const u8, width: usize, height: usize) -> Result<RgbImage, Fail> {
    let n = pixel_count(width, height)?;
    let px = input(rgb, n * 3, "rgb")?;
    Ok(RgbImage::new(width, height, px.to_vec())?)
}

unsafe fn stain_list(p: *const f64, count: usize, what: &str) -> Result<Vec<StainMatrix>, Fail> {
    let len = count
        .checked_mul(6)
        .ok_or_else(|| invalid(format!("{what}: count {count} too large")))?;
    input(p, len, what)?
        .chunks_exact(6)
        .map(|c| {
            Ok(StainMatrix::from_column_major(
                c.try_into().expect("chunk of 6"),
            )?)
        })
        .collect()
}

/// Message of the last failed call on this thread, or null after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fedsda_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn fedsda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Separates an RGB image into a stain matrix (6 doubles) and, if
/// `out_density` is non-null, a density map of `2 * width * height` doubles.
///
/// # Safety
/// `rgb` must point to `3 * width * height` bytes and `out_stains` to 6
/// writable doubles; `out_density` is either null or points to
/// `2 * width * height` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fedsda_separate(
    rgb: *const u8,
    width: usize,
    height: usize,
    lambda: f64,
    max_iters: usize,
    tol: f64,
    out_stains: *mut f64,
    out_density: *mut f64,
) -> FedsdaStatus {
    guard(|| {
        let img = image(rgb, width, height)?;
        let stains = output(out_stains, 6, "out_stains")?;
        let params = SeparationParams {
            lambda,
            max_iters,
            tol,
        };
        let sep = separate(&img, &params)?;
        stains.copy_from_slice(&sep.stains.to_column_major());
        if !out_density.is_null() {
            let n = img.num_pixels();
            output(out_density, 2 * n, "out_density")?.copy_from_slice(sep.density.values());
        }
        Ok(())
    })
}

/// Renders `255 exp(-w h)` into `out_rgb`.
///
/// # Safety
/// `stains` must point to 6 doubles, `density` to `2 * width * height`
/// doubles and `out_rgb` to `3 * width * height` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fedsda_reconstruct(
    stains: *const f64,
    density: *const f64,
    width: usize,
    height: usize,
    out_rgb: *mut u8,
) -> FedsdaStatus {
    guard(|| {
        let n = pixel_count(width, height)?;
        let w = stain_list(stains, 1, "stains")?[0];
        let h = DensityMap::new(n, input(density, 2 * n, "density")?.to_vec())?;
        let img = reconstruct(&w, &h, width, height)?;
        output(out_rgb, 3 * n, "out_rgb")?.copy_from_slice(img.pixels());
        Ok(())
    })
}

/// Loads a model file written by the command-line tool.
///
/// # Safety
/// `path` must be a nul-terminated UTF-8 string and `out` a valid pointer.
/// The handle written to `out` must be released with [`fedsda_model_free`].
#[no_mangle]
pub unsafe extern "C" fn fedsda_model_load(
    path: *const c_char,
    out: *mut *mut FedsdaModel,
) -> FedsdaStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8".into()))?;
        let inner = load_model(Path::new(path))?;
        *out = Box::into_raw(Box::new(FedsdaModel { inner }));
        Ok(())
    })
}

/// Reads a model from an in-memory copy of a model file.
///
/// # Safety
/// `bytes` must point to `len` bytes and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedsda_model_from_bytes(
    bytes: *const u8,
    len: usize,
    out: *mut *mut FedsdaModel,
) -> FedsdaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut data = input(bytes, len, "bytes")?;
        let inner = read_model(&mut data)?;
        *out = Box::into_raw(Box::new(FedsdaModel { inner }));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedsda_model_free(model: *mut FedsdaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of conditions (clients) the model was trained on.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedsda_model_num_conditions(
    model: *const FedsdaModel,
    out: *mut usize,
) -> FedsdaStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = model.inner.num_conditions();
        Ok(())
    })
}

/// Draws `count` stain matrices under a one-based `condition` into
/// `out_stains` (`6 * count` doubles). Uses the same random stream as the
/// command-line `sample` for the same seed.
///
/// # Safety
/// `model` must be a live handle and `out_stains` must point to
/// `6 * count` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fedsda_model_sample(
    model: *const FedsdaModel,
    condition: usize,
    count: usize,
    seed: u64,
    out_stains: *mut f64,
) -> FedsdaStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let len = count
            .checked_mul(6)
            .ok_or_else(|| invalid(format!("count {count} too large")))?;
        let out = output(out_stains, len, "out_stains")?;
        let mut rng = derive(seed, Domain::Sampling, condition as u64, 0);
        let drawn = sample_many(&model.inner, condition, count, &mut rng)?;
        for (dst, w) in out.chunks_exact_mut(6).zip(&drawn) {
            dst.copy_from_slice(&w.to_column_major());
        }
        Ok(())
    })
}

/// Fréchet distance between two sets of stain matrices (at least 2 each).
///
/// # Safety
/// `a` and `b` must point to `6 * na` and `6 * nb` doubles; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedsda_fd(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    out: *mut f64,
) -> FedsdaStatus {
    guard(|| {
        let sa = summarize_stain_set(&stain_list(a, na, "a")?)?;
        let sb = summarize_stain_set(&stain_list(b, nb, "b")?)?;
        let fd = frechet_distance(&sa, &sb)?;
        *out.as_mut().ok_or_else(|| null("out"))? = fd;
        Ok(())
    })
}

/// Channel-averaged 1-D Wasserstein distance between two images' intensity
/// distributions, in units of full scale.
///
/// # Safety
/// `a` and `b` must point to `3 * width * height` bytes each; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedsda_wd(
    a: *const u8,
    b: *const u8,
    width: usize,
    height: usize,
    out: *mut f64,
) -> FedsdaStatus {
    guard(|| {
        let (ia, ib) = (image(a, width, height)?, image(b, width, height)?);
        *out.as_mut().ok_or_else(|| null("out"))? = wasserstein_1d(&ia, &ib);
        Ok(())
    })
}

/// Mean SSIM over channels and windows.
///
/// # Safety
/// `a` and `b` must point to `3 * width * height` bytes each; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedsda_ssim(
    a: *const u8,
    b: *const u8,
    width: usize,
    height: usize,
    out: *mut f64,
) -> FedsdaStatus {
    guard(|| {
        let (ia, ib) = (image(a, width, height)?, image(b, width, height)?);
        *out.as_mut().ok_or_else(|| null("out"))? = ssim(&ia, &ib)?;
        Ok(())
    })
}
