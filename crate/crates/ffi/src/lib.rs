//! C ABI over `pie-core`. Models are opaque handles loaded from checkpoint
//! files; every call returns a [`PieStatus`] and the message of the most
//! recent failure on the calling thread is available through
//! [`pie_last_error_message`].
//!
//! All arrays are row-major `double` buffers owned by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use pie_core::checkpoint::Checkpoint;
use pie_core::eval::{laplace_sharpness, SharpnessSource};
use pie_core::model::PieModel;
use pie_core::{PieError, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PieStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    Numerical = 6,
    Internal = 7,
}

/// Opaque model handle.
pub struct PieModelHandle {
    model: PieModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &PieError) -> PieStatus {
    match e {
        PieError::Io(_) => PieStatus::Io,
        PieError::Checkpoint(_) | PieError::Architecture(_) | PieError::Json(_) => PieStatus::Checkpoint,
        PieError::Tensor(pie_core::tensor::TensorError::ShapeMismatch { .. }) => PieStatus::Shape,
        PieError::Tensor(_)
        | PieError::NonFiniteActivation { .. }
        | PieError::NonFiniteScale { .. }
        | PieError::Singular { .. }
        | PieError::NonFiniteGradient
        | PieError::Divergence { .. } => PieStatus::Numerical,
        PieError::Config(_) | PieError::Data(_) | PieError::OddPartition(_) => PieStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (PieStatus, String)>) -> PieStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PieStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PieStatus::Internal
        }
    }
}

fn fail(e: PieError) -> (PieStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PieStatus, String) {
    (PieStatus::NullPointer, format!("{what} is null"))
}

unsafe fn handle<'a>(h: *const PieModelHandle) -> Result<&'a PieModel, (PieStatus, String)> {
    h.as_ref().map(|h| &h.model).ok_or_else(|| null("model"))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (PieStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], (PieStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn rows(data: &[f64], count: usize, dim: usize) -> Result<Tensor, (PieStatus, String)> {
    if count == 0 {
        return Err((PieStatus::InvalidArgument, "count must be at least 1".into()));
    }
    Tensor::new(vec![count, dim], data.to_vec()).map_err(|e| fail(e.into()))
}

/// Loads a checkpoint file. On success `*out` owns a handle that must be
/// released with [`pie_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pie_model_load(path: *const c_char, out: *mut *mut PieModelHandle) -> PieStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (PieStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let as_checkpoint = |e: PieError| (PieStatus::Checkpoint, e.to_string());
        let ck = Checkpoint::load(Path::new(path)).map_err(as_checkpoint)?;
        let (model, _) = ck.restore().map_err(as_checkpoint)?;
        *out = Box::into_raw(Box::new(PieModelHandle { model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`pie_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pie_model_free(model: *mut PieModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the data dimension D and latent dimension d.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pie_model_dims(
    model: *const PieModelHandle,
    input_dim: *mut usize,
    latent_dim: *mut usize,
) -> PieStatus {
    guard(|| {
        let m = handle(model)?;
        if input_dim.is_null() || latent_dim.is_null() {
            return Err(null("output"));
        }
        *input_dim = m.input_dim();
        *latent_dim = m.latent_dim();
        Ok(())
    })
}

/// Encodes `count` rows of `x` (`count × D`) into `z_out` (`count × d`).
///
/// # Safety
/// Buffers must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn pie_model_encode(
    model: *const PieModelHandle,
    x: *const f64,
    count: usize,
    z_out: *mut f64,
) -> PieStatus {
    guard(|| {
        let m = handle(model)?;
        let x = rows(input(x, count * m.input_dim(), "x")?, count, m.input_dim())?;
        let out = output(z_out, count * m.latent_dim(), "z_out")?;
        let enc = m.encode(&x).map_err(fail)?;
        out.copy_from_slice(enc.z.data());
        Ok(())
    })
}

/// Decodes `count` latent rows (`count × d`) into `x_out` (`count × D`).
///
/// # Safety
/// Buffers must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn pie_model_decode(
    model: *const PieModelHandle,
    z: *const f64,
    count: usize,
    x_out: *mut f64,
) -> PieStatus {
    guard(|| {
        let m = handle(model)?;
        let z = rows(input(z, count * m.latent_dim(), "z")?, count, m.latent_dim())?;
        let out = output(x_out, count * m.input_dim(), "x_out")?;
        out.copy_from_slice(m.decode(&z).map_err(fail)?.data());
        Ok(())
    })
}

/// Per-row log-likelihood of `count` rows of `x` into `out` (`count`).
///
/// # Safety
/// Buffers must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn pie_model_log_likelihood(
    model: *const PieModelHandle,
    x: *const f64,
    count: usize,
    out: *mut f64,
) -> PieStatus {
    guard(|| {
        let m = handle(model)?;
        let x = rows(input(x, count * m.input_dim(), "x")?, count, m.input_dim())?;
        let out = output(out, count, "out")?;
        out.copy_from_slice(&m.log_likelihood(&x).map_err(fail)?);
        Ok(())
    })
}

/// Decodes `count` draws from `N(0, prior_std² I)` into `x_out`
/// (`count × D`). Deterministic in `seed`.
///
/// # Safety
/// `x_out` must hold `count × D` values.
#[no_mangle]
pub unsafe extern "C" fn pie_model_sample(
    model: *const PieModelHandle,
    count: usize,
    prior_std: f64,
    seed: u64,
    x_out: *mut f64,
) -> PieStatus {
    guard(|| {
        let m = handle(model)?;
        let out = output(x_out, count * m.input_dim(), "x_out")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = m.sample(count, prior_std, &mut rng).map_err(fail)?;
        out.copy_from_slice(s.data());
        Ok(())
    })
}

/// Mean variance of the 4-neighbour Laplace response over `count`
/// grey-scale `height × width` images.
///
/// # Safety
/// `images` must hold `count × height × width` values.
#[no_mangle]
pub unsafe extern "C" fn pie_sharpness(
    images: *const f64,
    count: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> PieStatus {
    guard(|| {
        let px = height * width;
        let data = input(images, count * px, "images")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let imgs: Vec<Tensor> = data
            .chunks(px.max(1))
            .take(count)
            .map(|c| Tensor::new(vec![1, height, width], c.to_vec()))
            .collect::<Result<_, _>>()
            .map_err(|e| fail(e.into()))?;
        *out = laplace_sharpness(&imgs, SharpnessSource::Dataset).map_err(fail)?.mean_variance;
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// NUL-terminated) and returns the full message length excluding the NUL.
///
/// # Safety
/// `buf` must hold `len` bytes, or be null with `len` 0.
#[no_mangle]
pub unsafe extern "C" fn pie_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pie_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
