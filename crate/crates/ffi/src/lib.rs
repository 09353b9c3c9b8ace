//! C interface to the gancomp library.
//!
//! Objects are opaque handles created by `gc_*_load`/`gc_*_new` functions and
//! released with the matching `gc_*_free`. Every fallible call returns a
//! [`GcStatus`]; on failure the message is available from
//! [`gc_last_error_message`] on the same thread. Images are contiguous
//! `float` arrays in `(n, 3, h, w)` order with values in `[-1, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use gancomp::content::OracleMask;
use gancomp::eval::extractor::FeatureExtractor;
use gancomp::eval::fid::fid;
use gancomp::eval::quality::{flops_estimate, psnr};
use gancomp::model::{remove_channels, Generator, ModelCheckpoint};
use gancomp::pruning::{compute_saliency, select_channels, CaConfig, Metric};
use gancomp::{Error, Tensor};

/// Result codes. Values 2 and 3 match the command line tool's exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GcStatus {
    Ok = 0,
    NullPointer = 1,
    Validation = 2,
    Numerical = 3,
    Shape = 4,
    Io = 5,
    Format = 6,
    Unsupported = 7,
    Panic = 8,
}

/// Channel saliency metrics for [`gc_generator_prune`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GcMetric {
    L1Out = 0,
    L1In = 1,
    LowAct = 2,
    Random = 3,
    CaL1Out = 4,
}

impl From<GcMetric> for Metric {
    fn from(m: GcMetric) -> Self {
        match m {
            GcMetric::L1Out => Metric::L1Out,
            GcMetric::L1In => Metric::L1In,
            GcMetric::LowAct => Metric::LowAct,
            GcMetric::Random => Metric::Random,
            GcMetric::CaL1Out => Metric::CaL1Out,
        }
    }
}

/// Opaque generator handle.
pub struct GcGenerator {
    inner: Generator<f32>,
}

/// Opaque feature extractor handle.
pub struct GcExtractor {
    inner: FeatureExtractor,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> GcStatus {
    match e {
        Error::Shape(_) => GcStatus::Shape,
        Error::Validation(_) => GcStatus::Validation,
        Error::Numerical(_) => GcStatus::Numerical,
        Error::Unsupported(_) => GcStatus::Unsupported,
        Error::Format(_) | Error::Json(_) => GcStatus::Format,
        Error::Io(_) => GcStatus::Io,
    }
}

/// Runs `f`, converting errors and panics into a status and the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), GcStatus>) -> GcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GcStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            GcStatus::Panic
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, GcStatus>;
}

impl<T> OrStatus<T> for gancomp::Result<T> {
    fn or_status(self) -> Result<T, GcStatus> {
        self.map_err(|e| {
            set_error(e.to_string());
            status_of(&e)
        })
    }
}

fn null(what: &str) -> GcStatus {
    set_error(format!("{what} is null"));
    GcStatus::NullPointer
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, GcStatus> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path).to_str().map_err(|_| {
        set_error("path is not valid UTF-8".into());
        GcStatus::Validation
    })?;
    Ok(PathBuf::from(s))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, GcStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a>(p: *const f32, len: usize, what: &str) -> Result<&'a [f32], GcStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn images(data: &[f32], n: usize, h: usize, w: usize) -> Result<Tensor<f32>, GcStatus> {
    Tensor::from_vec(&[n, 3, h, w], data.to_vec()).or_status()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn gc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a generator checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gc_generator_load(
    path: *const c_char,
    out: *mut *mut GcGenerator,
) -> GcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let g = ModelCheckpoint::load(path_arg(path)?)
            .and_then(|c| c.to_generator())
            .or_status()?;
        *out = Box::into_raw(Box::new(GcGenerator { inner: g }));
        Ok(())
    })
}

/// Writes a generator checkpoint.
///
/// # Safety
/// `g` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gc_generator_save(g: *const GcGenerator, path: *const c_char) -> GcStatus {
    guard(|| {
        let g = deref(g, "generator")?;
        ModelCheckpoint::from_generator(&g.inner)
            .save(path_arg(path)?)
            .or_status()
    })
}

/// Releases a generator; null is ignored.
///
/// # Safety
/// `g` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gc_generator_free(g: *mut GcGenerator) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Latent size, output resolution, trainable parameter count and FLOPs estimate.
///
/// # Safety
/// `g` must come from this library; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn gc_generator_info(
    g: *const GcGenerator,
    latent_dim: *mut usize,
    resolution: *mut usize,
    param_count: *mut usize,
    flops: *mut u64,
) -> GcStatus {
    guard(|| {
        let g = &deref(g, "generator")?.inner;
        let f = flops_estimate(&g.spec).or_status()?;
        for (p, v) in [
            (latent_dim, g.latent_dim()),
            (resolution, g.spec.output_resolution),
            (param_count, g.param_count()),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        if !flops.is_null() {
            *flops = f;
        }
        Ok(())
    })
}

/// Generates `n` images from `n × latent_dim` latents into `out`, which must hold
/// `n × 3 × resolution²` floats.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn gc_generator_generate(
    g: *const GcGenerator,
    z: *const f32,
    n: usize,
    out: *mut f32,
) -> GcStatus {
    guard(|| {
        let g = &deref(g, "generator")?.inner;
        let d = g.latent_dim();
        let z = Tensor::from_vec(&[n, d], slice(z, n * d, "latents")?.to_vec()).or_status()?;
        let img = g.generate(&z).or_status()?;
        if out.is_null() {
            return Err(null("out"));
        }
        std::ptr::copy_nonoverlapping(img.data().as_ptr(), out, img.len());
        Ok(())
    })
}

/// Removes `ratio` of every hidden layer's channels ranked by `metric` and
/// returns the rebuilt generator. Sampled metrics use `num_samples` latents
/// drawn with `seed`; the content-aware metric uses the luminance oracle mask.
///
/// # Safety
/// `g` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gc_generator_prune(
    g: *const GcGenerator,
    metric: GcMetric,
    ratio: f64,
    num_samples: usize,
    seed: u64,
    out: *mut *mut GcGenerator,
) -> GcStatus {
    guard(|| {
        let g = &deref(g, "generator")?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        let ca = CaConfig {
            num_samples,
            seed,
            ..CaConfig::default()
        };
        let saliency =
            compute_saliency(g, metric.into(), &OracleMask::default(), &ca).or_status()?;
        let pruned = select_channels(&saliency, ratio)
            .and_then(|plan| remove_channels(g, &plan))
            .or_status()?;
        *out = Box::into_raw(Box::new(GcGenerator { inner: pruned }));
        Ok(())
    })
}

/// The feature network compiled into the library.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gc_extractor_bundled(out: *mut *mut GcExtractor) -> GcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(GcExtractor {
            inner: FeatureExtractor::bundled(),
        }));
        Ok(())
    })
}

/// Releases an extractor; null is ignored.
///
/// # Safety
/// `e` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gc_extractor_free(e: *mut GcExtractor) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// FID between two image sets of resolution `h × w`.
///
/// # Safety
/// `a` and `b` must hold `n_a` and `n_b` images; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gc_fid(
    e: *const GcExtractor,
    a: *const f32,
    n_a: usize,
    b: *const f32,
    n_b: usize,
    h: usize,
    w: usize,
    out: *mut f64,
) -> GcStatus {
    guard(|| {
        let e = &deref(e, "extractor")?.inner;
        let a = images(slice(a, n_a * 3 * h * w, "a")?, n_a, h, w)?;
        let b = images(slice(b, n_b * 3 * h * w, "b")?, n_b, h, w)?;
        let fa = e.embed(&a, 64).or_status()?.features;
        let fb = e.embed(&b, 64).or_status()?.features;
        let v = fid(&fa, &fb).or_status()?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = v;
        Ok(())
    })
}

/// PSNR in dB between two arrays of `len` values spanning `data_range`.
///
/// # Safety
/// `a` and `b` must hold `len` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gc_psnr(
    a: *const f32,
    b: *const f32,
    len: usize,
    data_range: f64,
    out: *mut f64,
) -> GcStatus {
    guard(|| {
        let ta = Tensor::from_vec(&[len], slice(a, len, "a")?.to_vec()).or_status()?;
        let tb = Tensor::from_vec(&[len], slice(b, len, "b")?.to_vec()).or_status()?;
        let v = psnr(&ta, &tb, data_range).or_status()?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = v;
        Ok(())
    })
}
