//! C ABI for the `mast` library.
//!
//! Every entry point returns a [`MastStatus`]; on failure the message is kept
//! per thread and read back with [`mast_last_error`]. Models are opaque
//! handles released with [`mast_model_free`]. Buffers are caller-owned and
//! their lengths are passed in elements.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mast::augment::OpId;
use mast::checkpoint::Checkpoint;
use mast::config::Config;
use mast::data::{self, Factor, Layout, SyntheticSpec};
use mast::eval;
use mast::image::Image;
use mast::model::Model;
use mast::tensor::DType;
use mast::MastError;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MastStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Dimension = 6,
    Domain = 7,
    Contract = 8,
    Numeric = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// A trained model loaded from a checkpoint.
pub struct MastModel {
    inner: Inner,
    augmentations: Vec<OpId>,
}

enum Inner {
    F32(Model<f32>),
    F64(Model<f64>),
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(MastStatus, String);

impl From<MastError> for Failure {
    fn from(e: MastError) -> Self {
        let status = match &e {
            MastError::Config { .. } => MastStatus::Config,
            MastError::Io { .. } => MastStatus::Io,
            MastError::Format(_) | MastError::CorruptRecord { .. } | MastError::Json(_) => MastStatus::Format,
            MastError::Dimension(_) => MastStatus::Dimension,
            MastError::Domain(_) => MastStatus::Domain,
            MastError::Contract(_) => MastStatus::Contract,
            MastError::NonFinite { .. } | MastError::Diverged { .. } => MastStatus::Numeric,
        };
        Failure(status, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> MastStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MastStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            MastStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MastStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MastStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const MastModel) -> Result<&'a MastModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err(Failure(
            MastStatus::BufferTooSmall,
            format!("`{what}` holds {len} elements, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn images_from(pixels: *const f32, n: usize, height: usize, width: usize) -> Result<Vec<Image>, Failure> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    if n == 0 {
        return Err(Failure(MastStatus::Contract, "empty image batch".into()));
    }
    let per = 3 * height * width;
    let all = std::slice::from_raw_parts(pixels, n * per);
    all.chunks(per)
        .map(|c| Image::new(height, width, c.to_vec()).map_err(Failure::from))
        .collect()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mast_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// plus one, so a zero-length probe tells the caller how much to allocate.
///
/// # Safety
/// `buf` must point to `len` writable bytes or be null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn mast_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}

/// Parses and validates a JSON config.
///
/// # Safety
/// `json` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mast_config_validate(json: *const c_char) -> MastStatus {
    guard(|| {
        Config::from_json(text(json, "json")?)?;
        Ok(())
    })
}

/// Writes a synthetic dataset of `n` images of side `side` labeled by
/// `label_factor` (`shape`, `hue`, `scale` or `position`) to `dir`.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mast_dataset_generate(
    dir: *const c_char,
    n: usize,
    side: usize,
    label_factor: *const c_char,
    seed: u64,
) -> MastStatus {
    guard(|| {
        let dir = text(dir, "dir")?;
        let spec = SyntheticSpec {
            n_samples: n,
            side,
            label_factor: Factor::parse(text(label_factor, "label_factor")?)?,
        };
        let ds = data::generate(&spec, seed)?;
        data::save(&ds, Path::new(dir), Layout::Packed)?;
        Ok(())
    })
}

/// Pretrains with the config file at `config_path` and writes the final
/// checkpoint path (NUL-terminated) into `ckpt_out`.
///
/// # Safety
/// `config_path` must be a valid NUL-terminated string and `ckpt_out` must
/// point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mast_pretrain(config_path: *const c_char, ckpt_out: *mut c_char, len: usize) -> MastStatus {
    guard(|| {
        let config = Config::load(Path::new(text(config_path, "config_path")?))?;
        let path = match config.float_width {
            DType::F32 => mast::trainer::pretrain::<f32>(&config)?,
            DType::F64 => mast::trainer::pretrain::<f64>(&config)?,
        };
        let s = path.to_string_lossy();
        let out = out_slice(ckpt_out, len, s.len() + 1, "ckpt_out")?;
        for (o, b) in out.iter_mut().zip(s.bytes()) {
            *o = b as c_char;
        }
        out[s.len()] = 0;
        Ok(())
    })
}

/// Loads a checkpoint. The handle must be released with [`mast_model_free`].
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mast_model_load(path: *const c_char, out: *mut *mut MastModel) -> MastStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ck = Checkpoint::load(Path::new(text(path, "path")?))?;
        let inner = match ck.meta.dtype {
            DType::F32 => Inner::F32(ck.model()?),
            DType::F64 => Inner::F64(ck.model()?),
        };
        let handle = MastModel {
            inner,
            augmentations: ck.meta.augmentations.clone(),
        };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`mast_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mast_model_free(model: *mut MastModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding dimension, number of masks and representation width.
///
/// # Safety
/// `model` must be a live handle; outputs may be null to skip them.
#[no_mangle]
pub unsafe extern "C" fn mast_model_dims(
    model: *const MastModel,
    embed_dim: *mut usize,
    num_masks: *mut usize,
    repr_dim: *mut usize,
) -> MastStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (d, k, r) = match &m.inner {
            Inner::F32(x) => (x.embed_dim(), x.num_masks(), x.config.repr_dim()),
            Inner::F64(x) => (x.embed_dim(), x.num_masks(), x.config.repr_dim()),
        };
        for (p, v) in [(embed_dim, d), (num_masks, k), (repr_dim, r)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies the `d × K` mask matrix, row-major, into `out`.
///
/// # Safety
/// `model` must be a live handle and `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn mast_model_masks(model: *const MastModel, out: *mut f32, len: usize) -> MastStatus {
    guard(|| {
        let m = model_ref(model)?;
        let values: Vec<f32> = match &m.inner {
            Inner::F32(x) => x.masks.masks().data().to_vec(),
            Inner::F64(x) => x.masks.masks().data().iter().map(|&v| v as f32).collect(),
        };
        out_slice(out, len, values.len(), "out")?.copy_from_slice(&values);
        Ok(())
    })
}

/// Runs `n` images (`[n, 3, height, width]`, values in `[0, 1]`) through the
/// model and writes the means and variances, each `[n, d]`.
///
/// # Safety
/// `pixels` must hold `n * 3 * height * width` floats; `mean_out` and
/// `var_out` must each hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn mast_model_embed(
    model: *const MastModel,
    pixels: *const f32,
    n: usize,
    height: usize,
    width: usize,
    mean_out: *mut f32,
    var_out: *mut f32,
    len: usize,
) -> MastStatus {
    guard(|| {
        let m = model_ref(model)?;
        let images = images_from(pixels, n, height, width)?;
        let (mean, var): (Vec<f32>, Vec<f32>) = match &m.inner {
            Inner::F32(x) => {
                let e = x.embed(&images)?;
                (e.mean.data().to_vec(), e.var.data().to_vec())
            }
            Inner::F64(x) => {
                let e = x.embed(&images)?;
                (
                    e.mean.data().iter().map(|&v| v as f32).collect(),
                    e.var.data().iter().map(|&v| v as f32).collect(),
                )
            }
        };
        out_slice(mean_out, len, mean.len(), "mean_out")?.copy_from_slice(&mean);
        out_slice(var_out, len, var.len(), "var_out")?.copy_from_slice(&var);
        Ok(())
    })
}

/// Uncertainty scores in `[0, 1]` (covariance traces rescaled over the
/// batch) for `n` images, written to `out`.
///
/// # Safety
/// As [`mast_model_embed`]; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mast_model_uncertainty(
    model: *const MastModel,
    pixels: *const f32,
    n: usize,
    height: usize,
    width: usize,
    out: *mut f64,
    len: usize,
) -> MastStatus {
    guard(|| {
        let m = model_ref(model)?;
        let images = images_from(pixels, n, height, width)?;
        let scores = match &m.inner {
            Inner::F32(x) => eval::uncertainty_scores(x, &images)?,
            Inner::F64(x) => eval::uncertainty_scores(x, &images)?,
        };
        out_slice(out, len, scores.len(), "out")?.copy_from_slice(&scores);
        Ok(())
    })
}

/// Cosine similarity between mask columns, `K × K` row-major.
///
/// # Safety
/// `model` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mast_model_mask_correlation(model: *const MastModel, out: *mut f64, len: usize) -> MastStatus {
    guard(|| {
        let m = model_ref(model)?;
        let c = match &m.inner {
            Inner::F32(x) => eval::mask_correlation(&x.masks, &m.augmentations)?,
            Inner::F64(x) => eval::mask_correlation(&x.masks, &m.augmentations)?,
        };
        let flat: Vec<f64> = c.matrix.concat();
        out_slice(out, len, flat.len(), "out")?.copy_from_slice(&flat);
        Ok(())
    })
}
