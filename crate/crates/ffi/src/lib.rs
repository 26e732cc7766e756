//! C ABI for the altermoma pruning library.
//!
//! Every object crosses the boundary as an opaque handle created and freed
//! by this library. Fallible functions return an [`AmStatus`]; on failure
//! the message is kept per thread and can be read with
//! [`am_last_error_message`]. Panics are caught and reported as
//! [`AmStatus::Panic`].
//!
//! Safety contract for every function: handle arguments are null or a live
//! handle returned by this library and not yet freed; strings are
//! NUL-terminated; buffers are valid for the stated lengths. A handle may be
//! used from one thread at a time.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use altermoma::baselines::Method;
use altermoma::config::ExperimentConfig;
use altermoma::data::MultiModalDataset;
use altermoma::experiment;
use altermoma::{checkpoint, Error, FusionModel, ModalityMasks, Tensor};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Corrupt = 5,
    UnknownMethod = 6,
    Internal = 7,
    Panic = 8,
}

/// Experiment configuration.
pub struct AmConfig(ExperimentConfig);

/// Generated two-modality dataset.
pub struct AmDataset(MultiModalDataset);

/// Fusion model, possibly pruned.
pub struct AmModel(FusionModel);

/// Per-unit importance scores from one pruning run.
pub struct AmLedger(altermoma::altermoma::ImportanceLedger);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> AmStatus {
    match e {
        Error::Config(_) | Error::ModelTooLarge { .. } => AmStatus::Config,
        Error::UnknownMethod { .. } => AmStatus::UnknownMethod,
        Error::Io(_) => AmStatus::Io,
        Error::Corrupt { .. } => AmStatus::Corrupt,
        _ => AmStatus::Internal,
    }
}

struct Fail(AmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AmStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside altermoma");
            AmStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(AmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    let slot = borrow_mut(out, "output handle")?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `len - 1` bytes). Returns the full message
/// length in bytes, excluding the terminator.
#[no_mangle]
pub unsafe extern "C" fn am_last_error_message(buf: *mut c_char, len: usize) -> usize {
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

/// Default configuration.
#[no_mangle]
pub extern "C" fn am_config_default() -> *mut AmConfig {
    Box::into_raw(Box::new(AmConfig(ExperimentConfig::default())))
}

/// Parses a TOML configuration.
#[no_mangle]
pub unsafe extern "C" fn am_config_from_toml(
    toml: *const c_char,
    out: *mut *mut AmConfig,
) -> AmStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_toml(text(toml, "toml")?)?;
        put(out, AmConfig(cfg))
    })
}

#[no_mangle]
pub unsafe extern "C" fn am_config_free(cfg: *mut AmConfig) {
    free(cfg)
}

#[no_mangle]
pub unsafe extern "C" fn am_config_set_seed(cfg: *mut AmConfig, seed: u64) -> AmStatus {
    guard(|| {
        borrow_mut(cfg, "config")?.0.seed = seed;
        Ok(())
    })
}

/// Sets the pruning ratio; must lie in `[0, 1)`.
#[no_mangle]
pub unsafe extern "C" fn am_config_set_rho(cfg: *mut AmConfig, rho: f64) -> AmStatus {
    guard(|| {
        altermoma::altermoma::check_rho(rho)?;
        borrow_mut(cfg, "config")?.0.prune.rho = rho;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn am_config_set_structured(
    cfg: *mut AmConfig,
    structured: bool,
) -> AmStatus {
    guard(|| {
        borrow_mut(cfg, "config")?.0.prune.structured = structured;
        Ok(())
    })
}

/// Writes the 64-character hex SHA-256 of the configuration plus a NUL
/// into `buf`, which must hold at least 65 bytes.
#[no_mangle]
pub unsafe extern "C" fn am_config_hash(
    cfg: *const AmConfig,
    buf: *mut c_char,
    len: usize,
) -> AmStatus {
    guard(|| {
        let hash = borrow(cfg, "config")?.0.hash();
        if buf.is_null() {
            return Err(null("buffer"));
        }
        if len <= hash.len() {
            return Err(Fail(
                AmStatus::InvalidArgument,
                format!("buffer needs {} bytes", hash.len() + 1),
            ));
        }
        ptr::copy_nonoverlapping(hash.as_ptr(), buf.cast::<u8>(), hash.len());
        *buf.add(hash.len()) = 0;
        Ok(())
    })
}

/// Generates the dataset described by the configuration.
#[no_mangle]
pub unsafe extern "C" fn am_dataset_generate(
    cfg: *const AmConfig,
    out: *mut *mut AmDataset,
) -> AmStatus {
    guard(|| {
        let ds = experiment::dataset(&borrow(cfg, "config")?.0)?;
        put(out, AmDataset(ds))
    })
}

#[no_mangle]
pub unsafe extern "C" fn am_dataset_free(ds: *mut AmDataset) {
    free(ds)
}

#[no_mangle]
pub unsafe extern "C" fn am_dataset_len(ds: *const AmDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Pretrains the backbones and trains the fusion model for `cfg`.
#[no_mangle]
pub unsafe extern "C" fn am_model_train(cfg: *const AmConfig, out: *mut *mut AmModel) -> AmStatus {
    guard(|| {
        let prepared = experiment::prepare(&borrow(cfg, "config")?.0)?;
        put(out, AmModel(prepared.model))
    })
}

#[no_mangle]
pub unsafe extern "C" fn am_model_load(
    path: *const c_char,
    cfg: *const AmConfig,
    out: *mut *mut AmModel,
) -> AmStatus {
    guard(|| {
        let path = PathBuf::from(text(path, "path")?);
        let model = checkpoint::load(&path, borrow(cfg, "config")?.0.model.loss)?;
        put(out, AmModel(model))
    })
}

#[no_mangle]
pub unsafe extern "C" fn am_model_save(model: *const AmModel, path: *const c_char) -> AmStatus {
    guard(|| {
        let path = PathBuf::from(text(path, "path")?);
        checkpoint::save(&borrow(model, "model")?.0, &path)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn am_model_free(model: *mut AmModel) {
    free(model)
}

/// Number of scalar parameters.
#[no_mangle]
pub unsafe extern "C" fn am_model_num_params(model: *const AmModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.num_scalars())
}

/// Number of scalar parameters whose mask is 1.
#[no_mangle]
pub unsafe extern "C" fn am_model_kept_params(model: *const AmModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.kept_scalars())
}

/// Input widths of the LiDAR and camera backbones and the output width.
#[no_mangle]
pub unsafe extern "C" fn am_model_dims(
    model: *const AmModel,
    in_lidar: *mut usize,
    in_camera: *mut usize,
    out: *mut usize,
) -> AmStatus {
    guard(|| {
        let a = borrow(model, "model")?.0.arch();
        *borrow_mut(in_lidar, "in_lidar")? = a.in_lidar;
        *borrow_mut(in_camera, "in_camera")? = a.in_camera;
        *borrow_mut(out, "out")? = a.out;
        Ok(())
    })
}

/// Runs the model on `rows` samples. Inputs and output are row-major;
/// `out` must hold `rows * out_width` values.
#[no_mangle]
pub unsafe extern "C" fn am_model_predict(
    model: *const AmModel,
    x_lidar: *const f64,
    x_camera: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> AmStatus {
    guard(|| {
        let m = &borrow(model, "model")?.0;
        let a = m.arch();
        if rows == 0 {
            return Err(Fail(
                AmStatus::InvalidArgument,
                "rows must be positive".into(),
            ));
        }
        if out_len < rows * a.out {
            return Err(Fail(
                AmStatus::InvalidArgument,
                format!("output needs {} values", rows * a.out),
            ));
        }
        if x_lidar.is_null() || x_camera.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let xl = std::slice::from_raw_parts(x_lidar, rows * a.in_lidar).to_vec();
        let xc = std::slice::from_raw_parts(x_camera, rows * a.in_camera).to_vec();
        let y = m.predict(
            &Tensor::matrix(rows, a.in_lidar, xl)?,
            &Tensor::matrix(rows, a.in_camera, xc)?,
            ModalityMasks::UNMASKED,
        )?;
        std::slice::from_raw_parts_mut(out, y.len()).copy_from_slice(y.data());
        Ok(())
    })
}

/// Prunes a copy of `model` with `method` ("altermoma", "magnitude",
/// "imp", "snip", "synflow" or "random") at the configured ratio, using
/// `data` for scoring. Returns the pruned model and its ledger.
#[no_mangle]
pub unsafe extern "C" fn am_prune(
    cfg: *const AmConfig,
    model: *const AmModel,
    data: *const AmDataset,
    method: *const c_char,
    out_model: *mut *mut AmModel,
    out_ledger: *mut *mut AmLedger,
) -> AmStatus {
    guard(|| {
        let cfg = &borrow(cfg, "config")?.0;
        let method: Method = text(method, "method")?.parse()?;
        let splits = experiment::splits(cfg, &borrow(data, "dataset")?.0)?;
        let outcome = experiment::prune(
            cfg,
            &borrow(model, "model")?.0,
            &splits.train,
            &splits.val,
            method,
        )?;
        borrow_mut(out_model, "output model")?;
        borrow_mut(out_ledger, "output ledger")?;
        put(out_model, AmModel(outcome.model))?;
        put(out_ledger, AmLedger(outcome.ledger))
    })
}

/// Validation loss of `model` on the validation split of `data`.
#[no_mangle]
pub unsafe extern "C" fn am_model_val_loss(
    cfg: *const AmConfig,
    model: *const AmModel,
    data: *const AmDataset,
    out: *mut f64,
) -> AmStatus {
    guard(|| {
        let splits = experiment::splits(&borrow(cfg, "config")?.0, &borrow(data, "dataset")?.0)?;
        let loss = borrow(model, "model")?
            .0
            .dataset_loss(&splits.val, ModalityMasks::UNMASKED)?;
        *borrow_mut(out, "out")? = loss;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn am_ledger_free(ledger: *mut AmLedger) {
    free(ledger)
}

/// Number of scored units.
#[no_mangle]
pub unsafe extern "C" fn am_ledger_len(ledger: *const AmLedger) -> usize {
    ledger.as_ref().map_or(0, |l| l.0.len())
}

/// Number of units marked as kept.
#[no_mangle]
pub unsafe extern "C" fn am_ledger_kept(ledger: *const AmLedger) -> usize {
    ledger.as_ref().map_or(0, |l| {
        l.0.entries.iter().filter(|e| e.kept == Some(true)).count()
    })
}

/// Writes the ledger as CSV.
#[no_mangle]
pub unsafe extern "C" fn am_ledger_write_csv(
    ledger: *const AmLedger,
    path: *const c_char,
) -> AmStatus {
    guard(|| {
        let path = PathBuf::from(text(path, "path")?);
        let file = std::fs::File::create(&path).map_err(Error::from)?;
        borrow(ledger, "ledger")?
            .0
            .write_csv(std::io::BufWriter::new(file))?;
        Ok(())
    })
}
