//! C ABI over the `pcrp` library.
//!
//! Every fallible function returns a [`PcrpStatus`]; on failure the message
//! is available from [`pcrp_last_error_message`] on the same thread. Handles
//! are opaque and must be released with their `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use pcrp::checkpoint::Checkpoint;
use pcrp::data::{synth_generate, Dataset, Manifest, SynthSpec};
use pcrp::eval::{extract_encodings, probe_eval, probe_train, stratified_split, ProbeConfig};
use pcrp::preprocess::preprocess_dataset;
use pcrp::trainer::{encode_dataset, train, Precision, TrainConfig, TrainOptions};
use pcrp::PcrpError;

/// Result codes shared by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcrpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Shape = 5,
    DegeneratePose = 6,
    Checkpoint = 7,
    Numeric = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Loaded or generated skeleton dataset.
pub struct PcrpDataset {
    inner: Dataset,
}

/// Trained encoder restored from a checkpoint.
pub struct PcrpEncoder {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &PcrpError) -> PcrpStatus {
    match err {
        PcrpError::Shape { .. } => PcrpStatus::Shape,
        PcrpError::Parse { .. } | PcrpError::Schema(_) | PcrpError::Json(_) => PcrpStatus::Parse,
        PcrpError::DegeneratePose { .. } => PcrpStatus::DegeneratePose,
        PcrpError::Normalization { .. } | PcrpError::Domain(_) => PcrpStatus::Numeric,
        PcrpError::Contract(_) | PcrpError::Param(_) | PcrpError::Unlabeled(_) => PcrpStatus::InvalidArgument,
        PcrpError::Checkpoint(_) => PcrpStatus::Checkpoint,
        PcrpError::Io { .. } => PcrpStatus::Io,
    }
}

struct Fail(PcrpStatus, String);

impl From<PcrpError> for Fail {
    fn from(e: PcrpError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PcrpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PcrpStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PcrpStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail(PcrpStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(PcrpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(PcrpStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<T>(out: *mut *mut T) -> Result<(), Fail> {
    if out.is_null() {
        Err(Fail(PcrpStatus::NullPointer, "output pointer is null".into()))
    } else {
        Ok(())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pcrp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failed call on this thread, or NULL after a success.
/// Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn pcrp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a JSONL dataset. `manifest_path` may be NULL to use the data path
/// with extension `manifest.json`.
#[no_mangle]
pub unsafe extern "C" fn pcrp_dataset_load(
    data_path: *const c_char,
    manifest_path: *const c_char,
    out: *mut *mut PcrpDataset,
) -> PcrpStatus {
    guard(|| {
        out_ptr(out)?;
        let data = path_arg(data_path, "data_path")?;
        let manifest = if manifest_path.is_null() {
            data.with_extension("manifest.json")
        } else {
            path_arg(manifest_path, "manifest_path")?
        };
        let inner = Dataset::load_jsonl(&data, Manifest::load(manifest)?)?;
        *out = Box::into_raw(Box::new(PcrpDataset { inner }));
        Ok(())
    })
}

/// Generates the labeled sinusoidal synthetic dataset.
#[no_mangle]
pub unsafe extern "C" fn pcrp_dataset_synth(
    n_per_class: usize,
    classes: usize,
    frames: usize,
    joints: usize,
    noise_sigma: f64,
    seed: u64,
    out: *mut *mut PcrpDataset,
) -> PcrpStatus {
    guard(|| {
        out_ptr(out)?;
        let inner = synth_generate(&SynthSpec {
            n_per_class,
            classes,
            frames,
            joints,
            noise_sigma,
            seed,
        })?;
        *out = Box::into_raw(Box::new(PcrpDataset { inner }));
        Ok(())
    })
}

/// Writes a dataset as JSONL plus manifest. `manifest_path` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn pcrp_dataset_save(
    dataset: *const PcrpDataset,
    data_path: *const c_char,
    manifest_path: *const c_char,
) -> PcrpStatus {
    guard(|| {
        let ds = &deref(dataset, "dataset")?.inner;
        let data = path_arg(data_path, "data_path")?;
        let manifest = if manifest_path.is_null() {
            data.with_extension("manifest.json")
        } else {
            path_arg(manifest_path, "manifest_path")?
        };
        ds.save_jsonl(&data)?;
        ds.manifest().save(manifest)?;
        Ok(())
    })
}

/// New dataset in view-invariant body coordinates.
#[no_mangle]
pub unsafe extern "C" fn pcrp_dataset_preprocess(
    dataset: *const PcrpDataset,
    out: *mut *mut PcrpDataset,
) -> PcrpStatus {
    guard(|| {
        out_ptr(out)?;
        let inner = preprocess_dataset(&deref(dataset, "dataset")?.inner)?;
        *out = Box::into_raw(Box::new(PcrpDataset { inner }));
        Ok(())
    })
}

/// Number of sequences; 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn pcrp_dataset_len(dataset: *const PcrpDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

/// Joints per frame; 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn pcrp_dataset_joint_count(dataset: *const PcrpDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.joint_count)
}

/// Copies labels into `out` (length `len`, at least the dataset length);
/// unlabeled sequences are written as -1.
#[no_mangle]
pub unsafe extern "C" fn pcrp_dataset_labels(dataset: *const PcrpDataset, out: *mut i64, len: usize) -> PcrpStatus {
    guard(|| {
        let ds = &deref(dataset, "dataset")?.inner;
        if out.is_null() {
            return Err(Fail(PcrpStatus::NullPointer, "out is null".into()));
        }
        if len < ds.len() {
            return Err(Fail(
                PcrpStatus::BufferTooSmall,
                format!("buffer holds {len} labels, dataset has {}", ds.len()),
            ));
        }
        let buf = std::slice::from_raw_parts_mut(out, ds.len());
        for (b, s) in buf.iter_mut().zip(&ds.sequences) {
            *b = s.label.map_or(-1, |l| l as i64);
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pcrp_dataset_free(dataset: *mut PcrpDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Pretrains an encoder and writes the checkpoint to `checkpoint_path`.
/// `config_json` holds a training config (NULL for defaults). When `out` is
/// non-NULL it receives the trained encoder.
#[no_mangle]
pub unsafe extern "C" fn pcrp_train(
    dataset: *const PcrpDataset,
    config_json: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut PcrpEncoder,
) -> PcrpStatus {
    guard(|| {
        let ds = &deref(dataset, "dataset")?.inner;
        let cfg: TrainConfig = if config_json.is_null() {
            TrainConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| Fail(PcrpStatus::InvalidArgument, "config_json is not UTF-8".into()))?;
            serde_json::from_str(text).map_err(PcrpError::from)?
        };
        let checkpoint = path_arg(checkpoint_path, "checkpoint_path")?;
        train(
            ds,
            &cfg,
            &TrainOptions {
                checkpoint: checkpoint.clone(),
                ..TrainOptions::default()
            },
        )?;
        if !out.is_null() {
            let ckpt = Checkpoint::load(&checkpoint)?;
            *out = Box::into_raw(Box::new(PcrpEncoder { ckpt }));
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pcrp_encoder_load(checkpoint_path: *const c_char, out: *mut *mut PcrpEncoder) -> PcrpStatus {
    guard(|| {
        out_ptr(out)?;
        let ckpt = Checkpoint::load(path_arg(checkpoint_path, "checkpoint_path")?)?;
        ckpt.config()?;
        *out = Box::into_raw(Box::new(PcrpEncoder { ckpt }));
        Ok(())
    })
}

/// Encoding width C; 0 for NULL or an unreadable config.
#[no_mangle]
pub unsafe extern "C" fn pcrp_encoder_dim(encoder: *const PcrpEncoder) -> usize {
    encoder
        .as_ref()
        .and_then(|e| e.ckpt.config().ok())
        .map_or(0, |c| c.hidden_dim)
}

/// Final-step encodings of every sequence, row-major N×C, into `out`
/// (length `len` ≥ N·C).
#[no_mangle]
pub unsafe extern "C" fn pcrp_encoder_encode(
    encoder: *const PcrpEncoder,
    dataset: *const PcrpDataset,
    out: *mut f64,
    len: usize,
) -> PcrpStatus {
    guard(|| {
        let ckpt = &deref(encoder, "encoder")?.ckpt;
        let ds = &deref(dataset, "dataset")?.inner;
        if out.is_null() {
            return Err(Fail(PcrpStatus::NullPointer, "out is null".into()));
        }
        let cfg = ckpt.config()?;
        let need = ds.len() * cfg.hidden_dim;
        if len < need {
            return Err(Fail(
                PcrpStatus::BufferTooSmall,
                format!("buffer holds {len} values, {need} needed"),
            ));
        }
        let fixed = ds.fix_length(cfg.t_fixed)?;
        let data = match cfg.precision {
            Precision::F32 => encode_dataset(&fixed, &ckpt.models::<f32>()?.0)?,
            Precision::F64 => encode_dataset(&fixed, &ckpt.models::<f64>()?.0)?,
        };
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(&data);
        Ok(())
    })
}

/// Linear-probe accuracy on a stratified split of a labeled dataset.
#[no_mangle]
pub unsafe extern "C" fn pcrp_linear_probe(
    encoder: *const PcrpEncoder,
    dataset: *const PcrpDataset,
    train_fraction: f64,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
    accuracy: *mut f64,
) -> PcrpStatus {
    guard(|| {
        let ckpt = &deref(encoder, "encoder")?.ckpt;
        let ds = &deref(dataset, "dataset")?.inner;
        if accuracy.is_null() {
            return Err(Fail(PcrpStatus::NullPointer, "accuracy is null".into()));
        }
        let feats = extract_encodings(ds, ckpt)?;
        let (tr, te) = stratified_split(&feats.labels, train_fraction, seed)?;
        let model = probe_train(
            &feats.subset(&tr),
            &ProbeConfig {
                lr: learning_rate,
                epochs,
                seed,
            },
        )?;
        *accuracy = probe_eval(&model, &feats.subset(&te))?.accuracy;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pcrp_encoder_free(encoder: *mut PcrpEncoder) {
    if !encoder.is_null() {
        drop(Box::from_raw(encoder));
    }
}
