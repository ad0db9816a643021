//! C ABI over `laspa-core`: mel features, speaker embeddings from a trained
//! checkpoint, and scoring metrics.
//!
//! Every fallible function returns a [`LaspaStatus`]; on failure the message
//! is available from [`laspa_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use laspa_core::config::RunConfig;
use laspa_core::eval::{self, DcfConfig, ScoreSet};
use laspa_core::features::{mel_spectrogram, MelSpectrogram, Waveform};
use laspa_core::training::{infer_speaker_embedding, load_checkpoint, ModelState};
use laspa_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LaspaStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Shape = 3,
    Input = 4,
    NonFinite = 5,
    Format = 6,
    Checkpoint = 7,
    Io = 8,
    Internal = 9,
}

/// A trained model, ready for speaker-embedding inference.
pub struct LaspaModel {
    state: ModelState,
}

/// A log-mel spectrogram, `n_frames × n_mels`, row-major.
pub struct LaspaMel {
    mel: MelSpectrogram,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> LaspaStatus {
    match e {
        Error::Config(_) => LaspaStatus::Config,
        Error::Shape { .. } => LaspaStatus::Shape,
        Error::NonFinite(_) => LaspaStatus::NonFinite,
        Error::Format { .. } => LaspaStatus::Format,
        Error::Checkpoint(_) => LaspaStatus::Checkpoint,
        Error::Io { .. } => LaspaStatus::Io,
        _ => LaspaStatus::Input,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, converting errors and panics into a status and message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LaspaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LaspaStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null argument: {what}"));
            LaspaStatus::NullArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            LaspaStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::Input(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

/// Message of the last failed call on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn laspa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint trained under the run configuration at `config_path`
/// (null for the defaults). Fails if the checkpoint does not match it.
///
/// # Safety
/// String arguments must be nul-terminated; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn laspa_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out_model: *mut *mut LaspaModel,
) -> LaspaStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        *slot = ptr::null_mut();
        let cfg_path = if config_path.is_null() { None } else { Some(path(config_path, "config_path")?) };
        let cfg = RunConfig::load(cfg_path.as_deref(), &[])?;
        let state = load_checkpoint(&path(checkpoint_path, "checkpoint_path")?, &cfg.model())?;
        *slot = Box::into_raw(Box::new(LaspaModel { state }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`laspa_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn laspa_model_free(model: *mut LaspaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width of the model; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn laspa_model_embed_dim(model: *const LaspaModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.config.encoder.embed_dim)
}

/// Mel-band count the model expects; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn laspa_model_n_mels(model: *const LaspaModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.config.encoder.n_mels)
}

/// Speaker embedding of a row-major `n_frames × n_mels` log-mel matrix,
/// written to `out` (`out_len` must equal the embedding width).
///
/// # Safety
/// `frames` must hold `n_frames * n_mels` floats; `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn laspa_model_embed(
    model: *const LaspaModel,
    frames: *const f32,
    n_frames: usize,
    n_mels: usize,
    out_values: *mut f64,
    out_len: usize,
) -> LaspaStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        let total = n_frames.checked_mul(n_mels).ok_or_else(|| Error::Input("frame count overflows".into()))?;
        let data = slice(frames, total, "frames")?.to_vec();
        let mel = MelSpectrogram::from_frames(n_frames, n_mels, data)?;
        let e = infer_speaker_embedding(&m.state, &mel)?;
        if out_len != e.len() {
            return Err(Error::Shape { what: "embedding output".into(), expected: e.len(), got: out_len }.into());
        }
        if out_values.is_null() {
            return Err(Failure::Null("out_values"));
        }
        std::slice::from_raw_parts_mut(out_values, out_len).copy_from_slice(&e.values);
        Ok(())
    })
}

/// Log-mel spectrogram of mono samples under the default front end;
/// audio at other rates is resampled first.
///
/// # Safety
/// `samples` must hold `n_samples` floats; `out_mel` must be writable.
#[no_mangle]
pub unsafe extern "C" fn laspa_mel_compute(
    samples: *const f32,
    n_samples: usize,
    sample_rate: u32,
    out_mel: *mut *mut LaspaMel,
) -> LaspaStatus {
    guard(|| {
        let slot = out(out_mel, "out_mel")?;
        *slot = ptr::null_mut();
        let cfg = laspa_core::features::FeatureConfig::default();
        let mut wave = Waveform::new(slice(samples, n_samples, "samples")?.to_vec(), sample_rate)?;
        if sample_rate != cfg.sample_rate_hz {
            wave = laspa_core::features::resample(&wave, cfg.sample_rate_hz)?;
        }
        let mel = mel_spectrogram(&wave, &cfg)?;
        *slot = Box::into_raw(Box::new(LaspaMel { mel }));
        Ok(())
    })
}

/// # Safety
/// `mel` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn laspa_mel_n_frames(mel: *const LaspaMel) -> usize {
    mel.as_ref().map_or(0, |m| m.mel.n_frames())
}

/// # Safety
/// `mel` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn laspa_mel_n_mels(mel: *const LaspaMel) -> usize {
    mel.as_ref().map_or(0, |m| m.mel.n_mels())
}

/// Row-major frame data, valid while the handle lives; null for a null handle.
///
/// # Safety
/// `mel` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn laspa_mel_data(mel: *const LaspaMel) -> *const f32 {
    mel.as_ref().map_or(ptr::null(), |m| m.mel.frames().as_ptr())
}

/// # Safety
/// `mel` must come from [`laspa_mel_compute`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn laspa_mel_free(mel: *mut LaspaMel) {
    if !mel.is_null() {
        drop(Box::from_raw(mel));
    }
}

/// Cosine similarity of two equal-length vectors.
///
/// # Safety
/// `a` and `b` must hold `len` doubles; `out_score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn laspa_cosine(a: *const f64, b: *const f64, len: usize, out_score: *mut f64) -> LaspaStatus {
    guard(|| {
        let o = out(out_score, "out_score")?;
        *o = eval::cosine_slice(slice(a, len, "a")?, slice(b, len, "b")?)?;
        Ok(())
    })
}

unsafe fn score_set(t: *const f64, nt: usize, n: *const f64, nn: usize) -> Result<ScoreSet, Failure> {
    Ok(ScoreSet::new(slice(t, nt, "target_scores")?.to_vec(), slice(n, nn, "nontarget_scores")?.to_vec()))
}

/// Equal error rate in percent.
///
/// # Safety
/// Score arrays must hold the stated counts; `out_eer` must be writable.
#[no_mangle]
pub unsafe extern "C" fn laspa_eer(
    target_scores: *const f64,
    n_target: usize,
    nontarget_scores: *const f64,
    n_nontarget: usize,
    out_eer: *mut f64,
) -> LaspaStatus {
    guard(|| {
        let o = out(out_eer, "out_eer")?;
        *o = eval::eer(&score_set(target_scores, n_target, nontarget_scores, n_nontarget)?)?;
        Ok(())
    })
}

/// Normalized minimum detection cost at the given operating point.
///
/// # Safety
/// Score arrays must hold the stated counts; `out_dcf` must be writable.
#[no_mangle]
pub unsafe extern "C" fn laspa_min_dcf(
    target_scores: *const f64,
    n_target: usize,
    nontarget_scores: *const f64,
    n_nontarget: usize,
    p_target: f64,
    c_miss: f64,
    c_fa: f64,
    out_dcf: *mut f64,
) -> LaspaStatus {
    guard(|| {
        let o = out(out_dcf, "out_dcf")?;
        let cfg = DcfConfig { p_target, c_miss, c_fa };
        *o = eval::min_dcf(&score_set(target_scores, n_target, nontarget_scores, n_nontarget)?, &cfg)?;
        Ok(())
    })
}
