//! C ABI for kcrec-core.
//!
//! Every fallible call returns a [`KcrecStatus`]; on failure the message is
//! available from [`kcrec_last_error`] on the same thread. Models are opaque
//! handles created by [`kcrec_model_open`] and released with
//! [`kcrec_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use kcrec_core::checkpoint::Checkpoint;
use kcrec_core::config::RunConfig;
use kcrec_core::error::Error;
use kcrec_core::hin::{synth_generate, SynthConfig};
use kcrec_core::pipeline::{self, Prepared};
use kcrec_core::tensor::DenseMatrix;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KcrecStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Usage = 3,
    Config = 4,
    Shape = 5,
    Schema = 6,
    Domain = 7,
    Degenerate = 8,
    Format = 9,
    Compatibility = 10,
    Numerical = 11,
    Io = 12,
    Panic = 13,
}

impl From<&Error> for KcrecStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => KcrecStatus::Shape,
            Error::Usage(_) => KcrecStatus::Usage,
            Error::Schema { .. } => KcrecStatus::Schema,
            Error::Domain(_) => KcrecStatus::Domain,
            Error::Degenerate(_) => KcrecStatus::Degenerate,
            Error::Config(_) => KcrecStatus::Config,
            Error::Format { .. } => KcrecStatus::Format,
            Error::Compatibility(_) => KcrecStatus::Compatibility,
            Error::Numerical(_) => KcrecStatus::Numerical,
            Error::Io { .. } => KcrecStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Lib(Error),
    Null(&'static str),
    Utf8(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KcrecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            KcrecStatus::Ok
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            KcrecStatus::from(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("`{what}` is null"));
            KcrecStatus::NullArgument
        }
        Ok(Err(Failure::Utf8(what))) => {
            set_error(format!("`{what}` is not valid UTF-8"));
            KcrecStatus::InvalidUtf8
        }
        Err(_) => {
            set_error("internal panic".into());
            KcrecStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8(what))
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn opt_text<'a>(p: *const c_char, what: &'static str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, what).map(Some)
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn kcrec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kcrec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Planted-group dataset parameters.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct KcrecSynthParams {
    pub groups: usize,
    pub users_per_group: usize,
    pub concepts_per_group: usize,
    pub courses: usize,
    pub videos: usize,
    pub teachers: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub seed: u64,
}

/// Fills `out` with the default dataset parameters.
///
/// # Safety
/// `out` must be null or point to writable memory for one struct.
#[no_mangle]
pub unsafe extern "C" fn kcrec_synth_defaults(out: *mut KcrecSynthParams) -> KcrecStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let d = SynthConfig::default();
        *out = KcrecSynthParams {
            groups: d.groups,
            users_per_group: d.users_per_group,
            concepts_per_group: d.concepts_per_group,
            courses: d.courses,
            videos: d.videos,
            teachers: d.teachers,
            p_in: d.p_in,
            p_out: d.p_out,
            seed: d.seed,
        };
        Ok(())
    })
}

/// Writes `schema.txt` and `edges.tsv` into the existing directory `out_dir`.
///
/// # Safety
/// `params` must point to a valid struct; `out_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kcrec_synth(params: *const KcrecSynthParams, out_dir: *const c_char) -> KcrecStatus {
    guard(|| {
        let p = params.as_ref().ok_or(Failure::Null("params"))?;
        let dir = text(out_dir, "out_dir")?;
        let cfg = SynthConfig {
            groups: p.groups,
            users_per_group: p.users_per_group,
            concepts_per_group: p.concepts_per_group,
            courses: p.courses,
            videos: p.videos,
            teachers: p.teachers,
            p_in: p.p_in,
            p_out: p.p_out,
            seed: p.seed,
        };
        synth_generate(&cfg, &PathBuf::from(dir))?;
        Ok(())
    })
}

/// Trains on the dataset in `data_dir` and writes `model.ckpt`, `loss.tsv`
/// and `config.txt` into `out_dir` (created if missing). `config` is a
/// `key = value` document or null for defaults.
///
/// # Safety
/// `data_dir` and `out_dir` must be NUL-terminated strings; `config` may be null.
#[no_mangle]
pub unsafe extern "C" fn kcrec_train(data_dir: *const c_char, config: *const c_char, out_dir: *const c_char) -> KcrecStatus {
    guard(|| {
        let data = PathBuf::from(text(data_dir, "data_dir")?);
        let out = PathBuf::from(text(out_dir, "out_dir")?);
        let mut cfg = RunConfig::default();
        if let Some(t) = opt_text(config, "config")? {
            cfg.apply_text(t)?;
        }
        cfg.data = Some(data.clone());
        cfg.validate()?;
        let (hin, features, _) = pipeline::load_dataset(&data, &cfg)?;
        let run = pipeline::train_run(&hin, features, &cfg)?;
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        run.checkpoint(&hin).save(&out.join("model.ckpt"))?;
        for (name, body) in [("loss.tsv", run.outcome.trace_text()), ("config.txt", cfg.echo())] {
            let path = out.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    })
}

/// A trained model bound to its dataset.
pub struct KcrecModel {
    ckpt: Checkpoint,
    prepared: Prepared,
    scores: DenseMatrix,
}

/// Loads a checkpoint together with the dataset it was trained on.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kcrec_model_open(
    checkpoint: *const c_char,
    data_dir: *const c_char,
    out: *mut *mut KcrecModel,
) -> KcrecStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = std::ptr::null_mut();
        let ckpt = Checkpoint::load(&PathBuf::from(text(checkpoint, "checkpoint")?))?;
        let (hin, _) = pipeline::load_graph(&PathBuf::from(text(data_dir, "data_dir")?))?;
        let prepared = pipeline::restore(&ckpt, &hin)?;
        let scores = ckpt.model.score_matrix(&prepared.inputs, &ckpt.prototypes)?;
        *out = Box::into_raw(Box::new(KcrecModel { ckpt, prepared, scores }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`kcrec_model_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kcrec_model_free(model: *mut KcrecModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of users and concepts.
///
/// # Safety
/// `model` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn kcrec_model_counts(
    model: *const KcrecModel,
    users: *mut usize,
    concepts: *mut usize,
) -> KcrecStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        *users.as_mut().ok_or(Failure::Null("users"))? = m.prepared.split.n_users;
        *concepts.as_mut().ok_or(Failure::Null("concepts"))? = m.prepared.split.n_items;
        Ok(())
    })
}

/// Predicted preference of `user` for `concept`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kcrec_model_score(
    model: *const KcrecModel,
    user: usize,
    concept: usize,
    out: *mut f64,
) -> KcrecStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let (nu, ni) = m.scores.shape();
        if user >= nu || concept >= ni {
            return Err(Error::Usage(format!("({user}, {concept}) outside {nu} users × {ni} concepts")).into());
        }
        *out = m.scores.get(user, concept);
        Ok(())
    })
}

/// Writes up to `capacity` unseen concepts for `user`, best first, into
/// `concepts` and (when non-null) `scores`; `written` receives the count.
///
/// # Safety
/// `concepts` must hold `capacity` elements, `scores` likewise when non-null.
#[no_mangle]
pub unsafe extern "C" fn kcrec_model_recommend(
    model: *const KcrecModel,
    user: usize,
    capacity: usize,
    concepts: *mut usize,
    scores: *mut f64,
    written: *mut usize,
) -> KcrecStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        let written = written.as_mut().ok_or(Failure::Null("written"))?;
        *written = 0;
        if capacity > 0 && concepts.is_null() {
            return Err(Failure::Null("concepts"));
        }
        let list = pipeline::recommend(&m.scores, &m.prepared.split, user, capacity)?;
        for (i, &(c, s)) in list.iter().enumerate() {
            *concepts.add(i) = c;
            if !scores.is_null() {
                *scores.add(i) = s;
            }
        }
        *written = list.len();
        Ok(())
    })
}

/// Aggregate ranking metrics at cutoffs 5, 10 and 20.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KcrecMetrics {
    pub hr5: f64,
    pub hr10: f64,
    pub hr20: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub ndcg20: f64,
    pub mrr: f64,
    pub cases: usize,
    pub skipped: usize,
}

/// Evaluates the held-out split; writes the full report to `report_path`
/// when it is non-null.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable; `report_path` may be null.
#[no_mangle]
pub unsafe extern "C" fn kcrec_model_evaluate(
    model: *const KcrecModel,
    report_path: *const c_char,
    out: *mut KcrecMetrics,
) -> KcrecStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let path = opt_text(report_path, "report_path")?;
        let r = pipeline::evaluate_model(&m.ckpt.model, &m.ckpt.prototypes, &m.prepared)?;
        if let Some(p) = path {
            std::fs::write(p, r.to_text()).map_err(|e| Error::io(p, e))?;
        }
        *out = KcrecMetrics {
            hr5: r.hr(5),
            hr10: r.hr(10),
            hr20: r.hr(20),
            ndcg5: r.ndcg(5),
            ndcg10: r.ndcg(10),
            ndcg20: r.ndcg(20),
            mrr: r.mrr(),
            cases: r.cases.len(),
            skipped: r.skipped,
        };
        Ok(())
    })
}
