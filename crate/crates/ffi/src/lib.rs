//! C ABI over `lagnh`.
//!
//! Every function returns a [`LagnhStatus`]; on failure the message is
//! available from [`lagnh_last_error`] on the same thread. Matrices cross the
//! boundary item-major: item `i` of a `d`-dimensional feature block occupies
//! `features[i * d .. (i + 1) * d]`. Codes are packed 64-bit words, bit `b`
//! of a code set when its `b`-th sign is +1, `ceil(r / 64)` words per item.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use lagnh::retrieval::{hamming, rank, words_per_code};
use lagnh::{ApDenominator, AuxSemantics, Error, EvalOptions, HashCodes, TrainedModel};
use ndarray::Array2;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LagnhStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Data = 5,
    Shape = 6,
    Parameter = 7,
    Contract = 8,
    Config = 9,
    NonFinite = 10,
    Panic = 11,
}

/// A trained model loaded from a checkpoint.
pub struct LagnhModel {
    inner: TrainedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(LagnhStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => LagnhStatus::Io,
            Error::Format(_) => LagnhStatus::Format,
            Error::Data { .. } => LagnhStatus::Data,
            Error::Shape(_) => LagnhStatus::Shape,
            Error::Parameter(_) => LagnhStatus::Parameter,
            Error::Contract(_) => LagnhStatus::Contract,
            Error::Config(_) => LagnhStatus::Config,
            Error::NonFinite { .. } => LagnhStatus::NonFinite,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LagnhStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LagnhStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LagnhStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(LagnhStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(LagnhStatus::InvalidArgument, msg.into())
}

/// A slice view of `len` elements; `ptr` may be null only when `len == 0`.
unsafe fn view<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn view_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn model_ref<'a>(m: *const LagnhModel) -> Result<&'a TrainedModel, Failure> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

fn codes_from(words: &[u64], r: usize) -> Result<HashCodes, Failure> {
    let n = words.len() / words_per_code(r);
    Ok(HashCodes::from_words(words.to_vec(), r, ids(n))?)
}

/// `n` rows of `c` 0/1 entries, item-major, as the library's `c x n` layout.
fn labels_from(flat: &[u8], n: usize, c: usize) -> Result<AuxSemantics, Failure> {
    Ok(AuxSemantics::new(Array2::from_shape_fn((c, n), |(j, i)| flat[i * c + j]))?)
}

fn words_for(n: usize, r: usize) -> Result<usize, Failure> {
    if r == 0 {
        return Err(invalid("code length must be >= 1"));
    }
    n.checked_mul(words_per_code(r)).ok_or_else(|| invalid("code block too large"))
}

// ---------------------------------------------------------------------------

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lagnh_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// Message of the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next `lagnh_*` call on this thread.
#[no_mangle]
pub extern "C" fn lagnh_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Words per packed code of `r` bits.
#[no_mangle]
pub extern "C" fn lagnh_words_per_code(r: usize) -> usize {
    words_per_code(r)
}

/// Loads a checkpoint. On success `*out` owns a model to be released with
/// [`lagnh_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lagnh_model_load(path: *const c_char, out: *mut *mut LagnhModel) -> LagnhStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let inner = TrainedModel::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(LagnhModel { inner }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`lagnh_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lagnh_model_free(model: *mut LagnhModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// Code length `r`, feature dimension `d` and category count `c`; any of the
/// outputs may be null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn lagnh_model_dims(
    model: *const LagnhModel,
    code_len: *mut usize,
    feature_dim: *mut usize,
    categories: *mut usize,
) -> LagnhStatus {
    guard(|| {
        let m = model_ref(model)?;
        for (p, v) in [(code_len, m.code_len()), (feature_dim, m.feature_dim()), (categories, m.categories())] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Encodes `n` new items against the training graph. `features` is `n x d`
/// and `aux` is `n x c` (0/1), both item-major; an all-zero `aux` row means
/// no known semantics. Writes `n * lagnh_words_per_code(r)` words to `out`,
/// whose capacity `out_len` is checked.
///
/// # Safety
/// The input buffers must hold the stated number of elements and `out` must
/// be writable for `out_len` words.
#[no_mangle]
pub unsafe extern "C" fn lagnh_model_encode(
    model: *const LagnhModel,
    features: *const f32,
    aux: *const u8,
    n: usize,
    out: *mut u64,
    out_len: usize,
) -> LagnhStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (d, c, r) = (m.feature_dim(), m.categories(), m.code_len());
        if n == 0 {
            return Err(invalid("no items to encode"));
        }
        let need = words_for(n, r)?;
        if out_len < need {
            return Err(invalid(format!("output holds {out_len} words, {need} needed")));
        }
        let x = view(features, n * d, "features")?;
        let y = view(aux, n * c, "aux")?;
        if let Some(v) = y.iter().find(|&&v| v > 1) {
            return Err(invalid(format!("aux entries must be 0 or 1, got {v}")));
        }
        let xm = Array2::from_shape_fn((d, n), |(j, i)| f64::from(x[i * d + j]));
        let ym = Array2::from_shape_fn((c, n), |(j, i)| f64::from(y[i * c + j]));
        let codes = m.encode_query(xm.view(), ym.view(), ids(n))?;
        view_mut(out, need, "out")?.copy_from_slice(codes.words());
        Ok(())
    })
}

/// Hamming distance between two codes of `words` words each.
///
/// # Safety
/// `a` and `b` must hold `words` words; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lagnh_hamming(a: *const u64, b: *const u64, words: usize, out: *mut u32) -> LagnhStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = hamming(view(a, words, "a")?, view(b, words, "b")?)?;
        Ok(())
    })
}

/// Ranks `n_db` database codes of `r` bits by Hamming distance to one query
/// (ties by ascending index) and writes the `n_db` indices to `out`.
///
/// # Safety
/// `query` must hold one code, `db` `n_db` codes and `out` `n_db` slots.
#[no_mangle]
pub unsafe extern "C" fn lagnh_rank(
    query: *const u64,
    db: *const u64,
    n_db: usize,
    r: usize,
    out: *mut usize,
) -> LagnhStatus {
    guard(|| {
        let w = words_for(1, r)?;
        let q = view(query, w, "query")?;
        let db = codes_from(view(db, words_for(n_db, r)?, "db")?, r)?;
        let order = rank(q, &db)?;
        view_mut(out, n_db, "out")?.copy_from_slice(&order);
        Ok(())
    })
}

/// MAP@K of `n_q` query codes against `n_db` database codes, all `r` bits.
/// Labels are item-major 0/1 rows of `c` entries; relevance means sharing a
/// label. `retrieved_denominator` non-zero divides each AP by the relevant
/// items found in the top K instead of `min(R, K)`.
///
/// # Safety
/// Buffers must hold the stated number of elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lagnh_map_at_k(
    query_codes: *const u64,
    n_q: usize,
    db_codes: *const u64,
    n_db: usize,
    r: usize,
    query_labels: *const u8,
    db_labels: *const u8,
    c: usize,
    k: usize,
    retrieved_denominator: i32,
    out: *mut f64,
) -> LagnhStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let q = codes_from(view(query_codes, words_for(n_q, r)?, "query_codes")?, r)?;
        let db = codes_from(view(db_codes, words_for(n_db, r)?, "db_codes")?, r)?;
        let ql = labels_from(view(query_labels, n_q * c, "query_labels")?, n_q, c)?;
        let dl = labels_from(view(db_labels, n_db * c, "db_labels")?, n_db, c)?;
        let opts = EvalOptions {
            k,
            curve_points: Vec::new(),
            denominator: if retrieved_denominator != 0 {
                ApDenominator::Retrieved
            } else {
                ApDenominator::MinRk
            },
        };
        *out = lagnh::retrieval::evaluate(&q, &db, &ql, &dl, &opts)?.map_at_k;
        Ok(())
    })
}
