//! C ABI over `disp-core`.
//!
//! Models are opaque heap handles in 64-bit precision. Every function
//! returns a [`DispStatus`]; on failure a message is available from
//! [`disp_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use disp::checkpoint::{
    dense_from_checkpoint, gates_from_checkpoint, model_hash, pruned_from_checkpoint, pruned_to_checkpoint,
    Checkpoint,
};
use disp::data::{perplexity, tokenize, LanguageModel};
use disp::model::{DenseModel, MlpKind, ModelSpec};
use disp::prune::{extract, PrunedModel};
use disp::DispError;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DispStatus {
    Ok = 0,
    /// A null pointer, bad UTF-8 or an undersized output buffer.
    InvalidArgument = 1,
    Io = 2,
    /// The checkpoint is malformed or of the wrong kind.
    Format = 3,
    /// Shapes or gates violate a model contract.
    Contract = 4,
    Usage = 5,
    Diverged = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

/// Opaque dense model.
pub struct DispDenseModel {
    inner: DenseModel<f64>,
}

/// Opaque pruned model.
pub struct DispPrunedModel {
    inner: PrunedModel<f64>,
}

/// Architecture summary of a loaded model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DispModelInfo {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mid: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// 1 for the gated MLP, 0 for the standard one.
    pub gated_mlp: u8,
    pub param_count: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(DispStatus, String);

impl From<DispError> for Failure {
    fn from(e: DispError) -> Self {
        let status = match &e {
            DispError::Io(_) => DispStatus::Io,
            DispError::Format(_) => DispStatus::Format,
            DispError::Usage(_) | DispError::Config(_) => DispStatus::Usage,
            DispError::Diverged { .. } => DispStatus::Diverged,
            DispError::Contract(_) | DispError::Dimension { .. } => DispStatus::Contract,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: &str) -> Failure {
    Failure(DispStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DispStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DispStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DispStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(invalid("path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(&format!("{what} is null")))
}

fn info_of(spec: &ModelSpec, param_count: usize) -> DispModelInfo {
    DispModelInfo {
        d: spec.d,
        n_layers: spec.n_layers,
        n_heads: spec.n_heads,
        d_mid: spec.d_mid,
        vocab_size: spec.vocab_size,
        max_seq_len: spec.max_seq_len,
        gated_mlp: u8::from(spec.mlp_kind == MlpKind::Gated),
        param_count,
    }
}

unsafe fn write_logits(
    model: &dyn LanguageModel<f64>,
    tokens: *const u32,
    batch: usize,
    seq: usize,
    out: *mut f64,
    out_len: usize,
) -> Result<(), Failure> {
    if tokens.is_null() || out.is_null() {
        return Err(invalid("tokens or output buffer is null"));
    }
    let n = batch.checked_mul(seq).ok_or_else(|| invalid("batch * seq overflows"))?;
    let need = n
        .checked_mul(model.spec().vocab_size)
        .ok_or_else(|| invalid("output size overflows"))?;
    if out_len < need {
        return Err(invalid(&format!("output buffer holds {out_len} values, {need} needed")));
    }
    let toks: Vec<usize> = std::slice::from_raw_parts(tokens, n).iter().map(|&t| t as usize).collect();
    let logits = model.logits(&toks, batch)?;
    std::slice::from_raw_parts_mut(out, need).copy_from_slice(logits.data());
    Ok(())
}

unsafe fn text_perplexity(
    model: &dyn LanguageModel<f64>,
    text: *const u8,
    len: usize,
    seq_len: usize,
    out: *mut f64,
) -> Result<(), Failure> {
    if text.is_null() || out.is_null() {
        return Err(invalid("text or output is null"));
    }
    let tokens = tokenize(std::slice::from_raw_parts(text, len));
    let seq = seq_len.min(model.spec().max_seq_len);
    *out = perplexity(model, &tokens, seq, 8, None)?.ppl;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn disp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn disp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a dense checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn disp_dense_load(path: *const c_char, out: *mut *mut DispDenseModel) -> DispStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let ck = Checkpoint::load(&path_arg(path)?)?;
        let inner = dense_from_checkpoint::<f64>(&ck)?;
        *out = Box::into_raw(Box::new(DispDenseModel { inner }));
        Ok(())
    })
}

/// Releases a dense model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn disp_dense_free(model: *mut DispDenseModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn disp_dense_info(model: *const DispDenseModel, out: *mut DispModelInfo) -> DispStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        *out = info_of(&m.inner.spec, m.inner.param_count());
        Ok(())
    })
}

/// Writes `batch * seq * vocab_size` logits for row-major `tokens`.
///
/// # Safety
/// `tokens` must hold `batch * seq` values and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn disp_dense_logits(
    model: *const DispDenseModel,
    tokens: *const u32,
    batch: usize,
    seq: usize,
    out: *mut f64,
    out_len: usize,
) -> DispStatus {
    guard(|| write_logits(&as_ref(model, "model")?.inner, tokens, batch, seq, out, out_len))
}

/// Byte-level perplexity of `text` with non-overlapping windows.
///
/// # Safety
/// `text` must hold `len` bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn disp_dense_perplexity(
    model: *const DispDenseModel,
    text: *const u8,
    len: usize,
    seq_len: usize,
    out: *mut f64,
) -> DispStatus {
    guard(|| text_perplexity(&as_ref(model, "model")?.inner, text, len, seq_len, out))
}

/// Writes the 64-character hex weight hash plus a NUL into `buf`.
///
/// # Safety
/// `buf` must hold `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn disp_dense_hash(model: *const DispDenseModel, buf: *mut c_char, buf_len: usize) -> DispStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        if buf.is_null() || buf_len < 65 {
            return Err(invalid("hash buffer must hold at least 65 bytes"));
        }
        let h = model_hash(&m.inner)?;
        let dst = std::slice::from_raw_parts_mut(buf.cast::<u8>(), 65);
        dst[..64].copy_from_slice(h.as_bytes());
        dst[64] = 0;
        Ok(())
    })
}

/// Extracts a pruned model from a dense one and a gates or pruned checkpoint.
///
/// # Safety
/// `model` must be valid, `gates_path` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn disp_prune(
    model: *const DispDenseModel,
    gates_path: *const c_char,
    out: *mut *mut DispPrunedModel,
) -> DispStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let (spec, gates) = gates_from_checkpoint(&Checkpoint::load(&path_arg(gates_path)?)?)?;
        if spec != m.inner.spec {
            return Err(Failure(DispStatus::Contract, "gates were produced for a different model spec".into()));
        }
        let inner = extract(&m.inner, &gates)?;
        *out = Box::into_raw(Box::new(DispPrunedModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn disp_pruned_load(path: *const c_char, out: *mut *mut DispPrunedModel) -> DispStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let inner = pruned_from_checkpoint::<f64>(&Checkpoint::load(&path_arg(path)?)?)?;
        *out = Box::into_raw(Box::new(DispPrunedModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be valid and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn disp_pruned_save(model: *const DispPrunedModel, path: *const c_char) -> DispStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        pruned_to_checkpoint(&m.inner).save(&path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a pruned model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn disp_pruned_free(model: *mut DispPrunedModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn disp_pruned_info(model: *const DispPrunedModel, out: *mut DispModelInfo) -> DispStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        *out = info_of(&m.inner.spec, m.inner.param_count());
        Ok(())
    })
}

/// Kept width of gate `slot` (0..5 for s1..s5) in block `layer`.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn disp_pruned_width(
    model: *const DispPrunedModel,
    layer: usize,
    slot: usize,
    out: *mut usize,
) -> DispStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let block = m.inner.blocks.get(layer).ok_or_else(|| invalid("layer out of range"))?;
        let slot = disp::model::GateSlot::ALL.get(slot).ok_or_else(|| invalid("slot out of range"))?;
        *out = block.index(*slot).len();
        Ok(())
    })
}

/// # Safety
/// Same contract as [`disp_dense_logits`].
#[no_mangle]
pub unsafe extern "C" fn disp_pruned_logits(
    model: *const DispPrunedModel,
    tokens: *const u32,
    batch: usize,
    seq: usize,
    out: *mut f64,
    out_len: usize,
) -> DispStatus {
    guard(|| write_logits(&as_ref(model, "model")?.inner, tokens, batch, seq, out, out_len))
}

/// # Safety
/// Same contract as [`disp_dense_perplexity`].
#[no_mangle]
pub unsafe extern "C" fn disp_pruned_perplexity(
    model: *const DispPrunedModel,
    text: *const u8,
    len: usize,
    seq_len: usize,
    out: *mut f64,
) -> DispStatus {
    guard(|| text_perplexity(&as_ref(model, "model")?.inner, text, len, seq_len, out))
}
