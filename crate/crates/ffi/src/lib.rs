//! C ABI over `abc-core`.
//!
//! Every fallible function returns an [`AbcStatus`]. On failure the message
//! is kept per thread and read with [`abc_last_error`]. Models and decoders
//! are opaque handles released with their `_free` function. Matrices are
//! row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use abc_core::checkpoint::Checkpoint;
use abc_core::memory::{build_memory, readout, ControlVector};
use abc_core::model::{greedy_decode, DecoderState, Model, ToyModelConfig};
use abc_core::numerics::Matrix;
use abc_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbcStatus {
    Ok = 0,
    NullPointer = 1,
    Domain = 2,
    Numeric = 3,
    Usage = 4,
    Config = 5,
    Format = 6,
    Io = 7,
    Panic = 8,
}

/// Trained or freshly initialized toy model.
pub struct AbcModel(Model);

/// Streaming decoder; holds its own copy of the model.
pub struct AbcDecoder {
    model: Model,
    state: DecoderState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AbcStatus {
    match e {
        Error::Domain(_) => AbcStatus::Domain,
        Error::Numeric(_) => AbcStatus::Numeric,
        Error::Usage(_) => AbcStatus::Usage,
        Error::Config { .. } => AbcStatus::Config,
        Error::Format(_) => AbcStatus::Format,
        Error::Io(_) => AbcStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AbcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AbcStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            AbcStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            AbcStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    // SAFETY: callers pass either NULL or a pointer obtained from this library
    // (or a valid C object) that outlives the call.
    unsafe { p.as_ref() }.ok_or(Fail::Null(what))
}

fn non_null_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    // SAFETY: as in `non_null`, and the caller guarantees exclusive access.
    unsafe { p.as_mut() }.ok_or(Fail::Null(what))
}

fn slice_in<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: the caller guarantees `len` readable elements at `p`.
    Ok(unsafe { slice::from_raw_parts(p, len) })
}

fn slice_out<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: the caller guarantees `len` writable elements at `p`.
    Ok(unsafe { slice::from_raw_parts_mut(p, len) })
}

fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: the caller passes a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| Fail::Core(Error::Domain(format!("{what} is not UTF-8"))))
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn abc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a model from a JSON model configuration (all keys optional).
#[no_mangle]
pub extern "C" fn abc_model_new(config_json: *const c_char, out: *mut *mut AbcModel) -> AbcStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let text = c_str(config_json, "config_json")?;
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ToyModelConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.into_inner().to_string(),
        })?;
        *out = Box::into_raw(Box::new(AbcModel(Model::new(cfg)?)));
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn abc_model_load(path: *const c_char, out: *mut *mut AbcModel) -> AbcStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let model = Model::from_checkpoint(&Checkpoint::load(c_str(path, "path")?)?)?;
        *out = Box::into_raw(Box::new(AbcModel(model)));
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn abc_model_save(model: *const AbcModel, path: *const c_char) -> AbcStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        m.0.to_checkpoint()?.save(c_str(path, "path")?)?;
        Ok(())
    })
}

/// Total scalar parameters and the share held by learned control matrices.
#[no_mangle]
pub extern "C" fn abc_model_param_counts(model: *const AbcModel, total: *mut usize, control: *mut usize) -> AbcStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        *non_null_mut(total, "total")? = m.0.params().count();
        *non_null_mut(control, "control")? = m.0.control_param_count();
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn abc_model_vocab(model: *const AbcModel, out: *mut usize) -> AbcStatus {
    guard(|| {
        *non_null_mut(out, "out")? = non_null(model, "model")?.0.config().vocab;
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
#[no_mangle]
pub extern "C" fn abc_model_free(model: *mut AbcModel) {
    if !model.is_null() {
        // SAFETY: `model` came from `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Greedy decoding of `max_len` tokens into `out`. For a language model
/// `input` is the prompt; for seq2seq it is the source.
#[no_mangle]
pub extern "C" fn abc_greedy_decode(
    model: *const AbcModel,
    input: *const u32,
    input_len: usize,
    out: *mut u32,
    max_len: usize,
) -> AbcStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let input = slice_in(input, input_len, "input")?;
        let dst = slice_out(out, max_len, "out")?;
        let tokens = greedy_decode(&m.0, input, max_len)?;
        dst.copy_from_slice(&tokens);
        Ok(())
    })
}

/// Starts a streaming decoder. `source` may be NULL with length 0 for a
/// language model.
#[no_mangle]
pub extern "C" fn abc_decoder_new(
    model: *const AbcModel,
    source: *const u32,
    source_len: usize,
    out: *mut *mut AbcDecoder,
) -> AbcStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let out = non_null_mut(out, "out")?;
        let src = if source.is_null() { None } else { Some(slice_in(source, source_len, "source")?) };
        let state = m.0.decoder_state(src)?;
        *out = Box::into_raw(Box::new(AbcDecoder { model: m.0.clone(), state }));
        Ok(())
    })
}

/// Feeds one token and writes `vocab` next-token logits.
#[no_mangle]
pub extern "C" fn abc_decoder_step(dec: *mut AbcDecoder, token: u32, logits: *mut f64, vocab: usize) -> AbcStatus {
    guard(|| {
        let d = non_null_mut(dec, "decoder")?;
        let want = d.model.config().vocab;
        if vocab != want {
            return Err(Error::Domain(format!("logits buffer holds {vocab}, vocab is {want}")).into());
        }
        let dst = slice_out(logits, vocab, "logits")?;
        let row = d.model.step_logits(&mut d.state, token)?;
        dst.copy_from_slice(&row);
        Ok(())
    })
}

/// Bytes held by the causal self-attention states.
#[no_mangle]
pub extern "C" fn abc_decoder_state_bytes(dec: *const AbcDecoder, out: *mut usize) -> AbcStatus {
    guard(|| {
        *non_null_mut(out, "out")? = non_null(dec, "decoder")?.state.state_bytes();
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn abc_decoder_free(dec: *mut AbcDecoder) {
    if !dec.is_null() {
        // SAFETY: `dec` came from `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(dec) });
    }
}

/// `K̃ = Σ φ_i ⊗ k_i`, `Ṽ = Σ φ_i ⊗ v_i` from `phi` (N×n), `keys` and
/// `values` (N×d) into `ktilde` and `vtilde` (n×d).
#[no_mangle]
pub extern "C" fn abc_build_memory(
    phi: *const f64,
    keys: *const f64,
    values: *const f64,
    len: usize,
    n: usize,
    d: usize,
    ktilde: *mut f64,
    vtilde: *mut f64,
) -> AbcStatus {
    guard(|| {
        let nd = n.checked_mul(d).ok_or(Error::Domain("n·d overflows".into()))?;
        let phi = slice_in(phi, len * n, "phi")?;
        let k = Matrix::from_vec(len, d, slice_in(keys, len * d, "keys")?.to_vec())?;
        let v = Matrix::from_vec(len, d, slice_in(values, len * d, "values")?.to_vec())?;
        let phis: Vec<ControlVector> = phi.chunks(n.max(1)).take(len).map(|r| ControlVector::new(r.to_vec())).collect();
        let mem = build_memory(&phis, &k, &v)?;
        slice_out(ktilde, nd, "ktilde")?.copy_from_slice(mem.ktilde.as_slice());
        slice_out(vtilde, nd, "vtilde")?.copy_from_slice(mem.vtilde.as_slice());
        Ok(())
    })
}

/// `out = Ṽᵀ softmax(K̃ q / temperature)` with `ktilde`, `vtilde` n×d.
#[no_mangle]
pub extern "C" fn abc_readout(
    q: *const f64,
    ktilde: *const f64,
    vtilde: *const f64,
    n: usize,
    d: usize,
    temperature: f64,
    out: *mut f64,
) -> AbcStatus {
    guard(|| {
        let q = slice_in(q, d, "q")?;
        let kt = Matrix::from_vec(n, d, slice_in(ktilde, n * d, "ktilde")?.to_vec())?;
        let vt = Matrix::from_vec(n, d, slice_in(vtilde, n * d, "vtilde")?.to_vec())?;
        let mem = abc_core::memory::BoundedMemory { ktilde: kt, vtilde: vt, norm_sum: None };
        let y = readout(q, &mem, temperature)?;
        slice_out(out, d, "out")?.copy_from_slice(&y);
        Ok(())
    })
}

/// Runs one named invariant suite. `passed` is set to 1 or 0.
#[no_mangle]
pub extern "C" fn abc_verify_suite(name: *const c_char, seed: u64, passed: *mut i32, max_error: *mut f64) -> AbcStatus {
    guard(|| {
        let report = abc_core::verify::run_suite(c_str(name, "name")?, seed)?;
        *non_null_mut(passed, "passed")? = i32::from(report.passed());
        *non_null_mut(max_error, "max_error")? = report.max_error();
        Ok(())
    })
}
