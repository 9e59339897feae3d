//! C ABI for the hfflab encoder and parameter accounting.
//!
//! Every fallible function returns an [`HffStatus`]. On failure the message
//! is kept per thread and can be copied out with [`hff_last_error`].
//! Encoders are opaque handles created by `hff_encoder_new` or
//! `hff_encoder_load` and released with `hff_encoder_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use hfflab::accounting::count_trainable_params;
use hfflab::encoder::{Encoder, EncoderConfig, TapSet};
use hfflab::fusion::FusionSpec;
use hfflab::peft::PeftSpec;
use hfflab::tensor::{Graph, Tensor};
use hfflab::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HffStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Checkpoint = 5,
    Runtime = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HffEncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_expansion: usize,
    pub conv_kernel: usize,
    pub frontend_subsampling: usize,
    pub input_dim: usize,
}

impl From<EncoderConfig> for HffEncoderConfig {
    fn from(c: EncoderConfig) -> Self {
        HffEncoderConfig {
            num_layers: c.num_layers,
            model_dim: c.model_dim,
            num_heads: c.num_heads,
            ffn_expansion: c.ffn_expansion,
            conv_kernel: c.conv_kernel,
            frontend_subsampling: c.frontend_subsampling,
            input_dim: c.input_dim,
        }
    }
}

impl From<HffEncoderConfig> for EncoderConfig {
    fn from(c: HffEncoderConfig) -> Self {
        EncoderConfig {
            num_layers: c.num_layers,
            model_dim: c.model_dim,
            num_heads: c.num_heads,
            ffn_expansion: c.ffn_expansion,
            conv_kernel: c.conv_kernel,
            frontend_subsampling: c.frontend_subsampling,
            input_dim: c.input_dim,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HffParamCounts {
    pub encoder_trainable: usize,
    pub encoder_total: usize,
    pub head_trainable: usize,
}

/// Opaque single-precision encoder.
pub struct HffEncoder {
    inner: Encoder<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> HffStatus {
    match e {
        Error::Config { .. } | Error::Pattern { .. } => HffStatus::Config,
        Error::Io(_) | Error::Csv(_) => HffStatus::Io,
        Error::Checkpoint(_) => HffStatus::Checkpoint,
        _ => HffStatus::Runtime,
    }
}

struct Fail(HffStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HffStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HffStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HffStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    // SAFETY: callers pass pointers that are null or valid for reads.
    unsafe { p.as_ref() }.ok_or_else(|| Fail(HffStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    // SAFETY: callers pass pointers that are null or valid for writes.
    unsafe { p.as_mut() }.ok_or_else(|| Fail(HffStatus::NullPointer, format!("{what} is null")))
}

fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(HffStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: non-null and documented as NUL-terminated.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(HffStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// always NUL-terminated when `len > 0`). Returns the full message length
/// without the terminator; `buf` may be null to query it.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn hff_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Writes the six-layer desk configuration.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hff_encoder_config_desk(out: *mut HffEncoderConfig) -> HffStatus {
    guard(|| {
        *out_ptr(out, "out")? = EncoderConfig::desk().into();
        Ok(())
    })
}

/// Writes the 24-layer, 1024-wide configuration.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hff_encoder_config_large(out: *mut HffEncoderConfig) -> HffStatus {
    guard(|| {
        *out_ptr(out, "out")? = EncoderConfig::large().into();
        Ok(())
    })
}

/// Builds a randomly initialized encoder.
///
/// # Safety
/// `config` must be null or point to a config; `out` must be null or valid
/// for writes. The handle written to `out` must be released with
/// `hff_encoder_free`.
#[no_mangle]
pub unsafe extern "C" fn hff_encoder_new(
    config: *const HffEncoderConfig,
    seed: u64,
    out: *mut *mut HffEncoder,
) -> HffStatus {
    guard(|| {
        let cfg = EncoderConfig::from(*non_null(config, "config")?);
        let slot = out_ptr(out, "out")?;
        let inner = Encoder::build(cfg, seed)?;
        *slot = Box::into_raw(Box::new(HffEncoder { inner }));
        Ok(())
    })
}

/// Loads an encoder checkpoint written by `hff_encoder_save` or the CLI.
///
/// # Safety
/// As for `hff_encoder_new`; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hff_encoder_load(
    config: *const HffEncoderConfig,
    path: *const c_char,
    out: *mut *mut HffEncoder,
) -> HffStatus {
    guard(|| {
        let cfg = EncoderConfig::from(*non_null(config, "config")?);
        let path = c_str(path, "path")?;
        let slot = out_ptr(out, "out")?;
        let inner = Encoder::load(cfg, Path::new(path))?;
        *slot = Box::into_raw(Box::new(HffEncoder { inner }));
        Ok(())
    })
}

/// # Safety
/// `encoder` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hff_encoder_save(encoder: *const HffEncoder, path: *const c_char) -> HffStatus {
    guard(|| {
        let enc = non_null(encoder, "encoder")?;
        enc.inner.save(Path::new(c_str(path, "path")?))?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `encoder` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hff_encoder_free(encoder: *mut HffEncoder) {
    if !encoder.is_null() {
        drop(Box::from_raw(encoder));
    }
}

/// Total number of encoder parameters, adapters included.
///
/// # Safety
/// `encoder` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hff_encoder_num_params(encoder: *const HffEncoder, out: *mut usize) -> HffStatus {
    guard(|| {
        let enc = non_null(encoder, "encoder")?;
        *out_ptr(out, "out")? = enc.inner.params().iter().map(|p| p.value.numel()).sum();
        Ok(())
    })
}

/// Number of output frames for `num_frames` input frames.
///
/// # Safety
/// `encoder` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hff_encoder_output_len(
    encoder: *const HffEncoder,
    num_frames: usize,
    out: *mut usize,
) -> HffStatus {
    guard(|| {
        let enc = non_null(encoder, "encoder")?;
        let slot = out_ptr(out, "out")?;
        *slot = enc
            .inner
            .config()
            .output_len(num_frames)
            .ok_or_else(|| Fail(HffStatus::InvalidArgument, format!("{num_frames} frames is too short")))?;
        Ok(())
    })
}

/// Encodes one utterance and writes the output of block `layer` as a
/// row-major `(output_len, model_dim)` matrix. `frames` holds
/// `num_frames * input_dim` values. `out_len` is the capacity of `out` in
/// floats; on `BUFFER_TOO_SMALL` nothing is written.
///
/// # Safety
/// `frames` must be valid for `num_frames * input_dim` reads and `out` for
/// `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn hff_encoder_encode(
    encoder: *const HffEncoder,
    frames: *const f32,
    num_frames: usize,
    layer: usize,
    out: *mut f32,
    out_len: usize,
) -> HffStatus {
    guard(|| {
        let enc = &non_null(encoder, "encoder")?.inner;
        if frames.is_null() || out.is_null() {
            return Err(Fail(HffStatus::NullPointer, "frames or out is null".into()));
        }
        let cfg = *enc.config();
        let rows = cfg
            .output_len(num_frames)
            .ok_or_else(|| Fail(HffStatus::InvalidArgument, format!("{num_frames} frames is too short")))?;
        let needed = rows * cfg.model_dim;
        if out_len < needed {
            return Err(Fail(
                HffStatus::BufferTooSmall,
                format!("output needs {needed} floats, buffer holds {out_len}"),
            ));
        }
        let taps = TapSet::new(vec![layer], cfg.num_layers)?;
        let input = std::slice::from_raw_parts(frames, num_frames * cfg.input_dim).to_vec();
        let input = Tensor::new(vec![num_frames, cfg.input_dim], input)?;
        let mut g = Graph::inference();
        let features = enc.encode_with_taps(&mut g, &input, &[num_frames], &taps)?;
        let value = g.value(features.get(layer)?).data();
        std::slice::from_raw_parts_mut(out, needed).copy_from_slice(value);
        Ok(())
    })
}

/// Closed-form trainable-parameter counts. `fusion` and `peft` are spec
/// strings in the CLI syntax (for example `hff-b:taps=all;fp=512` or
/// `adapter:layers=all;d=128`); either may be null.
///
/// # Safety
/// `config` must point to a config, the strings must be null or
/// NUL-terminated, and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hff_count_params(
    config: *const HffEncoderConfig,
    fusion: *const c_char,
    peft: *const c_char,
    out: *mut HffParamCounts,
) -> HffStatus {
    guard(|| {
        let cfg = EncoderConfig::from(*non_null(config, "config")?);
        let slot = out_ptr(out, "out")?;
        let fusion = if fusion.is_null() {
            None
        } else {
            Some(FusionSpec::parse(c_str(fusion, "fusion")?, &cfg)?)
        };
        let peft = if peft.is_null() {
            None
        } else {
            Some(PeftSpec::parse(c_str(peft, "peft")?, &cfg)?)
        };
        let c = count_trainable_params(&cfg, fusion.as_ref(), peft.as_ref())?;
        *slot = HffParamCounts {
            encoder_trainable: c.encoder_trainable,
            encoder_total: c.encoder_total,
            head_trainable: c.head_trainable,
        };
        Ok(())
    })
}
