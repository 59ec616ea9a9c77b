//! C ABI over the `cpb` library, so other languages can drive ingestion,
//! EWMA scoring, synthetic generation, and whole experiments.
//!
//! Every function is `extern "C"`, never unwinds (panics are caught and
//! reported as [`CpbStatus::Panic`]), and reports failure details through
//! a thread-local error message. `CpbEvents` is an opaque handle owned by
//! the caller and released with [`cpb_events_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use cpb::harness::{run_experiment, ExperimentConfig, ExitCode};
use cpb::ingest::{
    parse_dshield_reader, read_canonical, synth::synthesize_logs, write_canonical, AlertEvent,
    Prefix24, Separator,
};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpbStatus {
    Ok = 0,
    /// Invalid configuration or argument.
    ConfigError = 1,
    /// Input data could not be read or parsed.
    DataError = 2,
    /// Protocol-level failure.
    ProtocolError = 3,
    /// A required pointer argument was null.
    NullArgument = 4,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 5,
    /// Not a valid dotted-quad IPv4 address.
    InvalidAddress = 6,
    /// A valid address inside non-routable space.
    NonRoutable = 7,
    /// An internal panic was caught at the boundary.
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error message unavailable").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(msg));
}

fn fail(status: CpbStatus, msg: String) -> CpbStatus {
    set_error(msg);
    status
}

fn from_cpb_error(err: cpb::CpbError) -> CpbStatus {
    let status = match err.exit_code() {
        ExitCode::Config => CpbStatus::ConfigError,
        ExitCode::Data => CpbStatus::DataError,
        ExitCode::Protocol => CpbStatus::ProtocolError,
        ExitCode::Ok => CpbStatus::Ok,
    };
    fail(status, err.to_string())
}

/// Runs a closure, converting panics into `CpbStatus::Panic`.
fn guarded(f: impl FnOnce() -> CpbStatus) -> CpbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(CpbStatus::Panic, msg)
        }
    }
}

/// Borrows a C string argument as UTF-8.
unsafe fn utf8_arg<'a>(ptr: *const c_char) -> Result<&'a str, CpbStatus> {
    if ptr.is_null() {
        return Err(CpbStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| CpbStatus::InvalidUtf8)
}

/// Opaque collection of parsed or synthesized alert events.
pub struct CpbEvents {
    events: Vec<AlertEvent>,
}

/// Library version as a static string; never freed by the caller.
#[no_mangle]
pub extern "C" fn cpb_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// The last error message on this thread, or null if none. The pointer is
/// valid until the next failing call on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn cpb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow().as_ref().map(|s| s.as_ptr()).unwrap_or(std::ptr::null())
    })
}

/// EWMA score of `values[0..len]` with smoothing coefficient `alpha`,
/// written to `out`.
///
/// # Safety
/// `values` must point to `len` readable doubles and `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cpb_ewma_score(
    values: *const f64,
    len: usize,
    alpha: f64,
    out: *mut f64,
) -> CpbStatus {
    guarded(|| {
        if (values.is_null() && len > 0) || out.is_null() {
            return fail(CpbStatus::NullArgument, "values/out must not be null".into());
        }
        let signal = if len == 0 { &[][..] } else { std::slice::from_raw_parts(values, len) };
        match cpb::forecast::ewma_score(signal, alpha) {
            Ok(score) => {
                *out = score;
                CpbStatus::Ok
            }
            Err(err) => fail(CpbStatus::ConfigError, err.to_string()),
        }
    })
}

/// Parses a dotted-quad IPv4 address and writes its /24 prefix (upper 24
/// bits, right-aligned) to `out`. Distinguishes invalid addresses from
/// valid but non-routable ones.
///
/// # Safety
/// `ip` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cpb_prefix24_of_ipv4(ip: *const c_char, out: *mut u32) -> CpbStatus {
    guarded(|| {
        let ip = match utf8_arg(ip) {
            Ok(s) => s,
            Err(status) => return fail(status, "ip must be a UTF-8 C string".into()),
        };
        if out.is_null() {
            return fail(CpbStatus::NullArgument, "out must not be null".into());
        }
        // reuse the log-line parser's address handling via a stub line
        let line = format!("x\t{ip}\t0\t0\t2015-06-06 00:00:00");
        match cpb::ingest::parse_dshield_line(&line, Separator::Tab) {
            Ok(cpb::ingest::ParsedLine::Event(ev)) => {
                *out = ev.attacker.value();
                CpbStatus::Ok
            }
            Ok(cpb::ingest::ParsedLine::Skipped(cpb::ingest::SkipReason::NonRoutable)) => {
                fail(CpbStatus::NonRoutable, format!("{ip} lies in non-routable space"))
            }
            _ => fail(CpbStatus::InvalidAddress, format!("{ip} is not a valid IPv4 address")),
        }
    })
}

/// Formats a /24 prefix value as `a.b.c.0`. `buf_len` must be at least 16.
///
/// # Safety
/// `buf` must point to `buf_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cpb_prefix24_format(
    value: u32,
    buf: *mut c_char,
    buf_len: usize,
) -> CpbStatus {
    guarded(|| {
        if buf.is_null() {
            return fail(CpbStatus::NullArgument, "buf must not be null".into());
        }
        let Some(prefix) = Prefix24::from_value(value) else {
            return fail(CpbStatus::InvalidAddress, format!("{value} exceeds 24 bits"));
        };
        let text = prefix.to_string();
        if buf_len < text.len() + 1 {
            return fail(
                CpbStatus::ConfigError,
                format!("buffer of {buf_len} bytes is too small"),
            );
        }
        std::ptr::copy_nonoverlapping(text.as_ptr(), buf as *mut u8, text.len());
        *buf.add(text.len()) = 0;
        CpbStatus::Ok
    })
}

fn events_out(out: *mut *mut CpbEvents, events: Vec<AlertEvent>) -> CpbStatus {
    if out.is_null() {
        return fail(CpbStatus::NullArgument, "out must not be null".into());
    }
    unsafe { *out = Box::into_raw(Box::new(CpbEvents { events })) };
    CpbStatus::Ok
}

/// Parses a DShield-format log file. `separator` is `'\t'` or `','`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` receives an owned handle.
#[no_mangle]
pub unsafe extern "C" fn cpb_events_load_dshield(
    path: *const c_char,
    separator: c_char,
    out: *mut *mut CpbEvents,
) -> CpbStatus {
    guarded(|| {
        let path = match utf8_arg(path) {
            Ok(s) => s,
            Err(status) => return fail(status, "path must be a UTF-8 C string".into()),
        };
        let sep = match separator as u8 {
            b'\t' | 0 => Separator::Tab,
            b',' => Separator::Comma,
            other => {
                return fail(
                    CpbStatus::ConfigError,
                    format!("unsupported separator byte {other}"),
                )
            }
        };
        let file = match std::fs::File::open(path) {
            Ok(f) => f,
            Err(e) => return fail(CpbStatus::DataError, format!("{path}: {e}")),
        };
        match parse_dshield_reader(BufReader::new(file), sep) {
            Ok((events, _stats)) => events_out(out, events),
            Err(err) => fail(CpbStatus::DataError, err.to_string()),
        }
    })
}

/// Reads a canonical `org,prefix,day` event file.
///
/// # Safety
/// As [`cpb_events_load_dshield`].
#[no_mangle]
pub unsafe extern "C" fn cpb_events_load_canonical(
    path: *const c_char,
    out: *mut *mut CpbEvents,
) -> CpbStatus {
    guarded(|| {
        let path = match utf8_arg(path) {
            Ok(s) => s,
            Err(status) => return fail(status, "path must be a UTF-8 C string".into()),
        };
        let file = match std::fs::File::open(path) {
            Ok(f) => f,
            Err(e) => return fail(CpbStatus::DataError, format!("{path}: {e}")),
        };
        match read_canonical(BufReader::new(file)) {
            Ok(events) => events_out(out, events),
            Err(err) => fail(CpbStatus::DataError, err.to_string()),
        }
    })
}

/// Synthesizes events from an experiment config text (flat `key = value`
/// form; only the synthesis keys matter here) and a seed.
///
/// # Safety
/// `config_text` must be a NUL-terminated string; `out` receives an owned
/// handle.
#[no_mangle]
pub unsafe extern "C" fn cpb_events_synth(
    config_text: *const c_char,
    seed: u64,
    out: *mut *mut CpbEvents,
) -> CpbStatus {
    guarded(|| {
        let text = match utf8_arg(config_text) {
            Ok(s) => s,
            Err(status) => return fail(status, "config_text must be a UTF-8 C string".into()),
        };
        let cfg = match ExperimentConfig::parse(text) {
            Ok(cfg) => cfg,
            Err(err) => return from_cpb_error(err),
        };
        match synthesize_logs(&cfg.synth, seed) {
            Ok(events) => events_out(out, events),
            Err(err) => fail(CpbStatus::ConfigError, err.to_string()),
        }
    })
}

/// Number of events in the handle; 0 for null.
#[no_mangle]
pub extern "C" fn cpb_events_len(events: *const CpbEvents) -> usize {
    if events.is_null() {
        return 0;
    }
    unsafe { (*events).events.len() }
}

/// Writes events in the canonical format.
///
/// # Safety
/// `events` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cpb_events_write_canonical(
    events: *const CpbEvents,
    path: *const c_char,
) -> CpbStatus {
    guarded(|| {
        if events.is_null() {
            return fail(CpbStatus::NullArgument, "events must not be null".into());
        }
        let path = match utf8_arg(path) {
            Ok(s) => s,
            Err(status) => return fail(status, "path must be a UTF-8 C string".into()),
        };
        let file = match std::fs::File::create(path) {
            Ok(f) => f,
            Err(e) => return fail(CpbStatus::DataError, format!("{path}: {e}")),
        };
        let mut writer = std::io::BufWriter::new(file);
        match write_canonical(&mut writer, &(*events).events) {
            Ok(()) => CpbStatus::Ok,
            Err(err) => fail(CpbStatus::DataError, err.to_string()),
        }
    })
}

/// Releases an events handle. Null is a no-op.
///
/// # Safety
/// `events` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn cpb_events_free(events: *mut CpbEvents) {
    if !events.is_null() {
        drop(Box::from_raw(events));
    }
}

/// Runs a full experiment from a config text and writes `results.csv`,
/// `summary.csv`, and `config.txt` into `out_dir`.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn cpb_run_experiment(
    config_text: *const c_char,
    out_dir: *const c_char,
) -> CpbStatus {
    guarded(|| {
        let text = match utf8_arg(config_text) {
            Ok(s) => s,
            Err(status) => return fail(status, "config_text must be a UTF-8 C string".into()),
        };
        let dir = match utf8_arg(out_dir) {
            Ok(s) => PathBuf::from(s),
            Err(status) => return fail(status, "out_dir must be a UTF-8 C string".into()),
        };
        let cfg = match ExperimentConfig::parse(text) {
            Ok(cfg) => cfg,
            Err(err) => return from_cpb_error(err),
        };
        let output = match run_experiment(&cfg) {
            Ok(out) => out,
            Err(err) => return from_cpb_error(err),
        };
        let write = |name: &str, content: String| -> Result<(), std::io::Error> {
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join(name), content)
        };
        if let Err(e) = write("results.csv", output.results_csv())
            .and_then(|()| write("summary.csv", output.summary_csv()))
            .and_then(|()| write("config.txt", cfg.to_text()))
        {
            return fail(CpbStatus::DataError, format!("writing outputs: {e}"));
        }
        CpbStatus::Ok
    })
}
