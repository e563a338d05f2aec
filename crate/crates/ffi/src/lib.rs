//! C interface to the etmfuzz simulator and trace coverage primitives.
//!
//! Every fallible function returns an [`EtfStatus`]. After a failure,
//! [`etf_last_error_message`] describes it until the next call on the same
//! thread. Devices are opaque handles released with [`etf_device_free`];
//! trace buffers handed out by [`etf_device_run`] are released with
//! [`etf_buffer_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::{ptr, slice};

use etmfuzz::coverage::{has_new_bits, hash_lcsaj, trace_to_bitmap, ExceptionFilterMode, LcsajBB, MapSize, NewBits};
use etmfuzz::sim::{assemble, Device, FaultKind, Filter, RunOutcome, SimError, Slot};
use etmfuzz::trace::Atom;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    AssemblyError = 3,
    ConfigError = 4,
    TestcaseTooLarge = 5,
    DecodeError = 6,
    SizeMismatch = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

/// Values accepted by [`etf_device_add_filter`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtfFilterKind {
    /// Trace while the pc is in `[a, b)`.
    Address = 0,
    /// Executing `a` starts tracing, executing `b` stops it.
    Trigger = 1,
    /// Storing `b` to address `a` starts tracing, any other value stops it.
    Data = 2,
}

/// Values accepted for `mode` arguments.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtfExceptionMode {
    Keep = 0,
    Discard = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtfOutcome {
    Ok = 0,
    Crash = 1,
    Hang = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtfFault {
    None = 0,
    BusFault = 1,
    UsageFault = 2,
    UnexpectedBreakpoint = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtfNewBits {
    NoNew = 0,
    NewHitCount = 1,
    NewEdge = 2,
}

/// Byte buffer owned by the library.
#[repr(C)]
#[derive(Debug)]
pub struct EtfBuffer {
    pub data: *mut u8,
    pub len: usize,
}

impl EtfBuffer {
    const EMPTY: EtfBuffer = EtfBuffer {
        data: ptr::null_mut(),
        len: 0,
    };

    fn from_vec(v: Vec<u8>) -> Self {
        if v.is_empty() {
            return Self::EMPTY;
        }
        let len = v.len();
        let data = Box::into_raw(v.into_boxed_slice()) as *mut u8;
        Self { data, len }
    }
}

#[repr(C)]
#[derive(Debug)]
pub struct EtfRunResult {
    pub outcome: EtfOutcome,
    /// Set when `outcome` is a crash.
    pub fault: EtfFault,
    pub fault_address: u32,
    /// Retired instructions, handlers included.
    pub executed: u64,
    pub thread_executed: u64,
    pub exceptions_taken: u64,
    /// Raw packet bytes; free with `etf_buffer_free`.
    pub trace: EtfBuffer,
}

/// Simulated target with its own trace configuration and testcase slots.
pub struct EtfDevice {
    device: Device,
}

struct Failure(EtfStatus, String);

type Result<T> = std::result::Result<T, Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: Option<String>) {
    let c = message.map(|m| CString::new(m.replace('\0', " ")).unwrap_or_default());
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, translating its failure or panic into a status.
fn guard(f: impl FnOnce() -> Result<()>) -> EtfStatus {
    let (status, message) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (EtfStatus::Ok, None),
        Ok(Err(Failure(status, message))) => (status, Some(message)),
        Err(_) => (EtfStatus::Internal, Some("internal error".to_string())),
    };
    set_last_error(message);
    status
}

fn null(what: &str) -> Failure {
    Failure(EtfStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(EtfStatus::InvalidArgument, message.into())
}

fn sim_failure(e: SimError) -> Failure {
    let status = match e {
        SimError::TestcaseTooLarge { .. } => EtfStatus::TestcaseTooLarge,
        SimError::Config(_) => EtfStatus::ConfigError,
        SimError::UnknownException(_) | SimError::ZeroPeriod => EtfStatus::InvalidArgument,
    };
    Failure(status, e.to_string())
}

unsafe fn device<'a>(handle: *mut EtfDevice) -> Result<&'a mut Device> {
    handle.as_mut().map(|h| &mut h.device).ok_or_else(|| null("device"))
}

/// `len` bytes at `data`; `data` may be null only when `len` is zero.
unsafe fn bytes<'a>(data: *const u8, len: usize, what: &str) -> Result<&'a [u8]> {
    match (data.is_null(), len) {
        (_, 0) => Ok(&[]),
        (true, _) => Err(null(what)),
        (false, _) => Ok(slice::from_raw_parts(data, len)),
    }
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<()> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn exception_mode(mode: u32) -> Result<ExceptionFilterMode> {
    match mode {
        m if m == EtfExceptionMode::Keep as u32 => Ok(ExceptionFilterMode::Keep),
        m if m == EtfExceptionMode::Discard as u32 => Ok(ExceptionFilterMode::Discard),
        m => Err(invalid(format!("unknown exception mode {m}"))),
    }
}

fn map_size(len: usize) -> Result<MapSize> {
    MapSize::new(len as u64).map_err(|e| invalid(e.to_string()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn etf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null if the last call
/// succeeded. Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn etf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Assembles `source` (NUL-terminated UTF-8) and creates a device for it.
///
/// # Safety
/// `source` must be a valid C string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn etf_device_new(source: *const c_char, out: *mut *mut EtfDevice) -> EtfStatus {
    guard(|| {
        if source.is_null() {
            return Err(null("source"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CStr::from_ptr(source)
            .to_str()
            .map_err(|e| invalid(format!("source is not UTF-8: {e}")))?;
        let image = assemble(text).map_err(|e| Failure(EtfStatus::AssemblyError, e.to_string()))?;
        let handle = Box::new(EtfDevice {
            device: Device::new(image),
        });
        out.write(Box::into_raw(handle));
        Ok(())
    })
}

/// Releases a device. Null is ignored.
///
/// # Safety
/// `device` must come from `etf_device_new` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn etf_device_free(device: *mut EtfDevice) {
    if !device.is_null() {
        drop(Box::from_raw(device));
    }
}

/// Largest testcase the device accepts, in bytes.
///
/// # Safety
/// `device` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn etf_device_slot_capacity(device: *mut EtfDevice, out: *mut usize) -> EtfStatus {
    guard(|| {
        let capacity = self::device(device)?.slot_capacity();
        write(out, capacity, "out")
    })
}

/// Copies a testcase into the current slot. It stays loaded across runs.
///
/// # Safety
/// `device` must be a live handle; `data` must hold `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn etf_device_load_testcase(device: *mut EtfDevice, data: *const u8, len: usize) -> EtfStatus {
    guard(|| {
        let device = self::device(device)?;
        let data = bytes(data, len, "data")?;
        device.load_testcase(data, Slot::Current).map_err(sim_failure)
    })
}

/// Raises exception `number` every `period` thread-mode instructions.
///
/// # Safety
/// `device` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn etf_device_set_interrupt(device: *mut EtfDevice, period: u64, number: u8) -> EtfStatus {
    guard(|| self::device(device)?.set_interrupt_schedule(period, number).map_err(sim_failure))
}

/// # Safety
/// `device` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn etf_device_clear_interrupt(device: *mut EtfDevice) -> EtfStatus {
    guard(|| {
        self::device(device)?.clear_interrupt_schedule();
        Ok(())
    })
}

/// Adds a trace filter; `kind` is an `EtfFilterKind`. Filters combine with
/// AND. The configuration is left unchanged on failure.
///
/// # Safety
/// `device` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn etf_device_add_filter(device: *mut EtfDevice, kind: u32, a: u32, b: u32) -> EtfStatus {
    guard(|| {
        let device = self::device(device)?;
        let filter = match kind {
            k if k == EtfFilterKind::Address as u32 => Filter::AddressRange { start: a, end: b },
            k if k == EtfFilterKind::Trigger as u32 => Filter::InstrTrigger { start: a, stop: b },
            k if k == EtfFilterKind::Data as u32 => Filter::DataTrigger { watch: a, value: b },
            k => return Err(invalid(format!("unknown filter kind {k}"))),
        };
        let mut config = device.trace_config().clone();
        config.filters.push(filter);
        device.set_trace_config(config).map_err(sim_failure)
    })
}

/// # Safety
/// `device` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn etf_device_clear_filters(device: *mut EtfDevice) -> EtfStatus {
    guard(|| {
        let device = self::device(device)?;
        let mut config = device.trace_config().clone();
        config.filters.clear();
        device.set_trace_config(config).map_err(sim_failure)
    })
}

/// Whether taken direct branches emit branch packets (on by default).
///
/// # Safety
/// `device` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn etf_device_set_direct_branch_packets(device: *mut EtfDevice, enabled: bool) -> EtfStatus {
    guard(|| {
        let device = self::device(device)?;
        let mut config = device.trace_config().clone();
        config.direct_branch_packets = enabled;
        device.set_trace_config(config).map_err(sim_failure)
    })
}

/// Resets the device and runs the loaded testcase for at most `budget`
/// instructions. On success `out->trace` owns a buffer the caller must free.
///
/// # Safety
/// `device` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn etf_device_run(device: *mut EtfDevice, budget: u64, out: *mut EtfRunResult) -> EtfStatus {
    guard(|| {
        let device = self::device(device)?;
        if out.is_null() {
            return Err(null("out"));
        }
        device.reset();
        let report = device.run(budget);
        let (outcome, fault, fault_address) = match report.outcome {
            RunOutcome::Ok => (EtfOutcome::Ok, EtfFault::None, 0),
            RunOutcome::Hang { .. } => (EtfOutcome::Hang, EtfFault::None, 0),
            RunOutcome::Crash { kind, at } => {
                let fault = match kind {
                    FaultKind::BusFault => EtfFault::BusFault,
                    FaultKind::UsageFault => EtfFault::UsageFault,
                    FaultKind::UnexpectedBreakpoint => EtfFault::UnexpectedBreakpoint,
                };
                (EtfOutcome::Crash, fault, at)
            }
        };
        out.write(EtfRunResult {
            outcome,
            fault,
            fault_address,
            executed: report.executed,
            thread_executed: report.thread_executed,
            exceptions_taken: report.exceptions_taken,
            trace: EtfBuffer::from_vec(report.trace.0),
        });
        Ok(())
    })
}

/// Releases a buffer handed out by the library. An empty buffer is ignored.
///
/// # Safety
/// `buffer` must come from the library unchanged and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn etf_buffer_free(buffer: EtfBuffer) {
    if !buffer.data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(buffer.data, buffer.len)));
    }
}

/// Turns one run's raw trace into a fresh edge bitmap of `bitmap_len` bytes,
/// which must be a power of two. On a decode error the byte offset goes to
/// `error_offset` when it is not null.
///
/// # Safety
/// `raw` must hold `raw_len` readable bytes and `bitmap` `bitmap_len`
/// writable bytes.
#[no_mangle]
pub unsafe extern "C" fn etf_trace_to_bitmap(
    raw: *const u8,
    raw_len: usize,
    mode: u32,
    bitmap: *mut u8,
    bitmap_len: usize,
    error_offset: *mut usize,
) -> EtfStatus {
    guard(|| {
        let raw = bytes(raw, raw_len, "raw")?;
        let mode = exception_mode(mode)?;
        let size = map_size(bitmap_len)?;
        if bitmap.is_null() {
            return Err(null("bitmap"));
        }
        match trace_to_bitmap(raw, mode, size) {
            Ok(local) => {
                slice::from_raw_parts_mut(bitmap, bitmap_len).copy_from_slice(&local);
                Ok(())
            }
            Err(e) => {
                if !error_offset.is_null() {
                    error_offset.write(e.offset());
                }
                Err(Failure(EtfStatus::DecodeError, e.to_string()))
            }
        }
    })
}

/// Bitmap index of the block at `base` with `count` atoms, one byte each
/// (nonzero is E), first executed first.
///
/// # Safety
/// `atoms` must hold `count` readable bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn etf_hash_lcsaj(
    base: u32,
    atoms: *const u8,
    count: usize,
    map_size: u32,
    out: *mut u32,
) -> EtfStatus {
    guard(|| {
        let atoms = bytes(atoms, count, "atoms")?;
        let size = self::map_size(map_size as usize)?;
        let bb = LcsajBB::new(base, atoms.iter().map(|&a| Atom(a != 0)).collect());
        write(out, hash_lcsaj(&bb, size), "out")
    })
}

/// Merges `local` into `global` (both `len` bytes) and reports what was new.
///
/// # Safety
/// `global` must hold `len` writable bytes, `local` `len` readable bytes, and
/// the two must not overlap.
#[no_mangle]
pub unsafe extern "C" fn etf_has_new_bits(
    global: *mut u8,
    local: *const u8,
    len: usize,
    out: *mut EtfNewBits,
) -> EtfStatus {
    guard(|| {
        if global.is_null() && len > 0 {
            return Err(null("global"));
        }
        let local = bytes(local, len, "local")?;
        let global: &mut [u8] = if len == 0 { &mut [] } else { slice::from_raw_parts_mut(global, len) };
        let result = match has_new_bits(global, local).map_err(|e| Failure(EtfStatus::SizeMismatch, e.to_string()))? {
            NewBits::NoNew => EtfNewBits::NoNew,
            NewBits::NewHitCount => EtfNewBits::NewHitCount,
            NewBits::NewEdge => EtfNewBits::NewEdge,
        };
        write(out, result, "out")
    })
}
