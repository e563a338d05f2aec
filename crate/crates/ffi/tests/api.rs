use std::ffi::{CStr, CString};
use std::ptr;

use etmfuzz::coverage::{trace_to_bitmap, ExceptionFilterMode, MapSize};
use etmfuzz::programs;
use etmfuzz::trace::{decode_packets, TracePacket};
use etmfuzz_ffi::*;

struct Handle(*mut EtfDevice);

impl Drop for Handle {
    fn drop(&mut self) {
        unsafe { etf_device_free(self.0) }
    }
}

fn new_device(source: &str) -> Handle {
    let src = CString::new(source).unwrap();
    let mut dev = ptr::null_mut();
    assert_eq!(unsafe { etf_device_new(src.as_ptr(), &mut dev) }, EtfStatus::Ok);
    assert!(!dev.is_null());
    Handle(dev)
}

fn last_error() -> Option<String> {
    let p = etf_last_error_message();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

fn run(dev: &Handle, input: &[u8], budget: u64) -> (EtfRunResult, Vec<u8>) {
    unsafe {
        assert_eq!(etf_device_load_testcase(dev.0, input.as_ptr(), input.len()), EtfStatus::Ok);
        let mut out = std::mem::MaybeUninit::<EtfRunResult>::uninit();
        assert_eq!(etf_device_run(dev.0, budget, out.as_mut_ptr()), EtfStatus::Ok);
        let out = out.assume_init();
        let trace = if out.trace.data.is_null() {
            Vec::new()
        } else {
            std::slice::from_raw_parts(out.trace.data, out.trace.len).to_vec()
        };
        (out, trace)
    }
}

fn free(result: EtfRunResult) {
    unsafe { etf_buffer_free(result.trace) }
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(etf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn two_path_run_and_bitmap() {
    let dev = new_device(programs::TWO_PATH);
    let (result, trace) = run(&dev, b"B", 100);
    assert_eq!(result.outcome, EtfOutcome::Ok);
    assert_eq!(result.fault, EtfFault::None);
    assert_eq!(result.executed, 8);
    free(result);

    let mut bitmap = vec![0u8; 1 << 16];
    let status = unsafe {
        etf_trace_to_bitmap(
            trace.as_ptr(),
            trace.len(),
            EtfExceptionMode::Discard as u32,
            bitmap.as_mut_ptr(),
            bitmap.len(),
            ptr::null_mut(),
        )
    };
    assert_eq!(status, EtfStatus::Ok);
    assert_eq!(bitmap, trace_to_bitmap(&trace, ExceptionFilterMode::Discard, MapSize::default()).unwrap());
    assert_eq!(bitmap.iter().filter(|&&b| b != 0).count(), 1);
}

#[test]
fn hash_goldens() {
    let mut id = 0u32;
    let short = [1u8, 1, 1, 1];
    let long = [1u8, 1, 1, 0, 1, 1, 1, 1];
    unsafe {
        assert_eq!(etf_hash_lcsaj(programs::TWO_PATH_A, short.as_ptr(), 4, 65536, &mut id), EtfStatus::Ok);
        assert_eq!(id, 0x56AD);
        assert_eq!(etf_hash_lcsaj(programs::TWO_PATH_A, long.as_ptr(), 8, 65536, &mut id), EtfStatus::Ok);
        assert_eq!(id, 0x46A5);
        assert_eq!(etf_hash_lcsaj(0, short.as_ptr(), 4, 1000, &mut id), EtfStatus::InvalidArgument);
    }
}

#[test]
fn crash_is_reported() {
    let dev = new_device(programs::BUG);
    let (result, _) = run(&dev, b"BUG!", 10_000);
    assert_eq!(result.outcome, EtfOutcome::Crash);
    assert_ne!(result.fault, EtfFault::None);
    free(result);
}

#[test]
fn hang_is_reported() {
    let dev = new_device(programs::INFINITE_LOOP);
    let (result, _) = run(&dev, b"", 500);
    assert_eq!(result.outcome, EtfOutcome::Hang);
    assert_eq!(result.executed, 500);
    free(result);
}

#[test]
fn new_bits_merge() {
    let mut global = [0u8; 4];
    let local = [0u8, 1, 0, 3];
    let mut out = EtfNewBits::NoNew;
    unsafe {
        assert_eq!(etf_has_new_bits(global.as_mut_ptr(), local.as_ptr(), 4, &mut out), EtfStatus::Ok);
        assert_eq!(out, EtfNewBits::NewEdge);
        assert_eq!(etf_has_new_bits(global.as_mut_ptr(), local.as_ptr(), 4, &mut out), EtfStatus::Ok);
        assert_eq!(out, EtfNewBits::NoNew);
    }
    assert_eq!(global, [0, 1, 0, 4]);
}

#[test]
fn errors_carry_status_and_message() {
    unsafe {
        let bad = CString::new("FROB r0\n").unwrap();
        let mut dev = ptr::null_mut();
        assert_eq!(etf_device_new(bad.as_ptr(), &mut dev), EtfStatus::AssemblyError);
        assert!(dev.is_null());
        assert!(last_error().unwrap().contains("FROB"));

        assert_eq!(etf_device_new(ptr::null(), &mut dev), EtfStatus::NullPointer);
        assert_eq!(etf_device_run(ptr::null_mut(), 10, ptr::null_mut()), EtfStatus::NullPointer);
        assert_eq!(etf_device_clear_interrupt(ptr::null_mut()), EtfStatus::NullPointer);
    }

    let dev = new_device(programs::BRANCH_DEMO);
    unsafe {
        let mut capacity = 0usize;
        assert_eq!(etf_device_slot_capacity(dev.0, &mut capacity), EtfStatus::Ok);
        let big = vec![0u8; capacity + 1];
        assert_eq!(etf_device_load_testcase(dev.0, big.as_ptr(), big.len()), EtfStatus::TestcaseTooLarge);
        assert_eq!(etf_device_load_testcase(dev.0, ptr::null(), 3), EtfStatus::NullPointer);
        assert_eq!(etf_device_load_testcase(dev.0, ptr::null(), 0), EtfStatus::Ok);
        assert!(last_error().is_none());

        assert_eq!(etf_device_set_interrupt(dev.0, 0, 15), EtfStatus::InvalidArgument);
        assert_eq!(etf_device_add_filter(dev.0, 9, 0, 1), EtfStatus::InvalidArgument);
        assert_eq!(etf_device_add_filter(dev.0, EtfFilterKind::Address as u32, 8, 8), EtfStatus::ConfigError);
        for _ in 0..2 {
            assert_eq!(etf_device_add_filter(dev.0, EtfFilterKind::Trigger as u32, 0, 1), EtfStatus::Ok);
        }
        // Comparator budget exhausted.
        assert_eq!(etf_device_add_filter(dev.0, EtfFilterKind::Data as u32, 0, 1), EtfStatus::ConfigError);
        assert_eq!(etf_device_clear_filters(dev.0), EtfStatus::Ok);
        assert_eq!(etf_device_add_filter(dev.0, EtfFilterKind::Data as u32, 0, 1), EtfStatus::Ok);

        let mut bitmap = [0u8; 256];
        let mut offset = usize::MAX;
        let raw = [0x80u8, 0x46];
        let status = etf_trace_to_bitmap(raw.as_ptr(), 2, 1, bitmap.as_mut_ptr(), 256, &mut offset);
        assert_eq!(status, EtfStatus::DecodeError);
        assert_eq!(offset, 0);
        let status = etf_trace_to_bitmap(raw.as_ptr(), 2, 7, bitmap.as_mut_ptr(), 256, &mut offset);
        assert_eq!(status, EtfStatus::InvalidArgument);
    }
}

#[test]
fn filters_and_direct_packets_shape_the_trace() {
    let dev = new_device(programs::TWO_PATH);
    let (full, full_trace) = run(&dev, b"B", 100);
    free(full);
    unsafe {
        assert_eq!(etf_device_set_direct_branch_packets(dev.0, false), EtfStatus::Ok);
    }
    let (quiet, quiet_trace) = run(&dev, b"B", 100);
    free(quiet);
    assert!(quiet_trace.len() < full_trace.len());
    unsafe {
        let end = programs::TWO_PATH_A + 2;
        assert_eq!(
            etf_device_add_filter(dev.0, EtfFilterKind::Address as u32, programs::TWO_PATH_A, end),
            EtfStatus::Ok
        );
    }
    let (filtered, filtered_trace) = run(&dev, b"B", 100);
    assert_eq!(filtered.executed, 8);
    free(filtered);
    let atoms: usize = decode_packets(&filtered_trace)
        .unwrap()
        .iter()
        .map(|p| match p {
            TracePacket::AtomGroup(g) => g.len(),
            _ => 0,
        })
        .sum();
    assert_eq!(atoms, 1);
}
