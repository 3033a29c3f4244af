use std::ffi::CStr;

use tnic_ffi::*;

const KEY: [u8; 32] = [0x42; 32];

fn kernel(device: u32) -> *mut TnicKernel {
    let k = tnic_kernel_new(device);
    assert_eq!(unsafe { tnic_kernel_provision(k, 7, KEY.as_ptr(), KEY.len()) }, TNIC_OK);
    k
}

fn attest(k: *mut TnicKernel, payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; tnic_frame_len(payload.len())];
    let mut len = 0;
    let rc = unsafe { tnic_kernel_attest(k, 7, payload.as_ptr(), payload.len(), out.as_mut_ptr(), out.len(), &mut len) };
    assert_eq!(rc, TNIC_OK);
    assert_eq!(len, out.len());
    out
}

fn last_error() -> String {
    let mut buf = [0 as std::ffi::c_char; 256];
    unsafe { tnic_last_error_message(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn attest_verify_replay_through_c_abi() {
    let (a, b) = (kernel(1), kernel(2));
    let frame = attest(a, b"over the boundary");
    unsafe {
        assert_eq!(tnic_kernel_verify(b, frame.as_ptr(), frame.len()), TNIC_OK);
        assert_eq!(tnic_kernel_verify(b, frame.as_ptr(), frame.len()), TNIC_ERR_COUNTER_MISMATCH);
        assert!(last_error().contains("counter mismatch"));
        tnic_kernel_free(a);
        tnic_kernel_free(b);
    }
}

#[test]
fn tampered_and_malformed_frames() {
    let (a, b) = (kernel(1), kernel(2));
    let mut frame = attest(a, b"x");
    frame[20] ^= 1;
    unsafe {
        assert_eq!(tnic_kernel_verify(b, frame.as_ptr(), frame.len()), TNIC_ERR_AUTH_FAILURE);
        assert_eq!(tnic_kernel_verify(b, frame.as_ptr(), 10), TNIC_ERR_MALFORMED_FRAME);
        tnic_kernel_free(a);
        tnic_kernel_free(b);
    }
}

#[test]
fn small_buffer_reports_size_without_consuming_a_counter() {
    let (a, b) = (kernel(1), kernel(2));
    let mut small = [0u8; 8];
    let mut len = 0;
    let rc = unsafe { tnic_kernel_attest(a, 7, b"abc".as_ptr(), 3, small.as_mut_ptr(), small.len(), &mut len) };
    assert_eq!(rc, TNIC_ERR_BUFFER_TOO_SMALL);
    assert_eq!(len, 87);
    let frame = attest(a, b"abc");
    assert_eq!(unsafe { tnic_kernel_verify(b, frame.as_ptr(), frame.len()) }, TNIC_OK);
    unsafe {
        tnic_kernel_free(a);
        tnic_kernel_free(b);
    }
}

#[test]
fn argument_errors() {
    let k = tnic_kernel_new(1);
    unsafe {
        assert_eq!(tnic_kernel_provision(k, 1, KEY.as_ptr(), 31), TNIC_ERR_INVALID_ARGUMENT);
        assert_eq!(tnic_kernel_provision(std::ptr::null_mut(), 1, KEY.as_ptr(), 32), TNIC_ERR_NULL_POINTER);
        assert_eq!(tnic_kernel_provision(k, 1, KEY.as_ptr(), 32), TNIC_OK);
        assert_eq!(tnic_kernel_provision(k, 1, KEY.as_ptr(), 32), TNIC_ERR_DUPLICATE_SESSION);
        let mut out = [0u8; 128];
        let mut len = 0;
        assert_eq!(
            tnic_kernel_attest(k, 9, b"".as_ptr(), 0, out.as_mut_ptr(), out.len(), &mut len),
            TNIC_ERR_UNKNOWN_SESSION
        );
        tnic_kernel_free(k);
        tnic_kernel_free(std::ptr::null_mut());
    }
}

#[test]
fn generated_header_declares_the_surface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/tnic.h")).unwrap();
    for sym in [
        "typedef struct TnicKernel TnicKernel",
        "tnic_kernel_new",
        "tnic_kernel_attest",
        "tnic_kernel_verify",
        "tnic_last_error_message",
        "TNIC_ERR_AUTH_FAILURE",
    ] {
        assert!(header.contains(sym), "missing {sym}");
    }
}
