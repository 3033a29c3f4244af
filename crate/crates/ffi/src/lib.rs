//! C ABI for the attestation kernel.
//!
//! Kernels are opaque heap handles. Every fallible call returns a status
//! code (`TNIC_OK` on success); the message of the most recent failure on
//! the calling thread is available through [`tnic_last_error_message`].
//! Frames cross the boundary in the wire encoding.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use tnic::kernel::{DeviceId, Kernel, KernelError, SessionId, SessionKey, KEY_LEN};
use tnic::wire::{WireFrame, FRAME_OVERHEAD};

pub const TNIC_OK: i32 = 0;
pub const TNIC_ERR_NULL_POINTER: i32 = -1;
pub const TNIC_ERR_UNKNOWN_SESSION: i32 = -2;
pub const TNIC_ERR_DUPLICATE_SESSION: i32 = -3;
pub const TNIC_ERR_PAYLOAD_TOO_LARGE: i32 = -4;
pub const TNIC_ERR_AUTH_FAILURE: i32 = -5;
pub const TNIC_ERR_COUNTER_MISMATCH: i32 = -6;
pub const TNIC_ERR_COUNTER_EXHAUSTED: i32 = -7;
pub const TNIC_ERR_MALFORMED_FRAME: i32 = -8;
pub const TNIC_ERR_BUFFER_TOO_SMALL: i32 = -9;
pub const TNIC_ERR_INVALID_ARGUMENT: i32 = -10;
pub const TNIC_ERR_PANIC: i32 = -11;

/// Opaque kernel handle.
pub struct TnicKernel {
    inner: Kernel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn fail(code: i32, msg: impl ToString) -> i32 {
    let text = CString::new(msg.to_string().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
    code
}

fn kernel_code(e: &KernelError) -> i32 {
    match e {
        KernelError::UnknownSession(_) => TNIC_ERR_UNKNOWN_SESSION,
        KernelError::DuplicateSession(_) => TNIC_ERR_DUPLICATE_SESSION,
        KernelError::PayloadTooLarge { .. } => TNIC_ERR_PAYLOAD_TOO_LARGE,
        KernelError::AuthFailure { .. } => TNIC_ERR_AUTH_FAILURE,
        KernelError::CounterMismatch { .. } => TNIC_ERR_COUNTER_MISMATCH,
        KernelError::CounterExhausted(_) => TNIC_ERR_COUNTER_EXHAUSTED,
    }
}

fn guarded(f: impl FnOnce() -> i32) -> i32 {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(TNIC_ERR_PANIC, "panic across the C boundary"))
}

unsafe fn slice<'a>(p: *const u8, len: usize) -> Option<&'a [u8]> {
    if len == 0 {
        Some(&[])
    } else if p.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(p, len))
    }
}

/// Encoded size of a frame carrying `payload_len` bytes.
#[no_mangle]
pub extern "C" fn tnic_frame_len(payload_len: usize) -> usize {
    FRAME_OVERHEAD + payload_len
}

/// Creates a kernel with no sessions. Free with [`tnic_kernel_free`].
#[no_mangle]
pub extern "C" fn tnic_kernel_new(device: u32) -> *mut TnicKernel {
    Box::into_raw(Box::new(TnicKernel {
        inner: Kernel::new(DeviceId(device)),
    }))
}

/// # Safety
/// `k` must come from [`tnic_kernel_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tnic_kernel_free(k: *mut TnicKernel) {
    if !k.is_null() {
        drop(Box::from_raw(k));
    }
}

/// Installs a 32-byte session key.
///
/// # Safety
/// `key` must point to `key_len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn tnic_kernel_provision(
    k: *mut TnicKernel,
    session: u32,
    key: *const u8,
    key_len: usize,
) -> i32 {
    guarded(|| {
        let Some(k) = k.as_mut() else {
            return fail(TNIC_ERR_NULL_POINTER, "null kernel");
        };
        let Some(key) = slice(key, key_len) else {
            return fail(TNIC_ERR_NULL_POINTER, "null key");
        };
        let Ok(key) = <[u8; KEY_LEN]>::try_from(key) else {
            return fail(TNIC_ERR_INVALID_ARGUMENT, format!("key must be {KEY_LEN} bytes"));
        };
        match k.inner.provision_session(SessionId(session), SessionKey::new(key)) {
            Ok(_) => TNIC_OK,
            Err(e) => fail(kernel_code(&e), e),
        }
    })
}

/// Attests `payload` and writes the encoded frame to `out`.
///
/// `out_len` receives the frame size, also when the buffer is too small;
/// in that case no counter moves.
///
/// # Safety
/// Pointers must be valid for the given lengths; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tnic_kernel_attest(
    k: *mut TnicKernel,
    session: u32,
    payload: *const u8,
    payload_len: usize,
    out: *mut u8,
    out_cap: usize,
    out_len: *mut usize,
) -> i32 {
    guarded(|| {
        let (Some(k), false) = (k.as_mut(), out_len.is_null()) else {
            return fail(TNIC_ERR_NULL_POINTER, "null kernel or out_len");
        };
        let Some(payload) = slice(payload, payload_len) else {
            return fail(TNIC_ERR_NULL_POINTER, "null payload");
        };
        let need = tnic_frame_len(payload.len());
        *out_len = need;
        if out.is_null() || out_cap < need {
            return fail(TNIC_ERR_BUFFER_TOO_SMALL, format!("need {need} bytes"));
        }
        match k.inner.attest(SessionId(session), payload) {
            Ok(msg) => {
                let bytes = msg.encode();
                ptr::copy_nonoverlapping(bytes.as_ptr(), out, bytes.len());
                TNIC_OK
            }
            Err(e) => fail(kernel_code(&e), e),
        }
    })
}

/// Verifies one encoded frame against the receive stream of its session.
///
/// # Safety
/// `frame` must point to `frame_len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn tnic_kernel_verify(k: *mut TnicKernel, frame: *const u8, frame_len: usize) -> i32 {
    guarded(|| {
        let Some(k) = k.as_mut() else {
            return fail(TNIC_ERR_NULL_POINTER, "null kernel");
        };
        let Some(bytes) = slice(frame, frame_len) else {
            return fail(TNIC_ERR_NULL_POINTER, "null frame");
        };
        let frame = match WireFrame::decode_bounded(bytes, k.inner.max_payload()) {
            Ok(f) => f,
            Err(e) => return fail(TNIC_ERR_MALFORMED_FRAME, e),
        };
        match k.inner.verify(&frame.into()) {
            Ok(()) => TNIC_OK,
            Err(e) => fail(kernel_code(&e), e),
        }
    })
}

/// Copies the calling thread's last error message, NUL-terminated, into
/// `buf`. Returns the message length without the terminator, or 0 if none.
///
/// # Safety
/// `buf` must be writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn tnic_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len() - 1
    })
}
