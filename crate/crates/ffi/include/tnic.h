#ifndef TNIC_H
#define TNIC_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define TNIC_OK 0

#define TNIC_ERR_NULL_POINTER -1

#define TNIC_ERR_UNKNOWN_SESSION -2

#define TNIC_ERR_DUPLICATE_SESSION -3

#define TNIC_ERR_PAYLOAD_TOO_LARGE -4

#define TNIC_ERR_AUTH_FAILURE -5

#define TNIC_ERR_COUNTER_MISMATCH -6

#define TNIC_ERR_COUNTER_EXHAUSTED -7

#define TNIC_ERR_MALFORMED_FRAME -8

#define TNIC_ERR_BUFFER_TOO_SMALL -9

#define TNIC_ERR_INVALID_ARGUMENT -10

#define TNIC_ERR_PANIC -11

/**
 * Opaque kernel handle.
 */
typedef struct TnicKernel TnicKernel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Encoded size of a frame carrying `payload_len` bytes.
 */
uintptr_t tnic_frame_len(uintptr_t payload_len);

/**
 * Creates a kernel with no sessions. Free with [`tnic_kernel_free`].
 */
struct TnicKernel *tnic_kernel_new(uint32_t device);

/**
 * # Safety
 * `k` must come from [`tnic_kernel_new`] and not be used afterwards.
 */
void tnic_kernel_free(struct TnicKernel *k);

/**
 * Installs a 32-byte session key.
 *
 * # Safety
 * `key` must point to `key_len` readable bytes.
 */
int32_t tnic_kernel_provision(struct TnicKernel *k,
                              uint32_t session,
                              const uint8_t *key,
                              uintptr_t key_len);

/**
 * Attests `payload` and writes the encoded frame to `out`.
 *
 * `out_len` receives the frame size, also when the buffer is too small;
 * in that case no counter moves.
 *
 * # Safety
 * Pointers must be valid for the given lengths; `out_len` must be writable.
 */
int32_t tnic_kernel_attest(struct TnicKernel *k,
                           uint32_t session,
                           const uint8_t *payload,
                           uintptr_t payload_len,
                           uint8_t *out,
                           uintptr_t out_cap,
                           uintptr_t *out_len);

/**
 * Verifies one encoded frame against the receive stream of its session.
 *
 * # Safety
 * `frame` must point to `frame_len` readable bytes.
 */
int32_t tnic_kernel_verify(struct TnicKernel *k, const uint8_t *frame, uintptr_t frame_len);

/**
 * Copies the calling thread's last error message, NUL-terminated, into
 * `buf`. Returns the message length without the terminator, or 0 if none.
 *
 * # Safety
 * `buf` must be writable for `cap` bytes.
 */
uintptr_t tnic_last_error_message(char *buf, uintptr_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TNIC_H */
