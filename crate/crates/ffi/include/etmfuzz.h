#ifndef ETMFUZZ_H
#define ETMFUZZ_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Values accepted for `mode` arguments.
 */
typedef enum {
  ETF_EXCEPTION_MODE_KEEP = 0,
  ETF_EXCEPTION_MODE_DISCARD = 1,
} EtfExceptionMode;

typedef enum {
  ETF_FAULT_NONE = 0,
  ETF_FAULT_BUS_FAULT = 1,
  ETF_FAULT_USAGE_FAULT = 2,
  ETF_FAULT_UNEXPECTED_BREAKPOINT = 3,
} EtfFault;

/**
 * Values accepted by [`etf_device_add_filter`].
 */
typedef enum {
  /**
   * Trace while the pc is in `[a, b)`.
   */
  ETF_FILTER_KIND_ADDRESS = 0,
  /**
   * Executing `a` starts tracing, executing `b` stops it.
   */
  ETF_FILTER_KIND_TRIGGER = 1,
  /**
   * Storing `b` to address `a` starts tracing, any other value stops it.
   */
  ETF_FILTER_KIND_DATA = 2,
} EtfFilterKind;

typedef enum {
  ETF_NEW_BITS_NO_NEW = 0,
  ETF_NEW_BITS_NEW_HIT_COUNT = 1,
  ETF_NEW_BITS_NEW_EDGE = 2,
} EtfNewBits;

typedef enum {
  ETF_OUTCOME_OK = 0,
  ETF_OUTCOME_CRASH = 1,
  ETF_OUTCOME_HANG = 2,
} EtfOutcome;

typedef enum {
  ETF_STATUS_OK = 0,
  ETF_STATUS_NULL_POINTER = 1,
  ETF_STATUS_INVALID_ARGUMENT = 2,
  ETF_STATUS_ASSEMBLY_ERROR = 3,
  ETF_STATUS_CONFIG_ERROR = 4,
  ETF_STATUS_TESTCASE_TOO_LARGE = 5,
  ETF_STATUS_DECODE_ERROR = 6,
  ETF_STATUS_SIZE_MISMATCH = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  ETF_STATUS_INTERNAL = 8,
} EtfStatus;

/**
 * Simulated target with its own trace configuration and testcase slots.
 */
typedef struct EtfDevice EtfDevice;

/**
 * Byte buffer owned by the library.
 */
typedef struct {
  uint8_t *data;
  size_t len;
} EtfBuffer;

typedef struct {
  EtfOutcome outcome;
  /**
   * Set when `outcome` is a crash.
   */
  EtfFault fault;
  uint32_t fault_address;
  /**
   * Retired instructions, handlers included.
   */
  uint64_t executed;
  uint64_t thread_executed;
  uint64_t exceptions_taken;
  /**
   * Raw packet bytes; free with `etf_buffer_free`.
   */
  EtfBuffer trace;
} EtfRunResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *etf_version(void);

/**
 * Message for the last failed call on this thread, or null if the last call
 * succeeded. Valid until the next call into the library on this thread.
 */
const char *etf_last_error_message(void);

/**
 * Assembles `source` (NUL-terminated UTF-8) and creates a device for it.
 *
 * # Safety
 * `source` must be a valid C string and `out` a writable pointer.
 */
EtfStatus etf_device_new(const char *source, EtfDevice **out);

/**
 * Releases a device. Null is ignored.
 *
 * # Safety
 * `device` must come from `etf_device_new` and not have been freed.
 */
void etf_device_free(EtfDevice *device);

/**
 * Largest testcase the device accepts, in bytes.
 *
 * # Safety
 * `device` must be a live handle and `out` writable.
 */
EtfStatus etf_device_slot_capacity(EtfDevice *device, size_t *out);

/**
 * Copies a testcase into the current slot. It stays loaded across runs.
 *
 * # Safety
 * `device` must be a live handle; `data` must hold `len` readable bytes.
 */
EtfStatus etf_device_load_testcase(EtfDevice *device, const uint8_t *data, size_t len);

/**
 * Raises exception `number` every `period` thread-mode instructions.
 *
 * # Safety
 * `device` must be a live handle.
 */
EtfStatus etf_device_set_interrupt(EtfDevice *device, uint64_t period, uint8_t number);

/**
 * # Safety
 * `device` must be a live handle.
 */
EtfStatus etf_device_clear_interrupt(EtfDevice *device);

/**
 * Adds a trace filter; `kind` is an `EtfFilterKind`. Filters combine with
 * AND. The configuration is left unchanged on failure.
 *
 * # Safety
 * `device` must be a live handle.
 */
EtfStatus etf_device_add_filter(EtfDevice *device, uint32_t kind, uint32_t a, uint32_t b);

/**
 * # Safety
 * `device` must be a live handle.
 */
EtfStatus etf_device_clear_filters(EtfDevice *device);

/**
 * Whether taken direct branches emit branch packets (on by default).
 *
 * # Safety
 * `device` must be a live handle.
 */
EtfStatus etf_device_set_direct_branch_packets(EtfDevice *device, bool enabled);

/**
 * Resets the device and runs the loaded testcase for at most `budget`
 * instructions. On success `out->trace` owns a buffer the caller must free.
 *
 * # Safety
 * `device` must be a live handle and `out` writable.
 */
EtfStatus etf_device_run(EtfDevice *device, uint64_t budget, EtfRunResult *out);

/**
 * Releases a buffer handed out by the library. An empty buffer is ignored.
 *
 * # Safety
 * `buffer` must come from the library unchanged and not have been freed.
 */
void etf_buffer_free(EtfBuffer buffer);

/**
 * Turns one run's raw trace into a fresh edge bitmap of `bitmap_len` bytes,
 * which must be a power of two. On a decode error the byte offset goes to
 * `error_offset` when it is not null.
 *
 * # Safety
 * `raw` must hold `raw_len` readable bytes and `bitmap` `bitmap_len`
 * writable bytes.
 */
EtfStatus etf_trace_to_bitmap(const uint8_t *raw,
                              size_t raw_len,
                              uint32_t mode,
                              uint8_t *bitmap,
                              size_t bitmap_len,
                              size_t *error_offset);

/**
 * Bitmap index of the block at `base` with `count` atoms, one byte each
 * (nonzero is E), first executed first.
 *
 * # Safety
 * `atoms` must hold `count` readable bytes and `out` be writable.
 */
EtfStatus etf_hash_lcsaj(uint32_t base,
                         const uint8_t *atoms,
                         size_t count,
                         uint32_t map_size,
                         uint32_t *out);

/**
 * Merges `local` into `global` (both `len` bytes) and reports what was new.
 *
 * # Safety
 * `global` must hold `len` writable bytes, `local` `len` readable bytes, and
 * the two must not overlap.
 */
EtfStatus etf_has_new_bits(uint8_t *global, const uint8_t *local, size_t len, EtfNewBits *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ETMFUZZ_H */
