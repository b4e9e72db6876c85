#ifndef HAM_H
#define HAM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Transport used by [`ham_runtime_local`].
 */
typedef enum HamBackend {
  HAM_BACKEND_LOOPBACK = 0,
  /**
   * Localhost TCP with OS-assigned ports.
   */
  HAM_BACKEND_TCP = 1,
} HamBackend;

/**
 * Result of every fallible call.
 */
typedef enum HamStatus {
  HAM_STATUS_OK = 0,
  HAM_STATUS_NULL_ARGUMENT = 1,
  HAM_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Bad name, duplicate registration, registry already sealed.
   */
  HAM_STATUS_REGISTRY = 3,
  HAM_STATUS_UNKNOWN_NAME = 4,
  HAM_STATUS_UNKNOWN_PEER = 5,
  /**
   * Connecting failed or a peer went away.
   */
  HAM_STATUS_TRANSPORT = 6,
  /**
   * Handler digests differ, or a malformed frame or unknown key arrived.
   */
  HAM_STATUS_PROTOCOL = 7,
  /**
   * The remote function reported an error or panicked.
   */
  HAM_STATUS_REMOTE_FAILED = 8,
  HAM_STATUS_MALFORMED_ARGUMENTS = 9,
  HAM_STATUS_INVALID_TOKEN = 10,
  HAM_STATUS_ALLOCATION_FAILED = 11,
  HAM_STATUS_SIZE_MISMATCH = 12,
  HAM_STATUS_TOO_LARGE = 13,
  HAM_STATUS_TIMED_OUT = 14,
  HAM_STATUS_SHUTDOWN = 15,
  /**
   * A Rust panic was caught at the boundary.
   */
  HAM_STATUS_PANIC = 16,
} HamStatus;

typedef struct HamFuture HamFuture;

/**
 * Names and callbacks collected before connecting.
 */
typedef struct HamRegistry HamRegistry;

/**
 * Output slot handed to a C remote function.
 */
typedef struct HamReply HamReply;

typedef struct HamRuntime HamRuntime;

/**
 * A C remote function. Returns 0 on success; anything else fails the call
 * at the origin, with the message set through [`ham_reply_set_error`] if any.
 */
typedef int32_t (*HamFunction)(void *user_data,
                               const uint8_t *args,
                               size_t args_len,
                               struct HamReply *reply);

/**
 * Byte string owned by the library; release with [`ham_bytes_free`].
 */
typedef struct HamBytes {
  uint8_t *data;
  size_t len;
} HamBytes;

/**
 * A buffer on some node. Plain data; copying it does not copy the buffer.
 */
typedef struct HamBuffer {
  uint64_t node;
  uint64_t token;
  uint64_t count;
  uint64_t elem_size;
} HamBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into the library from the same thread.
 */
const char *ham_last_error(void);

/**
 * Static description of a status code.
 */
const char *ham_status_str(enum HamStatus status);

struct HamRegistry *ham_registry_new(void);

/**
 * # Safety
 * `reg` must come from [`ham_registry_new`] and not have been consumed.
 */
void ham_registry_free(struct HamRegistry *reg);

/**
 * Registers `f` under `name`. `user_data` is passed back on every call, from
 * the receive loop's thread.
 *
 * # Safety
 * `reg` must be a live registry and `name` a NUL-terminated string.
 */
enum HamStatus ham_registry_register(struct HamRegistry *reg,
                                     const char *name,
                                     HamFunction f,
                                     void *user_data);

/**
 * Sets the result bytes of the running call.
 *
 * # Safety
 * `reply` must be the pointer passed to the running function.
 */
enum HamStatus ham_reply_set(struct HamReply *reply, const uint8_t *data, size_t len);

/**
 * Sets the failure message reported when the function returns non-zero.
 *
 * # Safety
 * `reply` must be the pointer passed to the running function; `message` a
 * NUL-terminated string.
 */
enum HamStatus ham_reply_set_error(struct HamReply *reply, const char *message);

/**
 * Connects this process as `node` to the TCP peers in `peer_list`
 * (`id=host:port,...`). Consumes `reg`, also on failure.
 *
 * # Safety
 * `reg` must be a live registry, `peer_list` a NUL-terminated string and
 * `out` writable.
 */
enum HamStatus ham_runtime_connect_tcp(struct HamRegistry *reg,
                                       uint64_t node,
                                       const char *peer_list,
                                       struct HamRuntime **out);

/**
 * Builds `n` nodes inside this process, node `i` from `regs[i]`. Consumes
 * every registry, also on failure. On success `out[i]` receives node `i`.
 *
 * # Safety
 * `regs` and `out` must point to `n` entries; each registry must be live.
 */
enum HamStatus ham_runtime_local(enum HamBackend backend,
                                 struct HamRegistry *const *regs,
                                 size_t n,
                                 struct HamRuntime **out);

/**
 * Shuts the runtime down, waits for its receive loop and releases it.
 *
 * # Safety
 * `rt` must come from a connect function and not be used afterwards.
 */
void ham_runtime_free(struct HamRuntime *rt);

/**
 * # Safety
 * `rt` must be a live runtime.
 */
uint64_t ham_runtime_node(const struct HamRuntime *rt);

/**
 * # Safety
 * `rt` must be a live runtime.
 */
uint64_t ham_runtime_node_count(const struct HamRuntime *rt);

/**
 * Blocks until the receive loop ends, e.g. after a terminate request.
 *
 * # Safety
 * `rt` must be a live runtime.
 */
enum HamStatus ham_runtime_wait(const struct HamRuntime *rt);

/**
 * Terminates `target`, which drains its in-flight work first.
 *
 * # Safety
 * `rt` must be a live runtime.
 */
enum HamStatus ham_terminate(const struct HamRuntime *rt, uint64_t target);

/**
 * Terminates every other node.
 *
 * # Safety
 * `rt` must be a live runtime.
 */
enum HamStatus ham_terminate_all(const struct HamRuntime *rt);

/**
 * Starts a call of `name(args)` on `target`.
 *
 * # Safety
 * `rt` must be a live runtime, `name` NUL-terminated, `args` readable for
 * `args_len` bytes and `out` writable.
 */
enum HamStatus ham_offload_async(const struct HamRuntime *rt,
                                 uint64_t target,
                                 const char *name,
                                 const uint8_t *args,
                                 size_t args_len,
                                 struct HamFuture **out);

/**
 * Calls `name(args)` on `target` and waits for the result.
 *
 * # Safety
 * As for [`ham_offload_async`]; `result` must be writable.
 */
enum HamStatus ham_offload_sync(const struct HamRuntime *rt,
                                uint64_t target,
                                const char *name,
                                const uint8_t *args,
                                size_t args_len,
                                struct HamBytes *result);

/**
 * Waits for the result. A future can be read more than once.
 *
 * # Safety
 * `fut` must be a live future and `result` writable.
 */
enum HamStatus ham_future_get(const struct HamFuture *fut, struct HamBytes *result);

/**
 * Like [`ham_future_get`] but gives up after `timeout_ms` with
 * [`HamStatus::TimedOut`].
 *
 * # Safety
 * `fut` must be a live future and `result` writable.
 */
enum HamStatus ham_future_get_timeout(const struct HamFuture *fut,
                                      uint64_t timeout_ms,
                                      struct HamBytes *result);

/**
 * # Safety
 * `fut` must be a live future.
 */
bool ham_future_is_ready(const struct HamFuture *fut);

/**
 * # Safety
 * `fut` must come from [`ham_offload_async`] and not be used afterwards.
 */
void ham_future_free(struct HamFuture *fut);

/**
 * # Safety
 * `bytes` must hold a value filled in by this library, or be zeroed.
 */
void ham_bytes_free(struct HamBytes *bytes);

/**
 * Allocates `count * elem_size` zeroed bytes on `target`.
 *
 * # Safety
 * `rt` must be a live runtime and `out` writable.
 */
enum HamStatus ham_buffer_allocate(const struct HamRuntime *rt,
                                   uint64_t target,
                                   uint64_t count,
                                   uint64_t elem_size,
                                   struct HamBuffer *out);

/**
 * # Safety
 * `rt` must be a live runtime and `buf` readable.
 */
enum HamStatus ham_buffer_free(const struct HamRuntime *rt, const struct HamBuffer *buf);

/**
 * Copies `len` bytes into the whole buffer; `len` must equal its size.
 *
 * # Safety
 * `rt` must be a live runtime, `buf` readable and `src` readable for `len` bytes.
 */
enum HamStatus ham_buffer_put(const struct HamRuntime *rt,
                              const struct HamBuffer *buf,
                              const uint8_t *src,
                              size_t len);

/**
 * Copies the whole buffer into `dst`; `len` must equal its size.
 *
 * # Safety
 * `rt` must be a live runtime, `buf` readable and `dst` writable for `len` bytes.
 */
enum HamStatus ham_buffer_get(const struct HamRuntime *rt,
                              const struct HamBuffer *buf,
                              uint8_t *dst,
                              size_t len);

/**
 * Reads a buffer owned by the node running the current remote function.
 * Only valid inside a remote function.
 *
 * # Safety
 * `buf` must be readable and `dst` writable for `len` bytes.
 */
enum HamStatus ham_local_read(const struct HamBuffer *buf, uint8_t *dst, size_t len);

/**
 * Overwrites a buffer owned by the node running the current remote function.
 * Only valid inside a remote function.
 *
 * # Safety
 * `buf` must be readable and `src` readable for `len` bytes.
 */
enum HamStatus ham_local_write(const struct HamBuffer *buf, const uint8_t *src, size_t len);

/**
 * Live allocations on `target`, written to `out`.
 *
 * # Safety
 * `rt` must be a live runtime and `out` writable.
 */
enum HamStatus ham_live_allocations(const struct HamRuntime *rt, uint64_t target, uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HAM_H */
