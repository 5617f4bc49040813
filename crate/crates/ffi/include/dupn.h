#ifndef DUPN_H
#define DUPN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every call.
 */
typedef enum DupnStatus {
  DUPN_STATUS_OK = 0,
  DUPN_STATUS_NULL_POINTER = 1,
  DUPN_STATUS_INVALID_UTF8 = 2,
  DUPN_STATUS_CONFIG = 3,
  DUPN_STATUS_DATA = 4,
  DUPN_STATUS_CHECKPOINT = 5,
  DUPN_STATUS_FINGERPRINT = 6,
  DUPN_STATUS_IO = 7,
  DUPN_STATUS_NUMERIC = 8,
  DUPN_STATUS_PANIC = 9,
} DupnStatus;

/*
 Opaque engine handle.
 */
typedef struct DupnEngine DupnEngine;

/*
 Counter snapshot of an engine.
 */
typedef struct DupnStats {
  uint64_t requests;
  uint64_t score_calls;
  uint64_t encode_calls;
  uint64_t cache_hits;
  uint64_t cache_misses;
  double hit_rate;
  double mean_latency_us;
} DupnStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Loads a checkpoint into a new engine.

 `config_path` names a run config file whose model and `serve.*` keys
 apply; null uses the built-in defaults. On success `*out` receives the
 engine; on failure it is set to null.

 # Safety
 String arguments must be null or NUL-terminated; `out` must be valid
 for writes.
 */
enum DupnStatus dupn_engine_load(const char *config_path,
                                 const char *checkpoint_path,
                                 struct DupnEngine **out);

/*
 Replaces the engine's parameters with another checkpoint of the same
 architecture and flushes its cache. The old parameters stay on failure.

 # Safety
 `engine` must come from [`dupn_engine_load`]; `checkpoint_path` must be
 NUL-terminated.
 */
enum DupnStatus dupn_engine_reload(const struct DupnEngine *engine, const char *checkpoint_path);

/*
 Releases an engine. Null is a no-op.

 # Safety
 `engine` must come from [`dupn_engine_load`] and not be used afterwards.
 */
void dupn_engine_free(struct DupnEngine *engine);

/*
 Scores one JSON request; `*out_json` receives the JSON response, to be
 released with [`dupn_string_free`]. The engine may be shared between
 threads.

 # Safety
 `engine` must come from [`dupn_engine_load`]; `request_json` must be
 NUL-terminated; `out_json` must be valid for writes.
 */
enum DupnStatus dupn_engine_score_json(const struct DupnEngine *engine,
                                       const char *request_json,
                                       char **out_json);

/*
 Writes the engine's counters to `*out`.

 # Safety
 `engine` must come from [`dupn_engine_load`]; `out` must be valid for
 writes.
 */
enum DupnStatus dupn_engine_stats(const struct DupnEngine *engine, struct DupnStats *out);

/*
 Releases a string returned by this library. Null is a no-op.

 # Safety
 `s` must come from this library and not be used afterwards.
 */
void dupn_string_free(char *s);

/*
 Message of the last failed call on this thread, or null after a
 successful call. Valid until the next call on this thread.
 */
const char *dupn_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUPN_H */
