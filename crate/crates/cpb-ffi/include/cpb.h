/* C interface to the cpb collaborative predictive blacklisting library.
 *
 * Conventions:
 *   - Functions return CpbStatus; CPB_STATUS_OK (0) means success.
 *   - On failure, cpb_last_error_message() returns a thread-local
 *     description valid until the next failing call on that thread.
 *   - CpbEvents handles are opaque; free them with cpb_events_free().
 */

#ifndef CPB_H
#define CPB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum CpbStatus {
  CPB_STATUS_OK = 0,
  /**
   * Invalid configuration or argument.
   */
  CPB_STATUS_CONFIG_ERROR = 1,
  /**
   * Input data could not be read or parsed.
   */
  CPB_STATUS_DATA_ERROR = 2,
  /**
   * Protocol-level failure.
   */
  CPB_STATUS_PROTOCOL_ERROR = 3,
  /**
   * A required pointer argument was null.
   */
  CPB_STATUS_NULL_ARGUMENT = 4,
  /**
   * A string argument was not valid UTF-8.
   */
  CPB_STATUS_INVALID_UTF8 = 5,
  /**
   * Not a valid dotted-quad IPv4 address.
   */
  CPB_STATUS_INVALID_ADDRESS = 6,
  /**
   * A valid address inside non-routable space.
   */
  CPB_STATUS_NON_ROUTABLE = 7,
  /**
   * An internal panic was caught at the boundary.
   */
  CPB_STATUS_PANIC = 8,
} CpbStatus;

/**
 * Opaque collection of parsed or synthesized alert events.
 */
typedef struct CpbEvents CpbEvents;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; never freed by the caller.
 */
const char *cpb_version(void);

/**
 * The last error message on this thread, or null if none. The pointer is
 * valid until the next failing call on the same thread; do not free it.
 */
const char *cpb_last_error_message(void);

/**
 * EWMA score of `values[0..len]` with smoothing coefficient `alpha`,
 * written to `out`.
 *
 * # Safety
 * `values` must point to `len` readable doubles and `out` must be
 * writable.
 */
enum CpbStatus cpb_ewma_score(const double *values, uintptr_t len, double alpha, double *out);

/**
 * Parses a dotted-quad IPv4 address and writes its /24 prefix (upper 24
 * bits, right-aligned) to `out`. Distinguishes invalid addresses from
 * valid but non-routable ones.
 *
 * # Safety
 * `ip` must be a NUL-terminated string and `out` writable.
 */
enum CpbStatus cpb_prefix24_of_ipv4(const char *ip, uint32_t *out);

/**
 * Formats a /24 prefix value as `a.b.c.0`. `buf_len` must be at least 16.
 *
 * # Safety
 * `buf` must point to `buf_len` writable bytes.
 */
enum CpbStatus cpb_prefix24_format(uint32_t value, char *buf, uintptr_t buf_len);

/**
 * Parses a DShield-format log file. `separator` is `'\t'` or `','`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` receives an owned handle.
 */
enum CpbStatus cpb_events_load_dshield(const char *path, char separator, struct CpbEvents **out);

/**
 * Reads a canonical `org,prefix,day` event file.
 *
 * # Safety
 * As [`cpb_events_load_dshield`].
 */
enum CpbStatus cpb_events_load_canonical(const char *path, struct CpbEvents **out);

/**
 * Synthesizes events from an experiment config text (flat `key = value`
 * form; only the synthesis keys matter here) and a seed.
 *
 * # Safety
 * `config_text` must be a NUL-terminated string; `out` receives an owned
 * handle.
 */
enum CpbStatus cpb_events_synth(const char *config_text, uint64_t seed, struct CpbEvents **out);

/**
 * Number of events in the handle; 0 for null.
 */
uintptr_t cpb_events_len(const struct CpbEvents *events);

/**
 * Writes events in the canonical format.
 *
 * # Safety
 * `events` must be a live handle; `path` a NUL-terminated string.
 */
enum CpbStatus cpb_events_write_canonical(const struct CpbEvents *events, const char *path);

/**
 * Releases an events handle. Null is a no-op.
 *
 * # Safety
 * `events` must have come from this library and not been freed before.
 */
void cpb_events_free(struct CpbEvents *events);

/**
 * Runs a full experiment from a config text and writes `results.csv`,
 * `summary.csv`, and `config.txt` into `out_dir`.
 *
 * # Safety
 * Both arguments must be NUL-terminated strings.
 */
enum CpbStatus cpb_run_experiment(const char *config_text, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CPB_H */
