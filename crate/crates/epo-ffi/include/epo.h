#ifndef EPO_H
#define EPO_H

/* Generated from the epo-ffi Rust crate by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of an FFI call. Non-`Ok` values leave a message in
 * [`epo_last_error`].
 */
typedef enum EpoStatus {
  /**
   * The call succeeded.
   */
  EPO_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  EPO_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  EPO_STATUS_INVALID_UTF8 = 2,
  /**
   * An argument was out of range or otherwise unusable.
   */
  EPO_STATUS_INVALID_ARGUMENT = 3,
  /**
   * A file could not be read or written.
   */
  EPO_STATUS_IO = 4,
  /**
   * Input text could not be parsed.
   */
  EPO_STATUS_PARSE = 5,
  /**
   * Training or self-play failed after starting.
   */
  EPO_STATUS_TRAIN = 6,
  /**
   * A panic was caught at the boundary; state may be stale but the
   * process is intact.
   */
  EPO_STATUS_PANIC = 7,
} EpoStatus;

/**
 * A trainable strategist policy. Opaque; free with [`epo_policy_free`].
 */
typedef struct EpoPolicy EpoPolicy;

/**
 * A batch of trajectories read from a JSONL file. Opaque; free with
 * [`epo_trajectories_free`].
 */
typedef struct EpoTrajectorySet EpoTrajectorySet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message from the most recent failing call on this thread, or null if the
 * most recent call succeeded. The pointer stays valid until the next call
 * into this library on the same thread; do not free it.
 */
const char *epo_last_error(void);

/**
 * Library version as a static string; do not free it.
 */
const char *epo_version(void);

/**
 * Free a string returned through a `char **` out-parameter. Null is ignored.
 *
 * # Safety
 * `text` must have come from this library and not have been freed already.
 */
void epo_string_free(char *text);

/**
 * Discounted reward-to-go for each position: `out[t] = Σ_{j≥t} gamma^(j−t)·rewards[j]`.
 * `out` must have room for `len` doubles.
 *
 * # Safety
 * `rewards` must point to `len` readable doubles and `out` to `len`
 * writable doubles (unless `len` is zero).
 */
enum EpoStatus epo_discounted_returns(const double *rewards, size_t len, double gamma, double *out);

/**
 * Per-position advantages: rewards are peak-scaled, turned into discounted
 * returns, then normalized by the largest absolute return. `out` must have
 * room for `len` doubles.
 *
 * # Safety
 * Same pointer contract as [`epo_discounted_returns`].
 */
enum EpoStatus epo_advantages(const double *rewards, size_t len, double gamma, double *out);

/**
 * Create a fresh uniform policy over the strategy vocabulary of `env_id`
 * ("negotiation", "shop", or "household") with the given sampling
 * temperature.
 *
 * # Safety
 * `env_id` must be a valid C string; `out` must be a writable pointer.
 */
enum EpoStatus epo_policy_new(const char *env_id, double temperature, struct EpoPolicy **out);

/**
 * Load a policy previously written by [`epo_policy_save`] (or by the `epo`
 * command-line tool).
 *
 * # Safety
 * `path` must be a valid C string; `out` must be a writable pointer.
 */
enum EpoStatus epo_policy_open(const char *path, struct EpoPolicy **out);

/**
 * Write the policy to `path` as JSON.
 *
 * # Safety
 * `policy` must be a live handle from this library; `path` a valid C string.
 */
enum EpoStatus epo_policy_save(const struct EpoPolicy *policy, const char *path);

/**
 * Version tag of the policy ("v0" when fresh, bumped on every update).
 * The caller owns the returned string; free with [`epo_string_free`].
 *
 * # Safety
 * `policy` must be a live handle; `out` must be writable.
 */
enum EpoStatus epo_policy_version(const struct EpoPolicy *policy, char **out);

/**
 * Hex digest of the policy parameters; stable across save/load round trips.
 * The caller owns the returned string; free with [`epo_string_free`].
 *
 * # Safety
 * `policy` must be a live handle; `out` must be writable.
 */
enum EpoStatus epo_policy_digest(const struct EpoPolicy *policy, char **out);

/**
 * Free a policy handle. Null is ignored.
 *
 * # Safety
 * `policy` must have come from this library and not have been freed already.
 */
void epo_policy_free(struct EpoPolicy *policy);

/**
 * Read a trajectory JSONL file (one JSON object per line, as written by the
 * rollout stages). Every line is validated; the first bad line fails the
 * whole read.
 *
 * # Safety
 * `path` must be a valid C string; `out` must be writable.
 */
enum EpoStatus epo_trajectories_open(const char *path, struct EpoTrajectorySet **out);

/**
 * Number of trajectories in the set; zero if `set` is null.
 *
 * # Safety
 * `set`, when non-null, must be a live handle from this library.
 */
size_t epo_trajectories_len(const struct EpoTrajectorySet *set);

/**
 * Mean final score across the set. Fails on an empty set.
 *
 * # Safety
 * `set` must be a live handle; `out` must be writable.
 */
enum EpoStatus epo_trajectories_mean_score(const struct EpoTrajectorySet *set, double *out);

/**
 * Serialize one trajectory back to its JSON line. The caller owns the
 * returned string; free with [`epo_string_free`].
 *
 * # Safety
 * `set` must be a live handle; `out` must be writable.
 */
enum EpoStatus epo_trajectories_json(const struct EpoTrajectorySet *set, size_t index, char **out);

/**
 * Free a trajectory set. Null is ignored.
 *
 * # Safety
 * `set` must have come from this library and not have been freed already.
 */
void epo_trajectories_free(struct EpoTrajectorySet *set);

/**
 * Run iterative self-play training on the simulated environments with the
 * scripted actor and the oracle process-reward labeler.
 *
 * `config_json` is a JSON object naming any subset of the training fields
 * (`env_id`, `seed`, `iterations`, `scenarios_per_iteration`,
 * `learning_rate`, `gamma`, `epochs`, `batch_size`, `reward_mode`,
 * `sample_temperature`); missing fields take their defaults, e.g.
 * `{"env_id": "negotiation", "iterations": 2, "scenarios_per_iteration": 4,
 * "seed": 7, "learning_rate": 200.0}`.
 *
 * On success `metrics_out` receives one JSON object per iteration
 * (newline-separated, caller frees with [`epo_string_free`]), and the
 * trained policy is written to `policy_path` unless it is null.
 *
 * # Safety
 * `config_json` must be a valid C string, `policy_path` a valid C string or
 * null, and `metrics_out` writable.
 */
enum EpoStatus epo_self_play(const char *config_json, const char *policy_path, char **metrics_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EPO_H */
