#ifndef CORDVIP_H
#define CORDVIP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Codes 1-3 match the command-line exit codes.
 */
typedef enum CvStatus {
  CV_STATUS_OK = 0,
  /**
   * Bad argument value or unknown name.
   */
  CV_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Unreadable, malformed or mismatched data.
   */
  CV_STATUS_DATA = 2,
  /**
   * Non-finite value or numeric failure.
   */
  CV_STATUS_NUMERIC = 3,
  /**
   * A required pointer was null or a string was not UTF-8.
   */
  CV_STATUS_NULL_POINTER = 4,
  /**
   * The library panicked; the handle involved should be freed.
   */
  CV_STATUS_PANIC = 5,
} CvStatus;

/**
 * Noise schedule shape for [`cv_schedule_new`].
 */
typedef enum CvScheduleKind {
  CV_SCHEDULE_KIND_SQUARED_COSINE = 0,
  CV_SCHEDULE_KIND_LINEAR = 1,
} CvScheduleKind;

/**
 * Planar-push environment: model geometry plus current state.
 */
typedef struct CvEnv CvEnv;

/**
 * Trained policy loaded from a checkpoint.
 */
typedef struct CvPolicy CvPolicy;

/**
 * Diffusion noise schedule.
 */
typedef struct CvSchedule CvSchedule;

/**
 * Observable environment state.
 */
typedef struct CvEnvState {
  /**
   * Disc x, y, yaw.
   */
  double object[3];
  double q_arm[3];
  double q_hand[2];
  uint64_t step;
  bool success;
} CvEnvState;

/**
 * Outcome of one closed-loop rollout.
 */
typedef struct CvRolloutResult {
  bool success;
  uint64_t steps;
  double final_distance;
  double steps_per_second;
} CvRolloutResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none. Valid
 * until the next failing call on the same thread.
 */
const char *cv_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cv_version(void);

/**
 * Contact values `2 / (1 + exp(theta * d))` for `n` non-negative distances.
 *
 * # Safety
 * `distances` and `out` must each point to `n` doubles.
 */
enum CvStatus cv_contact_map(const double *distances, size_t n, double theta, double *out);

/**
 * Creates a planar-push environment with `n_points` per cloud, reset to
 * `seed`.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum CvStatus cv_env_new(size_t n_points, uint64_t seed, struct CvEnv **out);

/**
 * # Safety
 * `env` must come from [`cv_env_new`] and not be used afterwards. Null is
 * ignored.
 */
void cv_env_free(struct CvEnv *env);

/**
 * # Safety
 * `env` must be a live handle.
 */
enum CvStatus cv_env_reset(struct CvEnv *env, uint64_t seed);

/**
 * # Safety
 * `env` must be a live handle and `out` writable.
 */
enum CvStatus cv_env_state(const struct CvEnv *env, struct CvEnvState *out);

/**
 * Applies absolute joint targets (3 arm, 2 finger values).
 *
 * # Safety
 * `env` must be a live handle; `arm` and `hand` must hold 3 and 2 doubles.
 */
enum CvStatus cv_env_step(struct CvEnv *env, const double *arm, const double *hand);

/**
 * Scripted demonstrator's action for the current state.
 *
 * # Safety
 * `env` must be a live handle; `arm` and `hand` must have room for 3 and 2
 * doubles.
 */
enum CvStatus cv_env_expert_action(const struct CvEnv *env, double *arm, double *hand);

/**
 * Number of points per cloud of this environment.
 *
 * # Safety
 * `env` must be a live handle or null (returns 0).
 */
size_t cv_env_n_points(const struct CvEnv *env);

/**
 * Object and hand clouds (`n_points × 3` row-major each) and the
 * ground-truth contact map (`n_points`) at the current state. Any output may
 * be null to skip it.
 *
 * # Safety
 * `env` must be a live handle; non-null outputs must have the stated sizes.
 */
enum CvStatus cv_env_observe(const struct CvEnv *env,
                             double *object_pc,
                             double *hand_pc,
                             double *contact);

/**
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum CvStatus cv_schedule_new(size_t k, enum CvScheduleKind kind, struct CvSchedule **out);

/**
 * # Safety
 * `s` must come from [`cv_schedule_new`] and not be used afterwards. Null
 * is ignored.
 */
void cv_schedule_free(struct CvSchedule *s);

/**
 * Writes the `K + 1` cumulative signal coefficients, index 0 being clean
 * data.
 *
 * # Safety
 * `s` must be a live handle; `out` must hold `len` doubles.
 */
enum CvStatus cv_schedule_alpha_bars(const struct CvSchedule *s, double *out, size_t len);

/**
 * Loads a policy checkpoint written by `cordvip train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum CvStatus cv_policy_load(const char *path, struct CvPolicy **out);

/**
 * # Safety
 * `p` must come from [`cv_policy_load`] and not be used afterwards. Null is
 * ignored.
 */
void cv_policy_free(struct CvPolicy *p);

/**
 * Closed-loop rollout from env seed `env_seed`.
 *
 * # Safety
 * `p` must be a live handle and `out` writable.
 */
enum CvStatus cv_policy_rollout(const struct CvPolicy *p,
                                uint64_t env_seed,
                                size_t max_steps,
                                uint64_t sampler_seed,
                                struct CvRolloutResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CORDVIP_H */
