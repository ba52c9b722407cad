#ifndef T3_H
#define T3_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum T3Status {
  T3Status_Ok = 0,
  T3Status_InvalidArgument = 1,
  T3Status_PlanError = 2,
  T3Status_ShapeError = 3,
  T3Status_IoError = 4,
  T3Status_NumericError = 5,
  T3Status_ManifestError = 6,
} T3Status;

/**
 * Opaque model handle: per-layer shared projection weights plus dims.
 */
typedef struct T3Model T3Model;

/**
 * Opaque schedule handle: resolved layer configs for one grid.
 */
typedef struct T3Schedule T3Schedule;

/**
 * Attention-component MAC counts, full vs windowed, for a schedule.
 */
typedef struct T3MacsReport {
  uint64_t full_attn;
  uint64_t windowed_attn;
  double speedup_attn;
} T3MacsReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread. Valid until the next
 * failing call on the same thread.
 */
const char *t3_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *t3_version(void);

/**
 * Creates a model with seeded random weights.
 */
enum T3Status t3_model_new_random(uintptr_t channels,
                                  uintptr_t heads,
                                  uintptr_t ffn_width,
                                  uintptr_t depth,
                                  uint64_t seed,
                                  struct T3Model **out_model);

void t3_model_free(struct T3Model *model);

/**
 * Writes the model to a `.t3w` weight manifest.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
enum T3Status t3_model_save(const struct T3Model *model, const char *path);

/**
 * Loads a model from a `.t3w` weight manifest (f32 payload).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
enum T3Status t3_model_load(const char *path, struct T3Model **out_model);

uintptr_t t3_model_channels(const struct T3Model *model);

uintptr_t t3_model_depth(const struct T3Model *model);

/**
 * Builds the default 5-layer hierarchical schedule for a grid.
 */
enum T3Status t3_schedule_default(uintptr_t t,
                                  uintptr_t h,
                                  uintptr_t w,
                                  uintptr_t depth,
                                  uintptr_t window_t,
                                  uintptr_t window_h,
                                  uintptr_t window_w,
                                  struct T3Schedule **out_schedule);

/**
 * Builds a schedule from a JSON blueprint group (same schema as the CLI
 * config's `group` field).
 *
 * # Safety
 * `json` must be a valid NUL-terminated string.
 */
enum T3Status t3_schedule_from_json(uintptr_t t,
                                    uintptr_t h,
                                    uintptr_t w,
                                    uintptr_t depth,
                                    const char *json,
                                    struct T3Schedule **out_schedule);

void t3_schedule_free(struct T3Schedule *schedule);

/**
 * Full-attention forward for one layer: `x` and `out` are row-major
 * L×C buffers with `len = L·C`.
 *
 * # Safety
 * `x` and `out` must point to `len` valid f32 values.
 */
enum T3Status t3_forward_full(const struct T3Model *model,
                              uintptr_t layer,
                              uintptr_t tokens,
                              const float *x,
                              float *out,
                              uintptr_t len);

/**
 * Windowed multi-scale forward for one layer under a schedule.
 *
 * # Safety
 * `x` and `out` must point to `len` valid f32 values.
 */
enum T3Status t3_forward_windowed(const struct T3Model *model,
                                  const struct T3Schedule *schedule,
                                  uintptr_t layer,
                                  const float *x,
                                  float *out,
                                  uintptr_t len);

enum T3Status t3_macs_attn(const struct T3Model *model,
                           const struct T3Schedule *schedule,
                           struct T3MacsReport *out_report);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* T3_H */
