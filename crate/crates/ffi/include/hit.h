#ifndef HIT_H
#define HIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum HitStatus {
  HIT_STATUS_OK = 0,
  HIT_STATUS_NULL_POINTER = 1,
  HIT_STATUS_INVALID_ARGUMENT = 2,
  HIT_STATUS_IO = 3,
  HIT_STATUS_FORMAT = 4,
  HIT_STATUS_CHECKPOINT = 5,
  HIT_STATUS_DIMENSION = 6,
  HIT_STATUS_NUMERIC = 7,
  HIT_STATUS_CONFIG = 8,
  HIT_STATUS_PANIC = 9,
} HitStatus;

// A decoded part hierarchy.
typedef struct HitHierarchy HitHierarchy;

// A trained model loaded from a checkpoint.
typedef struct HitModel HitModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *hit_last_error(void);

// Library version as a static NUL-terminated string.
const char *hit_version(void);

// Loads a checkpoint written by `hit train`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum HitStatus hit_model_load(const char *path, struct HitModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`hit_model_load`] and not be used afterwards.
void hit_model_free(struct HitModel *model);

// Number of levels the model decodes.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum HitStatus hit_model_num_levels(const struct HitModel *model, size_t *out);

// Encodes `n_points` surface points and decodes their part hierarchy.
//
// # Safety
// `points` must hold `3 * n_points` doubles; `out` must be writable.
enum HitStatus hit_infer(const struct HitModel *model,
                         const double *points,
                         size_t n_points,
                         struct HitHierarchy **out);

// Loads a hierarchy from a tree file written by `hit export`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum HitStatus hit_hierarchy_load_tree(const char *path, struct HitHierarchy **out);

// Releases a hierarchy. Null is ignored.
//
// # Safety
// `h` must come from this library and not be used afterwards.
void hit_hierarchy_free(struct HitHierarchy *h);

// # Safety
// `h` must be a live handle; `out` must be writable.
enum HitStatus hit_hierarchy_num_levels(const struct HitHierarchy *h, size_t *out);

// # Safety
// `h` must be a live handle; `out` must be writable.
enum HitStatus hit_hierarchy_num_parts(const struct HitHierarchy *h, size_t level, size_t *out);

// Parent index of a part, or -1 at level 1.
//
// # Safety
// `h` must be a live handle; `out` must be writable.
enum HitStatus hit_hierarchy_parent(const struct HitHierarchy *h,
                                    size_t level,
                                    size_t part,
                                    int64_t *out);

// Contained occupancy of one part at `n_points` points.
//
// # Safety
// `points` must hold `3 * n_points` doubles and `out` `n_points`.
enum HitStatus hit_hierarchy_occupancy(const struct HitHierarchy *h,
                                       size_t level,
                                       size_t part,
                                       const double *points,
                                       size_t n_points,
                                       double *out);

// Occupancy of a level's union at `n_points` points.
//
// # Safety
// `points` must hold `3 * n_points` doubles and `out` `n_points`.
enum HitStatus hit_hierarchy_union(const struct HitHierarchy *h,
                                   size_t level,
                                   const double *points,
                                   size_t n_points,
                                   double *out);

// Part index with the highest contained occupancy at each point, lowest
// index on ties.
//
// # Safety
// `points` must hold `3 * n_points` doubles and `out` `n_points`.
enum HitStatus hit_hierarchy_segment(const struct HitHierarchy *h,
                                     size_t level,
                                     const double *points,
                                     size_t n_points,
                                     size_t *out);

// Writes one OBJ mesh per non-empty part and a tree file into `dir`.
//
// # Safety
// `dir` must be a NUL-terminated string.
enum HitStatus hit_hierarchy_export(const struct HitHierarchy *h,
                                    const char *dir,
                                    size_t resolution);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HIT_H */
