#ifndef SYNCHROMAT_H
#define SYNCHROMAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SmStatus {
  SM_STATUS_OK = 0,
  SM_STATUS_NULL_ARGUMENT = 1,
  SM_STATUS_INVALID_UTF8 = 2,
  SM_STATUS_PARSE_ERROR = 3,
  SM_STATUS_VALIDATION_ERROR = 4,
  SM_STATUS_UNKNOWN_CLASS = 5,
  SM_STATUS_UNIT_NOT_IN_NETWORK = 6,
  SM_STATUS_NOT_FOUND = 7,
  SM_STATUS_PANIC = 8,
} SmStatus;

typedef struct SmNetwork SmNetwork;

typedef struct SmRegistry SmRegistry;

typedef struct SmSnapshot SmSnapshot;

/**
 * One `(unit, class, count)` detection triple.
 */
typedef struct SmDetection {
  uint32_t unit;
  uint32_t class_id;
  uint32_t count;
} SmDetection;

/**
 * Last error message on this thread; empty after a successful call. The
 * pointer stays valid until the next library call on the same thread.
 */
const char *sm_last_error_message(void);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void sm_string_free(char *s);

/**
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SmStatus sm_network_from_json(const char *json, struct SmNetwork **out);

/**
 * # Safety
 * `net` must come from `sm_network_from_json` or be null.
 */
void sm_network_free(struct SmNetwork *net);

/**
 * Writes node, arc and unit counts; any output pointer may be null.
 *
 * # Safety
 * `net` must be a live handle.
 */
enum SmStatus sm_network_dimensions(const struct SmNetwork *net,
                                    size_t *nodes,
                                    size_t *arcs,
                                    size_t *units);

/**
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SmStatus sm_registry_from_json(const char *json, struct SmRegistry **out);

/**
 * # Safety
 * `reg` must come from `sm_registry_from_json` or be null.
 */
void sm_registry_free(struct SmRegistry *reg);

/**
 * Hex content hash agents present when connecting.
 *
 * # Safety
 * `reg` must be a live handle and `out` a valid pointer.
 */
enum SmStatus sm_registry_hash(const struct SmRegistry *reg, char **out);

/**
 * Computes the snapshot of one epoch. Every unit named in `detections`
 * counts as reporting; a triple with count 0 marks a unit that saw nothing.
 * Repeated `(unit, class)` triples add up.
 *
 * # Safety
 * `net` and `reg` must be live handles, `detections` must point to `len`
 * triples (or be null with `len == 0`) and `out` must be valid.
 */
enum SmStatus sm_snapshot_compute(const struct SmNetwork *net,
                                  const struct SmRegistry *reg,
                                  uint64_t epoch,
                                  const struct SmDetection *detections,
                                  size_t len,
                                  struct SmSnapshot **out);

/**
 * # Safety
 * `snap` must come from `sm_snapshot_compute` or be null.
 */
void sm_snapshot_free(struct SmSnapshot *snap);

/**
 * Total detected mass in milligrams.
 *
 * # Safety
 * `snap` must be a live handle and `out` a valid pointer.
 */
enum SmStatus sm_snapshot_total_mass(const struct SmSnapshot *snap, uint64_t *out);

/**
 * # Safety
 * `snap` must be a live handle and `out` a valid pointer.
 */
enum SmStatus sm_snapshot_unit_mass(const struct SmSnapshot *snap, uint32_t unit, uint64_t *out);

/**
 * # Safety
 * `snap` must be a live handle and `out` a valid pointer.
 */
enum SmStatus sm_snapshot_material_total(const struct SmSnapshot *snap,
                                         uint32_t material,
                                         uint64_t *out);

/**
 * # Safety
 * `snap` must be a live handle and `out` a valid pointer.
 */
enum SmStatus sm_snapshot_unit_material(const struct SmSnapshot *snap,
                                        uint32_t unit,
                                        uint32_t material,
                                        uint64_t *out);

/**
 * The snapshot as one JSON record, same shape as a `snapshots.jsonl` line
 * with `ts_ms` set to 0.
 *
 * # Safety
 * `snap` must be a live handle and `out` a valid pointer.
 */
enum SmStatus sm_snapshot_to_json(const struct SmSnapshot *snap, char **out);

#endif  /* SYNCHROMAT_H */
