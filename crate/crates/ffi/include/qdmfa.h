#ifndef QDMFA_H
#define QDMFA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Outcome of a call. `QDMFA_STATUS_OK` is zero; every other value names the
// failure class.
typedef enum QdmfaStatus {
  QDMFA_STATUS_OK = 0,
  QDMFA_STATUS_NULL_POINTER,
  QDMFA_STATUS_INVALID_UTF8,
  QDMFA_STATUS_PANIC,
  QDMFA_STATUS_INVALID_GRID,
  QDMFA_STATUS_NON_FINITE,
  QDMFA_STATUS_GRID_MISMATCH,
  QDMFA_STATUS_INVALID_ARGUMENT,
  QDMFA_STATUS_FORMAT,
  QDMFA_STATUS_CHANNEL_NAME_TOO_LONG,
  QDMFA_STATUS_IO,
  QDMFA_STATUS_JSON,
  QDMFA_STATUS_CSV,
  QDMFA_STATUS_SWEEP_TOO_NARROW,
  QDMFA_STATUS_NO_DIPS_FOUND,
  QDMFA_STATUS_DEGENERATE_RESONANCES,
  QDMFA_STATUS_AMBIGUOUS_ASSIGNMENT,
  QDMFA_STATUS_NO_CONVERGENCE,
  QDMFA_STATUS_POOR_FIT,
  QDMFA_STATUS_SINGULAR_AXES,
  QDMFA_STATUS_BIAS_MARGIN_VIOLATED,
  QDMFA_STATUS_POINT_ON_SEGMENT,
  QDMFA_STATUS_OUT_OF_PLANE_TRACE,
  QDMFA_STATUS_STANDOFF_BELOW_DEPTH,
  QDMFA_STATUS_CUTOFF_ABOVE_NYQUIST,
  QDMFA_STATUS_NOT_WIRE_LIKE,
  QDMFA_STATUS_TOO_FEW_SAMPLES,
  QDMFA_STATUS_TOO_FEW_PERIODS,
  QDMFA_STATUS_SEED_BELOW_THRESHOLD,
  QDMFA_STATUS_MASKED_PIXELS,
} QdmfaStatus;

typedef enum QdmfaIvClass {
  QDMFA_IV_CLASS_SHORT_SUSPECTED = 0,
  QDMFA_IV_CLASS_NOMINAL,
  QDMFA_IV_CLASS_OPEN,
} QdmfaIvClass;

// Opaque map handle.
typedef struct QdmfaMap QdmfaMap;

// Grid description, SI units.
typedef struct QdmfaGrid {
  size_t width;
  size_t height;
  // Pixel pitch, m.
  double pitch;
  // Plane height, m.
  double standoff;
} QdmfaGrid;

typedef struct QdmfaIvResult {
  enum QdmfaIvClass kind;
  // Fitted resistance for a suspected short, otherwise NaN.
  double resistance_ohm;
} QdmfaIvResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failing call on this thread, or null if none failed.
// The pointer stays valid until the next failing call on this thread.
const char *qdmfa_last_error_message(void);

// Creates an empty map on a validated grid.
//
// # Safety
// `out` must be valid for writes.
enum QdmfaStatus qdmfa_map_new(struct QdmfaGrid grid, struct QdmfaMap **out);

// Releases a map. Null is ignored.
//
// # Safety
// `map` must be null or a handle from this library not yet freed.
void qdmfa_map_free(struct QdmfaMap *map);

// Grid of a map.
//
// # Safety
// `map` must be a live handle and `out` valid for writes.
enum QdmfaStatus qdmfa_map_grid(const struct QdmfaMap *map, struct QdmfaGrid *out);

// Adds a channel, or replaces the one with the same name. `data` holds
// `width * height` values in row-major order.
//
// # Safety
// `map` must be a live handle, `name` and `unit` NUL-terminated strings and
// `data` valid for `len` reads.
enum QdmfaStatus qdmfa_map_set_channel(struct QdmfaMap *map,
                                       const char *name,
                                       const char *unit,
                                       const double *data,
                                       size_t len);

// Copies a channel into `data`, which must hold `width * height` values.
// Channels carrying `;` metadata are also found by their base name.
//
// # Safety
// `map` must be a live handle, `name` a NUL-terminated string and `data`
// valid for `len` writes.
enum QdmfaStatus qdmfa_map_get_channel(const struct QdmfaMap *map,
                                       const char *name,
                                       double *data,
                                       size_t len);

// Number of channels in a map.
//
// # Safety
// `map` must be a live handle and `out` valid for writes.
enum QdmfaStatus qdmfa_map_channel_count(const struct QdmfaMap *map, size_t *out);

// Reads a QFM file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` valid for writes.
enum QdmfaStatus qdmfa_map_read(const char *path, struct QdmfaMap **out);

// Writes a map as a QFM file (write-then-rename).
//
// # Safety
// `map` must be a live handle and `path` a NUL-terminated string.
enum QdmfaStatus qdmfa_map_write(const struct QdmfaMap *map, const char *path);

// Field of a scenario's current trace on its sensor grid: a map with `Bx`,
// `By`, `Bz` in tesla. A relative trace path resolves against `base_dir`.
//
// # Safety
// `scenario_json` and `base_dir` must be NUL-terminated strings and `out`
// valid for writes.
enum QdmfaStatus qdmfa_simulate_scenario(const char *scenario_json,
                                         const char *base_dir,
                                         struct QdmfaMap **out);

// Sheet current density (`Jx`, `Jy` in A/m) from the `Bz` channel.
// `cutoff_rad_per_m <= 0` selects the automatic cutoff.
//
// # Safety
// `field` must be a live handle and `out` valid for writes.
enum QdmfaStatus qdmfa_invert_bz(const struct QdmfaMap *field,
                                 double depth,
                                 double cutoff_rad_per_m,
                                 size_t pad_factor,
                                 struct QdmfaMap **out);

// Field (`Bx`, `By`, `Bz`) of the `Jx`, `Jy` sheet at a sensor height.
//
// # Safety
// `current` must be a live handle and `out` valid for writes.
enum QdmfaStatus qdmfa_sheet_forward(const struct QdmfaMap *current,
                                     double standoff,
                                     struct QdmfaMap **out);

// Lower and upper resonance of one NV axis in field `b` (tesla). A null
// `constants` pointer selects the standard NV constants.
//
// # Safety
// `b` and `axis` must point to three values; `constants` must be null or
// point to two (zero-field splitting Hz, gyromagnetic ratio Hz/T); `lower`
// and `upper` must be valid for writes.
enum QdmfaStatus qdmfa_resonance_pair(const double *b,
                                      const double *axis,
                                      const double *constants,
                                      double *lower,
                                      double *upper);

// Classifies an I-V curve of `n` samples.
//
// # Safety
// `voltage_v` and `current_a` must be valid for `n` reads and `out` for a
// write.
enum QdmfaStatus qdmfa_classify_iv(const double *voltage_v,
                                   const double *current_a,
                                   size_t n,
                                   double r2_threshold,
                                   double open_floor_a,
                                   struct QdmfaIvResult *out);

// Per-pixel lock-in of a frame stack: every channel of `frames` is one frame,
// in acquisition order. Returns a map with `amplitude` and `phase` (rad).
//
// # Safety
// `frames` must be a live handle and `out` valid for writes.
enum QdmfaStatus qdmfa_lockin(const struct QdmfaMap *frames,
                              double sample_rate_hz,
                              double drive_frequency_hz,
                              struct QdmfaMap **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QDMFA_H */
