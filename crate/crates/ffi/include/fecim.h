#ifndef FECIM_H
#define FECIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FecimStatus {
  FECIM_STATUS_OK = 0,
  FECIM_STATUS_NULL_POINTER = 1,
  FECIM_STATUS_INVALID_ARGUMENT = 2,
  FECIM_STATUS_SOLVER = 3,
  FECIM_STATUS_CALIBRATION_FAILED = 4,
  FECIM_STATUS_IO = 5,
  FECIM_STATUS_FORMAT = 6,
  FECIM_STATUS_PANIC = 7,
} FecimStatus;

/**
 * Opaque parameter set.
 */
typedef struct FecimParams FecimParams;

/**
 * Opaque row with decode thresholds placed over a temperature grid.
 */
typedef struct FecimRow FecimRow;

typedef struct FecimCellOutput {
  /**
   * Output node voltage after the read (V).
   */
  double v_o;
  /**
   * Energy drawn from the supply (J).
   */
  double energy;
} FecimCellOutput;

typedef struct FecimMacResult {
  double v_acc;
  size_t decoded;
  double energy;
} FecimMacResult;

typedef struct FecimNmr {
  double nmr_min;
  size_t argmin;
} FecimNmr;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fecim_version(void);

/**
 * Copies the calling thread's last error message into `buf` (always
 * NUL-terminated when `len > 0`) and returns its full length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t fecim_last_error_message(char *buf, size_t len);

/**
 * Built-in calibrated parameter set.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FecimStatus fecim_params_default(struct FecimParams **out);

/**
 * Parameter document (TOML text) layered over the defaults.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FecimStatus fecim_params_parse(const char *text, struct FecimParams **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FecimStatus fecim_params_load(const char *path, struct FecimParams **out);

/**
 * # Safety
 * `params` must be null or a handle from this library not yet freed.
 */
void fecim_params_free(struct FecimParams *params);

/**
 * # Safety
 * `params` must be a live handle, `key` a NUL-terminated string, `out` valid.
 */
enum FecimStatus fecim_params_get(const struct FecimParams *params, const char *key, double *out);

/**
 * Sets one key. The handle is left unchanged if the result fails validation.
 *
 * # Safety
 * `params` must be a live handle and `key` a NUL-terminated string.
 */
enum FecimStatus fecim_params_set(struct FecimParams *params, const char *key, double value);

/**
 * One cell multiplication at `temp_c`.
 *
 * # Safety
 * `params` must be a live handle and `out` valid.
 */
enum FecimStatus fecim_multiply(const struct FecimParams *params,
                                bool input,
                                bool stored,
                                double temp_c,
                                double vth_offset,
                                struct FecimCellOutput *out);

/**
 * Charge sharing of `n` output capacitors onto the accumulation capacitor.
 *
 * # Safety
 * `per_cell_vo` must point to `n` doubles and `out` be valid.
 */
enum FecimStatus fecim_charge_share(const double *per_cell_vo,
                                    size_t n,
                                    double c_o,
                                    double c_acc,
                                    double *out);

/**
 * Row whose decode thresholds are placed over `[t_min, t_max]` in steps
 * of `t_step` (°C). The parameter handle is copied.
 *
 * # Safety
 * `params` must be a live handle and `out` valid.
 */
enum FecimStatus fecim_row_new(const struct FecimParams *params,
                               double t_min,
                               double t_max,
                               double t_step,
                               struct FecimRow **out);

/**
 * # Safety
 * `row` must be null or a handle from this library not yet freed.
 */
void fecim_row_free(struct FecimRow *row);

/**
 * Number of cells in the row.
 *
 * # Safety
 * `row` must be a live handle.
 */
size_t fecim_row_cells(const struct FecimRow *row);

/**
 * Decode threshold `index` (V); `index < cells`.
 *
 * # Safety
 * `row` must be a live handle and `out` valid.
 */
enum FecimStatus fecim_row_threshold(const struct FecimRow *row, size_t index, double *out);

/**
 * One in-memory MAC. `inputs` and `weights` hold `len` bytes of 0 or 1;
 * `vth_offsets` may be null for a nominal row.
 *
 * # Safety
 * Pointers must reference `len` elements and `out` be valid.
 */
enum FecimStatus fecim_row_mac(const struct FecimRow *row,
                               const uint8_t *inputs,
                               const uint8_t *weights,
                               const double *vth_offsets,
                               size_t len,
                               double temp_c,
                               struct FecimMacResult *out);

/**
 * Minimum noise-margin rate of the row envelope over a temperature grid.
 *
 * # Safety
 * `row` must be a live handle and `out` valid.
 */
enum FecimStatus fecim_row_nmr(const struct FecimRow *row,
                               double t_min,
                               double t_max,
                               double t_step,
                               struct FecimNmr *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FECIM_H */
