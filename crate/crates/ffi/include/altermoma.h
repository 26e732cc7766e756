#ifndef ALTERMOMA_H
#define ALTERMOMA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/*
 Status codes returned by every fallible function.
 */
typedef enum AmStatus {
  AM_STATUS_OK = 0,
  AM_STATUS_NULL_POINTER = 1,
  AM_STATUS_INVALID_ARGUMENT = 2,
  AM_STATUS_CONFIG = 3,
  AM_STATUS_IO = 4,
  AM_STATUS_CORRUPT = 5,
  AM_STATUS_UNKNOWN_METHOD = 6,
  AM_STATUS_INTERNAL = 7,
  AM_STATUS_PANIC = 8,
} AmStatus;

/*
 Experiment configuration.
 */
typedef struct AmConfig AmConfig;

/*
 Generated two-modality dataset.
 */
typedef struct AmDataset AmDataset;

/*
 Per-unit importance scores from one pruning run.
 */
typedef struct AmLedger AmLedger;

/*
 Fusion model, possibly pruned.
 */
typedef struct AmModel AmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the last error message of this thread into `buf` (NUL
 terminated, truncated to `len - 1` bytes). Returns the full message
 length in bytes, excluding the terminator.
 */
uintptr_t am_last_error_message(char *buf, uintptr_t len);

/*
 Default configuration.
 */
struct AmConfig *am_config_default(void);

/*
 Parses a TOML configuration.
 */
enum AmStatus am_config_from_toml(const char *toml, struct AmConfig **out);

void am_config_free(struct AmConfig *cfg);

enum AmStatus am_config_set_seed(struct AmConfig *cfg, uint64_t seed);

/*
 Sets the pruning ratio; must lie in `[0, 1)`.
 */
enum AmStatus am_config_set_rho(struct AmConfig *cfg, double rho);

enum AmStatus am_config_set_structured(struct AmConfig *cfg, bool structured);

/*
 Writes the 64-character hex SHA-256 of the configuration plus a NUL
 into `buf`, which must hold at least 65 bytes.
 */
enum AmStatus am_config_hash(const struct AmConfig *cfg, char *buf, uintptr_t len);

/*
 Generates the dataset described by the configuration.
 */
enum AmStatus am_dataset_generate(const struct AmConfig *cfg, struct AmDataset **out);

void am_dataset_free(struct AmDataset *ds);

uintptr_t am_dataset_len(const struct AmDataset *ds);

/*
 Pretrains the backbones and trains the fusion model for `cfg`.
 */
enum AmStatus am_model_train(const struct AmConfig *cfg, struct AmModel **out);

enum AmStatus am_model_load(const char *path, const struct AmConfig *cfg, struct AmModel **out);

enum AmStatus am_model_save(const struct AmModel *model, const char *path);

void am_model_free(struct AmModel *model);

/*
 Number of scalar parameters.
 */
uintptr_t am_model_num_params(const struct AmModel *model);

/*
 Number of scalar parameters whose mask is 1.
 */
uintptr_t am_model_kept_params(const struct AmModel *model);

/*
 Input widths of the LiDAR and camera backbones and the output width.
 */
enum AmStatus am_model_dims(const struct AmModel *model,
                            uintptr_t *in_lidar,
                            uintptr_t *in_camera,
                            uintptr_t *out);

/*
 Runs the model on `rows` samples. Inputs and output are row-major;
 `out` must hold `rows * out_width` values.
 */
enum AmStatus am_model_predict(const struct AmModel *model,
                               const double *x_lidar,
                               const double *x_camera,
                               uintptr_t rows,
                               double *out,
                               uintptr_t out_len);

/*
 Prunes a copy of `model` with `method` ("altermoma", "magnitude",
 "imp", "snip", "synflow" or "random") at the configured ratio, using
 `data` for scoring. Returns the pruned model and its ledger.
 */
enum AmStatus am_prune(const struct AmConfig *cfg,
                       const struct AmModel *model,
                       const struct AmDataset *data,
                       const char *method,
                       struct AmModel **out_model,
                       struct AmLedger **out_ledger);

/*
 Validation loss of `model` on the validation split of `data`.
 */
enum AmStatus am_model_val_loss(const struct AmConfig *cfg,
                                const struct AmModel *model,
                                const struct AmDataset *data,
                                double *out);

void am_ledger_free(struct AmLedger *ledger);

/*
 Number of scored units.
 */
uintptr_t am_ledger_len(const struct AmLedger *ledger);

/*
 Number of units marked as kept.
 */
uintptr_t am_ledger_kept(const struct AmLedger *ledger);

/*
 Writes the ledger as CSV.
 */
enum AmStatus am_ledger_write_csv(const struct AmLedger *ledger, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ALTERMOMA_H */
