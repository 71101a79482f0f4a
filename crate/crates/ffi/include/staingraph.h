#ifndef STAINGRAPH_H
#define STAINGRAPH_H

/* Generated by cbindgen from staingraph-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define SG_OK 0

/**
 * Invalid configuration or arguments.
 */
#define SG_ERR_USAGE -1

/**
 * I/O or runtime failure.
 */
#define SG_ERR_RUNTIME -2

/**
 * A required pointer argument was null.
 */
#define SG_ERR_NULL -3

/**
 * An out-buffer was too small.
 */
#define SG_ERR_BUFFER -4

/**
 * An index was out of range.
 */
#define SG_ERR_INDEX -5

/**
 * A panic was caught at the boundary.
 */
#define SG_ERR_PANIC -6

/**
 * A dataset with graphs built and positional encodings precomputed for a
 * given walk length.
 */
typedef struct SgDataset SgDataset;

/**
 * A loaded checkpoint: configuration plus parameters.
 */
typedef struct SgModel SgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; valid until the next
 * failing call on the same thread.
 */
const char *sg_last_error(void);

/**
 * Library version as a static string.
 */
const char *sg_version(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be a valid
 * pointer. On success `*out` owns the model until `sg_model_free`.
 */
int32_t sg_model_load(const char *path, struct SgModel **out);

/**
 * Releases a model handle; a null pointer is a no-op.
 *
 * # Safety
 * `model` must come from `sg_model_load` and not be freed twice.
 */
void sg_model_free(struct SgModel *model);

/**
 * Number of output classes of a loaded model.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
int32_t sg_model_num_classes(const struct SgModel *model, uint32_t *out);

/**
 * Loads a dataset manifest and builds (or reads back) the patient graphs
 * using the model's graph-construction parameters and walk length.
 *
 * # Safety
 * `manifest` must be a valid NUL-terminated path; `model` and `out` must be
 * valid pointers. On success `*out` owns the dataset until
 * `sg_dataset_free`.
 */
int32_t sg_dataset_load(const char *manifest, const struct SgModel *model, struct SgDataset **out);

/**
 * Releases a dataset handle; a null pointer is a no-op.
 *
 * # Safety
 * `dataset` must come from `sg_dataset_load` and not be freed twice.
 */
void sg_dataset_free(struct SgDataset *dataset);

/**
 * Number of patients in a dataset.
 *
 * # Safety
 * `dataset` and `out` must be valid pointers.
 */
int32_t sg_dataset_len(const struct SgDataset *dataset, uint32_t *out);

/**
 * Patient id at `index`, as a caller-owned string.
 *
 * # Safety
 * `dataset` and `out` must be valid pointers; free the string with
 * `sg_string_free`.
 */
int32_t sg_dataset_patient_id(const struct SgDataset *dataset, uint32_t index, char **out);

/**
 * Ground-truth label index of the patient at `index`.
 *
 * # Safety
 * `dataset` and `out` must be valid pointers.
 */
int32_t sg_dataset_label(const struct SgDataset *dataset, uint32_t index, uint32_t *out);

/**
 * Runs one evaluation-mode forward pass and writes the class probabilities
 * into `out_probs` (length `len`, which must equal the model's class
 * count).
 *
 * # Safety
 * All pointers must be valid and `out_probs` must have space for `len`
 * doubles.
 */
int32_t sg_predict(const struct SgModel *model,
                   const struct SgDataset *dataset,
                   uint32_t index,
                   double *out_probs,
                   uintptr_t len);

/**
 * Runs one forward pass and returns the full explainability report as a
 * JSON document (stain attention, entropy, interactions, layer importance,
 * heatmap entries).
 *
 * # Safety
 * All pointers must be valid; free the returned string with
 * `sg_string_free`.
 */
int32_t sg_explain_json(const struct SgModel *model,
                        const struct SgDataset *dataset,
                        uint32_t index,
                        char **out_json);

/**
 * Releases a string returned by this library; a null pointer is a no-op.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void sg_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STAINGRAPH_H */
