#ifndef NEUROENS_H
#define NEUROENS_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define NE_API __declspec(dllexport)
#else
#define NE_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Mirrors neuroens::ErrorCode; NE_OK is success. */
typedef enum ne_status {
  NE_OK = 0,
  NE_INVALID_ARGUMENT,
  NE_IO_FAILURE,
  NE_FILE_NOT_FOUND,
  NE_MALFORMED_HEADER,
  NE_UNSUPPORTED_DATATYPE,
  NE_TRUNCATED_DATA,
  NE_INVALID_VOLUME,
  NE_INDEX_OUT_OF_RANGE,
  NE_MALFORMED_ROW,
  NE_UNKNOWN_LABEL,
  NE_DUPLICATE_PATH,
  NE_DEGENERATE_INPUT,
  NE_SINGULAR_TRANSFORM,
  NE_NON_POSITIVE_INTENSITIES,
  NE_DIM_MISMATCH,
  NE_ANGLE_OUT_OF_RANGE,
  NE_EMPTY_CLASS,
  NE_SHAPE_MISMATCH,
  NE_CHECK_REQUIRES_EVAL_MODE,
  NE_INCOMPATIBLE_INPUT,
  NE_SHAPE_FLOW_BROKEN,
  NE_VERSION_MISMATCH,
  NE_PAYLOAD_LENGTH_MISMATCH,
  NE_LENGTH_MISMATCH,
  NE_EMPTY,
  NE_ONE_CLASS_ONLY,
  NE_EMPTY_MANIFEST,
  NE_TOO_FEW_SUBJECTS,
  NE_NON_FINITE_LOSS,
  NE_SAMPLE_MISMATCH,
  NE_INVALID_CONFIG,
  NE_NOT_A_RUN_DIRECTORY,
  NE_ALREADY_EXISTS,
  NE_INTERNAL
} ne_status;

typedef struct ne_volume ne_volume;           /* 3D volume, or a slice stack stored as w x h x 3 */
typedef struct ne_manifest ne_manifest;
typedef struct ne_model ne_model;             /* network plus training metadata */
typedef struct ne_predictions ne_predictions; /* per-sample probabilities with truth labels */

typedef void (*ne_log_fn)(const char* line, void* user);

NE_API const char* ne_version(void);
NE_API const char* ne_status_name(ne_status status);
/* {"error": ..., "message": ..., "stage": ...} for the last failure on this thread; "" after success. */
NE_API const char* ne_last_error(void);
/* Strings returned through char** outputs are owned by the caller. */
NE_API void ne_string_free(char* text);

/* volumes */
NE_API ne_status ne_volume_create(const size_t dims[3], const float spacing[3], const float* data, ne_volume** out);
NE_API ne_status ne_volume_read(const char* path, ne_volume** out);
NE_API ne_status ne_volume_write(const ne_volume* vol, const char* path);
NE_API void ne_volume_dims(const ne_volume* vol, size_t dims[3]);
NE_API void ne_volume_spacing(const ne_volume* vol, float spacing[3]);
NE_API const float* ne_volume_data(const ne_volume* vol);
NE_API void ne_volume_free(ne_volume* vol);

/* manifests; labels are CN, pMCI, sMCI, AD */
NE_API ne_status ne_manifest_create(ne_manifest** out);
NE_API ne_status ne_manifest_load(const char* path, ne_manifest** out);
NE_API ne_status ne_manifest_save(const ne_manifest* manifest, const char* path);
NE_API ne_status ne_manifest_add(ne_manifest* manifest, const char* path, const char* label, const char* subject_id,
                                 int augmented, const char* ops);
NE_API size_t ne_manifest_size(const ne_manifest* manifest);
/* Pointers stay valid until the manifest is modified or freed. Any output may be NULL. */
NE_API ne_status ne_manifest_entry(const ne_manifest* manifest, size_t index, const char** path, const char** label,
                                   const char** subject_id, int* augmented, const char** ops);
NE_API void ne_manifest_free(ne_manifest* manifest);

/* phantoms: per_class volumes of each class plus manifest.csv written into out_dir */
NE_API ne_status ne_phantom_dataset(const char* out_dir, size_t per_class, uint64_t seed, size_t dim, float spacing,
                                    double noise_sigma, ne_manifest** out);
NE_API ne_status ne_template_create(size_t dim, float spacing, ne_volume** out);

/* preprocessing; config_json is a "preprocess" config object or NULL for defaults */
NE_API ne_status ne_preprocess(const ne_volume* vol, const ne_volume* template_vol, const char* config_json,
                               uint64_t seed, ne_volume** gray_matter, size_t* center_slice);
NE_API ne_status ne_axial_centroid(const ne_volume* vol, size_t* center_slice);
/* Three axial slices around center, resized to h x w and scaled for the networks. */
NE_API ne_status ne_model_input(const ne_volume* gray_matter, size_t center_slice, size_t h, size_t w,
                                ne_volume** stack);

/* augmentation: stacks_out and chains_out hold `target` elements; originals come first with empty chains */
NE_API ne_status ne_augment_to_target(const ne_volume* const* stacks, size_t count, size_t target, uint64_t seed,
                                      ne_volume** stacks_out, char** chains_out);

/* models: name in custom_cnn, vgg16, alexnet */
NE_API ne_status ne_model_create(const char* name, size_t h, size_t w, size_t classes, double width_multiplier,
                                 double dropout, uint64_t seed, ne_model** out);
NE_API ne_status ne_model_load(const char* path, ne_model** out);
NE_API ne_status ne_model_save(const ne_model* model, const char* path);
NE_API void ne_model_input_shape(const ne_model* model, size_t shape[3]);
NE_API size_t ne_model_classes(const ne_model* model);
/* Row trace as an aligned table (csv = 0) or CSV (csv = 1). */
NE_API ne_status ne_model_trace(const ne_model* model, int csv, char** text);
NE_API ne_status ne_model_metadata(const ne_model* model, char** json);

typedef struct ne_train_options {
  size_t epochs;
  size_t batch_size;
  int use_sgd; /* 0: adam */
  double lr, momentum, beta1, beta2, epsilon;
} ne_train_options;

NE_API void ne_train_options_default(ne_train_options* options);
/* Replaces the weights with the best-validation epoch; history goes to *history_json when non-NULL. */
NE_API ne_status ne_model_train(ne_model* model, const ne_volume* const* train, const int* train_targets,
                                size_t train_count, const ne_volume* const* val, const int* val_targets,
                                size_t val_count, const ne_train_options* options, uint64_t seed,
                                char** history_json);
/* probs receives count x classes values, row-major. */
NE_API ne_status ne_model_predict(ne_model* model, const ne_volume* const* stacks, size_t count, double* probs);
NE_API void ne_model_free(ne_model* model);

/* tasks: AD_vs_CN, pMCI_vs_sMCI, four_class. Head i is the i-th task class in CN, pMCI, sMCI, AD order. */
NE_API ne_status ne_task_classes(const char* task, const char** labels, size_t* count);
NE_API ne_status ne_task_head(const char* task, const char* label, int* head);

/* predictions; actual holds head indices, ids may be NULL */
NE_API ne_status ne_predictions_create(const char* model, const char* task, const double* probs, const int* actual,
                                       const char* const* ids, size_t count, ne_predictions** out);
NE_API ne_status ne_predictions_load(const char* path, ne_predictions** out);
NE_API ne_status ne_predictions_save(const ne_predictions* preds, const char* path);
NE_API size_t ne_predictions_size(const ne_predictions* preds);
NE_API void ne_predictions_free(ne_predictions* preds);
/* Majority vote over models; probabilities are averaged. */
NE_API ne_status ne_ensemble(const ne_predictions* const* preds, size_t count, ne_predictions** out);
NE_API ne_status ne_predictions_metrics(const ne_predictions* preds, const char* task, uint64_t seed, char** json);
/* Writes the ROC curve of one head (head < 0: the task's positive class) as CSV (svg = 0) or SVG. */
NE_API ne_status ne_predictions_roc(const ne_predictions* preds, const char* task, int head, const char* path,
                                    int svg, double* auc);

/* low-level evaluation */
NE_API ne_status ne_auc(const double* scores, const int* actual, size_t count, int positive_class, double* out);
NE_API ne_status ne_majority_vote(const double* probs, size_t models, size_t count, size_t classes, int* labels);

/* experiments; base_dir resolves relative data paths in the config and may be NULL */
NE_API ne_status ne_config_hash(const char* config_json, char** hash);
NE_API ne_status ne_run_experiment(const char* config_json, const char* base_dir, int overwrite, ne_log_fn log,
                                   void* user, char** report_json);
NE_API ne_status ne_provenance(const char* run_dir, char** text, int* matches);

#ifdef __cplusplus
}
#endif

#endif
