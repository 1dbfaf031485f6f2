/* C interface to the filo anomaly detection library.
 *
 * Every fallible call returns a filo_status. On failure the message is
 * available from filo_last_error() on the same thread until the next call.
 * Objects are opaque handles released with their matching *_free function;
 * strings returned through char** are released with filo_string_free. */
#ifndef FILO_FILO_H
#define FILO_FILO_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define FILO_API __declspec(dllexport)
#else
#define FILO_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum filo_status {
  FILO_OK = 0,
  FILO_ERR_INPUT = 1,
  FILO_ERR_CONFIG = 2,
  FILO_ERR_FORMAT = 3,
  FILO_ERR_METRIC = 4,
  FILO_ERR_IO = 5,
  FILO_ERR_TRAINING = 6,
  FILO_ERR_ARGUMENT = 7, /* null handle or pointer */
  FILO_ERR_INTERNAL = 8
} filo_status;

FILO_API const char* filo_status_name(filo_status status);
FILO_API const char* filo_last_error(void);
FILO_API const char* filo_version(void);
/* 0 trace, 1 debug, 2 info, 3 warn, 4 error, 5 critical, 6 off. */
FILO_API void filo_set_log_level(int level);
FILO_API void filo_string_free(char* s);

/* Configuration */
typedef struct filo_config filo_config;

FILO_API filo_status filo_config_default(filo_config** out);
FILO_API filo_status filo_config_load(const char* path, filo_config** out);
FILO_API filo_status filo_config_from_json(const char* json, filo_config** out);
FILO_API filo_status filo_config_to_json(const filo_config* config, char** out);
FILO_API filo_status filo_config_save(const filo_config* config, const char* path);
/* Sets the encoder, training and dataset seeds together. */
FILO_API filo_status filo_config_set_seed(filo_config* config, uint64_t seed);
FILO_API void filo_config_free(filo_config* config);

/* Datasets */
typedef struct filo_dataset filo_dataset;

FILO_API filo_status filo_dataset_generate(const filo_config* config, filo_dataset** out);
FILO_API filo_status filo_dataset_load(const char* dir, filo_dataset** out);
FILO_API filo_status filo_dataset_save(const filo_dataset* dataset, const char* dir);
/* split: "train", "test", "reference" or NULL for all records. */
FILO_API size_t filo_dataset_count(const filo_dataset* dataset, const char* split);
FILO_API void filo_dataset_free(filo_dataset* dataset);

/* Model bundles */
typedef struct filo_model filo_model;

FILO_API filo_status filo_model_create(const filo_config* config, filo_model** out);
FILO_API filo_status filo_model_load(const char* dir, filo_model** out);
FILO_API filo_status filo_model_save(filo_model* model, const char* dir);
FILO_API filo_status filo_model_config(const filo_model* model, filo_config** out);
FILO_API void filo_model_free(filo_model* model);

typedef struct filo_epoch_metrics {
  int phase;
  int epoch;
  double loss_global;
  double loss_local;
  double image_auroc; /* NaN when undefined */
  double pixel_auroc; /* NaN when undefined */
  double seconds;
} filo_epoch_metrics;

typedef void (*filo_epoch_callback)(const filo_epoch_metrics* metrics, void* user);

/* log_path and callback may be NULL. */
FILO_API filo_status filo_train(filo_model* model, const filo_dataset* dataset, const char* log_path,
                                filo_epoch_callback callback, void* user);

/* Inference and evaluation */
typedef void (*filo_trace_callback)(const char* step, void* user);

typedef struct filo_run_options {
  int shots;
  double lambda;             /* < 0 keeps the configured value */
  double sigma;              /* < 0 keeps the configured value */
  const char* kernels;       /* comma-separated kernel ids, NULL for all */
  const char* template_mode; /* "fixed", "learnable", "both" or NULL */
  int include_class_name;    /* -1 keeps the configured value, else 0/1 */
  int filtering;
  int suppression;
  int positions;
  int threads;               /* 0: hardware concurrency */
  const char* heatmap_dir;   /* eval: per-sample heatmaps, NULL for none */
  const char* sidecar_dir;   /* box files for the "file" grounding provider */
  const char* const* references; /* infer with shots > 0: reference image paths */
  size_t reference_count;
  filo_trace_callback trace;
  void* trace_user;
} filo_run_options;

FILO_API void filo_run_options_init(filo_run_options* options);

typedef struct filo_report filo_report;

/* Scores the test split; shots > 0 enrolls references from the reference split. */
FILO_API filo_status filo_eval(const filo_model* model, const filo_dataset* dataset,
                               const filo_run_options* options, filo_report** out);
FILO_API double filo_report_image_auroc(const filo_report* report);
FILO_API double filo_report_pixel_auroc(const filo_report* report);
FILO_API filo_status filo_report_to_jsonl(const filo_report* report, char** out);
FILO_API filo_status filo_report_write(const filo_report* report, const char* path);
FILO_API void filo_report_free(filo_report* report);

/* Scores one PPM image. heatmap_path and json_out may be NULL. The JSON holds
 * score, probabilities, boxes, positions and the best-matching descriptions. */
FILO_API filo_status filo_infer(const filo_model* model, const char* image_path, const char* class_name,
                                const filo_run_options* options, const char* heatmap_path,
                                double* score_out, char** json_out);

/* Writes the encoder's feature pyramid for one PPM image as a tensor container. */
FILO_API filo_status filo_export_features(const filo_model* model, const char* image_path,
                                          const char* out_path);

/* Anomaly vocabulary for a class as JSON: from the LLM when enabled in the
 * config (responses cached on disk), otherwise the bundled list. */
FILO_API filo_status filo_describe(const filo_config* config, const char* class_name, char** json_out);

#ifdef __cplusplus
}
#endif

#endif /* FILO_FILO_H */
