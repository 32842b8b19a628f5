/* C interface to the tailsam library. Every call returns a status code; on
 * failure tailsam_last_error() describes the error for the calling thread. */
#ifndef TAILSAM_H
#define TAILSAM_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define TAILSAM_API __declspec(dllexport)
#else
#define TAILSAM_API __attribute__((visibility("default")))
#endif

typedef enum tailsam_status {
  TAILSAM_OK = 0,
  TAILSAM_ERR_DIMENSION = 1,
  TAILSAM_ERR_PARAMETER = 2,
  TAILSAM_ERR_INFEASIBLE_PROFILE = 3,
  TAILSAM_ERR_GEOMETRY = 4,
  TAILSAM_ERR_SHAPE = 5,
  TAILSAM_ERR_EMPTY_CLASS = 6,
  TAILSAM_ERR_NUMERIC = 7,
  TAILSAM_ERR_CONTRACT = 8,
  TAILSAM_ERR_UNDEFINED_RATIO = 9,
  TAILSAM_ERR_INSUFFICIENT_SAMPLES = 10,
  TAILSAM_ERR_IO = 11,
  TAILSAM_ERR_CORRUPT_FILE = 12,
  TAILSAM_ERR_VERSION_MISMATCH = 13,
  TAILSAM_ERR_CONFIG = 14,
  TAILSAM_ERR_INVALID_ARGUMENT = 100,
  TAILSAM_ERR_INTERNAL = 101
} tailsam_status;

typedef struct tailsam_config tailsam_config;
typedef struct tailsam_run tailsam_run;
typedef struct tailsam_checkpoint tailsam_checkpoint;

/* Pass as class_id to select every class (spectrum) or the smallest class
 * (cnc check). */
#define TAILSAM_ALL_CLASSES (-1)

TAILSAM_API const char* tailsam_version(void);
/* Message for the last failed call on this thread; "" if none. */
TAILSAM_API const char* tailsam_last_error(void);
/* snake_case name of a status, e.g. "corrupt_file". */
TAILSAM_API const char* tailsam_status_name(tailsam_status status);

/* ---- configs */
TAILSAM_API tailsam_status tailsam_config_load(const char* path, tailsam_config** out);
TAILSAM_API tailsam_status tailsam_config_from_json(const char* text, tailsam_config** out);
TAILSAM_API tailsam_status tailsam_config_set_seed(tailsam_config* cfg, uint64_t seed);
/* Overrides both the config's output_dir and the environment variable. */
TAILSAM_API tailsam_status tailsam_config_set_output_dir(tailsam_config* cfg, const char* dir);
/* 16 hex digits plus the terminator: buf needs at least 17 bytes. */
TAILSAM_API tailsam_status tailsam_config_hash(const tailsam_config* cfg, char* buf, size_t len);
TAILSAM_API void tailsam_config_free(tailsam_config* cfg);

/* ---- training */
TAILSAM_API tailsam_status tailsam_train(const tailsam_config* cfg, tailsam_run** out);
/* Continues from a checkpoint written by the same config. */
TAILSAM_API tailsam_status tailsam_train_resume(const tailsam_config* cfg,
                                                const tailsam_checkpoint* from,
                                                tailsam_run** out);
TAILSAM_API size_t tailsam_run_num_epochs(const tailsam_run* run);
TAILSAM_API size_t tailsam_run_num_params(const tailsam_run* run);
TAILSAM_API tailsam_status tailsam_run_params(const tailsam_run* run, double* out, size_t len);
/* Final balanced-test accuracies; tail is NaN when there is no tail group
 * and both are NaN when no epoch ran. */
TAILSAM_API tailsam_status tailsam_run_final_accuracy(const tailsam_run* run, double* overall,
                                                      double* tail);
TAILSAM_API const char* tailsam_run_output_dir(const tailsam_run* run);
TAILSAM_API void tailsam_run_free(tailsam_run* run);

/* ---- checkpoints */
TAILSAM_API tailsam_status tailsam_checkpoint_load(const char* path, tailsam_checkpoint** out);
TAILSAM_API size_t tailsam_checkpoint_epoch(const tailsam_checkpoint* ckpt);
TAILSAM_API void tailsam_checkpoint_free(tailsam_checkpoint* ckpt);

/* ---- analyses; out_dir NULL writes next to the checkpoint file */
TAILSAM_API tailsam_status tailsam_spectrum(const tailsam_checkpoint* ckpt, int class_id,
                                            const char* out_dir);
TAILSAM_API tailsam_status tailsam_cnc_check(const tailsam_checkpoint* ckpt, const double* rhos,
                                             size_t num_rhos, int class_id, const char* out_dir);
/* out_dir NULL uses the config's resolved output directory. */
TAILSAM_API tailsam_status tailsam_sweep_rho(const tailsam_config* cfg, const double* rhos,
                                             size_t num_rhos, const char* out_dir);

/* ---- datasets */
typedef struct tailsam_data_params {
  int long_tail;         /* 1: long-tail profile, 0: step profile */
  size_t num_classes;
  size_t n_max;
  double beta;           /* imbalance ratio n_max / n_min */
  size_t input_dim;
  double class_mean_radius;
  double within_class_std;
  int simplex;           /* 1: simplex-vertex means, 0: means on a circle */
  uint64_t seed;
} tailsam_data_params;

TAILSAM_API tailsam_status tailsam_gen_data(const tailsam_data_params* params, const char* path);

#ifdef __cplusplus
}
#endif

#endif
