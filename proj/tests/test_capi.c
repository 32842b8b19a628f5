/* Exercises the C interface through the shared library only. */
#define _POSIX_C_SOURCE 200809L
#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/stat.h>
#include <unistd.h>

#include "tailsam/tailsam.h"

static int failures = 0;

#define EXPECT(cond)                                                      \
  do {                                                                    \
    if (!(cond)) {                                                        \
      fprintf(stderr, "%s:%d: expected %s\n", __FILE__, __LINE__, #cond); \
      ++failures;                                                         \
    }                                                                     \
  } while (0)

#define EXPECT_STATUS(call, want)                                                     \
  do {                                                                                \
    tailsam_status got_ = (call);                                                     \
    if (got_ != (want)) {                                                             \
      fprintf(stderr, "%s:%d: %s -> %s (%s), expected %s\n", __FILE__, __LINE__, #call, \
              tailsam_status_name(got_), tailsam_last_error(), tailsam_status_name(want)); \
      ++failures;                                                                     \
    }                                                                                 \
  } while (0)

static const char* kConfig =
    "{\"dataset\":{\"profile\":{\"kind\":\"long_tail\",\"num_classes\":2,\"n_max\":100,\"beta\":10},"
    "\"geometry\":{\"input_dim\":2,\"class_mean_radius\":1.5,\"within_class_std\":0.8},"
    "\"test_per_class\":50},"
    "\"model\":{\"layer_sizes\":[2,6,2],\"activation\":\"tanh\"},"
    "\"reweight\":{\"threshold_epoch\":6},"
    "\"optimizer\":{\"kind\":\"sam\",\"rho\":0.05,\"rho_drw\":0.1},"
    "\"lr\":{\"base_lr\":0.05},"
    "\"epochs\":8,\"batch_size\":16,\"seed\":3,\"checkpoint_epochs\":[4],"
    "\"analysis\":{\"lanczos_iters\":10,\"num_probes\":2,\"cnc_num_batches\":16}}";

static int exists(const char* dir, const char* name) {
  char path[1024];
  struct stat st;
  snprintf(path, sizeof path, "%s/%s", dir, name);
  return stat(path, &st) == 0;
}

static void join(char* out, size_t len, const char* dir, const char* name) {
  snprintf(out, len, "%s/%s", dir, name);
}

int main(void) {
  char root[] = "/tmp/tailsam_capi_XXXXXX";
  if (!mkdtemp(root)) return 1;
  char run_dir[512], other_dir[512], path[1024];
  join(run_dir, sizeof run_dir, root, "run");
  join(other_dir, sizeof other_dir, root, "resumed");

  EXPECT(strlen(tailsam_version()) > 0);
  EXPECT(strcmp(tailsam_status_name(TAILSAM_ERR_CORRUPT_FILE), "corrupt_file") == 0);
  EXPECT(strcmp(tailsam_status_name(TAILSAM_OK), "ok") == 0);

  /* Config errors. */
  tailsam_config* cfg = NULL;
  EXPECT_STATUS(tailsam_config_from_json("{\"epochz\":3}", &cfg), TAILSAM_ERR_CONFIG);
  EXPECT(cfg == NULL);
  EXPECT(strstr(tailsam_last_error(), "epochz") != NULL);
  EXPECT_STATUS(tailsam_config_from_json("{not json", &cfg), TAILSAM_ERR_CONFIG);
  EXPECT_STATUS(tailsam_config_from_json(NULL, &cfg), TAILSAM_ERR_INVALID_ARGUMENT);
  EXPECT_STATUS(tailsam_config_load("/nonexistent/config.json", &cfg), TAILSAM_ERR_IO);
  EXPECT_STATUS(tailsam_config_from_json("{\"epochs\":2,\"reweight\":{\"threshold_epoch\":5}}", &cfg),
                TAILSAM_ERR_CONFIG);

  EXPECT_STATUS(tailsam_config_from_json(kConfig, &cfg), TAILSAM_OK);
  if (!cfg) return 1;
  char hash[17], small[8];
  EXPECT_STATUS(tailsam_config_hash(cfg, hash, sizeof hash), TAILSAM_OK);
  EXPECT(strlen(hash) == 16);
  EXPECT_STATUS(tailsam_config_hash(cfg, small, sizeof small), TAILSAM_ERR_INVALID_ARGUMENT);
  EXPECT_STATUS(tailsam_config_set_output_dir(cfg, run_dir), TAILSAM_OK);
  char hash2[17];
  tailsam_config_hash(cfg, hash2, sizeof hash2);
  EXPECT(strcmp(hash, hash2) == 0);

  /* Training. */
  tailsam_run* run = NULL;
  EXPECT_STATUS(tailsam_train(cfg, &run), TAILSAM_OK);
  if (!run) return 1;
  EXPECT(tailsam_run_num_epochs(run) == 8);
  const size_t n = tailsam_run_num_params(run);
  EXPECT(n == 2 * 6 + 6 + 6 * 2 + 2);
  double* w = malloc(n * sizeof(double));
  double* w2 = malloc(n * sizeof(double));
  EXPECT_STATUS(tailsam_run_params(run, w, n), TAILSAM_OK);
  EXPECT_STATUS(tailsam_run_params(run, w, n - 1), TAILSAM_ERR_INVALID_ARGUMENT);
  double overall = -1, tail = -1;
  EXPECT_STATUS(tailsam_run_final_accuracy(run, &overall, &tail), TAILSAM_OK);
  EXPECT(overall >= 0 && overall <= 1);
  EXPECT(strcmp(tailsam_run_output_dir(run), run_dir) == 0);
  EXPECT(exists(run_dir, "metrics.csv"));
  EXPECT(exists(run_dir, "summary.json"));
  EXPECT(exists(run_dir, "checkpoint_4.json"));
  EXPECT(exists(run_dir, "checkpoint_8.json"));

  /* Resume from epoch 4 into another directory: same final parameters. */
  tailsam_checkpoint* ck = NULL;
  join(path, sizeof path, run_dir, "checkpoint_4.json");
  EXPECT_STATUS(tailsam_checkpoint_load(path, &ck), TAILSAM_OK);
  if (!ck) return 1;
  EXPECT(tailsam_checkpoint_epoch(ck) == 4);
  EXPECT_STATUS(tailsam_config_set_output_dir(cfg, other_dir), TAILSAM_OK);
  tailsam_run* resumed = NULL;
  EXPECT_STATUS(tailsam_train_resume(cfg, ck, &resumed), TAILSAM_OK);
  if (resumed) {
    EXPECT(tailsam_run_num_epochs(resumed) == 4);
    tailsam_run_params(resumed, w2, n);
    EXPECT(memcmp(w, w2, n * sizeof(double)) == 0);
    tailsam_run_free(resumed);
  }

  /* A different seed changes the hash and the checkpoint no longer fits. */
  tailsam_config_set_seed(cfg, 4);
  EXPECT_STATUS(tailsam_train_resume(cfg, ck, &resumed), TAILSAM_ERR_CONFIG);

  /* Analyses on the checkpoint. */
  EXPECT_STATUS(tailsam_spectrum(ck, TAILSAM_ALL_CLASSES, NULL), TAILSAM_OK);
  EXPECT(exists(run_dir, "spectrum_4_class0.csv"));
  EXPECT(exists(run_dir, "spectrum_4_class1.json"));
  EXPECT_STATUS(tailsam_spectrum(ck, 1, other_dir), TAILSAM_OK);
  EXPECT(exists(other_dir, "spectrum_4_class1.csv"));
  EXPECT_STATUS(tailsam_spectrum(ck, 7, NULL), TAILSAM_ERR_PARAMETER);
  const double rhos[] = {0.0, 0.05};
  EXPECT_STATUS(tailsam_cnc_check(ck, rhos, 2, TAILSAM_ALL_CLASSES, NULL), TAILSAM_OK);
  EXPECT(exists(run_dir, "cnc_4.csv"));
  EXPECT_STATUS(tailsam_cnc_check(ck, NULL, 2, 0, NULL), TAILSAM_ERR_INVALID_ARGUMENT);
  tailsam_checkpoint_free(ck);

  /* Broken checkpoints. */
  tailsam_checkpoint* bad = NULL;
  join(path, sizeof path, root, "missing.json");
  EXPECT_STATUS(tailsam_checkpoint_load(path, &bad), TAILSAM_ERR_IO);
  join(path, sizeof path, root, "trunc.json");
  FILE* f = fopen(path, "w");
  fputs("{\"format_version\":1,\"config_hash\":\"ab", f);
  fclose(f);
  EXPECT_STATUS(tailsam_checkpoint_load(path, &bad), TAILSAM_ERR_CORRUPT_FILE);
  EXPECT(bad == NULL);

  /* Sweep. */
  char sweep_dir[512];
  join(sweep_dir, sizeof sweep_dir, root, "sweep");
  const double sweep[] = {0.0, 0.1};
  EXPECT_STATUS(tailsam_sweep_rho(cfg, sweep, 2, sweep_dir), TAILSAM_OK);
  EXPECT(exists(sweep_dir, "sweep_rho.csv"));
  EXPECT_STATUS(tailsam_sweep_rho(cfg, sweep, 0, sweep_dir), TAILSAM_ERR_INVALID_ARGUMENT);

  /* Data generation. */
  tailsam_data_params p = {1, 3, 200, 20.0, 2, 2.0, 0.5, 0, 9};
  join(path, sizeof path, root, "data.csv");
  EXPECT_STATUS(tailsam_gen_data(&p, path), TAILSAM_OK);
  struct stat st;
  EXPECT(stat(path, &st) == 0 && st.st_size > 0);
  p.beta = 0.5;
  EXPECT_STATUS(tailsam_gen_data(&p, path), TAILSAM_ERR_INFEASIBLE_PROFILE);
  EXPECT_STATUS(tailsam_gen_data(NULL, path), TAILSAM_ERR_INVALID_ARGUMENT);

  /* No epochs: accuracies are NaN. */
  tailsam_config* zero = NULL;
  EXPECT_STATUS(tailsam_config_from_json("{\"epochs\":0,\"reweight\":{\"threshold_epoch\":0}}", &zero),
                TAILSAM_OK);
  if (zero) {
    char zdir[512];
    join(zdir, sizeof zdir, root, "zero");
    tailsam_config_set_output_dir(zero, zdir);
    tailsam_run* zr = NULL;
    EXPECT_STATUS(tailsam_train(zero, &zr), TAILSAM_OK);
    if (zr) {
      tailsam_run_final_accuracy(zr, &overall, &tail);
      EXPECT(isnan(overall) && isnan(tail));
      tailsam_run_free(zr);
    }
    tailsam_config_free(zero);
  }

  tailsam_run_free(run);
  tailsam_config_free(cfg);
  tailsam_config_free(NULL);
  free(w);
  free(w2);

  char cmd[600];
  snprintf(cmd, sizeof cmd, "rm -rf '%s'", root);
  if (system(cmd) != 0) fprintf(stderr, "could not remove %s\n", root);

  if (failures) {
    fprintf(stderr, "%d check(s) failed\n", failures);
    return 1;
  }
  printf("all C API checks passed\n");
  return 0;
}
