#ifndef EPISEG_H
#define EPISEG_H

/*
 * C interface to the episodic segmentation library.
 *
 * Conventions:
 *  - Every fallible call returns an episeg_status; EPISEG_OK is 0.
 *  - On failure, episeg_last_error() holds a message for the calling thread
 *    until its next fallible call.
 *  - Out-parameters are written only on EPISEG_OK.
 *  - Strings returned through char** out-parameters are heap copies owned by
 *    the caller; release them with episeg_string_free.
 *  - Handles are opaque; each *_free tolerates NULL.
 */

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum episeg_status {
  EPISEG_OK = 0,
  EPISEG_INVALID_ARGUMENT = 1, /* bad flags/config/preconditions */
  EPISEG_RUNTIME_ERROR = 2,    /* valid request that failed while running */
  EPISEG_IO_ERROR = 3          /* filesystem-level failure */
} episeg_status;

/* Message for the most recent failing call on this thread ("" if none). */
const char* episeg_last_error(void);

void episeg_string_free(char* text);

/* ---- datasets ------------------------------------------------------------ */

typedef struct episeg_dataset episeg_dataset;

episeg_status episeg_dataset_generate(int64_t num_classes, int64_t num_images, int64_t height,
                                      int64_t width, uint64_t seed, episeg_dataset** out);
episeg_status episeg_dataset_load(const char* dir, episeg_dataset** out);
episeg_status episeg_dataset_save(const episeg_dataset* ds, const char* dir);
int64_t episeg_dataset_num_images(const episeg_dataset* ds);
int64_t episeg_dataset_num_classes(const episeg_dataset* ds);
void episeg_dataset_free(episeg_dataset* ds);

/* ---- models ---------------------------------------------------------------- */

typedef struct episeg_model episeg_model;

episeg_status episeg_model_load(const char* path, episeg_model** out);
/* "ours", "basenet" or "siamese"; owned by the handle. "" for NULL. */
const char* episeg_model_kind(const episeg_model* model);
void episeg_model_free(episeg_model* model);

/* ---- evaluation ------------------------------------------------------------ */

typedef struct episeg_report episeg_report;

/*
 * Scores `predictor` on a deterministic benchmark of `episodes` k-shot
 * episodes drawn from the test classes of the given fold. Predictor names:
 * "ours" (model kind ours), "nn1"/"logreg"/"finetune" (kind basenet),
 * "siamese" (kind siamese), "oracle-gt" (model may be NULL).
 */
episeg_status episeg_evaluate(const episeg_dataset* ds, const episeg_model* model,
                              const char* predictor, int fold, int classes_per_fold, int k,
                              int64_t episodes, uint64_t seed, int threads,
                              episeg_report** out);

double episeg_report_mean_iou(const episeg_report* report);
int64_t episeg_report_episodes(const episeg_report* report);
int64_t episeg_report_scored(const episeg_report* report);
/* 1 when at least one episode went unscored. */
int episeg_report_partial(const episeg_report* report);
episeg_status episeg_report_csv(const episeg_report* report, char** csv_out);
void episeg_report_free(episeg_report* report);

/* ---- whole commands ---------------------------------------------------------
 *
 * The four commands behind the `episeg` CLI. config_text and overrides_text
 * are "key = value" lines ('#' comments allowed; overrides win; unknown keys
 * rejected); either may be NULL. Each command writes its outputs plus a
 * replayable resolved_config.txt into its output directory and returns the
 * human-readable run summary through output_out.
 */
episeg_status episeg_cmd_gen(const char* out_dir, const char* config_text,
                             const char* overrides_text, char** output_out);
episeg_status episeg_cmd_train(const char* data_dir, const char* out_dir,
                               const char* config_text, const char* overrides_text,
                               char** output_out);
episeg_status episeg_cmd_eval(const char* data_dir, const char* out_dir,
                              const char* config_text, const char* overrides_text,
                              char** output_out);
episeg_status episeg_cmd_time(const char* data_dir, const char* out_dir,
                              const char* config_text, const char* overrides_text,
                              char** output_out);

#ifdef __cplusplus
}
#endif

#endif /* EPISEG_H */
