#ifndef SPEECHPRUNE_SPEECHPRUNE_H
#define SPEECHPRUNE_SPEECHPRUNE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define SPRN_API __attribute__((visibility("default")))
#else
#define SPRN_API
#endif

/* Status codes. Values are stable. */
typedef enum sprn_status {
    SPRN_OK = 0,
    SPRN_ERR_CONFIG = 1,
    SPRN_ERR_SHAPE = 2,
    SPRN_ERR_NUMERIC = 3,
    SPRN_ERR_LENGTH = 4,
    SPRN_ERR_RANGE = 5,
    SPRN_ERR_SELECTOR = 6,
    SPRN_ERR_VOCABULARY = 7,
    SPRN_ERR_EMPTY_OUTPUT = 8,
    SPRN_ERR_LOSS_UNDEFINED = 9,
    SPRN_ERR_DEGENERATE_VECTOR = 10,
    SPRN_ERR_PLAN = 11,
    SPRN_ERR_CONSISTENCY = 12,
    SPRN_ERR_IO = 13,
    SPRN_ERR_VERSION = 14,
    SPRN_ERR_CHECKSUM = 15,
    SPRN_ERR_UNDEFINED_METRIC = 16,
    SPRN_ERR_DOMAIN = 17,
    SPRN_ERR_COVERAGE = 18,
    SPRN_ERR_INVALID_ARGUMENT = 98,
    SPRN_ERR_INTERNAL = 99
} sprn_status;

typedef enum sprn_mode { SPRN_MODE_TEXT = 0, SPRN_MODE_SPEECH = 1 } sprn_mode;

/* Message of the last failed call on this thread; "" after success. */
SPRN_API const char* sprn_last_error_message(void);
SPRN_API const char* sprn_status_name(sprn_status status);
SPRN_API const char* sprn_version(void);

/* 0 = quiet, 1 = warnings (default), 2 = progress messages. Goes to stderr. */
SPRN_API void sprn_set_log_level(int level);

/* Strings returned through char** are owned by the caller. */
SPRN_API void sprn_string_free(char* s);

/* ---- workflow commands ------------------------------------------------ */

/* Runs a workflow command (gen, pretrain, train, analyze, prune, heal,
 * eval, sweep, compare-paths, benchmark) with a JSON options object. On
 * success *result_json (if non-null) receives a JSON summary. */
SPRN_API sprn_status sprn_run_command(const char* command, const char* options_json, char** result_json);

/* Newline-separated command names. */
SPRN_API const char* sprn_command_names(void);

/* ---- checkpoints ------------------------------------------------------ */

typedef struct sprn_checkpoint sprn_checkpoint;

/* path may be a checkpoint file or a directory holding model.ckpt. */
SPRN_API sprn_status sprn_checkpoint_load(const char* path, sprn_checkpoint** out);
SPRN_API sprn_status sprn_checkpoint_save(const sprn_checkpoint* ckpt, const char* path);
SPRN_API void sprn_checkpoint_free(sprn_checkpoint* ckpt);
SPRN_API int sprn_checkpoint_num_layers(const sprn_checkpoint* ckpt);
/* Copies up to capacity ids; *count receives the layer count. */
SPRN_API sprn_status sprn_checkpoint_layer_ids(const sprn_checkpoint* ckpt, int* ids, size_t capacity,
                                               size_t* count);
SPRN_API sprn_status sprn_checkpoint_fingerprint(const sprn_checkpoint* ckpt, char** out);
/* Removes layers start+1 .. start+size. */
SPRN_API sprn_status sprn_checkpoint_prune(sprn_checkpoint* ckpt, int start, int size);

/* ---- datasets --------------------------------------------------------- */

typedef struct sprn_dataset sprn_dataset;

SPRN_API sprn_status sprn_dataset_load(const char* dir, sprn_dataset** out);
SPRN_API void sprn_dataset_free(sprn_dataset* ds);
SPRN_API size_t sprn_dataset_size(const sprn_dataset* ds);
SPRN_API sprn_status sprn_dataset_id(const sprn_dataset* ds, char** out);

/* ---- redundancy analysis ---------------------------------------------- */

typedef struct sprn_distance_matrix sprn_distance_matrix;

SPRN_API sprn_status sprn_analyze(const sprn_checkpoint* ckpt, const sprn_dataset* ds, sprn_mode mode,
                                  const char* split, sprn_distance_matrix** out);
SPRN_API void sprn_distance_matrix_free(sprn_distance_matrix* d);
SPRN_API int sprn_distance_matrix_num_layers(const sprn_distance_matrix* d);
SPRN_API sprn_status sprn_distance_matrix_get(const sprn_distance_matrix* d, int n, int ell, double* out);
/* Argmin start for block size n; the final layer is never in the block. */
SPRN_API sprn_status sprn_optimal_block(const sprn_distance_matrix* d, int n, int* ell_star, double* distance);
SPRN_API sprn_status sprn_distance_matrix_heatmap_csv(const sprn_distance_matrix* d, char** out);

/* ---- metrics ---------------------------------------------------------- */

SPRN_API sprn_status sprn_angular_distance(const float* x, const float* y, size_t dim, double* out);
SPRN_API sprn_status sprn_wer(const char* const* refs, const char* const* hyps, size_t count, double* out);
SPRN_API sprn_status sprn_bleu(const char* const* refs, const char* const* hyps, size_t count, double* out);
SPRN_API sprn_status sprn_relative_degradation(double score, double baseline, double* delta);
SPRN_API sprn_status sprn_normalize_text(const char* text, char** out);

#ifdef __cplusplus
}
#endif

#endif
