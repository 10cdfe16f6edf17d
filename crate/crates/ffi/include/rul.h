#ifndef RUL_H
#define RUL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RulStatus {
  RUL_STATUS_OK = 0,
  RUL_STATUS_NULL_ARGUMENT = 1,
  RUL_STATUS_INVALID_UTF8 = 2,
  RUL_STATUS_IO = 3,
  RUL_STATUS_PARSE = 4,
  RUL_STATUS_VALIDATION = 5,
  RUL_STATUS_CHECKPOINT = 6,
  RUL_STATUS_PANIC = 7,
} RulStatus;

/**
 * Opaque model handle.
 */
typedef struct RulModel RulModel;

/**
 * Opaque vocabulary handle.
 */
typedef struct RulVocab RulVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Owned by the
 * library; valid until the next call on this thread.
 */
const char *rul_last_error_message(void);

/**
 * Loads a checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RulStatus rul_model_load(const char *path, struct RulModel **out);

/**
 * # Safety
 * `model` must come from [`rul_model_load`] and not be used afterwards.
 */
void rul_model_free(struct RulModel *model);

/**
 * Loads a `vocab.json` file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RulStatus rul_vocab_load(const char *path, struct RulVocab **out);

/**
 * # Safety
 * `vocab` must come from [`rul_vocab_load`] and not be used afterwards.
 */
void rul_vocab_free(struct RulVocab *vocab);

/**
 * Scores `input_json` (`{"query": "...", "paragraphs": [["sentence", ...], ...]}`)
 * and writes the answerability output as JSON to `out_json`.
 *
 * # Safety
 * Handles must be live, strings NUL-terminated, `out_json` valid.
 */
enum RulStatus rul_predict(const struct RulModel *model,
                           const struct RulVocab *vocab,
                           const char *input_json,
                           bool mean_pooling,
                           double tau,
                           char **out_json);

/**
 * Decides answerability and greedily decodes a response. Writes
 * `{"y_pred": bool, "ranking_score": f64, "text": "..."}` to `out_json`.
 *
 * # Safety
 * Handles must be live, strings NUL-terminated, `out_json` valid.
 */
enum RulStatus rul_generate(const struct RulModel *model,
                            const struct RulVocab *vocab,
                            const char *input_json,
                            double tau,
                            size_t max_len,
                            char **out_json);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void rul_string_free(char *s);

/**
 * Token F1 between whitespace-tokenized strings; -1 on a null or non-UTF-8
 * argument.
 *
 * # Safety
 * Both arguments must be NUL-terminated strings.
 */
double rul_token_f1(const char *pred, const char *gold);

/**
 * Reason and suggestion count (0 to 2) of a refusal; -1 on a bad argument.
 *
 * # Safety
 * `refusal` must be a NUL-terminated string.
 */
int32_t rul_informativeness(const char *refusal);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RUL_H */
