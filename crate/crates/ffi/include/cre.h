#ifndef CRE_H
#define CRE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum CreStatus {
  CRE_STATUS_OK = 0,
  CRE_STATUS_NULL_POINTER = 1,
  CRE_STATUS_INVALID_UTF8 = 2,
  CRE_STATUS_IO = 3,
  CRE_STATUS_PARSE = 4,
  CRE_STATUS_INVALID_INPUT = 5,
  CRE_STATUS_DIMENSION = 6,
  CRE_STATUS_CHECKPOINT = 7,
  CRE_STATUS_UNKNOWN_ENTITY = 8,
  CRE_STATUS_PANIC = 9,
  CRE_STATUS_OTHER = 10,
} CreStatus;

/**
 * A trained model together with the word vectors it reads.
 */
typedef struct CreModel CreModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint and the word-embedding file it was trained with.
 *
 * # Safety
 * `checkpoint_path` and `embeddings_path` must be NUL-terminated strings;
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum CreStatus cre_model_load(const char *checkpoint_path,
                              const char *embeddings_path,
                              struct CreModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`cre_model_load`] not yet freed.
 */
void cre_model_free(struct CreModel *model);

/**
 * Number of relations including N/A at index 0; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t cre_model_num_relations(const struct CreModel *model);

/**
 * Predicts the `k` best non-N/A relations of one bag.
 *
 * `bag_json` is an object with `head_id`, `tail_id` and `sentences` (each
 * with `tokens`, `head_index`, `tail_index`, `head_id`, `tail_id`). On
 * success `*out_json` receives an array of `{relation, index, score}`
 * objects, best first.
 *
 * # Safety
 * `model` must be a live handle, `bag_json` a NUL-terminated string and
 * `out_json` a valid pointer.
 */
enum CreStatus cre_model_predict_json(const struct CreModel *model,
                                      const char *bag_json,
                                      uintptr_t k,
                                      char **out_json);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string returned by this library not yet freed.
 */
void cre_string_free(char *s);

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call into the library on this thread.
 */
const char *cre_last_error_message(void);

/**
 * TransE score `1 - tanh(|h + r - t|)` of three `dim`-vectors.
 *
 * # Safety
 * `head`, `rel` and `tail` must point to `dim` readable doubles and `out`
 * to one writable double.
 */
enum CreStatus cre_score_transe(const double *head,
                                const double *rel,
                                const double *tail,
                                uintptr_t dim,
                                double *out);

/**
 * ComplEx score `1 + tanh(Re<h, r, conj(t)>)`; `dim` must be even, with
 * real parts first and imaginary parts second.
 *
 * # Safety
 * As for [`cre_score_transe`].
 */
enum CreStatus cre_score_complex(const double *head,
                                 const double *rel,
                                 const double *tail,
                                 uintptr_t dim,
                                 double *out);

/**
 * Divides `n` positive scores by their sum, writing into `out`.
 *
 * # Safety
 * `scores` must point to `n` readable doubles and `out` to `n` writable
 * doubles; they may alias.
 */
enum CreStatus cre_normalize(const double *scores, uintptr_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CRE_H */
