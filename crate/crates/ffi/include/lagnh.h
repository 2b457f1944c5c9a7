#ifndef LAGNH_H
#define LAGNH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LagnhStatus {
  LAGNH_STATUS_OK = 0,
  LAGNH_STATUS_NULL_POINTER = 1,
  LAGNH_STATUS_INVALID_ARGUMENT = 2,
  LAGNH_STATUS_IO = 3,
  LAGNH_STATUS_FORMAT = 4,
  LAGNH_STATUS_DATA = 5,
  LAGNH_STATUS_SHAPE = 6,
  LAGNH_STATUS_PARAMETER = 7,
  LAGNH_STATUS_CONTRACT = 8,
  LAGNH_STATUS_CONFIG = 9,
  LAGNH_STATUS_NON_FINITE = 10,
  LAGNH_STATUS_PANIC = 11,
} LagnhStatus;

// A trained model loaded from a checkpoint.
typedef struct LagnhModel LagnhModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *lagnh_version(void);

// Message of the last failed call on this thread, empty after a success.
// The pointer stays valid until the next `lagnh_*` call on this thread.
const char *lagnh_last_error(void);

// Words per packed code of `r` bits.
size_t lagnh_words_per_code(size_t r);

// Loads a checkpoint. On success `*out` owns a model to be released with
// [`lagnh_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum LagnhStatus lagnh_model_load(const char *path, struct LagnhModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`lagnh_model_load`] and not be used afterwards.
void lagnh_model_free(struct LagnhModel *model);

// Code length `r`, feature dimension `d` and category count `c`; any of the
// outputs may be null.
//
// # Safety
// `model` must be a live handle; non-null outputs must be writable.
enum LagnhStatus lagnh_model_dims(const struct LagnhModel *model,
                                  size_t *code_len,
                                  size_t *feature_dim,
                                  size_t *categories);

// Encodes `n` new items against the training graph. `features` is `n x d`
// and `aux` is `n x c` (0/1), both item-major; an all-zero `aux` row means
// no known semantics. Writes `n * lagnh_words_per_code(r)` words to `out`,
// whose capacity `out_len` is checked.
//
// # Safety
// The input buffers must hold the stated number of elements and `out` must
// be writable for `out_len` words.
enum LagnhStatus lagnh_model_encode(const struct LagnhModel *model,
                                    const float *features,
                                    const uint8_t *aux,
                                    size_t n,
                                    uint64_t *out,
                                    size_t out_len);

// Hamming distance between two codes of `words` words each.
//
// # Safety
// `a` and `b` must hold `words` words; `out` must be writable.
enum LagnhStatus lagnh_hamming(const uint64_t *a, const uint64_t *b, size_t words, uint32_t *out);

// Ranks `n_db` database codes of `r` bits by Hamming distance to one query
// (ties by ascending index) and writes the `n_db` indices to `out`.
//
// # Safety
// `query` must hold one code, `db` `n_db` codes and `out` `n_db` slots.
enum LagnhStatus lagnh_rank(const uint64_t *query,
                            const uint64_t *db,
                            size_t n_db,
                            size_t r,
                            size_t *out);

// MAP@K of `n_q` query codes against `n_db` database codes, all `r` bits.
// Labels are item-major 0/1 rows of `c` entries; relevance means sharing a
// label. `retrieved_denominator` non-zero divides each AP by the relevant
// items found in the top K instead of `min(R, K)`.
//
// # Safety
// Buffers must hold the stated number of elements; `out` must be writable.
enum LagnhStatus lagnh_map_at_k(const uint64_t *query_codes,
                                size_t n_q,
                                const uint64_t *db_codes,
                                size_t n_db,
                                size_t r,
                                const uint8_t *query_labels,
                                const uint8_t *db_labels,
                                size_t c,
                                size_t k,
                                int32_t retrieved_denominator,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAGNH_H */
