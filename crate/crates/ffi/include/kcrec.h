#ifndef KCREC_H
#define KCREC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes. Zero is success.
 */
typedef enum KcrecStatus {
  KCREC_STATUS_OK = 0,
  KCREC_STATUS_NULL_ARGUMENT = 1,
  KCREC_STATUS_INVALID_UTF8 = 2,
  KCREC_STATUS_USAGE = 3,
  KCREC_STATUS_CONFIG = 4,
  KCREC_STATUS_SHAPE = 5,
  KCREC_STATUS_SCHEMA = 6,
  KCREC_STATUS_DOMAIN = 7,
  KCREC_STATUS_DEGENERATE = 8,
  KCREC_STATUS_FORMAT = 9,
  KCREC_STATUS_COMPATIBILITY = 10,
  KCREC_STATUS_NUMERICAL = 11,
  KCREC_STATUS_IO = 12,
  KCREC_STATUS_PANIC = 13,
} KcrecStatus;

/*
 A trained model bound to its dataset.
 */
typedef struct KcrecModel KcrecModel;

/*
 Planted-group dataset parameters.
 */
typedef struct KcrecSynthParams {
  size_t groups;
  size_t users_per_group;
  size_t concepts_per_group;
  size_t courses;
  size_t videos;
  size_t teachers;
  double p_in;
  double p_out;
  uint64_t seed;
} KcrecSynthParams;

/*
 Aggregate ranking metrics at cutoffs 5, 10 and 20.
 */
typedef struct KcrecMetrics {
  double hr5;
  double hr10;
  double hr20;
  double ndcg5;
  double ndcg10;
  double ndcg20;
  double mrr;
  size_t cases;
  size_t skipped;
} KcrecMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call on the same thread.
 */
const char *kcrec_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *kcrec_version(void);

/*
 Fills `out` with the default dataset parameters.

 # Safety
 `out` must be null or point to writable memory for one struct.
 */
enum KcrecStatus kcrec_synth_defaults(struct KcrecSynthParams *out);

/*
 Writes `schema.txt` and `edges.tsv` into the existing directory `out_dir`.

 # Safety
 `params` must point to a valid struct; `out_dir` must be a NUL-terminated string.
 */
enum KcrecStatus kcrec_synth(const struct KcrecSynthParams *params, const char *out_dir);

/*
 Trains on the dataset in `data_dir` and writes `model.ckpt`, `loss.tsv`
 and `config.txt` into `out_dir` (created if missing). `config` is a
 `key = value` document or null for defaults.

 # Safety
 `data_dir` and `out_dir` must be NUL-terminated strings; `config` may be null.
 */
enum KcrecStatus kcrec_train(const char *data_dir, const char *config, const char *out_dir);

/*
 Loads a checkpoint together with the dataset it was trained on.

 # Safety
 String arguments must be NUL-terminated; `out` must be writable.
 */
enum KcrecStatus kcrec_model_open(const char *checkpoint,
                                  const char *data_dir,
                                  struct KcrecModel **out);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must come from [`kcrec_model_open`] and not be used afterwards.
 */
void kcrec_model_free(struct KcrecModel *model);

/*
 Number of users and concepts.

 # Safety
 `model` must be a live handle; outputs must be writable.
 */
enum KcrecStatus kcrec_model_counts(const struct KcrecModel *model,
                                    size_t *users,
                                    size_t *concepts);

/*
 Predicted preference of `user` for `concept`.

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum KcrecStatus kcrec_model_score(const struct KcrecModel *model,
                                   size_t user,
                                   size_t concept,
                                   double *out);

/*
 Writes up to `capacity` unseen concepts for `user`, best first, into
 `concepts` and (when non-null) `scores`; `written` receives the count.

 # Safety
 `concepts` must hold `capacity` elements, `scores` likewise when non-null.
 */
enum KcrecStatus kcrec_model_recommend(const struct KcrecModel *model,
                                       size_t user,
                                       size_t capacity,
                                       size_t *concepts,
                                       double *scores,
                                       size_t *written);

/*
 Evaluates the held-out split; writes the full report to `report_path`
 when it is non-null.

 # Safety
 `model` must be a live handle; `out` must be writable; `report_path` may be null.
 */
enum KcrecStatus kcrec_model_evaluate(const struct KcrecModel *model,
                                      const char *report_path,
                                      struct KcrecMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KCREC_H */
