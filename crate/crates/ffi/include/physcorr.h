#ifndef PHYSCORR_H
#define PHYSCORR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PhyStatus {
  PHY_STATUS_OK = 0,
  PHY_STATUS_NULL_POINTER = 1,
  PHY_STATUS_INVALID_ARGUMENT = 2,
  PHY_STATUS_DEGENERATE = 3,
  PHY_STATUS_OUT_OF_RANGE = 4,
  PHY_STATUS_DIVERGENCE = 5,
  PHY_STATUS_INTERNAL = 6,
} PhyStatus;

// Opaque score histogram.
typedef struct PhyHistogram PhyHistogram;

// Opaque toy policy: `rows` prompts with `width` candidates each.
typedef struct PhyPolicy PhyPolicy;

// One preference pair addressed by row and candidate indices.
typedef struct PhyPair {
  size_t row;
  size_t win;
  size_t lose;
  double weight;
} PhyPair;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. The pointer is
// valid until the next call into this library from the same thread.
const char *phy_last_error(void);

// Mean cosine similarity of consecutive frames; `data` holds `frames * dim`
// values, row-major.
//
// # Safety
// `data` must point to `frames * dim` floats and `out` to a writable double.
enum PhyStatus phy_subject_consistency(const float *data, size_t frames, size_t dim, double *out);

// # Safety
// `out` must point to a writable double.
enum PhyStatus phy_normalize_subject(double raw, double mu, double sigma, double *out);

// # Safety
// `out` must point to a writable double.
enum PhyStatus phy_mix_scores(double s_subj_norm, double s_mech, double lambda, double *out);

// # Safety
// `out` must point to a writable double.
enum PhyStatus phy_huber_loss(double residual, double delta, double *out);

// # Safety
// `out` must point to a writable double.
enum PhyStatus phy_huber_grad(double residual, double delta, double *out);

// Mechanics score from the two verdicts. `q2_answered` must be false exactly
// when `q1_correct` is false.
//
// # Safety
// `out` must point to a writable double.
enum PhyStatus phy_score_mechanics(bool q1_correct, bool q2_answered, bool q2_correct, double *out);

// # Safety
// `scores` must point to `len` doubles and `out` to a writable handle slot.
enum PhyStatus phy_histogram_new(const double *scores,
                                 size_t len,
                                 double bin_width,
                                 struct PhyHistogram **out);

// # Safety
// `hist` must come from [`phy_histogram_new`]; `out` must be writable.
enum PhyStatus phy_histogram_density(const struct PhyHistogram *hist, double score, double *out);

// Pair weight `(beta / (p(s_win) p(s_lose)))^alpha`. A `beta` of zero or less
// selects the histogram's peak density.
//
// # Safety
// `hist` must come from [`phy_histogram_new`]; `out` must be writable.
enum PhyStatus phy_histogram_pair_weight(const struct PhyHistogram *hist,
                                         double s_win,
                                         double s_lose,
                                         double alpha,
                                         double beta,
                                         double *out);

// # Safety
// `hist` must come from [`phy_histogram_new`] and not be used afterwards.
void phy_histogram_free(struct PhyHistogram *hist);

// Policy whose reference equals its seeded initial logits.
//
// # Safety
// `out` must point to a writable handle slot.
enum PhyStatus phy_policy_new(size_t rows,
                              size_t width,
                              uint64_t seed,
                              double init_scale,
                              struct PhyPolicy **out);

// # Safety
// `policy` must come from [`phy_policy_new`]; `out` must be writable.
enum PhyStatus phy_policy_dpo_loss(const struct PhyPolicy *policy,
                                   struct PhyPair pair,
                                   double gamma,
                                   double *out);

// Full-batch gradient descent on the weighted loss, in place. When `trace`
// is non-NULL it receives `steps + 1` losses.
//
// # Safety
// `policy` must come from [`phy_policy_new`]; `pairs` must point to `len`
// pairs; `trace`, if non-NULL, must hold `steps + 1` doubles.
enum PhyStatus phy_policy_train(struct PhyPolicy *policy,
                                const struct PhyPair *pairs,
                                size_t len,
                                double gamma,
                                double learning_rate,
                                size_t steps,
                                double *trace);

// Mean over prompts of the expected value under the policy; `values` is laid
// out like the logits (`rows * width`).
//
// # Safety
// `policy` must come from [`phy_policy_new`]; `values` must hold `len`
// doubles; `out` must be writable.
enum PhyStatus phy_policy_expected_value(const struct PhyPolicy *policy,
                                         const double *values,
                                         size_t len,
                                         double *out);

// Copies the current logits into `buf`, which must hold `rows * width`
// doubles.
//
// # Safety
// `policy` must come from [`phy_policy_new`]; `buf` must hold `len` doubles.
enum PhyStatus phy_policy_logits(const struct PhyPolicy *policy, double *buf, size_t len);

// # Safety
// `policy` must come from [`phy_policy_new`] and not be used afterwards.
void phy_policy_free(struct PhyPolicy *policy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PHYSCORR_H */
