#include <math.h>
#include <stdio.h>

#include "physcorr.h"

#define CHECK(call)                                                        \
  do {                                                                     \
    PhyStatus s_ = (call);                                                 \
    if (s_ != PHY_STATUS_OK) {                                             \
      const char *m_ = phy_last_error();                                   \
      fprintf(stderr, "%s -> %d (%s)\n", #call, (int)s_, m_ ? m_ : "");    \
      return 1;                                                            \
    }                                                                      \
  } while (0)

int main(void) {
  double x = 0.0;
  float frames[6] = {1, 0, 1, 1, 0, 1};
  CHECK(phy_subject_consistency(frames, 3, 2, &x));
  if (fabs(x - sqrt(0.5)) > 1e-6) return 2;

  CHECK(phy_score_mechanics(true, true, false, &x));
  if (x != 0.5) return 3;
  if (phy_score_mechanics(true, false, false, &x) != PHY_STATUS_INVALID_ARGUMENT) return 4;
  if (phy_last_error() == NULL) return 5;

  double scores[4] = {0.10, 0.10, 0.50, 0.90};
  PhyHistogram *h = NULL;
  CHECK(phy_histogram_new(scores, 4, 0.01, &h));
  CHECK(phy_histogram_pair_weight(h, 0.90, 0.10, 1.0, 0.0, &x));
  phy_histogram_free(h);
  if (fabs(x - 0.04) > 1e-12) return 6;

  PhyPolicy *p = NULL;
  CHECK(phy_policy_new(2, 3, 7, 0.1, &p));
  PhyPair pair = {1, 2, 0, 1.0};
  CHECK(phy_policy_dpo_loss(p, pair, 0.1, &x));
  if (fabs(x - log(2.0)) > 1e-12) return 7;
  double trace[51];
  CHECK(phy_policy_train(p, &pair, 1, 0.1, 0.5, 50, trace));
  phy_policy_free(p);
  if (!(trace[50] < trace[0])) return 8;

  printf("ok\n");
  return 0;
}
