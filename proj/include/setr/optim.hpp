// AdamW with decoupled weight decay.
#pragma once

#include "setr/core.hpp"

#include <cstdint>
#include <vector>

namespace setr {

struct OptState {
  int64_t step_count = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::vector<Mat> first_moment;
  std::vector<Mat> second_moment;

  static OptState create(const std::vector<Mat*>& params, double lr, double weight_decay);
};

// One AdamW step over an ordered parameter list. Decoupled decay
// p <- p * (1 - lr * wd) is applied before the bias-corrected Adam update.
// Any non-finite gradient rejects the whole step and leaves params and
// state untouched.
void adamw_step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads,
                OptState& state);

}  // namespace setr
