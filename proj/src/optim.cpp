#include "setr/optim.hpp"

#include <cmath>

namespace setr {

OptState OptState::create(const std::vector<Mat*>& params, double lr, double weight_decay) {
  OptState s;
  s.lr = lr;
  s.weight_decay = weight_decay;
  s.first_moment.reserve(params.size());
  s.second_moment.reserve(params.size());
  for (const Mat* p : params) {
    s.first_moment.push_back(Mat::Zero(p->rows(), p->cols()));
    s.second_moment.push_back(Mat::Zero(p->rows(), p->cols()));
  }
  return s;
}

void adamw_step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads,
                OptState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw std::invalid_argument("adamw_step: parameter/gradient/state counts disagree");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    if (grads[i]->rows() != params[i]->rows() || grads[i]->cols() != params[i]->cols()) {
      throw std::invalid_argument("adamw_step: gradient shape " +
                                  shape_str(grads[i]->rows(), grads[i]->cols()) +
                                  " != parameter shape " +
                                  shape_str(params[i]->rows(), params[i]->cols()));
    }
    if (!grads[i]->allFinite()) {
      throw std::invalid_argument("adamw_step: non-finite gradient at parameter " +
                                  std::to_string(i) + ", step rejected");
    }
  }

  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  for (size_t i = 0; i < params.size(); ++i) {
    Mat& p = *params[i];
    const Mat& g = *grads[i];
    Mat& m = state.first_moment[i];
    Mat& v = state.second_moment[i];

    p *= (1.0 - state.lr * state.weight_decay);
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
    p.array() -= state.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + state.eps);
  }
}

}  // namespace setr
