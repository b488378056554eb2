#include "setr/tape.hpp"

#include <cmath>

namespace setr {

namespace {

void require_same_shape(const Value& a, const Value& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.rows(), a.cols()) + " vs " +
                                shape_str(b.rows(), b.cols()));
  }
}

void require_same_tape(const Value& a, const Value& b, const char* op) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": values from different tapes");
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Value Tape::leaf(Mat m) {
  return emit(std::move(m), nullptr);
}

Value Tape::emit(Mat value, std::function<void(Tape&, const Mat&)> pull) {
  nodes_.push_back(Node{std::move(value), Mat(), std::move(pull)});
  return Value{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Value root) {
  if (root.tape != this) throw std::invalid_argument("backward: root from another tape");
  if (root.rows() != 1 || root.cols() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got " +
                                shape_str(root.rows(), root.cols()));
  }
  accumulate(root.id, Mat::Ones(1, 1));
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad.size() != 0 && n.pull) n.pull(*this, n.grad);
  }
}

Value matmul(Value a, Value b) {
  require_same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                shape_str(a.rows(), a.cols()) + " x " +
                                shape_str(b.rows(), b.cols()));
  }
  Tape& t = *a.tape;
  Mat out = a.data() * b.data();
  const int ia = a.id, ib = b.id;
  return t.emit(std::move(out), [ia, ib](Tape& tp, const Mat& up) {
    tp.accumulate(ia, up * tp.value_of(ib).transpose());
    tp.accumulate(ib, tp.value_of(ia).transpose() * up);
  });
}

Value transpose(Value a) {
  Tape& t = *a.tape;
  const int ia = a.id;
  return t.emit(a.data().transpose(), [ia](Tape& tp, const Mat& up) {
    tp.accumulate(ia, up.transpose());
  });
}

Value add(Value a, Value b) {
  require_same_tape(a, b, "add");
  require_same_shape(a, b, "add");
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.emit(a.data() + b.data(), [ia, ib](Tape& tp, const Mat& up) {
    tp.accumulate(ia, up);
    tp.accumulate(ib, up);
  });
}

Value sub(Value a, Value b) {
  require_same_tape(a, b, "sub");
  require_same_shape(a, b, "sub");
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.emit(a.data() - b.data(), [ia, ib](Tape& tp, const Mat& up) {
    tp.accumulate(ia, up);
    tp.accumulate(ib, -up);
  });
}

Value mul(Value a, Value b) {
  require_same_tape(a, b, "mul");
  require_same_shape(a, b, "mul");
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.emit(a.data().cwiseProduct(b.data()), [ia, ib](Tape& tp, const Mat& up) {
    tp.accumulate(ia, up.cwiseProduct(tp.value_of(ib)));
    tp.accumulate(ib, up.cwiseProduct(tp.value_of(ia)));
  });
}

Value scale(Value a, double c) {
  Tape& t = *a.tape;
  const int ia = a.id;
  return t.emit(a.data() * c, [ia, c](Tape& tp, const Mat& up) {
    tp.accumulate(ia, up * c);
  });
}

Value add_rowvec(Value a, Value v) {
  require_same_tape(a, v, "add_rowvec");
  if (v.rows() != 1 || v.cols() != a.cols()) {
    throw std::invalid_argument("add_rowvec: vector shape " + shape_str(v.rows(), v.cols()) +
                                " does not broadcast over " + shape_str(a.rows(), a.cols()));
  }
  Tape& t = *a.tape;
  Mat out = a.data();
  out.rowwise() += v.data().row(0);
  const int ia = a.id, iv = v.id;
  return t.emit(std::move(out), [ia, iv](Tape& tp, const Mat& up) {
    tp.accumulate(ia, up);
    tp.accumulate(iv, up.colwise().sum());
  });
}

Value concat_rows(Value a, Value b) {
  require_same_tape(a, b, "concat_rows");
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("concat_rows: column counts differ, " +
                                shape_str(a.rows(), a.cols()) + " vs " +
                                shape_str(b.rows(), b.cols()));
  }
  Tape& t = *a.tape;
  Mat out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a.data();
  out.bottomRows(b.rows()) = b.data();
  const int ia = a.id, ib = b.id;
  const Index ra = a.rows(), rb = b.rows();
  return t.emit(std::move(out), [ia, ib, ra, rb](Tape& tp, const Mat& up) {
    tp.accumulate(ia, up.topRows(ra));
    tp.accumulate(ib, up.bottomRows(rb));
  });
}

Value concat_cols(const std::vector<Value>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  Tape& t = *parts[0].tape;
  Index cols = 0;
  for (const Value& p : parts) {
    require_same_tape(parts[0], p, "concat_cols");
    if (p.rows() != parts[0].rows()) {
      throw std::invalid_argument("concat_cols: row counts differ");
    }
    cols += p.cols();
  }
  Mat out(parts[0].rows(), cols);
  std::vector<int> ids;
  std::vector<Index> widths;
  Index at = 0;
  for (const Value& p : parts) {
    out.middleCols(at, p.cols()) = p.data();
    ids.push_back(p.id);
    widths.push_back(p.cols());
    at += p.cols();
  }
  return t.emit(std::move(out), [ids, widths](Tape& tp, const Mat& up) {
    Index at = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
      tp.accumulate(ids[i], up.middleCols(at, widths[i]));
      at += widths[i];
    }
  });
}

Value slice_rows(Value a, Index start, Index count) {
  if (start < 0 || count < 1 || start + count > a.rows()) {
    throw std::invalid_argument("slice_rows: range [" + std::to_string(start) + ", " +
                                std::to_string(start + count) + ") outside " +
                                shape_str(a.rows(), a.cols()));
  }
  Tape& t = *a.tape;
  const int ia = a.id;
  return t.emit(a.data().middleRows(start, count), [ia, start](Tape& tp, const Mat& up) {
    tp.accumulate_block(ia, start, 0, up);
  });
}

Value slice_cols(Value a, Index start, Index count) {
  if (start < 0 || count < 1 || start + count > a.cols()) {
    throw std::invalid_argument("slice_cols: range [" + std::to_string(start) + ", " +
                                std::to_string(start + count) + ") outside " +
                                shape_str(a.rows(), a.cols()));
  }
  Tape& t = *a.tape;
  const int ia = a.id;
  return t.emit(a.data().middleCols(start, count), [ia, start](Tape& tp, const Mat& up) {
    tp.accumulate_block(ia, 0, start, up);
  });
}

Mat softmax_rows_plain(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    Eigen::ArrayXd e = (x.row(r).array() - m).exp();
    out.row(r) = (e / e.sum()).matrix();
  }
  return out;
}

Mat log_softmax_rows_plain(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    Eigen::ArrayXd shifted = x.row(r).array() - m;
    const double lse = std::log(shifted.exp().sum());
    out.row(r) = (shifted - lse).matrix();
  }
  return out;
}

Value softmax_rows(Value a) {
  if (!a.data().allFinite()) throw std::invalid_argument("softmax: non-finite input");
  Tape& t = *a.tape;
  Mat y = softmax_rows_plain(a.data());
  const int ia = a.id;
  const Mat y_saved = y;
  return t.emit(std::move(y), [ia, y_saved](Tape& tp, const Mat& up) {
    Eigen::VectorXd dot = up.cwiseProduct(y_saved).rowwise().sum();
    Mat adj = (up.array().colwise() - dot.array()).matrix();
    tp.accumulate(ia, y_saved.cwiseProduct(adj));
  });
}

Value log_softmax_rows(Value a) {
  if (!a.data().allFinite()) throw std::invalid_argument("log_softmax: non-finite input");
  Tape& t = *a.tape;
  Mat y = log_softmax_rows_plain(a.data());
  Mat p = y.array().exp().matrix();
  const int ia = a.id;
  return t.emit(std::move(y), [ia, p](Tape& tp, const Mat& up) {
    Eigen::VectorXd rowsum = up.rowwise().sum();
    tp.accumulate(ia, up - (p.array().colwise() * rowsum.array()).matrix());
  });
}

Value layer_norm_rows(Value a, Value gamma, Value beta, double eps) {
  require_same_tape(a, gamma, "layer_norm");
  require_same_tape(a, beta, "layer_norm");
  const Index d = a.cols();
  if (d < 2) throw std::invalid_argument("layer_norm: needs >= 2 features per row, got " + std::to_string(d));
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw std::invalid_argument("layer_norm: gamma/beta must be 1x" + std::to_string(d));
  }
  if (eps < 0) throw std::invalid_argument("layer_norm: eps must be >= 0");
  Tape& t = *a.tape;
  const Mat& x = a.data();
  Mat xhat(x.rows(), d);
  Eigen::VectorXd inv_std(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().sum() / static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std(r) = inv;
    xhat.row(r) = ((x.row(r).array() - mu) * inv).matrix();
  }
  Mat out = (xhat.array().rowwise() * gamma.data().row(0).array()).matrix();
  out.rowwise() += beta.data().row(0);
  const int ia = a.id, ig = gamma.id, ib = beta.id;
  return t.emit(std::move(out), [ia, ig, ib, xhat, inv_std, d](Tape& tp, const Mat& up) {
    const Mat& g = tp.value_of(ig);
    Mat dxhat = (up.array().rowwise() * g.row(0).array()).matrix();
    Mat dx(up.rows(), d);
    const double dn = static_cast<double>(d);
    for (Index r = 0; r < up.rows(); ++r) {
      const double mean_dxhat = dxhat.row(r).mean();
      const double mean_dxhat_xhat = dxhat.row(r).cwiseProduct(xhat.row(r)).sum() / dn;
      dx.row(r) = (inv_std(r) *
                   (dxhat.row(r).array() - mean_dxhat - xhat.row(r).array() * mean_dxhat_xhat))
                      .matrix();
    }
    tp.accumulate(ia, dx);
    tp.accumulate(ig, up.cwiseProduct(xhat).colwise().sum());
    tp.accumulate(ib, up.colwise().sum());
  });
}

Value gelu(Value a) {
  Tape& t = *a.tape;
  Mat out = a.data().unaryExpr(
      [](double v) { return v * 0.5 * (1.0 + std::erf(v * kInvSqrt2)); });
  const int ia = a.id;
  return t.emit(std::move(out), [ia](Tape& tp, const Mat& up) {
    Mat slope = tp.value_of(ia).unaryExpr([](double v) {
      const double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double dens = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      return phi + v * dens;
    });
    tp.accumulate(ia, up.cwiseProduct(slope));
  });
}

Value dropout(Value a, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return a;
  Tape& t = *a.tape;
  const double keep_scale = 1.0 / (1.0 - rate);
  Mat mask(a.rows(), a.cols());
  for (Index r = 0; r < mask.rows(); ++r)
    for (Index c = 0; c < mask.cols(); ++c)
      mask(r, c) = rng.uniform() < rate ? 0.0 : keep_scale;
  const int ia = a.id;
  return t.emit(a.data().cwiseProduct(mask), [ia, mask](Tape& tp, const Mat& up) {
    tp.accumulate(ia, up.cwiseProduct(mask));
  });
}

Value sum_all(Value a) {
  Tape& t = *a.tape;
  Mat out(1, 1);
  out(0, 0) = a.data().sum();
  const int ia = a.id;
  const Index r = a.rows(), c = a.cols();
  return t.emit(std::move(out), [ia, r, c](Tape& tp, const Mat& up) {
    tp.accumulate(ia, Mat::Constant(r, c, up(0, 0)));
  });
}

Value pick(Value a, Index r, Index c) {
  if (r < 0 || r >= a.rows() || c < 0 || c >= a.cols()) {
    throw std::invalid_argument("pick: (" + std::to_string(r) + "," + std::to_string(c) +
                                ") outside " + shape_str(a.rows(), a.cols()));
  }
  Tape& t = *a.tape;
  Mat out(1, 1);
  out(0, 0) = a.data()(r, c);
  const int ia = a.id;
  return t.emit(std::move(out), [ia, r, c](Tape& tp, const Mat& up) {
    Mat d(1, 1);
    d(0, 0) = up(0, 0);
    tp.accumulate_block(ia, r, c, d);
  });
}

Value cross_entropy(Value logits, int label, const std::vector<double>& class_weights) {
  if (logits.rows() != 1) {
    throw std::invalid_argument("cross_entropy: logits must be a 1xC row, got " +
                                shape_str(logits.rows(), logits.cols()));
  }
  const int classes = static_cast<int>(logits.cols());
  if (classes < 2) throw std::invalid_argument("cross_entropy: needs >= 2 classes");
  if (label < 0 || label >= classes) {
    throw std::invalid_argument("cross_entropy: label " + std::to_string(label) +
                                " outside [0, " + std::to_string(classes) + ")");
  }
  if (!class_weights.empty() && class_weights.size() != static_cast<size_t>(classes)) {
    throw std::invalid_argument("cross_entropy: weight count != class count");
  }
  const double w = class_weights.empty() ? 1.0 : class_weights[static_cast<size_t>(label)];
  Value ls = log_softmax_rows(logits);
  return scale(pick(ls, 0, label), -w);
}

}  // namespace setr
