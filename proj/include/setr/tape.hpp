// Tape-based reverse-mode differentiation over dense matrices.
//
// A Tape owns every intermediate of one forward pass; Values are cheap
// handles into it. Operations evaluate eagerly and record a pull closure
// that scatters the upstream gradient into the operands. backward() walks
// the tape in reverse creation order, which is a topological order because
// the tape is append-only within a pass.
#pragma once

#include "setr/core.hpp"

#include <functional>
#include <vector>

namespace setr {

class Tape;

// Handle into a Tape node. Valid for the lifetime of its tape.
struct Value {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& data() const;
  const Mat& grad() const;
  bool has_grad() const;
  Index rows() const;
  Index cols() const;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // New leaf holding a copy of m. Leaves and interior nodes are treated
  // alike by backward(); the caller decides which leaves feed an optimizer.
  Value leaf(Mat m);

  // Seeds root (a 1x1 value) with gradient 1 and accumulates gradients into
  // every node reachable from it. Gradients add across fan-out.
  void backward(Value root);

  size_t size() const { return nodes_.size(); }

  // --- internals used by the op implementations ---
  struct Node {
    Mat value;
    Mat grad;  // empty until first touched by backward
    std::function<void(Tape&, const Mat&)> pull;
  };

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

  const Mat& value_of(int id) const { return nodes_[static_cast<size_t>(id)].value; }

  Value emit(Mat value, std::function<void(Tape&, const Mat&)> pull);

  template <typename Expr>
  void accumulate(int id, const Expr& delta) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.grad += delta;
  }

  template <typename Expr>
  void accumulate_block(int id, Index row0, Index col0, const Expr& delta) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.grad.block(row0, col0, delta.rows(), delta.cols()) += delta;
  }

 private:
  std::vector<Node> nodes_;
};

inline const Mat& Value::data() const { return tape->node(id).value; }
inline const Mat& Value::grad() const { return tape->node(id).grad; }
inline bool Value::has_grad() const { return tape->node(id).grad.size() != 0; }
inline Index Value::rows() const { return data().rows(); }
inline Index Value::cols() const { return data().cols(); }

// --- primitives ---

Value matmul(Value a, Value b);
Value transpose(Value a);
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);  // elementwise
Value scale(Value a, double c);
Value add_rowvec(Value a, Value v);  // broadcast a 1xN row over every row of a
Value concat_rows(Value a, Value b);
Value concat_cols(const std::vector<Value>& parts);
Value slice_rows(Value a, Index start, Index count);
Value slice_cols(Value a, Index start, Index count);
Value softmax_rows(Value a);
Value log_softmax_rows(Value a);
Value layer_norm_rows(Value a, Value gamma, Value beta, double eps);
Value gelu(Value a);  // exact Gaussian-CDF form x * Phi(x)
Value dropout(Value a, double rate, Rng& rng);  // inverted mask, drawn at creation
Value sum_all(Value a);   // 1x1
Value pick(Value a, Index r, Index c);  // 1x1

// -log softmax(logits)[label]; logits is 1xC. Optional per-class weights
// scale the loss for class imbalance.
Value cross_entropy(Value logits, int label, const std::vector<double>& class_weights = {});

// Plain (non-tape) row softmax / log-softmax sharing the same arithmetic as
// the taped ops, so detached and taped routes agree bitwise.
Mat softmax_rows_plain(const Mat& x);
Mat log_softmax_rows_plain(const Mat& x);

}  // namespace setr
