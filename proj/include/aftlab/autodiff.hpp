// Reverse-mode automatic differentiation over dense double matrices.
//
// A Tape is an append-only record of operations; Value is a cheap handle into
// it. Free functions build the graph; Tape::backward walks it once in reverse
// insertion order, so gradient accumulation order is fixed and runs are
// reproducible. Every primitive checks its output for NaN/Inf and throws
// naming itself rather than letting non-finite values propagate.
//
// Tensors here are rank <= 2: scalars are 1x1, vectors are n x 1. The only
// implicit broadcast is scalar-vs-tensor in the elementwise ops; everything
// else must match shapes exactly and errors name both shapes.
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace aftlab {

using Matrix = Eigen::MatrixXd;

struct AutodiffError : std::runtime_error {
  explicit AutodiffError(const std::string& what) : std::runtime_error(what) {}
};

class Tape;

class Value {
 public:
  Value() = default;
  const Matrix& val() const;
  Eigen::Index rows() const { return val().rows(); }
  Eigen::Index cols() const { return val().cols(); }
  bool is_scalar() const { return rows() == 1 && cols() == 1; }
  double item() const;
  bool requires_grad() const;
  Tape& tape() const;
  int index() const { return idx_; }
  explicit operator bool() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  friend struct TapeOps;
  Value(Tape* t, int i) : tape_(t), idx_(i) {}
  Tape* tape_ = nullptr;
  int idx_ = -1;
};

class Tape {
 public:
  // Receives the node's own value and incoming gradient; pushes into parents.
  using Backprop = std::function<void(Tape&, const Matrix& value, const Matrix& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Graph inputs. Leaves with requires_grad get a persistent gradient
  // accumulator that survives across backward calls until zero_grad().
  Value leaf(Matrix v, bool requires_grad);
  Value constant(Matrix v) { return leaf(std::move(v), false); }
  Value constant(double v);

  // Seeds d(root)=1 and propagates to all requires_grad leaves. root must be
  // scalar. Repeated calls without zero_grad() accumulate into leaf grads.
  void backward(Value root);

  // Accumulated gradient of a requires_grad leaf (zeros if backward never
  // reached it).
  Matrix grad(Value leaf_value) const;

  void zero_grad();
  // Drops all nodes (and leaf accumulators); capacity is kept for reuse.
  void reset();

  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Value;
  friend struct TapeOps;

  struct Node {
    Matrix value;
    Matrix grad;            // scratch, valid only during a backward pass
    bool grad_ready = false;
    bool requires_grad = false;
    bool is_leaf = false;
    int accum_slot = -1;    // index into leaf_accums_ when a grad-tracked leaf
    const char* op = "leaf";
    Backprop backprop;
  };

  int push(Node n);
  Node& node(int i) { return nodes_[static_cast<std::size_t>(i)]; }
  const Node& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
  // Accumulate g into node i's scratch grad (alloc+zero on first touch).
  void push_grad(int i, const Matrix& g);

  std::vector<Node> nodes_;
  std::vector<Matrix> leaf_accums_;
};

// --- primitives -------------------------------------------------------------

Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);  // elementwise
Value add(Value a, double s);
Value sub(double s, Value a);
Value sub(Value a, double s);
Value mul(Value a, double s);
Value neg(Value a);

Value matmul(Value a, Value b);
Value transpose(Value a);

Value exp(Value a);
Value log(Value a);
Value log1p(Value a);
Value relu(Value a);  // subgradient at 0 is 1 (the active side)

// Stable reductions: inputs are shifted by their max before exponentiation.
Value logsumexp(Value v);        // over all entries -> scalar
Value logsumexp_rows(Value m);   // per row -> rows x 1
Value softmax_rows(Value m);

Value sum_all(Value m);
Value mean_all(Value m);
Value mean_rows(Value m);  // per-row mean over columns -> rows x 1
Value max_rows(Value m);   // per-row max -> rows x 1; grad goes to first argmax

Value gather_rows(Value m, std::vector<int> idx);
Value take_per_row(Value m, std::vector<int> col_of_row);  // rows x 1

Value concat_rows(std::span<const Value> parts);
Value concat_cols(std::span<const Value> parts);

Value scale_rows(Value m, Value col);  // out(i,j) = m(i,j) * col(i)
Value scale_cols(Value m, Value row);  // out(i,j) = m(i,j) * row(j)

// Same values, no recorded parents: gradients never flow past a detach.
Value detach(Value a);

}  // namespace aftlab
