#include "aftlab/autodiff.hpp"

#include <cmath>
#include <utility>

namespace aftlab {

namespace {

std::string shape_of(const Matrix& m) {
  return "[" + std::to_string(m.rows()) + " x " + std::to_string(m.cols()) + "]";
}

void check_finite(const char* op, const Matrix& m) {
  if (!m.allFinite())
    throw AutodiffError(std::string("non-finite output in primitive '") + op + "'");
}

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  throw AutodiffError(std::string(op) + ": shape mismatch " + shape_of(a) + " vs " + shape_of(b));
}

}  // namespace

const Matrix& Value::val() const {
  if (!tape_) throw AutodiffError("use of empty Value");
  return tape_->node(idx_).value;
}

double Value::item() const {
  const Matrix& m = val();
  if (m.rows() != 1 || m.cols() != 1)
    throw AutodiffError("item() on non-scalar value " + shape_of(m));
  return m(0, 0);
}

bool Value::requires_grad() const {
  if (!tape_) throw AutodiffError("use of empty Value");
  return tape_->node(idx_).requires_grad;
}

Tape& Value::tape() const {
  if (!tape_) throw AutodiffError("use of empty Value");
  return *tape_;
}

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Value Tape::leaf(Matrix v, bool requires_grad) {
  check_finite("leaf", v);
  Node n;
  n.value = std::move(v);
  n.requires_grad = requires_grad;
  n.is_leaf = true;
  if (requires_grad) {
    leaf_accums_.push_back(Matrix::Zero(n.value.rows(), n.value.cols()));
    n.accum_slot = static_cast<int>(leaf_accums_.size()) - 1;
  }
  return Value(this, push(std::move(n)));
}

Value Tape::constant(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return leaf(std::move(m), false);
}

void Tape::push_grad(int i, const Matrix& g) {
  Node& n = node(i);
  if (!n.requires_grad) return;
  if (!n.grad_ready) {
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    n.grad_ready = true;
  }
  n.grad += g;
}

void Tape::backward(Value root) {
  if (&root.tape() != this) throw AutodiffError("backward: root from a different tape");
  const Node& r = node(root.index());
  if (r.value.rows() != 1 || r.value.cols() != 1)
    throw AutodiffError("backward: root must be scalar, got " + shape_of(r.value));
  if (!r.requires_grad) return;  // constant root: nothing to write

  for (int i = 0; i <= root.index(); ++i) node(i).grad_ready = false;
  push_grad(root.index(), Matrix::Ones(1, 1));

  // Parents always precede children, so one reverse scan is a full topological
  // traversal that touches each node at most once.
  for (int i = root.index(); i >= 0; --i) {
    Node& n = node(i);
    if (!n.grad_ready) continue;
    if (n.accum_slot >= 0) leaf_accums_[static_cast<std::size_t>(n.accum_slot)] += n.grad;
    if (n.backprop) n.backprop(*this, n.value, n.grad);
  }
}

Matrix Tape::grad(Value leaf_value) const {
  if (&leaf_value.tape() != this) throw AutodiffError("grad: value from a different tape");
  const Node& n = node(leaf_value.index());
  if (n.accum_slot < 0) throw AutodiffError("grad: value is not a requires_grad leaf");
  return leaf_accums_[static_cast<std::size_t>(n.accum_slot)];
}

void Tape::zero_grad() {
  for (auto& a : leaf_accums_) a.setZero();
}

void Tape::reset() {
  nodes_.clear();
  leaf_accums_.clear();
}

// TapeOps is the single friend through which the free-function primitives
// append nodes and reach parent state during backprop.
struct TapeOps {
  static Value make(Tape& t, const char* op, Matrix value, bool requires_grad,
                    Tape::Backprop backprop) {
    check_finite(op, value);
    Tape::Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.op = op;
    if (requires_grad) n.backprop = std::move(backprop);
    return Value(&t, t.push(std::move(n)));
  }

  static const Matrix& value_of(Tape& t, int i) { return t.node(i).value; }
  static void add_grad(Tape& t, int i, const Matrix& g) { t.push_grad(i, g); }
};

namespace {

Tape& same_tape(Value a, Value b) {
  if (&a.tape() != &b.tape()) throw AutodiffError("operands belong to different tapes");
  return a.tape();
}

bool same_shape(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols();
}

bool is_1x1(const Matrix& m) { return m.rows() == 1 && m.cols() == 1; }

Matrix scalar1x1(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return m;
}

// sign_b = +1 for add, -1 for sub.
Value add_like(const char* name, Value a, Value b, double sign_b) {
  Tape& t = same_tape(a, b);
  const Matrix& av = a.val();
  const Matrix& bv = b.val();
  const int ai = a.index(), bi = b.index();
  bool rg = a.requires_grad() || b.requires_grad();

  if (same_shape(av, bv)) {
    Matrix out = av + sign_b * bv;
    return TapeOps::make(t, name, std::move(out), rg,
                         [ai, bi, sign_b](Tape& t, const Matrix&, const Matrix& g) {
                           TapeOps::add_grad(t, ai, g);
                           TapeOps::add_grad(t, bi, sign_b == 1.0 ? g : Matrix(-g));
                         });
  }
  if (is_1x1(av)) {  // scalar (+/-) tensor
    Matrix out = (av(0, 0) + sign_b * bv.array()).matrix();
    return TapeOps::make(t, name, std::move(out), rg,
                         [ai, bi, sign_b](Tape& t, const Matrix&, const Matrix& g) {
                           TapeOps::add_grad(t, ai, scalar1x1(g.sum()));
                           TapeOps::add_grad(t, bi, sign_b == 1.0 ? g : Matrix(-g));
                         });
  }
  if (is_1x1(bv)) {  // tensor (+/-) scalar
    Matrix out = (av.array() + sign_b * bv(0, 0)).matrix();
    return TapeOps::make(t, name, std::move(out), rg,
                         [ai, bi, sign_b](Tape& t, const Matrix&, const Matrix& g) {
                           TapeOps::add_grad(t, ai, g);
                           TapeOps::add_grad(t, bi, scalar1x1(sign_b * g.sum()));
                         });
  }
  shape_error(name, av, bv);
}

}  // namespace

Value add(Value a, Value b) { return add_like("add", a, b, 1.0); }
Value sub(Value a, Value b) { return add_like("sub", a, b, -1.0); }

Value mul(Value a, Value b) {
  Tape& t = same_tape(a, b);
  const Matrix& av = a.val();
  const Matrix& bv = b.val();
  const int ai = a.index(), bi = b.index();
  bool rg = a.requires_grad() || b.requires_grad();

  if (same_shape(av, bv)) {
    Matrix out = av.cwiseProduct(bv);
    return TapeOps::make(t, "mul", std::move(out), rg,
                         [ai, bi](Tape& t, const Matrix&, const Matrix& g) {
                           TapeOps::add_grad(t, ai, g.cwiseProduct(TapeOps::value_of(t, bi)));
                           TapeOps::add_grad(t, bi, g.cwiseProduct(TapeOps::value_of(t, ai)));
                         });
  }
  if (is_1x1(av) || is_1x1(bv)) {
    const int si = is_1x1(av) ? ai : bi;  // scalar side
    const int mi = is_1x1(av) ? bi : ai;  // tensor side
    double s = is_1x1(av) ? av(0, 0) : bv(0, 0);
    Matrix out = (is_1x1(av) ? bv : av) * s;
    return TapeOps::make(t, "mul", std::move(out), rg,
                         [si, mi](Tape& t, const Matrix&, const Matrix& g) {
                           const Matrix& mv = TapeOps::value_of(t, mi);
                           const Matrix& sv = TapeOps::value_of(t, si);
                           TapeOps::add_grad(t, si, scalar1x1(g.cwiseProduct(mv).sum()));
                           TapeOps::add_grad(t, mi, g * sv(0, 0));
                         });
  }
  shape_error("mul", av, bv);
}

Value add(Value a, double s) { return add(a, a.tape().constant(s)); }
Value sub(double s, Value a) { return sub(a.tape().constant(s), a); }
Value sub(Value a, double s) { return sub(a, a.tape().constant(s)); }
Value mul(Value a, double s) { return mul(a, a.tape().constant(s)); }
Value neg(Value a) { return mul(a, -1.0); }

Value matmul(Value a, Value b) {
  Tape& t = same_tape(a, b);
  const Matrix& av = a.val();
  const Matrix& bv = b.val();
  if (av.cols() != bv.rows()) shape_error("matmul", av, bv);
  const int ai = a.index(), bi = b.index();
  bool rg = a.requires_grad() || b.requires_grad();
  Matrix out = av * bv;
  return TapeOps::make(t, "matmul", std::move(out), rg,
                       [ai, bi](Tape& t, const Matrix&, const Matrix& g) {
                         TapeOps::add_grad(t, ai, g * TapeOps::value_of(t, bi).transpose());
                         TapeOps::add_grad(t, bi, TapeOps::value_of(t, ai).transpose() * g);
                       });
}

Value transpose(Value a) {
  Tape& t = a.tape();
  const int ai = a.index();
  Matrix out = a.val().transpose();
  return TapeOps::make(t, "transpose", std::move(out), a.requires_grad(),
                       [ai](Tape& t, const Matrix&, const Matrix& g) {
                         TapeOps::add_grad(t, ai, g.transpose());
                       });
}

Value exp(Value a) {
  Tape& t = a.tape();
  const int ai = a.index();
  Matrix out = a.val().array().exp().matrix();
  return TapeOps::make(t, "exp", std::move(out), a.requires_grad(),
                       [ai](Tape& t, const Matrix& v, const Matrix& g) {
                         TapeOps::add_grad(t, ai, g.cwiseProduct(v));
                       });
}

Value log(Value a) {
  Tape& t = a.tape();
  const int ai = a.index();
  Matrix out = a.val().array().log().matrix();
  return TapeOps::make(t, "log", std::move(out), a.requires_grad(),
                       [ai](Tape& t, const Matrix&, const Matrix& g) {
                         TapeOps::add_grad(t, ai, g.cwiseQuotient(TapeOps::value_of(t, ai)));
                       });
}

Value log1p(Value a) {
  Tape& t = a.tape();
  const int ai = a.index();
  Matrix out = a.val().array().log1p().matrix();
  return TapeOps::make(t, "log1p", std::move(out), a.requires_grad(),
                       [ai](Tape& t, const Matrix&, const Matrix& g) {
                         const Matrix& av = TapeOps::value_of(t, ai);
                         TapeOps::add_grad(t, ai, (g.array() / (1.0 + av.array())).matrix());
                       });
}

Value relu(Value a) {
  Tape& t = a.tape();
  const int ai = a.index();
  Matrix out = a.val().cwiseMax(0.0);
  return TapeOps::make(t, "relu", std::move(out), a.requires_grad(),
                       [ai](Tape& t, const Matrix&, const Matrix& g) {
                         const Matrix& av = TapeOps::value_of(t, ai);
                         // subgradient at exactly 0 counts as active
                         Matrix mask = (av.array() >= 0.0).cast<double>().matrix();
                         TapeOps::add_grad(t, ai, g.cwiseProduct(mask));
                       });
}

Value logsumexp(Value v) {
  Tape& t = v.tape();
  const int vi = v.index();
  const Matrix& m = v.val();
  if (m.size() == 0) throw AutodiffError("logsumexp: empty input");
  double mx = m.maxCoeff();
  double s = (m.array() - mx).exp().sum();
  return TapeOps::make(t, "logsumexp", scalar1x1(mx + std::log(s)), v.requires_grad(),
                       [vi](Tape& t, const Matrix& v, const Matrix& g) {
                         const Matrix& mv = TapeOps::value_of(t, vi);
                         TapeOps::add_grad(t, vi, (g(0, 0) * (mv.array() - v(0, 0)).exp()).matrix());
                       });
}

Value logsumexp_rows(Value m) {
  Tape& t = m.tape();
  const int mi = m.index();
  const Matrix& v = m.val();
  if (v.cols() == 0) throw AutodiffError("logsumexp_rows: empty rows");
  Matrix out(v.rows(), 1);
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    double mx = v.row(i).maxCoeff();
    out(i, 0) = mx + std::log((v.row(i).array() - mx).exp().sum());
  }
  return TapeOps::make(t, "logsumexp_rows", std::move(out), m.requires_grad(),
                       [mi](Tape& t, const Matrix& v, const Matrix& g) {
                         const Matrix& mv = TapeOps::value_of(t, mi);
                         Matrix gm(mv.rows(), mv.cols());
                         for (Eigen::Index i = 0; i < mv.rows(); ++i)
                           gm.row(i) = g(i, 0) * (mv.row(i).array() - v(i, 0)).exp();
                         TapeOps::add_grad(t, mi, gm);
                       });
}

Value softmax_rows(Value m) {
  Tape& t = m.tape();
  const int mi = m.index();
  const Matrix& v = m.val();
  if (v.cols() == 0) throw AutodiffError("softmax_rows: empty rows");
  Matrix out(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    Eigen::ArrayXd e = (v.row(i).array() - v.row(i).maxCoeff()).exp();
    out.row(i) = (e / e.sum()).matrix().transpose();
  }
  return TapeOps::make(t, "softmax_rows", std::move(out), m.requires_grad(),
                       [mi](Tape& t, const Matrix& p, const Matrix& g) {
                         Matrix gm(p.rows(), p.cols());
                         for (Eigen::Index i = 0; i < p.rows(); ++i) {
                           double dot = g.row(i).dot(p.row(i));
                           gm.row(i) = p.row(i).cwiseProduct(g.row(i)) - dot * p.row(i);
                         }
                         TapeOps::add_grad(t, mi, gm);
                       });
}

Value sum_all(Value m) {
  Tape& t = m.tape();
  const int mi = m.index();
  return TapeOps::make(t, "sum", scalar1x1(m.val().sum()), m.requires_grad(),
                       [mi](Tape& t, const Matrix&, const Matrix& g) {
                         const Matrix& mv = TapeOps::value_of(t, mi);
                         TapeOps::add_grad(t, mi, Matrix::Constant(mv.rows(), mv.cols(), g(0, 0)));
                       });
}

Value mean_all(Value m) {
  Tape& t = m.tape();
  const int mi = m.index();
  const Matrix& v = m.val();
  if (v.size() == 0) throw AutodiffError("mean: empty input");
  double inv = 1.0 / static_cast<double>(v.size());
  return TapeOps::make(t, "mean", scalar1x1(v.mean()), m.requires_grad(),
                       [mi, inv](Tape& t, const Matrix&, const Matrix& g) {
                         const Matrix& mv = TapeOps::value_of(t, mi);
                         TapeOps::add_grad(t, mi,
                                           Matrix::Constant(mv.rows(), mv.cols(), inv * g(0, 0)));
                       });
}

Value mean_rows(Value m) {
  Tape& t = m.tape();
  const int mi = m.index();
  const Matrix& v = m.val();
  if (v.cols() == 0) throw AutodiffError("mean_rows: empty rows");
  Matrix out = v.rowwise().mean();
  double inv = 1.0 / static_cast<double>(v.cols());
  return TapeOps::make(t, "mean_rows", std::move(out), m.requires_grad(),
                       [mi, inv](Tape& t, const Matrix&, const Matrix& g) {
                         const Matrix& mv = TapeOps::value_of(t, mi);
                         Matrix gm(mv.rows(), mv.cols());
                         for (Eigen::Index i = 0; i < mv.rows(); ++i)
                           gm.row(i).setConstant(inv * g(i, 0));
                         TapeOps::add_grad(t, mi, gm);
                       });
}

Value max_rows(Value m) {
  Tape& t = m.tape();
  const int mi = m.index();
  const Matrix& v = m.val();
  if (v.cols() == 0) throw AutodiffError("max_rows: empty rows");
  Matrix out(v.rows(), 1);
  for (Eigen::Index i = 0; i < v.rows(); ++i) out(i, 0) = v.row(i).maxCoeff();
  return TapeOps::make(t, "max_rows", std::move(out), m.requires_grad(),
                       [mi](Tape& t, const Matrix&, const Matrix& g) {
                         const Matrix& mv = TapeOps::value_of(t, mi);
                         Matrix gm = Matrix::Zero(mv.rows(), mv.cols());
                         for (Eigen::Index i = 0; i < mv.rows(); ++i) {
                           Eigen::Index j;
                           mv.row(i).maxCoeff(&j);  // first argmax gets the grad
                           gm(i, j) = g(i, 0);
                         }
                         TapeOps::add_grad(t, mi, gm);
                       });
}

Value gather_rows(Value m, std::vector<int> idx) {
  Tape& t = m.tape();
  const int mi = m.index();
  const Matrix& v = m.val();
  if (idx.empty()) throw AutodiffError("gather_rows: empty index list");
  for (int k : idx)
    if (k < 0 || k >= v.rows())
      throw AutodiffError("gather_rows: index " + std::to_string(k) + " out of range for " +
                          std::to_string(v.rows()) + " rows");
  Matrix out(static_cast<Eigen::Index>(idx.size()), v.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = v.row(idx[k]);
  return TapeOps::make(t, "gather_rows", std::move(out), m.requires_grad(),
                       [mi, idx = std::move(idx)](Tape& t, const Matrix&, const Matrix& g) {
                         const Matrix& mv = TapeOps::value_of(t, mi);
                         Matrix gm = Matrix::Zero(mv.rows(), mv.cols());
                         for (std::size_t k = 0; k < idx.size(); ++k)
                           gm.row(idx[k]) += g.row(static_cast<Eigen::Index>(k));
                         TapeOps::add_grad(t, mi, gm);
                       });
}

Value take_per_row(Value m, std::vector<int> col_of_row) {
  Tape& t = m.tape();
  const int mi = m.index();
  const Matrix& v = m.val();
  if (static_cast<Eigen::Index>(col_of_row.size()) != v.rows())
    throw AutodiffError("take_per_row: need one column index per row, got " +
                        std::to_string(col_of_row.size()) + " for " + std::to_string(v.rows()) +
                        " rows");
  for (int c : col_of_row)
    if (c < 0 || c >= v.cols())
      throw AutodiffError("take_per_row: column " + std::to_string(c) + " out of range for " +
                          std::to_string(v.cols()) + " columns");
  Matrix out(v.rows(), 1);
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    out(i, 0) = v(i, col_of_row[static_cast<std::size_t>(i)]);
  return TapeOps::make(t, "take_per_row", std::move(out), m.requires_grad(),
                       [mi, cols = std::move(col_of_row)](Tape& t, const Matrix&, const Matrix& g) {
                         const Matrix& mv = TapeOps::value_of(t, mi);
                         Matrix gm = Matrix::Zero(mv.rows(), mv.cols());
                         for (Eigen::Index i = 0; i < mv.rows(); ++i)
                           gm(i, cols[static_cast<std::size_t>(i)]) += g(i, 0);
                         TapeOps::add_grad(t, mi, gm);
                       });
}

Value concat_rows(std::span<const Value> parts) {
  if (parts.empty()) throw AutodiffError("concat_rows: no inputs");
  Tape& t = parts[0].tape();
  Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  bool rg = false;
  for (const Value& p : parts) {
    same_tape(parts[0], p);
    if (p.cols() != cols) shape_error("concat_rows", parts[0].val(), p.val());
    rows += p.rows();
    rg = rg || p.requires_grad();
  }
  Matrix out(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> sizes;
  Eigen::Index at = 0;
  for (const Value& p : parts) {
    out.middleRows(at, p.rows()) = p.val();
    at += p.rows();
    ids.push_back(p.index());
    sizes.push_back(p.rows());
  }
  return TapeOps::make(t, "concat_rows", std::move(out), rg,
                       [ids = std::move(ids), sizes = std::move(sizes)](Tape& t, const Matrix&,
                                                                        const Matrix& g) {
                         Eigen::Index at = 0;
                         for (std::size_t k = 0; k < ids.size(); ++k) {
                           TapeOps::add_grad(t, ids[k], g.middleRows(at, sizes[k]));
                           at += sizes[k];
                         }
                       });
}

Value concat_cols(std::span<const Value> parts) {
  if (parts.empty()) throw AutodiffError("concat_cols: no inputs");
  Tape& t = parts[0].tape();
  Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  bool rg = false;
  for (const Value& p : parts) {
    same_tape(parts[0], p);
    if (p.rows() != rows) shape_error("concat_cols", parts[0].val(), p.val());
    cols += p.cols();
    rg = rg || p.requires_grad();
  }
  Matrix out(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> sizes;
  Eigen::Index at = 0;
  for (const Value& p : parts) {
    out.middleCols(at, p.cols()) = p.val();
    at += p.cols();
    ids.push_back(p.index());
    sizes.push_back(p.cols());
  }
  return TapeOps::make(t, "concat_cols", std::move(out), rg,
                       [ids = std::move(ids), sizes = std::move(sizes)](Tape& t, const Matrix&,
                                                                        const Matrix& g) {
                         Eigen::Index at = 0;
                         for (std::size_t k = 0; k < ids.size(); ++k) {
                           TapeOps::add_grad(t, ids[k], g.middleCols(at, sizes[k]));
                           at += sizes[k];
                         }
                       });
}

Value scale_rows(Value m, Value col) {
  Tape& t = same_tape(m, col);
  const Matrix& mv = m.val();
  const Matrix& cv = col.val();
  if (cv.cols() != 1 || cv.rows() != mv.rows()) shape_error("scale_rows", mv, cv);
  const int mi = m.index(), ci = col.index();
  bool rg = m.requires_grad() || col.requires_grad();
  Matrix out = mv.array().colwise() * cv.col(0).array();
  return TapeOps::make(t, "scale_rows", std::move(out), rg,
                       [mi, ci](Tape& t, const Matrix&, const Matrix& g) {
                         const Matrix& mv = TapeOps::value_of(t, mi);
                         const Matrix& cv = TapeOps::value_of(t, ci);
                         TapeOps::add_grad(t, mi, (g.array().colwise() * cv.col(0).array()).matrix());
                         TapeOps::add_grad(t, ci, g.cwiseProduct(mv).rowwise().sum());
                       });
}

Value scale_cols(Value m, Value row) {
  Tape& t = same_tape(m, row);
  const Matrix& mv = m.val();
  const Matrix& rv = row.val();
  if (rv.rows() != 1 || rv.cols() != mv.cols()) shape_error("scale_cols", mv, rv);
  const int mi = m.index(), ri = row.index();
  bool rg = m.requires_grad() || row.requires_grad();
  Matrix out = mv.array().rowwise() * rv.row(0).array();
  return TapeOps::make(t, "scale_cols", std::move(out), rg,
                       [mi, ri](Tape& t, const Matrix&, const Matrix& g) {
                         const Matrix& mv = TapeOps::value_of(t, mi);
                         const Matrix& rv = TapeOps::value_of(t, ri);
                         TapeOps::add_grad(t, mi, (g.array().rowwise() * rv.row(0).array()).matrix());
                         TapeOps::add_grad(t, ri, g.cwiseProduct(mv).colwise().sum());
                       });
}

Value detach(Value a) {
  Tape& t = a.tape();
  Matrix copy = a.val();
  return TapeOps::make(t, "detach", std::move(copy), /*requires_grad=*/false, nullptr);
}

}  // namespace aftlab
