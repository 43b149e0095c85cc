#pragma once

// Reverse-mode automatic differentiation over small row-major matrices.
//
// A Tape records every operation as a node holding its cached value. Nodes
// are appended in evaluation order, so a node's inputs always carry smaller
// ids and the backward sweep is a single pass in decreasing id order.
// Values are 64-bit and two-dimensional (rows x cols); a batch of scalars is
// a column, a batch of feature vectors is one row per sample.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dcg {

struct Shape {
  int rows = 0;
  int cols = 0;
  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

// Thrown when an operation is fed values outside its domain (log of a
// non-positive number, etc.) or produces a non-finite value.
class DomainError : public std::runtime_error {
 public:
  DomainError(const std::string& op, const std::string& what)
      : std::runtime_error("domain violation in '" + op + "': " + what), op_(op) {}
  [[nodiscard]] const std::string& op() const { return op_; }

 private:
  std::string op_;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string to_string(Shape s) {
  return std::to_string(s.rows) + "x" + std::to_string(s.cols);
}

// ---------------------------------------------------------------------------
// Parameters and Adam
// ---------------------------------------------------------------------------

struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> m;  // Adam first moment
  std::vector<double> v;  // Adam second moment
  std::int64_t step = 0;
};

// Named trainable parameters with their optimizer state. Insertion order is
// preserved so iteration (and therefore serialization) is deterministic.
class ParamStore {
 public:
  Parameter& add(const std::string& name, Shape shape, std::vector<double> init) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    if (init.size() != shape.size())
      throw ShapeError("parameter '" + name + "' init has " + std::to_string(init.size()) +
                       " values, shape " + to_string(shape));
    Parameter p;
    p.name = name;
    p.shape = shape;
    p.value = std::move(init);
    p.m.assign(p.value.size(), 0.0);
    p.v.assign(p.value.size(), 0.0);
    index_.emplace(name, params_.size());
    params_.push_back(std::move(p));
    return params_.back();
  }

  Parameter& add_zeros(const std::string& name, Shape shape) {
    return add(name, shape, std::vector<double>(shape.size(), 0.0));
  }

  [[nodiscard]] bool contains(const std::string& name) const { return index_.contains(name); }

  Parameter& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return params_[it->second];
  }
  [[nodiscard]] const Parameter& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return params_[it->second];
  }

  [[nodiscard]] std::size_t size() const { return params_.size(); }
  [[nodiscard]] std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  [[nodiscard]] auto begin() const { return params_.begin(); }
  [[nodiscard]] auto end() const { return params_.end(); }

  void reset_optimizer() {
    for (auto& p : params_) {
      std::fill(p.m.begin(), p.m.end(), 0.0);
      std::fill(p.v.begin(), p.v.end(), 0.0);
      p.step = 0;
    }
  }

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

using Gradients = std::unordered_map<std::string, std::vector<double>>;

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline void adam_step(ParamStore& store, const Gradients& grads, const AdamConfig& cfg = {}) {
  for (auto& p : store) {
    auto it = grads.find(p.name);
    if (it == grads.end()) continue;
    const auto& g = it->second;
    if (g.size() != p.value.size())
      throw ShapeError("gradient for '" + p.name + "' has " + std::to_string(g.size()) +
                       " entries, expected " + std::to_string(p.value.size()));
    ++p.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
    for (std::size_t i = 0; i < g.size(); ++i) {
      p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g[i];
      p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = p.m[i] / c1;
      const double vhat = p.v[i] / c2;
      p.value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// Rescales all gradients so their joint L2 norm is at most max_norm. Returns
// the norm before clipping.
inline double clip_grad_norm(Gradients& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, g] : grads)
    for (double x : g) sq += x * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [_, g] : grads)
      for (double& x : g) x *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

enum class Op : std::uint8_t {
  Leaf,
  Param,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Scale,
  AddConst,
  Exp,
  Log,
  Tanh,
  Sigmoid,
  LogSigmoid,
  Softplus,
  Relu,
  Square,
  Clamp,
  Linear,
  SumAll,
  SumCols,
  SumRows,
  LogSumExpCols,
  LogSoftmaxCols,
  SliceCols,
  ConcatCols,
  Reshape,
  RepeatRows,
  BroadcastRows,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Param: return "param";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::AddConst: return "add_const";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::LogSigmoid: return "log_sigmoid";
    case Op::Softplus: return "softplus";
    case Op::Relu: return "relu";
    case Op::Square: return "square";
    case Op::Clamp: return "clamp";
    case Op::Linear: return "linear";
    case Op::SumAll: return "sum";
    case Op::SumCols: return "sum_cols";
    case Op::SumRows: return "sum_rows";
    case Op::LogSumExpCols: return "logsumexp";
    case Op::LogSoftmaxCols: return "log_softmax";
    case Op::SliceCols: return "slice_cols";
    case Op::ConcatCols: return "concat_cols";
    case Op::Reshape: return "reshape";
    case Op::RepeatRows: return "repeat_rows";
    case Op::BroadcastRows: return "broadcast_rows";
  }
  return "?";
}

// Handle to a value on a tape.
struct Var {
  int id = -1;
  [[nodiscard]] bool valid() const { return id >= 0; }
};

namespace detail {

// softplus(x) = log(1 + e^x), linear above 30.
inline double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(sigmoid(x)) without cancellation for large |x|.
inline double log_sigmoid(double x) { return -softplus(-x); }

}  // namespace detail

class Tape {
 public:
  struct Node {
    Op op = Op::Leaf;
    int a = -1;
    int b = -1;
    int c = -1;
    Shape shape;
    std::vector<double> value;
    double k0 = 0.0;  // op-specific constants
    double k1 = 0.0;
    int i0 = 0;
    int i1 = 0;
    std::vector<int> extra;  // ConcatCols inputs
    std::string param;       // Param nodes only
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  [[nodiscard]] const Node& node(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)); }
  [[nodiscard]] Shape shape(Var v) const { return node(v).shape; }
  [[nodiscard]] const std::vector<double>& value(Var v) const { return node(v).value; }
  [[nodiscard]] double scalar(Var v) const {
    const auto& n = node(v);
    if (n.shape.size() != 1) throw ShapeError("scalar() on " + to_string(n.shape) + " value");
    return n.value[0];
  }
  [[nodiscard]] double at(Var v, int r, int c) const {
    const auto& n = node(v);
    return n.value[static_cast<std::size_t>(r) * n.shape.cols + c];
  }

  // Constant input.
  Var constant(Shape s, std::vector<double> values) {
    if (values.size() != s.size()) throw ShapeError("constant: value count does not match shape");
    Node n;
    n.op = Op::Leaf;
    n.shape = s;
    n.value = std::move(values);
    return push(std::move(n));
  }
  Var constant(double x) { return constant({1, 1}, {x}); }
  Var column(std::span<const double> xs) {
    return constant({static_cast<int>(xs.size()), 1}, {xs.begin(), xs.end()});
  }

  // Trainable leaf bound to a ParamStore entry. Requesting the same name twice
  // returns the same node.
  Var param(const ParamStore& store, const std::string& name) {
    if (auto it = param_ids_.find(name); it != param_ids_.end()) return Var{it->second};
    const Parameter& p = store.at(name);
    Node n;
    n.op = Op::Param;
    n.shape = p.shape;
    n.value = p.value;
    n.param = name;
    Var v = push(std::move(n));
    param_ids_.emplace(name, v.id);
    return v;
  }

  // Elementwise binary ops broadcast a dimension of size 1 against the other
  // operand.
  Var add(Var a, Var b) { return binary(Op::Add, a, b); }
  Var sub(Var a, Var b) { return binary(Op::Sub, a, b); }
  Var mul(Var a, Var b) { return binary(Op::Mul, a, b); }
  Var div(Var a, Var b) { return binary(Op::Div, a, b); }

  Var neg(Var a) { return unary(Op::Neg, a); }
  Var exp(Var a) { return unary(Op::Exp, a); }
  Var log(Var a) { return unary(Op::Log, a); }
  Var tanh(Var a) { return unary(Op::Tanh, a); }
  Var sigmoid(Var a) { return unary(Op::Sigmoid, a); }
  Var log_sigmoid(Var a) { return unary(Op::LogSigmoid, a); }
  Var softplus(Var a) { return unary(Op::Softplus, a); }
  Var relu(Var a) { return unary(Op::Relu, a); }
  Var square(Var a) { return unary(Op::Square, a); }

  Var scale(Var a, double k) { return unary(Op::Scale, a, k); }
  Var add_const(Var a, double k) { return unary(Op::AddConst, a, k); }
  // Clamp to [lo, hi]; zero gradient where clamped.
  Var clamp(Var a, double lo, double hi) { return unary(Op::Clamp, a, lo, hi); }

  // x: B x in, w: out x in, b: 1 x out  ->  B x out
  Var linear(Var x, Var w, Var b) {
    const Shape sx = shape(x), sw = shape(w), sb = shape(b);
    if (sw.cols != sx.cols || sb.rows != 1 || sb.cols != sw.rows)
      throw ShapeError("linear: input " + to_string(sx) + ", weight " + to_string(sw) +
                       ", bias " + to_string(sb));
    Node n;
    n.op = Op::Linear;
    n.a = x.id;
    n.b = w.id;
    n.c = b.id;
    n.shape = {sx.rows, sw.rows};
    n.value.resize(n.shape.size());
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMat> X(value(x).data(), sx.rows, sx.cols);
    Eigen::Map<const RowMat> W(value(w).data(), sw.rows, sw.cols);
    Eigen::Map<const Eigen::RowVectorXd> bias(value(b).data(), sb.cols);
    Eigen::Map<RowMat> Y(n.value.data(), n.shape.rows, n.shape.cols);
    if (sx.cols > 0)
      Y.noalias() = X * W.transpose();
    else
      Y.setZero();
    Y.rowwise() += bias;
    return push(std::move(n));
  }

  Var sum(Var a) { return reduce(Op::SumAll, a, {1, 1}); }
  Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(shape(a).size())); }
  // Per-row reductions -> B x 1.
  Var sum_cols(Var a) { return reduce(Op::SumCols, a, {shape(a).rows, 1}); }
  Var logsumexp_cols(Var a) { return reduce(Op::LogSumExpCols, a, {shape(a).rows, 1}); }
  // Column sums -> 1 x C.
  Var sum_rows(Var a) { return reduce(Op::SumRows, a, {1, shape(a).cols}); }
  Var log_softmax_cols(Var a) { return reduce(Op::LogSoftmaxCols, a, shape(a)); }

  Var slice_cols(Var a, int begin, int count) {
    const Shape s = shape(a);
    if (begin < 0 || count < 0 || begin + count > s.cols)
      throw ShapeError("slice_cols [" + std::to_string(begin) + ", +" + std::to_string(count) +
                       ") out of range for " + to_string(s));
    Node n;
    n.op = Op::SliceCols;
    n.a = a.id;
    n.i0 = begin;
    n.shape = {s.rows, count};
    n.value.resize(n.shape.size());
    const auto& src = value(a);
    for (int r = 0; r < s.rows; ++r)
      for (int c = 0; c < count; ++c)
        n.value[static_cast<std::size_t>(r) * count + c] =
            src[static_cast<std::size_t>(r) * s.cols + begin + c];
    return push(std::move(n));
  }

  Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_cols of nothing");
    const int rows = shape(parts[0]).rows;
    int cols = 0;
    for (Var p : parts) {
      if (shape(p).rows != rows) throw ShapeError("concat_cols: row count mismatch");
      cols += shape(p).cols;
    }
    Node n;
    n.op = Op::ConcatCols;
    n.shape = {rows, cols};
    n.value.resize(n.shape.size());
    int offset = 0;
    for (Var p : parts) {
      const Shape s = shape(p);
      const auto& src = value(p);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < s.cols; ++c)
          n.value[static_cast<std::size_t>(r) * cols + offset + c] =
              src[static_cast<std::size_t>(r) * s.cols + c];
      offset += s.cols;
      n.extra.push_back(p.id);
    }
    return push(std::move(n));
  }
  Var concat_cols(std::initializer_list<Var> parts) {
    return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
  }

  Var reshape(Var a, Shape s) {
    if (s.size() != shape(a).size())
      throw ShapeError("reshape " + to_string(shape(a)) + " -> " + to_string(s));
    Node n;
    n.op = Op::Reshape;
    n.a = a.id;
    n.shape = s;
    n.value = value(a);
    return push(std::move(n));
  }

  // Each row repeated `times` consecutively: row r -> rows r*times .. r*times+times-1.
  Var repeat_rows(Var a, int times) {
    const Shape s = shape(a);
    Node n;
    n.op = Op::RepeatRows;
    n.a = a.id;
    n.i0 = times;
    n.shape = {s.rows * times, s.cols};
    n.value.resize(n.shape.size());
    const auto& src = value(a);
    for (int r = 0; r < s.rows; ++r)
      for (int t = 0; t < times; ++t)
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(r) * s.cols, s.cols,
                    n.value.begin() + (static_cast<std::ptrdiff_t>(r) * times + t) * s.cols);
    return push(std::move(n));
  }

  // 1 x C -> rows x C
  Var broadcast_rows(Var a, int rows) {
    const Shape s = shape(a);
    if (s.rows != 1) throw ShapeError("broadcast_rows needs a single row, got " + to_string(s));
    Node n;
    n.op = Op::BroadcastRows;
    n.a = a.id;
    n.shape = {rows, s.cols};
    n.value.resize(n.shape.size());
    for (int r = 0; r < rows; ++r)
      std::copy(value(a).begin(), value(a).end(),
                n.value.begin() + static_cast<std::ptrdiff_t>(r) * s.cols);
    return push(std::move(n));
  }

  // Reverse sweep from a scalar root. Returns the gradient of every parameter
  // in `store`; parameters not reached by the root get zeros.
  Gradients backward(Var root, const ParamStore& store) {
    std::vector<std::vector<double>> adj = backward_all(root);
    Gradients out;
    for (const auto& p : store) {
      auto it = param_ids_.find(p.name);
      if (it != param_ids_.end() && !adj[static_cast<std::size_t>(it->second)].empty())
        out.emplace(p.name, std::move(adj[static_cast<std::size_t>(it->second)]));
      else
        out.emplace(p.name, std::vector<double>(p.value.size(), 0.0));
    }
    return out;
  }

  // Adjoint of every node (empty vector for nodes the root does not depend on).
  std::vector<std::vector<double>> backward_all(Var root) {
    if (shape(root).size() != 1)
      throw ShapeError("backward: root must be scalar, got " + to_string(shape(root)));
    std::vector<std::vector<double>> adj(nodes_.size());
    adj[static_cast<std::size_t>(root.id)] = {1.0};
    for (int i = root.id; i >= 0; --i) {
      auto& g = adj[static_cast<std::size_t>(i)];
      if (g.empty()) continue;
      propagate(i, g, adj);
    }
    return adj;
  }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<std::string, int> param_ids_;

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  static int bdim(int x, int y, const char* op, Shape a, Shape b) {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " +
                     to_string(b));
  }

  Var binary(Op op, Var a, Var b) {
    const Shape sa = shape(a), sb = shape(b);
    const Shape so{bdim(sa.rows, sb.rows, op_name(op), sa, sb),
                   bdim(sa.cols, sb.cols, op_name(op), sa, sb)};
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.id;
    n.shape = so;
    n.value.resize(so.size());
    const auto& va = value(a);
    const auto& vb = value(b);
    for (int r = 0; r < so.rows; ++r) {
      const std::size_t ra = static_cast<std::size_t>(sa.rows == 1 ? 0 : r) * sa.cols;
      const std::size_t rb = static_cast<std::size_t>(sb.rows == 1 ? 0 : r) * sb.cols;
      for (int c = 0; c < so.cols; ++c) {
        const double x = va[ra + (sa.cols == 1 ? 0 : c)];
        const double y = vb[rb + (sb.cols == 1 ? 0 : c)];
        double z = 0.0;
        switch (op) {
          case Op::Add: z = x + y; break;
          case Op::Sub: z = x - y; break;
          case Op::Mul: z = x * y; break;
          case Op::Div:
            if (y == 0.0) throw DomainError("div", "division by zero");
            z = x / y;
            break;
          default: break;
        }
        n.value[static_cast<std::size_t>(r) * so.cols + c] = z;
      }
    }
    return push(std::move(n));
  }

  Var unary(Op op, Var a, double k0 = 0.0, double k1 = 0.0) {
    Node n;
    n.op = op;
    n.a = a.id;
    n.k0 = k0;
    n.k1 = k1;
    n.shape = shape(a);
    const auto& src = value(a);
    n.value.resize(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) {
      const double x = src[i];
      double y = 0.0;
      switch (op) {
        case Op::Neg: y = -x; break;
        case Op::Scale: y = k0 * x; break;
        case Op::AddConst: y = x + k0; break;
        case Op::Exp: y = std::exp(x); break;
        case Op::Log:
          if (!(x > 0.0)) throw DomainError("log", "input " + std::to_string(x) + " <= 0");
          y = std::log(x);
          break;
        case Op::Tanh: y = std::tanh(x); break;
        case Op::Sigmoid: y = detail::sigmoid(x); break;
        case Op::LogSigmoid: y = detail::log_sigmoid(x); break;
        case Op::Softplus: y = detail::softplus(x); break;
        case Op::Relu: y = x > 0.0 ? x : 0.0; break;
        case Op::Square: y = x * x; break;
        case Op::Clamp: y = std::clamp(x, k0, k1); break;
        default: break;
      }
      if (std::isnan(y)) throw DomainError(op_name(op), "produced NaN");
      n.value[i] = y;
    }
    return push(std::move(n));
  }

  Var reduce(Op op, Var a, Shape out) {
    const Shape s = shape(a);
    const auto& src = value(a);
    Node n;
    n.op = op;
    n.a = a.id;
    n.shape = out;
    n.value.assign(out.size(), 0.0);
    switch (op) {
      case Op::SumAll:
        for (double x : src) n.value[0] += x;
        break;
      case Op::SumCols:
        for (int r = 0; r < s.rows; ++r)
          for (int c = 0; c < s.cols; ++c)
            n.value[static_cast<std::size_t>(r)] += src[static_cast<std::size_t>(r) * s.cols + c];
        break;
      case Op::SumRows:
        for (int r = 0; r < s.rows; ++r)
          for (int c = 0; c < s.cols; ++c)
            n.value[static_cast<std::size_t>(c)] += src[static_cast<std::size_t>(r) * s.cols + c];
        break;
      case Op::LogSumExpCols:
        if (s.cols == 0) throw ShapeError("logsumexp over zero columns");
        for (int r = 0; r < s.rows; ++r) {
          const double* row = src.data() + static_cast<std::size_t>(r) * s.cols;
          const double mx = *std::max_element(row, row + s.cols);
          if (!std::isfinite(mx)) {
            n.value[static_cast<std::size_t>(r)] = mx;
            continue;
          }
          double acc = 0.0;
          for (int c = 0; c < s.cols; ++c) acc += std::exp(row[c] - mx);
          n.value[static_cast<std::size_t>(r)] = mx + std::log(acc);
        }
        break;
      case Op::LogSoftmaxCols:
        for (int r = 0; r < s.rows; ++r) {
          const double* row = src.data() + static_cast<std::size_t>(r) * s.cols;
          const double mx = *std::max_element(row, row + s.cols);
          double acc = 0.0;
          for (int c = 0; c < s.cols; ++c) acc += std::exp(row[c] - mx);
          const double lse = mx + std::log(acc);
          for (int c = 0; c < s.cols; ++c)
            n.value[static_cast<std::size_t>(r) * s.cols + c] = row[c] - lse;
        }
        break;
      default: break;
    }
    return push(std::move(n));
  }

  static void accumulate(std::vector<double>& dst, std::size_t n) {
    if (dst.empty()) dst.assign(n, 0.0);
  }

  // Adds `g` (shaped like the output) into the adjoint of an operand of shape
  // `s`, summing over broadcast dimensions.
  static void add_broadcast(std::vector<double>& dst, Shape s, const std::vector<double>& g,
                            Shape so, const std::vector<double>* factor = nullptr,
                            double sign = 1.0) {
    accumulate(dst, s.size());
    for (int r = 0; r < so.rows; ++r) {
      const std::size_t rr = static_cast<std::size_t>(s.rows == 1 ? 0 : r) * s.cols;
      for (int c = 0; c < so.cols; ++c) {
        const std::size_t o = static_cast<std::size_t>(r) * so.cols + c;
        const double f = factor ? (*factor)[o] : 1.0;
        dst[rr + (s.cols == 1 ? 0 : c)] += sign * g[o] * f;
      }
    }
  }

  void propagate(int i, const std::vector<double>& g, std::vector<std::vector<double>>& adj) {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    switch (n.op) {
      case Op::Leaf:
      case Op::Param:
        return;
      case Op::Add:
      case Op::Sub:
      case Op::Mul:
      case Op::Div: {
        const Node& na = nodes_[static_cast<std::size_t>(n.a)];
        const Node& nb = nodes_[static_cast<std::size_t>(n.b)];
        const Shape sa = na.shape, sb = nb.shape, so = n.shape;
        auto& ga = adj[static_cast<std::size_t>(n.a)];
        auto& gb = adj[static_cast<std::size_t>(n.b)];
        accumulate(ga, sa.size());
        accumulate(gb, sb.size());
        for (int r = 0; r < so.rows; ++r) {
          const std::size_t ra = static_cast<std::size_t>(sa.rows == 1 ? 0 : r) * sa.cols;
          const std::size_t rb = static_cast<std::size_t>(sb.rows == 1 ? 0 : r) * sb.cols;
          for (int c = 0; c < so.cols; ++c) {
            const std::size_t ia = ra + (sa.cols == 1 ? 0 : c);
            const std::size_t ib = rb + (sb.cols == 1 ? 0 : c);
            const double go = g[static_cast<std::size_t>(r) * so.cols + c];
            switch (n.op) {
              case Op::Add:
                ga[ia] += go;
                gb[ib] += go;
                break;
              case Op::Sub:
                ga[ia] += go;
                gb[ib] -= go;
                break;
              case Op::Mul:
                ga[ia] += go * nb.value[ib];
                gb[ib] += go * na.value[ia];
                break;
              case Op::Div: {
                const double y = nb.value[ib];
                ga[ia] += go / y;
                gb[ib] -= go * na.value[ia] / (y * y);
                break;
              }
              default: break;
            }
          }
        }
        return;
      }
      case Op::Neg:
      case Op::Scale:
      case Op::AddConst:
      case Op::Exp:
      case Op::Log:
      case Op::Tanh:
      case Op::Sigmoid:
      case Op::LogSigmoid:
      case Op::Softplus:
      case Op::Relu:
      case Op::Square:
      case Op::Clamp: {
        const Node& na = nodes_[static_cast<std::size_t>(n.a)];
        auto& ga = adj[static_cast<std::size_t>(n.a)];
        accumulate(ga, na.value.size());
        for (std::size_t j = 0; j < g.size(); ++j) {
          const double x = na.value[j];
          const double y = n.value[j];
          double d = 0.0;
          switch (n.op) {
            case Op::Neg: d = -1.0; break;
            case Op::Scale: d = n.k0; break;
            case Op::AddConst: d = 1.0; break;
            case Op::Exp: d = y; break;
            case Op::Log: d = 1.0 / x; break;
            case Op::Tanh: d = 1.0 - y * y; break;
            case Op::Sigmoid: d = y * (1.0 - y); break;
            case Op::LogSigmoid: d = detail::sigmoid(-x); break;
            case Op::Softplus: d = x > 30.0 ? 1.0 : detail::sigmoid(x); break;
            case Op::Relu: d = x > 0.0 ? 1.0 : 0.0; break;
            case Op::Square: d = 2.0 * x; break;
            case Op::Clamp: d = (x >= n.k0 && x <= n.k1) ? 1.0 : 0.0; break;
            default: break;
          }
          ga[j] += g[j] * d;
        }
        return;
      }
      case Op::Linear: {
        using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        const Node& nx = nodes_[static_cast<std::size_t>(n.a)];
        const Node& nw = nodes_[static_cast<std::size_t>(n.b)];
        const Node& nbias = nodes_[static_cast<std::size_t>(n.c)];
        auto& gx = adj[static_cast<std::size_t>(n.a)];
        auto& gw = adj[static_cast<std::size_t>(n.b)];
        auto& gbias = adj[static_cast<std::size_t>(n.c)];
        accumulate(gx, nx.value.size());
        accumulate(gw, nw.value.size());
        accumulate(gbias, nbias.value.size());
        Eigen::Map<const RowMat> G(g.data(), n.shape.rows, n.shape.cols);
        Eigen::Map<const RowMat> X(nx.value.data(), nx.shape.rows, nx.shape.cols);
        Eigen::Map<const RowMat> W(nw.value.data(), nw.shape.rows, nw.shape.cols);
        Eigen::Map<RowMat> GX(gx.data(), nx.shape.rows, nx.shape.cols);
        Eigen::Map<RowMat> GW(gw.data(), nw.shape.rows, nw.shape.cols);
        Eigen::Map<Eigen::RowVectorXd> GB(gbias.data(), nbias.shape.cols);
        if (nx.shape.cols > 0) {
          GX.noalias() += G * W;
          GW.noalias() += G.transpose() * X;
        }
        GB += G.colwise().sum();
        return;
      }
      case Op::SumAll: {
        auto& ga = adj[static_cast<std::size_t>(n.a)];
        const std::size_t m = nodes_[static_cast<std::size_t>(n.a)].value.size();
        accumulate(ga, m);
        for (std::size_t j = 0; j < m; ++j) ga[j] += g[0];
        return;
      }
      case Op::SumCols: {
        const Shape s = nodes_[static_cast<std::size_t>(n.a)].shape;
        auto& ga = adj[static_cast<std::size_t>(n.a)];
        accumulate(ga, s.size());
        for (int r = 0; r < s.rows; ++r)
          for (int c = 0; c < s.cols; ++c)
            ga[static_cast<std::size_t>(r) * s.cols + c] += g[static_cast<std::size_t>(r)];
        return;
      }
      case Op::SumRows: {
        const Shape s = nodes_[static_cast<std::size_t>(n.a)].shape;
        auto& ga = adj[static_cast<std::size_t>(n.a)];
        accumulate(ga, s.size());
        for (int r = 0; r < s.rows; ++r)
          for (int c = 0; c < s.cols; ++c)
            ga[static_cast<std::size_t>(r) * s.cols + c] += g[static_cast<std::size_t>(c)];
        return;
      }
      case Op::LogSumExpCols: {
        const Node& na = nodes_[static_cast<std::size_t>(n.a)];
        const Shape s = na.shape;
        auto& ga = adj[static_cast<std::size_t>(n.a)];
        accumulate(ga, s.size());
        for (int r = 0; r < s.rows; ++r) {
          const double lse = n.value[static_cast<std::size_t>(r)];
          if (!std::isfinite(lse)) continue;
          for (int c = 0; c < s.cols; ++c) {
            const std::size_t j = static_cast<std::size_t>(r) * s.cols + c;
            ga[j] += g[static_cast<std::size_t>(r)] * std::exp(na.value[j] - lse);
          }
        }
        return;
      }
      case Op::LogSoftmaxCols: {
        const Shape s = n.shape;
        auto& ga = adj[static_cast<std::size_t>(n.a)];
        accumulate(ga, s.size());
        for (int r = 0; r < s.rows; ++r) {
          double gs = 0.0;
          for (int c = 0; c < s.cols; ++c) gs += g[static_cast<std::size_t>(r) * s.cols + c];
          for (int c = 0; c < s.cols; ++c) {
            const std::size_t j = static_cast<std::size_t>(r) * s.cols + c;
            ga[j] += g[j] - std::exp(n.value[j]) * gs;
          }
        }
        return;
      }
      case Op::SliceCols: {
        const Shape s = nodes_[static_cast<std::size_t>(n.a)].shape;
        auto& ga = adj[static_cast<std::size_t>(n.a)];
        accumulate(ga, s.size());
        for (int r = 0; r < n.shape.rows; ++r)
          for (int c = 0; c < n.shape.cols; ++c)
            ga[static_cast<std::size_t>(r) * s.cols + n.i0 + c] +=
                g[static_cast<std::size_t>(r) * n.shape.cols + c];
        return;
      }
      case Op::ConcatCols: {
        int offset = 0;
        for (int id : n.extra) {
          const Shape s = nodes_[static_cast<std::size_t>(id)].shape;
          auto& ga = adj[static_cast<std::size_t>(id)];
          accumulate(ga, s.size());
          for (int r = 0; r < s.rows; ++r)
            for (int c = 0; c < s.cols; ++c)
              ga[static_cast<std::size_t>(r) * s.cols + c] +=
                  g[static_cast<std::size_t>(r) * n.shape.cols + offset + c];
          offset += s.cols;
        }
        return;
      }
      case Op::Reshape: {
        auto& ga = adj[static_cast<std::size_t>(n.a)];
        accumulate(ga, g.size());
        for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j];
        return;
      }
      case Op::RepeatRows: {
        const Shape s = nodes_[static_cast<std::size_t>(n.a)].shape;
        auto& ga = adj[static_cast<std::size_t>(n.a)];
        accumulate(ga, s.size());
        for (int r = 0; r < s.rows; ++r)
          for (int t = 0; t < n.i0; ++t)
            for (int c = 0; c < s.cols; ++c)
              ga[static_cast<std::size_t>(r) * s.cols + c] +=
                  g[(static_cast<std::size_t>(r) * n.i0 + t) * s.cols + c];
        return;
      }
      case Op::BroadcastRows: {
        const Shape s = nodes_[static_cast<std::size_t>(n.a)].shape;
        auto& ga = adj[static_cast<std::size_t>(n.a)];
        accumulate(ga, s.size());
        for (int r = 0; r < n.shape.rows; ++r)
          for (int c = 0; c < s.cols; ++c)
            ga[static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(r) * s.cols + c];
        return;
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Multi-layer perceptron
// ---------------------------------------------------------------------------

enum class Activation : std::uint8_t { Tanh, Relu, Sigmoid };

// An empty hidden list is a pure affine map. A zero input dimension yields a
// free learnable output vector (the bias), which is how parentless nodes get
// their parameters.
struct MLPSpec {
  int input_dim = 0;
  std::vector<int> hidden;
  int output_dim = 1;
  Activation activation = Activation::Tanh;

  [[nodiscard]] std::vector<int> layer_dims() const {
    std::vector<int> dims{input_dim};
    if (input_dim > 0) dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(output_dim);
    return dims;
  }
  [[nodiscard]] int layer_count() const { return static_cast<int>(layer_dims().size()) - 1; }
};

inline std::string mlp_weight_name(const std::string& prefix, int layer) {
  return prefix + "/l" + std::to_string(layer) + ".W";
}
inline std::string mlp_bias_name(const std::string& prefix, int layer) {
  return prefix + "/l" + std::to_string(layer) + ".b";
}

// Registers the MLP's parameters. Hidden layers get Glorot-uniform weights;
// the output layer's weights are scaled by `output_scale` and its bias set to
// `output_bias` (zeros when empty).
template <class URBG>
void mlp_init(ParamStore& store, const MLPSpec& spec, const std::string& prefix, URBG& rng,
              double output_scale = 1.0,
              std::span<const double> output_bias = {}) {
  if (spec.input_dim < 0 || spec.output_dim < 1)
    throw std::invalid_argument("MLP '" + prefix + "' has invalid dimensions");
  for (int h : spec.hidden)
    if (h < 1) throw std::invalid_argument("MLP '" + prefix + "' has an empty hidden layer");
  const auto dims = spec.layer_dims();
  const int layers = static_cast<int>(dims.size()) - 1;
  for (int l = 0; l < layers; ++l) {
    const int in = dims[static_cast<std::size_t>(l)];
    const int out = dims[static_cast<std::size_t>(l) + 1];
    const bool last = l + 1 == layers;
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-limit, limit);
    std::vector<double> w(static_cast<std::size_t>(in) * out);
    for (double& x : w) x = u(rng) * (last ? output_scale : 1.0);
    std::vector<double> b(static_cast<std::size_t>(out), 0.0);
    if (last && !output_bias.empty()) {
      if (output_bias.size() != b.size())
        throw ShapeError("MLP '" + prefix + "' output bias has wrong length");
      std::copy(output_bias.begin(), output_bias.end(), b.begin());
    }
    store.add(mlp_weight_name(prefix, l), {out, in}, std::move(w));
    store.add(mlp_bias_name(prefix, l), {1, out}, std::move(b));
  }
}

inline Var mlp_forward(Tape& tape, const ParamStore& store, const MLPSpec& spec,
                       const std::string& prefix, Var input) {
  if (tape.shape(input).cols != spec.input_dim)
    throw ShapeError("MLP '" + prefix + "' expects " + std::to_string(spec.input_dim) +
                     " inputs, got " + to_string(tape.shape(input)));
  const int layers = spec.layer_count();
  Var h = input;
  for (int l = 0; l < layers; ++l) {
    h = tape.linear(h, tape.param(store, mlp_weight_name(prefix, l)),
                    tape.param(store, mlp_bias_name(prefix, l)));
    if (l + 1 < layers) {
      switch (spec.activation) {
        case Activation::Tanh: h = tape.tanh(h); break;
        case Activation::Relu: h = tape.relu(h); break;
        case Activation::Sigmoid: h = tape.sigmoid(h); break;
      }
    }
  }
  return h;
}

}  // namespace dcg
