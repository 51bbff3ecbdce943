#pragma once

// Dense arithmetic, a matrix-level reverse-mode tape, AdamW and the seeded RNG
// that the rest of the engine is built on. Everything is double precision.

#include <array>
#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mast {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;
using BoolVector = Eigen::Matrix<bool, Eigen::Dynamic, 1>;
using Index = Eigen::Index;

class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_string(Index rows, Index cols);

template <typename Derived>
std::string shape_string(const Eigen::EigenBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

// ---------------------------------------------------------------------------
// Value-level operations
// ---------------------------------------------------------------------------

template <typename A, typename B>
Matrix matmul(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_string(a) + " x " + shape_string(b));
  }
  return a * b;
}

/// Softmax over the entries selected by `mask`; masked entries come out as exactly 0.
/// Throws std::domain_error when no entry is selected.
Vector softmax_masked(const Eigen::Ref<const Vector>& logits, const Eigen::Ref<const BoolVector>& mask);

/// Layer normalization of a single vector with eps = 1e-5.
Vector layernorm(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& gain,
                 const Eigen::Ref<const Vector>& bias);

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kDefaultLeakySlope = 0.01;

template <typename Derived>
auto leaky_relu(const Eigen::MatrixBase<Derived>& x, double slope) {
  return x.unaryExpr([slope](double v) { return v >= 0.0 ? v : slope * v; });
}

// ---------------------------------------------------------------------------
// Reverse-mode tape
// ---------------------------------------------------------------------------

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy.
class Var {
public:
  Var() = default;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records matrix operations in execution order. backward() replays them in exact
/// reverse order, accumulating adjoints. Nodes that do not depend on a variable
/// carry no backward closure and are skipped.
class Tape {
public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Var constant(Matrix value);
  Var variable(Matrix value);

  /// Records an op output. `parents` decide whether the result needs a gradient;
  /// `fn` is dropped when none of them does.
  Var record(Matrix value, std::initializer_list<Var> parents, Backward fn);
  Var record(Matrix value, std::span<const Var> parents, Backward fn);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& value(Var v) const { return nodes_[v.id()].value; }

  /// Adjoint of `v` after backward(); zero for nodes the output does not use.
  const Matrix& grad(Var v) const;
  const Matrix& grad(std::size_t id) const;
  Matrix& grad_mut(std::size_t id);

  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  /// Seeds d(output)/d(output) = 1 for a 1x1 output and back-propagates.
  void backward(Var output);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// Differentiable ops. Shapes are checked eagerly and reported with ShapeError.
Var matmul(Var a, Var b);
Var matmul_bt(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var add_rowwise(Var a, Var row);  // row (1 x n) broadcast over the rows of a
Var scale(Var a, double s);
Var leaky_relu(Var a, double slope);
Var layernorm_rows(Var x, Var gain, Var bias);  // gain/bias are 1 x d
Var hconcat(std::span<const Var> parts);
Var row(Var a, Index i);
Var sum(Var a);
/// Mean over rows of the squared row-wise error norm, i.e. mean_i ||a_i - target_i||^2.
Var mse_rows(Var a, const Matrix& target);
/// Rescales any row whose Euclidean norm exceeds max_norm onto the sphere of that radius.
Var clip_norm_rows(Var a, double max_norm);

enum class SoftmaxDenominator {
  masked,  // sum over unmasked entries only
  all,     // sum over every entry of the row; masked numerators still zero
};

/// Row-wise masked softmax. Each row of `mask` needs at least one true entry.
Var softmax_masked_rows(Var logits, const BoolMatrix& mask,
                        SoftmaxDenominator denominator = SoftmaxDenominator::masked);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamWState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long step = 0;
};

/// One AdamW step with bias correction. Weight decay is decoupled: p -= lr * wd * p
/// happens before, and independently of, the adaptive update.
void adamw_step(std::span<Matrix> params, std::span<const Matrix> grads, AdamWState& state,
                const AdamWConfig& cfg);

/// Scales grads in place so their global L2 norm is at most max_norm. Returns the norm before scaling.
double clip_global_norm(std::span<Matrix> grads, double max_norm);

/// Exact floating-point accumulator: a fixed-point integer wide enough for every
/// finite double. value() is the correctly rounded sum of everything added,
/// independent of the order of add() calls.
class ExactSum {
public:
  void add(double x);
  /// Adds the exact sum held by another accumulator.
  void add(const ExactSum& other);
  double value() const;

private:
  static constexpr int kChunks = 70;
  void normalize();

  std::array<std::int64_t, kChunks> chunks_{};  // 32-bit digits with deferred carries, unit 2^-1074
  std::int64_t pending_ = 0;                    // adds since the last carry propagation
  double special_ = 0.0;                        // inf/nan inputs
};

// ---------------------------------------------------------------------------
// RNG
// ---------------------------------------------------------------------------

/// Seedable 64-bit generator: std::mt19937_64 underneath. Independent streams are
/// derived from (seed, index) by splitmix64 mixing, so parallel rollouts never share state.
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  static Rng stream(std::uint64_t seed, std::uint64_t index);

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace mast
