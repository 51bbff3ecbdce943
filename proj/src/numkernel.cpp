#include "mast/numkernel.hpp"

#include <bit>
#include <cmath>
#include <utility>
#include <limits>

namespace mast {

std::string shape_string(Index rows, Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

Vector softmax_masked(const Eigen::Ref<const Vector>& logits, const Eigen::Ref<const BoolVector>& mask) {
  if (logits.size() != mask.size()) {
    throw ShapeError("softmax_masked: logits " + shape_string(logits) + " vs mask " + shape_string(mask));
  }
  double top = -std::numeric_limits<double>::infinity();
  for (Index i = 0; i < logits.size(); ++i) {
    if (mask(i)) top = std::max(top, logits(i));
  }
  if (!std::isfinite(top)) {
    throw std::domain_error("softmax_masked: every entry is masked");
  }
  Vector out = Vector::Zero(logits.size());
  double total = 0.0;
  for (Index i = 0; i < logits.size(); ++i) {
    if (mask(i)) {
      out(i) = std::exp(logits(i) - top);
      total += out(i);
    }
  }
  return out / total;
}

Vector layernorm(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& gain,
                 const Eigen::Ref<const Vector>& bias) {
  if (x.size() == 0 || gain.size() != x.size() || bias.size() != x.size()) {
    throw ShapeError("layernorm: x " + shape_string(x) + ", gain " + shape_string(gain) + ", bias " +
                     shape_string(bias));
  }
  const double mean = x.mean();
  const Vector centered = x.array() - mean;
  const double var = centered.squaredNorm() / static_cast<double>(x.size());
  return (centered / std::sqrt(var + kLayerNormEps)).cwiseProduct(gain) + bias;
}

// ---------------------------------------------------------------------------

const Matrix& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, Backward fn) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn));
}

Var Tape::record(Matrix value, std::span<const Var> parents, Backward fn) {
  bool needs = false;
  for (const Var& p : parents) {
    needs = needs || nodes_[p.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : Backward{}});
  return Var(this, nodes_.size() - 1);
}

const Matrix& Tape::grad(Var v) const { return grad(v.id()); }

const Matrix& Tape::grad(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.grad.size() == 0 && n.value.size() != 0) {
    // Never touched by backward(): materialize the zero adjoint lazily.
    auto& mutable_node = const_cast<Node&>(n);
    mutable_node.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  }
  return n.grad;
}

Matrix& Tape::grad_mut(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var output) {
  if (output.rows() != 1 || output.cols() != 1) {
    throw ShapeError("backward: output must be 1x1, got " + shape_string(output.value()));
  }
  for (Node& n : nodes_) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  nodes_[output.id()].grad(0, 0) = 1.0;
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    if (nodes_[i].backward) nodes_[i].backward(*this, i);
  }
}

// ---------------------------------------------------------------------------

namespace {

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = a.tape();
  Matrix out = matmul(a.value(), b.value());
  const auto ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    tp.grad_mut(ia).noalias() += g * tp.value(ib).transpose();
    tp.grad_mut(ib).noalias() += tp.value(ia).transpose() * g;
  });
}

Var matmul_bt(Var a, Var b) {
  Tape& t = a.tape();
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_bt: inner dimensions differ, " + shape_string(a.value()) + " x " +
                     shape_string(b.value()) + "^T");
  }
  Matrix out = a.value() * b.value().transpose();
  const auto ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    tp.grad_mut(ia).noalias() += g * tp.value(ib);
    tp.grad_mut(ib).noalias() += g.transpose() * tp.value(ia);
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(a.value() + b.value(), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    tp.grad_mut(ia) += g;
    tp.grad_mut(ib) += g;
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(a.value() - b.value(), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    tp.grad_mut(ia) += g;
    tp.grad_mut(ib) -= g;
  });
}

Var add_rowwise(Var a, Var r) {
  if (r.rows() != 1 || r.cols() != a.cols()) {
    throw ShapeError("add_rowwise: " + shape_string(a.value()) + " + row " + shape_string(r.value()));
  }
  Matrix out = a.value().rowwise() + r.value().row(0);
  const auto ia = a.id(), ir = r.id();
  return a.tape().record(std::move(out), {a, r}, [ia, ir](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    tp.grad_mut(ia) += g;
    tp.grad_mut(ir) += g.colwise().sum();
  });
}

Var scale(Var a, double s) {
  const auto ia = a.id();
  return a.tape().record(a.value() * s, {a}, [ia, s](Tape& tp, std::size_t self) {
    tp.grad_mut(ia) += s * tp.grad(self);
  });
}

Var leaky_relu(Var a, double slope) {
  const auto ia = a.id();
  Matrix out = leaky_relu(a.value(), slope);
  // Subgradient at exactly 0 is taken as `slope`.
  return a.tape().record(std::move(out), {a}, [ia, slope](Tape& tp, std::size_t self) {
    const Matrix& x = tp.value(ia);
    const Matrix& g = tp.grad(self);
    Matrix& dx = tp.grad_mut(ia);
    for (Index j = 0; j < x.cols(); ++j)
      for (Index i = 0; i < x.rows(); ++i) dx(i, j) += (x(i, j) > 0.0 ? 1.0 : slope) * g(i, j);
  });
}

Var layernorm_rows(Var x, Var gain, Var bias) {
  const Index d = x.cols();
  if (d == 0 || gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw ShapeError("layernorm_rows: x " + shape_string(x.value()) + ", gain " + shape_string(gain.value()) +
                     ", bias " + shape_string(bias.value()));
  }
  const Matrix& xv = x.value();
  Matrix normalized(xv.rows(), d);
  Vector inv_std(xv.rows());
  for (Index i = 0; i < xv.rows(); ++i) {
    const double mean = xv.row(i).mean();
    const RowVector centered = xv.row(i).array() - mean;
    const double var = centered.squaredNorm() / static_cast<double>(d);
    inv_std(i) = 1.0 / std::sqrt(var + kLayerNormEps);
    normalized.row(i) = centered * inv_std(i);
  }
  Matrix out = (normalized.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);

  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      std::move(out), {x, gain, bias},
      [ix, ig, ib, normalized = std::move(normalized), inv_std = std::move(inv_std)](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad(self);
        const RowVector gain_row = tp.value(ig).row(0);
        tp.grad_mut(ig) += (g.array() * normalized.array()).colwise().sum().matrix();
        tp.grad_mut(ib) += g.colwise().sum();
        Matrix& dx = tp.grad_mut(ix);
        const double n = static_cast<double>(normalized.cols());
        for (Index i = 0; i < g.rows(); ++i) {
          const RowVector dxhat = g.row(i).cwiseProduct(gain_row);
          const double mean_dxhat = dxhat.sum() / n;
          const double mean_dxhat_xhat = dxhat.dot(normalized.row(i)) / n;
          dx.row(i) += inv_std(i) *
                       (dxhat.array() - mean_dxhat - normalized.row(i).array() * mean_dxhat_xhat).matrix();
        }
      });
}

Var hconcat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("hconcat: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("hconcat: row mismatch " + shape_string(p.value()));
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::size_t> ids;
  std::vector<Index> offsets;
  Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.cols();
  }
  return parts.front().tape().record(std::move(out), parts, [ids, offsets](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      Matrix& dp = tp.grad_mut(ids[k]);
      dp += g.middleCols(offsets[k], dp.cols());
    }
  });
}

Var row(Var a, Index i) {
  if (i < 0 || i >= a.rows()) throw ShapeError("row: index " + std::to_string(i) + " out of " + shape_string(a.value()));
  const auto ia = a.id();
  return a.tape().record(Matrix(a.value().row(i)), {a}, [ia, i](Tape& tp, std::size_t self) {
    tp.grad_mut(ia).row(i) += tp.grad(self).row(0);
  });
}

Var sum(Var a) {
  const auto ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().record(std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    tp.grad_mut(ia).array() += tp.grad(self)(0, 0);
  });
}

Var mse_rows(Var a, const Matrix& target) {
  require_same_shape("mse_rows", a.value(), target);
  const double n = static_cast<double>(std::max<Index>(a.rows(), 1));
  Matrix diff = a.value() - target;
  Matrix out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, diff = std::move(diff), n](Tape& tp, std::size_t self) {
    tp.grad_mut(ia) += (2.0 * tp.grad(self)(0, 0) / n) * diff;
  });
}

Var clip_norm_rows(Var a, double max_norm) {
  Matrix out = a.value();
  std::vector<Index> clipped;
  for (Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n > max_norm) {
      out.row(i) *= max_norm / n;
      clipped.push_back(i);
    }
  }
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, max_norm, clipped](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const Matrix& x = tp.value(ia);
    Matrix& dx = tp.grad_mut(ia);
    Matrix local = g;
    for (Index i : clipped) {
      const double n = x.row(i).norm();
      const RowVector unit = x.row(i) / n;
      local.row(i) = (max_norm / n) * (g.row(i) - unit * unit.dot(g.row(i)));
    }
    dx += local;
  });
}

Var softmax_masked_rows(Var logits, const BoolMatrix& mask, SoftmaxDenominator denominator) {
  const Matrix& z = logits.value();
  if (mask.rows() != z.rows() || mask.cols() != z.cols()) {
    throw ShapeError("softmax_masked_rows: logits " + shape_string(z) + " vs mask " + shape_string(mask));
  }
  Matrix probs = Matrix::Zero(z.rows(), z.cols());
  // Normalizer-only weights q; equal to probs for the masked denominator.
  Matrix norm_weights = Matrix::Zero(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    double top = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < z.cols(); ++j) {
      if (mask(i, j) || denominator == SoftmaxDenominator::all) top = std::max(top, z(i, j));
    }
    if (!mask.row(i).any()) {
      throw std::domain_error("softmax_masked_rows: row " + std::to_string(i) + " is fully masked");
    }
    double total = 0.0;
    for (Index j = 0; j < z.cols(); ++j) {
      if (mask(i, j) || denominator == SoftmaxDenominator::all) {
        norm_weights(i, j) = std::exp(z(i, j) - top);
        total += norm_weights(i, j);
      }
    }
    norm_weights.row(i) /= total;
    for (Index j = 0; j < z.cols(); ++j) {
      if (mask(i, j)) probs(i, j) = norm_weights(i, j);
    }
  }
  const auto iz = logits.id();
  Matrix out = probs;
  return logits.tape().record(
      std::move(out), {logits},
      [iz, probs = std::move(probs), norm_weights = std::move(norm_weights)](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad(self);
        Matrix& dz = tp.grad_mut(iz);
        for (Index i = 0; i < g.rows(); ++i) {
          const double inner = g.row(i).dot(probs.row(i));
          dz.row(i) += (g.row(i).cwiseProduct(probs.row(i)) - inner * norm_weights.row(i));
        }
      });
}

// ---------------------------------------------------------------------------

void adamw_step(std::span<Matrix> params, std::span<const Matrix> grads, AdamWState& state,
                const AdamWConfig& cfg) {
  if (params.size() != grads.size()) {
    throw ShapeError("adamw_step: " + std::to_string(params.size()) + " params vs " +
                     std::to_string(grads.size()) + " grads");
  }
  if (state.m.empty()) {
    for (const Matrix& p : params) {
      state.m.push_back(Matrix::Zero(p.rows(), p.cols()));
      state.v.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adamw_step: optimizer state size mismatch");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& p = params[k];
    const Matrix& g = grads[k];
    if (g.rows() != p.rows() || g.cols() != p.cols() || state.m[k].rows() != p.rows() ||
        state.m[k].cols() != p.cols()) {
      throw ShapeError("adamw_step: tensor " + std::to_string(k) + " param " + shape_string(p) + " grad " +
                       shape_string(g));
    }
    state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g;
    state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g.cwiseAbs2();
    if (cfg.weight_decay != 0.0) p -= cfg.lr * cfg.weight_decay * p;
    const auto m_hat = state.m[k].array() / bc1;
    const auto v_hat = state.v[k].array() / bc2;
    p.array() -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
  }
}

double clip_global_norm(std::span<Matrix> grads, double max_norm) {
  double sq = 0.0;
  for (const Matrix& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (Matrix& g : grads) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------

void ExactSum::normalize() {
  for (int i = 0; i + 1 < kChunks; ++i) {
    const std::int64_t carry = chunks_[static_cast<std::size_t>(i)] >> 32;
    chunks_[static_cast<std::size_t>(i)] -= carry * (std::int64_t{1} << 32);
    chunks_[static_cast<std::size_t>(i) + 1] += carry;
  }
  pending_ = 0;
}

void ExactSum::add(double x) {
  if (x == 0.0) return;
  if (!std::isfinite(x)) {
    special_ += x;
    return;
  }
  const auto bits = std::bit_cast<std::uint64_t>(x);
  const int biased = static_cast<int>((bits >> 52) & 0x7FF);
  std::uint64_t m = bits & ((std::uint64_t{1} << 52) - 1);
  if (biased != 0) m |= std::uint64_t{1} << 52;
  const int pos = biased == 0 ? 0 : biased - 1;
  const auto chunk = static_cast<std::size_t>(pos / 32);
  const int off = pos % 32;
  // m << off spans at most 85 bits: three 32-bit digits.
  const std::uint64_t lo = m << off;
  const std::uint64_t hi = off == 0 ? (m >> 32) >> 32 : m >> (64 - off);
  const auto d0 = static_cast<std::int64_t>(lo & 0xFFFFFFFFU);
  const auto d1 = static_cast<std::int64_t>(lo >> 32);
  const auto d2 = static_cast<std::int64_t>(hi);
  if (x > 0.0) {
    chunks_[chunk] += d0;
    chunks_[chunk + 1] += d1;
    chunks_[chunk + 2] += d2;
  } else {
    chunks_[chunk] -= d0;
    chunks_[chunk + 1] -= d1;
    chunks_[chunk + 2] -= d2;
  }
  if (++pending_ >= (std::int64_t{1} << 29)) normalize();
}

void ExactSum::add(const ExactSum& other) {
  if (pending_ + other.pending_ + 1 >= (std::int64_t{1} << 29)) normalize();
  ExactSum rhs = other;
  rhs.normalize();
  for (std::size_t i = 0; i < chunks_.size(); ++i) chunks_[i] += rhs.chunks_[i];
  pending_ += 1;
  special_ += other.special_;
}

double ExactSum::value() const {
  if (special_ != 0.0 || std::isnan(special_)) return special_;
  ExactSum norm = *this;
  norm.normalize();
  constexpr int kLimbs = kChunks / 2;
  std::array<std::uint64_t, kLimbs> mag{};
  for (std::size_t k = 0; k < mag.size(); ++k) {
    mag[k] = static_cast<std::uint64_t>(norm.chunks_[2 * k]) + (static_cast<std::uint64_t>(norm.chunks_[2 * k + 1]) << 32);
  }
  const bool negative = (mag.back() >> 63) != 0;
  if (negative) {
    std::uint64_t carry = 1;
    for (auto& l : mag) {
      l = ~l + carry;
      carry = (carry && l == 0) ? 1 : 0;
    }
  }
  int top = kLimbs - 1;
  while (top >= 0 && mag[static_cast<std::size_t>(top)] == 0) --top;
  if (top < 0) return 0.0;
  const int bits = top * 64 + (64 - std::countl_zero(mag[static_cast<std::size_t>(top)]));
  // Top 64 significant bits plus a sticky flag for everything below them.
  auto bit_range = [&](int from) {  // 64 bits starting at bit `from` (may be negative)
    std::uint64_t out = 0;
    for (int k = 0; k < 64; ++k) {
      const int b = from + k;
      if (b < 0) continue;
      if ((mag[static_cast<std::size_t>(b / 64)] >> (b % 64)) & 1U) out |= std::uint64_t{1} << k;
    }
    return out;
  };
  double result = 0.0;
  if (bits <= 53) {
    result = std::ldexp(static_cast<double>(mag[0]), -1074);
  } else {
    const int from = bits - 64;
    const std::uint64_t t = bit_range(from);
    bool sticky = false;
    for (int b = 0; b < from && !sticky; ++b) sticky = ((mag[static_cast<std::size_t>(b / 64)] >> (b % 64)) & 1U) != 0;
    std::uint64_t keep = t >> 11;
    const std::uint64_t rem = t & 0x7FF;
    if (rem > 0x400 || (rem == 0x400 && (sticky || (keep & 1U)))) ++keep;
    result = std::ldexp(static_cast<double>(keep), from + 11 - 1074);
  }
  return negative ? -result : result;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

Rng Rng::stream(std::uint64_t seed, std::uint64_t index) {
  return Rng(splitmix64(splitmix64(seed) ^ splitmix64(index + 0x632BE59BD9B4E019ULL)));
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below: empty range");
  // Rejection keeps the draw unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t r;
  do {
    r = engine_();
  } while (r >= limit);
  return r % n;
}

}  // namespace mast
