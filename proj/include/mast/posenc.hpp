#pragma once

// Frequency sets and the positional encodings built on them: continuous 2D rotary
// encoding (applied to queries/keys), additive sinusoidal encoding, and the
// parameters of the learned MLP encoding (evaluated in network.cpp).

#include "mast/numkernel.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace mast {

enum class FrequencyKind { geometric, linear };

/// Angular frequencies in rad/m, indexed k = 1..K.
///   geometric: omega_k = 2*pi * base_wavelength^(-k/K)
///   linear:    omega_k = 2*pi * k / base_wavelength
struct FrequencySet {
  std::vector<double> omegas;
  FrequencyKind kind = FrequencyKind::geometric;
  double base_wavelength = 1000.0;

  std::size_t size() const { return omegas.size(); }
};

FrequencySet make_frequencies(FrequencyKind kind, int count, double base_wavelength);

/// Rotates a real vector of length 4K, read as 2K complex pairs (re, im). Pair 2k
/// turns by omega_k * p.x and pair 2k+1 by omega_k * p.y. Norm preserving and
/// linear in v.
template <typename Derived>
Vector rope_rotate(const Eigen::MatrixBase<Derived>& v, const Eigen::Vector2d& p, const FrequencySet& freqs) {
  if (v.size() != static_cast<Index>(4 * freqs.size())) {
    throw ShapeError("rope_rotate: vector length " + std::to_string(v.size()) + " needs to equal 4K = " +
                     std::to_string(4 * freqs.size()));
  }
  Vector out(v.size());
  for (std::size_t k = 0; k < freqs.size(); ++k) {
    for (int axis = 0; axis < 2; ++axis) {
      const double phase = freqs.omegas[k] * p(axis);
      const double c = std::cos(phase), s = std::sin(phase);
      const Index re = static_cast<Index>(4 * k + 2 * axis);
      const double a = v(re), b = v(re + 1);
      out(re) = a * c - b * s;
      out(re + 1) = a * s + b * c;
    }
  }
  return out;
}

/// Row-wise rotation on the tape: row i of x (N x 4K) is rotated by positions.row(i).
/// The adjoint is the inverse rotation.
Var rope_rows(Var x, const Matrix& positions, const FrequencySet& freqs);

/// Absolute sinusoidal encoding of length d = 4K with blocks
/// [sin(w p.x), cos(w p.x), sin(w p.y), cos(w p.y)].
Vector ape_encode(const Eigen::Vector2d& p, const FrequencySet& freqs, Index d);

/// ape_encode for every row of an N x 2 position matrix.
Matrix ape_encode_rows(const Matrix& positions, const FrequencySet& freqs, Index d);

enum class PosEncKind { none, rope_geometric, rope_linear, ape_geometric, ape_linear, mlp };

/// Names used in config files: none, rope-g, rope-l, ape-g, ape-l, mlp.
PosEncKind parse_posenc(const std::string& name);
std::string to_string(PosEncKind kind);

inline bool is_rope(PosEncKind k) { return k == PosEncKind::rope_geometric || k == PosEncKind::rope_linear; }
inline bool is_ape(PosEncKind k) { return k == PosEncKind::ape_geometric || k == PosEncKind::ape_linear; }
FrequencyKind frequency_kind(PosEncKind k);

}  // namespace mast
