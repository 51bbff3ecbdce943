#include "mast/posenc.hpp"

#include <stdexcept>

namespace mast {

FrequencySet make_frequencies(FrequencyKind kind, int count, double base_wavelength) {
  if (count < 1) throw std::invalid_argument("make_frequencies: need at least one frequency");
  if (!(base_wavelength > 0.0)) throw std::invalid_argument("make_frequencies: base wavelength must be positive");
  FrequencySet set;
  set.kind = kind;
  set.base_wavelength = base_wavelength;
  set.omegas.reserve(static_cast<std::size_t>(count));
  const double two_pi = 2.0 * std::numbers::pi;
  for (int k = 1; k <= count; ++k) {
    if (kind == FrequencyKind::geometric) {
      set.omegas.push_back(two_pi * std::pow(base_wavelength, -static_cast<double>(k) / count));
    } else {
      set.omegas.push_back(two_pi * k / base_wavelength);
    }
  }
  return set;
}

namespace {

Matrix rotate_rows(const Matrix& x, const Matrix& positions, const FrequencySet& freqs, double sign) {
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Eigen::Vector2d p = sign * positions.row(i).transpose();
    out.row(i) = rope_rotate(x.row(i).transpose(), p, freqs).transpose();
  }
  return out;
}

}  // namespace

Var rope_rows(Var x, const Matrix& positions, const FrequencySet& freqs) {
  if (positions.rows() != x.rows() || positions.cols() != 2) {
    throw ShapeError("rope_rows: x " + shape_string(x.value()) + " vs positions " + shape_string(positions));
  }
  const auto ix = x.id();
  return x.tape().record(rotate_rows(x.value(), positions, freqs, 1.0), {x},
                         [ix, positions, freqs](Tape& tp, std::size_t self) {
                           tp.grad_mut(ix) += rotate_rows(tp.grad(self), positions, freqs, -1.0);
                         });
}

Vector ape_encode(const Eigen::Vector2d& p, const FrequencySet& freqs, Index d) {
  if (d % 4 != 0 || d <= 0) throw ShapeError("ape_encode: dimension " + std::to_string(d) + " is not a positive multiple of 4");
  if (static_cast<Index>(freqs.size()) < d / 4) {
    throw ShapeError("ape_encode: " + std::to_string(freqs.size()) + " frequencies cannot fill dimension " +
                     std::to_string(d));
  }
  Vector out(d);
  for (Index k = 0; k < d / 4; ++k) {
    const double w = freqs.omegas[static_cast<std::size_t>(k)];
    out(4 * k) = std::sin(w * p.x());
    out(4 * k + 1) = std::cos(w * p.x());
    out(4 * k + 2) = std::sin(w * p.y());
    out(4 * k + 3) = std::cos(w * p.y());
  }
  return out;
}

Matrix ape_encode_rows(const Matrix& positions, const FrequencySet& freqs, Index d) {
  Matrix out(positions.rows(), d);
  for (Index i = 0; i < positions.rows(); ++i) {
    out.row(i) = ape_encode(positions.row(i).transpose(), freqs, d).transpose();
  }
  return out;
}

PosEncKind parse_posenc(const std::string& name) {
  if (name == "none") return PosEncKind::none;
  if (name == "rope-g") return PosEncKind::rope_geometric;
  if (name == "rope-l") return PosEncKind::rope_linear;
  if (name == "ape-g") return PosEncKind::ape_geometric;
  if (name == "ape-l") return PosEncKind::ape_linear;
  if (name == "mlp") return PosEncKind::mlp;
  throw std::invalid_argument("unknown positional encoding '" + name + "'");
}

std::string to_string(PosEncKind kind) {
  switch (kind) {
    case PosEncKind::none: return "none";
    case PosEncKind::rope_geometric: return "rope-g";
    case PosEncKind::rope_linear: return "rope-l";
    case PosEncKind::ape_geometric: return "ape-g";
    case PosEncKind::ape_linear: return "ape-l";
    case PosEncKind::mlp: return "mlp";
  }
  return "none";
}

FrequencyKind frequency_kind(PosEncKind k) {
  return (k == PosEncKind::rope_linear || k == PosEncKind::ape_linear) ? FrequencyKind::linear
                                                                       : FrequencyKind::geometric;
}

}  // namespace mast
