#pragma once

// Test-side helpers and independent oracles. Nothing here calls into the code it checks
// except to read parameters.

#include "mast/network.hpp"
#include "mast/numkernel.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

namespace mast::test {

inline Matrix random_matrix(Rng& rng, Index rows, Index cols, double lo = -1.0, double hi = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

inline double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

/// Builds a scalar on a fresh tape from the given inputs.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Largest per-input relative error ||analytic - numeric||_F / max(||analytic||_F, ||numeric||_F)
/// with central differences of step h.
inline double gradient_error(const ScalarFn& f, std::vector<Matrix> inputs, double h = 1e-4) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(tape.variable(m));
  Var out = f(tape, vars);
  tape.backward(out);
  std::vector<Matrix> analytic;
  for (const auto& v : vars) analytic.push_back(tape.grad(v));

  auto eval = [&](const std::vector<Matrix>& ins) {
    Tape t;
    std::vector<Var> vs;
    for (const auto& m : ins) vs.push_back(t.constant(m));
    return f(t, vs).value()(0, 0);
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Matrix numeric(inputs[k].rows(), inputs[k].cols());
    for (Index i = 0; i < numeric.rows(); ++i) {
      for (Index j = 0; j < numeric.cols(); ++j) {
        const double saved = inputs[k](i, j);
        inputs[k](i, j) = saved + h;
        const double up = eval(inputs);
        inputs[k](i, j) = saved - h;
        const double down = eval(inputs);
        inputs[k](i, j) = saved;
        numeric(i, j) = (up - down) / (2.0 * h);
      }
    }
    const double scale = std::max({analytic[k].norm(), numeric.norm(), 1e-12});
    worst = std::max(worst, (analytic[k] - numeric).norm() / scale);
  }
  return worst;
}

using ModelFn = std::function<Var(const BoundModel&)>;

/// gradient_error over the named tensors of a model, the rest held fixed.
inline double model_gradient_error(const ModelParams& params, const MastConfig& cfg, const ModelFn& f,
                                   const std::vector<std::string>& names, double h = 1e-5) {
  Tape tape;
  const BoundModel bound(tape, params, cfg, true);
  tape.backward(f(bound));
  auto eval = [&](const ModelParams& p) {
    Tape t;
    return f(BoundModel(t, p, cfg, false)).value()(0, 0);
  };
  double worst = 0.0;
  ModelParams work = params;
  for (const auto& name : names) {
    const Matrix analytic = tape.grad(bound[name]);
    Matrix& value = work.at(name);
    Matrix numeric(value.rows(), value.cols());
    for (Index i = 0; i < value.rows(); ++i) {
      for (Index j = 0; j < value.cols(); ++j) {
        const double saved = value(i, j);
        value(i, j) = saved + h;
        const double up = eval(work);
        value(i, j) = saved - h;
        const double down = eval(work);
        value(i, j) = saved;
        numeric(i, j) = (up - down) / (2.0 * h);
      }
    }
    const double scale = std::max({analytic.norm(), numeric.norm(), 1e-12});
    worst = std::max(worst, (analytic - numeric).norm() / scale);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Plain-loop MAST stack: no tape, no Eigen arithmetic.

using Vec = std::vector<double>;

inline Vec matvec(const Matrix& w, const Vec& x) {
  Vec out(static_cast<std::size_t>(w.rows()), 0.0);
  for (Index i = 0; i < w.rows(); ++i)
    for (Index j = 0; j < w.cols(); ++j) out[static_cast<std::size_t>(i)] += w(i, j) * x[static_cast<std::size_t>(j)];
  return out;
}

inline Vec ref_mlp(const ModelParams& p, const std::string& prefix, const Vec& x, double slope) {
  Vec h = matvec(p.at(prefix + "w1"), x);
  for (std::size_t i = 0; i < h.size(); ++i) {
    h[i] += p.at(prefix + "b1")(0, static_cast<Index>(i));
    if (h[i] < 0.0) h[i] *= slope;
  }
  Vec out = matvec(p.at(prefix + "w2"), h);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += p.at(prefix + "b2")(0, static_cast<Index>(i));
  return out;
}

inline Vec ref_layernorm(const Vec& x, const Matrix& gain, const Matrix& bias) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0, var = 0.0;
  for (double v : x) mean += v / n;
  for (double v : x) var += (v - mean) * (v - mean) / n;
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * gain(0, static_cast<Index>(i)) + bias(0, static_cast<Index>(i));
  }
  return out;
}

/// omega_k for k = 1..count, in rad/m.
inline std::vector<double> ref_omegas(bool geometric, int count, double wavelength) {
  std::vector<double> w;
  for (int k = 1; k <= count; ++k) {
    w.push_back(geometric ? 2.0 * std::numbers::pi * std::pow(wavelength, -static_cast<double>(k) / count)
                          : 2.0 * std::numbers::pi * k / wavelength);
  }
  return w;
}

/// Complex pair m turns by omega_{m/2} times p.x (m even) or p.y (m odd).
inline Vec ref_rotate(const Vec& v, double px, double py, const std::vector<double>& w) {
  Vec out(v.size());
  for (std::size_t m = 0; m < v.size() / 2; ++m) {
    const double phase = w[m / 2] * (m % 2 == 0 ? px : py);
    const std::complex<double> z = std::complex<double>(v[2 * m], v[2 * m + 1]) * std::polar(1.0, phase);
    out[2 * m] = z.real();
    out[2 * m + 1] = z.imag();
  }
  return out;
}

inline bool geometric(PosEncKind k) { return k == PosEncKind::rope_geometric || k == PosEncKind::ape_geometric; }

inline Matrix ref_forward(const ModelParams& p, const MastConfig& cfg, const Matrix& x0, const Matrix& pos,
                          const MaskMatrix& mask) {
  const auto n = static_cast<std::size_t>(x0.rows());
  const auto d = static_cast<std::size_t>(cfg.model_dim());
  std::vector<Vec> x(n, Vec(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) x[i][c] = x0(static_cast<Index>(i), static_cast<Index>(c));
  if (cfg.layers > 0) {
    for (std::size_t i = 0; i < n; ++i) {
      const double px = pos(static_cast<Index>(i), 0), py = pos(static_cast<Index>(i), 1);
      if (is_ape(cfg.posenc)) {
        const auto w = ref_omegas(geometric(cfg.posenc), static_cast<int>(d / 4), cfg.base_wavelength);
        for (std::size_t k = 0; k < w.size(); ++k) {
          x[i][4 * k] += std::sin(w[k] * px);
          x[i][4 * k + 1] += std::cos(w[k] * px);
          x[i][4 * k + 2] += std::sin(w[k] * py);
          x[i][4 * k + 3] += std::cos(w[k] * py);
        }
      } else if (cfg.posenc == PosEncKind::mlp) {
        const Vec e = ref_mlp(p, "posenc.", {px / cfg.base_wavelength, py / cfg.base_wavelength}, cfg.leaky_slope);
        for (std::size_t c = 0; c < d; ++c) x[i][c] += e[c];
      }
    }
  }
  const auto w = ref_omegas(geometric(cfg.posenc), cfg.head_dim / 4, cfg.base_wavelength);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    std::vector<Vec> normed(n);
    for (std::size_t i = 0; i < n; ++i) normed[i] = ref_layernorm(x[i], p.at(pre + "ln1.gain"), p.at(pre + "ln1.bias"));
    std::vector<Vec> concat(n);
    for (int h = 0; h < cfg.heads; ++h) {
      const std::string hs = std::to_string(h);
      std::vector<Vec> q(n), k(n), v(n);
      for (std::size_t i = 0; i < n; ++i) {
        q[i] = matvec(p.at(pre + "attn.q" + hs), normed[i]);
        k[i] = matvec(p.at(pre + "attn.k" + hs), normed[i]);
        v[i] = matvec(p.at(pre + "attn.v" + hs), normed[i]);
        if (is_rope(cfg.posenc)) {
          q[i] = ref_rotate(q[i], pos(static_cast<Index>(i), 0), pos(static_cast<Index>(i), 1), w);
          k[i] = ref_rotate(k[i], pos(static_cast<Index>(i), 0), pos(static_cast<Index>(i), 1), w);
        }
      }
      for (std::size_t i = 0; i < n; ++i) {
        Vec logit(n, 0.0);
        double top = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
          if (!mask(static_cast<Index>(i), static_cast<Index>(j))) continue;
          double s = 0.0;
          for (std::size_t c = 0; c < q[i].size(); ++c) s += q[i][c] * k[j][c];
          if (cfg.scaled_attention) s /= std::sqrt(static_cast<double>(cfg.head_dim));
          logit[j] = s;
          top = std::max(top, s);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          if (mask(static_cast<Index>(i), static_cast<Index>(j))) z += std::exp(logit[j] - top);
        Vec out(v[0].size(), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
          if (!mask(static_cast<Index>(i), static_cast<Index>(j))) continue;
          const double a = std::exp(logit[j] - top) / z;
          for (std::size_t c = 0; c < out.size(); ++c) out[c] += a * v[j][c];
        }
        concat[i].insert(concat[i].end(), out.begin(), out.end());
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      const Vec o = matvec(p.at(pre + "attn.o"), concat[i]);
      for (std::size_t c = 0; c < d; ++c) x[i][c] += o[c];
      const Vec m = ref_mlp(p, pre + "mlp.", ref_layernorm(x[i], p.at(pre + "ln2.gain"), p.at(pre + "ln2.bias")),
                            cfg.leaky_slope);
      for (std::size_t c = 0; c < d; ++c) x[i][c] += m[c];
    }
  }
  Matrix y(static_cast<Index>(n), static_cast<Index>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) y(static_cast<Index>(i), static_cast<Index>(c)) = x[i][c];
  return y;
}

/// Perception, reference stack and readout with per-row norm clipping.
inline Matrix ref_policy(const ModelParams& p, const MastConfig& cfg, const Matrix& obs, const Matrix& pos,
                         const MaskMatrix& mask) {
  Matrix x(obs.rows(), cfg.model_dim());
  for (Index i = 0; i < obs.rows(); ++i) {
    Vec o(static_cast<std::size_t>(obs.cols()));
    for (Index c = 0; c < obs.cols(); ++c) o[static_cast<std::size_t>(c)] = obs(i, c) * cfg.obs_scale;
    const Vec e = ref_mlp(p, "perception.", o, cfg.leaky_slope);
    for (Index c = 0; c < x.cols(); ++c) x(i, c) = e[static_cast<std::size_t>(c)];
  }
  const Matrix y = ref_forward(p, cfg, x, pos, mask);
  Matrix u(obs.rows(), cfg.action_dim);
  for (Index i = 0; i < y.rows(); ++i) {
    Vec row(static_cast<std::size_t>(y.cols()));
    for (Index c = 0; c < y.cols(); ++c) row[static_cast<std::size_t>(c)] = y(i, c);
    Vec a = ref_mlp(p, "readout.", row, cfg.leaky_slope);
    double norm = 0.0;
    for (double v : a) norm += v * v;
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < a.size(); ++c) u(i, static_cast<Index>(c)) = norm > cfg.u_max ? a[c] * cfg.u_max / norm : a[c];
  }
  return u;
}

/// Brute-force reachability: reach[i][j] iff j == i or a directed path j -> ... -> i exists,
/// from Floyd-Warshall style closure over the adjacency (adj[i][j]: i receives from j).
inline std::vector<std::vector<bool>> ref_reach(const std::vector<std::vector<bool>>& adj) {
  const std::size_t n = adj.size();
  auto r = adj;
  for (std::size_t i = 0; i < n; ++i) r[i][i] = true;
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (r[i][k] && r[k][j]) r[i][j] = true;
  return r;
}

}  // namespace mast::test
