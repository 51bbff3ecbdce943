#include "checks.hpp"

#include "mast/attention.hpp"
#include "mast/comm.hpp"
#include "mast/coverage.hpp"
#include "mast/dan.hpp"
#include "mast/network.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <numeric>

namespace mast::checks {

namespace {

Matrix random_matrix(Rng& rng, Index rows, Index cols, double lo, double hi) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

MastConfig small_config(PosEncKind kind, int layers, int heads, int head_dim) {
  MastConfig cfg;
  cfg.layers = layers;
  cfg.heads = heads;
  cfg.head_dim = head_dim;
  cfg.posenc = kind;
  cfg.base_wavelength = 1000.0;
  return cfg;
}

CheckResult finish(std::string name, double deviation, double tolerance) {
  return {std::move(name), deviation, tolerance, deviation <= tolerance};
}

// Plain-loop MAST stack (no tape, no Eigen products) used as an oracle.
using Vec = std::vector<double>;

Vec matvec(const Matrix& w, const Vec& x) {
  Vec out(static_cast<std::size_t>(w.rows()), 0.0);
  for (Index i = 0; i < w.rows(); ++i)
    for (Index j = 0; j < w.cols(); ++j) out[static_cast<std::size_t>(i)] += w(i, j) * x[static_cast<std::size_t>(j)];
  return out;
}

Vec mlp(const ModelParams& p, const std::string& prefix, const Vec& x, double slope) {
  Vec h = matvec(p.at(prefix + "w1"), x);
  for (std::size_t i = 0; i < h.size(); ++i) {
    h[i] += p.at(prefix + "b1")(0, static_cast<Index>(i));
    if (h[i] < 0.0) h[i] *= slope;
  }
  Vec out = matvec(p.at(prefix + "w2"), h);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += p.at(prefix + "b2")(0, static_cast<Index>(i));
  return out;
}

Vec layernorm(const Vec& x, const Matrix& gain, const Matrix& bias) {
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

std::vector<double> omegas(PosEncKind kind, int count, double wavelength) {
  std::vector<double> w;
  const bool geometric = kind == PosEncKind::rope_geometric || kind == PosEncKind::ape_geometric;
  for (int k = 1; k <= count; ++k) {
    w.push_back(geometric ? 2.0 * std::numbers::pi * std::pow(wavelength, -static_cast<double>(k) / count)
                          : 2.0 * std::numbers::pi * k / wavelength);
  }
  return w;
}

Vec rotate(const Vec& v, double px, double py, const std::vector<double>& w) {
  Vec out(v.size());
  for (std::size_t m = 0; m < v.size() / 2; ++m) {
    const double phase = w[m / 2] * (m % 2 == 0 ? px : py);
    const std::complex<double> z = std::complex<double>(v[2 * m], v[2 * m + 1]) * std::polar(1.0, phase);
    out[2 * m] = z.real();
    out[2 * m + 1] = z.imag();
  }
  return out;
}

Matrix naive_forward(const ModelParams& p, const MastConfig& cfg, const Matrix& x0, const Matrix& pos,
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
        const auto w = omegas(cfg.posenc, static_cast<int>(d / 4), cfg.base_wavelength);
        for (std::size_t k = 0; k < w.size(); ++k) {
          x[i][4 * k] += std::sin(w[k] * px);
          x[i][4 * k + 1] += std::cos(w[k] * px);
          x[i][4 * k + 2] += std::sin(w[k] * py);
          x[i][4 * k + 3] += std::cos(w[k] * py);
        }
      } else if (cfg.posenc == PosEncKind::mlp) {
        const Vec e = mlp(p, "posenc.", {px / cfg.base_wavelength, py / cfg.base_wavelength}, cfg.leaky_slope);
        for (std::size_t c = 0; c < d; ++c) x[i][c] += e[c];
      }
    }
  }
  const auto w = omegas(cfg.posenc, cfg.head_dim / 4, cfg.base_wavelength);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    std::vector<Vec> normed(n);
    for (std::size_t i = 0; i < n; ++i) normed[i] = layernorm(x[i], p.at(pre + "ln1.gain"), p.at(pre + "ln1.bias"));
    std::vector<Vec> concat(n);
    for (int h = 0; h < cfg.heads; ++h) {
      const std::string hs = std::to_string(h);
      std::vector<Vec> q(n), k(n), v(n);
      for (std::size_t i = 0; i < n; ++i) {
        q[i] = matvec(p.at(pre + "attn.q" + hs), normed[i]);
        k[i] = matvec(p.at(pre + "attn.k" + hs), normed[i]);
        v[i] = matvec(p.at(pre + "attn.v" + hs), normed[i]);
        if (is_rope(cfg.posenc)) {
          q[i] = rotate(q[i], pos(static_cast<Index>(i), 0), pos(static_cast<Index>(i), 1), w);
          k[i] = rotate(k[i], pos(static_cast<Index>(i), 0), pos(static_cast<Index>(i), 1), w);
        }
      }
      for (std::size_t i = 0; i < n; ++i) {
        Vec logit(n, -INFINITY);
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
      const Vec m = mlp(p, pre + "mlp.", layernorm(x[i], p.at(pre + "ln2.gain"), p.at(pre + "ln2.bias")),
                        cfg.leaky_slope);
      for (std::size_t c = 0; c < d; ++c) x[i][c] += m[c];
    }
  }
  Matrix y(static_cast<Index>(n), static_cast<Index>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) y(static_cast<Index>(i), static_cast<Index>(c)) = x[i][c];
  return y;
}

double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

}  // namespace

std::vector<CheckResult> equivariance_suite() {
  std::vector<CheckResult> out;
  Rng rng(101);
  for (PosEncKind kind : {PosEncKind::rope_geometric, PosEncKind::rope_linear}) {
    MastConfig cfg = small_config(kind, 4, 4, 16);
    cfg.window_radius = 400.0;
    double shift = 0.0, perm = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const ModelParams params = init_params(cfg, rng);
      const Index n = 12;
      const Matrix x = random_matrix(rng, n, cfg.model_dim(), -1.0, 1.0);
      const Matrix p = random_matrix(rng, n, 2, 0.0, 1000.0);
      const Eigen::RowVector2d c(rng.uniform(-5000.0, 5000.0), rng.uniform(-5000.0, 5000.0));
      const Matrix shifted = p.rowwise() + c;
      const Matrix y = forward(params, cfg, x, p, window_mask(p, cfg.window_radius));
      shift = std::max(shift, max_abs(y - forward(params, cfg, x, shifted, window_mask(shifted, cfg.window_radius))));

      std::vector<int> order(static_cast<std::size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      for (Index i = n - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[rng.below(static_cast<std::uint64_t>(i + 1))]);
      Matrix xp(n, x.cols()), pp(n, 2);
      for (Index i = 0; i < n; ++i) {
        xp.row(i) = x.row(order[static_cast<std::size_t>(i)]);
        pp.row(i) = p.row(order[static_cast<std::size_t>(i)]);
      }
      const Matrix yp = forward(params, cfg, xp, pp, window_mask(pp, cfg.window_radius));
      for (Index i = 0; i < n; ++i) {
        perm = std::max(perm, (yp.row(i) - y.row(order[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff());
      }
    }
    out.push_back(finish("shift equivariance (" + to_string(kind) + ")", shift, 1e-9));
    out.push_back(finish("permutation equivariance (" + to_string(kind) + ")", perm, 1e-9));
  }

  double keystone = 0.0;
  for (int g = 0; g < 10; ++g) {
    MastConfig cfg = small_config(PosEncKind::rope_geometric, 3, 2, 8);
    cfg.window_radius = 350.0;
    const ModelParams params = init_params(cfg, rng);
    const int n = 10 + g;
    const Matrix p = random_matrix(rng, n, 2, 0.0, 1000.0);
    const Matrix x = random_matrix(rng, n, cfg.model_dim(), -1.0, 1.0);
    const GraphSpec spec = g % 2 == 0 ? GraphSpec{GraphKind::knn, 1 + g % 3, 0.0} : GraphSpec{GraphKind::disk, 3, 200.0};
    const CommGraph graph = build_graph(p, spec);
    const Matrix central = forward(params, cfg, x, p, attention_mask(cfg, p, graph));
    MessageStore store(n);
    for (int r = 0; r <= max_finite_eccentricity(graph); ++r) store.step(graph, 1.0, x, p);
    store.refresh_self(graph, x, p);
    for (int i = 0; i < n; ++i) {
      const LocalView view = gather_local(store, i);
      const Matrix local = forward(params, cfg, view.embeddings, view.positions, attention_mask(cfg, view.positions, view.graph));
      keystone = std::max(keystone, (local.row(0) - central.row(i)).cwiseAbs().maxCoeff());
    }
  }
  out.push_back(finish("central masked forward == per-agent local forward", keystone, 1e-9));
  return out;
}

std::vector<CheckResult> gradients_suite() {
  std::vector<CheckResult> out;
  Rng rng(202);
  for (PosEncKind kind : {PosEncKind::rope_geometric, PosEncKind::rope_linear, PosEncKind::ape_geometric,
                          PosEncKind::ape_linear, PosEncKind::mlp}) {
    MastConfig cfg = small_config(kind, 2, 2, 8);
    cfg.obs_dim = 6;
    cfg.u_max = 1e6;
    cfg.base_wavelength = 100.0;
    ModelParams params = init_params(cfg, rng);
    const Matrix obs = random_matrix(rng, 4, cfg.obs_dim, -1.0, 1.0);
    const Matrix pos = random_matrix(rng, 4, 2, 0.0, 100.0);
    const Matrix target = random_matrix(rng, 4, 2, -1.0, 1.0);
    const MaskMatrix mask = window_mask(pos, kUnboundedRadius);

    auto loss_of = [&](const ModelParams& ps) {
      Tape tape;
      BoundModel m(tape, ps, cfg, false);
      return mse_rows(policy(m, obs, pos, mask), target).value()(0, 0);
    };
    Tape tape;
    BoundModel m(tape, params, cfg, true);
    Var loss = mse_rows(policy(m, obs, pos, mask), target);
    tape.backward(loss);

    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
      const Matrix analytic = tape.grad(m.vars()[k]);
      Matrix& value = params.tensors()[k].value;
      for (Index i = 0; i < value.rows(); ++i) {
        for (Index j = 0; j < value.cols(); ++j) {
          const double saved = value(i, j);
          const double h = 1e-5 * std::max(1.0, std::abs(saved));
          value(i, j) = saved + h;
          const double up = loss_of(params);
          value(i, j) = saved - h;
          const double down = loss_of(params);
          value(i, j) = saved;
          const double numeric = (up - down) / (2.0 * h);
          const double a = analytic(i, j);
          worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6}));
        }
      }
    }
    out.push_back(finish("finite differences (" + to_string(kind) + ")", worst, 1e-4));
  }
  return out;
}

std::vector<CheckResult> oracles_suite() {
  std::vector<CheckResult> out;
  Rng rng(303);

  double hungarian = 0.0;
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(7));
    Matrix cost(n, n);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) cost(i, j) = static_cast<double>(rng.below(1000)) / 8.0;
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    double best = INFINITY;
    do {
      best = std::min(best, assignment_cost(cost, perm));
    } while (std::next_permutation(perm.begin(), perm.end()));
    hungarian = std::max(hungarian, std::abs(assignment_cost(cost, lsap_assign(cost)) - best));
  }
  out.push_back(finish("Hungarian vs exhaustive minimum", hungarian, 0.0));

  double dual = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const int size = 128 + static_cast<int>(rng.below(128));
    const Idf idf = build_idf(rng.next(), size, 8, 20.0);
    const int n = 2 + static_cast<int>(rng.below(15));
    const Matrix p = random_matrix(rng, n, 2, 0.0, size);
    dual = std::max(dual, std::abs(coverage_cost_direct(p, idf) - coverage_cost(p, idf)));
  }
  out.push_back(finish("coverage cost: per-cell min == per-Voronoi sum", dual, 1e-9));

  double naive = 0.0;
  for (PosEncKind kind : {PosEncKind::none, PosEncKind::rope_geometric, PosEncKind::rope_linear,
                          PosEncKind::ape_geometric, PosEncKind::ape_linear, PosEncKind::mlp}) {
    MastConfig cfg = small_config(kind, 2, 2, 8);
    cfg.window_radius = 500.0;
    const ModelParams params = init_params(cfg, rng);
    const Matrix x = random_matrix(rng, 9, cfg.model_dim(), -1.0, 1.0);
    const Matrix p = random_matrix(rng, 9, 2, 0.0, 1000.0);
    const MaskMatrix mask = window_mask(p, cfg.window_radius);
    naive = std::max(naive, max_abs(forward(params, cfg, x, p, mask) - naive_forward(params, cfg, x, p, mask)));
  }
  out.push_back(finish("forward vs plain-loop reference", naive, 1e-9));
  return out;
}

}  // namespace mast::checks
