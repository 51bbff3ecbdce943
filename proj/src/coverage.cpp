#include "mast/coverage.hpp"

#include "mast/dan.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace mast {

Idf::Idf(int size, std::vector<GaussianFeature> features) : size_(size), features_(std::move(features)) {
  if (size < 1) throw std::invalid_argument("Idf: size must be positive");
  values_.assign(static_cast<std::size_t>(size) * static_cast<std::size_t>(size), 0.0);
  for (const auto& f : features_) {
    if (!(f.sigma > 0.0) || !(f.amplitude >= 0.0)) throw std::invalid_argument("Idf: feature needs sigma > 0, amplitude >= 0");
    const double cut = 2.0 * f.sigma;
    const int x0 = std::max(0, static_cast<int>(std::floor(f.center.x() - cut - 0.5)));
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil(f.center.x() + cut - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::floor(f.center.y() - cut - 0.5)));
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil(f.center.y() + cut - 0.5)));
    const double inv = 1.0 / (2.0 * f.sigma * f.sigma);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double dx = x + 0.5 - f.center.x(), dy = y + 0.5 - f.center.y();
        const double d2 = dx * dx + dy * dy;
        if (d2 <= cut * cut) values_[index(x, y)] += f.amplitude * std::exp(-d2 * inv);
      }
    }
  }
  rebuild_support();
}

Idf Idf::from_values(int size, std::vector<double> values) {
  if (size < 1 || values.size() != static_cast<std::size_t>(size) * static_cast<std::size_t>(size)) {
    throw std::invalid_argument("Idf::from_values: need size*size values");
  }
  for (double v : values)
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("Idf::from_values: values must be finite and >= 0");
  Idf idf;
  idf.size_ = size;
  idf.values_ = std::move(values);
  idf.rebuild_support();
  return idf;
}

void Idf::rebuild_support() {
  support_.clear();
  for (std::size_t c = 0; c < values_.size(); ++c)
    if (values_[c] > 0.0) support_.push_back(static_cast<std::uint32_t>(c));
}

Eigen::Vector2d Idf::center(std::size_t cell) const {
  const auto n = static_cast<std::size_t>(size_);
  return {static_cast<double>(cell % n) + 0.5, static_cast<double>(cell / n) + 0.5};
}

Idf build_idf(std::uint64_t seed, int size, int features, double sigma, double amp_lo, double amp_hi) {
  if (features < 0) throw std::invalid_argument("build_idf: feature count must be >= 0");
  Rng rng(seed);
  std::vector<GaussianFeature> fs;
  for (int k = 0; k < features; ++k) {
    GaussianFeature f;
    f.center = {rng.uniform(0.0, size), rng.uniform(0.0, size)};
    f.amplitude = rng.uniform(amp_lo, amp_hi);
    f.sigma = sigma;
    fs.push_back(f);
  }
  return Idf(size, std::move(fs));
}

Idf load_idf(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open IDF file " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") != std::string::npos) lines.push_back(line);
  }
  if (lines.empty()) throw std::runtime_error(path.string() + ": missing header");
  std::istringstream header(lines[0]);
  int size = 0, count = 0;
  if (!(header >> size >> count) || size < 1 || count < 0) throw std::runtime_error(path.string() + ": bad header, expected 'size F'");
  if (static_cast<int>(lines.size()) - 1 != count) {
    throw std::runtime_error(path.string() + ": header declares " + std::to_string(count) + " features, found " +
                             std::to_string(lines.size() - 1));
  }
  std::vector<GaussianFeature> fs;
  for (int k = 0; k < count; ++k) {
    std::istringstream ss(lines[static_cast<std::size_t>(k) + 1]);
    GaussianFeature f;
    double cx = 0, cy = 0;
    if (!(ss >> cx >> cy >> f.amplitude >> f.sigma)) throw std::runtime_error(path.string() + ": bad feature line " + std::to_string(k + 1));
    f.center = {cx, cy};
    fs.push_back(f);
  }
  return Idf(size, std::move(fs));
}

void save_idf(const Idf& idf, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << idf.size() << ' ' << idf.features().size() << '\n';
  for (const auto& f : idf.features()) out << f.center.x() << ' ' << f.center.y() << ' ' << f.amplitude << ' ' << f.sigma << '\n';
}

// ---------------------------------------------------------------------------

Matrix separate_coincident(const Matrix& positions) {
  Matrix p = positions;
  bool moved = false;
  for (Index i = 1; i < p.rows(); ++i) {
    for (;;) {
      bool clash = false;
      for (Index j = 0; j < i; ++j) clash = clash || (p.row(i).array() == p.row(j).array()).all();
      if (!clash) break;
      p(i, 0) += 1e-6;
      moved = true;
    }
  }
  if (moved) std::cerr << "warning: coincident agents separated by 1e-6 m jitter\n";
  return p;
}

namespace {

constexpr int kBlock = 16;

inline double sq_dist(double px, double py, double qx, double qy) {
  const double dx = px - qx, dy = py - qy;
  return dx * dx + dy * dy;
}

// Visits every cell of [x0, x1) x [y0, y1) with its nearest agent among `agents`
// (ties to the earliest entry). Blocks with a single possible owner go to on_block.
template <typename CellFn, typename BlockFn>
void sweep_owners(const Matrix& p, const std::vector<int>& agents, int x0, int y0, int x1, int y1, CellFn&& on_cell,
                  BlockFn&& on_block) {
  std::vector<double> dmin(agents.size());
  std::vector<int> cand;
  for (int by = y0; by < y1; by += kBlock) {
    const int ey = std::min(by + kBlock, y1);
    for (int bx = x0; bx < x1; bx += kBlock) {
      const int ex = std::min(bx + kBlock, x1);
      const double lox = bx + 0.5, hix = ex - 0.5, loy = by + 0.5, hiy = ey - 0.5;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < agents.size(); ++a) {
        const double px = p(agents[a], 0), py = p(agents[a], 1);
        const double cx = std::clamp(px, lox, hix), cy = std::clamp(py, loy, hiy);
        dmin[a] = sq_dist(px, py, cx, cy);
        const double fx = std::max(std::abs(px - lox), std::abs(px - hix));
        const double fy = std::max(std::abs(py - loy), std::abs(py - hiy));
        best = std::min(best, fx * fx + fy * fy);
      }
      const double bound = best * (1.0 + 1e-9) + 1e-9;
      cand.clear();
      for (std::size_t a = 0; a < agents.size(); ++a)
        if (dmin[a] <= bound) cand.push_back(agents[a]);
      if (cand.size() == 1) {
        on_block(bx, by, ex, ey, cand[0]);
        continue;
      }
      for (int y = by; y < ey; ++y) {
        for (int x = bx; x < ex; ++x) {
          const double qx = x + 0.5, qy = y + 0.5;
          int owner = cand[0];
          double d = sq_dist(p(owner, 0), p(owner, 1), qx, qy);
          for (std::size_t c = 1; c < cand.size(); ++c) {
            const double dc = sq_dist(p(cand[c], 0), p(cand[c], 1), qx, qy);
            if (dc < d) {
              d = dc;
              owner = cand[c];
            }
          }
          on_cell(x, y, owner);
        }
      }
    }
  }
}

std::vector<int> all_agents(const Matrix& p) {
  std::vector<int> a(static_cast<std::size_t>(p.rows()));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<int>(i);
  return a;
}

std::vector<int> owners_all(const Matrix& p, int size) {
  std::vector<int> owner(static_cast<std::size_t>(size) * static_cast<std::size_t>(size), -1);
  const auto n = static_cast<std::size_t>(size);
  sweep_owners(
      p, all_agents(p), 0, 0, size, size, [&](int x, int y, int o) { owner[static_cast<std::size_t>(y) * n + static_cast<std::size_t>(x)] = o; },
      [&](int x0, int y0, int x1, int y1, int o) {
        for (int y = y0; y < y1; ++y)
          std::fill(owner.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(y) * n + static_cast<std::size_t>(x0)),
                    owner.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(y) * n + static_cast<std::size_t>(x1)), o);
      });
  return owner;
}

void check_positions(const Matrix& positions) {
  if (positions.cols() != 2 || positions.rows() < 1) throw ShapeError("coverage: positions must be N x 2 with N >= 1, got " + shape_string(positions));
}

}  // namespace

std::vector<int> voronoi_cells(const Matrix& positions, int size) {
  check_positions(positions);
  return owners_all(separate_coincident(positions), size);
}

double coverage_cost_direct(const Matrix& positions, const Idf& idf) {
  check_positions(positions);
  const Matrix p = separate_coincident(positions);
  ExactSum total;
  for (std::uint32_t cell : idf.support()) {
    const Eigen::Vector2d q = idf.center(cell);
    double d = sq_dist(p(0, 0), p(0, 1), q.x(), q.y());
    for (Index i = 1; i < p.rows(); ++i) d = std::min(d, sq_dist(p(i, 0), p(i, 1), q.x(), q.y()));
    total.add(d * idf.at(cell));
  }
  return total.value();
}

double coverage_cost(const Matrix& positions, const Idf& idf) {
  check_positions(positions);
  const Matrix p = separate_coincident(positions);
  const auto owner = owners_all(p, idf.size());
  std::vector<ExactSum> per_agent(static_cast<std::size_t>(p.rows()));
  for (std::uint32_t cell : idf.support()) {
    const int i = owner[cell];
    const Eigen::Vector2d q = idf.center(cell);
    per_agent[static_cast<std::size_t>(i)].add(sq_dist(p(i, 0), p(i, 1), q.x(), q.y()) * idf.at(cell));
  }
  ExactSum total;
  for (const auto& s : per_agent) total.add(s);
  return total.value();
}

CvtVariant parse_cvt_variant(const std::string& name) {
  if (name == "clairvoyant" || name == "cvt-clairvoyant") return CvtVariant::clairvoyant;
  if (name == "centralized" || name == "cvt-centralized") return CvtVariant::centralized;
  if (name == "decentralized" || name == "cvt-decentralized") return CvtVariant::decentralized;
  throw std::invalid_argument("unknown CVT variant '" + name + "'");
}

std::string to_string(CvtVariant v) {
  switch (v) {
    case CvtVariant::clairvoyant: return "cvt-clairvoyant";
    case CvtVariant::centralized: return "cvt-centralized";
    case CvtVariant::decentralized: return "cvt-decentralized";
  }
  return "?";
}

// ---------------------------------------------------------------------------

namespace {

struct CellMoments {
  double mass = 0, mx = 0, my = 0;
  double count = 0, gx = 0, gy = 0;

  void cell(double w, double x, double y) {
    mass += w;
    mx += w * x;
    my += w * y;
    count += 1;
    gx += x;
    gy += y;
  }

  Eigen::Vector2d centroid() const {
    if (mass > 0.0) return {mx / mass, my / mass};
    return {gx / count, gy / count};
  }
};

// Moments of cells in [x0,x1) x [y0,y1) owned by each agent in `agents`; weight(x, y) gives the mass density.
template <typename Weight>
std::vector<CellMoments> moments(const Matrix& p, const std::vector<int>& agents, int x0, int y0, int x1, int y1,
                                 Weight&& weight) {
  std::vector<CellMoments> m(static_cast<std::size_t>(p.rows()));
  sweep_owners(
      p, agents, x0, y0, x1, y1,
      [&](int x, int y, int o) { m[static_cast<std::size_t>(o)].cell(weight(x, y), x + 0.5, y + 0.5); },
      [&](int bx0, int by0, int bx1, int by1, int o) {
        CellMoments& c = m[static_cast<std::size_t>(o)];
        for (int y = by0; y < by1; ++y) {
          for (int x = bx0; x < bx1; ++x) {
            const double w = weight(x, y);
            if (w != 0.0) {
              c.mass += w;
              c.mx += w * (x + 0.5);
              c.my += w * (y + 0.5);
            }
          }
        }
        const double nx = bx1 - bx0, ny = by1 - by0;
        c.count += nx * ny;
        c.gx += ny * (0.5 * (bx0 + bx1) * nx);
        c.gy += nx * (0.5 * (by0 + by1) * ny);
      });
  return m;
}

}  // namespace

Matrix voronoi_centroids(const Matrix& positions, int size, const std::vector<double>& weights) {
  check_positions(positions);
  if (weights.size() != static_cast<std::size_t>(size) * static_cast<std::size_t>(size)) throw ShapeError("voronoi_centroids: weight grid size mismatch");
  const Matrix p = separate_coincident(positions);
  const auto n = static_cast<std::size_t>(size);
  const auto m = moments(p, all_agents(p), 0, 0, size, size,
                         [&](int x, int y) { return weights[static_cast<std::size_t>(y) * n + static_cast<std::size_t>(x)]; });
  Matrix c(p.rows(), 2);
  for (Index i = 0; i < p.rows(); ++i) c.row(i) = m[static_cast<std::size_t>(i)].centroid().transpose();
  return c;
}

std::vector<int> coverage_neighbors(const Matrix& positions, int agent, double radius) {
  std::vector<int> out;
  for (Index j = 0; j < positions.rows(); ++j)
    if (j != agent && (positions.row(j) - positions.row(agent)).norm() < radius) out.push_back(static_cast<int>(j));
  return out;
}

CoverageState init_coverage(std::shared_ptr<const Idf> idf, const Matrix& positions, const CoverageParams& params) {
  check_positions(positions);
  CoverageState s;
  s.params = params;
  s.params.env_size = idf->size();
  s.idf = std::move(idf);
  s.positions = positions;
  s.previous_u = Matrix::Zero(positions.rows(), 2);
  s.explored_by.assign(static_cast<std::size_t>(positions.rows()), std::vector<std::uint8_t>(s.idf->cells(), 0));
  s.explored.assign(s.idf->cells(), 0);
  sense(s);
  return s;
}

CoverageState init_coverage(const CoverageParams& params, std::uint64_t seed) {
  auto idf = std::make_shared<const Idf>(build_idf(splitmix64(seed), params.env_size, params.features, params.sigma));
  Rng rng = Rng::stream(seed, 1);
  Matrix p(params.agents, 2);
  for (int i = 0; i < params.agents; ++i) {
    p(i, 0) = rng.uniform(0.0, params.env_size);
    p(i, 1) = rng.uniform(0.0, params.env_size);
  }
  return init_coverage(std::move(idf), p, params);
}

void sense(CoverageState& s) {
  const int size = s.idf->size();
  const double half = 0.5 * s.params.fov;
  const auto n = static_cast<std::size_t>(size);
  for (int i = 0; i < s.size(); ++i) {
    const double px = s.positions(i, 0), py = s.positions(i, 1);
    const int x0 = std::max(0, static_cast<int>(std::ceil(px - half - 0.5)));
    const int x1 = std::min(size - 1, static_cast<int>(std::floor(px + half - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(py - half - 0.5)));
    const int y1 = std::min(size - 1, static_cast<int>(std::floor(py + half - 0.5)));
    auto& mine = s.explored_by[static_cast<std::size_t>(i)];
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        if (std::abs(x + 0.5 - px) >= half || std::abs(y + 0.5 - py) >= half) continue;
        const std::size_t c = static_cast<std::size_t>(y) * n + static_cast<std::size_t>(x);
        mine[c] = 1;
        s.explored[c] = 1;
      }
    }
  }
}

void step(CoverageState& s, const Matrix& velocities) {
  if (velocities.rows() != s.size() || velocities.cols() != 2) throw ShapeError("coverage step: velocities " + shape_string(velocities));
  for (int i = 0; i < s.size(); ++i) {
    if (!(velocities.row(i).norm() <= s.params.u_max * (1.0 + 1e-12))) {
      throw std::domain_error("coverage step: agent " + std::to_string(i) + " exceeds u_max");
    }
  }
  s.positions += velocities * s.params.dt;
  s.previous_u = velocities;
  s.t += s.params.dt;
  sense(s);
}

Matrix cvt_policy(const CoverageState& s, CvtVariant variant) {
  const int size = s.idf->size();
  const auto n = static_cast<std::size_t>(size);
  const Matrix p = separate_coincident(s.positions);
  const auto& phi = s.idf->values();
  const double prior = s.params.exploration_prior;
  Matrix targets(s.size(), 2);
  if (variant == CvtVariant::clairvoyant || variant == CvtVariant::centralized) {
    std::vector<CellMoments> m;
    if (variant == CvtVariant::clairvoyant) {
      m = moments(p, all_agents(p), 0, 0, size, size,
                  [&](int x, int y) { return phi[static_cast<std::size_t>(y) * n + static_cast<std::size_t>(x)]; });
    } else {
      m = moments(p, all_agents(p), 0, 0, size, size, [&](int x, int y) {
        const std::size_t c = static_cast<std::size_t>(y) * n + static_cast<std::size_t>(x);
        return s.explored[c] ? phi[c] : prior;
      });
    }
    for (int i = 0; i < s.size(); ++i) targets.row(i) = m[static_cast<std::size_t>(i)].centroid().transpose();
  } else {
    const int half = s.params.local_map / 2;
    for (int i = 0; i < s.size(); ++i) {
      std::vector<int> agents = coverage_neighbors(p, i, s.params.comm_radius);
      agents.push_back(i);
      std::sort(agents.begin(), agents.end());
      const auto& mine = s.explored_by[static_cast<std::size_t>(i)];
      const int cx = static_cast<int>(std::floor(p(i, 0))), cy = static_cast<int>(std::floor(p(i, 1)));
      const int x0 = std::clamp(cx - half, 0, size), x1 = std::clamp(cx + half, 0, size);
      const int y0 = std::clamp(cy - half, 0, size), y1 = std::clamp(cy + half, 0, size);
      if (x0 >= x1 || y0 >= y1) {
        targets.row(i) = p.row(i);
        continue;
      }
      const auto m = moments(p, agents, x0, y0, x1, y1, [&](int x, int y) {
        const std::size_t c = static_cast<std::size_t>(y) * n + static_cast<std::size_t>(x);
        return mine[c] ? phi[c] : prior;
      });
      const CellMoments& own = m[static_cast<std::size_t>(i)];
      targets.row(i) = own.count > 0 ? Eigen::RowVector2d(own.centroid().transpose()) : Eigen::RowVector2d(p.row(i));
    }
  }
  Matrix u(s.size(), 2);
  for (int i = 0; i < s.size(); ++i)
    u.row(i) = capped_velocity(s.positions.row(i).transpose(), targets.row(i).transpose(), s.params.u_max, s.params.dt).transpose();
  return u;
}

// ---------------------------------------------------------------------------

int coverage_obs_dim(const CoverageParams& params) { return kCoverageChannels * params.obs_grid * params.obs_grid; }

Vector observe_coverage(const CoverageState& s, int agent) {
  const int g = s.params.obs_grid;
  const int map = s.params.local_map;
  if (g < 1 || map % g != 0) throw std::invalid_argument("observe_coverage: local_map must be a multiple of obs_grid");
  const int factor = map / g;
  const int size = s.idf->size();
  const auto n = static_cast<std::size_t>(size);
  const auto& mine = s.explored_by[static_cast<std::size_t>(agent)];
  const auto& phi = s.idf->values();
  const double px = s.positions(agent, 0), py = s.positions(agent, 1);
  const int ox = static_cast<int>(std::floor(px)) - map / 2, oy = static_cast<int>(std::floor(py)) - map / 2;
  const Index plane = static_cast<Index>(g) * g;
  Vector obs = Vector::Zero(kCoverageChannels * plane);
  for (int r = 0; r < g; ++r) {
    for (int c = 0; c < g; ++c) {
      double sum = 0.0;
      bool outside = false;
      for (int b = 0; b < factor; ++b) {
        const int y = oy + r * factor + b;
        for (int a = 0; a < factor; ++a) {
          const int x = ox + c * factor + a;
          if (x < 0 || y < 0 || x >= size || y >= size) {
            outside = true;
            continue;
          }
          const std::size_t cell = static_cast<std::size_t>(y) * n + static_cast<std::size_t>(x);
          if (mine[cell]) sum += phi[cell];
        }
      }
      const Index k = static_cast<Index>(r) * g + c;
      obs(k) = sum / (factor * factor);
      obs(plane + k) = outside ? 1.0 : 0.0;
    }
  }
  const double rc = s.params.comm_radius;
  const double bin = 2.0 * rc / g;
  const auto nbrs = coverage_neighbors(s.positions, agent, rc);
  for (auto it = nbrs.rbegin(); it != nbrs.rend(); ++it) {
    const double dx = s.positions(*it, 0) - px, dy = s.positions(*it, 1) - py;
    const int c = std::clamp(static_cast<int>(std::floor((dx + rc) / bin)), 0, g - 1);
    const int r = std::clamp(static_cast<int>(std::floor((dy + rc) / bin)), 0, g - 1);
    const Index k = static_cast<Index>(r) * g + c;
    obs(2 * plane + k) = dx / rc;
    obs(3 * plane + k) = dy / rc;
  }
  return obs;
}

Matrix observe_coverage_all(const CoverageState& s) {
  Matrix obs(s.size(), coverage_obs_dim(s.params));
  for (int i = 0; i < s.size(); ++i) obs.row(i) = observe_coverage(s, i).transpose();
  return obs;
}

}  // namespace mast
