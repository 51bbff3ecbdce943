#include "mast/dan.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace mast {

std::string Scenario::name() const {
  switch (kind) {
    case ScenarioKind::clusters: return "clusters";
    case ScenarioKind::clusters_k: return "clusters-" + std::to_string(rho);
    case ScenarioKind::circle: return "circle";
    case ScenarioKind::two_lines: return "two-lines";
    case ScenarioKind::text: return "text";
    case ScenarioKind::file: return "file:" + file.string();
  }
  return "?";
}

Scenario parse_scenario(const std::string& name) {
  Scenario s;
  if (name == "clusters") return s;
  if (name == "circle") { s.kind = ScenarioKind::circle; return s; }
  if (name == "two-lines") { s.kind = ScenarioKind::two_lines; return s; }
  if (name == "text") { s.kind = ScenarioKind::text; return s; }
  if (name.starts_with("file:") && name.size() > 5) {
    s.kind = ScenarioKind::file;
    s.file = name.substr(5);
    return s;
  }
  if (name.starts_with("clusters-")) {
    const std::string k = name.substr(9);
    std::size_t used = 0;
    int rho = 0;
    try {
      rho = std::stoi(k, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == k.size() && rho >= 1) {
      s.kind = ScenarioKind::clusters_k;
      s.rho = rho;
      return s;
    }
  }
  throw ScenarioError("unknown scenario '" + name + "'");
}

double cluster_radius(double min_separation, int rho) { return 5.0 * min_separation * std::sqrt(static_cast<double>(rho)); }

namespace {

using Vec2 = Eigen::Vector2d;

class RejectionBudget {
public:
  void spend() {
    if (++used_ > kMaxRejections) {
      throw ScenarioError("scenario sampling exceeded " + std::to_string(kMaxRejections) +
                          " attempts; the requested density is too high");
    }
  }

private:
  long used_ = 0;
};

bool clear_of(const Matrix& pts, Index count, const Vec2& q, double min_dist) {
  for (Index j = 0; j < count; ++j)
    if ((pts.row(j).transpose() - q).norm() < min_dist) return false;
  return true;
}

Vec2 uniform_in_disk(const Vec2& center, double radius, Rng& rng) {
  const double r = radius * std::sqrt(rng.uniform());
  const double a = 2.0 * std::numbers::pi * rng.uniform();
  return center + r * Vec2(std::cos(a), std::sin(a));
}

template <typename Sampler>
Matrix sample_separated(int n, double min_dist, Rng& rng, RejectionBudget& budget, Sampler&& sample) {
  Matrix pts(n, 2);
  for (int i = 0; i < n; ++i) {
    Vec2 q = sample(i);
    while (!clear_of(pts, i, q, min_dist)) {
      budget.spend();
      q = sample(i);
    }
    pts.row(i) = q.transpose();
  }
  (void)rng;
  return pts;
}

Matrix clusters_with_budget(int n, int rho, const DanParams& params, Rng& rng, RejectionBudget& budget) {
  if (rho < 1) throw std::invalid_argument("cluster size must be >= 1");
  const double r = cluster_radius(params.min_separation, rho);
  const int n_clusters = (n + rho - 1) / rho;
  const double w = params.width;
  Matrix centers = sample_separated(n_clusters, 2.0 * r, rng, budget,
                                    [&](int) { return Vec2(rng.uniform(0.0, w), rng.uniform(0.0, w)); });
  return sample_separated(n, params.min_separation, rng, budget, [&](int i) {
    return uniform_in_disk(centers.row(i / rho).transpose(), r, rng);
  });
}

Matrix uniform_square(int n, const DanParams& params, Rng& rng, RejectionBudget& budget) {
  const double w = params.width;
  return sample_separated(n, params.min_separation, rng, budget,
                          [&](int) { return Vec2(rng.uniform(0.0, w), rng.uniform(0.0, w)); });
}

// 5x7 glyphs for "MAST", one string per row.
constexpr std::array<std::array<const char*, 7>, 4> kGlyphs{{
    {"10001", "11011", "10101", "10001", "10001", "10001", "10001"},
    {"01110", "10001", "10001", "11111", "10001", "10001", "10001"},
    {"01111", "10000", "10000", "01110", "00001", "00001", "11110"},
    {"11111", "00100", "00100", "00100", "00100", "00100", "00100"},
}};

Matrix text_goals(int n, const DanParams& params, Rng& rng, RejectionBudget& budget) {
  std::vector<Vec2> cells;  // lower-left corner in glyph units, y up
  for (std::size_t g = 0; g < kGlyphs.size(); ++g)
    for (int row = 0; row < 7; ++row)
      for (int col = 0; col < 5; ++col)
        if (kGlyphs[g][static_cast<std::size_t>(row)][col] == '1')
          cells.emplace_back(static_cast<double>(g) * 6.0 + col, 6.0 - row);
  const double w = params.width;
  const double cell = 0.75 * w / 23.0;
  const Vec2 origin(w / 8.0, w / 2.0 - 3.5 * cell);
  return sample_separated(n, params.min_separation, rng, budget, [&](int) {
    const Vec2& c = cells[rng.below(cells.size())];
    return Vec2(origin + cell * (c + Vec2(rng.uniform(), rng.uniform())));
  });
}

void read_file_scenario(const std::filesystem::path& path, int n, DanWorld& world) {
  std::ifstream in(path);
  if (!in) throw ScenarioError("cannot open scenario file " + path.string());
  std::vector<Vec2> agents, goals;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag)) continue;
    double x = 0, y = 0;
    std::string extra;
    if (!(ss >> x >> y) || (ss >> extra) || (tag != "agent" && tag != "goal")) {
      throw ScenarioError(path.string() + ":" + std::to_string(lineno) + ": expected 'agent X Y' or 'goal X Y'");
    }
    (tag == "agent" ? agents : goals).emplace_back(x, y);
  }
  if (agents.size() != goals.size()) {
    throw ScenarioError(path.string() + ": " + std::to_string(agents.size()) + " agents but " +
                        std::to_string(goals.size()) + " goals");
  }
  if (n > 0 && static_cast<int>(agents.size()) != n) {
    throw ScenarioError(path.string() + ": file holds " + std::to_string(agents.size()) + " agents, " +
                        std::to_string(n) + " requested");
  }
  world.agents.resize(static_cast<Index>(agents.size()), 2);
  world.goals.resize(static_cast<Index>(goals.size()), 2);
  for (std::size_t i = 0; i < agents.size(); ++i) {
    world.agents.row(static_cast<Index>(i)) = agents[i].transpose();
    world.goals.row(static_cast<Index>(i)) = goals[i].transpose();
  }
}

}  // namespace

Matrix sample_clusters(int n, int rho, const DanParams& params, Rng& rng) {
  RejectionBudget budget;
  return clusters_with_budget(n, rho, params, rng, budget);
}

DanWorld init_scenario(const Scenario& scenario, int n, const DanParams& params, Rng& rng) {
  if (n < 1 && scenario.kind != ScenarioKind::file) throw std::invalid_argument("init_scenario: need at least one agent");
  DanWorld world;
  world.params = params;
  RejectionBudget budget;
  const double w = params.width;
  switch (scenario.kind) {
    case ScenarioKind::clusters: {
      constexpr std::array<int, 3> sizes{1, 5, 10};
      const int rho_agent = sizes[rng.below(3)];
      const int rho_goal = sizes[rng.below(3)];
      world.agents = clusters_with_budget(n, rho_agent, params, rng, budget);
      world.goals = clusters_with_budget(n, rho_goal, params, rng, budget);
      break;
    }
    case ScenarioKind::clusters_k:
      world.agents = clusters_with_budget(n, scenario.rho, params, rng, budget);
      world.goals = clusters_with_budget(n, scenario.rho, params, rng, budget);
      break;
    case ScenarioKind::circle: {
      const Vec2 center(w / 2.0, w / 2.0);
      const double r0 = 3.0 * w / 16.0, r1 = 5.0 * w / 16.0;
      world.agents = sample_separated(n, params.min_separation, rng, budget, [&](int) {
        const double r = std::sqrt(rng.uniform(r0 * r0, r1 * r1));
        const double a = 2.0 * std::numbers::pi * rng.uniform();
        return Vec2(center + r * Vec2(std::cos(a), std::sin(a)));
      });
      world.goals = uniform_square(n, params, rng, budget);
      break;
    }
    case ScenarioKind::two_lines:
      world.agents = sample_separated(n, params.min_separation, rng, budget, [&](int) {
        return Vec2(rng.uniform(w / 8.0, w / 4.0), rng.uniform(0.0, w));
      });
      world.goals = sample_separated(n, params.min_separation, rng, budget, [&](int) {
        return Vec2(rng.uniform(3.0 * w / 4.0, 7.0 * w / 8.0), rng.uniform(0.0, w));
      });
      break;
    case ScenarioKind::text:
      world.agents = uniform_square(n, params, rng, budget);
      world.goals = text_goals(n, params, rng, budget);
      break;
    case ScenarioKind::file:
      read_file_scenario(scenario.file, n, world);
      break;
  }
  world.previous_u = Matrix::Zero(world.agents.rows(), 2);
  return world;
}

DanWorld init_scenario(const Scenario& scenario, int n, const DanParams& params, std::uint64_t seed) {
  Rng rng(seed);
  return init_scenario(scenario, n, params, rng);
}

// ---------------------------------------------------------------------------

std::vector<int> nearest_indices(const Matrix& points, const Eigen::Vector2d& from, int k, int exclude) {
  std::vector<std::pair<double, int>> d;
  d.reserve(static_cast<std::size_t>(points.rows()));
  for (Index j = 0; j < points.rows(); ++j) {
    if (j == exclude) continue;
    d.emplace_back((points.row(j).transpose() - from).squaredNorm(), static_cast<int>(j));
  }
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)), d.size());
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(take), d.end());
  std::vector<int> out;
  for (std::size_t i = 0; i < take; ++i) out.push_back(d[i].second);
  return out;
}

Vector observe(const DanWorld& world, int agent) {
  if (world.size() < kObservedNeighbors + 1) {
    throw std::invalid_argument("observe: need at least " + std::to_string(kObservedNeighbors + 1) + " agents, have " +
                                std::to_string(world.size()));
  }
  if (world.goals.rows() < kObservedNeighbors) throw std::invalid_argument("observe: fewer than 3 goals");
  const Eigen::Vector2d p = world.agents.row(agent).transpose();
  Vector o(kDanObsDim);
  o.head<2>() = world.previous_u.row(agent).transpose();
  Index at = 2;
  for (int j : nearest_indices(world.agents, p, kObservedNeighbors, agent)) {
    o.segment<2>(at) = world.agents.row(j).transpose() - p;
    at += 2;
  }
  for (int j : nearest_indices(world.goals, p, kObservedNeighbors)) {
    o.segment<2>(at) = world.goals.row(j).transpose() - p;
    at += 2;
  }
  return o;
}

Matrix observe_all(const DanWorld& world) {
  Matrix obs(world.size(), kDanObsDim);
  for (int i = 0; i < world.size(); ++i) obs.row(i) = observe(world, i).transpose();
  return obs;
}

double success_rate(const Matrix& agents, const Matrix& goals, double goal_radius) {
  if (goals.rows() == 0) return 0.0;
  Index hit = 0;
  for (Index g = 0; g < goals.rows(); ++g) {
    for (Index a = 0; a < agents.rows(); ++a) {
      if ((agents.row(a) - goals.row(g)).norm() < goal_radius) {
        ++hit;
        break;
      }
    }
  }
  return static_cast<double>(hit) / static_cast<double>(goals.rows());
}

double success_rate(const DanWorld& world) { return success_rate(world.agents, world.goals, world.params.goal_radius); }

Matrix squared_distances(const Matrix& agents, const Matrix& goals) {
  Matrix d(agents.rows(), goals.rows());
  for (Index i = 0; i < agents.rows(); ++i)
    for (Index j = 0; j < goals.rows(); ++j) d(i, j) = (agents.row(i) - goals.row(j)).squaredNorm();
  return d;
}

std::vector<int> lsap_assign(const Matrix& cost) {
  if (cost.rows() != cost.cols()) throw ShapeError("lsap_assign: cost must be square, got " + shape_string(cost));
  if (!cost.allFinite()) throw std::invalid_argument("lsap_assign: costs must be finite");
  const int n = static_cast<int>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  // Shortest augmenting paths with potentials; rows and columns are 1-based, column 0 is a sentinel.
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> match(static_cast<std::size_t>(n) + 1, 0), way(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = match[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assignment(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j) assignment[static_cast<std::size_t>(match[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return assignment;
}

double assignment_cost(const Matrix& cost, const std::vector<int>& assignment) {
  double total = 0.0;
  for (std::size_t i = 0; i < assignment.size(); ++i)
    if (assignment[i] >= 0) total += cost(static_cast<Index>(i), assignment[i]);
  return total;
}

Eigen::Vector2d capped_velocity(const Eigen::Vector2d& from, const Eigen::Vector2d& target, double u_max, double dt) {
  const Eigen::Vector2d delta = target - from;
  const double dist = delta.norm();
  if (dist == 0.0) return Eigen::Vector2d::Zero();
  if (dist <= u_max * dt) return delta / dt;
  return delta * (u_max / dist);
}

Matrix lsap_policy(const DanWorld& world) {
  const auto sigma = lsap_assign(squared_distances(world.agents, world.goals));
  Matrix u(world.size(), 2);
  for (int i = 0; i < world.size(); ++i) {
    u.row(i) = capped_velocity(world.agents.row(i).transpose(), world.goals.row(sigma[static_cast<std::size_t>(i)]).transpose(),
                               world.params.u_max, world.params.dt)
                   .transpose();
  }
  return u;
}

namespace {

inline constexpr double kPadCost = 1e9;

std::vector<std::vector<int>> nearest_goal_sets(const DanWorld& world) {
  std::vector<std::vector<int>> sets(static_cast<std::size_t>(world.size()));
  for (int i = 0; i < world.size(); ++i)
    sets[static_cast<std::size_t>(i)] = nearest_indices(world.goals, world.agents.row(i).transpose(), kObservedNeighbors);
  return sets;
}

// Rectangular LSAP over the given agent and goal subsets; returns the goal (global index) for `self`.
int local_choice(const DanWorld& world, const std::vector<int>& agents, const std::vector<int>& goals, int self) {
  if (goals.empty()) return -1;
  const std::size_t n = std::max(agents.size(), goals.size());
  Matrix cost = Matrix::Constant(static_cast<Index>(n), static_cast<Index>(n), kPadCost);
  for (std::size_t a = 0; a < agents.size(); ++a)
    for (std::size_t g = 0; g < goals.size(); ++g)
      cost(static_cast<Index>(a), static_cast<Index>(g)) =
          (world.agents.row(agents[a]) - world.goals.row(goals[g])).squaredNorm();
  const auto sigma = lsap_assign(cost);
  const auto row = static_cast<std::size_t>(std::find(agents.begin(), agents.end(), self) - agents.begin());
  const int col = sigma[row];
  return static_cast<std::size_t>(col) < goals.size() ? goals[static_cast<std::size_t>(col)] : -1;
}

}  // namespace

std::vector<int> observed_goals(const DanWorld& world) {
  std::vector<int> all;
  for (const auto& s : nearest_goal_sets(world)) all.insert(all.end(), s.begin(), s.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  return all;
}

std::vector<int> dhba_assignment(const DanWorld& world, const CommGraph& graph, int hops) {
  if (hops < 0) throw std::invalid_argument("dhba: hops must be non-negative");
  if (graph.size() != world.size()) throw ShapeError("dhba: graph size differs from agent count");
  const auto seen = nearest_goal_sets(world);
  std::vector<int> choice(static_cast<std::size_t>(world.size()), -1);
  for (int i = 0; i < world.size(); ++i) {
    const std::vector<int> agents = in_neighborhood(graph, i, hops);
    std::vector<int> goals;
    for (int a : agents) goals.insert(goals.end(), seen[static_cast<std::size_t>(a)].begin(), seen[static_cast<std::size_t>(a)].end());
    std::sort(goals.begin(), goals.end());
    goals.erase(std::unique(goals.begin(), goals.end()), goals.end());
    choice[static_cast<std::size_t>(i)] = local_choice(world, agents, goals, i);
  }
  return choice;
}

Matrix dhba_policy(const DanWorld& world, const CommGraph& graph, int hops) {
  const auto choice = dhba_assignment(world, graph, hops);
  Matrix u = Matrix::Zero(world.size(), 2);
  for (int i = 0; i < world.size(); ++i) {
    const int g = choice[static_cast<std::size_t>(i)];
    if (g < 0) continue;
    u.row(i) = capped_velocity(world.agents.row(i).transpose(), world.goals.row(g).transpose(), world.params.u_max,
                               world.params.dt)
                   .transpose();
  }
  return u;
}

std::vector<int> resolve_claims(const Matrix& cost, const std::vector<int>& claims) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n || static_cast<int>(claims.size()) != n) throw ShapeError("resolve_claims: need square cost and one claim per row");
  std::vector<int> owner(static_cast<std::size_t>(n), -1);
  for (int i = 0; i < n; ++i) {
    const int g = claims[static_cast<std::size_t>(i)];
    if (g < 0) continue;
    int& o = owner[static_cast<std::size_t>(g)];
    if (o < 0 || cost(i, g) < cost(o, g)) o = i;
  }
  std::vector<int> result(static_cast<std::size_t>(n), -1);
  for (int g = 0; g < n; ++g)
    if (owner[static_cast<std::size_t>(g)] >= 0) result[static_cast<std::size_t>(owner[static_cast<std::size_t>(g)])] = g;
  std::vector<int> free_rows, free_cols;
  for (int i = 0; i < n; ++i)
    if (result[static_cast<std::size_t>(i)] < 0) free_rows.push_back(i);
  for (int g = 0; g < n; ++g)
    if (owner[static_cast<std::size_t>(g)] < 0) free_cols.push_back(g);
  if (!free_rows.empty()) {
    Matrix sub(static_cast<Index>(free_rows.size()), static_cast<Index>(free_cols.size()));
    for (std::size_t a = 0; a < free_rows.size(); ++a)
      for (std::size_t b = 0; b < free_cols.size(); ++b)
        sub(static_cast<Index>(a), static_cast<Index>(b)) = cost(free_rows[a], free_cols[b]);
    const auto sigma = lsap_assign(sub);
    for (std::size_t a = 0; a < free_rows.size(); ++a)
      result[static_cast<std::size_t>(free_rows[a])] = free_cols[static_cast<std::size_t>(sigma[a])];
  }
  return result;
}

double dhba_cost(const DanWorld& world, const CommGraph& graph, int hops) {
  const Matrix cost = squared_distances(world.agents, world.goals);
  return assignment_cost(cost, resolve_claims(cost, dhba_assignment(world, graph, hops)));
}

void step(DanWorld& world, const Matrix& velocities) {
  if (velocities.rows() != world.size() || velocities.cols() != 2) {
    throw ShapeError("step: velocities " + shape_string(velocities) + " for " + std::to_string(world.size()) + " agents");
  }
  const double limit = world.params.u_max * (1.0 + 1e-12);
  for (int i = 0; i < world.size(); ++i) {
    const double speed = velocities.row(i).norm();
    if (!(speed <= limit)) {
      throw std::domain_error("step: agent " + std::to_string(i) + " speed " + std::to_string(speed) +
                              " exceeds u_max " + std::to_string(world.params.u_max));
    }
  }
  world.agents += velocities * world.params.dt;
  world.previous_u = velocities;
  world.t += world.params.dt;
}

}  // namespace mast
