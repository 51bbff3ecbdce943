#pragma once

// Decentralized assignment and navigation: N agents with single-integrator
// dynamics must cover N goals. Scenario generators, observations, the success
// metric and the LSAP/DHBA baselines.

#include "mast/comm.hpp"
#include "mast/numkernel.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace mast {

struct DanParams {
  double dt = 1.0;
  double u_max = 5.0;
  double goal_radius = 5.0;     // R_g
  double min_separation = 5.0;  // R_min
  double width = 1000.0;        // W
  double robot_radius = 2.5;    // stored, not used by the dynamics
  int steps = 200;
};

struct DanWorld {
  Matrix agents;       // N x 2
  Matrix goals;        // N x 2
  Matrix previous_u;   // N x 2, last applied velocities
  double t = 0.0;
  DanParams params;

  int size() const { return static_cast<int>(agents.rows()); }
};

enum class ScenarioKind {
  clusters,      // training mix: rho_agent, rho_goal drawn from {1, 5, 10} per episode
  clusters_k,    // rho_agent = rho_goal = k
  circle,
  two_lines,
  text,
  file,
};

struct Scenario {
  ScenarioKind kind = ScenarioKind::clusters;
  int rho = 1;  // clusters_k only
  std::filesystem::path file;

  std::string name() const;
};

/// "clusters", "clusters-K", "circle", "two-lines", "text", "file:PATH".
Scenario parse_scenario(const std::string& name);

class ScenarioError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline constexpr long kMaxRejections = 100000;

/// Cluster radius 5 * R_min * sqrt(rho).
double cluster_radius(double min_separation, int rho);

/// Points in clusters of `rho`; the last cluster is truncated when n is not a multiple of rho.
Matrix sample_clusters(int n, int rho, const DanParams& params, Rng& rng);

DanWorld init_scenario(const Scenario& scenario, int n, const DanParams& params, Rng& rng);
DanWorld init_scenario(const Scenario& scenario, int n, const DanParams& params, std::uint64_t seed);

inline constexpr int kObservedNeighbors = 3;
inline constexpr int kDanObsDim = 2 + 4 * kObservedNeighbors;

/// Indices of the k nearest rows of `points` to `from`, ties by index, `exclude` skipped.
std::vector<int> nearest_indices(const Matrix& points, const Eigen::Vector2d& from, int k, int exclude = -1);

/// [previous u (2), 3 nearest agents relative (6), 3 nearest goals relative (6)].
Vector observe(const DanWorld& world, int agent);
Matrix observe_all(const DanWorld& world);

/// Fraction of goals with some agent strictly closer than R_g.
double success_rate(const DanWorld& world);
double success_rate(const Matrix& agents, const Matrix& goals, double goal_radius);

/// D_ij = ||p_i - g_j||^2.
Matrix squared_distances(const Matrix& agents, const Matrix& goals);

/// Optimal assignment of rows to columns of a square cost matrix (Hungarian, O(n^3)).
/// Entry i is the column assigned to row i.
std::vector<int> lsap_assign(const Matrix& cost);
/// Sum of cost(i, assignment[i]) over rows with an assigned column, in row order.
double assignment_cost(const Matrix& cost, const std::vector<int>& assignment);

/// Max-speed velocity toward `target`, capped so one step does not overshoot it.
Eigen::Vector2d capped_velocity(const Eigen::Vector2d& from, const Eigen::Vector2d& target, double u_max, double dt);

Matrix lsap_policy(const DanWorld& world);

/// Goal chosen by each agent's local LSAP over its k-hop in-neighbourhood, -1 when unassigned.
std::vector<int> dhba_assignment(const DanWorld& world, const CommGraph& graph, int hops);
Matrix dhba_policy(const DanWorld& world, const CommGraph& graph, int hops);

/// Turns per-agent goal claims into a permutation: each contested goal stays with its
/// cheapest claimant, then the remaining agents and goals are matched optimally.
std::vector<int> resolve_claims(const Matrix& cost, const std::vector<int>& claims);

/// Team cost of DHBA-k on a snapshot: cost of resolve_claims applied to dhba_assignment.
double dhba_cost(const DanWorld& world, const CommGraph& graph, int hops);

/// Union of every agent's 3 nearest goals, ascending.
std::vector<int> observed_goals(const DanWorld& world);

/// P <- P + U dt, t <- t + dt. Throws std::domain_error if some ||u_i|| exceeds u_max.
void step(DanWorld& world, const Matrix& velocities);

}  // namespace mast
