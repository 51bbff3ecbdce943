#pragma once

// Coverage control on a square grid of 1 m cells. An importance density (IDF)
// built from truncated isotropic Gaussians weights the squared distance from
// each cell to its nearest agent.

#include "mast/numkernel.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace mast {

struct GaussianFeature {
  Eigen::Vector2d center;
  double amplitude = 1.0;
  double sigma = 40.0;  // truncated at 2 sigma
};

/// Grid of size x size unit cells; cell (x, y) has index y * size + x and center (x + 0.5, y + 0.5).
class Idf {
public:
  Idf(int size, std::vector<GaussianFeature> features);
  /// Arbitrary non-negative cell values, no feature list.
  static Idf from_values(int size, std::vector<double> values);

  int size() const { return size_; }
  std::size_t cells() const { return values_.size(); }
  double operator()(int x, int y) const { return values_[index(x, y)]; }
  double at(std::size_t cell) const { return values_[cell]; }
  const std::vector<double>& values() const { return values_; }
  /// Cells with a positive value, ascending.
  const std::vector<std::uint32_t>& support() const { return support_; }
  const std::vector<GaussianFeature>& features() const { return features_; }

  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * static_cast<std::size_t>(size_) + static_cast<std::size_t>(x); }
  Eigen::Vector2d center(std::size_t cell) const;

private:
  Idf() = default;
  void rebuild_support();

  int size_ = 0;
  std::vector<GaussianFeature> features_;
  std::vector<double> values_;
  std::vector<std::uint32_t> support_;
};

/// Centers ~ U(0, size)^2, amplitudes ~ U(amp_lo, amp_hi).
Idf build_idf(std::uint64_t seed, int size, int features, double sigma, double amp_lo = 0.6, double amp_hi = 1.0);

/// Text format: header "size F", then F lines "cx cy amplitude sigma"; '#' starts a comment.
Idf load_idf(const std::filesystem::path& path);
void save_idf(const Idf& idf, const std::filesystem::path& path);

/// Nearest agent for every cell (ties to the lowest index). Coincident agents are
/// separated by a deterministic 1e-6 m jitter first, with a warning on stderr.
std::vector<int> voronoi_cells(const Matrix& positions, int size);

/// Positions with coincident rows moved apart by 1e-6 m per duplicate.
Matrix separate_coincident(const Matrix& positions);

/// Coverage cost as the per-cell minimum over agents, summed over the grid.
double coverage_cost_direct(const Matrix& positions, const Idf& idf);
/// Same cost summed per Voronoi cell, then over agents.
double coverage_cost(const Matrix& positions, const Idf& idf);

enum class CvtVariant { clairvoyant, centralized, decentralized };

CvtVariant parse_cvt_variant(const std::string& name);
std::string to_string(CvtVariant v);

struct CoverageParams {
  int env_size = 1024;
  int features = 32;
  double sigma = 40.0;
  int agents = 32;
  double comm_radius = 256.0;  // R_c
  int fov = 64;
  int local_map = 256;
  int obs_grid = 32;
  double u_max = 5.0;
  double dt = 1.0;
  int steps = 600;
  double exploration_prior = 1e-3;
};

struct CoverageState {
  std::shared_ptr<const Idf> idf;
  Matrix positions;  // N x 2
  Matrix previous_u;
  std::vector<std::vector<std::uint8_t>> explored_by;  // per agent, one byte per cell
  std::vector<std::uint8_t> explored;                  // union over agents
  double t = 0.0;
  CoverageParams params;

  int size() const { return static_cast<int>(positions.rows()); }
};

/// Agents uniform over the environment; the IDF drawn from the same seed.
CoverageState init_coverage(const CoverageParams& params, std::uint64_t seed);
CoverageState init_coverage(std::shared_ptr<const Idf> idf, const Matrix& positions, const CoverageParams& params);

/// Marks each agent's field of view as explored.
void sense(CoverageState& state);

/// Moves agents (||u|| <= u_max enforced), then senses.
void step(CoverageState& state, const Matrix& velocities);

/// Velocities toward the mass centroids of each agent's Voronoi cell, capped at u_max without overshoot.
Matrix cvt_policy(const CoverageState& state, CvtVariant variant);

/// Mass centroid per agent under the given cell weights; empty cells fall back to the geometric center.
Matrix voronoi_centroids(const Matrix& positions, int size, const std::vector<double>& weights);

inline constexpr int kCoverageChannels = 4;

/// Channels [C_phi, C_B, C_x, C_y], each obs_grid x obs_grid with rows along y, flattened channel-major.
Vector observe_coverage(const CoverageState& state, int agent);
Matrix observe_coverage_all(const CoverageState& state);
int coverage_obs_dim(const CoverageParams& params);

/// Neighbours within R_c (strict), ascending, excluding the agent itself.
std::vector<int> coverage_neighbors(const Matrix& positions, int agent, double radius);

}  // namespace mast
