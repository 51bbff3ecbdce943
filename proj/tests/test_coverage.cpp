#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support.hpp"

#include "mast/coverage.hpp"

#include <filesystem>

#include <unistd.h>

using namespace mast;
using test::random_matrix;

namespace {

// Per-cell squared distance to the nearest agent times the cell value, in the plainest loop.
double brute_cost(const Matrix& p, const Idf& idf) {
  double total = 0;
  for (int y = 0; y < idf.size(); ++y)
    for (int x = 0; x < idf.size(); ++x) {
      double best = 1e300;
      for (Index i = 0; i < p.rows(); ++i) {
        const double dx = p(i, 0) - (x + 0.5), dy = p(i, 1) - (y + 0.5);
        best = std::min(best, dx * dx + dy * dy);
      }
      total += best * idf(x, y);
    }
  return total;
}

CoverageParams small_params() {
  CoverageParams p;
  p.env_size = 128;
  p.features = 4;
  p.sigma = 10.0;
  p.agents = 6;
  p.comm_radius = 48.0;
  p.fov = 16;
  p.local_map = 64;
  p.obs_grid = 8;
  p.steps = 50;
  return p;
}

}  // namespace

TEST_CASE("defaults") {
  const CoverageParams p;
  CHECK(p.env_size == 1024);
  CHECK(p.agents == 32);
  CHECK(p.features == 32);
  CHECK(p.comm_radius == 256.0);
  CHECK(p.steps == 600);
  CHECK(p.fov == 64);
  CHECK(p.local_map == 256);
  CHECK(p.obs_grid == 32);
  CHECK(coverage_obs_dim(p) == 4096);
}

TEST_CASE("importance density") {
  const Idf empty = build_idf(1, 64, 0, 10.0);
  for (double v : empty.values()) CHECK(v == 0.0);
  Rng rng(2);
  CHECK(coverage_cost(random_matrix(rng, 3, 2, 0, 64), empty) == 0.0);

  const Idf one(64, {GaussianFeature{{20.5, 30.5}, 0.8, 5.0}});
  double best = -1;
  int bx = -1, by = -1;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      if (one(x, y) > best) best = one(x, y), bx = x, by = y;
  CHECK(bx == 20);
  CHECK(by == 30);
  CHECK(best == doctest::Approx(0.8));
  CHECK(one(20 + 15, 30) == 0.0);
  CHECK(one(20 + 10, 30) > 0.0);
  CHECK(one(20 + 11, 30) == 0.0);

  const Idf drawn = build_idf(3, 256, 32, 20.0);
  CHECK(drawn.features().size() == 32);
  for (const auto& f : drawn.features()) {
    CHECK(f.amplitude >= 0.6);
    CHECK(f.amplitude <= 1.0);
    CHECK(f.center.x() >= 0.0);
    CHECK(f.center.x() <= 256.0);
  }
  for (double v : drawn.values()) CHECK(v >= 0.0);
  CHECK(build_idf(3, 256, 32, 20.0).values() == drawn.values());

  const auto path = std::filesystem::temp_directory_path() / ("mast_idf_" + std::to_string(::getpid()) + ".txt");
  save_idf(drawn, path);
  const Idf back = load_idf(path);
  CHECK(back.values() == drawn.values());
  std::filesystem::remove(path);
  CHECK_THROWS(load_idf(path));
}

TEST_CASE("Voronoi cells") {
  Matrix single(1, 2);
  single << 3, 4;
  for (int c : voronoi_cells(single, 16)) CHECK(c == 0);

  Matrix two(2, 2);
  two << 4, 8, 12, 8;
  const auto split = voronoi_cells(two, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) CHECK(split[static_cast<std::size_t>(y * 16 + x)] == (x < 8 ? 0 : 1));

  Rng rng(4);
  for (int t = 0; t < 10; ++t) {
    const Matrix p = random_matrix(rng, 5, 2, 0, 32);
    const auto cells = voronoi_cells(p, 32);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        int arg = 0;
        double best = 1e300;
        for (int i = 0; i < 5; ++i) {
          const double dx = p(i, 0) - (x + 0.5), dy = p(i, 1) - (y + 0.5), d = dx * dx + dy * dy;
          if (d < best) best = d, arg = i;
        }
        CHECK(cells[static_cast<std::size_t>(y * 32 + x)] == arg);
      }
  }

  Matrix same(3, 2);
  same << 5, 5, 5, 5, 9, 9;
  const Matrix moved = separate_coincident(same);
  CHECK(moved.row(0) != moved.row(1));
  CHECK((moved - same).cwiseAbs().maxCoeff() <= 1e-5);
  CHECK(moved.row(2) == same.row(2));
}

TEST_CASE("coverage cost: direct sum equals Voronoi sum") {
  std::vector<double> impulse(16 * 16, 0.0);
  impulse[5 * 16 + 5] = 1.0;
  const Idf dot = Idf::from_values(16, impulse);
  Matrix p(1, 2);
  p << 15.5, 5.5;
  CHECK(coverage_cost(p, dot) == doctest::Approx(100.0).epsilon(1e-15));
  CHECK(coverage_cost_direct(p, dot) == doctest::Approx(100.0).epsilon(1e-15));

  Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    const Idf idf = build_idf(100 + static_cast<std::uint64_t>(t), 96, 6, 12.0);
    const Matrix q = random_matrix(rng, 7, 2, 0, 96);
    const double a = coverage_cost(q, idf), b = coverage_cost_direct(q, idf), c = brute_cost(q, idf);
    CHECK(std::abs(a - b) <= 1e-9 * std::max(1.0, a));
    CHECK(std::abs(a - c) <= 1e-9 * std::max(1.0, a));
  }
}

TEST_CASE("CVT policy") {
  const Idf one(64, {GaussianFeature{{40.5, 20.5}, 1.0, 6.0}});
  auto idf = std::make_shared<const Idf>(one);
  CoverageParams params = small_params();
  params.env_size = 64;
  Matrix p(1, 2);
  p << 10, 50;
  CoverageState s = init_coverage(idf, p, params);
  const Matrix u = cvt_policy(s, CvtVariant::clairvoyant);
  const Eigen::RowVector2d dir = Eigen::RowVector2d(40.5, 20.5) - p.row(0);
  CHECK(u.row(0).norm() == doctest::Approx(5.0));
  CHECK(u.row(0).normalized().dot(dir.normalized()) > 1 - 1e-6);

  const Matrix centroid = voronoi_centroids(p, 64, idf->values());
  CHECK(std::abs(centroid(0, 0) - 40.5) < 1e-9);
  CHECK(std::abs(centroid(0, 1) - 20.5) < 1e-9);
  CoverageState at = init_coverage(idf, centroid, params);
  CHECK(cvt_policy(at, CvtVariant::clairvoyant).cwiseAbs().maxCoeff() < 1e-9);

  CHECK(parse_cvt_variant("cvt-clairvoyant") == CvtVariant::clairvoyant);
  CHECK(parse_cvt_variant(to_string(CvtVariant::decentralized)) == CvtVariant::decentralized);
  CHECK_THROWS(parse_cvt_variant("cvt-psychic"));
}

TEST_CASE("clairvoyant CVT descends; exploration is monotone") {
  CoverageParams params = small_params();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    CoverageState s = init_coverage(params, seed);
    double last = coverage_cost(s.positions, *s.idf);
    const double first = last;
    std::size_t explored = 0;
    for (int t = 0; t < params.steps; ++t) {
      step(s, cvt_policy(s, CvtVariant::clairvoyant));
      const double now = coverage_cost(s.positions, *s.idf);
      CHECK(now <= last + 1e-9 * std::max(1.0, last));
      last = now;
      std::size_t count = 0;
      for (auto e : s.explored) count += e;
      CHECK(count >= explored);
      explored = count;
    }
    CHECK(last < first);
  }
  CoverageState s = init_coverage(params, 9);
  Matrix fast = Matrix::Zero(params.agents, 2);
  fast(0, 0) = 6.0;
  CHECK_THROWS_AS(step(s, fast), std::domain_error);
}

TEST_CASE("coverage observations") {
  CoverageParams params = small_params();
  params.env_size = 256;
  const Idf flat = Idf::from_values(256, std::vector<double>(256 * 256, 0.5));
  Matrix p(3, 2);
  p << 128, 128, 140, 128, 30, 230;
  CoverageState s = init_coverage(std::make_shared<const Idf>(flat), p, params);
  const int g = params.obs_grid, cells = g * g;
  const Vector o = observe_coverage(s, 0);
  REQUIRE(o.size() == 4 * cells);
  CHECK(o.segment(cells, cells).isZero(0.0));
  const Vector far = observe_coverage(s, 2);
  CHECK(far.segment(2 * cells, 2 * cells).isZero(0.0));
  CHECK(far.segment(cells, cells).maxCoeff() == 1.0);
  // Only the neighbour at +12 m in x shows up in agent 0's neighbour maps.
  CHECK((o.segment(2 * cells, cells).array() != 0.0).count() == 1);
  CHECK(o.segment(2 * cells, cells).maxCoeff() == doctest::Approx(12.0 / params.comm_radius));
  CHECK(o.segment(3 * cells, cells).isZero(0.0));

  CoverageState blind = s;
  std::fill(blind.explored.begin(), blind.explored.end(), 0);
  for (auto& e : blind.explored_by) std::fill(e.begin(), e.end(), 0);
  CHECK(observe_coverage(blind, 0).head(cells).isZero(0.0));
  CHECK(observe_coverage(s, 0).head(cells).maxCoeff() > 0.0);
  CHECK(observe_coverage_all(s).rows() == 3);
  CHECK(coverage_neighbors(p, 0, 48.0) == std::vector<int>{1});
  CHECK(coverage_neighbors(p, 0, 12.0).empty());
}
