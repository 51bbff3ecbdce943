#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support.hpp"

#include "mast/attention.hpp"

#include <numeric>

using namespace mast;
using test::max_abs;
using test::random_matrix;

namespace {

AttentionParams random_params(Rng& rng, int heads, Index da, Index d) {
  AttentionParams p;
  for (int h = 0; h < heads; ++h) {
    p.q.push_back(random_matrix(rng, da, d));
    p.k.push_back(random_matrix(rng, da, d));
    p.v.push_back(random_matrix(rng, da, d));
  }
  p.output = random_matrix(rng, d, da * heads);
  return p;
}

MaskMatrix random_mask(Rng& rng, Index n, double density) {
  MaskMatrix m(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) m(i, j) = i == j || rng.uniform() < density;
  return m;
}

// Literal loops over agents, heads and features.
Matrix naive_attend(const Matrix& x, const Matrix& pos, const AttentionParams& p, const MaskMatrix& mask,
                    bool scaled, const std::vector<double>* omegas) {
  const Index n = x.rows(), d = x.cols(), da = p.q[0].rows();
  const int heads = p.heads();
  std::vector<std::vector<double>> concat(static_cast<std::size_t>(n),
                                          std::vector<double>(static_cast<std::size_t>(da * heads), 0.0));
  for (int h = 0; h < heads; ++h) {
    std::vector<test::Vec> q, k, v;
    for (Index i = 0; i < n; ++i) {
      test::Vec xi(static_cast<std::size_t>(d));
      for (Index c = 0; c < d; ++c) xi[static_cast<std::size_t>(c)] = x(i, c);
      q.push_back(test::matvec(p.q[static_cast<std::size_t>(h)], xi));
      k.push_back(test::matvec(p.k[static_cast<std::size_t>(h)], xi));
      v.push_back(test::matvec(p.v[static_cast<std::size_t>(h)], xi));
      if (omegas) {
        q.back() = test::ref_rotate(q.back(), pos(i, 0), pos(i, 1), *omegas);
        k.back() = test::ref_rotate(k.back(), pos(i, 0), pos(i, 1), *omegas);
      }
    }
    for (Index i = 0; i < n; ++i) {
      std::vector<double> logits(static_cast<std::size_t>(n));
      double top = -1e300;
      for (Index j = 0; j < n; ++j) {
        double a = 0;
        for (Index c = 0; c < da; ++c) a += q[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] *
                                            k[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)];
        if (scaled) a /= std::sqrt(static_cast<double>(da));
        logits[static_cast<std::size_t>(j)] = a;
        if (mask(i, j)) top = std::max(top, a);
      }
      double z = 0;
      for (Index j = 0; j < n; ++j)
        if (mask(i, j)) z += std::exp(logits[static_cast<std::size_t>(j)] - top);
      for (Index j = 0; j < n; ++j) {
        if (!mask(i, j)) continue;
        const double w = std::exp(logits[static_cast<std::size_t>(j)] - top) / z;
        for (Index c = 0; c < da; ++c)
          concat[static_cast<std::size_t>(i)][static_cast<std::size_t>(h * da + c)] +=
              w * v[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)];
      }
    }
  }
  Matrix out(n, d);
  for (Index i = 0; i < n; ++i) {
    const auto o = test::matvec(p.output, concat[static_cast<std::size_t>(i)]);
    for (Index c = 0; c < d; ++c) out(i, c) = o[static_cast<std::size_t>(c)];
  }
  return out;
}

}  // namespace

TEST_CASE("window mask") {
  Matrix pos(2, 2);
  pos << 0, 0, 300, 0;
  const MaskMatrix m = window_mask(pos, 250.0);
  CHECK(m(0, 0));
  CHECK(m(1, 1));
  CHECK_FALSE(m(0, 1));
  CHECK_FALSE(m(1, 0));
  CHECK(window_mask(pos, kUnboundedRadius).all());

  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const Matrix p = random_matrix(rng, 5, 2, 0, 500);
    const double r = rng.uniform(50, 400);
    const MaskMatrix w = window_mask(p, r);
    for (Index i = 0; i < 5; ++i) {
      for (Index j = 0; j < 5; ++j) {
        const double dx = p(i, 0) - p(j, 0), dy = p(i, 1) - p(j, 1);
        CHECK(w(i, j) == (i == j || std::sqrt(dx * dx + dy * dy) < r));
        CHECK(w(i, j) == w(j, i));
      }
    }
  }
  // Exactly at the radius is outside.
  Matrix q(2, 2);
  q << 0, 0, 3, 4;
  CHECK_FALSE(window_mask(q, 5.0)(0, 1));
}

TEST_CASE("component and combined masks") {
  CommGraph empty{std::vector<std::vector<int>>(4)};
  CHECK(component_mask(empty) == MaskMatrix::Identity(4, 4));

  CommGraph complete{{{1, 2}, {0, 2}, {0, 1}}};
  CHECK(component_mask(complete).all());

  CommGraph triangles{{{1, 2}, {0, 2}, {0, 1}, {4, 5}, {3, 5}, {3, 4}}};
  const MaskMatrix c = component_mask(triangles);
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 6; ++j) CHECK(c(i, j) == ((i < 3) == (j < 3)));

  Rng rng(2);
  const MaskMatrix a = random_mask(rng, 6, 0.5);
  const MaskMatrix both = combine_masks(a, c);
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 6; ++j) CHECK(both(i, j) == (a(i, j) && c(i, j)));
  CHECK_THROWS_AS(combine_masks(a, MaskMatrix::Identity(5, 5)), ShapeError);
}

TEST_CASE("attend equals a two-loop reference") {
  Rng rng(3);
  for (bool scaled : {true, false}) {
    for (bool rope : {false, true}) {
      for (int t = 0; t < 5; ++t) {
        const int heads = 2;
        const Index da = 8, d = 16, n = 4;
        const auto p = random_params(rng, heads, da, d);
        const Matrix x = random_matrix(rng, n, d), pos = random_matrix(rng, n, 2, 0, 1000);
        const MaskMatrix mask = t == 0 ? MaskMatrix::Constant(n, n, true) : random_mask(rng, n, 0.5);
        const FrequencySet freqs = make_frequencies(FrequencyKind::geometric, static_cast<int>(da / 4), 1000.0);
        const auto omegas = test::ref_omegas(true, static_cast<int>(da / 4), 1000.0);
        AttentionOptions opt;
        opt.scaled = scaled;
        opt.rope = rope ? &freqs : nullptr;
        const Matrix got = attend(x, pos, p, mask, opt);
        const Matrix want = naive_attend(x, pos, p, mask, scaled, rope ? &omegas : nullptr);
        CHECK(max_abs(got - want) <= 1e-12);
      }
    }
  }
}

TEST_CASE("single agent and identity mask") {
  Rng rng(4);
  const auto p = random_params(rng, 2, 4, 8);
  const Matrix x = random_matrix(rng, 1, 8);
  Matrix vx(1, 8);
  vx << (p.v[0] * x.transpose()).transpose(), (p.v[1] * x.transpose()).transpose();
  const Matrix expected = vx * p.output.transpose();
  for (int t = 0; t < 3; ++t) {
    const Matrix pos = random_matrix(rng, 1, 2, -1e4, 1e4);
    const FrequencySet freqs = make_frequencies(FrequencyKind::linear, 1, 500.0);
    AttentionOptions opt;
    opt.rope = &freqs;
    CHECK(max_abs(attend(x, pos, p, MaskMatrix::Constant(1, 1, true), opt) - expected) < 1e-12);
  }

  const Matrix xs = random_matrix(rng, 5, 8), pos = random_matrix(rng, 5, 2, 0, 100);
  const Matrix y = attend(xs, pos, p, MaskMatrix::Identity(5, 5), {});
  for (Index i = 0; i < 5; ++i) {
    const Matrix yi = attend(Matrix(xs.row(i)), Matrix(pos.row(i)), p, MaskMatrix::Constant(1, 1, true), {});
    CHECK(max_abs(y.row(i) - yi) < 1e-13);
  }
}

TEST_CASE("masking equals subsetting") {
  Rng rng(5);
  const auto p = random_params(rng, 2, 8, 16);
  const FrequencySet freqs = make_frequencies(FrequencyKind::geometric, 2, 1000.0);
  AttentionOptions opt;
  opt.rope = &freqs;
  const Index n = 7;
  const Matrix x = random_matrix(rng, n, 16), pos = random_matrix(rng, n, 2, 0, 1000);
  const MaskMatrix mask = random_mask(rng, n, 0.4);
  const Matrix y = attend(x, pos, p, mask, opt);
  for (Index i = 0; i < n; ++i) {
    std::vector<Index> keep{i};
    for (Index j = 0; j < n; ++j)
      if (j != i && mask(i, j)) keep.push_back(j);
    Matrix xs(static_cast<Index>(keep.size()), 16), ps(static_cast<Index>(keep.size()), 2);
    for (std::size_t r = 0; r < keep.size(); ++r) {
      xs.row(static_cast<Index>(r)) = x.row(keep[r]);
      ps.row(static_cast<Index>(r)) = pos.row(keep[r]);
    }
    const Index m = xs.rows();
    const Matrix ys = attend(xs, ps, p, MaskMatrix::Constant(m, m, true), opt);
    CHECK(max_abs(ys.row(0) - y.row(i)) < 1e-12);
  }
}

TEST_CASE("permutation and shift equivariance") {
  Rng rng(6);
  const auto p = random_params(rng, 4, 16, 64);
  const FrequencySet freqs = make_frequencies(FrequencyKind::geometric, 4, 1000.0);
  AttentionOptions opt;
  opt.rope = &freqs;
  const Index n = 10;
  for (int t = 0; t < 10; ++t) {
    const Matrix x = random_matrix(rng, n, 64), pos = random_matrix(rng, n, 2, 0, 1000);
    const MaskMatrix mask = combine_masks(window_mask(pos, 500.0), random_mask(rng, n, 0.7));
    const Matrix y = attend(x, pos, p, mask, opt);

    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    for (Index i = n - 1; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[rng.below(static_cast<std::uint64_t>(i + 1))]);
    Matrix px(n, 64), pp(n, 2);
    MaskMatrix pm(n, n);
    for (Index i = 0; i < n; ++i) {
      px.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
      pp.row(i) = pos.row(perm[static_cast<std::size_t>(i)]);
      for (Index j = 0; j < n; ++j) pm(i, j) = mask(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    const Matrix py = attend(px, pp, p, pm, opt);
    for (Index i = 0; i < n; ++i) CHECK(max_abs(py.row(i) - y.row(perm[static_cast<std::size_t>(i)])) <= 1e-9);

    const Eigen::RowVector2d c(rng.uniform(-1e4, 1e4), rng.uniform(-1e4, 1e4));
    const Matrix shifted = pos.rowwise() + c;
    CHECK(max_abs(attend(x, shifted, p, mask, opt) - y) <= 1e-9);
    CHECK(max_abs(attention_weights(x, shifted, p.q[0], p.k[0], mask, opt) -
                  attention_weights(x, pos, p.q[0], p.k[0], mask, opt)) <= 1e-9);
  }
}

TEST_CASE("attention weights are a masked distribution") {
  Rng rng(7);
  const auto p = random_params(rng, 1, 8, 8);
  const Matrix x = random_matrix(rng, 6, 8), pos = random_matrix(rng, 6, 2, 0, 100);
  const MaskMatrix mask = random_mask(rng, 6, 0.3);
  const Matrix a = attention_weights(x, pos, p.q[0], p.k[0], mask, {});
  for (Index i = 0; i < 6; ++i) {
    CHECK(std::abs(a.row(i).sum() - 1.0) < 1e-14);
    for (Index j = 0; j < 6; ++j)
      if (!mask(i, j)) CHECK(a(i, j) == 0.0);
  }

  // The all-exp denominator agrees with the masked one on a dense mask.
  AttentionOptions all;
  all.denominator = SoftmaxDenominator::all;
  const MaskMatrix dense = MaskMatrix::Constant(6, 6, true);
  CHECK(max_abs(attend(x, pos, p, dense, all) - attend(x, pos, p, dense, {})) < 1e-15);
}

TEST_CASE("attend on the tape: gradients") {
  Rng rng(8);
  const FrequencySet freqs = make_frequencies(FrequencyKind::linear, 1, 300.0);
  const Matrix pos = random_matrix(rng, 4, 2, 0, 300);
  const MaskMatrix mask = random_mask(rng, 4, 0.5);
  const Matrix c = random_matrix(rng, 1, 8);
  for (bool rope : {false, true}) {
    AttentionOptions opt;
    opt.rope = rope ? &freqs : nullptr;
    std::vector<Matrix> inputs{random_matrix(rng, 4, 8)};
    for (int h = 0; h < 2; ++h)
      for (int r = 0; r < 3; ++r) inputs.push_back(random_matrix(rng, 4, 8));
    inputs.push_back(random_matrix(rng, 8, 8));
    const double err = test::gradient_error(
        [&](Tape& t, const std::vector<Var>& v) {
          AttentionWeights w;
          for (int h = 0; h < 2; ++h) {
            w.q.push_back(v[static_cast<std::size_t>(1 + 3 * h)]);
            w.k.push_back(v[static_cast<std::size_t>(2 + 3 * h)]);
            w.v.push_back(v[static_cast<std::size_t>(3 + 3 * h)]);
          }
          w.output = v[7];
          return sum(matmul_bt(attend(v[0], pos, w, mask, opt), t.constant(c)));
        },
        inputs, 1e-5);
    CHECK(err <= 1e-6);
  }
}
