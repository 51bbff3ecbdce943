#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support.hpp"

#include "mast/network.hpp"

#include <filesystem>
#include <fstream>
#include <numeric>

#include <unistd.h>

using namespace mast;
using test::max_abs;
using test::random_matrix;

namespace {

MastConfig small_config(PosEncKind pe = PosEncKind::rope_geometric, int layers = 2) {
  MastConfig cfg;
  cfg.layers = layers;
  cfg.heads = 2;
  cfg.head_dim = 8;
  cfg.posenc = pe;
  cfg.obs_dim = 5;
  cfg.base_wavelength = 400.0;
  return cfg;
}

ModelParams randomized(const MastConfig& cfg, Rng& rng, double spread = 0.5) {
  ModelParams p = init_params(cfg, rng);
  for (auto& t : p.tensors()) t.value += random_matrix(rng, t.value.rows(), t.value.cols(), -spread, spread);
  return p;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mast_test_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST_CASE("perceive") {
  const MastConfig cfg = small_config();
  const Matrix obs = Rng(1).uniform() * Matrix::Ones(3, 5);
  CHECK(perceive(zero_params(cfg), cfg, obs).isZero(0.0));

  Rng rng(2);
  const ModelParams p = randomized(cfg, rng);
  Matrix twice(2, 5);
  twice.row(0) = twice.row(1) = random_matrix(rng, 1, 5);
  const Matrix e = perceive(p, cfg, twice);
  CHECK(e.row(0) == e.row(1));
  CHECK(e.cols() == cfg.model_dim());

  const Matrix x = random_matrix(rng, 3, 5), c = random_matrix(rng, 3, 16);
  const double err = test::model_gradient_error(
      p, cfg,
      [&](const BoundModel& m) {
        return sum(matmul_bt(row(perceive(m, m.tape().constant(x)), 1), m.tape().constant(c.row(1))));
      },
      {"perception.w1", "perception.b1", "perception.w2", "perception.b2"});
  CHECK(err <= 1e-5);
  CHECK_THROWS_AS(perceive(p, cfg, Matrix::Zero(3, 4)), ShapeError);
}

TEST_CASE("forward with no layers is the identity") {
  MastConfig cfg = small_config(PosEncKind::rope_linear, 0);
  Rng rng(3);
  const ModelParams p = randomized(cfg, rng);
  const Matrix x = random_matrix(rng, 4, 16), pos = random_matrix(rng, 4, 2, 0, 400);
  CHECK(forward(p, cfg, x, pos, MaskMatrix::Constant(4, 4, true)) == x);
}

TEST_CASE("forward and policy agree with the straight-line reference") {
  Rng rng(4);
  for (auto pe : {PosEncKind::none, PosEncKind::rope_geometric, PosEncKind::rope_linear, PosEncKind::ape_geometric,
                  PosEncKind::ape_linear, PosEncKind::mlp}) {
    for (bool scaled : {true, false}) {
      MastConfig cfg = small_config(pe);
      cfg.scaled_attention = scaled;
      cfg.obs_scale = 0.5;
      const ModelParams p = randomized(cfg, rng);
      const Matrix x = random_matrix(rng, 3, 16), pos = random_matrix(rng, 3, 2, 0, 400);
      const Matrix obs = random_matrix(rng, 3, 5, -3, 3);
      MaskMatrix mask = MaskMatrix::Constant(3, 3, true);
      mask(0, 2) = false;
      CHECK(max_abs(forward(p, cfg, x, pos, mask) - test::ref_forward(p, cfg, x, pos, mask)) <= 1e-12);
      CHECK(max_abs(policy(p, cfg, obs, pos, mask) - test::ref_policy(p, cfg, obs, pos, mask)) <= 1e-12);
    }
  }
}

TEST_CASE("readout clipping") {
  MastConfig cfg = small_config();
  cfg.u_max = 5.0;
  ModelParams p = zero_params(cfg);
  const Matrix y = Matrix::Ones(2, 16);
  CHECK(readout(p, cfg, y).isZero(0.0));

  p.at("readout.b2") << 7.2, 9.6;
  Matrix v = readout(p, cfg, y);
  CHECK(std::abs(v.row(0).norm() - 5.0) < 1e-12);
  CHECK(std::abs(v(0, 0) - 3.0) < 1e-12);
  CHECK(std::abs(v(0, 1) - 4.0) < 1e-12);

  p.at("readout.b2") << 1.8, 2.4;
  v = readout(p, cfg, y);
  CHECK(v(1, 0) == 1.8);
  CHECK(v(1, 1) == 2.4);
}

TEST_CASE("end-to-end permutation equivariance") {
  Rng rng(5);
  MastConfig cfg = small_config();
  cfg.window_radius = 250.0;
  const ModelParams p = randomized(cfg, rng);
  const Index n = 8;
  for (int t = 0; t < 5; ++t) {
    const Matrix obs = random_matrix(rng, n, 5), pos = random_matrix(rng, n, 2, 0, 400);
    const CommGraph g = build_graph(pos, {GraphKind::knn, 2, 0});
    const Matrix u = policy(p, cfg, obs, pos, attention_mask(cfg, pos, g));
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    for (Index i = n - 1; i > 0; --i)
      std::swap(perm[static_cast<std::size_t>(i)], perm[rng.below(static_cast<std::uint64_t>(i + 1))]);
    Matrix po(n, 5), pp(n, 2);
    for (Index i = 0; i < n; ++i) {
      po.row(i) = obs.row(perm[static_cast<std::size_t>(i)]);
      pp.row(i) = pos.row(perm[static_cast<std::size_t>(i)]);
    }
    const Matrix pu = policy(p, cfg, po, pp, attention_mask(cfg, pp, build_graph(pp, {GraphKind::knn, 2, 0})));
    for (Index i = 0; i < n; ++i) CHECK(max_abs(pu.row(i) - u.row(perm[static_cast<std::size_t>(i)])) <= 1e-9);
  }
}

TEST_CASE("full-network gradient check") {
  Rng rng(6);
  for (auto pe : {PosEncKind::rope_geometric, PosEncKind::rope_linear, PosEncKind::ape_geometric,
                  PosEncKind::ape_linear, PosEncKind::mlp}) {
    MastConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.head_dim = 8;
    cfg.posenc = pe;
    cfg.obs_dim = 4;
    cfg.u_max = 1e6;
    cfg.base_wavelength = 100.0;
    const ModelParams p = randomized(cfg, rng);
    const Matrix obs = random_matrix(rng, 4, 4), pos = random_matrix(rng, 4, 2, 0, 100);
    const Matrix target = random_matrix(rng, 4, 2);
    MaskMatrix mask = MaskMatrix::Constant(4, 4, true);
    mask(1, 3) = mask(3, 0) = false;
    std::vector<std::string> names;
    for (const auto& t : p.tensors()) names.push_back(t.name);
    const double err = test::model_gradient_error(
        p, cfg, [&](const BoundModel& m) { return mse_rows(policy(m, obs, pos, mask), target); }, names, 1e-4);
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("initialization") {
  MastConfig cfg = small_config(PosEncKind::mlp);
  Rng rng(7);
  const ModelParams p = init_params(cfg, rng);
  CHECK(p.at("layer0.ln1.gain").isOnes(0.0));
  CHECK(p.at("layer1.ln2.bias").isZero(0.0));
  CHECK(p.at("perception.b1").isZero(0.0));
  for (const auto& t : p.tensors()) {
    if (t.name.ends_with("w1") || t.name.ends_with("w2") || t.name.find(".attn.") != std::string::npos) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(t.value.cols()));
      CHECK(t.value.cwiseAbs().maxCoeff() <= bound);
      CHECK(t.value.cwiseAbs().maxCoeff() > 0.5 * bound);
    }
  }
  Rng again(7);
  CHECK(init_params(cfg, again) == p);
  CHECK(zero_params(cfg).size() == p.size());
  CHECK(p.contains("posenc.w1"));
  CHECK_FALSE(init_params(small_config(PosEncKind::rope_geometric), again).contains("posenc.w1"));
}

TEST_CASE("weights round-trip") {
  MastConfig cfg = small_config(PosEncKind::mlp);
  Rng rng(8);
  ModelParams p = randomized(cfg, rng);
  p.at("layer0.attn.o")(0, 0) = -0.0;
  p.at("layer0.attn.o")(0, 1) = 5e-324;
  const auto path = temp_file("w.mastw");
  save_weights(p, path);
  const ModelParams back = load_weights(path, cfg);
  CHECK(back == p);
  CHECK(std::signbit(back.at("layer0.attn.o")(0, 0)));
  CHECK(serialize_weights(back) == serialize_weights(p));
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(back.tensors()[i].name == p.tensors()[i].name);

  const std::string bytes = serialize_weights(p);
  CHECK(bytes.substr(0, 8) == "MASTW001");
  for (std::size_t cut : {std::size_t{4}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1}) {
    CHECK_THROWS_AS(deserialize_weights(bytes.substr(0, cut)), FormatError);
  }
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_weights(bad), FormatError);

  MastConfig wider = cfg;
  wider.head_dim = 12;
  try {
    (void)load_weights(path, wider);
    FAIL("expected a FormatError");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("perception.w1") != std::string::npos);
    CHECK(msg.find("48") != std::string::npos);
  }
  MastConfig no_mlp = cfg;
  no_mlp.posenc = PosEncKind::rope_geometric;
  CHECK_THROWS_AS(load_weights(path, no_mlp), FormatError);
  std::filesystem::remove(path);
  CHECK_THROWS(load_weights(path));
}

TEST_CASE("config validation and names") {
  CHECK(parse_variant("mast-m") == Variant::masked);
  CHECK(parse_variant("mast-l") == Variant::local);
  CHECK(parse_variant(to_string(Variant::masked)) == Variant::masked);
  CHECK_THROWS(parse_variant("mast-c"));
  MastConfig cfg = small_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.head_dim = 6;
  CHECK_THROWS(cfg.validate());
  cfg = small_config();
  cfg.leaky_slope = 1.0;
  CHECK_THROWS(cfg.validate());
  cfg = small_config();
  cfg.window_radius = 0.0;
  CHECK_THROWS(cfg.validate());
}
