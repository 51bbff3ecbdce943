// mast: training, evaluation, baselines and property checks.

#include "checks.hpp"

#include "mast/config.hpp"
#include "mast/coverage.hpp"
#include "mast/dan.hpp"
#include "mast/imitation.hpp"
#include "mast/network.hpp"
#include "mast/results.hpp"

#include <CLI11.hpp>
#include <openssl/evp.h>

#include <atomic>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using namespace mast;

namespace {

constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;

class UsageError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// SHA-1 of "blob <size>\0<bytes>", as git hashes file contents.
std::string git_blob_sha1(const std::string& bytes) {
  const std::string data = "blob " + std::to_string(bytes.size()) + '\0' + bytes;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("SHA-1 failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

/// Runs fn(0..count-1) on `jobs` threads; results are merged by index.
std::vector<ResultRow> run_episodes(int count, int jobs, const std::function<std::vector<ResultRow>(int)>& fn) {
  std::vector<std::vector<ResultRow>> parts(static_cast<std::size_t>(count));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(count));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int e = next++; e < count; e = next++) {
      try {
        parts[static_cast<std::size_t>(e)] = fn(e);
      } catch (...) {
        errors[static_cast<std::size_t>(e)] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int j = 1; j < std::max(1, jobs); ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<ResultRow> rows;
  for (auto& p : parts) rows.insert(rows.end(), p.begin(), p.end());
  return rows;
}

void write_csv(const fs::path& path, const std::vector<ResultRow>& rows, const std::string& meta) {
  std::ostringstream ss;
  write_results(ss, rows);
  write_text(path, ss.str());
  write_text(fs::path(path.string() + ".meta"), meta);
}

std::uint64_t seed_from_env(std::uint64_t fallback) {
  const char* s = std::getenv("MAST_SEED");
  if (s == nullptr || *s == '\0') return fallback;
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != std::string(s).size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError(std::string("MAST_SEED is not an unsigned integer: ") + s);
  }
}

std::vector<ResultRow> metric_rows(const std::string& run_id, const std::string& policy, const std::string& scenario,
                                   int agents, std::uint64_t seed, const std::string& metric,
                                   const std::vector<double>& values) {
  std::vector<ResultRow> rows;
  for (std::size_t t = 0; t < values.size(); ++t) {
    rows.push_back({run_id, policy, scenario, agents, seed, static_cast<int>(t), metric, values[t]});
  }
  return rows;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, out;
};

int dan_train(const TrainArgs& a) {
  ExperimentConfig cfg = load_config(a.config);
  apply_seed_override(cfg);
  cfg.validate();
  fs::create_directories(a.out);
  const fs::path dir(a.out);
  write_text(dir / "config.txt", cfg.dump());

  const Scenario scenario = parse_scenario(cfg.scenario);
  const EnvFactory envs = dan_factory(scenario, cfg.agents, cfg.env, cfg.comm);
  const TrainResult result = train(cfg.model, cfg.train, envs, [](const EpochLog& e) {
    std::fprintf(stderr, "epoch %d  train_loss %.6f  heldout_loss %.6f  val %.3f +- %.3f  %.1fs\n", e.epoch,
                 e.train_loss, e.heldout_loss, e.val_metric, e.val_half_width, e.wallclock_s);
  });
  save_weights(result.params, dir / "weights.mastw");
  write_training_csv(result.log, dir / "training.csv");
  const std::string hash = git_blob_sha1(read_file(dir / "weights.mastw"));
  write_text(dir / "training.csv.meta", "weights_sha1 = " + hash + "\n" + cfg.dump());
  std::cout << "weights " << (dir / "weights.mastw").string() << " (" << hash << ")\n";
  return 0;
}

struct EvalArgs {
  std::string weights, config, scenario = "clusters", mode = "central", csv;
  int agents = 100, episodes = 20, steps = -1, jobs = 1;
  double delay = -1.0;  // negative: comm.tau / env.dt from the config
  double width = -1.0;
  std::uint64_t seed = 0;
};

int dan_eval(EvalArgs a) {
  const fs::path weights_path(a.weights);
  const fs::path config_path = a.config.empty() ? weights_path.parent_path() / "config.txt" : fs::path(a.config);
  ExperimentConfig cfg = load_config(config_path);
  cfg.validate();
  const std::string bytes = read_file(weights_path);
  const ModelParams params = deserialize_weights(bytes);
  check_compatible(params, cfg.model);

  if (a.delay < 0.0) a.delay = a.mode == "central" ? 0.0 : cfg.tau / cfg.env.dt;
  if (a.mode != "central" && a.mode != "decentralized") throw UsageError("--mode must be central or decentralized");
  if (a.mode == "central" && a.delay != 0.0) throw UsageError("--mode central runs without delay; use --delay 0");
  if (a.agents < kObservedNeighbors + 1) throw UsageError("--agents must be at least 4");
  const Scenario scenario = parse_scenario(a.scenario);
  const int steps = a.steps >= 0 ? a.steps : cfg.env.steps;
  if (a.width > 0.0) cfg.env.width = a.width;
  a.seed = seed_from_env(a.seed);

  const std::string policy = to_string(cfg.model.variant) + "-" + a.mode;
  std::ostringstream id;
  id << "dan-eval/" << policy << "/" << scenario.name() << "/N" << a.agents << "/delay" << csv_number(a.delay) << "/seed"
     << a.seed;
  const EnvFactory envs = dan_factory(scenario, a.agents, cfg.env, cfg.comm);
  const auto rows = run_episodes(a.episodes, a.jobs, [&](int e) {
    const std::uint64_t seed = episode_seed(a.seed, SeedDomain::evaluation, static_cast<std::uint64_t>(e));
    auto env = envs(seed);
    std::unique_ptr<Controller> controller;
    if (a.mode == "central") {
      controller = std::make_unique<CentralMastController>(params, cfg.model);
    } else {
      controller = std::make_unique<DecentralizedMastController>(params, cfg.model, a.delay);
    }
    return metric_rows(id.str(), policy, scenario.name(), a.agents, seed, "success_rate",
                       rollout(*env, *controller, steps));
  });
  std::ostringstream meta;
  meta << "weights = " << a.weights << "\nweights_sha1 = " << git_blob_sha1(bytes) << "\nscenario = " << scenario.name()
       << "\nagents = " << a.agents << "\ndelay = " << csv_number(a.delay) << "\nmode = " << a.mode
       << "\nepisodes = " << a.episodes << "\nsteps = " << steps << "\nseed = " << a.seed << "\n"
       << cfg.dump();
  write_csv(a.csv, rows, meta.str());
  return 0;
}

struct BaselineArgs {
  std::string task = "dan", policy, scenario = "clusters", csv, graph = "knn";
  int hops = 0, agents = -1, episodes = 20, steps = -1, jobs = 1, k = 3;
  double width = -1.0, radius = 256.0;
  std::uint64_t seed = 0;
};

int baseline(BaselineArgs a) {
  a.seed = seed_from_env(a.seed);
  std::vector<ResultRow> rows;
  std::ostringstream meta;
  if (a.task == "dan") {
    if (a.policy != "lsap" && a.policy != "dhba" && a.policy != "zero") {
      throw UsageError("unknown dan policy '" + a.policy + "' (lsap, dhba, zero)");
    }
    if (a.hops < 0) throw UsageError("--hops must be >= 0");
    DanParams params;
    if (a.width > 0.0) params.width = a.width;
    if (a.steps >= 0) params.steps = a.steps;
    const int agents = a.agents > 0 ? a.agents : 100;
    const Scenario scenario = parse_scenario(a.scenario);
    GraphSpec graph;
    try {
      graph.kind = parse_graph_kind(a.graph);
    } catch (const std::exception&) {
      throw UsageError("unknown graph '" + a.graph + "' (knn, disk)");
    }
    graph.k = a.k;
    graph.radius = a.radius;
    const std::string policy = a.policy == "dhba" ? "dhba-" + std::to_string(a.hops) : a.policy;
    const std::string id = "baseline/dan/" + policy + "/" + scenario.name() + "/N" + std::to_string(agents) + "/seed" +
                           std::to_string(a.seed);
    rows = run_episodes(a.episodes, a.jobs, [&](int e) {
      const std::uint64_t seed = episode_seed(a.seed, SeedDomain::evaluation, static_cast<std::uint64_t>(e));
      DanWorld world = init_scenario(scenario, agents, params, seed);
      std::vector<double> sr{success_rate(world)};
      for (int t = 0; t < params.steps; ++t) {
        Matrix u;
        if (a.policy == "lsap") u = lsap_policy(world);
        else if (a.policy == "dhba") u = dhba_policy(world, build_graph(world.agents, graph), a.hops);
        else u = Matrix::Zero(world.size(), 2);
        step(world, u);
        sr.push_back(success_rate(world));
      }
      return metric_rows(id, policy, scenario.name(), agents, seed, "success_rate", sr);
    });
    meta << "task = dan\npolicy = " << policy << "\nscenario = " << scenario.name() << "\nagents = " << agents
         << "\nwidth = " << csv_number(params.width) << "\nsteps = " << params.steps << "\ngraph = " << a.graph
         << "\nk = " << a.k << "\nradius = " << csv_number(a.radius) << "\nepisodes = " << a.episodes
         << "\nseed = " << a.seed << "\n";
  } else if (a.task == "coverage") {
    CvtVariant variant;
    try {
      variant = parse_cvt_variant(a.policy);
    } catch (const std::exception&) {
      throw UsageError("unknown coverage policy '" + a.policy + "' (cvt-clairvoyant, cvt-centralized, cvt-decentralized)");
    }
    CoverageParams params;
    if (a.agents > 0) params.agents = a.agents;
    if (a.steps >= 0) params.steps = a.steps;
    if (a.width > 0.0) params.env_size = static_cast<int>(a.width);
    const std::string id = "baseline/coverage/" + a.policy + "/N" + std::to_string(params.agents) + "/seed" +
                           std::to_string(a.seed);
    rows = run_episodes(a.episodes, a.jobs, [&](int e) {
      const std::uint64_t seed = episode_seed(a.seed, SeedDomain::evaluation, static_cast<std::uint64_t>(e));
      CoverageState state = init_coverage(params, seed);
      const double j0 = coverage_cost(state.positions, *state.idf);
      std::vector<double> cost{1.0};
      for (int t = 0; t < params.steps; ++t) {
        step(state, cvt_policy(state, variant));
        cost.push_back(coverage_cost(state.positions, *state.idf) / j0);
      }
      return metric_rows(id, a.policy, "coverage", params.agents, seed, "normalized_cost", cost);
    });
    meta << "task = coverage\npolicy = " << a.policy << "\nagents = " << params.agents
         << "\nenv_size = " << params.env_size << "\nsteps = " << params.steps << "\nepisodes = " << a.episodes
         << "\nseed = " << a.seed << "\n";
  } else {
    throw UsageError("unknown task '" + a.task + "' (dan, coverage)");
  }
  write_csv(a.csv, rows, meta.str());
  return 0;
}

int check(const std::string& suite) {
  std::vector<checks::CheckResult> results;
  auto run = [&](const std::string& name, auto fn) {
    if (suite == name || suite == "all") {
      for (auto& r : fn()) results.push_back(r);
    }
  };
  if (suite != "all" && suite != "equivariance" && suite != "gradients" && suite != "oracles") {
    throw UsageError("unknown suite '" + suite + "' (equivariance, gradients, oracles, all)");
  }
  run("equivariance", checks::equivariance_suite);
  run("gradients", checks::gradients_suite);
  run("oracles", checks::oracles_suite);
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-4s %-52s max deviation %.3e (tolerance %.1e)\n", r.passed ? "ok" : "FAIL", r.name.c_str(),
                r.deviation, r.tolerance);
    ok = ok && r.passed;
  }
  return ok ? 0 : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-agent spatial transformer: training, evaluation, baselines and checks"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("dan-train", "Train a DAN policy by imitation of the LSAP expert");
  train_cmd->add_option("--config", train_args.config, "Config file")->required();
  train_cmd->add_option("--out", train_args.out, "Output directory")->required();

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("dan-eval", "Roll out a trained policy and write per-step success rates");
  eval_cmd->add_option("--weights", eval.weights, "Weights file")->required();
  eval_cmd->add_option("--config", eval.config, "Config file (default: config.txt next to the weights)");
  eval_cmd->add_option("--scenario", eval.scenario, "clusters, clusters-K, circle, two-lines, text, file:PATH");
  eval_cmd->add_option("--agents", eval.agents, "Number of agents");
  eval_cmd->add_option("--width", eval.width, "Environment width in m (default from config)");
  eval_cmd->add_option("--delay", eval.delay, "Communication delay tau/dt; 0 = full propagation (default: comm.tau from the config)");
  eval_cmd->add_option("--mode", eval.mode, "central or decentralized");
  eval_cmd->add_option("--episodes", eval.episodes, "Episodes");
  eval_cmd->add_option("--steps", eval.steps, "Steps per episode (default from config)");
  eval_cmd->add_option("--seed", eval.seed, "Seed (MAST_SEED overrides)");
  eval_cmd->add_option("--csv", eval.csv, "Output CSV")->required();
  eval_cmd->add_option("--jobs", eval.jobs, "Parallel episodes");

  BaselineArgs base;
  auto* base_cmd = app.add_subcommand("baseline", "Roll out a classical baseline");
  base_cmd->add_option("--task", base.task, "dan or coverage");
  base_cmd->add_option("--policy", base.policy, "lsap, dhba, zero, cvt-clairvoyant, cvt-centralized, cvt-decentralized")
      ->required();
  base_cmd->add_option("--hops", base.hops, "DHBA hop count");
  base_cmd->add_option("--scenario", base.scenario, "DAN scenario");
  base_cmd->add_option("--agents", base.agents, "Number of agents");
  base_cmd->add_option("--width", base.width, "Environment width in m");
  base_cmd->add_option("--graph", base.graph, "DHBA graph: knn or disk");
  base_cmd->add_option("--k", base.k, "Neighbours for knn");
  base_cmd->add_option("--radius", base.radius, "Radius for disk");
  base_cmd->add_option("--episodes", base.episodes, "Episodes");
  base_cmd->add_option("--steps", base.steps, "Steps per episode");
  base_cmd->add_option("--seed", base.seed, "Seed (MAST_SEED overrides)");
  base_cmd->add_option("--csv", base.csv, "Output CSV")->required();
  base_cmd->add_option("--jobs", base.jobs, "Parallel episodes");

  std::string suite = "all";
  auto* check_cmd = app.add_subcommand("check", "Run property suites and print worst deviations");
  check_cmd->add_option("--suite", suite, "equivariance, gradients, oracles or all");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train_cmd) return dan_train(train_args);
    if (*eval_cmd) return dan_eval(eval);
    if (*base_cmd) return baseline(base);
    if (*check_cmd) return check(suite);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ScenarioError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitUsage;
}
