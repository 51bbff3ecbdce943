#include "mast/config.hpp"

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace mast {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const std::string& what) {
  throw ConfigError("config key '" + key + "': " + what + " (got '" + value + "')");
}

double to_double(const std::string& key, const std::string& v) {
  if (v == "inf") return std::numeric_limits<double>::infinity();
  double out = 0.0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size() || !std::isfinite(out)) bad(key, v, "expected a number");
  return out;
}

long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) bad(key, v, "expected an integer");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  bad(key, v, "expected true or false");
}

std::string fmt(double x) {
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, end);
}

struct Key {
  std::string name;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T>
Key number_key(std::string name, T ExperimentConfig::*group, double T::*field) {
  return {name, [=](ExperimentConfig& c, const std::string& v) { (c.*group).*field = to_double(name, v); },
          [=](const ExperimentConfig& c) { return fmt((c.*group).*field); }};
}

template <typename T, typename I>
Key int_key(std::string name, T ExperimentConfig::*group, I T::*field) {
  return {name,
          [=](ExperimentConfig& c, const std::string& v) {
            const long long x = to_int(name, v);
            if (x < 0) bad(name, v, "must be non-negative");
            (c.*group).*field = static_cast<I>(x);
          },
          [=](const ExperimentConfig& c) { return std::to_string((c.*group).*field); }};
}

const std::vector<Key>& keys() {
  using C = ExperimentConfig;
  static const std::vector<Key> table = {
      int_key("model.layers", &C::model, &MastConfig::layers),
      int_key("attention.heads", &C::model, &MastConfig::heads),
      int_key("attention.head_dim", &C::model, &MastConfig::head_dim),
      {"model.variant", [](C& c, const std::string& v) {
         try {
           c.model.variant = parse_variant(v);
         } catch (const std::exception&) {
           bad("model.variant", v, "expected mast-l or mast-m");
         }
       },
       [](const C& c) { return to_string(c.model.variant); }},
      number_key("model.leaky_slope", &C::model, &MastConfig::leaky_slope),
      number_key("model.obs_scale", &C::model, &MastConfig::obs_scale),
      {"posenc.kind", [](C& c, const std::string& v) {
         try {
           c.model.posenc = parse_posenc(v);
         } catch (const std::exception&) {
           bad("posenc.kind", v, "expected none, rope-g, rope-l, ape-g, ape-l or mlp");
         }
       },
       [](const C& c) { return to_string(c.model.posenc); }},
      number_key("posenc.base_wavelength", &C::model, &MastConfig::base_wavelength),
      number_key("attention.window_radius", &C::model, &MastConfig::window_radius),
      {"attention.scaled", [](C& c, const std::string& v) { c.model.scaled_attention = to_bool("attention.scaled", v); },
       [](const C& c) { return std::string(c.model.scaled_attention ? "true" : "false"); }},
      {"comm.kind", [](C& c, const std::string& v) {
         try {
           c.comm.kind = parse_graph_kind(v);
         } catch (const std::exception&) {
           bad("comm.kind", v, "expected knn or disk");
         }
       },
       [](const C& c) { return to_string(c.comm.kind); }},
      int_key("comm.k", &C::comm, &GraphSpec::k),
      number_key("comm.radius", &C::comm, &GraphSpec::radius),
      {"comm.tau", [](C& c, const std::string& v) { c.tau = to_double("comm.tau", v); },
       [](const C& c) { return fmt(c.tau); }},
      {"env.scenario", [](C& c, const std::string& v) { c.scenario = v; }, [](const C& c) { return c.scenario; }},
      {"env.agents", [](C& c, const std::string& v) { c.agents = static_cast<int>(to_int("env.agents", v)); },
       [](const C& c) { return std::to_string(c.agents); }},
      number_key("env.width", &C::env, &DanParams::width),
      number_key("env.dt", &C::env, &DanParams::dt),
      number_key("env.u_max", &C::env, &DanParams::u_max),
      number_key("env.goal_radius", &C::env, &DanParams::goal_radius),
      number_key("env.min_separation", &C::env, &DanParams::min_separation),
      number_key("env.robot_radius", &C::env, &DanParams::robot_radius),
      int_key("env.steps", &C::env, &DanParams::steps),
      {"train.lr", [](C& c, const std::string& v) { c.train.optimizer.lr = to_double("train.lr", v); },
       [](const C& c) { return fmt(c.train.optimizer.lr); }},
      {"train.weight_decay",
       [](C& c, const std::string& v) { c.train.optimizer.weight_decay = to_double("train.weight_decay", v); },
       [](const C& c) { return fmt(c.train.optimizer.weight_decay); }},
      number_key("train.dropout", &C::train, &TrainConfig::dropout),
      int_key("train.epochs", &C::train, &TrainConfig::epochs),
      int_key("train.rollouts", &C::train, &TrainConfig::rollouts),
      int_key("train.steps", &C::train, &TrainConfig::steps),
      int_key("train.batch", &C::train, &TrainConfig::batch),
      int_key("train.updates_per_epoch", &C::train, &TrainConfig::updates_per_epoch),
      number_key("train.expert_mix", &C::train, &TrainConfig::expert_mix),
      int_key("train.capacity", &C::train, &TrainConfig::capacity),
      number_key("train.clip_norm", &C::train, &TrainConfig::clip_norm),
      int_key("train.validation_episodes", &C::train, &TrainConfig::validation_episodes),
      int_key("train.validation_steps", &C::train, &TrainConfig::validation_steps),
      int_key("train.heldout_episodes", &C::train, &TrainConfig::heldout_episodes),
      int_key("train.seed", &C::train, &TrainConfig::seed),
  };
  return table;
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
  model.obs_dim = kDanObsDim;
  model.obs_scale = 0.01;
  model.base_wavelength = env.width;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  for (const Key& k : keys()) {
    if (k.name == key) {
      k.set(*this, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::string ExperimentConfig::dump() const {
  std::string out;
  for (const Key& k : keys()) out += k.name + " = " + k.get(*this) + "\n";
  return out;
}

void ExperimentConfig::validate() const {
  auto wrap = [](const char* area, const auto& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(std::string(area) + ": " + e.what());
    }
  };
  wrap("model", [&] { model.validate(); });
  wrap("train", [&] { train.validate(); });
  wrap("env.scenario", [&] { parse_scenario(scenario); });
  if (agents < kObservedNeighbors + 1) {
    throw ConfigError("config key 'env.agents': need at least " + std::to_string(kObservedNeighbors + 1) + " agents");
  }
  if (model.obs_dim != kDanObsDim) throw ConfigError("model obs_dim must be " + std::to_string(kDanObsDim));
  if (!(env.width > 0.0 && env.dt > 0.0 && env.u_max > 0.0 && env.goal_radius > 0.0)) {
    throw ConfigError("env: width, dt, u_max and goal_radius must be positive");
  }
  if (!(tau >= 0.0) || std::isinf(tau)) throw ConfigError("config key 'comm.tau': must be finite and >= 0");
  if (comm.kind == GraphKind::knn && comm.k < 1) throw ConfigError("config key 'comm.k': must be at least 1");
  if (comm.kind == GraphKind::disk && !(comm.radius > 0.0)) throw ConfigError("config key 'comm.radius': must be positive");
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  bool wavelength_set = false;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(number) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(number) + ": empty key");
    if (value.empty()) throw ConfigError("config key '" + key + "': empty value");
    cfg.set(key, value);
    wavelength_set = wavelength_set || key == "posenc.base_wavelength";
  }
  if (!wavelength_set) cfg.model.base_wavelength = cfg.env.width;
  cfg.model.u_max = cfg.env.u_max;
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void apply_seed_override(ExperimentConfig& cfg) {
  const char* seed = std::getenv("MAST_SEED");
  if (seed == nullptr || *seed == '\0') return;
  cfg.set("train.seed", seed);
}

}  // namespace mast
