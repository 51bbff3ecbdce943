#pragma once

// Imitation learning for MAST: environments behind a common interface,
// controllers (expert, central MAST, decentralized MAST over the delayed relay),
// a replay buffer and a deterministic trainer.

#include "mast/comm.hpp"
#include "mast/coverage.hpp"
#include "mast/dan.hpp"
#include "mast/network.hpp"

#include <deque>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mast {

class Environment {
public:
  virtual ~Environment() = default;

  virtual int agents() const = 0;
  virtual int obs_dim() const = 0;
  virtual Matrix observations() const = 0;
  virtual Matrix positions() const = 0;
  virtual CommGraph graph() const = 0;
  /// Expert velocities at the current state.
  virtual Matrix expert() const = 0;
  virtual void step(const Matrix& velocities) = 0;
  /// DAN: success rate. Coverage: cost normalized by the initial cost.
  virtual double metric() const = 0;
  virtual double u_max() const = 0;
  virtual double dt() const = 0;
};

using EnvFactory = std::function<std::unique_ptr<Environment>(std::uint64_t seed)>;

class DanEnvironment : public Environment {
public:
  DanEnvironment(DanWorld world, GraphSpec graph);

  int agents() const override { return world_.size(); }
  int obs_dim() const override { return kDanObsDim; }
  Matrix observations() const override { return observe_all(world_); }
  Matrix positions() const override { return world_.agents; }
  CommGraph graph() const override { return build_graph(world_.agents, graph_); }
  Matrix expert() const override { return lsap_policy(world_); }
  void step(const Matrix& velocities) override { mast::step(world_, velocities); }
  double metric() const override { return success_rate(world_); }
  double u_max() const override { return world_.params.u_max; }
  double dt() const override { return world_.params.dt; }

  const DanWorld& world() const { return world_; }
  const GraphSpec& graph_spec() const { return graph_; }

private:
  DanWorld world_;
  GraphSpec graph_;
};

class CoverageEnvironment : public Environment {
public:
  explicit CoverageEnvironment(CoverageState state);

  int agents() const override { return state_.size(); }
  int obs_dim() const override { return coverage_obs_dim(state_.params); }
  Matrix observations() const override { return observe_coverage_all(state_); }
  Matrix positions() const override { return state_.positions; }
  CommGraph graph() const override;
  Matrix expert() const override { return cvt_policy(state_, CvtVariant::clairvoyant); }
  void step(const Matrix& velocities) override { mast::step(state_, velocities); }
  double metric() const override;
  double u_max() const override { return state_.params.u_max; }
  double dt() const override { return state_.params.dt; }

  const CoverageState& state() const { return state_; }

private:
  CoverageState state_;
  double initial_cost_ = 0.0;
};

EnvFactory dan_factory(const Scenario& scenario, int agents, const DanParams& params, const GraphSpec& graph);
EnvFactory coverage_factory(const CoverageParams& params);

// ---------------------------------------------------------------------------

/// A per-episode policy. act() is called once per control step, in order.
class Controller {
public:
  virtual ~Controller() = default;
  virtual Matrix act(const Environment& env) = 0;
};

class ExpertController : public Controller {
public:
  Matrix act(const Environment& env) override { return env.expert(); }
};

class ZeroController : public Controller {
public:
  Matrix act(const Environment& env) override { return Matrix::Zero(env.agents(), 2); }
};

/// One forward pass over all agents with the training mask (window, plus component mask for MAST-M).
class CentralMastController : public Controller {
public:
  CentralMastController(const ModelParams& params, const MastConfig& cfg) : params_(&params), cfg_(cfg) {}
  Matrix act(const Environment& env) override;

private:
  const ModelParams* params_;
  MastConfig cfg_;
};

/// Each agent runs MAST on the embeddings it has received through the relay.
/// delay_ratio = tau / dt; 0 means full propagation within every control step.
class DecentralizedMastController : public Controller {
public:
  DecentralizedMastController(const ModelParams& params, const MastConfig& cfg, double delay_ratio);
  Matrix act(const Environment& env) override;

  const MessageStore& store() const { return store_; }

private:
  const ModelParams* params_;
  MastConfig cfg_;
  double delay_ratio_;
  long step_ = 0;
  MessageStore store_;
};

using ControllerFactory = std::function<std::unique_ptr<Controller>()>;

/// Number of relay rounds completing in ((n-1) dt, n dt] for delay ratio tau/dt (n >= 1; 0 for n = 0).
long rounds_in_step(long n, double delay_ratio);

/// Per-agent decentralized MAST from a relay store: gathers, forwards on the local view
/// (window mask, AND-ed for MAST-M with reachability over the relayed in-neighbor lists),
/// and reads out the agent's own row.
/// Only entries stamped at or after `since` are used.
Matrix decentralized_actions(const ModelParams& params, const MastConfig& cfg, const MessageStore& store,
                             double since = 0.0);

/// Metric after every step, starting with the initial state: steps + 1 values.
std::vector<double> rollout(Environment& env, Controller& controller, int steps);

// ---------------------------------------------------------------------------

struct Sample {
  Matrix observations;  // N x obs_dim
  Matrix positions;     // N x 2
  CommGraph graph;
  Matrix expert;        // N x 2
};

class ReplayBuffer {
public:
  explicit ReplayBuffer(std::size_t capacity);

  void push(Sample sample);
  std::size_t size() const { return samples_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return samples_.empty(); }
  const Sample& operator[](std::size_t i) const { return samples_[i]; }
  /// min(count, size()) distinct indices, uniformly at random.
  std::vector<std::size_t> sample_indices(std::size_t count, Rng& rng) const;

private:
  std::size_t capacity_;
  std::deque<Sample> samples_;
};

struct TrainConfig {
  AdamWConfig optimizer;
  double dropout = 0.0;  // kept for config completeness; only 0 is supported
  int epochs = 500;
  int rollouts = 32;        // episodes per epoch
  int steps = 200;          // T
  int batch = 128;
  int updates_per_epoch = 0;  // 0: one update per collected step
  double expert_mix = 0.5;
  std::size_t capacity = 20000;
  double clip_norm = 10.0;
  int validation_episodes = 32;
  int validation_steps = 200;
  int heldout_episodes = 2;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Episode seeds: independent streams per purpose.
enum class SeedDomain : std::uint64_t { train = 1, validation = 2, heldout = 3, evaluation = 4, init = 5 };
std::uint64_t episode_seed(std::uint64_t seed, SeedDomain domain, std::uint64_t index);

/// Rolls `episodes` episodes of `steps` steps, storing one tuple per step. The first
/// round(mix * episodes) episodes act with the expert, the rest with `model`.
/// Labels are always the expert's velocities at the visited state.
void collect_epoch(const EnvFactory& envs, const std::vector<std::uint64_t>& seeds, int steps, double mix,
                   Controller& model, ReplayBuffer& buffer);

/// Mean over agents of ||u - u_expert||^2 for one tuple.
double sample_loss(const ModelParams& params, const MastConfig& cfg, const Sample& sample);
double mean_loss(const ModelParams& params, const MastConfig& cfg, const std::vector<Sample>& samples);

/// Loss and parameter gradients (ModelParams order) averaged over the given tuples.
double loss_and_gradients(const ModelParams& params, const MastConfig& cfg, const std::vector<const Sample*>& batch,
                          std::vector<Matrix>& grads);

/// One minibatch update: sample, average gradients, clip to global norm, AdamW. Returns the batch loss.
double train_step(const ReplayBuffer& buffer, ModelParams& params, AdamWState& state, const MastConfig& cfg,
                  const TrainConfig& train, Rng& rng);

struct Estimate {
  double mean = 0.0;
  double half_width = 0.0;  // 95% normal-approximation half-width, 1.96 * stderr
  std::vector<double> values;
};

Estimate estimate(std::vector<double> values);

/// Terminal metric of each episode under fresh controllers.
Estimate validate(const EnvFactory& envs, const std::vector<std::uint64_t>& seeds, int steps,
                  const ControllerFactory& controllers);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
  double val_half_width = 0.0;
  double heldout_loss = 0.0;
  double wallclock_s = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochLog> log;
};

TrainResult train(const MastConfig& cfg, const TrainConfig& train, const EnvFactory& envs,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

/// Header: epoch,train_loss,val_metric,wallclock_s,heldout_loss.
void write_training_csv(const std::vector<EpochLog>& log, const std::filesystem::path& path);

}  // namespace mast
