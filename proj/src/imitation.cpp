#include "mast/imitation.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace mast {

DanEnvironment::DanEnvironment(DanWorld world, GraphSpec graph) : world_(std::move(world)), graph_(graph) {}

CoverageEnvironment::CoverageEnvironment(CoverageState state) : state_(std::move(state)) {
  initial_cost_ = coverage_cost(state_.positions, *state_.idf);
}

CommGraph CoverageEnvironment::graph() const {
  return build_graph(state_.positions, GraphSpec{GraphKind::disk, 0, state_.params.comm_radius});
}

double CoverageEnvironment::metric() const {
  const double j = coverage_cost(state_.positions, *state_.idf);
  return initial_cost_ > 0.0 ? j / initial_cost_ : 0.0;
}

EnvFactory dan_factory(const Scenario& scenario, int agents, const DanParams& params, const GraphSpec& graph) {
  return [=](std::uint64_t seed) -> std::unique_ptr<Environment> {
    return std::make_unique<DanEnvironment>(init_scenario(scenario, agents, params, seed), graph);
  };
}

EnvFactory coverage_factory(const CoverageParams& params) {
  return [=](std::uint64_t seed) -> std::unique_ptr<Environment> {
    return std::make_unique<CoverageEnvironment>(init_coverage(params, seed));
  };
}

// ---------------------------------------------------------------------------

Matrix CentralMastController::act(const Environment& env) {
  const Matrix p = env.positions();
  return policy(*params_, cfg_, env.observations(), p, attention_mask(cfg_, p, env.graph()));
}

DecentralizedMastController::DecentralizedMastController(const ModelParams& params, const MastConfig& cfg,
                                                         double delay_ratio)
    : params_(&params), cfg_(cfg), delay_ratio_(delay_ratio) {
  if (!(delay_ratio >= 0.0) || !std::isfinite(delay_ratio)) throw std::invalid_argument("delay ratio must be finite and >= 0");
}

long rounds_in_step(long n, double delay_ratio) {
  if (n <= 0) return 0;
  if (!(delay_ratio > 0.0)) throw std::invalid_argument("rounds_in_step: delay ratio must be positive");
  const auto fired = [&](long k) { return static_cast<long>(std::floor(static_cast<double>(k) / delay_ratio + 1e-9)); };
  return fired(n) - fired(n - 1);
}

Matrix decentralized_actions(const ModelParams& params, const MastConfig& cfg, const MessageStore& store, double since) {
  const int n = store.size();
  Matrix u(n, cfg.action_dim);
  for (int i = 0; i < n; ++i) {
    const LocalView view = gather_local(store, i, since);
    const Matrix y = forward(params, cfg, view.embeddings, view.positions, attention_mask(cfg, view.positions, view.graph));
    u.row(i) = readout(params, cfg, y.topRows(1));
  }
  return u;
}

Matrix DecentralizedMastController::act(const Environment& env) {
  const Matrix p = env.positions();
  const Matrix x = perceive(*params_, cfg_, env.observations());
  if (store_.size() != env.agents()) store_ = MessageStore(env.agents());
  const CommGraph graph = env.graph();
  double since = 0.0;
  if (delay_ratio_ == 0.0) {
    since = store_.clock();
    const int rounds = max_finite_eccentricity(graph) + 1;
    for (int r = 0; r < rounds; ++r) store_.step(graph, env.dt() / rounds, x, p);
  } else {
    const long rounds = rounds_in_step(step_, delay_ratio_);
    for (long r = 0; r < rounds; ++r) store_.step(graph, delay_ratio_ * env.dt(), x, p);
  }
  store_.refresh_self(graph, x, p);
  ++step_;
  return decentralized_actions(*params_, cfg_, store_, since);
}

std::vector<double> rollout(Environment& env, Controller& controller, int steps) {
  std::vector<double> metric{env.metric()};
  for (int t = 0; t < steps; ++t) {
    env.step(controller.act(env));
    metric.push_back(env.metric());
  }
  return metric;
}

// ---------------------------------------------------------------------------

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("ReplayBuffer: capacity must be positive");
}

void ReplayBuffer::push(Sample sample) {
  if (samples_.size() == capacity_) samples_.pop_front();
  samples_.push_back(std::move(sample));
}

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t count, Rng& rng) const {
  // Partial Fisher-Yates over [0, size).
  std::vector<std::size_t> idx(samples_.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t take = std::min(count, idx.size());
  for (std::size_t i = 0; i < take; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(take);
  return idx;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (!(optimizer.lr > 0.0)) fail("lr must be positive");
  if (optimizer.weight_decay < 0.0) fail("weight_decay must be >= 0");
  if (dropout != 0.0) fail("only dropout = 0 is supported");
  if (epochs < 0 || rollouts < 1 || steps < 1 || batch < 1 || updates_per_epoch < 0) fail("counts must be positive");
  if (!(expert_mix >= 0.0 && expert_mix <= 1.0)) fail("expert_mix must lie in [0, 1]");
  if (capacity < 1) fail("capacity must be positive");
  if (!(clip_norm > 0.0)) fail("clip_norm must be positive");
  if (validation_episodes < 1 || validation_steps < 0 || heldout_episodes < 0) fail("validation counts must be positive");
}

std::uint64_t episode_seed(std::uint64_t seed, SeedDomain domain, std::uint64_t index) {
  return splitmix64(splitmix64(seed ^ (static_cast<std::uint64_t>(domain) * 0x9E3779B97F4A7C15ULL)) + index);
}

void collect_epoch(const EnvFactory& envs, const std::vector<std::uint64_t>& seeds, int steps, double mix,
                   Controller& model, ReplayBuffer& buffer) {
  const auto expert_runs = static_cast<std::size_t>(std::llround(mix * static_cast<double>(seeds.size())));
  ExpertController expert;
  for (std::size_t e = 0; e < seeds.size(); ++e) {
    auto env = envs(seeds[e]);
    Controller& actor = e < expert_runs ? static_cast<Controller&>(expert) : model;
    for (int t = 0; t < steps; ++t) {
      Sample s{env->observations(), env->positions(), env->graph(), env->expert()};
      const Matrix u = &actor == &expert ? s.expert : actor.act(*env);
      buffer.push(std::move(s));
      env->step(u);
    }
  }
}

namespace {

Var sample_loss_var(const BoundModel& model, const Sample& s) {
  const MastConfig& cfg = model.config();
  Var u = policy(model, s.observations, s.positions, attention_mask(cfg, s.positions, s.graph));
  return mse_rows(u, s.expert);
}

}  // namespace

double sample_loss(const ModelParams& params, const MastConfig& cfg, const Sample& sample) {
  Tape tape;
  BoundModel model(tape, params, cfg, false);
  return sample_loss_var(model, sample).value()(0, 0);
}

double mean_loss(const ModelParams& params, const MastConfig& cfg, const std::vector<Sample>& samples) {
  if (samples.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : samples) total += sample_loss(params, cfg, s);
  return total / static_cast<double>(samples.size());
}

double loss_and_gradients(const ModelParams& params, const MastConfig& cfg, const std::vector<const Sample*>& batch,
                          std::vector<Matrix>& grads) {
  grads.clear();
  for (const auto& t : params.tensors()) grads.push_back(Matrix::Zero(t.value.rows(), t.value.cols()));
  if (batch.empty()) return 0.0;
  const double inv = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (const Sample* s : batch) {
    Tape tape;
    BoundModel model(tape, params, cfg, true);
    Var l = sample_loss_var(model, *s);
    tape.backward(l);
    loss += l.value()(0, 0) * inv;
    for (std::size_t k = 0; k < grads.size(); ++k) grads[k] += inv * tape.grad(model.vars()[k]);
  }
  return loss;
}

double train_step(const ReplayBuffer& buffer, ModelParams& params, AdamWState& state, const MastConfig& cfg,
                  const TrainConfig& train, Rng& rng) {
  if (buffer.empty()) throw std::logic_error("train_step: replay buffer is empty");
  std::vector<const Sample*> batch;
  for (std::size_t i : buffer.sample_indices(static_cast<std::size_t>(train.batch), rng)) batch.push_back(&buffer[i]);
  std::vector<Matrix> grads;
  const double loss = loss_and_gradients(params, cfg, batch, grads);
  clip_global_norm(grads, train.clip_norm);
  std::vector<Matrix> values;
  values.reserve(params.size());
  for (auto& t : params.tensors()) values.push_back(std::move(t.value));
  adamw_step(values, grads, state, train.optimizer);
  for (std::size_t k = 0; k < values.size(); ++k) params.tensors()[k].value = std::move(values[k]);
  return loss;
}

Estimate estimate(std::vector<double> values) {
  Estimate e;
  e.values = std::move(values);
  const auto n = static_cast<double>(e.values.size());
  if (e.values.empty()) return e;
  e.mean = std::accumulate(e.values.begin(), e.values.end(), 0.0) / n;
  if (e.values.size() > 1) {
    double ss = 0.0;
    for (double v : e.values) ss += (v - e.mean) * (v - e.mean);
    e.half_width = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  return e;
}

Estimate validate(const EnvFactory& envs, const std::vector<std::uint64_t>& seeds, int steps,
                  const ControllerFactory& controllers) {
  std::vector<double> terminal;
  for (std::uint64_t seed : seeds) {
    auto env = envs(seed);
    auto controller = controllers();
    terminal.push_back(rollout(*env, *controller, steps).back());
  }
  return estimate(std::move(terminal));
}

TrainResult train(const MastConfig& cfg, const TrainConfig& tc, const EnvFactory& envs,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  cfg.validate();
  tc.validate();
  const auto start = std::chrono::steady_clock::now();
  Rng init_rng(episode_seed(tc.seed, SeedDomain::init, 0));
  TrainResult result{init_params(cfg, init_rng), {}};
  ModelParams& params = result.params;
  AdamWState opt;
  Rng batch_rng(episode_seed(tc.seed, SeedDomain::init, 1));
  ReplayBuffer buffer(tc.capacity);

  std::vector<Sample> heldout;
  {
    ReplayBuffer hb(static_cast<std::size_t>(std::max(1, tc.heldout_episodes * tc.steps)));
    std::vector<std::uint64_t> seeds;
    for (int e = 0; e < tc.heldout_episodes; ++e) seeds.push_back(episode_seed(tc.seed, SeedDomain::heldout, static_cast<std::uint64_t>(e)));
    ExpertController expert;
    collect_epoch(envs, seeds, tc.steps, 1.0, expert, hb);
    for (std::size_t i = 0; i < hb.size(); ++i) heldout.push_back(hb[i]);
  }
  std::vector<std::uint64_t> val_seeds;
  for (int e = 0; e < tc.validation_episodes; ++e) val_seeds.push_back(episode_seed(tc.seed, SeedDomain::validation, static_cast<std::uint64_t>(e)));

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::vector<std::uint64_t> seeds;
    for (int e = 0; e < tc.rollouts; ++e)
      seeds.push_back(episode_seed(tc.seed, SeedDomain::train, static_cast<std::uint64_t>(epoch - 1) * static_cast<std::uint64_t>(tc.rollouts) + static_cast<std::uint64_t>(e)));
    CentralMastController model(params, cfg);
    collect_epoch(envs, seeds, tc.steps, tc.expert_mix, model, buffer);

    const int updates = tc.updates_per_epoch > 0 ? tc.updates_per_epoch : tc.rollouts * tc.steps;
    double loss = 0.0;
    for (int u = 0; u < updates; ++u) loss += train_step(buffer, params, opt, cfg, tc, batch_rng);

    EpochLog row;
    row.epoch = epoch;
    row.train_loss = loss / updates;
    row.heldout_loss = mean_loss(params, cfg, heldout);
    const Estimate val = validate(envs, val_seeds, tc.validation_steps,
                                  [&] { return std::make_unique<CentralMastController>(params, cfg); });
    row.val_metric = val.mean;
    row.val_half_width = val.half_width;
    row.wallclock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return result;
}

void write_training_csv(const std::vector<EpochLog>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "epoch,train_loss,val_metric,wallclock_s,heldout_loss\n";
  for (const auto& r : log) {
    out << r.epoch << ',' << r.train_loss << ',' << r.val_metric << ',';
    out.precision(3);
    out << std::fixed << r.wallclock_s << std::defaultfloat;
    out.precision(17);
    out << ',' << r.heldout_loss << '\n';
  }
}

}  // namespace mast
