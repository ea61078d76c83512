#include "iscom/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "iscom/model_io.hpp"

namespace iscom::scheduler {

namespace {

constexpr std::uint8_t kTrunkTag = 1;
constexpr std::uint8_t kReluTag = 2;
constexpr std::uint8_t kActorTag = 5;
constexpr std::uint8_t kCriticTag = 6;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

void check_unit(double v, const char* what) {
  if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument(std::string(what) + " must be in [0, 1]");
}

struct Forward {
  nn::ForwardCache trunk, actor, critic;
  nn::Tensor hidden, logits, value;
};

Forward run(const Policy& p, const nn::Tensor& states) {
  Forward f;
  f.hidden = p.trunk.forward(states, &f.trunk);
  f.logits = p.actor.forward(f.hidden, &f.actor);
  f.value = p.critic.forward(f.hidden, &f.critic);
  return f;
}

nn::Tensor stack_states(const Trajectory& traj, std::size_t width) {
  nn::Tensor t(traj.size(), width);
  for (std::size_t i = 0; i < traj.size(); ++i) {
    if (traj[i].state.size() != width) {
      throw InvalidArgument("trajectory state has " + std::to_string(traj[i].state.size()) +
                            " values, policy expects " + std::to_string(width));
    }
    std::copy(traj[i].state.begin(), traj[i].state.end(), t.data.begin() + i * width);
  }
  return t;
}

std::vector<double> row(const nn::Tensor& t, std::size_t r) {
  const std::size_t c = t.cols();
  return {t.data.begin() + r * c, t.data.begin() + (r + 1) * c};
}

}  // namespace

void StateConfig::validate() const {
  if (k == 0) throw InvalidArgument("state window k must be positive");
  if (!(t_ref_s > 0.0) || !(b_ref_mbps > 0.0)) {
    throw InvalidArgument("t_ref and b_ref must be positive");
  }
}

std::vector<double> SchedulerState::flat() const {
  std::vector<double> out;
  out.reserve(3 * n.size());
  out.insert(out.end(), n.begin(), n.end());
  out.insert(out.end(), c.begin(), c.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

SchedulerState build_state(const std::vector<FrameRecord>& log, const StateConfig& cfg) {
  cfg.validate();
  SchedulerState s;
  s.n.assign(cfg.k, 0.5);
  s.c.assign(cfg.k, 0.5);
  s.b.assign(cfg.k, 0.5);
  const std::size_t have = std::min(cfg.k, log.size());
  const std::size_t offset = cfg.k - have;
  for (std::size_t i = 0; i < have; ++i) {
    const FrameRecord& f = log[log.size() - have + i];
    s.n[offset + i] = clamp01(f.transmitted_fraction);
    s.c[offset + i] = f.decode_time_s > 0.0 ? clamp01(cfg.t_ref_s / f.decode_time_s) : 1.0;
    s.b[offset + i] = clamp01(f.bandwidth_mbps / cfg.b_ref_mbps);
  }
  return s;
}

void RewardSpec::validate() const {
  check_unit(eta, "eta");
  if (!(f_target > 0.0)) throw InvalidArgument("f_target must be positive");
  if (accuracy.empty()) throw InvalidArgument("accuracy table is empty");
  for (double l : accuracy) check_unit(l, "accuracy table entry");
}

double reward(double fps, std::size_t model, const RewardSpec& spec) {
  if (model >= spec.accuracy.size()) {
    throw InvalidArgument("unknown model " + std::to_string(model) + " (table has " +
                          std::to_string(spec.accuracy.size()) + " entries)");
  }
  if (!std::isfinite(fps) || fps < 0.0) throw InvalidArgument("fps must be finite and >= 0");
  return spec.eta * std::min(1.0, fps / spec.f_target) + (1.0 - spec.eta) * spec.accuracy[model];
}

Policy Policy::create(std::size_t state_size, std::size_t hidden, std::size_t actions,
                      std::uint64_t seed) {
  if (state_size == 0 || hidden == 0 || actions == 0) {
    throw InvalidArgument("policy dimensions must be positive");
  }
  Policy p;
  p.trunk = nn::Network({nn::Layer::dense(state_size, hidden), nn::Layer::relu()});
  p.actor = nn::Network({nn::Layer::dense(hidden, actions)});
  p.critic = nn::Network({nn::Layer::dense(hidden, 1)});
  Rng rng(seed);
  p.trunk.init(rng);
  p.actor.init(rng);
  p.critic.init(rng);
  // Small heads start the actor near uniform and the critic near zero.
  for (auto& w : p.actor.layers[0].weights.data) w *= 0.1;
  for (auto& w : p.critic.layers[0].weights.data) w *= 0.1;
  return p;
}

Policy::Output Policy::evaluate(const std::vector<double>& state) const {
  if (state.size() != state_size()) {
    throw InvalidArgument("state has " + std::to_string(state.size()) + " values, policy expects " +
                          std::to_string(state_size()));
  }
  nn::Tensor x(1, state.size());
  x.data = state;
  const Forward f = run(*this, x);
  Output out;
  out.logits = f.logits.data;
  out.probs = softmax(out.logits);
  out.value = f.value.data[0];
  return out;
}

std::vector<double> softmax(const std::vector<double>& logits) {
  if (logits.empty()) throw InvalidArgument("softmax of empty logits");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += p[i] = std::exp(logits[i] - m);
  for (double& v : p) v /= sum;
  return p;
}

double entropy(const std::vector<double>& probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

std::size_t greedy_action(const std::vector<double>& logits) {
  if (logits.empty()) throw InvalidArgument("greedy_action of empty logits");
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

std::size_t sample_action(const std::vector<double>& probs, Rng& rng) {
  if (probs.empty()) throw InvalidArgument("sample_action of empty distribution");
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  // Rounding left u above the cumulative sum: take the last action with mass.
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0) return i;
  }
  return probs.size() - 1;
}

std::size_t select_action(const Policy& policy, const SchedulerState& state, ActionMode mode,
                          Rng& rng) {
  const Policy::Output out = policy.evaluate(state.flat());
  return mode == ActionMode::kGreedy ? greedy_action(out.logits) : sample_action(out.probs, rng);
}

std::size_t select_action(const Policy& policy, const SchedulerState& state, ActionMode mode,
                          std::uint64_t seed) {
  Rng rng(seed);
  return select_action(policy, state, mode, rng);
}

std::vector<double> discounted_returns(const std::vector<double>& rewards, double gamma) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw InvalidArgument("gamma must be in (0, 1)");
  std::vector<double> out(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) out[i] = acc = rewards[i] + gamma * acc;
  return out;
}

void PolicyGradients::scale(double s) {
  trunk.scale(s);
  actor.scale(s);
  critic.scale(s);
}

bool PolicyGradients::all_finite() const {
  return trunk.all_finite() && actor.all_finite() && critic.all_finite();
}

A3cLoss a3c_gradients(const Policy& policy, const Trajectory& traj, const A3cConfig& cfg,
                      PolicyGradients& grads, const std::vector<double>* advantages) {
  if (traj.empty()) throw InvalidArgument("a3c: empty trajectory");
  if (advantages && advantages->size() != traj.size()) {
    throw InvalidArgument("a3c: advantage count does not match the trajectory");
  }
  const std::size_t T = traj.size();
  const std::size_t A = policy.actions();
  std::vector<double> rewards(T);
  for (std::size_t t = 0; t < T; ++t) {
    if (!std::isfinite(traj[t].reward)) throw NumericError("a3c: non-finite reward at step " +
                                                           std::to_string(t));
    if (traj[t].action >= A) throw InvalidArgument("a3c: action out of range");
    rewards[t] = traj[t].reward;
  }
  const std::vector<double> returns = discounted_returns(rewards, cfg.gamma);

  const Forward f = run(policy, stack_states(traj, policy.state_size()));
  std::vector<double> adv(T);
  for (std::size_t t = 0; t < T; ++t) {
    adv[t] = advantages ? (*advantages)[t] : returns[t] - f.value.data[t];
  }
  grads.trunk = policy.trunk.zero_gradients();
  grads.actor = policy.actor.zero_gradients();
  grads.critic = policy.critic.zero_gradients();

  A3cLoss loss;
  loss.advantages.resize(T);
  nn::Tensor d_logits(T, A), d_value(T, 1);
  for (std::size_t t = 0; t < T; ++t) {
    const std::vector<double> z = row(f.logits, t);
    const std::vector<double> p = softmax(z);
    const double zmax = *std::max_element(z.begin(), z.end());
    double lse = 0.0;
    for (double v : z) lse += std::exp(v - zmax);
    lse = zmax + std::log(lse);
    const double h = entropy(p);
    const double v = f.value.data[t];
    const std::size_t a = traj[t].action;

    loss.advantages[t] = adv[t];
    loss.policy_loss += -(z[a] - lse) * adv[t];
    loss.value_loss += (returns[t] - v) * (returns[t] - v);
    loss.mean_entropy += h;
    for (std::size_t j = 0; j < A; ++j) {
      const double logp = z[j] - lse;
      d_logits.at(t, j) = -adv[t] * ((j == a ? 1.0 : 0.0) - p[j]) +
                          cfg.entropy_weight * p[j] * (logp + h);
    }
    d_value.at(t, 0) = -2.0 * cfg.value_weight * (returns[t] - v);
  }
  loss.objective = loss.policy_loss - cfg.entropy_weight * loss.mean_entropy +
                   cfg.value_weight * loss.value_loss;
  loss.mean_entropy /= static_cast<double>(T);

  nn::Tensor d_hidden = policy.actor.backward(f.actor, d_logits, grads.actor);
  const nn::Tensor d_hidden_v = policy.critic.backward(f.critic, d_value, grads.critic);
  for (std::size_t i = 0; i < d_hidden.size(); ++i) d_hidden.data[i] += d_hidden_v.data[i];
  policy.trunk.backward(f.trunk, d_hidden, grads.trunk);
  if (!grads.all_finite()) throw NumericError("a3c: non-finite gradient");
  return loss;
}

void PolicyOptimizer::apply(Policy& policy, const PolicyGradients& grads) {
  trunk_.step(policy.trunk, grads.trunk);
  actor_.step(policy.actor, grads.actor);
  critic_.step(policy.critic, grads.critic);
}

A3cLoss a3c_update(Policy& global, PolicyOptimizer& opt, const Trajectory& traj,
                   const A3cConfig& cfg) {
  PolicyGradients g;
  A3cLoss loss = a3c_gradients(global, traj, cfg, g);
  opt.apply(global, g);
  return loss;
}

// Contexts: fraction of the target frame rate each model reaches.
namespace {
constexpr double kBanditAccuracy[3] = {0.5, 0.75, 1.0};
constexpr double kBanditFpsHigh[3] = {1.0, 1.0, 1.0};
constexpr double kBanditFpsLow[3] = {1.0, 0.2, 0.0};
}  // namespace

ContextualBanditEnv::ContextualBanditEnv(double eta, std::size_t episode_length, std::size_t k)
    : length_(episode_length), k_(k) {
  if (episode_length == 0 || k == 0) throw InvalidArgument("episode length and k must be positive");
  spec_.eta = eta;
  spec_.f_target = 30.0;
  spec_.accuracy.assign(std::begin(kBanditAccuracy), std::end(kBanditAccuracy));
  spec_.validate();
}

SchedulerState ContextualBanditEnv::observe() {
  high_ = rng_.uniform() < 0.5;
  SchedulerState s;
  s.n.resize(k_);
  s.c.resize(k_);
  s.b.resize(k_);
  const double level = high_ ? 0.8 : 0.2;
  for (std::size_t i = 0; i < k_; ++i) {
    s.n[i] = rng_.uniform();
    s.c[i] = rng_.uniform();
    s.b[i] = clamp01(level + rng_.uniform(-0.15, 0.15));
  }
  return s;
}

SchedulerState ContextualBanditEnv::reset(std::uint64_t seed) {
  rng_ = Rng(seed);
  t_ = 0;
  return observe();
}

double ContextualBanditEnv::expected_reward(bool high_bandwidth, std::size_t action) const {
  if (action >= 3) throw InvalidArgument("bandit action out of range");
  const double frac = high_bandwidth ? kBanditFpsHigh[action] : kBanditFpsLow[action];
  return reward(frac * spec_.f_target, action, spec_);
}

EnvStep ContextualBanditEnv::step(std::size_t action) {
  if (t_ >= length_) throw InvalidArgument("bandit: step after the episode ended");
  const double frac = high_ ? kBanditFpsHigh[action % 3] : kBanditFpsLow[action % 3];
  EnvStep out;
  out.reward = expected_reward(high_, action);
  out.fps = frac * spec_.f_target;
  ++t_;
  out.done = t_ >= length_;
  out.state = observe();
  return out;
}

std::unique_ptr<Environment> ContextualBanditEnv::clone() const {
  return std::make_unique<ContextualBanditEnv>(*this);
}

double ContextualBanditEnv::oracle_mean_reward() const {
  double hi = 0.0, lo = 0.0;
  for (std::size_t a = 0; a < 3; ++a) {
    hi = std::max(hi, expected_reward(true, a));
    lo = std::max(lo, expected_reward(false, a));
  }
  return 0.5 * (hi + lo);
}

void SchedulerTrainConfig::validate() const {
  if (workers == 0) throw InvalidArgument("workers must be positive");
  if (!(lr > 0.0)) throw InvalidArgument("lr must be positive");
  if (hidden == 0) throw InvalidArgument("hidden width must be positive");
  if (!(a3c.gamma > 0.0 && a3c.gamma < 1.0)) throw InvalidArgument("gamma must be in (0, 1)");
  if (a3c.entropy_weight < 0.0 || a3c.value_weight < 0.0) {
    throw InvalidArgument("loss weights must be >= 0");
  }
}

namespace {

struct Episode {
  Trajectory traj;
  double mean_reward = 0.0;
};

Episode run_episode(const Policy& policy, Environment& env, std::uint64_t seed, ActionMode mode) {
  Episode ep;
  Rng rng(Rng::mix(seed, 0x5eed));
  SchedulerState s = env.reset(seed);
  for (std::size_t guard = 0;; ++guard) {
    if (guard > 1000000) throw InvalidArgument("environment never reported done");
    Step st;
    st.state = s.flat();
    const Policy::Output out = policy.evaluate(st.state);
    st.action = mode == ActionMode::kGreedy ? greedy_action(out.logits)
                                            : sample_action(out.probs, rng);
    EnvStep r = env.step(st.action);
    if (!std::isfinite(r.reward)) throw NumericError("environment returned a non-finite reward");
    st.reward = r.reward;
    ep.mean_reward += r.reward;
    ep.traj.push_back(std::move(st));
    if (r.done) break;
    s = std::move(r.state);
  }
  ep.mean_reward /= static_cast<double>(ep.traj.size());
  return ep;
}

}  // namespace

TrainResult train_scheduler(const Environment& env, const SchedulerTrainConfig& cfg) {
  cfg.validate();
  TrainResult result;
  const std::size_t state_size = 3 * env.history();
  result.policy = Policy::create(state_size, cfg.hidden, env.action_count(), Rng::mix(cfg.seed, 0));
  if (cfg.epochs == 0) return result;

  PolicyOptimizer opt(cfg.lr);
  std::mutex mu;
  std::vector<std::vector<EpochStats>> per_worker(cfg.workers,
                                                  std::vector<EpochStats>(cfg.epochs));

  auto worker = [&](std::size_t w) {
    std::unique_ptr<Environment> local = env.clone();
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
      A3cConfig a3c = cfg.a3c;
      if (cfg.decay_entropy) {
        a3c.entropy_weight *= 1.0 - static_cast<double>(e) / static_cast<double>(cfg.epochs);
      }
      Policy snapshot;
      {
        std::lock_guard<std::mutex> lock(mu);
        snapshot = result.policy;
      }
      const std::uint64_t seed = Rng::mix(cfg.seed, 1 + e * cfg.workers + w);
      const Episode ep = run_episode(snapshot, *local, seed, ActionMode::kSample);
      PolicyGradients g;
      const A3cLoss loss = a3c_gradients(snapshot, ep.traj, a3c, g);
      {
        std::lock_guard<std::mutex> lock(mu);
        opt.apply(result.policy, g);
      }
      per_worker[w][e] = {e + 1, ep.mean_reward, loss.mean_entropy};
    }
  };

  if (cfg.workers == 1) {
    worker(0);
  } else {
    std::vector<std::thread> threads;
    std::exception_ptr failure;
    std::mutex fail_mu;
    for (std::size_t w = 0; w < cfg.workers; ++w) {
      threads.emplace_back([&, w] {
        try {
          worker(w);
        } catch (...) {
          std::lock_guard<std::mutex> lock(fail_mu);
          if (!failure) failure = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);
  }

  result.curve.resize(cfg.epochs);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    EpochStats s{e + 1, 0.0, 0.0};
    for (const auto& wk : per_worker) {
      s.mean_reward += wk[e].mean_reward;
      s.entropy += wk[e].entropy;
    }
    s.mean_reward /= static_cast<double>(cfg.workers);
    s.entropy /= static_cast<double>(cfg.workers);
    result.curve[e] = s;
  }
  return result;
}

double evaluate_greedy(const Policy& policy, const Environment& env, std::size_t episodes,
                       std::uint64_t seed) {
  if (episodes == 0) throw InvalidArgument("evaluate_greedy needs at least one episode");
  std::unique_ptr<Environment> local = env.clone();
  double total = 0.0;
  for (std::size_t i = 0; i < episodes; ++i) {
    total += run_episode(policy, *local, Rng::mix(seed, i), ActionMode::kGreedy).mean_reward;
  }
  return total / static_cast<double>(episodes);
}

std::string curve_csv(const std::vector<EpochStats>& curve, const std::string& comment) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  if (!comment.empty()) os << "# " << comment << "\n";
  os << "epoch,mean_reward,entropy\n";
  for (const auto& s : curve) os << s.epoch << ',' << s.mean_reward << ',' << s.entropy << '\n';
  return os.str();
}

std::vector<std::uint8_t> serialize_policy(const Policy& policy) {
  io::ByteWriter w;
  io::write_preamble(w, codec::ModelType::kPolicy);
  w.u32(static_cast<std::uint32_t>(policy.state_size()));
  w.u32(static_cast<std::uint32_t>(policy.hidden()));
  w.u32(static_cast<std::uint32_t>(policy.actions()));
  w.u32(4);
  io::write_layer(w, policy.trunk.layers[0], kTrunkTag, codec::DType::kF32, nullptr);
  io::write_layer(w, policy.trunk.layers[1], kReluTag, codec::DType::kF32, nullptr);
  io::write_layer(w, policy.actor.layers[0], kActorTag, codec::DType::kF32, nullptr);
  io::write_layer(w, policy.critic.layers[0], kCriticTag, codec::DType::kF32, nullptr);
  return std::move(w.bytes());
}

Policy deserialize_policy(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  io::read_preamble(r, codec::ModelType::kPolicy);
  const std::uint32_t state_size = r.u32();
  const std::uint32_t hidden = r.u32();
  const std::uint32_t actions = r.u32();
  const std::uint32_t layers = r.u32();
  if (layers != 4) throw codec::FormatError("policy file must hold 4 layers");
  const std::vector<std::uint8_t> dense{kTrunkTag, kActorTag, kCriticTag};
  const std::uint8_t expected[4] = {kTrunkTag, kReluTag, kActorTag, kCriticTag};
  std::vector<nn::Layer> read;
  for (std::uint8_t tag : expected) {
    io::LayerRecord rec = io::read_layer(r, dense);
    if (rec.kind_tag != tag) throw codec::FormatError("unexpected layer order in policy file");
    if (rec.dtype != codec::DType::kF32) throw codec::FormatError("policy layers must be f32");
    read.push_back(std::move(rec.layer));
  }
  if (!r.at_end()) throw codec::FormatError("trailing bytes after the last layer");
  Policy p;
  p.trunk = nn::Network({read[0], read[1]});
  p.actor = nn::Network({read[2]});
  p.critic = nn::Network({read[3]});
  if (p.state_size() != state_size || p.hidden() != hidden || p.actions() != actions ||
      p.actor.input_features() != hidden || p.critic.input_features() != hidden ||
      p.critic.output_features() != 1) {
    throw codec::FormatError("layer shapes do not match the policy header");
  }
  return p;
}

void save_policy(const Policy& policy, const std::string& path) {
  io::write_file(path, serialize_policy(policy));
}

Policy load_policy(const std::string& path) { return deserialize_policy(io::read_file(path)); }

}  // namespace iscom::scheduler
