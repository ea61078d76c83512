#ifndef ISCOM_SCHEDULER_HPP
#define ISCOM_SCHEDULER_HPP

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "iscom/core.hpp"
#include "iscom/nn.hpp"

namespace iscom::scheduler {

/// One completed frame as seen by the scheduler.
struct FrameRecord {
  double transmitted_fraction = 0.0;  // transmitted points / original points
  double decode_time_s = 0.0;
  double bandwidth_mbps = 0.0;
};

struct StateConfig {
  std::size_t k = 8;
  double t_ref_s = 1.0 / 30.0;  // decode time that counts as full compute headroom
  double b_ref_mbps = 100.0;    // bandwidth that counts as saturated

  void validate() const;
};

/// (n, c, b) histories, oldest first, each of length k and within [0, 1].
struct SchedulerState {
  std::vector<double> n;
  std::vector<double> c;
  std::vector<double> b;

  std::size_t k() const { return n.size(); }
  /// n, then c, then b.
  std::vector<double> flat() const;
};

/// Uses the last k records; missing history is padded with 0.5 at the front.
SchedulerState build_state(const std::vector<FrameRecord>& log, const StateConfig& cfg);

struct RewardSpec {
  double eta = 0.5;
  double f_target = 30.0;
  std::vector<double> accuracy;  // L per model, in [0, 1]

  void validate() const;
};

/// eta * min(1, fps / f_target) + (1 - eta) * L[model]
double reward(double fps, std::size_t model, const RewardSpec& spec);

/// Shared dense trunk with relu, a softmax actor head and a scalar critic head.
struct Policy {
  nn::Network trunk;   // dense(3k -> H), relu
  nn::Network actor;   // dense(H -> |A|)
  nn::Network critic;  // dense(H -> 1)

  static Policy create(std::size_t state_size, std::size_t hidden, std::size_t actions,
                       std::uint64_t seed);

  std::size_t state_size() const { return trunk.input_features(); }
  std::size_t hidden() const { return trunk.output_features(); }
  std::size_t actions() const { return actor.output_features(); }

  struct Output {
    std::vector<double> logits;
    std::vector<double> probs;
    double value = 0.0;
  };
  Output evaluate(const std::vector<double>& state) const;
};

std::vector<double> softmax(const std::vector<double>& logits);
double entropy(const std::vector<double>& probs);
/// Argmax with the lowest index winning ties.
std::size_t greedy_action(const std::vector<double>& logits);
std::size_t sample_action(const std::vector<double>& probs, Rng& rng);

enum class ActionMode { kSample, kGreedy };

std::size_t select_action(const Policy& policy, const SchedulerState& state, ActionMode mode,
                          Rng& rng);
std::size_t select_action(const Policy& policy, const SchedulerState& state, ActionMode mode,
                          std::uint64_t seed);

struct Step {
  std::vector<double> state;
  std::size_t action = 0;
  double reward = 0.0;
};

using Trajectory = std::vector<Step>;

/// R_t = sum_j gamma^j r_{t+j} to the end of the trajectory.
std::vector<double> discounted_returns(const std::vector<double>& rewards, double gamma);

struct PolicyGradients {
  nn::Gradients trunk, actor, critic;

  void scale(double s);
  bool all_finite() const;
};

struct A3cConfig {
  double gamma = 0.88;
  double entropy_weight = 0.01;
  double value_weight = 0.5;
};

struct A3cLoss {
  double objective = 0.0;  // actor + entropy + critic terms, as differentiated
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double mean_entropy = 0.0;
  std::vector<double> advantages;
};

/// Gradients of
///   sum_t [ -log pi(a_t|s_t) A_t - w_H H(pi(.|s_t)) + w_V (R_t - V(s_t))^2 ]
/// with A_t = R_t - V(s_t) held constant. `advantages`, when given, replaces A_t.
A3cLoss a3c_gradients(const Policy& policy, const Trajectory& traj, const A3cConfig& cfg,
                      PolicyGradients& grads, const std::vector<double>* advantages = nullptr);

/// Adam over the three policy networks.
class PolicyOptimizer {
 public:
  explicit PolicyOptimizer(double lr) : trunk_(lr), actor_(lr), critic_(lr) {}
  void apply(Policy& policy, const PolicyGradients& grads);

 private:
  nn::AdamOptimizer trunk_, actor_, critic_;
};

/// Computes the worker gradients and applies them to the global policy in one step.
A3cLoss a3c_update(Policy& global, PolicyOptimizer& opt, const Trajectory& traj,
                   const A3cConfig& cfg);

struct EnvStep {
  SchedulerState state;
  double reward = 0.0;
  bool done = false;
  double fps = 0.0;
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual SchedulerState reset(std::uint64_t seed) = 0;
  virtual EnvStep step(std::size_t action) = 0;
  virtual std::size_t action_count() const = 0;
  virtual std::size_t history() const = 0;  // k
  virtual std::unique_ptr<Environment> clone() const = 0;
};

/// Two equiprobable contexts, drawn per step and visible only through the
/// bandwidth history. Model 2 is best under high bandwidth, model 0 under low.
class ContextualBanditEnv : public Environment {
 public:
  explicit ContextualBanditEnv(double eta = 0.5, std::size_t episode_length = 32,
                               std::size_t k = 8);

  SchedulerState reset(std::uint64_t seed) override;
  EnvStep step(std::size_t action) override;
  std::size_t action_count() const override { return 3; }
  std::size_t history() const override { return k_; }
  std::unique_ptr<Environment> clone() const override;

  /// Expected per-step reward of the best action in each context.
  double oracle_mean_reward() const;
  double expected_reward(bool high_bandwidth, std::size_t action) const;
  const RewardSpec& reward_spec() const { return spec_; }

 private:
  SchedulerState observe();

  RewardSpec spec_;
  std::size_t length_;
  std::size_t k_;
  std::size_t t_ = 0;
  bool high_ = true;
  Rng rng_{0};
};

struct SchedulerTrainConfig {
  std::size_t workers = 1;
  std::size_t epochs = 500;
  double lr = 0.005;
  std::size_t hidden = 96;
  A3cConfig a3c;
  bool decay_entropy = true;  // linear decay of the entropy weight to 0
  std::uint64_t seed = 1;

  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_reward = 0.0;
  double entropy = 0.0;
};

struct TrainResult {
  Policy policy;
  std::vector<EpochStats> curve;
};

/// A3C: each worker owns an environment clone and a snapshot of the global
/// policy, runs one episode per epoch and submits its gradients to a single
/// serialized applier. workers = 1 runs sequentially and is bit-reproducible.
TrainResult train_scheduler(const Environment& env, const SchedulerTrainConfig& cfg);

/// Mean per-step reward of the greedy policy over `episodes` seeded episodes.
double evaluate_greedy(const Policy& policy, const Environment& env, std::size_t episodes,
                       std::uint64_t seed);

/// "epoch,mean_reward,entropy" with an optional leading "# ..." comment line.
std::string curve_csv(const std::vector<EpochStats>& curve, const std::string& comment = "");

std::vector<std::uint8_t> serialize_policy(const Policy& policy);
Policy deserialize_policy(const std::vector<std::uint8_t>& bytes);
void save_policy(const Policy& policy, const std::string& path);
Policy load_policy(const std::string& path);

}  // namespace iscom::scheduler

#endif  // ISCOM_SCHEDULER_HPP
