#pragma once

#include <cstdint>
#include <stdexcept>
#include <thread>
#include <vector>

#include "mixil/core.hpp"
#include "mixil/env.hpp"
#include "mixil/policy.hpp"
#include "mixil/util.hpp"

namespace mixil {

enum class MixRegime { turn, traj };

/// Per-trajectory executor plan: b_t = 1 means the teacher acts at turn t.
struct IndicatorPlan {
  std::vector<std::uint8_t> indicators;
  MixRegime regime = MixRegime::turn;
  double beta = 0.0;  // turn regime
  int kappa = 0;      // traj regime: student prefix length

  double teacher_fraction() const {
    if (indicators.empty()) return 0.0;
    double s = 0.0;
    for (auto b : indicators) s += b;
    return s / static_cast<double>(indicators.size());
  }
};

/// Turn-level mixture: each turn is executed by the teacher independently
/// with probability beta.
inline IndicatorPlan sample_turn_indicators(double beta, int t_max, Rng& rng) {
  if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("beta must lie in [0,1]");
  IndicatorPlan plan;
  plan.regime = MixRegime::turn;
  plan.beta = beta;
  plan.indicators.resize(static_cast<std::size_t>(t_max));
  for (auto& b : plan.indicators) b = (uniform01(rng) < beta) ? 1 : 0;
  return plan;
}

/// Trajectory-level mixture: the student holds the first kappa turns, the
/// teacher completes the rest. rho is a distribution over {0..T_max}.
inline IndicatorPlan sample_prefix_indicators(const std::vector<double>& rho, Rng& rng) {
  if (rho.empty()) throw std::invalid_argument("rho must cover {0..T_max}");
  double mass = 0.0;
  for (double p : rho) mass += p;
  if (std::abs(mass - 1.0) > 1e-9) throw std::invalid_argument("rho must sum to 1");
  const int t_max = static_cast<int>(rho.size()) - 1;
  IndicatorPlan plan;
  plan.regime = MixRegime::traj;
  plan.kappa = sample_index(rho, rng);
  plan.indicators.assign(static_cast<std::size_t>(t_max), 1);
  for (int t = 0; t < plan.kappa; ++t) plan.indicators[static_cast<std::size_t>(t)] = 0;
  return plan;
}

inline IndicatorPlan fixed_plan(int t_max, bool teacher) {
  IndicatorPlan plan;
  plan.regime = MixRegime::turn;
  plan.beta = teacher ? 1.0 : 0.0;
  plan.indicators.assign(static_cast<std::size_t>(t_max), teacher ? 1 : 0);
  return plan;
}

struct RolloutResult {
  Trajectory trajectory;
  std::vector<LabeledTransition> batch;
};

/// One mixture rollout. The teacher label is queried first at every visited
/// state; on a teacher turn that same sample is executed. The student draws
/// through sampling_config; the teacher samples its own distribution plain.
/// Teacher finishes terminate exactly as student finishes do.
///
/// Randomness comes from per-turn substreams keyed (seed, instance id, salt,
/// turn), so collection order and worker count cannot change the result.
inline RolloutResult collect_trajectory(const Policy& teacher, const Policy& student,
                                        const Environment& env, const TaskInstance& inst,
                                        const IndicatorPlan& plan,
                                        const SamplingConfig& sampling_config,
                                        std::uint64_t seed, std::uint64_t salt = 0) {
  if (static_cast<int>(plan.indicators.size()) != inst.horizon_cap)
    throw std::invalid_argument("plan length must equal the instance horizon");
  const ActionGrammar& grammar = env.grammar();
  const SamplingConfig teacher_cfg{};  // temperature 1, no truncation

  auto arena = std::make_shared<TurnArena>();
  EnvState state = env.reset_state(inst);
  Trajectory traj{inst, {}, 0};

  for (int t = 1; t <= inst.horizon_cap; ++t) {
    Context ctx{inst, arena, arena->size()};
    Rng rng = substream(seed, mix64(tag("turn"), static_cast<std::uint64_t>(inst.id)),
                        salt, static_cast<std::uint64_t>(t));
    ActionSeq label = sample_action(teacher, grammar, ctx, teacher_cfg, rng);
    ActionSeq executed;
    const bool teacher_turn = plan.indicators[static_cast<std::size_t>(t - 1)] != 0;
    if (teacher_turn) {
      executed = label;
    } else {
      executed = sample_action(student, grammar, ctx, sampling_config, rng);
    }
    Observation ob;
    try {
      auto [o, next] = env.step(state, executed);
      ob = o;
      state = next;
    } catch (const std::exception& e) {
      throw std::runtime_error("environment step failed at turn " + std::to_string(t) +
                               ": " + e.what());
    }
    Turn turn{teacher_turn ? 1 : 0, executed, label, ob};
    arena->push_back(turn);
    traj.turns.push_back(std::move(turn));
    if (executed.is_finish) break;
  }
  traj.success = env.verify(traj);
  RolloutResult out{std::move(traj), {}};
  out.batch = batch_of(out.trajectory);
  return out;
}

/// How collect_batch builds each trajectory's plan.
struct RegimeConfig {
  MixRegime regime = MixRegime::turn;
  double beta = 1.0;
  std::vector<double> rho;  // traj regime only
};

struct BatchSummary {
  int iteration = 0;
  std::size_t n_trajectories = 0;
  std::size_t n_transitions = 0;
  double teacher_turn_fraction = 0.0;
  double success_rate = 0.0;
};

struct BatchResult {
  std::vector<Trajectory> trajectories;
  std::vector<std::vector<LabeledTransition>> batches;  // per trajectory
  BatchSummary summary;

  std::vector<LabeledTransition> all_transitions() const {
    std::vector<LabeledTransition> out;
    for (const auto& b : batches) out.insert(out.end(), b.begin(), b.end());
    return out;
  }
};

/// One trajectory per (instance, salt) pair, each with an independent plan
/// substream. Output order matches input order regardless of worker count.
inline BatchResult collect_batch(const Policy& teacher, const Policy& student,
                                 const Environment& env,
                                 const std::vector<TaskInstance>& instances,
                                 const RegimeConfig& regime,
                                 const SamplingConfig& sampling_config,
                                 std::uint64_t seed, int workers = 1,
                                 const std::vector<std::uint64_t>* salts = nullptr) {
  if (instances.empty()) throw std::invalid_argument("instances must be non-empty");
  BatchResult result;
  result.trajectories.resize(instances.size());
  result.batches.resize(instances.size());

  auto run_one = [&](std::size_t i) {
    const TaskInstance& inst = instances[i];
    std::uint64_t salt = salts ? (*salts)[i] : 0;
    Rng plan_rng = substream(seed, mix64(tag("plan"), static_cast<std::uint64_t>(inst.id)),
                             salt, 0);
    IndicatorPlan plan;
    if (regime.regime == MixRegime::turn) {
      plan = sample_turn_indicators(regime.beta, inst.horizon_cap, plan_rng);
    } else {
      plan = sample_prefix_indicators(regime.rho, plan_rng);
    }
    RolloutResult r = collect_trajectory(teacher, student, env, inst, plan,
                                         sampling_config, seed, salt);
    result.trajectories[i] = std::move(r.trajectory);
    result.batches[i] = std::move(r.batch);
  };

  if (workers <= 1 || instances.size() < 2) {
    for (std::size_t i = 0; i < instances.size(); ++i) run_one(i);
  } else {
    std::vector<std::thread> pool;
    std::size_t n_workers = std::min<std::size_t>(static_cast<std::size_t>(workers),
                                                  instances.size());
    for (std::size_t w = 0; w < n_workers; ++w) {
      pool.emplace_back([&, w]() {
        for (std::size_t i = w; i < instances.size(); i += n_workers) run_one(i);
      });
    }
    for (auto& th : pool) th.join();
  }

  std::size_t turns = 0, teacher_turns = 0, transitions = 0, successes = 0;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const Trajectory& tr = result.trajectories[i];
    turns += tr.turns.size();
    for (const Turn& t : tr.turns) teacher_turns += static_cast<std::size_t>(t.indicator);
    transitions += result.batches[i].size();
    successes += static_cast<std::size_t>(tr.success);
  }
  result.summary.n_trajectories = instances.size();
  result.summary.n_transitions = transitions;
  result.summary.teacher_turn_fraction =
      turns ? static_cast<double>(teacher_turns) / static_cast<double>(turns) : 0.0;
  result.summary.success_rate =
      static_cast<double>(successes) / static_cast<double>(instances.size());
  return result;
}

}  // namespace mixil
