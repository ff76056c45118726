#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "mixil/core.hpp"
#include "mixil/env.hpp"
#include "mixil/policy.hpp"
#include "mixil/rollout.hpp"

namespace mixil {

/// A visited state plus the action executed there; the executed prefix is
/// what conditions intra-action token positions.
struct VisitedState {
  Context context;
  ActionSeq executed;
};

/// Contexts sampled by rolling out a designated policy, with provenance.
struct EmpiricalStateDistribution {
  std::vector<VisitedState> states;
  std::string policy_id;
  double temperature = 0.7;
  int n_rollouts = 0;
};

/// Fraction of instances whose greedy rollout is verified successful.
inline double resolution_rate(const PolicyParams& params, const Environment& env,
                              const std::vector<TaskInstance>& instances,
                              int workers = 1) {
  if (instances.empty()) throw std::invalid_argument("instances must be non-empty");
  SoftmaxPolicy policy(params, env);
  SamplingConfig greedy;
  greedy.greedy = true;
  std::vector<int> ok(instances.size(), 0);
  auto run_one = [&](std::size_t i) {
    IndicatorPlan plan = fixed_plan(instances[i].horizon_cap, false);
    // greedy evaluation needs no entropy; the stream goes unused
    RolloutResult r = collect_trajectory(policy, policy, env, instances[i], plan,
                                         greedy, /*seed=*/0);
    ok[i] = r.trajectory.success;
  };
  if (workers <= 1 || instances.size() < 2) {
    for (std::size_t i = 0; i < instances.size(); ++i) run_one(i);
  } else {
    std::vector<std::thread> pool;
    std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(workers), instances.size());
    for (std::size_t w = 0; w < n; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < instances.size(); i += n) run_one(i);
      });
    for (auto& th : pool) th.join();
  }
  double s = 0.0;
  for (int v : ok) s += v;
  return s / static_cast<double>(instances.size());
}

/// Roll out `policy` once per instance at the given temperature and record
/// every visited state with its executed action.
inline EmpiricalStateDistribution sample_state_distribution(
    const Policy& policy, const Environment& env,
    const std::vector<TaskInstance>& instances, double temperature,
    std::uint64_t seed, const std::string& policy_id = "student") {
  EmpiricalStateDistribution dist;
  dist.policy_id = policy_id;
  dist.temperature = temperature;
  dist.n_rollouts = static_cast<int>(instances.size());
  SamplingConfig cfg;
  cfg.temperature = temperature;
  for (const TaskInstance& inst : instances) {
    IndicatorPlan plan = fixed_plan(inst.horizon_cap, false);
    RolloutResult r = collect_trajectory(policy, policy, env, inst, plan, cfg, seed,
                                         tag("state-dist"));
    auto arena = std::make_shared<TurnArena>(r.trajectory.turns);
    for (std::size_t t = 0; t < r.trajectory.turns.size(); ++t)
      dist.states.push_back(VisitedState{Context{inst, arena, t},
                                         r.trajectory.turns[t].executed});
  }
  return dist;
}

struct ReverseKlResult {
  double mean = 0.0;              // mean over (context, position) pairs
  std::size_t positions = 0;      // pairs measured
  std::size_t infinite_positions = 0;  // teacher support misses student mass
};

/// Average token-level KL(student || teacher) over the sampled contexts and
/// the token positions of the actions executed there, computed exactly over
/// the discrete token alphabet.
inline ReverseKlResult reverse_kl(const Policy& student, const Policy& teacher,
                                  const EmpiricalStateDistribution& dist) {
  ReverseKlResult out;
  double total = 0.0;
  for (const VisitedState& vs : dist.states) {
    for (std::size_t j = 0; j < vs.executed.tokens.size(); ++j) {
      std::span<const int> prefix(vs.executed.tokens.data(), j);
      std::vector<double> p = student.action_token_dist(vs.context, prefix);
      bool infinite = false;
      std::vector<double> q;
      try {
        q = teacher.action_token_dist(vs.context, prefix);
      } catch (const std::runtime_error&) {
        // teacher assigns zero mass to this prefix
        infinite = true;
      }
      double kl = 0.0;
      if (!infinite) {
        for (std::size_t v = 0; v < p.size(); ++v) {
          if (p[v] <= 0.0) continue;
          if (q[v] <= 0.0) {
            infinite = true;
            break;
          }
          kl += p[v] * (std::log(p[v]) - std::log(q[v]));
        }
      }
      ++out.positions;
      if (infinite) {
        ++out.infinite_positions;
        total = std::numeric_limits<double>::infinity();
      } else if (!std::isinf(total)) {
        total += kl;
      }
    }
  }
  out.mean = out.positions
                 ? (std::isinf(total) ? total : total / static_cast<double>(out.positions))
                 : 0.0;
  return out;
}

/// Convenience overload matching the student-parameters signature.
inline ReverseKlResult reverse_kl(const PolicyParams& student_params,
                                  const Policy& teacher, const Environment& env,
                                  const EmpiricalStateDistribution& dist) {
  SoftmaxPolicy student(student_params, env);
  return reverse_kl(student, teacher, dist);
}

// --- Failure taxonomy ---------------------------------------------------------

enum class FailureCategory { resolved, submitted_wrong, no_submission_loop,
                             no_submission_budget };

inline const char* to_string(FailureCategory c) {
  switch (c) {
    case FailureCategory::resolved: return "resolved";
    case FailureCategory::submitted_wrong: return "submitted_wrong";
    case FailureCategory::no_submission_loop: return "no_submission_loop";
    case FailureCategory::no_submission_budget: return "no_submission_budget";
  }
  return "?";
}

/// Exactly one category per complete trajectory: resolved; submitted but
/// wrong; no submission with a (state, action) pair repeated >= 3 times;
/// otherwise ran out of budget.
inline FailureCategory failure_taxonomy(const Trajectory& traj, const Environment& env) {
  if (traj.turns.empty()) throw std::invalid_argument("incomplete trajectory");
  if (traj.success) return FailureCategory::resolved;
  if (traj.turns.back().executed.is_finish) return FailureCategory::submitted_wrong;
  std::map<std::pair<std::uint64_t, std::vector<int>>, int> counts;
  EnvState s = env.reset_state(traj.instance);
  for (const Turn& turn : traj.turns) {
    auto key = std::make_pair(env.state_key(s), turn.executed.tokens);
    if (++counts[key] >= 3) return FailureCategory::no_submission_loop;
    s = env.step(s, turn.executed).second;
  }
  return FailureCategory::no_submission_budget;
}

// --- Log-log slope fitting -----------------------------------------------------

/// OLS slope of log(y) against log(x). Zero rates are clamped to `floor`
/// before the log so empty failure cells stay finite.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y,
                           double floor) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("need at least two points");
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double lx = std::log(x[i]);
    double ly = std::log(std::max(y[i], floor));
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace mixil
