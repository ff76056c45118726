#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixil/core.hpp"
#include "mixil/policy.hpp"
#include "mixil/util.hpp"

namespace mixil {

enum class EnvKind { chain_repair, token_edit };

/// Shared configuration for both synthetic environments. ChainRepair derives
/// its vocabulary from the branching factor; TokenEdit reads vocab/max_action_len
/// directly. Fields that do not apply to a kind are ignored by it.
struct EnvSpec {
  EnvKind kind = EnvKind::chain_repair;
  int t_max = 10;
  int branching_k = 4;       // ChainRepair: work actions per on-track step
  int off_track_depth = 2;   // ChainRepair: D
  int vocab = 8;             // TokenEdit: V
  int max_action_len = 2;    // TokenEdit: M
  double teacher_noise = 0.0;
  int n_configs = 2;         // distinct task configurations (seed_prompt range)
  bool recovery_visible = false;
  int goal_len = 0;          // ChainRepair chain length; 0 = t_max/2
  int target_len = 0;        // TokenEdit program length; 0 = t_max/2
  bool full_history_keys = false;
};

// ChainRepair token layout. Work tokens are 0..K-1; submission is the
// two-token string [submit, confirm] so an accidental one-token slip can
// never end the episode.
struct ChainTokens {
  int recover;
  int submit;
  int confirm;
  int vocab;
};

inline ChainTokens chain_tokens(const EnvSpec& s) {
  return ChainTokens{s.branching_k, s.branching_k + 1, s.branching_k + 2,
                     s.branching_k + 3};
}

// TokenEdit token layout: 0 = finish, 1 = revert, 2.. = symbols.
inline constexpr int kEditFinish = 0;
inline constexpr int kEditRevert = 1;
inline constexpr int kEditFirstSymbol = 2;

// Observation codes.
namespace obs {
inline constexpr int kOk = 0;        // advanced
inline constexpr int kErr = 1;       // derailed / went deeper / set dirty
inline constexpr int kRecovered = 2;
inline constexpr int kIdle = 3;      // recovery while on track
inline constexpr int kStuck = 4;     // non-recovery at depth cap
inline constexpr int kNack = 5;      // malformed submission
inline constexpr int kFinish = 6;
inline constexpr int kBlocked = 7;   // TokenEdit edit while dirty
inline constexpr int kReverted = 8;
inline constexpr int kClean = 9;     // revert while clean
}  // namespace obs

/// Environment-internal state; a deterministic function of (instance, executed
/// actions). `pos` is the chain position or edit cursor, `depth` the off-track
/// depth or dirty flag.
struct EnvState {
  int seed = 0;
  int pos = 0;
  int depth = 0;
  int turn = 0;
  bool finished = false;

  friend bool operator==(const EnvState&, const EnvState&) = default;
};

class Environment : public Featurizer {
 public:
  explicit Environment(EnvSpec spec) : spec_(spec) {
    validate();
    grammar_.vocab = vocab_size();
    grammar_.max_action_len = 2;
    grammar_.arity.assign(static_cast<std::size_t>(vocab_size()), 1);
    if (spec_.kind == EnvKind::chain_repair) {
      ChainTokens tk = chain_tokens(spec_);
      grammar_.arity[static_cast<std::size_t>(tk.submit)] = 2;
      grammar_.finish_action = {tk.submit, tk.confirm};
    } else {
      for (int v = kEditFirstSymbol; v < vocab_size(); ++v)
        grammar_.arity[static_cast<std::size_t>(v)] = 2;
      grammar_.finish_action = {kEditFinish};
    }
  }

  const EnvSpec& spec() const { return spec_; }
  const ActionGrammar& grammar() const { return grammar_; }

  int vocab_size() const {
    return spec_.kind == EnvKind::chain_repair ? chain_tokens(spec_).vocab : spec_.vocab;
  }

  int goal_length() const {
    int fallback = std::max(1, spec_.t_max / 2);
    if (spec_.kind == EnvKind::chain_repair)
      return spec_.goal_len > 0 ? spec_.goal_len : fallback;
    return spec_.target_len > 0 ? spec_.target_len : fallback;
  }

  /// TokenEdit target program for a task configuration. Slots are the
  /// base-(V-2) digits of the seed, so distinct seeds below (V-2)^(2P)
  /// always produce distinct programs.
  std::vector<std::pair<int, int>> target_program(int seed) const {
    int base = spec_.vocab - kEditFirstSymbol;
    std::vector<std::pair<int, int>> prog;
    std::uint64_t rest = static_cast<std::uint64_t>(seed);
    for (int k = 0; k < goal_length(); ++k) {
      int verb = kEditFirstSymbol + static_cast<int>(rest % base);
      rest /= base;
      int arg = kEditFirstSymbol + static_cast<int>(rest % base);
      rest /= base;
      prog.emplace_back(verb, arg);
    }
    return prog;
  }

  // ChainRepair correct work token at a position.
  int chain_correct_token(int seed, int pos) const {
    return (seed + pos) % spec_.branching_k;
  }

  EnvState reset_state(const TaskInstance& inst) const {
    if (inst.horizon_cap != spec_.t_max)
      throw std::invalid_argument("instance horizon does not match environment spec");
    if (inst.seed_prompt < 0)
      throw std::invalid_argument("unknown instance id: negative seed");
    return EnvState{inst.seed_prompt, 0, 0, 0, false};
  }

  std::pair<EnvState, Context> reset(const TaskInstance& inst) const {
    return {reset_state(inst),
            Context{inst, std::make_shared<TurnArena>(), 0}};
  }

  /// Deterministic transition; the rng parameter is part of the contract but
  /// unused by both environments.
  std::pair<Observation, EnvState> step(const EnvState& state, const ActionSeq& action,
                                        Rng* /*rng*/ = nullptr) const {
    if (action.tokens.empty()) throw std::invalid_argument("malformed action: no tokens");
    for (int t : action.tokens)
      if (t < 0 || t >= vocab_size())
        throw std::invalid_argument("action token outside vocabulary");
    if (state.finished) throw std::logic_error("step after finish");
    EnvState next = state;
    next.turn = state.turn + 1;
    Observation ob;
    if (action.is_finish) {
      next.finished = true;
      ob.payload = {obs::kFinish};
      return {ob, next};
    }
    if (spec_.kind == EnvKind::chain_repair) {
      ob = step_chain(state, action, next);
    } else {
      ob = step_edit(state, action, next);
    }
    return {ob, next};
  }

  bool goal_reached(const EnvState& s) const {
    return s.pos == goal_length() && s.depth == 0;
  }

  /// Terminal success: goal condition met and the finish action emitted.
  /// Replays executed actions only, so logged observations cannot sway it.
  int verify(const Trajectory& traj) const {
    if (traj.turns.empty()) throw std::invalid_argument("incomplete trajectory: no turns");
    const bool finished = traj.turns.back().executed.is_finish;
    if (!finished && static_cast<int>(traj.turns.size()) < spec_.t_max)
      throw std::invalid_argument("incomplete trajectory: no finish and budget unspent");
    EnvState s = reset_state(traj.instance);
    for (std::size_t t = 0; t + 1 < traj.turns.size(); ++t)
      s = step(s, traj.turns[t].executed).second;
    if (!finished) return 0;
    return goal_reached(s) ? 1 : 0;
  }

  /// Replay a context's executed actions to the underlying state.
  EnvState replay(const Context& ctx) const {
    EnvState s = reset_state(ctx.instance);
    for (std::size_t t = 0; t < ctx.history_len; ++t)
      s = step(s, ctx.turn(t).executed).second;
    return s;
  }

  // --- Featurizer ---

  std::uint64_t key(const Context& ctx) const override {
    if (spec_.full_history_keys) {
      std::string buf;
      buf.reserve(ctx.history_len * 8 + 8);
      buf += std::to_string(ctx.instance.seed_prompt);
      for (std::size_t t = 0; t < ctx.history_len; ++t) {
        buf += '|';
        buf += join_ints(ctx.turn(t).executed.tokens);
        buf += ';';
        buf += join_ints(ctx.turn(t).observation.payload);
      }
      return fnv1a64(buf) | (1ULL << 63);
    }
    return state_key(replay(ctx));
  }

  std::uint64_t state_key(const EnvState& s) const {
    return (static_cast<std::uint64_t>(spec_.kind == EnvKind::token_edit) << 62) |
           (static_cast<std::uint64_t>(s.finished) << 61) |
           (static_cast<std::uint64_t>(static_cast<std::uint32_t>(s.seed)) << 24) |
           (static_cast<std::uint64_t>(static_cast<std::uint32_t>(s.pos)) << 8) |
           static_cast<std::uint64_t>(static_cast<std::uint32_t>(s.depth));
  }

  std::vector<double> features(const Context& ctx) const override {
    return state_features(replay(ctx));
  }

  std::vector<double> state_features(const EnvState& s) const {
    std::vector<double> phi(static_cast<std::size_t>(feature_dim()), 0.0);
    phi[0] = 1.0;
    std::size_t off = 1;
    phi[off + static_cast<std::size_t>(s.seed % std::max(1, spec_.n_configs))] = 1.0;
    off += static_cast<std::size_t>(std::max(1, spec_.n_configs));
    int pos = std::min(s.pos, goal_length());
    phi[off + static_cast<std::size_t>(pos)] = 1.0;
    off += static_cast<std::size_t>(goal_length() + 1);
    int depth_cap = spec_.kind == EnvKind::chain_repair ? spec_.off_track_depth : 1;
    phi[off + static_cast<std::size_t>(std::min(s.depth, depth_cap))] = 1.0;
    return phi;
  }

  int feature_dim() const override {
    int depth_cap = spec_.kind == EnvKind::chain_repair ? spec_.off_track_depth : 1;
    return 1 + std::max(1, spec_.n_configs) + (goal_length() + 1) + (depth_cap + 1);
  }

  /// Environment-optimal action at a state.
  ActionSeq oracle_action(const EnvState& s) const {
    if (spec_.kind == EnvKind::chain_repair) {
      ChainTokens tk = chain_tokens(spec_);
      if (s.depth > 0) return make_action(grammar_, {tk.recover});
      if (s.pos < goal_length())
        return make_action(grammar_, {chain_correct_token(s.seed, s.pos)});
      return make_action(grammar_, {tk.submit, tk.confirm});
    }
    if (s.depth > 0) return make_action(grammar_, {kEditRevert});
    if (s.pos < goal_length()) {
      auto [verb, arg] = target_program(s.seed)[static_cast<std::size_t>(s.pos)];
      return make_action(grammar_, {verb, arg});
    }
    return make_action(grammar_, {kEditFinish});
  }

  std::vector<std::vector<int>> enumerate_actions() const {
    return grammar_.enumerate_actions();
  }

 private:
  void validate() const {
    if (spec_.t_max < 1) throw std::invalid_argument("T_max must be >= 1");
    if (spec_.kind == EnvKind::chain_repair) {
      if (spec_.branching_k < 2) throw std::invalid_argument("K must be >= 2");
      if (spec_.off_track_depth < 1) throw std::invalid_argument("D must be >= 1");
    } else {
      if (spec_.vocab < 4) throw std::invalid_argument("TokenEdit needs V >= 4");
      if (spec_.max_action_len < 2) throw std::invalid_argument("TokenEdit needs M >= 2");
      if (spec_.vocab < spec_.max_action_len)
        throw std::invalid_argument("V must be >= M");
    }
    int fallback = std::max(1, spec_.t_max / 2);
    int goal = spec_.kind == EnvKind::chain_repair
                   ? (spec_.goal_len > 0 ? spec_.goal_len : fallback)
                   : (spec_.target_len > 0 ? spec_.target_len : fallback);
    if (goal + 1 > spec_.t_max)
      throw std::invalid_argument("goal length leaves no room for the finish turn");
    if (spec_.teacher_noise < 0.0 || spec_.teacher_noise >= 1.0)
      throw std::invalid_argument("teacher noise must lie in [0,1)");
  }

  Observation step_chain(const EnvState& s, const ActionSeq& a, EnvState& next) const {
    ChainTokens tk = chain_tokens(spec_);
    int first = a.tokens.front();
    Observation ob;
    if (first == tk.submit) {
      // reachable only for [submit, x != confirm]; a full submission is finish
      ob.payload = {obs::kNack};
      return ob;
    }
    if (first == tk.recover) {
      if (s.depth > 0) {
        next.depth = s.depth - 1;
        ob.payload = {obs::kRecovered};
      } else {
        ob.payload = {obs::kIdle};
      }
      return ob;
    }
    // work token
    if (s.depth == 0) {
      if (s.pos < goal_length() && first == chain_correct_token(s.seed, s.pos)) {
        next.pos = s.pos + 1;
        ob.payload = {obs::kOk};
        return ob;
      }
      next.depth = 1;
      ob.payload = {obs::kErr};
    } else if (s.depth < spec_.off_track_depth) {
      next.depth = s.depth + 1;
      ob.payload = {obs::kErr};
    } else {
      ob.payload = {obs::kStuck};
    }
    if (spec_.recovery_visible) ob.payload.push_back(tk.recover);
    return ob;
  }

  Observation step_edit(const EnvState& s, const ActionSeq& a, EnvState& next) const {
    int first = a.tokens.front();
    Observation ob;
    if (first == kEditRevert) {
      if (s.depth > 0) {
        next.depth = 0;
        ob.payload = {obs::kReverted};
      } else {
        ob.payload = {obs::kClean};
      }
      return ob;
    }
    // edit pair
    if (s.depth > 0) {
      ob.payload = {obs::kBlocked};
      return ob;
    }
    if (s.pos < goal_length()) {
      auto [verb, arg] = target_program(s.seed)[static_cast<std::size_t>(s.pos)];
      if (a.tokens.size() == 2 && first == verb && a.tokens[1] == arg) {
        next.pos = s.pos + 1;
        ob.payload = {obs::kOk};
        return ob;
      }
    }
    next.depth = 1;
    ob.payload = {obs::kErr};
    if (spec_.recovery_visible) ob.payload.push_back(kEditRevert);
    return ob;
  }

  EnvSpec spec_;
  ActionGrammar grammar_;
};

/// Draws task instances from the configuration distribution q; reproducible
/// given the sampler seed, with one derived stream per instance id.
class TaskSampler {
 public:
  TaskSampler(const EnvSpec& spec, std::uint64_t seed) : spec_(spec), seed_(seed) {}

  TaskInstance instance(std::int64_t id) const {
    Rng rng = substream(seed_, tag("task"), static_cast<std::uint64_t>(id));
    int cfg = static_cast<int>(rng() % static_cast<std::uint64_t>(std::max(1, spec_.n_configs)));
    return TaskInstance{id, cfg, spec_.t_max};
  }

  std::vector<TaskInstance> sample(std::size_t count, std::int64_t id_offset = 0) const {
    std::vector<TaskInstance> out;
    out.reserve(count);
    for (std::size_t k = 0; k < count; ++k)
      out.push_back(instance(id_offset + static_cast<std::int64_t>(k)));
    return out;
  }

 private:
  EnvSpec spec_;
  std::uint64_t seed_;
};

/// Teacher that plays the environment-optimal action with probability
/// 1 - eps and a uniformly random non-optimal action otherwise. Token
/// conditionals are derived exactly from that action-level distribution.
class OracleTeacher : public Policy {
 public:
  OracleTeacher(const Environment& env, double eps) : env_(&env), eps_(eps) {
    if (eps < 0.0 || eps >= 1.0) throw std::invalid_argument("eps must lie in [0,1)");
    actions_ = env.enumerate_actions();
  }

  /// Action-level probabilities over enumerate_actions() at a state.
  std::vector<double> action_probs(const EnvState& s) const {
    ActionSeq best = env_->oracle_action(s);
    std::vector<double> p(actions_.size(), 0.0);
    const double rest = actions_.empty() ? 0.0 : eps_ / static_cast<double>(actions_.size() - 1);
    for (std::size_t i = 0; i < actions_.size(); ++i)
      p[i] = (actions_[i] == best.tokens) ? 1.0 - eps_ : rest;
    return p;
  }

  std::vector<double> action_token_dist(const Context& ctx,
                                        std::span<const int> prefix) const override {
    return token_conditional(env_->replay(ctx), prefix);
  }

  std::vector<double> token_conditional(const EnvState& s,
                                        std::span<const int> prefix) const {
    std::vector<double> probs = action_probs(s);
    std::vector<double> dist(static_cast<std::size_t>(env_->vocab_size()), 0.0);
    double denom = 0.0;
    for (std::size_t i = 0; i < actions_.size(); ++i) {
      const auto& a = actions_[i];
      if (a.size() <= prefix.size()) continue;
      if (!std::equal(prefix.begin(), prefix.end(), a.begin())) continue;
      dist[static_cast<std::size_t>(a[prefix.size()])] += probs[i];
      denom += probs[i];
    }
    if (denom <= 0.0)
      throw std::runtime_error("teacher conditional undefined: zero-probability prefix");
    for (double& v : dist) v /= denom;
    return dist;
  }

  double action_logprob(const Context& ctx, const ActionSeq& action) const override {
    std::vector<double> probs = action_probs(env_->replay(ctx));
    for (std::size_t i = 0; i < actions_.size(); ++i)
      if (actions_[i] == action.tokens)
        return probs[i] > 0.0 ? std::log(probs[i])
                              : -std::numeric_limits<double>::infinity();
    throw std::invalid_argument("action not in environment action set");
  }

  double noise() const { return eps_; }
  const Environment& env() const { return *env_; }

 private:
  const Environment* env_;
  double eps_;
  std::vector<std::vector<int>> actions_;
};

inline OracleTeacher oracle_teacher(const Environment& env, double eps) {
  return OracleTeacher(env, eps);
}

// ---------------------------------------------------------------------------
// Exact success probability by dynamic programming over (turn, state) pairs.
// ---------------------------------------------------------------------------

/// Action distribution over Environment::enumerate_actions(), evaluated at a
/// raw environment state. Summary-keyed policies factor through this exactly.
using StateActionDist = std::function<std::vector<double>(const EnvState&)>;

namespace detail {

inline std::size_t dp_state_index(const Environment& env, const EnvState& s) {
  int depth_cap = env.spec().kind == EnvKind::chain_repair ? env.spec().off_track_depth : 1;
  return static_cast<std::size_t>(s.pos) * (depth_cap + 1) + s.depth;
}

}  // namespace detail

inline double exact_success_prob(const Environment& env, const TaskInstance& inst,
                                 const StateActionDist& dist) {
  const EnvSpec& spec = env.spec();
  int depth_cap = spec.kind == EnvKind::chain_repair ? spec.off_track_depth : 1;
  const std::size_t n_states =
      static_cast<std::size_t>(env.goal_length() + 1) * (depth_cap + 1);
  const std::size_t budget =
      n_states * static_cast<std::size_t>(spec.t_max + 1);
  if (budget > 1000000)
    throw std::invalid_argument("state space too large for exact evaluation");

  ActionGrammar grammar = env.grammar();
  std::vector<std::vector<int>> actions = env.enumerate_actions();

  // value[t][state] = success probability with turns t+1..T_max remaining
  std::vector<std::vector<double>> value(
      static_cast<std::size_t>(spec.t_max) + 2,
      std::vector<double>(n_states, 0.0));
  for (int t = spec.t_max; t >= 1; --t) {
    for (int pos = 0; pos <= env.goal_length(); ++pos) {
      for (int depth = 0; depth <= depth_cap; ++depth) {
        EnvState s{inst.seed_prompt, pos, depth, t - 1, false};
        std::vector<double> p = dist(s);
        double v = 0.0;
        for (std::size_t i = 0; i < actions.size(); ++i) {
          if (p[i] <= 0.0) continue;
          ActionSeq a = make_action(grammar, actions[i]);
          if (a.is_finish) {
            v += p[i] * (env.goal_reached(s) ? 1.0 : 0.0);
          } else if (t < spec.t_max) {
            EnvState nxt = env.step(s, a).second;
            v += p[i] * value[static_cast<std::size_t>(t) + 1]
                             [detail::dp_state_index(env, nxt)];
          }
        }
        value[static_cast<std::size_t>(t)][detail::dp_state_index(env, s)] = v;
      }
    }
  }
  EnvState start = env.reset_state(inst);
  return value[1][detail::dp_state_index(env, start)];
}

/// Adapter: evaluate PolicyParams at raw states through the summary key.
/// Requires summary featurization (full-history keys are not Markov here).
inline StateActionDist state_action_dist(const PolicyParams& params,
                                         const Environment& env) {
  if (env.spec().full_history_keys)
    throw std::invalid_argument("exact evaluation needs summary featurization");
  std::vector<std::vector<int>> actions = env.enumerate_actions();
  return [params, &env, actions](const EnvState& s) {
    std::vector<std::vector<double>> token_probs;
    for (int pos = 0; pos < params.max_len; ++pos) {
      std::vector<double> logits(static_cast<std::size_t>(params.vocab), 0.0);
      if (params.mode == ParamMode::tabular) {
        auto it = params.rows.find(env.state_key(s));
        if (it != params.rows.end()) {
          const double* row = it->second.data() +
                              static_cast<std::size_t>(pos) * params.vocab;
          std::copy(row, row + params.vocab, logits.begin());
        }
      } else {
        std::vector<double> phi = env.state_features(s);
        for (int f = 0; f < params.feature_dim; ++f)
          for (int v = 0; v < params.vocab; ++v)
            logits[static_cast<std::size_t>(v)] +=
                phi[static_cast<std::size_t>(f)] * params.weight_at(pos, f, v);
      }
      token_probs.push_back(detail::softmax(logits));
    }
    std::vector<double> out(actions.size(), 0.0);
    for (std::size_t i = 0; i < actions.size(); ++i) {
      double p = 1.0;
      for (std::size_t j = 0; j < actions[i].size(); ++j)
        p *= token_probs[j][static_cast<std::size_t>(actions[i][j])];
      out[i] = p;
    }
    return out;
  };
}

/// Adapter: the greedy-decoded deterministic policy induced by params.
inline StateActionDist greedy_state_action_dist(const PolicyParams& params,
                                                const Environment& env) {
  StateActionDist soft = state_action_dist(params, env);
  ActionGrammar grammar = env.grammar();
  std::vector<std::vector<int>> actions = env.enumerate_actions();
  return [soft, grammar, actions, &env, params](const EnvState& s) {
    // greedy decoding is per token, ties to the lowest id
    std::vector<int> toks;
    std::vector<std::vector<double>> token_probs;
    for (int pos = 0; pos < params.max_len; ++pos) {
      std::vector<double> logits(static_cast<std::size_t>(params.vocab), 0.0);
      if (params.mode == ParamMode::tabular) {
        auto it = params.rows.find(env.state_key(s));
        if (it != params.rows.end()) {
          const double* row = it->second.data() +
                              static_cast<std::size_t>(pos) * params.vocab;
          std::copy(row, row + params.vocab, logits.begin());
        }
      } else {
        std::vector<double> phi = env.state_features(s);
        for (int f = 0; f < params.feature_dim; ++f)
          for (int v = 0; v < params.vocab; ++v)
            logits[static_cast<std::size_t>(v)] +=
                phi[static_cast<std::size_t>(f)] * params.weight_at(pos, f, v);
      }
      token_probs.push_back(detail::softmax(logits));
    }
    while (static_cast<int>(toks.size()) < grammar.max_action_len) {
      const auto& p = token_probs[toks.size()];
      std::size_t best = 0;
      for (std::size_t v = 1; v < p.size(); ++v)
        if (p[v] > p[best]) best = v;
      toks.push_back(static_cast<int>(best));
      if (grammar.complete(toks)) break;
    }
    std::vector<double> out(actions.size(), 0.0);
    for (std::size_t i = 0; i < actions.size(); ++i)
      if (actions[i] == toks) out[i] = 1.0;
    return out;
  };
}

inline StateActionDist state_action_dist(const OracleTeacher& teacher) {
  return [&teacher](const EnvState& s) { return teacher.action_probs(s); };
}

}  // namespace mixil
