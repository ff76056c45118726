#pragma once

#include <cstdint>
#include <memory>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixil/util.hpp"

namespace mixil {

/// One multi-turn task: an initial symbol plus a turn budget.
struct TaskInstance {
  std::int64_t id = 0;
  int seed_prompt = 0;   // small integer selecting the task configuration
  int horizon_cap = 1;   // T_max

  friend bool operator==(const TaskInstance&, const TaskInstance&) = default;
};

/// Action grammar: per-first-token arity plus the designated finish string.
/// An action is complete once it has arity(first token) tokens; the finish
/// action is a single fixed token string per environment.
struct ActionGrammar {
  int vocab = 0;
  int max_action_len = 1;
  std::vector<std::uint8_t> arity;   // indexed by first token, values in {1..max}
  std::vector<int> finish_action;    // exact token string that terminates a task

  bool complete(std::span<const int> prefix) const {
    if (prefix.empty()) return false;
    return prefix.size() >= arity[static_cast<std::size_t>(prefix.front())];
  }

  bool is_finish(std::span<const int> toks) const {
    return toks.size() == finish_action.size() &&
           std::equal(toks.begin(), toks.end(), finish_action.begin());
  }

  // All complete actions, in lexicographic token order.
  std::vector<std::vector<int>> enumerate_actions() const {
    std::vector<std::vector<int>> out;
    for (int first = 0; first < vocab; ++first) {
      if (arity[static_cast<std::size_t>(first)] == 1) {
        out.push_back({first});
      } else {
        for (int second = 0; second < vocab; ++second)
          out.push_back({first, second});
      }
    }
    return out;
  }
};

/// A turn-level action: m_t tokens, flagged if it is the finish action.
struct ActionSeq {
  std::vector<int> tokens;
  bool is_finish = false;

  friend bool operator==(const ActionSeq& a, const ActionSeq& b) {
    return a.tokens == b.tokens;  // is_finish is derived from tokens
  }
};

inline ActionSeq make_action(const ActionGrammar& g, std::vector<int> tokens) {
  if (tokens.empty()) throw std::invalid_argument("action has no tokens");
  if (tokens.size() > static_cast<std::size_t>(g.max_action_len))
    throw std::invalid_argument("action exceeds max length");
  for (int t : tokens)
    if (t < 0 || t >= g.vocab) throw std::invalid_argument("token out of vocabulary");
  ActionSeq a{std::move(tokens), false};
  a.is_finish = g.is_finish(a.tokens);
  return a;
}

struct Observation {
  std::vector<int> payload;

  friend bool operator==(const Observation&, const Observation&) = default;
};

/// One executed turn: who acted, what ran, the teacher's label, the result.
struct Turn {
  int indicator = 0;        // b_t: 1 = teacher executed
  ActionSeq executed;       // a_t
  ActionSeq teacher_label;  // label queried at this state
  Observation observation;  // o_t
};

inline void check_turn(const Turn& t) {
  if (t.indicator != 0 && t.indicator != 1)
    throw std::invalid_argument("indicator must be 0 or 1");
  if (t.indicator == 1 && !(t.executed == t.teacher_label))
    throw std::invalid_argument("teacher turn must execute the queried label");
}

using TurnArena = std::vector<Turn>;

/// Observable interaction history: the instance plus a prefix of turns.
/// Views into a shared arena keep prefixes cheap; equality is structural
/// over the executed actions and observations only (labels and indicators
/// are not part of the state).
struct Context {
  TaskInstance instance;
  std::shared_ptr<const TurnArena> arena;
  std::size_t history_len = 0;

  const Turn& turn(std::size_t i) const { return (*arena)[i]; }

  friend bool operator==(const Context& a, const Context& b) {
    if (!(a.instance == b.instance) || a.history_len != b.history_len) return false;
    for (std::size_t i = 0; i < a.history_len; ++i) {
      if (!(a.turn(i).executed == b.turn(i).executed)) return false;
      if (!(a.turn(i).observation == b.turn(i).observation)) return false;
    }
    return true;
  }
};

struct Trajectory {
  TaskInstance instance;
  std::vector<Turn> turns;
  int success = 0;
};

struct LabeledTransition {
  Context context;
  ActionSeq label;
};

struct Dataset {
  std::vector<LabeledTransition> transitions;
  std::vector<int> provenance;  // iteration index per transition

  std::size_t size() const { return transitions.size(); }
};

/// Context after t-1 turns of the trajectory; t ranges over 1..T+1.
inline Context context_of(const Trajectory& traj, std::size_t t) {
  if (t < 1 || t > traj.turns.size() + 1)
    throw std::out_of_range("turn index outside trajectory");
  auto arena = std::make_shared<TurnArena>(traj.turns);
  return Context{traj.instance, std::move(arena), t - 1};
}

/// All (state, teacher label) pairs of a trajectory, sharing one arena.
inline std::vector<LabeledTransition> batch_of(const Trajectory& traj) {
  auto arena = std::make_shared<TurnArena>(traj.turns);
  std::vector<LabeledTransition> out;
  out.reserve(traj.turns.size());
  for (std::size_t t = 0; t < traj.turns.size(); ++t) {
    if (traj.turns[t].teacher_label.tokens.empty())
      throw std::invalid_argument("missing teacher label at turn " + std::to_string(t + 1));
    out.push_back(LabeledTransition{Context{traj.instance, arena, t},
                                    traj.turns[t].teacher_label});
  }
  return out;
}

/// Union with provenance; existing entries keep their order and come first.
inline Dataset aggregate(Dataset existing, const std::vector<LabeledTransition>& fresh,
                         int iteration) {
  existing.transitions.reserve(existing.transitions.size() + fresh.size());
  existing.provenance.reserve(existing.provenance.size() + fresh.size());
  for (const auto& tr : fresh) {
    existing.transitions.push_back(tr);
    existing.provenance.push_back(iteration);
  }
  return existing;
}

// ---------------------------------------------------------------------------
// Trajectory log: one record per turn, tab-separated. Token lists and
// observation payloads are comma-separated decimal integers. The success
// flag is printed on the final turn only ("-" elsewhere).
// ---------------------------------------------------------------------------

inline std::string join_ints(std::span<const int> v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

inline std::vector<int> split_ints(std::string_view s) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t next = s.find(',', pos);
    if (next == std::string_view::npos) next = s.size();
    out.push_back(std::stoi(std::string(s.substr(pos, next - pos))));
    pos = next + 1;
  }
  return out;
}

inline void write_trajectory_log(std::ostream& os, const std::string& experiment_id,
                                 int iteration, const Trajectory& traj) {
  for (std::size_t t = 0; t < traj.turns.size(); ++t) {
    const Turn& turn = traj.turns[t];
    const bool last = (t + 1 == traj.turns.size());
    os << experiment_id << '\t' << traj.instance.id << '\t' << iteration << '\t'
       << (t + 1) << '\t' << turn.indicator << '\t'
       << join_ints(turn.executed.tokens) << '\t'
       << join_ints(turn.teacher_label.tokens) << '\t'
       << join_ints(turn.observation.payload) << '\t'
       << (last ? std::to_string(traj.success) : std::string("-")) << '\n';
  }
}

struct TrajectoryLogRecord {
  std::string experiment_id;
  std::int64_t instance_id = 0;
  int iteration = 0;
  int turn_index = 0;
  int indicator = 0;
  std::vector<int> executed_tokens;
  std::vector<int> teacher_tokens;
  std::vector<int> observation;
  std::string success_flag;
};

inline TrajectoryLogRecord parse_trajectory_log_line(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t pos = 0;
  while (true) {
    std::size_t next = line.find('\t', pos);
    fields.push_back(line.substr(pos, next == std::string::npos ? next : next - pos));
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  if (fields.size() != 9) throw std::invalid_argument("malformed trajectory record");
  TrajectoryLogRecord rec;
  rec.experiment_id = fields[0];
  rec.instance_id = std::stoll(fields[1]);
  rec.iteration = std::stoi(fields[2]);
  rec.turn_index = std::stoi(fields[3]);
  rec.indicator = std::stoi(fields[4]);
  rec.executed_tokens = split_ints(fields[5]);
  rec.teacher_tokens = split_ints(fields[6]);
  rec.observation = split_ints(fields[7]);
  rec.success_flag = fields[8];
  return rec;
}

}  // namespace mixil
