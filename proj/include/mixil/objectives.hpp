#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "mixil/core.hpp"
#include "mixil/policy.hpp"

namespace mixil {

enum class MethodKind { sft, pg_grpo, opd, dagger_turn, aggrevate_traj };

enum class RegularizerKind { none, kl_to_reference };

/// One row of the unified method table: where states and labels come from is
/// decided by the trainer; this spec carries the weight/regularizer choices.
struct MethodSpec {
  MethodKind kind = MethodKind::sft;
  double lambda = 0.0;
  RegularizerKind regularizer = RegularizerKind::none;
  bool opd_token_level = false;  // per-token log-ratio weights instead of per-action
};

inline void check_method(const MethodSpec& m) {
  if (m.lambda < 0.0) throw std::invalid_argument("lambda must be >= 0");
  if (m.lambda == 0.0 && m.regularizer != RegularizerKind::none)
    throw std::invalid_argument("regularizer requires lambda > 0");
}

/// (context, action, weight) with stop-gradient semantics: everything except
/// log pi_theta is frozen data. token_weights, when present, carry per-token
/// weights and override the scalar weight.
struct WeightedExample {
  Context context;
  ActionSeq action;
  double weight = 1.0;
  std::optional<std::vector<double>> token_weights;
};

// --- Table-2 weight functions -----------------------------------------------

inline double weight_sft(const LabeledTransition&) { return 1.0; }

/// OPD weight: log pi_e(a|s) - log pi_theta(a|s), summed over the action's
/// tokens, evaluated at collection-time parameters and then frozen.
inline double weight_opd(const Policy& student, const Policy& teacher,
                         const Context& ctx, const ActionSeq& action) {
  return teacher.action_logprob(ctx, action) - student.action_logprob(ctx, action);
}

/// Per-token OPD weights for the token-level variant.
inline std::vector<double> weight_opd_tokens(const Policy& student, const Policy& teacher,
                                             const Context& ctx, const ActionSeq& action) {
  std::vector<double> out(action.tokens.size(), 0.0);
  for (std::size_t j = 0; j < action.tokens.size(); ++j) {
    std::span<const int> prefix(action.tokens.data(), j);
    double pe = teacher.action_token_dist(ctx, prefix)[static_cast<std::size_t>(action.tokens[j])];
    double ps = student.action_token_dist(ctx, prefix)[static_cast<std::size_t>(action.tokens[j])];
    double le = pe > 0.0 ? std::log(pe) : -std::numeric_limits<double>::infinity();
    double ls = ps > 0.0 ? std::log(ps) : -std::numeric_limits<double>::infinity();
    out[j] = le - ls;
  }
  return out;
}

/// Group-normalized advantages: (r - mean) / population std; all zeros when
/// the group is degenerate (identical rewards).
inline std::vector<double> weight_pg_group(const std::vector<int>& rewards) {
  const std::size_t g = rewards.size();
  if (g < 2) throw std::invalid_argument("group size must be >= 2");
  double mean = 0.0;
  for (int r : rewards) mean += r;
  mean /= static_cast<double>(g);
  double var = 0.0;
  for (int r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(g);
  std::vector<double> adv(g, 0.0);
  if (var <= 0.0) return adv;
  const double inv_std = 1.0 / std::sqrt(var);
  for (std::size_t k = 0; k < g; ++k) adv[k] = (rewards[k] - mean) * inv_std;
  return adv;
}

// --- Token-level cross-entropy ----------------------------------------------

struct LossGrad {
  double loss = 0.0;
  ParamGrad grad;
};

/// loss = -log pi_theta(label | context); gradient to match.
inline LossGrad ce_loss(const PolicyParams& params, const Featurizer& feat,
                        const LabeledTransition& tr) {
  LossGrad out;
  out.loss = -logprob(params, feat, tr.context, tr.label);
  out.grad = grad_logprob(params, feat, tr.context, tr.label);
  out.grad.scale(-1.0);
  return out;
}

// --- Shared-prefix packing ---------------------------------------------------

/// Masked span of label tokens inside a packed token stream.
struct PackedSegment {
  int turn_index = 0;     // 1-based turn whose state the span is scored at
  std::size_t offset = 0; // into tokens
  std::size_t len = 0;
};

/// Transitions of one trajectory packed into a single stream. The stream
/// interleaves each turn's label tokens (masked into the loss) with the
/// executed tokens that extend the shared prefix (unmasked). `replay` holds
/// the executed turns needed to rebuild each segment's context.
struct PackedSequence {
  TaskInstance instance;
  std::vector<int> tokens;
  std::vector<std::uint8_t> loss_mask;
  std::vector<PackedSegment> segments;
  std::vector<Turn> replay;  // turns 1..T-1 of the chain

  std::size_t masked_tokens() const {
    std::size_t n = 0;
    for (auto m : loss_mask) n += m;
    return n;
  }
};

/// Group transitions into longest-common-prefix chains and pack each chain.
/// Transitions must form clean chains (one per trajectory): equal-length or
/// non-extending contexts in one group are rejected.
inline std::vector<PackedSequence> pack_shared_prefix(
    const std::vector<LabeledTransition>& transitions) {
  std::map<std::int64_t, std::vector<const LabeledTransition*>> groups;
  for (const auto& tr : transitions) groups[tr.context.instance.id].push_back(&tr);

  std::vector<PackedSequence> out;
  for (auto& [id, group] : groups) {
    std::stable_sort(group.begin(), group.end(),
                     [](const LabeledTransition* a, const LabeledTransition* b) {
                       return a->context.history_len < b->context.history_len;
                     });
    for (std::size_t k = 0; k + 1 < group.size(); ++k) {
      const Context& shorter = group[k]->context;
      const Context& longer = group[k + 1]->context;
      if (longer.history_len != shorter.history_len + 1)
        throw std::invalid_argument("inconsistent prefixes in one group");
      for (std::size_t t = 0; t < shorter.history_len; ++t) {
        if (!(shorter.turn(t).executed == longer.turn(t).executed) ||
            !(shorter.turn(t).observation == longer.turn(t).observation))
          throw std::invalid_argument("inconsistent prefixes in one group");
      }
    }
    PackedSequence seq;
    seq.instance = group.front()->context.instance;
    const Context& deepest = group.back()->context;
    for (std::size_t t = 0; t < deepest.history_len; ++t)
      seq.replay.push_back(deepest.turn(t));
    for (std::size_t k = 0; k < group.size(); ++k) {
      const LabeledTransition& tr = *group[k];
      PackedSegment seg;
      seg.turn_index = static_cast<int>(tr.context.history_len) + 1;
      seg.offset = seq.tokens.size();
      seg.len = tr.label.tokens.size();
      for (int tok : tr.label.tokens) {
        seq.tokens.push_back(tok);
        seq.loss_mask.push_back(1);
      }
      seq.segments.push_back(seg);
      // executed tokens extend the shared prefix, outside the loss
      if (k + 1 < group.size()) {
        const Turn& executed = group[k + 1]->context.turn(tr.context.history_len);
        for (int tok : executed.executed.tokens) {
          seq.tokens.push_back(tok);
          seq.loss_mask.push_back(0);
        }
      }
    }
    out.push_back(std::move(seq));
  }
  return out;
}

/// Recover the (context, label) pairs a packed sequence encodes.
inline std::vector<LabeledTransition> unpack(const PackedSequence& seq,
                                             const ActionGrammar& grammar) {
  auto arena = std::make_shared<TurnArena>(seq.replay);
  std::vector<LabeledTransition> out;
  for (const PackedSegment& seg : seq.segments) {
    std::vector<int> toks(seq.tokens.begin() + static_cast<std::ptrdiff_t>(seg.offset),
                          seq.tokens.begin() + static_cast<std::ptrdiff_t>(seg.offset + seg.len));
    out.push_back(LabeledTransition{
        Context{seq.instance, arena, static_cast<std::size_t>(seg.turn_index - 1)},
        make_action(grammar, std::move(toks))});
  }
  return out;
}

/// Summed masked loss and gradient over a packed sequence; equal to the sum
/// of per-transition ce_loss results over the same transitions.
inline LossGrad packed_loss(const PolicyParams& params, const Featurizer& feat,
                            const PackedSequence& seq) {
  auto arena = std::make_shared<TurnArena>(seq.replay);
  LossGrad total;
  for (const PackedSegment& seg : seq.segments) {
    Context ctx{seq.instance, arena, static_cast<std::size_t>(seg.turn_index - 1)};
    ActionSeq label;
    label.tokens.assign(seq.tokens.begin() + static_cast<std::ptrdiff_t>(seg.offset),
                        seq.tokens.begin() + static_cast<std::ptrdiff_t>(seg.offset + seg.len));
    total.loss += -logprob(params, feat, ctx, label);
    ParamGrad g = grad_logprob(params, feat, ctx, label);
    total.grad.add_scaled(g, -1.0);
  }
  return total;
}

// --- Unified objective --------------------------------------------------------

namespace detail {

/// KL(pi_theta(.|ctx) || pi_ref(.|ctx)) summed over token positions, with the
/// gradient w.r.t. theta's logits at the touched key/features.
inline double kl_to_reference_term(const PolicyParams& params, const PolicyParams& ref,
                                   const Featurizer& feat, const Context& ctx,
                                   ParamGrad& grad_out, double grad_scale) {
  double kl_total = 0.0;
  std::uint64_t key = 0;
  std::vector<double> phi;
  if (params.mode == ParamMode::tabular) key = feat.key(ctx);
  else phi = feat.features(ctx);
  for (int pos = 0; pos < params.max_len; ++pos) {
    std::vector<double> p = detail::softmax(position_logits(params, feat, ctx, pos));
    std::vector<double> q = detail::softmax(position_logits(ref, feat, ctx, pos));
    double kl = 0.0;
    for (int v = 0; v < params.vocab; ++v) {
      const auto vi = static_cast<std::size_t>(v);
      if (p[vi] > 0.0) kl += p[vi] * (std::log(p[vi]) - std::log(q[vi]));
    }
    kl_total += kl;
    // d KL / d z_v = p_v * (log(p_v/q_v) - KL)
    if (params.mode == ParamMode::tabular) {
      auto& row = grad_out.rows[key];
      if (row.empty()) row.assign(params.row_size(), 0.0);
      for (int v = 0; v < params.vocab; ++v) {
        const auto vi = static_cast<std::size_t>(v);
        double d = p[vi] * ((std::log(p[vi]) - std::log(q[vi])) - kl);
        row[static_cast<std::size_t>(pos) * params.vocab + vi] += grad_scale * d;
      }
    } else {
      if (grad_out.dense.empty()) grad_out.dense.assign(params.weights.size(), 0.0);
      for (int v = 0; v < params.vocab; ++v) {
        const auto vi = static_cast<std::size_t>(v);
        double d = p[vi] * ((std::log(p[vi]) - std::log(q[vi])) - kl);
        for (int f = 0; f < params.feature_dim; ++f) {
          if (phi[static_cast<std::size_t>(f)] == 0.0) continue;
          std::size_t idx =
              (static_cast<std::size_t>(pos) * params.feature_dim + static_cast<std::size_t>(f)) *
                  params.vocab + vi;
          grad_out.dense[idx] += grad_scale * phi[static_cast<std::size_t>(f)] * d;
        }
      }
    }
  }
  return kl_total;
}

}  // namespace detail

struct UnifiedResult {
  double objective = 0.0;  // to be ascended
  ParamGrad grad;
};

/// Gradient of position j alone within log pi(action | context).
inline ParamGrad grad_logprob_position(const PolicyParams& params, const Featurizer& feat,
                                       const Context& ctx, const ActionSeq& action, int j) {
  ParamGrad g;
  std::vector<double> p = detail::softmax(position_logits(params, feat, ctx, j));
  int tok = action.tokens[static_cast<std::size_t>(j)];
  if (params.mode == ParamMode::tabular) {
    auto& row = g.rows[feat.key(ctx)];
    row.assign(params.row_size(), 0.0);
    double* slot = row.data() + static_cast<std::size_t>(j) * params.vocab;
    for (int v = 0; v < params.vocab; ++v)
      slot[v] = (v == tok ? 1.0 : 0.0) - p[static_cast<std::size_t>(v)];
  } else {
    g.dense.assign(params.weights.size(), 0.0);
    std::vector<double> phi = feat.features(ctx);
    for (int f = 0; f < params.feature_dim; ++f) {
      if (phi[static_cast<std::size_t>(f)] == 0.0) continue;
      for (int v = 0; v < params.vocab; ++v) {
        std::size_t idx =
            (static_cast<std::size_t>(j) * params.feature_dim + static_cast<std::size_t>(f)) *
                params.vocab + static_cast<std::size_t>(v);
        g.dense[idx] = phi[static_cast<std::size_t>(f)] *
                       ((v == tok ? 1.0 : 0.0) - p[static_cast<std::size_t>(v)]);
      }
    }
  }
  return g;
}

/// objective = (1/N) sum_k w_k log pi_theta(a_k|s_k) - lambda * Omega(theta).
/// Weights, contexts and actions are constants; the gradient flows through
/// log pi_theta and the regularizer only. Omega (kl_to_reference) is the mean
/// over example contexts of KL(pi_theta || pi_ref) summed over positions.
inline UnifiedResult unified_loss(const PolicyParams& params, const Featurizer& feat,
                                  const std::vector<WeightedExample>& examples,
                                  const MethodSpec& method,
                                  const PolicyParams* reference = nullptr) {
  check_method(method);
  UnifiedResult out;
  if (params.mode == ParamMode::linear) out.grad.dense.assign(params.weights.size(), 0.0);
  if (examples.empty()) return out;
  const double inv_n = 1.0 / static_cast<double>(examples.size());

  for (const WeightedExample& ex : examples) {
    if (ex.token_weights) {
      const std::vector<double>& tw = *ex.token_weights;
      if (tw.size() != ex.action.tokens.size())
        throw std::invalid_argument("token weight count must match action length");
      for (std::size_t j = 0; j < ex.action.tokens.size(); ++j) {
        if (tw[j] == 0.0) continue;
        ActionSeq sub;
        sub.tokens.assign(ex.action.tokens.begin(),
                          ex.action.tokens.begin() + static_cast<std::ptrdiff_t>(j + 1));
        // score only position j: subtract the prefix contribution
        std::vector<double> p = token_dist(params, feat, ex.context,
                                           std::span<const int>(ex.action.tokens.data(), j));
        double lp = std::log(p[static_cast<std::size_t>(ex.action.tokens[j])]);
        out.objective += inv_n * tw[j] * lp;
        ParamGrad g = grad_logprob_position(params, feat, ex.context, ex.action,
                                            static_cast<int>(j));
        out.grad.add_scaled(g, inv_n * tw[j]);
      }
    } else {
      if (ex.weight == 0.0) continue;
      out.objective += inv_n * ex.weight * logprob(params, feat, ex.context, ex.action);
      ParamGrad g = grad_logprob(params, feat, ex.context, ex.action);
      out.grad.add_scaled(g, inv_n * ex.weight);
    }
  }

  if (method.lambda > 0.0) {
    if (method.regularizer == RegularizerKind::kl_to_reference) {
      if (!reference) throw std::invalid_argument("kl_to_reference requires reference params");
      double kl_sum = 0.0;
      for (const WeightedExample& ex : examples)
        kl_sum += detail::kl_to_reference_term(params, *reference, feat, ex.context,
                                               out.grad, -method.lambda * inv_n);
      out.objective -= method.lambda * kl_sum * inv_n;
    }
  }
  return out;
}

}  // namespace mixil
