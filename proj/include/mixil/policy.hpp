#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mixil/core.hpp"
#include "mixil/util.hpp"

namespace mixil {

/// Maps contexts to tabular keys or linear feature vectors. Environments
/// implement this; policies stay agnostic of the dynamics.
class Featurizer {
 public:
  virtual ~Featurizer() = default;
  virtual std::uint64_t key(const Context& ctx) const = 0;
  virtual std::vector<double> features(const Context& ctx) const = 0;
  virtual int feature_dim() const = 0;
};

enum class ParamMode { tabular, linear };

/// Token-factorized softmax parameters. Tabular mode keeps one logit row of
/// shape (max_len x vocab) per context key, with an implicit all-zero row
/// for unseen keys. Linear mode keeps a dense (max_len x feature_dim x vocab)
/// weight block applied to the featurizer output.
struct PolicyParams {
  ParamMode mode = ParamMode::tabular;
  int vocab = 0;
  int max_len = 1;
  int feature_dim = 0;           // linear only
  bool allow_default_row = true; // tabular: fall back to zeros on unseen keys
  std::unordered_map<std::uint64_t, std::vector<double>> rows;
  std::vector<double> weights;   // linear, flattened [pos][feature][token]

  std::size_t row_size() const {
    return static_cast<std::size_t>(max_len) * static_cast<std::size_t>(vocab);
  }

  std::vector<double>& ensure_row(std::uint64_t key) {
    auto [it, inserted] = rows.try_emplace(key);
    if (inserted) it->second.assign(row_size(), 0.0);
    return it->second;
  }

  double& weight_at(int pos, int feature, int token) {
    return weights[(static_cast<std::size_t>(pos) * feature_dim + feature) * vocab + token];
  }
  double weight_at(int pos, int feature, int token) const {
    return weights[(static_cast<std::size_t>(pos) * feature_dim + feature) * vocab + token];
  }
};

inline PolicyParams make_tabular_params(int vocab, int max_len) {
  PolicyParams p;
  p.mode = ParamMode::tabular;
  p.vocab = vocab;
  p.max_len = max_len;
  return p;
}

inline PolicyParams make_linear_params(int vocab, int max_len, int feature_dim) {
  PolicyParams p;
  p.mode = ParamMode::linear;
  p.vocab = vocab;
  p.max_len = max_len;
  p.feature_dim = feature_dim;
  p.weights.assign(static_cast<std::size_t>(max_len) * feature_dim * vocab, 0.0);
  return p;
}

/// Gradient (or any additive update) with the same shape as PolicyParams;
/// tabular rows are sparse over touched keys.
struct ParamGrad {
  std::unordered_map<std::uint64_t, std::vector<double>> rows;
  std::vector<double> dense;

  void add_scaled(const ParamGrad& other, double scale) {
    for (const auto& [key, row] : other.rows) {
      auto& dst = rows[key];
      if (dst.empty()) dst.assign(row.size(), 0.0);
      for (std::size_t i = 0; i < row.size(); ++i) dst[i] += scale * row[i];
    }
    if (!other.dense.empty()) {
      if (dense.empty()) dense.assign(other.dense.size(), 0.0);
      for (std::size_t i = 0; i < other.dense.size(); ++i)
        dense[i] += scale * other.dense[i];
    }
  }

  void scale(double s) {
    for (auto& [key, row] : rows)
      for (double& v : row) v *= s;
    for (double& v : dense) v *= s;
  }

  double max_abs() const {
    double m = 0.0;
    for (const auto& [key, row] : rows)
      for (double v : row) m = std::max(m, std::abs(v));
    for (double v : dense) m = std::max(m, std::abs(v));
    return m;
  }
};

/// params += scale * grad, creating tabular rows on first touch and
/// clamping logits to +/-logit_clip when the clip is positive.
inline void apply_update(PolicyParams& params, const ParamGrad& grad, double scale,
                         double logit_clip = 0.0) {
  if (params.mode == ParamMode::tabular) {
    for (const auto& [key, row] : grad.rows) {
      auto& dst = params.ensure_row(key);
      for (std::size_t i = 0; i < row.size(); ++i) {
        dst[i] += scale * row[i];
        if (logit_clip > 0.0) dst[i] = std::clamp(dst[i], -logit_clip, logit_clip);
      }
    }
  } else {
    for (std::size_t i = 0; i < grad.dense.size(); ++i) {
      params.weights[i] += scale * grad.dense[i];
      if (logit_clip > 0.0)
        params.weights[i] = std::clamp(params.weights[i], -logit_clip, logit_clip);
    }
  }
}

namespace detail {

inline std::vector<double> softmax(std::span<const double> logits) {
  double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

}  // namespace detail

/// Logits for position `pos` of the next action at context `ctx`.
inline std::vector<double> position_logits(const PolicyParams& params,
                                           const Featurizer& feat, const Context& ctx,
                                           int pos) {
  if (pos < 0 || pos >= params.max_len)
    throw std::out_of_range("action position outside configured max length");
  std::vector<double> logits(static_cast<std::size_t>(params.vocab), 0.0);
  if (params.mode == ParamMode::tabular) {
    auto it = params.rows.find(feat.key(ctx));
    if (it == params.rows.end()) {
      if (!params.allow_default_row)
        throw std::runtime_error("unresolved context key and no default row");
      return logits;
    }
    const double* row = it->second.data() + static_cast<std::size_t>(pos) * params.vocab;
    std::copy(row, row + params.vocab, logits.begin());
  } else {
    std::vector<double> phi = feat.features(ctx);
    if (static_cast<int>(phi.size()) != params.feature_dim)
      throw std::runtime_error("feature dimension mismatch");
    for (int f = 0; f < params.feature_dim; ++f) {
      if (phi[static_cast<std::size_t>(f)] == 0.0) continue;
      for (int v = 0; v < params.vocab; ++v)
        logits[static_cast<std::size_t>(v)] +=
            phi[static_cast<std::size_t>(f)] * params.weight_at(pos, f, v);
    }
  }
  return logits;
}

/// Next-token distribution after `prefix` tokens of the current action.
inline std::vector<double> token_dist(const PolicyParams& params, const Featurizer& feat,
                                      const Context& ctx, std::span<const int> prefix) {
  return detail::softmax(position_logits(params, feat, ctx,
                                         static_cast<int>(prefix.size())));
}

/// log pi(action | context): sum of per-position log token probabilities.
/// Always evaluated on the full softmax; truncation never applies here.
inline double logprob(const PolicyParams& params, const Featurizer& feat,
                      const Context& ctx, const ActionSeq& action) {
  double lp = 0.0;
  for (std::size_t j = 0; j < action.tokens.size(); ++j) {
    int tok = action.tokens[j];
    if (tok < 0 || tok >= params.vocab)
      throw std::invalid_argument("action token outside vocabulary");
    std::vector<double> logits = position_logits(params, feat, ctx, static_cast<int>(j));
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    lp += logits[static_cast<std::size_t>(tok)] - mx - std::log(z);
  }
  return lp;
}

/// Exact gradient of logprob: (indicator - probability) per touched position,
/// chain-ruled through the features in linear mode.
inline ParamGrad grad_logprob(const PolicyParams& params, const Featurizer& feat,
                              const Context& ctx, const ActionSeq& action) {
  ParamGrad g;
  if (params.mode == ParamMode::linear)
    g.dense.assign(params.weights.size(), 0.0);
  std::vector<double> phi;
  std::uint64_t key = 0;
  if (params.mode == ParamMode::tabular) {
    key = feat.key(ctx);
  } else {
    phi = feat.features(ctx);
  }
  for (std::size_t j = 0; j < action.tokens.size(); ++j) {
    std::vector<double> p =
        detail::softmax(position_logits(params, feat, ctx, static_cast<int>(j)));
    int tok = action.tokens[j];
    if (params.mode == ParamMode::tabular) {
      auto& row = g.rows[key];
      if (row.empty()) row.assign(params.row_size(), 0.0);
      double* slot = row.data() + j * static_cast<std::size_t>(params.vocab);
      for (int v = 0; v < params.vocab; ++v)
        slot[v] += (v == tok ? 1.0 : 0.0) - p[static_cast<std::size_t>(v)];
    } else {
      for (int f = 0; f < params.feature_dim; ++f) {
        double x = phi[static_cast<std::size_t>(f)];
        if (x == 0.0) continue;
        for (int v = 0; v < params.vocab; ++v) {
          std::size_t idx = (j * static_cast<std::size_t>(params.feature_dim) + f) *
                                params.vocab + static_cast<std::size_t>(v);
          g.dense[idx] += x * ((v == tok ? 1.0 : 0.0) - p[static_cast<std::size_t>(v)]);
        }
      }
    }
  }
  return g;
}

struct SamplingConfig {
  double temperature = 1.0;
  double nucleus_mass = 1.0;  // top-p; 1.0 disables truncation
  bool greedy = false;        // overrides temperature and nucleus
};

namespace detail {

// Temperature then nucleus truncation on a probability vector; greedy picks
// the argmax with ties broken toward the lowest token id.
inline int draw_token(const std::vector<double>& probs, const SamplingConfig& cfg,
                      Rng& rng) {
  const std::size_t n = probs.size();
  if (cfg.greedy) {
    std::size_t best = 0;
    for (std::size_t v = 1; v < n; ++v)
      if (probs[v] > probs[best]) best = v;
    return static_cast<int>(best);
  }
  // work in log space so tiny temperatures stay stable
  std::vector<double> w(n);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < n; ++v) {
    w[v] = (probs[v] > 0.0 ? std::log(probs[v]) / cfg.temperature
                           : -std::numeric_limits<double>::infinity());
    mx = std::max(mx, w[v]);
  }
  double z = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    w[v] = std::exp(w[v] - mx);
    z += w[v];
  }
  for (std::size_t v = 0; v < n; ++v) w[v] /= z;

  if (cfg.nucleus_mass < 1.0) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
    double acc = 0.0;
    std::vector<double> trunc(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      trunc[order[i]] = w[order[i]];
      acc += w[order[i]];
      if (acc >= cfg.nucleus_mass) break;
    }
    w = std::move(trunc);
  }
  return sample_index(w, rng);
}

}  // namespace detail

/// Read-only policy view: enough to roll out, label, and score actions.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual std::vector<double> action_token_dist(const Context& ctx,
                                                std::span<const int> prefix) const = 0;
  virtual double action_logprob(const Context& ctx, const ActionSeq& action) const {
    double lp = 0.0;
    for (std::size_t j = 0; j < action.tokens.size(); ++j) {
      std::vector<double> p = action_token_dist(
          ctx, std::span<const int>(action.tokens.data(), j));
      double pj = p[static_cast<std::size_t>(action.tokens[j])];
      lp += (pj > 0.0 ? std::log(pj) : -std::numeric_limits<double>::infinity());
    }
    return lp;
  }
};

/// Autoregressive sampling under the grammar: draw tokens until the action
/// is complete or max_action_len is reached.
inline ActionSeq sample_action(const Policy& policy, const ActionGrammar& grammar,
                               const Context& ctx, const SamplingConfig& cfg, Rng& rng) {
  std::vector<int> toks;
  while (static_cast<int>(toks.size()) < grammar.max_action_len) {
    std::vector<double> p = policy.action_token_dist(ctx, toks);
    toks.push_back(detail::draw_token(p, cfg, rng));
    if (grammar.complete(toks)) break;
  }
  return make_action(grammar, std::move(toks));
}

/// Student view over PolicyParams + a featurizer.
class SoftmaxPolicy : public Policy {
 public:
  SoftmaxPolicy(const PolicyParams& params, const Featurizer& feat)
      : params_(&params), feat_(&feat) {}

  std::vector<double> action_token_dist(const Context& ctx,
                                        std::span<const int> prefix) const override {
    return token_dist(*params_, *feat_, ctx, prefix);
  }

  double action_logprob(const Context& ctx, const ActionSeq& action) const override {
    return logprob(*params_, *feat_, ctx, action);
  }

  const PolicyParams& params() const { return *params_; }
  const Featurizer& featurizer() const { return *feat_; }

 private:
  const PolicyParams* params_;
  const Featurizer* feat_;
};

// ---------------------------------------------------------------------------
// Checkpoints: versioned text records (key, position, token, logit) for
// tabular mode, (position, feature, token, weight) for linear; rows sorted.
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointMagic = "mixil-checkpoint v1";

inline void save_params(std::ostream& os, const PolicyParams& p) {
  os << kCheckpointMagic << '\n';
  os << "mode " << (p.mode == ParamMode::tabular ? "tabular" : "linear") << '\n';
  os << "vocab " << p.vocab << '\n';
  os << "max_len " << p.max_len << '\n';
  os << "feature_dim " << p.feature_dim << '\n';
  char buf[64];
  if (p.mode == ParamMode::tabular) {
    std::map<std::uint64_t, const std::vector<double>*> ordered;
    for (const auto& [key, row] : p.rows) ordered.emplace(key, &row);
    os << "rows " << ordered.size() << '\n';
    for (const auto& [key, row] : ordered) {
      for (int pos = 0; pos < p.max_len; ++pos)
        for (int v = 0; v < p.vocab; ++v) {
          std::snprintf(buf, sizeof buf, "%.17g",
                        (*row)[static_cast<std::size_t>(pos) * p.vocab + v]);
          os << key << ' ' << pos << ' ' << v << ' ' << buf << '\n';
        }
    }
  } else {
    os << "rows " << 0 << '\n';
    for (int pos = 0; pos < p.max_len; ++pos)
      for (int f = 0; f < p.feature_dim; ++f)
        for (int v = 0; v < p.vocab; ++v) {
          std::snprintf(buf, sizeof buf, "%.17g", p.weight_at(pos, f, v));
          os << pos << ' ' << f << ' ' << v << ' ' << buf << '\n';
        }
  }
}

inline PolicyParams load_params(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointMagic)
    throw std::runtime_error("unrecognized checkpoint version");
  PolicyParams p;
  std::string word, modeword;
  std::size_t nrows = 0;
  is >> word >> modeword;
  if (word != "mode" || (modeword != "tabular" && modeword != "linear"))
    throw std::runtime_error("corrupt checkpoint: mode");
  p.mode = (modeword == "tabular") ? ParamMode::tabular : ParamMode::linear;
  if (!(is >> word >> p.vocab) || word != "vocab" || p.vocab <= 0)
    throw std::runtime_error("corrupt checkpoint: vocab");
  if (!(is >> word >> p.max_len) || word != "max_len" || p.max_len <= 0)
    throw std::runtime_error("corrupt checkpoint: max_len");
  if (!(is >> word >> p.feature_dim) || word != "feature_dim" || p.feature_dim < 0)
    throw std::runtime_error("corrupt checkpoint: feature_dim");
  if (!(is >> word >> nrows) || word != "rows")
    throw std::runtime_error("corrupt checkpoint: rows");
  if (p.mode == ParamMode::tabular) {
    std::uint64_t key = 0;
    int pos = 0, tok = 0;
    double logit = 0.0;
    std::size_t expected = nrows * p.row_size();
    for (std::size_t i = 0; i < expected; ++i) {
      if (!(is >> key >> pos >> tok >> logit))
        throw std::runtime_error("corrupt checkpoint: truncated record");
      if (pos < 0 || pos >= p.max_len || tok < 0 || tok >= p.vocab)
        throw std::runtime_error("corrupt checkpoint: record out of range");
      p.ensure_row(key)[static_cast<std::size_t>(pos) * p.vocab + tok] = logit;
    }
  } else {
    p.weights.assign(static_cast<std::size_t>(p.max_len) * p.feature_dim * p.vocab, 0.0);
    int pos = 0, f = 0, tok = 0;
    double w = 0.0;
    for (std::size_t i = 0; i < p.weights.size(); ++i) {
      if (!(is >> pos >> f >> tok >> w))
        throw std::runtime_error("corrupt checkpoint: truncated record");
      if (pos < 0 || pos >= p.max_len || f < 0 || f >= p.feature_dim || tok < 0 ||
          tok >= p.vocab)
        throw std::runtime_error("corrupt checkpoint: record out of range");
      p.weight_at(pos, f, tok) = w;
    }
  }
  return p;
}

inline void save_params_file(const std::string& path, const PolicyParams& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  save_params(os, p);
}

inline PolicyParams load_params_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  return load_params(is);
}

}  // namespace mixil
