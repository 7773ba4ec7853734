#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "conviction/common.hpp"

namespace conviction {

// log pi(response | prompt). Implementations must be reentrant for
// concurrent evaluation.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual double log_prob(const std::string& prompt, const std::string& response) const = 0;
};

// Per-prompt softmax over an enumerated response set; the parameters are the
// logits. Normalization is exact, so every log-probability is <= 0.
class ToyPolicy final : public Policy {
 public:
  ToyPolicy() = default;

  // Adds `response` to the response set of `prompt` (no-op when present).
  void add_response(const std::string& prompt, const std::string& response, double logit = 0.0) {
    auto& entry = prompts_[prompt];
    if (entry.index.contains(response)) return;
    // Offsets after this prompt shift by one; rebuild them.
    entry.index.emplace(response, entry.responses.size());
    entry.responses.push_back(response);
    std::vector<double> logits;
    logits.reserve(logits_.size() + 1);
    for (auto& [p, e] : prompts_) {
      if (&e == &entry) {
        for (std::size_t i = 0; i + 1 < e.responses.size(); ++i) logits.push_back(logits_[e.offset + i]);
        logits.push_back(logit);
      } else {
        for (std::size_t i = 0; i < e.responses.size(); ++i) logits.push_back(logits_[e.offset + i]);
      }
    }
    std::size_t off = 0;
    for (auto& [p, e] : prompts_) {
      e.offset = off;
      off += e.responses.size();
    }
    logits_ = std::move(logits);
  }

  double log_prob(const std::string& prompt, const std::string& response) const override {
    const auto& e = entry(prompt);
    const auto it = e.index.find(response);
    if (it == e.index.end()) throw InvalidArgument("response outside the policy's support for prompt");
    return logits_[e.offset + it->second] - log_normalizer(e);
  }

  // grad += scale * d log_prob(response | prompt) / d logits
  void accumulate_log_prob_gradient(const std::string& prompt, const std::string& response,
                                    double scale, std::span<double> grad) const {
    const auto& e = entry(prompt);
    const auto y = e.index.at(response);
    const double lse = log_normalizer(e);
    for (std::size_t i = 0; i < e.responses.size(); ++i) {
      const double p = std::exp(logits_[e.offset + i] - lse);
      grad[e.offset + i] += scale * ((i == y ? 1.0 : 0.0) - p);
    }
  }

  std::size_t parameter_count() const noexcept { return logits_.size(); }
  const std::vector<double>& parameters() const noexcept { return logits_; }
  void set_parameters(std::vector<double> p) {
    if (p.size() != logits_.size()) throw InvalidArgument("parameter vector has the wrong size");
    logits_ = std::move(p);
  }

  const std::vector<std::string>& responses(const std::string& prompt) const { return entry(prompt).responses; }
  std::size_t prompt_count() const noexcept { return prompts_.size(); }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& [prompt, e] : prompts_) {
      nlohmann::json rs = nlohmann::json::array();
      for (std::size_t i = 0; i < e.responses.size(); ++i) {
        rs.push_back({{"response", e.responses[i]}, {"logit", logits_[e.offset + i]}});
      }
      j.push_back({{"prompt", prompt}, {"responses", rs}});
    }
    return j;
  }

 private:
  struct Entry {
    std::vector<std::string> responses;
    std::map<std::string, std::size_t> index;
    std::size_t offset = 0;
  };

  const Entry& entry(const std::string& prompt) const {
    const auto it = prompts_.find(prompt);
    if (it == prompts_.end()) throw InvalidArgument("prompt outside the policy's support");
    return it->second;
  }

  double log_normalizer(const Entry& e) const {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < e.responses.size(); ++i) m = std::max(m, logits_[e.offset + i]);
    double s = 0.0;
    for (std::size_t i = 0; i < e.responses.size(); ++i) s += std::exp(logits_[e.offset + i] - m);
    return m + std::log(s);
  }

  std::map<std::string, Entry> prompts_;
  std::vector<double> logits_;
};

struct DpoItem {
  std::string prompt;
  std::string chosen;
  std::string rejected;
};

using DpoBatch = std::vector<DpoItem>;

struct LoraPassthrough {
  int r = 8;
  int alpha = 16;
  double dropout = 0.05;
};

struct DpoConfig {
  double beta = 0.1;
  double learning_rate = 1e-5;
  int batch_size = 4;
  int epochs = 2;
  std::uint64_t seed = 0;
  double divergence_factor = 10.0;  // abort when a step loss exceeds this x initial
  LoraPassthrough lora;

  void validate() const {
    if (!(beta > 0.0)) throw InvalidArgument("beta must be > 0");
    if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be > 0");
    if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
    if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const DpoConfig& c) {
  j = nlohmann::json{{"beta", c.beta},
                     {"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"seed", c.seed},
                     {"divergence_factor", c.divergence_factor},
                     {"lora", {{"r", c.lora.r}, {"alpha", c.lora.alpha}, {"dropout", c.lora.dropout}}}};
}

inline void from_json(const nlohmann::json& j, DpoConfig& c) {
  DpoConfig d;
  c.beta = j.value("beta", d.beta);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
  c.divergence_factor = j.value("divergence_factor", d.divergence_factor);
  if (j.contains("lora")) {
    const auto& l = j.at("lora");
    c.lora.r = l.value("r", d.lora.r);
    c.lora.alpha = l.value("alpha", d.lora.alpha);
    c.lora.dropout = l.value("dropout", d.lora.dropout);
  }
}

namespace detail {

struct ItemTerms {
  double policy_chosen, policy_rejected, ref_chosen, ref_rejected;
};

inline ItemTerms item_terms(const Policy& policy, const Policy& reference, const DpoItem& item,
                            std::size_t index) {
  if (item.chosen == item.rejected) {
    throw InvalidArgument("DPO item " + std::to_string(index) + " has identical chosen and rejected");
  }
  ItemTerms t{policy.log_prob(item.prompt, item.chosen), policy.log_prob(item.prompt, item.rejected),
              reference.log_prob(item.prompt, item.chosen), reference.log_prob(item.prompt, item.rejected)};
  if (!std::isfinite(t.policy_chosen) || !std::isfinite(t.policy_rejected) ||
      !std::isfinite(t.ref_chosen) || !std::isfinite(t.ref_rejected)) {
    throw InvalidArgument("non-finite log-probability in DPO item " + std::to_string(index));
  }
  return t;
}

inline double inner_argument(const ItemTerms& t, double beta) {
  return beta * ((t.policy_chosen - t.ref_chosen) - (t.policy_rejected - t.ref_rejected));
}

}  // namespace detail

// Mean over items of -ln sigmoid(beta * [(log pi(y_w) - log ref(y_w)) -
// (log pi(y_l) - log ref(y_l))]).
inline double dpo_loss(const Policy& policy, const Policy& reference, const DpoBatch& batch, double beta) {
  if (batch.empty()) throw InvalidArgument("DPO loss of an empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto t = detail::item_terms(policy, reference, batch[i], i);
    total += softplus(-detail::inner_argument(t, beta));
  }
  return total / static_cast<double>(batch.size());
}

// Gradient of dpo_loss with respect to the toy policy's logits.
inline std::vector<double> dpo_gradient(const ToyPolicy& policy, const Policy& reference,
                                        const DpoBatch& batch, double beta) {
  if (batch.empty()) throw InvalidArgument("DPO gradient of an empty batch");
  std::vector<double> grad(policy.parameter_count(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto t = detail::item_terms(policy, reference, batch[i], i);
    // d/du softplus(-u) = -sigmoid(-u)
    const double dl_du = -sigmoid(-detail::inner_argument(t, beta));
    const double scale = inv_n * dl_du * beta;
    policy.accumulate_log_prob_gradient(batch[i].prompt, batch[i].chosen, scale, grad);
    policy.accumulate_log_prob_gradient(batch[i].prompt, batch[i].rejected, -scale, grad);
  }
  return grad;
}

inline double mean_margin(const Policy& policy, const DpoBatch& batch) {
  if (batch.empty()) return 0.0;
  double m = 0.0;
  for (const auto& item : batch) m += policy.log_prob(item.prompt, item.chosen) - policy.log_prob(item.prompt, item.rejected);
  return m / static_cast<double>(batch.size());
}

struct GradientCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_coordinate = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  double gradient_norm = 0.0;
  bool passed = true;
};

// Compares dpo_gradient with central finite differences coordinate by
// coordinate. Relative error is |a - n| / max(|a|, |n|), taken as 0 when
// both are below 1e-10.
inline GradientCheckReport dpo_gradient_check(const ToyPolicy& policy, const Policy& reference,
                                              const DpoBatch& batch, double beta, double epsilon,
                                              double tolerance = 1e-5) {
  if (policy.parameter_count() > 100) throw InvalidArgument("gradient check expects <= 100 parameters");
  GradientCheckReport report;
  const auto analytic = dpo_gradient(policy, reference, batch, beta);
  ToyPolicy probe = policy;
  auto params = policy.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto plus = params, minus = params;
    plus[k] += epsilon;
    minus[k] -= epsilon;
    probe.set_parameters(plus);
    const double lp = dpo_loss(probe, reference, batch, beta);
    probe.set_parameters(minus);
    const double lm = dpo_loss(probe, reference, batch, beta);
    const double numeric = (lp - lm) / (2.0 * epsilon);
    const double a = analytic[k];
    const double scale = std::max(std::abs(a), std::abs(numeric));
    const double rel = scale < 1e-10 ? 0.0 : std::abs(a - numeric) / scale;
    report.gradient_norm += a * a;
    if (k == 0 || rel > report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_coordinate = k;
      report.analytic_at_worst = a;
      report.numeric_at_worst = numeric;
    }
  }
  report.gradient_norm = std::sqrt(report.gradient_norm);
  report.passed = report.max_relative_error <= tolerance;
  return report;
}

struct DpoStep {
  int step = 0;
  double loss = 0.0;         // batch loss before the update
  double mean_margin = 0.0;  // batch mean log pi(y_w) - log pi(y_l) before the update
};

struct DpoRun {
  ToyPolicy policy;
  std::vector<DpoStep> history;
  double initial_loss = 0.0;  // full dataset, before training
  double final_loss = 0.0;
  double initial_margin = 0.0;
  double final_margin = 0.0;
  bool aborted = false;
  std::string abort_reason;
};

// Mini-batch gradient descent on the DPO loss against a frozen copy of the
// initial policy.
inline DpoRun train_dpo(const ToyPolicy& initial, const DpoBatch& dataset, const DpoConfig& config) {
  config.validate();
  if (dataset.empty()) throw InvalidArgument("DPO training set is empty");
  const ToyPolicy reference = initial;
  DpoRun run;
  run.policy = initial;
  run.initial_loss = dpo_loss(run.policy, reference, dataset, config.beta);
  run.initial_margin = mean_margin(run.policy, dataset);

  Rng rng(config.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  int step = 0;
  DpoBatch batch;
  for (int epoch = 0; epoch < config.epochs && !run.aborted; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      batch.clear();
      for (std::size_t k = start; k < end; ++k) batch.push_back(dataset[order[k]]);
      const double loss = dpo_loss(run.policy, reference, batch, config.beta);
      run.history.push_back({step++, loss, mean_margin(run.policy, batch)});
      if (!std::isfinite(loss) || loss > config.divergence_factor * run.initial_loss) {
        run.aborted = true;
        run.abort_reason = "loss " + std::to_string(loss) + " exceeded " +
                           std::to_string(config.divergence_factor) + "x the initial loss";
        break;
      }
      const auto grad = dpo_gradient(run.policy, reference, batch, config.beta);
      auto params = run.policy.parameters();
      for (std::size_t p = 0; p < params.size(); ++p) params[p] -= config.learning_rate * grad[p];
      run.policy.set_parameters(std::move(params));
    }
  }
  run.final_loss = dpo_loss(run.policy, reference, dataset, config.beta);
  run.final_margin = mean_margin(run.policy, dataset);
  return run;
}

// Toy policy whose support per prompt is every chosen/rejected text seen
// with that prompt, all logits zero.
inline ToyPolicy toy_policy_for(const DpoBatch& dataset) {
  ToyPolicy p;
  for (const auto& item : dataset) {
    p.add_response(item.prompt, item.chosen);
    p.add_response(item.prompt, item.rejected);
  }
  return p;
}

}  // namespace conviction
