#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "conviction/backend.hpp"
#include "conviction/common.hpp"
#include "conviction/regressor.hpp"

namespace conviction {

// How the cumulative probability ratio treats its inputs.
//   log_literal:   the ratio is taken over the length-normalized
//                  log-probabilities P' themselves (all terms <= 0).
//   exponentiated: the same ratio over exp(P'), i.e. per-token geometric
//                  mean probabilities.
enum class RatioVariant { log_literal, exponentiated };

inline std::string to_string(RatioVariant v) {
  return v == RatioVariant::log_literal ? "log-literal" : "exponentiated";
}

inline RatioVariant ratio_variant_from_string(const std::string& s) {
  if (s == "log-literal") return RatioVariant::log_literal;
  if (s == "exponentiated") return RatioVariant::exponentiated;
  throw InvalidArgument("unknown ratio variant '" + s + "'");
}

// Which record plays the role of the answer a.
enum class AnswerSelection {
  max_p_prime,  // the sample with the highest P' (first on ties)
  supplied,     // a separately decoded answer passed by the caller
};

struct BceConfig {
  double gamma = 0.3;
  double alpha = 0.7;
  RatioVariant ratio_variant = RatioVariant::log_literal;
  AnswerSelection answer_selection = AnswerSelection::max_p_prime;

  void validate() const {
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw InvalidArgument("gamma must be >= 0");
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw InvalidArgument("alpha must be > 0");
  }
};

struct ConfidenceEstimate {
  std::string question_id;
  std::string answer_text;
  double p_prime = 0.0;
  double rho_hat = 1.0;
  double confidence_q = 1.0;
  double confidence_qa = 1.0;
  RatioVariant variant = RatioVariant::log_literal;
  std::size_t n_samples = 0;
};

// Cumulative probability ratio with the answer included in both sums:
//
//   rho_hat = (P' + sum_i [P'_i < P'] P'_i) / (P' + sum_j P'_j)
//
// The indicator is strict, so samples tied with the answer only enter the
// denominator. A zero denominator (every log-literal input is 0) yields 1.
inline double cumulative_prob_ratio(double p_prime, std::span<const double> sample_p_primes,
                                    RatioVariant variant = RatioVariant::log_literal) {
  if (!std::isfinite(p_prime)) throw InvalidArgument("p_prime must be finite");
  for (double x : sample_p_primes) {
    if (!std::isfinite(x)) throw InvalidArgument("sample log-probabilities must be finite");
  }
  if (variant == RatioVariant::log_literal) {
    if (p_prime > 0.0) throw InvalidArgument("p_prime must be <= 0");
    for (double x : sample_p_primes) {
      if (x > 0.0) throw InvalidArgument("sample log-probabilities must be <= 0");
    }
  }
  auto value = [variant](double x) { return variant == RatioVariant::log_literal ? x : std::exp(x); };

  double numerator = value(p_prime);
  double denominator = value(p_prime);
  for (double x : sample_p_primes) {
    const double v = value(x);
    denominator += v;
    if (x < p_prime) numerator += v;
  }
  if (denominator == 0.0) return 1.0;
  return std::clamp(numerator / denominator, std::numeric_limits<double>::min(), 1.0);
}

// rho_hat^gamma * confidence_q.
inline double answer_confidence(double rho_hat, double confidence_q, double gamma) {
  if (!(rho_hat > 0.0 && rho_hat <= 1.0)) throw InvalidArgument("rho_hat must be in (0, 1]");
  if (!(confidence_q > 0.0 && confidence_q <= 1.0)) {
    throw InvalidArgument("confidence_q must be in (0, 1]");
  }
  if (!(gamma >= 0.0)) throw InvalidArgument("gamma must be >= 0");
  if (gamma == 0.0 || rho_hat == 1.0) return confidence_q;
  return std::pow(rho_hat, gamma) * confidence_q;
}

inline std::vector<double> p_primes(const SampleSet& samples) {
  std::vector<double> out;
  out.reserve(samples.records.size());
  for (const auto& r : samples.records) out.push_back(length_normalized_logprob(r));
  return out;
}

inline std::vector<std::vector<float>> features_of(const SampleSet& samples) {
  std::vector<std::vector<float>> out;
  out.reserve(samples.records.size());
  for (const auto& r : samples.records) out.push_back(r.feature);
  return out;
}

// Index of the highest-P' record; the first one on ties.
inline std::size_t modal_record(const SampleSet& samples) {
  if (samples.records.empty()) throw InvalidArgument("empty sample set");
  const auto ps = p_primes(samples);
  return static_cast<std::size_t>(std::max_element(ps.begin(), ps.end()) - ps.begin());
}

// Question-side confidence from the regressor, answer-side adjustment from
// the cumulative probability ratio of the answer against the samples.
inline ConfidenceEstimate estimate_bilateral(const SampleSet& samples, const GenerationRecord& answer,
                                             const RegressorModel& model, const BceConfig& config) {
  config.validate();
  if (samples.records.empty()) throw InvalidArgument("estimate_bilateral needs samples");
  if (answer.feature.size() != static_cast<std::size_t>(model.feature_dim)) {
    throw InvalidArgument("answer feature dimension " + std::to_string(answer.feature.size()) +
                          " does not match the regressor's " + std::to_string(model.feature_dim));
  }
  ConfidenceEstimate est;
  est.question_id = samples.question_id;
  est.answer_text = answer.text;
  est.variant = config.ratio_variant;
  est.n_samples = samples.records.size();
  est.confidence_q = confidence_from_se(predict_se(model, features_of(samples)), config.alpha);
  // exp underflows to 0 for enormous predicted entropies; keep the range open.
  est.confidence_q = std::max(est.confidence_q, std::numeric_limits<double>::min());
  est.p_prime = length_normalized_logprob(answer);
  const auto ps = p_primes(samples);
  est.rho_hat = cumulative_prob_ratio(est.p_prime, ps, config.ratio_variant);
  est.confidence_qa = std::max(answer_confidence(est.rho_hat, est.confidence_q, config.gamma),
                               std::numeric_limits<double>::min());
  return est;
}

// Uses the modal sample as the answer.
inline ConfidenceEstimate estimate_bilateral(const SampleSet& samples, const RegressorModel& model,
                                             const BceConfig& config) {
  return estimate_bilateral(samples, samples.records.at(modal_record(samples)), model, config);
}

}  // namespace conviction
