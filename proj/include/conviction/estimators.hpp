#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "conviction/backend.hpp"
#include "conviction/common.hpp"
#include "conviction/judge.hpp"
#include "conviction/prompts.hpp"

namespace conviction {

struct SemanticClustering {
  std::vector<std::vector<std::size_t>> clusters;  // record indices, ascending
  std::vector<double> weights;                     // one per cluster, sums to 1
};

enum class ClusterWeighting {
  count,        // |c| / n
  probability,  // proportional to sum of exp(P') over the cluster
};

enum class EstimatorKind { semantic_entropy, predictive_entropy, p_true, verbalized };

inline std::string to_string(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::semantic_entropy: return "semantic_entropy";
    case EstimatorKind::predictive_entropy: return "predictive_entropy";
    case EstimatorKind::p_true: return "p_true";
    case EstimatorKind::verbalized: return "verbalized";
  }
  return {};
}

inline EstimatorKind estimator_from_string(const std::string& s) {
  if (s == "semantic_entropy") return EstimatorKind::semantic_entropy;
  if (s == "predictive_entropy") return EstimatorKind::predictive_entropy;
  if (s == "p_true") return EstimatorKind::p_true;
  if (s == "verbalized") return EstimatorKind::verbalized;
  throw InvalidArgument("unknown estimator '" + s + "'");
}

struct EstimatorResult {
  EstimatorKind estimator;
  double value = 0.0;
  std::optional<double> confidence;
  bool missing = false;  // verbalized reply could not be parsed
};

// Groups records whose texts the judge deems equivalent. Clusters are
// ordered by their smallest member index.
inline SemanticClustering cluster(const SampleSet& samples, const EquivalenceJudge& judge,
                                  ClusterWeighting weighting = ClusterWeighting::count) {
  const std::size_t n = samples.records.size();
  if (n == 0) throw InvalidArgument("cannot cluster an empty sample set");

  DisjointSets sets(n);
  if (judge.kind() == EquivalenceJudge::Kind::external) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        if (sets.find(i) == sets.find(j)) continue;
        if (judge.equivalent(samples.records[i].text, samples.records[j].text)) sets.unite(i, j);
      }
    }
  } else {
    std::map<std::string, std::size_t> first_with_key;
    for (std::size_t i = 0; i < n; ++i) {
      auto [it, inserted] = first_with_key.emplace(judge.key(samples.records[i].text), i);
      if (!inserted) sets.unite(it->second, i);
    }
  }

  SemanticClustering out;
  std::map<std::size_t, std::size_t> root_to_cluster;
  for (std::size_t i = 0; i < n; ++i) {
    const auto root = sets.find(i);
    auto [it, inserted] = root_to_cluster.emplace(root, out.clusters.size());
    if (inserted) out.clusters.emplace_back();
    out.clusters[it->second].push_back(i);
  }

  out.weights.resize(out.clusters.size());
  if (weighting == ClusterWeighting::count) {
    for (std::size_t c = 0; c < out.clusters.size(); ++c) {
      out.weights[c] = static_cast<double>(out.clusters[c].size()) / static_cast<double>(n);
    }
  } else {
    double total = 0.0;
    for (std::size_t c = 0; c < out.clusters.size(); ++c) {
      double w = 0.0;
      for (auto i : out.clusters[c]) w += std::exp(length_normalized_logprob(samples.records[i]));
      out.weights[c] = w;
      total += w;
    }
    for (auto& w : out.weights) w /= total;
  }
  return out;
}

// Entropy of the cluster weights, natural log.
inline double semantic_entropy(std::span<const double> weights) {
  if (weights.empty()) throw InvalidArgument("semantic entropy of an empty clustering");
  double h = 0.0;
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw InvalidArgument("cluster weights must be nonnegative");
    total += w;
    if (w > 0.0) h -= w * std::log(w);
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("cluster weights must sum to 1");
  return std::max(h, 0.0);
}

inline double semantic_entropy(const SemanticClustering& clustering) {
  return semantic_entropy(std::span<const double>(clustering.weights));
}

// Monte Carlo predictive entropy: minus the mean sequence log-probability,
// length-normalized unless `length_normalized` is false.
inline double predictive_entropy(const SampleSet& samples, bool length_normalized = true) {
  if (samples.records.empty()) throw InvalidArgument("predictive entropy of an empty sample set");
  double sum = 0.0;
  for (const auto& r : samples.records) {
    sum += length_normalized ? length_normalized_logprob(r) : sequence_logprob(r);
  }
  return -sum / static_cast<double>(samples.records.size());
}

// Fails when the backend cannot express P("True").
inline void require_true_token(const Backend& backend) {
  if (!backend.has_token("True")) {
    throw InvalidArgument("backend '" + backend.descriptor().name +
                          "' has no \"True\" token; P(True) unavailable");
  }
}

inline EstimatorResult p_true(Backend& backend, const std::string& question, const std::string& answer) {
  require_true_token(backend);
  const double p = backend.token_probability(prompts::p_true(question, answer), "True");
  if (!(p >= 0.0 && p <= 1.0)) throw Error("backend returned P(True) outside [0, 1]");
  return {EstimatorKind::p_true, p, p, false};
}

// First "score:" followed by optional whitespace and an integer 0-100.
// Matching is case-sensitive and uses ECMAScript syntax:
//   score:\s*(\d{1,3})(?!\d)
// A match above 100 counts as unparseable.
inline constexpr const char* kScorePattern = R"(score:\s*(\d{1,3})(?!\d))";

inline std::optional<int> parse_score(const std::string& reply) {
  static const std::regex pattern(kScorePattern);
  std::smatch m;
  if (!std::regex_search(reply, m, pattern)) return std::nullopt;
  const int v = std::stoi(m[1].str());
  if (v > 100) return std::nullopt;
  return v;
}

inline EstimatorResult verbalized_from_reply(const std::string& reply) {
  if (auto score = parse_score(reply)) {
    const double c = *score / 100.0;
    return {EstimatorKind::verbalized, c, c, false};
  }
  return {EstimatorKind::verbalized, std::nan(""), std::nullopt, true};
}

inline EstimatorResult verbalized_confidence(Backend& backend, const std::string& question,
                                             const std::string& answer,
                                             const DecodingParams& params = {}) {
  const auto record = backend.generate(prompts::verbalized_score(question, answer), params,
                                       sample_stream(params.seed, question, 0xbadc0ffee));
  return verbalized_from_reply(record.text);
}

}  // namespace conviction
