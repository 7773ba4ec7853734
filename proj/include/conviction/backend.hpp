#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "conviction/common.hpp"
#include "conviction/prompts.hpp"

namespace conviction {

struct DecodingParams {
  double top_p = 0.6;
  double temperature = 0.9;
  int max_tokens = 60;  // truncation bound K
  std::uint64_t seed = 0;

  void validate() const {
    if (!(top_p > 0.0 && top_p <= 1.0)) throw InvalidArgument("top_p must be in (0, 1]");
    if (!(temperature > 0.0)) throw InvalidArgument("temperature must be positive");
    if (max_tokens < 1) throw InvalidArgument("max_tokens must be >= 1");
  }

  friend bool operator==(const DecodingParams&, const DecodingParams&) = default;
};

// One sampled continuation. Log-probabilities are natural logs.
struct GenerationRecord {
  std::vector<int> token_ids;
  std::vector<double> token_logprobs;
  std::vector<float> feature;  // hidden state at the feature layer, last token
  std::string text;
  bool truncated = false;

  std::size_t length() const noexcept { return token_ids.size(); }

  friend bool operator==(const GenerationRecord&, const GenerationRecord&) = default;
};

struct SampleSet {
  std::string question_id;
  std::string question;
  std::vector<GenerationRecord> records;
  DecodingParams decoding;

  std::size_t feature_dim() const noexcept {
    return records.empty() ? 0 : records.front().feature.size();
  }

  friend bool operator==(const SampleSet&, const SampleSet&) = default;
};

struct BackendDescriptor {
  std::string name;
  int layer_count = 32;
  int feature_layer = 26;
  int feature_dim = 0;
  int vocab_size = 0;
};

// Layer the features are read from when none is configured: 80% of depth,
// which is layer 26 of a 32-layer model.
constexpr int default_feature_layer(int layer_count) noexcept {
  return static_cast<int>(std::lround(0.8 * layer_count));
}

// Generation backend contract.
//
// Implementations must either be safe for concurrent calls or document that
// they are single-caller only; the pipeline calls each instance serially.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual const BackendDescriptor& descriptor() const = 0;

  // One sampled continuation of `prompt`. `stream` selects an independent
  // random stream so that sample i of a set is reproducible on its own.
  virtual GenerationRecord generate(const Prompt& prompt, const DecodingParams& params,
                                    std::uint64_t stream) = 0;

  // Probability that the first generated token is `token`.
  virtual double token_probability(const Prompt& prompt, std::string_view token) = 0;

  virtual bool has_token(std::string_view token) const = 0;
};

// Sequence log-probability divided by the number of generated tokens.
inline double length_normalized_logprob(std::span<const double> token_logprobs) {
  if (token_logprobs.empty()) {
    throw InvalidArgument("length-normalized log-probability of an empty record");
  }
  const double total = std::accumulate(token_logprobs.begin(), token_logprobs.end(), 0.0);
  return total / static_cast<double>(token_logprobs.size());
}

inline double length_normalized_logprob(const GenerationRecord& record) {
  if (record.token_logprobs.size() != record.token_ids.size()) {
    throw InvalidArgument("record has mismatched token and logprob counts");
  }
  return length_normalized_logprob(std::span<const double>(record.token_logprobs));
}

inline double sequence_logprob(const GenerationRecord& record) {
  return std::accumulate(record.token_logprobs.begin(), record.token_logprobs.end(), 0.0);
}

struct SampleOptions {
  int max_empty_retries = 3;
};

inline std::uint64_t sample_stream(std::uint64_t seed, std::string_view question,
                                   std::uint64_t index) noexcept {
  return mix64(seed ^ mix64(fnv1a64(question)) ^ mix64(index + 0x51ed270b2a6f3cd1ULL));
}

// Draws n continuations of the initial-answer prompt for `question`.
// Empty generations are redrawn from fresh streams up to
// `max_empty_retries` times each.
inline SampleSet sample_responses(Backend& backend, std::string question_id,
                                  std::string question, int n, const DecodingParams& params,
                                  const SampleOptions& options = {}) {
  if (n < 1) throw InvalidArgument("sample_responses needs n >= 1");
  params.validate();

  SampleSet set;
  set.question_id = std::move(question_id);
  set.question = std::move(question);
  set.decoding = params;
  set.records.reserve(static_cast<std::size_t>(n));

  const Prompt prompt = prompts::initial_answer(set.question);
  const auto dim = static_cast<std::size_t>(backend.descriptor().feature_dim);

  for (int i = 0; i < n; ++i) {
    GenerationRecord record;
    bool accepted = false;
    for (int attempt = 0; attempt <= options.max_empty_retries && !accepted; ++attempt) {
      const auto stream = sample_stream(
          params.seed, set.question,
          static_cast<std::uint64_t>(i) + static_cast<std::uint64_t>(attempt) * 0x100000000ULL);
      try {
        record = backend.generate(prompt, params, stream);
      } catch (const BackendError&) {
        throw;
      } catch (const std::exception& e) {
        throw BackendError(set.question_id, e.what());
      }
      accepted = !record.token_ids.empty();
    }
    if (!accepted) {
      throw Error("question '" + set.question_id + "': empty generation after " +
                  std::to_string(options.max_empty_retries) + " retries");
    }
    if (record.token_logprobs.size() != record.token_ids.size()) {
      throw BackendError(set.question_id, "token/logprob length mismatch");
    }
    if (record.token_ids.size() > static_cast<std::size_t>(params.max_tokens)) {
      record.token_ids.resize(static_cast<std::size_t>(params.max_tokens));
      record.token_logprobs.resize(static_cast<std::size_t>(params.max_tokens));
      record.truncated = true;
    }
    if (dim != 0 && record.feature.size() != dim) {
      throw BackendError(set.question_id, "feature dimension " +
                                              std::to_string(record.feature.size()) +
                                              " differs from backend's " + std::to_string(dim));
    }
    set.records.push_back(std::move(record));
  }
  return set;
}

}  // namespace conviction
