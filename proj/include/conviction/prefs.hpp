#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "conviction/backend.hpp"
#include "conviction/common.hpp"
#include "conviction/judge.hpp"
#include "conviction/prompts.hpp"

namespace conviction {

struct Conversation {
  std::string question_id;
  std::string q;
  std::string a;  // the model's initial answer
  std::string s;  // the user's opposing statement
  std::optional<std::string> gold;
  std::optional<bool> a_is_correct;
};

// r1 (persist with the original view) .. r5 (fully agree with the opposing
// view); candidates[0] is r1.
struct StanceCandidates {
  std::array<std::string, 5> candidates;

  const std::string& level(int l) const { return candidates.at(static_cast<std::size_t>(l - 1)); }
};

struct ThresholdSpec {
  double t1 = 0.0;  // upper tercile boundary
  double t2 = 0.0;  // lower tercile boundary
  std::string method = "nearest-rank";
};

enum class Band { high, mid, low };

inline std::string to_string(Band b) {
  switch (b) {
    case Band::high: return "high";
    case Band::mid: return "mid";
    case Band::low: return "low";
  }
  return {};
}

inline Band band_from_string(const std::string& s) {
  if (s == "high") return Band::high;
  if (s == "mid") return Band::mid;
  if (s == "low") return Band::low;
  throw InvalidArgument("unknown band '" + s + "'");
}

struct BandAssignment {
  Band band;
  std::array<int, 3> positive;  // stance levels
  std::array<int, 2> negative;
};

struct PreferencePair {
  std::string question_id;
  std::string q, a, s;
  std::string chosen;    // r_w
  std::string rejected;  // r_l
  int chosen_level = 0;
  int rejected_level = 0;
  Band band = Band::mid;
  double confidence_qa = 0.0;
  int pair_index = 0;
  bool duplicate_text = false;  // chosen and rejected texts coincide
};

inline constexpr double kUpperPercentile = 0.667;
inline constexpr double kLowerPercentile = 0.333;

// Nearest-rank percentile: the ceil(p * n)-th smallest value (rank >= 1).
inline double nearest_rank(std::vector<double> values, double p) {
  if (values.empty()) throw InvalidArgument("percentile of an empty list");
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n) - 1e-12));
  rank = std::clamp<std::size_t>(rank, 1, n);
  return values[rank - 1];
}

inline ThresholdSpec compute_thresholds(const std::vector<double>& confidences) {
  if (confidences.empty()) throw InvalidArgument("cannot compute thresholds of an empty corpus");
  for (double c : confidences) {
    if (!std::isfinite(c)) throw InvalidArgument("confidences must be finite");
  }
  ThresholdSpec spec;
  spec.t1 = nearest_rank(confidences, kUpperPercentile);
  spec.t2 = nearest_rank(confidences, kLowerPercentile);
  return spec;
}

// conf > t1: high; t2 < conf <= t1: mid; conf <= t2: low.
inline BandAssignment assign_band(double confidence_qa, const ThresholdSpec& spec) {
  if (confidence_qa > spec.t1) return {Band::high, {1, 2, 3}, {4, 5}};
  if (confidence_qa > spec.t2) return {Band::mid, {2, 3, 4}, {1, 5}};
  return {Band::low, {3, 4, 5}, {1, 2}};
}

inline BandAssignment band_sets(Band band) {
  switch (band) {
    case Band::high: return {Band::high, {1, 2, 3}, {4, 5}};
    case Band::mid: return {Band::mid, {2, 3, 4}, {1, 5}};
    case Band::low: return {Band::low, {3, 4, 5}, {1, 2}};
  }
  throw InvalidArgument("bad band");
}

// Does `text` state the gold answer, under the extracted-answer judge?
inline bool matches_gold(const std::string& text, const std::string& gold,
                         const EquivalenceJudge& judge = EquivalenceJudge::extracted_answer_match()) {
  return judge.key(text) == judge.key(gold);
}

struct OpposingStatement {
  std::optional<std::string> statement;
  int attempts = 0;
  std::string drop_reason;
};

// Incorrect solution when the answer matches gold, the correct solution
// otherwise. A statement that agrees with `a` is regenerated up to
// `max_regenerations` times before the conversation is dropped.
inline OpposingStatement generate_opposing_statement(Backend& backend, const std::string& q,
                                                     const std::string& a, const std::string& gold,
                                                     const DecodingParams& params,
                                                     int max_regenerations = 3) {
  const auto judge = EquivalenceJudge::extracted_answer_match();
  const bool a_correct = matches_gold(a, gold, judge);
  const Prompt prompt = a_correct ? prompts::incorrect_solution(q, gold) : prompts::correct_solution(q, gold);
  OpposingStatement out;
  for (int attempt = 0; attempt <= max_regenerations; ++attempt) {
    ++out.attempts;
    const auto rec = backend.generate(prompt, params,
                                      sample_stream(params.seed, q, 0x0b5e0000ULL + static_cast<std::uint64_t>(attempt)));
    if (rec.text.empty()) continue;
    if (judge.equivalent(rec.text, a)) continue;
    out.statement = rec.text;
    return out;
  }
  out.drop_reason = "opposing statement agreed with the answer after " +
                    std::to_string(max_regenerations) + " regenerations";
  return out;
}

// Five stance candidates from the stance prompts, or the deterministic
// templates when `use_templates` is set.
inline StanceCandidates generate_candidates(Backend& backend, const Conversation& conv,
                                            const DecodingParams& params, bool use_templates = false) {
  StanceCandidates out;
  for (int level = 1; level <= 5; ++level) {
    auto& slot = out.candidates[static_cast<std::size_t>(level - 1)];
    if (use_templates) {
      slot = prompts::stance_template(level, conv.a, conv.s);
    } else {
      const auto prompt = prompts::stance_candidate(level, conv.q, conv.a, conv.s);
      slot = backend.generate(prompt, params,
                              sample_stream(params.seed, conv.q, 0x57a0ce00ULL + static_cast<std::uint64_t>(level)))
                 .text;
    }
  }
  return out;
}

struct PairBuild {
  std::vector<PreferencePair> pairs;
  std::optional<std::string> drop_reason;
};

// Every (positive, negative) combination once: 3 x 2 = 6 pairs, ordered by
// positive level then negative level.
inline PairBuild build_pairs(const Conversation& conv, const StanceCandidates& cands,
                             const BandAssignment& assignment, double confidence_qa) {
  PairBuild out;
  for (int level = 1; level <= 5; ++level) {
    if (cands.level(level).empty()) {
      out.drop_reason = "stance candidate r" + std::to_string(level) + " is empty";
      return out;
    }
  }
  int index = 0;
  for (int w : assignment.positive) {
    for (int l : assignment.negative) {
      PreferencePair p;
      p.question_id = conv.question_id;
      p.q = conv.q;
      p.a = conv.a;
      p.s = conv.s;
      p.chosen = cands.level(w);
      p.rejected = cands.level(l);
      p.chosen_level = w;
      p.rejected_level = l;
      p.band = assignment.band;
      p.confidence_qa = confidence_qa;
      p.pair_index = index++;
      p.duplicate_text = p.chosen == p.rejected;
      out.pairs.push_back(std::move(p));
    }
  }
  return out;
}

// Chat rendering of {q, a, s} used as the DPO prompt.
inline std::string render_pair_prompt(const std::string& q, const std::string& a, const std::string& s) {
  return prompts::render_chat({{Turn::Role::user, q}, {Turn::Role::assistant, a}, {Turn::Role::user, s}});
}

// Band-consistency of one pair; empty when consistent.
inline std::optional<std::string> band_violation(Band band, int chosen_level, int rejected_level) {
  const auto sets = band_sets(band);
  const bool w_ok = std::find(sets.positive.begin(), sets.positive.end(), chosen_level) != sets.positive.end();
  const bool l_ok = std::find(sets.negative.begin(), sets.negative.end(), rejected_level) != sets.negative.end();
  if (w_ok && l_ok) return std::nullopt;
  std::string msg = "band " + to_string(band) + ":";
  if (!w_ok) msg += " chosen r" + std::to_string(chosen_level) + " is not in the positive set";
  if (!l_ok) msg += std::string(w_ok ? "" : ";") + " rejected r" + std::to_string(rejected_level) +
                    " is not in the negative set";
  return msg;
}

}  // namespace conviction
