#pragma once

#include <algorithm>
#include <cctype>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "conviction/common.hpp"

namespace conviction {

namespace text {

inline std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

inline std::string join(const std::vector<std::string>& words, std::string_view sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += sep;
    out += words[i];
  }
  return out;
}

// Lowercase, punctuation to spaces (decimal points inside numbers survive),
// articles dropped unless that would leave nothing, whitespace collapsed.
inline std::string normalize(std::string_view s) {
  std::string l = lower(s);
  std::string cleaned;
  cleaned.reserve(l.size());
  for (std::size_t i = 0; i < l.size(); ++i) {
    const unsigned char c = static_cast<unsigned char>(l[i]);
    const bool numeric_point = (c == '.' || c == ',') && i > 0 && i + 1 < l.size() &&
                               std::isdigit(static_cast<unsigned char>(l[i - 1])) &&
                               std::isdigit(static_cast<unsigned char>(l[i + 1]));
    if (numeric_point && c == ',') continue;  // 1,000 -> 1000
    if (std::isalnum(c) || std::isspace(c) || numeric_point || c >= 0x80) {
      cleaned += static_cast<char>(c);
    } else {
      cleaned += ' ';
    }
  }
  auto words = split_words(cleaned);
  std::vector<std::string> kept;
  for (auto& w : words) {
    if (w != "a" && w != "an" && w != "the") kept.push_back(w);
  }
  return join(kept.empty() ? words : kept);
}

inline constexpr std::string_view kAnswerMarker = "the answer is";

// Answer span following the last "the answer is" (case-insensitive), cut at
// the end of its line or sentence and normalized. Empty when absent.
inline std::optional<std::string> extract_answer(std::string_view s) {
  const std::string l = lower(s);
  const auto pos = l.rfind(kAnswerMarker);
  if (pos == std::string::npos) return std::nullopt;
  std::string span = l.substr(pos + kAnswerMarker.size());
  if (auto nl = span.find('\n'); nl != std::string::npos) span.resize(nl);
  for (std::string_view stop : {". ", "; ", "! ", "? "}) {
    if (auto cut = span.find(stop); cut != std::string::npos) span.resize(cut);
  }
  std::string norm = normalize(span);
  if (norm.empty()) return std::nullopt;
  return norm;
}

}  // namespace text

// Decides whether two generations mean the same thing. The induced relation
// is reflexive and symmetric by construction; clustering closes it
// transitively with union-find.
class EquivalenceJudge {
 public:
  enum class Kind { normalized_exact_match, extracted_answer_match, external };
  using ExternalFn = std::function<bool(const std::string&, const std::string&)>;

  static EquivalenceJudge normalized_exact_match() {
    return EquivalenceJudge(Kind::normalized_exact_match);
  }
  static EquivalenceJudge extracted_answer_match() {
    return EquivalenceJudge(Kind::extracted_answer_match);
  }
  // `fn` may be empty when the endpoint is not reachable; calls then throw.
  static EquivalenceJudge external(std::string endpoint, ExternalFn fn) {
    EquivalenceJudge j(Kind::external);
    j.endpoint_ = std::move(endpoint);
    j.external_ = std::move(fn);
    return j;
  }

  Kind kind() const noexcept { return kind_; }
  const std::string& endpoint() const noexcept { return endpoint_; }

  std::string name() const {
    switch (kind_) {
      case Kind::normalized_exact_match: return "normalized-exact-match";
      case Kind::extracted_answer_match: return "extracted-answer-match";
      case Kind::external: return "external:" + endpoint_;
    }
    return {};
  }

  // Canonical comparison key for the built-in kinds.
  std::string key(std::string_view s) const {
    if (kind_ == Kind::extracted_answer_match) {
      if (auto a = text::extract_answer(s)) return *a;
    }
    return text::normalize(s);
  }

  bool equivalent(const std::string& x, const std::string& y) const {
    if (kind_ == Kind::external) {
      if (!external_) throw Error("equivalence judge endpoint unavailable: " + endpoint_);
      if (x == y) return true;
      return external_(x, y) && external_(y, x);
    }
    return key(x) == key(y);
  }

 private:
  explicit EquivalenceJudge(Kind k) : kind_(k) {}

  Kind kind_;
  std::string endpoint_;
  ExternalFn external_;
};

// Union-find over [0, n).
class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (b < a) std::swap(a, b);
    parent_[b] = a;
  }

 private:
  std::vector<std::size_t> parent_;
};

}  // namespace conviction
