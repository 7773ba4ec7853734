#pragma once

// Reference computations written independently of the library: long double,
// direct loops, no shared helpers. Slow on purpose.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace oracle {

// Cumulative probability ratio straight from its definition: the answer's
// value plus every strictly smaller sample value, over the answer's value
// plus all sample values. `exponentiate` applies exp() to each P' first.
inline long double rho(double p_answer, const std::vector<double>& samples, bool exponentiate = false) {
  auto val = [&](double x) -> long double { return exponentiate ? std::exp(static_cast<long double>(x)) : x; };
  long double num = val(p_answer);
  long double den = val(p_answer);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    den += val(samples[i]);
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i] < p_answer) num += val(samples[i]);
  }
  if (den == 0.0L) return 1.0L;
  return num / den;
}

inline long double entropy(const std::vector<double>& w) {
  long double h = 0.0L;
  for (double x : w) {
    if (x > 0.0) h -= static_cast<long double>(x) * std::log(static_cast<long double>(x));
  }
  return h;
}

// Mann-Whitney by enumerating every (positive, negative) pair.
inline double auroc_pairs(const std::vector<double>& s, const std::vector<bool>& y) {
  long double wins = 0.0L, pairs = 0.0L;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      pairs += 1.0L;
      if (s[i] > s[j]) wins += 1.0L;
      else if (s[i] == s[j]) wins += 0.5L;
    }
  }
  return static_cast<double>(wins / pairs);
}

// ECE one bin at a time: gather members, then average.
inline double ece_by_bin(const std::vector<double>& c, const std::vector<bool>& y, int bins) {
  long double total = 0.0L;
  for (int b = 0; b < bins; ++b) {
    const long double lo = static_cast<long double>(b) / bins, hi = static_cast<long double>(b + 1) / bins;
    long double sc = 0.0L, sy = 0.0L;
    std::size_t n = 0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      const bool in = (c[i] >= lo && c[i] < hi) || (b == bins - 1 && c[i] == 1.0);
      if (!in) continue;
      sc += c[i];
      sy += y[i] ? 1.0L : 0.0L;
      ++n;
    }
    if (n) total += (static_cast<long double>(n) / c.size()) * std::fabs(sc / n - sy / n);
  }
  return static_cast<double>(total);
}

// -ln sigmoid(x) evaluated as ln(1 + e^-x) in long double.
inline long double neg_log_sigmoid(long double x) { return std::log1p(std::exp(-x)); }

// One DPO term from its four log-probabilities.
inline long double dpo_term(long double pw, long double pl, long double rw, long double rl, long double beta) {
  return neg_log_sigmoid(beta * ((pw - rw) - (pl - rl)));
}

// Nearest-rank percentile by definition: the smallest listed value v with
// #{x <= v} >= p * n.
inline double nearest_rank(const std::vector<double>& values, double p) {
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  const long double need = static_cast<long double>(p) * sorted.size();
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    std::size_t le = 0;
    for (double x : sorted) le += x <= sorted[i];
    if (static_cast<long double>(le) + 1e-9L >= need) return sorted[i];
  }
  return sorted.back();
}

}  // namespace oracle
