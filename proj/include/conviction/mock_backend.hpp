#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "conviction/backend.hpp"
#include "conviction/common.hpp"
#include "conviction/judge.hpp"
#include "conviction/prompts.hpp"

namespace conviction {

// Finite answer distribution for one question: whitespace-tokenized texts
// with their probabilities.
using AnswerDistribution = std::vector<std::pair<std::string, double>>;
using DistributionTable = std::map<std::string, AnswerDistribution>;

// Maps a generated token sequence to its feature vector.
using FeatureRule = std::function<std::vector<float>(std::span<const int> token_ids)>;

// How the mock replies inside a two-round conversation.
enum class ConversationBehavior {
  stubborn,     // always restates its first answer
  sycophantic,  // adopts the user's latest claim
  confident,    // keeps its answer iff it puts enough mass on it
};

struct MockConfig {
  std::string name = "mock";
  int layer_count = 32;
  std::optional<int> feature_layer;  // default_feature_layer(layer_count) when unset
  int feature_dim = 16;
  std::uint64_t projection_seed = 0x5eed;
  ConversationBehavior behavior = ConversationBehavior::confident;
  double keep_threshold = 0.5;  // for ConversationBehavior::confident
  DistributionTable table;
  std::optional<FeatureRule> feature_rule;
  // Consulted first for every free-text prompt; nullopt falls through to the
  // built-in replies.
  std::function<std::optional<std::string>(const Prompt&)> responder;
  // P("True") overrides keyed by (question, answer).
  std::map<std::pair<std::string, std::string>, double> p_true;
};

// Deterministic mock language model over a finite distribution table.
//
// Sampling is ancestral over a token trie built from the table. Every
// sequence ends with an explicit "</s>" token, so the reported token
// log-probabilities sum to ln P(sequence) exactly. Temperature and top-p
// reshape the sampling distribution only; reported log-probabilities are the
// untempered model conditionals. At temperature 1 and top_p 1 samples are
// i.i.d. draws from the table.
//
// Immutable after construction and safe for concurrent calls.
class MockBackend final : public Backend {
 public:
  static constexpr std::string_view kEos = "</s>";
  static constexpr std::string_view kUnk = "<unk>";
  static constexpr double kNormalizationTolerance = 1e-9;

  explicit MockBackend(MockConfig config) : config_(std::move(config)) {
    if (config_.feature_dim < 1) throw InvalidArgument("mock feature_dim must be positive");
    if (config_.layer_count < 1) throw InvalidArgument("mock layer_count must be positive");
    descriptor_.name = config_.name;
    descriptor_.layer_count = config_.layer_count;
    descriptor_.feature_layer =
        config_.feature_layer.value_or(default_feature_layer(config_.layer_count));
    if (descriptor_.feature_layer < 0 || descriptor_.feature_layer >= config_.layer_count) {
      throw InvalidArgument("feature_layer outside [0, layer_count)");
    }
    descriptor_.feature_dim = config_.feature_dim;

    std::vector<std::string> words = {std::string(kEos), std::string(kUnk), "True", "False"};
    for (const auto& [question, dist] : config_.table) {
      double total = 0.0;
      std::map<std::string, bool> seen;
      for (const auto& [answer, p] : dist) {
        if (!(p >= 0.0) || !std::isfinite(p)) {
          throw InvalidArgument("mock distribution for '" + question + "' has an invalid probability");
        }
        if (text::split_words(answer).empty()) {
          throw InvalidArgument("mock distribution for '" + question + "' has an empty sequence");
        }
        if (seen[answer]) {
          throw InvalidArgument("mock distribution for '" + question + "' repeats '" + answer + "'");
        }
        seen[answer] = true;
        total += p;
        for (auto& w : text::split_words(answer)) words.push_back(std::move(w));
      }
      if (std::abs(total - 1.0) > kNormalizationTolerance) {
        throw InvalidArgument("mock distribution for '" + question + "' sums to " +
                              std::to_string(total) + ", not 1");
      }
    }
    std::sort(words.begin() + 4, words.end());
    for (auto& w : words) {
      if (!vocab_.contains(w)) {
        vocab_.emplace(w, static_cast<int>(id_to_word_.size()));
        id_to_word_.push_back(w);
      }
    }
    descriptor_.vocab_size = static_cast<int>(id_to_word_.size());
    eos_id_ = vocab_.at(std::string(kEos));
    unk_id_ = vocab_.at(std::string(kUnk));

    for (const auto& [question, dist] : config_.table) tries_.emplace(question, build_trie(dist));

    if (!config_.feature_rule) {
      // Fixed seeded random projection of the one-hot last content token.
      Rng rng(config_.projection_seed);
      const auto dim = static_cast<std::size_t>(config_.feature_dim);
      projection_.resize(id_to_word_.size() * dim);
      for (auto& v : projection_) v = static_cast<float>(rng.normal());
    }
  }

  const BackendDescriptor& descriptor() const override { return descriptor_; }

  bool has_token(std::string_view token) const override {
    return vocab_.contains(std::string(token));
  }

  const std::vector<std::string>& vocabulary() const noexcept { return id_to_word_; }
  int eos_id() const noexcept { return eos_id_; }

  GenerationRecord generate(const Prompt& prompt, const DecodingParams& params,
                            std::uint64_t stream) override {
    params.validate();
    if (prompt.kind == PromptKind::initial_answer) {
      return sample(prompt.question, params, stream);
    }
    return scripted_record(reply(prompt));
  }

  double token_probability(const Prompt& prompt, std::string_view token) override {
    if (prompt.kind == PromptKind::p_true) {
      double p = 0.0;
      if (auto it = config_.p_true.find({prompt.question, prompt.answer}); it != config_.p_true.end()) {
        p = it->second;
      } else {
        p = answer_mass(prompt.question, prompt.answer);
      }
      if (token == "True") return p;
      if (token == "False") return 1.0 - p;
      return 0.0;
    }
    if (prompt.kind == PromptKind::initial_answer) {
      const auto& trie = trie_for(prompt.question);
      const auto& root = trie.front();
      for (const auto& edge : root.children) {
        if (id_to_word_[static_cast<std::size_t>(edge.token)] == token) {
          return edge.mass / root.mass;
        }
      }
      return 0.0;
    }
    return 0.0;
  }

  // Probability the model puts on answers equivalent to `answer` under the
  // extracted-answer judge.
  double answer_mass(const std::string& question, const std::string& answer) const {
    const auto it = config_.table.find(question);
    if (it == config_.table.end()) return 0.0;
    const auto judge = EquivalenceJudge::extracted_answer_match();
    const auto key = judge.key(answer);
    double mass = 0.0;
    for (const auto& [text, p] : it->second) {
      if (judge.key(text) == key) mass += p;
    }
    return mass;
  }

  // Every sequence in the support with its exact token log-probabilities.
  struct SupportPoint {
    std::string text;
    std::vector<int> token_ids;
    std::vector<double> token_logprobs;
    double probability;
  };

  std::vector<SupportPoint> support(const std::string& question) const {
    const auto it = config_.table.find(question);
    if (it == config_.table.end()) throw InvalidArgument("mock has no distribution for '" + question + "'");
    const auto& trie = trie_for(question);
    std::vector<SupportPoint> out;
    for (const auto& [text, p] : it->second) {
      SupportPoint sp{text, {}, {}, p};
      std::size_t node = 0;
      for (const auto& w : text::split_words(text)) {
        const int id = vocab_.at(w);
        const auto& n = trie[node];
        const auto edge = std::find_if(n.children.begin(), n.children.end(),
                                       [id](const Edge& e) { return e.token == id; });
        sp.token_ids.push_back(id);
        sp.token_logprobs.push_back(std::log(edge->mass / n.mass));
        node = edge->child;
      }
      sp.token_ids.push_back(eos_id_);
      sp.token_logprobs.push_back(std::log(trie[node].end_mass / trie[node].mass));
      out.push_back(std::move(sp));
    }
    return out;
  }

  std::vector<int> tokenize(std::string_view s) const {
    std::vector<int> ids;
    for (const auto& w : text::split_words(s)) {
      const auto it = vocab_.find(w);
      ids.push_back(it == vocab_.end() ? unk_id_ : it->second);
    }
    return ids;
  }

  std::vector<float> feature_of(std::span<const int> token_ids) const {
    if (config_.feature_rule) {
      auto f = (*config_.feature_rule)(token_ids);
      if (f.size() != static_cast<std::size_t>(config_.feature_dim)) {
        throw Error("feature_rule returned a vector of the wrong dimension");
      }
      return f;
    }
    int last = unk_id_;
    for (auto it = token_ids.rbegin(); it != token_ids.rend(); ++it) {
      if (*it != eos_id_) {
        last = *it;
        break;
      }
    }
    const auto dim = static_cast<std::size_t>(config_.feature_dim);
    const auto begin = projection_.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(last) * dim);
    return {begin, begin + static_cast<std::ptrdiff_t>(dim)};
  }

 private:
  struct Edge {
    int token;
    std::size_t child;
    double mass;
  };
  struct Node {
    double mass = 0.0;      // total probability of sequences through this node
    double end_mass = 0.0;  // probability of ending here
    std::vector<Edge> children;
  };
  using Trie = std::vector<Node>;

  Trie build_trie(const AnswerDistribution& dist) const {
    Trie trie(1);
    for (const auto& [text, p] : dist) {
      std::size_t node = 0;
      trie[0].mass += p;
      for (const auto& w : text::split_words(text)) {
        const int id = vocab_.at(w);
        auto& children = trie[node].children;
        auto edge = std::find_if(children.begin(), children.end(),
                                 [id](const Edge& e) { return e.token == id; });
        if (edge == children.end()) {
          trie.emplace_back();
          // `children` may dangle after emplace_back; reacquire.
          trie[node].children.push_back(Edge{id, trie.size() - 1, 0.0});
          edge = trie[node].children.end() - 1;
        }
        edge->mass += p;
        node = edge->child;
        trie[node].mass += p;
      }
      trie[node].end_mass += p;
    }
    return trie;
  }

  const Trie& trie_for(const std::string& question) const {
    const auto it = tries_.find(question);
    if (it == tries_.end()) throw BackendError(question, "mock has no distribution for this question");
    return it->second;
  }

  GenerationRecord sample(const std::string& question, const DecodingParams& params,
                          std::uint64_t stream) const {
    const auto& trie = trie_for(question);
    Rng rng(stream);
    GenerationRecord rec;
    std::vector<std::string> words;
    std::size_t node = 0;
    while (true) {
      if (rec.token_ids.size() >= static_cast<std::size_t>(params.max_tokens)) {
        rec.truncated = true;
        break;
      }
      const Node& n = trie[node];
      // Options: each child edge, then end-of-sequence.
      struct Option {
        int token;
        std::size_t child;
        double p;
      };
      std::vector<Option> options;
      for (const auto& e : n.children) {
        if (e.mass > 0.0) options.push_back({e.token, e.child, e.mass / n.mass});
      }
      if (n.end_mass > 0.0) options.push_back({eos_id_, node, n.end_mass / n.mass});

      const std::size_t pick = warped_choice(options, params, rng);
      const Option& chosen = options[pick];
      rec.token_ids.push_back(chosen.token);
      rec.token_logprobs.push_back(std::log(chosen.p));
      if (chosen.token == eos_id_) break;
      words.push_back(id_to_word_[static_cast<std::size_t>(chosen.token)]);
      node = chosen.child;
    }
    rec.text = text::join(words);
    rec.feature = feature_of(rec.token_ids);
    return rec;
  }

  // Index drawn from `options` after temperature scaling and nucleus
  // truncation. Ties in probability keep their original order.
  template <class Options>
  static std::size_t warped_choice(const Options& options, const DecodingParams& params, Rng& rng) {
    std::vector<std::size_t> order(options.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<double> w(options.size());
    double z = 0.0;
    for (std::size_t i = 0; i < options.size(); ++i) {
      w[i] = std::exp(std::log(options[i].p) / params.temperature);
      z += w[i];
    }
    for (auto& x : w) x /= z;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
    std::size_t keep = 0;
    double cum = 0.0;
    while (keep < order.size()) {
      cum += w[order[keep]];
      ++keep;
      if (cum >= params.top_p) break;
    }
    double u = rng.uniform() * cum;
    for (std::size_t k = 0; k < keep; ++k) {
      u -= w[order[k]];
      if (u < 0.0) return order[k];
    }
    return order[keep - 1];
  }

  GenerationRecord scripted_record(const std::string& reply_text) const {
    GenerationRecord rec;
    rec.text = reply_text;
    rec.token_ids = tokenize(reply_text);
    rec.token_ids.push_back(eos_id_);
    rec.token_logprobs.assign(rec.token_ids.size(), 0.0);
    rec.feature = feature_of(rec.token_ids);
    return rec;
  }

  // Most probable answer (by extracted answer) that differs from `gold`.
  std::string alternative_answer(const std::string& question, const std::string& gold) const {
    const auto judge = EquivalenceJudge::extracted_answer_match();
    const auto gold_key = judge.key(gold);
    std::map<std::string, double> mass;
    if (auto it = config_.table.find(question); it != config_.table.end()) {
      for (const auto& [text, p] : it->second) mass[judge.key(text)] += p;
    }
    std::string best;
    double best_p = -1.0;
    for (const auto& [k, p] : mass) {
      if (k != gold_key && p > best_p) {
        best = k;
        best_p = p;
      }
    }
    return best.empty() ? std::string("none of the above") : best;
  }

  static std::string stance_answer(const std::string& turn) {
    if (auto a = text::extract_answer(turn)) return *a;
    return text::normalize(turn);
  }

  std::string reply(const Prompt& prompt) const {
    if (config_.responder) {
      if (auto r = config_.responder(prompt)) return *r;
    }
    switch (prompt.kind) {
      case PromptKind::initial_answer:
        break;
      case PromptKind::incorrect_solution:
        return "Solution: Working through the options, another choice fits better. The answer is " +
               alternative_answer(prompt.question, prompt.gold) + ".";
      case PromptKind::correct_solution:
        return "Solution: Checking each option against the question. The answer is " + prompt.gold + ".";
      case PromptKind::stance_candidate:
        return prompts::stance_template(prompt.stance_level, prompt.viewpoint1, prompt.viewpoint2);
      case PromptKind::verbalized_score: {
        const double p = answer_mass(prompt.question, prompt.answer);
        return "score: " + std::to_string(static_cast<int>(std::lround(100.0 * p)));
      }
      case PromptKind::p_true:
        return answer_mass(prompt.question, prompt.answer) >= 0.5 ? "True" : "False";
      case PromptKind::conversation_turn:
        return conversation_reply(prompt);
    }
    return {};
  }

  std::string conversation_reply(const Prompt& prompt) const {
    std::optional<std::string> own, latest_user;
    for (const auto& t : prompt.history) {
      if (t.role == Turn::Role::assistant && !own) own = stance_answer(t.content);
      if (t.role == Turn::Role::user && own) latest_user = stance_answer(t.content);
    }
    if (!own) return "I am not sure.";
    bool keep = true;
    switch (config_.behavior) {
      case ConversationBehavior::stubborn: keep = true; break;
      case ConversationBehavior::sycophantic: keep = !latest_user.has_value(); break;
      case ConversationBehavior::confident:
        keep = answer_mass(prompt.question, "The answer is " + *own) >= config_.keep_threshold;
        break;
    }
    if (keep || !latest_user) return "I stand by my answer. The answer is " + *own + ".";
    return "You are right, I was mistaken. The answer is " + *latest_user + ".";
  }

  MockConfig config_;
  BackendDescriptor descriptor_;
  std::map<std::string, int> vocab_;
  std::vector<std::string> id_to_word_;
  std::map<std::string, Trie> tries_;
  std::vector<float> projection_;
  int eos_id_ = 0;
  int unk_id_ = 1;
};

}  // namespace conviction
