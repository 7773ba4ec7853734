#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "conviction/backend.hpp"
#include "conviction/bce.hpp"
#include "conviction/common.hpp"
#include "conviction/dpo.hpp"
#include "conviction/estimators.hpp"
#include "conviction/eval.hpp"
#include "conviction/io.hpp"
#include "conviction/judge.hpp"
#include "conviction/mock_backend.hpp"
#include "conviction/prefs.hpp"
#include "conviction/regressor.hpp"

namespace conviction::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kEnvPrefix = "CONVICTION_";
inline constexpr const char* kAnswerMatchingRule =
    "extracted-answer-match: text after the last \"the answer is\" (case-insensitive), cut at the end of "
    "its sentence, lowercased, punctuation and articles removed; final turns without that phrase count as "
    "incorrect and are reported as parse failures";

enum class Stage { sample, estimate, train_regressor, confidence, build_prefs, train_dpo, evaluate, report };

inline constexpr std::array<Stage, 8> kStages = {Stage::sample,      Stage::estimate,    Stage::train_regressor,
                                                 Stage::confidence,  Stage::build_prefs, Stage::train_dpo,
                                                 Stage::evaluate,    Stage::report};

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::sample: return "sample";
    case Stage::estimate: return "estimate";
    case Stage::train_regressor: return "train-regressor";
    case Stage::confidence: return "confidence";
    case Stage::build_prefs: return "build-prefs";
    case Stage::train_dpo: return "train-dpo";
    case Stage::evaluate: return "evaluate";
    case Stage::report: return "report";
  }
  return {};
}

inline Stage stage_from_string(const std::string& s) {
  for (auto st : kStages) {
    if (to_string(st) == s) return st;
  }
  throw InvalidArgument("unknown stage '" + s + "'");
}

// ---------------------------------------------------------------- config

struct BackendSection {
  std::string kind = "mock";
  int feature_dim = 16;
  int layer_count = 32;
  std::optional<int> feature_layer;
  std::uint64_t projection_seed = 0x5eed;
  std::uint64_t table_seed = 0;
  ConversationBehavior behavior = ConversationBehavior::confident;
  double keep_threshold = 0.5;
};

struct CorpusSection {
  std::string path = "corpus.jsonl";
  std::uint64_t split_seed = 0;
  double regressor_fraction = 0.2;
};

struct EstimateSection {
  bool predictive_entropy_normalized = true;
  ClusterWeighting cluster_weighting = ClusterWeighting::count;
};

struct PrefsSection {
  bool use_templates = false;
  int max_regenerations = 3;
};

struct EvalSection {
  int bins = kDefaultBins;
  std::vector<Scenario> scenarios = {Scenario::llm_correct, Scenario::llm_false};
  std::string arguments = "scripted";  // or "backend"
};

struct PipelineConfig {
  BackendSection backend;
  DecodingParams decoding;  // decoding.max_tokens is K, decoding.seed mirrors `seed`
  int n = 20;
  std::uint64_t seed = 0;
  CorpusSection corpus;
  RegressorConfig regressor;
  BceConfig bce;
  EstimateSection estimate;
  PrefsSection prefs;
  DpoConfig dpo;
  EvalSection eval;
  bool compact_features = false;
  std::string output_dir = "conviction_out";

  void validate() const {
    if (backend.kind != "mock") {
      throw InvalidArgument("backend kind '" + backend.kind + "' is not available in this build (only 'mock')");
    }
    decoding.validate();
    if (n < 1) throw InvalidArgument("n must be >= 1");
    bce.validate();
    regressor.validate();
    dpo.validate();
    if (!(corpus.regressor_fraction > 0.0 && corpus.regressor_fraction < 1.0)) {
      throw InvalidArgument("corpus.regressor_fraction must be in (0, 1)");
    }
    if (eval.bins < 1) throw InvalidArgument("eval.bins must be >= 1");
    if (eval.scenarios.empty()) throw InvalidArgument("eval.scenarios must not be empty");
    if (eval.arguments != "scripted" && eval.arguments != "backend") {
      throw InvalidArgument("eval.arguments must be 'scripted' or 'backend'");
    }
    if (prefs.max_regenerations < 0) throw InvalidArgument("prefs.max_regenerations must be >= 0");
  }
};

inline std::string to_string(ConversationBehavior b) {
  switch (b) {
    case ConversationBehavior::stubborn: return "stubborn";
    case ConversationBehavior::sycophantic: return "sycophantic";
    case ConversationBehavior::confident: return "confident";
  }
  return {};
}

inline ConversationBehavior behavior_from_string(const std::string& s) {
  if (s == "stubborn") return ConversationBehavior::stubborn;
  if (s == "sycophantic") return ConversationBehavior::sycophantic;
  if (s == "confident") return ConversationBehavior::confident;
  throw InvalidArgument("unknown conversation behavior '" + s + "'");
}

inline json config_to_json(const PipelineConfig& c) {
  json scenarios = json::array();
  for (auto s : c.eval.scenarios) scenarios.push_back(to_string(s));
  return {
      {"backend",
       {{"kind", c.backend.kind},
        {"feature_dim", c.backend.feature_dim},
        {"layer_count", c.backend.layer_count},
        {"feature_layer", c.backend.feature_layer ? json(*c.backend.feature_layer) : json(nullptr)},
        {"projection_seed", c.backend.projection_seed},
        {"table_seed", c.backend.table_seed},
        {"behavior", to_string(c.backend.behavior)},
        {"keep_threshold", c.backend.keep_threshold}}},
      {"decoding", {{"top_p", c.decoding.top_p}, {"temperature", c.decoding.temperature}}},
      {"n", c.n},
      {"k", c.decoding.max_tokens},
      {"seed", c.seed},
      {"corpus",
       {{"path", c.corpus.path}, {"split_seed", c.corpus.split_seed}, {"regressor_fraction", c.corpus.regressor_fraction}}},
      {"regressor", c.regressor},
      {"bce",
       {{"alpha", c.bce.alpha},
        {"gamma", c.bce.gamma},
        {"ratio_variant", to_string(c.bce.ratio_variant)}}},
      {"estimate",
       {{"predictive_entropy_normalized", c.estimate.predictive_entropy_normalized},
        {"cluster_weighting", c.estimate.cluster_weighting == ClusterWeighting::count ? "count" : "probability"}}},
      {"prefs", {{"use_templates", c.prefs.use_templates}, {"max_regenerations", c.prefs.max_regenerations}}},
      {"dpo", c.dpo},
      {"eval", {{"bins", c.eval.bins}, {"scenarios", scenarios}, {"arguments", c.eval.arguments}}},
      {"compact_features", c.compact_features},
      {"output_dir", c.output_dir},
  };
}

inline PipelineConfig config_from_json(const json& j) {
  PipelineConfig c;
  const PipelineConfig d;
  const json def = config_to_json(d);
  auto sec = [&](const char* name) -> const json& { return j.contains(name) ? j.at(name) : def.at(name); };

  const auto& b = sec("backend");
  c.backend.kind = b.value("kind", d.backend.kind);
  c.backend.feature_dim = b.value("feature_dim", d.backend.feature_dim);
  c.backend.layer_count = b.value("layer_count", d.backend.layer_count);
  if (b.contains("feature_layer") && !b.at("feature_layer").is_null()) c.backend.feature_layer = b.at("feature_layer").get<int>();
  c.backend.projection_seed = b.value("projection_seed", d.backend.projection_seed);
  c.backend.table_seed = b.value("table_seed", d.backend.table_seed);
  c.backend.behavior = behavior_from_string(b.value("behavior", to_string(d.backend.behavior)));
  c.backend.keep_threshold = b.value("keep_threshold", d.backend.keep_threshold);

  const auto& dec = sec("decoding");
  c.decoding.top_p = dec.value("top_p", d.decoding.top_p);
  c.decoding.temperature = dec.value("temperature", d.decoding.temperature);
  c.n = j.value("n", d.n);
  c.decoding.max_tokens = j.value("k", d.decoding.max_tokens);
  c.seed = j.value("seed", d.seed);
  c.decoding.seed = c.seed;

  const auto& co = sec("corpus");
  c.corpus.path = co.value("path", d.corpus.path);
  c.corpus.split_seed = co.value("split_seed", d.corpus.split_seed);
  c.corpus.regressor_fraction = co.value("regressor_fraction", d.corpus.regressor_fraction);

  c.regressor = sec("regressor").get<RegressorConfig>();

  const auto& bc = sec("bce");
  c.bce.alpha = bc.value("alpha", d.bce.alpha);
  c.bce.gamma = bc.value("gamma", d.bce.gamma);
  c.bce.ratio_variant = ratio_variant_from_string(bc.value("ratio_variant", to_string(d.bce.ratio_variant)));
  c.regressor.alpha = c.bce.alpha;

  const auto& es = sec("estimate");
  c.estimate.predictive_entropy_normalized =
      es.value("predictive_entropy_normalized", d.estimate.predictive_entropy_normalized);
  const auto weighting = es.value("cluster_weighting", std::string("count"));
  if (weighting != "count" && weighting != "probability") {
    throw InvalidArgument("estimate.cluster_weighting must be 'count' or 'probability'");
  }
  c.estimate.cluster_weighting = weighting == "count" ? ClusterWeighting::count : ClusterWeighting::probability;

  const auto& pr = sec("prefs");
  c.prefs.use_templates = pr.value("use_templates", d.prefs.use_templates);
  c.prefs.max_regenerations = pr.value("max_regenerations", d.prefs.max_regenerations);

  c.dpo = sec("dpo").get<DpoConfig>();

  const auto& ev = sec("eval");
  c.eval.bins = ev.value("bins", d.eval.bins);
  if (ev.contains("scenarios")) {
    c.eval.scenarios.clear();
    for (const auto& s : ev.at("scenarios")) c.eval.scenarios.push_back(scenario_from_string(s.get<std::string>()));
  }
  c.eval.arguments = ev.value("arguments", d.eval.arguments);

  c.compact_features = j.value("compact_features", d.compact_features);
  c.output_dir = j.value("output_dir", d.output_dir);
  return c;
}

namespace detail {

// Rejects keys that the default config does not have (typos).
inline void check_known_keys(const json& defaults, const json& given, const std::string& where) {
  if (!given.is_object()) return;
  for (const auto& [k, v] : given.items()) {
    if (!defaults.contains(k)) throw InvalidArgument("unknown config key '" + where + k + "'");
    if (defaults.at(k).is_object()) check_known_keys(defaults.at(k), v, where + k + ".");
  }
}

inline json parse_scalar(const std::string& raw) {
  try {
    return json::parse(raw);
  } catch (const json::parse_error&) {
    return raw;
  }
}

}  // namespace detail

// Applies CONVICTION_* variables: CONVICTION_BCE__GAMMA=0.5 sets bce.gamma. Key
// segments are lowercased and separated by "__"; values are parsed as JSON,
// falling back to a string.
inline void apply_env(json& j, const std::map<std::string, std::string>& env) {
  const std::string prefix = kEnvPrefix;
  for (const auto& [name, raw] : env) {
    if (name.rfind(prefix, 0) != 0 || name.size() == prefix.size()) continue;
    std::string rest = text::lower(name.substr(prefix.size()));
    json::json_pointer ptr;
    std::size_t pos = 0;
    while (true) {
      const auto next = rest.find("__", pos);
      ptr /= rest.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
      if (next == std::string::npos) break;
      pos = next + 2;
    }
    j[ptr] = detail::parse_scalar(raw);
  }
}

// Precedence: flags > environment > file > built-in defaults.
inline PipelineConfig load_config(const std::optional<fs::path>& file, const std::map<std::string, std::string>& env,
                                  const json& flag_overrides = json::object()) {
  const json defaults = config_to_json(PipelineConfig{});
  json merged = defaults;
  if (file) {
    json from_file;
    try {
      from_file = json::parse(io::read_file(*file));
    } catch (const json::parse_error& e) {
      throw InvalidArgument("config " + file->string() + ": " + e.what());
    }
    detail::check_known_keys(defaults, from_file, "");
    merged.merge_patch(from_file);
  }
  json env_patch = json::object();
  apply_env(env_patch, env);
  detail::check_known_keys(defaults, env_patch, "");
  merged.merge_patch(env_patch);
  detail::check_known_keys(defaults, flag_overrides, "");
  merged.merge_patch(flag_overrides);
  auto cfg = config_from_json(merged);
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------- errors

class StageError : public Error {
 public:
  StageError(int exit_code, std::string stage, const std::string& what, std::string run_first = {})
      : Error(what), exit_code_(exit_code), stage_(std::move(stage)), run_first_(std::move(run_first)) {}

  int exit_code() const noexcept { return exit_code_; }
  const std::string& stage() const noexcept { return stage_; }
  const std::string& run_first() const noexcept { return run_first_; }

 private:
  int exit_code_;
  std::string stage_;
  std::string run_first_;
};

inline json error_record(const std::string& stage, int exit_code, const std::string& kind, const std::string& message,
                         const std::string& run_first = {}) {
  json j = {{"error", kind}, {"stage", stage}, {"exit_code", exit_code}, {"message", message}};
  if (!run_first.empty()) j["run_first"] = run_first;
  return j;
}

// ---------------------------------------------------------------- corpus and backend

struct Split {
  std::vector<std::string> regressor;
  std::vector<std::string> prefs;
};

// Seeded shuffle, then the first round(fraction * n) ids (at least 1, and
// leaving at least 1 when n >= 2) train the regressor. Both lists are
// returned in corpus order.
inline Split split_corpus(const std::vector<io::CorpusItem>& corpus, double fraction, std::uint64_t seed) {
  if (corpus.empty()) throw InvalidArgument("empty corpus");
  std::vector<std::size_t> idx(corpus.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  auto n_reg = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(corpus.size())));
  n_reg = std::max<std::size_t>(n_reg, 1);
  if (corpus.size() >= 2) n_reg = std::min(n_reg, corpus.size() - 1);
  std::vector<bool> to_reg(corpus.size(), false);
  for (std::size_t k = 0; k < n_reg; ++k) to_reg[idx[k]] = true;
  Split s;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    (to_reg[i] ? s.regressor : s.prefs).push_back(corpus[i].question_id);
  }
  if (corpus.size() == 1) s.prefs = s.regressor;
  return s;
}

inline void check_corpus(const std::vector<io::CorpusItem>& corpus) {
  if (corpus.empty()) throw InvalidArgument("corpus has no questions");
  std::set<std::string> ids, questions;
  for (const auto& c : corpus) {
    if (c.question_id.empty()) throw InvalidArgument("corpus item with an empty question_id");
    if (!ids.insert(c.question_id).second) throw InvalidArgument("duplicate question_id '" + c.question_id + "'");
    if (!questions.insert(c.question).second) {
      throw InvalidArgument("duplicate question text for '" + c.question_id + "'");
    }
    if (c.gold.empty()) throw InvalidArgument("question '" + c.question_id + "' has no gold answer");
  }
}

// Answer options for a corpus item: its choices (gold added when missing),
// or gold plus three fillers.
inline std::vector<std::string> answer_options(const io::CorpusItem& item) {
  const auto judge = EquivalenceJudge::normalized_exact_match();
  std::vector<std::string> opts;
  std::set<std::string> keys;
  auto add = [&](const std::string& o) {
    if (text::normalize(o).empty()) return;
    if (keys.insert(judge.key(o)).second) opts.push_back(o);
  };
  add(item.gold);
  for (const auto& c : item.choices) add(c);
  if (opts.size() == 1) {
    for (const char* f : {"none of these", "cannot be determined", "all of these"}) add(f);
  }
  return opts;
}

// Synthetic answer distribution for each corpus question. A seeded draw
// picks the modal answer (gold three times out of four) and its mass in
// [0.3, 0.95]; the rest is spread over the other options. Each answer is
// phrased two ways, so semantic and lexical clusters differ.
inline DistributionTable synthetic_table(const std::vector<io::CorpusItem>& corpus, std::uint64_t seed) {
  DistributionTable table;
  for (const auto& item : corpus) {
    Rng rng(mix64(fnv1a64(item.question_id) ^ mix64(seed)));
    const auto opts = answer_options(item);
    std::vector<double> mass(opts.size(), 0.0);
    const std::size_t top = rng.bernoulli(0.75) || opts.size() == 1 ? 0 : 1 + rng.below(opts.size() - 1);
    mass[top] = rng.uniform(0.3, 0.95);
    double rest_total = 0.0;
    std::vector<double> rest(opts.size(), 0.0);
    for (std::size_t i = 0; i < opts.size(); ++i) {
      if (i == top) continue;
      rest[i] = 0.05 + rng.uniform();
      rest_total += rest[i];
    }
    if (opts.size() == 1) mass[0] = 1.0;
    for (std::size_t i = 0; i < opts.size(); ++i) {
      if (i != top) mass[i] = (1.0 - mass[top]) * rest[i] / rest_total;
    }
    AnswerDistribution dist;
    for (std::size_t i = 0; i < opts.size(); ++i) {
      const double f = rng.uniform(0.5, 0.9);
      dist.emplace_back("The answer is " + opts[i] + ".", mass[i] * f);
      dist.emplace_back("I believe the answer is " + opts[i] + ".", mass[i] * (1.0 - f));
    }
    table.emplace(item.question, std::move(dist));
  }
  return table;
}

inline MockConfig mock_config_for(const PipelineConfig& cfg, const std::vector<io::CorpusItem>& corpus) {
  MockConfig m;
  m.name = "mock";
  m.layer_count = cfg.backend.layer_count;
  m.feature_layer = cfg.backend.feature_layer;
  m.feature_dim = cfg.backend.feature_dim;
  m.projection_seed = cfg.backend.projection_seed;
  m.behavior = cfg.backend.behavior;
  m.keep_threshold = cfg.backend.keep_threshold;
  m.table = synthetic_table(corpus, cfg.backend.table_seed);
  return m;
}

inline std::string distractor_for(const io::CorpusItem& item) {
  const auto judge = EquivalenceJudge::extracted_answer_match();
  for (const auto& o : answer_options(item)) {
    if (judge.key(o) != judge.key(item.gold)) return o;
  }
  return {};
}

// ---------------------------------------------------------------- artifacts

struct Artifact {
  std::string file;
  Stage producer;
};

inline const std::map<std::string, Stage>& producers() {
  static const std::map<std::string, Stage> m = {
      {"samples.jsonl", Stage::sample},         {"split.json", Stage::sample},
      {"estimates.jsonl", Stage::estimate},     {"regressor.bin", Stage::train_regressor},
      {"regressor_report.json", Stage::train_regressor},
      {"confidences.jsonl", Stage::confidence}, {"prefs.jsonl", Stage::build_prefs},
      {"thresholds.json", Stage::build_prefs},  {"prefs_dropped.jsonl", Stage::build_prefs},
      {"training_history.csv", Stage::train_dpo}, {"dpo_run.json", Stage::train_dpo},
      {"policy.json", Stage::train_dpo},        {"episodes.jsonl", Stage::evaluate},
      {"results.csv", Stage::evaluate},         {"calibration.csv", Stage::evaluate},
      {"calibration_summary.csv", Stage::evaluate},
  };
  return m;
}

inline std::vector<std::string> stage_inputs(Stage s) {
  switch (s) {
    case Stage::sample: return {};
    case Stage::estimate: return {"samples.jsonl"};
    case Stage::train_regressor: return {"samples.jsonl", "estimates.jsonl", "split.json"};
    case Stage::confidence: return {"samples.jsonl", "regressor.bin"};
    case Stage::build_prefs: return {"confidences.jsonl", "split.json"};
    case Stage::train_dpo: return {"prefs.jsonl"};
    case Stage::evaluate: return {"samples.jsonl", "estimates.jsonl", "confidences.jsonl"};
    case Stage::report: return {"results.csv", "calibration.csv", "calibration_summary.csv"};
  }
  return {};
}

inline bool uses_corpus(Stage s) {
  return s == Stage::sample || s == Stage::estimate || s == Stage::build_prefs || s == Stage::evaluate;
}

// Config keys each stage depends on; the stage's config hash covers exactly
// these.
inline json stage_config(const PipelineConfig& cfg, Stage s, const std::string& report_format) {
  const json c = config_to_json(cfg);
  switch (s) {
    case Stage::sample:
      return {{"backend", c["backend"]}, {"decoding", c["decoding"]}, {"n", c["n"]}, {"k", c["k"]},
              {"seed", c["seed"]}, {"split_seed", c["corpus"]["split_seed"]},
              {"regressor_fraction", c["corpus"]["regressor_fraction"]}, {"compact_features", c["compact_features"]}};
    case Stage::estimate:
      return {{"backend", c["backend"]}, {"decoding", c["decoding"]}, {"k", c["k"]}, {"seed", c["seed"]},
              {"estimate", c["estimate"]}, {"alpha", c["bce"]["alpha"]}};
    case Stage::train_regressor: return {{"regressor", c["regressor"]}};
    case Stage::confidence: return {{"bce", c["bce"]}};
    case Stage::build_prefs:
      return {{"backend", c["backend"]}, {"decoding", c["decoding"]}, {"k", c["k"]}, {"seed", c["seed"]},
              {"prefs", c["prefs"]}};
    case Stage::train_dpo: return {{"dpo", c["dpo"]}};
    case Stage::evaluate:
      return {{"backend", c["backend"]}, {"decoding", c["decoding"]}, {"k", c["k"]}, {"seed", c["seed"]},
              {"eval", c["eval"]}, {"alpha", c["bce"]["alpha"]}};
    case Stage::report: return {{"bins", c["eval"]["bins"]}, {"format", report_format}};
  }
  return {};
}

struct StageManifest {
  std::string stage;
  std::map<std::string, std::string> inputs;   // name -> sha256
  std::string config_hash;
  std::map<std::string, std::string> outputs;  // file -> sha256
  double wall_time_seconds = 0.0;
  std::string tool_version = kToolVersion;
};

inline json manifest_to_json(const StageManifest& m) {
  return {{"stage", m.stage},
          {"inputs", m.inputs},
          {"config_hash", m.config_hash},
          {"outputs", m.outputs},
          {"wall_time_seconds", m.wall_time_seconds},
          {"tool_version", m.tool_version}};
}

inline StageManifest manifest_from_json(const json& j) {
  StageManifest m;
  m.stage = j.at("stage").get<std::string>();
  m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
  m.wall_time_seconds = j.at("wall_time_seconds").get<double>();
  m.tool_version = j.at("tool_version").get<std::string>();
  return m;
}

// Files a stage writes; the map value is the content.
using Outputs = std::map<std::string, std::string>;

struct StageResult {
  int exit_code = 0;
  bool skipped = false;
  StageManifest manifest;
  std::vector<std::string> notes;
};

struct RunOptions {
  bool force = false;
  std::string report_format = "csv";  // csv | svg
};

// ---------------------------------------------------------------- stage bodies

namespace detail {

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

inline std::vector<io::CorpusItem> load_corpus(const PipelineConfig& cfg) {
  if (!fs::exists(cfg.corpus.path)) {
    throw InvalidArgument("corpus file '" + cfg.corpus.path + "' does not exist");
  }
  auto corpus = io::read_corpus(cfg.corpus.path);
  check_corpus(corpus);
  return corpus;
}

inline std::vector<SampleSet> load_samples(const fs::path& dir) {
  std::vector<SampleSet> out;
  for (const auto& j : io::read_jsonl(dir / "samples.jsonl")) out.push_back(io::sample_set_from_json(j));
  return out;
}

inline Split load_split(const fs::path& dir) {
  const auto j = json::parse(io::read_file(dir / "split.json"));
  return {j.at("regressor").get<std::vector<std::string>>(), j.at("prefs").get<std::vector<std::string>>()};
}

inline DecodingParams decoding(const PipelineConfig& cfg) {
  auto d = cfg.decoding;
  d.seed = cfg.seed;
  return d;
}

inline Outputs run_sample(const PipelineConfig& cfg, const fs::path&, std::vector<std::string>&) {
  const auto corpus = load_corpus(cfg);
  MockBackend backend(mock_config_for(cfg, corpus));
  std::string samples;
  for (const auto& item : corpus) {
    const auto set = sample_responses(backend, item.question_id, item.question, cfg.n, decoding(cfg));
    samples += io::sample_set_to_json(set, cfg.compact_features).dump() + "\n";
  }
  const auto split = split_corpus(corpus, cfg.corpus.regressor_fraction, cfg.corpus.split_seed);
  const json sj = {{"regressor", split.regressor},
                   {"prefs", split.prefs},
                   {"seed", cfg.corpus.split_seed},
                   {"regressor_fraction", cfg.corpus.regressor_fraction}};
  return {{"samples.jsonl", samples}, {"split.json", sj.dump(2) + "\n"}};
}

inline Outputs run_estimate(const PipelineConfig& cfg, const fs::path& dir, std::vector<std::string>& notes) {
  const auto corpus = load_corpus(cfg);
  MockBackend backend(mock_config_for(cfg, corpus));
  const auto judge = EquivalenceJudge::extracted_answer_match();
  std::string rows;
  std::size_t missing = 0;
  for (const auto& set : load_samples(dir)) {
    const double se = semantic_entropy(cluster(set, judge, cfg.estimate.cluster_weighting));
    EstimatorResult se_row{EstimatorKind::semantic_entropy, se, confidence_from_se(se, cfg.bce.alpha), false};
    auto j = io::estimate_to_json(set.question_id, se_row);
    j["cluster_weighting"] = cfg.estimate.cluster_weighting == ClusterWeighting::count ? "count" : "probability";
    rows += j.dump() + "\n";

    const double pe = predictive_entropy(set, cfg.estimate.predictive_entropy_normalized);
    EstimatorResult pe_row{EstimatorKind::predictive_entropy, pe,
                           cfg.estimate.predictive_entropy_normalized ? std::exp(-pe) : std::optional<double>{},
                           false};
    j = io::estimate_to_json(set.question_id, pe_row);
    j["normalized"] = cfg.estimate.predictive_entropy_normalized;
    rows += j.dump() + "\n";

    const auto& answer = set.records.at(modal_record(set)).text;
    j = io::estimate_to_json(set.question_id, p_true(backend, set.question, answer));
    j["answer_text"] = answer;
    rows += j.dump() + "\n";

    const auto verbal = verbalized_confidence(backend, set.question, answer, decoding(cfg));
    missing += verbal.missing;
    j = io::estimate_to_json(set.question_id, verbal);
    j["answer_text"] = answer;
    rows += j.dump() + "\n";
  }
  if (missing) notes.push_back(std::to_string(missing) + " verbalized replies could not be parsed");
  return {{"estimates.jsonl", rows}};
}

inline std::map<std::string, std::map<EstimatorKind, EstimatorResult>> load_estimates(const fs::path& dir) {
  std::map<std::string, std::map<EstimatorKind, EstimatorResult>> out;
  for (const auto& j : io::read_jsonl(dir / "estimates.jsonl")) {
    const auto row = io::estimate_from_json(j);
    out[row.question_id][row.result.estimator] = row.result;
  }
  return out;
}

inline Outputs run_train_regressor(const PipelineConfig& cfg, const fs::path& dir, std::vector<std::string>& notes) {
  const auto split = load_split(dir);
  const std::set<std::string> train_ids(split.regressor.begin(), split.regressor.end());
  const auto estimates = load_estimates(dir);
  std::vector<TrainingExample> examples;
  for (const auto& set : load_samples(dir)) {
    if (!train_ids.contains(set.question_id)) continue;
    const auto it = estimates.find(set.question_id);
    if (it == estimates.end() || !it->second.contains(EstimatorKind::semantic_entropy)) {
      throw InvalidArgument("no semantic_entropy estimate for '" + set.question_id + "'");
    }
    examples.push_back({features_of(set), it->second.at(EstimatorKind::semantic_entropy).value});
  }
  auto rc = cfg.regressor;
  rc.alpha = cfg.bce.alpha;
  const auto model = train_regressor(examples, rc);
  for (const auto& n : model.notes) notes.push_back(n);
  const json report = {{"n_train_questions", examples.size()},
                       {"val_mse", model.val_mse},
                       {"train_mse_history", model.train_mse_history},
                       {"notes", model.notes}};
  return {{"regressor.bin", regressor_file::serialize(model)}, {"regressor_report.json", report.dump(2) + "\n"}};
}

inline Outputs run_confidence(const PipelineConfig& cfg, const fs::path& dir, std::vector<std::string>&) {
  const auto model = regressor_file::deserialize(io::read_file(dir / "regressor.bin"));
  std::string rows;
  for (const auto& set : load_samples(dir)) {
    rows += io::confidence_to_json(estimate_bilateral(set, model, cfg.bce)).dump() + "\n";
  }
  return {{"confidences.jsonl", rows}};
}

inline std::map<std::string, ConfidenceEstimate> load_confidences(const fs::path& dir) {
  std::map<std::string, ConfidenceEstimate> out;
  for (const auto& j : io::read_jsonl(dir / "confidences.jsonl")) {
    auto c = io::confidence_from_json(j);
    out.emplace(c.question_id, std::move(c));
  }
  return out;
}

inline Outputs run_build_prefs(const PipelineConfig& cfg, const fs::path& dir, std::vector<std::string>& notes) {
  const auto corpus = load_corpus(cfg);
  MockBackend backend(mock_config_for(cfg, corpus));
  const auto split = load_split(dir);
  const auto confidences = load_confidences(dir);
  std::map<std::string, const io::CorpusItem*> by_id;
  for (const auto& c : corpus) by_id[c.question_id] = &c;

  // Pass 2 of the two-pass scheme: thresholds over the whole preference
  // split before any pair is built.
  std::vector<double> values;
  for (const auto& id : split.prefs) {
    const auto it = confidences.find(id);
    if (it == confidences.end()) throw InvalidArgument("no confidence for '" + id + "'");
    values.push_back(it->second.confidence_qa);
  }
  const auto spec = compute_thresholds(values);

  std::string prefs, dropped;
  std::map<std::string, int> band_counts = {{"high", 0}, {"mid", 0}, {"low", 0}};
  const auto params = decoding(cfg);
  for (const auto& id : split.prefs) {
    const auto& conf = confidences.at(id);
    const auto item_it = by_id.find(id);
    if (item_it == by_id.end()) throw InvalidArgument("question '" + id + "' is not in the corpus");
    const auto& item = *item_it->second;
    const auto opposing = generate_opposing_statement(backend, item.question, conf.answer_text, item.gold, params,
                                                      cfg.prefs.max_regenerations);
    if (!opposing.statement) {
      dropped += json{{"question_id", id}, {"reason", opposing.drop_reason}}.dump() + "\n";
      continue;
    }
    Conversation conv{id, item.question, conf.answer_text, *opposing.statement, item.gold,
                      matches_gold(conf.answer_text, item.gold)};
    const auto cands = generate_candidates(backend, conv, params, cfg.prefs.use_templates);
    const auto assignment = assign_band(conf.confidence_qa, spec);
    const auto built = build_pairs(conv, cands, assignment, conf.confidence_qa);
    if (built.drop_reason) {
      dropped += json{{"question_id", id}, {"reason", *built.drop_reason}}.dump() + "\n";
      continue;
    }
    ++band_counts[to_string(assignment.band)];
    for (const auto& p : built.pairs) prefs += io::pair_to_json(p).dump() + "\n";
  }
  const json thresholds = {{"t1", spec.t1},
                           {"t2", spec.t2},
                           {"method", spec.method},
                           {"upper_percentile", kUpperPercentile},
                           {"lower_percentile", kLowerPercentile},
                           {"n", values.size()},
                           {"band_counts", band_counts}};
  if (!dropped.empty()) notes.push_back("some conversations were dropped; see prefs_dropped.jsonl");
  return {{"prefs.jsonl", prefs}, {"thresholds.json", thresholds.dump(2) + "\n"}, {"prefs_dropped.jsonl", dropped}};
}

inline Outputs run_train_dpo(const PipelineConfig& cfg, const fs::path& dir, std::vector<std::string>& notes) {
  const auto prefs_text = io::read_file(dir / "prefs.jsonl");
  DpoBatch dataset;
  std::size_t skipped = 0;
  for (const auto& j : io::parse_jsonl(prefs_text, "prefs.jsonl")) {
    const auto row = io::pref_from_json(j);
    if (row.chosen == row.rejected) {
      ++skipped;
      continue;
    }
    dataset.push_back({row.prompt, row.chosen, row.rejected});
  }
  if (skipped) notes.push_back(std::to_string(skipped) + " pairs with identical texts skipped");
  if (dataset.empty()) throw InvalidArgument("prefs.jsonl has no usable preference pairs");
  const auto policy = toy_policy_for(dataset);
  const auto run = train_dpo(policy, dataset, cfg.dpo);

  std::string history = "step,loss,mean_margin\n";
  for (const auto& h : run.history) history += std::to_string(h.step) + "," + fmt(h.loss) + "," + fmt(h.mean_margin) + "\n";
  const json manifest = {{"config", cfg.dpo},
                         {"dataset", {{"file", "prefs.jsonl"},
                                      {"sha256", io::sha256_hex(prefs_text)},
                                      {"pairs_used", dataset.size()},
                                      {"pairs_skipped", skipped}}},
                         {"policy", {{"kind", "toy-softmax"}, {"parameters", policy.parameter_count()},
                                     {"prompts", policy.prompt_count()}}},
                         {"steps", run.history.size()},
                         {"initial_loss", run.initial_loss},
                         {"final_loss", run.final_loss},
                         {"initial_margin", run.initial_margin},
                         {"final_margin", run.final_margin},
                         {"aborted", run.aborted},
                         {"abort_reason", run.abort_reason}};
  Outputs out = {{"training_history.csv", history},
                 {"dpo_run.json", manifest.dump(2) + "\n"},
                 {"policy.json", run.policy.to_json().dump() + "\n"}};
  if (run.aborted) {
    for (const auto& [file, content] : out) io::write_atomic(dir / file, content);
    throw StageError(1, "train-dpo", "training diverged: " + run.abort_reason);
  }
  return out;
}

struct MethodScores {
  std::vector<double> confidence;
  std::vector<bool> correct;
  std::size_t missing = 0;
};

inline Outputs run_evaluate(const PipelineConfig& cfg, const fs::path& dir, std::vector<std::string>&) {
  const auto corpus = load_corpus(cfg);
  MockBackend backend(mock_config_for(cfg, corpus));
  const auto params = decoding(cfg);
  ScriptedArguments scripted;
  BackendArguments generated(backend, params);
  ArgumentSource& arguments = cfg.eval.arguments == "backend" ? static_cast<ArgumentSource&>(generated) : scripted;

  std::string episodes_out;
  std::map<std::string, std::vector<Episode>> by_dataset;
  for (const auto& item : corpus) {
    EvalQuestion q{item.question_id, item.question, item.gold, distractor_for(item)};
    for (auto scenario : cfg.eval.scenarios) {
      auto ep = run_episode(backend, q, scenario, arguments, params);
      episodes_out += io::episode_to_json(ep).dump() + "\n";
      by_dataset[item.dataset].push_back(std::move(ep));
    }
  }
  std::vector<BenchmarkResult> results;
  const bool paired = cfg.eval.scenarios.size() == 2 && cfg.eval.scenarios[0] != cfg.eval.scenarios[1];
  if (paired) {
    for (const auto& [name, eps] : by_dataset) {
      std::string clean = name;
      std::replace(clean.begin(), clean.end(), ',', ' ');
      results.push_back(compute_metrics(eps, clean));
    }
  }

  // Calibration: is the modal sampled answer correct?
  std::map<std::string, const io::CorpusItem*> by_id;
  for (const auto& c : corpus) by_id[c.question_id] = &c;
  const auto estimates = load_estimates(dir);
  const auto confidences = load_confidences(dir);
  const auto judge = EquivalenceJudge::extracted_answer_match();
  std::map<std::string, MethodScores> methods;
  for (const auto& set : load_samples(dir)) {
    const auto it = by_id.find(set.question_id);
    if (it == by_id.end()) continue;
    const bool correct = judge.key(set.records.at(modal_record(set)).text) == judge.key(it->second->gold);
    auto push = [&](const std::string& method, std::optional<double> c) {
      auto& m = methods[method];
      if (!c) {
        ++m.missing;
        return;
      }
      m.confidence.push_back(std::clamp(*c, 0.0, 1.0));
      m.correct.push_back(correct);
    };
    push("bce", confidences.at(set.question_id).confidence_qa);
    const auto& est = estimates.at(set.question_id);
    for (auto kind : {EstimatorKind::semantic_entropy, EstimatorKind::predictive_entropy, EstimatorKind::p_true,
                      EstimatorKind::verbalized}) {
      const auto e = est.find(kind);
      push(to_string(kind), e == est.end() ? std::nullopt : e->second.confidence);
    }
  }
  std::string calibration = std::string(kCalibrationHeader) + "\n";
  std::string summary = "method,n,missing,ece,auroc\n";
  for (const auto& [name, m] : methods) {
    if (m.confidence.empty()) {
      summary += name + ",0," + std::to_string(m.missing) + ",,\n";
      continue;
    }
    const auto report = calibration_report(m.confidence, m.correct, cfg.eval.bins);
    calibration += calibration_csv(name, report, false);
    summary += name + "," + std::to_string(m.confidence.size()) + "," + std::to_string(m.missing) + "," +
               fmt(report.ece) + "," + (report.auroc ? fmt(*report.auroc) : std::string()) + "\n";
  }
  return {{"episodes.jsonl", episodes_out},
          {"results.csv", results_csv(results)},
          {"calibration.csv", calibration},
          {"calibration_summary.csv", summary}};
}

inline std::vector<std::vector<std::string>> read_csv(const std::string& content) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(content);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline Outputs run_report(const PipelineConfig& cfg, const fs::path& dir, const std::string& format) {
  const auto results = io::read_file(dir / "results.csv");
  const auto calibration = io::read_file(dir / "calibration.csv");
  const auto summary = io::read_file(dir / "calibration_summary.csv");
  if (format == "csv") {
    std::string out = "# answer_matching: " + std::string(kAnswerMatchingRule) + "\n";
    out += "# ece_bins: " + std::to_string(cfg.eval.bins) + "\n";
    out += "# tool_version: " + std::string(kToolVersion) + "\n";
    out += "# results\n" + results + "# calibration_summary\n" + summary + "# calibration_bins\n" + calibration;
    return {{"report.csv", out}};
  }
  if (format != "svg") throw InvalidArgument("report format must be csv or svg");
  std::map<std::string, CalibrationReport> curves;
  const auto rows = read_csv(calibration);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() < 6) throw InvalidArgument("calibration.csv line " + std::to_string(i + 1) + " is malformed");
    CalibrationBin bin{std::stod(r[2]), std::stod(r[3]), std::stod(r[4]), std::stoul(r[5])};
    curves[r[0]].bins.push_back(bin);
  }
  const auto srows = read_csv(summary);
  for (std::size_t i = 1; i < srows.size(); ++i) {
    if (srows[i].size() >= 4 && !srows[i][3].empty() && curves.contains(srows[i][0])) {
      curves[srows[i][0]].ece = std::stod(srows[i][3]);
    }
  }
  std::vector<std::pair<std::string, CalibrationReport>> list(curves.begin(), curves.end());
  std::string svg = reliability_svg(list, "Reliability diagram (" + std::to_string(cfg.eval.bins) + " bins)");
  const std::string comment = "<!-- answer_matching: " + std::string(kAnswerMatchingRule) + " -->\n";
  svg.insert(svg.find('\n') + 1, comment);
  return {{"reliability.svg", svg}};
}

}  // namespace detail

inline std::string manifest_name(Stage s, const RunOptions& opts) {
  return s == Stage::report ? "report-" + opts.report_format : to_string(s);
}

// Runs one stage in cfg.output_dir. Returns exit 0 on success or cache hit;
// throws StageError with exit 2 (missing upstream artifact) or 3 (config
// changed since the recorded run, without --force).
inline StageResult run_stage(Stage stage, const PipelineConfig& cfg, const RunOptions& opts = {}) {
  cfg.validate();
  const fs::path dir = cfg.output_dir;
  const std::string name = to_string(stage);

  for (const auto& input : stage_inputs(stage)) {
    if (!fs::exists(dir / input)) {
      const auto upstream = to_string(producers().at(input));
      throw StageError(2, name, "missing upstream artifact " + (dir / input).string() + "; run '" + upstream + "' first",
                       upstream);
    }
  }
  if (uses_corpus(stage) && !fs::exists(cfg.corpus.path)) {
    throw StageError(1, name, "corpus file '" + cfg.corpus.path + "' does not exist");
  }

  StageManifest manifest;
  manifest.stage = name;
  for (const auto& input : stage_inputs(stage)) manifest.inputs[input] = io::sha256_file(dir / input);
  if (uses_corpus(stage)) manifest.inputs["corpus"] = io::sha256_file(cfg.corpus.path);
  manifest.config_hash = io::sha256_hex(stage_config(cfg, stage, opts.report_format).dump());

  const fs::path manifest_path = dir / "manifests" / (manifest_name(stage, opts) + ".json");
  if (fs::exists(manifest_path) && !opts.force) {
    const auto previous = manifest_from_json(json::parse(io::read_file(manifest_path)));
    if (previous.config_hash != manifest.config_hash) {
      throw StageError(3, name, "config for stage '" + name + "' changed since its last run; rerun with --force");
    }
    bool fresh = previous.inputs == manifest.inputs;
    for (const auto& [file, sha] : previous.outputs) {
      fresh = fresh && fs::exists(dir / file) && io::sha256_file(dir / file) == sha;
    }
    if (fresh) {
      StageResult r;
      r.skipped = true;
      r.manifest = previous;
      return r;
    }
  }

  StageResult result;
  const auto start = std::chrono::steady_clock::now();
  Outputs outputs;
  try {
    switch (stage) {
      case Stage::sample: outputs = detail::run_sample(cfg, dir, result.notes); break;
      case Stage::estimate: outputs = detail::run_estimate(cfg, dir, result.notes); break;
      case Stage::train_regressor: outputs = detail::run_train_regressor(cfg, dir, result.notes); break;
      case Stage::confidence: outputs = detail::run_confidence(cfg, dir, result.notes); break;
      case Stage::build_prefs: outputs = detail::run_build_prefs(cfg, dir, result.notes); break;
      case Stage::train_dpo: outputs = detail::run_train_dpo(cfg, dir, result.notes); break;
      case Stage::evaluate: outputs = detail::run_evaluate(cfg, dir, result.notes); break;
      case Stage::report: outputs = detail::run_report(cfg, dir, opts.report_format); break;
    }
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(1, name, e.what());
  }
  for (const auto& [file, content] : outputs) {
    io::write_atomic(dir / file, content);
    manifest.outputs[file] = io::sha256_hex(content);
  }
  manifest.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  io::write_atomic(manifest_path, manifest_to_json(manifest).dump(2) + "\n");
  result.manifest = manifest;
  return result;
}

// ---------------------------------------------------------------- validate

struct Violation {
  std::size_t line = 0;  // 1-based; 0 for file-level findings
  std::string message;
};

struct ValidationReport {
  std::string path;
  std::string kind;
  std::size_t records = 0;
  std::vector<Violation> violations;

  json to_json() const {
    json v = json::array();
    for (const auto& x : violations) v.push_back({{"line", x.line}, {"message", x.message}});
    return {{"path", path}, {"kind", kind}, {"records", records}, {"violations", v}};
  }
};

namespace detail {

inline bool in_unit(double x) { return x >= 0.0 && x <= 1.0; }

template <class Fn>
void each_jsonl(const std::string& content, ValidationReport& report, Fn&& fn) {
  std::istringstream in(content);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++report.records;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      report.violations.push_back({n, std::string("not valid JSON: ") + e.what()});
      continue;
    }
    try {
      fn(j, n);
    } catch (const std::exception& e) {
      report.violations.push_back({n, std::string("schema: ") + e.what()});
    }
  }
}

inline void validate_prefs(const std::string& content, const fs::path& path, ValidationReport& report) {
  std::optional<ThresholdSpec> spec;
  const auto tpath = path.parent_path() / "thresholds.json";
  if (fs::exists(tpath)) {
    const auto t = json::parse(io::read_file(tpath));
    spec = ThresholdSpec{t.at("t1").get<double>(), t.at("t2").get<double>(), t.value("method", "nearest-rank")};
  }
  std::map<std::string, int> per_question;
  std::map<std::string, std::size_t> first_line;
  each_jsonl(content, report, [&](const json& j, std::size_t n) {
    const auto row = io::pref_from_json(j);
    ++per_question[row.question_id];
    first_line.emplace(row.question_id, n);
    if (row.chosen_level < 1 || row.chosen_level > 5 || row.rejected_level < 1 || row.rejected_level > 5) {
      report.violations.push_back({n, "stance levels must be in 1..5"});
    } else if (auto v = band_violation(row.band, row.chosen_level, row.rejected_level)) {
      report.violations.push_back({n, *v});
    }
    if (!(row.confidence_qa > 0.0 && row.confidence_qa <= 1.0)) {
      report.violations.push_back({n, "confidence_qa outside (0, 1]"});
    }
    if (row.pair_index < 0 || row.pair_index > 5) report.violations.push_back({n, "pair_index outside 0..5"});
    if (row.chosen == row.rejected && !row.duplicate_text) {
      report.violations.push_back({n, "chosen equals rejected but duplicate_text is not set"});
    }
    if (spec && assign_band(row.confidence_qa, *spec).band != row.band) {
      report.violations.push_back({n, "band " + to_string(row.band) + " disagrees with thresholds (t1=" +
                                          fmt(spec->t1) + ", t2=" + fmt(spec->t2) + ")"});
    }
  });
  for (const auto& [id, count] : per_question) {
    if (count != 6) {
      report.violations.push_back({first_line[id], "question '" + id + "' has " + std::to_string(count) +
                                                       " pairs, expected 6"});
    }
  }
}

inline void validate_confidences(const std::string& content, ValidationReport& report) {
  each_jsonl(content, report, [&](const json& j, std::size_t n) {
    const auto c = io::confidence_from_json(j);
    if (!(c.rho_hat > 0.0 && c.rho_hat <= 1.0)) report.violations.push_back({n, "rho_hat outside (0, 1]"});
    if (!(c.confidence_q > 0.0 && c.confidence_q <= 1.0)) report.violations.push_back({n, "confidence_q outside (0, 1]"});
    if (!(c.confidence_qa > 0.0 && c.confidence_qa <= 1.0)) {
      report.violations.push_back({n, "confidence_qa outside (0, 1]"});
    }
    if (c.confidence_qa > c.confidence_q * (1.0 + 1e-12)) {
      report.violations.push_back({n, "confidence_qa exceeds confidence_q"});
    }
    if (c.p_prime > 0.0 || !std::isfinite(c.p_prime)) report.violations.push_back({n, "p_prime must be finite and <= 0"});
  });
}

inline void validate_samples(const std::string& content, ValidationReport& report) {
  each_jsonl(content, report, [&](const json& j, std::size_t n) {
    const auto s = io::sample_set_from_json(j);
    if (s.records.empty()) report.violations.push_back({n, "no records"});
    std::size_t dim = s.feature_dim();
    for (std::size_t r = 0; r < s.records.size(); ++r) {
      const auto& rec = s.records[r];
      if (rec.token_ids.empty()) report.violations.push_back({n, "record " + std::to_string(r) + " is empty"});
      if (rec.feature.size() != dim) {
        report.violations.push_back({n, "record " + std::to_string(r) + " has a different feature dimension"});
      }
      for (double lp : rec.token_logprobs) {
        if (!(lp <= 0.0)) {
          report.violations.push_back({n, "record " + std::to_string(r) + " has a log-probability > 0"});
          break;
        }
      }
      if (rec.token_ids.size() > static_cast<std::size_t>(s.decoding.max_tokens)) {
        report.violations.push_back({n, "record " + std::to_string(r) + " exceeds max_tokens"});
      }
    }
  });
}

inline void validate_estimates(const std::string& content, ValidationReport& report) {
  each_jsonl(content, report, [&](const json& j, std::size_t n) {
    const auto row = io::estimate_from_json(j);
    const auto& r = row.result;
    const bool entropy = r.estimator == EstimatorKind::semantic_entropy || r.estimator == EstimatorKind::predictive_entropy;
    if (entropy && !(r.value >= 0.0)) report.violations.push_back({n, "entropy value must be >= 0"});
    if (r.confidence && !in_unit(*r.confidence)) report.violations.push_back({n, "confidence outside [0, 1]"});
  });
}

inline void validate_episodes(const std::string& content, ValidationReport& report) {
  each_jsonl(content, report, [&](const json& j, std::size_t n) {
    const auto e = io::episode_from_json(j);
    if (e.parse_failure && e.final_correct) report.violations.push_back({n, "parse failure scored as correct"});
  });
}

// Printed fractions carry 6 decimals, so identities hold to a few 1e-6.
inline constexpr double kCsvTolerance = 5e-6;

inline void validate_results(const std::string& content, ValidationReport& report) {
  std::istringstream in(content);
  std::string line;
  std::size_t n = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const auto cells = read_csv(line);
    if (cells.empty()) continue;
    if (header.empty()) {
      header = cells[0];
      if (line != kResultsHeader) report.violations.push_back({n, "unexpected header"});
      continue;
    }
    ++report.records;
    const auto& r = cells[0];
    if (r.size() != 8) {
      report.violations.push_back({n, "expected 8 columns"});
      continue;
    }
    try {
      const double c = std::stod(r[2]), f = std::stod(r[3]), avg = std::stod(r[4]), both = std::stod(r[5]),
                   either = std::stod(r[6]);
      for (double v : {c, f, avg, both, either}) {
        if (!in_unit(v)) report.violations.push_back({n, "fraction outside [0, 1]"});
      }
      const auto chk = check_identities(c, f, avg, both, either);
      if (chk.average_error > kCsvTolerance) {
        report.violations.push_back({n, "average " + r[4] + " != (llm_correct + llm_false) / 2"});
      }
      if (chk.identity_error > kCsvTolerance) {
        report.violations.push_back({n, "2 * both + either != llm_correct + llm_false"});
      }
    } catch (const std::exception&) {
      report.violations.push_back({n, "non-numeric field"});
    }
  }
}

}  // namespace detail

// Kind is chosen by file name.
inline ValidationReport validate(const fs::path& path) {
  ValidationReport report;
  report.path = path.string();
  if (!fs::exists(path)) throw Error("cannot read " + path.string());
  const auto content = io::read_file(path);
  const auto file = path.filename().string();
  auto ends = [&](const std::string& suffix) {
    return file.size() >= suffix.size() && file.compare(file.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  if (ends("prefs.jsonl")) {
    report.kind = "prefs";
    detail::validate_prefs(content, path, report);
  } else if (ends("confidences.jsonl")) {
    report.kind = "confidences";
    detail::validate_confidences(content, report);
  } else if (ends("samples.jsonl")) {
    report.kind = "samples";
    detail::validate_samples(content, report);
  } else if (ends("estimates.jsonl")) {
    report.kind = "estimates";
    detail::validate_estimates(content, report);
  } else if (ends("episodes.jsonl")) {
    report.kind = "episodes";
    detail::validate_episodes(content, report);
  } else if (ends("results.csv")) {
    report.kind = "results";
    detail::validate_results(content, report);
  } else {
    throw InvalidArgument("cannot tell the artifact kind of '" + file + "'");
  }
  return report;
}

}  // namespace conviction::pipeline
