#pragma once

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "conviction/backend.hpp"
#include "conviction/bce.hpp"
#include "conviction/common.hpp"
#include "conviction/estimators.hpp"
#include "conviction/eval.hpp"
#include "conviction/prefs.hpp"

namespace conviction::io {

using nlohmann::json;
namespace fs = std::filesystem;

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes to a sibling temporary file and renames it over `path`, so readers
// never observe a partial file.
inline void write_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw Error("short write to " + tmp.string());
    }
  }
  fs::rename(tmp, path);
}

inline std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

inline std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

inline std::string base64_encode(const std::string& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

inline std::string base64_decode(const std::string& b64) {
  if (b64.size() % 4 != 0) throw InvalidArgument("base64 length is not a multiple of 4");
  std::string out(3 * b64.size() / 4, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(b64.data()), static_cast<int>(b64.size()));
  if (n < 0) throw InvalidArgument("malformed base64");
  std::size_t pad = 0;
  if (!b64.empty() && b64.back() == '=') ++pad;
  if (b64.size() > 1 && b64[b64.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

// Little-endian IEEE-754 binary32.
inline std::string floats_to_bytes(const std::vector<float>& v) {
  std::string out(v.size() * 4, '\0');
  for (std::size_t i = 0; i < v.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(v[i]);
    for (int b = 0; b < 4; ++b) out[4 * i + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  return out;
}

inline std::vector<float> bytes_to_floats(const std::string& bytes) {
  if (bytes.size() % 4 != 0) throw InvalidArgument("float block length is not a multiple of 4");
  std::vector<float> v(bytes.size() / 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + static_cast<std::size_t>(b)]))
              << (8 * b);
    }
    v[i] = std::bit_cast<float>(bits);
  }
  return v;
}

// One JSON document per non-empty line; parse errors name the line (1-based).
inline std::vector<json> parse_jsonl(const std::string& content, const std::string& what = "input") {
  std::vector<json> out;
  std::istringstream in(content);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw InvalidArgument(what + " line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<json> read_jsonl(const fs::path& path) { return parse_jsonl(read_file(path), path.string()); }

inline std::string to_jsonl(const std::vector<json>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

// ---- samples.jsonl ----

inline json decoding_to_json(const DecodingParams& d) {
  return {{"top_p", d.top_p}, {"temperature", d.temperature}, {"max_tokens", d.max_tokens}, {"seed", d.seed}};
}

inline DecodingParams decoding_from_json(const json& j) {
  DecodingParams d;
  d.top_p = j.at("top_p").get<double>();
  d.temperature = j.at("temperature").get<double>();
  d.max_tokens = j.at("max_tokens").get<int>();
  d.seed = j.at("seed").get<std::uint64_t>();
  return d;
}

inline json sample_set_to_json(const SampleSet& s, bool compact = false) {
  json records = json::array();
  for (const auto& r : s.records) {
    json rec = {{"token_ids", r.token_ids},
                {"token_logprobs", r.token_logprobs},
                {"text", r.text},
                {"truncated", r.truncated}};
    if (compact) {
      rec["feature"] = base64_encode(floats_to_bytes(r.feature));
    } else {
      rec["feature"] = r.feature;
    }
    records.push_back(std::move(rec));
  }
  return {{"question_id", s.question_id},
          {"question", s.question},
          {"decoding", decoding_to_json(s.decoding)},
          {"records", std::move(records)}};
}

// Accepts either feature encoding.
inline SampleSet sample_set_from_json(const json& j) {
  SampleSet s;
  s.question_id = j.at("question_id").get<std::string>();
  s.question = j.at("question").get<std::string>();
  s.decoding = decoding_from_json(j.at("decoding"));
  for (const auto& r : j.at("records")) {
    GenerationRecord rec;
    rec.token_ids = r.at("token_ids").get<std::vector<int>>();
    rec.token_logprobs = r.at("token_logprobs").get<std::vector<double>>();
    rec.text = r.at("text").get<std::string>();
    rec.truncated = r.at("truncated").get<bool>();
    const auto& f = r.at("feature");
    rec.feature = f.is_string() ? bytes_to_floats(base64_decode(f.get<std::string>())) : f.get<std::vector<float>>();
    if (rec.token_ids.size() != rec.token_logprobs.size()) {
      throw InvalidArgument("record of " + s.question_id + " has token_ids/token_logprobs of different lengths");
    }
    s.records.push_back(std::move(rec));
  }
  return s;
}

// ---- estimates.jsonl ----

inline json estimate_to_json(const std::string& question_id, const EstimatorResult& r) {
  json j = {{"question_id", question_id}, {"estimator", to_string(r.estimator)}};
  j["value"] = r.missing ? json(nullptr) : json(r.value);
  j["confidence"] = r.confidence ? json(*r.confidence) : json(nullptr);
  if (r.missing) j["missing"] = true;
  return j;
}

struct EstimateRow {
  std::string question_id;
  EstimatorResult result;
};

inline EstimateRow estimate_from_json(const json& j) {
  EstimateRow row;
  row.question_id = j.at("question_id").get<std::string>();
  row.result.estimator = estimator_from_string(j.at("estimator").get<std::string>());
  row.result.missing = j.value("missing", false) || j.at("value").is_null();
  row.result.value = row.result.missing ? std::nan("") : j.at("value").get<double>();
  if (!j.at("confidence").is_null()) row.result.confidence = j.at("confidence").get<double>();
  return row;
}

// ---- confidences.jsonl ----

inline json confidence_to_json(const ConfidenceEstimate& c) {
  return {{"question_id", c.question_id},   {"answer_text", c.answer_text},     {"p_prime", c.p_prime},
          {"rho_hat", c.rho_hat},           {"confidence_q", c.confidence_q},   {"confidence_qa", c.confidence_qa},
          {"variant", to_string(c.variant)}, {"n_samples", c.n_samples}};
}

inline ConfidenceEstimate confidence_from_json(const json& j) {
  ConfidenceEstimate c;
  c.question_id = j.at("question_id").get<std::string>();
  c.answer_text = j.at("answer_text").get<std::string>();
  c.p_prime = j.at("p_prime").get<double>();
  c.rho_hat = j.at("rho_hat").get<double>();
  c.confidence_q = j.at("confidence_q").get<double>();
  c.confidence_qa = j.at("confidence_qa").get<double>();
  c.variant = ratio_variant_from_string(j.at("variant").get<std::string>());
  c.n_samples = j.at("n_samples").get<std::size_t>();
  return c;
}

// ---- prefs.jsonl ----
// "prompt" is render_pair_prompt(q, a, s).

inline json pair_to_json(const PreferencePair& p) {
  return {{"question_id", p.question_id},
          {"prompt", render_pair_prompt(p.q, p.a, p.s)},
          {"chosen", p.chosen},
          {"rejected", p.rejected},
          {"meta",
           {{"band", to_string(p.band)},
            {"confidence_qa", p.confidence_qa},
            {"pair_index", p.pair_index},
            {"chosen_level", p.chosen_level},
            {"rejected_level", p.rejected_level},
            {"duplicate_text", p.duplicate_text}}}};
}

struct PrefRow {
  std::string question_id;
  std::string prompt;
  std::string chosen;
  std::string rejected;
  Band band = Band::mid;
  double confidence_qa = 0.0;
  int pair_index = 0;
  int chosen_level = 0;
  int rejected_level = 0;
  bool duplicate_text = false;
};

inline PrefRow pref_from_json(const json& j) {
  PrefRow r;
  r.question_id = j.at("question_id").get<std::string>();
  r.prompt = j.at("prompt").get<std::string>();
  r.chosen = j.at("chosen").get<std::string>();
  r.rejected = j.at("rejected").get<std::string>();
  const auto& m = j.at("meta");
  r.band = band_from_string(m.at("band").get<std::string>());
  r.confidence_qa = m.at("confidence_qa").get<double>();
  r.pair_index = m.at("pair_index").get<int>();
  r.chosen_level = m.value("chosen_level", 0);
  r.rejected_level = m.value("rejected_level", 0);
  r.duplicate_text = m.value("duplicate_text", false);
  return r;
}

// ---- episodes.jsonl ----

inline json episode_to_json(const Episode& e) {
  return {{"question_id", e.question_id},
          {"scenario", to_string(e.scenario)},
          {"gold", e.gold},
          {"turns",
           {{"q", e.turns.q}, {"v1", e.turns.v1}, {"v2", e.turns.v2}, {"r1", e.turns.r1}, {"r2", e.turns.r2},
            {"r3", e.turns.r3}}},
          {"final_correct", e.final_correct},
          {"parse_failure", e.parse_failure}};
}

inline Episode episode_from_json(const json& j) {
  Episode e;
  e.question_id = j.at("question_id").get<std::string>();
  e.scenario = scenario_from_string(j.at("scenario").get<std::string>());
  e.gold = j.at("gold").get<std::string>();
  const auto& t = j.at("turns");
  e.turns = {t.at("q").get<std::string>(),  t.at("v1").get<std::string>(), t.at("v2").get<std::string>(),
             t.at("r1").get<std::string>(), t.at("r2").get<std::string>(), t.at("r3").get<std::string>()};
  e.final_correct = j.at("final_correct").get<bool>();
  e.parse_failure = j.at("parse_failure").get<bool>();
  return e;
}

// ---- question corpus ----
// {"question_id": str, "question": str, "gold": str, "choices": [str]?,
//  "dataset": str?}

struct CorpusItem {
  std::string question_id;
  std::string question;
  std::string gold;
  std::vector<std::string> choices;
  std::string dataset;
};

inline CorpusItem corpus_item_from_json(const json& j) {
  CorpusItem c;
  c.question_id = j.at("question_id").get<std::string>();
  c.question = j.at("question").get<std::string>();
  c.gold = j.at("gold").get<std::string>();
  if (j.contains("choices")) c.choices = j.at("choices").get<std::vector<std::string>>();
  c.dataset = j.value("dataset", std::string("default"));
  return c;
}

inline json corpus_item_to_json(const CorpusItem& c) {
  return {{"question_id", c.question_id},
          {"question", c.question},
          {"gold", c.gold},
          {"choices", c.choices},
          {"dataset", c.dataset}};
}

inline std::vector<CorpusItem> read_corpus(const fs::path& path) {
  std::vector<CorpusItem> out;
  std::size_t line = 0;
  for (const auto& j : read_jsonl(path)) {
    ++line;
    try {
      out.push_back(corpus_item_from_json(j));
    } catch (const json::exception& e) {
      throw InvalidArgument(path.string() + " record " + std::to_string(line) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace conviction::io
