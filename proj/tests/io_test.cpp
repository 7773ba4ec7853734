#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "conviction/io.hpp"
#include "conviction/mock_backend.hpp"

using namespace conviction;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("conviction_io_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Base64, KnownVectors) {
  EXPECT_EQ(io::base64_encode(""), "");
  EXPECT_EQ(io::base64_encode("f"), "Zg==");
  EXPECT_EQ(io::base64_encode("fo"), "Zm8=");
  EXPECT_EQ(io::base64_encode("foo"), "Zm9v");
  EXPECT_EQ(io::base64_encode("foobar"), "Zm9vYmFy");
  EXPECT_EQ(io::base64_decode("Zm8="), "fo");
  EXPECT_THROW(io::base64_decode("abc"), InvalidArgument);
  EXPECT_THROW(io::base64_decode("a!c="), InvalidArgument);
}

TEST(Base64, RoundTripsArbitraryBytes) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::string s(rng.below(40), '\0');
    for (auto& c : s) c = static_cast<char>(rng.below(256));
    EXPECT_EQ(io::base64_decode(io::base64_encode(s)), s);
  }
}

TEST(Floats, LittleEndianAndExact) {
  const auto bytes = io::floats_to_bytes({1.0f});
  EXPECT_EQ(bytes, std::string("\x00\x00\x80\x3f", 4));
  const std::vector<float> v = {0.0f, -0.0f, 1.5f, -3.25e-7f, std::numeric_limits<float>::max(),
                                std::numeric_limits<float>::denorm_min(), INFINITY};
  const auto back = io::bytes_to_floats(io::floats_to_bytes(v));
  ASSERT_EQ(back.size(), v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    EXPECT_EQ(std::bit_cast<std::uint32_t>(back[i]), std::bit_cast<std::uint32_t>(v[i]));
  }
  EXPECT_THROW(io::bytes_to_floats("abc"), InvalidArgument);
}

TEST(WriteAtomic, ReplacesContentAndLeavesNoTemp) {
  const auto dir = scratch_dir("atomic");
  const auto path = dir / "sub" / "out.txt";
  io::write_atomic(path, "first");
  io::write_atomic(path, "second");
  EXPECT_EQ(io::read_file(path), "second");
  EXPECT_FALSE(fs::exists(dir / "sub" / "out.txt.tmp"));
  EXPECT_THROW(io::read_file(dir / "missing"), Error);
  fs::remove_all(dir);
}

TEST(Sha256, KnownDigests) {
  EXPECT_EQ(io::sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(io::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Jsonl, SkipsBlankLinesAndNamesBadLine) {
  const auto rows = io::parse_jsonl("{\"a\":1}\n\n  \n{\"a\":2}\n");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].at("a"), 2);
  try {
    io::parse_jsonl("{\"a\":1}\n\n{oops}\n", "prefs.jsonl");
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("prefs.jsonl line 3"), std::string::npos) << e.what();
  }
  EXPECT_EQ(io::parse_jsonl(io::to_jsonl(rows)), rows);
}

TEST(SampleSets, RoundTripInBothFeatureEncodings) {
  MockConfig cfg;
  cfg.feature_dim = 6;
  cfg.table["q"] = {{"The answer is A.", 0.7}, {"The answer is B.", 0.3}};
  MockBackend m(cfg);
  const auto s = sample_responses(m, "id", "q", 5, {});
  for (bool compact : {false, true}) {
    const auto j = nlohmann::json::parse(io::sample_set_to_json(s, compact).dump());
    EXPECT_EQ(j.at("records").at(0).at("feature").is_string(), compact);
    const auto back = io::sample_set_from_json(j);
    ASSERT_EQ(back.records.size(), s.records.size());
    for (std::size_t i = 0; i < s.records.size(); ++i) {
      EXPECT_EQ(back.records[i].feature, s.records[i].feature);
      EXPECT_EQ(back.records[i].token_logprobs, s.records[i].token_logprobs);
      EXPECT_EQ(back.records[i].text, s.records[i].text);
    }
    EXPECT_EQ(back.decoding.seed, s.decoding.seed);
  }
  auto j = io::sample_set_to_json(s);
  j["records"][0]["token_ids"].push_back(1);
  EXPECT_THROW(io::sample_set_from_json(j), InvalidArgument);
}

TEST(Estimates, MissingValuesSurvive) {
  EstimatorResult r;
  r.estimator = EstimatorKind::verbalized;
  r.missing = true;
  r.value = std::nan("");
  const auto j = io::estimate_to_json("q1", r);
  EXPECT_TRUE(j.at("value").is_null());
  const auto back = io::estimate_from_json(j);
  EXPECT_TRUE(back.result.missing);
  EXPECT_FALSE(back.result.confidence);
}

TEST(Corpus, RecordErrorsNameTheRecord) {
  const auto dir = scratch_dir("corpus");
  io::write_atomic(dir / "c.jsonl", "{\"question_id\":\"a\",\"question\":\"x\",\"gold\":\"1\"}\n{\"question_id\":\"b\"}\n");
  try {
    io::read_corpus(dir / "c.jsonl");
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("record 2"), std::string::npos) << e.what();
  }
  io::write_atomic(dir / "c.jsonl", "{\"question_id\":\"a\",\"question\":\"x\",\"gold\":\"1\"}\n");
  const auto items = io::read_corpus(dir / "c.jsonl");
  ASSERT_EQ(items.size(), 1u);
  EXPECT_EQ(items[0].dataset, "default");
  fs::remove_all(dir);
}
