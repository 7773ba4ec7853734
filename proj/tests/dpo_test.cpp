#include <gtest/gtest.h>

#include <cmath>

#include "conviction/dpo.hpp"
#include "oracles.hpp"

using namespace conviction;

namespace {

ToyPolicy random_policy(Rng& rng, int prompts, int responses) {
  ToyPolicy p;
  for (int i = 0; i < prompts; ++i)
    for (int j = 0; j < responses; ++j)
      p.add_response("p" + std::to_string(i), "r" + std::to_string(j), rng.normal());
  return p;
}

DpoBatch all_ordered_pairs(int prompts, int responses) {
  DpoBatch b;
  for (int i = 0; i < prompts; ++i)
    for (int w = 0; w < responses; ++w)
      for (int l = 0; l < responses; ++l)
        if (w < l) b.push_back({"p" + std::to_string(i), "r" + std::to_string(w), "r" + std::to_string(l)});
  return b;
}

long double oracle_loss(const Policy& pol, const Policy& ref, const DpoBatch& batch, double beta) {
  long double s = 0.0L;
  for (const auto& it : batch) {
    s += oracle::dpo_term(pol.log_prob(it.prompt, it.chosen), pol.log_prob(it.prompt, it.rejected),
                          ref.log_prob(it.prompt, it.chosen), ref.log_prob(it.prompt, it.rejected), beta);
  }
  return s / static_cast<long double>(batch.size());
}

// 50 pairs over 10 prompts; response "good" is always preferred.
DpoBatch consistent_dataset() {
  DpoBatch b;
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 5; ++j) b.push_back({"p" + std::to_string(i), "good", "bad" + std::to_string(j)});
  return b;
}

}  // namespace

TEST(ToyPolicy, NormalizedPerPrompt) {
  Rng rng(1);
  const auto p = random_policy(rng, 3, 4);
  EXPECT_EQ(p.parameter_count(), 12u);
  EXPECT_EQ(p.prompt_count(), 3u);
  for (int i = 0; i < 3; ++i) {
    double total = 0.0;
    for (const auto& r : p.responses("p" + std::to_string(i))) {
      const double lp = p.log_prob("p" + std::to_string(i), r);
      EXPECT_LE(lp, 0.0);
      total += std::exp(lp);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  EXPECT_THROW(p.log_prob("p0", "nope"), InvalidArgument);
  EXPECT_THROW(p.log_prob("nope", "r0"), InvalidArgument);
}

TEST(DpoConfig, Defaults) {
  DpoConfig c;
  EXPECT_DOUBLE_EQ(c.beta, 0.1);
  EXPECT_DOUBLE_EQ(c.learning_rate, 1e-5);
  EXPECT_EQ(c.batch_size, 4);
  EXPECT_EQ(c.epochs, 2);
  EXPECT_EQ(c.lora.r, 8);
  EXPECT_EQ(c.lora.alpha, 16);
  EXPECT_DOUBLE_EQ(c.lora.dropout, 0.05);
  nlohmann::json j = c;
  EXPECT_EQ(j.at("lora").at("r"), 8);
  EXPECT_EQ(j.get<DpoConfig>().beta, 0.1);
  c.beta = 0.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(DpoLoss, LnTwoAtReference) {
  Rng rng(2);
  const auto p = random_policy(rng, 4, 3);
  const auto batch = all_ordered_pairs(4, 3);
  EXPECT_NEAR(dpo_loss(p, p, batch, 0.1), std::log(2.0), 1e-12);
}

TEST(DpoLoss, MatchesTermByTermOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto ref = random_policy(rng, 3, 4);
    const auto pol = random_policy(rng, 3, 4);
    const auto batch = all_ordered_pairs(3, 4);
    for (double beta : {0.05, 0.1, 0.2, 1.0}) {
      EXPECT_NEAR(dpo_loss(pol, ref, batch, beta), static_cast<double>(oracle_loss(pol, ref, batch, beta)), 1e-12);
    }
  }
}

TEST(DpoLoss, DoublingBetaDoublesInnerArgument) {
  Rng rng(4);
  const auto ref = random_policy(rng, 2, 3);
  const auto pol = random_policy(rng, 2, 3);
  for (const auto& item : all_ordered_pairs(2, 3)) {
    const auto t = detail::item_terms(pol, ref, item, 0);
    EXPECT_DOUBLE_EQ(detail::inner_argument(t, 0.2), 2.0 * detail::inner_argument(t, 0.1));
  }
}

TEST(DpoLoss, SaturatesAsMarginGrows) {
  ToyPolicy ref;
  ref.add_response("x", "w");
  ref.add_response("x", "l");
  const DpoBatch batch = {{"x", "w", "l"}};
  double prev = std::log(2.0);
  for (double margin : {1.0, 5.0, 10.0}) {
    ToyPolicy pol = ref;
    pol.set_parameters({margin, 0.0});
    const double loss = dpo_loss(pol, ref, batch, 1.0);
    EXPECT_LT(loss, prev);
    EXPECT_GT(loss, 0.0);
    prev = loss;
  }
  EXPECT_LT(prev, 1e-4);
}

TEST(DpoLoss, Errors) {
  ToyPolicy p;
  p.add_response("x", "a");
  p.add_response("x", "b");
  EXPECT_THROW(dpo_loss(p, p, {}, 0.1), InvalidArgument);
  EXPECT_THROW(dpo_loss(p, p, {{"x", "a", "a"}}, 0.1), InvalidArgument);
  ToyPolicy broken = p;
  broken.set_parameters({std::nan(""), 0.0});
  try {
    dpo_loss(broken, p, {{"x", "a", "b"}, {"x", "b", "a"}}, 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("item 0"), std::string::npos) << e.what();
  }
}

TEST(DpoLoss, InvariantToPerPromptOffsets) {
  Rng rng(5);
  const auto ref = random_policy(rng, 3, 4);
  auto pol = random_policy(rng, 3, 4);
  const auto batch = all_ordered_pairs(3, 4);
  const double base = dpo_loss(pol, ref, batch, 0.3);
  // Adding a constant to every logit of one prompt leaves its softmax and
  // thus both log-probs' difference unchanged.
  for (int trial = 0; trial < 20; ++trial) {
    auto params = pol.parameters();
    const std::size_t prompt = rng.below(3);
    const double offset = rng.normal(0.0, 10.0);
    for (std::size_t k = 0; k < 4; ++k) params[prompt * 4 + k] += offset;
    ToyPolicy shifted = pol;
    shifted.set_parameters(params);
    EXPECT_NEAR(dpo_loss(shifted, ref, batch, 0.3), base, 1e-12);
  }
}

TEST(DpoLoss, StrictlyDecreasingInChosenMargin) {
  ToyPolicy ref;
  ref.add_response("x", "w");
  ref.add_response("x", "l");
  ref.add_response("x", "o");
  const DpoBatch batch = {{"x", "w", "l"}};
  double prev = INFINITY;
  for (double m = -3.0; m <= 3.0; m += 0.5) {
    ToyPolicy pol = ref;
    pol.set_parameters({m, 0.0, 0.7});
    const double loss = dpo_loss(pol, ref, batch, 0.5);
    EXPECT_LT(loss, prev);
    prev = loss;
  }
}

TEST(DpoGradient, MatchesFiniteDifferences) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const auto ref = random_policy(rng, 2, 3);
    const auto pol = random_policy(rng, 2, 3);
    const auto report = dpo_gradient_check(pol, ref, all_ordered_pairs(2, 3), 1.0, 1e-5);
    EXPECT_TRUE(report.passed) << "worst coordinate " << report.worst_coordinate << ": analytic "
                               << report.analytic_at_worst << " numeric " << report.numeric_at_worst;
    EXPECT_LE(report.max_relative_error, 1e-5);
  }
}

TEST(DpoGradient, ZeroAtSymmetricBatch) {
  Rng rng(7);
  const auto p = random_policy(rng, 2, 3);
  DpoBatch batch = all_ordered_pairs(2, 3);
  const auto forward = batch;
  for (const auto& it : forward) batch.push_back({it.prompt, it.rejected, it.chosen});
  const auto report = dpo_gradient_check(p, p, batch, 0.1, 1e-5);
  EXPECT_LE(report.gradient_norm, 1e-8);
}

TEST(DpoGradient, ExactlyZeroAtBetaZero) {
  Rng rng(8);
  const auto ref = random_policy(rng, 2, 3);
  const auto pol = random_policy(rng, 2, 3);
  for (double g : dpo_gradient(pol, ref, all_ordered_pairs(2, 3), 0.0)) EXPECT_EQ(g, 0.0);
}

TEST(DpoGradient, CheckRefusesLargePolicies) {
  Rng rng(9);
  const auto p = random_policy(rng, 11, 10);
  EXPECT_THROW(dpo_gradient_check(p, p, all_ordered_pairs(1, 2), 0.1, 1e-5), InvalidArgument);
}

TEST(TrainDpo, ConsistentPairsHalveTheLoss) {
  const auto data = consistent_dataset();
  const auto initial = toy_policy_for(data);
  DpoConfig cfg;
  cfg.learning_rate = 20.0;
  cfg.epochs = 20;
  const auto run = train_dpo(initial, data, cfg);
  EXPECT_FALSE(run.aborted) << run.abort_reason;
  EXPECT_NEAR(run.initial_loss, std::log(2.0), 1e-12);
  EXPECT_LT(run.final_loss, 0.5 * run.initial_loss);
  EXPECT_GT(run.final_margin, run.initial_margin);
  EXPECT_EQ(run.history.size(), static_cast<std::size_t>(cfg.epochs * 13));  // ceil(50 / 4) steps per epoch
}

TEST(TrainDpo, ReferenceIsUntouched) {
  const auto data = consistent_dataset();
  const auto initial = toy_policy_for(data);
  const auto before = initial.parameters();
  DpoConfig cfg;
  cfg.learning_rate = 5.0;
  const auto run = train_dpo(initial, data, cfg);
  EXPECT_EQ(initial.parameters(), before);
  EXPECT_NE(run.policy.parameters(), before);
}

TEST(TrainDpo, DeterministicGivenSeed) {
  const auto data = consistent_dataset();
  DpoConfig cfg;
  cfg.learning_rate = 1.0;
  const auto a = train_dpo(toy_policy_for(data), data, cfg);
  const auto b = train_dpo(toy_policy_for(data), data, cfg);
  EXPECT_EQ(a.policy.parameters(), b.policy.parameters());
}

TEST(TrainDpo, DivergenceAborts) {
  // Contradictory pairs with a huge step overshoot and blow up the loss.
  DpoBatch data;
  for (int i = 0; i < 8; ++i) data.push_back({"x", i % 2 ? "a" : "b", i % 2 ? "b" : "a"});
  data.push_back({"x", "a", "c"});
  DpoConfig cfg;
  cfg.beta = 1.0;
  cfg.learning_rate = 1e4;
  cfg.batch_size = 1;
  const auto run = train_dpo(toy_policy_for(data), data, cfg);
  EXPECT_TRUE(run.aborted);
  EXPECT_FALSE(run.history.empty());
}

TEST(TrainDpo, EmptyDatasetThrows) {
  EXPECT_THROW(train_dpo(ToyPolicy{}, {}, DpoConfig{}), InvalidArgument);
}
