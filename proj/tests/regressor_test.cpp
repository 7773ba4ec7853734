#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "conviction/regressor.hpp"

using namespace conviction;

namespace {

RegressorConfig tiny_config() {
  RegressorConfig c;
  c.attention_heads = 2;
  c.ffn_width = 8;
  c.mlp_widths = {16, 4, 1};
  c.epochs = 40;
  c.batch_size = 8;
  c.learning_rate = 5e-3;
  return c;
}

std::vector<std::vector<float>> random_set(Rng& rng, int n, int dim) {
  std::vector<std::vector<float>> v(static_cast<std::size_t>(n), std::vector<float>(static_cast<std::size_t>(dim)));
  for (auto& row : v)
    for (auto& x : row) x = static_cast<float>(rng.normal());
  return v;
}

// Target is an affine function of the mean feature vector.
std::vector<TrainingExample> affine_dataset(std::size_t m, int n, int dim, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(static_cast<std::size_t>(dim));
  for (auto& x : w) x = rng.normal(0.0, 0.3);
  std::vector<TrainingExample> data;
  for (std::size_t i = 0; i < m; ++i) {
    TrainingExample ex;
    ex.features = random_set(rng, n, dim);
    double t = 1.0;
    for (int j = 0; j < dim; ++j) {
      double mean = 0.0;
      for (const auto& v : ex.features) mean += v[static_cast<std::size_t>(j)];
      t += w[static_cast<std::size_t>(j)] * mean / n;
    }
    ex.target_se = std::max(t, 0.0);
    data.push_back(std::move(ex));
  }
  return data;
}

RegressorNet::Mat to_mat(const std::vector<std::vector<float>>& f) {
  RegressorNet::Mat x(static_cast<Eigen::Index>(f.size()), static_cast<Eigen::Index>(f.front().size()));
  for (std::size_t i = 0; i < f.size(); ++i)
    for (std::size_t j = 0; j < f[i].size(); ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = f[i][j];
  return x;
}

}  // namespace

TEST(RegressorConfig, Validation) {
  RegressorConfig c;
  EXPECT_EQ(c.mlp_widths, (std::vector<int>{4096, 64, 1}));
  EXPECT_DOUBLE_EQ(c.alpha, 0.7);
  c.mlp_widths = {64, 64, 1};
  EXPECT_THROW(c.validate(), InvalidArgument);
  c.mlp_widths = {64, 8, 2};
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = {};
  c.val_fraction = 1.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(ConfidenceFromSe, Values) {
  EXPECT_DOUBLE_EQ(confidence_from_se(0.0, 0.7), 1.0);
  EXPECT_NEAR(confidence_from_se(0.6730, 0.7), 0.6243, 1e-4);
  EXPECT_NEAR(confidence_from_se(std::log(2.0), 1.0), 0.5, 1e-15);
  EXPECT_THROW(confidence_from_se(-0.1, 0.7), InvalidArgument);
}

TEST(ConfidenceFromSe, MultiplicativeAndDecreasing) {
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.uniform(0, 5), b = rng.uniform(0, 5), alpha = rng.uniform(0.01, 3);
    EXPECT_NEAR(confidence_from_se(a + b, alpha), confidence_from_se(a, alpha) * confidence_from_se(b, alpha), 1e-14);
    const double c = confidence_from_se(a, alpha);
    EXPECT_GT(c, 0.0);
    EXPECT_LE(c, 1.0);
    if (b > 0) {
      EXPECT_LT(confidence_from_se(a + b, alpha), c);
    }
  }
}

TEST(RegressorNet, GradientMatchesCentralDifferences) {
  const int dim = 8;
  RegressorNet net(tiny_config(), dim);
  Rng rng(41);
  net.initialize(rng, 0.7);
  // Perturb everything so biases and LayerNorm parameters are not at trivial values.
  for (auto& p : net.parameters()) p += rng.normal(0.0, 0.05);

  std::vector<RegressorNet::Mat> xs;
  std::vector<double> targets;
  for (int b = 0; b < 3; ++b) {
    xs.push_back(to_mat(random_set(rng, 5, dim)));
    targets.push_back(rng.uniform(0.0, 2.0));
  }
  std::vector<const RegressorNet::Mat*> ptrs;
  for (const auto& x : xs) ptrs.push_back(&x);

  std::vector<double> grad, scratch;
  net.loss_and_gradient(ptrs, targets, grad);

  const double eps = 1e-5;
  double worst = 0.0;
  std::size_t checked = 0;
  auto& params = net.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double saved = params[k];
    params[k] = saved + eps;
    const double up = net.loss_and_gradient(ptrs, targets, scratch);
    params[k] = saved - eps;
    const double down = net.loss_and_gradient(ptrs, targets, scratch);
    params[k] = saved;
    const double numeric = (up - down) / (2 * eps);
    const double scale = std::max(std::abs(numeric), std::abs(grad[k]));
    if (scale < 1e-7) continue;  // both effectively zero
    worst = std::max(worst, std::abs(numeric - grad[k]) / std::max(scale, 1e-5));
    ++checked;
  }
  EXPECT_GT(checked, params.size() / 2);
  EXPECT_LT(worst, 1e-4);
}

TEST(Regressor, MeanPoolingIsPermutationInvariant) {
  auto data = affine_dataset(40, 6, 8, 3);
  auto cfg = tiny_config();
  cfg.epochs = 3;
  const auto model = train_regressor(data, cfg);
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    auto f = random_set(rng, 7, 8);
    const double base = predict_se(model, f);
    rng.shuffle(f);
    EXPECT_NEAR(predict_se(model, f), base, 1e-6);
  }
}

TEST(Regressor, OutputIsNonnegative) {
  EXPECT_GE(softplus(-2.3), 0.0);
  auto data = affine_dataset(20, 4, 8, 5);
  for (auto& ex : data) ex.target_se = 0.0;
  auto cfg = tiny_config();
  cfg.epochs = 5;
  const auto model = train_regressor(data, cfg);
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    auto f = random_set(rng, 4, 8);
    for (auto& v : f)
      for (auto& x : v) x *= 10.0f;
    EXPECT_GE(predict_se(model, f), 0.0);
  }
}

TEST(Regressor, FitsConstantTarget) {
  auto data = affine_dataset(60, 5, 8, 6);
  for (auto& ex : data) ex.target_se = 0.5;
  const auto model = train_regressor(data, tiny_config());
  Rng rng(99);
  for (int i = 0; i < 20; ++i) EXPECT_NEAR(predict_se(model, random_set(rng, 5, 8)), 0.5, 0.05);
}

TEST(Regressor, LearnsAffineTargetWithFewUpticks) {
  const auto data = affine_dataset(200, 6, 8, 12);
  auto cfg = tiny_config();
  cfg.epochs = 60;
  const auto model = train_regressor(data, cfg);
  EXPECT_LT(model.val_mse, 0.05);
  const auto& h = model.train_mse_history;
  ASSERT_EQ(h.size(), 60u);
  int upticks = 0;
  for (std::size_t i = 1; i < h.size(); ++i) upticks += h[i] > h[i - 1];
  EXPECT_LE(upticks, static_cast<int>(0.05 * static_cast<double>(h.size() - 1)) + 1)
      << "epoch-to-epoch increases in training MSE";
  EXPECT_LT(h.back(), h.front());
}

TEST(Regressor, TrainingIsDeterministic) {
  const auto data = affine_dataset(30, 4, 8, 4);
  auto cfg = tiny_config();
  cfg.epochs = 4;
  const auto a = train_regressor(data, cfg);
  const auto b = train_regressor(data, cfg);
  EXPECT_EQ(a.parameters, b.parameters);
  EXPECT_EQ(a.val_mse, b.val_mse);
}

TEST(Regressor, SingleExampleFallsBackWithNote) {
  const auto data = affine_dataset(1, 3, 8, 4);
  auto cfg = tiny_config();
  cfg.epochs = 2;
  const auto model = train_regressor(data, cfg);
  ASSERT_FALSE(model.notes.empty());
  EXPECT_NE(model.notes.front().find("one example"), std::string::npos);
}

TEST(Regressor, DimensionMismatchNamesExample) {
  auto data = affine_dataset(5, 3, 8, 4);
  data[3].features[1].resize(7);
  try {
    train_regressor(data, tiny_config());
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("example 3"), std::string::npos) << e.what();
  }
  const auto model = train_regressor(affine_dataset(5, 3, 8, 4), [] {
    auto c = tiny_config();
    c.epochs = 1;
    return c;
  }());
  EXPECT_THROW(predict_se(model, {std::vector<float>(6, 0.f)}), InvalidArgument);
}

TEST(Regressor, DivergenceIsReported) {
  auto data = affine_dataset(20, 3, 8, 4);
  auto cfg = tiny_config();
  cfg.learning_rate = 1e300;
  cfg.grad_clip = 0.0;
  cfg.momentum = 0.0;
  EXPECT_THROW(train_regressor(data, cfg), TrainingError);
}

TEST(RegressorFile, RoundTripPredictsIdentically) {
  const auto data = affine_dataset(30, 4, 8, 9);
  auto cfg = tiny_config();
  cfg.epochs = 3;
  const auto model = train_regressor(data, cfg);
  const auto bytes = regressor_file::serialize(model);
  EXPECT_EQ(bytes.substr(0, 8), "CNVCTREG");
  const auto back = regressor_file::deserialize(bytes);
  EXPECT_EQ(back.parameters, model.parameters);
  EXPECT_EQ(back.feature_mean, model.feature_mean);
  EXPECT_EQ(back.val_mse, model.val_mse);
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    const auto f = random_set(rng, 4, 8);
    EXPECT_EQ(predict_se(back, f), predict_se(model, f));
  }
  EXPECT_THROW(regressor_file::deserialize(bytes.substr(0, bytes.size() - 1)), Error);
  EXPECT_THROW(regressor_file::deserialize("garbage-garbage-garbage"), Error);
}
