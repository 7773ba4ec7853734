#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "conviction/common.hpp"

namespace conviction {

enum class Pooling { mean, last };

struct RegressorConfig {
  int encoder_layers = 1;
  int attention_heads = 4;
  int ffn_width = 64;
  std::vector<int> mlp_widths = {4096, 64, 1};
  Pooling pooling = Pooling::mean;
  double learning_rate = 2e-3;
  double momentum = 0.9;
  int epochs = 60;
  int batch_size = 16;
  double val_fraction = 0.2;
  double grad_clip = 5.0;  // global-norm clip, 0 disables
  std::uint64_t seed = 0;
  double alpha = 0.7;

  void validate() const {
    if (encoder_layers < 0) throw InvalidArgument("encoder_layers must be >= 0");
    if (attention_heads < 1) throw InvalidArgument("attention_heads must be >= 1");
    if (ffn_width < 1) throw InvalidArgument("ffn_width must be >= 1");
    if (mlp_widths.empty() || mlp_widths.back() != 1) {
      throw InvalidArgument("mlp_widths must end with a width of 1");
    }
    for (std::size_t i = 1; i < mlp_widths.size(); ++i) {
      if (mlp_widths[i] >= mlp_widths[i - 1]) {
        throw InvalidArgument("mlp_widths must be strictly decreasing");
      }
    }
    if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must be in [0, 1)");
    if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
    if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
      throw InvalidArgument("val_fraction must be in (0, 1)");
    }
    if (!(alpha > 0.0)) throw InvalidArgument("alpha must be positive");
  }
};

inline void to_json(nlohmann::json& j, const RegressorConfig& c) {
  j = nlohmann::json{{"encoder_layers", c.encoder_layers},
                     {"attention_heads", c.attention_heads},
                     {"ffn_width", c.ffn_width},
                     {"mlp_widths", c.mlp_widths},
                     {"pooling", c.pooling == Pooling::mean ? "mean" : "last"},
                     {"learning_rate", c.learning_rate},
                     {"momentum", c.momentum},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"val_fraction", c.val_fraction},
                     {"grad_clip", c.grad_clip},
                     {"seed", c.seed},
                     {"alpha", c.alpha}};
}

inline void from_json(const nlohmann::json& j, RegressorConfig& c) {
  RegressorConfig d;
  c.encoder_layers = j.value("encoder_layers", d.encoder_layers);
  c.attention_heads = j.value("attention_heads", d.attention_heads);
  c.ffn_width = j.value("ffn_width", d.ffn_width);
  c.mlp_widths = j.value("mlp_widths", d.mlp_widths);
  const std::string pooling = j.value("pooling", std::string("mean"));
  if (pooling != "mean" && pooling != "last") throw InvalidArgument("pooling must be mean or last");
  c.pooling = pooling == "mean" ? Pooling::mean : Pooling::last;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.momentum = j.value("momentum", d.momentum);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.val_fraction = j.value("val_fraction", d.val_fraction);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.seed = j.value("seed", d.seed);
  c.alpha = j.value("alpha", d.alpha);
}

struct TrainingExample {
  std::vector<std::vector<float>> features;  // n vectors of feature_dim
  double target_se = 0.0;
};

// One-layer (configurable) transformer encoder over the n feature vectors,
// pooled, followed by an MLP and a softplus output map. Parameters live in one
// flat vector; the layout is fixed by (config, feature_dim).
//
// Encoder block (pre-LayerNorm, no positional encoding, so the block is
// permutation-equivariant):
//   H = X + MHA(LN1(X))
//   Y = H + W2 relu(W1 LN2(H) + b1) + b2
class RegressorNet {
 public:
  using Mat = Eigen::MatrixXd;
  using Vec = Eigen::VectorXd;
  using RowVec = Eigen::RowVectorXd;

  static constexpr double kLayerNormEps = 1e-5;

  RegressorNet(RegressorConfig config, int feature_dim)
      : config_(std::move(config)), d_(feature_dim) {
    config_.validate();
    if (d_ < 1) throw InvalidArgument("feature_dim must be positive");
    if (d_ % config_.attention_heads != 0) {
      throw InvalidArgument("feature_dim " + std::to_string(d_) +
                            " is not divisible by attention_heads " +
                            std::to_string(config_.attention_heads));
    }
    std::size_t off = 0;
    auto take = [&off](int rows, int cols) {
      Block b{off, rows, cols};
      off += static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
      return b;
    };
    const int f = config_.ffn_width;
    for (int l = 0; l < config_.encoder_layers; ++l) {
      EncoderLayout e;
      e.ln1_g = take(d_, 1);
      e.ln1_b = take(d_, 1);
      e.wq = take(d_, d_);
      e.bq = take(d_, 1);
      e.wk = take(d_, d_);
      e.bk = take(d_, 1);
      e.wv = take(d_, d_);
      e.bv = take(d_, 1);
      e.wo = take(d_, d_);
      e.bo = take(d_, 1);
      e.ln2_g = take(d_, 1);
      e.ln2_b = take(d_, 1);
      e.w1 = take(f, d_);
      e.b1 = take(f, 1);
      e.w2 = take(d_, f);
      e.b2 = take(d_, 1);
      encoder_.push_back(e);
    }
    int in = d_;
    for (int w : config_.mlp_widths) {
      mlp_.push_back({take(w, in), take(w, 1)});
      in = w;
    }
    params_.assign(off, 0.0);
  }

  const RegressorConfig& config() const noexcept { return config_; }
  int feature_dim() const noexcept { return d_; }
  std::size_t parameter_count() const noexcept { return params_.size(); }
  std::vector<double>& parameters() noexcept { return params_; }
  const std::vector<double>& parameters() const noexcept { return params_; }

  // Scaled Gaussian weights, unit LayerNorm gains, zero biases; the output
  // bias starts at softplus^-1(target_mean).
  void initialize(Rng& rng, double target_mean) {
    std::fill(params_.begin(), params_.end(), 0.0);
    auto gauss = [&](const Block& b, double stddev) {
      for (std::size_t i = 0; i < b.size(); ++i) params_[b.offset + i] = rng.normal(0.0, stddev);
    };
    auto ones = [&](const Block& b) {
      for (std::size_t i = 0; i < b.size(); ++i) params_[b.offset + i] = 1.0;
    };
    const double attn = 1.0 / std::sqrt(static_cast<double>(d_));
    for (const auto& e : encoder_) {
      ones(e.ln1_g);
      ones(e.ln2_g);
      gauss(e.wq, attn);
      gauss(e.wk, attn);
      gauss(e.wv, attn);
      gauss(e.wo, 0.5 * attn);
      gauss(e.w1, std::sqrt(2.0 / d_));
      gauss(e.w2, 0.5 / std::sqrt(static_cast<double>(config_.ffn_width)));
    }
    // The output layer starts at zero so the first prediction is the target mean.
    for (std::size_t k = 0; k + 1 < mlp_.size(); ++k) {
      gauss(mlp_[k].w, std::sqrt(2.0 / mlp_[k].w.cols));
    }
    const double t = std::max(target_mean, 1e-3);
    params_[mlp_.back().b.offset] = t > 30.0 ? t : std::log(std::expm1(t));
  }

  // Pre-softplus output for one standardized example (n x d).
  double pre_activation(const Mat& x) const {
    Mat y = x;
    for (const auto& e : encoder_) y = encoder_forward(e, y, nullptr);
    Vec a = pool(y);
    for (std::size_t k = 0; k < mlp_.size(); ++k) {
      Vec z = cmap(mlp_[k].w) * a + cvec(mlp_[k].b);
      a = k + 1 == mlp_.size() ? z : Vec(z.cwiseMax(0.0));
    }
    return a(0);
  }

  double predict(const Mat& x) const { return softplus(pre_activation(x)); }

  // Mean squared error over the batch; `grad` receives its gradient.
  double loss_and_gradient(std::span<const Mat* const> xs, std::span<const double> targets,
                           std::vector<double>& grad) const {
    const auto batch = static_cast<Eigen::Index>(xs.size());
    grad.assign(params_.size(), 0.0);
    std::vector<std::vector<LayerCache>> caches(xs.size());
    std::vector<Mat> outputs(xs.size());
    Mat pooled(d_, batch);
    for (Eigen::Index b = 0; b < batch; ++b) {
      Mat y = *xs[static_cast<std::size_t>(b)];
      auto& cache = caches[static_cast<std::size_t>(b)];
      cache.resize(encoder_.size());
      for (std::size_t l = 0; l < encoder_.size(); ++l) {
        y = encoder_forward(encoder_[l], y, &cache[l]);
      }
      pooled.col(b) = pool(y);
      outputs[static_cast<std::size_t>(b)] = std::move(y);
    }

    std::vector<Mat> zs, as;
    as.push_back(pooled);
    for (std::size_t k = 0; k < mlp_.size(); ++k) {
      Mat z = cmap(mlp_[k].w) * as.back();
      z.colwise() += cvec(mlp_[k].b);
      zs.push_back(z);
      as.push_back(k + 1 == mlp_.size() ? z : Mat(z.cwiseMax(0.0)));
    }

    double loss = 0.0;
    Mat dz(1, batch);
    for (Eigen::Index b = 0; b < batch; ++b) {
      const double pre = zs.back()(0, b);
      const double out = softplus(pre);
      const double diff = out - targets[static_cast<std::size_t>(b)];
      loss += diff * diff;
      dz(0, b) = 2.0 * diff / static_cast<double>(batch) * sigmoid(pre);
    }
    loss /= static_cast<double>(batch);

    for (std::size_t k = mlp_.size(); k-- > 0;) {
      map(grad, mlp_[k].w) += dz * as[k].transpose();
      vmap(grad, mlp_[k].b) += dz.rowwise().sum();
      Mat da = cmap(mlp_[k].w).transpose() * dz;
      if (k > 0) {
        dz = da.cwiseProduct((zs[k - 1].array() > 0.0).matrix().cast<double>());
      } else {
        dz = std::move(da);
      }
    }
    // dz now holds d loss / d pooled (d x batch).
    for (Eigen::Index b = 0; b < batch; ++b) {
      const auto& y = outputs[static_cast<std::size_t>(b)];
      const auto n = y.rows();
      Mat dy = Mat::Zero(n, d_);
      if (config_.pooling == Pooling::mean) {
        dy.rowwise() = dz.col(b).transpose() / static_cast<double>(n);
      } else {
        dy.row(n - 1) = dz.col(b).transpose();
      }
      auto& cache = caches[static_cast<std::size_t>(b)];
      for (std::size_t l = encoder_.size(); l-- > 0;) {
        dy = encoder_backward(encoder_[l], cache[l], dy, grad);
      }
    }
    return loss;
  }

 private:
  struct Block {
    std::size_t offset;
    int rows;
    int cols;
    std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
  };
  struct EncoderLayout {
    Block ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  struct DenseLayout {
    Block w, b;
  };
  struct LayerNormCache {
    Mat xhat;
    Vec rstd;
  };
  struct LayerCache {
    Mat x, u, q, k, v, o, h, u2, z1, r;
    std::vector<Mat> p;  // attention weights per head
    LayerNormCache ln1, ln2;
  };

  Eigen::Map<const Mat> cmap(const Block& b) const {
    return {params_.data() + b.offset, b.rows, b.cols};
  }
  Eigen::Map<const Vec> cvec(const Block& b) const { return {params_.data() + b.offset, b.rows}; }
  static Eigen::Map<Mat> map(std::vector<double>& g, const Block& b) {
    return {g.data() + b.offset, b.rows, b.cols};
  }
  static Eigen::Map<Vec> vmap(std::vector<double>& g, const Block& b) {
    return {g.data() + b.offset, b.rows};
  }

  Vec pool(const Mat& y) const {
    if (config_.pooling == Pooling::mean) return y.colwise().mean().transpose();
    return y.row(y.rows() - 1).transpose();
  }

  Mat layer_norm(const Mat& x, const Block& g, const Block& b, LayerNormCache* cache) const {
    const Vec mu = x.rowwise().mean();
    Mat centered = x.colwise() - mu;
    const Vec var = centered.array().square().rowwise().mean();
    const Vec rstd = (var.array() + kLayerNormEps).rsqrt();
    Mat xhat = centered.array().colwise() * rstd.array();
    Mat y = xhat.array().rowwise() * cvec(g).transpose().array();
    y.rowwise() += cvec(b).transpose();
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->rstd = rstd;
    }
    return y;
  }

  Mat layer_norm_backward(const Mat& dy, const LayerNormCache& c, const Block& g, const Block& b,
                          std::vector<double>& grad) const {
    vmap(grad, g) += dy.cwiseProduct(c.xhat).colwise().sum().transpose();
    vmap(grad, b) += dy.colwise().sum().transpose();
    const Mat dxhat = dy.array().rowwise() * cvec(g).transpose().array();
    const Vec mean_dxhat = dxhat.rowwise().mean();
    const Vec mean_dxhat_xhat = dxhat.cwiseProduct(c.xhat).rowwise().mean();
    Mat dx = dxhat.colwise() - mean_dxhat;
    dx -= (c.xhat.array().colwise() * mean_dxhat_xhat.array()).matrix();
    return dx.array().colwise() * c.rstd.array();
  }

  Mat encoder_forward(const EncoderLayout& e, const Mat& x, LayerCache* cache) const {
    LayerNormCache ln1, ln2;
    Mat u = layer_norm(x, e.ln1_g, e.ln1_b, cache ? &ln1 : nullptr);
    Mat q = u * cmap(e.wq).transpose();
    q.rowwise() += cvec(e.bq).transpose();
    Mat k = u * cmap(e.wk).transpose();
    k.rowwise() += cvec(e.bk).transpose();
    Mat v = u * cmap(e.wv).transpose();
    v.rowwise() += cvec(e.bv).transpose();

    const int heads = config_.attention_heads;
    const int dh = d_ / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto n = x.rows();
    Mat o(n, d_);
    std::vector<Mat> ps;
    for (int h = 0; h < heads; ++h) {
      Mat s = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() * scale;
      const Vec smax = s.rowwise().maxCoeff();
      Mat p = (s.colwise() - smax).array().exp();
      const Vec denom = p.rowwise().sum();
      p = p.array().colwise() / denom.array();
      o.middleCols(h * dh, dh) = p * v.middleCols(h * dh, dh);
      if (cache) ps.push_back(std::move(p));
    }
    Mat a = o * cmap(e.wo).transpose();
    a.rowwise() += cvec(e.bo).transpose();
    Mat h = x + a;

    Mat u2 = layer_norm(h, e.ln2_g, e.ln2_b, cache ? &ln2 : nullptr);
    Mat z1 = u2 * cmap(e.w1).transpose();
    z1.rowwise() += cvec(e.b1).transpose();
    Mat r = z1.cwiseMax(0.0);
    Mat f = r * cmap(e.w2).transpose();
    f.rowwise() += cvec(e.b2).transpose();
    Mat y = h + f;

    if (cache) {
      cache->x = x;
      cache->u = std::move(u);
      cache->q = std::move(q);
      cache->k = std::move(k);
      cache->v = std::move(v);
      cache->o = std::move(o);
      cache->h = std::move(h);
      cache->u2 = std::move(u2);
      cache->z1 = std::move(z1);
      cache->r = std::move(r);
      cache->p = std::move(ps);
      cache->ln1 = std::move(ln1);
      cache->ln2 = std::move(ln2);
    }
    return y;
  }

  Mat encoder_backward(const EncoderLayout& e, const LayerCache& c, const Mat& dy,
                       std::vector<double>& grad) const {
    // Feed-forward branch.
    const Mat& df = dy;
    map(grad, e.w2) += df.transpose() * c.r;
    vmap(grad, e.b2) += df.colwise().sum().transpose();
    Mat dz1 = (df * cmap(e.w2)).cwiseProduct((c.z1.array() > 0.0).matrix().cast<double>());
    map(grad, e.w1) += dz1.transpose() * c.u2;
    vmap(grad, e.b1) += dz1.colwise().sum().transpose();
    const Mat du2 = dz1 * cmap(e.w1);
    Mat dh = dy + layer_norm_backward(du2, c.ln2, e.ln2_g, e.ln2_b, grad);

    // Attention branch.
    const Mat& da = dh;
    map(grad, e.wo) += da.transpose() * c.o;
    vmap(grad, e.bo) += da.colwise().sum().transpose();
    const Mat dout = da * cmap(e.wo);

    const int heads = config_.attention_heads;
    const int dh_ = d_ / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh_));
    const auto n = c.x.rows();
    Mat dq(n, d_), dk(n, d_), dv(n, d_);
    for (int h = 0; h < heads; ++h) {
      const Mat& p = c.p[static_cast<std::size_t>(h)];
      const Mat doh = dout.middleCols(h * dh_, dh_);
      const Mat dp = doh * c.v.middleCols(h * dh_, dh_).transpose();
      dv.middleCols(h * dh_, dh_) = p.transpose() * doh;
      const Vec row_dot = dp.cwiseProduct(p).rowwise().sum();
      Mat ds = p.cwiseProduct(dp.colwise() - row_dot) * scale;
      dq.middleCols(h * dh_, dh_) = ds * c.k.middleCols(h * dh_, dh_);
      dk.middleCols(h * dh_, dh_) = ds.transpose() * c.q.middleCols(h * dh_, dh_);
    }
    map(grad, e.wq) += dq.transpose() * c.u;
    vmap(grad, e.bq) += dq.colwise().sum().transpose();
    map(grad, e.wk) += dk.transpose() * c.u;
    vmap(grad, e.bk) += dk.colwise().sum().transpose();
    map(grad, e.wv) += dv.transpose() * c.u;
    vmap(grad, e.bv) += dv.colwise().sum().transpose();
    const Mat du = dq * cmap(e.wq) + dk * cmap(e.wk) + dv * cmap(e.wv);
    return dh + layer_norm_backward(du, c.ln1, e.ln1_g, e.ln1_b, grad);
  }

  RegressorConfig config_;
  int d_;
  std::vector<EncoderLayout> encoder_;
  std::vector<DenseLayout> mlp_;
  std::vector<double> params_;
};

// Trained map from a set of feature vectors to predicted semantic entropy.
// Immutable after training; prediction is safe for concurrent callers.
struct RegressorModel {
  RegressorConfig config;
  int feature_dim = 0;
  std::vector<double> feature_mean;
  std::vector<double> feature_std;
  std::vector<double> parameters;  // values representable as float32
  double val_mse = 0.0;
  std::vector<double> train_mse_history;  // full training-split MSE per epoch
  std::vector<std::string> notes;
};

namespace detail {

inline RegressorNet::Mat standardized(const RegressorModel& model,
                                      const std::vector<std::vector<float>>& features) {
  if (features.empty()) throw InvalidArgument("regressor needs at least one feature vector");
  RegressorNet::Mat x(static_cast<Eigen::Index>(features.size()), model.feature_dim);
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].size() != static_cast<std::size_t>(model.feature_dim)) {
      throw InvalidArgument("feature vector " + std::to_string(i) + " has dimension " +
                            std::to_string(features[i].size()) + ", model expects " +
                            std::to_string(model.feature_dim));
    }
    for (int j = 0; j < model.feature_dim; ++j) {
      const auto ju = static_cast<std::size_t>(j);
      x(static_cast<Eigen::Index>(i), j) =
          (static_cast<double>(features[i][ju]) - model.feature_mean[ju]) / model.feature_std[ju];
    }
  }
  return x;
}

inline RegressorNet make_net(const RegressorModel& model) {
  RegressorNet net(model.config, model.feature_dim);
  if (net.parameter_count() != model.parameters.size()) {
    throw Error("regressor parameter count does not match its configuration");
  }
  net.parameters() = model.parameters;
  return net;
}

}  // namespace detail

inline double predict_pre_activation(const RegressorModel& model,
                                     const std::vector<std::vector<float>>& features) {
  return detail::make_net(model).pre_activation(detail::standardized(model, features));
}

// Predicted semantic entropy, always >= 0 (softplus output map).
inline double predict_se(const RegressorModel& model, const std::vector<std::vector<float>>& features) {
  return softplus(predict_pre_activation(model, features));
}

// exp(-alpha * se), in (0, 1] for se >= 0.
inline double confidence_from_se(double se, double alpha) {
  if (!(se >= 0.0)) throw InvalidArgument("semantic entropy must be nonnegative");
  if (!(alpha > 0.0)) throw InvalidArgument("alpha must be positive");
  return std::exp(-alpha * se);
}

// Trains the regressor. The validation split is a seeded shuffle; with a
// single example both splits fall back to that example (recorded in notes).
inline RegressorModel train_regressor(const std::vector<TrainingExample>& dataset,
                                      const RegressorConfig& config) {
  config.validate();
  if (dataset.empty()) throw InvalidArgument("regressor training set is empty");
  const std::size_t dim = dataset.front().features.empty() ? 0 : dataset.front().features.front().size();
  if (dim == 0) throw InvalidArgument("example 0 has no feature vectors");
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset[i].features.empty()) {
      throw InvalidArgument("example " + std::to_string(i) + " has no feature vectors");
    }
    for (const auto& v : dataset[i].features) {
      if (v.size() != dim) {
        throw InvalidArgument("example " + std::to_string(i) + " has feature dimension " +
                              std::to_string(v.size()) + ", expected " + std::to_string(dim));
      }
    }
    if (!(dataset[i].target_se >= 0.0) || !std::isfinite(dataset[i].target_se)) {
      throw InvalidArgument("example " + std::to_string(i) + " has an invalid target");
    }
  }

  RegressorModel model;
  model.config = config;
  model.feature_dim = static_cast<int>(dim);

  Rng rng(config.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::vector<std::size_t> train_idx, val_idx;
  if (dataset.size() < 2) {
    train_idx = order;
    val_idx = order;
    model.notes.push_back("dataset has one example; validation uses the training example");
  } else {
    auto n_val = static_cast<std::size_t>(std::lround(config.val_fraction * static_cast<double>(dataset.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, dataset.size() - 1);
    val_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  }

  // Standardization statistics from the training split.
  model.feature_mean.assign(dim, 0.0);
  model.feature_std.assign(dim, 0.0);
  std::size_t count = 0;
  for (auto i : train_idx) {
    for (const auto& v : dataset[i].features) {
      for (std::size_t j = 0; j < dim; ++j) model.feature_mean[j] += v[j];
      ++count;
    }
  }
  for (auto& m : model.feature_mean) m /= static_cast<double>(count);
  for (auto i : train_idx) {
    for (const auto& v : dataset[i].features) {
      for (std::size_t j = 0; j < dim; ++j) {
        const double c = v[j] - model.feature_mean[j];
        model.feature_std[j] += c * c;
      }
    }
  }
  for (auto& s : model.feature_std) {
    s = std::sqrt(s / static_cast<double>(count));
    if (s < 1e-8) s = 1.0;
  }

  std::vector<RegressorNet::Mat> xs;
  xs.reserve(dataset.size());
  for (const auto& ex : dataset) xs.push_back(detail::standardized(model, ex.features));

  double target_mean = 0.0;
  for (auto i : train_idx) target_mean += dataset[i].target_se;
  target_mean /= static_cast<double>(train_idx.size());

  RegressorNet net(config, static_cast<int>(dim));
  net.initialize(rng, target_mean);
  auto& params = net.parameters();
  std::vector<double> velocity(params.size(), 0.0), grad;

  auto split_mse = [&](const std::vector<std::size_t>& idx) {
    double s = 0.0;
    for (auto i : idx) {
      const double diff = net.predict(xs[i]) - dataset[i].target_se;
      s += diff * diff;
    }
    return s / static_cast<double>(idx.size());
  };

  const auto batch_size = static_cast<std::size_t>(config.batch_size);
  std::vector<const RegressorNet::Mat*> batch_x;
  std::vector<double> batch_t;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    // Cosine decay over the run; late epochs take small steps, which keeps
    // the epoch-level training loss from bouncing.
    const double lr = config.learning_rate * 0.5 *
                      (1.0 + std::cos(std::numbers::pi * epoch / static_cast<double>(config.epochs)));
    rng.shuffle(train_idx);
    for (std::size_t start = 0; start < train_idx.size(); start += batch_size) {
      const std::size_t end = std::min(start + batch_size, train_idx.size());
      batch_x.clear();
      batch_t.clear();
      for (std::size_t k = start; k < end; ++k) {
        batch_x.push_back(&xs[train_idx[k]]);
        batch_t.push_back(dataset[train_idx[k]].target_se);
      }
      const double loss = net.loss_and_gradient(batch_x, batch_t, grad);
      if (!std::isfinite(loss)) {
        throw TrainingError("regressor loss became non-finite at epoch " + std::to_string(epoch) +
                            ", batch starting at " + std::to_string(start) +
                            "; try a smaller learning_rate (currently " +
                            std::to_string(config.learning_rate) + ")");
      }
      double norm2 = 0.0;
      for (double g : grad) norm2 += g * g;
      double scale = 1.0;
      if (config.grad_clip > 0.0 && norm2 > config.grad_clip * config.grad_clip) {
        scale = config.grad_clip / std::sqrt(norm2);
      }
      for (std::size_t p = 0; p < params.size(); ++p) {
        velocity[p] = config.momentum * velocity[p] - lr * scale * grad[p];
        params[p] += velocity[p];
      }
    }
    const double train_mse = split_mse(train_idx);
    if (!std::isfinite(train_mse)) {
      throw TrainingError("regressor training MSE became non-finite after epoch " + std::to_string(epoch));
    }
    model.train_mse_history.push_back(train_mse);
  }

  // The persisted parameter block is float32; round now so the in-memory
  // model predicts exactly what a reloaded one does.
  for (auto& p : params) p = static_cast<double>(static_cast<float>(p));
  model.parameters = params;
  model.val_mse = split_mse(val_idx);
  return model;
}

// Model file: 8-byte magic "CNVCTREG", uint32 LE format version, uint32 LE
// header length, UTF-8 JSON header {feature_dim, config, feature_mean,
// feature_std, val_mse, param_count}, then param_count little-endian float32.
namespace regressor_file {

inline constexpr char kMagic[8] = {'C', 'N', 'V', 'C', 'T', 'R', 'E', 'G'};
inline constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xffu);
}

inline std::uint32_t get_u32(const std::string& in, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)])) << (8 * i);
  }
  return v;
}

inline std::string serialize(const RegressorModel& model) {
  nlohmann::json header = {{"feature_dim", model.feature_dim},
                           {"config", model.config},
                           {"feature_mean", model.feature_mean},
                           {"feature_std", model.feature_std},
                           {"val_mse", model.val_mse},
                           {"param_count", model.parameters.size()}};
  const std::string h = header.dump();
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  for (double p : model.parameters) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(p)));
  return out;
}

inline RegressorModel deserialize(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw Error("not a regressor model file");
  }
  const auto version = get_u32(bytes, 8);
  if (version != kVersion) throw Error("unsupported regressor format version " + std::to_string(version));
  const auto hlen = get_u32(bytes, 12);
  if (bytes.size() < 16 + static_cast<std::size_t>(hlen)) throw Error("truncated regressor header");
  const auto header = nlohmann::json::parse(bytes.substr(16, hlen));
  RegressorModel m;
  m.feature_dim = header.at("feature_dim").get<int>();
  m.config = header.at("config").get<RegressorConfig>();
  m.feature_mean = header.at("feature_mean").get<std::vector<double>>();
  m.feature_std = header.at("feature_std").get<std::vector<double>>();
  m.val_mse = header.at("val_mse").get<double>();
  const auto count = header.at("param_count").get<std::size_t>();
  const std::size_t base = 16 + hlen;
  if (bytes.size() != base + 4 * count) throw Error("regressor parameter block has the wrong size");
  m.parameters.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    m.parameters[i] = static_cast<double>(std::bit_cast<float>(get_u32(bytes, base + 4 * i)));
  }
  detail::make_net(m);  // layout check
  return m;
}

}  // namespace regressor_file

}  // namespace conviction
