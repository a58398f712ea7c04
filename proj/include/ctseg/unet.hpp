#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctseg/adam.hpp"
#include "ctseg/checkpoint.hpp"
#include "ctseg/data_model.hpp"
#include "ctseg/layers.hpp"
#include "ctseg/manifest.hpp"

namespace ctseg {

struct UNetConfig {
  int side = 128;
  int classes = 7;
  int depth = 3;
  int base_width = 16;
  int kernel = 3;

  int width_at(int level) const { return base_width << level; }

  void validate() const {
    require(classes >= 2, ErrorCode::kInvalidArgument, "U-Net needs at least 2 classes");
    require(depth >= 1 && depth <= 8, ErrorCode::kInvalidArgument, "U-Net depth must be in [1, 8]");
    require(base_width >= 1, ErrorCode::kInvalidArgument, "U-Net base width must be >= 1");
    require(kernel >= 1 && kernel % 2 == 1, ErrorCode::kInvalidArgument, "U-Net kernel must be odd");
    require(side > 0 && side % (1 << depth) == 0, ErrorCode::kGeometry,
            "side " + std::to_string(side) + " not divisible by 2^" + std::to_string(depth));
  }
};

inline nlohmann::json to_json(const UNetConfig& c) {
  return {{"side", c.side}, {"classes", c.classes}, {"depth", c.depth}, {"base_width", c.base_width},
          {"kernel", c.kernel}};
}

inline UNetConfig unet_config_from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.side = j.value("side", c.side);
  c.classes = j.value("classes", c.classes);
  c.depth = j.value("depth", c.depth);
  c.base_width = j.value("base_width", c.base_width);
  c.kernel = j.value("kernel", c.kernel);
  return c;
}

namespace detail {

// conv - batchnorm - relu - conv - relu
inline nn::Sequential<float> unet_block(int cin, int cout, int k, NormalSampler& rng) {
  nn::Sequential<float> s;
  s.add<nn::Conv2d<float>>(cin, cout, k, 1, k / 2, rng, false);
  s.add<nn::BatchNorm<float>>(cout);
  s.add<nn::ReLU<float>>();
  s.add<nn::Conv2d<float>>(cout, cout, k, 1, k / 2, rng, true);
  s.add<nn::ReLU<float>>();
  return s;
}

}  // namespace detail

class UNetModel {
 public:
  UNetModel(UNetConfig cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
    cfg_.validate();
    NormalSampler rng(derive_seed(seed, "unet.init"));
    int cin = 1;
    for (int l = 0; l < cfg_.depth; ++l) {
      enc_.push_back(detail::unet_block(cin, cfg_.width_at(l), cfg_.kernel, rng));
      pool_.emplace_back();
      cin = cfg_.width_at(l);
    }
    static_cast<nn::Conv2d<float>&>(enc_[0][0]).set_input_grad(false);
    bottleneck_ = detail::unet_block(cin, cfg_.width_at(cfg_.depth), cfg_.kernel, rng);
    for (int l = cfg_.depth - 1; l >= 0; --l) {
      up_.emplace_back(cfg_.width_at(l + 1), cfg_.width_at(l), rng);
      dec_.push_back(detail::unet_block(2 * cfg_.width_at(l), cfg_.width_at(l), cfg_.kernel, rng));
    }
    // up_/dec_ are stored deepest first; index them by level below.
    std::reverse(up_.begin(), up_.end());
    std::reverse(dec_.begin(), dec_.end());
    head_ = std::make_unique<nn::Conv2d<float>>(cfg_.width_at(0), cfg_.classes, 1, 1, 0, rng, true);
  }

  const UNetConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  int bottleneck_side() const { return cfg_.side >> cfg_.depth; }

  std::vector<nn::Param<float>*> params() {
    std::vector<nn::Param<float>*> out;
    auto take = [&](nn::Layer<float>& l) {
      for (auto* p : l.params()) out.push_back(p);
    };
    for (auto& e : enc_) take(e);
    take(bottleneck_);
    for (std::size_t l = 0; l < up_.size(); ++l) {
      take(up_[l]);
      take(dec_[l]);
    }
    take(*head_);
    return out;
  }

  std::vector<std::pair<std::string, Tensor<float>*>> buffers() {
    std::vector<std::pair<std::string, Tensor<float>*>> out;
    auto take = [&](nn::Layer<float>& l) {
      for (auto& b : l.buffers()) out.push_back(b);
    };
    for (auto& e : enc_) take(e);
    take(bottleneck_);
    for (auto& d : dec_) take(d);
    return out;
  }

  std::uint64_t checksum() {
    std::uint64_t h = nn::param_checksum(params());
    for (auto& [name, t] : buffers()) h = ctseg::checksum<float>(t->span(), h);
    return h;
  }

  /// N x 1 x H x W images -> N x C x H x W class scores.
  Tensor<float> forward(const Tensor<float>& x, bool training) {
    require(x.c() == 1 && x.h() == cfg_.side && x.w() == cfg_.side, ErrorCode::kShape,
            "U-Net input " + x.shape_str() + " does not match side " + std::to_string(cfg_.side));
    skips_.resize(static_cast<std::size_t>(cfg_.depth));
    Tensor<float> cur = x;
    for (int l = 0; l < cfg_.depth; ++l) {
      skips_[l] = enc_[l].forward(cur, training);
      cur = pool_[l].forward(skips_[l], training);
    }
    cur = bottleneck_.forward(cur, training);
    for (int l = cfg_.depth - 1; l >= 0; --l)
      cur = dec_[l].forward(concat_channels(up_[l].forward(cur, training), skips_[l]), training);
    return head_->forward(cur, training);
  }

  void backward(const Tensor<float>& g_scores) {
    std::vector<Tensor<float>> g_skip(static_cast<std::size_t>(cfg_.depth));
    Tensor<float> g = head_->backward(g_scores);
    for (int l = 0; l < cfg_.depth; ++l) {
      auto [g_up, g_s] = split_channels(dec_[l].backward(g), cfg_.width_at(l));
      g_skip[l] = std::move(g_s);
      g = up_[l].backward(g_up);
    }
    g = bottleneck_.backward(g);
    for (int l = cfg_.depth - 1; l >= 0; --l) {
      g = pool_[l].backward(g);
      g += g_skip[l];
      g = enc_[l].backward(g);
    }
  }

  Checkpoint to_checkpoint() {
    Checkpoint ck;
    ck.kind = "unet";
    ck.config = to_json(cfg_);
    ck.meta = {{"seed", seed_}};
    export_tensors<float>(ck, "unet", params(), buffers());
    return ck;
  }

  static std::unique_ptr<UNetModel> from_checkpoint(const Checkpoint& ck) {
    require(ck.kind == "unet", ErrorCode::kParse, "checkpoint kind '" + ck.kind + "' is not a U-Net");
    auto m = std::make_unique<UNetModel>(unet_config_from_json(ck.config), ck.meta.value("seed", std::uint64_t{0}));
    import_tensors<float>(ck, "unet", m->params(), m->buffers());
    return m;
  }

 private:
  UNetConfig cfg_;
  std::uint64_t seed_;
  std::vector<nn::Sequential<float>> enc_, dec_;
  std::vector<nn::MaxPool2<float>> pool_;
  std::vector<nn::ConvTranspose2x2<float>> up_;
  nn::Sequential<float> bottleneck_;
  std::unique_ptr<nn::Conv2d<float>> head_;
  std::vector<Tensor<float>> skips_;
};

inline std::unique_ptr<UNetModel> build_unet(const UNetConfig& cfg, std::uint64_t seed) {
  return std::make_unique<UNetModel>(cfg, seed);
}

inline std::unique_ptr<UNetModel> load_unet(const fs::path& path) {
  return UNetModel::from_checkpoint(load_checkpoint(path));
}

/// Per-pixel softmax over channels, computed in double.
inline Tensor<float> softmax_channels(const Tensor<float>& scores) {
  Tensor<float> p(scores.n(), scores.c(), scores.h(), scores.w());
  const std::size_t plane = scores.plane();
  std::vector<double> e(static_cast<std::size_t>(scores.c()));
  for (int i = 0; i < scores.n(); ++i)
    for (std::size_t j = 0; j < plane; ++j) {
      double mx = -INFINITY;
      for (int c = 0; c < scores.c(); ++c) mx = std::max(mx, static_cast<double>(scores.channel(i, c)[j]));
      double sum = 0;
      for (int c = 0; c < scores.c(); ++c) sum += e[c] = std::exp(scores.channel(i, c)[j] - mx);
      for (int c = 0; c < scores.c(); ++c) p.channel(i, c)[j] = static_cast<float>(e[c] / sum);
    }
  return p;
}

/// Weighted mean cross-entropy over all pixels of the batch. Writes
/// dL/dscores into `grad` and returns (loss, correctly classified pixels).
inline std::pair<double, std::size_t> cross_entropy(const Tensor<float>& scores, const std::vector<const SegMap*>& truth,
                                                    const std::vector<double>& class_weight, Tensor<float>& grad) {
  const Tensor<float> p = softmax_channels(scores);
  grad = Tensor<float>(scores.n(), scores.c(), scores.h(), scores.w());
  const std::size_t plane = scores.plane();
  double loss = 0, wsum = 0;
  std::size_t correct = 0;
  for (int i = 0; i < scores.n(); ++i) {
    const auto& lab = truth[static_cast<std::size_t>(i)]->labels();
    for (std::size_t j = 0; j < plane; ++j) {
      const int t = lab[j];
      const double w = class_weight.empty() ? 1.0 : class_weight[t];
      loss -= w * std::log(std::max(static_cast<double>(p.channel(i, t)[j]), 1e-30));
      wsum += w;
      int best = 0;
      for (int c = 1; c < scores.c(); ++c)
        if (scores.channel(i, c)[j] > scores.channel(i, best)[j]) best = c;
      if (best == t) ++correct;
    }
  }
  const double inv = wsum > 0 ? 1.0 / wsum : 0.0;
  for (int i = 0; i < scores.n(); ++i) {
    const auto& lab = truth[static_cast<std::size_t>(i)]->labels();
    for (std::size_t j = 0; j < plane; ++j) {
      const int t = lab[j];
      const double w = (class_weight.empty() ? 1.0 : class_weight[t]) * inv;
      for (int c = 0; c < scores.c(); ++c)
        grad.channel(i, c)[j] = static_cast<float>(w * (p.channel(i, c)[j] - (c == t ? 1.0 : 0.0)));
    }
  }
  return {loss * inv, correct};
}

/// Inverse-frequency class weights normalized to mean 1 over present classes;
/// absent classes get weight 0.
inline std::vector<double> inverse_frequency_weights(const std::vector<AnnotatedSample>& data, int classes) {
  std::vector<double> cnt(static_cast<std::size_t>(classes), 0.0);
  for (const auto& s : data)
    for (Label l : s.mask.labels()) cnt[l] += 1;
  std::vector<double> w(cnt.size(), 0.0);
  double sum = 0;
  int present = 0;
  for (std::size_t c = 0; c < cnt.size(); ++c)
    if (cnt[c] > 0) {
      w[c] = 1.0 / cnt[c];
      sum += w[c];
      ++present;
    }
  for (auto& v : w) v *= present / sum;
  return w;
}

struct UNetTrainConfig {
  int epochs = 30;
  int batch = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  bool class_weighting = false;
};

inline nlohmann::json to_json(const UNetTrainConfig& t) {
  return {{"epochs", t.epochs}, {"batch", t.batch}, {"lr", t.lr}, {"seed", t.seed},
          {"class_weighting", t.class_weighting}};
}

inline UNetTrainConfig unet_train_config_from_json(const nlohmann::json& j) {
  UNetTrainConfig t;
  t.epochs = j.value("epochs", t.epochs);
  t.batch = j.value("batch", t.batch);
  t.lr = j.value("lr", t.lr);
  t.seed = j.value("seed", t.seed);
  t.class_weighting = j.value("class_weighting", t.class_weighting);
  return t;
}

struct UNetEpoch {
  int epoch = 0;
  double loss = 0;
  double accuracy = 0;  // training-mode pixel accuracy over the epoch
  std::size_t samples = 0;
  double seconds = 0;
};

using UNetTrainLog = std::vector<UNetEpoch>;

inline nlohmann::json to_json(const UNetTrainLog& log) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& e : log)
    a.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"accuracy", e.accuracy}, {"samples", e.samples},
                 {"seconds", e.seconds}});
  return a;
}

struct UNetTrainHooks {
  std::function<void(const UNetEpoch&)> on_epoch;
  std::function<void(int epoch, const std::vector<std::size_t>& batch)> on_batch;
};

inline Tensor<float> stack_images(const std::vector<AnnotatedSample>& data, const std::vector<std::size_t>& idx) {
  const auto& first = data[idx.front()].image;
  Tensor<float> x(static_cast<int>(idx.size()), 1, first.height(), first.width());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& v = data[idx[k]].image.values();
    std::transform(v.begin(), v.end(), x.sample(static_cast<int>(k)), [](double d) { return static_cast<float>(d); });
  }
  return x;
}

/// Minibatch Adam on per-pixel cross-entropy. Each epoch visits a seeded
/// permutation of the data; the last batch may be short.
inline UNetTrainLog train_unet(UNetModel& model, const std::vector<AnnotatedSample>& data, const UNetTrainConfig& tc,
                               const UNetTrainHooks& hooks = {}) {
  require(!data.empty(), ErrorCode::kEmptyInput, "U-Net training set is empty");
  require(tc.epochs >= 0 && tc.batch >= 1, ErrorCode::kInvalidArgument, "epochs must be >= 0 and batch >= 1");
  const auto& cfg = model.config();
  for (const auto& s : data) {
    require(s.image.normalized(), ErrorCode::kEncoding, "training image '" + s.id + "' is not normalized");
    require(s.image.height() == cfg.side && s.image.width() == cfg.side, ErrorCode::kShape,
            "training sample '" + s.id + "' does not match U-Net side " + std::to_string(cfg.side));
    require(s.mask.schema().size() == cfg.classes, ErrorCode::kMismatch,
            "training sample '" + s.id + "' schema size differs from the U-Net class count");
  }
  UNetTrainLog log;
  const std::vector<double> weights =
      tc.class_weighting ? inverse_frequency_weights(data, cfg.classes) : std::vector<double>{};
  nn::AdamOptions ao;
  ao.lr = tc.lr;
  nn::Adam<float> adam(model.params(), ao);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(derive_seed(tc.seed, "unet.shuffle"));
  Tensor<float> grad;
  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    UNetEpoch rec;
    rec.epoch = epoch;
    std::size_t correct = 0, pixels = 0;
    double loss_sum = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(tc.batch)) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b),
                                         order.begin() + static_cast<std::ptrdiff_t>(
                                                             std::min(order.size(), b + static_cast<std::size_t>(tc.batch))));
      if (hooks.on_batch) hooks.on_batch(epoch, idx);
      std::vector<const SegMap*> truth;
      for (std::size_t i : idx) truth.push_back(&data[i].mask);
      const Tensor<float> scores = model.forward(stack_images(data, idx), true);
      auto [loss, ok] = cross_entropy(scores, truth, weights, grad);
      if (!std::isfinite(loss))
        throw Error(ErrorCode::kNonFinite, "U-Net loss is not finite at epoch " + std::to_string(epoch));
      adam.zero_grad();
      model.backward(grad);
      adam.step();
      loss_sum += loss * static_cast<double>(idx.size());
      correct += ok;
      pixels += idx.size() * scores.plane();
      rec.samples += idx.size();
    }
    rec.loss = loss_sum / static_cast<double>(rec.samples);
    rec.accuracy = static_cast<double>(correct) / static_cast<double>(pixels);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  return log;
}

inline UNetTrainLog train_unet(UNetModel& model, const DatasetManifest& m, const UNetTrainConfig& tc,
                               const UNetTrainHooks& hooks = {}) {
  return train_unet(model, load_split(m, Split::kTrain), tc, hooks);
}

struct Prediction {
  SegMap segmap;
  Tensor<float> probs;  // 1 x C x H x W
};

/// Argmax over class probabilities; ties go to the lower label id.
inline std::vector<Label> argmax_labels(const Tensor<float>& probs, int sample = 0) {
  std::vector<Label> out(probs.plane());
  for (std::size_t j = 0; j < out.size(); ++j) {
    int best = 0;
    for (int c = 1; c < probs.c(); ++c)
      if (probs.channel(sample, c)[j] > probs.channel(sample, best)[j]) best = c;
    out[j] = static_cast<Label>(best);
  }
  return out;
}

inline Prediction predict(UNetModel& model, const IntensityGrid& image, std::shared_ptr<const LabelSchema> schema) {
  require(image.normalized(), ErrorCode::kEncoding, "predict expects a normalized image");
  require(schema && schema->size() == model.config().classes, ErrorCode::kMismatch,
          "schema size differs from the U-Net class count");
  Tensor<float> probs = softmax_channels(model.forward(image.to_tensor<float>(), false));
  SegMap seg(image.height(), image.width(), argmax_labels(probs), std::move(schema));
  return {std::move(seg), std::move(probs)};
}

}  // namespace ctseg
