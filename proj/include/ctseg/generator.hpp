#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctseg/adam.hpp"
#include "ctseg/checkpoint.hpp"
#include "ctseg/data_model.hpp"
#include "ctseg/layers.hpp"
#include "ctseg/perceptual.hpp"

namespace ctseg {

struct GeneratorConfig {
  int in_channels = 7;  // one-hot channels, equal to the schema size
  bool noise = true;
  int base_width = 32;
  int max_width = 0;  // 0 = no cap
  int stages = 3;
  int res_blocks = 4;
  int side = 128;

  int width_at(int stage) const {
    const int w = base_width << stage;
    return max_width > 0 ? std::min(w, max_width) : w;
  }
  int input_channels() const { return in_channels + (noise ? 1 : 0); }

  void validate() const {
    require(in_channels >= 2, ErrorCode::kInvalidArgument, "generator needs at least 2 input labels");
    require(base_width >= 8, ErrorCode::kInvalidArgument, "generator base width must be >= 8");
    require(max_width == 0 || max_width >= base_width, ErrorCode::kInvalidArgument,
            "generator max width must be >= base width");
    require(stages >= 0 && stages <= 8 && res_blocks >= 0, ErrorCode::kInvalidArgument,
            "generator stage/residual counts out of range");
    require(side > 0 && side % (1 << stages) == 0, ErrorCode::kGeometry,
            "side " + std::to_string(side) + " not divisible by 2^" + std::to_string(stages));
  }
};

inline nlohmann::json to_json(const GeneratorConfig& c) {
  return {{"in_channels", c.in_channels}, {"noise", c.noise},        {"base_width", c.base_width},
          {"max_width", c.max_width},     {"stages", c.stages},      {"res_blocks", c.res_blocks},
          {"side", c.side}};
}

inline GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.noise = j.value("noise", c.noise);
  c.base_width = j.value("base_width", c.base_width);
  c.max_width = j.value("max_width", c.max_width);
  c.stages = j.value("stages", c.stages);
  c.res_blocks = j.value("res_blocks", c.res_blocks);
  c.side = j.value("side", c.side);
  return c;
}

/// Anything that turns a segmentation map into a styled image. The augmentor
/// only needs this much, which lets tests substitute a stub.
class StyleGenerator {
 public:
  virtual ~StyleGenerator() = default;
  virtual const std::string& style_id() const = 0;
  virtual IntensityGrid generate(const SegMap& seg, std::uint64_t seed) const = 0;
};

namespace detail {

inline void conv_in_relu(nn::Sequential<float>& s, int cin, int cout, int stride, NormalSampler& rng) {
  s.add<nn::Conv2d<float>>(cin, cout, 3, stride, 1, rng, false);
  s.add<nn::InstanceNorm<float>>(cout);
  s.add<nn::ReLU<float>>();
}

}  // namespace detail

/// Encoder-decoder: strided-conv encoder, residual bottleneck,
/// upsample+conv decoder, then a full-resolution head that sees the decoder
/// output concatenated with the raw input (so per-pixel noise reaches the
/// output without passing through the bottleneck).
class GeneratorModel : public StyleGenerator {
 public:
  GeneratorModel(GeneratorConfig cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
    cfg_.validate();
    NormalSampler rng(derive_seed(seed, "generator.init"));
    detail::conv_in_relu(body_, cfg_.input_channels(), cfg_.width_at(0), 1, rng);
    for (int s = 0; s < cfg_.stages; ++s) detail::conv_in_relu(body_, cfg_.width_at(s), cfg_.width_at(s + 1), 2, rng);
    const int wb = cfg_.width_at(cfg_.stages);
    for (int r = 0; r < cfg_.res_blocks; ++r) {
      nn::Sequential<float> blk;
      detail::conv_in_relu(blk, wb, wb, 1, rng);
      blk.add<nn::Conv2d<float>>(wb, wb, 3, 1, 1, rng, false);
      blk.add<nn::InstanceNorm<float>>(wb);
      body_.add<nn::Residual<float>>(std::move(blk));
    }
    for (int s = cfg_.stages; s > 0; --s) {
      body_.add<nn::Upsample2<float>>();
      detail::conv_in_relu(body_, cfg_.width_at(s), cfg_.width_at(s - 1), 1, rng);
    }
    static_cast<nn::Conv2d<float>&>(body_[0]).set_input_grad(false);
    detail::conv_in_relu(head_, cfg_.width_at(0) + cfg_.input_channels(), cfg_.width_at(0), 1, rng);
    head_.add<nn::Conv2d<float>>(cfg_.width_at(0), 1, 3, 1, 1, rng, true);
    head_.add<nn::Sigmoid<float>>();
  }

  const GeneratorConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  const std::string& style_id() const override { return style_id_; }
  void set_style_id(std::string id) { style_id_ = std::move(id); }

  std::vector<nn::Param<float>*> params() {
    auto p = body_.params();
    for (auto* q : head_.params()) p.push_back(q);
    return p;
  }
  std::uint64_t checksum() const {
    auto* self = const_cast<GeneratorModel*>(this);
    return nn::param_checksum(self->params());
  }

  /// Network input for a segmentation map: one-hot labels plus an optional
  /// standard-normal noise channel drawn from `seed`.
  Tensor<float> make_input(const SegMap& seg, std::uint64_t seed) const {
    require(seg.schema().size() == cfg_.in_channels, ErrorCode::kMismatch,
            "segmap schema has " + std::to_string(seg.schema().size()) + " labels, generator expects " +
                std::to_string(cfg_.in_channels));
    require(seg.height() == cfg_.side && seg.width() == cfg_.side, ErrorCode::kShape,
            "segmap is " + std::to_string(seg.height()) + "x" + std::to_string(seg.width()) + ", generator side is " +
                std::to_string(cfg_.side));
    Tensor<float> x = one_hot_tensor<float>(seg);
    if (!cfg_.noise) return x;
    Tensor<float> z(1, 1, seg.height(), seg.width());
    NormalSampler rng(seed);
    for (auto& v : z.vec()) v = static_cast<float>(rng());
    return concat_channels(x, z);
  }

  Tensor<float> forward(const Tensor<float>& x, bool training) {
    input_ = x;
    return head_.forward(concat_channels(body_.forward(x, training), x), training);
  }

  /// Accumulates parameter gradients for dL/d(output).
  void backward(const Tensor<float>& g) {
    auto [g_body, g_in] = split_channels(head_.backward(g), cfg_.width_at(0));
    body_.backward(g_body);
  }

  IntensityGrid generate(const SegMap& seg, std::uint64_t seed) const override {
    std::lock_guard<std::mutex> lock(mu_);
    auto* self = const_cast<GeneratorModel*>(this);
    return IntensityGrid::from_tensor(self->forward(make_input(seg, seed), false));
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.kind = "generator";
    ck.config = to_json(cfg_);
    ck.meta = {{"seed", seed_}, {"style_id", style_id_}};
    auto* self = const_cast<GeneratorModel*>(this);
    export_tensors<float>(ck, "body", self->body_.params(), self->body_.buffers());
    export_tensors<float>(ck, "head", self->head_.params(), self->head_.buffers());
    return ck;
  }

  static std::unique_ptr<GeneratorModel> from_checkpoint(const Checkpoint& ck) {
    require(ck.kind == "generator", ErrorCode::kParse, "checkpoint kind '" + ck.kind + "' is not a generator");
    auto m = std::make_unique<GeneratorModel>(generator_config_from_json(ck.config),
                                              ck.meta.value("seed", std::uint64_t{0}));
    m->style_id_ = ck.meta.value("style_id", std::string{});
    import_tensors<float>(ck, "body", m->body_.params(), m->body_.buffers());
    import_tensors<float>(ck, "head", m->head_.params(), m->head_.buffers());
    return m;
  }

 private:
  GeneratorConfig cfg_;
  std::uint64_t seed_;
  std::string style_id_;
  nn::Sequential<float> body_, head_;
  Tensor<float> input_;
  mutable std::mutex mu_;
};

inline std::unique_ptr<GeneratorModel> build_generator(const GeneratorConfig& cfg, std::uint64_t seed) {
  return std::make_unique<GeneratorModel>(cfg, seed);
}

inline std::unique_ptr<GeneratorModel> load_generator(const fs::path& path) {
  return GeneratorModel::from_checkpoint(load_checkpoint(path));
}

struct StyleEpoch {
  int epoch = 0;
  double content = 0, style = 0, total = 0;
  double seconds = 0;
};

using StyleTrainLog = std::vector<StyleEpoch>;

inline nlohmann::json to_json(const StyleTrainLog& log) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& e : log)
    a.push_back({{"epoch", e.epoch}, {"content", e.content}, {"style", e.style}, {"total", e.total},
                 {"seconds", e.seconds}});
  return a;
}

struct StyleTrainOptions {
  int epochs = 10;
  double lr = 2e-4;
  std::uint64_t seed = 0;
  std::function<void(const StyleEpoch&)> on_epoch;
};

/// Trains `model` so that Gen(one_hot(seg_o)) keeps the content of x_o and
/// takes on the per-segment textures of `style`. Per-sample Adam steps in a
/// seeded shuffled order; noise is redrawn every step.
inline StyleTrainLog train_style_generator(GeneratorModel& model, const std::vector<AnnotatedSample>& content,
                                           const AnnotatedSample& style, const FeatureBackbone<float>& bb,
                                           const LossSpec& spec, const StyleTrainOptions& opts) {
  require(!content.empty(), ErrorCode::kEmptyInput, "style training needs at least one content sample");
  require(opts.epochs >= 0, ErrorCode::kInvalidArgument, "epochs must be >= 0");
  require(style.image.normalized(), ErrorCode::kEncoding, "style image must be normalized");
  const int side = model.config().side;
  require(style.mask.height() == side && style.mask.width() == side, ErrorCode::kShape,
          "style sample '" + style.id + "' does not match the generator side " + std::to_string(side));
  require(style.mask.schema().size() == model.config().in_channels, ErrorCode::kMismatch,
          "style sample '" + style.id + "' schema does not match the generator");
  spec.validate_against(bb);
  model.set_style_id(style.id);
  StyleTrainLog log;
  if (opts.epochs == 0) return log;

  PerceptualLoss<float> loss(bb, spec);
  const auto style_targets = loss.style_targets(style.image.to_tensor<float>(), style.mask);
  struct Cached {
    LayerMasks masks;
    FeatureStack<float> content;
  };
  std::vector<Cached> cache;
  cache.reserve(content.size());
  for (const auto& s : content) {
    require(s.image.normalized(), ErrorCode::kEncoding, "content sample '" + s.id + "' is not normalized");
    model.make_input(s.mask, 0);  // shape and schema check
    cache.push_back({loss.masks(s.mask), loss.content_targets(s.image.to_tensor<float>())});
  }

  auto params = model.params();
  nn::AdamOptions ao;
  ao.lr = opts.lr;
  nn::Adam<float> adam(params, ao);
  std::vector<std::size_t> order(content.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 shuffle_rng(derive_seed(opts.seed, "style.shuffle"));
  std::uint64_t step = 0;
  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    StyleEpoch rec;
    rec.epoch = epoch;
    for (std::size_t i : order) {
      const auto x = model.make_input(content[i].mask, derive_seed(opts.seed, ++step));
      const Tensor<float> out = model.forward(x, true);
      auto r = loss.evaluate(out, cache[i].masks, cache[i].content, style_targets, true);
      if (!std::isfinite(r.total) || !r.grad.all_finite())
        throw Error(ErrorCode::kNonFinite, "style training diverged at epoch " + std::to_string(epoch) + ", sample '" +
                                               content[i].id + "' (content " + std::to_string(r.content) + ", style " +
                                               std::to_string(r.style) + ")");
      adam.zero_grad();
      model.backward(r.grad);
      adam.step();
      rec.content += r.content;
      rec.style += r.style;
      rec.total += r.total;
    }
    const double n = static_cast<double>(content.size());
    rec.content /= n;
    rec.style /= n;
    rec.total /= n;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(rec);
    if (opts.on_epoch) opts.on_epoch(rec);
  }
  return log;
}

/// Output for `seg` from a trained generator.
inline IntensityGrid generate(const StyleGenerator& model, const SegMap& seg, std::uint64_t seed) {
  return model.generate(seg, seed);
}

}  // namespace ctseg
