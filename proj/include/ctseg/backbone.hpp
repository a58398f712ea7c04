#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ctseg/checkpoint.hpp"
#include "ctseg/data_model.hpp"
#include "ctseg/layers.hpp"

namespace ctseg {

enum class BackboneArch { kVgg19, kVggMini, kTiny };

inline std::string to_string(BackboneArch a) {
  switch (a) {
    case BackboneArch::kVgg19: return "vgg19";
    case BackboneArch::kVggMini: return "vgg_mini";
    case BackboneArch::kTiny: return "tiny";
  }
  return "vgg19";
}

inline BackboneArch parse_backbone_arch(const std::string& s) {
  if (s == "vgg19") return BackboneArch::kVgg19;
  if (s == "vgg_mini") return BackboneArch::kVggMini;
  if (s == "tiny") return BackboneArch::kTiny;
  throw Error(ErrorCode::kParse, "unknown backbone '" + s + "'");
}

struct BackboneConfig {
  BackboneArch arch = BackboneArch::kVgg19;
  std::uint64_t seed = 19;
  // Optional checkpoint (kind "backbone") holding pretrained weights. Without
  // it the convolutions use seeded He-normal weights.
  std::string weights;

  // (width, convs) per block; every block ends in a 2x2 max-pool.
  std::vector<std::pair<int, int>> blocks() const {
    switch (arch) {
      case BackboneArch::kVgg19: return {{64, 2}, {128, 2}, {256, 4}, {512, 4}, {512, 4}};
      case BackboneArch::kVggMini: return {{16, 2}, {32, 2}, {64, 2}, {64, 2}, {64, 2}};
      case BackboneArch::kTiny: return {{4, 1}, {6, 1}};
    }
    return {};
  }
};

enum class BackboneOp { kConv, kRelu, kPool };

struct BackboneLayer {
  std::string name;
  BackboneOp op = BackboneOp::kConv;
  int param_index = -1;  // conv layers only
  int channels = 0;      // N_l
  int factor = 1;        // spatial downsampling relative to the input
};

/// Named activations for one image, each 1 x N_l x h_l x w_l.
template <typename T>
using FeatureStack = std::map<std::string, Tensor<T>>;

/// Fixed VGG-style feature extractor. Weights never change after
/// construction and every method is const, so one instance can serve
/// concurrent loss evaluations.
template <typename T>
class FeatureBackbone {
 public:
  // Activations of one forward pass: acts[0] is the preprocessed input,
  // acts[i + 1] the output of layer i.
  struct Trace {
    std::vector<Tensor<T>> acts;
  };

  explicit FeatureBackbone(BackboneConfig cfg) : cfg_(std::move(cfg)) {
    means_ = {T(0.485), T(0.456), T(0.406)};
    NormalSampler rng(cfg_.seed);
    int cin = static_cast<int>(means_.size());
    int factor = 1;
    int b = 1;
    for (auto [width, convs] : cfg_.blocks()) {
      for (int k = 1; k <= convs; ++k) {
        const std::string suffix = std::to_string(b) + "_" + std::to_string(k);
        weights_.push_back(nn::detail::he_normal<T>(width, cin, 3, 3, cin * 9, rng));
        biases_.push_back(Tensor<T>(1, width, 1, 1));
        layers_.push_back({"conv" + suffix, BackboneOp::kConv, static_cast<int>(weights_.size()) - 1, width, factor});
        layers_.push_back({"relu" + suffix, BackboneOp::kRelu, -1, width, factor});
        cin = width;
      }
      factor *= 2;
      layers_.push_back({"pool" + std::to_string(b), BackboneOp::kPool, -1, cin, factor});
      ++b;
    }
    if (!cfg_.weights.empty()) load_weights(load_checkpoint(cfg_.weights));
  }

  const BackboneConfig& config() const { return cfg_; }
  const std::vector<BackboneLayer>& layers() const { return layers_; }

  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (layers_[i].name == name) return static_cast<int>(i);
    throw Error(ErrorCode::kUnknownLayer, "backbone has no layer '" + name + "'");
  }
  const BackboneLayer& layer(const std::string& name) const { return layers_[index_of(name)]; }
  bool has_layer(const std::string& name) const {
    return std::any_of(layers_.begin(), layers_.end(), [&](const auto& l) { return l.name == name; });
  }

  /// Runs layers [0, last] on a batch of single-channel images.
  Trace forward(const Tensor<T>& images, int last) const {
    require(images.c() == 1, ErrorCode::kShape, "backbone expects single-channel images");
    require(last >= 0 && last < static_cast<int>(layers_.size()), ErrorCode::kUnknownLayer, "layer index out of range");
    require(images.h() % layers_[last].factor == 0 && images.w() % layers_[last].factor == 0, ErrorCode::kShape,
            "image side must be divisible by the layer downsample factor");
    Trace tr;
    tr.acts.reserve(last + 2);
    Tensor<T> x(images.n(), static_cast<int>(means_.size()), images.h(), images.w());
    for (int i = 0; i < images.n(); ++i)
      for (int c = 0; c < x.c(); ++c)
        for (std::size_t j = 0; j < x.plane(); ++j) x.channel(i, c)[j] = images.channel(i, 0)[j] - means_[c];
    tr.acts.push_back(std::move(x));
    AlignedVector<T> col;
    for (int li = 0; li <= last; ++li) {
      const auto& L = layers_[li];
      const Tensor<T>& in = tr.acts.back();
      switch (L.op) {
        case BackboneOp::kConv:
          tr.acts.push_back(nn::conv2d_forward(in, weights_[L.param_index], biases_[L.param_index].data(),
                                               nn::ConvGeometry{3, 1, 1}, col));
          break;
        case BackboneOp::kRelu: {
          Tensor<T> out = in;
          for (auto& v : out.vec()) v = v > T{0} ? v : T{0};
          tr.acts.push_back(std::move(out));
          break;
        }
        case BackboneOp::kPool:
          tr.acts.push_back(pool_forward(in));
          break;
      }
    }
    return tr;
  }

  /// Backpropagates gradients injected at named layer outputs down to the
  /// single-channel input image.
  Tensor<T> backward(const Trace& tr, const std::map<int, Tensor<T>>& injected) const {
    require(!injected.empty(), ErrorCode::kInvalidArgument, "no gradients to backpropagate");
    const int last = injected.rbegin()->first;
    require(last + 1 < static_cast<int>(tr.acts.size()), ErrorCode::kInvalidArgument,
            "trace does not reach the injected layer");
    Tensor<T> g = injected.rbegin()->second;
    AlignedVector<T> col;
    for (int li = last; li >= 0; --li) {
      if (li != last) {
        if (auto it = injected.find(li); it != injected.end()) g += it->second;
      }
      const auto& L = layers_[li];
      const Tensor<T>& in = tr.acts[li];
      switch (L.op) {
        case BackboneOp::kConv:
          g = nn::conv2d_backward(in, g, weights_[L.param_index], nn::ConvGeometry{3, 1, 1}, static_cast<T*>(nullptr),
                                  static_cast<T*>(nullptr), true, col);
          break;
        case BackboneOp::kRelu: {
          const Tensor<T>& out = tr.acts[li + 1];
          for (std::size_t j = 0; j < g.size(); ++j)
            if (!(out.data()[j] > T{0})) g.data()[j] = T{0};
          break;
        }
        case BackboneOp::kPool:
          g = pool_backward(in, g);
          break;
      }
    }
    Tensor<T> gin(g.n(), 1, g.h(), g.w());
    for (int i = 0; i < g.n(); ++i)
      for (int c = 0; c < g.c(); ++c)
        for (std::size_t j = 0; j < g.plane(); ++j) gin.channel(i, 0)[j] += g.channel(i, c)[j];
    return gin;
  }

  FeatureStack<T> extract(const Tensor<T>& image, const std::vector<std::string>& names) const {
    require(image.n() == 1, ErrorCode::kShape, "extract expects a single image");
    std::vector<int> idx;
    for (const auto& n : names) idx.push_back(index_of(n));
    require(!idx.empty(), ErrorCode::kInvalidArgument, "no layers requested");
    const Trace tr = forward(image, *std::max_element(idx.begin(), idx.end()));
    FeatureStack<T> out;
    for (std::size_t k = 0; k < names.size(); ++k) out[names[k]] = tr.acts[idx[k] + 1];
    return out;
  }

  FeatureStack<T> extract(const IntensityGrid& image, const std::vector<std::string>& names) const {
    require(image.normalized(), ErrorCode::kEncoding, "backbone input must be a normalized image");
    return extract(image.template to_tensor<T>(), names);
  }

  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      h = ctseg::checksum<T>(weights_[i].span(), h);
      h = ctseg::checksum<T>(biases_[i].span(), h);
    }
    return h;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.kind = "backbone";
    ck.config = {{"arch", to_string(cfg_.arch)}, {"seed", cfg_.seed}};
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      ck.tensors.push_back({"conv" + std::to_string(i) + ".weight", weights_[i].shape(),
                            std::vector<float>(weights_[i].vec().begin(), weights_[i].vec().end())});
      ck.tensors.push_back({"conv" + std::to_string(i) + ".bias", biases_[i].shape(),
                            std::vector<float>(biases_[i].vec().begin(), biases_[i].vec().end())});
    }
    return ck;
  }

 private:
  void load_weights(const Checkpoint& ck) {
    require(ck.kind == "backbone", ErrorCode::kParse, "checkpoint is not a backbone");
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      for (auto [dst, suffix] : {std::pair{&weights_[i], ".weight"}, std::pair{&biases_[i], ".bias"}}) {
        const auto& e = ck.get("conv" + std::to_string(i) + suffix);
        require(e.shape == dst->shape(), ErrorCode::kShape, "backbone weight shape mismatch");
        std::transform(e.values.begin(), e.values.end(), dst->data(), [](float v) { return static_cast<T>(v); });
      }
    }
  }

  static Tensor<T> pool_forward(const Tensor<T>& x) {
    Tensor<T> out(x.n(), x.c(), x.h() / 2, x.w() / 2);
    for (int i = 0; i < x.n(); ++i)
      for (int c = 0; c < x.c(); ++c)
        for (int y = 0; y < out.h(); ++y)
          for (int xx = 0; xx < out.w(); ++xx)
            out(i, c, y, xx) = std::max(std::max(x(i, c, 2 * y, 2 * xx), x(i, c, 2 * y, 2 * xx + 1)),
                                        std::max(x(i, c, 2 * y + 1, 2 * xx), x(i, c, 2 * y + 1, 2 * xx + 1)));
    return out;
  }

  // Routes each output gradient to the first maximal input of its window.
  static Tensor<T> pool_backward(const Tensor<T>& x, const Tensor<T>& g) {
    Tensor<T> gin(x.n(), x.c(), x.h(), x.w());
    for (int i = 0; i < x.n(); ++i)
      for (int c = 0; c < x.c(); ++c)
        for (int y = 0; y < g.h(); ++y)
          for (int xx = 0; xx < g.w(); ++xx) {
            int by = 2 * y, bx = 2 * xx;
            for (int d = 1; d < 4; ++d) {
              const int yy = 2 * y + d / 2, xq = 2 * xx + d % 2;
              if (x(i, c, yy, xq) > x(i, c, by, bx)) {
                by = yy;
                bx = xq;
              }
            }
            gin(i, c, by, bx) += g(i, c, y, xx);
          }
    return gin;
  }

  BackboneConfig cfg_;
  std::vector<T> means_;
  std::vector<BackboneLayer> layers_;
  std::vector<Tensor<T>> weights_, biases_;
};

}  // namespace ctseg
