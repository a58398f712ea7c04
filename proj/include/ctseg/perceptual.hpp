#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctseg/backbone.hpp"
#include "ctseg/data_model.hpp"
#include "ctseg/rng.hpp"

namespace ctseg {

/// How the per-layer factors 1/(4 N^2 M^2) and 1/(2 N M) treat masked
/// segments. `kLiteral` uses the full layer size M for every segment;
/// `kMaskedCount` divides each masked Gram (or feature sum) by the number of
/// positions the segment actually covers, so small organs are not drowned
/// out by large ones.
enum class NormalizationMode { kLiteral, kMaskedCount };

inline std::string to_string(NormalizationMode m) {
  return m == NormalizationMode::kLiteral ? "literal" : "masked_count";
}

inline NormalizationMode parse_normalization(const std::string& s) {
  if (s == "literal") return NormalizationMode::kLiteral;
  if (s == "masked_count") return NormalizationMode::kMaskedCount;
  throw Error(ErrorCode::kParse, "unknown normalization mode '" + s + "'");
}

struct LossSpec {
  std::vector<std::string> style_layers = {"relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"};
  std::vector<std::string> content_layers = {"relu4_2"};
  double content_weight = 1.0;  // alpha
  double style_weight = 1e3;    // beta
  std::vector<int> segment_ids;  // empty: every label of the schema
  NormalizationMode normalization = NormalizationMode::kLiteral;

  void validate() const {
    require(!style_layers.empty() && !content_layers.empty(), ErrorCode::kInvalidArgument,
            "loss spec needs at least one style and one content layer");
    require(std::isfinite(content_weight) && content_weight >= 0 && std::isfinite(style_weight) && style_weight >= 0,
            ErrorCode::kInvalidArgument, "loss weights must be finite and non-negative");
  }

  template <typename T>
  void validate_against(const FeatureBackbone<T>& bb) const {
    validate();
    for (const auto& l : style_layers) (void)bb.index_of(l);
    for (const auto& l : content_layers) (void)bb.index_of(l);
  }

  std::vector<int> segments(int schema_size) const {
    if (segment_ids.empty()) {
      std::vector<int> all(static_cast<std::size_t>(schema_size));
      for (int i = 0; i < schema_size; ++i) all[static_cast<std::size_t>(i)] = i;
      return all;
    }
    for (int s : segment_ids)
      require(s >= 0 && s < schema_size, ErrorCode::kSchemaViolation, "segment id " + std::to_string(s) + " not in schema");
    return segment_ids;
  }

  std::vector<std::string> all_layers() const {
    std::set<std::string> s(style_layers.begin(), style_layers.end());
    s.insert(content_layers.begin(), content_layers.end());
    return {s.begin(), s.end()};
  }
};

inline nlohmann::json to_json(const LossSpec& s) {
  return {{"style_layers", s.style_layers},   {"content_layers", s.content_layers},
          {"content_weight", s.content_weight}, {"style_weight", s.style_weight},
          {"segment_ids", s.segment_ids},     {"normalization", to_string(s.normalization)}};
}

inline LossSpec loss_spec_from_json(const nlohmann::json& j) {
  LossSpec s;
  if (j.contains("style_layers")) s.style_layers = j["style_layers"].get<std::vector<std::string>>();
  if (j.contains("content_layers")) s.content_layers = j["content_layers"].get<std::vector<std::string>>();
  s.content_weight = j.value("content_weight", s.content_weight);
  s.style_weight = j.value("style_weight", s.style_weight);
  if (j.contains("segment_ids")) s.segment_ids = j["segment_ids"].get<std::vector<int>>();
  if (j.contains("normalization")) s.normalization = parse_normalization(j["normalization"].get<std::string>());
  s.validate();
  return s;
}

/// Per-segment masks at the resolution of each named layer.
using LayerMasks = std::map<std::string, MaskStack>;

template <typename T>
LayerMasks layer_masks(const SegMap& seg, const FeatureBackbone<T>& bb, const std::vector<std::string>& layers) {
  const MaskStack full = one_hot(seg);
  LayerMasks out;
  std::map<int, MaskStack> by_factor;
  for (const auto& name : layers) {
    const int f = bb.layer(name).factor;
    auto it = by_factor.find(f);
    if (it == by_factor.end()) {
      MaskStack ms;
      for (const auto& ch : full.channels) ms.channels.push_back(downsample_mask(ch, f));
      it = by_factor.emplace(f, std::move(ms)).first;
    }
    out[name] = it->second;
  }
  return out;
}

template <typename T>
using GramMatrix = RowMatrix<T>;

namespace detail {

// F F^T with the upper triangle mirrored from the lower, so the result is
// exactly symmetric.
template <typename T, typename M>
GramMatrix<T> outer(const M& f) {
  GramMatrix<T> g = GramMatrix<T>::Zero(f.rows(), f.rows());
  if (f.cols() == 0) return g;
  g.template selfadjointView<Eigen::Lower>().rankUpdate(f);
  g.template triangularView<Eigen::StrictlyUpper>() = g.transpose();
  return g;
}

}  // namespace detail

/// G[i][j] = sum_p F[i][p] F[j][p] over all spatial positions (unnormalized).
template <typename T>
GramMatrix<T> gram(const Tensor<T>& features) {
  require(features.n() == 1, ErrorCode::kShape, "gram expects one feature map");
  ConstMatrixMap<T> f(features.data(), features.c(), static_cast<Eigen::Index>(features.plane()));
  return detail::outer<T>(f);
}

inline std::vector<int> mask_positions(const BinaryGrid& m) {
  std::vector<int> idx;
  for (std::size_t i = 0; i < m.bits.size(); ++i)
    if (m.bits[i]) idx.push_back(static_cast<int>(i));
  return idx;
}

namespace detail {

// N x k matrix of the feature columns at `idx`.
template <typename T>
RowMatrix<T> gather(const Tensor<T>& f, const std::vector<int>& idx) {
  const int n = f.c();
  RowMatrix<T> out(n, static_cast<Eigen::Index>(idx.size()));
  for (int c = 0; c < n; ++c) {
    const T* src = f.channel(0, c);
    for (std::size_t k = 0; k < idx.size(); ++k) out(c, static_cast<Eigen::Index>(k)) = src[idx[k]];
  }
  return out;
}

template <typename T>
void check_mask(const Tensor<T>& f, const BinaryGrid& m, const std::string& layer) {
  require(m.height == f.h() && m.width == f.w(), ErrorCode::kShape,
          "mask " + std::to_string(m.height) + "x" + std::to_string(m.width) + " does not match layer '" + layer +
              "' features " + f.shape_str());
}

template <typename T>
const Tensor<T>& feature(const FeatureStack<T>& s, const std::string& layer, const char* which) {
  auto it = s.find(layer);
  require(it != s.end(), ErrorCode::kUnknownLayer, std::string(which) + " stack lacks layer '" + layer + "'");
  return it->second;
}

inline const MaskStack& masks_at(const LayerMasks& m, const std::string& layer) {
  auto it = m.find(layer);
  require(it != m.end(), ErrorCode::kShape, "no masks for layer '" + layer + "'");
  return it->second;
}

}  // namespace detail

/// Gram of the features with every position outside `mask` zeroed.
template <typename T>
GramMatrix<T> masked_gram(const Tensor<T>& features, const BinaryGrid& mask) {
  require(features.n() == 1, ErrorCode::kShape, "masked_gram expects one feature map");
  detail::check_mask(features, mask, "<input>");
  return detail::outer<T>(detail::gather(features, mask_positions(mask)));
}

/// Masked Gram of the style image for one (layer, segment), plus the number
/// of positions it covers.
template <typename T>
struct SegmentGram {
  GramMatrix<T> gram;
  std::size_t count = 0;
};

template <typename T>
using StyleTargets = std::map<std::string, std::map<int, SegmentGram<T>>>;

template <typename T>
StyleTargets<T> make_style_targets(const FeatureStack<T>& style, const LayerMasks& masks, const LossSpec& spec) {
  StyleTargets<T> out;
  for (const auto& layer : spec.style_layers) {
    const Tensor<T>& f = detail::feature(style, layer, "style");
    const MaskStack& ms = detail::masks_at(masks, layer);
    for (int sg : spec.segments(ms.size())) {
      detail::check_mask(f, ms[sg], layer);
      const auto idx = mask_positions(ms[sg]);
      const RowMatrix<T> fk = detail::gather(f, idx);
      out[layer][sg] = SegmentGram<T>{detail::outer<T>(fk), idx.size()};
    }
  }
  return out;
}

/// Segment-wise Gram style loss against precomputed targets. When `grads` is
/// given, dL/dR is accumulated per layer into it.
template <typename T>
double style_loss(const FeatureStack<T>& generated, const StyleTargets<T>& targets, const LayerMasks& masks,
                  const LossSpec& spec, FeatureStack<T>* grads = nullptr) {
  double total = 0.0;
  for (const auto& layer : spec.style_layers) {
    const Tensor<T>& f = detail::feature(generated, layer, "generated");
    const MaskStack& ms = detail::masks_at(masks, layer);
    auto tl = targets.find(layer);
    require(tl != targets.end(), ErrorCode::kUnknownLayer, "style targets lack layer '" + layer + "'");
    const double n = f.c();
    const double m_full = static_cast<double>(f.plane());
    Tensor<T>* g = nullptr;
    if (grads) {
      auto [it, fresh] = grads->try_emplace(layer, Tensor<T>(1, f.c(), f.h(), f.w()));
      g = &it->second;
    }
    for (int sg : spec.segments(ms.size())) {
      detail::check_mask(f, ms[sg], layer);
      auto ts = tl->second.find(sg);
      require(ts != tl->second.end(), ErrorCode::kShape, "style targets lack segment " + std::to_string(sg));
      const auto idx = mask_positions(ms[sg]);
      // A segment absent from either image at this resolution contributes 0.
      if (idx.empty() || ts->second.count == 0) continue;
      const RowMatrix<T> fk = detail::gather(f, idx);
      RowMatrix<double> gr = detail::outer<T>(fk).template cast<double>();
      RowMatrix<double> gs = ts->second.gram.template cast<double>();
      double coef = 0.0, a = 1.0;
      if (spec.normalization == NormalizationMode::kLiteral) {
        coef = 1.0 / (4.0 * n * n * m_full * m_full);
      } else {
        a = 1.0 / static_cast<double>(idx.size());
        gr *= a;
        gs /= static_cast<double>(ts->second.count);
        coef = 1.0 / (4.0 * n * n);
      }
      const RowMatrix<double> diff = gr - gs;
      total += coef * diff.squaredNorm();
      if (g) {
        // d/dF ||F F^T - G||^2 = 4 (F F^T - G) F for symmetric G.
        const RowMatrix<T> dfk = ((4.0 * coef * a) * diff).template cast<T>() * fk;
        for (int c = 0; c < f.c(); ++c) {
          T* dst = g->channel(0, c);
          for (std::size_t k = 0; k < idx.size(); ++k) dst[idx[k]] += dfk(c, static_cast<Eigen::Index>(k));
        }
      }
    }
  }
  return total;
}

/// Convenience form taking the style image's feature stack directly.
template <typename T>
double style_loss(const FeatureStack<T>& generated, const FeatureStack<T>& style, const LayerMasks& masks_generated,
                  const LayerMasks& masks_style, const LossSpec& spec) {
  return style_loss(generated, make_style_targets(style, masks_style, spec), masks_generated, spec);
}

/// Segment-wise feature reconstruction loss.
template <typename T>
double content_loss(const FeatureStack<T>& generated, const FeatureStack<T>& original, const LayerMasks& masks,
                    const LossSpec& spec, FeatureStack<T>* grads = nullptr) {
  double total = 0.0;
  for (const auto& layer : spec.content_layers) {
    const Tensor<T>& r = detail::feature(generated, layer, "generated");
    const Tensor<T>& o = detail::feature(original, layer, "original");
    require(r.same_shape(o), ErrorCode::kShape, "content features differ in shape at '" + layer + "'");
    const MaskStack& ms = detail::masks_at(masks, layer);
    const double n = r.c();
    const double m_full = static_cast<double>(r.plane());
    Tensor<T>* g = nullptr;
    if (grads) {
      auto [it, fresh] = grads->try_emplace(layer, Tensor<T>(1, r.c(), r.h(), r.w()));
      g = &it->second;
    }
    for (int sg : spec.segments(ms.size())) {
      detail::check_mask(r, ms[sg], layer);
      const auto idx = mask_positions(ms[sg]);
      if (idx.empty()) continue;
      const double m = spec.normalization == NormalizationMode::kLiteral ? m_full : static_cast<double>(idx.size());
      const double coef = 1.0 / (2.0 * n * m);
      double sum = 0.0;
      for (int c = 0; c < r.c(); ++c) {
        const T* rp = r.channel(0, c);
        const T* op = o.channel(0, c);
        T* gp = g ? g->channel(0, c) : nullptr;
        for (int p : idx) {
          const double d = static_cast<double>(rp[p]) - static_cast<double>(op[p]);
          sum += d * d;
          if (gp) gp[p] += static_cast<T>(2.0 * coef * d);
        }
      }
      total += coef * sum;
    }
  }
  return total;
}

template <typename T>
struct LossResult {
  double content = 0.0;
  double style = 0.0;
  double total = 0.0;
  Tensor<T> grad;  // dtotal/dx_r, 1x1xHxW; empty when not requested
};

/// Binds a backbone and a loss spec; evaluates the combined loss of a
/// generated image against cached content/style targets.
template <typename T>
class PerceptualLoss {
 public:
  PerceptualLoss(const FeatureBackbone<T>& backbone, LossSpec spec) : bb_(&backbone), spec_(std::move(spec)) {
    spec_.validate_against(*bb_);
    layers_ = spec_.all_layers();
    for (const auto& l : layers_) deepest_ = std::max(deepest_, bb_->index_of(l));
  }

  const LossSpec& spec() const { return spec_; }
  const FeatureBackbone<T>& backbone() const { return *bb_; }

  LayerMasks masks(const SegMap& seg) const { return layer_masks(seg, *bb_, layers_); }

  StyleTargets<T> style_targets(const Tensor<T>& style_image, const SegMap& style_seg) const {
    return make_style_targets(bb_->extract(style_image, spec_.style_layers), masks(style_seg), spec_);
  }

  FeatureStack<T> content_targets(const Tensor<T>& original) const {
    return bb_->extract(original, spec_.content_layers);
  }

  LossResult<T> evaluate(const Tensor<T>& generated, const LayerMasks& masks_generated,
                         const FeatureStack<T>& content_target, const StyleTargets<T>& style_target,
                         bool want_grad) const {
    const auto trace = bb_->forward(generated, deepest_);
    FeatureStack<T> feats;
    for (const auto& l : layers_) feats[l] = trace.acts[bb_->index_of(l) + 1];
    FeatureStack<T> gc, gs;
    LossResult<T> res;
    res.content = content_loss(feats, content_target, masks_generated, spec_,
                               want_grad && spec_.content_weight > 0 ? &gc : nullptr);
    res.style = style_loss(feats, style_target, masks_generated, spec_,
                           want_grad && spec_.style_weight > 0 ? &gs : nullptr);
    res.total = spec_.content_weight * res.content + spec_.style_weight * res.style;
    if (want_grad) {
      std::map<int, Tensor<T>> injected;
      auto inject = [&](const FeatureStack<T>& grads, double w) {
        for (const auto& [name, g] : grads) {
          Tensor<T> scaled = g;
          for (auto& v : scaled.vec()) v *= static_cast<T>(w);
          auto [it, fresh] = injected.try_emplace(bb_->index_of(name), scaled);
          if (!fresh) it->second += scaled;
        }
      };
      inject(gc, spec_.content_weight);
      inject(gs, spec_.style_weight);
      res.grad = injected.empty() ? Tensor<T>(1, 1, generated.h(), generated.w())
                                  : bb_->backward(trace, injected);
    }
    return res;
  }

 private:
  const FeatureBackbone<T>* bb_;
  LossSpec spec_;
  std::vector<std::string> layers_;
  int deepest_ = 0;
};

/// alpha * L_content + beta * L_style for a generated image x_r, with the
/// gradient with respect to every pixel of x_r.
template <typename T>
LossResult<T> total_loss(const FeatureBackbone<T>& bb, const Tensor<T>& x_r, const Tensor<T>& x_o,
                         const Tensor<T>& x_s, const SegMap& seg_o, const SegMap& seg_s, const LossSpec& spec,
                         bool want_grad = true) {
  require(x_r.same_shape(x_o) && x_r.c() == 1 && x_r.n() == 1, ErrorCode::kShape,
          "generated and original images must be single 1x1xHxW tensors of equal shape");
  require(x_r.h() == seg_o.height() && x_r.w() == seg_o.width(), ErrorCode::kShape, "content mask shape mismatch");
  require(x_s.h() == seg_s.height() && x_s.w() == seg_s.width(), ErrorCode::kShape, "style mask shape mismatch");
  PerceptualLoss<T> loss(bb, spec);
  return loss.evaluate(x_r, loss.masks(seg_o), loss.content_targets(x_o), loss.style_targets(x_s, seg_s), want_grad);
}

struct FiniteDiffStats {
  int probes = 0;
  int redrawn = 0;  // probes discarded because a kink lies within +-eps
};

/// Compares an analytic gradient with central differences at `trials`
/// randomly chosen pixels; returns the largest relative error
/// |a - n| / max(|a|, |n|). Pixels where both magnitudes are below
/// `abs_floor` count as exact.
///
/// Piecewise-smooth losses (ReLU, max-pool) are not differentiable across a
/// kink, and a central difference straddling one measures nothing useful.
/// Each probe is also evaluated at +-eps/2. On a smooth piece the central
/// differences at eps and eps/2 agree, and the one-sided slope asymmetry at
/// eps is twice that at eps/2 (both are curvature). A probe that breaks either
/// relation by more than `kink_tol` (relative) is redrawn at another pixel;
/// for a single kink this keeps the bias of accepted probes below
/// 2.5 * kink_tol. Only numeric values take part in the decision. Pass
/// kink_tol <= 0 to disable.
inline double finite_diff_check(const std::function<double(const Tensor<double>&, Tensor<double>*)>& loss_fn,
                                const Tensor<double>& x, double eps, int trials, std::uint64_t seed = 0,
                                double abs_floor = 1e-12, double kink_tol = 1e-4, FiniteDiffStats* stats = nullptr) {
  require(eps > 0.0 && std::isfinite(eps), ErrorCode::kInvalidArgument, "finite difference step must be > 0");
  require(trials > 0 && !x.empty(), ErrorCode::kInvalidArgument, "need at least one probe");
  Tensor<double> grad;
  const double f0 = loss_fn(x, &grad);
  require(grad.same_shape(x), ErrorCode::kShape, "loss gradient shape differs from input");
  NormalSampler rng(seed);
  double worst = 0.0;
  FiniteDiffStats st;
  Tensor<double> probe = x;
  auto at = [&](std::size_t i, double orig, double d) {
    probe.data()[i] = orig + d;
    const double v = loss_fn(probe, nullptr);
    probe.data()[i] = orig;
    return v;
  };
  const int max_draws = trials * 20;
  for (int draw = 0; st.probes < trials; ++draw) {
    require(draw < max_draws, ErrorCode::kNonFinite, "too many probes straddle kinks; loss is not smooth near x");
    const auto i = static_cast<std::size_t>(rng.next() % x.size());
    const double orig = probe.data()[i];
    const double up = at(i, orig, eps), down = at(i, orig, -eps);
    const double numeric = (up - down) / (2.0 * eps);
    if (kink_tol > 0.0) {
      const double h = eps / 2.0;
      const double up_h = at(i, orig, h), down_h = at(i, orig, -h);
      const double numeric_h = (up_h - down_h) / (2.0 * h);
      const double asym = (up - f0) / eps - (f0 - down) / eps;
      const double asym_h = (up_h - f0) / h - (f0 - down_h) / h;
      const double s = std::max({std::abs(numeric), std::abs(numeric_h), std::abs(up - f0) / eps,
                                 std::abs(f0 - down) / eps});
      if (s >= abs_floor &&
          (std::abs(numeric - numeric_h) > kink_tol * s || std::abs(asym - 2.0 * asym_h) > kink_tol * s)) {
        ++st.redrawn;
        continue;
      }
    }
    ++st.probes;
    const double analytic = grad.data()[i];
    const double scale = std::max(std::abs(numeric), std::abs(analytic));
    if (scale < abs_floor) continue;
    worst = std::max(worst, std::abs(numeric - analytic) / scale);
  }
  if (stats) *stats = st;
  return worst;
}

}  // namespace ctseg
