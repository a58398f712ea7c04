#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ctseg/error.hpp"
#include "ctseg/tensor.hpp"

namespace ctseg {

using Label = std::uint8_t;

struct LabelEntry {
  int id = 0;
  std::string name;
  bool operator==(const LabelEntry&) const = default;
};

/// Ordered label table; id 0 is background and ids are contiguous.
class LabelSchema {
 public:
  explicit LabelSchema(std::vector<LabelEntry> entries) : entries_(std::move(entries)) {
    require(entries_.size() >= 2, ErrorCode::kSchemaViolation, "schema needs background + >=1 segment");
    require(entries_.size() <= 256, ErrorCode::kSchemaViolation, "schema limited to 256 labels");
    std::set<std::string> names;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      require(entries_[i].id == static_cast<int>(i), ErrorCode::kSchemaViolation,
              "label ids must be contiguous from 0 (entry " + std::to_string(i) + ")");
      require(!entries_[i].name.empty(), ErrorCode::kSchemaViolation, "empty label name");
      require(names.insert(entries_[i].name).second, ErrorCode::kSchemaViolation,
              "duplicate label name '" + entries_[i].name + "'");
    }
  }

  static LabelSchema chest_default() {
    return LabelSchema({{0, "background"},
                        {1, "torso_tissue"},
                        {2, "bone"},
                        {3, "lungs"},
                        {4, "heart"},
                        {5, "spinal_cord"},
                        {6, "esophagus"}});
  }

  int size() const { return static_cast<int>(entries_.size()); }
  const std::vector<LabelEntry>& entries() const { return entries_; }
  const std::string& name(int id) const { return entries_.at(static_cast<std::size_t>(id)).name; }
  bool contains(int id) const { return id >= 0 && id < size(); }
  std::optional<int> find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e.id;
    return std::nullopt;
  }
  bool operator==(const LabelSchema&) const = default;

 private:
  std::vector<LabelEntry> entries_;
};

enum class Encoding { kRawHu, kNormalized };

/// 2-D scalar image, row-major. Raw grids hold Hounsfield units; normalized
/// grids hold values in [0, 1].
class IntensityGrid {
 public:
  static constexpr int kMinSide = 8;

  IntensityGrid(int height, int width, std::vector<double> values, Encoding enc)
      : h_(height), w_(width), values_(std::move(values)), enc_(enc) {
    require(h_ >= kMinSide && w_ >= kMinSide, ErrorCode::kShape,
            "image must be at least 8x8, got " + std::to_string(h_) + "x" + std::to_string(w_));
    require(values_.size() == static_cast<std::size_t>(h_) * w_, ErrorCode::kShape, "value count mismatch");
    for (double v : values_) {
      require(std::isfinite(v), ErrorCode::kNonFinite, "non-finite pixel");
      if (enc_ == Encoding::kNormalized)
        require(v >= 0.0 && v <= 1.0, ErrorCode::kEncoding, "normalized pixel outside [0,1]");
    }
  }
  IntensityGrid(int height, int width, Encoding enc, double fill = 0.0)
      : IntensityGrid(height, width, std::vector<double>(static_cast<std::size_t>(height) * width, fill), enc) {}

  int height() const { return h_; }
  int width() const { return w_; }
  Encoding encoding() const { return enc_; }
  bool normalized() const { return enc_ == Encoding::kNormalized; }
  const std::vector<double>& values() const { return values_; }
  double at(int y, int x) const { return values_[static_cast<std::size_t>(y) * w_ + x]; }
  std::size_t size() const { return values_.size(); }

  template <typename T>
  Tensor<T> to_tensor() const {
    Tensor<T> t(1, 1, h_, w_);
    std::transform(values_.begin(), values_.end(), t.data(), [](double v) { return static_cast<T>(v); });
    return t;
  }

  // Builds a normalized grid from a 1x1xHxW tensor, clamping to [0,1].
  template <typename T>
  static IntensityGrid from_tensor(const Tensor<T>& t, int sample = 0) {
    require(t.c() == 1, ErrorCode::kShape, "expected single-channel tensor");
    std::vector<double> v(t.plane());
    const T* src = t.channel(sample, 0);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(static_cast<double>(src[i]), 0.0, 1.0);
    return IntensityGrid(t.h(), t.w(), std::move(v), Encoding::kNormalized);
  }

  bool operator==(const IntensityGrid&) const = default;

 private:
  int h_, w_;
  std::vector<double> values_;
  Encoding enc_;
};

struct Window {
  double level = 40.0;
  double width = 400.0;
  bool operator==(const Window&) const = default;
};

inline IntensityGrid apply_window(const IntensityGrid& grid, double level, double width) {
  require(width > 0.0 && std::isfinite(width), ErrorCode::kInvalidWindow, "window width must be > 0");
  require(!grid.normalized(), ErrorCode::kEncoding, "apply_window expects raw HU input");
  const double lo = level - width / 2.0;
  std::vector<double> out(grid.size());
  std::transform(grid.values().begin(), grid.values().end(), out.begin(),
                 [&](double hu) { return std::clamp((hu - lo) / width, 0.0, 1.0); });
  return IntensityGrid(grid.height(), grid.width(), std::move(out), Encoding::kNormalized);
}

inline IntensityGrid apply_window(const IntensityGrid& grid, const Window& w) {
  return apply_window(grid, w.level, w.width);
}

/// Binary grid of arbitrary size (no minimum side).
struct BinaryGrid {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  BinaryGrid() = default;
  BinaryGrid(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), bits(static_cast<std::size_t>(h) * w, fill) {}
  BinaryGrid(int h, int w, std::vector<std::uint8_t> b) : height(h), width(w), bits(std::move(b)) {
    require(bits.size() == static_cast<std::size_t>(h) * w, ErrorCode::kShape, "binary grid size mismatch");
  }

  std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
  bool operator==(const BinaryGrid&) const = default;
};

/// Label map tied to a schema.
class SegMap {
 public:
  SegMap(int height, int width, std::vector<Label> labels, std::shared_ptr<const LabelSchema> schema)
      : h_(height), w_(width), labels_(std::move(labels)), schema_(std::move(schema)) {
    require(schema_ != nullptr, ErrorCode::kSchemaViolation, "segmap without schema");
    require(h_ > 0 && w_ > 0, ErrorCode::kShape, "empty segmap");
    require(labels_.size() == static_cast<std::size_t>(h_) * w_, ErrorCode::kShape, "label count mismatch");
    for (Label l : labels_)
      require(schema_->contains(l), ErrorCode::kSchemaViolation,
              "label " + std::to_string(l) + " not in schema of size " + std::to_string(schema_->size()));
  }

  int height() const { return h_; }
  int width() const { return w_; }
  const std::vector<Label>& labels() const { return labels_; }
  Label at(int y, int x) const { return labels_[static_cast<std::size_t>(y) * w_ + x]; }
  const LabelSchema& schema() const { return *schema_; }
  const std::shared_ptr<const LabelSchema>& schema_ptr() const { return schema_; }
  std::size_t size() const { return labels_.size(); }

  bool operator==(const SegMap& o) const {
    return h_ == o.h_ && w_ == o.w_ && labels_ == o.labels_ && *schema_ == *o.schema_;
  }

 private:
  int h_, w_;
  std::vector<Label> labels_;
  std::shared_ptr<const LabelSchema> schema_;
};

/// One binary channel per schema label; the channels partition the grid.
struct MaskStack {
  std::vector<BinaryGrid> channels;
  int size() const { return static_cast<int>(channels.size()); }
  const BinaryGrid& operator[](int c) const { return channels[static_cast<std::size_t>(c)]; }
};

inline MaskStack one_hot(const SegMap& mask) {
  const int c = mask.schema().size();
  MaskStack out;
  out.channels.assign(static_cast<std::size_t>(c), BinaryGrid(mask.height(), mask.width()));
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const Label l = mask.labels()[i];
    require(l < c, ErrorCode::kSchemaViolation, "label outside schema");
    out.channels[l].bits[i] = 1;
  }
  return out;
}

/// Raw-label variant used where no SegMap can be built (out-of-schema input).
inline MaskStack one_hot(int height, int width, const std::vector<Label>& labels, int schema_size) {
  require(labels.size() == static_cast<std::size_t>(height) * width, ErrorCode::kShape, "label count mismatch");
  MaskStack out;
  out.channels.assign(static_cast<std::size_t>(schema_size), BinaryGrid(height, width));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] < schema_size, ErrorCode::kSchemaViolation,
            "label " + std::to_string(labels[i]) + " outside schema of size " + std::to_string(schema_size));
    out.channels[labels[i]].bits[i] = 1;
  }
  return out;
}

inline BinaryGrid downsample_mask(const BinaryGrid& channel, int factor) {
  require(factor >= 1, ErrorCode::kShape, "downsample factor must be >= 1");
  require(channel.height % factor == 0 && channel.width % factor == 0, ErrorCode::kShape,
          "factor " + std::to_string(factor) + " does not divide " + std::to_string(channel.height) + "x" +
              std::to_string(channel.width));
  const int h = channel.height / factor, w = channel.width / factor;
  BinaryGrid out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.bits[static_cast<std::size_t>(y) * w + x] = channel.at(y * factor, x * factor);
  return out;
}

inline SegMap downsample_segmap(const SegMap& m, int factor) {
  require(factor >= 1 && m.height() % factor == 0 && m.width() % factor == 0, ErrorCode::kShape,
          "segmap downsample: factor does not divide extent");
  const int h = m.height() / factor, w = m.width() / factor;
  std::vector<Label> out(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out[static_cast<std::size_t>(y) * w + x] = m.at(y * factor, x * factor);
  return SegMap(h, w, std::move(out), m.schema_ptr());
}

/// One-hot encoding as a 1xCxHxW network input.
template <typename T>
Tensor<T> one_hot_tensor(const SegMap& m) {
  Tensor<T> t(1, m.schema().size(), m.height(), m.width());
  for (std::size_t i = 0; i < m.size(); ++i) t.channel(0, m.labels()[i])[i] = T{1};
  return t;
}

enum class Split { kTrain, kTest, kStyle };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kTest: return "test";
    case Split::kStyle: return "style";
  }
  return "train";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  if (s == "style") return Split::kStyle;
  throw Error(ErrorCode::kParse, "unknown split '" + s + "'");
}

struct AnnotatedSample {
  std::string id;
  IntensityGrid image;
  SegMap mask;
  std::string domain;
  Split split = Split::kTrain;

  AnnotatedSample(std::string id_, IntensityGrid image_, SegMap mask_, std::string domain_, Split split_)
      : id(std::move(id_)), image(std::move(image_)), mask(std::move(mask_)), domain(std::move(domain_)),
        split(split_) {
    require(image.height() == mask.height() && image.width() == mask.width(), ErrorCode::kShape,
            "sample '" + id + "': image and mask shapes differ");
  }
};

}  // namespace ctseg
