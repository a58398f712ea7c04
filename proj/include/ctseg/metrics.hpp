#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctseg/checkpoint.hpp"
#include "ctseg/data_model.hpp"
#include "ctseg/image_io.hpp"
#include "ctseg/manifest.hpp"

namespace ctseg {

/// counts[t][p] = pixels with truth t predicted as p.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes = 0)
      : c_(classes), counts_(static_cast<std::size_t>(classes) * classes, 0) {
    require(classes >= 0, ErrorCode::kInvalidArgument, "class count must be >= 0");
  }

  int classes() const { return c_; }
  std::uint64_t at(int truth, int pred) const { return counts_[static_cast<std::size_t>(truth) * c_ + pred]; }
  std::uint64_t& at(int truth, int pred) { return counts_[static_cast<std::size_t>(truth) * c_ + pred]; }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto v : counts_) s += v;
    return s;
  }
  std::uint64_t trace() const {
    std::uint64_t s = 0;
    for (int i = 0; i < c_; ++i) s += at(i, i);
    return s;
  }
  std::uint64_t row_total(int t) const {
    std::uint64_t s = 0;
    for (int p = 0; p < c_; ++p) s += at(t, p);
    return s;
  }
  std::uint64_t col_total(int p) const {
    std::uint64_t s = 0;
    for (int t = 0; t < c_; ++t) s += at(t, p);
    return s;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    require(o.c_ == c_, ErrorCode::kShape, "confusion matrices differ in class count");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
  }
  bool operator==(const ConfusionMatrix&) const = default;

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (int t = 0; t < c_; ++t) {
      nlohmann::json r = nlohmann::json::array();
      for (int p = 0; p < c_; ++p) r.push_back(at(t, p));
      rows.push_back(std::move(r));
    }
    return rows;
  }

  static ConfusionMatrix from_json(const nlohmann::json& j) {
    ConfusionMatrix cm(static_cast<int>(j.size()));
    for (int t = 0; t < cm.c_; ++t) {
      require(j[t].size() == j.size(), ErrorCode::kParse, "confusion matrix must be square");
      for (int p = 0; p < cm.c_; ++p) cm.at(t, p) = j[t][p].get<std::uint64_t>();
    }
    return cm;
  }

 private:
  int c_;
  std::vector<std::uint64_t> counts_;
};

inline ConfusionMatrix confusion(const SegMap& pred, const SegMap& truth) {
  require(pred.height() == truth.height() && pred.width() == truth.width(), ErrorCode::kShape,
          "prediction and truth shapes differ");
  require(pred.schema() == truth.schema(), ErrorCode::kMismatch, "prediction and truth schemas differ");
  ConfusionMatrix cm(truth.schema().size());
  for (std::size_t i = 0; i < truth.size(); ++i) ++cm.at(truth.labels()[i], pred.labels()[i]);
  return cm;
}

inline double pixel_accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  require(total > 0, ErrorCode::kEmptyInput, "pixel accuracy of an empty confusion matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(total);
}

/// 2 TP / (|truth| + |pred|); nullopt when the class is absent from both.
inline std::optional<double> dice(const ConfusionMatrix& cm, int c) {
  require(c >= 0 && c < cm.classes(), ErrorCode::kInvalidArgument, "class id " + std::to_string(c) + " out of range");
  const auto denom = cm.row_total(c) + cm.col_total(c);
  if (denom == 0) return std::nullopt;
  return 2.0 * static_cast<double>(cm.at(c, c)) / static_cast<double>(denom);
}

struct MetricsReport {
  std::string model_id;
  std::string dataset_id;
  std::string split = "test";
  std::size_t n_samples = 0;
  ConfusionMatrix confusion;
  double pixel_accuracy = 0;
  std::vector<std::string> class_names;
  std::vector<std::optional<double>> dice;
  std::optional<double> mean_dice;  // over defined classes other than "background"

  std::optional<double> dice_of(const std::string& name) const {
    for (std::size_t i = 0; i < class_names.size(); ++i)
      if (class_names[i] == name) return dice[i];
    throw Error(ErrorCode::kUnknownLabel, "report has no class '" + name + "'");
  }
};

inline MetricsReport make_report(const ConfusionMatrix& cm, const LabelSchema& schema, std::size_t n_samples,
                                 std::string model_id, std::string dataset_id, std::string split) {
  require(cm.classes() == schema.size(), ErrorCode::kMismatch, "confusion matrix does not match the schema");
  MetricsReport r;
  r.model_id = std::move(model_id);
  r.dataset_id = std::move(dataset_id);
  r.split = std::move(split);
  r.n_samples = n_samples;
  r.confusion = cm;
  r.pixel_accuracy = pixel_accuracy(cm);
  double sum = 0;
  int defined = 0;
  for (int c = 0; c < schema.size(); ++c) {
    r.class_names.push_back(schema.name(c));
    r.dice.push_back(dice(cm, c));
    if (schema.name(c) != "background" && r.dice.back()) {
      sum += *r.dice.back();
      ++defined;
    }
  }
  if (defined > 0) r.mean_dice = sum / defined;
  return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json d = nlohmann::json::object();
  for (std::size_t i = 0; i < r.class_names.size(); ++i)
    d[r.class_names[i]] = r.dice[i] ? nlohmann::json(*r.dice[i]) : nlohmann::json(nullptr);
  return {{"classes", r.class_names},
          {"model_id", r.model_id},
          {"dataset_id", r.dataset_id},
          {"split", r.split},
          {"n_samples", r.n_samples},
          {"pixel_accuracy", r.pixel_accuracy},
          {"dice", d},
          {"mean_dice", r.mean_dice ? nlohmann::json(*r.mean_dice) : nlohmann::json(nullptr)},
          {"confusion", r.confusion.to_json()}};
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.model_id = j.at("model_id").get<std::string>();
  r.dataset_id = j.at("dataset_id").get<std::string>();
  r.split = j.value("split", std::string("test"));
  r.n_samples = j.at("n_samples").get<std::size_t>();
  r.pixel_accuracy = j.at("pixel_accuracy").get<double>();
  r.confusion = ConfusionMatrix::from_json(j.at("confusion"));
  // Object keys come back sorted; "classes" keeps the schema order.
  const auto& d = j.at("dice");
  std::vector<std::string> names;
  if (j.contains("classes")) {
    names = j.at("classes").get<std::vector<std::string>>();
  } else {
    for (auto it = d.begin(); it != d.end(); ++it) names.push_back(it.key());
  }
  for (const auto& name : names) {
    const auto& v = d.at(name);
    r.class_names.push_back(name);
    r.dice.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
  }
  if (j.contains("mean_dice") && !j.at("mean_dice").is_null()) r.mean_dice = j.at("mean_dice").get<double>();
  return r;
}

inline void save_report(const MetricsReport& r, const fs::path& path) {
  io::write_bytes(path, to_json(r).dump(2) + "\n");
}

inline MetricsReport load_report(const fs::path& path) {
  require(fs::exists(path), ErrorCode::kMissingFile, "report '" + path.string() + "' not found");
  try {
    return report_from_json(nlohmann::json::parse(io::read_bytes(path)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, "report '" + path.string() + "': " + e.what());
  }
}

/// Identifier of a dataset: SHA-256 over its canonical manifest JSON and the
/// hashes of every image and mask file.
inline std::string dataset_id(const DatasetManifest& m);

using Predictor = std::function<SegMap(const AnnotatedSample&)>;

/// Confusion over every sample of `split`, aggregated in manifest order.
inline MetricsReport evaluate_model(const Predictor& predictor, const DatasetManifest& m, Split split,
                                    std::string model_id, std::string data_id) {
  const auto idx = m.indices(split);
  require(!idx.empty(), ErrorCode::kEmptyInput, "split '" + to_string(split) + "' is empty");
  ConfusionMatrix cm(m.schema->size());
  for (std::size_t i : idx) {
    require(fs::exists(m.resolve(m.samples[i].mask)), ErrorCode::kMissingFile,
            "sample '" + m.samples[i].id + "' has no ground-truth mask");
    const AnnotatedSample s = load_sample(m, i);
    cm += confusion(predictor(s), s.mask);
  }
  return make_report(cm, *m.schema, idx.size(), std::move(model_id), std::move(data_id), to_string(split));
}

struct Comparison {
  double delta = 0;  // augmented - baseline pixel accuracy
  bool improved = false;
  std::vector<std::string> dice_improved;  // foreground classes with higher Dice
  std::vector<std::string> dice_compared;  // foreground classes defined in both
};

inline Comparison compare_reports(const MetricsReport& baseline, const MetricsReport& augmented) {
  require(baseline.dataset_id == augmented.dataset_id && baseline.split == augmented.split, ErrorCode::kMismatch,
          "reports evaluate different datasets or splits");
  Comparison c;
  c.delta = augmented.pixel_accuracy - baseline.pixel_accuracy;
  c.improved = c.delta > 0;
  for (std::size_t i = 0; i < baseline.class_names.size(); ++i) {
    const auto& name = baseline.class_names[i];
    if (name == "background") continue;
    const auto b = baseline.dice[i];
    const auto a = augmented.dice_of(name);
    if (!a || !b) continue;
    c.dice_compared.push_back(name);
    if (*a > *b) c.dice_improved.push_back(name);
  }
  return c;
}

inline nlohmann::json to_json(const Comparison& c) {
  return {{"delta", c.delta},
          {"verdict", c.improved ? "improved" : "not improved"},
          {"dice_improved", c.dice_improved},
          {"dice_compared", c.dice_compared}};
}

namespace montage_detail {

constexpr int kTile = 128;
constexpr int kGap = 4;

// 3x5 digit glyphs, rows top to bottom, 3 bits per row.
constexpr std::array<std::array<std::uint8_t, 5>, 10> kDigits = {{
    {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1},
    {7, 4, 7, 1, 7}, {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7},
}};

struct Canvas {
  int h, w;
  std::vector<std::uint8_t> rgb;
  Canvas(int h_, int w_) : h(h_), w(w_), rgb(static_cast<std::size_t>(h_) * w_ * 3, 32) {}
  void put(int y, int x, const io::Rgb& c) {
    if (y < 0 || x < 0 || y >= h || x >= w) return;
    auto* p = &rgb[(static_cast<std::size_t>(y) * w + x) * 3];
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  }
};

inline std::uint8_t gray8(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

// Nearest-neighbour resample of a side x side source into a kTile square.
inline void blit(Canvas& cv, int oy, int ox, int sh, int sw, const std::function<io::Rgb(int, int)>& px) {
  for (int y = 0; y < kTile; ++y)
    for (int x = 0; x < kTile; ++x) cv.put(oy + y, ox + x, px(y * sh / kTile, x * sw / kTile));
}

inline void digit(Canvas& cv, int oy, int ox, int d, int scale, const io::Rgb& c) {
  for (int r = 0; r < 5; ++r)
    for (int b = 0; b < 3; ++b)
      if (kDigits[static_cast<std::size_t>(d)][static_cast<std::size_t>(r)] & (4 >> b))
        for (int dy = 0; dy < scale; ++dy)
          for (int dx = 0; dx < scale; ++dx) cv.put(oy + r * scale + dy, ox + b * scale + dx, c);
}

}  // namespace montage_detail

/// Grid PNG, one row per sample: image | truth | baseline | augmented, the
/// label columns drawn as palette colours blended over the image. A legend
/// strip at the bottom shows each label's colour next to its id.
inline void render_montage(const std::vector<IntensityGrid>& images, const std::vector<SegMap>& truths,
                           const std::vector<SegMap>& preds_baseline, const std::vector<SegMap>& preds_augmented,
                           const fs::path& path) {
  using namespace montage_detail;
  const std::size_t n = images.size();
  require(n >= 1, ErrorCode::kEmptyInput, "montage needs at least one sample");
  require(truths.size() == n && preds_baseline.size() == n && preds_augmented.size() == n, ErrorCode::kMismatch,
          "montage inputs differ in length");
  const int classes = truths.front().schema().size();
  const int legend_h = 24;
  const int rows = static_cast<int>(n);
  Canvas cv(rows * (kTile + kGap) + kGap + legend_h, 4 * (kTile + kGap) + kGap);
  const auto& pal = io::label_palette();
  for (int r = 0; r < rows; ++r) {
    const auto& img = images[static_cast<std::size_t>(r)];
    require(img.normalized(), ErrorCode::kEncoding, "montage images must be normalized");
    const int oy = kGap + r * (kTile + kGap);
    blit(cv, oy, kGap, img.height(), img.width(), [&](int y, int x) {
      const auto g = gray8(img.at(y, x));
      return io::Rgb{g, g, g};
    });
    const SegMap* maps[3] = {&truths[static_cast<std::size_t>(r)], &preds_baseline[static_cast<std::size_t>(r)],
                             &preds_augmented[static_cast<std::size_t>(r)]};
    for (int col = 0; col < 3; ++col) {
      const SegMap& m = *maps[col];
      require(m.height() == img.height() && m.width() == img.width(), ErrorCode::kShape,
              "montage mask shape differs from its image");
      blit(cv, oy, kGap + (col + 1) * (kTile + kGap), m.height(), m.width(), [&](int y, int x) {
        const int g = gray8(img.at(y, x));
        const Label l = m.at(y, x);
        if (l == 0) return io::Rgb{static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(g)};
        const auto& c = pal[l];
        return io::Rgb{static_cast<std::uint8_t>((g + 3 * c[0]) / 4), static_cast<std::uint8_t>((g + 3 * c[1]) / 4),
                       static_cast<std::uint8_t>((g + 3 * c[2]) / 4)};
      });
    }
  }
  const int ly = rows * (kTile + kGap) + kGap + 4;
  for (int c = 0; c < classes; ++c) {
    const int lx = kGap + c * 32;
    for (int y = 0; y < 15; ++y)
      for (int x = 0; x < 15; ++x) cv.put(ly + y, lx + x, pal[static_cast<std::size_t>(c)]);
    const io::Rgb white{235, 235, 235};
    if (c >= 10) digit(cv, ly, lx + 17, (c / 10) % 10, 3, white);
    digit(cv, ly, lx + (c >= 10 ? 28 : 18), c % 10, 3, white);
  }
  io::write_rgb(path, cv.h, cv.w, cv.rgb);
}

inline std::string dataset_id(const DatasetManifest& m) {
  std::string acc = manifest_to_json(m).dump();
  for (const auto& s : m.samples) {
    acc += sha256_file(m.resolve(s.image));
    acc += sha256_file(m.resolve(s.mask));
  }
  return sha256_hex(acc).substr(0, 16);
}

}  // namespace ctseg
