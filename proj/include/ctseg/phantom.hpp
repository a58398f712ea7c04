#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctseg/data_model.hpp"
#include "ctseg/image_io.hpp"
#include "ctseg/manifest.hpp"
#include "ctseg/rng.hpp"

namespace ctseg {

/// Texture of one acquisition domain.
struct TextureDomain {
  double noise_std = 0.02;
  double corr_length = 1.0;  // Gaussian smoothing sigma in px, 0 = white
  double streak_amp = 0.0;   // std of the streak field inside the body
  double streak_angle_deg = 180.0;  // streak directions drawn from [0, this)
  int streak_count = 3;
};

/// Label ids follow LabelSchema::chest_default().
struct PhantomSpec {
  int side = 128;
  double jitter = 0.03;  // anatomy center/axis randomization, fraction of side
  std::array<double, 7> intensity = {0.02, 0.55, 0.92, 0.15, 0.68, 0.42, 0.32};
  TextureDomain domain_a{0.02, 1.0, 0.0, 180.0, 3};
  TextureDomain domain_b{0.12, 2.0, 0.05, 180.0, 3};

  const TextureDomain& domain(const std::string& name) const {
    require(name == "A" || name == "B", ErrorCode::kInvalidArgument, "unknown phantom domain '" + name + "'");
    return name == "A" ? domain_a : domain_b;
  }

  void validate() const {
    require(side >= 32, ErrorCode::kInvalidArgument, "phantom side must be >= 32");
    require(jitter >= 0.0 && jitter <= 0.1, ErrorCode::kInvalidArgument, "phantom jitter must be in [0, 0.1]");
    for (std::size_t i = 0; i < intensity.size(); ++i) {
      require(intensity[i] >= 0.0 && intensity[i] <= 1.0, ErrorCode::kInvalidArgument,
              "phantom intensities must be in [0,1]");
      for (std::size_t j = i + 1; j < intensity.size(); ++j)
        require(std::abs(intensity[i] - intensity[j]) >= 0.08, ErrorCode::kInvalidArgument,
                "phantom intensities of labels " + std::to_string(i) + " and " + std::to_string(j) +
                    " are closer than 0.08");
    }
    for (const auto* d : {&domain_a, &domain_b})
      require(d->noise_std >= 0.0 && d->corr_length >= 0.0 && d->streak_amp >= 0.0 && d->streak_count >= 0,
              ErrorCode::kInvalidArgument, "phantom texture parameters must be >= 0");
  }
};

inline nlohmann::json to_json(const TextureDomain& d) {
  return {{"noise_std", d.noise_std},
          {"corr_length", d.corr_length},
          {"streak_amp", d.streak_amp},
          {"streak_angle_deg", d.streak_angle_deg},
          {"streak_count", d.streak_count}};
}

inline TextureDomain texture_domain_from_json(const nlohmann::json& j, TextureDomain d) {
  d.noise_std = j.value("noise_std", d.noise_std);
  d.corr_length = j.value("corr_length", d.corr_length);
  d.streak_amp = j.value("streak_amp", d.streak_amp);
  d.streak_angle_deg = j.value("streak_angle_deg", d.streak_angle_deg);
  d.streak_count = j.value("streak_count", d.streak_count);
  return d;
}

inline nlohmann::json to_json(const PhantomSpec& s) {
  return {{"side", s.side},
          {"jitter", s.jitter},
          {"intensity", s.intensity},
          {"domain_a", to_json(s.domain_a)},
          {"domain_b", to_json(s.domain_b)}};
}

inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  PhantomSpec s;
  s.side = j.value("side", s.side);
  s.jitter = j.value("jitter", s.jitter);
  if (j.contains("intensity")) s.intensity = j.at("intensity").get<std::array<double, 7>>();
  if (j.contains("domain_a")) s.domain_a = texture_domain_from_json(j.at("domain_a"), s.domain_a);
  if (j.contains("domain_b")) s.domain_b = texture_domain_from_json(j.at("domain_b"), s.domain_b);
  s.validate();
  return s;
}

namespace phantom_detail {

struct Ellipse {
  double cx, cy, ax, ay;  // fractions of side
  // Squared normalized radius of (x, y) with respect to this ellipse.
  double r2(double x, double y) const {
    const double dx = (x - cx) / ax, dy = (y - cy) / ay;
    return dx * dx + dy * dy;
  }
};

struct Anatomy {
  Ellipse torso;
  double ring_inner, ring_outer;  // normalized torso radii of the rib ring
  Ellipse lung_l, lung_r, heart, vertebra, cord, esophagus;
};

inline Anatomy sample_anatomy(double jitter, NormalSampler& rng) {
  auto j = [&](double v) { return v + rng.uniform(-jitter, jitter) / 2.0; };
  auto js = [&](double v) { return v * (1.0 + rng.uniform(-2.0 * jitter, 2.0 * jitter)); };
  Anatomy a;
  a.torso = {j(0.5), j(0.5), js(0.44), js(0.34)};
  a.ring_inner = 0.88 + rng.uniform(-0.02, 0.02);
  a.ring_outer = a.ring_inner + 0.07;
  const double tx = a.torso.cx, ty = a.torso.cy;
  a.lung_l = {j(tx - 0.17), j(ty - 0.04), js(0.1), js(0.15)};
  a.lung_r = {j(tx + 0.17), j(ty - 0.04), js(0.1), js(0.15)};
  a.heart = {j(tx + 0.02), j(ty + 0.04), js(0.09), js(0.08)};
  const double vx = j(tx), vy = j(ty + 0.2);
  a.vertebra = {vx, vy, js(0.055), js(0.05)};
  a.cord = {vx, vy, js(0.025), js(0.025)};
  a.esophagus = {j(tx), j(ty + 0.125), js(0.022), js(0.022)};
  return a;
}

// Every organ must sit inside the rib ring, and the cord inside the vertebra.
inline bool plausible(const Anatomy& a) {
  const double lim = a.ring_inner * a.ring_inner;
  for (const Ellipse* e : {&a.lung_l, &a.lung_r, &a.heart, &a.vertebra, &a.esophagus}) {
    for (int k = 0; k < 32; ++k) {
      const double t = 2.0 * std::numbers::pi * k / 32.0;
      if (a.torso.r2(e->cx + e->ax * std::cos(t), e->cy + e->ay * std::sin(t)) >= lim) return false;
    }
  }
  return a.cord.ax < a.vertebra.ax && a.cord.ay < a.vertebra.ay;
}

inline std::vector<Label> rasterize(const Anatomy& a, int side) {
  std::vector<Label> lab(static_cast<std::size_t>(side) * side, 0);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const double px = (x + 0.5) / side, py = (y + 0.5) / side;
      const double rt = a.torso.r2(px, py);
      Label l = 0;
      if (rt < 1.0) l = 1;
      if (rt >= a.ring_inner * a.ring_inner && rt < a.ring_outer * a.ring_outer && rt < 1.0) l = 2;
      if (a.lung_l.r2(px, py) < 1.0 || a.lung_r.r2(px, py) < 1.0) l = 3;
      if (a.heart.r2(px, py) < 1.0) l = 4;
      if (a.esophagus.r2(px, py) < 1.0) l = 6;
      if (a.vertebra.r2(px, py) < 1.0) l = 2;
      if (a.cord.r2(px, py) < 1.0) l = 5;
      lab[static_cast<std::size_t>(y) * side + x] = l;
    }
  return lab;
}

// Separable Gaussian blur with reflective borders.
inline std::vector<double> gaussian_blur(const std::vector<double>& in, int side, double sigma) {
  if (sigma <= 0.0) return in;
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double ks = 0;
  for (int i = -r; i <= r; ++i) ks += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= ks;
  auto reflect = [side](int i) {
    while (i < 0 || i >= side) i = i < 0 ? -i - 1 : 2 * side - i - 1;
    return i;
  };
  std::vector<double> tmp(in.size()), out(in.size());
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * in[static_cast<std::size_t>(y) * side + reflect(x + i)];
      tmp[static_cast<std::size_t>(y) * side + x] = s;
    }
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * tmp[static_cast<std::size_t>(reflect(y + i)) * side + x];
      out[static_cast<std::size_t>(y) * side + x] = s;
    }
  return out;
}

inline void normalize_unit_std(std::vector<double>& v) {
  double mean = 0;
  for (double e : v) mean += e;
  mean /= static_cast<double>(v.size());
  double var = 0;
  for (double e : v) var += (e - mean) * (e - mean);
  const double sd = std::sqrt(var / static_cast<double>(v.size()));
  for (auto& e : v) e = sd > 0 ? (e - mean) / sd : 0.0;
}

}  // namespace phantom_detail

inline std::shared_ptr<const LabelSchema> chest_schema() {
  static const auto s = std::make_shared<const LabelSchema>(LabelSchema::chest_default());
  return s;
}

/// One phantom slice. The anatomy depends only on `sample_seed`; the texture
/// on `sample_seed` and the domain, so the same seed in domains A and B gives
/// the same mask with different textures.
inline AnnotatedSample generate_phantom(const PhantomSpec& spec, const std::string& domain, std::uint64_t sample_seed,
                                        std::string id = "phantom", Split split = Split::kTrain) {
  spec.validate();
  const TextureDomain& tex = spec.domain(domain);
  const int side = spec.side;
  NormalSampler arng(derive_seed(sample_seed, "anatomy"));
  phantom_detail::Anatomy a;
  int attempt = 0;
  for (;; ++attempt) {
    require(attempt < 64, ErrorCode::kGeometry, "could not sample plausible phantom anatomy");
    a = phantom_detail::sample_anatomy(spec.jitter, arng);
    if (phantom_detail::plausible(a)) break;
  }
  std::vector<Label> labels = phantom_detail::rasterize(a, side);

  NormalSampler trng(derive_seed(derive_seed(sample_seed, "texture"), domain));
  const std::size_t n = labels.size();
  std::vector<double> noise(n);
  for (auto& v : noise) v = trng();
  noise = phantom_detail::gaussian_blur(noise, side, tex.corr_length);
  phantom_detail::normalize_unit_std(noise);

  std::vector<double> streak(n, 0.0);
  if (tex.streak_amp > 0.0 && tex.streak_count > 0) {
    for (int k = 0; k < tex.streak_count; ++k) {
      const double th = trng.uniform(0.0, tex.streak_angle_deg) * std::numbers::pi / 180.0;
      const double period = trng.uniform(4.0, 10.0);
      const double phase = trng.uniform(0.0, 2.0 * std::numbers::pi);
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
          streak[static_cast<std::size_t>(y) * side + x] +=
              std::sin(2.0 * std::numbers::pi * (x * std::cos(th) + y * std::sin(th)) / period + phase);
    }
    phantom_detail::normalize_unit_std(streak);
  }

  std::vector<double> img(n);
  for (std::size_t i = 0; i < n; ++i) {
    double v = spec.intensity[labels[i]] + tex.noise_std * noise[i];
    if (labels[i] != 0) v += tex.streak_amp * streak[i];
    img[i] = std::clamp(v, 0.0, 1.0);
  }
  return AnnotatedSample(std::move(id), IntensityGrid(side, side, std::move(img), Encoding::kNormalized),
                         SegMap(side, side, std::move(labels), chest_schema()), domain, split);
}

/// Standard deviation of (pixel - mean of its segment) over pixels of `label`.
inline double residual_std(const AnnotatedSample& s, Label label = 1) {
  double sum = 0, sq = 0;
  std::size_t cnt = 0;
  const auto& v = s.image.values();
  const auto& l = s.mask.labels();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (l[i] == label) {
      sum += v[i];
      ++cnt;
    }
  require(cnt > 1, ErrorCode::kEmptyInput, "label absent from sample");
  const double mean = sum / static_cast<double>(cnt);
  for (std::size_t i = 0; i < v.size(); ++i)
    if (l[i] == label) sq += (v[i] - mean) * (v[i] - mean);
  return std::sqrt(sq / static_cast<double>(cnt));
}

/// Anatomy seed of the i-th sample of a split; the salts keep splits disjoint.
inline std::uint64_t phantom_sample_seed(std::uint64_t seed, Split split, int i) {
  return derive_seed(derive_seed(seed, to_string(split)), static_cast<std::uint64_t>(i));
}

/// Writes a phantom dataset under `out` (images/, masks/, manifest.json):
/// train split from domain A, test and style splits from domain B.
inline DatasetManifest generate_phantom_dataset(const PhantomSpec& spec, int n_train, int n_test, int n_style,
                                                std::uint64_t seed, const fs::path& out) {
  require(n_train >= 0 && n_test >= 0 && n_style >= 0, ErrorCode::kInvalidArgument, "sample counts must be >= 0");
  require(n_train + n_test + n_style > 0, ErrorCode::kEmptyInput, "phantom dataset would be empty");
  spec.validate();
  fs::create_directories(out / "images");
  fs::create_directories(out / "masks");
  DatasetManifest m;
  m.schema = chest_schema();
  m.root = out;
  auto emit = [&](Split split, const std::string& domain, const std::string& prefix, int count) {
    for (int i = 0; i < count; ++i) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%03d", i);
      const std::string id = prefix + buf;
      const auto s = generate_phantom(spec, domain, phantom_sample_seed(seed, split, i), id, split);
      const std::string img = "images/" + id + ".png", mask = "masks/" + id + ".png";
      io::save_image(s.image, out / img);
      io::save_mask(s.mask, out / mask);
      m.samples.push_back({id, img, mask, domain, split, std::nullopt, std::nullopt});
    }
  };
  emit(Split::kTrain, "A", "trainA_", n_train);
  emit(Split::kTest, "B", "testB_", n_test);
  emit(Split::kStyle, "B", "styleB_", n_style);
  save_manifest(m, out / "manifest.json");
  return m;
}

}  // namespace ctseg
