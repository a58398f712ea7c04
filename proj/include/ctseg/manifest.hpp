#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctseg/data_model.hpp"
#include "ctseg/image_io.hpp"

namespace ctseg {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct SampleRef {
  std::string id;
  std::string image;  // relative to the manifest directory
  std::string mask;
  std::string domain;
  Split split = Split::kTrain;
  // Provenance for expanded datasets.
  std::optional<std::string> source_id;
  std::optional<std::string> style_id;

  bool operator==(const SampleRef&) const = default;
};

struct DatasetManifest {
  static constexpr int kVersion = 1;

  int version = kVersion;
  std::shared_ptr<const LabelSchema> schema = std::make_shared<LabelSchema>(LabelSchema::chest_default());
  std::optional<Window> window;  // present => images are raw HU
  std::vector<SampleRef> samples;
  fs::path root;  // directory that relative paths resolve against

  fs::path resolve(const std::string& rel) const { return root / rel; }
  Encoding image_encoding() const { return window ? Encoding::kRawHu : Encoding::kNormalized; }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].split == s) out.push_back(i);
    return out;
  }

  std::optional<std::size_t> find(const std::string& id) const {
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].id == id) return i;
    return std::nullopt;
  }

  bool same_content(const DatasetManifest& o) const {
    return version == o.version && *schema == *o.schema && window == o.window && samples == o.samples;
  }
};

inline json manifest_to_json(const DatasetManifest& m) {
  json j;
  j["version"] = m.version;
  json schema = json::array();
  for (const auto& e : m.schema->entries()) schema.push_back({{"id", e.id}, {"name", e.name}});
  j["schema"] = schema;
  j["window"] = m.window ? json{{"level", m.window->level}, {"width", m.window->width}} : json(nullptr);
  json samples = json::array();
  for (const auto& s : m.samples) {
    json js = {{"id", s.id}, {"image", s.image}, {"mask", s.mask}, {"domain", s.domain}, {"split", to_string(s.split)}};
    if (s.source_id) js["source_id"] = *s.source_id;
    if (s.style_id) js["style_id"] = *s.style_id;
    samples.push_back(std::move(js));
  }
  j["samples"] = samples;
  return j;
}

/// Keys are emitted in sorted order so identical manifests serialize to
/// identical bytes.
inline void save_manifest(const DatasetManifest& m, const fs::path& path) {
  io::write_bytes(path, manifest_to_json(m).dump(2) + "\n");
}

inline std::shared_ptr<const LabelSchema> parse_schema(const json& j) {
  require(j.is_array(), ErrorCode::kParse, "schema must be an array");
  std::vector<LabelEntry> entries;
  for (const auto& e : j) entries.push_back({e.at("id").get<int>(), e.at("name").get<std::string>()});
  return std::make_shared<LabelSchema>(std::move(entries));
}

struct ManifestLoadOptions {
  bool check_files = true;
  bool check_mask_labels = true;
};

inline DatasetManifest load_manifest(const fs::path& path, ManifestLoadOptions opts = {}) {
  require(fs::exists(path), ErrorCode::kMissingFile, "manifest '" + path.string() + "' not found");
  json j;
  try {
    j = json::parse(io::read_bytes(path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, "manifest '" + path.string() + "': " + e.what());
  }
  DatasetManifest m;
  m.root = path.parent_path();
  try {
    m.version = j.at("version").get<int>();
    require(m.version == DatasetManifest::kVersion, ErrorCode::kParse,
            "unsupported manifest version " + std::to_string(m.version));
    m.schema = parse_schema(j.at("schema"));
    if (j.contains("window") && !j["window"].is_null()) {
      Window w{j["window"].at("level").get<double>(), j["window"].at("width").get<double>()};
      require(w.width > 0, ErrorCode::kInvalidWindow, "manifest window width must be > 0");
      m.window = w;
    }
    std::set<std::string> ids;
    for (const auto& s : j.at("samples")) {
      SampleRef r;
      r.id = s.at("id").get<std::string>();
      r.image = s.at("image").get<std::string>();
      r.mask = s.at("mask").get<std::string>();
      r.domain = s.value("domain", "");
      r.split = parse_split(s.at("split").get<std::string>());
      if (s.contains("source_id")) r.source_id = s["source_id"].get<std::string>();
      if (s.contains("style_id")) r.style_id = s["style_id"].get<std::string>();
      require(ids.insert(r.id).second, ErrorCode::kDuplicateId, "duplicate sample id '" + r.id + "'");
      m.samples.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, "manifest '" + path.string() + "': " + e.what());
  }
  if (opts.check_files) {
    for (const auto& s : m.samples) {
      for (const auto& rel : {s.image, s.mask})
        require(fs::exists(m.resolve(rel)), ErrorCode::kDanglingPath,
                "sample '" + s.id + "' references missing file '" + rel + "'");
      if (opts.check_mask_labels) {
        int h = 0, w = 0;
        for (Label l : io::load_mask_labels(m.resolve(s.mask), h, w))
          require(m.schema->contains(l), ErrorCode::kUnknownLabel,
                  "sample '" + s.id + "' mask has label " + std::to_string(l) + " outside the schema");
      }
    }
  }
  return m;
}

/// Loads one sample; raw-HU images are windowed to [0,1] on the way in.
inline AnnotatedSample load_sample(const DatasetManifest& m, std::size_t index) {
  const SampleRef& r = m.samples.at(index);
  IntensityGrid img = io::load_image(m.resolve(r.image), m.image_encoding());
  if (m.window) img = apply_window(img, *m.window);
  SegMap mask = io::load_mask(m.resolve(r.mask), m.schema);
  return AnnotatedSample(r.id, std::move(img), std::move(mask), r.domain, r.split);
}

inline std::vector<AnnotatedSample> load_split(const DatasetManifest& m, Split s) {
  std::vector<AnnotatedSample> out;
  for (std::size_t i : m.indices(s)) out.push_back(load_sample(m, i));
  return out;
}

}  // namespace ctseg
