#pragma once

#include <algorithm>
#include <filesystem>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "ctseg/generator.hpp"
#include "ctseg/image_io.hpp"
#include "ctseg/manifest.hpp"

namespace ctseg {

using StyleBank = std::vector<std::shared_ptr<const StyleGenerator>>;

/// Every generator checkpoint (*.ckpt) in `dir`, in file-name order.
inline StyleBank load_style_bank(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorCode::kMissingFile, "style bank directory '" + dir.string() + "' not found");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ckpt") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  StyleBank bank;
  for (const auto& f : files) bank.push_back(load_generator(f));
  return bank;
}

struct AugmentationPlan {
  DatasetManifest source;
  StyleBank bank;
  fs::path out;
  std::uint64_t seed = 0;
  bool include_originals = true;
};

inline std::uint64_t augment_sample_seed(std::uint64_t seed, const std::string& source_id, const std::string& style_id) {
  return derive_seed(derive_seed(seed, source_id), style_id);
}

/// Writes the expanded training set to plan.out: for each of the m training
/// samples, the original (unless disabled) plus one image per generator,
/// every generated sample carrying a byte copy of its source's mask. On any
/// failure the files written so far are removed before rethrowing.
inline DatasetManifest augment_dataset(const AugmentationPlan& plan) {
  const DatasetManifest& src = plan.source;
  const auto train = src.indices(Split::kTrain);
  require(!train.empty(), ErrorCode::kEmptyInput, "source manifest has no training samples");
  require(!plan.bank.empty() || plan.include_originals, ErrorCode::kEmptyInput,
          "empty style bank without originals yields no samples");
  std::set<std::string> style_ids;
  for (const auto& g : plan.bank) {
    require(g != nullptr, ErrorCode::kInvalidArgument, "null generator in style bank");
    require(!g->style_id().empty(), ErrorCode::kInvalidArgument, "generator without a style id");
    require(style_ids.insert(g->style_id()).second, ErrorCode::kDuplicateId,
            "style id '" + g->style_id() + "' appears twice in the bank");
  }

  const bool created_root = !fs::exists(plan.out);
  std::vector<fs::path> written;
  auto write = [&](const fs::path& rel, const std::string& bytes) {
    const fs::path p = plan.out / rel;
    io::write_bytes(p, bytes);
    written.push_back(p);
  };
  DatasetManifest out;
  out.schema = src.schema;
  out.root = plan.out;
  try {
    fs::create_directories(plan.out / "images");
    fs::create_directories(plan.out / "masks");
    for (std::size_t i : train) {
      const SampleRef& ref = src.samples[i];
      const AnnotatedSample s = load_sample(src, i);
      const std::string mask_bytes = io::read_bytes(src.resolve(ref.mask));
      if (plan.include_originals) {
        const std::string img = "images/" + ref.id + ".png", mask = "masks/" + ref.id + ".png";
        if (src.window) {
          io::save_image(s.image, plan.out / img);
          written.push_back(plan.out / img);
        } else {
          write(img, io::read_bytes(src.resolve(ref.image)));
        }
        write(mask, mask_bytes);
        out.samples.push_back({ref.id, img, mask, ref.domain, Split::kTrain, ref.id, std::nullopt});
      }
      for (const auto& g : plan.bank) {
        const std::string id = ref.id + "__" + g->style_id();
        const IntensityGrid gen = g->generate(s.mask, augment_sample_seed(plan.seed, ref.id, g->style_id()));
        require(gen.normalized() && gen.height() == s.mask.height() && gen.width() == s.mask.width(),
                ErrorCode::kShape, "generator '" + g->style_id() + "' returned a malformed image for '" + ref.id + "'");
        const std::string img = "images/" + id + ".png", mask = "masks/" + id + ".png";
        io::save_image(gen, plan.out / img);
        written.push_back(plan.out / img);
        write(mask, mask_bytes);
        out.samples.push_back({id, img, mask, "styled", Split::kTrain, ref.id, g->style_id()});
      }
    }
    save_manifest(out, plan.out / "manifest.json");
    written.push_back(plan.out / "manifest.json");
  } catch (...) {
    std::error_code ec;
    for (const auto& p : written) fs::remove(p, ec);
    if (created_root) fs::remove_all(plan.out, ec);
    throw;
  }
  return out;
}

}  // namespace ctseg
