#pragma once

#include <array>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "ctseg/data_model.hpp"
#include "ctseg/error.hpp"

namespace ctseg::io {

namespace fs = std::filesystem;

struct RawPng {
  int height = 0;
  int width = 0;
  int bit_depth = 0;
  int color_type = 0;
  int channels = 0;
  // Samples widened to 16 bits, row-major, interleaved by channel. Palette
  // images keep their raw indices.
  std::vector<std::uint16_t> samples;
};

using Rgb = std::array<std::uint8_t, 3>;

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct WriteJob {
  int height = 0;
  int width = 0;
  int bit_depth = 8;
  int color_type = PNG_COLOR_TYPE_GRAY;
  std::vector<png_byte> rows;  // packed big-endian rows
  std::vector<png_color> palette;
};

// libpng reports errors through longjmp; keep all C++ state behind pointers
// created before setjmp so nothing is left indeterminate after a jump.
inline bool write_png_impl(std::FILE* fp, const WriteJob* job) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, fp);
  png_set_compression_level(png, 6);
  png_set_IHDR(png, info, job->width, job->height, job->bit_depth, job->color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  if (job->color_type == PNG_COLOR_TYPE_PALETTE)
    png_set_PLTE(png, info, const_cast<png_color*>(job->palette.data()), static_cast<int>(job->palette.size()));
  png_write_info(png, info);
  const int channels = job->color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
  const std::size_t stride = static_cast<std::size_t>(job->width) * channels * (job->bit_depth / 8);
  for (int y = 0; y < job->height; ++y)
    png_write_row(png, const_cast<png_byte*>(job->rows.data() + y * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

inline bool read_png_impl(std::FILE* fp, RawPng* out) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  out->width = static_cast<int>(png_get_image_width(png, info));
  out->height = static_cast<int>(png_get_image_height(png, info));
  out->bit_depth = png_get_bit_depth(png, info);
  out->color_type = png_get_color_type(png, info);
  if (out->bit_depth < 8) png_set_packing(png);
  if (out->color_type == PNG_COLOR_TYPE_GRAY && out->bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (out->color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  out->channels = png_get_channels(png, info);
  const int depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<png_byte> row(rowbytes);
  out->samples.resize(static_cast<std::size_t>(out->height) * out->width * out->channels);
  for (int y = 0; y < out->height; ++y) {
    png_read_row(png, row.data(), nullptr);
    const std::size_t n = static_cast<std::size_t>(out->width) * out->channels;
    for (std::size_t i = 0; i < n; ++i) {
      out->samples[y * n + i] =
          depth == 16 ? static_cast<std::uint16_t>((row[2 * i] << 8) | row[2 * i + 1]) : row[i];
    }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

inline void write_job(const fs::path& path, const WriteJob& job) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  require(fp != nullptr, ErrorCode::kIo, "cannot open '" + path.string() + "' for writing");
  require(write_png_impl(fp.get(), &job), ErrorCode::kIo, "png encode failed for '" + path.string() + "'");
}

}  // namespace detail

inline RawPng read_png(const fs::path& path) {
  require(fs::exists(path), ErrorCode::kMissingFile, "no such file '" + path.string() + "'");
  detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  require(fp != nullptr, ErrorCode::kIo, "cannot open '" + path.string() + "'");
  auto out = std::make_unique<RawPng>();
  require(detail::read_png_impl(fp.get(), out.get()), ErrorCode::kParse, "invalid png '" + path.string() + "'");
  return std::move(*out);
}

inline void write_gray16(const fs::path& path, int h, int w, const std::vector<std::uint16_t>& px) {
  detail::WriteJob job{h, w, 16, PNG_COLOR_TYPE_GRAY, {}, {}};
  job.rows.resize(px.size() * 2);
  for (std::size_t i = 0; i < px.size(); ++i) {
    job.rows[2 * i] = static_cast<png_byte>(px[i] >> 8);
    job.rows[2 * i + 1] = static_cast<png_byte>(px[i] & 0xff);
  }
  detail::write_job(path, job);
}

inline void write_indexed(const fs::path& path, int h, int w, const std::vector<std::uint8_t>& idx,
                          const std::vector<Rgb>& palette) {
  detail::WriteJob job{h, w, 8, PNG_COLOR_TYPE_PALETTE, {idx.begin(), idx.end()}, {}};
  for (const auto& c : palette) job.palette.push_back(png_color{c[0], c[1], c[2]});
  detail::write_job(path, job);
}

inline void write_rgb(const fs::path& path, int h, int w, const std::vector<std::uint8_t>& rgb) {
  require(rgb.size() == static_cast<std::size_t>(h) * w * 3, ErrorCode::kShape, "rgb buffer size mismatch");
  detail::WriteJob job{h, w, 8, PNG_COLOR_TYPE_RGB, {rgb.begin(), rgb.end()}, {}};
  detail::write_job(path, job);
}

/// Fixed, version-pinned label palette (index = label id).
inline const std::vector<Rgb>& label_palette() {
  static const std::vector<Rgb> kPalette = [] {
    std::vector<Rgb> p = {{0, 0, 0},       {230, 159, 0},  {240, 240, 240}, {86, 180, 233},
                          {213, 94, 0},    {0, 158, 115},  {204, 121, 167}, {240, 228, 66},
                          {0, 114, 178},   {128, 128, 128}};
    for (int i = static_cast<int>(p.size()); i < 256; ++i)
      p.push_back({static_cast<std::uint8_t>((i * 67) % 256), static_cast<std::uint8_t>((i * 131) % 256),
                   static_cast<std::uint8_t>((i * 29) % 256)});
    return p;
  }();
  return kPalette;
}

constexpr int kHuOffset = 32768;

/// Normalized grids are stored as 16-bit v*65535; raw grids as HU + 32768.
inline void save_image(const IntensityGrid& g, const fs::path& path) {
  std::vector<std::uint16_t> px(g.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    const double v = g.values()[i];
    const double s = g.normalized() ? std::round(v * 65535.0) : std::round(v) + kHuOffset;
    px[i] = static_cast<std::uint16_t>(std::clamp(s, 0.0, 65535.0));
  }
  write_gray16(path, g.height(), g.width(), px);
}

inline IntensityGrid load_image(const fs::path& path, Encoding enc) {
  const RawPng raw = read_png(path);
  require(raw.color_type == PNG_COLOR_TYPE_GRAY && raw.channels == 1, ErrorCode::kParse,
          "image '" + path.string() + "' is not grayscale");
  std::vector<double> v(raw.samples.size());
  if (enc == Encoding::kNormalized) {
    const double maxv = raw.bit_depth == 16 ? 65535.0 : 255.0;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = raw.samples[i] / maxv;
  } else {
    require(raw.bit_depth == 16, ErrorCode::kEncoding, "raw HU images must be 16-bit");
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(raw.samples[i]) - kHuOffset;
  }
  return IntensityGrid(raw.height, raw.width, std::move(v), enc);
}

inline void save_mask(const SegMap& m, const fs::path& path) {
  const auto& pal = label_palette();
  write_indexed(path, m.height(), m.width(), m.labels(),
                std::vector<Rgb>(pal.begin(), pal.begin() + m.schema().size()));
}

/// Returns raw label ids; callers validate them against a schema.
inline std::vector<Label> load_mask_labels(const fs::path& path, int& h, int& w) {
  const RawPng raw = read_png(path);
  require(raw.channels == 1 && raw.bit_depth <= 8, ErrorCode::kParse,
          "mask '" + path.string() + "' must be 8-bit indexed or grayscale");
  h = raw.height;
  w = raw.width;
  return std::vector<Label>(raw.samples.begin(), raw.samples.end());
}

inline SegMap load_mask(const fs::path& path, std::shared_ptr<const LabelSchema> schema) {
  int h = 0, w = 0;
  auto labels = load_mask_labels(path, h, w);
  for (Label l : labels)
    require(schema->contains(l), ErrorCode::kUnknownLabel,
            "mask '" + path.string() + "' contains label " + std::to_string(l) + " outside the schema");
  return SegMap(h, w, std::move(labels), std::move(schema));
}

inline std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kMissingFile, "cannot read '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::kIo, "cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorCode::kIo, "short write to '" + path.string() + "'");
}

}  // namespace ctseg::io
