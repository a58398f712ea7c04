#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "ctseg/image_io.hpp"
#include "ctseg/layers.hpp"

namespace ctseg {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Self-describing model container.
///
/// Layout: 8-byte magic "CTSEGCK1", u32 format version, u64 header length,
/// a JSON header {kind, config, meta, tensors:[{name, shape, offset}]}, then
/// the tensor payload as little-endian float32.
struct Checkpoint {
  static constexpr char kMagic[9] = "CTSEGCK1";
  static constexpr std::uint32_t kFormatVersion = 1;

  struct Entry {
    std::string name;
    std::array<int, 4> shape{};
    std::vector<float> values;
  };

  std::string kind;
  json config;
  json meta;
  std::vector<Entry> tensors;

  const Entry& get(const std::string& name) const {
    for (const auto& e : tensors)
      if (e.name == name) return e;
    throw Error(ErrorCode::kParse, "checkpoint has no tensor '" + name + "'");
  }
};

namespace detail {

template <typename U>
void append_pod(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U read_pod(const std::string& in, std::size_t& pos) {
  require(pos + sizeof(U) <= in.size(), ErrorCode::kParse, "truncated checkpoint");
  U v;
  std::memcpy(&v, in.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  json header;
  header["kind"] = ck.kind;
  header["config"] = ck.config;
  header["meta"] = ck.meta;
  header["format_version"] = Checkpoint::kFormatVersion;
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& e : ck.tensors) {
    tensors.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", offset}});
    offset += e.values.size();
  }
  header["tensors"] = tensors;
  const std::string hdr = header.dump();
  std::string out(Checkpoint::kMagic, 8);
  detail::append_pod<std::uint32_t>(out, Checkpoint::kFormatVersion);
  detail::append_pod<std::uint64_t>(out, hdr.size());
  out += hdr;
  for (const auto& e : ck.tensors)
    out.append(reinterpret_cast<const char*>(e.values.data()), e.values.size() * sizeof(float));
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  require(bytes.size() >= 20 && bytes.compare(0, 8, Checkpoint::kMagic) == 0, ErrorCode::kParse,
          "not a checkpoint (bad magic)");
  std::size_t pos = 8;
  const auto version = detail::read_pod<std::uint32_t>(bytes, pos);
  require(version == Checkpoint::kFormatVersion, ErrorCode::kParse,
          "unsupported checkpoint version " + std::to_string(version));
  const auto hlen = detail::read_pod<std::uint64_t>(bytes, pos);
  require(pos + hlen <= bytes.size(), ErrorCode::kParse, "truncated checkpoint header");
  json header;
  try {
    header = json::parse(bytes.substr(pos, hlen));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("checkpoint header: ") + e.what());
  }
  pos += hlen;
  Checkpoint ck;
  ck.kind = header.at("kind").get<std::string>();
  ck.config = header.at("config");
  ck.meta = header.at("meta");
  const std::size_t payload = pos;
  for (const auto& t : header.at("tensors")) {
    Checkpoint::Entry e;
    e.name = t.at("name").get<std::string>();
    e.shape = t.at("shape").get<std::array<int, 4>>();
    const std::size_t count = static_cast<std::size_t>(e.shape[0]) * e.shape[1] * e.shape[2] * e.shape[3];
    const std::size_t off = payload + t.at("offset").get<std::uint64_t>() * sizeof(float);
    require(off + count * sizeof(float) <= bytes.size(), ErrorCode::kParse, "truncated tensor '" + e.name + "'");
    e.values.resize(count);
    std::memcpy(e.values.data(), bytes.data() + off, count * sizeof(float));
    ck.tensors.push_back(std::move(e));
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const fs::path& path) {
  io::write_bytes(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  require(fs::exists(path), ErrorCode::kMissingFile, "checkpoint '" + path.string() + "' not found");
  return deserialize_checkpoint(io::read_bytes(path));
}

/// Collects parameters and buffers of a network under stable positional names.
template <typename T>
void export_tensors(Checkpoint& ck, const std::string& prefix, const std::vector<nn::Param<T>*>& params,
                    const std::vector<std::pair<std::string, Tensor<T>*>>& buffers) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& v = params[i]->value;
    ck.tensors.push_back({prefix + ".p" + std::to_string(i) + "." + params[i]->name, v.shape(),
                          std::vector<float>(v.vec().begin(), v.vec().end())});
  }
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    const auto& v = *buffers[i].second;
    ck.tensors.push_back({prefix + ".b" + std::to_string(i) + "." + buffers[i].first, v.shape(),
                          std::vector<float>(v.vec().begin(), v.vec().end())});
  }
}

template <typename T>
void import_tensors(const Checkpoint& ck, const std::string& prefix, const std::vector<nn::Param<T>*>& params,
                    const std::vector<std::pair<std::string, Tensor<T>*>>& buffers) {
  auto assign = [&](const std::string& name, Tensor<T>& dst) {
    const auto& e = ck.get(name);
    require(e.shape == dst.shape(), ErrorCode::kShape, "checkpoint tensor '" + name + "' has wrong shape");
    std::transform(e.values.begin(), e.values.end(), dst.data(), [](float v) { return static_cast<T>(v); });
  };
  for (std::size_t i = 0; i < params.size(); ++i)
    assign(prefix + ".p" + std::to_string(i) + "." + params[i]->name, params[i]->value);
  for (std::size_t i = 0; i < buffers.size(); ++i)
    assign(prefix + ".b" + std::to_string(i) + "." + buffers[i].first, *buffers[i].second);
}

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  require(EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) == 1, ErrorCode::kIo,
          "sha256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 0xf];
  }
  return out;
}

inline std::string sha256_file(const fs::path& path) { return sha256_hex(io::read_bytes(path)); }

}  // namespace ctseg
