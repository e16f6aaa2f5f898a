#pragma once

// .fmtlckpt parameter checkpoints:
//
//   bytes 0..7    magic "FMTLCKPT"
//   bytes 8..15   header length H, unsigned 64-bit little-endian
//   next H bytes  UTF-8 JSON: {"format":1,"count":N,"segments":[{"name","offset","length"},...],
//                 "meta":{...}}
//   next 8·N      parameter values, IEEE-754 binary64 little-endian

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "fmtl/error.hpp"
#include "fmtl/numkernel.hpp"

namespace fmtl {

inline constexpr std::array<char, 8> kCheckpointMagic = {'F', 'M', 'T', 'L', 'C', 'K', 'P', 'T'};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline nlohmann::json layout_to_json(const Layout& layout) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : layout.segments()) {
    segs.push_back({{"name", s.name}, {"offset", s.offset}, {"length", s.length}});
  }
  return segs;
}

inline Layout layout_from_json(const nlohmann::json& segs) {
  Layout layout;
  for (const auto& s : segs) {
    const auto offset = s.at("offset").get<std::size_t>();
    if (offset != layout.size()) throw IoError("checkpoint segments are not contiguous");
    layout.append(s.at("name").get<std::string>(), s.at("length").get<std::size_t>());
  }
  return layout;
}

inline std::string encode_checkpoint(const SegmentedParams& params,
                                     const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json header = {{"format", 1},
                           {"count", params.size()},
                           {"segments", layout_to_json(params.layout())},
                           {"meta", meta}};
  const std::string header_text = header.dump();
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u64_le(out, header_text.size());
  out += header_text;
  for (double v : params.values()) detail::put_u64_le(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

struct Checkpoint {
  SegmentedParams params;
  nlohmann::json meta;
};

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
    throw IoError("not a .fmtlckpt file (bad magic)");
  }
  const std::uint64_t header_len = detail::get_u64_le(p + 8);
  if (bytes.size() < 16 + header_len) throw IoError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad checkpoint header: ") + e.what());
  }
  Layout layout = layout_from_json(header.at("segments"));
  const auto count = header.at("count").get<std::size_t>();
  if (count != layout.size()) throw IoError("checkpoint count does not match layout");
  const std::size_t body = 16 + header_len;
  if (bytes.size() != body + 8 * count) throw IoError("checkpoint body length mismatch");
  std::vector<double> values(count);
  for (std::size_t i = 0; i < count; ++i) {
    values[i] = std::bit_cast<double>(detail::get_u64_le(p + body + 8 * i));
  }
  return Checkpoint{SegmentedParams(std::move(layout), std::move(values)),
                    header.value("meta", nlohmann::json::object())};
}

inline void save_checkpoint(const std::filesystem::path& path, const SegmentedParams& params,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  const auto bytes = encode_checkpoint(params, meta);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace fmtl
