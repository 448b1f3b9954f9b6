#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "bridgetts/array.hpp"
#include "bridgetts/binary_io.hpp"

namespace bridgetts {

// Continuous frame-level features [T x D] at the base frame rate.
struct DenseFeatures {
  Array<float> frames;
  std::uint32_t frame_rate_hz = 50;
  std::string utterance_id;

  std::size_t length() const { return frames.empty() ? 0 : frames.rows(); }
  std::size_t dim() const { return frames.empty() ? 0 : frames.cols(); }
};

// BRGF layout, all little-endian:
//   "BRGF" | u32 version | u32 D | u32 T | u32 frame_rate_hz | u32 reserved
//   followed by T*D float32 values, row-major.
namespace brgf {
inline constexpr std::string_view magic = "BRGF";
inline constexpr std::uint32_t version = 1;
inline constexpr std::size_t header_bytes = 24;
}  // namespace brgf

inline std::string encode_features(const DenseFeatures& f) {
  require(f.frames.rank() == 2 && f.length() >= 1 && f.dim() >= 1, ErrorCode::dimension_mismatch,
          "features must be [T x D] with T, D >= 1, got " + shape_str(f.frames.shape()));
  require(all_finite(f.frames), ErrorCode::non_finite, "features of " + f.utterance_id + " contain NaN/Inf");
  require(f.frame_rate_hz > 0, ErrorCode::invalid_argument, "frame rate must be positive");
  ByteWriter w;
  w.bytes(brgf::magic);
  w.u32(brgf::version);
  w.u32(static_cast<std::uint32_t>(f.dim()));
  w.u32(static_cast<std::uint32_t>(f.length()));
  w.u32(f.frame_rate_hz);
  w.u32(0);
  for (float v : f.frames.values()) w.f32(v);
  return w.take();
}

inline DenseFeatures decode_features(std::string_view bytes, std::string utterance_id = {},
                                     std::optional<std::uint32_t> expected_dim = std::nullopt) {
  ByteReader r(bytes);
  if (bytes.size() >= 4 && bytes.substr(0, 4) != brgf::magic) fail(ErrorCode::bad_magic, "not a BRGF feature file");
  if (r.bytes(4) != brgf::magic) fail(ErrorCode::bad_magic, "not a BRGF feature file");
  const std::uint32_t ver = r.u32();
  if (ver != brgf::version)
    fail(ErrorCode::version_mismatch, "BRGF version " + std::to_string(ver) + ", expected " + std::to_string(brgf::version));
  const std::uint32_t d = r.u32();
  const std::uint32_t t = r.u32();
  const std::uint32_t rate = r.u32();
  r.u32();  // reserved
  if (d == 0 || t == 0) fail(ErrorCode::dimension_mismatch, "header declares T=" + std::to_string(t) + " D=" + std::to_string(d));
  if (expected_dim && *expected_dim != d)
    fail(ErrorCode::dimension_mismatch, "file has D=" + std::to_string(d) + ", expected " + std::to_string(*expected_dim));
  const std::size_t payload = static_cast<std::size_t>(t) * d * 4;
  if (r.remaining() < payload)
    fail(ErrorCode::truncated, "payload has " + std::to_string(r.remaining()) + " bytes, header needs " + std::to_string(payload));
  if (r.remaining() > payload)
    fail(ErrorCode::dimension_mismatch, "payload has " + std::to_string(r.remaining()) + " bytes, header T x D needs " +
                                            std::to_string(payload));
  DenseFeatures f;
  f.frames = Array<float>(Shape{t, d});
  for (auto& v : f.frames.values()) v = r.f32();
  f.frame_rate_hz = rate;
  f.utterance_id = std::move(utterance_id);
  return f;
}

inline void write_features(const std::filesystem::path& path, const DenseFeatures& f) {
  write_file_atomic(path, encode_features(f));
}

inline DenseFeatures read_features(const std::filesystem::path& path,
                                   std::optional<std::uint32_t> expected_dim = std::nullopt) {
  return decode_features(read_file(path), path.stem().string(), expected_dim);
}

}  // namespace bridgetts
