#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bridgetts/ar_model.hpp"
#include "bridgetts/binary_io.hpp"
#include "bridgetts/bridge.hpp"
#include "bridgetts/optim.hpp"
#include "bridgetts/rvq.hpp"

namespace bridgetts {

// Checkpoint layout, all little-endian:
//   magic "BRGC" (bridge) or "BRGA" (AR) | u32 version
//   u64 config hash | u64 parent hash (bridge hash for AR, 0 for bridge)
//   str config JSON
//   progress: u64 step | u64 epoch | u64 cursor | u32 n, n x u32 order | str rng
//   u32 P, P x tensor(name)              parameters
//   u64 optimizer steps | u32 M, M x tensor  first moments, then M second moments
//   u32 has_codebooks, then G L K Dg and per book: vectors, counts, sums
// where str = u32 length + bytes and tensor = str name | u32 rank | rank x u32 | f32 payload.
namespace ckpt {
inline constexpr std::string_view bridge_magic = "BRGC";
inline constexpr std::string_view ar_magic = "BRGA";
inline constexpr std::uint32_t version = 1;
}  // namespace ckpt

struct NamedTensor {
  std::string name;
  Array<float> value;
};

struct Checkpoint {
  std::string magic;
  std::uint64_t config_hash = 0;
  std::uint64_t parent_hash = 0;
  std::string config_json;
  TrainingProgress progress;
  std::vector<NamedTensor> params;
  std::uint64_t optimizer_steps = 0;
  std::vector<Array<float>> adam_m, adam_v;
  std::optional<Codebooks<float>> codebooks;
};

namespace detail {

inline void put_str(ByteWriter& w, std::string_view s) {
  w.u32(static_cast<std::uint32_t>(s.size()));
  w.bytes(s);
}

inline std::string get_str(ByteReader& r) {
  const std::uint32_t n = r.u32();
  return std::string(r.bytes(n));
}

inline void put_array(ByteWriter& w, const Array<float>& a) {
  w.u32(static_cast<std::uint32_t>(a.rank()));
  for (std::size_t d : a.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (float v : a.values()) w.f32(v);
}

inline Array<float> get_array(ByteReader& r) {
  const std::uint32_t rank = r.u32();
  require(rank <= 8, ErrorCode::invalid_argument, "tensor rank " + std::to_string(rank) + " is implausible");
  Shape shape;
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape.push_back(r.u32());
    n *= shape.back();
  }
  require(r.remaining() >= n * 4, ErrorCode::truncated,
          "tensor needs " + std::to_string(n * 4) + " bytes, " + std::to_string(r.remaining()) + " remain");
  Array<float> a(std::move(shape));
  for (auto& v : a.values()) v = r.f32();
  return a;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  require(c.magic == ckpt::bridge_magic || c.magic == ckpt::ar_magic, ErrorCode::bad_magic,
          "unknown checkpoint kind '" + c.magic + "'");
  require(c.adam_m.size() == c.adam_v.size(), ErrorCode::shape_mismatch, "optimizer moment counts differ");
  ByteWriter w;
  w.bytes(c.magic);
  w.u32(ckpt::version);
  w.u64(c.config_hash);
  w.u64(c.parent_hash);
  detail::put_str(w, c.config_json);
  w.u64(c.progress.step);
  w.u64(c.progress.epoch);
  w.u64(c.progress.cursor);
  w.u32(static_cast<std::uint32_t>(c.progress.order.size()));
  for (auto i : c.progress.order) w.u32(i);
  detail::put_str(w, c.progress.rng);
  w.u32(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& p : c.params) {
    detail::put_str(w, p.name);
    detail::put_array(w, p.value);
  }
  w.u64(c.optimizer_steps);
  w.u32(static_cast<std::uint32_t>(c.adam_m.size()));
  for (const auto& a : c.adam_m) detail::put_array(w, a);
  for (const auto& a : c.adam_v) detail::put_array(w, a);
  w.u32(c.codebooks ? 1u : 0u);
  if (c.codebooks) {
    const auto& b = *c.codebooks;
    w.u32(static_cast<std::uint32_t>(b.groups()));
    w.u32(static_cast<std::uint32_t>(b.levels()));
    w.u32(static_cast<std::uint32_t>(b.size()));
    w.u32(static_cast<std::uint32_t>(b.group_dim()));
    for (std::size_t g = 0; g < b.groups(); ++g)
      for (std::size_t l = 0; l < b.levels(); ++l) {
        const auto& cb = b.at(g, l);
        detail::put_array(w, cb.vectors);
        for (float v : cb.ema_counts) w.f32(v);
        detail::put_array(w, cb.ema_sums);
      }
  }
  return w.take();
}

inline Checkpoint decode_checkpoint(std::string_view bytes, std::string_view expected_magic) {
  ByteReader r(bytes);
  Checkpoint c;
  c.magic = std::string(r.bytes(4));
  require(c.magic == expected_magic, ErrorCode::bad_magic,
          "expected a " + std::string(expected_magic) + " checkpoint, found '" + c.magic + "'");
  const std::uint32_t ver = r.u32();
  require(ver == ckpt::version, ErrorCode::version_mismatch,
          "checkpoint version " + std::to_string(ver) + ", expected " + std::to_string(ckpt::version));
  c.config_hash = r.u64();
  c.parent_hash = r.u64();
  c.config_json = detail::get_str(r);
  c.progress.step = r.u64();
  c.progress.epoch = r.u64();
  c.progress.cursor = r.u64();
  c.progress.order.resize(r.u32());
  for (auto& i : c.progress.order) i = r.u32();
  c.progress.rng = detail::get_str(r);
  c.params.resize(r.u32());
  for (auto& p : c.params) {
    p.name = detail::get_str(r);
    p.value = detail::get_array(r);
  }
  c.optimizer_steps = r.u64();
  const std::uint32_t moments = r.u32();
  for (std::uint32_t i = 0; i < moments; ++i) c.adam_m.push_back(detail::get_array(r));
  for (std::uint32_t i = 0; i < moments; ++i) c.adam_v.push_back(detail::get_array(r));
  if (r.u32() != 0) {
    const std::uint32_t g = r.u32(), l = r.u32(), k = r.u32(), dg = r.u32();
    Codebooks<float> books(g, l, k, dg);
    for (std::size_t gi = 0; gi < g; ++gi)
      for (std::size_t li = 0; li < l; ++li) {
        auto& cb = books.at(gi, li);
        cb.vectors = detail::get_array(r);
        for (auto& v : cb.ema_counts) v = r.f32();
        cb.ema_sums = detail::get_array(r);
        require(cb.vectors.shape() == Shape{k, dg} && cb.ema_sums.shape() == Shape{k, dg}, ErrorCode::shape_mismatch,
                "codebook shape disagrees with header");
      }
    c.codebooks = std::move(books);
  }
  require(r.remaining() == 0, ErrorCode::invalid_argument,
          std::to_string(r.remaining()) + " trailing bytes after checkpoint payload");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file_atomic(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, std::string_view expected_magic) {
  require(std::filesystem::exists(path), ErrorCode::not_found, "checkpoint " + path.string() + " does not exist");
  return decode_checkpoint(read_file(path), expected_magic);
}

inline std::vector<NamedTensor> snapshot_params(const ParameterSet<float>& params) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < params.size(); ++i) out.push_back({params.name(i), params[i]});
  return out;
}

// Copies saved values into a freshly constructed model; names and shapes must match exactly.
inline void restore_params(ParameterSet<float>& params, const std::vector<NamedTensor>& saved) {
  require(saved.size() == params.size(), ErrorCode::shape_mismatch,
          "checkpoint has " + std::to_string(saved.size()) + " tensors, model has " + std::to_string(params.size()));
  for (std::size_t i = 0; i < saved.size(); ++i) {
    require(saved[i].name == params.name(i), ErrorCode::not_found,
            "checkpoint tensor " + std::to_string(i) + " is '" + saved[i].name + "', model expects '" + params.name(i) + "'");
    require(saved[i].value.shape() == params[i].shape(), ErrorCode::shape_mismatch,
            saved[i].name + ": checkpoint " + shape_str(saved[i].value.shape()) + " vs model " +
                shape_str(params[i].shape()));
    params[i] = saved[i].value;
  }
}

inline void require_hash(const Checkpoint& c, std::uint64_t expected, std::string_view what) {
  require(c.config_hash == expected, ErrorCode::config_hash_mismatch,
          std::string(what) + " checkpoint was written under config hash " + std::to_string(c.config_hash) +
              ", current config hashes to " + std::to_string(expected));
}

inline Checkpoint bridge_checkpoint(const BridgeModel<float>& model, const AdamW& opt, const TrainingProgress& progress,
                                    std::uint64_t config_hash, std::string config_json) {
  Checkpoint c;
  c.magic = ckpt::bridge_magic;
  c.config_hash = config_hash;
  c.config_json = std::move(config_json);
  c.progress = progress;
  c.params = snapshot_params(model.params());
  c.optimizer_steps = opt.steps();
  c.adam_m = opt.first_moments();
  c.adam_v = opt.second_moments();
  c.codebooks = model.codebooks();
  return c;
}

inline Checkpoint ar_checkpoint(const ArModel& model, const AdamW& opt, const TrainingProgress& progress,
                                std::uint64_t config_hash, std::uint64_t bridge_hash, std::string config_json) {
  Checkpoint c;
  c.magic = ckpt::ar_magic;
  c.config_hash = config_hash;
  c.parent_hash = bridge_hash;
  c.config_json = std::move(config_json);
  c.progress = progress;
  c.params = snapshot_params(model.params());
  c.optimizer_steps = opt.steps();
  c.adam_m = opt.first_moments();
  c.adam_v = opt.second_moments();
  return c;
}

inline void restore_bridge(BridgeModel<float>& model, const Checkpoint& c) {
  restore_params(model.params(), c.params);
  require(c.codebooks.has_value(), ErrorCode::not_found, "bridge checkpoint carries no codebooks");
  const auto& b = *c.codebooks;
  const auto& cfg = model.config();
  require(b.groups() == cfg.groups && b.levels() == cfg.levels && b.size() == cfg.codebook_size &&
              b.group_dim() == cfg.group_dim(),
          ErrorCode::shape_mismatch, "checkpoint codebooks do not match the bridge configuration");
  model.codebooks() = b;
}

inline void restore_optimizer(AdamW& opt, const Checkpoint& c) {
  if (c.adam_m.empty() && c.optimizer_steps == 0) return;
  opt.restore(c.adam_m, c.adam_v, c.optimizer_steps);
}

}  // namespace bridgetts
