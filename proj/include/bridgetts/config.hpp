#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <type_traits>

#include <json.hpp>

#include "bridgetts/ar_model.hpp"
#include "bridgetts/binary_io.hpp"
#include "bridgetts/corpus.hpp"
#include "bridgetts/hash.hpp"
#include "bridgetts/optim.hpp"
#include "bridgetts/sparse_bridge.hpp"

namespace bridgetts {

// Sub-seed for one consumer of randomness, so components do not share streams.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
  Fnv1a h;
  h.update(&seed, sizeof seed);
  h.update(purpose);
  return h.digest();
}

struct ScheduleConfig {
  std::uint64_t bridge_steps = 20000;
  std::uint64_t ar_steps = 10000;
  std::size_t batch_size = 16;
  std::uint64_t eval_every = 500;
  std::uint64_t checkpoint_every = 1000;
};

struct PathsConfig {
  std::string corpus = "corpus";
  std::string bridge_checkpoint = "bridge.brgc";
  std::string ar_checkpoint = "ar.brga";
};

// Everything a run depends on. `schedule` and `paths` are excluded from the
// lineage hashes so a run can be extended or relocated without invalidating
// its checkpoints.
struct Config {
  std::uint64_t seed = 1234;
  SyntheticCorpusSpec corpus;
  BridgeConfig bridge;
  AdamWConfig bridge_optimizer;
  ArConfig ar;
  AdamWConfig ar_optimizer;
  ScheduleConfig schedule;
  PathsConfig paths;

  void set_seed(std::uint64_t s) {
    seed = s;
    corpus.seed = derive_seed(s, "corpus");
  }

  void validate() const {
    corpus.validate();
    require(bridge.feature_dim == corpus.dim, ErrorCode::config_invalid,
            "bridge.feature_dim " + std::to_string(bridge.feature_dim) + " != corpus.dim " + std::to_string(corpus.dim));
    bridge.validate();
    ar.validate();
    require(ar.frames_per_step == BridgeConfig::rate_factor || ar.input == ArInput::features, ErrorCode::config_invalid,
            "tokens input requires frames_per_step == " + std::to_string(BridgeConfig::rate_factor));
    require(schedule.batch_size >= 1, ErrorCode::config_invalid, "schedule.batch_size must be >= 1");
    for (const auto* o : {&bridge_optimizer, &ar_optimizer})
      require(o->lr > 0 && o->beta1 >= 0 && o->beta1 < 1 && o->beta2 >= 0 && o->beta2 < 1 && o->eps > 0 &&
                  o->weight_decay >= 0 && o->epoch_decay > 0 && o->grad_clip >= 0,
              ErrorCode::config_invalid, "optimizer settings out of range");
  }
};

namespace detail {

// Reads fields of one JSON object and rejects keys that were never read.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    require(j_.is_object(), ErrorCode::config_invalid, where_ + " must be a JSON object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_unsigned_v<V> && !std::is_same_v<V, bool>) {
        require(it->is_number_unsigned(), ErrorCode::config_invalid,
                where_ + "." + key + " must be a non-negative integer");
      }
      out = it->template get<V>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::config_invalid, where_ + "." + key + ": " + e.what());
    }
  }

  StrictObject child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return StrictObject(it == j_.end() ? empty : *it, where_ + "." + key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      require(seen_.count(it.key()) != 0, ErrorCode::config_invalid, "unknown key " + where_ + "." + it.key());
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline nlohmann::json optimizer_json(const AdamWConfig& o) {
  return {{"lr", o.lr},
          {"beta1", o.beta1},
          {"beta2", o.beta2},
          {"eps", o.eps},
          {"weight_decay", o.weight_decay},
          {"epoch_decay", o.epoch_decay},
          {"grad_clip", o.grad_clip}};
}

inline void read_optimizer(StrictObject obj, AdamWConfig& o) {
  obj.get("lr", o.lr);
  obj.get("beta1", o.beta1);
  obj.get("beta2", o.beta2);
  obj.get("eps", o.eps);
  obj.get("weight_decay", o.weight_decay);
  obj.get("epoch_decay", o.epoch_decay);
  obj.get("grad_clip", o.grad_clip);
  obj.finish();
}

inline nlohmann::json corpus_json(const SyntheticCorpusSpec& c) {
  return {{"n_utterances", c.n_utterances}, {"dim", c.dim},
          {"frame_rate_hz", c.frame_rate_hz}, {"frames_per_char", c.frames_per_char},
          {"min_text_len", c.min_text_len}, {"max_text_len", c.max_text_len},
          {"vocabulary", c.vocabulary}, {"n_speakers", c.n_speakers},
          {"noise_std", c.noise_std}, {"dev_fraction", c.dev_fraction},
          {"test_fraction", c.test_fraction}, {"generator", c.generator}};
}

inline nlohmann::json bridge_json(const BridgeConfig& b, const AdamWConfig& o) {
  return {{"groups", b.groups},
          {"levels", b.levels},
          {"codebook_size", b.codebook_size},
          {"predictor_width", b.predictor_width},
          {"activation", std::string(to_string(b.activation))},
          {"ema_decay", b.ema_decay},
          {"dead_code_threshold", b.dead_code_threshold},
          {"commitment", b.commitment},
          {"commitment_beta", b.commitment_beta},
          {"optimizer", optimizer_json(o)}};
}

inline nlohmann::json ar_json(const ArConfig& a, const AdamWConfig& o) {
  return {{"width", a.width},
          {"layers", a.layers},
          {"heads", a.heads},
          {"context", a.context},
          {"frames_per_step", a.frames_per_step},
          {"input", std::string(to_string(a.input))},
          {"teacher_frames", std::string(to_string(a.teacher_frames))},
          {"feature_loss", a.feature_loss},
          {"optimizer", optimizer_json(o)}};
}

inline std::uint64_t hash_json(const nlohmann::json& j) { return fnv1a(j.dump()); }

}  // namespace detail

// nlohmann::json objects keep keys sorted, so dump() is already canonical.
inline nlohmann::json to_json(const Config& c) {
  return {{"seed", c.seed},
          {"corpus", detail::corpus_json(c.corpus)},
          {"bridge", detail::bridge_json(c.bridge, c.bridge_optimizer)},
          {"ar", detail::ar_json(c.ar, c.ar_optimizer)},
          {"schedule",
           {{"bridge_steps", c.schedule.bridge_steps},
            {"ar_steps", c.schedule.ar_steps},
            {"batch_size", c.schedule.batch_size},
            {"eval_every", c.schedule.eval_every},
            {"checkpoint_every", c.schedule.checkpoint_every}}},
          {"paths",
           {{"corpus", c.paths.corpus},
            {"bridge_checkpoint", c.paths.bridge_checkpoint},
            {"ar_checkpoint", c.paths.ar_checkpoint}}}};
}

// Missing keys keep their defaults; unknown keys are an error.
inline Config config_from_json(const nlohmann::json& j) {
  Config c;
  detail::StrictObject root(j, "config");
  root.get("seed", c.seed);
  {
    auto o = root.child("corpus");
    auto& s = c.corpus;
    o.get("n_utterances", s.n_utterances);
    o.get("dim", s.dim);
    o.get("frame_rate_hz", s.frame_rate_hz);
    o.get("frames_per_char", s.frames_per_char);
    o.get("min_text_len", s.min_text_len);
    o.get("max_text_len", s.max_text_len);
    o.get("vocabulary", s.vocabulary);
    o.get("n_speakers", s.n_speakers);
    o.get("noise_std", s.noise_std);
    o.get("dev_fraction", s.dev_fraction);
    o.get("test_fraction", s.test_fraction);
    o.get("generator", s.generator);
    o.finish();
  }
  {
    auto o = root.child("bridge");
    auto& b = c.bridge;
    std::string activation(to_string(b.activation));
    o.get("groups", b.groups);
    o.get("levels", b.levels);
    o.get("codebook_size", b.codebook_size);
    o.get("predictor_width", b.predictor_width);
    o.get("activation", activation);
    o.get("ema_decay", b.ema_decay);
    o.get("dead_code_threshold", b.dead_code_threshold);
    o.get("commitment", b.commitment);
    o.get("commitment_beta", b.commitment_beta);
    detail::read_optimizer(o.child("optimizer"), c.bridge_optimizer);
    o.finish();
    b.activation = parse_activation(activation);
  }
  {
    auto o = root.child("ar");
    auto& a = c.ar;
    std::string input(to_string(a.input)), teacher(to_string(a.teacher_frames));
    o.get("width", a.width);
    o.get("layers", a.layers);
    o.get("heads", a.heads);
    o.get("context", a.context);
    o.get("frames_per_step", a.frames_per_step);
    o.get("input", input);
    o.get("teacher_frames", teacher);
    o.get("feature_loss", a.feature_loss);
    detail::read_optimizer(o.child("optimizer"), c.ar_optimizer);
    o.finish();
    a.input = parse_ar_input(input);
    a.teacher_frames = parse_teacher_frames(teacher);
  }
  {
    auto o = root.child("schedule");
    o.get("bridge_steps", c.schedule.bridge_steps);
    o.get("ar_steps", c.schedule.ar_steps);
    o.get("batch_size", c.schedule.batch_size);
    o.get("eval_every", c.schedule.eval_every);
    o.get("checkpoint_every", c.schedule.checkpoint_every);
    o.finish();
  }
  {
    auto o = root.child("paths");
    o.get("corpus", c.paths.corpus);
    o.get("bridge_checkpoint", c.paths.bridge_checkpoint);
    o.get("ar_checkpoint", c.paths.ar_checkpoint);
    o.finish();
  }
  root.finish();
  c.bridge.feature_dim = c.corpus.dim;
  c.set_seed(c.seed);
  c.validate();
  return c;
}

inline Config parse_config(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::config_invalid, e.what());
  }
  return config_from_json(j);
}

inline Config load_config(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorCode::not_found, "config " + path.string() + " does not exist");
  return parse_config(read_file(path));
}

inline Config default_config() { return config_from_json(nlohmann::json::object()); }

// Lineage hashes over canonical JSON: the bridge depends on seed, corpus and
// bridge sections; the AR model additionally on the ar section.
inline std::uint64_t bridge_config_hash(const Config& c) {
  const auto j = to_json(c);
  return detail::hash_json({{"seed", j["seed"]}, {"corpus", j["corpus"]}, {"bridge", j["bridge"]}});
}

inline std::uint64_t ar_config_hash(const Config& c) {
  const auto j = to_json(c);
  return detail::hash_json({{"seed", j["seed"]}, {"corpus", j["corpus"]}, {"bridge", j["bridge"]}, {"ar", j["ar"]}});
}

inline std::uint64_t config_hash(const Config& c) { return detail::hash_json(to_json(c)); }

}  // namespace bridgetts
