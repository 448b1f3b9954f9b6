#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bridgetts/ar_generator.hpp"
#include "bridgetts/bridge_trainer.hpp"
#include "bridgetts/checkpoint.hpp"
#include "bridgetts/config.hpp"
#include "bridgetts/corpus.hpp"
#include "bridgetts/metrics.hpp"

namespace bridgetts {

namespace fs = std::filesystem;

// Output locations of one run; relative config paths resolve against `out`.
struct RunPaths {
  fs::path out;
  fs::path corpus, bridge, ar;

  RunPaths(const Config& cfg, fs::path out_dir) : out(std::move(out_dir)) {
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : out / p; };
    corpus = resolve(cfg.paths.corpus);
    bridge = resolve(cfg.paths.bridge_checkpoint);
    ar = resolve(cfg.paths.ar_checkpoint);
  }
};

inline std::string canonical_config(const Config& cfg) { return to_json(cfg).dump(); }

// ------------------------------------------------------------------ corpus

// Hash of the manifest bytes followed by every feature file in manifest order.
inline std::uint64_t corpus_hash(const fs::path& dir) {
  Fnv1a h;
  h.update(read_file(dir / manifest_name));
  const auto manifest = nlohmann::json::parse(read_file(dir / manifest_name));
  for (const auto& rec : manifest) h.update(read_file(dir / rec.at("feature_path").get<std::string>()));
  return h.digest();
}

inline std::uint64_t gen_corpus(const Config& cfg, const fs::path& dir) {
  const auto corpus = generate_corpus(cfg.corpus);
  write_corpus(dir, corpus);
  const auto hash = corpus_hash(dir);
  log_info("wrote " + std::to_string(corpus.size()) + " utterances to " + dir.string() + ", hash " +
           std::to_string(hash));
  return hash;
}

// The configured corpus must match what is on disk.
inline std::vector<Utterance> load_run_corpus(const Config& cfg, const fs::path& dir) {
  auto corpus = load_corpus(dir);
  for (const auto& u : corpus)
    require(u.features.dim() == cfg.corpus.dim && u.features.frame_rate_hz == cfg.corpus.frame_rate_hz,
            ErrorCode::dimension_mismatch,
            u.id() + " has D=" + std::to_string(u.features.dim()) + " at " + std::to_string(u.features.frame_rate_hz) +
                " Hz, config expects D=" + std::to_string(cfg.corpus.dim) + " at " +
                std::to_string(cfg.corpus.frame_rate_hz) + " Hz");
  return corpus;
}

inline std::vector<const Array<float>*> split_frames(const std::vector<Utterance>& corpus, Split split) {
  std::vector<const Array<float>*> out;
  for (const auto* u : select_split(corpus, split)) out.push_back(&u->features.frames);
  return out;
}

// ------------------------------------------------------------------ bridge

struct BridgeEval {
  double code = 0, feat = 0, roundtrip = 0;
};

inline BridgeEval evaluate_bridge(const BridgeModel<float>& model, const std::vector<const Array<float>*>& frames) {
  BridgeEval e;
  if (frames.empty()) return e;
  for (const auto* f0 : frames) {
    Tape<float> tape;
    auto p = model.params().bind(tape, false);
    QuantizationPlan<float> plan;
    auto l = bridge_loss(model, p, tape, *f0, plan);
    e.code += l.code.value().item();
    e.feat += l.feat.value().item();
  }
  e.code /= static_cast<double>(frames.size());
  e.feat /= static_cast<double>(frames.size());
  e.roundtrip = roundtrip_mse(model, frames);
  return e;
}

struct TrainOptions {
  std::uint64_t steps = 0;
  bool resume = false;
  std::optional<fs::path> log_path;  // JSON-lines step log
};

inline void append_line(const std::optional<fs::path>& path, const nlohmann::json& j) {
  if (!path) return;
  std::ofstream out(*path, std::ios::app);
  require(static_cast<bool>(out), ErrorCode::io, "cannot append to " + path->string());
  out << j.dump() << "\n";
}

inline BridgeModel<float> new_bridge(const Config& cfg) {
  return BridgeModel<float>(cfg.bridge, derive_seed(cfg.seed, "bridge.init"));
}

inline BridgeModel<float> load_bridge(const Config& cfg, const fs::path& path) {
  const auto c = load_checkpoint(path, ckpt::bridge_magic);
  require_hash(c, bridge_config_hash(cfg), "bridge");
  auto model = new_bridge(cfg);
  restore_bridge(model, c);
  return model;
}

inline BridgeModel<float> train_bridge(const Config& cfg, const std::vector<Utterance>& corpus,
                                       const fs::path& ckpt_path, const TrainOptions& opt, MetricsReport& report) {
  auto model = new_bridge(cfg);
  const auto train = split_frames(corpus, Split::train);
  const auto dev = split_frames(corpus, Split::dev);
  BridgeTrainer trainer(model, train, cfg.bridge_optimizer, cfg.schedule.batch_size,
                        derive_seed(cfg.seed, "bridge.data"));
  const auto hash = bridge_config_hash(cfg);
  if (opt.resume && fs::exists(ckpt_path)) {
    const auto c = load_checkpoint(ckpt_path, ckpt::bridge_magic);
    require_hash(c, hash, "bridge");
    restore_bridge(model, c);
    restore_optimizer(trainer.optimizer(), c);
    trainer.restore(c.progress);
    log_info("resumed bridge training at step " + std::to_string(c.progress.step));
  }
  report.frame_rate_hz = cfg.corpus.frame_rate_hz;
  auto save = [&] {
    save_checkpoint(ckpt_path, bridge_checkpoint(model, trainer.optimizer(), trainer.progress(), hash, canonical_config(cfg)));
  };
  auto eval = [&](std::uint64_t step) {
    const auto e = evaluate_bridge(model, dev.empty() ? train : dev);
    report.curves["l_code"].push_back({step, e.code});
    report.curves["l_feat"].push_back({step, e.feat});
    report.curves["dev_roundtrip_mse"].push_back({step, e.roundtrip});
    report.reconstruction_mse = e.roundtrip;
    append_line(opt.log_path, {{"step", step}, {"dev_l_code", e.code}, {"dev_l_feat", e.feat}, {"dev_roundtrip_mse", e.roundtrip}});
    log_info("bridge step " + std::to_string(step) + " dev L_code " + std::to_string(e.code) + " L_feat " +
             std::to_string(e.feat) + " roundtrip " + std::to_string(e.roundtrip));
  };
  const std::uint64_t target = trainer.steps_done() + opt.steps;
  if (trainer.steps_done() == 0) eval(0);
  while (trainer.steps_done() < target) {
    const auto s = trainer.step();
    log_debug("bridge step " + std::to_string(s.step) + " code " + std::to_string(s.code) + " feat " +
              std::to_string(s.feat) + " reseeded " + std::to_string(s.reseeded));
    append_line(opt.log_path, {{"step", s.step}, {"epoch", s.epoch}, {"l_code", s.code}, {"l_feat", s.feat},
                               {"total", s.total}, {"grad_norm", s.grad_norm}, {"lr", s.lr}, {"reseeded", s.reseeded}});
    if (cfg.schedule.eval_every && s.step % cfg.schedule.eval_every == 0) eval(s.step);
    if (cfg.schedule.checkpoint_every && s.step % cfg.schedule.checkpoint_every == 0) save();
  }
  if (report.curves["l_code"].empty() || report.curves["l_code"].back().step != trainer.steps_done())
    eval(trainer.steps_done());
  save();
  return model;
}

// ------------------------------------------------------------------ AR

inline ArShape ar_shape(const Config& cfg) {
  return ArShape{cfg.corpus.dim, cfg.bridge.groups, cfg.bridge.codebook_size, text_vocab_size(cfg.corpus.vocabulary)};
}

inline ArModel new_ar(const Config& cfg) { return ArModel(cfg.ar, ar_shape(cfg), derive_seed(cfg.seed, "ar.init")); }

inline ArModel load_ar(const Config& cfg, const fs::path& path) {
  const auto c = load_checkpoint(path, ckpt::ar_magic);
  require_hash(c, ar_config_hash(cfg), "AR");
  require(c.parent_hash == bridge_config_hash(cfg), ErrorCode::config_hash_mismatch,
          "AR checkpoint was trained on bridge " + std::to_string(c.parent_hash) + ", config names bridge " +
              std::to_string(bridge_config_hash(cfg)));
  auto model = new_ar(cfg);
  restore_params(model.params(), c.params);
  return model;
}

inline std::vector<ArExample> ar_examples(const Config& cfg, const std::vector<Utterance>& corpus,
                                          const BridgeModel<float>& bridge, Split split) {
  return build_training_set(corpus, split, bridge, cfg.corpus.vocabulary, cfg.ar.input, cfg.ar.teacher_frames);
}

inline std::unique_ptr<TokenDecoder> make_decoder(const Config& cfg, const BridgeModel<float>& bridge,
                                                  const std::vector<ArExample>& train_examples) {
  if (cfg.ar.input == ArInput::tokens) return std::make_unique<RepeatDecoder>(train_examples);
  return std::make_unique<BridgeDecoder>(bridge);
}

struct TeacherForcedSummary {
  double accuracy = 0.0;
  double feature_mse = 0.0;  // frame-weighted over the examples
};

inline TeacherForcedSummary evaluate_teacher_forced(const ArModel& model, const std::vector<ArExample>& examples,
                                                    const TokenDecoder& decoder) {
  std::size_t correct = 0, scored = 0;
  double err = 0.0, count = 0.0;
  for (const auto& ex : examples) {
    const auto r = teacher_forced(model, ex, decoder);
    correct += r.correct;
    scored += r.scored;
    err += r.feature_mse * static_cast<double>(ex.target.size());
    count += static_cast<double>(ex.target.size());
  }
  return {scored ? static_cast<double>(correct) / static_cast<double>(scored) : 0.0, count > 0 ? err / count : 0.0};
}

inline ArModel train_ar(const Config& cfg, const std::vector<Utterance>& corpus, const BridgeModel<float>& bridge,
                        const fs::path& ckpt_path, const TrainOptions& opt, MetricsReport& report) {
  const auto bridge_sum = bridge.params().checksum();
  auto model = new_ar(cfg);
  auto examples = ar_examples(cfg, corpus, bridge, Split::train);
  ArTrainer trainer(model, bridge, examples, cfg.ar_optimizer, cfg.schedule.batch_size, derive_seed(cfg.seed, "ar.data"));
  const auto hash = ar_config_hash(cfg), parent = bridge_config_hash(cfg);
  if (opt.resume && fs::exists(ckpt_path)) {
    const auto c = load_checkpoint(ckpt_path, ckpt::ar_magic);
    require_hash(c, hash, "AR");
    restore_params(model.params(), c.params);
    restore_optimizer(trainer.optimizer(), c);
    trainer.restore(c.progress);
    log_info("resumed AR training at step " + std::to_string(c.progress.step));
  }
  report.frame_rate_hz = cfg.corpus.frame_rate_hz;
  report.frames_per_token = cfg.ar.frames_per_step;
  auto save = [&] {
    save_checkpoint(ckpt_path,
                    ar_checkpoint(model, trainer.optimizer(), trainer.progress(), hash, parent, canonical_config(cfg)));
  };
  const std::uint64_t target = trainer.steps_done() + opt.steps;
  while (trainer.steps_done() < target) {
    const auto s = trainer.step();
    report.curves["l_token"].push_back({s.step, s.token});
    report.curves["l_features"].push_back({s.step, s.features});
    report.curves["accuracy"].push_back({s.step, s.accuracy});
    append_line(opt.log_path, {{"step", s.step}, {"epoch", s.epoch}, {"l_token", s.token}, {"l_features", s.features},
                               {"l_ar", s.total}, {"per_head", s.per_head}, {"accuracy", s.accuracy},
                               {"grad_norm", s.grad_norm}, {"lr", s.lr}});
    if (cfg.schedule.eval_every && s.step % cfg.schedule.eval_every == 0)
      log_info("AR step " + std::to_string(s.step) + " L_token " + std::to_string(s.token) + " L_features " +
               std::to_string(s.features) + " batch accuracy " + std::to_string(s.accuracy));
    if (cfg.schedule.checkpoint_every && s.step % cfg.schedule.checkpoint_every == 0) save();
  }
  save();
  require(bridge.params().checksum() == bridge_sum, ErrorCode::invalid_argument, "AR training modified the bridge");
  const auto decoder = make_decoder(cfg, bridge, trainer.examples());
  const auto tf = evaluate_teacher_forced(model, trainer.examples(), *decoder);
  report.teacher_forced_accuracy = tf.accuracy;
  report.feature_mse = tf.feature_mse;
  log_info("AR teacher-forced accuracy " + std::to_string(tf.accuracy) + ", feature MSE " + std::to_string(tf.feature_mse));
  return model;
}

// ------------------------------------------------------------------ synthesis

// Token budget for a target text: its expected frame count in steps plus slack.
inline std::size_t step_budget(const Config& cfg, std::size_t chars) {
  const std::size_t frames = chars * cfg.corpus.frames_per_char;
  const std::size_t steps = (frames + cfg.ar.frames_per_step - 1) / cfg.ar.frames_per_step;
  return steps + std::max<std::size_t>(2, steps / 4);
}

inline ArSession synthesize(const Config& cfg, const ArModel& model, const BridgeModel<float>& bridge,
                            const TokenDecoder& decoder, const Utterance& reference, const std::string& text,
                            std::optional<std::size_t> max_steps = std::nullopt) {
  require(!text.empty(), ErrorCode::invalid_argument, "target text is empty");
  const auto tokens = encode_text(reference.text, text, cfg.corpus.vocabulary);
  const std::size_t budget = max_steps.value_or(step_budget(cfg, text.size()));
  require(cfg.ar.frames_per_step == BridgeConfig::rate_factor, ErrorCode::invalid_argument,
          "synthesis needs one AR step per sparse token");
  ArSession session = make_bridged_session(tokens, reference.features.frames, bridge, budget);
  generate(session, model, decoder);
  return session;
}

inline const Utterance& find_utterance(const std::vector<Utterance>& corpus, const std::string& id) {
  for (const auto& u : corpus)
    if (u.id() == id) return u;
  fail(ErrorCode::not_found, "no utterance '" + id + "' in corpus");
}

// ------------------------------------------------------------------ RTF benchmark

struct RtfOptions {
  std::size_t runs = 10;
  std::size_t bridged_steps = 80;  // baseline generates frames_per_step x as many
  std::string text = "abcdefghij";
};

struct RtfResult {
  double bridged_seconds_per_second = 0.0;  // medians over runs
  double baseline_seconds_per_second = 0.0;
  double ratio = 0.0;
  std::size_t bridged_passes = 0;
  std::size_t baseline_passes = 0;
  std::size_t frames = 0;
};

inline double median(std::vector<double> v) {
  require(!v.empty(), ErrorCode::invalid_argument, "median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// The per-frame baseline: same transformer, one frame in and one token out per step.
inline ArModel make_baseline(const Config& cfg) {
  ArConfig base = cfg.ar;
  base.input = ArInput::features;
  base.frames_per_step = 1;
  return ArModel(base, ar_shape(cfg), derive_seed(cfg.seed, "baseline.init"));
}

// Both systems generate the same number of frames from the same text with EOS
// disabled. Timing covers the whole generate() call.
inline RtfResult bench_rtf(const Config& cfg, const ArModel& bridged, const BridgeModel<float>& bridge,
                           const ArModel& baseline, const RtfOptions& opt) {
  require(opt.runs >= 1 && opt.bridged_steps >= 1, ErrorCode::invalid_argument, "need at least one run and step");
  require(bridged.config().width == baseline.config().width && bridged.config().layers == baseline.config().layers &&
              bridged.config().heads == baseline.config().heads,
          ErrorCode::invalid_argument, "RTF comparison needs identical transformer dims");
  const BridgeDecoder bridged_decoder(bridge);
  const CodewordReadout baseline_decoder(bridge);
  const std::size_t fps = bridged.config().frames_per_step;
  const double rate = static_cast<double>(cfg.corpus.frame_rate_hz);
  const Array<float> no_reference(Shape{0, cfg.corpus.dim});
  const auto text = encode_text(opt.text, opt.text, cfg.corpus.vocabulary);
  GenerateOptions gopt;
  gopt.allow_eos = false;
  gopt.record_transcript = false;

  RtfResult res;
  std::vector<double> bridged_t, baseline_t;
  for (std::size_t run = 0; run < opt.runs; ++run) {
    auto s1 = make_session(text, no_reference, fps, opt.bridged_steps);
    auto t0 = std::chrono::steady_clock::now();
    const auto f1 = generate(s1, bridged, bridged_decoder, gopt);
    const double secs1 = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    auto s2 = make_session(text, no_reference, 1, opt.bridged_steps * fps);
    t0 = std::chrono::steady_clock::now();
    const auto f2 = generate(s2, baseline, baseline_decoder, gopt);
    const double secs2 = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    require(f1.rows() == f2.rows(), ErrorCode::shape_mismatch, "bridged and baseline output lengths differ");
    res.frames = f1.rows();
    res.bridged_passes = s1.forward_passes;
    res.baseline_passes = s2.forward_passes;
    const double speech_seconds = static_cast<double>(f1.rows()) / rate;
    bridged_t.push_back(secs1 / speech_seconds);
    baseline_t.push_back(secs2 / speech_seconds);
  }
  res.bridged_seconds_per_second = median(bridged_t);
  res.baseline_seconds_per_second = median(baseline_t);
  res.ratio = res.bridged_seconds_per_second / res.baseline_seconds_per_second;
  return res;
}

inline void fill_report(MetricsReport& m, const RtfResult& r, double frame_rate_hz) {
  const double seconds = static_cast<double>(r.frames) / frame_rate_hz;
  m.rtf_ratio = r.ratio;
  m.bridged_seconds_per_second = r.bridged_seconds_per_second;
  m.baseline_seconds_per_second = r.baseline_seconds_per_second;
  m.bridged_forward_passes_per_second = static_cast<double>(r.bridged_passes) / seconds;
  m.baseline_forward_passes_per_second = static_cast<double>(r.baseline_passes) / seconds;
}

// ------------------------------------------------------------------ ablation

enum class Variant { full, no_feature_loss, no_dense_bridge };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_feature_loss: return "no_feature_loss";
    case Variant::no_dense_bridge: return "no_dense_bridge";
  }
  return "unknown";
}

// The variant configs differ from `base` only in the ablated flag.
inline Config variant_config(const Config& base, Variant v) {
  Config c = base;
  if (v == Variant::no_feature_loss) c.ar.feature_loss = false;
  if (v == Variant::no_dense_bridge) {
    c.ar.input = ArInput::tokens;
    c.ar.feature_loss = false;
  }
  return c;
}

struct VariantResult {
  Variant variant = Variant::full;
  std::uint64_t seed = 0;
  double dev_feature_mse = 0.0;
  double dev_accuracy = 0.0;
  double train_accuracy = 0.0;
};

struct AblationReport {
  std::vector<VariantResult> results;
  std::size_t seeds_in_order = 0;  // seeds where full <= no_feature_loss <= no_dense_bridge
  std::size_t seeds = 0;
  bool majority_ordered() const { return 2 * seeds_in_order > seeds; }
};

inline nlohmann::json to_json(const AblationReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& v : r.results)
    rows.push_back({{"variant", std::string(to_string(v.variant))}, {"seed", v.seed},
                    {"dev_feature_mse", v.dev_feature_mse}, {"dev_accuracy", v.dev_accuracy},
                    {"train_accuracy", v.train_accuracy}});
  return {{"results", rows}, {"seeds", r.seeds}, {"seeds_in_order", r.seeds_in_order},
          {"majority_ordered", r.majority_ordered()}};
}

// Per seed: one corpus and bridge, then the three AR variants with identical
// seed and step budget, scored by teacher-forced dev feature MSE.
inline AblationReport ablate(const Config& base, const std::vector<std::uint64_t>& seeds, std::uint64_t bridge_steps,
                             std::uint64_t ar_steps, const fs::path& work) {
  AblationReport report;
  for (std::uint64_t seed : seeds) {
    Config cfg = base;
    cfg.set_seed(seed);
    const auto corpus = generate_corpus(cfg.corpus);
    const fs::path dir = work / ("seed" + std::to_string(seed));
    MetricsReport bm;
    const auto bridge = train_bridge(cfg, corpus, dir / "bridge.brgc", {bridge_steps, false, std::nullopt}, bm);
    std::vector<double> mse;
    for (Variant v : {Variant::full, Variant::no_feature_loss, Variant::no_dense_bridge}) {
      const Config vc = variant_config(cfg, v);
      MetricsReport am;
      const auto model = train_ar(vc, corpus, bridge, dir / (std::string(to_string(v)) + ".brga"),
                                  {ar_steps, false, std::nullopt}, am);
      const auto train_ex = ar_examples(vc, corpus, bridge, Split::train);
      const auto dev_ex = ar_examples(vc, corpus, bridge, Split::dev);
      const auto decoder = make_decoder(vc, bridge, train_ex);
      const auto dev = evaluate_teacher_forced(model, dev_ex, *decoder);
      report.results.push_back({v, seed, dev.feature_mse, dev.accuracy, am.teacher_forced_accuracy.value_or(0.0)});
      mse.push_back(dev.feature_mse);
      log_info("ablation seed " + std::to_string(seed) + " " + std::string(to_string(v)) + ": dev feature MSE " +
               std::to_string(dev.feature_mse) + ", dev accuracy " + std::to_string(dev.accuracy));
    }
    ++report.seeds;
    if (mse[0] <= mse[1] && mse[1] <= mse[2]) ++report.seeds_in_order;
  }
  return report;
}

}  // namespace bridgetts
