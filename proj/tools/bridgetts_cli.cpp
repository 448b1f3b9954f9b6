#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bridgetts/harness.hpp"
#include "bridgetts/oracles.hpp"

namespace {

using namespace bridgetts;

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  std::optional<std::uint64_t> steps;
  std::string device = "cpu";
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "JSON config file (defaults when omitted)");
  cmd->add_option("--seed", o.seed, "Override the config seed");
  cmd->add_option("--out", o.out, "Output directory")->capture_default_str();
  cmd->add_option("--steps", o.steps, "Override the step budget of this command");
  cmd->add_option("--device", o.device, "Compute device")->check(CLI::IsMember({"cpu"}))->capture_default_str();
}

Config resolve_config(const CommonOptions& o) {
  Config cfg = o.config_path.empty() ? default_config() : load_config(o.config_path);
  if (o.seed) cfg.set_seed(*o.seed);
  return cfg;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

std::optional<fs::path> fresh_log(const fs::path& path, bool resume) {
  fs::create_directories(path.parent_path());
  if (!resume) fs::remove(path);
  return path;
}

int run_gradcheck(std::uint64_t seeds) {
  bool ok = true;
  nlohmann::json rows = nlohmann::json::array();
  for (std::uint64_t s = 1; s <= seeds; ++s)
    for (const auto& r : oracle_suite(s)) {
      ok = ok && r.passed;
      if (!r.passed || log_level() == LogLevel::debug)
        log_message(r.passed ? LogLevel::debug : LogLevel::error,
                    "seed " + std::to_string(s) + " " + r.name + (r.passed ? " ok" : " FAILED") +
                        " max rel error " + std::to_string(r.max_rel_error));
      rows.push_back({{"seed", s}, {"name", r.name}, {"passed", r.passed}, {"max_rel_error", r.max_rel_error},
                      {"checked", r.checked}});
    }
  std::cout << nlohmann::json{{"passed", ok}, {"results", rows}}.dump(2) << "\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-token bridging TTS training and evaluation harness"};
  app.require_subcommand(1);
  CommonOptions common;

  auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic corpus and manifest");
  add_common(gen, common);

  bool resume = false;
  auto* tb = app.add_subcommand("train-bridge", "Train SparseBridge and DenseBridge");
  add_common(tb, common);
  tb->add_flag("--resume", resume, "Continue from the existing checkpoint");

  auto* ta = app.add_subcommand("train-ar", "Train the AR generator against a frozen bridge");
  add_common(ta, common);
  ta->add_flag("--resume", resume, "Continue from the existing checkpoint");

  std::string reference, text, output, transcript;
  std::optional<std::size_t> max_steps;
  auto* syn = app.add_subcommand("synthesize", "Generate features for a target text");
  add_common(syn, common);
  syn->add_option("--reference", reference, "Reference utterance id (default: first training utterance)");
  syn->add_option("--text", text, "Target text")->required();
  syn->add_option("--max-steps", max_steps, "Token budget (default: from text length)");
  syn->add_option("--output", output, "BRGF output path (default: OUT/synth.brgf)");
  syn->add_option("--transcript", transcript, "JSON-lines step transcript (default: OUT/synth.jsonl)");

  RtfOptions rtf;
  auto* bench = app.add_subcommand("bench-rtf", "Time bridged generation against the per-frame baseline");
  add_common(bench, common);
  bench->add_option("--runs", rtf.runs, "Timed runs; the median is reported")->check(CLI::Range(1, 1000));
  bench->add_option("--bridged-steps", rtf.bridged_steps, "Bridged tokens per run")->check(CLI::Range(1, 100000));

  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::optional<std::uint64_t> ablate_bridge_steps, ablate_ar_steps;
  auto* abl = app.add_subcommand("ablate", "Train the ablation variants and compare dev feature MSE");
  add_common(abl, common);
  abl->add_option("--seeds", seeds, "Seeds, one full comparison each");
  abl->add_option("--bridge-steps", ablate_bridge_steps, "Bridge steps per seed");
  abl->add_option("--ar-steps", ablate_ar_steps, "AR steps per variant");

  std::uint64_t oracle_seeds = 20;
  auto* gc = app.add_subcommand("gradcheck", "Run every finite-difference and brute-force oracle");
  gc->add_option("--seed-count", oracle_seeds, "Seeds 1..N to run")->check(CLI::Range(1, 1000));

  CLI11_PARSE(app, argc, argv);

  try {
    if (gc->parsed()) return run_gradcheck(oracle_seeds);

    const Config cfg = resolve_config(common);
    const RunPaths paths(cfg, common.out);
    fs::create_directories(paths.out);

    if (gen->parsed()) {
      const auto hash = gen_corpus(cfg, paths.corpus);
      std::cout << nlohmann::json{{"corpus", paths.corpus.string()}, {"hash", hash}}.dump() << "\n";
      return 0;
    }
    if (tb->parsed()) {
      const auto corpus = load_run_corpus(cfg, paths.corpus);
      MetricsReport report;
      train_bridge(cfg, corpus, paths.bridge,
                   {common.steps.value_or(cfg.schedule.bridge_steps), resume, fresh_log(paths.out / "bridge_log.jsonl", resume)},
                   report);
      write_json(paths.out / "bridge_metrics.json", to_json(report));
      return 0;
    }
    if (ta->parsed()) {
      const auto corpus = load_run_corpus(cfg, paths.corpus);
      require(fs::exists(paths.bridge), ErrorCode::not_found, "missing bridge checkpoint " + paths.bridge.string());
      const auto bridge = load_bridge(cfg, paths.bridge);
      MetricsReport report;
      train_ar(cfg, corpus, bridge, paths.ar,
               {common.steps.value_or(cfg.schedule.ar_steps), resume, fresh_log(paths.out / "ar_log.jsonl", resume)},
               report);
      write_json(paths.out / "ar_metrics.json", to_json(report));
      return 0;
    }
    if (syn->parsed()) {
      const auto corpus = load_run_corpus(cfg, paths.corpus);
      const auto bridge = load_bridge(cfg, paths.bridge);
      const auto model = load_ar(cfg, paths.ar);
      const auto train_ex = cfg.ar.input == ArInput::tokens ? ar_examples(cfg, corpus, bridge, Split::train)
                                                            : std::vector<ArExample>{};
      const auto decoder = make_decoder(cfg, bridge, train_ex);
      const Utterance& ref = reference.empty() ? *select_split(corpus, Split::train).at(0) : find_utterance(corpus, reference);
      auto session = synthesize(cfg, model, bridge, *decoder, ref, text, max_steps);
      const fs::path out_path = output.empty() ? paths.out / "synth.brgf" : fs::path(output);
      const fs::path tr_path = transcript.empty() ? paths.out / "synth.jsonl" : fs::path(transcript);
      require(!session.tokens.empty(), ErrorCode::invalid_argument, "generation emitted EOS before any token");
      DenseFeatures f{session.generated(), cfg.corpus.frame_rate_hz, "synth"};
      write_features(out_path, f);
      write_file_atomic(tr_path, transcript_jsonl(session.transcript));
      std::cout << nlohmann::json{{"output", out_path.string()}, {"transcript", tr_path.string()},
                                  {"tokens", session.tokens.size()}, {"frames", f.length()},
                                  {"eos", session.step < session.max_steps}}
                       .dump()
                << "\n";
      return 0;
    }
    if (bench->parsed()) {
      const auto bridge = fs::exists(paths.bridge) ? load_bridge(cfg, paths.bridge) : new_bridge(cfg);
      const auto model = fs::exists(paths.ar) ? load_ar(cfg, paths.ar) : new_ar(cfg);
      if (!fs::exists(paths.ar)) log_info("no AR checkpoint; timing untrained models");
      const auto baseline = make_baseline(cfg);
      const auto r = bench_rtf(cfg, model, bridge, baseline, rtf);
      MetricsReport report;
      report.frame_rate_hz = cfg.corpus.frame_rate_hz;
      report.frames_per_token = cfg.ar.frames_per_step;
      fill_report(report, r, report.frame_rate_hz);
      const auto j = to_json(report);
      write_json(paths.out / "rtf_metrics.json", j);
      std::cout << j.dump(2) << "\n";
      return 0;
    }
    if (abl->parsed()) {
      const auto report = ablate(cfg, seeds, ablate_bridge_steps.value_or(cfg.schedule.bridge_steps),
                                 ablate_ar_steps.value_or(cfg.schedule.ar_steps), paths.out / "ablation");
      const auto j = to_json(report);
      write_json(paths.out / "ablation.json", j);
      std::cout << j.dump(2) << "\n";
      return report.majority_ordered() ? 0 : 1;
    }
  } catch (const Error& e) {
    std::cerr << nlohmann::json{{"error", std::string(to_string(e.code()))}, {"message", e.what()}}.dump() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
    return 2;
  }
  return 0;
}
