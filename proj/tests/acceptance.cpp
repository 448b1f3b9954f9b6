#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <set>

#include <CLI11.hpp>

#include "bridgetts/harness.hpp"
#include "bridgetts/oracles.hpp"

using namespace bridgetts;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
  nlohmann::json values = nlohmann::json::object();
};

struct Criterion {
  int id;
  std::string title;
  std::function<Outcome(const fs::path&)> run;
};

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(6) << v;
  return s.str();
}

// Memorization run: 50 utterances, small AR, bridge-decoded teacher frames.
Config memorization_config() {
  return parse_config(R"({
    "corpus": {"n_utterances": 50},
    "bridge": {"optimizer": {"lr": 0.001}},
    "ar": {"width": 64, "layers": 2, "teacher_frames": "bridge_decode", "optimizer": {"lr": 0.001}},
    "schedule": {"bridge_steps": 1500, "ar_steps": 2000, "eval_every": 500, "checkpoint_every": 0}
  })");
}

Config ablation_config() {
  return parse_config(R"({
    "corpus": {"n_utterances": 1000},
    "bridge": {"optimizer": {"lr": 0.001}},
    "ar": {"width": 64, "layers": 2, "teacher_frames": "bridge_decode", "optimizer": {"lr": 0.001}},
    "schedule": {"bridge_steps": 1500, "ar_steps": 2000, "eval_every": 500, "checkpoint_every": 0}
  })");
}

Config determinism_config() {
  return parse_config(R"({
    "corpus": {"n_utterances": 20, "n_speakers": 1},
    "ar": {"width": 32, "layers": 1, "heads": 2},
    "schedule": {"eval_every": 0, "checkpoint_every": 0}
  })");
}

Outcome rate_arithmetic(const fs::path&) {
  const Config cfg = default_config();
  const auto corpus = generate_corpus(cfg.corpus);
  const auto bridge = new_bridge(cfg);
  const double rate = cfg.corpus.frame_rate_hz;
  bool exact = true;
  double worst = 0.0;
  for (std::size_t i = 0; i < 20; ++i) {
    const auto& f = corpus[i].features.frames;
    const double tokens = static_cast<double>(bridge.encode(f).tokens().size());
    const double token_rate = tokens / (static_cast<double>(f.rows()) / rate);
    exact = exact && token_rate == 10.0;
    worst = std::max(worst, std::abs(token_rate - 10.0));
  }
  auto ar = new_ar(cfg);
  const BridgeDecoder decoder(bridge);
  auto session = make_session(encode_text("abc", "abc", cfg.corpus.vocabulary), Array<float>(Shape{0, cfg.corpus.dim}),
                              cfg.ar.frames_per_step, 20);
  const auto out = generate(session, ar, decoder, {.allow_eos = false, .record_transcript = false});
  const double steps_per_second = static_cast<double>(session.forward_passes) / (static_cast<double>(out.rows()) / rate);
  MetricsReport m;
  m.frame_rate_hz = rate;
  m.frames_per_token = cfg.ar.frames_per_step;
  const bool ok = exact && steps_per_second == 10.0 && m.token_rate_hz() == 10.0;
  return {ok,
          "encoder token rate " + fmt(10.0 + worst) + " Hz (worst of 20), AR steps per generated second " +
              fmt(steps_per_second) + "; required exactly 10",
          {{"encoder_token_rate_hz", 10.0 + worst}, {"ar_steps_per_second", steps_per_second}}};
}

Outcome iteration_reduction(const fs::path&) {
  const Config cfg = default_config();
  RtfOptions opt;
  opt.runs = 1;
  opt.bridged_steps = 40;
  const auto r = bench_rtf(cfg, new_ar(cfg), new_bridge(cfg), make_baseline(cfg), opt);
  const bool ok = r.baseline_passes == 5 * r.bridged_passes;
  return {ok,
          std::to_string(r.bridged_passes) + " bridged vs " + std::to_string(r.baseline_passes) +
              " baseline forward passes for " + std::to_string(r.frames) + " frames; required exactly 1/5",
          {{"bridged_passes", r.bridged_passes}, {"baseline_passes", r.baseline_passes}, {"frames", r.frames}}};
}

Outcome rtf_proxy(const fs::path&) {
  const Config cfg = default_config();
  RtfOptions opt;
  opt.runs = 10;
  const auto r = bench_rtf(cfg, new_ar(cfg), new_bridge(cfg), make_baseline(cfg), opt);
  return {r.ratio < 0.6,
          "median s/s bridged " + fmt(r.bridged_seconds_per_second) + " vs baseline " +
              fmt(r.baseline_seconds_per_second) + " over 10 runs, ratio " + fmt(r.ratio) + "; required < 0.6",
          {{"ratio", r.ratio},
           {"bridged_seconds_per_second", r.bridged_seconds_per_second},
           {"baseline_seconds_per_second", r.baseline_seconds_per_second}}};
}

std::vector<std::pair<std::size_t, RvqOracleResult>> rvq_runs() {
  std::vector<std::pair<std::size_t, RvqOracleResult>> out;
  for (std::size_t k : {2u, 4u, 8u, 16u}) out.emplace_back(k, rvq_oracle(100 + k, k, 1000, 3, 3, 32));
  return out;
}

Outcome rvq_equivalence(const fs::path&) {
  bool ok = true;
  std::string detail;
  nlohmann::json values;
  for (const auto& [k, r] : rvq_runs()) {
    ok = ok && r.matching == r.frames;
    detail += "K=" + std::to_string(k) + " " + std::to_string(r.matching) + "/" + std::to_string(r.frames) + " ";
    values["K" + std::to_string(k)] = r.matching;
  }
  return {ok, detail + "frames match exhaustive search; required 100%", values};
}

Outcome monotone_refinement(const fs::path&) {
  bool ok = true;
  std::string detail;
  nlohmann::json values;
  for (const auto& [k, r] : rvq_runs()) {
    ok = ok && r.monotone == r.frames;
    detail += "K=" + std::to_string(k) + " " + std::to_string(r.monotone) + "/" + std::to_string(r.frames) + " ";
    values["K" + std::to_string(k)] = r.monotone;
  }
  return {ok, detail + "frames with non-increasing error per level; required all", values};
}

Outcome gradient_suite(const fs::path&) {
  std::size_t checks = 0, failed = 0;
  double worst = 0.0;
  std::set<std::string> names;
  for (std::uint64_t seed = 1; seed <= 20; ++seed)
    for (const auto& r : oracle_suite(seed)) {
      if (r.name.rfind("rvq_", 0) == 0) continue;
      ++checks;
      names.insert(r.name);
      failed += r.passed ? 0 : 1;
      worst = std::max(worst, r.max_rel_error);
    }
  return {failed == 0,
          std::to_string(names.size()) + " checks x 20 seeds, " + std::to_string(failed) + " failed, max rel error " +
              fmt(worst) + "; required < 1e-4",
          {{"checks", checks}, {"failed", failed}, {"max_rel_error", worst}}};
}

// Feature MSE of free-running synthesis against the ground truth of each
// training utterance. Missing frames count against zeros; frames past the
// target length are ignored.
double synthesis_mse(const Config& cfg, const std::vector<Utterance>& corpus, const ArModel& model,
                     const BridgeModel<float>& bridge, std::size_t& length_mismatches) {
  const BridgeDecoder decoder(bridge);
  double err = 0.0, count = 0.0;
  length_mismatches = 0;
  for (const auto* u : select_split(corpus, Split::train)) {
    const auto& truth = u->features.frames;
    const auto session = synthesize(cfg, model, bridge, decoder, pick_reference(corpus, *u), u->text);
    const auto gen = session.generated();
    length_mismatches += gen.rows() != 5 * ((truth.rows() + 4) / 5);
    for (std::size_t t = 0; t < truth.rows(); ++t)
      for (std::size_t j = 0; j < truth.cols(); ++j) {
        const double g = t < gen.rows() ? gen.at(t, j) : 0.0;
        err += (g - truth.at(t, j)) * (g - truth.at(t, j));
      }
    count += static_cast<double>(truth.size());
  }
  return err / count;
}

Outcome memorization(const fs::path& out) {
  const Config cfg = memorization_config();
  const auto corpus = generate_corpus(cfg.corpus);
  const fs::path dir = out / "memorization";
  fs::create_directories(dir);
  MetricsReport bm, am;
  const auto bridge = train_bridge(cfg, corpus, dir / "bridge.brgc", {cfg.schedule.bridge_steps, false, std::nullopt}, bm);
  const auto model = train_ar(cfg, corpus, bridge, dir / "ar.brga", {cfg.schedule.ar_steps, false, std::nullopt}, am);
  const double accuracy = am.teacher_forced_accuracy.value_or(0.0);
  const double roundtrip = roundtrip_mse(bridge, split_frames(corpus, Split::train));
  std::size_t mismatches = 0;
  const double synth = synthesis_mse(cfg, corpus, model, bridge, mismatches);
  const bool ok = accuracy >= 0.95 && synth <= 2.0 * roundtrip;
  return {ok,
          "(a) teacher-forced accuracy " + fmt(accuracy) + " (required >= 0.95); (b) synthesis MSE " + fmt(synth) +
              " vs roundtrip " + fmt(roundtrip) + ", ratio " + fmt(synth / roundtrip) + " (required <= 2); " +
              std::to_string(cfg.schedule.bridge_steps) + " bridge + " + std::to_string(cfg.schedule.ar_steps) +
              " AR steps, " + std::to_string(mismatches) + " length mismatches",
          {{"teacher_forced_accuracy", accuracy},
           {"synthesis_mse", synth},
           {"roundtrip_mse", roundtrip},
           {"ratio", synth / roundtrip},
           {"length_mismatches", mismatches}}};
}

Outcome ablation(const fs::path& out) {
  const Config cfg = ablation_config();
  const auto r = ablate(cfg, {1, 2, 3}, cfg.schedule.bridge_steps, cfg.schedule.ar_steps, out / "ablation");
  std::string detail;
  for (const auto& v : r.results)
    detail += std::string(to_string(v.variant)) + "@" + std::to_string(v.seed) + "=" + fmt(v.dev_feature_mse) + " ";
  return {r.majority_ordered(),
          "dev feature MSE " + detail + "; ordered on " + std::to_string(r.seeds_in_order) + "/" +
              std::to_string(r.seeds) + " seeds, required majority",
          to_json(r)};
}

std::string synthesis_bytes(const Config& cfg, const fs::path& dir) {
  const auto corpus = load_run_corpus(cfg, dir / "corpus");
  const auto bridge = load_bridge(cfg, dir / "bridge.brgc");
  const auto model = load_ar(cfg, dir / "ar.brga");
  const BridgeDecoder decoder(bridge);
  const auto& ref = *select_split(corpus, Split::train).at(0);
  const auto session = synthesize(cfg, model, bridge, decoder, ref, "abcde", 12);
  std::string tokens;
  for (const auto& r : session.transcript) tokens += to_json(r).at("token").dump();
  return encode_features({session.generated(), cfg.corpus.frame_rate_hz, "synth"}) + tokens;
}

Outcome determinism(const fs::path& out) {
  const Config cfg = determinism_config();
  std::vector<std::uint64_t> corpus_hashes;
  std::vector<std::string> bridge_bytes, ar_bytes, synth;
  for (const char* name : {"a", "b"}) {
    const fs::path dir = out / "determinism" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    corpus_hashes.push_back(gen_corpus(cfg, dir / "corpus"));
    const auto corpus = load_run_corpus(cfg, dir / "corpus");
    MetricsReport bm, am;
    const auto bridge = train_bridge(cfg, corpus, dir / "bridge.brgc", {100, false, std::nullopt}, bm);
    train_ar(cfg, corpus, bridge, dir / "ar.brga", {100, false, std::nullopt}, am);
    bridge_bytes.push_back(read_file(dir / "bridge.brgc"));
    ar_bytes.push_back(read_file(dir / "ar.brga"));
    synth.push_back(synthesis_bytes(cfg, dir));
  }
  const bool c = corpus_hashes[0] == corpus_hashes[1], b = bridge_bytes[0] == bridge_bytes[1],
             a = ar_bytes[0] == ar_bytes[1], s = synth[0] == synth[1];
  auto word = [](bool v) { return v ? "identical" : "DIFFERENT"; };
  return {c && b && a && s,
          std::string("corpus ") + word(c) + ", bridge checkpoint " + word(b) + ", AR checkpoint " + word(a) +
              ", synthesis " + word(s) + " across two seeded runs (100 steps each)",
          {{"corpus", c}, {"bridge", b}, {"ar", a}, {"synthesis", s}}};
}

Outcome uniform_losses(const fs::path&) {
  const Config cfg = default_config();
  SyntheticCorpusSpec spec = cfg.corpus;
  spec.n_utterances = 20;
  const auto corpus = generate_corpus(spec);
  const auto bridge = new_bridge(cfg);
  const double k = static_cast<double>(cfg.bridge.codebook_size);
  const double code_expected = static_cast<double>((cfg.bridge.levels - 1) * cfg.bridge.groups) * std::log(k);
  double code_worst = 0.0;
  for (const auto* f0 : split_frames(corpus, Split::train)) {
    Tape<float> tape;
    auto p = bridge.params().bind(tape, false);
    QuantizationPlan<float> plan;
    const double v = bridge_loss(bridge, p, tape, *f0, plan).code.value().item();
    code_worst = std::max(code_worst, std::abs(v - code_expected) / code_expected);
  }
  const auto ar = new_ar(cfg);
  double head_worst = 0.0;
  for (const auto& ex : ar_examples(cfg, corpus, bridge, Split::train)) {
    Tape<float> tape;
    auto p = ar.params().bind(tape, false);
    auto bp = bridge.params().bind(tape, false);
    const auto l = ar_loss(ar, p, bridge, bp, ex);
    for (std::size_t g = 0; g < l.per_head.size(); ++g) {
      const double expected = std::log(g == 0 ? k + 1.0 : k);
      head_worst = std::max(head_worst, std::abs(l.per_head[g] - expected) / expected);
    }
  }
  return {code_worst < 0.01 && head_worst < 0.01,
          "L_code rel error " + fmt(code_worst) + " vs " + fmt(code_expected) + ", per-head L_token rel error " +
              fmt(head_worst) + " vs ln 65 / ln 64; required < 1%",
          {{"l_code_expected", code_expected}, {"l_code_rel_error", code_worst}, {"l_token_rel_error", head_worst}}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks for the bridged TTS pipeline"};
  std::string out = "acceptance_run";
  std::vector<int> only;
  app.add_option("--out", out, "Working directory for training runs")->capture_default_str();
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "rate arithmetic", rate_arithmetic},
      {2, "iteration reduction", iteration_reduction},
      {3, "RTF proxy", rtf_proxy},
      {4, "RVQ oracle equivalence", rvq_equivalence},
      {5, "monotone refinement", monotone_refinement},
      {6, "gradient suite", gradient_suite},
      {7, "memorization end-to-end", memorization},
      {8, "ablation direction", ablation},
      {9, "determinism", determinism},
      {10, "uniform-loss sanity", uniform_losses},
  };
  const fs::path root(out);
  fs::create_directories(root);
  nlohmann::json record = nlohmann::json::array();
  bool all = true;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(root);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what(), {}};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    all = all && o.passed;
    std::cout << (o.passed ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.title << "): " << o.detail << " ["
              << fmt(secs) << " s]" << std::endl;
    record.push_back({{"criterion", c.id}, {"title", c.title}, {"passed", o.passed}, {"detail", o.detail},
                      {"seconds", secs}, {"values", o.values}});
  }
  write_file_atomic(root / "acceptance.json", record.dump(2) + "\n");
  return all ? 0 : 1;
}
