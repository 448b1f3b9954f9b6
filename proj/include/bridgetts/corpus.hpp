#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "bridgetts/features.hpp"
#include "json.hpp"

namespace bridgetts {

enum class Split { train, dev, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "dev") return Split::dev;
  if (s == "test") return Split::test;
  fail(ErrorCode::invalid_argument, "unknown split '" + std::string(s) + "'");
}

struct Utterance {
  std::string text;
  DenseFeatures features;
  Split split = Split::train;
  std::uint32_t speaker = 0;

  const std::string& id() const { return features.utterance_id; }
};

struct SyntheticCorpusSpec {
  std::size_t n_utterances = 200;
  std::size_t dim = 32;
  std::uint32_t frame_rate_hz = 50;
  std::size_t frames_per_char = 10;
  std::size_t min_text_len = 3;
  std::size_t max_text_len = 8;
  std::string vocabulary = "abcdefghij";
  std::size_t n_speakers = 4;
  double noise_std = 0.05;
  double dev_fraction = 0.1;
  double test_fraction = 0.1;
  std::uint64_t seed = 1234;
  std::string generator = "smooth-basis";

  void validate() const {
    require(n_utterances > 0, ErrorCode::invalid_argument, "corpus needs at least one utterance");
    require(!vocabulary.empty(), ErrorCode::invalid_argument, "empty vocabulary");
    for (char c : vocabulary)
      require(c >= 0x20 && c < 0x7f, ErrorCode::invalid_argument, "vocabulary must be printable ASCII");
    require(dim > 0 && frames_per_char > 0 && frame_rate_hz > 0, ErrorCode::invalid_argument,
            "dim, frames_per_char and frame_rate_hz must be positive");
    require(min_text_len >= 1 && min_text_len <= max_text_len, ErrorCode::invalid_argument,
            "need 1 <= min_text_len <= max_text_len");
    require(n_speakers >= 1, ErrorCode::invalid_argument, "need at least one speaker");
    require(generator == "smooth-basis", ErrorCode::invalid_argument, "unknown generator '" + generator + "'");
    require(dev_fraction >= 0 && test_fraction >= 0 && dev_fraction + test_fraction < 1.0, ErrorCode::invalid_argument,
            "dev/test fractions must leave a train split");
  }
};

// Deterministic text-to-feature source. Every character owns a per-dimension
// mean plus a cosine trajectory spanning its frames; every speaker owns a
// gain and an offset. The per-character means and speaker offsets are
// centred so the corpus mean is close to zero in every dimension.
class SyntheticVoice {
 public:
  explicit SyntheticVoice(const SyntheticCorpusSpec& spec) : spec_(spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    const std::size_t d = spec.dim, v = spec.vocabulary.size();
    chars_.resize(v);
    for (auto& c : chars_) {
      c.mean.resize(d);
      c.amplitude.resize(d);
      c.phase.resize(d);
      c.harmonic.resize(d);
      for (std::size_t j = 0; j < d; ++j) {
        c.mean[j] = 0.7 * normal(rng);
        c.amplitude[j] = 0.5 * normal(rng);
        c.phase[j] = 2.0 * std::numbers::pi * uniform(rng);
        c.harmonic[j] = uniform(rng) < 0.5 ? 1 : 2;
      }
    }
    for (std::size_t j = 0; j < d; ++j) {
      double mu = 0;
      for (auto& c : chars_) mu += c.mean[j];
      mu /= static_cast<double>(v);
      for (auto& c : chars_) c.mean[j] -= mu;
    }
    speakers_.resize(spec.n_speakers);
    for (auto& s : speakers_) {
      s.gain.resize(d);
      s.offset.resize(d);
      for (std::size_t j = 0; j < d; ++j) {
        s.gain[j] = 1.0 + 0.4 * (uniform(rng) - 0.5);
        s.offset[j] = 0.3 * normal(rng);
      }
    }
    for (std::size_t j = 0; j < d; ++j) {
      double mu = 0;
      for (auto& s : speakers_) mu += s.offset[j];
      mu /= static_cast<double>(speakers_.size());
      for (auto& s : speakers_) s.offset[j] -= mu;
    }
  }

  const SyntheticCorpusSpec& spec() const noexcept { return spec_; }

  std::size_t char_index(char ch) const {
    auto pos = spec_.vocabulary.find(ch);
    require(pos != std::string::npos, ErrorCode::invalid_argument,
            std::string("character '") + ch + "' is outside the vocabulary");
    return pos;
  }

  // Frames for `text` spoken by `speaker`; `noise_seed` drives the additive noise.
  Array<float> render(const std::string& text, std::uint32_t speaker, std::uint64_t noise_seed) const {
    require(!text.empty(), ErrorCode::invalid_argument, "empty text");
    require(speaker < speakers_.size(), ErrorCode::out_of_range, "speaker " + std::to_string(speaker));
    const std::size_t d = spec_.dim, fpc = spec_.frames_per_char;
    Array<float> out(Shape{text.size() * fpc, d});
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> noise(0.0, spec_.noise_std);
    const auto& spk = speakers_[speaker];
    for (std::size_t i = 0; i < text.size(); ++i) {
      const auto& c = chars_[char_index(text[i])];
      for (std::size_t f = 0; f < fpc; ++f) {
        const double tau = static_cast<double>(f) / static_cast<double>(fpc);
        for (std::size_t j = 0; j < d; ++j) {
          const double traj = c.mean[j] + c.amplitude[j] * std::cos(2.0 * std::numbers::pi * c.harmonic[j] * tau + c.phase[j]);
          out.at(i * fpc + f, j) = static_cast<float>(spk.gain[j] * traj + spk.offset[j] + noise(rng));
        }
      }
    }
    return out;
  }

 private:
  struct CharBasis {
    std::vector<double> mean, amplitude, phase;
    std::vector<int> harmonic;
  };
  struct Speaker {
    std::vector<double> gain, offset;
  };
  SyntheticCorpusSpec spec_;
  std::vector<CharBasis> chars_;
  std::vector<Speaker> speakers_;
};

inline std::string utterance_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "utt%05zu", index);
  return buf;
}

inline std::vector<Utterance> generate_corpus(const SyntheticCorpusSpec& spec) {
  SyntheticVoice voice(spec);
  std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> len_dist(spec.min_text_len, spec.max_text_len);
  std::uniform_int_distribution<std::size_t> char_dist(0, spec.vocabulary.size() - 1);
  std::uniform_int_distribution<std::uint32_t> spk_dist(0, static_cast<std::uint32_t>(spec.n_speakers - 1));

  std::vector<Utterance> corpus(spec.n_utterances);
  for (std::size_t i = 0; i < spec.n_utterances; ++i) {
    auto& u = corpus[i];
    const std::size_t len = len_dist(rng);
    for (std::size_t k = 0; k < len; ++k) u.text.push_back(spec.vocabulary[char_dist(rng)]);
    u.speaker = spk_dist(rng);
    u.features.frames = voice.render(u.text, u.speaker, spec.seed * 1000003ULL + i);
    u.features.frame_rate_hz = spec.frame_rate_hz;
    u.features.utterance_id = utterance_name(i);
  }

  std::vector<std::size_t> order(spec.n_utterances);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::floor(spec.test_fraction * static_cast<double>(spec.n_utterances)));
  const auto n_dev = static_cast<std::size_t>(std::floor(spec.dev_fraction * static_cast<double>(spec.n_utterances)));
  for (std::size_t k = 0; k < order.size(); ++k)
    corpus[order[k]].split = k < n_test ? Split::test : (k < n_test + n_dev ? Split::dev : Split::train);
  return corpus;
}

inline std::vector<const Utterance*> select_split(const std::vector<Utterance>& corpus, Split split) {
  std::vector<const Utterance*> out;
  for (const auto& u : corpus)
    if (u.split == split) out.push_back(&u);
  return out;
}

// Reference prompt for zero-shot conditioning: the next training utterance
// (cyclically by corpus order) from the same speaker, never the target itself.
inline const Utterance& pick_reference(const std::vector<Utterance>& corpus, const Utterance& target) {
  const std::size_t n = corpus.size();
  std::size_t start = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (&corpus[i] == &target) start = i;
  for (std::size_t step = 1; step < n; ++step) {
    const auto& cand = corpus[(start + step) % n];
    if (cand.split == Split::train && cand.speaker == target.speaker && &cand != &target) return cand;
  }
  fail(ErrorCode::not_found, "no training utterance shares speaker " + std::to_string(target.speaker) + " with " +
                                 target.id());
}

// ------------------------------------------------------------------ on disk

inline constexpr const char* manifest_name = "manifest.json";

inline nlohmann::json manifest_json(const std::vector<Utterance>& corpus) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& u : corpus)
    arr.push_back({{"utterance_id", u.id()},
                   {"text", u.text},
                   {"feature_path", "features/" + u.id() + ".brgf"},
                   {"split", std::string(to_string(u.split))},
                   {"speaker", u.speaker}});
  return arr;
}

inline void write_corpus(const std::filesystem::path& dir, const std::vector<Utterance>& corpus) {
  std::filesystem::create_directories(dir / "features");
  for (const auto& u : corpus) write_features(dir / "features" / (u.id() + ".brgf"), u.features);
  write_file_atomic(dir / manifest_name, manifest_json(corpus).dump(2) + "\n");
}

inline std::vector<Utterance> load_corpus(const std::filesystem::path& dir) {
  const auto manifest_path = dir / manifest_name;
  require(std::filesystem::exists(manifest_path), ErrorCode::not_found, "missing corpus manifest " + manifest_path.string());
  nlohmann::json arr;
  try {
    arr = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_argument, "manifest " + manifest_path.string() + ": " + e.what());
  }
  require(arr.is_array() && !arr.empty(), ErrorCode::invalid_argument, "manifest must be a non-empty JSON array");
  std::vector<Utterance> corpus;
  std::optional<std::uint32_t> dim;
  for (const auto& rec : arr) {
    Utterance u;
    try {
      u.text = rec.at("text").get<std::string>();
      u.split = parse_split(rec.at("split").get<std::string>());
      u.speaker = rec.value("speaker", 0u);
      u.features = read_features(dir / rec.at("feature_path").get<std::string>(), dim);
      u.features.utterance_id = rec.at("utterance_id").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::invalid_argument, std::string("manifest record: ") + e.what());
    }
    require(!u.text.empty(), ErrorCode::invalid_argument, "utterance " + u.id() + " has empty text");
    dim = static_cast<std::uint32_t>(u.features.dim());
    corpus.push_back(std::move(u));
  }
  return corpus;
}

}  // namespace bridgetts
