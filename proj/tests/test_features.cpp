#include <filesystem>

#include <gtest/gtest.h>

#include "bridgetts/corpus.hpp"

using namespace bridgetts;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("bridgetts_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

DenseFeatures sample_features(std::size_t t, std::size_t d) {
  DenseFeatures f;
  f.frames = Array<float>(Shape{t, d});
  for (std::size_t i = 0; i < f.frames.size(); ++i) f.frames[i] = 0.25f * static_cast<float>(i) - 1.0f;
  f.frame_rate_hz = 50;
  f.utterance_id = "x";
  return f;
}

}  // namespace

TEST(Corpus, LengthIsFramesPerCharTimesText) {
  SyntheticCorpusSpec spec;
  spec.frames_per_char = 10;
  const SyntheticVoice voice(spec);
  const auto f = voice.render("aa", 0, 1);
  EXPECT_EQ(f.rows(), 20u);
  EXPECT_EQ(f.cols(), spec.dim);
}

TEST(Corpus, EveryUtteranceLengthMatchesText) {
  SyntheticCorpusSpec spec;
  spec.n_utterances = 50;
  for (const auto& u : generate_corpus(spec)) EXPECT_EQ(u.features.length(), spec.frames_per_char * u.text.size());
}

TEST(Corpus, SameSpecGivesIdenticalBytes) {
  SyntheticCorpusSpec spec;
  spec.n_utterances = 20;
  const auto a = generate_corpus(spec), b = generate_corpus(spec);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].text, b[i].text);
    EXPECT_EQ(encode_features(a[i].features), encode_features(b[i].features));
  }
}

TEST(Corpus, DifferentSeedChangesCorpus) {
  SyntheticCorpusSpec spec;
  spec.n_utterances = 5;
  const auto a = generate_corpus(spec);
  spec.seed += 1;
  const auto b = generate_corpus(spec);
  EXPECT_NE(encode_features(a[0].features), encode_features(b[0].features));
}

TEST(Corpus, PerDimensionMeanNearZero) {
  SyntheticCorpusSpec spec;
  spec.n_utterances = 100;
  const auto corpus = generate_corpus(spec);
  std::vector<double> sum(spec.dim, 0.0);
  std::size_t frames = 0;
  for (const auto& u : corpus) {
    for (std::size_t t = 0; t < u.features.length(); ++t)
      for (std::size_t j = 0; j < spec.dim; ++j) sum[j] += u.features.frames.at(t, j);
    frames += u.features.length();
  }
  for (std::size_t j = 0; j < spec.dim; ++j) EXPECT_NEAR(sum[j] / static_cast<double>(frames), 0.0, 0.1) << "dim " << j;
}

TEST(Corpus, SplitsFollowFractions) {
  SyntheticCorpusSpec spec;
  spec.n_utterances = 200;
  const auto corpus = generate_corpus(spec);
  EXPECT_EQ(select_split(corpus, Split::dev).size(), 20u);
  EXPECT_EQ(select_split(corpus, Split::test).size(), 20u);
  EXPECT_EQ(select_split(corpus, Split::train).size(), 160u);
}

TEST(Corpus, ReferenceSharesSpeakerAndIsAnotherTrainingUtterance) {
  SyntheticCorpusSpec spec;
  spec.n_utterances = 60;
  const auto corpus = generate_corpus(spec);
  for (const auto& u : corpus) {
    const auto& ref = pick_reference(corpus, u);
    EXPECT_NE(&ref, &u);
    EXPECT_EQ(ref.speaker, u.speaker);
    EXPECT_EQ(ref.split, Split::train);
  }
}

TEST(Brgf, RoundtripIsBitIdentical) {
  SyntheticCorpusSpec spec;
  spec.n_utterances = 3;
  const auto dir = scratch_dir("brgf_roundtrip");
  for (const auto& u : generate_corpus(spec)) {
    write_features(dir / "f.brgf", u.features);
    const auto back = read_features(dir / "f.brgf");
    EXPECT_EQ(back.frames, u.features.frames);
    EXPECT_EQ(back.frame_rate_hz, u.features.frame_rate_hz);
    EXPECT_EQ(encode_features(back), encode_features(u.features));
  }
}

TEST(Brgf, FileSizeFromHeaderAndPayload) {
  const auto bytes = encode_features(sample_features(3, 2));
  EXPECT_EQ(bytes.size(), 24u + 24u);
  EXPECT_EQ(bytes.substr(0, 4), "BRGF");
}

TEST(Brgf, CorruptedMagicIsRejected) {
  auto bytes = encode_features(sample_features(3, 2));
  bytes[1] = 'X';
  try {
    decode_features(bytes);
    FAIL() << "expected bad magic";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::bad_magic);
  }
}

TEST(Brgf, TruncatedPayloadIsRejected) {
  auto bytes = encode_features(sample_features(3, 2));
  bytes.resize(bytes.size() - 4);
  try {
    decode_features(bytes);
    FAIL() << "expected truncation error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::truncated);
  }
}

TEST(Brgf, WrongVersionIsRejected) {
  auto bytes = encode_features(sample_features(2, 2));
  bytes[4] = 2;
  try {
    decode_features(bytes);
    FAIL() << "expected version error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::version_mismatch);
  }
}

TEST(Brgf, ExpectedDimensionIsEnforced) {
  const auto bytes = encode_features(sample_features(2, 4));
  EXPECT_THROW(decode_features(bytes, "x", 8u), Error);
}

TEST(Brgf, NonFiniteValuesAreNotWritten) {
  auto f = sample_features(2, 2);
  f.frames[1] = std::numeric_limits<float>::quiet_NaN();
  const auto dir = scratch_dir("brgf_nan");
  EXPECT_THROW(write_features(dir / "nan.brgf", f), Error);
  EXPECT_FALSE(fs::exists(dir / "nan.brgf"));
}

TEST(Manifest, WriteThenLoadRestoresCorpus) {
  SyntheticCorpusSpec spec;
  spec.n_utterances = 12;
  const auto corpus = generate_corpus(spec);
  const auto dir = scratch_dir("manifest");
  write_corpus(dir, corpus);
  const auto back = load_corpus(dir);
  ASSERT_EQ(back.size(), corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    EXPECT_EQ(back[i].id(), corpus[i].id());
    EXPECT_EQ(back[i].text, corpus[i].text);
    EXPECT_EQ(back[i].split, corpus[i].split);
    EXPECT_EQ(back[i].speaker, corpus[i].speaker);
    EXPECT_EQ(back[i].features.frames, corpus[i].features.frames);
  }
  const auto manifest = nlohmann::json::parse(read_file(dir / manifest_name));
  for (const auto& rec : manifest)
    for (const char* key : {"utterance_id", "text", "feature_path", "split"}) EXPECT_TRUE(rec.contains(key)) << key;
}

TEST(Manifest, MissingManifestIsNotFound) {
  const auto dir = scratch_dir("no_manifest");
  try {
    load_corpus(dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::not_found);
  }
}
