#include <random>

#include <gtest/gtest.h>

#include "bridgetts/bridge_trainer.hpp"
#include "bridgetts/oracles.hpp"

using namespace bridgetts;

namespace {

Array<float> random_frames(std::size_t t, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  Array<float> a(Shape{t, d});
  for (auto& v : a.values()) v = dist(rng);
  return a;
}


Array<float> run_extract(const BridgeModel<float>& m, const Array<float>& f0) {
  Tape<float> tape;
  auto p = m.params().bind(tape, false);
  return extract_context(m.config(), m.sparse_layout(), p, tape.constant(f0)).value();
}

Array<float> run_downsample(const BridgeModel<float>& m, const Array<float>& f1) {
  Tape<float> tape;
  auto p = m.params().bind(tape, false);
  return downsample(m.sparse_layout(), p, tape.constant(f1)).value();
}

Codebooks<float> random_books(std::size_t k, std::size_t dg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  Codebooks<float> books(3, 3, k, dg);
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t l = 0; l < 3; ++l)
      for (std::size_t c = 1; c < k; ++c)
        for (std::size_t j = 0; j < dg; ++j) books.at(g, l).vectors.at(c, j) = dist(rng) / static_cast<float>(l + 1);
  return books;
}

}  // namespace

TEST(ExtractContext, ShapeIsTByThreeD) {
  const BridgeModel<float> m(BridgeConfig{}, 1);
  EXPECT_EQ(run_extract(m, random_frames(50, 32, 2)).shape(), (Shape{50, 96}));
}

TEST(ExtractContext, ZeroInputZeroBiasGivesZero) {
  const BridgeModel<float> m(BridgeConfig{}, 3);
  const auto y = run_extract(m, Array<float>(Shape{12, 32}));
  for (float v : y.values()) EXPECT_EQ(v, 0.0f);
}

TEST(ExtractContext, IdentityKernelReproducesInputSlice) {
  BridgeConfig cfg;
  cfg.activation = Activation::identity;
  BridgeModel<float> m(cfg, 4);
  auto& w = m.params()[m.sparse_layout().extractor_w[0]];
  for (auto& v : w.values()) v = 0.0f;
  for (std::size_t c = 0; c < 32; ++c) w[c * 32 + c] = 1.0f;
  const auto x = random_frames(9, 32, 5);
  const auto y = run_extract(m, x);
  for (std::size_t t = 0; t < 9; ++t)
    for (std::size_t c = 0; c < 32; ++c) EXPECT_EQ(y.at(t, c), x.at(t, c));
}

TEST(Downsample, FiftyFramesToTen) {
  const BridgeModel<float> m(BridgeConfig{}, 6);
  EXPECT_EQ(run_downsample(m, random_frames(50, 96, 7)).rows(), 10u);
}

TEST(Downsample, SevenFramesPadToTwo) {
  const BridgeModel<float> m(BridgeConfig{}, 8);
  EXPECT_EQ(run_downsample(m, random_frames(7, 96, 9)).rows(), 2u);
}

TEST(Downsample, AveragingKernelKeepsConstant) {
  BridgeModel<float> m(BridgeConfig{}, 10);
  auto& w = m.params()[m.sparse_layout().down_w];
  for (auto& v : w.values()) v = 0.0f;
  for (std::size_t tap = 0; tap < 5; ++tap)
    for (std::size_t c = 0; c < 96; ++c) w[(tap * 96 + c) * 96 + c] = 0.2f;
  Array<float> f1(Shape{13, 96}, 1.75f);
  const auto y = run_downsample(m, f1);
  for (float v : y.values()) EXPECT_NEAR(v, 1.75f, 1e-6f);
}

TEST(RvqEncode, ExactCodewordTakesOneLevel) {
  auto books = random_books(8, 4, 11);
  std::vector<float> frame(12, 0.0f);
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t j = 0; j < 4; ++j) frame[g * 4 + j] = books.at(g, 0).vectors.at(2, j);
  const auto enc = rvq_encode<float>(frame, books);
  for (std::size_t g = 0; g < 3; ++g) {
    EXPECT_EQ(enc.codes.at(g, 0), 2);
    EXPECT_EQ(enc.codes.at(g, 1), 0);
    EXPECT_EQ(enc.codes.at(g, 2), 0);
    EXPECT_EQ(enc.residual_sq[g * 4 + 3], 0.0f);
  }
}

TEST(RvqEncode, ZeroFrameGivesZeroCodes) {
  const auto books = random_books(8, 4, 12);
  const std::vector<float> frame(12, 0.0f);
  const auto enc = rvq_encode<float>(frame, books);
  for (auto c : enc.codes.codes) EXPECT_EQ(c, 0);
  for (float v : enc.quantized) EXPECT_EQ(v, 0.0f);
}

TEST(RvqEncode, MatchesExhaustiveSearchAtK8) {
  const auto r = rvq_oracle(13, 8, 500, 3, 3, 8);
  EXPECT_EQ(r.matching, r.frames);
  EXPECT_EQ(r.monotone, r.frames);
}

TEST(RvqEncode, DuplicateCodewordsResolveToLowerIndex) {
  auto books = random_books(8, 4, 14);
  for (std::size_t j = 0; j < 4; ++j) books.at(0, 0).vectors.at(6, j) = books.at(0, 0).vectors.at(3, j);
  std::vector<float> frame(12, 0.0f);
  for (std::size_t j = 0; j < 4; ++j) frame[j] = books.at(0, 0).vectors.at(3, j) + 1e-3f;
  EXPECT_EQ(rvq_encode<float>(frame, books).codes.at(0, 0), 3);
}

TEST(RvqEncode, DecodeOfCodesEqualsQuantized) {
  const auto books = random_books(16, 8, 15);
  std::mt19937_64 rng(16);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  std::vector<float> frame(24);
  for (int n = 0; n < 100; ++n) {
    for (auto& v : frame) v = dist(rng);
    const auto enc = rvq_encode<float>(frame, books);
    EXPECT_EQ(rvq_decode(enc.codes, books), enc.quantized);
  }
}

TEST(SelectCodes, KeepsFirstLevel) {
  CodeMatrix cm(3, 3);
  cm.codes = {5, 1, 2, 0, 3, 3, 7, 7, 0};
  EXPECT_EQ(select_codes(cm).first_level, (std::vector<std::int32_t>{5, 0, 7}));
  EXPECT_EQ(select_codes(CodeMatrix(3, 3)).first_level, (std::vector<std::int32_t>{0, 0, 0}));
}

TEST(SelectCodes, AgreesWithOracleFirstRow) {
  const auto books = random_books(8, 4, 17);
  std::mt19937_64 rng(18);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  std::vector<float> frame(12);
  for (int n = 0; n < 100; ++n) {
    for (auto& v : frame) v = dist(rng);
    EXPECT_EQ(select_codes(rvq_encode<float>(frame, books).codes), select_codes(exhaustive_rvq_codes(frame, books)));
  }
}

TEST(Encode, FiveSecondsGiveFiftyTokens) {
  const BridgeModel<float> m(BridgeConfig{}, 19);
  EXPECT_EQ(m.encode(random_frames(250, 32, 20)).tokens().size(), 50u);
  EXPECT_EQ(m.encode(random_frames(5, 32, 21)).tokens().size(), 1u);
}

TEST(Encode, TokenCountIsCeilOfFifth) {
  const BridgeModel<float> m(BridgeConfig{}, 22);
  for (std::size_t t = 1; t <= 100; ++t) EXPECT_EQ(m.encode(random_frames(t, 32, t)).tokens().size(), (t + 4) / 5) << t;
}

TEST(Encode, DeterministicAcrossRuns) {
  SyntheticCorpusSpec spec;
  spec.n_utterances = 10;
  const auto corpus = generate_corpus(spec);
  std::vector<const Array<float>*> train;
  for (const auto& u : corpus) train.push_back(&u.features.frames);
  auto run = [&] {
    BridgeModel<float> m(BridgeConfig{}, 23);
    BridgeTrainer trainer(m, train, AdamWConfig{}, 4, 24);
    for (int s = 0; s < 5; ++s) trainer.step();
    return m.encode(corpus[0].features.frames).tokens();
  };
  EXPECT_EQ(run(), run());
}

TEST(CodebookUpdate, NoAssignmentsLeaveCodebooksUnchanged) {
  auto books = random_books(8, 4, 25);
  const auto before = books;
  codebook_update(books, RvqBatchStats<float>(books));
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(books.at(g, l).vectors, before.at(g, l).vectors);
}

TEST(CodebookUpdate, RepeatedResidualConvergesToIt) {
  Codebooks<float> books(1, 1, 4, 3);
  books.at(0, 0).vectors.at(2, 0) = 1.0f;
  const std::vector<float> target{0.9f, 0.4f, -0.2f};
  for (int n = 0; n < 1000; ++n) {
    RvqBatchStats<float> stats(books);
    const auto enc = rvq_encode<float>(target, books);
    ASSERT_EQ(enc.codes.at(0, 0), 2);
    stats.add(enc);
    codebook_update(books, stats);
  }
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(books.at(0, 0).vectors.at(2, j), target[j], 1e-3f);
}

TEST(CodebookUpdate, IndexZeroStaysZero) {
  auto books = random_books(8, 4, 26);
  std::mt19937_64 rng(27);
  std::normal_distribution<float> dist(0.0f, 0.01f);
  std::vector<float> frame(12);
  for (int n = 0; n < 50; ++n) {
    RvqBatchStats<float> stats(books);
    for (int f = 0; f < 20; ++f) {
      for (auto& v : frame) v = dist(rng);
      stats.add(rvq_encode<float>(frame, books));
    }
    codebook_update(books, stats);
    reseed_dead_codes(books, stats, rng, 0.5f);
  }
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t l = 0; l < 3; ++l)
      for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(books.at(g, l).vectors.at(0, j), 0.0f);
}

TEST(CodebookUpdate, DeadCodesAreReseededFromPool) {
  Codebooks<float> books(1, 1, 4, 2);
  for (std::size_t k = 1; k < 4; ++k) books.at(0, 0).ema_counts[k] = 0.0f;
  books.at(0, 0).ema_counts[1] = 5.0f;
  RvqBatchStats<float> stats(books);
  stats.add(rvq_encode<float>(std::vector<float>{3.0f, 4.0f}, books));
  std::mt19937_64 rng(28);
  EXPECT_EQ(reseed_dead_codes(books, stats, rng, 1e-3f), 2u);
  EXPECT_EQ(books.at(0, 0).vectors.at(2, 0), 3.0f);
  EXPECT_EQ(books.at(0, 0).vectors.at(3, 1), 4.0f);
}

TEST(StraightThrough, GradientReachesSparseBridgeParameters) {
  BridgeModel<float> m(BridgeConfig{}, 29);
  std::mt19937_64 rng(30);
  randomize_bridge(m, rng);
  Tape<float> tape;
  auto p = m.params().bind(tape, true);
  QuantizationPlan<float> plan;
  auto losses = bridge_loss(m, p, tape, random_frames(20, 32, 31), plan);
  tape.backward(losses.recon);
  const auto& lay = m.sparse_layout();
  std::vector<std::size_t> ids{lay.down_w, lay.down_b};
  for (std::size_t i = 0; i < 3; ++i) ids.push_back(lay.extractor_w[i]);
  for (std::size_t id : ids) {
    const auto* g = tape.grad(p[id]);
    ASSERT_NE(g, nullptr) << m.params().name(id);
    double norm = 0.0;
    for (float v : g->values()) norm += std::abs(v);
    EXPECT_GT(norm, 0.0) << m.params().name(id);
  }
}
