#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "bridgetts/oracles.hpp"

using namespace bridgetts;

namespace {

Utterance utterance(std::string text, std::size_t frames, std::uint64_t seed, std::string id) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist;
  Utterance u;
  u.text = std::move(text);
  u.features.frames = Array<float>(Shape{frames, 32});
  for (auto& v : u.features.frames.values()) v = dist(rng);
  u.features.frame_rate_hz = 50;
  u.features.utterance_id = std::move(id);
  return u;
}

ArConfig small_ar() {
  ArConfig c;
  c.width = 32;
  c.layers = 2;
  c.heads = 2;
  c.context = 128;
  return c;
}

ArShape shape_for(const BridgeModel<float>& b) {
  return {b.config().feature_dim, b.config().groups, b.config().codebook_size, text_vocab_size("abcdefghij")};
}

void randomize(ArModel& m, std::uint64_t seed, float std = 0.3f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, std);
  for (std::size_t i = 0; i < m.params().size(); ++i)
    for (auto& v : m.params()[i].values()) v += dist(rng);
}

struct Fixture {
  BridgeModel<float> bridge{BridgeConfig{}, 1};
  Utterance ref = utterance("abc", 30, 2, "ref");
  Utterance target = utterance("de", 50, 3, "target");
  Fixture() {
    std::mt19937_64 rng(4);
    randomize_bridge(bridge, rng);
  }
};

}  // namespace

TEST(TextPrefix, LayoutAroundSeparator) {
  const auto t = encode_text("ab", "c", "abc");
  EXPECT_EQ(t.ids, (std::vector<int>{vocab::bos, 4, 5, vocab::sep, 6}));
  EXPECT_EQ(t.sep, 3u);
  EXPECT_EQ(t.prefix().back(), vocab::bos_speech);
}

TEST(TextPrefix, UnknownCharacterRejected) { EXPECT_THROW(encode_text("ab", "hello", "abc"), Error); }

TEST(GroupFrames, PadsLastGroupWithZeros) {
  Array<float> f(Shape{7, 2}, 1.0f);
  const auto g = group_frames(f, 5);
  ASSERT_EQ(g.shape(), (Shape{2, 10}));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(g.at(1, j), 1.0f);
  for (std::size_t j = 4; j < 10; ++j) EXPECT_EQ(g.at(1, j), 0.0f);
}

TEST(TrainingSequence, FiftyFramesGiveTenTargetsPlusEos) {
  Fixture fx;
  const auto ex = build_training_sequence(fx.ref, fx.target, fx.bridge, "abcdefghij");
  EXPECT_EQ(ex.ref_steps, 6u);
  EXPECT_EQ(ex.steps() - ex.ref_steps, 10u);
  EXPECT_EQ(ex.input.steps(), ex.steps());
  const ArModel ar(small_ar(), shape_for(fx.bridge), 5);
  Tape<float> tape;
  auto p = ar.params().bind(tape, false);
  auto bp = fx.bridge.params().bind(tape, false);
  EXPECT_EQ(ar_loss(ar, p, fx.bridge, bp, ex).scored, 11u);
}

TEST(TrainingSequence, SevenFramesGiveTwoPaddedSteps) {
  Fixture fx;
  const auto target = utterance("d", 7, 6, "short");
  const auto ex = build_training_sequence(fx.ref, target, fx.bridge, "abcdefghij");
  EXPECT_EQ(ex.steps() - ex.ref_steps, 2u);
  for (std::size_t j = 2 * 32; j < 5 * 32; ++j) EXPECT_EQ(ex.input.groups.at(ex.steps() - 1, j), 0.0f);
}

TEST(TrainingSequence, ReferenceCutToWholeSteps) {
  Fixture fx;
  const auto ref = utterance("ab", 23, 7, "ref23");
  const auto ex = build_training_sequence(ref, fx.target, fx.bridge, "abcdefghij");
  EXPECT_EQ(ex.ref_steps, 4u);
  EXPECT_EQ(ex.ref_frames, 20u);
}

TEST(TrainingSequence, TargetsAreBridgeEncoderCodes) {
  Fixture fx;
  const auto ex = build_training_sequence(fx.ref, fx.target, fx.bridge, "abcdefghij");
  const auto codes = fx.bridge.encode(concat_frames(fx.ref.features.frames, fx.target.features.frames)).codes();
  EXPECT_EQ(ex.codes, codes);
  const auto toks = ex.tokens();
  for (std::size_t s = 0; s < toks.size(); ++s)
    for (std::size_t g = 0; g < 3; ++g) EXPECT_EQ(toks[s].first_level[g], codes[s].at(g, 0));
}

TEST(TrainingSequence, BridgeDecodeTeacherFramesKeepReferenceGroups) {
  Fixture fx;
  const auto gt = build_training_sequence(fx.ref, fx.target, fx.bridge, "abcdefghij");
  const auto bd = build_training_sequence(fx.ref, fx.target, fx.bridge, "abcdefghij", ArInput::features,
                                          TeacherFrames::bridge_decode);
  const std::size_t w = gt.input.groups.cols();
  for (std::size_t i = 0; i < gt.ref_steps * w; ++i) EXPECT_EQ(gt.input.groups[i], bd.input.groups[i]);
  const auto toks = gt.tokens();
  const auto last = fx.bridge.decode_step(toks);
  for (std::size_t j = 0; j < w; ++j) EXPECT_EQ(bd.input.groups.at(gt.steps() - 1, j), last[j]);
}

TEST(TokenLoss, UntrainedHeadsGiveUniformCrossEntropy) {
  Fixture fx;
  const auto ex = build_training_sequence(fx.ref, fx.target, fx.bridge, "abcdefghij");
  const ArModel ar(small_ar(), shape_for(fx.bridge), 8);
  Tape<float> tape;
  auto p = ar.params().bind(tape, false);
  auto bp = fx.bridge.params().bind(tape, false);
  const auto l = ar_loss(ar, p, fx.bridge, bp, ex);
  EXPECT_NEAR(l.per_head[0], std::log(65.0), 1e-5);
  EXPECT_NEAR(l.per_head[1], std::log(64.0), 1e-5);
  EXPECT_NEAR(l.per_head[2], std::log(64.0), 1e-5);
  EXPECT_NEAR(l.token.value().item(), std::log(65.0) + 2.0 * std::log(64.0), 1e-4);
}

TEST(TokenLoss, SaturatedHeadsApproachZero) {
  Fixture fx;
  auto ex = build_training_sequence(fx.ref, fx.target, fx.bridge, "abcdefghij");
  // Every scored target equal to code 0 except the EOS position.
  for (std::size_t s = 0; s < ex.steps(); ++s)
    for (std::size_t g = 0; g < 3; ++g) ex.codes[s].at(g, 0) = 0;
  ArConfig cfg = small_ar();
  cfg.feature_loss = false;
  ArModel ar(cfg, shape_for(fx.bridge), 9);
  const auto& lay = ar.layout();
  for (std::size_t g = 0; g < 3; ++g) ar.params()[lay.head_b[g]][0] = 60.0f;
  Tape<float> tape;
  auto p = ar.params().bind(tape, false);
  auto bp = fx.bridge.params().bind(tape, false);
  const auto l = ar_loss(ar, p, fx.bridge, bp, ex);
  EXPECT_LT(l.per_head[1], 1e-10);
  EXPECT_LT(l.per_head[2], 1e-10);
  // Head 0 still pays for the EOS row: 60 nats over 11 scored rows.
  EXPECT_NEAR(l.per_head[0], 60.0 / 11.0, 1e-3);
}

TEST(TokenLoss, ReferenceStepCodesAreNotScored) {
  Fixture fx;
  auto ex = build_training_sequence(fx.ref, fx.target, fx.bridge, "abcdefghij");
  ArConfig cfg = small_ar();
  cfg.feature_loss = false;
  ArModel ar(cfg, shape_for(fx.bridge), 10);
  randomize(ar, 11);
  auto loss = [&] {
    Tape<float> tape;
    auto p = ar.params().bind(tape, false);
    auto bp = fx.bridge.params().bind(tape, false);
    return ar_loss(ar, p, fx.bridge, bp, ex).token.value().item();
  };
  const float before = loss();
  for (std::size_t s = 0; s < ex.ref_steps; ++s)
    for (std::size_t g = 0; g < 3; ++g) ex.codes[s].at(g, 0) = (ex.codes[s].at(g, 0) + 7) % 64;
  EXPECT_EQ(loss(), before);
}

TEST(ArLoss, TotalIsTokenPlusFeatures) {
  Fixture fx;
  const auto ex = build_training_sequence(fx.ref, fx.target, fx.bridge, "abcdefghij");
  ArModel ar(small_ar(), shape_for(fx.bridge), 12);
  randomize(ar, 13);
  Tape<float> tape;
  auto p = ar.params().bind(tape, false);
  auto bp = fx.bridge.params().bind(tape, false);
  const auto l = ar_loss(ar, p, fx.bridge, bp, ex);
  EXPECT_GT(l.features.value().item(), 0.0f);
  EXPECT_FLOAT_EQ(l.total.value().item(), l.token.value().item() + l.features.value().item());
}

TEST(ArLoss, FeatureTermOffWhenDisabled) {
  Fixture fx;
  const auto ex = build_training_sequence(fx.ref, fx.target, fx.bridge, "abcdefghij");
  ArConfig cfg = small_ar();
  cfg.feature_loss = false;
  const ArModel ar(cfg, shape_for(fx.bridge), 14);
  Tape<float> tape;
  auto p = ar.params().bind(tape, false);
  auto bp = fx.bridge.params().bind(tape, false);
  const auto l = ar_loss(ar, p, fx.bridge, bp, ex);
  EXPECT_EQ(l.features.value().item(), 0.0f);
  EXPECT_EQ(l.total.value().item(), l.token.value().item());
}

TEST(ArLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto r = ar_loss_gradcheck(seed);
    EXPECT_TRUE(r.passed) << "seed " << seed << " " << r.max_rel_error;
  }
}

TEST(ArTrainer, FirstStepIsFinite) {
  Fixture fx;
  SyntheticCorpusSpec spec;
  spec.n_utterances = 12;
  spec.n_speakers = 1;
  const auto corpus = generate_corpus(spec);
  ArModel ar(small_ar(), shape_for(fx.bridge), 15);
  ArTrainer trainer(ar, fx.bridge, build_training_set(corpus, Split::train, fx.bridge, spec.vocabulary), AdamWConfig{}, 4,
                    16);
  const auto s = trainer.step();
  EXPECT_TRUE(std::isfinite(s.total));
  EXPECT_GT(s.token, 0.0);
  EXPECT_GT(s.features, 0.0);
}

TEST(KvCache, MatchesFullForward) {
  Fixture fx;
  const auto ex = build_training_sequence(fx.ref, fx.target, fx.bridge, "abcdefghij");
  ArModel ar(small_ar(), shape_for(fx.bridge), 17);
  randomize(ar, 18);
  Tape<float> tape;
  auto p = ar.params().bind(tape, false);
  const auto fwd = ar_forward(ar, p, ex.prefix, ex.input);
  ArDecoder dec(ar);
  const std::size_t w = ex.input.groups.cols();
  for (std::size_t pos = 0; pos < ex.prefix.size() + ex.steps(); ++pos) {
    const auto logits = pos < ex.prefix.size()
                            ? dec.push_text(ex.prefix[pos])
                            : dec.push_group(std::span<const float>(ex.input.groups.data() + (pos - ex.prefix.size()) * w, w));
    for (std::size_t g = 0; g < 3; ++g)
      for (std::size_t c = 0; c < logits[g].size(); ++c)
        EXPECT_NEAR(logits[g][c], fwd.logits[g].value().at(pos, c), 1e-4) << "pos " << pos << " head " << g;
  }
}

TEST(KvCache, TokenInputMatchesFullForward) {
  Fixture fx;
  const auto ex = build_training_sequence(fx.ref, fx.target, fx.bridge, "abcdefghij", ArInput::tokens);
  ArConfig cfg = small_ar();
  cfg.input = ArInput::tokens;
  ArModel ar(cfg, shape_for(fx.bridge), 19);
  randomize(ar, 20);
  Tape<float> tape;
  auto p = ar.params().bind(tape, false);
  const auto fwd = ar_forward(ar, p, ex.prefix, ex.input);
  ArDecoder dec(ar);
  std::vector<std::vector<float>> logits;
  for (int id : ex.prefix) logits = dec.push_text(id);
  for (const auto& tok : ex.input.tokens) logits = dec.push_token(tok);
  const std::size_t last = ex.prefix.size() + ex.steps() - 1;
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t c = 0; c < logits[g].size(); ++c) EXPECT_NEAR(logits[g][c], fwd.logits[g].value().at(last, c), 1e-4);
}

class Generation : public ::testing::Test {
 protected:
  Fixture fx;
  ArModel ar{small_ar(), shape_for(fx.bridge), 21};
  BridgeDecoder decoder{fx.bridge};

  void SetUp() override { randomize(ar, 22, 0.1f); }

  ArSession session(std::size_t max_steps) {
    return make_bridged_session(encode_text(fx.ref.text, "de", "abcdefghij"), fx.ref.features.frames, fx.bridge,
                                max_steps);
  }
};

TEST_F(Generation, ImmediateEosGivesEmptyOutput) {
  ar.params()[ar.layout().head_b[0]][static_cast<std::size_t>(ar.eos_class())] = 1e4f;
  auto s = session(10);
  const auto out = generate(s, ar, decoder);
  EXPECT_EQ(out.rows(), 0u);
  EXPECT_TRUE(s.tokens.empty());
  ASSERT_EQ(s.transcript.size(), 1u);
  EXPECT_TRUE(s.transcript[0].token.eos);
  EXPECT_EQ(s.transcript[0].step, 1u);
  EXPECT_EQ(s.forward_passes, 1u);
}

TEST_F(Generation, MaxStepsTenGivesFiftyFrames) {
  auto s = session(10);
  const auto out = generate(s, ar, decoder, {.allow_eos = false});
  EXPECT_EQ(out.shape(), (Shape{50, 32}));
  EXPECT_EQ(s.tokens.size(), 10u);
  EXPECT_EQ(s.forward_passes, 10u);
  for (std::size_t i = 0; i < s.transcript.size(); ++i) EXPECT_EQ(s.transcript[i].step, i + 1);
}

TEST_F(Generation, FramesAreFivePerToken) {
  for (std::size_t n : {1u, 3u, 7u}) {
    auto s = session(n);
    const auto out = generate(s, ar, decoder);
    EXPECT_EQ(out.rows(), 5 * s.tokens.size());
  }
}

TEST_F(Generation, RepeatRunsAreBitIdentical) {
  auto a = session(12), b = session(12);
  const auto fa = generate(a, ar, decoder), fb = generate(b, ar, decoder);
  EXPECT_EQ(fa, fb);
  EXPECT_EQ(a.tokens, b.tokens);
}

TEST_F(Generation, ShorterBudgetIsPrefixOfLonger) {
  auto short_s = session(4), long_s = session(12);
  GenerateOptions opt;
  opt.allow_eos = false;
  opt.final_decode = false;
  const auto fs = generate(short_s, ar, decoder, opt);
  const auto fl = generate(long_s, ar, decoder, opt);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(short_s.tokens[i], long_s.tokens[i]);
  for (std::size_t i = 0; i < fs.size(); ++i) EXPECT_EQ(fs[i], fl[i]);
}

TEST_F(Generation, BridgeIsUnchanged) {
  const auto before = fx.bridge.params();
  const auto books = fx.bridge.codebooks().at(0, 0).vectors;
  auto s = session(8);
  generate(s, ar, decoder);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(fx.bridge.params()[i], before[i]);
  EXPECT_EQ(fx.bridge.codebooks().at(0, 0).vectors, books);
}

TEST_F(Generation, FinalDecodeEqualsBridgeDecodeOfAllTokens) {
  auto s = session(6);
  const auto out = generate(s, ar, decoder, {.allow_eos = false});
  auto all = s.reference_tokens;
  all.insert(all.end(), s.tokens.begin(), s.tokens.end());
  const auto full = fx.bridge.decode(all);
  const std::size_t offset = s.reference_tokens.size() * 5 * 32;
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], full[offset + i]);
}

TEST(RepeatDecoder, KnownTokenGivesMeanFrame) {
  Fixture fx;
  const auto ex = build_training_sequence(fx.ref, fx.target, fx.bridge, "abcdefghij");
  const RepeatDecoder dec({ex});
  const auto tok = ex.tokens()[ex.ref_steps];
  std::vector<double> mean(32, 0.0);
  std::size_t n = 0;
  for (std::size_t s = ex.ref_steps; s < ex.steps(); ++s) {
    if (!(ex.tokens()[s] == tok)) continue;
    for (std::size_t t = (s - ex.ref_steps) * 5; t < (s - ex.ref_steps) * 5 + 5; ++t, ++n)
      for (std::size_t j = 0; j < 32; ++j) mean[j] += ex.target.at(t, j);
  }
  const auto out = dec.decode_all({tok});
  ASSERT_EQ(out.shape(), (Shape{5, 32}));
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t j = 0; j < 32; ++j) EXPECT_NEAR(out.at(t, j), mean[j] / static_cast<double>(n), 1e-5);
}

TEST(RepeatDecoder, UnseenTokenFallsBackToOverallMean) {
  Fixture fx;
  const auto ex = build_training_sequence(fx.ref, fx.target, fx.bridge, "abcdefghij");
  const RepeatDecoder dec({ex});
  std::vector<double> mean(32, 0.0);
  for (std::size_t t = 0; t < ex.target.rows(); ++t)
    for (std::size_t j = 0; j < 32; ++j) mean[j] += ex.target.at(t, j) / static_cast<double>(ex.target.rows());
  SparseToken unseen{{63, 63, 63}};
  for (const auto& tok : ex.tokens()) ASSERT_FALSE(tok == unseen);
  const auto out = dec.decode_all({unseen});
  for (std::size_t j = 0; j < 32; ++j) EXPECT_NEAR(out.at(0, j), mean[j], 1e-5);
}
