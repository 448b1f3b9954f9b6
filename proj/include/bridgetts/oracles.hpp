#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bridgetts/ar_generator.hpp"
#include "bridgetts/bridge.hpp"
#include "bridgetts/corpus.hpp"
#include "bridgetts/gradcheck.hpp"
#include "bridgetts/ops.hpp"
#include "bridgetts/rvq.hpp"

namespace bridgetts {

struct OracleResult {
  std::string name;
  bool passed = false;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

namespace detail {

inline Array<double> uniform_array(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Array<double> a(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : a.values()) v = dist(rng);
  return a;
}

// Values kept at least `gap` away from zero, for ops with a kink at 0.
inline Array<double> away_from_zero(Shape shape, std::mt19937_64& rng, double gap = 0.05) {
  Array<double> a = uniform_array(std::move(shape), rng);
  for (auto& v : a.values()) v = v < 0 ? v - gap : v + gap;
  return a;
}

inline OracleResult summarize(std::string name, const GradCheckReport& r) {
  OracleResult o{std::move(name), r.passed(), r.max_rel_error(), 0};
  for (const auto& e : r.entries) o.checked += e.checked;
  return o;
}

// Scalarizes an op output with a fixed random weighting so every output
// entry contributes a distinct coefficient.
inline Var<double> project(Tape<double>& tape, const Var<double>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, tape.constant(uniform_array(y.shape(), rng))));
}

}  // namespace detail

using Leaves = std::vector<std::pair<std::string, Array<double>>>;
using OpBuilder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// Finite-difference checks of every differentiable tape op on small random inputs.
inline std::vector<OracleResult> op_gradchecks(std::uint64_t seed, const GradCheckOptions& opt = {}) {
  std::mt19937_64 rng(seed);
  using detail::uniform_array;
  std::vector<OracleResult> out;
  const std::uint64_t ps = seed * 7919 + 1;
  auto run = [&](std::string name, Leaves leaves, OpBuilder op) {
    auto report = gradcheck(std::move(leaves), [&](Tape<double>& t, const std::vector<Var<double>>& v) {
      return detail::project(t, op(t, v), ps);
    }, opt);
    out.push_back(detail::summarize(std::move(name), report));
  };
  using V = std::vector<Var<double>>;
  using T = Tape<double>;
  const Shape m{4, 3};
  run("add", {{"a", uniform_array(m, rng)}, {"b", uniform_array(m, rng)}}, [](T&, const V& v) { return add(v[0], v[1]); });
  run("sub", {{"a", uniform_array(m, rng)}, {"b", uniform_array(m, rng)}}, [](T&, const V& v) { return sub(v[0], v[1]); });
  run("mul", {{"a", uniform_array(m, rng)}, {"b", uniform_array(m, rng)}}, [](T&, const V& v) { return mul(v[0], v[1]); });
  run("scale", {{"a", uniform_array(m, rng)}}, [](T&, const V& v) { return scale(v[0], 1.7); });
  {
    auto offset = uniform_array(m, rng);
    run("add_constant", {{"a", uniform_array(m, rng)}},
        [offset](T&, const V& v) { return add_constant(v[0], offset); });
  }
  run("gelu", {{"a", uniform_array(m, rng, -3, 3)}}, [](T&, const V& v) { return gelu(v[0]); });
  run("relu", {{"a", detail::away_from_zero(m, rng)}}, [](T&, const V& v) { return relu(v[0]); });
  run("sum", {{"a", uniform_array(m, rng)}}, [](T&, const V& v) { return sum(v[0]); });
  run("mean", {{"a", uniform_array(m, rng)}}, [](T&, const V& v) { return mean(v[0]); });
  run("reshape", {{"a", uniform_array(m, rng)}}, [](T&, const V& v) { return reshape(v[0], Shape{3, 4}); });
  run("matmul", {{"a", uniform_array({4, 3}, rng)}, {"b", uniform_array({3, 5}, rng)}},
      [](T&, const V& v) { return matmul(v[0], v[1]); });
  run("linear", {{"x", uniform_array({4, 3}, rng)}, {"w", uniform_array({3, 5}, rng)}, {"b", uniform_array({5}, rng)}},
      [](T&, const V& v) { return linear(v[0], v[1], v[2]); });
  run("layer_norm",
      {{"x", uniform_array({4, 6}, rng)}, {"g", uniform_array({6}, rng, 0.5, 1.5)}, {"b", uniform_array({6}, rng)}},
      [](T&, const V& v) { return layer_norm(v[0], v[1], v[2]); });
  run("embedding", {{"table", uniform_array({5, 3}, rng)}},
      [](T&, const V& v) { return embedding(v[0], std::vector<int>{4, 0, 2, 2, 1}); });
  run("concat_cols", {{"a", uniform_array({4, 2}, rng)}, {"b", uniform_array({4, 3}, rng)}},
      [](T&, const V& v) { return concat_cols(V{v[0], v[1]}); });
  run("slice_cols", {{"a", uniform_array({4, 5}, rng)}}, [](T&, const V& v) { return slice_cols(v[0], 1, 3); });
  run("concat_rows", {{"a", uniform_array({2, 3}, rng)}, {"b", uniform_array({3, 3}, rng)}},
      [](T&, const V& v) { return concat_rows(V{v[0], v[1]}); });
  run("slice_rows", {{"a", uniform_array({5, 3}, rng)}}, [](T&, const V& v) { return slice_rows(v[0], 1, 3); });
  run("gather_rows", {{"a", uniform_array({4, 3}, rng)}},
      [](T&, const V& v) { return gather_rows(v[0], std::vector<std::size_t>{3, 1, 1, 0}); });
  run("pad_rows_replicate", {{"a", uniform_array({3, 2}, rng)}},
      [](T&, const V& v) { return pad_rows_replicate(v[0], 7); });
  run("conv1d_same",
      {{"x", uniform_array({7, 2}, rng)}, {"k", uniform_array({3, 2, 3}, rng)}, {"b", uniform_array({3}, rng)}},
      [](T&, const V& v) { return conv1d(v[0], v[1], v[2], 1, Padding::same); });
  run("conv1d_strided",
      {{"x", uniform_array({10, 3}, rng)}, {"k", uniform_array({5, 3, 2}, rng)}, {"b", uniform_array({2}, rng)}},
      [](T&, const V& v) { return conv1d(v[0], v[1], v[2], 5, Padding::valid); });
  run("conv_transpose1d",
      {{"x", uniform_array({3, 2}, rng)}, {"k", uniform_array({5, 2, 3}, rng)}, {"b", uniform_array({3}, rng)}},
      [](T&, const V& v) { return conv_transpose1d(v[0], v[1], v[2], 5); });
  run("softmax_rows", {{"a", uniform_array({3, 5}, rng, -2, 2)}}, [](T&, const V& v) { return softmax_rows(v[0]); });
  run("softmax_cross_entropy", {{"a", uniform_array({4, 5}, rng, -2, 2)}},
      [](T&, const V& v) { return softmax_cross_entropy(v[0], std::vector<int>{0, 4, 2, 2}); });
  run("mse", {{"a", uniform_array(m, rng)}, {"b", uniform_array(m, rng)}}, [](T&, const V& v) { return mse(v[0], v[1]); });
  run("causal_self_attention", {{"qkv", uniform_array({5, 12}, rng)}},
      [](T&, const V& v) { return causal_self_attention(v[0], 2); });
  return out;
}

// Small models used by the composite-loss checks: D=6, K=8, one AR layer.
inline BridgeConfig tiny_bridge_config() {
  BridgeConfig c;
  c.feature_dim = 6;
  c.codebook_size = 8;
  c.predictor_width = 8;
  return c;
}

inline SyntheticCorpusSpec tiny_corpus_spec(std::uint64_t seed) {
  SyntheticCorpusSpec s;
  s.n_utterances = 6;
  s.dim = 6;
  s.frames_per_char = 5;
  s.min_text_len = 2;
  s.max_text_len = 3;
  s.vocabulary = "abcd";
  s.n_speakers = 1;
  s.dev_fraction = 0.0;
  s.test_fraction = 0.0;
  s.seed = seed;
  return s;
}

// Replaces every parameter and codebook with random values so no gradient
// path is hidden behind a zero initialisation. Codeword 0 stays zero.
inline void randomize_bridge(BridgeModel<float>& model, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, 0.3f);
  for (std::size_t i = 0; i < model.params().size(); ++i)
    for (auto& v : model.params()[i].values()) v += dist(rng);
  auto& books = model.codebooks();
  for (std::size_t g = 0; g < books.groups(); ++g)
    for (std::size_t l = 0; l < books.levels(); ++l) {
      auto& vecs = books.at(g, l).vectors;
      for (std::size_t k = 1; k < vecs.rows(); ++k)
        for (std::size_t j = 0; j < vecs.cols(); ++j) vecs.at(k, j) = dist(rng) / static_cast<float>(l + 1);
    }
}

inline Leaves leaves_of(const ParameterSet<double>& params) {
  Leaves leaves;
  for (std::size_t i = 0; i < params.size(); ++i) leaves.emplace_back(params.name(i), params[i]);
  return leaves;
}

// L_code + L_feat of the bridge against all bridge parameters. The hard RVQ
// assignment and the straight-through offset are frozen at the base point.
inline OracleResult bridge_loss_gradcheck(std::uint64_t seed, GradCheckOptions opt = {}) {
  std::mt19937_64 rng(seed);
  BridgeModel<float> base(tiny_bridge_config(), seed);
  randomize_bridge(base, rng);
  const BridgeModel<double> model = base.cast<double>();
  const Array<double> f0 = detail::uniform_array({12, 6}, rng);
  const auto enc = model.encode(f0);
  Array<double> offset(enc.compressed.shape());
  for (std::size_t i = 0; i < offset.size(); ++i) offset[i] = enc.plan.quantized[i] - enc.compressed[i];
  if (!opt.max_entries_per_leaf) opt.max_entries_per_leaf = 64;
  auto report = gradcheck(leaves_of(model.params()), [&](Tape<double>& tape, const std::vector<Var<double>>& p) {
    QuantizationPlan<double> plan = enc.plan;
    return bridge_loss(model, p, tape, f0, plan, true, &offset).total;
  }, opt);
  return detail::summarize("bridge_loss", report);
}

// L_AR = L_token + L_features against all AR parameters, bridge frozen.
inline OracleResult ar_loss_gradcheck(std::uint64_t seed, GradCheckOptions opt = {}) {
  std::mt19937_64 rng(seed);
  BridgeModel<float> bridge(tiny_bridge_config(), seed);
  randomize_bridge(bridge, rng);
  const auto spec = tiny_corpus_spec(seed);
  const auto corpus = generate_corpus(spec);
  const auto ex = build_training_sequence(corpus[1], corpus[0], bridge, spec.vocabulary);

  ArConfig ac;
  ac.width = 8;
  ac.layers = 1;
  ac.heads = 2;
  ac.context = 64;
  ArShape shape{6, bridge.config().groups, bridge.config().codebook_size, text_vocab_size(spec.vocabulary)};
  ArModel ar(ac, shape, seed);
  std::normal_distribution<float> dist(0.0f, 0.3f);
  for (std::size_t i = 0; i < ar.params().size(); ++i)
    for (auto& v : ar.params()[i].values()) v += dist(rng);

  const BridgeModel<double> bridge_d = bridge.cast<double>();
  if (!opt.max_entries_per_leaf) opt.max_entries_per_leaf = 32;
  auto report = gradcheck(leaves_of(ar.params().cast<double>()), [&](Tape<double>& tape, const std::vector<Var<double>>& p) {
    auto bp = bridge_d.params().bind(tape, false);
    return ar_loss(ar, p, bridge_d, bp, ex).total;
  }, opt);
  return detail::summarize("ar_loss", report);
}

// ------------------------------------------------------------------ RVQ oracle

// Exhaustive nearest-codeword search per group and level, written
// independently of rvq_encode: distances are listed for all K codewords and
// the first minimum wins.
inline CodeMatrix exhaustive_rvq_codes(std::span<const float> frame, const Codebooks<float>& books) {
  const std::size_t dg = books.group_dim();
  CodeMatrix codes(books.groups(), books.levels());
  for (std::size_t g = 0; g < books.groups(); ++g) {
    std::vector<float> r(frame.begin() + static_cast<std::ptrdiff_t>(g * dg),
                         frame.begin() + static_cast<std::ptrdiff_t>((g + 1) * dg));
    for (std::size_t l = 0; l < books.levels(); ++l) {
      const auto& vecs = books.at(g, l).vectors;
      std::vector<float> dists;
      for (std::size_t k = 0; k < books.size(); ++k) {
        float acc = 0.0f;
        for (std::size_t j = 0; j < dg; ++j) {
          const float diff = r[j] - vecs.at(k, j);
          acc += diff * diff;
        }
        dists.push_back(acc);
      }
      const auto best = static_cast<std::size_t>(std::min_element(dists.begin(), dists.end()) - dists.begin());
      codes.at(g, l) = static_cast<std::int32_t>(best);
      for (std::size_t j = 0; j < dg; ++j) r[j] -= vecs.at(best, j);
    }
  }
  return codes;
}

struct RvqOracleResult {
  std::size_t frames = 0;
  std::size_t matching = 0;     // frames whose full code matrix equals the exhaustive one
  std::size_t monotone = 0;     // frames whose error never rises with level
};

// Random codebooks (codeword 0 pinned to zero, later levels finer) and
// random frames; compares rvq_encode to the exhaustive search and checks the
// per-level reconstruction error.
inline RvqOracleResult rvq_oracle(std::uint64_t seed, std::size_t k, std::size_t frames, std::size_t groups = 3,
                                  std::size_t levels = 3, std::size_t group_dim = 32) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  Codebooks<float> books(groups, levels, k, group_dim);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t l = 0; l < levels; ++l)
      for (std::size_t c = 1; c < k; ++c)
        for (std::size_t j = 0; j < group_dim; ++j)
          books.at(g, l).vectors.at(c, j) = dist(rng) / static_cast<float>(1u << l);
  RvqOracleResult res;
  std::vector<float> frame(books.width());
  for (std::size_t n = 0; n < frames; ++n) {
    for (auto& v : frame) v = dist(rng);
    const auto enc = rvq_encode<float>(frame, books);
    const auto ref = exhaustive_rvq_codes(frame, books);
    ++res.frames;
    if (enc.codes == ref) ++res.matching;
    bool mono = true;
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t upto = 1; upto <= levels; ++upto) {
      CodeMatrix partial = enc.codes;
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t l = upto; l < levels; ++l) partial.at(g, l) = 0;
      const auto rec = rvq_decode(partial, books);
      double err = 0.0;
      for (std::size_t j = 0; j < frame.size(); ++j) err += (rec[j] - frame[j]) * (rec[j] - frame[j]);
      err /= static_cast<double>(frame.size());
      if (err > prev) mono = false;
      prev = err;
    }
    if (mono) ++res.monotone;
  }
  return res;
}

// Everything the gradcheck command runs for one seed.
inline std::vector<OracleResult> oracle_suite(std::uint64_t seed) {
  auto out = op_gradchecks(seed);
  out.push_back(bridge_loss_gradcheck(seed));
  out.push_back(ar_loss_gradcheck(seed));
  const auto rvq = rvq_oracle(seed, 16, 200);
  out.push_back({"rvq_exhaustive_match", rvq.matching == rvq.frames, 0.0, rvq.frames});
  out.push_back({"rvq_monotone_refinement", rvq.monotone == rvq.frames, 0.0, rvq.frames});
  return out;
}

}  // namespace bridgetts
