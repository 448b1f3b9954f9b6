#pragma once

#include <algorithm>
#include <optional>
#include <vector>

#include "bridgetts/sparse_bridge.hpp"

namespace bridgetts {

struct DenseBridgeLayout {
  struct Group {
    std::size_t first_w = 0, first_b = 0;
    std::size_t context_w = 0, context_b = 0;
    std::vector<std::size_t> head_w, head_b;    // one per missing level (L-1)
    std::vector<std::size_t> level_w;  // conditions head l on level l-1's codeword (L-2)
  };
  std::vector<Group> groups;
  std::size_t up_w = 0, up_b = 0;
  std::array<std::size_t, 3> refine_w{}, refine_b{};
  std::size_t out_w = 0, out_b = 0;
};

// Heads and the output projection start at zero: untrained logits are uniform
// and the untrained reconstruction is the zero sequence.
template <typename T>
DenseBridgeLayout register_dense_bridge(ParameterSet<T>& params, const BridgeConfig& cfg, std::mt19937_64& rng) {
  DenseBridgeLayout lay;
  const std::size_t k = cfg.codebook_size, e = cfg.predictor_width, c = cfg.context_dim(), d = cfg.feature_dim;
  const std::size_t dg = cfg.group_dim();
  const double in_std = 1.0 / std::sqrt(static_cast<double>(dg));
  for (std::size_t g = 0; g < cfg.groups; ++g) {
    DenseBridgeLayout::Group grp;
    const std::string tag = "dense.predictor.g" + std::to_string(g);
    grp.first_w = params.add(tag + ".input.w", random_normal<T>(Shape{dg, e}, in_std, rng));
    grp.first_b = params.add(tag + ".input.b", Array<T>(Shape{e}));
    grp.context_w =
        params.add(tag + ".context.w", random_normal<T>(Shape{3, e, e}, 1.0 / std::sqrt(3.0 * static_cast<double>(e)), rng));
    grp.context_b = params.add(tag + ".context.b", Array<T>(Shape{e}));
    for (std::size_t l = 1; l < cfg.levels; ++l) {
      const std::string lt = tag + ".level" + std::to_string(l + 1);
      if (l >= 2) grp.level_w.push_back(params.add(lt + ".cond.w", random_normal<T>(Shape{dg, e}, in_std, rng)));
      grp.head_w.push_back(params.add(lt + ".head.w", Array<T>(Shape{e, k})));
      grp.head_b.push_back(params.add(lt + ".head.b", Array<T>(Shape{k})));
    }
    lay.groups.push_back(grp);
  }
  const std::size_t r = BridgeConfig::rate_factor;
  lay.up_w = params.add("dense.up.w", random_normal<T>(Shape{r, c, c}, 1.0 / std::sqrt(static_cast<double>(c)), rng));
  lay.up_b = params.add("dense.up.b", Array<T>(Shape{c}));
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t ks = BridgeConfig::kernel_sizes[i];
    const std::string tag = "dense.refine.k" + std::to_string(ks);
    lay.refine_w[i] =
        params.add(tag + ".w", random_normal<T>(Shape{ks, c, d}, 1.0 / std::sqrt(static_cast<double>(ks * c)), rng));
    lay.refine_b[i] = params.add(tag + ".b", Array<T>(Shape{d}));
  }
  lay.out_w = params.add("dense.out.w", Array<T>(Shape{1, c, d}));
  lay.out_b = params.add("dense.out.b", Array<T>(Shape{d}));
  return lay;
}

template <typename T>
struct CodePrediction {
  // logits[g * (L-1) + (l-1)] is [T' x K] for level l+1 of group g.
  std::vector<Var<T>> logits;
  // hard[g][l-1][t]: argmax codes (or the teacher codes that conditioned the next head).
  std::vector<std::vector<std::vector<int>>> hard;
};

inline int argmax_row(const float* row, std::size_t n) {
  return static_cast<int>(std::max_element(row, row + n) - row);
}
inline int argmax_row(const double* row, std::size_t n) {
  return static_cast<int>(std::max_element(row, row + n) - row);
}

// Rows of codebook (g, level) selected by `codes`, as a [T' x Dg] constant.
template <typename T>
Array<T> codeword_rows(const Codebooks<T>& books, std::size_t g, std::size_t level, const std::vector<int>& codes) {
  const auto& vecs = books.at(g, level).vectors;
  const std::size_t dg = books.group_dim();
  Array<T> out(Shape{codes.size(), dg});
  for (std::size_t t = 0; t < codes.size(); ++t)
    std::copy_n(vecs.data() + static_cast<std::size_t>(codes[t]) * dg, dg, out.data() + t * dg);
  return out;
}

// Re-estimates the discarded level-2..L codes from the level-1 tokens. Per
// group: project the level-1 codewords, one residual kernel-3 context conv
// over the sparse-frame axis, then a head per missing level; heads beyond the
// first add a projection of the previous level's codeword (teacher codes when
// given). Conditioning on codeword vectors rather than indices keeps the
// predictor's input stable when the codebooks reassign nearby indices.
template <typename T>
CodePrediction<T> predict_codes(const BridgeConfig& cfg, const DenseBridgeLayout& lay, const std::vector<Var<T>>& p,
                                const Codebooks<T>& books, const std::vector<std::vector<int>>& first_level,
                                const std::vector<std::vector<std::vector<int>>>* teacher = nullptr) {
  require(first_level.size() == cfg.groups, ErrorCode::shape_mismatch,
          "predict_codes: " + std::to_string(first_level.size()) + " groups, expected " + std::to_string(cfg.groups));
  const std::size_t k = cfg.codebook_size;
  CodePrediction<T> out;
  out.hard.resize(cfg.groups);
  for (std::size_t g = 0; g < cfg.groups; ++g) {
    const auto& grp = lay.groups[g];
    for (int c : first_level[g])
      require(c >= 0 && static_cast<std::size_t>(c) < k, ErrorCode::out_of_range,
              "token index " + std::to_string(c) + " outside codebook of size " + std::to_string(k));
    Tape<T>& tape = *p[grp.first_w].tape();
    Var<T> e = linear(tape.constant(codeword_rows(books, g, 0, first_level[g])), p[grp.first_w], p[grp.first_b]);
    Var<T> h = add(e, gelu(conv1d(e, p[grp.context_w], p[grp.context_b], 1, Padding::same)));
    std::vector<int> prev;
    for (std::size_t l = 1; l < cfg.levels; ++l) {
      Var<T> hl = h;
      if (l >= 2) hl = add(h, matmul(tape.constant(codeword_rows(books, g, l - 1, prev)), p[grp.level_w[l - 2]]));
      Var<T> logits = linear(hl, p[grp.head_w[l - 1]], p[grp.head_b[l - 1]]);
      out.logits.push_back(logits);
      std::vector<int> codes;
      if (teacher) {
        codes = (*teacher)[g][l - 1];
      } else {
        const auto& lv = logits.value();
        for (std::size_t t = 0; t < lv.rows(); ++t) codes.push_back(argmax_row(lv.data() + t * k, k));
      }
      out.hard[g].push_back(codes);
      prev = std::move(codes);
    }
  }
  return out;
}

// Q [T' x 3D] -> [5T' x D]: kernel-5 stride-5 transposed conv, then the
// kernel-1/3/5 refinement branches and a pointwise projection to D.
template <typename T>
Var<T> upsample_refine(const BridgeConfig& cfg, const DenseBridgeLayout& lay, const std::vector<Var<T>>& p,
                       const Var<T>& q) {
  require(q.shape().size() == 2 && q.shape()[0] >= 1 && q.shape()[1] == cfg.context_dim(), ErrorCode::shape_mismatch,
          "upsample_refine expects [T' x " + std::to_string(cfg.context_dim()) + "], got " + shape_str(q.shape()));
  Var<T> up = conv_transpose1d(q, p[lay.up_w], p[lay.up_b], BridgeConfig::rate_factor);
  std::vector<Var<T>> branches;
  for (std::size_t i = 0; i < 3; ++i)
    branches.push_back(activate(conv1d(up, p[lay.refine_w[i]], p[lay.refine_b[i]], 1, Padding::same), cfg.activation));
  return conv1d(concat_cols(branches), p[lay.out_w], p[lay.out_b], 1, Padding::same);
}

}  // namespace bridgetts
