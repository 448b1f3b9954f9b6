#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bridgetts/ops.hpp"
#include "bridgetts/params.hpp"
#include "bridgetts/rvq.hpp"

namespace bridgetts {

enum class Activation { gelu, relu, identity };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::gelu: return "gelu";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "gelu";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  fail(ErrorCode::invalid_argument, "unknown activation '" + std::string(s) + "'");
}

template <typename T>
Var<T> activate(const Var<T>& x, Activation a) {
  switch (a) {
    case Activation::gelu: return gelu(x);
    case Activation::relu: return relu(x);
    case Activation::identity: return x;
  }
  return x;
}

// Shape and training knobs shared by both bridging networks.
struct BridgeConfig {
  std::size_t feature_dim = 32;
  std::size_t groups = 3;
  std::size_t levels = 3;
  std::size_t codebook_size = 64;
  std::size_t predictor_width = 64;
  Activation activation = Activation::gelu;
  double ema_decay = 0.99;
  double dead_code_threshold = 1e-3;
  bool commitment = false;
  double commitment_beta = 0.25;

  static constexpr std::size_t rate_factor = 5;
  static constexpr std::array<std::size_t, 3> kernel_sizes{1, 3, 5};

  std::size_t context_dim() const { return 3 * feature_dim; }
  std::size_t group_dim() const { return context_dim() / groups; }

  void validate() const {
    require(feature_dim >= 1, ErrorCode::invalid_argument, "feature_dim must be >= 1");
    require(groups >= 1 && context_dim() % groups == 0, ErrorCode::invalid_argument,
            "3*feature_dim (" + std::to_string(context_dim()) + ") must be divisible by groups (" +
                std::to_string(groups) + ")");
    require(levels >= 2, ErrorCode::invalid_argument, "need at least 2 RVQ levels");
    require(codebook_size >= 2, ErrorCode::invalid_argument, "codebook_size must be >= 2");
    require(predictor_width >= 1, ErrorCode::invalid_argument, "predictor_width must be >= 1");
  }
};

inline std::size_t sparse_length(std::size_t frames) {
  return (frames + BridgeConfig::rate_factor - 1) / BridgeConfig::rate_factor;
}

struct SparseBridgeLayout {
  std::array<std::size_t, 3> extractor_w{}, extractor_b{};
  std::size_t down_w = 0, down_b = 0;
};

template <typename T>
SparseBridgeLayout register_sparse_bridge(ParameterSet<T>& params, const BridgeConfig& cfg, std::mt19937_64& rng) {
  SparseBridgeLayout lay;
  const std::size_t d = cfg.feature_dim, c = cfg.context_dim();
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t k = BridgeConfig::kernel_sizes[i];
    const std::string tag = "sparse.extract.k" + std::to_string(k);
    lay.extractor_w[i] =
        params.add(tag + ".w", random_normal<T>(Shape{k, d, d}, 1.0 / std::sqrt(static_cast<double>(k * d)), rng));
    lay.extractor_b[i] = params.add(tag + ".b", Array<T>(Shape{d}));
  }
  const std::size_t r = BridgeConfig::rate_factor;
  lay.down_w = params.add("sparse.down.w", random_normal<T>(Shape{r, c, c}, 1.0 / std::sqrt(static_cast<double>(r * c)), rng));
  lay.down_b = params.add("sparse.down.b", Array<T>(Shape{c}));
  return lay;
}

// F0 [T x D] -> F1 [T x 3D]: kernel-1/3/5 `same` convolutions, activation,
// concatenated along channels.
template <typename T>
Var<T> extract_context(const BridgeConfig& cfg, const SparseBridgeLayout& lay, const std::vector<Var<T>>& p,
                       const Var<T>& f0) {
  require(f0.shape().size() == 2 && f0.shape()[1] == cfg.feature_dim && f0.shape()[0] >= 1, ErrorCode::shape_mismatch,
          "extract_context expects [T x " + std::to_string(cfg.feature_dim) + "], got " + shape_str(f0.shape()));
  std::vector<Var<T>> branches;
  for (std::size_t i = 0; i < 3; ++i)
    branches.push_back(activate(conv1d(f0, p[lay.extractor_w[i]], p[lay.extractor_b[i]], 1, Padding::same), cfg.activation));
  return concat_cols(branches);
}

// F1 [T x 3D] -> F2 [ceil(T/5) x 3D]: edge-replicate to a multiple of 5, then a
// learnable kernel-5 stride-5 convolution.
template <typename T>
Var<T> downsample(const SparseBridgeLayout& lay, const std::vector<Var<T>>& p, const Var<T>& f1) {
  const std::size_t len = f1.shape().at(0);
  const std::size_t padded = sparse_length(len) * BridgeConfig::rate_factor;
  return conv1d(pad_rows_replicate(f1, padded), p[lay.down_w], p[lay.down_b], BridgeConfig::rate_factor, Padding::valid);
}

// Hard RVQ assignment of every compressed frame.
template <typename T>
struct QuantizationPlan {
  std::vector<RvqEncoding<T>> frames;
  Array<T> quantized;  // [T' x 3D]

  std::size_t length() const { return frames.size(); }

  std::vector<CodeMatrix> codes() const {
    std::vector<CodeMatrix> out;
    for (const auto& f : frames) out.push_back(f.codes);
    return out;
  }

  std::vector<SparseToken> tokens() const {
    std::vector<SparseToken> out;
    for (const auto& f : frames) out.push_back(select_codes(f.codes));
    return out;
  }

  // first_level()[g][t] = level-1 code of group g at frame t.
  std::vector<std::vector<int>> level_codes(std::size_t level) const {
    const std::size_t g_count = frames.empty() ? 0 : frames[0].codes.groups;
    std::vector<std::vector<int>> out(g_count);
    for (const auto& f : frames)
      for (std::size_t g = 0; g < g_count; ++g) out[g].push_back(f.codes.at(g, level));
    return out;
  }
};

template <typename T>
QuantizationPlan<T> quantize(const Array<T>& f2, const Codebooks<T>& books) {
  QuantizationPlan<T> plan;
  const std::size_t n = f2.rows(), w = f2.cols();
  plan.quantized = Array<T>(Shape{n, w});
  for (std::size_t t = 0; t < n; ++t) {
    plan.frames.push_back(rvq_encode<T>(f2.row(t), books));
    std::copy(plan.frames.back().quantized.begin(), plan.frames.back().quantized.end(), plan.quantized.data() + t * w);
  }
  return plan;
}

}  // namespace bridgetts
