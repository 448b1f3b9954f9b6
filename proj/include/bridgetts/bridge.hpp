#pragma once

#include <optional>
#include <random>
#include <span>
#include <vector>

#include "bridgetts/dense_bridge.hpp"
#include "bridgetts/sparse_bridge.hpp"

namespace bridgetts {

template <typename T>
struct BridgeEncoding {
  Array<T> context;     // F1 [T x 3D]
  Array<T> compressed;  // F2 [T' x 3D]
  QuantizationPlan<T> plan;

  std::vector<SparseToken> tokens() const { return plan.tokens(); }
  std::vector<CodeMatrix> codes() const { return plan.codes(); }
};

// Both bridging networks plus the shared RVQ codebooks.
template <typename T>
class BridgeModel {
 public:
  BridgeModel() = default;
  BridgeModel(const BridgeConfig& cfg, std::uint64_t seed)
      : cfg_(cfg), books_(cfg.groups, cfg.levels, cfg.codebook_size, cfg.group_dim()) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    sparse_ = register_sparse_bridge(params_, cfg, rng);
    dense_ = register_dense_bridge(params_, cfg, rng);
  }

  const BridgeConfig& config() const noexcept { return cfg_; }
  ParameterSet<T>& params() noexcept { return params_; }
  const ParameterSet<T>& params() const noexcept { return params_; }
  Codebooks<T>& codebooks() noexcept { return books_; }
  const Codebooks<T>& codebooks() const noexcept { return books_; }
  const SparseBridgeLayout& sparse_layout() const noexcept { return sparse_; }
  const DenseBridgeLayout& dense_layout() const noexcept { return dense_; }

  template <typename U>
  BridgeModel<U> cast() const {
    BridgeModel<U> out;
    out.cfg_ = cfg_;
    out.params_ = params_.template cast<U>();
    out.books_ = books_.template cast<U>();
    out.sparse_ = sparse_;
    out.dense_ = dense_;
    return out;
  }

  // F0 -> F1 -> F2 -> RVQ codes. Pure given frozen parameters.
  BridgeEncoding<T> encode(const Array<T>& f0) const {
    check_features(f0);
    Tape<T> tape;
    auto p = params_.bind(tape, false);
    Var<T> f1 = extract_context(cfg_, sparse_, p, tape.constant(f0));
    Var<T> f2 = downsample(sparse_, p, f1);
    BridgeEncoding<T> enc;
    enc.context = f1.value();
    enc.compressed = f2.value();
    enc.plan = quantize(enc.compressed, books_);
    return enc;
  }

  // Fills in levels 2..L with the code predictor's argmax.
  std::vector<CodeMatrix> complete_codes(const std::vector<SparseToken>& tokens) const {
    require(!tokens.empty(), ErrorCode::invalid_argument, "no tokens to decode");
    Tape<T> tape;
    auto p = params_.bind(tape, false);
    auto pred = predict_codes(cfg_, dense_, p, books_, first_level_codes(tokens));
    std::vector<CodeMatrix> out(tokens.size(), CodeMatrix(cfg_.groups, cfg_.levels));
    for (std::size_t t = 0; t < tokens.size(); ++t)
      for (std::size_t g = 0; g < cfg_.groups; ++g) {
        out[t].at(g, 0) = tokens[t].first_level[g];
        for (std::size_t l = 1; l < cfg_.levels; ++l) out[t].at(g, l) = pred.hard[g][l - 1][t];
      }
    return out;
  }

  // Full code matrices -> RVQ decode -> upsample + refine, [5T' x D] truncated to `length`.
  Array<T> decode_codes(const std::vector<CodeMatrix>& codes, std::optional<std::size_t> length = std::nullopt) const {
    require(!codes.empty(), ErrorCode::invalid_argument, "no codes to decode");
    const std::size_t w = cfg_.context_dim();
    Array<T> q(Shape{codes.size(), w});
    for (std::size_t t = 0; t < codes.size(); ++t) {
      auto v = rvq_decode(codes[t], books_);
      std::copy(v.begin(), v.end(), q.data() + t * w);
    }
    Tape<T> tape;
    auto p = params_.bind(tape, false);
    Var<T> r = upsample_refine(cfg_, dense_, p, tape.constant(std::move(q)));
    return truncate(r.value(), length);
  }

  // Inference path: predicted codes, no teacher.
  Array<T> decode(const std::vector<SparseToken>& tokens, std::optional<std::size_t> length = std::nullopt) const {
    return decode_codes(complete_codes(tokens), length);
  }

  // Frames for the newest token of `history`, decoded with up to
  // `left_context` preceding tokens visible to the convolutions.
  Array<T> decode_step(std::span<const SparseToken> history, std::size_t left_context = 2) const {
    require(!history.empty(), ErrorCode::invalid_argument, "decode_step needs at least one token");
    const std::size_t begin = history.size() > left_context + 1 ? history.size() - left_context - 1 : 0;
    std::vector<SparseToken> window(history.begin() + static_cast<std::ptrdiff_t>(begin), history.end());
    Array<T> frames = decode(window);
    const std::size_t r = BridgeConfig::rate_factor, d = cfg_.feature_dim;
    Array<T> out(Shape{r, d});
    std::copy_n(frames.data() + (frames.rows() - r) * d, r * d, out.data());
    return out;
  }

  std::vector<std::vector<int>> first_level_codes(const std::vector<SparseToken>& tokens) const {
    std::vector<std::vector<int>> out(cfg_.groups);
    for (const auto& tok : tokens) {
      require(!tok.eos && tok.first_level.size() == cfg_.groups, ErrorCode::invalid_argument,
              "token must carry " + std::to_string(cfg_.groups) + " first-level indices");
      for (std::size_t g = 0; g < cfg_.groups; ++g) {
        require(tok.first_level[g] >= 0 && static_cast<std::size_t>(tok.first_level[g]) < cfg_.codebook_size,
                ErrorCode::out_of_range, "token index " + std::to_string(tok.first_level[g]) + " outside codebook");
        out[g].push_back(tok.first_level[g]);
      }
    }
    return out;
  }

  void check_features(const Array<T>& f0) const {
    require(f0.rank() == 2 && f0.rows() >= 1 && f0.cols() == cfg_.feature_dim, ErrorCode::shape_mismatch,
            "features must be [T x " + std::to_string(cfg_.feature_dim) + "], got " + shape_str(f0.shape()));
  }

 private:
  template <typename>
  friend class BridgeModel;

  static Array<T> truncate(const Array<T>& frames, std::optional<std::size_t> length) {
    if (!length || *length >= frames.rows()) return frames;
    Array<T> out(Shape{*length, frames.cols()});
    std::copy_n(frames.data(), *length * frames.cols(), out.data());
    return out;
  }

  BridgeConfig cfg_;
  ParameterSet<T> params_;
  Codebooks<T> books_;
  SparseBridgeLayout sparse_;
  DenseBridgeLayout dense_;
};

template <typename T>
struct BridgeLosses {
  Var<T> code;   // sum over (group, level 2..L) of mean cross-entropy
  Var<T> align;  // MSE(RVQ output, F2)
  Var<T> recon;  // MSE(reconstruction, F0)
  Var<T> feat;   // align + recon
  Var<T> total;  // code + feat (+ commitment when enabled)
};

// Training-mode forward for one utterance. The decoder sees teacher codes;
// the quantizer is straight-through. Passing `fixed_plan` reuses a previous
// hard assignment (codes and quantizer offsets) instead of re-quantizing,
// which makes the loss a smooth function of the parameters for gradient
// checking.
template <typename T>
BridgeLosses<T> bridge_loss(const BridgeModel<T>& model, const std::vector<Var<T>>& p, Tape<T>& tape, const Array<T>& f0,
                            QuantizationPlan<T>& plan, bool reuse_plan = false,
                            const Array<T>* fixed_offset = nullptr) {
  const auto& cfg = model.config();
  model.check_features(f0);
  Var<T> x = tape.constant(f0);
  Var<T> f1 = extract_context(cfg, model.sparse_layout(), p, x);
  Var<T> f2 = downsample(model.sparse_layout(), p, f1);
  if (!reuse_plan) plan = quantize(f2.value(), model.codebooks());
  require(plan.length() == f2.shape()[0], ErrorCode::shape_mismatch, "quantization plan length != compressed length");

  Array<T> offset(f2.shape());
  if (fixed_offset) {
    offset = *fixed_offset;
  } else {
    const auto& fv = f2.value();
    for (std::size_t i = 0; i < offset.size(); ++i) offset[i] = plan.quantized[i] - fv[i];
  }
  Var<T> q_st = add_constant(f2, offset);

  std::vector<std::vector<std::vector<int>>> teacher(cfg.groups);
  for (std::size_t l = 1; l < cfg.levels; ++l) {
    auto lc = plan.level_codes(l);
    for (std::size_t g = 0; g < cfg.groups; ++g) teacher[g].push_back(lc[g]);
  }
  auto pred = predict_codes(cfg, model.dense_layout(), p, model.codebooks(), plan.level_codes(0), &teacher);

  BridgeLosses<T> out;
  std::vector<Var<T>> ce;
  for (std::size_t g = 0; g < cfg.groups; ++g)
    for (std::size_t l = 1; l < cfg.levels; ++l)
      ce.push_back(softmax_cross_entropy(pred.logits[g * (cfg.levels - 1) + (l - 1)], teacher[g][l - 1]));
  out.code = ce[0];
  for (std::size_t i = 1; i < ce.size(); ++i) out.code = add(out.code, ce[i]);

  Var<T> recon = upsample_refine(cfg, model.dense_layout(), p, q_st);
  recon = slice_rows(recon, 0, f0.rows());
  Var<T> q_const = tape.constant(plan.quantized);
  out.align = mse(q_const, f2);
  out.recon = mse(recon, x);
  out.feat = add(out.align, out.recon);
  out.total = add(out.code, out.feat);
  if (cfg.commitment) out.total = add(out.total, scale(mse(q_const, f2), static_cast<T>(cfg.commitment_beta)));
  return out;
}

// Mean-squared reconstruction error of decode(encode(F0)) against F0,
// weighted by frame count across the set.
template <typename T>
double roundtrip_mse(const BridgeModel<T>& model, const std::vector<const Array<T>*>& features) {
  double err = 0.0;
  std::size_t count = 0;
  for (const auto* f0 : features) {
    auto tokens = model.encode(*f0).tokens();
    Array<T> rec = model.decode(tokens, f0->rows());
    for (std::size_t i = 0; i < rec.size(); ++i) {
      const double d = static_cast<double>(rec[i]) - static_cast<double>((*f0)[i]);
      err += d * d;
    }
    count += rec.size();
  }
  return count ? err / static_cast<double>(count) : 0.0;
}

}  // namespace bridgetts
