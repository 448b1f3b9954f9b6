#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "bridgetts/ops.hpp"
#include "bridgetts/params.hpp"
#include "bridgetts/rvq.hpp"

namespace bridgetts {

// What occupies the speech positions of the AR input: dense feature groups
// (the bridged model and the per-frame baseline) or embeddings of the
// previous sparse tokens (the tokens-only ablation).
enum class ArInput { features, tokens };

inline std::string_view to_string(ArInput i) { return i == ArInput::features ? "features" : "tokens"; }

inline ArInput parse_ar_input(std::string_view s) {
  if (s == "features") return ArInput::features;
  if (s == "tokens") return ArInput::tokens;
  fail(ErrorCode::invalid_argument, "unknown AR input mode '" + std::string(s) + "'");
}

// What target steps are fed during teacher forcing: the ground-truth frames,
// or the bridge's streaming decode of the teacher tokens (what generation
// feeds back).
enum class TeacherFrames { ground_truth, bridge_decode };

inline std::string_view to_string(TeacherFrames t) {
  return t == TeacherFrames::ground_truth ? "ground_truth" : "bridge_decode";
}

inline TeacherFrames parse_teacher_frames(std::string_view s) {
  if (s == "ground_truth") return TeacherFrames::ground_truth;
  if (s == "bridge_decode") return TeacherFrames::bridge_decode;
  fail(ErrorCode::invalid_argument, "unknown teacher frame source '" + std::string(s) + "'");
}

struct ArConfig {
  std::size_t width = 128;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t context = 512;
  std::size_t frames_per_step = 5;
  ArInput input = ArInput::features;
  TeacherFrames teacher_frames = TeacherFrames::ground_truth;
  bool feature_loss = true;

  void validate() const {
    require(width >= 1 && heads >= 1 && width % heads == 0, ErrorCode::invalid_argument,
            "AR width " + std::to_string(width) + " must be a positive multiple of heads " + std::to_string(heads));
    require(layers >= 1, ErrorCode::invalid_argument, "AR needs at least one layer");
    require(context >= 2, ErrorCode::invalid_argument, "AR context must be >= 2");
    require(frames_per_step >= 1, ErrorCode::invalid_argument, "frames_per_step must be >= 1");
  }
};

// Special text ids; characters follow from first_char in vocabulary order.
namespace vocab {
inline constexpr int pad = 0;
inline constexpr int bos = 1;
inline constexpr int sep = 2;
inline constexpr int bos_speech = 3;
inline constexpr int first_char = 4;
}  // namespace vocab

struct ArShape {
  std::size_t feature_dim = 32;
  std::size_t groups = 3;
  std::size_t codebook_size = 64;
  std::size_t text_vocab = vocab::first_char;
};

struct ArLayout {
  struct Block {
    std::size_t ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc_w, fc_b, out_w, out_b;
  };
  std::size_t text_embed = 0, pos_embed = 0;
  std::size_t group_w = 0, group_b = 0;
  std::vector<std::size_t> token_embed;
  std::vector<Block> blocks;
  std::size_t lnf_g = 0, lnf_b = 0;
  std::vector<std::size_t> head_w, head_b;
};

// Decoder-only transformer with pre-norm blocks, learned positions and G
// classification heads. Head 0 has K+1 classes; class K is end-of-speech.
class ArModel {
 public:
  ArModel() = default;
  ArModel(const ArConfig& cfg, const ArShape& shape, std::uint64_t seed) : cfg_(cfg), shape_(shape) {
    cfg.validate();
    require(shape.groups >= 1 && shape.codebook_size >= 2 && shape.feature_dim >= 1, ErrorCode::invalid_argument,
            "AR shape needs G >= 1, K >= 2, D >= 1");
    std::mt19937_64 rng(seed);
    const std::size_t w = cfg.width;
    const double std_emb = 0.02;
    const double std_in = 1.0 / std::sqrt(static_cast<double>(w));
    const double std_res = std_in / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    auto& p = params_;
    lay_.text_embed = p.add("ar.text.embed", random_normal<float>(Shape{shape.text_vocab, w}, std_emb, rng));
    lay_.pos_embed = p.add("ar.pos.embed", random_normal<float>(Shape{cfg.context, w}, std_emb, rng));
    if (cfg.input == ArInput::features) {
      const std::size_t in = cfg.frames_per_step * shape.feature_dim;
      lay_.group_w = p.add("ar.group.w", random_normal<float>(Shape{in, w}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
      lay_.group_b = p.add("ar.group.b", Array<float>(Shape{w}));
    } else {
      for (std::size_t g = 0; g < shape.groups; ++g)
        lay_.token_embed.push_back(p.add("ar.token.g" + std::to_string(g) + ".embed",
                                         random_normal<float>(Shape{shape.codebook_size, w}, std_emb, rng)));
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string tag = "ar.block" + std::to_string(l);
      ArLayout::Block b{};
      b.ln1_g = p.add(tag + ".ln1.g", Array<float>(Shape{w}, 1.0f));
      b.ln1_b = p.add(tag + ".ln1.b", Array<float>(Shape{w}));
      b.qkv_w = p.add(tag + ".attn.qkv.w", random_normal<float>(Shape{w, 3 * w}, std_in, rng));
      b.qkv_b = p.add(tag + ".attn.qkv.b", Array<float>(Shape{3 * w}));
      b.proj_w = p.add(tag + ".attn.proj.w", random_normal<float>(Shape{w, w}, std_res, rng));
      b.proj_b = p.add(tag + ".attn.proj.b", Array<float>(Shape{w}));
      b.ln2_g = p.add(tag + ".ln2.g", Array<float>(Shape{w}, 1.0f));
      b.ln2_b = p.add(tag + ".ln2.b", Array<float>(Shape{w}));
      b.fc_w = p.add(tag + ".mlp.fc.w", random_normal<float>(Shape{w, 4 * w}, std_in, rng));
      b.fc_b = p.add(tag + ".mlp.fc.b", Array<float>(Shape{4 * w}));
      b.out_w = p.add(tag + ".mlp.out.w", random_normal<float>(Shape{4 * w, w}, std_res / 2.0, rng));
      b.out_b = p.add(tag + ".mlp.out.b", Array<float>(Shape{w}));
      lay_.blocks.push_back(b);
    }
    lay_.lnf_g = p.add("ar.lnf.g", Array<float>(Shape{w}, 1.0f));
    lay_.lnf_b = p.add("ar.lnf.b", Array<float>(Shape{w}));
    for (std::size_t g = 0; g < shape.groups; ++g) {
      const std::size_t classes = head_classes(g);
      lay_.head_w.push_back(p.add("ar.head.g" + std::to_string(g) + ".w", Array<float>(Shape{w, classes})));
      lay_.head_b.push_back(p.add("ar.head.g" + std::to_string(g) + ".b", Array<float>(Shape{classes})));
    }
  }

  const ArConfig& config() const noexcept { return cfg_; }
  const ArShape& shape() const noexcept { return shape_; }
  const ArLayout& layout() const noexcept { return lay_; }
  ParameterSet<float>& params() noexcept { return params_; }
  const ParameterSet<float>& params() const noexcept { return params_; }

  std::size_t head_classes(std::size_t g) const { return g == 0 ? shape_.codebook_size + 1 : shape_.codebook_size; }
  int eos_class() const { return static_cast<int>(shape_.codebook_size); }
  std::size_t step_width() const { return cfg_.frames_per_step * shape_.feature_dim; }

 private:
  ArConfig cfg_;
  ArShape shape_;
  ArLayout lay_;
  ParameterSet<float> params_;
};

// Speech-position content for one forward pass: feature groups
// [S x frames_per_step*D] or one token per step.
struct ArSpeechInput {
  Array<float> groups;
  std::vector<SparseToken> tokens;

  std::size_t steps() const { return groups.empty() ? tokens.size() : groups.rows(); }
};

template <typename T>
struct ArForward {
  std::vector<Var<T>> logits;  // per group, [N x classes]
  std::size_t prefix = 0;      // text positions (including BOS_SPEECH)
};

// Full causal forward over [text prefix | speech steps] on a tape. `p` is
// the model's parameter set bound to the tape (any scalar type).
template <typename T>
ArForward<T> ar_forward(const ArModel& model, const std::vector<Var<T>>& p, const std::vector<int>& prefix,
                        const ArSpeechInput& speech) {
  const auto& cfg = model.config();
  const auto& lay = model.layout();
  const std::size_t n = prefix.size() + speech.steps();
  require(!prefix.empty(), ErrorCode::invalid_argument, "AR input needs a text prefix");
  require(n <= cfg.context, ErrorCode::out_of_range,
          "sequence of " + std::to_string(n) + " positions exceeds AR context " + std::to_string(cfg.context));
  Tape<T>& tape = *p[0].tape();
  std::vector<Var<T>> parts{embedding(p[lay.text_embed], prefix)};
  if (speech.steps() > 0) {
    if (cfg.input == ArInput::features) {
      require(speech.groups.cols() == model.step_width(), ErrorCode::shape_mismatch,
              "feature groups " + shape_str(speech.groups.shape()) + " vs step width " +
                  std::to_string(model.step_width()));
      parts.push_back(linear(tape.constant(speech.groups.template cast<T>()), p[lay.group_w], p[lay.group_b]));
    } else {
      Var<T> acc;
      for (std::size_t g = 0; g < model.shape().groups; ++g) {
        std::vector<int> ids;
        for (const auto& tok : speech.tokens) ids.push_back(tok.first_level.at(g));
        Var<T> e = embedding(p[lay.token_embed[g]], ids);
        acc = g == 0 ? e : add(acc, e);
      }
      parts.push_back(acc);
    }
  }
  Var<T> x = add(concat_rows(parts), slice_rows(p[lay.pos_embed], 0, n));
  const std::size_t heads = cfg.heads;
  for (const auto& b : lay.blocks) {
    Var<T> a = layer_norm(x, p[b.ln1_g], p[b.ln1_b]);
    a = causal_self_attention(linear(a, p[b.qkv_w], p[b.qkv_b]), heads);
    x = add(x, linear(a, p[b.proj_w], p[b.proj_b]));
    Var<T> m = layer_norm(x, p[b.ln2_g], p[b.ln2_b]);
    m = linear(gelu(linear(m, p[b.fc_w], p[b.fc_b])), p[b.out_w], p[b.out_b]);
    x = add(x, m);
  }
  x = layer_norm(x, p[lay.lnf_g], p[lay.lnf_b]);
  ArForward<T> out;
  out.prefix = prefix.size();
  for (std::size_t g = 0; g < model.shape().groups; ++g) out.logits.push_back(linear(x, p[lay.head_w[g]], p[lay.head_b[g]]));
  return out;
}

// Incremental inference with a key/value cache. Each push appends one
// position and returns the per-head logits at that position.
class ArDecoder {
 public:
  explicit ArDecoder(const ArModel& model) : model_(model), caches_(model.config().layers) {}

  std::size_t length() const noexcept { return length_; }

  std::vector<std::vector<float>> push_text(int id) {
    const auto& table = model_.params()[model_.layout().text_embed];
    require(id >= 0 && static_cast<std::size_t>(id) < table.rows(), ErrorCode::out_of_range,
            "text id " + std::to_string(id) + " outside vocabulary");
    const std::size_t w = model_.config().width;
    std::vector<float> x(table.data() + static_cast<std::size_t>(id) * w, table.data() + (static_cast<std::size_t>(id) + 1) * w);
    return push_embedding(std::move(x));
  }

  std::vector<std::vector<float>> push_group(std::span<const float> group) {
    const auto& lay = model_.layout();
    require(model_.config().input == ArInput::features, ErrorCode::invalid_argument, "model takes tokens, not groups");
    require(group.size() == model_.step_width(), ErrorCode::shape_mismatch,
            "group width " + std::to_string(group.size()) + " vs " + std::to_string(model_.step_width()));
    const std::size_t w = model_.config().width;
    const auto& wt = model_.params()[lay.group_w];
    const auto& bt = model_.params()[lay.group_b];
    std::vector<float> x(bt.data(), bt.data() + w);
    Eigen::Map<Eigen::RowVectorXf> xv(x.data(), static_cast<Eigen::Index>(w));
    xv.noalias() += Eigen::Map<const Eigen::RowVectorXf>(group.data(), static_cast<Eigen::Index>(group.size())) *
                    detail::as_mat(wt, group.size(), w);
    return push_embedding(std::move(x));
  }

  std::vector<std::vector<float>> push_token(const SparseToken& tok) {
    const auto& lay = model_.layout();
    require(model_.config().input == ArInput::tokens, ErrorCode::invalid_argument, "model takes groups, not tokens");
    const std::size_t w = model_.config().width;
    std::vector<float> x(w, 0.0f);
    for (std::size_t g = 0; g < model_.shape().groups; ++g) {
      const auto& table = model_.params()[lay.token_embed[g]];
      const auto id = static_cast<std::size_t>(tok.first_level.at(g));
      require(id < table.rows(), ErrorCode::out_of_range, "token index outside AR embedding table");
      for (std::size_t j = 0; j < w; ++j) x[j] += table[id * w + j];
    }
    return push_embedding(std::move(x));
  }

 private:
  struct Cache {
    std::vector<float> k, v;  // [length x W]
  };

  using RowVec = Eigen::Matrix<float, 1, Eigen::Dynamic>;

  static void layer_norm_row(const float* x, const Array<float>& g, const Array<float>& b, float* out, std::size_t w) {
    float mu = 0.0f;
    for (std::size_t j = 0; j < w; ++j) mu += x[j];
    mu /= static_cast<float>(w);
    float var = 0.0f;
    for (std::size_t j = 0; j < w; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<float>(w);
    const float is = 1.0f / std::sqrt(var + 1e-5f);
    for (std::size_t j = 0; j < w; ++j) out[j] = (x[j] - mu) * is * g[j] + b[j];
  }

  RowVec affine(const RowVec& x, std::size_t wi, std::size_t bi) const {
    const auto& wt = model_.params()[wi];
    const auto& bt = model_.params()[bi];
    RowVec y = detail::as_mat(bt, 1, bt.size()).row(0);
    y.noalias() += x * detail::as_mat(wt, wt.rows(), wt.cols());
    return y;
  }

  std::vector<std::vector<float>> push_embedding(std::vector<float> x) {
    const auto& cfg = model_.config();
    const auto& lay = model_.layout();
    const auto& P = model_.params();
    require(length_ < cfg.context, ErrorCode::out_of_range,
            "AR context of " + std::to_string(cfg.context) + " positions exhausted");
    const std::size_t w = cfg.width, heads = cfg.heads, hd = w / heads;
    const auto& pos = P[lay.pos_embed];
    for (std::size_t j = 0; j < w; ++j) x[j] += pos[length_ * w + j];
    const auto ew = static_cast<Eigen::Index>(w);
    RowVec h = Eigen::Map<RowVec>(x.data(), ew);
    RowVec a(ew);
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
    for (std::size_t l = 0; l < lay.blocks.size(); ++l) {
      const auto& b = lay.blocks[l];
      layer_norm_row(h.data(), P[b.ln1_g], P[b.ln1_b], a.data(), w);
      RowVec qkv = affine(a, b.qkv_w, b.qkv_b);
      auto& c = caches_[l];
      c.k.insert(c.k.end(), qkv.data() + w, qkv.data() + 2 * w);
      c.v.insert(c.v.end(), qkv.data() + 2 * w, qkv.data() + 3 * w);
      const std::size_t n = length_ + 1;
      RowVec att(ew);
      std::vector<float> score(n);
      for (std::size_t hh = 0; hh < heads; ++hh) {
        const float* q = qkv.data() + hh * hd;
        float mx = -std::numeric_limits<float>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
          const float* kk = c.k.data() + j * w + hh * hd;
          float s = 0.0f;
          for (std::size_t d = 0; d < hd; ++d) s += q[d] * kk[d];
          score[j] = s * inv_sqrt;
          mx = std::max(mx, score[j]);
        }
        float z = 0.0f;
        for (std::size_t j = 0; j < n; ++j) {
          score[j] = std::exp(score[j] - mx);
          z += score[j];
        }
        for (std::size_t d = 0; d < hd; ++d) att[static_cast<Eigen::Index>(hh * hd + d)] = 0.0f;
        for (std::size_t j = 0; j < n; ++j) {
          const float pj = score[j] / z;
          const float* vv = c.v.data() + j * w + hh * hd;
          for (std::size_t d = 0; d < hd; ++d) att[static_cast<Eigen::Index>(hh * hd + d)] += pj * vv[d];
        }
      }
      h += affine(att, b.proj_w, b.proj_b);
      layer_norm_row(h.data(), P[b.ln2_g], P[b.ln2_b], a.data(), w);
      RowVec f = affine(a, b.fc_w, b.fc_b);
      for (Eigen::Index j = 0; j < f.size(); ++j) f[j] = detail::gelu_value(f[j]);
      h += affine(f, b.out_w, b.out_b);
    }
    layer_norm_row(h.data(), P[lay.lnf_g], P[lay.lnf_b], a.data(), w);
    ++length_;
    std::vector<std::vector<float>> logits;
    for (std::size_t g = 0; g < model_.shape().groups; ++g) {
      RowVec y = affine(a, lay.head_w[g], lay.head_b[g]);
      logits.emplace_back(y.data(), y.data() + y.size());
    }
    return logits;
  }

  const ArModel& model_;
  std::vector<Cache> caches_;
  std::size_t length_ = 0;
};

}  // namespace bridgetts
