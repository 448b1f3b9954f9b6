#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bridgetts/ar_model.hpp"
#include "bridgetts/bridge.hpp"
#include "bridgetts/corpus.hpp"
#include "bridgetts/optim.hpp"

namespace bridgetts {

// ------------------------------------------------------------------ text

struct TextTokens {
  std::vector<int> ids;  // BOS, reference characters, SEP, target characters
  std::size_t sep = 0;   // index of SEP in ids

  // ids followed by BOS_SPEECH: the text part of every AR input.
  std::vector<int> prefix() const {
    std::vector<int> p = ids;
    p.push_back(vocab::bos_speech);
    return p;
  }
};

inline std::size_t text_vocab_size(std::string_view vocabulary) { return vocab::first_char + vocabulary.size(); }

inline TextTokens encode_text(std::string_view reference, std::string_view target, std::string_view vocabulary) {
  require(!reference.empty() && !target.empty(), ErrorCode::invalid_argument,
          "reference and target transcripts must be non-empty");
  TextTokens t;
  t.ids.push_back(vocab::bos);
  auto put = [&](std::string_view s) {
    for (char c : s) {
      const auto pos = vocabulary.find(c);
      require(pos != std::string_view::npos, ErrorCode::invalid_argument,
              std::string("character '") + c + "' is not in the vocabulary");
      t.ids.push_back(vocab::first_char + static_cast<int>(pos));
    }
  };
  put(reference);
  t.sep = t.ids.size();
  t.ids.push_back(vocab::sep);
  put(target);
  return t;
}

// [T x D] -> [ceil(T/per_step) x per_step*D]; the last group is zero-padded.
inline Array<float> group_frames(const Array<float>& frames, std::size_t per_step) {
  const std::size_t t = frames.rows(), d = frames.cols();
  const std::size_t steps = (t + per_step - 1) / per_step;
  Array<float> out(Shape{steps, per_step * d});
  std::copy_n(frames.data(), t * d, out.data());
  return out;
}

inline Array<float> concat_frames(const Array<float>& a, const Array<float>& b) {
  require(a.cols() == b.cols(), ErrorCode::dimension_mismatch,
          "cannot join features of width " + std::to_string(a.cols()) + " and " + std::to_string(b.cols()));
  Array<float> out(Shape{a.rows() + b.rows(), a.cols()});
  std::copy_n(a.data(), a.size(), out.data());
  std::copy_n(b.data(), b.size(), out.data() + a.size());
  return out;
}

inline Array<float> leading_frames(const Array<float>& a, std::size_t rows) {
  rows = std::min(rows, a.rows());
  Array<float> out(Shape{rows, a.cols()});
  std::copy_n(a.data(), rows * a.cols(), out.data());
  return out;
}

// ------------------------------------------------------------------ training sequences

// One teacher-forced (reference, target) pair. Speech step s holds frames
// [5s, 5s+5) of the joined reference+target features; the output at
// position(s) predicts token s and position(steps()) predicts EOS. Only
// predictions of target tokens and EOS are scored.
struct ArExample {
  std::vector<int> prefix;
  ArSpeechInput input;
  std::vector<CodeMatrix> codes;  // bridge codes of the joined features, one per step
  std::size_t ref_steps = 0;
  std::size_t ref_frames = 0;
  Array<float> target;  // ground-truth target features [T x D]
  std::string target_id;

  std::size_t steps() const { return codes.size(); }
  std::size_t position(std::size_t s) const { return prefix.size() - 1 + s; }
  std::vector<SparseToken> tokens() const {
    std::vector<SparseToken> out;
    for (const auto& c : codes) out.push_back(select_codes(c));
    return out;
  }
};

// The reference is cut to a whole number of steps so that its tokens and the
// target's tokens do not share a compressed frame.
inline ArExample build_training_sequence(const Utterance& reference, const Utterance& target,
                                         const BridgeModel<float>& bridge, std::string_view vocabulary,
                                         ArInput input = ArInput::features,
                                         TeacherFrames frames = TeacherFrames::ground_truth) {
  const std::size_t r = BridgeConfig::rate_factor;
  const auto& rf = reference.features;
  const auto& tf = target.features;
  require(rf.dim() == tf.dim() && tf.dim() == bridge.config().feature_dim, ErrorCode::dimension_mismatch,
          "reference D=" + std::to_string(rf.dim()) + ", target D=" + std::to_string(tf.dim()) + ", bridge D=" +
              std::to_string(bridge.config().feature_dim));
  require(rf.frame_rate_hz == tf.frame_rate_hz, ErrorCode::invalid_argument,
          "reference and target frame rates differ (" + std::to_string(rf.frame_rate_hz) + " vs " +
              std::to_string(tf.frame_rate_hz) + " Hz)");
  ArExample ex;
  ex.prefix = encode_text(reference.text, target.text, vocabulary).prefix();
  ex.ref_steps = rf.frames.rows() / r;
  ex.ref_frames = ex.ref_steps * r;
  ex.target = tf.frames;
  ex.target_id = target.id();
  const Array<float> joined = concat_frames(leading_frames(rf.frames, ex.ref_frames), tf.frames);
  ex.codes = bridge.encode(joined).codes();
  if (input == ArInput::features) {
    ex.input.groups = group_frames(joined, r);
    if (frames == TeacherFrames::ground_truth) return ex;
    const auto toks = ex.tokens();
    const std::size_t width = ex.input.groups.cols();
    for (std::size_t s = ex.ref_steps; s < toks.size(); ++s) {
      Array<float> fed = bridge.decode_step(std::span<const SparseToken>(toks.data(), s + 1));
      std::copy_n(fed.data(), width, ex.input.groups.data() + s * width);
    }
  } else
    ex.input.tokens = ex.tokens();
  return ex;
}

// Every training utterance as a target, paired with its same-speaker reference.
inline std::vector<ArExample> build_training_set(const std::vector<Utterance>& corpus, Split split,
                                                 const BridgeModel<float>& bridge, std::string_view vocabulary,
                                                 ArInput input = ArInput::features,
                                                 TeacherFrames frames = TeacherFrames::ground_truth) {
  std::vector<ArExample> out;
  for (const auto& u : corpus)
    if (u.split == split)
      out.push_back(build_training_sequence(pick_reference(corpus, u), u, bridge, vocabulary, input, frames));
  return out;
}

// ------------------------------------------------------------------ losses

template <typename T>
struct ArLosses {
  Var<T> token;     // sum over heads of mean cross-entropy
  Var<T> features;  // MSE of the soft-token reconstruction (0 when disabled)
  Var<T> total;     // token + features
  std::vector<double> per_head;
  std::size_t correct = 0;  // scored positions with every head right
  std::size_t scored = 0;
};

// Probability-weighted level-1 codewords plus teacher level-2..L codewords,
// groups concatenated: [n x 3D] for the given target steps.
template <typename T>
Var<T> soft_quantized(const ArModel& model, const std::vector<Var<T>>& logits, const std::vector<std::size_t>& rows,
                      const std::vector<CodeMatrix>& codes, std::size_t first_step, const Codebooks<T>& books) {
  Tape<T>& tape = *logits[0].tape();
  const std::size_t k = model.shape().codebook_size, dg = books.group_dim();
  std::vector<Var<T>> parts;
  for (std::size_t g = 0; g < books.groups(); ++g) {
    Var<T> lg = gather_rows(logits[g], rows);
    if (g == 0) lg = slice_cols(lg, 0, k);  // EOS excluded; softmax renormalises
    Var<T> expected = matmul(softmax_rows(lg), tape.constant(books.at(g, 0).vectors));
    Array<T> teacher(Shape{rows.size(), dg});
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t l = 1; l < books.levels(); ++l) {
        const auto& vecs = books.at(g, l).vectors;
        const auto code = static_cast<std::size_t>(codes[first_step + i].at(g, l));
        for (std::size_t j = 0; j < dg; ++j) teacher[i * dg + j] += vecs.at(code, j);
      }
    parts.push_back(add_constant(expected, teacher));
  }
  return concat_cols(parts);
}

// L_AR for one example. `bp` is the bridge's parameter set bound to the same
// tape without gradients, so the bridge stays frozen.
template <typename T>
ArLosses<T> ar_loss(const ArModel& model, const std::vector<Var<T>>& p, const BridgeModel<T>& bridge,
                    const std::vector<Var<T>>& bp, const ArExample& ex) {
  const auto& shape = model.shape();
  const std::size_t s_count = ex.steps();
  require(s_count > ex.ref_steps, ErrorCode::invalid_argument, "example has no target steps");
  require(ex.input.steps() == s_count, ErrorCode::shape_mismatch,
          "example has " + std::to_string(ex.input.steps()) + " input steps but " + std::to_string(s_count) + " targets");
  Tape<T>& tape = *p[0].tape();
  auto fwd = ar_forward(model, p, ex.prefix, ex.input);

  std::vector<std::size_t> rows_all, rows_tok;
  for (std::size_t s = ex.ref_steps; s <= s_count; ++s) rows_all.push_back(ex.position(s));
  rows_tok.assign(rows_all.begin(), rows_all.end() - 1);

  ArLosses<T> out;
  std::vector<std::vector<int>> targets(shape.groups);
  for (std::size_t s = ex.ref_steps; s < s_count; ++s)
    for (std::size_t g = 0; g < shape.groups; ++g) targets[g].push_back(ex.codes[s].at(g, 0));
  targets[0].push_back(model.eos_class());
  for (std::size_t g = 0; g < shape.groups; ++g) {
    Var<T> ce = softmax_cross_entropy(gather_rows(fwd.logits[g], g == 0 ? rows_all : rows_tok), targets[g]);
    out.per_head.push_back(static_cast<double>(ce.value().item()));
    out.token = g == 0 ? ce : add(out.token, ce);
  }

  for (std::size_t i = 0; i < rows_all.size(); ++i) {
    bool ok = true;
    for (std::size_t g = 0; g < shape.groups && ok; ++g) {
      if (g > 0 && i + 1 == rows_all.size()) break;
      const auto& lv = fwd.logits[g].value();
      const std::size_t c = lv.cols();
      const T* row = lv.data() + rows_all[i] * c;
      ok = static_cast<int>(std::max_element(row, row + c) - row) == targets[g][i];
    }
    out.correct += ok ? 1 : 0;
  }
  out.scored = rows_all.size();

  if (model.config().feature_loss && model.config().input == ArInput::features) {
    const auto& books = bridge.codebooks();
    Var<T> q = soft_quantized(model, fwd.logits, rows_tok, ex.codes, ex.ref_steps, books);
    if (ex.ref_steps > 0) {
      const std::size_t w = books.width();
      Array<T> qref(Shape{ex.ref_steps, w});
      for (std::size_t s = 0; s < ex.ref_steps; ++s) {
        auto v = rvq_decode(ex.codes[s], books);
        std::copy(v.begin(), v.end(), qref.data() + s * w);
      }
      q = concat_rows(std::vector<Var<T>>{tape.constant(std::move(qref)), q});
    }
    Var<T> recon = upsample_refine(bridge.config(), bridge.dense_layout(), bp, q);
    recon = slice_rows(recon, ex.ref_frames, ex.target.rows());
    out.features = mse(recon, tape.constant(ex.target.template cast<T>()));
    out.total = add(out.token, out.features);
  } else {
    out.features = tape.constant(Array<T>::scalar(T{0}));
    out.total = out.token;
  }
  return out;
}

// ------------------------------------------------------------------ token decoders

// Turns sparse tokens back into dense frames for the AR inference loop.
class TokenDecoder {
 public:
  virtual ~TokenDecoder() = default;
  virtual std::size_t frames_per_token() const = 0;
  // Frames for every token, [n * frames_per_token x D].
  virtual Array<float> decode_all(const std::vector<SparseToken>& tokens) const = 0;
  // Frames for the newest token of `history`.
  virtual Array<float> decode_last(std::span<const SparseToken> history) const = 0;
};

// The frozen DenseBridge: code predictor, RVQ decode, upsampler.
class BridgeDecoder : public TokenDecoder {
 public:
  explicit BridgeDecoder(const BridgeModel<float>& bridge) : bridge_(bridge) {}
  std::size_t frames_per_token() const override { return BridgeConfig::rate_factor; }
  Array<float> decode_all(const std::vector<SparseToken>& tokens) const override { return bridge_.decode(tokens); }
  Array<float> decode_last(std::span<const SparseToken> history) const override { return bridge_.decode_step(history); }

 private:
  const BridgeModel<float>& bridge_;
};

// Tokens-only ablation decoder: each token maps to the mean training frame
// observed under that token, repeated for the token's duration. Tokens never
// seen in training fall back to the overall mean frame.
class RepeatDecoder : public TokenDecoder {
 public:
  RepeatDecoder() = default;
  explicit RepeatDecoder(const std::vector<ArExample>& examples) {
    const std::size_t r = BridgeConfig::rate_factor;
    std::map<std::vector<int>, std::pair<std::vector<double>, std::size_t>> acc;
    std::vector<double> total;
    std::size_t total_n = 0;
    for (const auto& ex : examples) {
      const std::size_t d = ex.target.cols();
      if (total.empty()) total.assign(d, 0.0);
      for (std::size_t s = ex.ref_steps; s < ex.steps(); ++s) {
        auto& [sum, n] = acc[select_codes(ex.codes[s]).first_level];
        if (sum.empty()) sum.assign(d, 0.0);
        const std::size_t begin = (s - ex.ref_steps) * r;
        const std::size_t end = std::min(begin + r, ex.target.rows());
        for (std::size_t t = begin; t < end; ++t)
          for (std::size_t j = 0; j < d; ++j) {
            sum[j] += ex.target.at(t, j);
            total[j] += ex.target.at(t, j);
          }
        n += end - begin;
        total_n += end - begin;
      }
    }
    require(total_n > 0, ErrorCode::invalid_argument, "repeat decoder needs training frames");
    for (auto& [key, v] : acc) {
      std::vector<float> m(v.first.size());
      for (std::size_t j = 0; j < m.size(); ++j) m[j] = static_cast<float>(v.first[j] / static_cast<double>(v.second));
      table_.emplace(key, std::move(m));
    }
    fallback_.resize(total.size());
    for (std::size_t j = 0; j < total.size(); ++j) fallback_[j] = static_cast<float>(total[j] / static_cast<double>(total_n));
  }

  std::size_t frames_per_token() const override { return BridgeConfig::rate_factor; }
  std::size_t known_tokens() const { return table_.size(); }

  Array<float> decode_all(const std::vector<SparseToken>& tokens) const override {
    const std::size_t r = frames_per_token(), d = fallback_.size();
    Array<float> out(Shape{tokens.size() * r, d});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto& m = lookup(tokens[i]);
      for (std::size_t t = 0; t < r; ++t) std::copy(m.begin(), m.end(), out.data() + (i * r + t) * d);
    }
    return out;
  }

  Array<float> decode_last(std::span<const SparseToken> history) const override {
    require(!history.empty(), ErrorCode::invalid_argument, "decode_last needs at least one token");
    return decode_all({history.back()});
  }

 private:
  const std::vector<float>& lookup(const SparseToken& tok) const {
    auto it = table_.find(tok.first_level);
    return it == table_.end() ? fallback_ : it->second;
  }

  std::map<std::vector<int>, std::vector<float>> table_;
  std::vector<float> fallback_;
};

// Per-frame baseline decoder: one frame per token, read straight off the
// level-1 codewords (the 3D-wide codeword sum folded to D by averaging its
// three D-wide slices). Cheap on purpose: the baseline is used for timing.
class CodewordReadout : public TokenDecoder {
 public:
  explicit CodewordReadout(const BridgeModel<float>& bridge) : bridge_(bridge) {}
  std::size_t frames_per_token() const override { return 1; }

  Array<float> decode_all(const std::vector<SparseToken>& tokens) const override {
    const std::size_t d = bridge_.config().feature_dim;
    Array<float> out(Shape{tokens.size(), d});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      auto row = readout(tokens[i]);
      std::copy(row.begin(), row.end(), out.data() + i * d);
    }
    return out;
  }

  Array<float> decode_last(std::span<const SparseToken> history) const override {
    require(!history.empty(), ErrorCode::invalid_argument, "decode_last needs at least one token");
    return decode_all({history.back()});
  }

 private:
  std::vector<float> readout(const SparseToken& tok) const {
    const auto& books = bridge_.codebooks();
    const std::size_t d = bridge_.config().feature_dim, dg = books.group_dim();
    std::vector<float> q(books.width(), 0.0f);
    for (std::size_t g = 0; g < books.groups(); ++g) {
      const auto code = static_cast<std::size_t>(tok.first_level.at(g));
      require(code < books.size(), ErrorCode::out_of_range, "token index outside codebook");
      std::copy_n(books.at(g, 0).vectors.data() + code * dg, dg, q.data() + g * dg);
    }
    std::vector<float> out(d, 0.0f);
    const std::size_t slices = books.width() / d;
    for (std::size_t s = 0; s < slices; ++s)
      for (std::size_t j = 0; j < d; ++j) out[j] += q[s * d + j] / static_cast<float>(slices);
    return out;
  }

  const BridgeModel<float>& bridge_;
};

// ------------------------------------------------------------------ evaluation

struct TeacherForcedResult {
  std::size_t correct = 0;
  std::size_t scored = 0;
  std::vector<SparseToken> predicted;  // argmax target tokens (EOS class ignored)
  double feature_mse = 0.0;            // decoded predictions vs ground truth
};

// Teacher-forced argmax predictions for the target steps, decoded with the
// reference tokens as left context. This is the discrete (evaluation-only)
// counterpart of the soft feature loss.
inline TeacherForcedResult teacher_forced(const ArModel& model, const ArExample& ex, const TokenDecoder& decoder) {
  Tape<float> tape;
  auto p = model.params().bind(tape, false);
  auto fwd = ar_forward(model, p, ex.prefix, ex.input);
  const std::size_t k = model.shape().codebook_size, groups = model.shape().groups;
  TeacherForcedResult res;
  for (std::size_t s = ex.ref_steps; s <= ex.steps(); ++s) {
    const std::size_t row = ex.position(s);
    SparseToken tok;
    bool ok = true;
    for (std::size_t g = 0; g < groups; ++g) {
      const auto& lv = fwd.logits[g].value();
      const float* r = lv.data() + row * lv.cols();
      const int full = static_cast<int>(std::max_element(r, r + lv.cols()) - r);
      const int code = static_cast<int>(std::max_element(r, r + k) - r);
      tok.first_level.push_back(code);
      if (s == ex.steps()) {
        if (g == 0) ok = full == model.eos_class();
      } else {
        ok = ok && full == ex.codes[s].at(g, 0);
      }
    }
    res.correct += ok ? 1 : 0;
    ++res.scored;
    if (s < ex.steps()) res.predicted.push_back(std::move(tok));
  }
  auto history = ex.tokens();
  history.resize(ex.ref_steps);
  history.insert(history.end(), res.predicted.begin(), res.predicted.end());
  Array<float> frames = decoder.decode_all(history);
  double err = 0.0;
  const std::size_t d = ex.target.cols(), offset = ex.ref_frames * d;
  for (std::size_t i = 0; i < ex.target.size(); ++i) {
    const double diff = static_cast<double>(frames[offset + i]) - ex.target[i];
    err += diff * diff;
  }
  res.feature_mse = err / static_cast<double>(ex.target.size());
  return res;
}

// ------------------------------------------------------------------ training

struct ArStepStats {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double token = 0, features = 0, total = 0;
  std::vector<double> per_head;
  double accuracy = 0;
  double grad_norm = 0;
  double lr = 0;
};

// Minibatch AdamW on the AR parameters. The bridge is only read.
class ArTrainer {
 public:
  ArTrainer(ArModel& model, const BridgeModel<float>& bridge, std::vector<ArExample> examples, AdamWConfig opt,
            std::size_t batch_size, std::uint64_t seed)
      : model_(model), bridge_(bridge), examples_(std::move(examples)), opt_(model.params(), opt), rng_(seed) {
    require(!examples_.empty(), ErrorCode::invalid_argument, "AR training needs at least one example");
    batch_size_ = std::clamp<std::size_t>(batch_size, 1, examples_.size());
    order_.resize(examples_.size());
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  const std::vector<ArExample>& examples() const noexcept { return examples_; }
  std::size_t batch_size() const noexcept { return batch_size_; }
  std::uint64_t steps_done() const noexcept { return step_; }
  std::uint64_t epoch() const noexcept { return epoch_; }
  AdamW& optimizer() noexcept { return opt_; }
  const AdamW& optimizer() const noexcept { return opt_; }

  TrainingProgress progress() const {
    TrainingProgress p{step_, epoch_, cursor_, {}, rng_state(rng_)};
    p.order.assign(order_.begin(), order_.end());
    return p;
  }

  void restore(const TrainingProgress& p) {
    require(p.order.size() == order_.size() && p.cursor <= order_.size(), ErrorCode::shape_mismatch,
            "saved progress covers " + std::to_string(p.order.size()) + " items, trainer has " +
                std::to_string(order_.size()));
    for (auto i : p.order)
      require(i < order_.size(), ErrorCode::out_of_range, "saved batch order index " + std::to_string(i) + " out of range");
    step_ = p.step;
    epoch_ = p.epoch;
    cursor_ = static_cast<std::size_t>(p.cursor);
    order_.assign(p.order.begin(), p.order.end());
    restore_rng(rng_, p.rng);
  }
  std::size_t cursor() const noexcept { return cursor_; }

  ArStepStats step() {
    std::vector<std::size_t> batch;
    while (batch.size() < batch_size_) {
      if (cursor_ == order_.size()) {
        ++epoch_;
        cursor_ = 0;
        std::shuffle(order_.begin(), order_.end(), rng_);
      }
      batch.push_back(order_[cursor_++]);
    }
    Tape<float> tape;
    auto p = model_.params().bind(tape, true);
    auto bp = bridge_.params().bind(tape, false);
    ArStepStats s;
    s.per_head.assign(model_.shape().groups, 0.0);
    const float inv_b = 1.0f / static_cast<float>(batch.size());
    std::vector<Var<float>> totals;
    std::size_t correct = 0, scored = 0;
    for (std::size_t idx : batch) {
      auto l = ar_loss(model_, p, bridge_, bp, examples_[idx]);
      totals.push_back(scale(l.total, inv_b));
      s.token += l.token.value().item() * inv_b;
      s.features += l.features.value().item() * inv_b;
      s.total += l.total.value().item() * inv_b;
      for (std::size_t g = 0; g < s.per_head.size(); ++g) s.per_head[g] += l.per_head[g] * inv_b;
      correct += l.correct;
      scored += l.scored;
    }
    Var<float> loss = totals[0];
    for (std::size_t i = 1; i < totals.size(); ++i) loss = add(loss, totals[i]);
    require(std::isfinite(loss.value().item()), ErrorCode::non_finite,
            "AR loss became non-finite at step " + std::to_string(step_));
    tape.backward(loss);
    std::vector<const Array<float>*> grads;
    for (const auto& v : p) grads.push_back(tape.grad(v));
    s.lr = learning_rate_at_epoch(opt_.config(), epoch_);
    s.grad_norm = opt_.step(model_.params(), grads, s.lr);
    s.accuracy = scored ? static_cast<double>(correct) / static_cast<double>(scored) : 0.0;
    s.step = ++step_;
    s.epoch = epoch_;
    return s;
  }

 private:
  ArModel& model_;
  const BridgeModel<float>& bridge_;
  std::vector<ArExample> examples_;
  AdamW opt_;
  std::mt19937_64 rng_;
  std::size_t batch_size_ = 1;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::uint64_t step_ = 0;
  std::uint64_t epoch_ = 0;
};

// ------------------------------------------------------------------ inference

struct TranscriptRecord {
  std::size_t step = 0;
  SparseToken token;
  std::vector<double> head_entropies;
  double ms_elapsed = 0.0;
};

struct ArSession {
  TextTokens text;
  Array<float> features;                     // reference prompt, then generated frames
  std::vector<SparseToken> reference_tokens;  // decoder context (and AR input in tokens mode)
  std::size_t reference_frames = 0;
  std::size_t step = 0;
  std::size_t max_steps = 0;
  bool finished = false;
  std::vector<SparseToken> tokens;  // emitted, EOS excluded
  std::size_t forward_passes = 0;   // one per predicted token (EOS included)
  std::vector<TranscriptRecord> transcript;

  Array<float> generated() const {
    const std::size_t d = features.cols(), n = features.rows() - reference_frames;
    Array<float> out(Shape{n, d});
    std::copy_n(features.data() + reference_frames * d, n * d, out.data());
    return out;
  }
};

// The reference prompt is cut to a whole number of steps.
inline ArSession make_session(TextTokens text, const Array<float>& reference, std::size_t frames_per_step,
                              std::size_t max_steps, std::vector<SparseToken> reference_tokens = {}) {
  require(max_steps > 0, ErrorCode::invalid_argument, "max_steps must be positive");
  require(reference.rank() == 2 && reference.cols() > 0, ErrorCode::shape_mismatch,
          "reference features must be [T x D], got " + shape_str(reference.shape()));
  ArSession s;
  s.text = std::move(text);
  s.reference_frames = reference.rows() / frames_per_step * frames_per_step;
  s.features = leading_frames(reference, s.reference_frames);
  s.reference_tokens = std::move(reference_tokens);
  s.max_steps = max_steps;
  return s;
}

inline ArSession make_bridged_session(TextTokens text, const Array<float>& reference, const BridgeModel<float>& bridge,
                                      std::size_t max_steps) {
  const std::size_t r = BridgeConfig::rate_factor;
  const Array<float> ref = leading_frames(reference, reference.rows() / r * r);
  std::vector<SparseToken> toks;
  if (ref.rows() > 0) toks = bridge.encode(ref).tokens();
  return make_session(std::move(text), ref, r, max_steps, std::move(toks));
}

struct GenerateOptions {
  bool allow_eos = true;
  bool record_transcript = true;
  // Replace the streamed frames with one decode of the complete token
  // sequence once generation stops. Streamed frames are decoded without
  // right context; the final pass gives every token its full context.
  bool final_decode = true;
};

inline double entropy_of_logits(const std::vector<float>& logits) {
  const float mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (float v : logits) z += std::exp(static_cast<double>(v - mx));
  double h = 0.0;
  for (float v : logits) {
    const double p = std::exp(static_cast<double>(v - mx)) / z;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

// Greedy closed-loop generation. Every predicted token is decoded to frames
// and the frames (or, for a tokens-input model, the token) are fed back as
// the next step. Returns the generated frames only.
inline Array<float> generate(ArSession& session, const ArModel& model, const TokenDecoder& decoder,
                             const GenerateOptions& opt = {}) {
  require(session.max_steps > 0, ErrorCode::invalid_argument, "max_steps must be positive");
  require(!session.finished, ErrorCode::invalid_argument, "session already finished");
  const auto& cfg = model.config();
  const std::size_t fps = cfg.frames_per_step, d = model.shape().feature_dim;
  require(decoder.frames_per_token() == fps, ErrorCode::shape_mismatch,
          "decoder yields " + std::to_string(decoder.frames_per_token()) + " frames per token, model steps " +
              std::to_string(fps));
  require(session.features.cols() == d, ErrorCode::dimension_mismatch,
          "session features have D=" + std::to_string(session.features.cols()) + ", model expects " + std::to_string(d));
  const std::size_t k = model.shape().codebook_size;

  ArDecoder dec(model);
  std::vector<std::vector<float>> logits;
  for (int id : session.text.prefix()) logits = dec.push_text(id);
  if (cfg.input == ArInput::features) {
    for (std::size_t t = 0; t + fps <= session.reference_frames; t += fps)
      logits = dec.push_group(std::span<const float>(session.features.data() + t * d, fps * d));
  } else {
    for (const auto& tok : session.reference_tokens) logits = dec.push_token(tok);
  }

  std::vector<SparseToken> history = session.reference_tokens;
  std::vector<float> grown(session.features.values().begin(), session.features.values().end());
  auto clock = std::chrono::steady_clock::now();
  while (!session.finished) {
    ++session.forward_passes;
    SparseToken tok;
    std::vector<double> entropies;
    bool eos = false;
    for (std::size_t g = 0; g < logits.size(); ++g) {
      const auto& row = logits[g];
      if (opt.record_transcript) entropies.push_back(entropy_of_logits(row));
      const int full = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (g == 0 && full == model.eos_class() && opt.allow_eos) eos = true;
      tok.first_level.push_back(static_cast<int>(std::max_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k)) - row.begin()));
    }
    auto record = [&](std::size_t step, SparseToken t) {
      if (!opt.record_transcript) return;
      const auto now = std::chrono::steady_clock::now();
      session.transcript.push_back(
          {step, std::move(t), entropies, std::chrono::duration<double, std::milli>(now - clock).count()});
      clock = now;
    };
    if (eos) {
      record(session.step + 1, SparseToken::end_of_speech());
      session.finished = true;
      break;
    }
    history.push_back(tok);
    Array<float> frames = decoder.decode_last(history);
    require(frames.rows() == fps && frames.cols() == d, ErrorCode::shape_mismatch,
            "decoder returned " + shape_str(frames.shape()));
    grown.insert(grown.end(), frames.values().begin(), frames.values().end());
    session.tokens.push_back(tok);
    ++session.step;
    record(session.step, tok);
    if (session.step == session.max_steps) {
      session.finished = true;
      break;
    }
    if (cfg.input == ArInput::features)
      logits = dec.push_group(std::span<const float>(frames.data(), fps * d));
    else
      logits = dec.push_token(tok);
  }
  if (opt.final_decode && !session.tokens.empty()) {
    Array<float> full = decoder.decode_all(history);
    const std::size_t offset = session.reference_tokens.size() * fps * d;
    std::copy(full.data() + offset, full.data() + full.size(), grown.begin() + static_cast<std::ptrdiff_t>(session.reference_frames * d));
  }
  const std::size_t rows = grown.size() / d;
  session.features = Array<float>(Shape{rows, d}, std::move(grown));
  return session.generated();
}

}  // namespace bridgetts
