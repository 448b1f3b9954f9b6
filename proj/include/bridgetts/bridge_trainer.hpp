#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "bridgetts/bridge.hpp"
#include "bridgetts/optim.hpp"

namespace bridgetts {

struct BridgeStepStats {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double code = 0, align = 0, recon = 0, feat = 0, total = 0;
  double grad_norm = 0;
  double lr = 0;
  std::size_t reseeded = 0;
};

// Minibatch trainer for the two bridging networks: AdamW on the network
// weights, EMA k-means on the codebooks, dead-code reseeding at epoch ends.
class BridgeTrainer {
 public:
  BridgeTrainer(BridgeModel<float>& model, std::vector<const Array<float>*> train, AdamWConfig opt,
                std::size_t batch_size, std::uint64_t seed)
      : model_(model), train_(std::move(train)), opt_(model.params(), opt), rng_(seed),
        batch_size_(std::clamp<std::size_t>(batch_size, 1, std::max<std::size_t>(1, train_.size()))) {
    require(!train_.empty(), ErrorCode::invalid_argument, "bridge training needs at least one utterance");
    order_.resize(train_.size());
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

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
    codebooks_seeded_ = true;
  }
  std::size_t cursor() const noexcept { return cursor_; }

  // Data-dependent codebook start: level l is seeded from the residuals the
  // first l levels leave on the training set's compressed frames.
  void seed_codebooks() {
    auto& books = model_.codebooks();
    const std::size_t g_count = books.groups(), levels = books.levels(), dg = books.group_dim();
    std::vector<std::vector<float>> residual(g_count);
    for (const auto* f0 : train_) {
      auto enc = model_.encode(*f0);
      for (std::size_t t = 0; t < enc.compressed.rows(); ++t)
        for (std::size_t g = 0; g < g_count; ++g) {
          const float* src = enc.compressed.data() + t * books.width() + g * dg;
          residual[g].insert(residual[g].end(), src, src + dg);
        }
    }
    for (std::size_t l = 0; l < levels; ++l)
      for (std::size_t g = 0; g < g_count; ++g) {
        auto& cb = books.at(g, l);
        seed_codebook_level(cb, residual[g], dg, rng_);
        for (std::size_t i = 0; i < residual[g].size() / dg; ++i) {
          std::span<float> r(residual[g].data() + i * dg, dg);
          auto [code, dist] = nearest_codeword<float>(r, cb.vectors);
          for (std::size_t j = 0; j < dg; ++j) r[j] -= cb.vectors.at(static_cast<std::size_t>(code), j);
        }
      }
    codebooks_seeded_ = true;
  }

  BridgeStepStats step() {
    if (!codebooks_seeded_) seed_codebooks();
    std::vector<std::size_t> batch;
    bool epoch_ended = false;
    while (batch.size() < batch_size_) {
      if (cursor_ == order_.size()) {
        next_epoch();
        epoch_ended = true;
      }
      batch.push_back(order_[cursor_++]);
    }

    Tape<float> tape;
    auto p = model_.params().bind(tape, true);
    RvqBatchStats<float> stats(model_.codebooks());
    std::vector<Var<float>> totals;
    BridgeStepStats s;
    const float inv_b = 1.0f / static_cast<float>(batch.size());
    for (std::size_t idx : batch) {
      QuantizationPlan<float> plan;
      auto losses = bridge_loss(model_, p, tape, *train_[idx], plan);
      for (const auto& f : plan.frames) stats.add(f);
      totals.push_back(scale(losses.total, inv_b));
      s.code += losses.code.value().item() * inv_b;
      s.align += losses.align.value().item() * inv_b;
      s.recon += losses.recon.value().item() * inv_b;
      s.feat += losses.feat.value().item() * inv_b;
      s.total += losses.total.value().item() * inv_b;
    }
    Var<float> loss = totals[0];
    for (std::size_t i = 1; i < totals.size(); ++i) loss = add(loss, totals[i]);
    require(std::isfinite(loss.value().item()), ErrorCode::non_finite,
            "bridge loss became non-finite at step " + std::to_string(step_));
    tape.backward(loss);

    std::vector<const Array<float>*> grads;
    for (const auto& v : p) grads.push_back(tape.grad(v));
    s.lr = learning_rate_at_epoch(opt_.config(), epoch_);
    s.grad_norm = opt_.step(model_.params(), grads, s.lr);
    codebook_update(model_.codebooks(), stats, static_cast<float>(model_.config().ema_decay));
    // Reseeding runs inside the step that closes the epoch, so no state
    // outside the checkpoint carries over to the next step.
    if (cursor_ == order_.size()) {
      next_epoch();
      epoch_ended = true;
    }
    if (epoch_ended)
      s.reseeded = reseed_dead_codes(model_.codebooks(), stats, rng_, static_cast<float>(model_.config().dead_code_threshold));
    s.step = ++step_;
    s.epoch = epoch_;
    return s;
  }

 private:
  void next_epoch() {
    ++epoch_;
    cursor_ = 0;
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  BridgeModel<float>& model_;
  std::vector<const Array<float>*> train_;
  AdamW opt_;
  std::mt19937_64 rng_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::uint64_t step_ = 0;
  std::uint64_t epoch_ = 0;
  bool codebooks_seeded_ = false;
};

}  // namespace bridgetts
