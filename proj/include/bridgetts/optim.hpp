#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bridgetts/params.hpp"

namespace bridgetts {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  // Multiplicative learning-rate decay applied once per epoch.
  double epoch_decay = std::pow(0.999, 1.0 / 8.0);
  // Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;
};

// Where a trainer stands in its data stream; saved in checkpoints so a run
// resumes on the same batch order.
struct TrainingProgress {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::uint64_t cursor = 0;
  std::vector<std::uint32_t> order;
  std::string rng;  // std::mt19937_64 text state
};

inline std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

inline void restore_rng(std::mt19937_64& rng, const std::string& state) {
  std::istringstream in(state);
  in >> rng;
  require(!in.fail(), ErrorCode::invalid_argument, "corrupt random generator state");
}

inline double learning_rate_at_epoch(const AdamWConfig& cfg, std::uint64_t epoch) {
  return cfg.lr * std::pow(cfg.epoch_decay, static_cast<double>(epoch));
}

// Decoupled weight decay Adam. Weight decay only touches rank >= 2 arrays
// (matrices, kernels, embedding tables); biases and norm gains are exempt.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParameterSet<float>& params, AdamWConfig cfg) : cfg_(cfg) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_.emplace_back(params[i].shape());
      v_.emplace_back(params[i].shape());
    }
  }

  const AdamWConfig& config() const noexcept { return cfg_; }
  std::uint64_t steps() const noexcept { return step_; }
  const std::vector<Array<float>>& first_moments() const noexcept { return m_; }
  const std::vector<Array<float>>& second_moments() const noexcept { return v_; }

  void restore(std::vector<Array<float>> m, std::vector<Array<float>> v, std::uint64_t step) {
    require(m.size() == m_.size() && v.size() == v_.size(), ErrorCode::shape_mismatch,
            "optimizer state does not match parameter count");
    for (std::size_t i = 0; i < m.size(); ++i)
      require(m[i].shape() == m_[i].shape() && v[i].shape() == v_[i].shape(), ErrorCode::shape_mismatch,
              "optimizer state shape mismatch at entry " + std::to_string(i));
    m_ = std::move(m);
    v_ = std::move(v);
    step_ = step;
  }

  // grads[i] may be null (no gradient reached that parameter).
  // Returns the pre-clip global gradient norm.
  double step(ParameterSet<float>& params, const std::vector<const Array<float>*>& grads, double lr) {
    require(grads.size() == params.size(), ErrorCode::shape_mismatch, "gradient count != parameter count");
    double sq = 0.0;
    for (const auto* g : grads)
      if (g)
        for (float v : g->values()) sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(sq);
    const double clip = (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;

    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Array<float>& p = params[i];
      const bool decay = p.rank() >= 2;
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double g = grads[i] ? static_cast<double>((*grads[i])[j]) * clip : 0.0;
        const double m = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
        const double v = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
        m_[i][j] = static_cast<float>(m);
        v_[i][j] = static_cast<float>(v);
        double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        if (decay) update += cfg_.weight_decay * p[j];
        p[j] = static_cast<float>(p[j] - lr * update);
      }
    }
    return norm;
  }

 private:
  AdamWConfig cfg_;
  std::vector<Array<float>> m_, v_;
  std::uint64_t step_ = 0;
};

}  // namespace bridgetts
