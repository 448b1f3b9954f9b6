#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bridgetts/array.hpp"

namespace bridgetts {

// G x L grid of codebook indices for one compressed frame; codes[g * L + l].
struct CodeMatrix {
  std::size_t groups = 0;
  std::size_t levels = 0;
  std::vector<std::int32_t> codes;

  CodeMatrix() = default;
  CodeMatrix(std::size_t g, std::size_t l) : groups(g), levels(l), codes(g * l, 0) {}

  std::int32_t& at(std::size_t g, std::size_t l) { return codes[g * levels + l]; }
  std::int32_t at(std::size_t g, std::size_t l) const { return codes[g * levels + l]; }

  friend bool operator==(const CodeMatrix&, const CodeMatrix&) = default;
};

// First-level index per group, or the end-of-speech sentinel.
struct SparseToken {
  std::vector<std::int32_t> first_level;
  bool eos = false;

  static SparseToken end_of_speech() { return SparseToken{{}, true}; }
  friend bool operator==(const SparseToken&, const SparseToken&) = default;
};

inline SparseToken select_codes(const CodeMatrix& cm) {
  SparseToken tok;
  tok.first_level.resize(cm.groups);
  for (std::size_t g = 0; g < cm.groups; ++g) tok.first_level[g] = cm.at(g, 0);
  return tok;
}

// One RVQ level of one group. Row 0 of `vectors` is the zero vector and is
// never updated.
template <typename T>
struct Codebook {
  Array<T> vectors;          // [K x Dg]
  std::vector<T> ema_counts;  // K
  Array<T> ema_sums;         // [K x Dg]

  Codebook() = default;
  Codebook(std::size_t k, std::size_t dg) : vectors(Shape{k, dg}), ema_counts(k, T{1}), ema_sums(Shape{k, dg}) {}

  std::size_t size() const { return vectors.rows(); }
  std::size_t dim() const { return vectors.cols(); }
};

template <typename T>
class Codebooks {
 public:
  Codebooks() = default;
  Codebooks(std::size_t groups, std::size_t levels, std::size_t size, std::size_t group_dim)
      : groups_(groups), levels_(levels), size_(size), group_dim_(group_dim) {
    require(groups >= 1 && levels >= 1 && size >= 2 && group_dim >= 1, ErrorCode::invalid_argument,
            "codebooks need G, L >= 1, K >= 2, Dg >= 1");
    books_.assign(groups * levels, Codebook<T>(size, group_dim));
  }

  std::size_t groups() const noexcept { return groups_; }
  std::size_t levels() const noexcept { return levels_; }
  std::size_t size() const noexcept { return size_; }
  std::size_t group_dim() const noexcept { return group_dim_; }
  std::size_t width() const noexcept { return groups_ * group_dim_; }

  Codebook<T>& at(std::size_t g, std::size_t l) { return books_.at(g * levels_ + l); }
  const Codebook<T>& at(std::size_t g, std::size_t l) const { return books_.at(g * levels_ + l); }

  // True when every codeword is zero (nothing learned yet).
  bool untrained() const {
    for (const auto& b : books_)
      for (T v : b.vectors.values())
        if (v != T{0}) return false;
    return true;
  }

  template <typename U>
  Codebooks<U> cast() const {
    Codebooks<U> out(groups_, levels_, size_, group_dim_);
    for (std::size_t i = 0; i < books_.size(); ++i) {
      auto& dst = out.at(i / levels_, i % levels_);
      dst.vectors = books_[i].vectors.template cast<U>();
      dst.ema_sums = books_[i].ema_sums.template cast<U>();
      dst.ema_counts.assign(books_[i].ema_counts.begin(), books_[i].ema_counts.end());
    }
    return out;
  }

  friend bool operator==(const Codebooks& a, const Codebooks& b) {
    if (a.groups_ != b.groups_ || a.levels_ != b.levels_ || a.size_ != b.size_ || a.group_dim_ != b.group_dim_)
      return false;
    for (std::size_t i = 0; i < a.books_.size(); ++i)
      if (!bit_identical(a.books_[i].vectors, b.books_[i].vectors) ||
          !bit_identical(a.books_[i].ema_sums, b.books_[i].ema_sums) ||
          a.books_[i].ema_counts != b.books_[i].ema_counts)
        return false;
    return true;
  }

 private:
  std::size_t groups_ = 0, levels_ = 0, size_ = 0, group_dim_ = 0;
  std::vector<Codebook<T>> books_;
};

template <typename T>
struct RvqEncoding {
  CodeMatrix codes;
  std::vector<T> quantized;        // width G*Dg, sum of chosen codewords (level order 1..L)
  std::vector<T> residual_sq;      // G x (L+1): squared residual norm before level 1, after each level
  std::vector<T> level_inputs;     // G x L x Dg: residual fed to each level
};

// Index of the nearest codeword to r; ties resolve to the lowest index.
template <typename T>
std::pair<std::int32_t, T> nearest_codeword(std::span<const T> r, const Array<T>& vectors) {
  const std::size_t k = vectors.rows(), d = vectors.cols();
  std::int32_t best = 0;
  T best_dist = std::numeric_limits<T>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    const T* cv = vectors.data() + c * d;
    T dist{0};
    for (std::size_t j = 0; j < d; ++j) {
      const T diff = r[j] - cv[j];
      dist += diff * diff;
    }
    if (dist < best_dist) {
      best_dist = dist;
      best = static_cast<std::int32_t>(c);
    }
  }
  return {best, best_dist};
}

// Hierarchical split-group RVQ of one frame.
template <typename T>
RvqEncoding<T> rvq_encode(std::span<const T> frame, const Codebooks<T>& books) {
  const std::size_t g_count = books.groups(), levels = books.levels(), dg = books.group_dim();
  require(g_count > 0 && frame.size() % g_count == 0, ErrorCode::shape_mismatch,
          "frame width " + std::to_string(frame.size()) + " not divisible by " + std::to_string(g_count) + " groups");
  require(frame.size() == books.width(), ErrorCode::shape_mismatch,
          "frame width " + std::to_string(frame.size()) + " vs codebook width " + std::to_string(books.width()));
  RvqEncoding<T> enc;
  enc.codes = CodeMatrix(g_count, levels);
  enc.quantized.assign(frame.size(), T{0});
  enc.residual_sq.assign(g_count * (levels + 1), T{0});
  enc.level_inputs.assign(g_count * levels * dg, T{0});
  std::vector<T> r(dg);
  for (std::size_t g = 0; g < g_count; ++g) {
    std::copy_n(frame.data() + g * dg, dg, r.begin());
    T norm{0};
    for (T v : r) norm += v * v;
    enc.residual_sq[g * (levels + 1)] = norm;
    for (std::size_t l = 0; l < levels; ++l) {
      std::copy(r.begin(), r.end(), enc.level_inputs.begin() + (g * levels + l) * dg);
      const auto& vecs = books.at(g, l).vectors;
      auto [code, dist] = nearest_codeword<T>(r, vecs);
      enc.codes.at(g, l) = code;
      const T* cv = vecs.data() + static_cast<std::size_t>(code) * dg;
      for (std::size_t j = 0; j < dg; ++j) {
        r[j] -= cv[j];
        enc.quantized[g * dg + j] += cv[j];
      }
      enc.residual_sq[g * (levels + 1) + l + 1] = dist;
    }
  }
  return enc;
}

// Sum of codewords per group in level order, groups concatenated.
template <typename T>
std::vector<T> rvq_decode(const CodeMatrix& codes, const Codebooks<T>& books) {
  require(codes.groups == books.groups() && codes.levels == books.levels(), ErrorCode::shape_mismatch,
          "code matrix " + std::to_string(codes.groups) + "x" + std::to_string(codes.levels) + " vs codebooks " +
              std::to_string(books.groups()) + "x" + std::to_string(books.levels()));
  const std::size_t dg = books.group_dim();
  std::vector<T> out(books.width(), T{0});
  for (std::size_t g = 0; g < codes.groups; ++g)
    for (std::size_t l = 0; l < codes.levels; ++l) {
      const auto code = codes.at(g, l);
      require(code >= 0 && static_cast<std::size_t>(code) < books.size(), ErrorCode::out_of_range,
              "code " + std::to_string(code) + " outside codebook of size " + std::to_string(books.size()));
      const T* cv = books.at(g, l).vectors.data() + static_cast<std::size_t>(code) * dg;
      for (std::size_t j = 0; j < dg; ++j) out[g * dg + j] += cv[j];
    }
  return out;
}

// Accumulated assignments for one EMA update: per (group, level) code counts,
// per-code residual sums, and the raw residuals kept as a reseeding pool.
template <typename T>
class RvqBatchStats {
 public:
  explicit RvqBatchStats(const Codebooks<T>& books)
      : groups_(books.groups()), levels_(books.levels()), size_(books.size()), dg_(books.group_dim()),
        counts_(groups_ * levels_ * size_, T{0}), sums_(groups_ * levels_ * size_ * dg_, T{0}),
        pool_(groups_ * levels_) {}

  void add(const RvqEncoding<T>& enc) {
    for (std::size_t g = 0; g < groups_; ++g)
      for (std::size_t l = 0; l < levels_; ++l) {
        const std::size_t code = static_cast<std::size_t>(enc.codes.at(g, l));
        const T* r = enc.level_inputs.data() + (g * levels_ + l) * dg_;
        const std::size_t slot = (g * levels_ + l) * size_ + code;
        counts_[slot] += T{1};
        for (std::size_t j = 0; j < dg_; ++j) sums_[slot * dg_ + j] += r[j];
        auto& pool = pool_[g * levels_ + l];
        pool.insert(pool.end(), r, r + dg_);
      }
    ++frames_;
  }

  std::size_t frames() const noexcept { return frames_; }
  T count(std::size_t g, std::size_t l, std::size_t k) const { return counts_[(g * levels_ + l) * size_ + k]; }
  const T* sum(std::size_t g, std::size_t l, std::size_t k) const {
    return sums_.data() + ((g * levels_ + l) * size_ + k) * dg_;
  }
  const std::vector<T>& pool(std::size_t g, std::size_t l) const { return pool_[g * levels_ + l]; }

 private:
  std::size_t groups_, levels_, size_, dg_;
  std::vector<T> counts_, sums_;
  std::vector<std::vector<T>> pool_;
  std::size_t frames_ = 0;
};

// EMA k-means step. Codewords that received assignments move to
// ema_sums / ema_counts; all counts decay. Index 0 is never touched.
template <typename T>
void codebook_update(Codebooks<T>& books, const RvqBatchStats<T>& stats, T decay = static_cast<T>(0.99)) {
  if (stats.frames() == 0) return;
  const std::size_t dg = books.group_dim();
  for (std::size_t g = 0; g < books.groups(); ++g)
    for (std::size_t l = 0; l < books.levels(); ++l) {
      auto& cb = books.at(g, l);
      for (std::size_t k = 1; k < books.size(); ++k) {
        const T n = stats.count(g, l, k);
        cb.ema_counts[k] = decay * cb.ema_counts[k] + (T{1} - decay) * n;
        const T* s = stats.sum(g, l, k);
        for (std::size_t j = 0; j < dg; ++j)
          cb.ema_sums.at(k, j) = decay * cb.ema_sums.at(k, j) + (T{1} - decay) * s[j];
        if (n > T{0} && cb.ema_counts[k] > T{0})
          for (std::size_t j = 0; j < dg; ++j) cb.vectors.at(k, j) = cb.ema_sums.at(k, j) / cb.ema_counts[k];
      }
    }
}

// Reseed codewords whose EMA count fell below `threshold` from random pooled
// residuals. Returns how many codewords were replaced.
template <typename T>
std::size_t reseed_dead_codes(Codebooks<T>& books, const RvqBatchStats<T>& stats, std::mt19937_64& rng,
                              T threshold = static_cast<T>(1e-3)) {
  std::size_t replaced = 0;
  const std::size_t dg = books.group_dim();
  for (std::size_t g = 0; g < books.groups(); ++g)
    for (std::size_t l = 0; l < books.levels(); ++l) {
      const auto& pool = stats.pool(g, l);
      const std::size_t n = pool.size() / dg;
      if (n == 0) continue;
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      auto& cb = books.at(g, l);
      for (std::size_t k = 1; k < books.size(); ++k) {
        if (cb.ema_counts[k] >= threshold) continue;
        const T* src = pool.data() + pick(rng) * dg;
        for (std::size_t j = 0; j < dg; ++j) {
          cb.vectors.at(k, j) = src[j];
          cb.ema_sums.at(k, j) = src[j];
        }
        cb.ema_counts[k] = T{1};
        ++replaced;
      }
    }
  return replaced;
}

// Sets every codeword except index 0 to a random pooled vector; used once at
// the start of training so codebooks begin on the data manifold.
template <typename T>
void seed_codebook_level(Codebook<T>& cb, const std::vector<T>& pool, std::size_t dg, std::mt19937_64& rng) {
  const std::size_t n = pool.size() / dg;
  if (n == 0) return;
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  for (std::size_t k = 1; k < cb.size(); ++k) {
    const T* src = pool.data() + pick(rng) * dg;
    for (std::size_t j = 0; j < dg; ++j) {
      cb.vectors.at(k, j) = src[j];
      cb.ema_sums.at(k, j) = src[j];
    }
    cb.ema_counts[k] = T{1};
  }
}

}  // namespace bridgetts
