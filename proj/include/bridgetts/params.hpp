#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "bridgetts/hash.hpp"
#include "bridgetts/tape.hpp"

namespace bridgetts {

// Ordered, named collection of trainable arrays. Models refer to entries by
// the index returned from add().
template <typename T>
class ParameterSet {
 public:
  std::size_t add(std::string name, Array<T> value) {
    require(!find(name), ErrorCode::invalid_argument, "duplicate parameter " + name);
    entries_.push_back({std::move(name), std::move(value)});
    return entries_.size() - 1;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_.at(i).name; }
  Array<T>& operator[](std::size_t i) { return entries_.at(i).value; }
  const Array<T>& operator[](std::size_t i) const { return entries_.at(i).value; }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name == name) return i;
    return std::nullopt;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  std::vector<Var<T>> bind(Tape<T>& tape, bool requires_grad) const {
    std::vector<Var<T>> vars;
    vars.reserve(entries_.size());
    for (const auto& e : entries_) vars.push_back(tape.leaf(e.value, requires_grad));
    return vars;
  }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
    return out;
  }

  std::uint64_t checksum() const {
    Fnv1a h;
    for (const auto& e : entries_) {
      h.update(e.name);
      h.update(e.value.data(), e.value.size() * sizeof(T));
    }
    return h.digest();
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a.entries_[i].name != b.entries_[i].name || !bit_identical(a.entries_[i].value, b.entries_[i].value))
        return false;
    return true;
  }

 private:
  struct Entry {
    std::string name;
    Array<T> value;
  };
  std::vector<Entry> entries_;
};

template <typename T>
Array<T> random_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  Array<T> a(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : a.values()) v = static_cast<T>(dist(rng));
  return a;
}

}  // namespace bridgetts
