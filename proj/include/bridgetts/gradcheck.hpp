#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "bridgetts/tape.hpp"

namespace bridgetts {

// Central finite-difference verification of tape gradients, run in double
// precision. A gradient entry's error is |analytic - numeric| divided by
// max(|analytic|, |numeric|, denominator_floor).
struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  double denominator_floor = 1e-3;
  // Entries checked per leaf, evenly strided; 0 checks all of them.
  std::size_t max_entries_per_leaf = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool passed() const {
    for (const auto& e : entries)
      if (!e.passed) return false;
    return true;
  }
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
};

using LossBuilder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

inline GradCheckReport gradcheck(std::vector<std::pair<std::string, Array<double>>> leaves, const LossBuilder& build,
                                 const GradCheckOptions& opt = {}) {
  std::vector<Array<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (auto& [name, value] : leaves) vars.push_back(tape.leaf(value, true));
    Var<double> loss = build(tape, vars);
    tape.backward(loss);
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const Array<double>* g = tape.grad(vars[i]);
      analytic.push_back(g ? *g : Array<double>(leaves[i].second.shape()));
    }
  }
  auto evaluate = [&]() {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (auto& [name, value] : leaves) vars.push_back(tape.leaf(value, false));
    return build(tape, vars).value().item();
  };

  GradCheckReport report;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    GradCheckEntry entry;
    entry.name = leaves[i].first;
    Array<double>& x = leaves[i].second;
    const std::size_t stride =
        opt.max_entries_per_leaf && x.size() > opt.max_entries_per_leaf ? x.size() / opt.max_entries_per_leaf : 1;
    for (std::size_t j = 0; j < x.size(); j += stride) {
      const double saved = x[j];
      x[j] = saved + opt.step;
      const double up = evaluate();
      x[j] = saved - opt.step;
      const double down = evaluate();
      x[j] = saved;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double a = analytic[i][j];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), opt.denominator_floor});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
      ++entry.checked;
    }
    entry.passed = entry.max_rel_error < opt.tolerance;
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace bridgetts
