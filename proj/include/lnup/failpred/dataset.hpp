#pragma once

// Labeled datasets, stratified splitting/folding, and majority-class
// undersampling. Label 1 marks a lineup failure (the minority class).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lnup/core.hpp"

namespace lnup::failpred {

struct Dataset {
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  std::vector<std::string> ids;  // optional, parallel to x when present

  std::size_t size() const noexcept { return y.size(); }
  std::size_t dim() const noexcept { return x.empty() ? 0 : x.front().size(); }
  std::size_t positives() const {
    return static_cast<std::size_t>(std::count(y.begin(), y.end(), 1));
  }
  std::size_t negatives() const { return size() - positives(); }

  Dataset subset(const std::vector<std::size_t>& rows) const {
    Dataset out;
    out.x.reserve(rows.size());
    out.y.reserve(rows.size());
    for (auto r : rows) {
      out.x.push_back(x[r]);
      out.y.push_back(y[r]);
      if (!ids.empty()) out.ids.push_back(ids[r]);
    }
    return out;
  }

  void validate() const {
    if (x.size() != y.size()) throw data_error("dataset has " + std::to_string(x.size()) + " vectors but " +
                                               std::to_string(y.size()) + " labels");
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] != 0 && y[i] != 1) throw data_error("labels must be 0 or 1");
      if (x[i].size() != dim()) throw data_error("inconsistent feature dimension in dataset");
    }
  }
};

// Deterministic shuffle of 0..n-1 (Fisher-Yates over a counter-based stream).
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed, std::string_view stream) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  CounterRng rng(seed, stream);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.uniform(i)]);
  return idx;
}

inline std::array<std::vector<std::size_t>, 2> rows_by_class(const Dataset& data) {
  std::array<std::vector<std::size_t>, 2> out;
  for (std::size_t i = 0; i < data.size(); ++i) out[data.y[i] == 1 ? 1 : 0].push_back(i);
  return out;
}

struct SplitFractions {
  double train = 0.72;
  double val = 0.08;
  double test = 0.20;
};

struct Split {
  Dataset train, val, test;
};

// Split sizes: val and test are rounded from the total, train takes the
// remainder. The minority class is apportioned by rounding its own share;
// the majority class fills the rest, keeping each class within one sample of
// its proportional count in every split.
inline Split stratified_split(const Dataset& data, const SplitFractions& f, std::uint64_t seed) {
  data.validate();
  if (std::abs(f.train + f.val + f.test - 1.0) > 1e-9) throw usage_error("split fractions must sum to 1");
  if (f.train < 0 || f.val < 0 || f.test < 0) throw usage_error("split fractions must be non-negative");
  const auto classes = rows_by_class(data);
  for (int c = 0; c < 2; ++c)
    if (classes[c].size() < 3) throw data_error("class " + std::to_string(c) + " has fewer than 3 samples");

  const auto n = static_cast<double>(data.size());
  const auto total_val = static_cast<std::size_t>(std::llround(f.val * n));
  const auto total_test = static_cast<std::size_t>(std::llround(f.test * n));

  const int minority = classes[1].size() <= classes[0].size() ? 1 : 0;
  const auto nm = static_cast<double>(classes[minority].size());
  std::array<std::array<std::size_t, 3>, 2> counts{};  // [class][train, val, test]
  counts[minority][1] = static_cast<std::size_t>(std::llround(f.val * nm));
  counts[minority][2] = static_cast<std::size_t>(std::llround(f.test * nm));
  counts[minority][0] = classes[minority].size() - counts[minority][1] - counts[minority][2];
  const int majority = 1 - minority;
  counts[majority][1] = total_val - counts[minority][1];
  counts[majority][2] = total_test - counts[minority][2];
  counts[majority][0] = classes[majority].size() - counts[majority][1] - counts[majority][2];

  std::array<std::vector<std::size_t>, 3> parts;
  for (int c = 0; c < 2; ++c) {
    const auto order = shuffled_indices(classes[c].size(), seed, c ? "split/1" : "split/0");
    std::size_t pos = 0;
    for (int s = 0; s < 3; ++s)
      for (std::size_t k = 0; k < counts[c][s]; ++k) parts[s].push_back(classes[c][order[pos++]]);
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return {data.subset(parts[0]), data.subset(parts[1]), data.subset(parts[2])};
}

// Sizes of the three splits for a given total, as stratified_split computes them.
inline std::array<std::size_t, 3> split_sizes(std::size_t total, const SplitFractions& f = {}) {
  const auto val = static_cast<std::size_t>(std::llround(f.val * static_cast<double>(total)));
  const auto test = static_cast<std::size_t>(std::llround(f.test * static_cast<double>(total)));
  return {total - val - test, val, test};
}

// Fold id per row: each class is shuffled and dealt round-robin.
inline std::vector<int> stratified_folds(const Dataset& data, int folds, std::uint64_t seed) {
  if (folds < 2) throw usage_error("need at least 2 folds");
  const auto classes = rows_by_class(data);
  std::vector<int> fold(data.size(), 0);
  for (int c = 0; c < 2; ++c) {
    if (classes[c].size() < static_cast<std::size_t>(folds))
      throw data_error("class " + std::to_string(c) + " too small for " + std::to_string(folds) + " stratified folds");
    const auto order = shuffled_indices(classes[c].size(), seed, c ? "folds/1" : "folds/0");
    for (std::size_t k = 0; k < order.size(); ++k) fold[classes[c][order[k]]] = static_cast<int>(k % folds);
  }
  return fold;
}

enum class Objective { Precision, Recall };

inline const char* to_string(Objective o) { return o == Objective::Precision ? "precision" : "recall"; }

struct RebalanceSpec {
  double ratio = 1.0;  // successes kept per failure
  std::uint64_t seed = 0;
  Objective objective = Objective::Precision;
};

// Keeps every failure and round(ratio * failures) randomly chosen successes.
// Rows keep their original relative order.
inline Dataset rebalance(const Dataset& train, const RebalanceSpec& spec) {
  if (!(spec.ratio > 0)) throw usage_error("rebalance ratio must be positive");
  const auto classes = rows_by_class(train);
  const auto want = static_cast<std::size_t>(std::llround(spec.ratio * static_cast<double>(classes[1].size())));
  if (want > classes[0].size())
    throw data_error("rebalance ratio " + std::to_string(spec.ratio) + " needs " + std::to_string(want) +
                     " successes but only " + std::to_string(classes[0].size()) + " are available");
  const auto order = shuffled_indices(classes[0].size(), spec.seed, "rebalance");
  std::vector<std::size_t> rows = classes[1];
  for (std::size_t k = 0; k < want; ++k) rows.push_back(classes[0][order[k]]);
  std::sort(rows.begin(), rows.end());
  return train.subset(rows);
}

// n values evenly spaced over [lo, hi], endpoints included.
inline std::vector<double> linspace(double lo, double hi, std::size_t n) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i)
    v[i] = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  if (n > 1) v.back() = hi;
  return v;
}

}  // namespace lnup::failpred
