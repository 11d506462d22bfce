#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "lnup/core.hpp"

namespace lnup::failpred {

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const noexcept { return tp + fp + tn + fn; }
};

struct Metrics {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  Confusion confusion;
};

inline double harmonic_f1(double precision, double recall) {
  return precision + recall == 0 ? 0.0 : 2 * precision * recall / (precision + recall);
}

inline Metrics metrics_from(const Confusion& c) {
  Metrics m;
  m.confusion = c;
  m.precision = c.tp + c.fp == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  m.recall = c.tp + c.fn == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  m.f1 = harmonic_f1(m.precision, m.recall);
  return m;
}

inline Confusion confusion_at(std::span<const double> proba, std::span<const int> labels, double threshold) {
  Confusion c;
  for (std::size_t i = 0; i < proba.size(); ++i) {
    const bool pred = proba[i] >= threshold;
    if (labels[i] == 1) (pred ? c.tp : c.fn)++;
    else (pred ? c.fp : c.tn)++;
  }
  return c;
}

// Population coefficient of variation; 0 for a constant series.
inline double coefficient_of_variation(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  double mean = 0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0;
  for (double x : xs) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(xs.size()));
  if (sd == 0) return 0.0;
  return mean == 0 ? INFINITY : sd / mean;
}

}  // namespace lnup::failpred
