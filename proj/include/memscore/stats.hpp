#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "memscore/errors.hpp"

namespace memscore {

/// 1-based ranks; tied values share the average of the ranks they span.
inline std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = avg;
    i = j;
  }
  return ranks;
}

/// Spearman rank correlation: Pearson correlation of average ranks.
inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw UsageError("spearman: inputs differ in length");
  if (a.size() < 2) throw UsageError("spearman: need at least 2 observations");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::isnan(a[i]) || std::isnan(b[i])) throw UsageError("spearman: NaN input");
  }
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double mean = 0.5 * static_cast<double>(a.size() + 1);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = ra[i] - mean;
    const double db = rb[i] - mean;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw UsageError("spearman: constant input has no rank variance");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Add-k smoothed fraction of positive phrases: (pos + k) / (pos + neg + 2k).
inline double positive_fraction(std::size_t pos_count, std::size_t neg_count, double k = 0.01) {
  if (!(k > 0.0)) throw UsageError("positive_fraction: k must be positive");
  const double pos = static_cast<double>(pos_count);
  const double neg = static_cast<double>(neg_count);
  return (pos + k) / (pos + neg + 2.0 * k);
}

/// Shifted by the first element so that a list of equal values averages to exactly that value.
inline double mean_of(std::span<const double> xs) {
  if (xs.empty()) return std::nan("");
  const double x0 = xs.front();
  double shift = 0.0;
  for (const double x : xs) shift += x - x0;
  return x0 + shift / static_cast<double>(xs.size());
}

/// Population standard deviation.
inline double stddev_of(std::span<const double> xs) {
  if (xs.empty()) return std::nan("");
  const double m = mean_of(xs);
  double ss = 0.0;
  for (const double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size()));
}

}  // namespace memscore
