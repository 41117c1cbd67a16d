// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "xda/attention.hpp"
#include "xda/tensor.hpp"

namespace xda {

// Percent of rows whose argmax matches the label; ties pick the lowest index.
template <typename T>
double accuracy_percent(const TensorT<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("accuracy needs [N,K] logits");
  const int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) throw ContractError("accuracy: label count mismatch");
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    const T* row = logits.data() + static_cast<size_t>(i) * k;
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    if (best == labels[static_cast<size_t>(i)]) ++hits;
  }
  return 100.0 * hits / n;
}

// Mean of the lowest floor(n/10) values after a stable ascending sort.
inline double worst_decile(const std::vector<double>& values) {
  const size_t n = values.size();
  if (n < 10) throw ContractError("worst_decile needs at least 10 values");
  std::vector<double> v = values;
  std::stable_sort(v.begin(), v.end());
  const size_t k = n / 10;
  double acc = 0.0;
  for (size_t i = 0; i < k; ++i) acc += v[i];
  return acc / static_cast<double>(k);
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) throw ContractError("mean of empty vector");
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

// Standard error of the mean (Bessel-corrected standard deviation / sqrt(k)).
inline double sem_of(const std::vector<double>& v) {
  if (v.size() < 2) throw ContractError("sem needs at least 2 values");
  const double m = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1)) /
         std::sqrt(static_cast<double>(v.size()));
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw ContractError("median of empty vector");
  std::stable_sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Attention weight distributions split by whether the support example shares
// the query's domain. Both densities integrate to one over [0, max weight].
struct AttentionHistogram {
  int bins = 50;
  double bin_width = 0.0, max_weight = 0.0;
  std::vector<double> density_same, density_diff;
  double mean_same = 0.0, mean_diff = 0.0;
  size_t count_same = 0, count_diff = 0;
};

inline AttentionHistogram attention_histogram(const std::vector<AttentionRecord>& records,
                                              int bins = 50) {
  if (records.empty()) throw ContractError("attention_histogram needs records");
  if (bins < 1) throw ContractError("attention_histogram needs at least one bin");
  double mx = 0.0;
  for (const auto& r : records) {
    if (static_cast<int>(r.same_domain.size()) != r.n_support)
      throw ContractError("attention record is missing same-domain flags");
    for (double w : r.weights) mx = std::max(mx, w);
  }
  if (mx <= 0.0) throw ContractError("attention weights are all zero");

  AttentionHistogram h;
  h.bins = bins;
  h.max_weight = mx;
  h.bin_width = mx / bins;
  std::vector<size_t> same(static_cast<size_t>(bins), 0), diff(static_cast<size_t>(bins), 0);
  double sum_same = 0.0, sum_diff = 0.0;
  for (const auto& r : records) {
    for (int head = 0; head < r.heads; ++head) {
      for (int q = 0; q < r.n_query; ++q) {
        for (int s = 0; s < r.n_support; ++s) {
          const double w = r.at(head, q, s);
          int b = static_cast<int>(w / h.bin_width);
          b = std::clamp(b, 0, bins - 1);
          if (r.same_domain[static_cast<size_t>(s)]) {
            ++same[static_cast<size_t>(b)];
            sum_same += w;
            ++h.count_same;
          } else {
            ++diff[static_cast<size_t>(b)];
            sum_diff += w;
            ++h.count_diff;
          }
        }
      }
    }
  }
  if (h.count_same == 0 || h.count_diff == 0)
    throw ContractError("attention_histogram needs both same- and different-domain weights");
  h.mean_same = sum_same / static_cast<double>(h.count_same);
  h.mean_diff = sum_diff / static_cast<double>(h.count_diff);
  h.density_same.resize(static_cast<size_t>(bins));
  h.density_diff.resize(static_cast<size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    h.density_same[static_cast<size_t>(b)] =
        static_cast<double>(same[static_cast<size_t>(b)]) /
        (static_cast<double>(h.count_same) * h.bin_width);
    h.density_diff[static_cast<size_t>(b)] =
        static_cast<double>(diff[static_cast<size_t>(b)]) /
        (static_cast<double>(h.count_diff) * h.bin_width);
  }
  return h;
}

}  // namespace xda
