#pragma once

// Independent reimplementations used as test oracles. Plain loops over std::vector, no Eigen,
// and none of the library's helpers beyond the data types.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "pmx/prototypes.hpp"

namespace pmx::test {

inline std::vector<double> row_of(const Matrix& m, std::size_t r) {
  std::vector<double> v(static_cast<std::size_t>(m.cols()));
  for (std::size_t j = 0; j < v.size(); ++j) v[j] = m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j));
  return v;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

struct OracleVote {
  int prediction = 0;
  std::array<double, 3> votes{};
};

/// Scores every prototype, keeps the k nearest (earlier row wins exact ties), weights them by
/// exp(-d / tau) over their sum, and takes the most severe class among the top vote.
inline OracleVote brute_force_knn(const std::vector<double>& img, const std::vector<double>& tab, double alpha,
                                  const PrototypeBank& bank, std::size_t k, double tau) {
  const std::size_t n = bank.size();
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t r = 0; r < n; ++r) {
    const double s = alpha * cosine(img, row_of(bank.image.value, r)) + (1 - alpha) * cosine(tab, row_of(bank.tabular.value, r));
    scored.emplace_back(1 - s, r);
  }
  std::sort(scored.begin(), scored.end());
  double total = 0;
  for (std::size_t i = 0; i < k; ++i) total += std::exp(-scored[i].first / tau);
  OracleVote o;
  for (std::size_t i = 0; i < k; ++i) o.votes[scored[i].second / bank.slots()] += std::exp(-scored[i].first / tau) / total;
  o.prediction = 2;
  for (int c = 1; c >= 0; --c)
    if (o.votes[static_cast<std::size_t>(c)] > o.votes[static_cast<std::size_t>(o.prediction)]) o.prediction = c;
  return o;
}

inline std::vector<double> deviation_oracle(const ClinicalFeatures& x, const ClinicalFeatures& mu) {
  std::vector<double> d;
  for (std::size_t j = 0; j < kClinicalDim; ++j) {
    const double denom = mu[j] > 1.0 ? mu[j] : 1.0;
    d.push_back(std::fabs(x[j] - mu[j]) / denom);
  }
  return d;
}

} // namespace pmx::test
