#pragma once

// Prototype k-NN classification with gated modality similarity, and the classifier-head path.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "pmx/model.hpp"

namespace pmx {

struct NeighborVote {
  std::size_t row = 0; // index into the prototype bank
  Label class_id = Label::Normal;
  std::size_t slot = 0;
  double distance = 0.0; // 1 - gated similarity
  double weight = 0.0;   // exp(-d / tau_conf), normalized over the k neighbors
};

struct KnnResult {
  Label prediction = Label::Normal;
  std::array<double, kNumClasses> votes{};
  std::vector<NeighborVote> neighbors;
  bool tie_broken = false; // the winning vote was shared and severity decided
};

/// Sum of neighbor weights belonging to `cls`. Weights are taken as given, so unnormalized
/// weights yield the unnormalized share.
inline double confidence(std::span<const NeighborVote> neighbors, Label cls) {
  double c = 0.0;
  for (const auto& n : neighbors)
    if (n.class_id == cls) c += n.weight;
  return c;
}

inline double confidence(const KnnResult& r) { return confidence(r.neighbors, r.prediction); }

/// Argmax over class votes; exact ties resolve toward the more severe class.
inline Label severe_argmax(const std::array<double, kNumClasses>& votes, bool* tied = nullptr) {
  std::size_t best = kNumClasses - 1;
  for (std::size_t c = kNumClasses - 1; c-- > 0;)
    if (votes[c] > votes[best]) best = c;
  if (tied) {
    *tied = false;
    for (std::size_t c = 0; c < kNumClasses; ++c)
      if (c != best && votes[c] == votes[best]) *tied = true;
  }
  return static_cast<Label>(best);
}

/// Retrieves the k prototypes nearest under d = 1 - (alpha cos_img + (1 - alpha) cos_tab),
/// ordered by (distance, class, slot), and votes with weights exp(-d / tau_conf) normalized over k.
inline KnnResult knn_classify(const RowVector& z_img, const RowVector& z_tab, double alpha, const PrototypeBank& bank,
                              std::size_t k, double tau_conf) {
  if (!bank.initialized) throw UsageError("model has no initialized prototype bank; k-NN inference unavailable");
  if (k == 0 || k > bank.size())
    throw ConfigError("k must lie in [1, " + std::to_string(bank.size()) + "], got " + std::to_string(k));
  if (!(tau_conf > 0.0)) throw ConfigError("tau_conf must be > 0");

  const double ni = z_img.norm(), nt = z_tab.norm();
  if (ni == 0.0 || nt == 0.0) throw DataError("degenerate representation: zero-norm vector in cosine similarity");
  std::vector<double> dist(bank.size());
  for (std::size_t r = 0; r < bank.size(); ++r) {
    const auto row = static_cast<Eigen::Index>(r);
    const double ci = z_img.dot(bank.image.value.row(row)) / (ni * bank.image.value.row(row).norm());
    const double ct = z_tab.dot(bank.tabular.value.row(row)) / (nt * bank.tabular.value.row(row).norm());
    dist[r] = 1.0 - (alpha * ci + (1.0 - alpha) * ct);
  }
  std::vector<std::size_t> order(bank.size());
  std::iota(order.begin(), order.end(), 0);
  // Row index is class * slots + slot, so it doubles as the (class, slot) tie-break.
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });

  KnnResult res;
  const double d0 = dist[order[0]];
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t r = order[i];
    NeighborVote v{r, bank.class_of(r), bank.slot_of(r), dist[r], std::exp(-(dist[r] - d0) / tau_conf)};
    total += v.weight;
    res.neighbors.push_back(v);
  }
  for (auto& v : res.neighbors) {
    v.weight /= total;
    res.votes[static_cast<std::size_t>(v.class_id)] += v.weight;
  }
  res.prediction = severe_argmax(res.votes, &res.tie_broken);
  return res;
}

/// Prototype path over a batch (Eval mode).
inline std::vector<KnnResult> predict_knn(Model& model, const Batch& batch, std::size_t k, double tau_conf) {
  if (model.config().no_prototypes || !model.bank().initialized)
    throw UsageError("k-NN inference needs a model trained with prototypes");
  auto r = model.infer(batch);
  std::vector<KnnResult> out;
  out.reserve(static_cast<std::size_t>(batch.size()));
  for (Eigen::Index i = 0; i < batch.size(); ++i)
    out.push_back(knn_classify(r.z_img.row(i), r.h_tab.row(i), r.alpha(i, 0), model.bank(), k, tau_conf));
  return out;
}

/// Classifier-head path over a batch (Eval mode): argmax of the logits.
inline std::vector<Label> predict_head(Model& model, const Batch& batch) {
  auto r = model.infer(batch);
  std::vector<Label> out;
  for (Eigen::Index i = 0; i < r.logits.rows(); ++i) {
    Eigen::Index arg = 0;
    r.logits.row(i).maxCoeff(&arg);
    out.push_back(static_cast<Label>(arg));
  }
  return out;
}

inline double accuracy(std::span<const Label> pred, std::span<const int> truth) {
  if (pred.size() != truth.size()) throw ShapeError("prediction and label counts differ");
  if (pred.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += static_cast<int>(pred[i]) == truth[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

} // namespace pmx
