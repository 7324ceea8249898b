#pragma once

// Classification metrics, the component ablation runner and the k-NN versus head comparison.

#include <atomic>
#include <cstdlib>
#include <exception>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "pmx/training.hpp"

namespace pmx {

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct MetricsReport {
  std::size_t n = 0;
  double accuracy = 0.0;
  std::array<ClassMetrics, kNumClasses> per_class{};
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::array<std::array<std::size_t, kNumClasses>, kNumClasses> confusion{}; // [truth][prediction]
  std::optional<double> clinical_agreement;                               // needs true T-scores
  double normal_vs_abnormal_sensitivity = 0.0;
  std::vector<std::string> warnings;
};

/// Standard definitions with macro averaging. Undefined ratios (no support, nothing predicted)
/// are reported as 0 and noted in `warnings`. Pass T-scores to score clinical agreement.
inline MetricsReport compute_metrics(std::span<const Label> pred, std::span<const Label> truth,
                                     std::span<const double> t_scores = {}) {
  if (pred.size() != truth.size())
    throw ShapeError("prediction count " + std::to_string(pred.size()) + " differs from label count " +
                     std::to_string(truth.size()));
  if (!t_scores.empty() && t_scores.size() != truth.size())
    throw ShapeError("T-score count " + std::to_string(t_scores.size()) + " differs from label count " +
                     std::to_string(truth.size()));
  MetricsReport m;
  m.n = pred.size();
  if (m.n == 0) throw DataError("cannot compute metrics on an empty evaluation set");
  for (std::size_t i = 0; i < m.n; ++i) ++m.confusion[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(pred[i])];

  std::size_t correct = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    std::size_t predicted = 0;
    for (std::size_t t = 0; t < kNumClasses; ++t) {
      m.per_class[c].support += m.confusion[c][t];
      predicted += m.confusion[t][c];
    }
    const double tp = static_cast<double>(m.confusion[c][c]);
    correct += m.confusion[c][c];
    auto& pc = m.per_class[c];
    const std::string name(kLabelNames[c]);
    if (pc.support == 0) m.warnings.push_back("class '" + name + "' has no support; recall set to 0");
    else pc.recall = tp / static_cast<double>(pc.support);
    if (predicted == 0) m.warnings.push_back("class '" + name + "' is never predicted; precision set to 0");
    else pc.precision = tp / static_cast<double>(predicted);
    pc.f1 = pc.precision + pc.recall > 0.0 ? 2.0 * pc.precision * pc.recall / (pc.precision + pc.recall) : 0.0;
    m.macro_precision += pc.precision / kNumClasses;
    m.macro_recall += pc.recall / kNumClasses;
    m.macro_f1 += pc.f1 / kNumClasses;
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(m.n);

  std::size_t abnormal = 0, caught = 0;
  for (std::size_t i = 0; i < m.n; ++i)
    if (truth[i] != Label::Normal) {
      ++abnormal;
      caught += pred[i] != Label::Normal;
    }
  if (abnormal == 0) m.warnings.push_back("no abnormal cases; normal-vs-abnormal sensitivity set to 0");
  else m.normal_vs_abnormal_sensitivity = static_cast<double>(caught) / static_cast<double>(abnormal);

  if (!t_scores.empty()) {
    std::size_t agree = 0;
    for (std::size_t i = 0; i < m.n; ++i) agree += pred[i] == who_label(t_scores[i]);
    m.clinical_agreement = static_cast<double>(agree) / static_cast<double>(m.n);
  }
  return m;
}

inline nlohmann::json to_json(const MetricsReport& m) {
  nlohmann::json j;
  j["n"] = m.n;
  j["accuracy"] = m.accuracy;
  j["averaging"] = "macro";
  j["macro"] = {{"precision", m.macro_precision}, {"recall", m.macro_recall}, {"f1", m.macro_f1}};
  j["per_class"] = nlohmann::json::object();
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const auto& pc = m.per_class[c];
    j["per_class"][std::string(kLabelNames[c])] = {
        {"precision", pc.precision}, {"recall", pc.recall}, {"f1", pc.f1}, {"support", pc.support}};
  }
  j["confusion"] = m.confusion;
  j["confusion_axes"] = "rows: true class, columns: predicted class, order normal/osteopenia/osteoporosis";
  j["clinical_agreement"] = m.clinical_agreement ? nlohmann::json(*m.clinical_agreement) : nlohmann::json();
  j["normal_vs_abnormal_sensitivity"] = m.normal_vs_abnormal_sensitivity;
  j["warnings"] = m.warnings;
  return j;
}

/// Long-format CSV: one `metric,class,value` row per number.
inline std::string metrics_csv(const MetricsReport& m) {
  std::ostringstream out;
  auto row = [&](std::string_view metric, std::string_view cls, double v) {
    out << metric << ',' << cls << ',' << detail::format_double(v) << '\n';
  };
  out << "metric,class,value\n";
  row("accuracy", "all", m.accuracy);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const auto& pc = m.per_class[c];
    row("precision", kLabelNames[c], pc.precision);
    row("recall", kLabelNames[c], pc.recall);
    row("f1", kLabelNames[c], pc.f1);
    row("support", kLabelNames[c], static_cast<double>(pc.support));
  }
  row("precision", "macro", m.macro_precision);
  row("recall", "macro", m.macro_recall);
  row("f1", "macro", m.macro_f1);
  if (m.clinical_agreement) row("clinical_agreement", "all", *m.clinical_agreement);
  row("normal_vs_abnormal_sensitivity", "abnormal", m.normal_vs_abnormal_sensitivity);
  for (std::size_t t = 0; t < kNumClasses; ++t)
    for (std::size_t p = 0; p < kNumClasses; ++p)
      row("confusion", std::string(kLabelNames[t]) + "->" + std::string(kLabelNames[p]), static_cast<double>(m.confusion[t][p]));
  return out.str();
}

// ---------------------------------------------------------------------------
// Head comparison

struct HeadComparison {
  double knn = 0.0;
  double head = 0.0;
};

inline HeadComparison compare_heads(TrainedModel& tm, std::span<const PatientCase> cases) {
  if (tm.config.no_prototypes) throw UsageError("checkpoint was trained without prototypes; k-NN path unavailable");
  const Batch b = make_batch(cases, tm.standardizer);
  HeadComparison h;
  std::vector<Label> knn;
  for (const auto& r : predict_knn(tm.model, b, tm.config.k, tm.config.tau_conf)) knn.push_back(r.prediction);
  h.knn = accuracy(knn, b.labels);
  h.head = accuracy(predict_head(tm.model, b), b.labels);
  return h;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string configuration;
  double accuracy = 0.0;      // primary path on the test partition
  double delta = 0.0;         // full accuracy minus this row's
  double head_accuracy = 0.0; // classifier head on the same partition
  std::optional<double> knn_accuracy;
};

struct AblationVariant {
  std::string name;
  bool no_gate, no_multitask, no_cross_attention, no_prototypes;
};

inline const std::array<AblationVariant, 6>& ablation_variants() {
  static const std::array<AblationVariant, 6> v = {{{"full", false, false, false, false},
                                                    {"w/o gate", true, false, false, false},
                                                    {"w/o multi-task", false, true, false, false},
                                                    {"w/o cross-attention", false, false, true, false},
                                                    {"w/o prototypes", false, false, false, true},
                                                    {"baseline", true, true, true, true}}};
  return v;
}

/// Worker count from PMX_THREADS (default 1), capped at `jobs`.
inline std::size_t thread_budget(std::size_t jobs) {
  std::size_t n = 1;
  if (const char* env = std::getenv("PMX_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("PMX_THREADS must be a positive integer");
    n = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

namespace detail {

template <class E>
[[noreturn]] void rethrow_annotated(const E& e, const std::string& name) {
  throw E("ablation '" + name + "': " + e.what());
}

} // namespace detail

/// Trains the full model, each single-switch ablation and the all-off baseline on one split
/// with identical seeds. Runs are independent and may execute in parallel.
inline std::vector<AblationRow> run_ablations(const DatasetSplit& split, const TrainConfig& base) {
  if (split.test.empty()) throw DataError("ablation needs a non-empty test partition");
  const auto& variants = ablation_variants();
  std::vector<AblationRow> rows(variants.size());
  std::vector<std::exception_ptr> errors(variants.size());

  auto run = [&](std::size_t i) {
    const auto& v = variants[i];
    try {
      try {
        TrainConfig cfg = base;
        cfg.no_gate = v.no_gate;
        cfg.no_multitask = v.no_multitask;
        cfg.no_cross_attention = v.no_cross_attention;
        cfg.no_prototypes = v.no_prototypes;
        auto tm = train(split, cfg);
        AblationRow& r = rows[i];
        r.configuration = v.name;
        r.accuracy = *tm.history.test_accuracy;
        const Batch b = make_batch(split.test, split.standardizer);
        r.head_accuracy = accuracy(predict_head(tm.model, b), b.labels);
        if (!cfg.no_prototypes) r.knn_accuracy = r.accuracy;
      } catch (const TrainingError& e) {
        detail::rethrow_annotated(e, v.name);
      } catch (const DataError& e) {
        detail::rethrow_annotated(e, v.name);
      } catch (const ConfigError& e) {
        detail::rethrow_annotated(e, v.name);
      } catch (const ShapeError& e) {
        detail::rethrow_annotated(e, v.name);
      }
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  const std::size_t workers = thread_budget(variants.size());
  if (workers == 1) {
    for (std::size_t i = 0; i < variants.size(); ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < variants.size();) run(i);
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  for (auto& r : rows) r.delta = rows[0].accuracy - r.accuracy;
  return rows;
}

inline std::string ablation_csv(std::span<const AblationRow> rows) {
  std::ostringstream out;
  out << "configuration,accuracy,delta\n";
  for (const auto& r : rows) out << r.configuration << ',' << detail::format_double(r.accuracy) << ',' << detail::format_double(r.delta) << '\n';
  return out.str();
}

inline nlohmann::json to_json(std::span<const AblationRow> rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows)
    j.push_back({{"configuration", r.configuration},
                 {"accuracy", r.accuracy},
                 {"delta", r.delta},
                 {"head_accuracy", r.head_accuracy},
                 {"knn_accuracy", r.knn_accuracy ? nlohmann::json(*r.knn_accuracy) : nlohmann::json()}});
  return j;
}

} // namespace pmx
