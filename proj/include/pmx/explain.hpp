#pragma once

// Per-prediction explanation reports: retrieved prototype neighbors with their source cases,
// vote distribution, modality gate, and clinical feature deviations from the predicted class.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmx/checkpoint.hpp"
#include "pmx/inference.hpp"

namespace pmx {

inline constexpr double kDeviationFlag = 0.5;
inline constexpr double kLowConfidence = 0.6;
inline constexpr double kHighConfidence = 0.9;

struct FeatureDeviation {
  std::string feature;
  double delta = 0.0;
  bool flagged = false;
  bool operator==(const FeatureDeviation&) const = default;
};

/// delta_j = |x_j - mu_j| / max(mu_j, 1) in raw clinical units; flagged when above 0.5.
inline std::vector<FeatureDeviation> feature_deviation(const ClinicalFeatures& raw, const ClinicalFeatures& norm) {
  std::vector<FeatureDeviation> out;
  for (std::size_t j = 0; j < kClinicalDim; ++j) {
    const double d = std::abs(raw[j] - norm[j]) / std::max(norm[j], 1.0);
    out.push_back({std::string(kClinicalNames[j]), d, d > kDeviationFlag});
  }
  return out;
}

struct ReportNeighbor {
  Label class_id = Label::Normal;
  std::size_t slot = 0;
  std::optional<PrototypeSource> source;
  double distance = 0.0;
  double weight = 0.0;
  bool operator==(const ReportNeighbor&) const = default;
};

struct Audit {
  Label true_label = Label::Normal;
  bool correct = false;
  ReportNeighbor true_class_nearest_prototype;
  std::string confidence_band; // "low" below 0.6, "high" at 0.9 and above, else "moderate"
  std::optional<double> reference_confidence_correct;
  std::optional<double> reference_confidence_incorrect;
  bool operator==(const Audit&) const = default;
};

struct ExplanationReport {
  std::string patient_id;
  Label prediction = Label::Normal;
  double confidence = 0.0;
  double alpha = 0.0;
  std::array<double, kNumClasses> votes{};
  bool tie_broken = false;
  std::vector<ReportNeighbor> neighbors;
  std::vector<FeatureDeviation> deviations;
  ClinicalFeatures class_norm;
  std::string checkpoint_id;
  std::size_t k = 0;
  double tau_conf = 0.0;
  std::optional<Audit> audit;
  bool operator==(const ExplanationReport&) const = default;
};

inline std::string confidence_band(double c) {
  return c < kLowConfidence ? "low" : c >= kHighConfidence ? "high" : "moderate";
}

struct ExplainOptions {
  std::size_t k = 3;
  double tau_conf = 0.1;
  std::optional<Label> true_label; // enables audit mode
};

/// Runs the prototype path on one case and assembles its report.
inline ExplanationReport explain(const PatientCase& pc, TrainedModel& tm, const std::string& checkpoint_id,
                                 const ExplainOptions& opt) {
  Model& model = tm.model;
  if (model.config().no_prototypes || !model.bank().initialized)
    throw UsageError("explanations need a checkpoint trained with prototypes");
  if (pc.embedding.size() != tm.config.embedding_dim)
    throw DataError("case '" + pc.patient_id + "' has embedding width " + std::to_string(pc.embedding.size()) +
                    ", checkpoint expects " + std::to_string(tm.config.embedding_dim));
  const std::vector<PatientCase> one{pc};
  const Batch batch = make_batch(one, tm.standardizer);
  auto r = model.infer(batch);
  const auto& bank = model.bank();
  const double alpha = r.alpha(0, 0);
  auto res = knn_classify(r.z_img.row(0), r.h_tab.row(0), alpha, bank, opt.k, opt.tau_conf);

  ExplanationReport rep;
  rep.patient_id = pc.patient_id;
  rep.prediction = res.prediction;
  rep.confidence = confidence(res);
  rep.alpha = alpha;
  rep.votes = res.votes;
  rep.tie_broken = res.tie_broken;
  for (const auto& n : res.neighbors) rep.neighbors.push_back({n.class_id, n.slot, bank.sources[n.row], n.distance, n.weight});
  rep.class_norm = tm.class_norms[static_cast<std::size_t>(res.prediction)];
  rep.deviations = feature_deviation(pc.clinical, rep.class_norm);
  rep.checkpoint_id = checkpoint_id;
  rep.k = opt.k;
  rep.tau_conf = opt.tau_conf;

  if (opt.true_label) {
    Audit a;
    a.true_label = *opt.true_label;
    a.correct = a.true_label == res.prediction;
    // Nearest prototype of the true class, over the full bank.
    auto all = knn_classify(r.z_img.row(0), r.h_tab.row(0), alpha, bank, bank.size(), opt.tau_conf);
    for (const auto& n : all.neighbors)
      if (n.class_id == a.true_label) {
        a.true_class_nearest_prototype = {n.class_id, n.slot, bank.sources[n.row], n.distance, 0.0};
        break;
      }
    a.confidence_band = confidence_band(rep.confidence);
    a.reference_confidence_correct = tm.reference_confidence_correct;
    a.reference_confidence_incorrect = tm.reference_confidence_incorrect;
    rep.audit = a;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// JSON

namespace detail {

inline nlohmann::json neighbor_json(const ReportNeighbor& n, bool with_weight) {
  nlohmann::json j;
  j["class"] = std::string(label_name(n.class_id));
  j["slot"] = n.slot;
  j["source_patient_id"] = n.source ? nlohmann::json(n.source->patient_id) : nlohmann::json();
  j["source_t_score"] = n.source ? nlohmann::json(n.source->t_score) : nlohmann::json();
  j["clinical"] = n.source ? clinical_json(n.source->clinical) : nlohmann::json();
  j["distance"] = n.distance;
  if (with_weight) j["weight"] = n.weight;
  return j;
}

inline ReportNeighbor neighbor_from_json(const nlohmann::json& j) {
  ReportNeighbor n;
  n.class_id = parse_label(j.at("class").get<std::string>());
  n.slot = j.at("slot").get<std::size_t>();
  if (!j.at("source_patient_id").is_null())
    n.source = PrototypeSource{j["source_patient_id"].get<std::string>(), j.at("source_t_score").get<double>(),
                               clinical_from_json(j.at("clinical"))};
  n.distance = j.at("distance").get<double>();
  if (j.contains("weight")) n.weight = j["weight"].get<double>();
  return n;
}

} // namespace detail

inline nlohmann::json to_json(const ExplanationReport& r) {
  nlohmann::json j;
  j["patient_id"] = r.patient_id;
  j["prediction"] = std::string(label_name(r.prediction));
  j["confidence"] = r.confidence;
  j["alpha"] = r.alpha;
  j["votes"] = nlohmann::json::object();
  for (std::size_t c = 0; c < kNumClasses; ++c) j["votes"][std::string(kLabelNames[c])] = r.votes[c];
  j["tie_broken"] = r.tie_broken;
  j["neighbors"] = nlohmann::json::array();
  for (const auto& n : r.neighbors) j["neighbors"].push_back(detail::neighbor_json(n, true));
  j["deviations"] = nlohmann::json::array();
  for (const auto& d : r.deviations) j["deviations"].push_back({{"feature", d.feature}, {"delta", d.delta}, {"flagged", d.flagged}});
  j["class_norms"] = detail::clinical_json(r.class_norm);
  j["checkpoint_id"] = r.checkpoint_id;
  j["k"] = r.k;
  j["tau_conf"] = r.tau_conf;
  if (r.audit) {
    const auto& a = *r.audit;
    j["audit"] = {{"true_label", std::string(label_name(a.true_label))},
                  {"correct", a.correct},
                  {"true_class_nearest_prototype", detail::neighbor_json(a.true_class_nearest_prototype, false)},
                  {"confidence_band", a.confidence_band},
                  {"reference_confidence",
                   {{"correct", detail::optional_json(a.reference_confidence_correct)},
                    {"incorrect", detail::optional_json(a.reference_confidence_incorrect)}}}};
  }
  return j;
}

inline ExplanationReport report_from_json(const nlohmann::json& j) {
  ExplanationReport r;
  try {
    r.patient_id = j.at("patient_id").get<std::string>();
    r.prediction = parse_label(j.at("prediction").get<std::string>());
    r.confidence = j.at("confidence").get<double>();
    r.alpha = j.at("alpha").get<double>();
    for (std::size_t c = 0; c < kNumClasses; ++c) r.votes[c] = j.at("votes").at(std::string(kLabelNames[c])).get<double>();
    r.tie_broken = j.at("tie_broken").get<bool>();
    for (const auto& n : j.at("neighbors")) r.neighbors.push_back(detail::neighbor_from_json(n));
    for (const auto& d : j.at("deviations"))
      r.deviations.push_back({d.at("feature").get<std::string>(), d.at("delta").get<double>(), d.at("flagged").get<bool>()});
    r.class_norm = detail::clinical_from_json(j.at("class_norms"));
    r.checkpoint_id = j.at("checkpoint_id").get<std::string>();
    r.k = j.at("k").get<std::size_t>();
    r.tau_conf = j.at("tau_conf").get<double>();
    if (j.contains("audit")) {
      const auto& aj = j["audit"];
      Audit a;
      a.true_label = parse_label(aj.at("true_label").get<std::string>());
      a.correct = aj.at("correct").get<bool>();
      a.true_class_nearest_prototype = detail::neighbor_from_json(aj.at("true_class_nearest_prototype"));
      a.confidence_band = aj.at("confidence_band").get<std::string>();
      const auto& rc = aj.at("reference_confidence");
      if (!rc.at("correct").is_null()) a.reference_confidence_correct = rc["correct"].get<double>();
      if (!rc.at("incorrect").is_null()) a.reference_confidence_incorrect = rc["incorrect"].get<double>();
      r.audit = a;
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed explanation report: ") + e.what());
  }
  return r;
}

} // namespace pmx
