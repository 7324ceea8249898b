#pragma once

// Multi-task training: three learning-rate groups under AdamW with cosine annealing, periodic
// prototype projection, early stopping on validation accuracy and best-state restoration.

#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmx/dataset.hpp"
#include "pmx/inference.hpp"
#include "pmx/model.hpp"

namespace pmx {

struct TrainConfig {
  double lr_image = 5e-5;
  double lr_tabular = 5e-4;
  double lr_prototypes = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda1 = 0.3;
  double lambda2 = 1.0;
  double lambda_sep = 0.5;
  double lambda_ctr = 0.1;
  double margin = 0.2;
  double tau_sim = 0.07;
  double tau_conf = 0.1;
  std::size_t k = 3;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 200;
  std::size_t patience = 15;
  std::size_t projection_interval = 10;
  std::size_t prototypes_per_class = 6;
  std::size_t embedding_dim = kEmbeddingDim;
  NormKind norm = NormKind::Batch;
  std::uint64_t seed = 0;
  bool no_gate = false;
  bool no_multitask = false;
  bool no_cross_attention = false;
  bool no_prototypes = false;
  // Score validation on a projected copy of the bank, i.e. the model training would return.
  bool projected_selection = true;

  void validate() const {
    auto finite_nonneg = [](double v, const char* name) {
      if (!std::isfinite(v) || v < 0.0) throw ConfigError(std::string(name) + " must be finite and >= 0");
    };
    finite_nonneg(lr_image, "lr_image");
    finite_nonneg(lr_tabular, "lr_tabular");
    finite_nonneg(lr_prototypes, "lr_prototypes");
    finite_nonneg(weight_decay, "weight_decay");
    finite_nonneg(lambda1, "lambda1");
    finite_nonneg(lambda2, "lambda2");
    finite_nonneg(lambda_sep, "lambda_sep");
    finite_nonneg(lambda_ctr, "lambda_ctr");
    finite_nonneg(margin, "margin");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
    if (!(tau_sim > 0.0)) throw ConfigError("tau_sim must be > 0");
    if (!(tau_conf > 0.0)) throw ConfigError("tau_conf must be > 0");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (max_epochs == 0) throw ConfigError("max_epochs must be >= 1");
    if (patience == 0) throw ConfigError("patience must be >= 1");
    if (projection_interval == 0) throw ConfigError("projection_interval must be >= 1");
    if (prototypes_per_class == 0) throw ConfigError("prototypes_per_class must be >= 1");
    if (k == 0 || k > kNumClasses * prototypes_per_class)
      throw ConfigError("k must lie in [1, " + std::to_string(kNumClasses * prototypes_per_class) + "]");
    if (embedding_dim == 0) throw ConfigError("embedding_dim must be >= 1");
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.encoder.embedding_dim = embedding_dim;
    m.encoder.norm = norm;
    m.prototypes_per_class = prototypes_per_class;
    m.tau_sim = tau_sim;
    m.no_gate = no_gate;
    m.no_cross_attention = no_cross_attention;
    m.no_prototypes = no_prototypes;
    return m;
  }

  LossWeights loss_weights() const {
    LossWeights w;
    w.lambda1 = no_multitask ? 0.0 : lambda1;
    w.lambda2 = no_prototypes ? 0.0 : lambda2;
    w.proto.tau_sim = tau_sim;
    w.proto.margin = margin;
    w.proto.lambda_sep = lambda_sep;
    w.proto.lambda_ctr = lambda_ctr;
    return w;
  }
};

NLOHMANN_JSON_SERIALIZE_ENUM(NormKind, {{NormKind::Batch, "batch"}, {NormKind::Feature, "feature"}})

#define PMX_TRAIN_CONFIG_FIELDS(X)                                                                            \
  X(lr_image) X(lr_tabular) X(lr_prototypes) X(weight_decay) X(beta1) X(beta2) X(adam_eps) X(lambda1)        \
  X(lambda2) X(lambda_sep) X(lambda_ctr) X(margin) X(tau_sim) X(tau_conf) X(k) X(batch_size) X(max_epochs)   \
  X(patience) X(projection_interval) X(prototypes_per_class) X(embedding_dim) X(norm) X(seed) X(no_gate)     \
  X(no_multitask) X(no_cross_attention) X(no_prototypes) X(projected_selection)

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json::object();
#define PMX_PUT(f) j[#f] = c.f;
  PMX_TRAIN_CONFIG_FIELDS(PMX_PUT)
#undef PMX_PUT
}

/// Reads the fields present in `j` over the current values; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
#define PMX_KNOWN(f) known = known || it.key() == #f;
    PMX_TRAIN_CONFIG_FIELDS(PMX_KNOWN)
#undef PMX_KNOWN
    if (!known) throw ConfigError("unknown training config key '" + it.key() + "'");
  }
  try {
#define PMX_GET(f) if (j.contains(#f)) j.at(#f).get_to(c.f);
    PMX_TRAIN_CONFIG_FIELDS(PMX_GET)
#undef PMX_GET
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid training config value: ") + e.what());
  }
}

struct EpochRecord {
  std::size_t epoch = 0; // 1-based
  double loss_total = 0.0;
  double loss_cls = 0.0;
  double loss_reg = 0.0;
  double loss_proto = 0.0;
  double loss_class = 0.0;
  double loss_sep = 0.0;
  double loss_center = 0.0;
  double val_accuracy = 0.0;
  bool projected = false;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EpochRecord, epoch, loss_total, loss_cls, loss_reg, loss_proto, loss_class,
                                   loss_sep, loss_center, val_accuracy, projected)

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
  bool early_stopped = false;
  std::optional<double> test_accuracy_before_projection; // restored best state, prior to the final projection
  std::optional<double> test_accuracy;                   // final model
};

/// Everything inference and explanation need from a training run.
struct TrainedModel {
  TrainConfig config;
  Model model;
  Standardizer standardizer;
  std::array<ClinicalFeatures, kNumClasses> class_norms{}; // raw per-class train means
  TrainHistory history;
  // Mean k-NN confidence of correct and incorrect validation predictions (audit commentary).
  std::optional<double> reference_confidence_correct;
  std::optional<double> reference_confidence_incorrect;
  std::string rng_state;
};

/// Raw (unstandardized) per-class means of the clinical features.
inline std::array<ClinicalFeatures, kNumClasses> class_norms(std::span<const PatientCase> train) {
  std::array<ClinicalFeatures, kNumClasses> out{};
  std::array<double, kNumClasses> count{};
  for (const auto& c : train) {
    auto& n = out[static_cast<std::size_t>(c.label)];
    for (std::size_t j = 0; j < kClinicalDim; ++j) n[j] += c.clinical[j];
    count[static_cast<std::size_t>(c.label)] += 1.0;
  }
  for (std::size_t k = 0; k < kNumClasses; ++k)
    if (count[k] > 0)
      for (std::size_t j = 0; j < kClinicalDim; ++j) out[k][j] /= count[k];
  return out;
}

/// Predictions along the model's primary path: prototype k-NN, or the classifier head when
/// prototypes are disabled.
inline std::vector<Label> predict_primary(Model& model, const Batch& batch, std::size_t k, double tau_conf) {
  if (model.config().no_prototypes) return predict_head(model, batch);
  std::vector<Label> out;
  for (const auto& r : predict_knn(model, batch, k, tau_conf)) out.push_back(r.prediction);
  return out;
}

/// Per-epoch progress callback: (record, epochs planned).
using EpochCallback = std::function<void(const EpochRecord&, std::size_t)>;

namespace detail {

struct Snapshot {
  std::vector<Matrix> tensors;
  std::vector<std::optional<PrototypeSource>> sources;
  bool initialized = false;
};

inline Snapshot take_snapshot(Model& m) {
  Snapshot s;
  for (auto& t : m.state()) s.tensors.push_back(*t.value);
  s.sources = m.bank().sources;
  s.initialized = m.bank().initialized;
  return s;
}

inline void restore_snapshot(Model& m, const Snapshot& s) {
  auto st = m.state();
  for (std::size_t i = 0; i < st.size(); ++i) *st[i].value = s.tensors[i];
  m.bank().sources = s.sources;
  m.bank().initialized = s.initialized;
}

inline void check_finite(const LossBreakdown& b, std::size_t epoch) {
  const std::pair<const char*, double> terms[] = {
      {"L_cls", b.cls}, {"L_reg", b.reg}, {"L_class", b.proto_terms.classification()}, {"L_sep", b.proto_terms.sep},
      {"L_center", b.proto_terms.center}, {"total", b.total}};
  for (auto [name, v] : terms)
    if (!std::isfinite(v))
      throw TrainingError("training diverged at epoch " + std::to_string(epoch) + ": " + name + " is not finite");
}

inline void project(Model& model, const Batch& train_batch, std::span<const PatientCase> train) {
  project_prototypes(model.bank(), model.representations(train_batch, train));
}

} // namespace detail

/// Trains on split.train, selecting on split.val; split.test (if non-empty) is scored at the end.
inline TrainedModel train(const DatasetSplit& split, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (split.train.size() < 2) throw DataError("training partition needs at least 2 cases");
  if (split.val.empty()) throw DataError("validation partition is empty");
  if (split.train.front().embedding.size() != cfg.embedding_dim)
    throw DataError("embedding width " + std::to_string(split.train.front().embedding.size()) +
                    " does not match configured embedding_dim " + std::to_string(cfg.embedding_dim));

  TrainedModel out{cfg, Model(cfg.model_config(), cfg.seed), split.standardizer, class_norms(split.train), {}, {}, {}, {}};
  Model& model = out.model;
  const Batch train_batch = make_batch(split.train, split.standardizer);
  const Batch val_batch = make_batch(split.val, split.standardizer);
  const LossWeights weights = cfg.loss_weights();

  // A frozen image stack keeps its normalization statistics as well.
  if (cfg.lr_image == 0.0)
    for (auto& l : model.image_encoder().net().layers())
      if (auto* n = std::get_if<Norm>(&l.kind)) n->momentum = 1.0;

  if (!cfg.no_prototypes) init_kmeans(model.bank(), model.representations(train_batch, split.train), cfg.seed);

  auto groups = model.param_groups(cfg.lr_image, cfg.lr_tabular, cfg.lr_prototypes);
  AdamWOptions adam{cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay};
  const std::size_t n = split.train.size();
  std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  if (per_epoch > 1 && n % cfg.batch_size == 1) --per_epoch; // a lone trailing case joins the previous batch
  const CosineSchedule schedule{per_epoch * cfg.max_epochs};

  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  detail::Snapshot best;
  double best_acc = -1.0;
  auto& hist = out.history;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    double seen = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t begin = b * cfg.batch_size;
      const std::size_t end = b + 1 == per_epoch ? n : begin + cfg.batch_size;
      const Batch batch = train_batch.rows(std::span(order).subspan(begin, end - begin));
      model.zero_grad();
      auto loss = total_loss(model, batch, weights, Mode::Train, rng, true);
      detail::check_finite(loss, epoch);
      optimizer_step(groups, adam, step++, schedule);
      if (!cfg.no_prototypes) model.bank().normalize();

      const double w = static_cast<double>(batch.size());
      seen += w;
      rec.loss_total += w * loss.total;
      rec.loss_cls += w * loss.cls;
      rec.loss_reg += w * loss.reg;
      rec.loss_proto += w * loss.proto;
      rec.loss_class += w * loss.proto_terms.classification();
      rec.loss_sep += w * loss.proto_terms.sep;
      rec.loss_center += w * loss.proto_terms.center;
    }
    for (double* v : {&rec.loss_total, &rec.loss_cls, &rec.loss_reg, &rec.loss_proto, &rec.loss_class, &rec.loss_sep,
                      &rec.loss_center})
      *v /= seen;

    if (!cfg.no_prototypes && epoch % cfg.projection_interval == 0) {
      detail::project(model, train_batch, split.train);
      rec.projected = true;
    }
    if (!cfg.no_prototypes && cfg.projected_selection && !rec.projected) {
      auto& bank = model.bank();
      const Matrix img = bank.image.value, tab = bank.tabular.value, fused = bank.fused.value;
      const auto sources = bank.sources;
      detail::project(model, train_batch, split.train);
      rec.val_accuracy = accuracy(predict_primary(model, val_batch, cfg.k, cfg.tau_conf), val_batch.labels);
      bank.image.value = img;
      bank.tabular.value = tab;
      bank.fused.value = fused;
      bank.sources = sources;
    } else {
      rec.val_accuracy = accuracy(predict_primary(model, val_batch, cfg.k, cfg.tau_conf), val_batch.labels);
    }
    hist.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec, cfg.max_epochs);

    if (rec.val_accuracy > best_acc) {
      best_acc = rec.val_accuracy;
      hist.best_epoch = epoch;
      best = detail::take_snapshot(model);
    } else if (epoch - hist.best_epoch >= cfg.patience) {
      hist.early_stopped = true;
      break;
    }
  }
  hist.best_val_accuracy = best_acc;

  detail::restore_snapshot(model, best);
  model.round_to_float(); // the checkpoint precision; loaded models reproduce this state exactly

  std::optional<Batch> test_batch;
  if (!split.test.empty()) {
    test_batch = make_batch(split.test, split.standardizer);
    hist.test_accuracy_before_projection =
        accuracy(predict_primary(model, *test_batch, cfg.k, cfg.tau_conf), test_batch->labels);
  }
  if (!cfg.no_prototypes) detail::project(model, train_batch, split.train);
  if (test_batch) hist.test_accuracy = accuracy(predict_primary(model, *test_batch, cfg.k, cfg.tau_conf), test_batch->labels);

  if (!cfg.no_prototypes) {
    double sc = 0.0, si = 0.0;
    std::size_t nc = 0, ni = 0;
    auto res = predict_knn(model, val_batch, cfg.k, cfg.tau_conf);
    for (std::size_t i = 0; i < res.size(); ++i) {
      const double c = confidence(res[i]);
      if (static_cast<int>(res[i].prediction) == val_batch.labels[i]) { sc += c; ++nc; }
      else { si += c; ++ni; }
    }
    if (nc) out.reference_confidence_correct = sc / static_cast<double>(nc);
    if (ni) out.reference_confidence_incorrect = si / static_cast<double>(ni);
  }
  std::ostringstream rs;
  rs << rng;
  out.rng_state = rs.str();
  return out;
}

} // namespace pmx
