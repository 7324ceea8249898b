#pragma once

// Finite-difference verification of every training objective on small random models.

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

#include "pmx/model.hpp"

namespace pmx {

enum class Objective { Classification, Regression, ProtoClass, ProtoSeparation, ProtoCenter, Total };

inline constexpr std::array<Objective, 6> kAllObjectives = {Objective::Classification, Objective::Regression,
                                                           Objective::ProtoClass,     Objective::ProtoSeparation,
                                                           Objective::ProtoCenter,    Objective::Total};

inline std::string_view objective_name(Objective o) {
  switch (o) {
  case Objective::Classification: return "L_cls";
  case Objective::Regression: return "L_reg";
  case Objective::ProtoClass: return "L_class";
  case Objective::ProtoSeparation: return "L_sep";
  case Objective::ProtoCenter: return "L_center";
  case Objective::Total: return "L_total";
  }
  return "?";
}

/// Loss weights that leave only the requested term (with unit weight) in the objective.
inline LossWeights isolate(Objective o) {
  LossWeights w;
  if (o == Objective::Total) return w;
  w.lambda_cls = w.lambda1 = w.lambda2 = 0.0;
  w.proto.lambda_class = w.proto.lambda_sep = w.proto.lambda_ctr = 0.0;
  switch (o) {
  case Objective::Classification: w.lambda_cls = 1.0; break;
  case Objective::Regression: w.lambda1 = 1.0; break;
  case Objective::ProtoClass: w.lambda2 = w.proto.lambda_class = 1.0; break;
  case Objective::ProtoSeparation: w.lambda2 = w.proto.lambda_sep = 1.0; break;
  case Objective::ProtoCenter: w.lambda2 = w.proto.lambda_ctr = 1.0; break;
  case Objective::Total: break;
  }
  return w;
}

struct GradCheckCase {
  std::uint64_t seed = 0;
  Objective objective = Objective::Total;
  std::string variant;
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  bool pass() const {
    return !cases.empty() && std::all_of(cases.begin(), cases.end(), [](const auto& c) { return c.pass; });
  }
};

namespace detail {

/// Smallest |input| over every ReLU in a layer stack, replaying `forward` on copies of the
/// layers with the same random stream. `h` is replaced by the stack output.
inline double relu_margin(std::vector<Layer> layers, Matrix& h, Mode mode, Rng& rng) {
  double margin = std::numeric_limits<double>::infinity();
  for (auto& l : layers) {
    if (std::holds_alternative<ReLU>(l.kind) && h.size()) margin = std::min(margin, h.cwiseAbs().minCoeff());
    if (auto* body = std::get_if<std::vector<Layer>>(&l.kind)) {
      Rng probe = rng;
      Matrix inner = h;
      margin = std::min(margin, relu_margin(*body, inner, mode, probe));
    }
    h = forward_layer(l, h, mode, rng);
  }
  return margin;
}

/// Smallest gap between the competing similarities whose ordering the prototype loss depends on.
inline double switch_margin(const Representations& r, const PrototypeBank& bank, std::span<const int> labels,
                            double margin) {
  auto sims = [](const Matrix& z, const Matrix& p) { return (unit_rows(z).unit * unit_rows(p).unit.transpose()).eval(); };
  Matrix sf = sims(r.fused, bank.fused.value);
  Matrix si = sims(r.z_img, bank.image.value);
  Matrix st = sims(r.h_tab, bank.tabular.value);
  Matrix sg = (si.array().colwise() * r.alpha.col(0).array() + st.array().colwise() * (1.0 - r.alpha.col(0).array())).matrix();
  const std::size_t slots = bank.slots();
  double gap = std::numeric_limits<double>::infinity();
  auto top_two_gap = [&](const Matrix& s, Eigen::Index i, auto&& in_set) {
    double a = -1e9, b = -1e9;
    for (Eigen::Index col = 0; col < s.cols(); ++col) {
      if (!in_set(static_cast<std::size_t>(col))) continue;
      const double v = s(i, col);
      if (v > a) { b = a; a = v; }
      else if (v > b) b = v;
    }
    return std::pair{a, a - b};
  };
  for (Eigen::Index i = 0; i < sf.rows(); ++i) {
    const auto y = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      auto in_class = [&](std::size_t col) { return col / slots == c; };
      if (slots > 1) {
        gap = std::min(gap, top_two_gap(sf, i, in_class).second);
        gap = std::min(gap, top_two_gap(sg, i, in_class).second);
      }
    }
    const double same = top_two_gap(sf, i, [&](std::size_t col) { return col / slots == y; }).first;
    auto [other, g2] = top_two_gap(sf, i, [&](std::size_t col) { return col / slots != y; });
    gap = std::min(gap, g2);
    gap = std::min(gap, std::abs(margin + other - same));
  }
  return gap;
}

} // namespace detail

/// For each seed, builds a small model (cycling through the ablation variants), draws a batch clear
/// of ReLU kinks and similarity switches, and compares analytic with central-difference gradients
/// of every objective term with respect to all parameters and both inputs.
inline GradCheckReport check_objectives(std::size_t seeds, double h = 1e-4, double tol = 1e-4) {
  GradCheckReport report;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    Rng rng(seed);
    std::uniform_int_distribution<int> dim(3, 7);
    ModelConfig cfg;
    cfg.encoder.embedding_dim = static_cast<std::size_t>(dim(rng)) + 3;
    cfg.encoder.image_hidden = static_cast<std::size_t>(dim(rng));
    cfg.encoder.image_out = static_cast<std::size_t>(dim(rng));
    cfg.encoder.tabular_hidden = static_cast<std::size_t>(dim(rng));
    cfg.encoder.image_proto_dim = static_cast<std::size_t>(dim(rng));
    cfg.prototypes_per_class = 2;
    const int variant = static_cast<int>(seed % 3);
    cfg.no_cross_attention = variant == 1;
    cfg.no_gate = variant == 2;
    const std::string variant_name = variant == 0 ? "full" : variant == 1 ? "concat" : "no-gate";

    Model model(cfg, seed);
    model.gate().dense().init_uniform(rng); // a non-trivial gate exercises the alpha path
    const Eigen::Index n = 6;
    std::normal_distribution<double> normal(0.0, 1.0);
    auto draw = [&](Eigen::Index r, Eigen::Index c) {
      Matrix m(r, c);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
      return m;
    };

    Batch batch;
    batch.labels = {0, 1, 2, 0, 1, 2};
    batch.t_scores.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) batch.t_scores(i) = normal(rng) - 1.5;
    const std::uint64_t mask_seed = seed * 7919 + 1;
    for (int attempt = 0; attempt < 2000; ++attempt) {
      batch.embeddings = draw(n, static_cast<Eigen::Index>(cfg.encoder.embedding_dim));
      batch.clinical = draw(n, static_cast<Eigen::Index>(kClinicalDim));
      // Prototypes: random unit vectors, away from the samples.
      for (Param* p : model.bank().vector_params()) p->value = draw(p->value.rows(), p->value.cols());
      model.bank().normalize();
      model.bank().initialized = true;

      Rng r1(mask_seed);
      Matrix hi = batch.embeddings, ht = batch.clinical;
      double m = detail::relu_margin(model.image_encoder().net().layers(), hi, Mode::Train, r1);
      m = std::min(m, detail::relu_margin(model.tabular_encoder().first().layers(), ht, Mode::Train, r1));
      m = std::min(m, detail::relu_margin(model.tabular_encoder().residual().layers(), ht, Mode::Train, r1));
      Rng r4(mask_seed);
      auto reps = model.forward(batch, Mode::Train, r4);
      m = std::min(m, detail::switch_margin(reps, model.bank(), batch.labels, LossWeights{}.proto.margin));
      if (m > 5e-3) break;
    }

    for (Objective obj : kAllObjectives) {
      const LossWeights w = isolate(obj);
      model.zero_grad();
      std::pair<Matrix, Matrix> input_grads;
      Rng r(mask_seed);
      total_loss(model, batch, w, Mode::Train, r, true, &input_grads);

      std::vector<GradTarget> targets;
      for (Param* p : model.all_params()) targets.push_back({p->name, &p->value, p->grad});
      targets.push_back({"input.embedding", &batch.embeddings, input_grads.first});
      targets.push_back({"input.clinical", &batch.clinical, input_grads.second});
      auto loss = [&] {
        Rng rr(mask_seed);
        return total_loss(model, batch, w, Mode::Train, rr, false).total;
      };
      GradCheckCase c;
      c.seed = seed;
      c.objective = obj;
      c.variant = variant_name;
      c.entries = gradient_check(targets, loss, h, tol);
      c.pass = true;
      for (const auto& e : c.entries) {
        c.max_rel_error = std::max(c.max_rel_error, e.rel_error);
        c.pass = c.pass && e.pass;
      }
      report.cases.push_back(std::move(c));
    }
  }
  return report;
}

} // namespace pmx
