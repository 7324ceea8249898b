#pragma once

// The full network: encoders, fusion, gate, prototype bank and the two task heads,
// plus the multi-task objective L_cls + lambda1 L_reg + lambda2 L_proto.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "pmx/dataset.hpp"
#include "pmx/encoders.hpp"
#include "pmx/nn.hpp"
#include "pmx/prototypes.hpp"

namespace pmx {

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t prototypes_per_class = 6;
  double tau_sim = 0.07;
  bool no_gate = false;            // alpha fixed at 0.5
  bool no_cross_attention = false; // fusion by concatenation + dense map
  bool no_prototypes = false;      // classifier head only

  void validate() const {
    const auto& e = encoder;
    if (e.embedding_dim == 0 || e.image_hidden == 0 || e.image_out == 0 || e.tabular_hidden == 0 || e.image_proto_dim == 0)
      throw ConfigError("model widths must be positive");
    if (prototypes_per_class == 0) throw ConfigError("prototypes_per_class must be >= 1");
    if (!(tau_sim > 0.0)) throw ConfigError("tau_sim must be > 0");
  }
};

/// Standardized model inputs for a set of cases.
struct Batch {
  Matrix embeddings;        // (B, D)
  Matrix clinical;          // (B, 11)
  std::vector<int> labels;  // class indices
  Eigen::VectorXd t_scores; // raw T-scores

  Eigen::Index size() const { return embeddings.rows(); }

  Batch rows(std::span<const std::size_t> idx) const {
    Batch b;
    const auto n = static_cast<Eigen::Index>(idx.size());
    b.embeddings.resize(n, embeddings.cols());
    b.clinical.resize(n, clinical.cols());
    b.t_scores.resize(n);
    b.labels.resize(idx.size());
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto src = static_cast<Eigen::Index>(idx[static_cast<std::size_t>(i)]);
      b.embeddings.row(i) = embeddings.row(src);
      b.clinical.row(i) = clinical.row(src);
      b.t_scores(i) = t_scores(src);
      b.labels[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(src)];
    }
    return b;
  }
};

inline Batch make_batch(std::span<const PatientCase> cases, const Standardizer& std_) {
  Batch b;
  const auto n = static_cast<Eigen::Index>(cases.size());
  const auto d = static_cast<Eigen::Index>(std_.embedding_mean.size());
  b.embeddings.resize(n, d);
  b.clinical.resize(n, static_cast<Eigen::Index>(kClinicalDim));
  b.t_scores.resize(n);
  b.labels.resize(cases.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& c = cases[static_cast<std::size_t>(i)];
    auto e = std_.embedding(c.embedding);
    b.embeddings.row(i) = Eigen::Map<const RowVector>(e.data(), d);
    auto x = std_.clinical(c.clinical);
    for (std::size_t j = 0; j < kClinicalDim; ++j) b.clinical(i, static_cast<Eigen::Index>(j)) = x[j];
    b.t_scores(i) = c.t_score;
    b.labels[static_cast<std::size_t>(i)] = static_cast<int>(c.label);
  }
  return b;
}

/// Everything the forward pass produces for a batch.
struct Representations {
  Matrix h_img;  // (B, 256)
  Matrix h_tab;  // (B, 64), also the tabular prototype-space representation
  Matrix fused;  // (B, 256)
  Matrix alpha;  // (B, 1)
  Matrix z_img;  // (B, 128) image prototype-space representation
  Matrix logits; // (B, 3)
  Matrix t_pred; // (B, 1)
};

/// Gradients of the objective with respect to the forward outputs. Empty matrices are skipped.
struct OutputGrads {
  Matrix h_tab, fused, alpha, z_img, logits, t_pred;
};

struct NamedTensor {
  std::string name;
  Matrix* value;
  bool prototype = false; // persisted at 64-bit
};

class Model {
public:
  Model() = default;
  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    const auto& e = cfg.encoder;
    image_ = ImageEncoder(e);
    tabular_ = TabularEncoder(e);
    fusion_ = FusionBlock(e, cfg.no_cross_attention);
    gate_ = Gate(e);
    bank_ = PrototypeBank(cfg.prototypes_per_class, e.image_out, e.image_proto_dim, e.tabular_hidden, e.image_out, cfg.tau_sim);
    cls_head_ = Dense("head.classifier", static_cast<Eigen::Index>(e.image_out), static_cast<Eigen::Index>(kNumClasses));
    reg_head_ = Dense("head.regression", static_cast<Eigen::Index>(e.image_out), 1);

    Rng rng(seed);
    image_.init(rng);
    tabular_.init(rng);
    fusion_.init(rng);
    bank_.image_head.init_uniform(rng);
    cls_head_.init_uniform(rng);
    reg_head_.init_uniform(rng);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Param* p : bank_.vector_params())
      for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = normal(rng);
    bank_.normalize();
  }

  const ModelConfig& config() const { return cfg_; }
  ImageEncoder& image_encoder() { return image_; }
  TabularEncoder& tabular_encoder() { return tabular_; }
  FusionBlock& fusion() { return fusion_; }
  Gate& gate() { return gate_; }
  PrototypeBank& bank() { return bank_; }
  const PrototypeBank& bank() const { return bank_; }
  Dense& classifier_head() { return cls_head_; }
  Dense& regression_head() { return reg_head_; }

  Representations forward(const Matrix& embeddings, const Matrix& clinical, Mode mode, Rng& rng) {
    if (embeddings.rows() != clinical.rows()) throw ShapeError("embedding and clinical batches differ in size");
    Representations r;
    r.h_img = image_.forward(embeddings, mode, rng);
    r.h_tab = tabular_.forward(clinical, mode, rng);
    r.fused = fusion_.forward(r.h_img, r.h_tab);
    r.alpha = cfg_.no_gate ? Matrix::Constant(r.h_img.rows(), 1, 0.5) : gate_.forward(r.h_img, r.h_tab);
    r.z_img = bank_.image_head.forward(r.h_img, mode, rng);
    r.logits = cls_head_.forward(r.fused, mode, rng);
    r.t_pred = reg_head_.forward(r.fused, mode, rng);
    return r;
  }

  Representations forward(const Batch& b, Mode mode, Rng& rng) { return forward(b.embeddings, b.clinical, mode, rng); }

  /// Eval-mode forward in fixed-size chunks.
  Representations infer(const Batch& b, Eigen::Index chunk = 1024) {
    Rng rng(0);
    Representations out;
    const Eigen::Index n = b.size();
    if (n == 0) return forward(b.embeddings, b.clinical, Mode::Eval, rng);
    std::vector<Representations> parts;
    for (Eigen::Index s = 0; s < n; s += chunk) {
      const Eigen::Index len = std::min(chunk, n - s);
      parts.push_back(forward(b.embeddings.middleRows(s, len), b.clinical.middleRows(s, len), Mode::Eval, rng));
    }
    auto stack = [&](auto member) {
      Matrix m(n, (parts.front().*member).cols());
      Eigen::Index row = 0;
      for (auto& p : parts) {
        m.middleRows(row, (p.*member).rows()) = p.*member;
        row += (p.*member).rows();
      }
      return m;
    };
    out.h_img = stack(&Representations::h_img);
    out.h_tab = stack(&Representations::h_tab);
    out.fused = stack(&Representations::fused);
    out.alpha = stack(&Representations::alpha);
    out.z_img = stack(&Representations::z_img);
    out.logits = stack(&Representations::logits);
    out.t_pred = stack(&Representations::t_pred);
    return out;
  }

  /// Propagates output gradients to every parameter; returns (dL/d embeddings, dL/d clinical).
  std::pair<Matrix, Matrix> backward(const OutputGrads& g) {
    Matrix d_fused;
    auto add = [](Matrix& acc, const Matrix& x) {
      if (x.size() == 0) return;
      if (acc.size() == 0) acc = x;
      else acc += x;
    };
    add(d_fused, g.fused);
    if (g.logits.size()) add(d_fused, cls_head_.backward(g.logits));
    if (g.t_pred.size()) add(d_fused, reg_head_.backward(g.t_pred));

    Matrix d_hi, d_ht;
    add(d_ht, g.h_tab);
    if (g.z_img.size()) add(d_hi, bank_.image_head.backward(g.z_img));
    if (d_fused.size()) {
      auto [a, b] = fusion_.backward(d_fused);
      add(d_hi, a);
      add(d_ht, b);
    }
    if (g.alpha.size() && !cfg_.no_gate) {
      auto [a, b] = gate_.backward(g.alpha, static_cast<Eigen::Index>(cfg_.encoder.image_out));
      add(d_hi, a);
      add(d_ht, b);
    }
    Matrix d_emb = d_hi.size() ? image_.backward(d_hi) : Matrix();
    Matrix d_clin = d_ht.size() ? tabular_.backward(d_ht) : Matrix();
    return {d_emb, d_clin};
  }

  /// Parameters that receive gradients under the current configuration, in three groups:
  /// image projection, tabular side (tabular encoder, fusion, gate, heads), prototypes.
  std::vector<ParamGroup> param_groups(double lr_image, double lr_tabular, double lr_prototypes) {
    ParamGroup img{"image", image_.params(), lr_image};
    ParamGroup tab{"tabular", tabular_.params(), lr_tabular};
    for (Param* p : fusion_.params()) tab.tensors.push_back(p);
    if (!cfg_.no_gate)
      for (Param* p : gate_.params()) tab.tensors.push_back(p);
    cls_head_.collect(tab.tensors);
    reg_head_.collect(tab.tensors);
    std::vector<ParamGroup> groups{img, tab};
    if (!cfg_.no_prototypes) {
      ParamGroup proto{"prototypes", bank_.vector_params(), lr_prototypes};
      bank_.image_head.collect(proto.tensors);
      groups.push_back(proto);
    }
    return groups;
  }

  std::vector<Param*> all_params() {
    std::vector<Param*> out = image_.params();
    for (Param* p : tabular_.params()) out.push_back(p);
    fusion_.up().collect(out);
    fusion_.query().collect(out);
    fusion_.key().collect(out);
    fusion_.value().collect(out);
    fusion_.out().collect(out);
    fusion_.concat().collect(out);
    for (Param* p : gate_.params()) out.push_back(p);
    bank_.image_head.collect(out);
    cls_head_.collect(out);
    reg_head_.collect(out);
    for (Param* p : bank_.vector_params()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (Param* p : all_params()) p->zero_grad();
  }

  /// Every persistent tensor (parameters and normalization running statistics) in a fixed order.
  std::vector<NamedTensor> state() {
    std::vector<NamedTensor> out;
    auto add_stack = [&](Sequential& s) {
      std::function<void(std::vector<Layer>&)> walk = [&](std::vector<Layer>& layers) {
        for (auto& l : layers) {
          if (auto* d = std::get_if<Dense>(&l.kind)) {
            out.push_back({d->weight.name, &d->weight.value});
            out.push_back({d->bias.name, &d->bias.value});
          } else if (auto* nrm = std::get_if<Norm>(&l.kind)) {
            out.push_back({nrm->scale.name, &nrm->scale.value});
            out.push_back({nrm->shift.name, &nrm->shift.value});
            out.push_back({nrm->name + ".running_mean", &nrm->running_mean});
            out.push_back({nrm->name + ".running_var", &nrm->running_var});
          } else if (auto* body = std::get_if<std::vector<Layer>>(&l.kind)) {
            walk(*body);
          }
        }
      };
      walk(s.layers());
    };
    add_stack(image_.net());
    add_stack(tabular_.first());
    add_stack(tabular_.residual());
    for (Dense* d : {&fusion_.up(), &fusion_.query(), &fusion_.key(), &fusion_.value(), &fusion_.out(),
                     &fusion_.concat(), &gate_.dense(), &bank_.image_head, &cls_head_, &reg_head_}) {
      out.push_back({d->weight.name, &d->weight.value});
      out.push_back({d->bias.name, &d->bias.value});
    }
    for (Param* p : bank_.vector_params()) out.push_back({p->name, &p->value, true});
    return out;
  }

  /// Rounds every non-prototype tensor to 32-bit precision (the checkpoint storage precision).
  void round_to_float() {
    for (auto& t : state()) {
      if (t.prototype) continue;
      for (Eigen::Index i = 0; i < t.value->size(); ++i)
        t.value->data()[i] = static_cast<double>(static_cast<float>(t.value->data()[i]));
    }
  }

  /// Unit-normalized prototype-space representations of a batch (Eval mode).
  ReprSet representations(const Batch& b, std::span<const PatientCase> cases) {
    auto r = infer(b);
    ReprSet s;
    s.image = detail::unit_rows(r.z_img).unit;
    s.tabular = detail::unit_rows(r.h_tab).unit;
    s.fused = detail::unit_rows(r.fused).unit;
    for (const auto& c : cases) {
      s.labels.push_back(c.label);
      s.sources.push_back({c.patient_id, c.t_score, c.clinical});
    }
    return s;
  }

private:
  ModelConfig cfg_;
  ImageEncoder image_;
  TabularEncoder tabular_;
  FusionBlock fusion_;
  Gate gate_;
  PrototypeBank bank_;
  Dense cls_head_;
  Dense reg_head_;
};

// ---------------------------------------------------------------------------
// Multi-task objective

struct LossWeights {
  double lambda_cls = 1.0; // 1 in training; other values isolate terms for gradient checks
  double lambda1 = 0.3;    // regression
  double lambda2 = 1.0; // prototype objective
  ProtoLossOptions proto;
};

struct LossBreakdown {
  double cls = 0.0;
  double reg = 0.0;
  ProtoLossTerms proto_terms;
  double proto = 0.0;
  double total = 0.0;
};

/// Softmax cross-entropy averaged over rows; optional gradient (already divided by B).
inline double cross_entropy(const Matrix& logits, std::span<const int> labels, Matrix* grad) {
  const Eigen::Index n = logits.rows();
  double loss = 0.0;
  if (grad) grad->resize(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mx = logits.row(i).maxCoeff();
    RowVector e = (logits.row(i).array() - mx).exp();
    const double z = e.sum();
    const int y = labels[static_cast<std::size_t>(i)];
    loss += -(logits(i, y) - mx - std::log(z));
    if (grad) {
      grad->row(i) = e / z;
      (*grad)(i, y) -= 1.0;
    }
  }
  if (grad) *grad /= static_cast<double>(n);
  return loss / static_cast<double>(n);
}

/// Evaluates L_cls + lambda1 L_reg + lambda2 L_proto on a batch; with `backward`, accumulates
/// gradients into the model parameters and returns input gradients through `input_grads`.
inline LossBreakdown total_loss(Model& model, const Batch& batch, const LossWeights& w, Mode mode, Rng& rng,
                                bool backward, std::pair<Matrix, Matrix>* input_grads = nullptr) {
  auto r = model.forward(batch, mode, rng);
  LossBreakdown out;
  OutputGrads g;

  out.cls = cross_entropy(r.logits, batch.labels, backward ? &g.logits : nullptr);
  if (backward) g.logits *= w.lambda_cls;

  Eigen::VectorXd diff = r.t_pred.col(0) - batch.t_scores;
  const auto n = static_cast<double>(batch.size());
  out.reg = diff.squaredNorm() / n;
  if (backward) g.t_pred = (2.0 * w.lambda1 / n) * diff;

  if (model.bank().initialized) {
    ProtoLossGrads pg;
    ProtoLossInputs in{r.z_img, r.h_tab, r.fused, r.alpha, batch.labels};
    const bool grad_proto = backward && w.lambda2 != 0.0;
    out.proto_terms = proto_loss(in, model.bank(), w.proto, grad_proto ? &pg : nullptr, w.lambda2);
    out.proto = out.proto_terms.total(w.proto);
    if (grad_proto) {
      g.z_img = std::move(pg.z_img);
      g.h_tab = std::move(pg.z_tab);
      g.fused = std::move(pg.z_fused);
      g.alpha = std::move(pg.alpha);
    }
  }

  out.total = w.lambda_cls * out.cls + w.lambda1 * out.reg + w.lambda2 * out.proto;
  if (backward) {
    auto grads = model.backward(g);
    if (input_grads) *input_grads = std::move(grads);
  }
  return out;
}

} // namespace pmx
