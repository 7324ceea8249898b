#pragma once

// Prototype banks in the image (128), tabular (64) and fused (256) spaces, cosine similarities,
// the composite prototype loss, k-means initialization and projection onto training cases.

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pmx/dataset.hpp"
#include "pmx/kmeans.hpp"
#include "pmx/nn.hpp"

namespace pmx {

/// The training case a prototype was projected onto.
struct PrototypeSource {
  std::string patient_id;
  double t_score = 0.0;
  ClinicalFeatures clinical;
  bool operator==(const PrototypeSource&) const = default;
};

struct Prototype {
  Label class_id = Label::Normal;
  std::size_t slot = 0;
  RowVector vec_img;
  RowVector vec_tab;
  RowVector vec_fused;
  std::optional<PrototypeSource> source;
};

namespace detail {

struct UnitRows {
  Matrix unit;
  Eigen::VectorXd norms;
};

inline UnitRows unit_rows(const Matrix& m) {
  UnitRows u;
  u.norms = m.rowwise().norm().cwiseMax(1e-12);
  u.unit = m.array().colwise() / u.norms.array();
  return u;
}

/// Gradient through row normalization: da = (du - u (du . u)) / |a|.
inline Matrix unit_rows_backward(const UnitRows& u, const Matrix& dunit) {
  Eigen::VectorXd dots = dunit.cwiseProduct(u.unit).rowwise().sum();
  Matrix d = dunit - (u.unit.array().colwise() * dots.array()).matrix();
  return d.array().colwise() / u.norms.array();
}

} // namespace detail

/// Prototype vectors for every (class, slot), stored row-wise at index class * slots + slot,
/// plus the dense head mapping h_i into the image prototype space.
class PrototypeBank {
public:
  PrototypeBank() = default;
  PrototypeBank(std::size_t slots, std::size_t image_width, std::size_t image_dim, std::size_t tabular_dim,
                std::size_t fused_dim, double tau_sim)
      : slots_(slots), tau_sim_(tau_sim) {
    if (slots == 0) throw ConfigError("prototypes per class must be >= 1");
    if (!(tau_sim > 0.0)) throw ConfigError("similarity temperature must be > 0");
    const auto n = static_cast<Eigen::Index>(kNumClasses * slots);
    image = Param("prototypes.image", n, static_cast<Eigen::Index>(image_dim));
    tabular = Param("prototypes.tabular", n, static_cast<Eigen::Index>(tabular_dim));
    fused = Param("prototypes.fused", n, static_cast<Eigen::Index>(fused_dim));
    image_head = Dense("prototypes.image_head", static_cast<Eigen::Index>(image_width), static_cast<Eigen::Index>(image_dim));
    sources.assign(static_cast<std::size_t>(n), std::nullopt);
  }

  Param image;
  Param tabular;
  Param fused;
  Dense image_head;
  std::vector<std::optional<PrototypeSource>> sources;

  std::size_t slots() const { return slots_; }
  std::size_t size() const { return kNumClasses * slots_; }
  double tau_sim() const { return tau_sim_; }
  Label class_of(std::size_t row) const { return static_cast<Label>(row / slots_); }
  std::size_t slot_of(std::size_t row) const { return row % slots_; }
  std::size_t row_of(Label c, std::size_t slot) const { return static_cast<std::size_t>(c) * slots_ + slot; }

  bool initialized = false;

  Prototype prototype(std::size_t row) const {
    const auto r = static_cast<Eigen::Index>(row);
    return Prototype{class_of(row), slot_of(row), image.value.row(r), tabular.value.row(r), fused.value.row(r),
                     sources[row]};
  }

  /// Rescales every prototype vector to unit length.
  void normalize() {
    for (Param* p : {&image, &tabular, &fused}) {
      Eigen::VectorXd n = p->value.rowwise().norm().cwiseMax(1e-12);
      p->value = p->value.array().colwise() / n.array();
    }
  }

  std::vector<Param*> vector_params() { return {&image, &tabular, &fused}; }

private:
  std::size_t slots_ = 6;
  double tau_sim_ = 0.07;
};

inline double cosine(const RowVector& a, const RowVector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw DataError("degenerate representation: zero-norm vector in cosine similarity");
  return a.dot(b) / (na * nb);
}

/// alpha * cos(z_img, p_img) + (1 - alpha) * cos(z_tab, p_tab).
inline double modality_similarity(const RowVector& z_img, const RowVector& z_tab, double alpha, const Prototype& proto) {
  return alpha * cosine(z_img, proto.vec_img) + (1.0 - alpha) * cosine(z_tab, proto.vec_tab);
}

// ---------------------------------------------------------------------------
// Loss

struct ProtoLossOptions {
  double tau_sim = 0.07;
  double margin = 0.2;
  double lambda_sep = 0.5;
  double lambda_ctr = 0.1;
  double lambda_class = 1.0; // 1 in training; other values isolate terms for gradient checks
};

/// Components of the prototype objective. `class_fused` scores classes by their best fused-space
/// prototype; `class_gated` does the same with the gated image/tabular similarity, which is the
/// similarity used at inference.
struct ProtoLossTerms {
  double class_fused = 0.0;
  double class_gated = 0.0;
  double sep = 0.0;
  double center = 0.0;

  double classification() const { return class_fused + class_gated; }
  double total(const ProtoLossOptions& o) const {
    return o.lambda_class * classification() + o.lambda_sep * sep + o.lambda_ctr * center;
  }
};

struct ProtoLossInputs {
  const Matrix& z_img;   // (B, image_dim), unnormalized
  const Matrix& z_tab;   // (B, tabular_dim)
  const Matrix& z_fused; // (B, fused_dim)
  const Matrix& alpha;   // (B, 1)
  std::span<const int> labels;
};

struct ProtoLossGrads {
  Matrix z_img, z_tab, z_fused, alpha;
};

namespace detail {

/// Softmax cross-entropy over class scores built from per-class best slots; accumulates dL/dS.
inline double class_score_ce(const Matrix& sims, std::span<const int> labels, std::size_t slots, double tau,
                             Matrix* dsims, double scale) {
  const Eigen::Index n = sims.rows();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    std::array<double, kNumClasses> score{};
    std::array<Eigen::Index, kNumClasses> best{};
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      Eigen::Index arg = static_cast<Eigen::Index>(c * slots);
      for (std::size_t k = 1; k < slots; ++k) {
        const auto col = static_cast<Eigen::Index>(c * slots + k);
        if (sims(i, col) > sims(i, arg)) arg = col;
      }
      best[c] = arg;
      score[c] = sims(i, arg) / tau;
    }
    const double mx = *std::max_element(score.begin(), score.end());
    double z = 0.0;
    for (double s : score) z += std::exp(s - mx);
    const int y = labels[static_cast<std::size_t>(i)];
    loss += -(score[static_cast<std::size_t>(y)] - mx - std::log(z));
    if (dsims) {
      for (std::size_t c = 0; c < kNumClasses; ++c) {
        double p = std::exp(score[c] - mx) / z;
        double g = (p - (static_cast<int>(c) == y ? 1.0 : 0.0)) / static_cast<double>(n);
        (*dsims)(i, best[c]) += scale * g / tau;
      }
    }
  }
  return loss / static_cast<double>(n);
}

} // namespace detail

/// L_proto = L_class + lambda_sep * L_sep + lambda_ctr * L_center over a batch.
///
/// L_class: cross-entropy of class scores max_k cos(z, p_{c,k}) / tau_sim (fused and gated).
/// L_sep: mean hinge max(0, margin + s_other - s_same) on fused similarities.
/// L_center: mean squared distance between the unit fused representation and its nearest
/// same-class prototype, 2 - 2 s_same.
///
/// When `grads` is non-null, representation gradients are written there and prototype gradients
/// are accumulated into the bank, both multiplied by `grad_scale`.
inline ProtoLossTerms proto_loss(const ProtoLossInputs& in, PrototypeBank& bank, const ProtoLossOptions& opt,
                                 ProtoLossGrads* grads = nullptr, double grad_scale = 1.0) {
  const Eigen::Index n = in.z_fused.rows();
  const std::size_t slots = bank.slots();
  if (static_cast<std::size_t>(n) != in.labels.size()) throw ShapeError("proto_loss: label count does not match batch");

  auto zf = detail::unit_rows(in.z_fused);
  auto zi = detail::unit_rows(in.z_img);
  auto zt = detail::unit_rows(in.z_tab);
  auto pf = detail::unit_rows(bank.fused.value);
  auto pi = detail::unit_rows(bank.image.value);
  auto pt = detail::unit_rows(bank.tabular.value);

  Matrix sf = zf.unit * pf.unit.transpose();
  Matrix si = zi.unit * pi.unit.transpose();
  Matrix st = zt.unit * pt.unit.transpose();
  Matrix sg = (si.array().colwise() * in.alpha.col(0).array() +
               st.array().colwise() * (1.0 - in.alpha.col(0).array()))
                  .matrix();

  const bool want = grads != nullptr;
  Matrix dsf, dsg;
  if (want) {
    dsf = Matrix::Zero(sf.rows(), sf.cols());
    dsg = Matrix::Zero(sg.rows(), sg.cols());
  }

  ProtoLossTerms t;
  t.class_fused = detail::class_score_ce(sf, in.labels, slots, opt.tau_sim, want ? &dsf : nullptr, opt.lambda_class);
  t.class_gated = detail::class_score_ce(sg, in.labels, slots, opt.tau_sim, want ? &dsg : nullptr, opt.lambda_class);

  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(in.labels[static_cast<std::size_t>(i)]);
    Eigen::Index same = -1, other = -1;
    for (std::size_t r = 0; r < bank.size(); ++r) {
      const auto col = static_cast<Eigen::Index>(r);
      if (r / slots == y) {
        if (same < 0 || sf(i, col) > sf(i, same)) same = col;
      } else if (other < 0 || sf(i, col) > sf(i, other)) {
        other = col;
      }
    }
    const double hinge = opt.margin + sf(i, other) - sf(i, same);
    if (hinge > 0.0) {
      t.sep += hinge * inv_n;
      if (want) {
        dsf(i, other) += opt.lambda_sep * inv_n;
        dsf(i, same) -= opt.lambda_sep * inv_n;
      }
    }
    t.center += (2.0 - 2.0 * sf(i, same)) * inv_n;
    if (want) dsf(i, same) -= 2.0 * opt.lambda_ctr * inv_n;
  }

  if (want) {
    dsf *= grad_scale;
    dsg *= grad_scale;
    Matrix dsi = dsg.array().colwise() * in.alpha.col(0).array();
    Matrix dst = dsg.array().colwise() * (1.0 - in.alpha.col(0).array());
    grads->alpha = dsg.cwiseProduct(si - st).rowwise().sum();

    grads->z_fused = detail::unit_rows_backward(zf, dsf * pf.unit);
    grads->z_img = detail::unit_rows_backward(zi, dsi * pi.unit);
    grads->z_tab = detail::unit_rows_backward(zt, dst * pt.unit);
    bank.fused.grad += detail::unit_rows_backward(pf, dsf.transpose() * zf.unit);
    bank.image.grad += detail::unit_rows_backward(pi, dsi.transpose() * zi.unit);
    bank.tabular.grad += detail::unit_rows_backward(pt, dst.transpose() * zt.unit);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Initialization and projection

/// Unit-normalized representations of a set of cases in the three prototype spaces.
struct ReprSet {
  Matrix image;
  Matrix tabular;
  Matrix fused;
  std::vector<Label> labels;
  std::vector<PrototypeSource> sources;

  std::size_t size() const { return labels.size(); }
};

/// Per class: k-means (k = slots, k-means++ seeding) on the fused representations. Each centroid's
/// image/tabular vectors are the means of the same cluster's members. All vectors unit-normalized.
inline void init_kmeans(PrototypeBank& bank, const ReprSet& reprs, std::uint64_t seed, const KMeansOptions& opt = {}) {
  const std::size_t k = bank.slots();
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    std::vector<Eigen::Index> members;
    for (std::size_t i = 0; i < reprs.size(); ++i)
      if (static_cast<std::size_t>(reprs.labels[i]) == c) members.push_back(static_cast<Eigen::Index>(i));
    if (members.size() < k)
      throw DataError("class '" + std::string(kLabelNames[c]) + "' has " + std::to_string(members.size()) +
                      " training cases, fewer than the " + std::to_string(k) +
                      " prototypes per class; lower prototypes_per_class in the config");
    Matrix pts(static_cast<Eigen::Index>(members.size()), reprs.fused.cols());
    for (std::size_t m = 0; m < members.size(); ++m) pts.row(static_cast<Eigen::Index>(m)) = reprs.fused.row(members[m]);
    auto km = kmeans(pts, k, seed + c, opt);

    for (std::size_t s = 0; s < k; ++s) {
      const auto row = static_cast<Eigen::Index>(bank.row_of(static_cast<Label>(c), s));
      RowVector img = RowVector::Zero(reprs.image.cols());
      RowVector tab = RowVector::Zero(reprs.tabular.cols());
      std::size_t count = 0;
      for (std::size_t m = 0; m < members.size(); ++m) {
        if (km.assignment[m] != s) continue;
        img += reprs.image.row(members[m]);
        tab += reprs.tabular.row(members[m]);
        ++count;
      }
      if (count == 0) {
        // Empty cluster: borrow the member nearest to the centroid.
        Eigen::Index best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (Eigen::Index m = 0; m < pts.rows(); ++m) {
          double d = (pts.row(m) - km.centroids.row(static_cast<Eigen::Index>(s))).squaredNorm();
          if (d < bd) { bd = d; best = m; }
        }
        img = reprs.image.row(members[static_cast<std::size_t>(best)]);
        tab = reprs.tabular.row(members[static_cast<std::size_t>(best)]);
      }
      bank.fused.value.row(row) = km.centroids.row(static_cast<Eigen::Index>(s));
      bank.image.value.row(row) = img;
      bank.tabular.value.row(row) = tab;
      bank.sources[static_cast<std::size_t>(row)] = std::nullopt;
    }
  }
  bank.normalize();
  bank.initialized = true;
}

/// Snaps every prototype onto the same-class case with the highest fused cosine similarity
/// (ties to the lexicographically lowest patient_id) and records that case as its source.
inline void project_prototypes(PrototypeBank& bank, const ReprSet& reprs) {
  auto pf = detail::unit_rows(bank.fused.value);
  Matrix sims = pf.unit * reprs.fused.transpose(); // reprs rows are unit already
  for (std::size_t r = 0; r < bank.size(); ++r) {
    const Label c = bank.class_of(r);
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < reprs.size(); ++i) {
      if (reprs.labels[i] != c) continue;
      const double s = sims(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i));
      if (!best) { best = i; continue; }
      const double sb = sims(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(*best));
      if (s > sb || (s == sb && reprs.sources[i].patient_id < reprs.sources[*best].patient_id)) best = i;
    }
    if (!best) continue; // no training case of this class; keep the learned vector
    const auto row = static_cast<Eigen::Index>(r);
    const auto src = static_cast<Eigen::Index>(*best);
    bank.fused.value.row(row) = reprs.fused.row(src);
    bank.image.value.row(row) = reprs.image.row(src);
    bank.tabular.value.row(row) = reprs.tabular.row(src);
    bank.sources[r] = reprs.sources[*best];
  }
}

} // namespace pmx
