#pragma once

// Modality encoders, the two-token cross-modal attention block and the similarity gate.

#include <cmath>

#include "pmx/dataset.hpp"
#include "pmx/nn.hpp"

namespace pmx {

struct EncoderConfig {
  std::size_t embedding_dim = kEmbeddingDim;
  std::size_t image_hidden = 512;
  std::size_t image_out = 256; // also the fused width
  std::size_t tabular_hidden = 64;
  std::size_t image_proto_dim = 128;
  double image_dropout = 0.3;
  double tabular_dropout = 0.1;
  NormKind norm = NormKind::Batch;
};

namespace detail {

inline Matrix affine(const Dense& d, const Matrix& x) {
  Matrix y = x * d.weight.value;
  y.rowwise() += d.bias.value.row(0);
  return y;
}

/// Accumulates parameter gradients of y = x W + b and returns dL/dx.
inline Matrix affine_backward(Dense& d, const Matrix& x, const Matrix& g) {
  d.weight.grad.noalias() += x.transpose() * g;
  d.bias.grad += g.colwise().sum();
  return g * d.weight.value.transpose();
}

inline Matrix hconcat(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

} // namespace detail

/// Embedding projection: Dense(D, 512) Norm ReLU Dropout Dense(512, 256) Norm.
class ImageEncoder {
public:
  ImageEncoder() = default;
  explicit ImageEncoder(const EncoderConfig& cfg) {
    const auto d = static_cast<Eigen::Index>(cfg.embedding_dim);
    const auto h = static_cast<Eigen::Index>(cfg.image_hidden);
    const auto o = static_cast<Eigen::Index>(cfg.image_out);
    net_.add(Dense("image.fc1", d, h))
        .add(Norm("image.norm1", h, cfg.norm))
        .add(ReLU{})
        .add(Dropout(cfg.image_dropout))
        .add(Dense("image.fc2", h, o))
        .add(Norm("image.norm2", o, cfg.norm));
  }

  void init(Rng& rng) {
    for (auto& l : net_.layers())
      if (auto* d = std::get_if<Dense>(&l.kind)) d->init_uniform(rng);
  }

  Matrix forward(const Matrix& x, Mode mode, Rng& rng) { return net_.forward(x, mode, rng); }
  Matrix backward(const Matrix& g) { return net_.backward(g); }
  std::vector<Param*> params() { return net_.params(); }
  Sequential& net() { return net_; }
  const Sequential& net() const { return net_; }

private:
  Sequential net_;
};

/// Clinical encoder: a = Dropout(ReLU(Dense(11, 64) x)); h = a + Dropout(ReLU(Dense(64, 64) a)).
class TabularEncoder {
public:
  TabularEncoder() = default;
  explicit TabularEncoder(const EncoderConfig& cfg) {
    const auto h = static_cast<Eigen::Index>(cfg.tabular_hidden);
    first_.add(Dense("tabular.fc1", static_cast<Eigen::Index>(kClinicalDim), h)).add(ReLU{}).add(Dropout(cfg.tabular_dropout));
    std::vector<Layer> body;
    body.push_back(Layer{Dense("tabular.fc2", h, h)});
    body.push_back(Layer{ReLU{}});
    body.push_back(Layer{Dropout(cfg.tabular_dropout)});
    residual_.add(std::move(body));
  }

  void init(Rng& rng) {
    first_dense().init_uniform(rng);
    second_dense().init_uniform(rng);
  }

  Matrix forward(const Matrix& x, Mode mode, Rng& rng) {
    return residual_.forward(first_.forward(x, mode, rng), mode, rng);
  }
  Matrix backward(const Matrix& g) { return first_.backward(residual_.backward(g)); }

  std::vector<Param*> params() {
    auto p = first_.params();
    auto q = residual_.params();
    p.insert(p.end(), q.begin(), q.end());
    return p;
  }

  Dense& first_dense() { return std::get<Dense>(first_.layers()[0].kind); }
  Dense& second_dense() { return std::get<Dense>(std::get<std::vector<Layer>>(residual_.layers()[0].kind)[0].kind); }

  /// Output of the first layer block alone (Eval mode).
  Matrix first_activation(const Matrix& x, Rng& rng) { return first_.forward(x, Mode::Eval, rng); }

  Sequential& first() { return first_; }
  Sequential& residual() { return residual_; }

private:
  Sequential first_;
  Sequential residual_;
};

/// Single-head attention over the two tokens {h_i, U h_t} with h_i as the query.
///   out = h_i + W_o (a_1 V h_i + a_2 V U h_t) + b_o,  a = softmax(q . k_j / sqrt(width)).
/// In concatenation mode the block is instead Dense([h_i; h_t]).
class FusionBlock {
public:
  FusionBlock() = default;
  FusionBlock(const EncoderConfig& cfg, bool concat_only) : concat_only_(concat_only) {
    const auto w = static_cast<Eigen::Index>(cfg.image_out);
    const auto t = static_cast<Eigen::Index>(cfg.tabular_hidden);
    up_ = Dense("fusion.up", t, w);
    query_ = Dense("fusion.query", w, w);
    key_ = Dense("fusion.key", w, w);
    value_ = Dense("fusion.value", w, w);
    out_ = Dense("fusion.out", w, w);
    concat_ = Dense("fusion.concat", w + t, w);
    scale_ = 1.0 / std::sqrt(static_cast<double>(w));
  }

  void init(Rng& rng) {
    up_.init_uniform(rng);
    query_.init_uniform(rng);
    key_.init_uniform(rng);
    value_.init_uniform(rng);
    out_.init_uniform(rng);
    concat_.init_uniform(rng);
  }

  bool concat_only() const { return concat_only_; }

  Matrix forward(const Matrix& hi, const Matrix& ht) {
    if (hi.cols() != out_.out_features() || ht.cols() != up_.in_features())
      throw ShapeError("fusion expects widths (" + std::to_string(out_.out_features()) + ", " +
                       std::to_string(up_.in_features()) + "), got (" + std::to_string(hi.cols()) + ", " +
                       std::to_string(ht.cols()) + ")");
    hi_ = hi;
    ht_ = ht;
    cached_ = true;
    if (concat_only_) return detail::affine(concat_, detail::hconcat(hi, ht));

    u_ = detail::affine(up_, ht);
    q_ = detail::affine(query_, hi);
    k1_ = detail::affine(key_, hi);
    k2_ = detail::affine(key_, u_);
    v1_ = detail::affine(value_, hi);
    v2_ = detail::affine(value_, u_);
    const Eigen::Index n = hi.rows();
    attn_.resize(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double s1 = q_.row(i).dot(k1_.row(i)) * scale_;
      const double s2 = q_.row(i).dot(k2_.row(i)) * scale_;
      const double m = std::max(s1, s2);
      const double e1 = std::exp(s1 - m), e2 = std::exp(s2 - m);
      attn_(i, 0) = e1 / (e1 + e2);
      attn_(i, 1) = e2 / (e1 + e2);
    }
    ctx_ = (v1_.array().colwise() * attn_.col(0).array() + v2_.array().colwise() * attn_.col(1).array()).matrix();
    return hi + detail::affine(out_, ctx_);
  }

  /// Attention weights of the last forward pass, one row per sample.
  const Matrix& attention() const { return attn_; }

  /// Returns (dL/dh_i, dL/dh_t).
  std::pair<Matrix, Matrix> backward(const Matrix& g) {
    detail::require_cache(cached_, "fusion");
    if (concat_only_) {
      Matrix dx = detail::affine_backward(concat_, detail::hconcat(hi_, ht_), g);
      const auto w = hi_.cols();
      return {dx.leftCols(w), dx.rightCols(dx.cols() - w)};
    }
    Matrix dhi = g;
    Matrix dctx = detail::affine_backward(out_, ctx_, g);
    Eigen::VectorXd da1 = dctx.cwiseProduct(v1_).rowwise().sum();
    Eigen::VectorXd da2 = dctx.cwiseProduct(v2_).rowwise().sum();
    Matrix dv1 = dctx.array().colwise() * attn_.col(0).array();
    Matrix dv2 = dctx.array().colwise() * attn_.col(1).array();
    Eigen::VectorXd mean_da = attn_.col(0).cwiseProduct(da1) + attn_.col(1).cwiseProduct(da2);
    Eigen::VectorXd ds1 = attn_.col(0).cwiseProduct(da1 - mean_da) * scale_;
    Eigen::VectorXd ds2 = attn_.col(1).cwiseProduct(da2 - mean_da) * scale_;
    Matrix dq = k1_.array().colwise() * ds1.array() + k2_.array().colwise() * ds2.array();
    Matrix dk1 = q_.array().colwise() * ds1.array();
    Matrix dk2 = q_.array().colwise() * ds2.array();

    dhi += detail::affine_backward(query_, hi_, dq);
    dhi += detail::affine_backward(key_, hi_, dk1);
    dhi += detail::affine_backward(value_, hi_, dv1);
    Matrix du = detail::affine_backward(key_, u_, dk2);
    du += detail::affine_backward(value_, u_, dv2);
    Matrix dht = detail::affine_backward(up_, ht_, du);
    return {dhi, dht};
  }

  std::vector<Param*> params() {
    if (concat_only_) return {&concat_.weight, &concat_.bias};
    std::vector<Param*> out;
    for (Dense* d : {&up_, &query_, &key_, &value_, &out_}) d->collect(out);
    return out;
  }

  Dense& up() { return up_; }
  Dense& query() { return query_; }
  Dense& key() { return key_; }
  Dense& value() { return value_; }
  Dense& out() { return out_; }
  Dense& concat() { return concat_; }

private:
  bool concat_only_ = false;
  double scale_ = 1.0;
  Dense up_, query_, key_, value_, out_, concat_;
  Matrix hi_, ht_, u_, q_, k1_, k2_, v1_, v2_, attn_, ctx_;
  bool cached_ = false;
};

/// alpha = sigmoid(g([h_i; h_t])) with g a single dense map to a scalar. Zero-initialized.
class Gate {
public:
  Gate() = default;
  explicit Gate(const EncoderConfig& cfg)
      : dense_("gate", static_cast<Eigen::Index>(cfg.image_out + cfg.tabular_hidden), 1) {}

  /// (B, 1) column of alphas.
  Matrix forward(const Matrix& hi, const Matrix& ht) {
    input_ = detail::hconcat(hi, ht);
    if (input_.cols() != dense_.in_features())
      throw ShapeError("gate expects width " + std::to_string(dense_.in_features()) + ", got " + std::to_string(input_.cols()));
    Matrix z = detail::affine(dense_, input_);
    alpha_ = (1.0 / (1.0 + (-z.array()).exp())).matrix();
    cached_ = true;
    return alpha_;
  }

  /// Returns (dL/dh_i, dL/dh_t) given dL/dalpha.
  std::pair<Matrix, Matrix> backward(const Matrix& dalpha, Eigen::Index image_width) {
    detail::require_cache(cached_, "gate");
    Matrix dz = (dalpha.array() * alpha_.array() * (1.0 - alpha_.array())).matrix();
    Matrix dx = detail::affine_backward(dense_, input_, dz);
    return {dx.leftCols(image_width), dx.rightCols(dx.cols() - image_width)};
  }

  std::vector<Param*> params() { return {&dense_.weight, &dense_.bias}; }
  Dense& dense() { return dense_; }

private:
  Dense dense_;
  Matrix input_, alpha_;
  bool cached_ = false;
};

} // namespace pmx
