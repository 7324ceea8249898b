#pragma once

// Minimal layer set with hand-written reverse-mode gradients, AdamW and cosine annealing.
// Everything runs in double precision.

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "pmx/error.hpp"

namespace pmx {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Rng = std::mt19937_64;

enum class Mode { Train, Eval };

/// A trainable tensor with its gradient buffer and AdamW moment estimates.
struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix m;
  Matrix v;

  Param() = default;
  Param(std::string n, Eigen::Index rows, Eigen::Index cols) : name(std::move(n)) { resize(rows, cols); }

  void resize(Eigen::Index rows, Eigen::Index cols) {
    value = Matrix::Zero(rows, cols);
    grad = Matrix::Zero(rows, cols);
    m = Matrix::Zero(rows, cols);
    v = Matrix::Zero(rows, cols);
  }
  void zero_grad() { grad.setZero(); }
  void reset_moments() {
    m.setZero();
    v.setZero();
  }
};

namespace detail {

inline void require_cols(const Matrix& x, Eigen::Index cols, const std::string& layer) {
  if (x.cols() != cols)
    throw ShapeError("layer '" + layer + "' expects width " + std::to_string(cols) + ", got " + std::to_string(x.cols()));
}

inline void require_cache(bool cached, const std::string& layer) {
  if (!cached) throw UsageError("backward called on layer '" + layer + "' without a cached forward pass");
}

} // namespace detail

// ---------------------------------------------------------------------------
// Layers

/// y = x W + b with W of shape (in, out).
struct Dense {
  std::string name;
  Param weight;
  Param bias;
  Matrix input;
  bool cached = false;

  Dense() = default;
  Dense(std::string n, Eigen::Index in, Eigen::Index out)
      : name(n), weight(n + ".weight", in, out), bias(n + ".bias", 1, out) {}

  Eigen::Index in_features() const { return weight.value.rows(); }
  Eigen::Index out_features() const { return weight.value.cols(); }

  /// U(-1/sqrt(in), 1/sqrt(in)) for weights and bias.
  void init_uniform(Rng& rng) {
    const double a = 1.0 / std::sqrt(static_cast<double>(in_features()));
    std::uniform_real_distribution<double> u(-a, a);
    for (Eigen::Index i = 0; i < weight.value.size(); ++i) weight.value.data()[i] = u(rng);
    for (Eigen::Index i = 0; i < bias.value.size(); ++i) bias.value.data()[i] = u(rng);
  }

  void init_zero() {
    weight.value.setZero();
    bias.value.setZero();
  }

  Matrix forward(const Matrix& x, Mode, Rng&) {
    detail::require_cols(x, in_features(), name);
    input = x;
    cached = true;
    Matrix y = x * weight.value;
    y.rowwise() += bias.value.row(0);
    return y;
  }

  Matrix backward(const Matrix& g) {
    detail::require_cache(cached, name);
    weight.grad.noalias() += input.transpose() * g;
    bias.grad += g.colwise().sum();
    return g * weight.value.transpose();
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

struct ReLU {
  Matrix mask;
  bool cached = false;

  Matrix forward(const Matrix& x, Mode, Rng&) {
    mask = (x.array() > 0.0).cast<double>();
    cached = true;
    return x.cwiseMax(0.0);
  }
  Matrix backward(const Matrix& g) {
    detail::require_cache(cached, "relu");
    return g.cwiseProduct(mask);
  }
  void collect(std::vector<Param*>&) {}
};

struct Sigmoid {
  Matrix out;
  bool cached = false;

  Matrix forward(const Matrix& x, Mode, Rng&) {
    out = (1.0 / (1.0 + (-x.array()).exp())).matrix();
    cached = true;
    return out;
  }
  Matrix backward(const Matrix& g) {
    detail::require_cache(cached, "sigmoid");
    return (g.array() * out.array() * (1.0 - out.array())).matrix();
  }
  void collect(std::vector<Param*>&) {}
};

/// Inverted dropout: kept units are scaled by 1/(1-p) in Train, identity in Eval.
struct Dropout {
  double p = 0.0;
  Matrix mask;
  bool cached = false;

  explicit Dropout(double prob = 0.0) : p(prob) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1)");
  }

  Matrix forward(const Matrix& x, Mode mode, Rng& rng) {
    cached = true;
    if (mode == Mode::Eval || p == 0.0) {
      mask = Matrix::Ones(x.rows(), x.cols());
      return x;
    }
    const double keep = 1.0 - p;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    mask.resize(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = u(rng) < keep ? 1.0 / keep : 0.0;
    return x.cwiseProduct(mask);
  }
  Matrix backward(const Matrix& g) {
    detail::require_cache(cached, "dropout");
    return g.cwiseProduct(mask);
  }
  void collect(std::vector<Param*>&) {}
};

enum class NormKind { Batch, Feature };

/// Per-feature normalization with learned scale and shift.
///
/// Batch: statistics over the batch in Train (running averages updated with momentum),
/// running statistics in Eval. Feature: each row normalized over its own features in both modes.
struct Norm {
  std::string name;
  NormKind kind = NormKind::Batch;
  Param scale;
  Param shift;
  Matrix running_mean; // (1, F)
  Matrix running_var;  // (1, F)
  double momentum = 0.9;
  double eps = 1e-5;

  Matrix xhat;
  Matrix inv_std; // (1, F) for batch statistics, (B, 1) for feature mode
  bool batch_stats = false;
  bool cached = false;

  Norm() = default;
  Norm(std::string n, Eigen::Index features, NormKind k = NormKind::Batch)
      : name(n), kind(k), scale(n + ".scale", 1, features), shift(n + ".shift", 1, features) {
    scale.value.setOnes();
    running_mean = Matrix::Zero(1, features);
    running_var = Matrix::Ones(1, features);
  }

  Eigen::Index features() const { return scale.value.cols(); }

  Matrix forward(const Matrix& x, Mode mode, Rng&) {
    detail::require_cols(x, features(), name);
    cached = true;
    if (kind == NormKind::Feature) {
      const double f = static_cast<double>(x.cols());
      Eigen::VectorXd mean = x.rowwise().mean();
      Matrix centered = x.colwise() - mean;
      Eigen::VectorXd var = centered.array().square().rowwise().sum() / f;
      inv_std = (var.array() + eps).rsqrt().matrix();
      xhat = centered.array().colwise() * inv_std.col(0).array();
      batch_stats = false;
    } else if (mode == Mode::Train) {
      const double n = static_cast<double>(x.rows());
      RowVector mean = x.colwise().mean();
      Matrix centered = x.rowwise() - mean;
      RowVector var = centered.array().square().colwise().sum() / n;
      inv_std = (var.array() + eps).rsqrt().matrix();
      xhat = centered.array().rowwise() * inv_std.row(0).array();
      running_mean = momentum * running_mean + (1.0 - momentum) * mean;
      running_var = momentum * running_var + (1.0 - momentum) * var;
      batch_stats = true;
    } else {
      inv_std = (running_var.array() + eps).rsqrt().matrix();
      xhat = (x.rowwise() - running_mean.row(0)).array().rowwise() * inv_std.row(0).array();
      batch_stats = false;
    }
    Matrix y = xhat.array().rowwise() * scale.value.row(0).array();
    y.rowwise() += shift.value.row(0);
    return y;
  }

  Matrix backward(const Matrix& g) {
    detail::require_cache(cached, name);
    scale.grad += g.cwiseProduct(xhat).colwise().sum();
    shift.grad += g.colwise().sum();
    Matrix dxhat = g.array().rowwise() * scale.value.row(0).array();
    if (kind == NormKind::Feature) {
      const double f = static_cast<double>(g.cols());
      Eigen::VectorXd sum_d = dxhat.rowwise().sum();
      Eigen::VectorXd sum_dx = dxhat.cwiseProduct(xhat).rowwise().sum();
      Matrix dx = (f * dxhat).colwise() - sum_d;
      dx -= (xhat.array().colwise() * sum_dx.array()).matrix();
      return (dx.array().colwise() * (inv_std.col(0).array() / f)).matrix();
    }
    if (batch_stats) {
      const double n = static_cast<double>(g.rows());
      RowVector sum_d = dxhat.colwise().sum();
      RowVector sum_dx = dxhat.cwiseProduct(xhat).colwise().sum();
      Matrix dx = (n * dxhat).rowwise() - sum_d;
      dx -= (xhat.array().rowwise() * sum_dx.array()).matrix();
      return (dx.array().rowwise() * (inv_std.row(0).array() / n)).matrix();
    }
    return (dxhat.array().rowwise() * inv_std.row(0).array()).matrix();
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&scale);
    out.push_back(&shift);
  }
};

struct Layer {
  std::variant<Dense, ReLU, Sigmoid, Dropout, Norm, std::vector<Layer>> kind;
  // A std::vector<Layer> alternative is a residual block: y = x + body(x).
};

namespace detail {

inline Matrix forward_stack(std::vector<Layer>& layers, const Matrix& x, Mode mode, Rng& rng);
inline Matrix backward_stack(std::vector<Layer>& layers, const Matrix& g);
inline void collect_stack(std::vector<Layer>& layers, std::vector<Param*>& out);

inline Matrix forward_layer(Layer& layer, const Matrix& x, Mode mode, Rng& rng) {
  return std::visit(
      [&](auto& l) -> Matrix {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, std::vector<Layer>>) {
          Matrix body = forward_stack(l, x, mode, rng);
          if (body.cols() != x.cols())
            throw ShapeError("residual block changes width from " + std::to_string(x.cols()) + " to " +
                             std::to_string(body.cols()));
          return x + body;
        } else {
          return l.forward(x, mode, rng);
        }
      },
      layer.kind);
}

inline Matrix backward_layer(Layer& layer, const Matrix& g) {
  return std::visit(
      [&](auto& l) -> Matrix {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, std::vector<Layer>>) {
          return g + backward_stack(l, g);
        } else {
          return l.backward(g);
        }
      },
      layer.kind);
}

inline Matrix forward_stack(std::vector<Layer>& layers, const Matrix& x, Mode mode, Rng& rng) {
  Matrix h = x;
  for (auto& l : layers) h = forward_layer(l, h, mode, rng);
  return h;
}

inline Matrix backward_stack(std::vector<Layer>& layers, const Matrix& g) {
  Matrix d = g;
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) d = backward_layer(*it, d);
  return d;
}

inline void collect_stack(std::vector<Layer>& layers, std::vector<Param*>& out) {
  for (auto& l : layers) {
    std::visit(
        [&](auto& x) {
          using T = std::decay_t<decltype(x)>;
          if constexpr (std::is_same_v<T, std::vector<Layer>>) collect_stack(x, out);
          else x.collect(out);
        },
        l.kind);
  }
}

} // namespace detail

/// Ordered layer stack. Forward caches what backward needs; backward accumulates into Param::grad.
class Sequential {
public:
  Sequential() = default;
  explicit Sequential(std::vector<Layer> layers) : layers_(std::move(layers)) {}

  template <class L>
  Sequential& add(L layer) {
    layers_.push_back(Layer{std::move(layer)});
    return *this;
  }

  Matrix forward(const Matrix& x, Mode mode, Rng& rng) { return detail::forward_stack(layers_, x, mode, rng); }
  Matrix backward(const Matrix& g) { return detail::backward_stack(layers_, g); }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    detail::collect_stack(layers_, out);
    return out;
  }

  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

private:
  std::vector<Layer> layers_;
};

// ---------------------------------------------------------------------------
// Optimization

struct ParamGroup {
  std::string name;
  std::vector<Param*> tensors;
  double learning_rate = 1e-3;
};

/// Cosine annealing factor 0.5 * (1 + cos(pi * step / total_steps)), clamped to 0 past the end.
struct CosineSchedule {
  std::size_t total_steps = 1;

  double factor(std::size_t step) const {
    if (total_steps == 0) return 1.0;
    if (step > total_steps) {
      static std::atomic<bool> warned{false};
      if (!warned.exchange(true))
        std::cerr << "warning: schedule step " << step << " exceeds total " << total_steps
                  << "; learning rate factor clamped to 0\n";
      return 0.0;
    }
    return 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
  }
};

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// One AdamW update. `step` counts updates already taken (0 for the first); the cosine factor
/// is evaluated at `step` and bias correction uses `step + 1`. Decay acts on the parameters
/// directly, outside the moment estimates.
inline void optimizer_step(std::span<ParamGroup> groups, const AdamWOptions& opt, std::size_t step,
                           const CosineSchedule& schedule) {
  const double t = static_cast<double>(step + 1);
  const double bc1 = 1.0 - std::pow(opt.beta1, t);
  const double bc2 = 1.0 - std::pow(opt.beta2, t);
  const double factor = schedule.factor(step);
  for (auto& group : groups) {
    const double lr = group.learning_rate * factor;
    for (Param* p : group.tensors) {
      p->m = opt.beta1 * p->m + (1.0 - opt.beta1) * p->grad;
      p->v = opt.beta2 * p->v + (1.0 - opt.beta2) * p->grad.cwiseProduct(p->grad);
      if (lr == 0.0) continue;
      if (opt.weight_decay != 0.0) p->value *= (1.0 - lr * opt.weight_decay);
      p->value.array() -= lr * (p->m.array() / bc1) / ((p->v.array() / bc2).sqrt() + opt.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradCheckEntry {
  std::string name;
  double rel_error = 0.0;
  bool pass = false;
};

/// Tensor under check: its storage (perturbed in place) and the analytic gradient to compare with.
struct GradTarget {
  std::string name;
  Matrix* value;
  Matrix analytic;
};

/// Relative error ||a - n|| / max(||a||, ||n||) per tensor, against central differences.
/// `loss` must recompute the objective from the current tensor values.
inline std::vector<GradCheckEntry> gradient_check(std::vector<GradTarget>& targets,
                                                  const std::function<double()>& loss, double h = 1e-4,
                                                  double tol = 1e-4) {
  std::vector<GradCheckEntry> out;
  for (auto& t : targets) {
    Matrix numeric = Matrix::Zero(t.value->rows(), t.value->cols());
    for (Eigen::Index i = 0; i < t.value->size(); ++i) {
      double& x = t.value->data()[i];
      const double orig = x;
      x = orig + h;
      const double fp = loss();
      x = orig - h;
      const double fm = loss();
      x = orig;
      numeric.data()[i] = (fp - fm) / (2.0 * h);
    }
    const Matrix analytic = t.analytic.size() ? t.analytic : Matrix::Zero(numeric.rows(), numeric.cols());
    if (analytic.rows() != numeric.rows() || analytic.cols() != numeric.cols())
      throw ShapeError("gradient for '" + t.name + "' has the wrong shape");
    const double denom = std::max(analytic.norm(), numeric.norm());
    const double err = denom < 1e-10 ? 0.0 : (analytic - numeric).norm() / denom;
    out.push_back({t.name, err, err < tol});
  }
  return out;
}

} // namespace pmx
