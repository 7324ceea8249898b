#include <gtest/gtest.h>

#include <cmath>

#include "pmx/nn.hpp"

using namespace pmx;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Checks d(sum(proj .* net(x)))/d(params, x) against central differences.
void check_stack(Sequential& net, const Matrix& x0, Mode mode, std::uint64_t mask_seed, double tol = 1e-4) {
  Rng prng(mask_seed + 1000);
  Matrix x = x0;
  Rng r0(mask_seed);
  Matrix y = net.forward(x, mode, r0);
  Matrix proj = random_matrix(y.rows(), y.cols(), prng);

  for (Param* p : net.params()) p->zero_grad();
  Rng r1(mask_seed);
  net.forward(x, mode, r1);
  Matrix dx = net.backward(proj);

  std::vector<GradTarget> targets;
  for (Param* p : net.params()) targets.push_back({p->name, &p->value, p->grad});
  targets.push_back({"input", &x, dx});
  auto loss = [&] {
    Rng r(mask_seed);
    return net.forward(x, mode, r).cwiseProduct(proj).sum();
  };
  for (const auto& e : gradient_check(targets, loss, 1e-4, tol)) {
    EXPECT_TRUE(e.pass) << e.name << " rel error " << e.rel_error;
  }
}

} // namespace

TEST(Dense, IdentityWeightsPassThrough) {
  Dense d("d", 2, 2);
  d.weight.value = Matrix::Identity(2, 2);
  Rng rng(0);
  Matrix x(1, 2);
  x << 1, 2;
  EXPECT_EQ(d.forward(x, Mode::Eval, rng), x);
}

TEST(Dense, ScalarChainRule) {
  Dense d("d", 1, 1);
  d.weight.value(0, 0) = 3.0;
  Rng rng(0);
  Matrix x = Matrix::Constant(1, 1, 2.0);
  d.forward(x, Mode::Train, rng);
  Matrix dx = d.backward(Matrix::Ones(1, 1));
  EXPECT_DOUBLE_EQ(d.weight.grad(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(dx(0, 0), 3.0);
}

TEST(Dense, ShapeMismatchNamesLayer) {
  Dense d("encoder.fc1", 3, 2);
  Rng rng(0);
  try {
    d.forward(Matrix::Zero(1, 4), Mode::Eval, rng);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.fc1"), std::string::npos);
  }
}

TEST(Dense, BackwardWithoutForwardIsUsageError) {
  Dense d("d", 2, 2);
  EXPECT_THROW(d.backward(Matrix::Zero(1, 2)), UsageError);
}

TEST(ReLU, Definition) {
  ReLU r;
  Rng rng(0);
  Matrix x(1, 2);
  x << -1, 3;
  Matrix y = r.forward(x, Mode::Train, rng);
  EXPECT_EQ(y(0, 0), 0.0);
  EXPECT_EQ(y(0, 1), 3.0);
}

TEST(Dropout, EvalIsIdentity) {
  Dropout d(0.3);
  Rng rng(1);
  Matrix x = random_matrix(4, 5, rng);
  EXPECT_EQ(d.forward(x, Mode::Eval, rng), x);
}

TEST(Dropout, TrainPreservesExpectation) {
  const double p = 0.3;
  Dropout d(p);
  Rng rng(5);
  Matrix x(1, 4);
  x << 1.0, -2.0, 0.5, 3.0;
  Matrix acc = Matrix::Zero(1, 4);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) acc += d.forward(x, Mode::Train, rng);
  acc /= draws;
  for (Eigen::Index j = 0; j < x.cols(); ++j) EXPECT_NEAR(acc(0, j), x(0, j), 0.01 * std::abs(x(0, j)));
}

TEST(Dropout, RejectsInvalidProbability) {
  EXPECT_THROW(Dropout(1.0), ConfigError);
  EXPECT_THROW(Dropout(-0.1), ConfigError);
}

TEST(Norm, EvalUsesRunningStatistics) {
  Norm n("n", 3);
  Rng rng(0);
  Matrix x = random_matrix(16, 3, rng);
  n.forward(x, Mode::Train, rng);
  Matrix one = x.topRows(1);
  Matrix a = n.forward(one, Mode::Eval, rng);
  Matrix b = n.forward(one, Mode::Eval, rng);
  EXPECT_EQ(a, b);
  RowVector expect = (one.row(0) - n.running_mean.row(0)).array() / (n.running_var.row(0).array() + n.eps).sqrt();
  EXPECT_LT((a.row(0) - expect).norm(), 1e-12);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  Rng rng(3);
  Sequential net;
  net.add(Dense("a", 4, 5)).add(Norm("n", 5)).add(ReLU{}).add(Dense("b", 5, 2));
  for (auto& l : net.layers())
    if (auto* d = std::get_if<Dense>(&l.kind)) d->init_uniform(rng);
  Matrix x = random_matrix(6, 4, rng);
  net.forward(x, Mode::Train, rng);
  Matrix dx = net.backward(Matrix::Zero(6, 2));
  EXPECT_EQ(dx.norm(), 0.0);
  for (Param* p : net.params()) EXPECT_EQ(p->grad.norm(), 0.0) << p->name;
}

TEST(GradCheck, EveryLayerKindOnRandomShapes) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    std::uniform_int_distribution<int> dim(2, 7);
    const int in = dim(rng), hid = dim(rng), out = dim(rng), batch = dim(rng) + 2;
    Sequential net;
    net.add(Dense("fc1", in, hid)).add(Norm("bn", hid, NormKind::Batch)).add(ReLU{}).add(Dropout(0.3));
    std::vector<Layer> body;
    body.push_back(Layer{Dense("res", hid, hid)});
    body.push_back(Layer{Sigmoid{}});
    net.add(std::move(body));
    net.add(Norm("ln", hid, NormKind::Feature)).add(Dense("fc2", hid, out));
    for (auto& l : net.layers())
      if (auto* d = std::get_if<Dense>(&l.kind)) d->init_uniform(rng);
    for (Param* p : net.params()) {
      if (p->name.find("scale") != std::string::npos || p->name.find("shift") != std::string::npos)
        p->value = random_matrix(p->value.rows(), p->value.cols(), rng) * 0.3 + Matrix::Ones(p->value.rows(), p->value.cols()) * (p->name.find("scale") != std::string::npos ? 1.0 : 0.0);
    }
    // Keep ReLU inputs clear of the kink so central differences stay on one linear piece.
    Matrix x;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      x = random_matrix(batch, in, rng);
      Norm probe = std::get<Norm>(net.layers()[1].kind);
      Rng r(seed);
      Matrix pre = probe.forward(std::get<Dense>(net.layers()[0].kind).forward(x, Mode::Train, r), Mode::Train, r);
      if (pre.cwiseAbs().minCoeff() > 0.05) break;
    }
    SCOPED_TRACE("seed " + std::to_string(seed));
    check_stack(net, x, Mode::Train, seed);
    check_stack(net, x, Mode::Eval, seed);
  }
}

TEST(CosineSchedule, HalfwayIsHalf) {
  CosineSchedule s{100};
  EXPECT_NEAR(s.factor(50), 0.5, 1e-15);
  EXPECT_DOUBLE_EQ(s.factor(0), 1.0);
  EXPECT_NEAR(s.factor(100), 0.0, 1e-15);
}

TEST(CosineSchedule, MonotoneAndClamped) {
  CosineSchedule s{37};
  for (std::size_t i = 0; i < 37; ++i) EXPECT_GE(s.factor(i), s.factor(i + 1));
  EXPECT_EQ(s.factor(38), 0.0);
}

TEST(AdamW, ZeroGradientZeroDecayIsIdentity) {
  Param p("p", 1, 1);
  p.value(0, 0) = 0.7;
  std::vector<ParamGroup> g{{"g", {&p}, 0.1}};
  AdamWOptions opt;
  opt.weight_decay = 0.0;
  for (std::size_t s = 0; s < 5; ++s) optimizer_step(g, opt, s, CosineSchedule{10});
  EXPECT_EQ(p.value(0, 0), 0.7);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  Param p("p", 1, 1);
  p.value(0, 0) = 1.0;
  p.grad(0, 0) = 1.0;
  std::vector<ParamGroup> g{{"g", {&p}, 0.1}};
  AdamWOptions opt;
  opt.weight_decay = 0.0;
  optimizer_step(g, opt, 0, CosineSchedule{100});
  // t = 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
  const double expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
  EXPECT_NEAR(p.value(0, 0), expected, 1e-15);
  EXPECT_NEAR(p.value(0, 0), 0.9, 1e-7);
}

TEST(AdamW, DecayIsDecoupledFromMoments) {
  Param p("p", 1, 1);
  p.value(0, 0) = 2.0;
  std::vector<ParamGroup> g{{"g", {&p}, 0.1}};
  AdamWOptions opt;
  opt.weight_decay = 0.5;
  optimizer_step(g, opt, 0, CosineSchedule{100});
  EXPECT_DOUBLE_EQ(p.value(0, 0), 2.0 * (1.0 - 0.1 * 0.5));
  EXPECT_EQ(p.m(0, 0), 0.0);
}
