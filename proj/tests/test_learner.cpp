#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "fedmosaic/data.hpp"
#include "fedmosaic/learner.hpp"
#include "fedmosaic/metrics.hpp"

using namespace fedmosaic;

namespace {

Dataset random_batch(std::size_t n, std::size_t d, std::size_t C, Rng& rng) {
  Dataset ds{C, d, {}};
  for (std::size_t k = 0; k < n; ++k) {
    Features x(d);
    for (auto& v : x) v = rng.normal();
    ds.examples.push_back({x, static_cast<ClassId>(rng.below(C)), k});
  }
  return ds;
}

Model random_model(ModelKind kind, std::size_t d, std::size_t C, std::size_t h, Rng& rng) {
  Model m = Model::zeros(kind, d, C, h);
  for (auto& p : m.params) p = 0.5 * rng.normal();
  return m;
}

std::vector<double> finite_difference(const Model& m, const Dataset& priv, const Dataset& pseudo,
                                      double lambda, double eps = 1e-5) {
  std::vector<double> g(m.params.size());
  for (std::size_t k = 0; k < g.size(); ++k) {
    Model a = m, b = m;
    a.params[k] += eps;
    b.params[k] -= eps;
    g[k] = (combined_loss(a, priv, pseudo, lambda) - combined_loss(b, priv, pseudo, lambda)) /
           (2 * eps);
  }
  return g;
}

double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    diff += (a[k] - b[k]) * (a[k] - b[k]);
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

}  // namespace

TEST(Model, ParameterLayout) {
  EXPECT_EQ(Model::zeros(ModelKind::kLogistic, 4, 3).params.size(), 15u);
  EXPECT_EQ(Model::zeros(ModelKind::kMlp, 4, 3, 5).params.size(), 5u * 4 + 5 + 3 * 5 + 3);
  Model bad = Model::zeros(ModelKind::kLogistic, 4, 3);
  bad.params.pop_back();
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  EXPECT_THROW(Model::zeros(ModelKind::kMlp, 4, 3, 0), std::invalid_argument);
}

TEST(PredictProbs, ZeroModelIsUniform) {
  const Model m = Model::zeros(ModelKind::kLogistic, 3, 4);
  for (double p : predict_probs(m, std::vector<double>{1.0, -2.0, 0.5})) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(PredictProbs, SimplexAndArgmaxAgree) {
  Rng rng(1);
  for (ModelKind kind : {ModelKind::kLogistic, ModelKind::kMlp}) {
    const Model m = random_model(kind, 5, 6, 7, rng);
    for (int k = 0; k < 1000; ++k) {
      Features x(5);
      for (auto& v : x) v = 3.0 * rng.normal();
      const auto p = predict_probs(m, x);
      double s = 0.0;
      for (double v : p) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
      EXPECT_EQ(argmax(p), argmax(predict_scores(m, x)));
    }
  }
}

TEST(PredictProbs, DimensionMismatchThrows) {
  const Model m = Model::zeros(ModelKind::kLogistic, 3, 2);
  EXPECT_THROW(predict_probs(m, std::vector<double>{1.0, 2.0}), std::invalid_argument);
}

TEST(Argmax, LowestIndexWinsTies) {
  EXPECT_EQ(argmax(std::vector<double>{1.0, 3.0, 3.0}), 1u);
  EXPECT_EQ(argmax(std::vector<double>{2.0, 2.0}), 0u);
}

TEST(CrossEntropy, UniformModelGivesLogC) {
  const Model m = Model::zeros(ModelKind::kLogistic, 2, 10);
  Rng rng(2);
  const Dataset ds = random_batch(20, 2, 10, rng);
  EXPECT_NEAR(cross_entropy_loss(m, ds), std::log(10.0), 1e-12);
}

TEST(CrossEntropy, HandBuiltTwoExampleCase) {
  // d = 1, C = 2; params = {W0, W1, b0, b1}.
  // x = 0: probs (0.8, 0.2), label 0.  x = 1: probs (0.4, 0.6), label 1.
  Model m = Model::zeros(ModelKind::kLogistic, 1, 2);
  m.params = {std::log(2.0 / 3.0) - std::log(4.0), 0.0, std::log(0.8), std::log(0.2)};
  const Dataset ds{2, 1, {{{0.0}, 0, 0}, {{1.0}, 1, 1}}};
  EXPECT_NEAR(predict_probs(m, ds.examples[0].features)[0], 0.8, 1e-12);
  EXPECT_NEAR(predict_probs(m, ds.examples[1].features)[1], 0.6, 1e-12);
  EXPECT_NEAR(cross_entropy_loss(m, ds), -(std::log(0.8) + std::log(0.6)) / 2.0, 1e-12);
}

TEST(CrossEntropy, ConfidentCorrectModelGivesZero) {
  Model m = Model::zeros(ModelKind::kLogistic, 1, 2);
  m.params = {0.0, 0.0, 800.0, 0.0};
  const Dataset ds{2, 1, {{{0.3}, 0, 0}}};
  EXPECT_DOUBLE_EQ(cross_entropy_loss(m, ds), 0.0);
}

TEST(CrossEntropy, FloorKeepsLossFinite) {
  Model m = Model::zeros(ModelKind::kLogistic, 1, 2);
  m.params = {0.0, 0.0, 1e6, -1e6};
  const Dataset ds{2, 1, {{{0.3}, 1, 0}}};
  const double l = cross_entropy_loss(m, ds);
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, -std::log(kProbFloor), 1e-9);
}

TEST(CrossEntropy, EmptyDataThrows) {
  const Model m = Model::zeros(ModelKind::kLogistic, 1, 2);
  EXPECT_THROW(cross_entropy_loss(m, Dataset{2, 1, {}}), std::invalid_argument);
}

TEST(Lambda, HandValues) {
  EXPECT_EQ(compute_lambda(0.5, 0.5), 1.0);
  EXPECT_NEAR(compute_lambda(1.0, 0.0), std::numbers::e, 1e-12);
  EXPECT_NEAR(compute_lambda(0.5, 1.5), 0.135335283236613, 1e-12);
}

TEST(Lambda, RangeAndMonotonicity) {
  Rng rng(3);
  for (int k = 0; k < 10000; ++k) {
    const double lp = 1e-8 + 10.0 * rng.uniform();
    const double a = 10.0 * rng.uniform(), b = a + 1e-3 + rng.uniform();
    const double la = compute_lambda(lp, a), lb = compute_lambda(lp, b);
    EXPECT_GT(la, 0.0);
    EXPECT_LE(la, std::numbers::e);
    if (lb > std::numeric_limits<double>::min()) EXPECT_GT(la, lb);
    else EXPECT_GE(la, lb);
  }
}

TEST(Lambda, ZeroPrivateLossUsesFloor) {
  const double lam = compute_lambda(0.0, 1e-8);
  EXPECT_NEAR(lam, std::exp(-1.0), 1e-12);
  EXPECT_GT(compute_lambda(0.0, 5.0), 0.0);
  EXPECT_THROW(compute_lambda(-1.0, 0.0), std::invalid_argument);
}

TEST(Gradient, MatchesFiniteDifferences) {
  Rng rng(4);
  for (ModelKind kind : {ModelKind::kLogistic, ModelKind::kMlp}) {
    for (int point = 0; point < 20; ++point) {
      const Model m = random_model(kind, 4, 3, 5, rng);
      const Dataset priv = random_batch(6, 4, 3, rng), pseudo = random_batch(9, 4, 3, rng);
      for (double lam : {0.0, 1.0, std::numbers::e}) {
        const auto g = grad_combined(m, priv, pseudo, lam);
        EXPECT_LT(relative_error(g, finite_difference(m, priv, pseudo, lam)), 1e-4)
            << to_string(kind) << " point " << point << " lambda " << lam;
      }
    }
  }
}

TEST(Gradient, PseudoTermVanishes) {
  Rng rng(5);
  const Model m = random_model(ModelKind::kMlp, 3, 3, 4, rng);
  const Dataset priv = random_batch(5, 3, 3, rng), pseudo = random_batch(5, 3, 3, rng);
  const Dataset empty{3, 3, {}};
  const auto base = grad_combined(m, priv, empty, 0.0);
  EXPECT_EQ(grad_combined(m, priv, pseudo, 0.0), base);
  EXPECT_EQ(grad_combined(m, priv, empty, 2.0), base);
  EXPECT_NE(grad_combined(m, priv, pseudo, 1.0), base);
}

TEST(Gradient, RejectsLambdaOutsideRange) {
  Rng rng(6);
  const Model m = random_model(ModelKind::kLogistic, 3, 3, 0, rng);
  const Dataset priv = random_batch(5, 3, 3, rng);
  EXPECT_THROW(grad_combined(m, priv, priv, 3.0), std::invalid_argument);
  EXPECT_THROW(grad_combined(m, priv, priv, -0.1), std::invalid_argument);
  EXPECT_THROW(grad_combined(m, Dataset{3, 3, {}}, priv, 1.0), std::invalid_argument);
}

TEST(CombinedLoss, DecomposesIntoTerms) {
  Rng rng(7);
  const Model m = random_model(ModelKind::kMlp, 3, 4, 5, rng);
  const Dataset priv = random_batch(8, 3, 4, rng), pseudo = random_batch(6, 3, 4, rng);
  const double lam = 0.7;
  EXPECT_EQ(combined_loss(m, priv, pseudo, lam),
            cross_entropy_loss(m, priv) + lam * cross_entropy_loss(m, pseudo));
  const auto lg = loss_and_grad(m, priv.examples, pseudo.examples, lam);
  EXPECT_NEAR(lg.loss, combined_loss(m, priv, pseudo, lam), 1e-12);
}

TEST(Sgd, ZeroStepLeavesParameters) {
  Rng rng(8);
  const Model m = random_model(ModelKind::kMlp, 3, 3, 4, rng);
  const Dataset priv = random_batch(20, 3, 3, rng);
  EXPECT_EQ(sgd_epoch(m, priv, priv, 1.0, 0.0, 4, 1), m);
}

TEST(Sgd, SeparableDataReachesHighAccuracy) {
  const Dataset ds = make_mixture(2, 2, 100, 6.0, 9);
  const Dataset none{2, 2, {}};
  for (ModelKind kind : {ModelKind::kLogistic, ModelKind::kMlp}) {
    Model m = init_model(kind, 2, 2, 8, 10);
    for (int epoch = 0; epoch < 50; ++epoch) m = sgd_epoch(m, ds, none, 0.0, 0.1, 16, epoch);
    EXPECT_GE(accuracy(m, ds), 0.99) << to_string(kind);
  }
}

TEST(Sgd, DeterministicUnderSeed) {
  const Dataset ds = make_mixture(3, 4, 30, 2.0, 11);
  const Model m0 = init_model(ModelKind::kMlp, 4, 3, 6, 12);
  const Model a = sgd_epoch(m0, ds, ds, 0.5, 0.1, 8, 42);
  const Model b = sgd_epoch(m0, ds, ds, 0.5, 0.1, 8, 42);
  const Model c = sgd_epoch(m0, ds, ds, 0.5, 0.1, 8, 43);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Sgd, NonFiniteLossAborts) {
  Dataset ds = make_mixture(2, 2, 5, 3.0, 1);
  ds.examples[3].features[0] = std::numeric_limits<double>::quiet_NaN();
  const Model m = init_model(ModelKind::kLogistic, 2, 2, 0, 1);
  EXPECT_THROW(sgd_epoch(m, ds, Dataset{2, 2, {}}, 0.0, 0.1, 4, 1), DivergenceError);
}

TEST(Sgd, RejectsNegativeStep) {
  const Dataset ds = make_mixture(2, 2, 5, 3.0, 1);
  const Model m = init_model(ModelKind::kLogistic, 2, 2, 0, 1);
  EXPECT_THROW(sgd_epoch(m, ds, ds, 0.0, -0.1, 4, 1), std::invalid_argument);
}

TEST(Checkpoint, JsonAndBinaryRoundTrip) {
  Rng rng(13);
  for (ModelKind kind : {ModelKind::kLogistic, ModelKind::kMlp}) {
    const Model m = random_model(kind, 3, 4, 5, rng);
    EXPECT_EQ(model_from_json(nlohmann::json::parse(to_json(m).dump())), m);
    std::stringstream ss;
    write_binary(ss, m);
    EXPECT_EQ(read_binary(ss), m);
  }
  std::stringstream junk("not a model");
  EXPECT_THROW(read_binary(junk), std::runtime_error);
}

TEST(Random, LaplaceAndNormalMoments) {
  Rng rng(14);
  const int n = 200000;
  double s = 0, s2 = 0, l2 = 0;
  for (int k = 0; k < n; ++k) {
    const double x = rng.normal();
    s += x;
    s2 += x * x;
    const double y = rng.laplace(1.5);
    l2 += y * y;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
  EXPECT_NEAR(l2 / n, 2 * 1.5 * 1.5, 0.1);
}
