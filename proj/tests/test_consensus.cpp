#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedmosaic/consensus.hpp"

using namespace fedmosaic;

namespace {

PredictionMatrix preds_of(std::size_t C, std::vector<ClassId> labels) {
  return PredictionMatrix{C, std::move(labels)};
}

struct Instance {
  std::vector<PredictionMatrix> preds;
  std::vector<ExpertiseVector> experts;
};

Instance random_instance(Rng& rng) {
  const std::size_t m = 1 + rng.below(8), n = 1 + rng.below(64), C = 2 + rng.below(9);
  Instance in;
  for (std::size_t i = 0; i < m; ++i) {
    PredictionMatrix p{C, {}};
    ExpertiseVector e;
    for (std::size_t j = 0; j < n; ++j) {
      p.labels.push_back(static_cast<ClassId>(rng.below(C)));
      e.scores.push_back(0.01 + 3.0 * rng.uniform());
    }
    in.preds.push_back(std::move(p));
    in.experts.push_back(std::move(e));
  }
  return in;
}

PublicPool grid_pool(std::size_t n, std::size_t dim, Rng& rng) {
  PublicPool pool{dim, {}, {}};
  for (std::size_t j = 0; j < n; ++j) {
    Features x(dim);
    for (auto& v : x) v = 2.0 * rng.normal();
    pool.examples.push_back(x);
    pool.ids.push_back(j);
  }
  return pool;
}

}  // namespace

TEST(PredictHard, ZeroModelPicksClassZero) {
  Rng rng(1);
  const PublicPool pool = grid_pool(20, 3, rng);
  const auto p = predict_hard(Model::zeros(ModelKind::kLogistic, 3, 4), pool);
  ASSERT_EQ(p.rows(), 20u);
  for (auto c : p.labels) EXPECT_EQ(c, 0u);
}

TEST(PredictHard, RowsAreOneHotAtArgmax) {
  Rng rng(2);
  Model m = Model::zeros(ModelKind::kMlp, 3, 5, 4);
  for (auto& v : m.params) v = rng.normal();
  const PublicPool pool = grid_pool(1000, 3, rng);
  const auto p = predict_hard(m, pool);
  for (std::size_t j = 0; j < pool.size(); ++j) {
    const auto row = p.one_hot_row(j);
    EXPECT_EQ(std::accumulate(row.begin(), row.end(), 0), 1);
    EXPECT_EQ(p.labels[j], argmax(predict_probs(m, pool.examples[j])));
  }
}

TEST(PredictHard, EmptyPoolAndMismatch) {
  const Model m = Model::zeros(ModelKind::kLogistic, 3, 2);
  EXPECT_EQ(predict_hard(m, PublicPool{3, {}, {}}).rows(), 0u);
  Rng rng(3);
  EXPECT_THROW(predict_hard(m, grid_pool(2, 4, rng)), std::invalid_argument);
}

TEST(ExpertiseFrequency, HandValues) {
  const std::vector<std::size_t> freq{30, 70};
  const auto e = expertise_frequency(freq, preds_of(2, {0, 1, 1}));
  ASSERT_EQ(e.size(), 3u);
  EXPECT_DOUBLE_EQ(e.scores[0], 0.3);
  EXPECT_DOUBLE_EQ(e.scores[1], 0.7);
  EXPECT_DOUBLE_EQ(e.scores[2], 0.7);
}

TEST(ExpertiseFrequency, FullMassAndFloor) {
  const std::vector<std::size_t> freq{0, 0, 0, 12};
  const auto e = expertise_frequency(freq, preds_of(4, {3, 1}));
  EXPECT_DOUBLE_EQ(e.scores[0], 1.0);
  EXPECT_DOUBLE_EQ(e.scores[1], kExpertiseFloor);
  const std::vector<std::size_t> zeros{0, 0};
  EXPECT_THROW(expertise_frequency(zeros, preds_of(2, {0})), std::invalid_argument);
}

TEST(ExpertiseUncertainty, EntropyHandValue) {
  const std::vector<double> p{0.7, 0.2, 0.1};
  const double H = -(0.7 * std::log(0.7) + 0.2 * std::log(0.2) + 0.1 * std::log(0.1));
  EXPECT_NEAR(entropy(p), 0.8018, 1e-4);
  EXPECT_NEAR(uncertainty_score(p, UncertaintyVariant::kEntropy), 1.0 / (H + kExpertiseFloor), 1e-12);
  EXPECT_NEAR(uncertainty_score(p, UncertaintyVariant::kMargin), 0.5 + kExpertiseFloor, 1e-12);
}

TEST(ExpertiseUncertainty, Limits) {
  const std::vector<double> one_hot{0.0, 1.0, 0.0}, uniform{0.5, 0.5};
  EXPECT_DOUBLE_EQ(uncertainty_score(one_hot, UncertaintyVariant::kEntropy), 1.0 / kExpertiseFloor);
  EXPECT_DOUBLE_EQ(uncertainty_score(uniform, UncertaintyVariant::kMargin), kExpertiseFloor);
}

TEST(ExpertiseUncertainty, DecreasingInUncertainty) {
  const std::vector<double> sharp{0.9, 0.05, 0.05}, flat{0.5, 0.3, 0.2};
  for (auto v : {UncertaintyVariant::kEntropy, UncertaintyVariant::kMargin})
    EXPECT_GT(uncertainty_score(sharp, v), uncertainty_score(flat, v));
}

TEST(ExpertiseUncertainty, StrictlyPositiveOnModelOutputs) {
  Rng rng(4);
  Model m = Model::zeros(ModelKind::kLogistic, 3, 4);
  for (auto& v : m.params) v = 3.0 * rng.normal();
  const PublicPool pool = grid_pool(200, 3, rng);
  for (auto v : {UncertaintyVariant::kEntropy, UncertaintyVariant::kMargin})
    EXPECT_NO_THROW(expertise_uncertainty(m, pool, v).validate());
}

TEST(ScoreMatrix, HandExample) {
  const std::vector<PredictionMatrix> preds{preds_of(2, {0}), preds_of(2, {1})};
  const std::vector<ExpertiseVector> ex{{{2.0}}, {{1.0}}};
  const auto s = weighted_score_matrix(preds, ex);
  EXPECT_EQ(s.entries, (std::vector<double>{2.0, 1.0}));
  EXPECT_EQ(consensus_argmax(s).labels, (std::vector<ClassId>{0}));
}

TEST(ScoreMatrix, UniformExpertiseCountsVotes) {
  const std::vector<PredictionMatrix> preds{preds_of(3, {0, 2}), preds_of(3, {0, 1}),
                                            preds_of(3, {1, 1})};
  const std::vector<ExpertiseVector> ex(3, expertise_uniform(2));
  const auto s = weighted_score_matrix(preds, ex);
  EXPECT_EQ(s.entries, (std::vector<double>{2, 1, 0, 0, 2, 1}));
}

TEST(ScoreMatrix, SingleClientIsScaledOneHot) {
  const std::vector<PredictionMatrix> preds{preds_of(3, {2, 0})};
  const std::vector<ExpertiseVector> ex{{{0.4, 1.5}}};
  const auto s = weighted_score_matrix(preds, ex);
  EXPECT_EQ(s.entries, (std::vector<double>{0, 0, 0.4, 1.5, 0, 0}));
}

TEST(ScoreMatrix, RowSumsEqualExpertiseSums) {
  Rng rng(5);
  for (int k = 0; k < 100; ++k) {
    const Instance in = random_instance(rng);
    const auto s = weighted_score_matrix(in.preds, in.experts);
    for (std::size_t j = 0; j < s.rows; ++j) {
      double row = 0.0, ex = 0.0;
      for (double v : s.row(j)) row += v;
      for (const auto& e : in.experts) ex += e.scores[j];
      EXPECT_NEAR(row, ex, 1e-12 * ex);
    }
  }
}

TEST(ScoreMatrix, RejectsBadInput) {
  const std::vector<PredictionMatrix> preds{preds_of(2, {0, 1}), preds_of(2, {1})};
  const std::vector<ExpertiseVector> ex{{{1.0, 1.0}}, {{1.0}}};
  EXPECT_THROW(weighted_score_matrix(preds, ex), std::invalid_argument);
  const std::vector<PredictionMatrix> ok{preds_of(2, {0})};
  const std::vector<ExpertiseVector> zero{{{0.0}}};
  EXPECT_THROW(weighted_score_matrix(ok, zero), std::invalid_argument);
  const std::vector<ExpertiseVector> none;
  EXPECT_THROW(weighted_score_matrix(ok, none), std::invalid_argument);
}

TEST(Consensus, TieGoesToLowestIndex) {
  ScoreMatrix s{1, 2, {1.0, 1.0}};
  EXPECT_EQ(consensus_argmax(s).labels[0], 0u);
  const std::vector<PredictionMatrix> two{preds_of(2, {0}), preds_of(2, {1})};
  EXPECT_EQ(majority_consensus(two).labels[0], 0u);
  const std::vector<PredictionMatrix> three{preds_of(2, {0}), preds_of(2, {0}), preds_of(2, {1})};
  EXPECT_EQ(majority_consensus(three).labels[0], 0u);
  const std::vector<PredictionMatrix> none;
  EXPECT_THROW(majority_consensus(none), std::invalid_argument);
}

TEST(ConsensusProperty, UniformExpertiseReducesToMajority) {
  Rng rng(6);
  for (int k = 0; k < 1000; ++k) {
    const Instance in = random_instance(rng);
    const std::vector<ExpertiseVector> ones(in.preds.size(), expertise_uniform(in.preds[0].rows()));
    EXPECT_EQ(consensus_argmax(weighted_score_matrix(in.preds, ones)), majority_consensus(in.preds));
  }
}

TEST(ConsensusProperty, CommonScalingLeavesLabels) {
  Rng rng(7);
  for (int k = 0; k < 1000; ++k) {
    Instance in = random_instance(rng);
    const auto before = consensus_argmax(weighted_score_matrix(in.preds, in.experts));
    const double factor = std::exp(8.0 * rng.uniform() - 4.0);
    for (auto& e : in.experts)
      for (auto& s : e.scores) s *= factor;
    EXPECT_EQ(consensus_argmax(weighted_score_matrix(in.preds, in.experts)), before);
  }
}

TEST(ConsensusProperty, DictatorshipLimit) {
  Rng rng(8);
  for (int k = 0; k < 300; ++k) {
    Instance in = random_instance(rng);
    const std::size_t boss = rng.below(in.preds.size());
    const std::size_t n = in.preds[0].rows();
    for (std::size_t j = 0; j < n; ++j) {
      double others = 0.0;
      for (std::size_t i = 0; i < in.experts.size(); ++i)
        if (i != boss) others += in.experts[i].scores[j];
      in.experts[boss].scores[j] = others * 1.01 + 1e-3;
    }
    const auto labels = consensus_argmax(weighted_score_matrix(in.preds, in.experts));
    EXPECT_EQ(labels.labels, in.preds[boss].labels);
  }
}

TEST(ConsensusProperty, UploadOrderDoesNotMatter) {
  Rng rng(9);
  for (int k = 0; k < 300; ++k) {
    Instance in = random_instance(rng);
    const auto s0 = weighted_score_matrix(in.preds, in.experts);
    std::vector<std::size_t> order(in.preds.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    Instance sh;
    for (auto i : order) {
      sh.preds.push_back(in.preds[i]);
      sh.experts.push_back(in.experts[i]);
    }
    const auto s1 = weighted_score_matrix(sh.preds, sh.experts);
    EXPECT_EQ(s0.entries, s1.entries);
    EXPECT_EQ(majority_consensus(in.preds), majority_consensus(sh.preds));
  }
}

TEST(Dp, VanishingNoiseReturnsClippedInput) {
  const ExpertiseVector e{{0.2, 0.9, 5.0, 1e-9}};
  const auto out = dp_noise_expertise(e, 1e9, 1.0, 3);
  const std::vector<double> clipped{0.2, 0.9, 1.0, kExpertiseFloor};
  for (std::size_t j = 0; j < e.size(); ++j) EXPECT_NEAR(out.scores[j], clipped[j], 1e-6);
}

TEST(Dp, OutputStaysInClipRange) {
  Rng rng(10);
  for (double eps : {0.01, 0.5, 1.0, 10.0}) {
    ExpertiseVector e;
    for (int k = 0; k < 500; ++k) e.scores.push_back(3.0 * rng.uniform() + 1e-3);
    const auto out = dp_noise_expertise(e, eps, 2.0, 11);
    for (double v : out.scores) {
      EXPECT_GE(v, kExpertiseFloor);
      EXPECT_LE(v, 2.0);
    }
    EXPECT_NO_THROW(out.validate());
  }
}

TEST(Dp, NoiseScaleMatchesLaplace) {
  const LaplaceMechanism mech(1.0, 1.0);
  Rng rng(12);
  const int n = 100000;
  double s = 0.0, s2 = 0.0;
  for (int k = 0; k < n; ++k) {
    const double x = mech.noise(rng);
    s += x;
    s2 += x * x;
  }
  const double mean = s / n, sd = std::sqrt((s2 - n * mean * mean) / (n - 1));
  EXPECT_NEAR(sd, std::sqrt(2.0), 0.05 * std::sqrt(2.0));
}

TEST(Dp, DeterministicAndValidated) {
  const ExpertiseVector e{{0.3, 0.6}};
  EXPECT_EQ(dp_noise_expertise(e, 1.0, 1.0, 5).scores, dp_noise_expertise(e, 1.0, 1.0, 5).scores);
  EXPECT_THROW(dp_noise_expertise(e, 0.0, 1.0, 5), std::invalid_argument);
  EXPECT_THROW(dp_noise_expertise(e, 1.0, -1.0, 5), std::invalid_argument);
}

TEST(Wire, BitsPerLabel) {
  EXPECT_EQ(bits_per_label(2), 1u);
  EXPECT_EQ(bits_per_label(4), 2u);
  EXPECT_EQ(bits_per_label(5), 3u);
  EXPECT_EQ(bits_per_label(10), 4u);
}

TEST(Wire, UploadRoundTrip) {
  Rng rng(13);
  for (std::size_t C : {2u, 3u, 10u, 300u}) {
    Upload u;
    u.client_id = 3;
    u.round = 17;
    u.predictions.num_classes = C;
    ExpertiseVector e;
    for (int j = 0; j < 37; ++j) {
      u.predictions.labels.push_back(static_cast<ClassId>(rng.below(C)));
      e.scores.push_back(rng.uniform() + 0.1);
    }
    u.expertise = e;
    const auto wire = encode(u);
    EXPECT_EQ(wire.size(), kUploadHeaderBytes + (37 * bits_per_label(C) + 7) / 8 + 37 * kScalarBytes);
    const Upload back = decode_upload(wire);
    EXPECT_EQ(back.client_id, 3u);
    EXPECT_EQ(back.round, 17u);
    EXPECT_EQ(back.predictions.labels, u.predictions.labels);
    EXPECT_EQ(back.expertise->scores, e.scores);

    u.expertise.reset();
    EXPECT_FALSE(decode_upload(encode(u)).expertise.has_value());
    EXPECT_EQ(upload_from_json(to_json(u)).predictions.labels, u.predictions.labels);
  }
}

TEST(Wire, DownloadRoundTripAndTruncation) {
  Download d{4, ConsensusLabels{6, {0, 5, 3, 3, 1}}};
  const auto wire = encode(d);
  EXPECT_EQ(wire.size(), kDownloadHeaderBytes + (5 * 3 + 7) / 8);
  const Download back = decode_download(wire);
  EXPECT_EQ(back.round, 4u);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(download_from_json(to_json(d)).labels, d.labels);
  const std::vector<std::uint8_t> cut(wire.begin(), wire.end() - 1);
  EXPECT_THROW(decode_download(cut), std::runtime_error);
}
