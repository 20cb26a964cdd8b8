#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "sure/data.hpp"
#include "sure/reweight.hpp"

using namespace sure;

namespace {

ModelSpec small_spec(HeadKind head, std::size_t D, std::size_t K) {
  ModelSpec s;
  s.backbone.layer_widths = {D, 6};
  s.backbone.relu_features = false;
  s.head = head;
  s.num_classes = K;
  return s;
}

Model uniform_model(std::size_t D, std::size_t K) {
  Model m = Model::initialize(small_spec(HeadKind::linear, D, K), 1);
  for (auto& p : m.params())
    if (p.name.rfind("head.", 0) == 0) p.value = Tensor(p.value.shape(), 0.0);
  return m;
}

}  // namespace

TEST(RawWeight, Examples) {
  EXPECT_EQ(raw_weight({ReweightKind::exp, 1.0}, 0.0), 1.0);
  EXPECT_NEAR(raw_weight({ReweightKind::exp, 1.0}, std::log(2.0)), 0.5, 1e-15);
  EXPECT_EQ(raw_weight({ReweightKind::power, 2.0}, 0.5), 0.25);
  EXPECT_EQ(raw_weight({ReweightKind::threshold, 0.5}, 0.6), 0.0);
  EXPECT_NEAR(raw_weight({ReweightKind::threshold, 0.5}, 0.3), 0.7, 1e-15);
  EXPECT_NEAR(raw_weight({ReweightKind::linear, 0.0}, 0.25), 0.75, 1e-15);
}

TEST(RawWeight, InvalidParametersAndScores) {
  EXPECT_THROW(raw_weight({ReweightKind::exp, 0.0}, 0.5), ValidationError);
  EXPECT_THROW(raw_weight({ReweightKind::threshold, 1.0}, 0.5), ValidationError);
  EXPECT_THROW(raw_weight({ReweightKind::threshold, 0.0}, 0.5), ValidationError);
  EXPECT_THROW(raw_weight({ReweightKind::power, 0.5}, 0.5), ValidationError);
  EXPECT_THROW(raw_weight({ReweightKind::linear, 0.0}, 1.5), ValidationError);
  EXPECT_THROW(parse_reweight_kind("sigmoid"), ValidationError);
  for (auto k : {ReweightKind::exp, ReweightKind::threshold, ReweightKind::power, ReweightKind::linear})
    EXPECT_EQ(parse_reweight_kind(to_string(k)), k);
}

TEST(RawWeight, EveryMapIsNonIncreasingAndNonNegative) {
  const std::vector<ReweightMap> maps = {{ReweightKind::exp, 1.0},      {ReweightKind::exp, 5.0},
                                         {ReweightKind::threshold, 0.4}, {ReweightKind::power, 1.0},
                                         {ReweightKind::power, 3.0},     {ReweightKind::linear, 0.0}};
  for (const auto& m : maps) {
    double prev = raw_weight(m, 0.0);
    for (int i = 1; i <= 1000; ++i) {
      const double w = raw_weight(m, i / 1000.0);
      EXPECT_GE(w, 0.0);
      EXPECT_LE(w, prev);
      prev = w;
    }
  }
}

TEST(NormalizeWeights, Examples) {
  const double r1[] = {1.0, 0.5};
  auto w = normalize_batch_weights(r1);
  EXPECT_NEAR(w.weights[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(w.weights[1], 1.0 / 3.0, 1e-15);
  EXPECT_FALSE(w.uniform_fallback);

  const double r2[] = {0.3, 0.3, 0.3, 0.3};
  for (double v : normalize_batch_weights(r2).weights) EXPECT_EQ(v, 0.25);
  const double r3[] = {0.01};
  EXPECT_EQ(normalize_batch_weights(r3).weights, std::vector<double>{1.0});

  const double zeros[] = {0.0, 0.0, 0.0};
  w = normalize_batch_weights(zeros);
  EXPECT_TRUE(w.uniform_fallback);
  for (double v : w.weights) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);

  EXPECT_THROW(normalize_batch_weights(std::span<const double>()), ValidationError);
  const double neg[] = {0.5, -0.1};
  EXPECT_THROW(normalize_batch_weights(neg), ValidationError);
}

TEST(NormalizeWeights, SumToOneAndScaleInvariant) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0), c(0.01, 100.0);
  for (int rep = 0; rep < 1000; ++rep) {
    std::vector<double> raw(1 + rep % 64);
    for (double& r : raw) r = u(rng);
    const auto w = normalize_batch_weights(raw);
    double s = 0.0;
    for (double v : w.weights) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
    const double k = c(rng);
    std::vector<double> scaled = raw;
    for (double& r : scaled) r *= k;
    const auto ws = normalize_batch_weights(scaled);
    for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_NEAR(ws.weights[i], w.weights[i], 1e-12);
  }
}

TEST(NormalizeWeights, ExpMapTendsToUniformAsTemperatureVanishes) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> raw;
  for (int i = 0; i < 128; ++i) raw.push_back(raw_weight({ReweightKind::exp, 1e-8}, u(rng)));
  for (double v : normalize_batch_weights(raw).weights) EXPECT_NEAR(v, 1.0 / 128.0, 1e-6);
}

TEST(CaptureScores, UniformModelGivesOneOverK) {
  const auto ds = gen_gaussian_blobs(4, 10, 3, 3.0, 1, 1);
  const auto s = capture_uncertainty_scores(uniform_model(3, 4), ds);
  ASSERT_EQ(s.scores.size(), ds.size());
  for (double v : s.scores) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(CaptureScores, DeterministicAndInRange) {
  const auto ds = gen_gaussian_blobs(3, 30, 4, 3.0, 1, 1);
  const Model m = Model::initialize(small_spec(HeadKind::cosine, 4, 3), 9);
  const auto a = capture_uncertainty_scores(m, ds), b = capture_uncertainty_scores(m, ds);
  EXPECT_EQ(a.scores, b.scores);
  for (double v : a.scores) {
    EXPECT_GE(v, 1.0 / 3.0 - 1e-15);
    EXPECT_LE(v, 1.0);
  }
}

TEST(CaptureScores, HandBuiltTwoClassModel) {
  // Identity feature layer, linear head W = [[1, 0], [0, 2]], b = [0, -1].
  ModelSpec spec;
  spec.backbone.layer_widths = {2, 2};
  spec.backbone.relu_features = false;
  spec.head = HeadKind::linear;
  spec.num_classes = 2;
  ParameterSet p;
  p.add("backbone.0.weight", Tensor::matrix({{1, 0}, {0, 1}}));
  p.add("backbone.0.bias", Tensor::vector({0, 0}));
  p.add("head.weight", Tensor::matrix({{1, 0}, {0, 2}}));
  p.add("head.bias", Tensor::vector({0, -1}));
  const Model m = Model::from_parameters(spec, p);
  Dataset ds;
  ds.num_classes = 2;
  const double pts[3][2] = {{0, 0}, {1, 1}, {-1, 2}};
  for (std::size_t i = 0; i < 3; ++i) {
    ds.inputs.push_back(Tensor::vector({pts[i][0], pts[i][1]}));
    ds.labels.push_back(0);
    ds.sample_ids.push_back(i);
  }
  const auto s = capture_uncertainty_scores(m, ds);
  for (std::size_t i = 0; i < 3; ++i) {
    const double z0 = pts[i][0], z1 = 2 * pts[i][1] - 1;
    const double p0 = 1.0 / (1.0 + std::exp(z1 - z0));
    EXPECT_NEAR(s.scores[i], std::max(p0, 1.0 - p0), 1e-15);
  }
}

TEST(CaptureScores, DimensionMismatch) {
  const auto ds = gen_gaussian_blobs(3, 5, 4, 3.0, 1, 1);
  EXPECT_THROW(capture_uncertainty_scores(uniform_model(5, 3), ds), ShapeError);
  EXPECT_THROW(capture_uncertainty_scores(uniform_model(4, 2), ds), ShapeError);
}

TEST(FineTune, UniformScoresMatchUnweightedBitwise) {
  const auto ds = gen_gaussian_blobs(4, 25, 3, 3.0, 1, 1);
  const FineTuneConfig cfg{3, 5e-3, 0.9, 5e-4, 16, 7};
  const Model base = uniform_model(3, 4);
  const auto weighted = reweight_stage(base, ds, {ReweightKind::exp, 1.0}, cfg);
  const auto plain = fine_tune(base, ds, cfg);
  EXPECT_TRUE(weighted.model.params() == plain.model.params());
  EXPECT_FALSE(weighted.model.params() == base.params());
}

TEST(FineTune, EqualRawWeightsMatchUnweightedBitwise) {
  const auto ds = gen_gaussian_blobs(3, 20, 4, 3.0, 1, 1);
  const FineTuneConfig cfg{2, 1e-2, 0.9, 5e-4, 8, 3};
  const Model base = Model::initialize(small_spec(HeadKind::cosine, 4, 3), 5);
  const std::vector<double> raw(ds.size(), 0.37);
  EXPECT_TRUE(fine_tune(base, ds, cfg, &raw).model.params() == fine_tune(base, ds, cfg).model.params());
}

TEST(FineTune, OneUniformStepEqualsOneCrossEntropySgdStep) {
  const auto ds = gen_gaussian_blobs(3, 8, 4, 3.0, 1, 1);
  const FineTuneConfig cfg{1, 1e-2, 0.9, 5e-4, ds.size(), 3};
  const Model base = Model::initialize(small_spec(HeadKind::linear, 4, 3), 5);
  const auto tuned = fine_tune(base, ds, cfg).model;

  Model manual = base;
  Rng rng(3);
  const auto order = random_permutation(ds.size(), rng);
  const Batch b = make_batch(ds, order);
  Tape t;
  const auto bound = manual.bind(t);
  Var loss = cross_entropy(manual.forward(bound, t.constant(b.inputs)).logits, b.targets);
  Velocity v;
  sgd_step(manual.params(), backward(t, loss), SGDConfig{cfg.lr, cfg.momentum, cfg.weight_decay, {}}, v);
  EXPECT_TRUE(tuned.params() == manual.params());
}

TEST(FineTune, AllZeroBatchesFallBackToUniform) {
  const auto ds = gen_gaussian_blobs(3, 10, 4, 3.0, 1, 1);
  const FineTuneConfig cfg{2, 1e-2, 0.9, 5e-4, 10, 3};
  const Model base = Model::initialize(small_spec(HeadKind::linear, 4, 3), 5);
  const std::vector<double> zeros(ds.size(), 0.0);
  const auto r = fine_tune(base, ds, cfg, &zeros);
  EXPECT_EQ(r.fallback_batches, 6u);
  EXPECT_TRUE(r.model.params() == fine_tune(base, ds, cfg).model.params());
  const std::vector<double> short_raw(3, 1.0);
  EXPECT_THROW(fine_tune(base, ds, cfg, &short_raw), ShapeError);
}

TEST(FineTune, ZeroEpochsLeaveModelUnchanged) {
  const auto ds = gen_gaussian_blobs(3, 10, 4, 3.0, 1, 1);
  const Model base = Model::initialize(small_spec(HeadKind::linear, 4, 3), 5);
  EXPECT_TRUE(fine_tune(base, ds, FineTuneConfig{0, 1e-2, 0.9, 5e-4, 10, 3}).model.params() == base.params());
  EXPECT_THROW(fine_tune(base, ds, FineTuneConfig{-1, 1e-2, 0.9, 5e-4, 10, 3}), ValidationError);
}

TEST(ScoresCsv, HeaderAndRows) {
  const auto ds = gen_gaussian_blobs(2, 3, 3, 3.0, 1, 1);
  UncertaintyScores s{{0.5, 0.75, 1.0, 0.5, 0.6, 0.7}};
  std::ostringstream os;
  write_scores_csv(os, ds, s);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "sample_id,score");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 6);
}

TEST(BalancedAccuracy, MeanOfPerClassRecall) {
  std::vector<EvalRecord> r;
  for (int i = 0; i < 8; ++i) r.push_back(EvalRecord::make(0.9, 0, 0));  // class 0: 8/8
  r.push_back(EvalRecord::make(0.9, 0, 1));                              // class 1: 1/2
  r.push_back(EvalRecord::make(0.9, 1, 1));
  EXPECT_NEAR(balanced_accuracy(r, 2), 0.75, 1e-15);
  EXPECT_NEAR(accuracy(r), 0.9, 1e-15);
  EXPECT_THROW(balanced_accuracy(r, 1), ValidationError);
  EXPECT_THROW(balanced_accuracy({}, 3), ValidationError);
}
