#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "phl/training.hpp"

using namespace phl;

namespace {

Tensor gaussian(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(r, c);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = n(rng);
  return t;
}

ViewBatch random_batch(Index b, Index p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ViewBatch batch;
  batch.view1 = gaussian(b, p, rng);
  batch.view2 = batch.view1 + gaussian(b, p, rng, 0.1);
  for (Index i = 0; i < b; ++i) batch.indices.push_back(i);
  return batch;
}

const std::vector<Index> kSizes{6, 12, 8};

struct Fixture {
  Encoder encoder = init_encoder(kSizes, 11);
  Head head = init_head(HeadKind::Linear, 8, 4, std::nullopt, 12);
  ViewBatch batch = random_batch(8, 6, 13);
  LossConfig loss;
};

OptimizerConfig sgd(double lr) {
  OptimizerConfig c{OptimizerKind::SgdMomentum, lr, 0.0};
  c.momentum = 0.0;
  return c;
}

double batch_loss_value(const Encoder& e, const Head& h, const ViewBatch& batch,
                        const LossConfig& loss) {
  ForwardPass pass = build_forward(e, h, batch.stacked(), Mode::Train);
  const NodeId l = batch_loss_stacked(pass.graph, pass.z, batch.size(), loss).loss;
  pass.graph.forward(pass.bindings);
  return pass.graph.value(l)(0, 0);
}

LabeledDataset small_synthetic() {
  SynthConfig sc;
  sc.samples_per_class = 12;
  sc.classes = 4;
  sc.seed = 5;
  return generate_synthetic(sc);
}

}  // namespace

TEST(Regimes, NamesRoundTripAndCompatibility) {
  for (Regime r : {Regime::Joint, Regime::Bilevel, Regime::FixedHead, Regime::PCARefresh,
                   Regime::SlowSingle, Regime::SlowOptimal, Regime::NoHead}) {
    EXPECT_EQ(parse_regime(to_string(r)), r);
  }
  EXPECT_THROW(parse_regime("alternating"), ConfigError);
  EXPECT_NO_THROW(check_regime_head(Regime::Joint, HeadKind::NonLinear));
  EXPECT_NO_THROW(check_regime_head(Regime::FixedHead, HeadKind::DiagonalLowRank));
  EXPECT_THROW(check_regime_head(Regime::Joint, HeadKind::FixedRandom), ConfigError);
  EXPECT_THROW(check_regime_head(Regime::NoHead, HeadKind::Linear), ConfigError);
  EXPECT_THROW(check_regime_head(Regime::PCARefresh, HeadKind::Linear), ConfigError);
  EXPECT_THROW(check_regime_head(Regime::Bilevel, HeadKind::None), ConfigError);
}

TEST(Schedule, Validation) {
  TrainSchedule s;
  EXPECT_NO_THROW(s.validate());
  s.batch_size = 1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = TrainSchedule{};
  s.inner_steps = -1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = TrainSchedule{};
  s.proximal = -0.5;
  EXPECT_THROW(s.validate(), ConfigError);
  s = TrainSchedule{};
  s.slow_tolerance = 0.0;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(JointStep, FrozenHeadIsUntouchedAndEncoderMoves) {
  Fixture f;
  Head fixed = init_head(HeadKind::FixedRandom, 8, 4, std::nullopt, 3);
  const Vector head_before = head_parameters(fixed);
  const std::uint64_t enc_before = checksum(f.encoder.params);
  Optimizer eo, ho;
  joint_step(f.encoder, fixed, f.batch, f.loss, eo, ho);
  EXPECT_EQ(head_parameters(fixed), head_before);
  EXPECT_NE(checksum(f.encoder.params), enc_before);
  EXPECT_EQ(ho.steps(), 0);
}

TEST(JointStep, ZeroLearningRateChangesNothing) {
  Fixture f;
  const std::uint64_t enc = checksum(f.encoder.params);
  const std::uint64_t hd = checksum(f.head.params);
  Optimizer eo(sgd(0.0)), ho(sgd(0.0));
  const double l0 = joint_step(f.encoder, f.head, f.batch, f.loss, eo, ho);
  EXPECT_EQ(checksum(f.encoder.params), enc);
  EXPECT_EQ(checksum(f.head.params), hd);
  EXPECT_DOUBLE_EQ(l0, batch_loss_value(f.encoder, f.head, f.batch, f.loss));
}

TEST(JointStep, ReturnsPreStepLossAndDecreasesOverSteps) {
  Fixture f;
  const double initial = batch_loss_value(f.encoder, f.head, f.batch, f.loss);
  OptimizerConfig c{OptimizerKind::Adam, 1e-2, 0.0};
  Optimizer eo(c), ho(c);
  const double first = joint_step(f.encoder, f.head, f.batch, f.loss, eo, ho);
  EXPECT_DOUBLE_EQ(first, initial);
  for (int i = 0; i < 49; ++i) joint_step(f.encoder, f.head, f.batch, f.loss, eo, ho);
  EXPECT_LT(batch_loss_value(f.encoder, f.head, f.batch, f.loss), initial);
}

TEST(Bilevel, ZeroInnerStepsMatchesFrozenJointStepBitForBit) {
  Fixture a;
  Fixture b;
  Optimizer eo_a, io_a, eo_b, ho_b;
  const BilevelResult r = bilevel_step(a.encoder, a.head, a.batch, {0, 1.0, a.loss}, eo_a, io_a);
  const double l = joint_step(b.encoder, b.head, b.batch, b.loss, eo_b, ho_b, false);
  EXPECT_EQ(r.loss, l);
  EXPECT_EQ(flatten(a.encoder.params), flatten(b.encoder.params));
  EXPECT_EQ(head_parameters(a.head), head_parameters(b.head));
  EXPECT_EQ(r.head_delta_norm, 0.0);
  ASSERT_EQ(r.inner.size(), 1u);
  EXPECT_EQ(io_a.steps(), 0);
}

TEST(Bilevel, InnerTrajectoryHasLPlusOneValues) {
  Fixture f;
  Optimizer eo, io;
  const BilevelResult r = bilevel_step(f.encoder, f.head, f.batch, {5, 1.0, f.loss}, eo, io);
  EXPECT_EQ(r.inner.size(), 6u);
  EXPECT_GT(r.head_delta_norm, 0.0);
  EXPECT_EQ(r.encoder_grad.size(), f.encoder.params.size());
}

TEST(Bilevel, HugeProximalPinsTheHead) {
  Fixture f;
  const Vector anchor = head_parameters(f.head);
  Optimizer eo, io(OptimizerConfig{OptimizerKind::Adam, 1e-2, 0.0});
  const BilevelResult r = bilevel_step(f.encoder, f.head, f.batch, {10, 1e12, f.loss}, eo, io);
  EXPECT_LT(r.head_delta_norm, 1e-6);
  EXPECT_LT((head_parameters(f.head) - anchor).norm(), 1e-6);
}

TEST(Bilevel, HeadDisplacementShrinksAsProximalGrows) {
  double previous = std::numeric_limits<double>::infinity();
  for (double lambda : {0.0, 1.0, 1e6, 1e12}) {
    Fixture f;
    Optimizer eo, io(OptimizerConfig{OptimizerKind::Adam, 1e-2, 0.0});
    const double delta =
        bilevel_step(f.encoder, f.head, f.batch, {5, lambda, f.loss}, eo, io).head_delta_norm;
    EXPECT_LE(delta, previous) << "lambda " << lambda;
    previous = delta;
  }
}

TEST(Bilevel, SmallStepSgdDoesNotIncreaseTheProximalObjective) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Encoder e = init_encoder(kSizes, seed);
    Head h = init_head(HeadKind::Linear, 8, 4, std::nullopt, seed + 100);
    const ViewBatch batch = random_batch(8, 6, seed + 200);
    Optimizer eo, io(sgd(1e-3));
    const BilevelResult r = bilevel_step(e, h, batch, {8, 1.0, LossConfig{}}, eo, io);
    for (std::size_t i = 1; i < r.inner.size(); ++i) {
      EXPECT_LE(r.inner[i], r.inner[i - 1] + 1e-12) << "seed " << seed << " step " << i;
    }
  }
}

TEST(Bilevel, InnerValuesMatchProximalObjective) {
  Fixture f;
  const Vector anchor = head_parameters(f.head);
  const Tensor features = f.encoder.features(f.batch.stacked());
  const double expected = proximal_objective(f.head, features, 8, f.loss, 2.0, anchor);
  Optimizer eo, io;
  const BilevelResult r = bilevel_step(f.encoder, f.head, f.batch, {1, 2.0, f.loss}, eo, io);
  EXPECT_NEAR(r.inner[0], expected, 1e-12);
}

TEST(Bilevel, EncoderGradientIsTakenThroughTheUpdatedHead) {
  Fixture f;
  const auto joint = encoder_gradient(f.encoder, f.head, f.batch.stacked(), 8, f.loss);
  Optimizer eo, io(OptimizerConfig{OptimizerKind::Adam, 5e-2, 0.0});
  const BilevelResult r = bilevel_step(f.encoder, f.head, f.batch, {5, 0.1, f.loss}, eo, io);
  double diff = 0.0;
  for (std::size_t i = 0; i < joint.size(); ++i) diff += (joint[i] - r.encoder_grad[i]).norm();
  EXPECT_GT(diff, 1e-8);
}

TEST(Bilevel, RejectsFrozenHeadsAndBadConfig) {
  Fixture f;
  Head fixed = init_head(HeadKind::FixedRandom, 8, 4, std::nullopt, 1);
  Optimizer eo, io;
  EXPECT_THROW(bilevel_step(f.encoder, fixed, f.batch, {1, 1.0, f.loss}, eo, io), ConfigError);
  EXPECT_THROW(bilevel_step(f.encoder, f.head, f.batch, {-1, 1.0, f.loss}, eo, io), ConfigError);
  EXPECT_THROW(bilevel_step(f.encoder, f.head, f.batch, {1, -1.0, f.loss}, eo, io), ConfigError);
}

namespace {

// Identity-like encoder (single linear layer) so features equal inputs.
Encoder identity_encoder(Index m) {
  const std::vector<Index> sizes{m, m};
  Encoder e = init_encoder(sizes, 0);
  e.params[0].value = Tensor::Identity(m, m);
  return e;
}

}  // namespace

TEST(Pca, PlaneDataTopComponentsSpanThePlane) {
  std::mt19937_64 rng(3);
  const Index m = 5;
  const Tensor coeffs = gaussian(200, 2, rng);
  Tensor basis = Tensor::Zero(2, m);
  basis(0, 1) = 1.0;
  basis(1, 3) = 1.0;
  const Tensor x = coeffs * basis;
  const Head h = pca_refresh(identity_encoder(m), x, 2, PcaSide::Top);
  const Tensor& a = h.param("head.A");
  // Each row lies in span{e1, e3}.
  for (Index r = 0; r < 2; ++r) {
    EXPECT_NEAR(a(r, 1) * a(r, 1) + a(r, 3) * a(r, 3), 1.0, 1e-10);
  }
  EXPECT_FALSE(h.trainable);
}

TEST(Pca, TopAndBottomPickExtremeVarianceAxes) {
  std::mt19937_64 rng(4);
  const Index m = 4;
  Tensor x = gaussian(500, m, rng);
  x.col(2) *= 10.0;
  x.col(0) *= 0.01;
  const Encoder e = identity_encoder(m);
  const Head top = pca_refresh(e, x, 1, PcaSide::Top);
  const Head bottom = pca_refresh(e, x, 1, PcaSide::Bottom);
  // Sample cross-covariance tilts the axes slightly.
  EXPECT_NEAR(std::abs(top.param("head.A")(0, 2)), 1.0, 1e-4);
  EXPECT_NEAR(std::abs(bottom.param("head.A")(0, 0)), 1.0, 1e-4);
}

TEST(Pca, RowsOrthonormalAndOutputCentered) {
  std::mt19937_64 rng(5);
  const Encoder e = init_encoder(kSizes, 9);
  const Tensor x = gaussian(40, 6, rng);
  const Head h = pca_refresh(e, x, 3, PcaSide::Top);
  const Tensor& a = h.param("head.A");
  EXPECT_LT((a * a.transpose() - Tensor::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-10);
  const Tensor z = h.apply(e.features(x));
  EXPECT_LT(z.colwise().mean().cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Pca, Preconditions) {
  std::mt19937_64 rng(6);
  const Encoder e = init_encoder(kSizes, 9);
  EXPECT_THROW(pca_refresh(e, gaussian(8, 6, rng), 2, PcaSide::Top), ConfigError);
  EXPECT_THROW(pca_refresh(e, gaussian(20, 6, rng), 0, PcaSide::Top), ConfigError);
  EXPECT_THROW(pca_refresh(e, gaussian(20, 6, rng), 9, PcaSide::Top), ConfigError);
  EXPECT_EQ(parse_pca_side("bottom"), PcaSide::Bottom);
  EXPECT_THROW(parse_pca_side("middle"), ConfigError);
}

TEST(SlowSingle, SingleBatchEqualsJointStep) {
  Fixture a, b;
  Optimizer eo_a, ho_a, eo_b, ho_b;
  const double la = slow_single_epoch(a.encoder, a.head, {a.batch}, a.loss, eo_a, ho_a);
  const double lb = joint_step(b.encoder, b.head, b.batch, b.loss, eo_b, ho_b);
  EXPECT_EQ(la, lb);
  EXPECT_EQ(flatten(a.encoder.params), flatten(b.encoder.params));
  EXPECT_EQ(head_parameters(a.head), head_parameters(b.head));
}

TEST(SlowSingle, OneHeadStepPerEpochWithTheMeanGradient) {
  Fixture f;
  const Vector before = head_parameters(f.head);
  Optimizer eo, ho(sgd(0.1));
  slow_single_epoch(f.encoder, f.head, {f.batch, f.batch, f.batch}, f.loss, eo, ho);
  EXPECT_EQ(ho.steps(), 1);
  EXPECT_EQ(eo.steps(), 3);
  EXPECT_NE(head_parameters(f.head), before);
}

TEST(SlowSingle, HeadIsConstantDuringTheEpoch) {
  // Replaying the encoder steps against the initial head reproduces the
  // epoch's encoder exactly, so the head was never updated mid-epoch.
  Fixture f;
  const Head initial = f.head;
  Encoder replay = f.encoder;
  const std::vector<ViewBatch> batches{random_batch(8, 6, 1), random_batch(8, 6, 2),
                                       random_batch(8, 6, 3)};
  Optimizer eo, ho;
  slow_single_epoch(f.encoder, f.head, batches, f.loss, eo, ho);
  Head frozen = initial;
  Optimizer eo2, unused;
  for (const auto& b : batches) joint_step(replay, frozen, b, f.loss, eo2, unused, false);
  EXPECT_EQ(flatten(replay.params), flatten(f.encoder.params));
}

TEST(SlowOptimal, MaxItersZeroIsANoOp) {
  Fixture f;
  const Vector before = head_parameters(f.head);
  Optimizer ho;
  const auto r = slow_optimal_epoch(f.encoder, f.head, f.batch, f.loss, 1e-4, 0, ho);
  EXPECT_EQ(r.iterations, 0);
  EXPECT_EQ(r.losses.size(), 1u);
  EXPECT_EQ(head_parameters(f.head), before);
}

TEST(SlowOptimal, LossesAreNonIncreasingAndStop) {
  Fixture f;
  Optimizer ho(OptimizerConfig{OptimizerKind::Adam, 1e-2, 0.0});
  const auto r = slow_optimal_epoch(f.encoder, f.head, f.batch, f.loss, 1e-6, 500, ho);
  ASSERT_EQ(r.losses.size(), static_cast<std::size_t>(r.iterations + 1));
  for (std::size_t i = 1; i < r.losses.size(); ++i) EXPECT_LE(r.losses[i], r.losses[i - 1]);
  EXPECT_LT(r.losses.back(), r.losses.front());
  EXPECT_LE(r.iterations, 500);
  // The head ends at the last accepted loss.
  EXPECT_NEAR(batch_loss_value(f.encoder, f.head, f.batch, f.loss), r.losses.back(), 1e-12);
}

TEST(SlowOptimal, NegligibleImprovementStopsAfterOneStep) {
  // A vanishing step size is a numerical fixed point: relative improvement
  // falls below the tolerance on the first step.
  Fixture f;
  Optimizer ho(sgd(1e-14));
  const auto r = slow_optimal_epoch(f.encoder, f.head, f.batch, f.loss, 1e-3, 100, ho);
  EXPECT_LE(r.iterations, 1);
}

TEST(SlowOptimal, Preconditions) {
  Fixture f;
  Optimizer ho;
  EXPECT_THROW(slow_optimal_epoch(f.encoder, f.head, f.batch, f.loss, 0.0, 10, ho), ConfigError);
  EXPECT_THROW(slow_optimal_epoch(f.encoder, f.head, f.batch, f.loss, 1e-4, -1, ho), ConfigError);
  Head fixed = init_head(HeadKind::FixedRandom, 8, 4, std::nullopt, 1);
  EXPECT_THROW(slow_optimal_epoch(f.encoder, fixed, f.batch, f.loss, 1e-4, 10, ho), ConfigError);
}

namespace {

struct RunResult {
  RunMetrics metrics;
  Encoder encoder;
  Head head;
};

RunResult run(Regime regime, HeadKind kind, Index epochs, Index inner = 2) {
  const LabeledDataset data = small_synthetic();
  AugConfig ac;
  ac.noise_sigma = 0.1;
  Augmenter aug(DataKind::Synthetic, ac, data.synthetic);
  TrainSchedule s;
  s.regime = regime;
  s.epochs = epochs;
  s.batch_size = 16;
  s.inner_steps = inner;
  s.pca_subset = 40;
  s.slow_subset = 16;
  s.slow_max_iters = 5;
  s.seed = 3;
  const std::vector<Index> sizes{32, 24, 12};
  RunResult r{{}, init_encoder(sizes, 1),
              init_head(kind, 12, kind == HeadKind::None ? 12 : 4,
                        kind == HeadKind::NonLinear ? std::optional<Index>(8) : std::nullopt, 2)};
  r.metrics = run_schedule(s, data, aug, r.encoder, r.head);
  return r;
}

}  // namespace

TEST(RunSchedule, RejectsRegimeHeadMismatchAndDimensions) {
  EXPECT_THROW(run(Regime::Joint, HeadKind::FixedRandom, 1), ConfigError);
  const LabeledDataset data = small_synthetic();
  Augmenter aug(DataKind::Synthetic, AugConfig{}, data.synthetic);
  const std::vector<Index> sizes{10, 12};
  Encoder e = init_encoder(sizes, 1);
  Head h = init_head(HeadKind::Linear, 12, 4, std::nullopt, 2);
  TrainSchedule s;
  s.batch_size = 16;
  EXPECT_THROW(run_schedule(s, data, aug, e, h), ShapeError);
}

TEST(RunSchedule, DeterministicForFixedSeed) {
  const RunResult a = run(Regime::Bilevel, HeadKind::Linear, 2);
  const RunResult b = run(Regime::Bilevel, HeadKind::Linear, 2);
  EXPECT_EQ(checksum(a.encoder.params), checksum(b.encoder.params));
  EXPECT_EQ(checksum(a.head.params), checksum(b.head.params));
  ASSERT_EQ(a.metrics.epochs.size(), 2u);
  EXPECT_EQ(a.metrics.epochs[1].loss, b.metrics.epochs[1].loss);
}

TEST(RunSchedule, FrozenHeadsKeepTheirChecksum) {
  for (HeadKind kind : {HeadKind::FixedRandom, HeadKind::DiagonalLowRank}) {
    const Head initial = init_head(kind, 12, 4, std::nullopt, 2);
    const RunResult r = run(Regime::FixedHead, kind, 2);
    EXPECT_EQ(checksum(r.head.params), checksum(initial.params)) << to_string(kind);
    for (const auto& e : r.metrics.epochs) EXPECT_EQ(e.g_delta_norm, 0.0);
  }
}

TEST(RunSchedule, BilevelWithoutInnerStepsFollowsTheFrozenTrajectory) {
  // l = 0 never moves the head, so it equals encoder-only training against
  // the initial head. A Linear head frozen by hand is the reference.
  const RunResult bilevel = run(Regime::Bilevel, HeadKind::Linear, 2, 0);
  const LabeledDataset data = small_synthetic();
  AugConfig ac;
  ac.noise_sigma = 0.1;
  Augmenter aug(DataKind::Synthetic, ac, data.synthetic);
  MinibatchStream stream(data, 16, 3, aug);
  const std::vector<Index> sizes{32, 24, 12};
  Encoder e = init_encoder(sizes, 1);
  Head h = init_head(HeadKind::Linear, 12, 4, std::nullopt, 2);
  Optimizer eo(OptimizerConfig{OptimizerKind::Adam, 1e-3, 1e-6}), unused;
  for (Index epoch = 0; epoch < 2; ++epoch) {
    for (const auto& batch : stream.epoch(epoch)) joint_step(e, h, batch, LossConfig{}, eo, unused, false);
  }
  EXPECT_EQ(flatten(bilevel.encoder.params), flatten(e.params));
  EXPECT_EQ(head_parameters(bilevel.head), head_parameters(h));
  for (const auto& rec : bilevel.metrics.epochs) {
    EXPECT_EQ(rec.inner_losses.size(), 1u);
    EXPECT_EQ(rec.g_delta_norm, 0.0);
  }
}

TEST(RunSchedule, EveryRegimeProducesFiniteRecords) {
  struct Case {
    Regime regime;
    HeadKind kind;
  };
  for (const Case c : {Case{Regime::Joint, HeadKind::Linear}, Case{Regime::Joint, HeadKind::NonLinear},
                       Case{Regime::Bilevel, HeadKind::NonLinear}, Case{Regime::NoHead, HeadKind::None},
                       Case{Regime::PCARefresh, HeadKind::PCALinear},
                       Case{Regime::SlowSingle, HeadKind::Linear},
                       Case{Regime::SlowOptimal, HeadKind::Linear}}) {
    const RunResult r = run(c.regime, c.kind, 2);
    ASSERT_EQ(r.metrics.epochs.size(), 2u) << to_string(c.regime);
    for (const auto& e : r.metrics.epochs) {
      EXPECT_TRUE(std::isfinite(e.loss)) << to_string(c.regime);
      EXPECT_EQ(e.regime, c.regime);
    }
    EXPECT_EQ(r.metrics.epochs[0].epoch, 1);
  }
}

TEST(RunSchedule, ZeroEpochsLeavesParametersUntouched) {
  const Encoder initial = init_encoder(std::vector<Index>{32, 24, 12}, 1);
  const RunResult r = run(Regime::Joint, HeadKind::Linear, 0);
  EXPECT_TRUE(r.metrics.epochs.empty());
  EXPECT_EQ(checksum(r.encoder.params), checksum(initial.params));
}
