#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "phl/augment.hpp"
#include "phl/objectives.hpp"
#include "phl/optim.hpp"

namespace phl {

enum class Regime { Joint, Bilevel, FixedHead, PCARefresh, SlowSingle, SlowOptimal, NoHead };
enum class PcaSide { Top, Bottom };

std::string to_string(Regime regime);
Regime parse_regime(const std::string& text);
std::string to_string(PcaSide side);
PcaSide parse_pca_side(const std::string& text);

struct TrainSchedule {
  Regime regime = Regime::Joint;
  Index epochs = 60;
  Index batch_size = 128;
  LossConfig loss;
  OptimizerConfig encoder_optimizer{OptimizerKind::Adam, 1e-3, 1e-6};
  OptimizerConfig head_optimizer{OptimizerKind::Adam, 1e-3, 1e-6};

  // Bilevel: l inner steps on the head against L + lambda |g - g^k|^2.
  Index inner_steps = 5;
  double proximal = 1.0;
  bool persistent_inner = true;

  // PCARefresh
  PcaSide pca_side = PcaSide::Top;
  Index pca_subset = 2048;

  // SlowOptimal
  double slow_tolerance = 1e-4;
  Index slow_max_iters = 200;
  Index slow_subset = 256;

  std::uint64_t seed = 0;

  void validate() const;
};

/// Throws ConfigError unless the head kind suits the regime.
void check_regime_head(Regime regime, HeadKind kind);

// ---- single-step operations -------------------------------------------------

/// Gradient of the batch loss with respect to the encoder parameters,
/// with the head held at its current parameters.
std::vector<Tensor> encoder_gradient(const Encoder& encoder, const Head& head, const Tensor& stacked,
                                     Index batch, const LossConfig& loss);

/// One simultaneous step on f and (when `update_head` and trainable) g from a
/// single backward pass. Returns the loss at the pre-step parameters.
double joint_step(Encoder& encoder, Head& head, const ViewBatch& batch, const LossConfig& loss,
                  Optimizer& encoder_opt, Optimizer& head_opt, bool update_head = true);

struct BilevelResult {
  double loss = 0.0;                // L(g^{k+1} o f^k) on the batch
  std::vector<double> inner;        // l + 1 values of L + lambda |g - g^k|^2
  double head_delta_norm = 0.0;     // |g^{k+1} - g^k|
  std::vector<Tensor> encoder_grad; // gradient used for the outer step
};

struct BilevelConfig {
  Index inner_steps = 5;
  double proximal = 1.0;
  LossConfig loss;
};

/// l steps on g (encoder frozen) against the proximal objective, each a
/// base optimizer step followed by the closed-form proximal map
/// g <- (g' + 2 eta lambda g^k) / (1 + 2 eta lambda); then one encoder step
/// through the updated head.
BilevelResult bilevel_step(Encoder& encoder, Head& head, const ViewBatch& batch,
                           const BilevelConfig& config, Optimizer& encoder_opt,
                           Optimizer& inner_opt);

/// Value of L(g o f; batch) + lambda |g - anchor|^2 for the current head.
double proximal_objective(const Head& head, const Tensor& features, Index batch,
                          const LossConfig& loss, double proximal, const Vector& anchor);

/// PCA head from encoder features of `subset` rows: rows of A are the k
/// leading (or trailing) covariance eigenvectors, bias recenters by the mean.
Head pca_refresh(const Encoder& encoder, const Tensor& subset, Index k, PcaSide side);

/// Encoder steps per batch while the head gradient accumulates; one head
/// step with the mean accumulated gradient at the end. Returns mean loss.
double slow_single_epoch(Encoder& encoder, Head& head, const std::vector<ViewBatch>& batches,
                         const LossConfig& loss, Optimizer& encoder_opt, Optimizer& head_opt);

struct SlowOptimalResult {
  Index iterations = 0;          // accepted steps
  std::vector<double> losses;   // loss before the first step and after each accepted one
};

/// Optimizes g alone on a fixed view batch until the relative improvement
/// drops below `tolerance`, a step would increase the loss, or `max_iters`.
SlowOptimalResult slow_optimal_epoch(const Encoder& encoder, Head& head, const ViewBatch& subset,
                                     const LossConfig& loss, double tolerance, Index max_iters,
                                     Optimizer& head_opt);

// ---- full runs --------------------------------------------------------------

struct EpochRecord {
  Index epoch = 0;  // 1-based
  Regime regime = Regime::Joint;
  double loss = 0.0;
  std::vector<double> inner_losses;
  double g_delta_norm = 0.0;
  double wall_ms = 0.0;
};

struct RunMetrics {
  std::vector<EpochRecord> epochs;
};

using EpochSink = std::function<void(const EpochRecord&, const Encoder&, const Head&)>;

/// Trains `encoder`/`head` in place on `train` under `schedule`.
RunMetrics run_schedule(const TrainSchedule& schedule, const LabeledDataset& train,
                        const Augmenter& augmenter, Encoder& encoder, Head& head,
                        const EpochSink& sink = {});

}  // namespace phl
