#include "phl/training.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>

namespace phl {

std::string to_string(Regime regime) {
  switch (regime) {
    case Regime::Joint: return "joint";
    case Regime::Bilevel: return "bilevel";
    case Regime::FixedHead: return "fixed-head";
    case Regime::PCARefresh: return "pca-refresh";
    case Regime::SlowSingle: return "slow-single";
    case Regime::SlowOptimal: return "slow-optimal";
    case Regime::NoHead: return "no-head";
  }
  return "?";
}

Regime parse_regime(const std::string& text) {
  for (Regime r : {Regime::Joint, Regime::Bilevel, Regime::FixedHead, Regime::PCARefresh,
                   Regime::SlowSingle, Regime::SlowOptimal, Regime::NoHead}) {
    if (to_string(r) == text) return r;
  }
  throw ConfigError("unknown regime '" + text + "'");
}

std::string to_string(PcaSide side) { return side == PcaSide::Top ? "top" : "bottom"; }

PcaSide parse_pca_side(const std::string& text) {
  if (text == "top") return PcaSide::Top;
  if (text == "bottom") return PcaSide::Bottom;
  throw ConfigError("unknown PCA side '" + text + "'");
}

void TrainSchedule::validate() const {
  loss.validate();
  if (epochs < 0) throw ConfigError("schedule: epochs must be >= 0");
  if (batch_size < 2) {
    throw ConfigError("schedule: batch size must be >= 2 (InfoNCE needs a negative per anchor)");
  }
  if (inner_steps < 0) throw ConfigError("schedule: inner steps l must be >= 0");
  if (!(proximal >= 0.0)) throw ConfigError("schedule: proximal strength must be >= 0");
  if (!(slow_tolerance > 0.0)) throw ConfigError("schedule: slow-optimal tolerance must be > 0");
  if (slow_max_iters < 0) throw ConfigError("schedule: slow-optimal max iterations must be >= 0");
  if (slow_subset < 2) throw ConfigError("schedule: slow-optimal subset must be >= 2");
  if (pca_subset < 2) throw ConfigError("schedule: PCA subset must be >= 2");
}

void check_regime_head(Regime regime, HeadKind kind) {
  auto fail = [&] {
    throw ConfigError("regime " + to_string(regime) + " cannot run with head kind " +
                      to_string(kind));
  };
  const bool trainable = kind == HeadKind::Linear || kind == HeadKind::NonLinear;
  switch (regime) {
    case Regime::Joint:
    case Regime::Bilevel:
    case Regime::SlowSingle:
    case Regime::SlowOptimal:
      if (!trainable) fail();
      break;
    case Regime::FixedHead:
      if (kind != HeadKind::FixedRandom && kind != HeadKind::FixedPretrained &&
          kind != HeadKind::DiagonalLowRank) {
        fail();
      }
      break;
    case Regime::PCARefresh:
      if (kind != HeadKind::PCALinear) fail();
      break;
    case Regime::NoHead:
      if (kind != HeadKind::None) fail();
      break;
  }
}

namespace {

using Clock = std::chrono::steady_clock;

struct HeadLossGraph {
  ExprGraph graph;
  Bindings bindings;
  std::vector<NodeId> head_nodes;
  NodeId loss = 0;
  std::optional<NodeId> bn;

  void rebind(const Head& head) {
    for (const auto& p : head.params) bindings[p.name] = p.value;
  }
};

HeadLossGraph head_loss_graph(const Head& head, const Tensor& features, Index batch,
                              const LossConfig& loss) {
  HeadLossGraph g;
  g.bindings["h"] = features;
  const NodeId z =
      head.build(g.graph, g.graph.input("h"), Mode::Train, g.bindings, g.head_nodes, &g.bn);
  g.loss = batch_loss_stacked(g.graph, z, batch, loss).loss;
  return g;
}

std::vector<Tensor> as_list(const std::map<NodeId, Tensor>& grads,
                            const std::vector<NodeId>& nodes) {
  std::vector<Tensor> out;
  out.reserve(nodes.size());
  for (NodeId n : nodes) out.push_back(grads.at(n));
  return out;
}

void fold_batch_stats(Head& head, const ForwardPass& pass) {
  if (!pass.bn) return;
  const ExprNode& bn = pass.graph.node(*pass.bn);
  head.update_running_stats(bn.batch_mean, bn.batch_var, pass.graph.value(*pass.bn).rows());
}

// One encoder step with the head held fixed.
double encoder_step(Encoder& encoder, Head& head, const Tensor& stacked, Index batch,
                    const LossConfig& loss, Optimizer& opt, std::vector<Tensor>* grad_out) {
  ForwardPass pass = build_forward(encoder, head, stacked, Mode::Train);
  const NodeId l = batch_loss_stacked(pass.graph, pass.z, batch, loss).loss;
  pass.graph.forward(pass.bindings);
  const double value = pass.graph.value(l)(0, 0);
  auto grads = as_list(pass.graph.gradient(l, pass.encoder_nodes), pass.encoder_nodes);
  opt.step(encoder.params, grads);
  fold_batch_stats(head, pass);
  if (grad_out) *grad_out = std::move(grads);
  return value;
}

std::vector<Index> sample_rows(Index n, Index count, std::uint64_t seed) {
  std::vector<Index> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), Index{0});
  if (count >= n) return rows;
  Rng rng(seed);
  std::shuffle(rows.begin(), rows.end(), rng);
  rows.resize(static_cast<std::size_t>(count));
  std::sort(rows.begin(), rows.end());
  return rows;
}

}  // namespace

std::vector<Tensor> encoder_gradient(const Encoder& encoder, const Head& head, const Tensor& stacked,
                                     Index batch, const LossConfig& loss) {
  ForwardPass pass = build_forward(encoder, head, stacked, Mode::Train);
  const NodeId l = batch_loss_stacked(pass.graph, pass.z, batch, loss).loss;
  pass.graph.forward(pass.bindings);
  return as_list(pass.graph.gradient(l, pass.encoder_nodes), pass.encoder_nodes);
}

double joint_step(Encoder& encoder, Head& head, const ViewBatch& batch, const LossConfig& loss,
                  Optimizer& encoder_opt, Optimizer& head_opt, bool update_head) {
  const Tensor stacked = batch.stacked();
  if (!(update_head && head.trainable)) {
    return encoder_step(encoder, head, stacked, batch.size(), loss, encoder_opt, nullptr);
  }
  ForwardPass pass = build_forward(encoder, head, stacked, Mode::Train);
  const NodeId l = batch_loss_stacked(pass.graph, pass.z, batch.size(), loss).loss;
  pass.graph.forward(pass.bindings);
  const double value = pass.graph.value(l)(0, 0);

  std::vector<NodeId> wrt = pass.encoder_nodes;
  wrt.insert(wrt.end(), pass.head_nodes.begin(), pass.head_nodes.end());
  const auto grads = pass.graph.gradient(l, wrt);
  encoder_opt.step(encoder.params, as_list(grads, pass.encoder_nodes));
  head_opt.step(head.params, as_list(grads, pass.head_nodes));
  fold_batch_stats(head, pass);
  return value;
}

double proximal_objective(const Head& head, const Tensor& features, Index batch,
                          const LossConfig& loss, double proximal, const Vector& anchor) {
  HeadLossGraph g = head_loss_graph(head, features, batch, loss);
  g.graph.forward(g.bindings);
  return g.graph.value(g.loss)(0, 0) + proximal * (head_parameters(head) - anchor).squaredNorm();
}

BilevelResult bilevel_step(Encoder& encoder, Head& head, const ViewBatch& batch,
                           const BilevelConfig& config, Optimizer& encoder_opt,
                           Optimizer& inner_opt) {
  if (!head.trainable) throw ConfigError("bilevel step: head " + to_string(head.kind) + " is not trainable");
  if (config.inner_steps < 0) throw ConfigError("bilevel step: inner steps must be >= 0");
  if (!(config.proximal >= 0.0)) throw ConfigError("bilevel step: proximal strength must be >= 0");

  const Index b = batch.size();
  const Tensor stacked = batch.stacked();
  const Tensor features = encoder.features(stacked);
  const Vector anchor = head_parameters(head);
  const double shrink = 2.0 * inner_opt.config().learning_rate * config.proximal;

  BilevelResult result;
  HeadLossGraph g = head_loss_graph(head, features, b, config.loss);
  for (Index s = 0;; ++s) {
    g.rebind(head);
    g.graph.forward(g.bindings);
    const Vector theta = head_parameters(head);
    result.inner.push_back(g.graph.value(g.loss)(0, 0) +
                           config.proximal * (theta - anchor).squaredNorm());
    if (s == config.inner_steps) break;
    inner_opt.step(head.params, as_list(g.graph.gradient(g.loss, g.head_nodes), g.head_nodes));
    if (shrink > 0.0) head_load(head, (head_parameters(head) + shrink * anchor) / (1.0 + shrink));
  }
  result.head_delta_norm = (head_parameters(head) - anchor).norm();
  result.loss = encoder_step(encoder, head, stacked, b, config.loss, encoder_opt,
                             &result.encoder_grad);
  return result;
}

Head pca_refresh(const Encoder& encoder, const Tensor& subset, Index k, PcaSide side) {
  const Index m = encoder.output_dim();
  if (k < 1 || k > m) {
    throw ConfigError("pca_refresh: k = " + std::to_string(k) + " must lie in [1, m = " +
                      std::to_string(m) + "]");
  }
  if (subset.rows() <= m) {
    throw ConfigError("pca_refresh: subset of " + std::to_string(subset.rows()) +
                      " rows must exceed m = " + std::to_string(m));
  }
  const Tensor h = encoder.features(subset);
  const RowVector mean = h.colwise().mean();
  const Tensor centered = h.rowwise() - mean;
  const Tensor cov = centered.transpose() * centered / static_cast<double>(h.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Tensor> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericalError("pca_refresh: eigendecomposition failed");

  Head head = init_head(HeadKind::PCALinear, m, k, std::nullopt, 0);
  Tensor& a = head.param("head.A");
  for (Index r = 0; r < k; ++r) {
    // Eigenvalues come ascending.
    const Index col = side == PcaSide::Top ? m - 1 - r : r;
    a.row(r) = eig.eigenvectors().col(col).transpose();
  }
  head.param("head.b") = -(mean * a.transpose());
  return head;
}

double slow_single_epoch(Encoder& encoder, Head& head, const std::vector<ViewBatch>& batches,
                         const LossConfig& loss, Optimizer& encoder_opt, Optimizer& head_opt) {
  if (batches.empty()) return 0.0;
  std::vector<Tensor> accumulated;
  double total = 0.0;
  for (const auto& batch : batches) {
    ForwardPass pass = build_forward(encoder, head, batch.stacked(), Mode::Train);
    const NodeId l = batch_loss_stacked(pass.graph, pass.z, batch.size(), loss).loss;
    pass.graph.forward(pass.bindings);
    total += pass.graph.value(l)(0, 0);
    std::vector<NodeId> wrt = pass.encoder_nodes;
    if (head.trainable) wrt.insert(wrt.end(), pass.head_nodes.begin(), pass.head_nodes.end());
    const auto grads = pass.graph.gradient(l, wrt);
    encoder_opt.step(encoder.params, as_list(grads, pass.encoder_nodes));
    if (head.trainable) {
      auto g = as_list(grads, pass.head_nodes);
      if (accumulated.empty()) {
        accumulated = std::move(g);
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) accumulated[i] += g[i];
      }
    }
    fold_batch_stats(head, pass);
  }
  if (head.trainable) {
    for (auto& g : accumulated) g /= static_cast<double>(batches.size());
    head_opt.step(head.params, accumulated);
  }
  return total / static_cast<double>(batches.size());
}

SlowOptimalResult slow_optimal_epoch(const Encoder& encoder, Head& head, const ViewBatch& subset,
                                     const LossConfig& loss, double tolerance, Index max_iters,
                                     Optimizer& head_opt) {
  if (!(tolerance > 0.0)) throw ConfigError("slow_optimal: tolerance must be > 0");
  if (max_iters < 0) throw ConfigError("slow_optimal: max iterations must be >= 0");
  if (!head.trainable) throw ConfigError("slow_optimal: head is not trainable");

  SlowOptimalResult result;
  const Tensor features = encoder.features(subset.stacked());
  HeadLossGraph g = head_loss_graph(head, features, subset.size(), loss);
  g.rebind(head);
  g.graph.forward(g.bindings);
  double current = g.graph.value(g.loss)(0, 0);
  result.losses.push_back(current);
  for (Index it = 0; it < max_iters; ++it) {
    const ParameterList saved = head.params;
    head_opt.step(head.params, as_list(g.graph.gradient(g.loss, g.head_nodes), g.head_nodes));
    g.rebind(head);
    g.graph.forward(g.bindings);
    const double next = g.graph.value(g.loss)(0, 0);
    if (next > current) {
      head.params = saved;
      g.rebind(head);
      g.graph.forward(g.bindings);
      break;
    }
    ++result.iterations;
    result.losses.push_back(next);
    const double improvement = (current - next) / std::max(std::abs(current), 1e-12);
    current = next;
    if (improvement < tolerance) break;
  }
  return result;
}

RunMetrics run_schedule(const TrainSchedule& schedule, const LabeledDataset& train,
                        const Augmenter& augmenter, Encoder& encoder, Head& head,
                        const EpochSink& sink) {
  schedule.validate();
  check_regime_head(schedule.regime, head.kind);
  if (head.in_dim != encoder.output_dim()) {
    throw ShapeError("run: head expects m = " + std::to_string(head.in_dim) +
                     " but the encoder outputs " + std::to_string(encoder.output_dim()));
  }
  if (train.dim() != encoder.input_dim()) {
    throw ShapeError("run: dataset dimension " + std::to_string(train.dim()) +
                     " does not match encoder input " + std::to_string(encoder.input_dim()));
  }

  MinibatchStream stream(train, schedule.batch_size, schedule.seed, augmenter);
  Optimizer encoder_opt(schedule.encoder_optimizer);
  Optimizer head_opt(schedule.head_optimizer);
  OptimizerConfig inner_config = schedule.head_optimizer;
  inner_config.weight_decay = 0.0;
  Optimizer inner_opt(inner_config);

  auto pca_subset = [&](Index epoch) {
    const auto rows = sample_rows(train.size(), schedule.pca_subset,
                                  derive_seed(schedule.seed, static_cast<std::uint64_t>(epoch), 0x9ca));
    Tensor x(static_cast<Index>(rows.size()), train.dim());
    for (std::size_t i = 0; i < rows.size(); ++i) x.row(static_cast<Index>(i)) = train.examples.row(rows[i]);
    return x;
  };
  if (schedule.regime == Regime::PCARefresh) {
    head = pca_refresh(encoder, pca_subset(0), head.out_dim, schedule.pca_side);
  }

  RunMetrics metrics;
  const BilevelConfig bilevel{schedule.inner_steps, schedule.proximal, schedule.loss};
  for (Index epoch = 1; epoch <= schedule.epochs; ++epoch) {
    const auto start = Clock::now();
    const auto batches = stream.epoch(epoch - 1);
    EpochRecord record;
    record.epoch = epoch;
    record.regime = schedule.regime;

    double loss_sum = 0.0;
    double delta_sum = 0.0;
    Index head_updates = 0;
    auto track_head = [&](const Vector& before) {
      delta_sum += (head_parameters(head) - before).norm();
      ++head_updates;
    };

    switch (schedule.regime) {
      case Regime::Joint:
      case Regime::NoHead:
      case Regime::FixedHead:
      case Regime::PCARefresh:
      case Regime::SlowOptimal:
        for (const auto& batch : batches) {
          const Vector before = head_parameters(head);
          const bool update = schedule.regime == Regime::Joint;
          loss_sum += joint_step(encoder, head, batch, schedule.loss, encoder_opt, head_opt, update);
          if (update) track_head(before);
        }
        break;
      case Regime::Bilevel: {
        std::vector<double> inner_sum(static_cast<std::size_t>(schedule.inner_steps + 1), 0.0);
        for (const auto& batch : batches) {
          if (!schedule.persistent_inner) inner_opt.reset();
          const auto r = bilevel_step(encoder, head, batch, bilevel, encoder_opt, inner_opt);
          loss_sum += r.loss;
          delta_sum += r.head_delta_norm;
          ++head_updates;
          for (std::size_t i = 0; i < r.inner.size(); ++i) inner_sum[i] += r.inner[i];
        }
        for (double v : inner_sum) {
          record.inner_losses.push_back(v / static_cast<double>(batches.size()));
        }
        break;
      }
      case Regime::SlowSingle: {
        const Vector before = head_parameters(head);
        loss_sum = slow_single_epoch(encoder, head, batches, schedule.loss, encoder_opt, head_opt) *
                   static_cast<double>(batches.size());
        track_head(before);
        break;
      }
    }

    if (schedule.regime == Regime::PCARefresh) {
      const Vector before = head_parameters(head);
      head = pca_refresh(encoder, pca_subset(epoch), head.out_dim, schedule.pca_side);
      track_head(before);
    } else if (schedule.regime == Regime::SlowOptimal) {
      const auto rows = sample_rows(train.size(), schedule.slow_subset,
                                    derive_seed(schedule.seed, static_cast<std::uint64_t>(epoch), 0x510));
      const ViewBatch subset = stream.make_batch(rows, epoch - 1);
      const Vector before = head_parameters(head);
      const auto r = slow_optimal_epoch(encoder, head, subset, schedule.loss,
                                        schedule.slow_tolerance, schedule.slow_max_iters, head_opt);
      record.inner_losses = r.losses;
      track_head(before);
    }

    record.loss = batches.empty() ? 0.0 : loss_sum / static_cast<double>(batches.size());
    record.g_delta_norm = head_updates > 0 ? delta_sum / static_cast<double>(head_updates) : 0.0;
    record.wall_ms =
        std::chrono::duration<double, std::milli>(Clock::now() - start).count();
    metrics.epochs.push_back(record);
    if (sink) sink(record, encoder, head);
  }
  return metrics;
}

}  // namespace phl
