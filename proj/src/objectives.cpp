#include "phl/objectives.hpp"

#include <algorithm>
#include <cmath>

namespace phl {

std::string to_string(NegativePolicy policy) {
  return policy == NegativePolicy::BatchBothViews ? "batch-both-views" : "batch-other-view";
}

NegativePolicy parse_negative_policy(const std::string& text) {
  if (text == "batch-both-views") return NegativePolicy::BatchBothViews;
  if (text == "batch-other-view") return NegativePolicy::BatchOtherView;
  throw ConfigError("unknown negative policy '" + text + "'");
}

void LossConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("loss: temperature must be positive");
  }
}

double cosine_similarity(const Vector& u, const Vector& v) {
  if (u.size() != v.size()) throw ShapeError("cosine_similarity: dimension mismatch");
  const double nu = u.norm(), nv = v.norm();
  if (!(nu > 0.0) || !(nv > 0.0)) throw NumericalError("cosine_similarity: zero-norm input");
  return std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0);
}

double info_nce(const Vector& z1, const Vector& z2, const Tensor& negatives,
                const LossConfig& config) {
  config.validate();
  if (negatives.rows() > 0 && negatives.cols() != z1.size()) {
    throw ShapeError("info_nce: negative dimension mismatch");
  }
  std::vector<double> logits;
  for (Index i = 0; i < negatives.rows(); ++i) {
    logits.push_back(cosine_similarity(z1, negatives.row(i).transpose()) / config.temperature);
  }
  const double positive = cosine_similarity(z1, z2) / config.temperature;
  if (config.include_positive) logits.push_back(positive);
  if (logits.empty()) throw Error("info_nce: empty denominator set");
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double l : logits) s += std::exp(l - m);
  return (m + std::log(s)) - positive;
}

Tensor denominator_mask(Index batch, const LossConfig& config) {
  const Index n = 2 * batch;
  Tensor mask = Tensor::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    const Index example = i % batch;
    const bool first_view = i < batch;
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const bool positive = (j % batch) == example;
      if (positive) {
        mask(i, j) = config.include_positive ? 1.0 : 0.0;
        continue;
      }
      const bool other_view = (j < batch) != first_view;
      if (config.policy == NegativePolicy::BatchBothViews || other_view) mask(i, j) = 1.0;
    }
  }
  return mask;
}

BatchLoss batch_loss_stacked(ExprGraph& graph, NodeId stacked, Index batch,
                             const LossConfig& config) {
  config.validate();
  if (batch < 2) throw ConfigError("batch_loss: need B >= 2 for a non-empty negative set");
  const Index n = 2 * batch;
  Tensor positives = Tensor::Zero(n, n);
  for (Index i = 0; i < n; ++i) positives(i, (i + batch) % n) = 1.0;

  const NodeId logits = graph.scale(graph.cosine(stacked, stacked), 1.0 / config.temperature);
  const NodeId lse = graph.masked_logsumexp(logits, denominator_mask(batch, config));
  // Row sums of logits * positives pick out each anchor's positive logit.
  const NodeId pos = graph.matmul(graph.hadamard(logits, graph.constant(positives)),
                                  graph.constant(Tensor::Ones(n, 1)));
  const NodeId per_anchor = graph.sub(lse, pos);
  const NodeId loss = graph.scale(graph.sum(per_anchor), 1.0 / static_cast<double>(n));
  return {per_anchor, loss};
}

BatchLoss batch_loss(ExprGraph& graph, NodeId z_view1, NodeId z_view2, Index batch,
                     const LossConfig& config) {
  return batch_loss_stacked(graph, graph.concat(z_view1, z_view2), batch, config);
}

}  // namespace phl
