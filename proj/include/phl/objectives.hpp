#pragma once

#include <span>
#include <string>

#include "phl/autodiff.hpp"

namespace phl {

enum class NegativePolicy {
  BatchBothViews,  // both views of every other example: 2(B-1) negatives
  BatchOtherView,  // only the opposite view of every other example: B-1 negatives
};

std::string to_string(NegativePolicy policy);
NegativePolicy parse_negative_policy(const std::string& text);

struct LossConfig {
  double temperature = 0.5;
  /// Whether the positive pair enters the softmax denominator. The literal
  /// InfoNCE sum over the negative set alone leaves it out (and can go
  /// negative); SimCLR practice includes it.
  bool include_positive = true;
  NegativePolicy policy = NegativePolicy::BatchBothViews;

  void validate() const;
};

/// u.v / (|u| |v|), clamped to [-1, 1].
double cosine_similarity(const Vector& u, const Vector& v);

/// -log(exp(cos(z1, z2)/t) / sum_{z in Den} exp(cos(z1, z)/t)) with
/// Den = negatives (+ z2 if include_positive). Negatives are rows.
double info_nce(const Vector& z1, const Vector& z2, const Tensor& negatives,
                const LossConfig& config);

struct BatchLoss {
  NodeId per_anchor;  // 2B x 1: anchors 0..B-1 are view 1, B..2B-1 view 2
  NodeId loss;        // 1 x 1 mean over the 2B anchors
};

/// Symmetric InfoNCE over stacked embeddings [z_view1; z_view2] (2B x d).
BatchLoss batch_loss_stacked(ExprGraph& graph, NodeId stacked, Index batch,
                             const LossConfig& config);
BatchLoss batch_loss(ExprGraph& graph, NodeId z_view1, NodeId z_view2, Index batch,
                     const LossConfig& config);

/// Mask selecting the softmax denominator of every anchor row.
Tensor denominator_mask(Index batch, const LossConfig& config);

}  // namespace phl
