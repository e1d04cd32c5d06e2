#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "phl/autodiff.hpp"

namespace phl {

enum class HeadKind { None, Linear, NonLinear, FixedRandom, FixedPretrained, DiagonalLowRank, PCALinear };
enum class Mode { Train, Eval };

std::string to_string(HeadKind kind);
HeadKind parse_head_kind(const std::string& text);
/// Heads whose map on h is a single affine layer (null-space analysis is exact).
bool is_linear_family(HeadKind kind);

struct Parameter {
  std::string name;
  Tensor value;
};
using ParameterList = std::vector<Parameter>;

Index parameter_count(const ParameterList& params);
Vector flatten(const ParameterList& params);
void unflatten(ParameterList& params, const Vector& flat);
std::uint64_t checksum(const ParameterList& params);

/// MLP f: R^p -> R^m. Hidden layer k computes relu(x W_k + b_k) with
/// W_k (in x out); the output layer is x W_L without bias, since a constant
/// shift of h is cancelled by a batch-normalized head anyway.
struct Encoder {
  std::vector<Index> sizes;
  ParameterList params;  // W0, b0, W1, b1, ..., W_L

  Index input_dim() const { return sizes.front(); }
  Index output_dim() const { return sizes.back(); }
  NodeId build(ExprGraph& graph, NodeId x, Bindings& bindings,
               std::vector<NodeId>& param_nodes) const;
  /// Graph-free forward pass.
  Tensor features(const Tensor& x) const;
};

Encoder init_encoder(std::span<const Index> sizes, std::uint64_t seed);

struct Head {
  HeadKind kind = HeadKind::None;
  Index in_dim = 0;   // m
  Index out_dim = 0;  // d
  Index hidden = 0;   // NonLinear only
  bool trainable = false;
  bool batchnorm = true;  // NonLinear only
  ParameterList params;
  RowVector running_mean;  // NonLinear batchnorm buffers
  RowVector running_var;
  double bn_momentum = 0.9;

  /// Appends the head to `graph`; `bn_node` receives the batchnorm node in
  /// train mode so the caller can fold batch statistics into the buffers.
  NodeId build(ExprGraph& graph, NodeId h, Mode mode, Bindings& bindings,
               std::vector<NodeId>& param_nodes, std::optional<NodeId>* bn_node = nullptr) const;
  /// Graph-free eval-mode forward pass.
  Tensor apply(const Tensor& h) const;
  /// The d' x m weight matrix acting directly on h, bias dropped. For
  /// NonLinear heads this is the hidden layer's weight (an approximation of
  /// the head's null space). Empty for the None head.
  std::optional<Tensor> analysis_map() const;
  /// running <- momentum * running + (1 - momentum) * batch (unbiased variance).
  void update_running_stats(const RowVector& batch_mean, const RowVector& batch_var, Index batch);
  const Tensor& param(std::string_view name) const;
  Tensor& param(std::string_view name);
};

Head init_head(HeadKind kind, Index m, Index d, std::optional<Index> hidden, std::uint64_t seed,
               bool batchnorm = true);

Vector head_parameters(const Head& head);
void head_load(Head& head, const Vector& flat);

struct ForwardPass {
  ExprGraph graph;
  Bindings bindings;
  NodeId x = 0;
  NodeId h = 0;
  NodeId z = 0;
  std::vector<NodeId> encoder_nodes;
  std::vector<NodeId> head_nodes;
  std::optional<NodeId> bn;
};

/// Builds encoder + head on x without evaluating, so callers can attach a
/// loss before the single forward pass.
ForwardPass build_forward(const Encoder& encoder, const Head& head, const Tensor& x, Mode mode);

/// Builds encoder + head on x and runs the forward pass.
ForwardPass forward(const Encoder& encoder, const Head& head, const Tensor& x, Mode mode);

void save_checkpoint(const std::filesystem::path& dir, const Encoder& encoder, const Head& head);
struct Checkpoint {
  Encoder encoder;
  Head head;
};
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace phl
