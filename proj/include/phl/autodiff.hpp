#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "phl/tensor.hpp"

namespace phl {

using NodeId = std::size_t;
using Bindings = std::map<std::string, Tensor, std::less<>>;

enum class OpKind {
  Input,
  Constant,
  MatMul,
  Transpose,
  Add,  // equal shapes, or a 1 x cols row vector broadcast over rows
  Sub,
  Hadamard,
  Relu,
  BatchNorm,
  L2Norm,  // row-wise
  Scale,
  Exp,
  Log,
  Sum,     // all entries -> 1 x 1
  Concat,  // vertical stacking
  Cosine,  // pairwise cosine similarity between rows of two matrices
  MaskedLogSumExp,  // row-wise log-sum-exp over entries where mask != 0
};

const char* op_name(OpKind op);

struct ExprNode {
  OpKind op = OpKind::Input;
  std::vector<NodeId> parents;
  std::string name;    // Input
  double scalar = 0;   // Scale factor, BatchNorm epsilon
  bool training = false;  // BatchNorm: batch statistics vs supplied running statistics
  Tensor aux;          // Constant value, MaskedLogSumExp mask

  Tensor value;
  Tensor adjoint;

  // Forward caches used by backward.
  Tensor cache;        // BatchNorm: normalized input; Cosine/L2Norm: normalized rows of a
  Tensor cache2;       // Cosine: normalized rows of b
  Vector norms;        // L2Norm / Cosine (a)
  Vector norms2;       // Cosine (b)
  RowVector batch_mean;
  RowVector batch_var;  // biased
};

/// A static expression graph. Nodes are appended in construction order, so
/// the id order is a topological order and the graph is acyclic by
/// construction. Input nodes are bound by name at evaluation time.
class ExprGraph {
 public:
  NodeId input(std::string name);
  NodeId constant(Tensor value);

  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId hadamard(NodeId a, NodeId b);
  NodeId relu(NodeId a);
  /// Training-mode batch normalization over rows (batch statistics).
  NodeId batchnorm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5);
  /// Inference-mode batch normalization with supplied mean/variance rows.
  NodeId batchnorm(NodeId x, NodeId gamma, NodeId beta, NodeId mean, NodeId var,
                   double eps = 1e-5);
  NodeId l2norm(NodeId a);
  NodeId scale(NodeId a, double factor);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId sum(NodeId a);
  NodeId concat(NodeId top, NodeId bottom);
  NodeId cosine(NodeId a, NodeId b);
  NodeId masked_logsumexp(NodeId a, Tensor mask);

  /// Runs the forward pass over every node. Throws ShapeError on
  /// incompatible shapes or unbound inputs, NumericalError naming the node
  /// on non-finite intermediates.
  void forward(const Bindings& bindings);

  /// Reverse-mode derivatives of a scalar node. Requires forward().
  std::map<NodeId, Tensor> gradient(NodeId loss, std::span<const NodeId> wrt);

  const Tensor& value(NodeId id) const;
  const ExprNode& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  bool evaluated() const { return evaluated_; }

 private:
  NodeId push(ExprNode node);
  void check_id(NodeId id) const;
  void forward_node(NodeId id, const Bindings& bindings);
  void backward_node(NodeId id);
  Tensor& adjoint_of(NodeId id);

  std::vector<ExprNode> nodes_;
  bool evaluated_ = false;
};

/// Evaluates the graph and returns copies of the requested outputs.
std::vector<Tensor> evaluate(ExprGraph& graph, const Bindings& bindings,
                             std::span<const NodeId> outputs);

/// Max relative error between reverse-mode gradients and central finite
/// differences over every entry of the given input nodes. Leaves the graph
/// evaluated at the original bindings.
double finite_difference_check(ExprGraph& graph, const Bindings& bindings, NodeId loss,
                               std::span<const NodeId> wrt, double step);

}  // namespace phl
