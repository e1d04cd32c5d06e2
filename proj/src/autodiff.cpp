#include "phl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace phl {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Input: return "input";
    case OpKind::Constant: return "constant";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Hadamard: return "hadamard";
    case OpKind::Relu: return "relu";
    case OpKind::BatchNorm: return "batchnorm";
    case OpKind::L2Norm: return "l2norm";
    case OpKind::Scale: return "scale";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sum: return "sum";
    case OpKind::Concat: return "concat";
    case OpKind::Cosine: return "cosine";
    case OpKind::MaskedLogSumExp: return "masked_logsumexp";
  }
  return "?";
}

namespace {

std::string describe(NodeId id, const ExprNode& n) {
  std::ostringstream ss;
  ss << "node " << id << " (" << op_name(n.op);
  if (!n.name.empty()) ss << " '" << n.name << "'";
  ss << ")";
  return ss.str();
}

bool is_row_broadcast(const Tensor& a, const Tensor& b) {
  return b.rows() == 1 && b.cols() == a.cols() && a.rows() != 1;
}

// Row-normalizes m, storing norms; throws on a zero row.
Tensor normalize_rows(const Tensor& m, Vector& norms, const std::string& where) {
  norms = m.rowwise().norm();
  for (Index i = 0; i < norms.size(); ++i) {
    if (!(norms[i] > 0.0)) throw NumericalError(where + ": zero-norm row " + std::to_string(i));
  }
  return norms.cwiseInverse().asDiagonal() * m;
}

// Backward of y = x / ||x|| row-wise, given y, norms and dL/dy.
Tensor normalize_rows_backward(const Tensor& y, const Vector& norms, const Tensor& g) {
  const Vector dots = (y.cwiseProduct(g)).rowwise().sum();
  return norms.cwiseInverse().asDiagonal() * (g - dots.asDiagonal() * y);
}

}  // namespace

NodeId ExprGraph::push(ExprNode node) {
  for (NodeId p : node.parents) check_id(p);
  nodes_.push_back(std::move(node));
  evaluated_ = false;
  return nodes_.size() - 1;
}

void ExprGraph::check_id(NodeId id) const {
  if (id >= nodes_.size()) throw Error("expression graph: unknown node id " + std::to_string(id));
}

NodeId ExprGraph::input(std::string name) {
  ExprNode n;
  n.op = OpKind::Input;
  n.name = std::move(name);
  return push(std::move(n));
}

NodeId ExprGraph::constant(Tensor value) {
  ExprNode n;
  n.op = OpKind::Constant;
  n.aux = std::move(value);
  return push(std::move(n));
}

#define PHL_UNARY(fn, kind)             \
  NodeId ExprGraph::fn(NodeId a) {      \
    ExprNode n;                         \
    n.op = OpKind::kind;                \
    n.parents = {a};                    \
    return push(std::move(n));          \
  }
#define PHL_BINARY(fn, kind)                \
  NodeId ExprGraph::fn(NodeId a, NodeId b) { \
    ExprNode n;                             \
    n.op = OpKind::kind;                    \
    n.parents = {a, b};                     \
    return push(std::move(n));              \
  }

PHL_BINARY(matmul, MatMul)
PHL_UNARY(transpose, Transpose)
PHL_BINARY(add, Add)
PHL_BINARY(sub, Sub)
PHL_BINARY(hadamard, Hadamard)
PHL_UNARY(relu, Relu)
PHL_UNARY(l2norm, L2Norm)
PHL_UNARY(exp, Exp)
PHL_UNARY(log, Log)
PHL_UNARY(sum, Sum)
PHL_BINARY(concat, Concat)
PHL_BINARY(cosine, Cosine)

#undef PHL_UNARY
#undef PHL_BINARY

NodeId ExprGraph::batchnorm(NodeId x, NodeId gamma, NodeId beta, double eps) {
  ExprNode n;
  n.op = OpKind::BatchNorm;
  n.parents = {x, gamma, beta};
  n.scalar = eps;
  n.training = true;
  return push(std::move(n));
}

NodeId ExprGraph::batchnorm(NodeId x, NodeId gamma, NodeId beta, NodeId mean, NodeId var,
                            double eps) {
  ExprNode n;
  n.op = OpKind::BatchNorm;
  n.parents = {x, gamma, beta, mean, var};
  n.scalar = eps;
  n.training = false;
  return push(std::move(n));
}

NodeId ExprGraph::scale(NodeId a, double factor) {
  ExprNode n;
  n.op = OpKind::Scale;
  n.parents = {a};
  n.scalar = factor;
  return push(std::move(n));
}

NodeId ExprGraph::masked_logsumexp(NodeId a, Tensor mask) {
  ExprNode n;
  n.op = OpKind::MaskedLogSumExp;
  n.parents = {a};
  n.aux = std::move(mask);
  return push(std::move(n));
}

const Tensor& ExprGraph::value(NodeId id) const {
  check_id(id);
  if (!evaluated_) throw Error("expression graph: value requested before forward()");
  return nodes_[id].value;
}

void ExprGraph::forward(const Bindings& bindings) {
  evaluated_ = false;
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    forward_node(id, bindings);
    if (!nodes_[id].value.allFinite()) {
      throw NumericalError("non-finite value at " + describe(id, nodes_[id]));
    }
  }
  evaluated_ = true;
}

void ExprGraph::forward_node(NodeId id, const Bindings& bindings) {
  ExprNode& n = nodes_[id];
  auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.parents[k]].value; };
  auto shape_fail = [&](const std::string& detail) {
    throw ShapeError(describe(id, n) + ": " + detail);
  };

  switch (n.op) {
    case OpKind::Input: {
      const auto it = bindings.find(n.name);
      if (it == bindings.end()) shape_fail("unbound input");
      n.value = it->second;
      break;
    }
    case OpKind::Constant:
      n.value = n.aux;
      break;
    case OpKind::MatMul:
      if (in(0).cols() != in(1).rows()) {
        shape_fail("cannot multiply " + shape_string(in(0)) + " by " + shape_string(in(1)));
      }
      n.value.noalias() = in(0) * in(1);
      break;
    case OpKind::Transpose:
      n.value = in(0).transpose();
      break;
    case OpKind::Add:
    case OpKind::Sub: {
      const double sign = n.op == OpKind::Add ? 1.0 : -1.0;
      if (in(0).rows() == in(1).rows() && in(0).cols() == in(1).cols()) {
        n.value = in(0) + sign * in(1);
      } else if (is_row_broadcast(in(0), in(1))) {
        n.value = in(0);
        n.value.rowwise() += sign * in(1).row(0);
      } else {
        shape_fail("incompatible " + shape_string(in(0)) + " and " + shape_string(in(1)));
      }
      break;
    }
    case OpKind::Hadamard:
      if (in(0).rows() != in(1).rows() || in(0).cols() != in(1).cols()) {
        shape_fail("incompatible " + shape_string(in(0)) + " and " + shape_string(in(1)));
      }
      n.value = in(0).cwiseProduct(in(1));
      break;
    case OpKind::Relu:
      n.value = in(0).cwiseMax(0.0);
      break;
    case OpKind::BatchNorm: {
      const Tensor& x = in(0);
      const Tensor& gamma = in(1);
      const Tensor& beta = in(2);
      if (gamma.rows() != 1 || gamma.cols() != x.cols() || beta.rows() != 1 ||
          beta.cols() != x.cols()) {
        shape_fail("gamma/beta must be 1 x " + std::to_string(x.cols()));
      }
      RowVector mean, var;
      if (n.training) {
        if (x.rows() < 2) shape_fail("training-mode batch normalization requires batch >= 2");
        mean = x.colwise().mean();
        var = (x.rowwise() - mean).array().square().colwise().mean();
        n.batch_mean = mean;
        n.batch_var = var;
      } else {
        if (in(3).rows() != 1 || in(3).cols() != x.cols() || in(4).rows() != 1 ||
            in(4).cols() != x.cols()) {
          shape_fail("running mean/var must be 1 x " + std::to_string(x.cols()));
        }
        mean = in(3).row(0);
        var = in(4).row(0);
      }
      const RowVector inv_std = (var.array() + n.scalar).rsqrt();
      n.norms = inv_std.transpose();
      n.cache = (x.rowwise() - mean).array().rowwise() * inv_std.array();
      n.value = n.cache.array().rowwise() * gamma.row(0).array();
      n.value.rowwise() += beta.row(0);
      break;
    }
    case OpKind::L2Norm:
      n.value = normalize_rows(in(0), n.norms, describe(id, n));
      break;
    case OpKind::Scale:
      n.value = n.scalar * in(0);
      break;
    case OpKind::Exp:
      n.value = in(0).array().exp();
      break;
    case OpKind::Log:
      n.value = in(0).array().log();
      break;
    case OpKind::Sum:
      n.value = Tensor::Constant(1, 1, in(0).sum());
      break;
    case OpKind::Concat:
      if (in(0).cols() != in(1).cols()) {
        shape_fail("column mismatch " + shape_string(in(0)) + " and " + shape_string(in(1)));
      }
      n.value.resize(in(0).rows() + in(1).rows(), in(0).cols());
      n.value << in(0), in(1);
      break;
    case OpKind::Cosine:
      if (in(0).cols() != in(1).cols()) {
        shape_fail("column mismatch " + shape_string(in(0)) + " and " + shape_string(in(1)));
      }
      n.cache = normalize_rows(in(0), n.norms, describe(id, n));
      n.cache2 = normalize_rows(in(1), n.norms2, describe(id, n));
      n.value.noalias() = n.cache * n.cache2.transpose();
      break;
    case OpKind::MaskedLogSumExp: {
      const Tensor& x = in(0);
      if (n.aux.rows() != x.rows() || n.aux.cols() != x.cols()) {
        shape_fail("mask " + shape_string(n.aux) + " does not match " + shape_string(x));
      }
      n.value.resize(x.rows(), 1);
      for (Index i = 0; i < x.rows(); ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (Index j = 0; j < x.cols(); ++j) {
          if (n.aux(i, j) != 0.0) m = std::max(m, x(i, j));
        }
        if (m == -std::numeric_limits<double>::infinity()) {
          throw NumericalError(describe(id, n) + ": empty log-sum-exp set in row " +
                               std::to_string(i));
        }
        double s = 0.0;
        for (Index j = 0; j < x.cols(); ++j) {
          if (n.aux(i, j) != 0.0) s += std::exp(x(i, j) - m);
        }
        n.value(i, 0) = m + std::log(s);
      }
      break;
    }
  }
}

Tensor& ExprGraph::adjoint_of(NodeId id) {
  ExprNode& n = nodes_[id];
  if (n.adjoint.size() == 0 && n.value.size() != 0) {
    n.adjoint = Tensor::Zero(n.value.rows(), n.value.cols());
  }
  return n.adjoint;
}

std::map<NodeId, Tensor> ExprGraph::gradient(NodeId loss, std::span<const NodeId> wrt) {
  check_id(loss);
  if (!evaluated_) throw Error("gradient requested before forward()");
  if (nodes_[loss].value.rows() != 1 || nodes_[loss].value.cols() != 1) {
    throw ShapeError("gradient: loss " + describe(loss, nodes_[loss]) + " is not scalar");
  }

  std::vector<char> ancestor(nodes_.size(), 0);
  ancestor[loss] = 1;
  for (NodeId id = loss + 1; id-- > 0;) {
    if (!ancestor[id]) continue;
    for (NodeId p : nodes_[id].parents) ancestor[p] = 1;
  }
  std::vector<char> needed(nodes_.size(), 0);
  for (NodeId w : wrt) {
    check_id(w);
    if (!ancestor[w]) {
      throw Error("gradient: " + describe(w, nodes_[w]) + " is not reachable from the loss");
    }
    needed[w] = 1;
  }
  for (NodeId id = 0; id <= loss; ++id) {
    for (NodeId p : nodes_[id].parents) {
      if (needed[p]) needed[id] = 1;
    }
  }

  for (auto& n : nodes_) n.adjoint.resize(0, 0);
  adjoint_of(loss).setOnes();
  for (NodeId id = loss + 1; id-- > 0;) {
    if (!ancestor[id] || !needed[id]) continue;
    const OpKind op = nodes_[id].op;
    if (op == OpKind::Input || op == OpKind::Constant) continue;
    // Parents that do not lead to a requested node get no adjoint.
    for (NodeId p : nodes_[id].parents) {
      if (needed[p]) adjoint_of(p);
    }
    backward_node(id);
  }

  std::map<NodeId, Tensor> out;
  for (NodeId w : wrt) out[w] = adjoint_of(w);
  return out;
}

void ExprGraph::backward_node(NodeId id) {
  ExprNode& n = nodes_[id];
  const Tensor& g = n.adjoint;
  auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.parents[k]].value; };
  // Adjoint slots were sized in gradient() for needed parents only.
  auto grad = [&](std::size_t k) -> Tensor* {
    Tensor& a = nodes_[n.parents[k]].adjoint;
    return a.size() == 0 && nodes_[n.parents[k]].value.size() != 0 ? nullptr : &a;
  };

  switch (n.op) {
    case OpKind::Input:
    case OpKind::Constant:
      break;
    case OpKind::MatMul:
      if (auto* da = grad(0)) da->noalias() += g * in(1).transpose();
      if (auto* db = grad(1)) db->noalias() += in(0).transpose() * g;
      break;
    case OpKind::Transpose:
      if (auto* da = grad(0)) *da += g.transpose();
      break;
    case OpKind::Add:
    case OpKind::Sub: {
      const double sign = n.op == OpKind::Add ? 1.0 : -1.0;
      if (auto* da = grad(0)) *da += g;
      if (auto* db = grad(1)) {
        if (db->rows() == g.rows()) {
          *db += sign * g;
        } else {
          *db += sign * g.colwise().sum();
        }
      }
      break;
    }
    case OpKind::Hadamard:
      if (auto* da = grad(0)) *da += g.cwiseProduct(in(1));
      if (auto* db = grad(1)) *db += g.cwiseProduct(in(0));
      break;
    case OpKind::Relu:
      if (auto* da = grad(0)) *da += (in(0).array() > 0.0).select(g, 0.0);
      break;
    case OpKind::BatchNorm: {
      const Tensor& xhat = n.cache;
      const RowVector gamma = in(1).row(0);
      const RowVector inv_std = n.norms.transpose();
      if (auto* dgamma = grad(1)) *dgamma += g.cwiseProduct(xhat).colwise().sum();
      if (auto* dbeta = grad(2)) *dbeta += g.colwise().sum();
      const Tensor dxhat = g.array().rowwise() * gamma.array();
      if (n.training) {
        if (auto* dx = grad(0)) {
          const double count = static_cast<double>(xhat.rows());
          const RowVector sum_d = dxhat.colwise().sum();
          const RowVector sum_dx = dxhat.cwiseProduct(xhat).colwise().sum();
          Tensor t = count * dxhat;
          t.rowwise() -= sum_d;
          t -= (xhat.array().rowwise() * sum_dx.array()).matrix();
          *dx += ((t.array().rowwise() * inv_std.array()) / count).matrix();
        }
      } else {
        if (auto* dx = grad(0)) *dx += (dxhat.array().rowwise() * inv_std.array()).matrix();
        if (auto* dmean = grad(3)) {
          *dmean -= (dxhat.colwise().sum().array() * inv_std.array()).matrix();
        }
        if (auto* dvar = grad(4)) {
          // d xhat / d var = -0.5 * xhat * inv_std^2
          const RowVector s = dxhat.cwiseProduct(xhat).colwise().sum();
          *dvar += (-0.5 * s.array() * inv_std.array().square()).matrix();
        }
      }
      break;
    }
    case OpKind::L2Norm:
      if (auto* da = grad(0)) *da += normalize_rows_backward(n.value, n.norms, g);
      break;
    case OpKind::Scale:
      if (auto* da = grad(0)) *da += n.scalar * g;
      break;
    case OpKind::Exp:
      if (auto* da = grad(0)) *da += g.cwiseProduct(n.value);
      break;
    case OpKind::Log:
      if (auto* da = grad(0)) *da += g.cwiseQuotient(in(0));
      break;
    case OpKind::Sum:
      if (auto* da = grad(0)) da->array() += g(0, 0);
      break;
    case OpKind::Concat: {
      const Index top = in(0).rows();
      if (auto* da = grad(0)) *da += g.topRows(top);
      if (auto* db = grad(1)) *db += g.bottomRows(g.rows() - top);
      break;
    }
    case OpKind::Cosine: {
      if (auto* da = grad(0)) {
        const Tensor dahat = g * n.cache2;
        *da += normalize_rows_backward(n.cache, n.norms, dahat);
      }
      if (auto* db = grad(1)) {
        const Tensor dbhat = g.transpose() * n.cache;
        *db += normalize_rows_backward(n.cache2, n.norms2, dbhat);
      }
      break;
    }
    case OpKind::MaskedLogSumExp:
      if (auto* da = grad(0)) {
        const Tensor& x = in(0);
        for (Index i = 0; i < x.rows(); ++i) {
          const double lse = n.value(i, 0);
          for (Index j = 0; j < x.cols(); ++j) {
            if (n.aux(i, j) != 0.0) (*da)(i, j) += g(i, 0) * std::exp(x(i, j) - lse);
          }
        }
      }
      break;
  }
}

std::vector<Tensor> evaluate(ExprGraph& graph, const Bindings& bindings,
                             std::span<const NodeId> outputs) {
  graph.forward(bindings);
  std::vector<Tensor> out;
  out.reserve(outputs.size());
  for (NodeId id : outputs) out.push_back(graph.value(id));
  return out;
}

double finite_difference_check(ExprGraph& graph, const Bindings& bindings, NodeId loss,
                               std::span<const NodeId> wrt, double step) {
  if (!(step > 0.0)) throw ConfigError("finite_difference_check: step must be positive");
  graph.forward(bindings);
  const auto analytic = graph.gradient(loss, wrt);

  double worst = 0.0;
  Bindings probe = bindings;
  for (NodeId w : wrt) {
    const ExprNode& node = graph.node(w);
    if (node.op != OpKind::Input) {
      throw Error("finite_difference_check: node " + std::to_string(w) + " is not an input");
    }
    Tensor& x = probe.at(node.name);
    const Tensor& grad = analytic.at(w);
    for (Index k = 0; k < x.size(); ++k) {
      const double saved = x(k);
      x(k) = saved + step;
      graph.forward(probe);
      const double up = graph.value(loss)(0, 0);
      x(k) = saved - step;
      graph.forward(probe);
      const double down = graph.value(loss)(0, 0);
      x(k) = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = grad(k);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  graph.forward(bindings);
  return worst;
}

}  // namespace phl
