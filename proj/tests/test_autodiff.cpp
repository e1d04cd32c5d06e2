#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <random>

#include "phl/autodiff.hpp"

using namespace phl;

namespace {

Tensor mat(std::initializer_list<std::initializer_list<double>> rows) {
  Tensor t(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index r = 0;
  for (const auto& row : rows) {
    Index c = 0;
    for (double v : row) t(r, c++) = v;
    ++r;
  }
  return t;
}

// Entries with magnitude in [lo, hi] and random sign: keeps probes away from
// ReLU kinks and zero norms.
Tensor signed_away_from_zero(Index r, Index c, std::mt19937_64& rng, double lo = 0.1,
                             double hi = 2.0) {
  std::uniform_real_distribution<double> mag(lo, hi);
  std::bernoulli_distribution sign(0.5);
  Tensor t(r, c);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = (sign(rng) ? 1.0 : -1.0) * mag(rng);
  return t;
}

Tensor positive(Index r, Index c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.5, 2.0);
  Tensor t(r, c);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
  return t;
}

// Scalar probe sum(y o W) with a random fixed weight so every output entry
// contributes a generic amount to the gradient.
NodeId probe_loss(ExprGraph& g, NodeId y, const Tensor& weight) {
  return g.sum(g.hadamard(y, g.constant(weight)));
}

struct OpCase {
  const char* name;
  // Builds the op on fresh inputs; fills bindings and wrt; returns the op node.
  std::function<NodeId(ExprGraph&, Bindings&, std::vector<NodeId>&, std::mt19937_64&)> build;
};

std::vector<OpCase> differentiable_ops() {
  auto in = [](ExprGraph& g, Bindings& b, std::vector<NodeId>& wrt, const std::string& name,
               Tensor v) {
    const NodeId id = g.input(name);
    b[name] = std::move(v);
    wrt.push_back(id);
    return id;
  };
  return {
      {"matmul",
       [=](ExprGraph& g, Bindings& b, std::vector<NodeId>& w, std::mt19937_64& r) {
         return g.matmul(in(g, b, w, "a", signed_away_from_zero(3, 4, r)),
                         in(g, b, w, "b", signed_away_from_zero(4, 2, r)));
       }},
      {"transpose",
       [=](ExprGraph& g, Bindings& b, std::vector<NodeId>& w, std::mt19937_64& r) {
         return g.transpose(in(g, b, w, "a", signed_away_from_zero(3, 4, r)));
       }},
      {"add_broadcast",
       [=](ExprGraph& g, Bindings& b, std::vector<NodeId>& w, std::mt19937_64& r) {
         return g.add(in(g, b, w, "a", signed_away_from_zero(3, 4, r)),
                      in(g, b, w, "bias", signed_away_from_zero(1, 4, r)));
       }},
      {"sub",
       [=](ExprGraph& g, Bindings& b, std::vector<NodeId>& w, std::mt19937_64& r) {
         return g.sub(in(g, b, w, "a", signed_away_from_zero(3, 4, r)),
                      in(g, b, w, "c", signed_away_from_zero(3, 4, r)));
       }},
      {"hadamard",
       [=](ExprGraph& g, Bindings& b, std::vector<NodeId>& w, std::mt19937_64& r) {
         return g.hadamard(in(g, b, w, "a", signed_away_from_zero(3, 4, r)),
                           in(g, b, w, "c", signed_away_from_zero(3, 4, r)));
       }},
      {"relu",
       [=](ExprGraph& g, Bindings& b, std::vector<NodeId>& w, std::mt19937_64& r) {
         return g.relu(in(g, b, w, "a", signed_away_from_zero(3, 4, r)));
       }},
      {"batchnorm",
       [=](ExprGraph& g, Bindings& b, std::vector<NodeId>& w, std::mt19937_64& r) {
         return g.batchnorm(in(g, b, w, "x", signed_away_from_zero(6, 3, r)),
                            in(g, b, w, "gamma", signed_away_from_zero(1, 3, r)),
                            in(g, b, w, "beta", signed_away_from_zero(1, 3, r)));
       }},
      {"batchnorm_eval",
       [=](ExprGraph& g, Bindings& b, std::vector<NodeId>& w, std::mt19937_64& r) {
         const NodeId mean = g.constant(signed_away_from_zero(1, 3, r));
         const NodeId var = g.constant(positive(1, 3, r));
         return g.batchnorm(in(g, b, w, "x", signed_away_from_zero(5, 3, r)),
                            in(g, b, w, "gamma", signed_away_from_zero(1, 3, r)),
                            in(g, b, w, "beta", signed_away_from_zero(1, 3, r)), mean, var);
       }},
      {"l2norm",
       [=](ExprGraph& g, Bindings& b, std::vector<NodeId>& w, std::mt19937_64& r) {
         return g.l2norm(in(g, b, w, "a", signed_away_from_zero(3, 4, r)));
       }},
      {"scale",
       [=](ExprGraph& g, Bindings& b, std::vector<NodeId>& w, std::mt19937_64& r) {
         return g.scale(in(g, b, w, "a", signed_away_from_zero(3, 4, r)), -1.7);
       }},
      {"exp",
       [=](ExprGraph& g, Bindings& b, std::vector<NodeId>& w, std::mt19937_64& r) {
         return g.exp(in(g, b, w, "a", signed_away_from_zero(3, 4, r, 0.1, 1.0)));
       }},
      {"log",
       [=](ExprGraph& g, Bindings& b, std::vector<NodeId>& w, std::mt19937_64& r) {
         return g.log(in(g, b, w, "a", positive(3, 4, r)));
       }},
      {"sum",
       [=](ExprGraph& g, Bindings& b, std::vector<NodeId>& w, std::mt19937_64& r) {
         return g.sum(in(g, b, w, "a", signed_away_from_zero(3, 4, r)));
       }},
      {"concat",
       [=](ExprGraph& g, Bindings& b, std::vector<NodeId>& w, std::mt19937_64& r) {
         return g.concat(in(g, b, w, "a", signed_away_from_zero(2, 4, r)),
                         in(g, b, w, "c", signed_away_from_zero(3, 4, r)));
       }},
      {"cosine",
       [=](ExprGraph& g, Bindings& b, std::vector<NodeId>& w, std::mt19937_64& r) {
         return g.cosine(in(g, b, w, "a", signed_away_from_zero(3, 4, r)),
                         in(g, b, w, "c", signed_away_from_zero(5, 4, r)));
       }},
      {"cosine_self",
       [=](ExprGraph& g, Bindings& b, std::vector<NodeId>& w, std::mt19937_64& r) {
         const NodeId a = in(g, b, w, "a", signed_away_from_zero(4, 3, r));
         return g.cosine(a, a);
       }},
      {"masked_logsumexp",
       [=](ExprGraph& g, Bindings& b, std::vector<NodeId>& w, std::mt19937_64& r) {
         Tensor mask = Tensor::Ones(4, 5);
         mask(0, 1) = 0;
         mask(2, 0) = 0;
         mask(2, 4) = 0;
         return g.masked_logsumexp(in(g, b, w, "a", signed_away_from_zero(4, 5, r)), mask);
       }},
  };
}

}  // namespace

TEST(Evaluate, ReluExample) {
  ExprGraph g;
  const NodeId x = g.input("x");
  const NodeId y = g.relu(x);
  const NodeId outs[] = {y};
  const auto v = evaluate(g, {{"x", mat({{-1, 2}})}}, outs);
  EXPECT_EQ(v[0], mat({{0, 2}}));
}

TEST(Evaluate, ZeroInputAnnihilatesMatmul) {
  ExprGraph g;
  const NodeId x = g.input("x");
  const NodeId w = g.input("W");
  const NodeId y = g.matmul(x, w);
  const NodeId outs[] = {y};
  const auto v = evaluate(g, {{"x", Tensor::Zero(1, 3)}, {"W", Tensor::Random(3, 4)}}, outs);
  EXPECT_EQ(v[0], Tensor::Zero(1, 4));
}

TEST(Evaluate, L2NormThreeFourFive) {
  ExprGraph g;
  const NodeId y = g.l2norm(g.input("x"));
  const NodeId outs[] = {y};
  const auto v = evaluate(g, {{"x", mat({{3, 4}})}}, outs);
  EXPECT_NEAR(v[0](0, 0), 0.6, 1e-15);
  EXPECT_NEAR(v[0](0, 1), 0.8, 1e-15);
}

TEST(Evaluate, UnboundInputIsShapeError) {
  ExprGraph g;
  g.relu(g.input("x"));
  EXPECT_THROW(g.forward({}), ShapeError);
}

TEST(Evaluate, ShapeMismatchIsReported) {
  ExprGraph g;
  g.matmul(g.input("a"), g.input("b"));
  EXPECT_THROW(g.forward({{"a", Tensor::Ones(2, 3)}, {"b", Tensor::Ones(2, 3)}}), ShapeError);
  ExprGraph h;
  h.add(h.input("a"), h.input("b"));
  // Only a single row vector broadcasts.
  EXPECT_THROW(h.forward({{"a", Tensor::Ones(3, 3)}, {"b", Tensor::Ones(2, 3)}}), ShapeError);
  EXPECT_THROW(h.forward({{"a", Tensor::Ones(3, 3)}, {"b", Tensor::Ones(3, 1)}}), ShapeError);
}

TEST(Evaluate, NonFiniteIntermediateNamesTheNode) {
  ExprGraph g;
  const NodeId x = g.input("x");
  const NodeId l = g.log(x);
  try {
    g.forward({{"x", mat({{1.0, -1.0}})}});
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("node " + std::to_string(l)), std::string::npos)
        << e.what();
  }
}

TEST(Evaluate, IsPureInBindings) {
  std::mt19937_64 rng(3);
  ExprGraph g;
  const NodeId a = g.input("a");
  const NodeId y = g.sum(g.exp(g.cosine(g.relu(a), a)));
  const Bindings b{{"a", positive(5, 4, rng)}};
  const NodeId outs[] = {y};
  const auto first = evaluate(g, b, outs);
  const auto second = evaluate(g, b, outs);
  EXPECT_EQ(std::memcmp(first[0].data(), second[0].data(), sizeof(double)), 0);
}

TEST(Evaluate, BatchnormTrainUsesBatchStatistics) {
  ExprGraph g;
  const NodeId y = g.batchnorm(g.input("x"), g.constant(Tensor::Ones(1, 1)),
                               g.constant(Tensor::Zero(1, 1)), 0.0);
  g.forward({{"x", mat({{1}, {3}})}});
  EXPECT_NEAR(g.value(y)(0, 0), -1.0, 1e-12);
  EXPECT_NEAR(g.value(y)(1, 0), 1.0, 1e-12);
}

TEST(Evaluate, BatchnormTrainNeedsTwoRows) {
  ExprGraph g;
  g.batchnorm(g.input("x"), g.constant(Tensor::Ones(1, 2)), g.constant(Tensor::Zero(1, 2)));
  EXPECT_THROW(g.forward({{"x", Tensor::Ones(1, 2)}}), ShapeError);
}

TEST(Gradient, SumGivesOnes) {
  ExprGraph g;
  const NodeId x = g.input("x");
  const NodeId loss = g.sum(x);
  g.forward({{"x", Tensor::Random(2, 2)}});
  const NodeId wrt[] = {x};
  EXPECT_EQ(g.gradient(loss, wrt).at(x), Tensor::Ones(2, 2));
}

TEST(Gradient, HalfSquaredNormGivesInput) {
  ExprGraph g;
  const NodeId x = g.input("x");
  const NodeId loss = g.scale(g.sum(g.hadamard(x, x)), 0.5);
  g.forward({{"x", mat({{1, -3}})}});
  const NodeId wrt[] = {x};
  EXPECT_EQ(g.gradient(loss, wrt).at(x), mat({{1, -3}}));
}

TEST(Gradient, NonScalarLossIsRejected) {
  ExprGraph g;
  const NodeId x = g.input("x");
  const NodeId y = g.relu(x);
  g.forward({{"x", Tensor::Ones(2, 2)}});
  const NodeId wrt[] = {x};
  EXPECT_THROW(g.gradient(y, wrt), ShapeError);
}

TEST(Gradient, UnreachableNodeIsRejected) {
  ExprGraph g;
  const NodeId x = g.input("x");
  const NodeId other = g.input("other");
  const NodeId loss = g.sum(x);
  g.forward({{"x", Tensor::Ones(2, 2)}, {"other", Tensor::Ones(1, 1)}});
  const NodeId wrt[] = {other};
  EXPECT_THROW(g.gradient(loss, wrt), Error);
}

TEST(Gradient, RequiresForward) {
  ExprGraph g;
  const NodeId x = g.input("x");
  const NodeId loss = g.sum(x);
  const NodeId wrt[] = {x};
  EXPECT_THROW(g.gradient(loss, wrt), Error);
}

TEST(Gradient, ReluDerivativeAtZeroIsZero) {
  ExprGraph g;
  const NodeId x = g.input("x");
  const NodeId loss = g.sum(g.relu(x));
  g.forward({{"x", mat({{0.0, 1.0, -1.0}})}});
  const NodeId wrt[] = {x};
  EXPECT_EQ(g.gradient(loss, wrt).at(x), mat({{0.0, 1.0, 0.0}}));
}

TEST(Gradient, L2NormJacobianAnnihilatesInputDirection) {
  // The directional derivative of u/|u| along u is zero, so
  // d/dt sum(l2norm(u + t u) o w) = <grad, u> = 0 for any weight w.
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    ExprGraph g;
    const NodeId u = g.input("u");
    const Tensor w = signed_away_from_zero(4, 6, rng);
    const NodeId loss = probe_loss(g, g.l2norm(u), w);
    const Tensor value = signed_away_from_zero(4, 6, rng);
    g.forward({{"u", value}});
    const NodeId wrt[] = {u};
    const Tensor grad = g.gradient(loss, wrt).at(u);
    for (Index r = 0; r < value.rows(); ++r) {
      EXPECT_NEAR(grad.row(r).dot(value.row(r)), 0.0, 1e-13);
    }
  }
}

TEST(Gradient, ParameterAdjointsMatchValueShapes) {
  std::mt19937_64 rng(5);
  ExprGraph g;
  const NodeId x = g.input("x");
  const NodeId w = g.input("W");
  const NodeId b = g.input("b");
  const NodeId loss = g.sum(g.l2norm(g.relu(g.add(g.matmul(x, w), b))));
  g.forward({{"x", signed_away_from_zero(5, 3, rng)},
             {"W", signed_away_from_zero(3, 4, rng)},
             {"b", signed_away_from_zero(1, 4, rng)}});
  const NodeId wrt[] = {w, b};
  const auto grads = g.gradient(loss, wrt);
  EXPECT_EQ(grads.at(w).rows(), 3);
  EXPECT_EQ(grads.at(w).cols(), 4);
  EXPECT_EQ(grads.at(b).rows(), 1);
  EXPECT_EQ(grads.at(b).cols(), 4);
}

TEST(FiniteDifference, QuadraticIsExactUpToRounding) {
  ExprGraph g;
  const NodeId x = g.input("x");
  const NodeId loss = g.scale(g.sum(g.hadamard(x, x)), 0.5);
  const NodeId wrt[] = {x};
  EXPECT_LT(finite_difference_check(g, {{"x", mat({{1.0}})}}, loss, wrt, 1e-5), 1e-9);
}

TEST(FiniteDifference, ConstantLossHasZeroError) {
  ExprGraph g;
  const NodeId x = g.input("x");
  const NodeId c = g.constant(mat({{2.0}}));
  // Depends on x only through a zero-weighted path.
  const NodeId loss = g.add(g.sum(g.scale(x, 0.0)), c);
  const NodeId wrt[] = {x};
  EXPECT_EQ(finite_difference_check(g, {{"x", Tensor::Ones(2, 2)}}, loss, wrt, 1e-5), 0.0);
}

TEST(FiniteDifference, RejectsNonPositiveStep) {
  ExprGraph g;
  const NodeId x = g.input("x");
  const NodeId loss = g.sum(x);
  const NodeId wrt[] = {x};
  EXPECT_THROW(finite_difference_check(g, {{"x", Tensor::Ones(1, 1)}}, loss, wrt, 0.0),
               ConfigError);
  EXPECT_THROW(finite_difference_check(g, {{"x", Tensor::Ones(1, 1)}}, loss, wrt, -1e-5),
               ConfigError);
}

TEST(FiniteDifference, LeavesGraphAtOriginalBindings) {
  ExprGraph g;
  const NodeId x = g.input("x");
  const NodeId loss = g.sum(g.exp(x));
  const Tensor v = mat({{0.3, -0.2}});
  const NodeId wrt[] = {x};
  finite_difference_check(g, {{"x", v}}, loss, wrt, 1e-5);
  EXPECT_DOUBLE_EQ(g.value(loss)(0, 0), std::exp(0.3) + std::exp(-0.2));
}

TEST(FiniteDifferenceProperty, EveryOpAgreesOverOneHundredSeeds) {
  for (const auto& op : differentiable_ops()) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      std::mt19937_64 rng(seed * 7919 + 17);
      // Relative error is meaningless on entries that nearly cancel, so
      // redraw probes with a nonzero gradient entry below 1e-3.
      for (;;) {
        ExprGraph g;
        Bindings b;
        std::vector<NodeId> wrt;
        const NodeId y = op.build(g, b, wrt, rng);
        g.forward(b);
        const Tensor& out = g.value(y);
        const NodeId loss =
            probe_loss(g, y, signed_away_from_zero(out.rows(), out.cols(), rng, 0.5, 1.5));
        g.forward(b);
        bool smooth = true;
        for (const auto& [node, grad] : g.gradient(loss, wrt)) {
          for (Index k = 0; k < grad.size(); ++k) {
            if (grad(k) != 0.0 && std::abs(grad(k)) < 1e-3) smooth = false;
          }
        }
        if (!smooth) continue;
        worst = std::max(worst, finite_difference_check(g, b, loss, wrt, 1e-5));
        break;
      }
    }
    EXPECT_LT(worst, 1e-6) << op.name;
  }
}
