#include "phl/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "phl/diagnostics.hpp"
#include "phl/optim.hpp"

namespace phl {

std::string to_string(EvalMethod method) { return method == EvalMethod::Knn ? "knn" : "linear"; }

EvalMethod parse_eval_method(const std::string& text) {
  if (text == "knn") return EvalMethod::Knn;
  if (text == "linear") return EvalMethod::Linear;
  throw ConfigError("unknown evaluation method '" + text + "'");
}

Index default_knn_k(Index train_size) {
  return std::max<Index>(1, std::min<Index>(200, train_size / 10));
}

namespace {

void check_split(const Tensor& train, const std::vector<int>& train_labels, const Tensor& test,
                 const std::vector<int>& test_labels, int classes) {
  if (static_cast<Index>(train_labels.size()) != train.rows() ||
      static_cast<Index>(test_labels.size()) != test.rows()) {
    throw ShapeError("evaluation: label count does not match feature rows");
  }
  if (train.cols() != test.cols()) throw ShapeError("evaluation: train/test feature width differs");
  if (train.rows() == 0 || test.rows() == 0) throw ShapeError("evaluation: empty split");
  for (int l : train_labels) {
    if (l < 0 || l >= classes) throw ShapeError("evaluation: train label out of range");
  }
  for (int l : test_labels) {
    if (l < 0 || l >= classes) throw ShapeError("evaluation: test label out of range");
  }
}

}  // namespace

EvalReport knn_eval(const Tensor& train, const std::vector<int>& train_labels, const Tensor& test,
                    const std::vector<int>& test_labels, Index k, int classes) {
  check_split(train, train_labels, test, test_labels, classes);
  if (k < 1) throw ConfigError("knn: k must be >= 1");
  if (k > train.rows()) {
    throw ConfigError("knn: k = " + std::to_string(k) + " exceeds train size " +
                      std::to_string(train.rows()));
  }

  auto normalized = [](const Tensor& m, std::vector<char>& valid) {
    Tensor out = m;
    valid.assign(static_cast<std::size_t>(m.rows()), 1);
    for (Index i = 0; i < m.rows(); ++i) {
      const double n = m.row(i).norm();
      if (n > 0.0) {
        out.row(i) /= n;
      } else {
        valid[static_cast<std::size_t>(i)] = 0;
      }
    }
    return out;
  };
  std::vector<char> train_valid, test_valid;
  const Tensor tr = normalized(train, train_valid);
  const Tensor te = normalized(test, test_valid);

  std::vector<Index> candidates;
  for (Index j = 0; j < tr.rows(); ++j) {
    if (train_valid[static_cast<std::size_t>(j)]) candidates.push_back(j);
  }
  const auto kk = static_cast<std::ptrdiff_t>(std::min<Index>(k, static_cast<Index>(candidates.size())));

  EvalReport report;
  report.method = EvalMethod::Knn;
  report.k = k;
  report.train_size = train.rows();
  report.test_size = test.rows();

  constexpr Index kBlock = 256;
  std::vector<Index> order;
  std::vector<int> votes(static_cast<std::size_t>(classes));
  std::vector<double> weight(static_cast<std::size_t>(classes));
  for (Index start = 0; start < te.rows(); start += kBlock) {
    const Index len = std::min(kBlock, te.rows() - start);
    const Tensor sims = te.middleRows(start, len) * tr.transpose();
    for (Index r = 0; r < len; ++r) {
      order = candidates;
      auto closer = [&](Index a, Index b) {
        const double sa = sims(r, a), sb = sims(r, b);
        return sa != sb ? sa > sb : a < b;
      };
      std::partial_sort(order.begin(), order.begin() + kk, order.end(), closer);
      std::fill(votes.begin(), votes.end(), 0);
      std::fill(weight.begin(), weight.end(), 0.0);
      for (std::ptrdiff_t i = 0; i < kk; ++i) {
        const auto c = static_cast<std::size_t>(train_labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
        ++votes[c];
        weight[c] += sims(r, order[static_cast<std::size_t>(i)]);
      }
      int best = 0;
      for (int c = 1; c < classes; ++c) {
        const auto cu = static_cast<std::size_t>(c), bu = static_cast<std::size_t>(best);
        if (votes[cu] > votes[bu] || (votes[cu] == votes[bu] && weight[cu] > weight[bu])) best = c;
      }
      if (best == test_labels[static_cast<std::size_t>(start + r)]) ++report.correct;
    }
  }
  report.accuracy = static_cast<double>(report.correct) / static_cast<double>(report.test_size);
  return report;
}

EvalReport linear_probe(const Tensor& train, const std::vector<int>& train_labels,
                        const Tensor& test, const std::vector<int>& test_labels, int classes,
                        const ProbeConfig& config) {
  check_split(train, train_labels, test, test_labels, classes);
  if (classes < 2) throw ConfigError("linear probe: need at least two classes");
  if (std::set<int>(train_labels.begin(), train_labels.end()).size() < 2) {
    throw ConfigError("linear probe: degenerate single-class training set");
  }
  if (config.epochs < 0) throw ConfigError("linear probe: epochs must be >= 0");

  Tensor xtr = train, xte = test;
  if (config.standardize) {
    const RowVector mean = train.colwise().mean();
    RowVector sd = ((train.rowwise() - mean).array().square().colwise().mean()).sqrt();
    sd = sd.unaryExpr([](double s) { return s > 1e-12 ? s : 1.0; });
    xtr = (train.rowwise() - mean).array().rowwise() / sd.array();
    xte = (test.rowwise() - mean).array().rowwise() / sd.array();
  }
  const Index q = xtr.cols();
  Tensor onehot = Tensor::Zero(xtr.rows(), classes);
  for (Index i = 0; i < xtr.rows(); ++i) onehot(i, train_labels[static_cast<std::size_t>(i)]) = 1.0;

  ParameterList params{{"probe.W", Tensor::Zero(q, classes)}, {"probe.b", Tensor::Zero(1, classes)}};
  Optimizer opt({OptimizerKind::Adam, config.learning_rate, config.weight_decay});

  auto logits_of = [&](const Tensor& x) {
    Tensor logits = x * params[0].value;
    logits.rowwise() += params[1].value.row(0);
    return logits;
  };
  auto step_on = [&](const std::vector<Index>& rows) {
    const auto n = static_cast<Index>(rows.size());
    Tensor x(n, q), y(n, classes);
    for (Index i = 0; i < n; ++i) {
      x.row(i) = xtr.row(rows[static_cast<std::size_t>(i)]);
      y.row(i) = onehot.row(rows[static_cast<std::size_t>(i)]);
    }
    Tensor p = logits_of(x);
    for (Index i = 0; i < n; ++i) {
      const double m = p.row(i).maxCoeff();
      p.row(i) = (p.row(i).array() - m).exp();
      p.row(i) /= p.row(i).sum();
    }
    const Tensor delta = (p - y) / static_cast<double>(n);
    opt.step(params, {Tensor(x.transpose() * delta), Tensor(delta.colwise().sum())});
  };

  std::vector<Index> all(static_cast<std::size_t>(xtr.rows()));
  std::iota(all.begin(), all.end(), Index{0});
  std::mt19937_64 rng(derive_seed(config.seed, 0x9a0be));
  for (Index epoch = 0; epoch < config.epochs; ++epoch) {
    if (config.batch_size <= 0 || config.batch_size >= xtr.rows()) {
      step_on(all);
      continue;
    }
    std::shuffle(all.begin(), all.end(), rng);
    for (Index off = 0; off < xtr.rows(); off += config.batch_size) {
      const Index len = std::min(config.batch_size, xtr.rows() - off);
      step_on(std::vector<Index>(all.begin() + off, all.begin() + off + len));
    }
  }

  EvalReport report;
  report.method = EvalMethod::Linear;
  report.epochs = config.epochs;
  report.learning_rate = config.learning_rate;
  report.train_size = xtr.rows();
  report.test_size = xte.rows();
  const Tensor logits = logits_of(xte);
  for (Index i = 0; i < xte.rows(); ++i) {
    Index best = 0;
    logits.row(i).maxCoeff(&best);
    if (best == test_labels[static_cast<std::size_t>(i)]) ++report.correct;
  }
  report.accuracy = static_cast<double>(report.correct) / static_cast<double>(report.test_size);
  return report;
}

Features extract_features(const Encoder& encoder, const Head& head, const Tensor& x) {
  Features f;
  f.h = encoder.features(x);
  f.z = head.kind == HeadKind::None ? f.h : head.apply(f.h);
  return f;
}

ComponentEval component_eval(const Encoder& encoder, const Head& head, const LabeledDataset& train,
                             const LabeledDataset& test, const EvalConfig& config) {
  const Features tr = extract_features(encoder, head, train.examples);
  const Features te = extract_features(encoder, head, test.examples);
  const int classes = std::max(train.classes, test.classes);

  std::optional<NullSpaceSplit<double>> split_tr, split_te;
  const auto map = head.analysis_map();

  ComponentEval out;
  const Index k = config.knn_k > 0 ? config.knn_k : default_knn_k(train.size());
  for (const auto& component : config.components) {
    const Tensor* a = nullptr;
    const Tensor* b = nullptr;
    if (component == "h") {
      a = &tr.h, b = &te.h;
    } else if (component == "z") {
      a = &tr.z, b = &te.z;
    } else if (component == "h_r" || component == "h_n") {
      if (!map) {
        out.notices.push_back(component + " omitted: head " + to_string(head.kind) +
                              " has no linear map on h");
        continue;
      }
      if (!split_tr) {
        split_tr = null_space_decompose(*map, tr.h);
        split_te = null_space_decompose(*map, te.h);
      }
      a = component == "h_r" ? &split_tr->range : &split_tr->null;
      b = component == "h_r" ? &split_te->range : &split_te->null;
    } else {
      throw ConfigError("unknown feature component '" + component + "'");
    }
    for (EvalMethod method : config.methods) {
      EvalReport r = method == EvalMethod::Knn
                         ? knn_eval(*a, train.labels, *b, test.labels, k, classes)
                         : linear_probe(*a, train.labels, *b, test.labels, classes, config.probe);
      r.feature = component;
      out.reports.push_back(r);
    }
  }
  return out;
}

}  // namespace phl
