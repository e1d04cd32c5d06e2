#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "phl/data.hpp"
#include "phl/models.hpp"

namespace phl {

enum class EvalMethod { Knn, Linear };
std::string to_string(EvalMethod method);
EvalMethod parse_eval_method(const std::string& text);

struct EvalReport {
  std::string feature;  // h, z, h_r, h_n
  EvalMethod method = EvalMethod::Knn;
  double accuracy = 0.0;
  Index correct = 0;
  Index train_size = 0;
  Index test_size = 0;
  Index k = 0;        // KNN
  Index epochs = 0;   // probe
  double learning_rate = 0.0;
};

/// min(200, floor(train / 10)), at least 1.
Index default_knn_k(Index train_size);

/// Cosine k-nearest-neighbour majority vote. Ties: summed similarity, then
/// the smallest class index. Zero-norm train rows never become neighbours.
EvalReport knn_eval(const Tensor& train, const std::vector<int>& train_labels, const Tensor& test,
                    const std::vector<int>& test_labels, Index k, int classes);

struct ProbeConfig {
  Index epochs = 200;
  double learning_rate = 1e-3;
  double weight_decay = 1e-6;
  Index batch_size = 0;  // 0: full batch
  bool standardize = true;
  std::uint64_t seed = 0;
};

/// Softmax regression on frozen features trained with Adam.
EvalReport linear_probe(const Tensor& train, const std::vector<int>& train_labels,
                        const Tensor& test, const std::vector<int>& test_labels, int classes,
                        const ProbeConfig& config);

struct Features {
  Tensor h;
  Tensor z;
};

/// Eval-mode features; rows are independent of batch composition.
Features extract_features(const Encoder& encoder, const Head& head, const Tensor& x);

struct EvalConfig {
  std::vector<std::string> components{"h", "z", "h_r", "h_n"};
  std::vector<EvalMethod> methods{EvalMethod::Knn, EvalMethod::Linear};
  Index knn_k = 0;  // 0: default_knn_k
  ProbeConfig probe;
};

struct ComponentEval {
  std::vector<EvalReport> reports;
  std::vector<std::string> notices;
};

/// Evaluates the requested components with every requested method on
/// identical splits. h_r/h_n use the head's analysis map; heads without one
/// get a notice instead.
ComponentEval component_eval(const Encoder& encoder, const Head& head, const LabeledDataset& train,
                             const LabeledDataset& test, const EvalConfig& config);

}  // namespace phl
