#pragma once

#include <string>
#include <vector>

#include "phl/models.hpp"

namespace phl {

enum class OptimizerKind { Adam, SgdMomentum };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(const std::string& text);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double momentum = 0.9;  // SGD only
};

/// First-order optimizer over a fixed list of parameter tensors. Weight
/// decay is classic L2: grad += wd * param before the moment update.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {});

  void step(ParameterList& params, const std::vector<Tensor>& grads);
  /// Same update on a subset: params[i] for i in `which`, grads aligned with `which`.
  void step(ParameterList& params, const std::vector<std::size_t>& which,
            const std::vector<Tensor>& grads);

  const OptimizerConfig& config() const { return config_; }
  long steps() const { return steps_; }
  void reset();

 private:
  OptimizerConfig config_;
  long steps_ = 0;
  std::vector<Tensor> first_;
  std::vector<Tensor> second_;
};

}  // namespace phl
