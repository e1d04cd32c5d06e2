#include "phl/optim.hpp"

#include <cmath>
#include <numeric>

namespace phl {

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::Adam ? "adam" : "sgd";
}

OptimizerKind parse_optimizer_kind(const std::string& text) {
  if (text == "adam") return OptimizerKind::Adam;
  if (text == "sgd") return OptimizerKind::SgdMomentum;
  throw ConfigError("unknown optimizer '" + text + "'");
}

Optimizer::Optimizer(OptimizerConfig config) : config_(config) {
  if (!(config_.learning_rate >= 0.0)) throw ConfigError("optimizer: learning rate must be >= 0");
  if (!(config_.weight_decay >= 0.0)) throw ConfigError("optimizer: weight decay must be >= 0");
}

void Optimizer::reset() {
  steps_ = 0;
  first_.clear();
  second_.clear();
}

void Optimizer::step(ParameterList& params, const std::vector<Tensor>& grads) {
  std::vector<std::size_t> all(params.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  step(params, all, grads);
}

void Optimizer::step(ParameterList& params, const std::vector<std::size_t>& which,
                     const std::vector<Tensor>& grads) {
  if (which.size() != grads.size()) throw ShapeError("optimizer: gradient count mismatch");
  if (first_.empty()) {
    for (std::size_t k : which) {
      first_.push_back(Tensor::Zero(params.at(k).value.rows(), params.at(k).value.cols()));
      if (config_.kind == OptimizerKind::Adam) {
        second_.push_back(Tensor::Zero(params[k].value.rows(), params[k].value.cols()));
      }
    }
  }
  if (first_.size() != which.size()) throw ShapeError("optimizer: parameter set changed");
  for (std::size_t i = 0; i < which.size(); ++i) {
    require_same_shape(params.at(which[i]).value, grads[i], "optimizer");
    require_same_shape(first_[i], grads[i], "optimizer state");
    if (!grads[i].allFinite()) {
      throw NumericalError("optimizer: non-finite gradient for " + params[which[i]].name);
    }
  }

  ++steps_;
  const double lr = config_.learning_rate;
  for (std::size_t i = 0; i < which.size(); ++i) {
    Tensor& p = params[which[i]].value;
    Tensor g = grads[i];
    if (config_.weight_decay != 0.0) g += config_.weight_decay * p;
    if (config_.kind == OptimizerKind::Adam) {
      first_[i] = config_.beta1 * first_[i] + (1.0 - config_.beta1) * g;
      second_[i] = config_.beta2 * second_[i] + (1.0 - config_.beta2) * g.cwiseAbs2();
      const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
      const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
      p.array() -= lr * (first_[i].array() / c1) /
                   ((second_[i].array() / c2).sqrt() + config_.epsilon);
    } else {
      first_[i] = config_.momentum * first_[i] + g;
      p -= lr * first_[i];
    }
  }
}

}  // namespace phl
