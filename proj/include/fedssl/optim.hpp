#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "fedssl/model.hpp"

namespace fedssl {

enum class OptimizerKind { adam, sgd };

OptimizerKind parse_optimizer(std::string_view name);
std::string_view optimizer_name(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double momentum = 0.0;  // sgd only
};

/// First-order optimizer restricted to a fixed set of parameter groups.
/// Moment state is sized to the full parameter vector but only the
/// trained groups are ever touched.
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::vector<Group> groups);

  void step(ParameterSet& params, const ParameterSet& grad);
  const std::vector<Group>& groups() const { return groups_; }
  long steps() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Group> groups_;
  std::vector<float> m_;
  std::vector<float> v_;
  long t_ = 0;
};

}  // namespace fedssl
