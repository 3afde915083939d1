#include "fedssl/optim.hpp"

#include <cmath>

#include "fedssl/errors.hpp"

namespace fedssl {

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + std::string(name) + "' (expected adam or sgd)");
}

std::string_view optimizer_name(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

Optimizer::Optimizer(OptimizerConfig cfg, std::vector<Group> groups) : cfg_(cfg), groups_(std::move(groups)) {
  if (!(cfg_.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
}

void Optimizer::step(ParameterSet& params, const ParameterSet& grad) {
  params.require_congruent(grad, "optimizer step");
  if (m_.size() != params.size()) {
    m_.assign(params.size(), 0.0f);
    v_.assign(params.size(), 0.0f);
  }
  ++t_;
  auto w = params.values();
  auto g = grad.values();
  const double lr = cfg_.learning_rate;
  if (cfg_.kind == OptimizerKind::adam) {
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<float>(cfg_.beta1);
    const auto b2 = static_cast<float>(cfg_.beta2);
    const auto step = static_cast<float>(lr / bc1);
    const auto inv_bc2 = static_cast<float>(1.0 / bc2);
    const auto eps = static_cast<float>(cfg_.epsilon);
    for (Group grp : groups_) {
      auto [begin, end] = params.layout().range(grp);
      for (std::size_t i = begin; i < end; ++i) {
        m_[i] = b1 * m_[i] + (1.0f - b1) * g[i];
        v_[i] = b2 * v_[i] + (1.0f - b2) * g[i] * g[i];
        w[i] -= step * m_[i] / (std::sqrt(v_[i] * inv_bc2) + eps);
      }
    }
  } else {
    const auto mom = static_cast<float>(cfg_.momentum);
    const auto rate = static_cast<float>(lr);
    for (Group grp : groups_) {
      auto [begin, end] = params.layout().range(grp);
      for (std::size_t i = begin; i < end; ++i) {
        m_[i] = mom * m_[i] + g[i];
        w[i] -= rate * m_[i];
      }
    }
  }
}

}  // namespace fedssl
