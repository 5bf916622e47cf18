#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "se3m/error.hpp"
#include "se3m/tensor.hpp"

namespace se3m {

struct AdamConfig {
  double lr = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam. Moments are kept in double regardless of T.
template <typename T>
class Adam {
 public:
  Adam(ParameterRefs<T> params, AdamConfig config = {}) : params_(std::move(params)), config_(config) {
    for (const auto* p : params_) {
      first_.emplace_back(p->value.size(), 0.0);
      second_.emplace_back(p->value.size(), 0.0);
    }
  }

  const AdamConfig& config() const { return config_; }
  std::uint64_t step() const { return step_; }

  /// Applies one update from the gradients currently stored in the
  /// parameters. Gradients are left untouched.
  void update() {
    ++step_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Parameter<T>& p = *params_[k];
      require_shape(p.grad.size() == first_[k].size(), "adam: parameter " + p.name + " changed shape");
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < m.size(); ++i) {
        const double g = static_cast<double>(p.grad[i]);
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        const double m_hat = m[i] / c1;
        const double v_hat = v[i] / c2;
        p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - config_.lr * m_hat / (std::sqrt(v_hat) + config_.epsilon));
      }
    }
  }

 private:
  ParameterRefs<T> params_;
  AdamConfig config_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

}  // namespace se3m
