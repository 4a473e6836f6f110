#pragma once

#include <vector>

#include "xmreid/nn.hpp"

namespace xmreid::optim {

struct AdamOptions {
  Real lr = 2e-4;
  Real beta1 = 0.5;
  Real beta2 = 0.999;
  Real eps = 1e-8;
};

/// Adaptive-moment optimizer. Parameters that alias the same storage are
/// registered once, so shared weights receive exactly one update per step.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<nn::NamedParam> params, AdamOptions options);

  void step();
  void zero_grad();
  void set_lr(Real lr) { options_.lr = lr; }
  Real lr() const { return options_.lr; }
  long steps() const { return steps_; }

  const std::vector<nn::NamedParam>& params() const { return params_; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  void set_steps(long s) { steps_ = s; }

 private:
  std::vector<nn::NamedParam> params_;
  std::vector<Tensor> m_, v_;
  AdamOptions options_;
  long steps_ = 0;
};

/// Concatenates parameter lists, dropping entries whose storage already appeared.
std::vector<nn::NamedParam> unique_params(std::vector<std::vector<nn::NamedParam>> groups);

}  // namespace xmreid::optim
