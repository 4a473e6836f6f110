#include "xmreid/optim.hpp"

#include <cmath>
#include <unordered_set>

namespace xmreid::optim {

std::vector<nn::NamedParam> unique_params(std::vector<std::vector<nn::NamedParam>> groups) {
  std::vector<nn::NamedParam> out;
  std::unordered_set<const Node*> seen;
  for (auto& g : groups)
    for (auto& p : g)
      if (seen.insert(p.var.node()).second) out.push_back(std::move(p));
  return out;
}

Adam::Adam(std::vector<nn::NamedParam> params, AdamOptions options)
    : params_(unique_params({std::move(params)})), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.var.shape());
    v_.emplace_back(p.var.shape());
  }
}

void Adam::step() {
  ++steps_;
  const Real b1 = options_.beta1, b2 = options_.beta2;
  const Real c1 = 1 - std::pow(b1, static_cast<Real>(steps_));
  const Real c2 = 1 - std::pow(b2, static_cast<Real>(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Var& p = params_[k].var;
    if (!p.has_grad()) continue;
    Tensor& w = p.mutable_value();
    const Tensor& g = p.grad();
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      w[i] -= options_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + options_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

}  // namespace xmreid::optim
