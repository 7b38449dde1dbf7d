#include "fdmix/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace fdmix {

void ParamSet::add(const std::string& name, Tensor t) {
  if (params_.count(name)) {
    throw std::invalid_argument("ParamSet::add: duplicate parameter name '" + name + "'");
  }
  if (!t.requires_grad()) {
    throw std::invalid_argument("ParamSet::add: parameter '" + name + "' must require grad");
  }
  params_.emplace(name, std::move(t));
}

Tensor& ParamSet::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("ParamSet: no parameter '" + name + "'");
  return it->second;
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("ParamSet: no parameter '" + name + "'");
  return it->second;
}

void ParamSet::zero_grads() {
  for (auto& [name, t] : params_) t.zero_grad();
}

void ParamSet::fill_missing_grads() {
  for (auto& [name, t] : params_) {
    if (!t.has_grad()) t.node()->grad.assign(t.data().size(), 0.0);
  }
}

void adam_step(std::vector<ParamSet*> params, AdamState& state) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (ParamSet* set : params) {
    for (auto& [name, t] : *set) {
      if (!t.has_grad()) {
        throw std::runtime_error("adam_step: missing gradient for parameter '" + name + "'");
      }
      const auto& g = t.grad();
      for (double gv : g) {
        if (!std::isfinite(gv)) {
          throw std::runtime_error("adam_step: non-finite gradient for parameter '" + name + "'");
        }
      }
      auto& [m, v] = state.moments[name];
      if (m.empty()) {
        m.assign(g.size(), 0.0);
        v.assign(g.size(), 0.0);
      }
      auto& data = t.mutable_data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
        v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        data[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
      }
    }
  }
}

void backward_into(Tensor loss, std::vector<ParamSet*> params) {
  loss.backward();
  for (ParamSet* set : params) set->fill_missing_grads();
}

}  // namespace fdmix
