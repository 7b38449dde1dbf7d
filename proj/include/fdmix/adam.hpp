#pragma once

#include <map>
#include <string>
#include <vector>

#include "fdmix/tensor.hpp"

namespace fdmix {

// Named trainable parameters. std::map keeps iteration lexicographic, which
// the determinism contract relies on.
class ParamSet {
 public:
  void add(const std::string& name, Tensor t);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  std::size_t size() const { return params_.size(); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grads();
  // Give a zero gradient to any parameter backward did not reach.
  void fill_missing_grads();

 private:
  std::map<std::string, Tensor> params_;
};

struct AdamState {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments;
};

// One bias-corrected Adam update over every parameter in the given sets.
// Rejects parameters with missing or non-finite gradients.
void adam_step(std::vector<ParamSet*> params, AdamState& state);

// Runs backward from loss, then zero-fills gradients of unreached parameters
// so that the optimizer contract (every grad present) holds.
void backward_into(Tensor loss, std::vector<ParamSet*> params);

}  // namespace fdmix
