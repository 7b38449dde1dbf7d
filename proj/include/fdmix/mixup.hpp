#pragma once

#include "fdmix/data.hpp"
#include "fdmix/rng.hpp"
#include "fdmix/tensor.hpp"

namespace fdmix {

enum class LambdaStrategy { Plain, V1, V2 };

// Beta(alpha, alpha) draw; V1 caps the value at 0.5, V2 floors it at 0.5.
double sample_lambda(double alpha, LambdaStrategy strategy, Rng& rng);

// Elementwise lambda * q_sou + (1 - lambda) * q_aux. One scalar lambda for
// the whole batch.
Tensor mix_queries(const Tensor& q_sou, const Tensor& q_aux, double lambda);

struct MixedBatch {
  Episode s_sou;  // source episode, support untouched
  Episode s_aux;  // auxiliary episode, support untouched
  Tensor q_mix;
  std::vector<int> y_src_labels;  // mixed queries vs the source class slots
  std::vector<int> y_aux_labels;  // mixed queries vs the auxiliary class slots
  double lambda = 1.0;
};

MixedBatch build_mixed_batch(const Episode& e_sou, const Episode& e_aux, double lambda);

}  // namespace fdmix
