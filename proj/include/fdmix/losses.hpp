#pragma once

#include <vector>

#include "fdmix/tensor.hpp"

namespace fdmix {

struct LossBreakdown {
  double l_fsl_s = 0.0;
  double l_fsl_a = 0.0;
  double l_fsl = 0.0;
  double l_dom1 = 0.0;
  double l_dom2 = 0.0;
  double total = 0.0;
  double lambda = 1.0;
  Tensor total_tensor;  // scalar node for backward
};

struct FslLossParts {
  Tensor combined;  // lambda * l_fsl_s + (1 - lambda) * l_fsl_a
  Tensor source;
  Tensor aux;
};

// Dual few-shot loss: mixed queries classified against the source support's
// class set and the auxiliary support's class set, weighted by lambda.
FslLossParts fsl_loss(const Tensor& logits_vs_source, const std::vector<int>& y_src_labels,
                      const Tensor& logits_vs_aux, const std::vector<int>& y_aux_labels,
                      double lambda);

// Domain-specific loss over H2 features: supports get hard domain labels
// (1 = source, 0 = target), mixed queries get both, weighted by lambda.
Tensor dom2_loss(const Tensor& dom_logits_s_sou, const Tensor& dom_logits_s_aux,
                 const Tensor& dom_logits_q_mix, double lambda);

// Domain-irrelevant loss over H1 features: KL between the domain classifier's
// softmax and the uniform [0.5, 0.5] target, averaged over the three blocks.
// reverse_kl swaps the argument order (audit switch).
Tensor dom1_loss(const Tensor& dom_logits_s_sou, const Tensor& dom_logits_s_aux,
                 const Tensor& dom_logits_q_mix, bool reverse_kl = false);

// Unweighted sum of the three task losses.
LossBreakdown total_loss(const FslLossParts& fsl, const Tensor& l_dom1, const Tensor& l_dom2,
                         double lambda);

}  // namespace fdmix
