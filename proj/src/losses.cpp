#include "fdmix/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace fdmix {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void check_lambda(double lambda) {
  require(lambda >= 0.0 && lambda <= 1.0, "lambda must be in [0, 1]");
}

// 1 = source, 0 = target
std::vector<int> domain_labels(int count, int value) {
  return std::vector<int>(static_cast<std::size_t>(count), value);
}

}  // namespace

FslLossParts fsl_loss(const Tensor& logits_vs_source, const std::vector<int>& y_src_labels,
                      const Tensor& logits_vs_aux, const std::vector<int>& y_aux_labels,
                      double lambda) {
  require(logits_vs_source.shape() == logits_vs_aux.shape(),
          "fsl_loss: logit blocks disagree, " + shape_str(logits_vs_source.shape()) + " vs " +
              shape_str(logits_vs_aux.shape()));
  check_lambda(lambda);
  FslLossParts parts;
  parts.source = cross_entropy(logits_vs_source, y_src_labels);
  parts.aux = cross_entropy(logits_vs_aux, y_aux_labels);
  parts.combined = add(scale(parts.source, lambda), scale(parts.aux, 1.0 - lambda));
  return parts;
}

Tensor dom2_loss(const Tensor& dom_logits_s_sou, const Tensor& dom_logits_s_aux,
                 const Tensor& dom_logits_q_mix, double lambda) {
  check_lambda(lambda);
  for (const Tensor* t : {&dom_logits_s_sou, &dom_logits_s_aux, &dom_logits_q_mix}) {
    require(t->shape().size() == 2 && t->shape()[1] == 2,
            "dom2_loss: domain logits must be B x 2, got " + shape_str(t->shape()));
  }
  Tensor ce_sou = cross_entropy(dom_logits_s_sou, domain_labels(dom_logits_s_sou.shape()[0], 1));
  Tensor ce_aux = cross_entropy(dom_logits_s_aux, domain_labels(dom_logits_s_aux.shape()[0], 0));
  Tensor ce_mix1 = cross_entropy(dom_logits_q_mix, domain_labels(dom_logits_q_mix.shape()[0], 1));
  Tensor ce_mix0 = cross_entropy(dom_logits_q_mix, domain_labels(dom_logits_q_mix.shape()[0], 0));
  Tensor inner = add(add(ce_sou, ce_aux),
                     add(scale(ce_mix1, lambda), scale(ce_mix0, 1.0 - lambda)));
  return scale(inner, 1.0 / 3.0);
}

Tensor dom1_loss(const Tensor& dom_logits_s_sou, const Tensor& dom_logits_s_aux,
                 const Tensor& dom_logits_q_mix, bool reverse_kl) {
  Tensor blocks[3] = {dom_logits_s_sou, dom_logits_s_aux, dom_logits_q_mix};
  Tensor total;
  for (int i = 0; i < 3; ++i) {
    require(blocks[i].shape().size() == 2 && blocks[i].shape()[1] == 2,
            "dom1_loss: domain logits must be B x 2, got " + shape_str(blocks[i].shape()));
    Tensor pred = softmax_rows(blocks[i]);
    Tensor uniform = Tensor::full(pred.shape(), 0.5);
    Tensor kl = reverse_kl ? kl_divergence(uniform, pred) : kl_divergence(pred, uniform);
    total = total.defined() ? add(total, kl) : kl;
  }
  return scale(total, 1.0 / 3.0);
}

LossBreakdown total_loss(const FslLossParts& fsl, const Tensor& l_dom1, const Tensor& l_dom2,
                         double lambda) {
  LossBreakdown out;
  out.lambda = lambda;
  out.l_fsl_s = fsl.source.item();
  out.l_fsl_a = fsl.aux.item();
  out.l_fsl = fsl.combined.item();
  out.l_dom1 = l_dom1.item();
  out.l_dom2 = l_dom2.item();
  const std::pair<const char*, double> parts[] = {
      {"l_fsl", out.l_fsl}, {"l_dom1", out.l_dom1}, {"l_dom2", out.l_dom2}};
  for (const auto& [name, value] : parts) {
    if (!std::isfinite(value)) {
      throw std::runtime_error(std::string("total_loss: non-finite component ") + name);
    }
  }
  out.total_tensor = add(fsl.combined, add(l_dom2, l_dom1));
  out.total = out.total_tensor.item();
  return out;
}

}  // namespace fdmix
