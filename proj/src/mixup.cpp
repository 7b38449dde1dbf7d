#include "fdmix/mixup.hpp"

#include <stdexcept>

namespace fdmix {

double sample_lambda(double alpha, LambdaStrategy strategy, Rng& rng) {
  if (alpha <= 0.0) {
    throw std::invalid_argument("sample_lambda: alpha must be > 0");
  }
  double lambda = rng.beta(alpha, alpha);
  switch (strategy) {
    case LambdaStrategy::V1:
      if (lambda > 0.5) lambda = 0.5;
      break;
    case LambdaStrategy::V2:
      if (lambda < 0.5) lambda = 0.5;
      break;
    case LambdaStrategy::Plain:
      break;
  }
  return lambda;
}

Tensor mix_queries(const Tensor& q_sou, const Tensor& q_aux, double lambda) {
  if (q_sou.shape() != q_aux.shape()) {
    throw std::invalid_argument("mix_queries: shape mismatch " + shape_str(q_sou.shape()) +
                                " vs " + shape_str(q_aux.shape()));
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw std::invalid_argument("mix_queries: lambda must be in [0, 1]");
  }
  // endpoints are exact copies
  if (lambda == 1.0) return Tensor::from(q_sou.shape(), q_sou.data());
  if (lambda == 0.0) return Tensor::from(q_aux.shape(), q_aux.data());

  std::vector<double> mixed(q_sou.data().size());
  const auto& a = q_sou.data();
  const auto& b = q_aux.data();
  for (std::size_t i = 0; i < mixed.size(); ++i) {
    mixed[i] = lambda * a[i] + (1.0 - lambda) * b[i];
  }
  return Tensor::from(q_sou.shape(), std::move(mixed));
}

MixedBatch build_mixed_batch(const Episode& e_sou, const Episode& e_aux, double lambda) {
  if (e_sou.n_way != e_aux.n_way || e_sou.k_shot != e_aux.k_shot ||
      e_sou.m_query != e_aux.m_query) {
    throw std::invalid_argument("build_mixed_batch: episodes disagree on N/K/M");
  }
  MixedBatch batch;
  batch.s_sou = e_sou;
  batch.s_aux = e_aux;
  batch.q_mix = mix_queries(e_sou.query_images, e_aux.query_images, lambda);
  batch.y_src_labels = e_sou.query_labels;
  batch.y_aux_labels = e_aux.query_labels;
  batch.lambda = lambda;
  return batch;
}

}  // namespace fdmix
