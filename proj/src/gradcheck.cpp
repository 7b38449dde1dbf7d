#include "fdmix/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <string>

#include "fdmix/losses.hpp"
#include "fdmix/model.hpp"
#include "fdmix/rng.hpp"

namespace fdmix {

double finite_diff_check(const ScalarProgram& program, const std::vector<Tensor>& point,
                         double eps) {
  if (eps < 1e-6 || eps > 1e-3) {
    throw std::invalid_argument("finite_diff_check: eps must be in [1e-6, 1e-3]");
  }

  // reverse-mode gradients at the point
  std::vector<Tensor> inputs;
  inputs.reserve(point.size());
  for (const auto& t : point) {
    inputs.push_back(Tensor::from(t.shape(), t.data(), /*requires_grad=*/true));
  }
  Tensor loss = program(inputs);
  if (loss.size() != 1) {
    throw std::invalid_argument("finite_diff_check: program output must be scalar");
  }
  loss.backward();

  auto eval_at = [&](std::size_t which, std::size_t coord, double delta) {
    std::vector<Tensor> shifted;
    shifted.reserve(point.size());
    for (std::size_t i = 0; i < point.size(); ++i) {
      std::vector<double> data = point[i].data();
      if (i == which) data[coord] += delta;
      shifted.push_back(Tensor::from(point[i].shape(), std::move(data)));
    }
    return program(shifted).item();
  };

  double max_err = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double> g_ad(inputs[i].data().size(), 0.0);
    if (inputs[i].has_grad()) g_ad = inputs[i].grad();
    for (std::size_t c = 0; c < g_ad.size(); ++c) {
      const double fp = eval_at(i, c, eps);
      const double fm = eval_at(i, c, -eps);
      const double g_fd = (fp - fm) / (2.0 * eps);
      if (!std::isfinite(g_fd)) {
        throw std::runtime_error("finite_diff_check: non-finite difference quotient at input " +
                                 std::to_string(i) + " coordinate " + std::to_string(c));
      }
      const double denom = std::max({1.0, std::abs(g_ad[c]), std::abs(g_fd)});
      max_err = std::max(max_err, std::abs(g_ad[c] - g_fd) / denom);
    }
  }
  return max_err;
}

double model_training_gradcheck(std::uint64_t seed, double eps, int coords_per_param) {
  if (coords_per_param < 1) {
    throw std::invalid_argument("model_training_gradcheck: coords_per_param must be >= 1");
  }
  ModelConfig mc;
  mc.image_hw = 16;
  mc.num_classes = 3;
  mc.channels = {2, 3, 3, 4};
  mc.feat_dim = 8;
  mc.mid_dim = 6;
  mc.latent_dim = 4;

  Rng rng(seed);
  Model base(mc, rng);
  base.set_mode(Mode::Train);

  const int n_way = 2, k_shot = 1, m_query = 2;
  const int nk = n_way * k_shot, nm = n_way * m_query;
  const double lambda = 0.6;
  auto rand_images = [&](int b) {
    std::vector<double> v(static_cast<std::size_t>(b) * 3 * 16 * 16);
    for (auto& x : v) x = rng.uniform();
    return Tensor::from({b, 3, 16, 16}, std::move(v));
  };
  auto rand_noise = [&](int b) {
    std::vector<double> v(static_cast<std::size_t>(b) * mc.latent_dim);
    for (auto& x : v) x = rng.normal();
    return Tensor::from({b, mc.latent_dim}, std::move(v));
  };
  const Tensor x_sou = rand_images(nk), x_aux = rand_images(nk), x_mix = rand_images(nm);
  const Tensor noises[6] = {rand_noise(nk), rand_noise(nk), rand_noise(nk),
                            rand_noise(nk), rand_noise(nm), rand_noise(nm)};
  const std::vector<int> s_labels = {0, 1};
  const std::vector<int> q_labels = {0, 1, 1, 0};

  // the complete training objective, a pure function of the model's parameters
  auto forward = [&](Model& m) {
    DisentangledFeatures d_sou = m.disentangle(m.extract(x_sou), &noises[0], &noises[1]);
    DisentangledFeatures d_aux = m.disentangle(m.extract(x_aux), &noises[2], &noises[3]);
    DisentangledFeatures d_mix = m.disentangle(m.extract(x_mix), &noises[4], &noises[5]);
    Tensor logits_s = m.fsl_logits(d_sou.h1, s_labels, n_way, d_mix.h1);
    Tensor logits_a = m.fsl_logits(d_aux.h1, s_labels, n_way, d_mix.h1);
    FslLossParts fsl = fsl_loss(logits_s, q_labels, logits_a, q_labels, lambda);
    Tensor l_dom2 = dom2_loss(m.domain_logits(d_sou.h2), m.domain_logits(d_aux.h2),
                              m.domain_logits(d_mix.h2), lambda);
    Tensor l_dom1 = dom1_loss(m.domain_logits(d_sou.h1), m.domain_logits(d_aux.h1),
                              m.domain_logits(d_mix.h1));
    return total_loss(fsl, l_dom1, l_dom2, lambda).total_tensor;
  };

  Model ad = base.clone();
  auto ad_params = ad.all_params();
  for (ParamSet* p : ad_params) p->zero_grads();
  Tensor loss = forward(ad);
  backward_into(loss, ad_params);

  double max_err = 0.0;
  for (std::size_t si = 0; si < ad_params.size(); ++si) {
    for (auto& [name, param] : *ad_params[si]) {
      const std::vector<double>& g_ad = param.grad();
      std::set<std::size_t> coords;
      if (static_cast<int>(g_ad.size()) <= coords_per_param) {
        for (std::size_t c = 0; c < g_ad.size(); ++c) coords.insert(c);
      } else {
        while (static_cast<int>(coords.size()) < coords_per_param) {
          coords.insert(rng.uniform_int(g_ad.size()));
        }
      }
      for (std::size_t c : coords) {
        double f[2];
        for (int sgn = 0; sgn < 2; ++sgn) {
          Model probe = base.clone();
          probe.all_params()[si]->at(name).mutable_data()[c] += (sgn == 0 ? eps : -eps);
          f[sgn] = forward(probe).item();
        }
        const double g_fd = (f[0] - f[1]) / (2.0 * eps);
        if (!std::isfinite(g_fd)) {
          throw std::runtime_error("model_training_gradcheck: non-finite quotient at " + name +
                                   "[" + std::to_string(c) + "]");
        }
        const double denom = std::max({1.0, std::abs(g_ad[c]), std::abs(g_fd)});
        max_err = std::max(max_err, std::abs(g_ad[c] - g_fd) / denom);
      }
    }
  }
  return max_err;
}

}  // namespace fdmix
