#pragma once

#include <map>
#include <string>
#include <vector>

#include "fdmix/adam.hpp"
#include "fdmix/rng.hpp"
#include "fdmix/tensor.hpp"

namespace fdmix {

enum class Mode { Train, Eval };
enum class FslHead { Proto, GraphProp };

struct ModelConfig {
  int image_hw = 32;
  int num_classes = 0;  // FC classifier width, fixed at construction
  FslHead head = FslHead::Proto;
  std::vector<int> channels = {6, 12, 12, 24};  // four conv blocks
  // dims downstream of the backbone
  int feat_dim = 512;
  int mid_dim = 256;
  int latent_dim = 64;
  double bn_momentum = 0.1;
};

struct DisentangledFeatures {
  Tensor f;   // B x 512
  Tensor h1;  // B x 64, domain-irrelevant
  Tensor h2;  // B x 64, domain-specific
  Tensor mean_a, devia_a, mean_b, devia_b;
};

// Feature extractor f, disentangle module h, FC classifier g_cls,
// FSL classifier g_fsl, domain classifier g_dom.
class Model {
 public:
  Model() = default;  // empty shell, filled by assignment or load()
  Model(const ModelConfig& cfg, Rng& init_rng);

  const ModelConfig& config() const { return cfg_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }

  // images: B x 3 x hw x hw with pixels in [0, 1] -> B x 512
  Tensor extract(const Tensor& images);

  // In Train mode the devia heads act as log-variances of a reparameterized
  // gaussian and both noise tensors (B x 64) are required; Eval mode returns
  // the means and ignores noise.
  DisentangledFeatures disentangle(const Tensor& f, const Tensor* noise_a = nullptr,
                                   const Tensor* noise_b = nullptr);

  Tensor make_noise(int batch, Rng& rng) const;

  Tensor classify_fc(const Tensor& h1);

  // Metric FSL head over 64-D features; Proto is parameter-free, GraphProp
  // adds one round of similarity-weighted propagation before the prototype rule.
  Tensor fsl_logits(const Tensor& s_feats, const std::vector<int>& s_labels, int n_way,
                    const Tensor& q_feats) const;

  Tensor domain_logits(const Tensor& h);

  ParamSet& params_f() { return f_; }
  ParamSet& params_h() { return h_; }
  ParamSet& params_cls() { return cls_; }
  ParamSet& params_fsl() { return fsl_; }
  ParamSet& params_dom() { return dom_; }
  std::vector<ParamSet*> all_params() { return {&f_, &h_, &cls_, &fsl_, &dom_}; }

  Model clone() const;

  void save(const std::string& path) const;
  static Model load(const std::string& path);

 private:
  ModelConfig cfg_;
  Mode mode_ = Mode::Train;
  ParamSet f_, h_, cls_, fsl_, dom_;
  std::map<std::string, BnStats> bn_;
};

}  // namespace fdmix
