#include "fdmix/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace fdmix {

namespace {

constexpr char kMagic[8] = {'F', 'D', 'M', 'I', 'X', 'C', 'K', '1'};

Tensor he_init(Shape shape, int fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / fan_in);
  std::vector<double> data(static_cast<std::size_t>(numel(shape)));
  for (double& v : data) v = stddev * rng.normal();
  return Tensor::from(std::move(shape), std::move(data), /*requires_grad=*/true);
}

}  // namespace

Model::Model(const ModelConfig& cfg, Rng& init_rng) : cfg_(cfg) {
  if (cfg.num_classes < 1) {
    throw std::invalid_argument("Model: num_classes must be >= 1");
  }
  if (cfg.image_hw % 16 != 0) {
    throw std::invalid_argument("Model: image_hw must be divisible by 16");
  }
  if (cfg.channels.size() != 4) {
    throw std::invalid_argument("Model: backbone needs exactly 4 conv blocks");
  }

  // backbone: (conv3x3 -> BN -> ReLU -> pool) x 4, flatten, linear to 512
  int in_ch = 3;
  for (int i = 0; i < 4; ++i) {
    const int out_ch = cfg.channels[i];
    const std::string tag = std::to_string(i + 1);
    f_.add("f/conv" + tag + ".w", he_init({out_ch, in_ch, 3, 3}, in_ch * 9, init_rng));
    f_.add("f/conv" + tag + ".b", Tensor::zeros({out_ch}, true));
    f_.add("f/bn" + tag + ".g", Tensor::full({out_ch}, 1.0, true));
    f_.add("f/bn" + tag + ".b", Tensor::zeros({out_ch}, true));
    bn_["f/bn" + tag] = BnStats{std::vector<double>(out_ch, 0.0), std::vector<double>(out_ch, 1.0)};
    in_ch = out_ch;
  }
  const int side = cfg.image_hw / 16;
  const int flat = cfg.channels[3] * side * side;
  f_.add("f/fc.w", he_init({flat, cfg.feat_dim}, flat, init_rng));
  f_.add("f/fc.b", Tensor::zeros({cfg.feat_dim}, true));

  // disentangle module: FC1 -> BN -> ReLU, then four 256 -> 64 heads
  h_.add("h/fc1.w", he_init({cfg.feat_dim, cfg.mid_dim}, cfg.feat_dim, init_rng));
  h_.add("h/fc1.b", Tensor::zeros({cfg.mid_dim}, true));
  h_.add("h/bn.g", Tensor::full({cfg.mid_dim}, 1.0, true));
  h_.add("h/bn.b", Tensor::zeros({cfg.mid_dim}, true));
  bn_["h/bn"] = BnStats{std::vector<double>(cfg.mid_dim, 0.0), std::vector<double>(cfg.mid_dim, 1.0)};
  for (const char* head : {"fc21a", "fc22a", "fc21b", "fc22b"}) {
    h_.add(std::string("h/") + head + ".w", he_init({cfg.mid_dim, cfg.latent_dim}, cfg.mid_dim, init_rng));
    h_.add(std::string("h/") + head + ".b", Tensor::zeros({cfg.latent_dim}, true));
  }

  cls_.add("cls/fc.w", he_init({cfg.latent_dim, cfg.num_classes}, cfg.latent_dim, init_rng));
  cls_.add("cls/fc.b", Tensor::zeros({cfg.num_classes}, true));

  // metric FSL heads are parameter-free; the set participates in the
  // optimizer step regardless
  dom_.add("dom/fc.w", he_init({cfg.latent_dim, 2}, cfg.latent_dim, init_rng));
  dom_.add("dom/fc.b", Tensor::zeros({2}, true));
}

Tensor Model::extract(const Tensor& images) {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 3) {
    throw std::invalid_argument("Model::extract: expected B x 3 x H x W images, got " +
                                shape_str(s));
  }
  const bool training = mode_ == Mode::Train;
  Tensor x = images;
  for (int i = 0; i < 4; ++i) {
    const std::string tag = std::to_string(i + 1);
    x = conv2d(x, f_.at("f/conv" + tag + ".w"), f_.at("f/conv" + tag + ".b"), 1, 1);
    x = batch_norm(x, f_.at("f/bn" + tag + ".g"), f_.at("f/bn" + tag + ".b"), bn_["f/bn" + tag],
                   training, cfg_.bn_momentum);
    x = relu(x);
    x = mean_pool2(x);
  }
  const int side = cfg_.image_hw / 16;
  x = reshape(x, {s[0], cfg_.channels[3] * side * side});
  return linear(x, f_.at("f/fc.w"), f_.at("f/fc.b"));
}

Tensor Model::make_noise(int batch, Rng& rng) const {
  std::vector<double> data(static_cast<std::size_t>(batch) * cfg_.latent_dim);
  for (double& v : data) v = rng.normal();
  return Tensor::from({batch, cfg_.latent_dim}, std::move(data));
}

DisentangledFeatures Model::disentangle(const Tensor& f, const Tensor* noise_a,
                                        const Tensor* noise_b) {
  if (f.shape().size() != 2 || f.shape()[1] != cfg_.feat_dim) {
    throw std::invalid_argument("Model::disentangle: expected B x " +
                                std::to_string(cfg_.feat_dim) + " features, got " +
                                shape_str(f.shape()));
  }
  const bool training = mode_ == Mode::Train;
  if (training && (noise_a == nullptr || noise_b == nullptr)) {
    throw std::invalid_argument("Model::disentangle: noise tensors required in Train mode");
  }

  Tensor mid = linear(f, h_.at("h/fc1.w"), h_.at("h/fc1.b"));
  mid = batch_norm(mid, h_.at("h/bn.g"), h_.at("h/bn.b"), bn_["h/bn"], training, cfg_.bn_momentum);
  mid = relu(mid);

  DisentangledFeatures out;
  out.f = f;
  out.mean_a = linear(mid, h_.at("h/fc21a.w"), h_.at("h/fc21a.b"));
  out.devia_a = linear(mid, h_.at("h/fc22a.w"), h_.at("h/fc22a.b"));
  out.mean_b = linear(mid, h_.at("h/fc21b.w"), h_.at("h/fc21b.b"));
  out.devia_b = linear(mid, h_.at("h/fc22b.w"), h_.at("h/fc22b.b"));
  if (training) {
    out.h1 = gaussian_reparam(out.mean_a, out.devia_a, *noise_a);
    out.h2 = gaussian_reparam(out.mean_b, out.devia_b, *noise_b);
  } else {
    out.h1 = out.mean_a;
    out.h2 = out.mean_b;
  }
  return out;
}

Tensor Model::classify_fc(const Tensor& h1) {
  if (h1.shape().size() != 2 || h1.shape()[1] != cfg_.latent_dim) {
    throw std::invalid_argument("Model::classify_fc: expected B x " +
                                std::to_string(cfg_.latent_dim) + " input, got " +
                                shape_str(h1.shape()));
  }
  return linear(h1, cls_.at("cls/fc.w"), cls_.at("cls/fc.b"));
}

Tensor Model::fsl_logits(const Tensor& s_feats, const std::vector<int>& s_labels, int n_way,
                         const Tensor& q_feats) const {
  Tensor support = s_feats;
  Tensor queries = q_feats;
  if (cfg_.head == FslHead::GraphProp) {
    // one round of similarity-weighted propagation over support + query,
    // then the prototype rule on the propagated features
    const int nk = s_feats.shape()[0];
    const int nq = q_feats.shape()[0];
    Tensor all = concat_rows({s_feats, q_feats});
    Tensor unit = row_l2_normalize(all);
    Tensor sim = relu(matmul(unit, transpose(unit)));  // diagonal is 1
    Tensor adj = row_normalize_sum(sim);
    Tensor prop = add(scale(all, 0.5), scale(matmul(adj, all), 0.5));
    support = slice_rows(prop, 0, nk);
    queries = slice_rows(prop, nk, nq);
  }
  Tensor protos = class_means(support, s_labels, n_way);
  return neg_sqdist(queries, protos);
}

Tensor Model::domain_logits(const Tensor& h) {
  if (h.shape().size() != 2 || h.shape()[1] != cfg_.latent_dim) {
    throw std::invalid_argument("Model::domain_logits: expected B x " +
                                std::to_string(cfg_.latent_dim) + " input, got " +
                                shape_str(h.shape()));
  }
  return linear(h, dom_.at("dom/fc.w"), dom_.at("dom/fc.b"));
}

Model Model::clone() const {
  Model copy;
  copy.cfg_ = cfg_;
  copy.mode_ = mode_;
  const ParamSet* src[5] = {&f_, &h_, &cls_, &fsl_, &dom_};
  ParamSet* dst[5] = {&copy.f_, &copy.h_, &copy.cls_, &copy.fsl_, &copy.dom_};
  for (int i = 0; i < 5; ++i) {
    for (const auto& [name, t] : *src[i]) {
      dst[i]->add(name, Tensor::from(t.shape(), t.data(), true));
    }
  }
  copy.bn_ = bn_;
  return copy;
}

void Model::save(const std::string& path) const {
  nlohmann::json header;
  header["version"] = 1;
  header["config"] = {{"image_hw", cfg_.image_hw},
                      {"num_classes", cfg_.num_classes},
                      {"head", cfg_.head == FslHead::Proto ? "proto" : "graphprop"},
                      {"channels", cfg_.channels},
                      {"feat_dim", cfg_.feat_dim},
                      {"mid_dim", cfg_.mid_dim},
                      {"latent_dim", cfg_.latent_dim},
                      {"bn_momentum", cfg_.bn_momentum}};

  std::vector<const double*> blobs;
  std::vector<std::size_t> blob_sizes;
  header["params"] = nlohmann::json::array();
  const ParamSet* sets[5] = {&f_, &h_, &cls_, &fsl_, &dom_};
  const char* set_names[5] = {"f", "h", "cls", "fsl", "dom"};
  for (int i = 0; i < 5; ++i) {
    for (const auto& [name, t] : *sets[i]) {
      header["params"].push_back({{"name", name}, {"set", set_names[i]}, {"shape", t.shape()}});
      blobs.push_back(t.data().data());
      blob_sizes.push_back(t.data().size());
    }
  }
  header["bn"] = nlohmann::json::array();
  for (const auto& [name, stats] : bn_) {
    header["bn"].push_back({{"name", name}, {"size", stats.mean.size()}});
    blobs.push_back(stats.mean.data());
    blob_sizes.push_back(stats.mean.size());
    blobs.push_back(stats.var.data());
    blob_sizes.push_back(stats.var.size());
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("Model::save: cannot open " + path);
  out.write(kMagic, sizeof(kMagic));
  const std::string hdr = header.dump();
  const std::uint64_t hlen = hdr.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    out.write(reinterpret_cast<const char*>(blobs[i]),
              static_cast<std::streamsize>(blob_sizes[i] * sizeof(double)));
  }
  if (!out) throw std::runtime_error("Model::save: write failed for " + path);
}

Model Model::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("Model::load: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("Model::load: bad magic in " + path);
  }
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hdr(hlen, '\0');
  in.read(hdr.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("Model::load: truncated header in " + path);
  nlohmann::json header = nlohmann::json::parse(hdr);
  if (header.at("version") != 1) {
    throw std::runtime_error("Model::load: unsupported checkpoint version");
  }

  Model m;
  const auto& cfg = header.at("config");
  m.cfg_.image_hw = cfg.at("image_hw");
  m.cfg_.num_classes = cfg.at("num_classes");
  m.cfg_.head = cfg.at("head") == "proto" ? FslHead::Proto : FslHead::GraphProp;
  m.cfg_.channels = cfg.at("channels").get<std::vector<int>>();
  m.cfg_.feat_dim = cfg.at("feat_dim");
  m.cfg_.mid_dim = cfg.at("mid_dim");
  m.cfg_.latent_dim = cfg.at("latent_dim");
  m.cfg_.bn_momentum = cfg.at("bn_momentum");

  auto read_blob = [&](std::size_t count) {
    std::vector<double> data(count);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw std::runtime_error("Model::load: truncated blob in " + path);
    return data;
  };

  for (const auto& entry : header.at("params")) {
    const Shape shape = entry.at("shape").get<Shape>();
    Tensor t = Tensor::from(shape, read_blob(static_cast<std::size_t>(numel(shape))), true);
    const std::string set = entry.at("set");
    ParamSet* target = set == "f"     ? &m.f_
                       : set == "h"   ? &m.h_
                       : set == "cls" ? &m.cls_
                       : set == "fsl" ? &m.fsl_
                                      : &m.dom_;
    target->add(entry.at("name"), std::move(t));
  }
  for (const auto& entry : header.at("bn")) {
    const std::size_t size = entry.at("size");
    BnStats stats;
    stats.mean = read_blob(size);
    stats.var = read_blob(size);
    m.bn_[entry.at("name")] = std::move(stats);
  }
  return m;
}

}  // namespace fdmix
