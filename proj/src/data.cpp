#include "fdmix/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace fdmix {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

float clamp01(double v) {
  return static_cast<float>(std::min(1.0, std::max(0.0, v)));
}

struct ShapeParam {
  int type;  // 0 disk, 1 square, 2 cross
  double cx, cy, radius;
  double color[3];
};

void render_shape(std::vector<float>& img, int hw, const ShapeParam& s, double dx,
                  double dy, double gain) {
  const double cx = s.cx + dx, cy = s.cy + dy;
  const int y0 = std::max(0, static_cast<int>(cy - s.radius - 1));
  const int y1 = std::min(hw - 1, static_cast<int>(cy + s.radius + 1));
  const int x0 = std::max(0, static_cast<int>(cx - s.radius - 1));
  const int x1 = std::min(hw - 1, static_cast<int>(cx + s.radius + 1));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double ddx = x - cx, ddy = y - cy;
      double alpha = 0.0;
      switch (s.type) {
        case 0:
          alpha = std::min(1.0, std::max(0.0, s.radius - std::sqrt(ddx * ddx + ddy * ddy) + 0.5));
          break;
        case 1:
          alpha = (std::abs(ddx) <= s.radius && std::abs(ddy) <= s.radius) ? 1.0 : 0.0;
          break;
        default:
          alpha = ((std::abs(ddx) <= 1.2 || std::abs(ddy) <= 1.2) &&
                   std::abs(ddx) <= s.radius && std::abs(ddy) <= s.radius)
                      ? 1.0
                      : 0.0;
      }
      if (alpha <= 0.0) continue;
      for (int c = 0; c < 3; ++c) {
        float& px = img[(static_cast<std::size_t>(c) * hw + y) * hw + x];
        const double v = s.color[c] * gain;
        px = clamp01(px * (1.0 - alpha) + v * alpha);
      }
    }
  }
}

// All shapes (class-defining and clutter) draw from this palette so that
// color histograms are uninformative about class identity.
constexpr double kPalette[3] = {0.25, 0.55, 0.85};

}  // namespace

std::vector<int> DomainDataset::class_ids() const {
  std::vector<int> ids;
  ids.reserve(classes.size());
  for (const auto& c : classes) ids.push_back(c.class_id);
  return ids;
}

DomainDataset generate_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  require(spec.num_classes >= 2, "generate_dataset: need at least 2 classes, got " +
                                     std::to_string(spec.num_classes));
  require(spec.images_per_class >= 2, "generate_dataset: need at least 2 images per class");
  require(spec.hw >= 16 && spec.hw % 16 == 0, "generate_dataset: hw must be a multiple of 16");

  DomainDataset ds;
  ds.domain = spec.style;
  ds.hw = spec.hw;
  const int hw = spec.hw;
  const std::size_t npix = static_cast<std::size_t>(3) * hw * hw;

  for (int ci = 0; ci < spec.num_classes; ++ci) {
    ClassRecord rec;
    rec.class_id = spec.class_id_base + ci;
    Rng class_rng(derive_seed(seed, static_cast<std::uint64_t>(rec.class_id) * 2 + 1));

    // class-defining constellation
    const int n_shapes = 3 + static_cast<int>(class_rng.uniform_int(2));
    std::vector<ShapeParam> shapes(n_shapes);
    for (auto& s : shapes) {
      s.type = static_cast<int>(class_rng.uniform_int(3));
      s.cx = class_rng.uniform(5.0, hw - 5.0);
      s.cy = class_rng.uniform(5.0, hw - 5.0);
      s.radius = class_rng.uniform(2.5, 5.0);
      // shared quantized palette: color statistics alone cannot identify a
      // class, the spatial arrangement has to be learned
      for (double& c : s.color) c = kPalette[class_rng.uniform_int(3)];
    }

    rec.images.reserve(spec.images_per_class);
    for (int ii = 0; ii < spec.images_per_class; ++ii) {
      Rng img_rng(derive_seed(seed, (static_cast<std::uint64_t>(rec.class_id) << 20) + ii));
      std::vector<float> img(npix);
      const double bg = 0.35 + img_rng.uniform(-0.05, 0.05);
      std::fill(img.begin(), img.end(), static_cast<float>(bg));

      // distractor clutter behind the class shapes
      const int n_distract = 4 + static_cast<int>(img_rng.uniform_int(4));
      for (int di = 0; di < n_distract; ++di) {
        ShapeParam d;
        d.type = static_cast<int>(img_rng.uniform_int(3));
        d.cx = img_rng.uniform(3.0, hw - 3.0);
        d.cy = img_rng.uniform(3.0, hw - 3.0);
        d.radius = img_rng.uniform(2.0, 4.0);
        for (double& c : d.color) c = kPalette[img_rng.uniform_int(3)];
        render_shape(img, hw, d, 0.0, 0.0, 1.0);
      }

      // class shapes with per-image geometric and photometric jitter
      const double dx_all = img_rng.uniform(-4.0, 4.0);
      const double dy_all = img_rng.uniform(-4.0, 4.0);
      const double r_scale = img_rng.uniform(0.85, 1.15);
      for (const auto& s : shapes) {
        ShapeParam j = s;
        j.radius *= r_scale;
        for (double& c : j.color) {
          c = std::min(1.0, std::max(0.05, c + img_rng.uniform(-0.12, 0.12)));
        }
        render_shape(img, hw, j, dx_all + img_rng.uniform(-1.5, 1.5),
                     dy_all + img_rng.uniform(-1.5, 1.5), 1.0 + img_rng.uniform(-0.15, 0.15));
      }
      for (float& p : img) {
        p = clamp01(p + 0.06 * img_rng.normal());
      }

      if (spec.style == Domain::Target) {
        // global appearance transform: spatial transpose, channel remap,
        // contrast shift, additive grating texture
        std::vector<float> remapped(npix);
        const std::size_t plane = static_cast<std::size_t>(hw) * hw;
        const int perm[3] = {2, 0, 1};
        const double phase = img_rng.uniform(0.0, 2.0 * M_PI);
        for (int c = 0; c < 3; ++c) {
          for (int y = 0; y < hw; ++y) {
            for (int x = 0; x < hw; ++x) {
              const std::size_t i = c * plane + static_cast<std::size_t>(y) * hw + x;
              const double src = img[perm[c] * plane + static_cast<std::size_t>(x) * hw + y];
              const double grating = 0.22 * std::abs(std::sin(2.0 * M_PI * (x + y) / 7.0 + phase));
              remapped[i] = clamp01(0.45 * src + 0.05 + grating);
            }
          }
        }
        img = std::move(remapped);
      }
      rec.images.push_back(std::move(img));
    }
    ds.classes.push_back(std::move(rec));
  }
  return ds;
}

SplitBundle split_dataset(const DomainDataset& ds, double frac_base, double frac_eval,
                          double frac_novel, std::uint64_t seed) {
  require(frac_base > 0 && frac_eval > 0 && frac_novel > 0,
          "split_dataset: all fractions must be positive");
  require(std::abs(frac_base + frac_eval + frac_novel - 1.0) <= 1e-9,
          "split_dataset: fractions must sum to 1");

  const int n = static_cast<int>(ds.classes.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x5714));
  rng.shuffle(order);

  const double fr[3] = {frac_base, frac_eval, frac_novel};
  int counts[3];
  double rem[3];
  int total = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = fr[i] * n;
    counts[i] = static_cast<int>(std::floor(exact));
    rem[i] = exact - counts[i];
    total += counts[i];
  }
  while (total < n) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (rem[i] > rem[best]) best = i;
    ++counts[best];
    rem[best] = -1.0;
    ++total;
  }
  for (int i = 0; i < 3; ++i) {
    require(counts[i] > 0, "split_dataset: a shard would receive 0 classes");
  }

  SplitBundle out;
  DomainDataset* shards[3] = {&out.base, &out.eval, &out.novel};
  int pos = 0;
  for (int i = 0; i < 3; ++i) {
    shards[i]->domain = ds.domain;
    shards[i]->hw = ds.hw;
    for (int j = 0; j < counts[i]; ++j) shards[i]->classes.push_back(ds.classes[order[pos++]]);
  }
  return out;
}

std::vector<ImageId> AuxSet::image_ids() const {
  std::vector<ImageId> ids;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    for (int idx : source_indices[c]) ids.emplace_back(classes[c].class_id, idx);
  }
  return ids;
}

AuxSet build_auxiliary(const DomainDataset& target_base, int num_target, std::uint64_t seed) {
  require(num_target >= 1, "build_auxiliary: num_target must be >= 1");
  AuxSet aux;
  aux.num_target = num_target;
  Rng rng(derive_seed(seed, 0xa0c));
  for (const auto& cls : target_base.classes) {
    if (static_cast<int>(cls.images.size()) < num_target) {
      throw std::invalid_argument("build_auxiliary: class " + std::to_string(cls.class_id) +
                                  " has only " + std::to_string(cls.images.size()) +
                                  " images, need " + std::to_string(num_target));
    }
    std::vector<int> idx(cls.images.size());
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    idx.resize(num_target);
    std::sort(idx.begin(), idx.end());
    ClassRecord rec;
    rec.class_id = cls.class_id;
    for (int i : idx) rec.images.push_back(cls.images[i]);
    aux.classes.push_back(std::move(rec));
    aux.source_indices.push_back(std::move(idx));
  }
  return aux;
}

EpisodePool make_pool(const DomainDataset& ds) {
  EpisodePool pool;
  pool.hw = ds.hw;
  for (const auto& cls : ds.classes) {
    pool.classes.push_back({cls.class_id, ds.domain, &cls.images, nullptr});
  }
  return pool;
}

EpisodePool make_pool(const AuxSet& aux) {
  EpisodePool pool;
  for (const auto& cls : aux.classes) {
    pool.classes.push_back({cls.class_id, Domain::Target, &cls.images, &aux});
  }
  return pool;
}

EpisodePool merge_pools(const EpisodePool& a, const EpisodePool& b) {
  EpisodePool pool;
  pool.hw = a.hw;
  pool.classes = a.classes;
  pool.classes.insert(pool.classes.end(), b.classes.begin(), b.classes.end());
  return pool;
}

Episode sample_episode(const EpisodePool& pool, int n_way, int k_shot, int m_query, Rng& rng) {
  require(n_way >= 2 && k_shot >= 1 && m_query >= 1, "sample_episode: invalid N/K/M");
  const int n_classes = static_cast<int>(pool.classes.size());
  if (n_classes < n_way) {
    throw std::invalid_argument("sample_episode: pool has " + std::to_string(n_classes) +
                                " classes, need " + std::to_string(n_way));
  }

  // choose N distinct classes
  std::vector<int> order(n_classes);
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < n_way; ++i) {
    std::swap(order[i], order[i + rng.uniform_int(n_classes - i)]);
  }

  const int hw = pool.hw;
  const std::size_t npix = static_cast<std::size_t>(3) * hw * hw;
  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.m_query = m_query;

  bool any_source = false, any_target = false;
  std::vector<double> support(static_cast<std::size_t>(n_way) * k_shot * npix);
  std::vector<double> query(static_cast<std::size_t>(n_way) * m_query * npix);

  for (int slot = 0; slot < n_way; ++slot) {
    const PoolClass& pc = pool.classes[order[slot]];
    ep.class_map.push_back(pc.class_id);
    (pc.domain == Domain::Source ? any_source : any_target) = true;
    const auto& images = *pc.images;
    const int avail = static_cast<int>(images.size());
    if (avail < k_shot) {
      throw std::invalid_argument("sample_episode: class " + std::to_string(pc.class_id) +
                                  " has " + std::to_string(avail) + " images, need K=" +
                                  std::to_string(k_shot));
    }
    std::vector<int> idx(avail);
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);

    std::vector<int> q_idx;
    const int rest = avail - k_shot;
    if (rest >= m_query) {
      q_idx.assign(idx.begin() + k_shot, idx.begin() + k_shot + m_query);
    } else if (rest >= 1) {
      // starved: draw with replacement from the leftover pool
      ep.starved_query = true;
      for (int m = 0; m < m_query; ++m) {
        q_idx.push_back(idx[k_shot + static_cast<int>(rng.uniform_int(rest))]);
      }
    } else {
      // fully starved (num_target == K): draw from the whole class,
      // queries may coincide with support images
      ep.starved_query = true;
      for (int m = 0; m < m_query; ++m) {
        q_idx.push_back(idx[static_cast<int>(rng.uniform_int(avail))]);
      }
    }

    for (int k = 0; k < k_shot; ++k) {
      const auto& img = images[idx[k]];
      double* dst = support.data() + (static_cast<std::size_t>(slot) * k_shot + k) * npix;
      for (std::size_t i = 0; i < npix; ++i) dst[i] = img[i];
      ep.support_labels.push_back(slot);
      ep.support_ids.emplace_back(pc.class_id, idx[k]);
    }
    for (int m = 0; m < m_query; ++m) {
      const auto& img = images[q_idx[m]];
      double* dst = query.data() + (static_cast<std::size_t>(slot) * m_query + m) * npix;
      for (std::size_t i = 0; i < npix; ++i) dst[i] = img[i];
      ep.query_labels.push_back(slot);
      ep.query_ids.emplace_back(pc.class_id, q_idx[m]);
    }
    if (pc.aux_owner) pc.aux_owner->access_count += k_shot + m_query;
  }

  ep.domain = (any_source && any_target) ? EpisodeDomain::Mixed
              : any_source              ? EpisodeDomain::Source
                                        : EpisodeDomain::Target;
  ep.support_images = Tensor::from({n_way * k_shot, 3, hw, hw}, std::move(support));
  ep.query_images = Tensor::from({n_way * m_query, 3, hw, hw}, std::move(query));
  return ep;
}

void export_dataset(const DomainDataset& ds, const std::string& dir, std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["domain"] = ds.domain == Domain::Source ? "source" : "target";
  manifest["hw"] = ds.hw;
  manifest["seed"] = seed;
  manifest["classes"] = nlohmann::json::array();
  for (const auto& cls : ds.classes) {
    manifest["classes"].push_back({{"class_id", cls.class_id},
                                   {"num_images", cls.images.size()},
                                   {"file", "class_" + std::to_string(cls.class_id) + ".f32"}});
    std::ofstream f(fs::path(dir) / ("class_" + std::to_string(cls.class_id) + ".f32"),
                    std::ios::binary);
    for (const auto& img : cls.images) {
      f.write(reinterpret_cast<const char*>(img.data()),
              static_cast<std::streamsize>(img.size() * sizeof(float)));
    }
  }
  std::ofstream m(fs::path(dir) / "manifest.json");
  m << manifest.dump(2) << "\n";
}

DomainDataset import_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream m(fs::path(dir) / "manifest.json");
  if (!m) throw std::runtime_error("import_dataset: no manifest.json in " + dir);
  nlohmann::json manifest = nlohmann::json::parse(m);

  DomainDataset ds;
  ds.domain = manifest.at("domain") == "source" ? Domain::Source : Domain::Target;
  ds.hw = manifest.at("hw");
  const std::size_t npix = static_cast<std::size_t>(3) * ds.hw * ds.hw;
  for (const auto& entry : manifest.at("classes")) {
    ClassRecord rec;
    rec.class_id = entry.at("class_id");
    const std::size_t count = entry.at("num_images");
    std::ifstream f(fs::path(dir) / entry.at("file").get<std::string>(), std::ios::binary);
    if (!f) throw std::runtime_error("import_dataset: missing class file for class " +
                                     std::to_string(rec.class_id));
    for (std::size_t i = 0; i < count; ++i) {
      std::vector<float> img(npix);
      f.read(reinterpret_cast<char*>(img.data()),
             static_cast<std::streamsize>(npix * sizeof(float)));
      if (!f) throw std::runtime_error("import_dataset: truncated class file for class " +
                                       std::to_string(rec.class_id));
      rec.images.push_back(std::move(img));
    }
    ds.classes.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace fdmix
