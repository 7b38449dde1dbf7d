#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fdmix/rng.hpp"
#include "fdmix/tensor.hpp"

namespace fdmix {

enum class Domain { Target = 0, Source = 1 };

// Identity of a physical image: (global class id, index within its class).
using ImageId = std::pair<int, int>;

struct ClassRecord {
  int class_id = -1;  // globally unique across both domains
  std::vector<std::vector<float>> images;  // each 3*hw*hw, pixels in [0,1]
};

struct DomainDataset {
  Domain domain = Domain::Source;
  int hw = 32;
  std::vector<ClassRecord> classes;

  std::vector<int> class_ids() const;
};

struct DatasetSpec {
  Domain style = Domain::Source;
  int num_classes = 40;
  int images_per_class = 30;
  int hw = 32;
  int class_id_base = 0;  // class ids are class_id_base + i
};

// Procedural shape-constellation images; the Target style applies a global
// appearance transform (channel remap + contrast shift + background grating)
// on top of the same generative structure. Pure function of (spec, seed).
DomainDataset generate_dataset(const DatasetSpec& spec, std::uint64_t seed);

struct SplitBundle {
  DomainDataset base, eval, novel;
};

SplitBundle split_dataset(const DomainDataset& ds, double frac_base, double frac_eval,
                          double frac_novel, std::uint64_t seed);

struct AuxSet {
  int num_target = 5;
  std::vector<ClassRecord> classes;             // exactly num_target images each
  std::vector<std::vector<int>> source_indices; // per class, picked indices in target base
  mutable std::uint64_t access_count = 0;       // images handed out to episodes

  std::vector<ImageId> image_ids() const;
};

AuxSet build_auxiliary(const DomainDataset& target_base, int num_target, std::uint64_t seed);

enum class EpisodeDomain { Target = 0, Source = 1, Mixed = 2 };

struct Episode {
  int n_way = 0, k_shot = 0, m_query = 0;
  Tensor support_images;  // NK x 3 x hw x hw
  std::vector<int> support_labels;
  Tensor query_images;  // NM x 3 x hw x hw
  std::vector<int> query_labels;
  std::vector<int> class_map;  // episode label -> global class id
  EpisodeDomain domain = EpisodeDomain::Source;
  // set when a per-class pool was too small and query images were drawn
  // with replacement (possibly overlapping the support set)
  bool starved_query = false;
  std::vector<ImageId> support_ids, query_ids;
};

// Uniform sampling view over one or more datasets; aux classes carry their
// access counter along.
struct PoolClass {
  int class_id = -1;
  Domain domain = Domain::Source;
  const std::vector<std::vector<float>>* images = nullptr;
  const AuxSet* aux_owner = nullptr;
};

struct EpisodePool {
  int hw = 32;
  std::vector<PoolClass> classes;
};

EpisodePool make_pool(const DomainDataset& ds);
EpisodePool make_pool(const AuxSet& aux);
EpisodePool merge_pools(const EpisodePool& a, const EpisodePool& b);

Episode sample_episode(const EpisodePool& pool, int n_way, int k_shot, int m_query, Rng& rng);

// Reproducibility audit dump: raw little-endian float32 arrays + JSON manifest.
void export_dataset(const DomainDataset& ds, const std::string& dir, std::uint64_t seed);
DomainDataset import_dataset(const std::string& dir);

}  // namespace fdmix
