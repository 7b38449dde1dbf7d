#include "fdmix/train.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace fdmix {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

struct ImageIdHash {
  std::size_t operator()(const ImageId& id) const {
    return std::hash<std::int64_t>()((static_cast<std::int64_t>(id.first) << 32) | id.second);
  }
};

Tensor batch_tensor(const std::vector<const std::vector<float>*>& images, int hw) {
  const std::size_t npix = static_cast<std::size_t>(3) * hw * hw;
  std::vector<double> data(images.size() * npix);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = *images[i];
    for (std::size_t p = 0; p < npix; ++p) data[i * npix + p] = img[p];
  }
  return Tensor::from({static_cast<int>(images.size()), 3, hw, hw}, std::move(data));
}

// accuracy of one evaluated episode, queries classified from H1 features
double episode_accuracy(Model& model, const Episode& ep) {
  Tensor s_feats = model.disentangle(model.extract(ep.support_images)).h1;
  Tensor q_feats = model.disentangle(model.extract(ep.query_images)).h1;
  Tensor logits = model.fsl_logits(s_feats, ep.support_labels, ep.n_way, q_feats);
  const std::vector<int> pred = argmax_rows(logits);
  int correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == ep.query_labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

}  // namespace

std::string method_name(Method m) {
  switch (m) {
    case Method::SBase: return "s-base";
    case Method::ABase: return "a-base";
    case Method::MBase: return "m-base";
    default: return "meta-fdmixup";
  }
}

std::string study_name(StudyKind k) {
  switch (k) {
    case StudyKind::PilotStage: return "pilot_stage";
    case StudyKind::Feasibility: return "feasibility";
    case StudyKind::AblationLoss: return "ablation_loss";
    case StudyKind::AblationLambda: return "ablation_lambda";
    default: return "baselines";
  }
}

void TrainConfig::validate() const {
  require(n_way >= 2, "TrainConfig: n_way must be >= 2");
  require(k_shot >= 1 && m_query >= 1, "TrainConfig: k_shot and m_query must be >= 1");
  require(num_target >= 1, "TrainConfig: num_target must be >= 1");
  require(alpha > 0.0, "TrainConfig: alpha must be > 0");
  require(epochs_pretrain >= 1 && epochs_meta >= 1, "TrainConfig: epochs must be >= 1");
  require(iterations_per_epoch >= 1, "TrainConfig: iterations_per_epoch must be >= 1");
  require(pretrain_batch >= 2, "TrainConfig: pretrain_batch must be >= 2");
  require(val_episodes >= 1 && n_eval_episodes >= 1, "TrainConfig: episode counts must be >= 1");
  require(lr > 0.0, "TrainConfig: lr must be > 0");
}

Workbench build_workbench(const DataConfig& data, int num_target, std::uint64_t aux_seed) {
  Workbench bench;
  DomainDataset source_ds, target_ds;
  if (!data.import_source_dir.empty()) {
    source_ds = import_dataset(data.import_source_dir);
  } else {
    source_ds = generate_dataset({Domain::Source, data.source_classes, data.images_per_class,
                                  data.image_hw, /*class_id_base=*/1000},
                                 data.seed);
  }
  if (!data.import_target_dir.empty()) {
    target_ds = import_dataset(data.import_target_dir);
  } else {
    target_ds = generate_dataset({Domain::Target, data.target_classes, data.images_per_class,
                                  data.image_hw, /*class_id_base=*/2000},
                                 data.seed);
  }

  bench.source = split_dataset(source_ds, data.source_fracs[0], data.source_fracs[1],
                               data.source_fracs[2], derive_seed(data.seed, 11));
  bench.target = split_dataset(target_ds, data.target_fracs[0], data.target_fracs[1],
                               data.target_fracs[2], derive_seed(data.seed, 12));
  bench.aux = build_auxiliary(bench.target.base, num_target, aux_seed);

  // the auxiliary set must stay disjoint from the target testing classes
  const std::vector<int> novel_list = bench.target.novel.class_ids();
  std::unordered_set<int> novel_ids(novel_list.begin(), novel_list.end());
  for (const auto& cls : bench.aux.classes) {
    if (novel_ids.count(cls.class_id)) {
      throw std::logic_error("build_workbench: auxiliary class " + std::to_string(cls.class_id) +
                             " overlaps target novel");
    }
  }
  return bench;
}

EvalMetrics make_metrics(std::vector<double> accuracies) {
  require(!accuracies.empty(), "make_metrics: empty accuracy list");
  EvalMetrics m;
  const double n = static_cast<double>(accuracies.size());
  double mean = 0.0;
  for (double a : accuracies) mean += a;
  mean /= n;
  double var = 0.0;
  for (double a : accuracies) var += (a - mean) * (a - mean);
  var /= n;  // population variance
  m.mean_pct = 100.0 * mean;
  m.ci95_pct = 100.0 * 1.96 * std::sqrt(var) / std::sqrt(n);
  m.n_episodes = static_cast<int>(accuracies.size());
  m.episode_accuracies = std::move(accuracies);
  return m;
}

Model pretrain(const Workbench& bench, const TrainConfig& cfg) {
  cfg.validate();
  const int hw = bench.source.base.hw;

  // class space and flat image list
  std::vector<const std::vector<float>*> images;
  std::vector<int> labels;
  int next_label = 0;
  auto add_classes = [&](const std::vector<ClassRecord>& classes) {
    for (const auto& cls : classes) {
      for (const auto& img : cls.images) {
        images.push_back(&img);
        labels.push_back(next_label);
      }
      ++next_label;
    }
  };
  add_classes(bench.source.base.classes);
  if (cfg.stage_strategy == StageStrategy::P1plus2) {
    add_classes(bench.aux.classes);
    bench.aux.access_count += static_cast<std::uint64_t>(bench.aux.classes.size()) *
                              static_cast<std::uint64_t>(bench.aux.num_target) * cfg.epochs_pretrain;
  }
  require(!images.empty(), "pretrain: empty dataset");

  ModelConfig mc;
  mc.image_hw = hw;
  mc.num_classes = next_label;
  mc.head = cfg.head;
  Rng init_rng(derive_seed(cfg.seed, 3));
  Model model(mc, init_rng);
  model.set_mode(Mode::Train);

  Rng rng(derive_seed(cfg.seed, 2));
  AdamState opt;
  opt.lr = cfg.lr;
  std::vector<ParamSet*> trained = {&model.params_f(), &model.params_h(), &model.params_cls()};

  for (int epoch = 0; epoch < cfg.epochs_pretrain; ++epoch) {
    for (int it = 0; it < cfg.iterations_per_epoch; ++it) {
      std::vector<const std::vector<float>*> batch;
      std::vector<int> batch_labels;
      for (int b = 0; b < cfg.pretrain_batch; ++b) {
        const std::size_t pick = rng.uniform_int(images.size());
        batch.push_back(images[pick]);
        batch_labels.push_back(labels[pick]);
      }
      Tensor x = batch_tensor(batch, hw);
      Tensor noise_a = model.make_noise(cfg.pretrain_batch, rng);
      Tensor noise_b = model.make_noise(cfg.pretrain_batch, rng);
      for (ParamSet* p : trained) p->zero_grads();
      Tensor h1 = model.disentangle(model.extract(x), &noise_a, &noise_b).h1;
      Tensor loss = cross_entropy(model.classify_fc(h1), batch_labels);
      backward_into(loss, trained);
      adam_step(trained, opt);
    }
  }
  return model;
}

namespace {

// one episodic iteration with a plain FSL loss (s-base / a-base / m-base)
void plain_meta_iteration(Model& model, const EpisodePool& pool, const TrainConfig& cfg,
                          Rng& rng, AdamState& opt) {
  Episode ep = sample_episode(pool, cfg.n_way, cfg.k_shot, cfg.m_query, rng);
  Tensor ns_a = model.make_noise(ep.n_way * ep.k_shot, rng);
  Tensor ns_b = model.make_noise(ep.n_way * ep.k_shot, rng);
  Tensor nq_a = model.make_noise(ep.n_way * ep.m_query, rng);
  Tensor nq_b = model.make_noise(ep.n_way * ep.m_query, rng);
  auto params = model.all_params();
  for (ParamSet* p : params) p->zero_grads();
  Tensor s_h1 = model.disentangle(model.extract(ep.support_images), &ns_a, &ns_b).h1;
  Tensor q_h1 = model.disentangle(model.extract(ep.query_images), &nq_a, &nq_b).h1;
  Tensor logits = model.fsl_logits(s_h1, ep.support_labels, ep.n_way, q_h1);
  Tensor loss = cross_entropy(logits, ep.query_labels);
  backward_into(loss, params);
  adam_step(params, opt);
}

void fdmixup_iteration(Model& model, const EpisodePool& source_pool, const EpisodePool& aux_pool,
                       const TrainConfig& cfg, Rng& rng, AdamState& opt) {
  Episode e_sou = sample_episode(source_pool, cfg.n_way, cfg.k_shot, cfg.m_query, rng);
  Episode e_aux = sample_episode(aux_pool, cfg.n_way, cfg.k_shot, cfg.m_query, rng);
  const double lambda = sample_lambda(cfg.alpha, cfg.lambda_strategy, rng);
  MixedBatch batch = build_mixed_batch(e_sou, e_aux, lambda);

  const int nk = cfg.n_way * cfg.k_shot;
  const int nm = cfg.n_way * cfg.m_query;
  Tensor n_sou_a = model.make_noise(nk, rng), n_sou_b = model.make_noise(nk, rng);
  Tensor n_aux_a = model.make_noise(nk, rng), n_aux_b = model.make_noise(nk, rng);
  Tensor n_mix_a = model.make_noise(nm, rng), n_mix_b = model.make_noise(nm, rng);

  auto params = model.all_params();
  for (ParamSet* p : params) p->zero_grads();

  DisentangledFeatures d_sou =
      model.disentangle(model.extract(batch.s_sou.support_images), &n_sou_a, &n_sou_b);
  DisentangledFeatures d_aux =
      model.disentangle(model.extract(batch.s_aux.support_images), &n_aux_a, &n_aux_b);
  DisentangledFeatures d_mix = model.disentangle(model.extract(batch.q_mix), &n_mix_a, &n_mix_b);

  Tensor logits_s =
      model.fsl_logits(d_sou.h1, batch.s_sou.support_labels, cfg.n_way, d_mix.h1);
  Tensor logits_a =
      model.fsl_logits(d_aux.h1, batch.s_aux.support_labels, cfg.n_way, d_mix.h1);
  FslLossParts fsl =
      fsl_loss(logits_s, batch.y_src_labels, logits_a, batch.y_aux_labels, lambda);
  switch (cfg.fsl_loss_mode) {
    case FslLossMode::SourceOnly: fsl.combined = fsl.source; break;
    case FslLossMode::AuxOnly: fsl.combined = fsl.aux; break;
    case FslLossMode::Dual: break;
  }

  Tensor l_dom2 = dom2_loss(model.domain_logits(d_sou.h2), model.domain_logits(d_aux.h2),
                            model.domain_logits(d_mix.h2), lambda);
  Tensor l_dom1 = dom1_loss(model.domain_logits(d_sou.h1), model.domain_logits(d_aux.h1),
                            model.domain_logits(d_mix.h1), cfg.kl_reverse);
  LossBreakdown breakdown = total_loss(fsl, l_dom1, l_dom2, lambda);

  backward_into(breakdown.total_tensor, params);
  adam_step(params, opt);
}

}  // namespace

MetaResult meta_train(Model model, const Workbench& bench, const TrainConfig& cfg) {
  cfg.validate();
  const bool needs_aux = cfg.method != Method::SBase;
  if (needs_aux && bench.aux.classes.empty()) {
    throw std::invalid_argument("meta_train: method requires an auxiliary set");
  }

  EpisodePool source_pool = make_pool(bench.source.base);
  EpisodePool aux_pool = make_pool(bench.aux);
  aux_pool.hw = bench.source.base.hw;
  EpisodePool merged_pool = merge_pools(source_pool, aux_pool);

  model.set_mode(Mode::Train);
  Rng rng(derive_seed(cfg.seed, 1));
  AdamState opt;
  opt.lr = cfg.lr;

  MetaResult result;
  result.best_val_pct = -1.0;
  for (int epoch = 0; epoch < cfg.epochs_meta; ++epoch) {
    for (int it = 0; it < cfg.iterations_per_epoch; ++it) {
      switch (cfg.method) {
        case Method::SBase:
          plain_meta_iteration(model, source_pool, cfg, rng, opt);
          break;
        case Method::ABase:
          plain_meta_iteration(model, aux_pool, cfg, rng, opt);
          break;
        case Method::MBase:
          plain_meta_iteration(model, merged_pool, cfg, rng, opt);
          break;
        case Method::MetaFDMixup:
          fdmixup_iteration(model, source_pool, aux_pool, cfg, rng, opt);
          break;
      }
    }
    EvalMetrics val = evaluate(model, bench.source.eval, cfg.n_way, cfg.k_shot, cfg.m_query,
                               cfg.val_episodes, derive_seed(cfg.seed, 0x7A00 + epoch));
    result.epoch_val_pct.push_back(val.mean_pct);
    if (val.mean_pct > result.best_val_pct) {
      result.best_val_pct = val.mean_pct;
      result.best = model.clone();
    }
    model.set_mode(Mode::Train);
  }
  result.last_val_pct = result.epoch_val_pct.back();
  result.last = std::move(model);
  return result;
}

EvalMetrics evaluate(Model& model, const DomainDataset& shard, int n_way, int k_shot,
                     int m_query, int n_episodes, std::uint64_t seed, const AuxSet* audit) {
  require(n_episodes >= 1, "evaluate: n_episodes must be >= 1");
  if (static_cast<int>(shard.classes.size()) < n_way) {
    throw std::invalid_argument("evaluate: shard has " + std::to_string(shard.classes.size()) +
                                " classes, need " + std::to_string(n_way));
  }
  const Mode prior_mode = model.mode();
  model.set_mode(Mode::Eval);

  std::unordered_set<ImageId, ImageIdHash> aux_ids;
  if (audit) {
    const auto ids = audit->image_ids();
    aux_ids.insert(ids.begin(), ids.end());
  }

  EpisodePool pool = make_pool(shard);
  std::vector<double> accuracies(static_cast<std::size_t>(n_episodes));
  bool audit_ok = true;
  for (int i = 0; i < n_episodes; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    Episode ep = sample_episode(pool, n_way, k_shot, m_query, rng);
    if (audit) {
      for (const auto& ids : {ep.support_ids, ep.query_ids}) {
        for (const auto& id : ids) {
          if (aux_ids.count(id)) audit_ok = false;
        }
      }
    }
    accuracies[static_cast<std::size_t>(i)] = episode_accuracy(model, ep);
  }
  model.set_mode(prior_mode);
  EvalMetrics m = make_metrics(std::move(accuracies));
  m.audit_ok = audit_ok;
  return m;
}

RunResult run_training(const TrainConfig& cfg, const DataConfig& data) {
  cfg.validate();
  RunResult out;
  out.cfg = cfg;
  out.bench = build_workbench(data, cfg.num_target, derive_seed(cfg.seed, 0xA5));
  Model pretrained = pretrain(out.bench, cfg);
  out.meta = meta_train(std::move(pretrained), out.bench, cfg);
  return out;
}

namespace {

std::string strategy_label(StudyKind kind, const TrainConfig& cfg) {
  switch (kind) {
    case StudyKind::AblationLoss:
      return cfg.fsl_loss_mode == FslLossMode::SourceOnly ? "source_only"
             : cfg.fsl_loss_mode == FslLossMode::AuxOnly  ? "aux_only"
                                                          : "dual";
    case StudyKind::AblationLambda:
      return cfg.lambda_strategy == LambdaStrategy::V1   ? "v1"
             : cfg.lambda_strategy == LambdaStrategy::V2 ? "v2"
                                                         : "plain";
    default:
      return cfg.stage_strategy == StageStrategy::P1plus2 ? "P1+2" : "P2";
  }
}

void append_cell(StudyReport& report, StudyKind kind, const TrainConfig& cfg,
                 const DataConfig& data, const StudyLogger& log) {
  if (log) {
    log("running " + study_name(kind) + " / " + method_name(cfg.method) + " / " +
        strategy_label(kind, cfg) + " / num_target=" + std::to_string(cfg.num_target) +
        " / seed=" + std::to_string(cfg.seed));
  }
  RunResult run = run_training(cfg, data);
  struct ShardRef {
    const char* name;
    const DomainDataset* shard;
    const AuxSet* audit;
  };
  const ShardRef shards[2] = {{"source_eval", &run.bench.source.eval, nullptr},
                              {"target_novel", &run.bench.target.novel, &run.bench.aux}};
  Model* checkpoints[2] = {&run.meta.best, &run.meta.last};
  const char* ckpt_names[2] = {"best", "last"};
  for (int s = 0; s < 2; ++s) {
    for (int c = 0; c < 2; ++c) {
      EvalMetrics m = evaluate(*checkpoints[c], *shards[s].shard, cfg.n_way, cfg.k_shot,
                               cfg.m_query, cfg.n_eval_episodes,
                               derive_seed(cfg.seed, 0xEB00 + s * 2 + c), shards[s].audit);
      if (!m.audit_ok) {
        throw std::logic_error("run_study: auxiliary image leaked into an evaluated episode");
      }
      report.rows.push_back({study_name(kind), method_name(cfg.method),
                             strategy_label(kind, cfg), cfg.num_target, shards[s].name,
                             ckpt_names[c], m.mean_pct, m.ci95_pct, m.n_episodes, cfg.seed});
    }
  }
}

}  // namespace

StudyReport run_study(StudyKind kind, const TrainConfig& base_cfg, const DataConfig& data,
                      int seed_replicates, const StudyLogger& log) {
  base_cfg.validate();
  require(seed_replicates >= 1, "run_study: seed_replicates must be >= 1");
  StudyReport report;
  for (int rep = 0; rep < seed_replicates; ++rep) {
    TrainConfig cfg = base_cfg;
    cfg.seed = base_cfg.seed + static_cast<std::uint64_t>(rep);
    switch (kind) {
      case StudyKind::PilotStage:
        for (Method m : {Method::ABase, Method::MBase}) {
          for (StageStrategy s : {StageStrategy::P1plus2, StageStrategy::P2}) {
            TrainConfig cell = cfg;
            cell.method = m;
            cell.stage_strategy = s;
            append_cell(report, kind, cell, data, log);
          }
        }
        break;
      case StudyKind::Feasibility:
        for (int nt : {5, 10, 15, 20}) {
          TrainConfig cell = cfg;
          cell.method = Method::MetaFDMixup;
          cell.num_target = nt;
          append_cell(report, kind, cell, data, log);
        }
        break;
      case StudyKind::AblationLoss:
        for (FslLossMode mode : {FslLossMode::SourceOnly, FslLossMode::AuxOnly, FslLossMode::Dual}) {
          TrainConfig cell = cfg;
          cell.method = Method::MetaFDMixup;
          cell.fsl_loss_mode = mode;
          append_cell(report, kind, cell, data, log);
        }
        break;
      case StudyKind::AblationLambda:
        for (LambdaStrategy s : {LambdaStrategy::V1, LambdaStrategy::V2, LambdaStrategy::Plain}) {
          TrainConfig cell = cfg;
          cell.method = Method::MetaFDMixup;
          cell.lambda_strategy = s;
          append_cell(report, kind, cell, data, log);
        }
        break;
      case StudyKind::Baselines:
        for (Method m : {Method::SBase, Method::ABase, Method::MBase, Method::MetaFDMixup}) {
          TrainConfig cell = cfg;
          cell.method = m;
          append_cell(report, kind, cell, data, log);
        }
        break;
    }
  }
  return report;
}

}  // namespace fdmix
