#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fdmix/data.hpp"
#include "fdmix/losses.hpp"
#include "fdmix/mixup.hpp"
#include "fdmix/model.hpp"

namespace fdmix {

enum class Method { SBase, ABase, MBase, MetaFDMixup };
enum class StageStrategy { P2, P1plus2 };
enum class FslLossMode { Dual, SourceOnly, AuxOnly };
enum class StudyKind { PilotStage, Feasibility, AblationLoss, AblationLambda, Baselines };

struct TrainConfig {
  Method method = Method::MetaFDMixup;
  StageStrategy stage_strategy = StageStrategy::P2;
  int n_way = 5;
  int k_shot = 5;
  int m_query = 16;
  int num_target = 5;
  double alpha = 1.0;
  LambdaStrategy lambda_strategy = LambdaStrategy::Plain;
  FslLossMode fsl_loss_mode = FslLossMode::Dual;
  FslHead head = FslHead::Proto;
  // desk-scale defaults; the paper-scale 400-epoch schedule stays available
  // through the config surface
  int epochs_pretrain = 4;
  int epochs_meta = 15;
  int iterations_per_epoch = 30;
  int pretrain_batch = 32;
  int val_episodes = 60;
  double lr = 0.001;
  std::uint64_t seed = 0;
  bool kl_reverse = false;
  int n_eval_episodes = 1000;

  void validate() const;
};

struct DataConfig {
  int source_classes = 40;
  int target_classes = 22;
  int images_per_class = 30;
  int image_hw = 32;
  std::uint64_t seed = 1234;
  double source_fracs[3] = {0.64, 0.16, 0.20};
  double target_fracs[3] = {0.55, 0.15, 0.30};
  // optional import of previously exported datasets
  std::string import_source_dir;
  std::string import_target_dir;
};

// Generated (or imported) splits plus the auxiliary set for one experiment.
struct Workbench {
  SplitBundle source;
  SplitBundle target;
  AuxSet aux;
};

Workbench build_workbench(const DataConfig& data, int num_target, std::uint64_t aux_seed);

struct EvalMetrics {
  std::vector<double> episode_accuracies;  // fractions in [0, 1]
  double mean_pct = 0.0;
  double ci95_pct = 0.0;  // 100 * 1.96 * std / sqrt(n), population std
  int n_episodes = 0;
  bool audit_ok = true;  // auxiliary-isolation audit, when requested
};

EvalMetrics make_metrics(std::vector<double> accuracies);

// Stage 1: supervised classification on H1 through extract -> disentangle ->
// FC classifier. P1+2 folds the auxiliary classes into the class space.
Model pretrain(const Workbench& bench, const TrainConfig& cfg);

struct MetaResult {
  Model best;  // best source-eval accuracy seen across epochs
  Model last;  // final epoch
  double best_val_pct = 0.0;
  double last_val_pct = 0.0;
  std::vector<double> epoch_val_pct;
};

// Stage 2: episodic meta-training per the configured method.
MetaResult meta_train(Model model, const Workbench& bench, const TrainConfig& cfg);

// 1000-episode protocol; forces Eval mode for the duration. When audit is
// given, every sampled image is checked against the auxiliary set.
EvalMetrics evaluate(Model& model, const DomainDataset& shard, int n_way, int k_shot,
                     int m_query, int n_episodes, std::uint64_t seed,
                     const AuxSet* audit = nullptr);

struct RunResult {
  MetaResult meta;
  Workbench bench;
  TrainConfig cfg;
};

RunResult run_training(const TrainConfig& cfg, const DataConfig& data);

struct StudyRow {
  std::string study;
  std::string method;
  std::string strategy;
  int num_target = 0;
  std::string shard;       // source_eval | target_novel
  std::string checkpoint;  // best | last
  double mean_pct = 0.0;
  double ci95_pct = 0.0;
  int n_episodes = 0;
  std::uint64_t seed = 0;
};

struct StudyReport {
  std::vector<StudyRow> rows;
};

using StudyLogger = std::function<void(const std::string&)>;

StudyReport run_study(StudyKind kind, const TrainConfig& base_cfg, const DataConfig& data,
                      int seed_replicates = 1, const StudyLogger& log = nullptr);

std::string method_name(Method m);
std::string study_name(StudyKind k);

}  // namespace fdmix
