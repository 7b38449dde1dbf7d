#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "CLI11.hpp"
#include "json.hpp"

#include "fdmix/config.hpp"
#include "fdmix/gradcheck.hpp"
#include "fdmix/report.hpp"
#include "fdmix/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fnv1a_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot hash " + path.string());
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 14];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  std::ostringstream out;
  out << "fnv64:" << std::hex << h;
  return out.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// manifest = config echo + content hash of every artifact; a run is
// reproducible from the echo alone
void write_manifest(const fs::path& out_dir, const std::string& command,
                    const fdmix::ExperimentConfig& cfg, const std::vector<fs::path>& outputs) {
  json manifest;
  manifest["command"] = command;
  manifest["config"] = json::parse(fdmix::config_to_json(cfg));
  json hashes = json::object();
  for (const auto& p : outputs) hashes[p.filename().string()] = fnv1a_file(p);
  manifest["outputs"] = hashes;
  write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
}

std::vector<fdmix::TableStyle> styles_from(const std::string& formats) {
  std::vector<fdmix::TableStyle> styles;
  std::stringstream ss(formats);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "csv") styles.push_back(fdmix::TableStyle::Csv);
    else if (item == "json") styles.push_back(fdmix::TableStyle::Json);
    else if (item == "markdown") styles.push_back(fdmix::TableStyle::Markdown);
    else if (!item.empty()) throw std::invalid_argument("unknown report format '" + item + "'");
  }
  if (styles.empty()) throw std::invalid_argument("report_formats selects no format");
  return styles;
}

const char* style_ext(fdmix::TableStyle s) {
  switch (s) {
    case fdmix::TableStyle::Csv: return "csv";
    case fdmix::TableStyle::Json: return "json";
    default: return "md";
  }
}

std::vector<fs::path> write_report(const fdmix::StudyReport& report, const fs::path& out_dir,
                                   const std::string& stem, const std::string& formats) {
  std::vector<fs::path> written;
  for (fdmix::TableStyle style : styles_from(formats)) {
    fs::path p = out_dir / (stem + "." + style_ext(style));
    write_text(p, fdmix::emit_table(report, style));
    written.push_back(p);
  }
  return written;
}

// four-cell evaluation (both shards x both checkpoints) shared by train/eval
fdmix::StudyReport final_report(fdmix::RunResult& run, const std::string& study) {
  fdmix::StudyReport report;
  const fdmix::TrainConfig& cfg = run.cfg;
  struct Cell {
    const char* shard_name;
    const fdmix::DomainDataset* shard;
    const fdmix::AuxSet* audit;
  };
  const Cell cells[2] = {{"source_eval", &run.bench.source.eval, nullptr},
                         {"target_novel", &run.bench.target.novel, &run.bench.aux}};
  fdmix::Model* ckpts[2] = {&run.meta.best, &run.meta.last};
  const char* ckpt_names[2] = {"best", "last"};
  for (int s = 0; s < 2; ++s) {
    for (int c = 0; c < 2; ++c) {
      fdmix::EvalMetrics m = fdmix::evaluate(
          *ckpts[c], *cells[s].shard, cfg.n_way, cfg.k_shot, cfg.m_query, cfg.n_eval_episodes,
          fdmix::derive_seed(cfg.seed, 0xEB00 + s * 2 + c), cells[s].audit);
      if (!m.audit_ok) throw std::runtime_error("auxiliary image leaked into evaluation");
      report.rows.push_back({study, fdmix::method_name(cfg.method),
                             cfg.stage_strategy == fdmix::StageStrategy::P2 ? "P2" : "P1+2",
                             cfg.num_target, cells[s].shard_name, ckpt_names[c], m.mean_pct,
                             m.ci95_pct, m.n_episodes, cfg.seed});
    }
  }
  return report;
}

int cmd_train(const fdmix::ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  fdmix::RunResult run = fdmix::run_training(cfg.train, cfg.data);
  const fs::path out(cfg.out_dir);
  run.meta.best.save((out / "checkpoint_best.bin").string());
  run.meta.last.save((out / "checkpoint_last.bin").string());
  fdmix::StudyReport report = final_report(run, "train");
  std::vector<fs::path> outputs = write_report(report, out, "metrics", cfg.report_formats);
  outputs.push_back(out / "checkpoint_best.bin");
  outputs.push_back(out / "checkpoint_last.bin");
  write_manifest(out, "train", cfg, outputs);
  std::cout << fdmix::emit_table(report, fdmix::TableStyle::Markdown);
  return 0;
}

int cmd_eval(const fdmix::ExperimentConfig& cfg, const std::string& checkpoint,
             const std::string& shard_name) {
  fs::create_directories(cfg.out_dir);
  fdmix::Model model = fdmix::Model::load(checkpoint);
  fdmix::Workbench bench = fdmix::build_workbench(cfg.data, cfg.train.num_target,
                                                  fdmix::derive_seed(cfg.train.seed, 0xA5));
  const std::map<std::string, const fdmix::DomainDataset*> shards = {
      {"source_base", &bench.source.base},   {"source_eval", &bench.source.eval},
      {"source_novel", &bench.source.novel}, {"target_eval", &bench.target.eval},
      {"target_novel", &bench.target.novel}};
  auto it = shards.find(shard_name);
  if (it == shards.end()) throw std::invalid_argument("unknown shard '" + shard_name + "'");
  const fdmix::AuxSet* audit = shard_name == "target_novel" ? &bench.aux : nullptr;
  const fdmix::TrainConfig& t = cfg.train;
  fdmix::EvalMetrics m = fdmix::evaluate(model, *it->second, t.n_way, t.k_shot, t.m_query,
                                         t.n_eval_episodes, fdmix::derive_seed(t.seed, 0xE0),
                                         audit);
  if (!m.audit_ok) throw std::runtime_error("auxiliary image leaked into evaluation");
  char line[128];
  std::snprintf(line, sizeof(line), "%s: %.2f ± %.2f (%d episodes)\n", shard_name.c_str(),
                m.mean_pct, m.ci95_pct, m.n_episodes);
  std::cout << line;
  fs::path metrics = fs::path(cfg.out_dir) / "eval.json";
  write_text(metrics, json{{"shard", shard_name},
                           {"mean_pct", m.mean_pct},
                           {"ci95_pct", m.ci95_pct},
                           {"n_episodes", m.n_episodes}}
                          .dump(2) +
                          "\n");
  write_manifest(cfg.out_dir, "eval", cfg, {metrics});
  return 0;
}

int cmd_study(const fdmix::ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  const fdmix::StudyKind kind = fdmix::parse_study_kind(cfg.study_kind);
  fdmix::StudyReport report =
      fdmix::run_study(kind, cfg.train, cfg.data, cfg.seed_replicates,
                       [](const std::string& msg) { std::cerr << msg << "\n"; });
  std::vector<fs::path> outputs =
      write_report(report, cfg.out_dir, "study_" + cfg.study_kind, cfg.report_formats);
  write_manifest(cfg.out_dir, "study", cfg, outputs);
  std::cout << fdmix::emit_table(report, fdmix::TableStyle::Markdown);
  return 0;
}

int cmd_gradcheck(const fdmix::ExperimentConfig& cfg) {
  const double err = fdmix::model_training_gradcheck(cfg.train.seed, 1e-5, 4);
  std::cout << "max relative error: " << err << "\n";
  if (err >= 1e-4) {
    std::cerr << "gradcheck failed: " << err << " >= 1e-4\n";
    return 1;
  }
  return 0;
}

int cmd_gen_data(const fdmix::ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  const fdmix::DataConfig& d = cfg.data;
  fdmix::DomainDataset source = fdmix::generate_dataset(
      {fdmix::Domain::Source, d.source_classes, d.images_per_class, d.image_hw, 1000}, d.seed);
  fdmix::DomainDataset target = fdmix::generate_dataset(
      {fdmix::Domain::Target, d.target_classes, d.images_per_class, d.image_hw, 2000}, d.seed);
  const fs::path out(cfg.out_dir);
  fdmix::export_dataset(source, (out / "source").string(), d.seed);
  fdmix::export_dataset(target, (out / "target").string(), d.seed);
  std::vector<fs::path> outputs = {out / "source" / "manifest.json",
                                   out / "target" / "manifest.json"};
  write_manifest(out, "gen-data", cfg, outputs);
  std::cout << "exported " << source.classes.size() << " source and " << target.classes.size()
            << " target classes to " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* threads = std::getenv("FDMIX_THREADS")) {
    Eigen::setNbThreads(std::max(1, std::atoi(threads)));
  } else {
    Eigen::setNbThreads(1);
  }

  CLI::App app{"Cross-domain few-shot learning workbench"};
  app.require_subcommand(1);

  std::string config_path, out_dir, kind, checkpoint, shard = "target_novel";
  std::vector<std::string> overrides;
  std::int64_t seed = -1;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file (flat keys)");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "training seed override");
    sub->add_option("overrides", overrides, "key=value config overrides");
  };
  CLI::App* train = app.add_subcommand("train", "pretrain + meta-train one model");
  CLI::App* eval = app.add_subcommand("eval", "evaluate a saved checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--shard", shard, "dataset shard to evaluate");
  CLI::App* study = app.add_subcommand("study", "run a multi-cell study");
  study->add_option("--kind", kind,
                    "pilot_stage|feasibility|ablation_loss|ablation_lambda|baselines");
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  CLI::App* gen_data = app.add_subcommand("gen-data", "generate and export the synthetic datasets");
  for (CLI::App* sub : {train, eval, study, gradcheck, gen_data}) add_common(sub);

  CLI11_PARSE(app, argc, argv);

  try {
    fdmix::ExperimentConfig cfg = config_path.empty()
                                      ? fdmix::parse_overrides(overrides)
                                      : fdmix::parse_config(config_path, overrides);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(seed);
    if (!kind.empty()) cfg.study_kind = kind;
    cfg.train.validate();

    if (app.got_subcommand(train)) return cmd_train(cfg);
    if (app.got_subcommand(eval)) return cmd_eval(cfg, checkpoint, shard);
    if (app.got_subcommand(study)) return cmd_study(cfg);
    if (app.got_subcommand(gradcheck)) return cmd_gradcheck(cfg);
    return cmd_gen_data(cfg);
  } catch (const std::invalid_argument& e) {
    // config / flag problems are usage errors
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
