#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fdmix/config.hpp"
#include "fdmix/report.hpp"

using namespace fdmix;
namespace fs = std::filesystem;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
  const std::string path = (fs::temp_directory_path() / name).string();
  std::ofstream out(path);
  out << content;
  return path;
}

StudyReport sample_report() {
  StudyReport r;
  r.rows.push_back({"baselines", "meta-fdmixup", "P2", 5, "target_novel", "best", 79.46, 0.63,
                    1000, 7});
  r.rows.push_back({"baselines", "meta-fdmixup", "P2", 5, "target_novel", "last", 78.125, 0.52,
                    1000, 7});
  r.rows.push_back({"baselines", "s-base", "P2", 5, "target_novel", "best",
                    62.2500000000000071, 0.9199999999999999, 1000, 7});
  r.rows.push_back({"baselines", "s-base", "P2", 5, "target_novel", "last", 61.0, 1.0, 1000, 7});
  return r;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FDMIX_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("an empty config file yields the documented defaults") {
  const std::string path = write_temp("fdmix_empty.json", "");
  ExperimentConfig cfg = parse_config(path);
  CHECK(cfg.train.num_target == 5);
  CHECK(cfg.train.alpha == 1.0);
  CHECK(cfg.train.lr == 0.001);
  CHECK(cfg.train.n_eval_episodes == 1000);
  CHECK(cfg.train.n_way == 5);
  CHECK(cfg.train.k_shot == 5);
  CHECK(cfg.data.source_classes == 40);
  CHECK(cfg.data.target_classes == 22);
}

TEST_CASE("command-line overrides beat file values") {
  const std::string path = write_temp("fdmix_file.json", R"({"num_target": 5, "alpha": 0.5})");
  ExperimentConfig cfg = parse_config(path, {"num_target=20"});
  CHECK(cfg.train.num_target == 20);
  CHECK(cfg.train.alpha == 0.5);  // untouched file value survives
}

TEST_CASE("a misspelled key is rejected with the nearest valid key") {
  const std::string path = write_temp("fdmix_typo.json", R"({"numm_target": 5})");
  CHECK_THROWS_WITH_AS(parse_config(path), doctest::Contains("num_target"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_overrides({"lrr=0.1"}), doctest::Contains("lr"),
                       std::invalid_argument);
}

TEST_CASE("type mismatches are rejected") {
  const std::string path = write_temp("fdmix_type.json", R"({"alpha": "high"})");
  CHECK_THROWS_AS(parse_config(path), std::invalid_argument);
  CHECK_THROWS_AS(parse_overrides({"num_target=five"}), std::invalid_argument);
  CHECK_THROWS_AS(parse_overrides({"kl_reverse=maybe"}), std::invalid_argument);
}

TEST_CASE("enum-valued keys accept their documented spellings") {
  ExperimentConfig cfg = parse_overrides(
      {"method=m-base", "stage_strategy=P1+2", "lambda_strategy=v2", "fsl_loss_mode=aux_only",
       "head=graphprop"});
  CHECK(cfg.train.method == Method::MBase);
  CHECK(cfg.train.stage_strategy == StageStrategy::P1plus2);
  CHECK(cfg.train.lambda_strategy == LambdaStrategy::V2);
  CHECK(cfg.train.fsl_loss_mode == FslLossMode::AuxOnly);
  CHECK(cfg.train.head == FslHead::GraphProp);
  CHECK_THROWS_AS(parse_overrides({"method=q-base"}), std::invalid_argument);
}

TEST_CASE("the config echo parses back to an identical config") {
  ExperimentConfig cfg = parse_overrides({"num_target=15", "alpha=0.25", "method=a-base",
                                          "data.image_hw=48", "out_dir=/tmp/x"});
  const std::string echo = config_to_json(cfg);
  const std::string path = write_temp("fdmix_echo.json", echo);
  ExperimentConfig back = parse_config(path);
  CHECK(config_to_json(back) == echo);
  CHECK(back.train.num_target == 15);
  CHECK(back.data.image_hw == 48);
}

TEST_CASE("study kinds parse and unknown kinds are rejected") {
  CHECK(parse_study_kind("feasibility") == StudyKind::Feasibility);
  CHECK_THROWS_AS(parse_study_kind("feasability"), std::invalid_argument);
}

// ---- report rendering -------------------------------------------------------

TEST_CASE("markdown cells render as mean ± ci with two decimals") {
  StudyReport r;
  r.rows.push_back({"baselines", "meta-fdmixup", "P2", 5, "target_novel", "best", 79.46, 0.63,
                    1000, 7});
  const std::string md = emit_table(r, TableStyle::Markdown);
  CHECK(md.find("79.46 ± 0.63") != std::string::npos);
}

TEST_CASE("a 4-cell 2-column report renders a 4-row 2-column markdown body") {
  StudyReport r;
  for (const char* method : {"s-base", "a-base", "m-base", "meta-fdmixup"}) {
    r.rows.push_back({"baselines", method, "P2", 5, "source_eval", "best", 50.0, 1.0, 100, 1});
    r.rows.push_back({"baselines", method, "P2", 5, "target_novel", "best", 40.0, 1.0, 100, 1});
  }
  const std::string md = emit_table(r, TableStyle::Markdown);
  std::istringstream lines(md);
  std::string line;
  int body_rows = 0;
  std::getline(lines, line);  // header
  CHECK(line.find("source_eval/best") != std::string::npos);
  CHECK(line.find("target_novel/best") != std::string::npos);
  std::getline(lines, line);  // separator
  while (std::getline(lines, line)) {
    if (!line.empty()) ++body_rows;
  }
  CHECK(body_rows == 4);
}

TEST_CASE("csv and json round trips preserve every field bit-exactly") {
  const StudyReport original = sample_report();
  StudyReport via_csv = parse_report_csv(emit_table(original, TableStyle::Csv));
  StudyReport via_json = parse_report_json(emit_table(original, TableStyle::Json));
  // json -> csv -> json closes the loop
  StudyReport round = parse_report_json(
      emit_table(parse_report_csv(emit_table(via_json, TableStyle::Csv)), TableStyle::Json));

  for (const StudyReport* got : {&via_csv, &via_json, &round}) {
    REQUIRE(got->rows.size() == original.rows.size());
    for (std::size_t i = 0; i < original.rows.size(); ++i) {
      const StudyRow& a = original.rows[i];
      const StudyRow& b = got->rows[i];
      CHECK(a.study == b.study);
      CHECK(a.method == b.method);
      CHECK(a.strategy == b.strategy);
      CHECK(a.num_target == b.num_target);
      CHECK(a.shard == b.shard);
      CHECK(a.checkpoint == b.checkpoint);
      CHECK(a.mean_pct == b.mean_pct);  // bitwise
      CHECK(a.ci95_pct == b.ci95_pct);
      CHECK(a.n_episodes == b.n_episodes);
      CHECK(a.seed == b.seed);
    }
  }
}

TEST_CASE("the documented csv column order is enforced") {
  const std::string csv = emit_table(sample_report(), TableStyle::Csv);
  CHECK(csv.rfind("study,method,strategy,num_target,shard,checkpoint,mean_pct,ci95_pct,"
                  "n_episodes,seed\n",
                  0) == 0);
  CHECK_THROWS_AS(parse_report_csv("foo,bar\n1,2\n"), std::invalid_argument);
}

TEST_CASE("empty reports are rejected everywhere") {
  StudyReport empty;
  CHECK_THROWS_AS(emit_table(empty, TableStyle::Csv), std::invalid_argument);
  CHECK_THROWS_AS(emit_table(empty, TableStyle::Markdown), std::invalid_argument);
  CHECK_THROWS_AS(parse_report_json(R"({"rows": []})"), std::invalid_argument);
}

// ---- the installed binary ---------------------------------------------------

TEST_CASE("gradcheck subcommand exits cleanly") {
  CHECK(run_cli("gradcheck --seed 3") == 0);
}

TEST_CASE("usage errors exit with status 1") {
  CHECK(run_cli("train numm_target=3") == 1);
  CHECK(run_cli("study --kind made_up_study --out /tmp/fdmix_cli_bad") == 1);
}

TEST_CASE("gen-data writes a manifest and is reproducible") {
  const std::string out1 = (fs::temp_directory_path() / "fdmix_gen1").string();
  const std::string out2 = (fs::temp_directory_path() / "fdmix_gen2").string();
  fs::remove_all(out1);
  fs::remove_all(out2);
  const std::string flags =
      " data.source_classes=3 data.target_classes=3 data.images_per_class=2";
  REQUIRE(run_cli("gen-data --out " + out1 + flags) == 0);
  REQUIRE(run_cli("gen-data --out " + out2 + flags) == 0);

  auto slurp = [](const std::string& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  auto normalize = [](std::string s, const std::string& dir) {
    // the manifest echoes out_dir; blank it so only content hashes compare
    for (std::size_t p = s.find(dir); p != std::string::npos; p = s.find(dir, p)) {
      s.replace(p, dir.size(), "OUT");
    }
    return s;
  };
  const std::string m1 = normalize(slurp(out1 + "/manifest.json"), out1);
  const std::string m2 = normalize(slurp(out2 + "/manifest.json"), out2);
  CHECK(!m1.empty());
  CHECK(m1 == m2);  // identical config -> identical output hashes
  CHECK(m1.find("fnv64:") != std::string::npos);
  fs::remove_all(out1);
  fs::remove_all(out2);
}
