#include "fdmix/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace fdmix {

namespace {

using nlohmann::json;

enum class FieldType { Int, Uint, Double, Bool, String };

struct Field {
  std::string key;
  FieldType type;
  std::function<void(ExperimentConfig&, const json&)> set;
  std::function<json(const ExperimentConfig&)> get;
};

[[noreturn]] void bad_enum(const std::string& key, const std::string& value,
                           const std::string& allowed) {
  throw std::invalid_argument("config: bad value '" + value + "' for " + key + " (expected " +
                              allowed + ")");
}

Method to_method(const std::string& s) {
  if (s == "s-base") return Method::SBase;
  if (s == "a-base") return Method::ABase;
  if (s == "m-base") return Method::MBase;
  if (s == "meta-fdmixup") return Method::MetaFDMixup;
  bad_enum("method", s, "s-base|a-base|m-base|meta-fdmixup");
}

StageStrategy to_stage(const std::string& s) {
  if (s == "P2") return StageStrategy::P2;
  if (s == "P1+2") return StageStrategy::P1plus2;
  bad_enum("stage_strategy", s, "P2|P1+2");
}

LambdaStrategy to_lambda(const std::string& s) {
  if (s == "plain") return LambdaStrategy::Plain;
  if (s == "v1") return LambdaStrategy::V1;
  if (s == "v2") return LambdaStrategy::V2;
  bad_enum("lambda_strategy", s, "plain|v1|v2");
}

FslLossMode to_fsl_mode(const std::string& s) {
  if (s == "dual") return FslLossMode::Dual;
  if (s == "source_only") return FslLossMode::SourceOnly;
  if (s == "aux_only") return FslLossMode::AuxOnly;
  bad_enum("fsl_loss_mode", s, "dual|source_only|aux_only");
}

FslHead to_head(const std::string& s) {
  if (s == "proto") return FslHead::Proto;
  if (s == "graphprop") return FslHead::GraphProp;
  bad_enum("head", s, "proto|graphprop");
}

std::string from_method(Method m) { return method_name(m); }
std::string from_stage(StageStrategy s) { return s == StageStrategy::P2 ? "P2" : "P1+2"; }
std::string from_lambda(LambdaStrategy s) {
  return s == LambdaStrategy::Plain ? "plain" : s == LambdaStrategy::V1 ? "v1" : "v2";
}
std::string from_fsl_mode(FslLossMode m) {
  return m == FslLossMode::Dual ? "dual" : m == FslLossMode::SourceOnly ? "source_only" : "aux_only";
}
std::string from_head(FslHead h) { return h == FslHead::Proto ? "proto" : "graphprop"; }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> t;
    auto add = [&t](std::string key, FieldType type, auto setter, auto getter) {
      t.push_back({std::move(key), type, setter, getter});
    };
#define INT_FIELD(key, expr)                                                    \
  add(key, FieldType::Int, [](ExperimentConfig& c, const json& v) { c.expr = v.get<int>(); }, \
      [](const ExperimentConfig& c) { return json(c.expr); })
#define UINT_FIELD(key, expr)                                                      \
  add(key, FieldType::Uint,                                                        \
      [](ExperimentConfig& c, const json& v) { c.expr = v.get<std::uint64_t>(); }, \
      [](const ExperimentConfig& c) { return json(c.expr); })
#define DBL_FIELD(key, expr)                                                       \
  add(key, FieldType::Double,                                                      \
      [](ExperimentConfig& c, const json& v) { c.expr = v.get<double>(); },        \
      [](const ExperimentConfig& c) { return json(c.expr); })
#define BOOL_FIELD(key, expr)                                                      \
  add(key, FieldType::Bool,                                                        \
      [](ExperimentConfig& c, const json& v) { c.expr = v.get<bool>(); },          \
      [](const ExperimentConfig& c) { return json(c.expr); })
#define STR_FIELD(key, expr)                                                       \
  add(key, FieldType::String,                                                      \
      [](ExperimentConfig& c, const json& v) { c.expr = v.get<std::string>(); },   \
      [](const ExperimentConfig& c) { return json(c.expr); })
#define ENUM_FIELD(key, expr, to_fn, from_fn)                                      \
  add(key, FieldType::String,                                                      \
      [](ExperimentConfig& c, const json& v) { c.expr = to_fn(v.get<std::string>()); }, \
      [](const ExperimentConfig& c) { return json(from_fn(c.expr)); })

    ENUM_FIELD("method", train.method, to_method, from_method);
    ENUM_FIELD("stage_strategy", train.stage_strategy, to_stage, from_stage);
    INT_FIELD("n_way", train.n_way);
    INT_FIELD("k_shot", train.k_shot);
    INT_FIELD("m_query", train.m_query);
    INT_FIELD("num_target", train.num_target);
    DBL_FIELD("alpha", train.alpha);
    ENUM_FIELD("lambda_strategy", train.lambda_strategy, to_lambda, from_lambda);
    ENUM_FIELD("fsl_loss_mode", train.fsl_loss_mode, to_fsl_mode, from_fsl_mode);
    ENUM_FIELD("head", train.head, to_head, from_head);
    INT_FIELD("epochs_pretrain", train.epochs_pretrain);
    INT_FIELD("epochs_meta", train.epochs_meta);
    INT_FIELD("iterations_per_epoch", train.iterations_per_epoch);
    INT_FIELD("pretrain_batch", train.pretrain_batch);
    INT_FIELD("val_episodes", train.val_episodes);
    DBL_FIELD("lr", train.lr);
    UINT_FIELD("seed", train.seed);
    BOOL_FIELD("kl_reverse", train.kl_reverse);
    INT_FIELD("n_episodes", train.n_eval_episodes);
    INT_FIELD("data.source_classes", data.source_classes);
    INT_FIELD("data.target_classes", data.target_classes);
    INT_FIELD("data.images_per_class", data.images_per_class);
    INT_FIELD("data.image_hw", data.image_hw);
    UINT_FIELD("data.seed", data.seed);
    DBL_FIELD("data.source_fracs.base", data.source_fracs[0]);
    DBL_FIELD("data.source_fracs.eval", data.source_fracs[1]);
    DBL_FIELD("data.source_fracs.novel", data.source_fracs[2]);
    DBL_FIELD("data.target_fracs.base", data.target_fracs[0]);
    DBL_FIELD("data.target_fracs.eval", data.target_fracs[1]);
    DBL_FIELD("data.target_fracs.novel", data.target_fracs[2]);
    STR_FIELD("data.import_source_dir", data.import_source_dir);
    STR_FIELD("data.import_target_dir", data.import_target_dir);
    STR_FIELD("out_dir", out_dir);
    STR_FIELD("report_formats", report_formats);
    STR_FIELD("study_kind", study_kind);
    INT_FIELD("seed_replicates", seed_replicates);
#undef INT_FIELD
#undef UINT_FIELD
#undef DBL_FIELD
#undef BOOL_FIELD
#undef STR_FIELD
#undef ENUM_FIELD
    return t;
  }();
  return table;
}

int levenshtein(const std::string& a, const std::string& b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

[[noreturn]] void unknown_key(const std::string& key) {
  int best = std::numeric_limits<int>::max();
  std::string suggestion;
  for (const auto& f : fields()) {
    const int d = levenshtein(key, f.key);
    if (d < best) {
      best = d;
      suggestion = f.key;
    }
  }
  throw std::invalid_argument("config: unknown key '" + key + "' (did you mean '" + suggestion +
                              "'?)");
}

void check_type(const Field& f, const json& v, const std::string& origin) {
  bool ok = false;
  switch (f.type) {
    case FieldType::Int:
    case FieldType::Uint: ok = v.is_number_integer(); break;
    case FieldType::Double: ok = v.is_number(); break;
    case FieldType::Bool: ok = v.is_boolean(); break;
    case FieldType::String: ok = v.is_string(); break;
  }
  if (!ok) {
    throw std::invalid_argument("config: type mismatch for key '" + f.key + "' in " + origin);
  }
}

json parse_override_value(const Field& f, const std::string& text) {
  switch (f.type) {
    case FieldType::Int: {
      int v = 0;
      auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || p != text.data() + text.size()) {
        throw std::invalid_argument("config: type mismatch for key '" + f.key +
                                    "': expected integer, got '" + text + "'");
      }
      return json(v);
    }
    case FieldType::Uint: {
      std::uint64_t v = 0;
      auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || p != text.data() + text.size()) {
        throw std::invalid_argument("config: type mismatch for key '" + f.key +
                                    "': expected unsigned integer, got '" + text + "'");
      }
      return json(v);
    }
    case FieldType::Double: {
      try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument("trailing");
        return json(v);
      } catch (const std::exception&) {
        throw std::invalid_argument("config: type mismatch for key '" + f.key +
                                    "': expected number, got '" + text + "'");
      }
    }
    case FieldType::Bool:
      if (text == "true" || text == "1") return json(true);
      if (text == "false" || text == "0") return json(false);
      throw std::invalid_argument("config: type mismatch for key '" + f.key +
                                  "': expected bool, got '" + text + "'");
    default: return json(text);
  }
}

void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& overrides) {
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: override '" + kv + "' is not of the form key=value");
    }
    const std::string key = kv.substr(0, eq);
    const Field* f = find_field(key);
    if (!f) unknown_key(key);
    f->set(cfg, parse_override_value(*f, kv.substr(eq + 1)));
  }
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

ExperimentConfig parse_config(const std::string& json_path,
                              const std::vector<std::string>& overrides) {
  ExperimentConfig cfg;
  std::ifstream in(json_path);
  if (!in) throw std::invalid_argument("config: cannot open " + json_path);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  if (text.find_first_not_of(" \t\r\n") != std::string::npos) {
    json doc = json::parse(text);
    if (!doc.is_object()) throw std::invalid_argument("config: top level must be a JSON object");
    for (const auto& [key, value] : doc.items()) {
      const Field* f = find_field(key);
      if (!f) unknown_key(key);
      check_type(*f, value, json_path);
      f->set(cfg, value);
    }
  }
  apply_overrides(cfg, overrides);
  return cfg;
}

ExperimentConfig parse_overrides(const std::vector<std::string>& overrides) {
  ExperimentConfig cfg;
  apply_overrides(cfg, overrides);
  return cfg;
}

std::string config_to_json(const ExperimentConfig& cfg) {
  json doc = json::object();
  for (const auto& f : fields()) doc[f.key] = f.get(cfg);
  return doc.dump(2) + "\n";
}

StudyKind parse_study_kind(const std::string& name) {
  if (name == "pilot_stage") return StudyKind::PilotStage;
  if (name == "feasibility") return StudyKind::Feasibility;
  if (name == "ablation_loss") return StudyKind::AblationLoss;
  if (name == "ablation_lambda") return StudyKind::AblationLambda;
  if (name == "baselines") return StudyKind::Baselines;
  throw std::invalid_argument(
      "config: unknown study kind '" + name +
      "' (expected pilot_stage|feasibility|ablation_loss|ablation_lambda|baselines)");
}

}  // namespace fdmix
