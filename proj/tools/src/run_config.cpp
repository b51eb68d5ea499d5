#include "tdt_cli/run_config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tdt/errors.hpp"
#include "tdt/json_util.hpp"

namespace tdt::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (const auto& s : v) out += (out.empty() ? "" : ", ") + s;
  return out;
}

void check_rates(const std::vector<double>& rates, const char* what) {
  for (double r : rates)
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError(std::string(what) + ": rates must lie in [0, 1]");
}

json to_json(const AnalysisConfig& a) {
  return json{{"selections", a.selections},
              {"split", a.split},
              {"drop_rates", a.drop_rates},
              {"perturb_rates", a.perturb_rates},
              {"n_datasets", a.n_datasets},
              {"perturb_seed", a.perturb_seed},
              {"bins", a.bins},
              {"softmax_normalize", a.softmax_normalize},
              {"ood_split", a.ood_split},
              {"mapping", a.mapping}};
}

AnalysisConfig analysis_from_json(const json& j) {
  using json_util::read_opt;
  constexpr auto ctx = "analysis";
  json_util::reject_unknown_keys(j,
                                 {"selections", "split", "drop_rates", "perturb_rates", "n_datasets", "perturb_seed",
                                  "bins", "softmax_normalize", "ood_split", "mapping"},
                                 ctx);
  AnalysisConfig a;
  read_opt(j, "selections", a.selections, ctx);
  read_opt(j, "split", a.split, ctx);
  read_opt(j, "drop_rates", a.drop_rates, ctx);
  read_opt(j, "perturb_rates", a.perturb_rates, ctx);
  read_opt(j, "n_datasets", a.n_datasets, ctx);
  read_opt(j, "perturb_seed", a.perturb_seed, ctx);
  read_opt(j, "bins", a.bins, ctx);
  read_opt(j, "softmax_normalize", a.softmax_normalize, ctx);
  read_opt(j, "ood_split", a.ood_split, ctx);
  read_opt(j, "mapping", a.mapping, ctx);
  return a;
}

json to_json(const GradcheckConfig& g) {
  return json{{"variant", g.variant}, {"h", g.h}, {"tol", g.tol}, {"coords_per_param", g.coords_per_param},
              {"seed", g.seed}};
}

GradcheckConfig gradcheck_from_json(const json& j) {
  using json_util::read_opt;
  constexpr auto ctx = "gradcheck";
  json_util::reject_unknown_keys(j, {"variant", "h", "tol", "coords_per_param", "seed"}, ctx);
  GradcheckConfig g;
  read_opt(j, "variant", g.variant, ctx);
  read_opt(j, "h", g.h, ctx);
  read_opt(j, "tol", g.tol, ctx);
  read_opt(j, "coords_per_param", g.coords_per_param, ctx);
  read_opt(j, "seed", g.seed, ctx);
  return g;
}

}  // namespace

void AnalysisConfig::validate() const {
  for (const auto& s : selections)
    if (!contains(kAnalysisNames, s))
      throw ConfigError("unknown analysis '" + s + "'; valid names: " + join(kAnalysisNames));
  if (!contains(kSplitNames, split)) throw ConfigError("analysis.split must be one of: " + join(kSplitNames));
  if (!contains(kSplitNames, ood_split)) throw ConfigError("analysis.ood_split must be one of: " + join(kSplitNames));
  check_rates(drop_rates, "analysis.drop_rates");
  for (std::size_t i = 1; i < drop_rates.size(); ++i)
    if (!(drop_rates[i] > drop_rates[i - 1])) throw ConfigError("analysis.drop_rates must be strictly increasing");
  check_rates(perturb_rates, "analysis.perturb_rates");
  if (n_datasets == 0) throw ConfigError("analysis.n_datasets must be >= 1");
  if (bins == 0) throw ConfigError("analysis.bins must be >= 1");
  for (int m : mapping)
    if (m < 0) throw ConfigError("analysis.mapping entries must be >= 0");
}

void GradcheckConfig::validate() const {
  objective::parse_variant(variant);
  if (!(h > 0.0)) throw ConfigError("gradcheck.h must be > 0");
  if (!(tol > 0.0)) throw ConfigError("gradcheck.tol must be > 0");
}

void RunConfig::validate() const {
  task.validate();
  model.validate();
  tdt.validate();
  train.validate();
  analysis.validate();
  gradcheck.validate();
  if (!contains(kSplitNames, eval_split)) throw ConfigError("eval_split must be one of: " + join(kSplitNames));
  if (sizes.train == 0 || sizes.dev == 0 || sizes.test_iid == 0 || sizes.test_antispurious == 0)
    throw ConfigError("sizes: every split size must be positive");
}

RunConfig run_config_from_json(const json& j, const std::string& base_dir) {
  using json_util::read_opt;
  constexpr auto ctx = "config";
  json_util::reject_unknown_keys(j,
                                 {"command", "task", "task_path", "sizes", "seed", "data_dir", "checkpoint",
                                  "eval_split", "model", "tdt", "train", "analysis", "gradcheck", "output_dir"},
                                 ctx);
  RunConfig rc;
  read_opt(j, "command", rc.command, ctx);
  if (j.contains("task") && j.contains("task_path")) throw ConfigError("config: give either task or task_path");
  if (j.contains("task")) rc.task = data::task_spec_from_json(j.at("task"));
  if (j.contains("task_path")) {
    fs::path p = j.at("task_path").get<std::string>();
    if (p.is_relative()) p = fs::path(base_dir) / p;
    rc.task = data::task_spec_from_json(read_json_file(p.string()));
  }
  if (j.contains("sizes")) rc.sizes = data::corpus_sizes_from_json(j.at("sizes"));
  read_opt(j, "seed", rc.seed, ctx);
  read_opt(j, "data_dir", rc.data_dir, ctx);
  read_opt(j, "checkpoint", rc.checkpoint, ctx);
  read_opt(j, "eval_split", rc.eval_split, ctx);
  if (j.contains("model")) rc.model = model::model_config_from_json(j.at("model"));
  if (j.contains("tdt")) rc.tdt = objective::tdt_config_from_json(j.at("tdt"));
  if (j.contains("train")) rc.train = train::train_config_from_json(j.at("train"));
  if (j.contains("analysis")) rc.analysis = analysis_from_json(j.at("analysis"));
  if (j.contains("gradcheck")) rc.gradcheck = gradcheck_from_json(j.at("gradcheck"));
  read_opt(j, "output_dir", rc.output_dir, ctx);
  return rc;
}

json snapshot_json(const RunConfig& rc) {
  json j{{"command", rc.command}};
  if (rc.command == "generate") {
    j["task"] = data::to_json(rc.task);
    j["sizes"] = data::to_json(rc.sizes);
    j["seed"] = rc.seed;
  } else if (rc.command == "train") {
    j["data_dir"] = rc.data_dir;
    j["model"] = model::to_json(rc.model);
    j["tdt"] = objective::to_json(rc.tdt);
    j["train"] = train::to_json(rc.train);
  } else if (rc.command == "eval") {
    j["data_dir"] = rc.data_dir;
    j["checkpoint"] = rc.checkpoint;
    j["eval_split"] = rc.eval_split;
  } else if (rc.command == "analyze") {
    j["data_dir"] = rc.data_dir;
    j["checkpoint"] = rc.checkpoint;
    j["tdt"] = objective::to_json(rc.tdt);
    j["analysis"] = to_json(rc.analysis);
  } else if (rc.command == "gradcheck") {
    j["gradcheck"] = to_json(rc.gradcheck);
  }
  return j;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  out.flush();
  if (!out) throw IoError("write failed for " + path);
}

void write_json_file(const std::string& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

std::string default_output_root() {
  const char* env = std::getenv("TDT_OUTPUT_ROOT");
  return env && *env ? env : "runs";
}

std::vector<double> parse_rate_list(const std::string& s) {
  std::vector<double> out;
  auto to_double = [&](const std::string& t) {
    try {
      std::size_t used = 0;
      double v = std::stod(t, &used);
      if (used != t.size()) throw std::invalid_argument(t);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("cannot parse rate '" + t + "'");
    }
  };
  if (auto dots = s.find(".."); dots != std::string::npos) {
    const double lo = to_double(s.substr(0, dots)), hi = to_double(s.substr(dots + 2));
    const auto a = static_cast<long>(std::lround(lo * 10.0)), b = static_cast<long>(std::lround(hi * 10.0));
    if (b < a) throw ConfigError("empty rate range '" + s + "'");
    for (long i = a; i <= b; ++i) out.push_back(static_cast<double>(i) / 10.0);
    return out;
  }
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(to_double(item));
  if (out.empty()) throw ConfigError("empty rate list");
  return out;
}

}  // namespace tdt::cli
