#include "tdt_cli/commands.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "tdt/analysis.hpp"
#include "tdt/errors.hpp"
#include "tdt/hash.hpp"

namespace tdt::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v, int digits = 4) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

fs::path prepare_out(const RunConfig& rc) {
  if (rc.output_dir.empty()) throw ConfigError("no output directory");
  fs::path out = rc.output_dir;
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  write_json_file((out / "config_snapshot.json").string(), snapshot_json(rc));
  return out;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("missing ") + what + " path");
  if (!fs::is_regular_file(path)) throw IoError(std::string(what) + " not found: " + path);
}

// Copies the task geometry into a model config and checks it fits.
model::ModelConfig fit_model(model::ModelConfig mc, const data::TaskSpec& spec) {
  mc.vocab_size = spec.vocab_size;
  mc.n_classes = spec.n_classes;
  if (mc.max_len < spec.max_len + 2)
    throw ConfigError("model.max_len " + std::to_string(mc.max_len) + " cannot hold sequences of " +
                      std::to_string(spec.max_len) + " tokens plus [CLS]/[SEP]");
  mc.validate();
  return mc;
}

}  // namespace

const data::Split& CorpusDir::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "dev") return dev;
  if (name == "test_iid") return test_iid;
  if (name == "test_antispurious") return test_antispurious;
  throw ConfigError("unknown split '" + name + "'");
}

CorpusDir load_corpus_dir(const std::string& dir) {
  if (dir.empty()) throw ConfigError("missing data directory");
  fs::path d = dir;
  const auto manifest_path = (d / "manifest.json").string();
  require_file(manifest_path, "data manifest");
  CorpusDir c;
  json manifest = read_json_file(manifest_path);
  c.spec = data::task_spec_from_json(manifest.at("spec"));
  c.train = data::read_jsonl((d / "train.jsonl").string());
  c.dev = data::read_jsonl((d / "dev.jsonl").string());
  c.test_iid = data::read_jsonl((d / "test_iid.jsonl").string());
  c.test_antispurious = data::read_jsonl((d / "test_antispurious.jsonl").string());
  return c;
}

int cmd_generate(const RunConfig& rc, std::ostream& log) {
  auto corpus = data::generate_corpus(rc.task, rc.sizes, rc.seed);
  auto vocab = data::Vocabulary::from_spec(rc.task);
  fs::path out = prepare_out(rc);
  json files = json::object();
  const std::pair<const char*, const data::Split*> splits[] = {{"train", &corpus.train},
                                                               {"dev", &corpus.dev},
                                                               {"test_iid", &corpus.test_iid},
                                                               {"test_antispurious", &corpus.test_antispurious}};
  for (const auto& [name, split] : splits) {
    const auto path = (out / (std::string(name) + ".jsonl")).string();
    data::write_jsonl(*split, vocab, path);
    files[std::string(name) + ".jsonl"] = {{"examples", split->size()}, {"sha256", sha256_file(path)}};
  }
  json manifest{{"spec", data::to_json(rc.task)}, {"seed", rc.seed}, {"sizes", data::to_json(rc.sizes)},
                {"files", files}};
  write_json_file((out / "manifest.json").string(), manifest);
  log << "wrote 4 splits and manifest to " << out.string() << "\n";
  return kExitOk;
}

int cmd_train(const RunConfig& rc, std::ostream& log) {
  auto corpus = load_corpus_dir(rc.data_dir);
  auto mc = fit_model(rc.model, corpus.spec);
  RunConfig resolved = rc;
  resolved.model = mc;
  resolved.train.checkpoint_path.clear();
  fs::path out = prepare_out(resolved);

  log << "training " << resolved.tdt.run_label() << " for " << resolved.train.total_steps << " steps (seed "
      << resolved.train.seed << ")\n";
  auto result = train::train(corpus.train, corpus.dev, mc, resolved.tdt, resolved.train);
  model::save_checkpoint((out / "checkpoint.json").string(), result.params,
                         json{{"run_label", result.record.label},
                              {"best_step", result.record.best_step},
                              {"tdt", objective::to_json(resolved.tdt)}});
  write_json_file((out / "run_record.json").string(), train::to_json(result.record));
  write_text_file((out / "metrics.csv").string(), train::metrics_csv(result.record));
  // Wall-clock lives apart from the deterministic artifacts.
  write_json_file((out / "timing.json").string(), json{{"wall_clock_seconds", result.record.wall_clock_seconds}});
  log << "best dev accuracy " << fixed(result.record.best_dev_accuracy) << " at step " << result.record.best_step
      << "; artifacts in " << out.string() << "\n";
  return kExitOk;
}

int cmd_eval(const RunConfig& rc, std::ostream& log) {
  require_file(rc.checkpoint, "checkpoint");
  auto ckpt = model::load_checkpoint(rc.checkpoint);
  auto corpus = load_corpus_dir(rc.data_dir);
  const auto& split = corpus.split(rc.eval_split);
  fs::path out = prepare_out(rc);
  auto res = train::evaluate(ckpt.params, split);
  std::ostringstream csv;
  csv << "index,label,predicted";
  for (std::size_t c = 0; c < ckpt.params.config.n_classes; ++c) csv << ",p" << c;
  csv << '\n';
  for (std::size_t i = 0; i < res.examples.size(); ++i) {
    const auto& ex = res.examples[i];
    csv << i << ',' << ex.label << ',' << ex.predicted;
    for (double p : ex.probs) csv << ',' << num(p);
    csv << '\n';
  }
  write_text_file((out / "predictions.csv").string(), csv.str());
  write_json_file((out / "eval.json").string(),
                  json{{"split", rc.eval_split}, {"examples", split.size()}, {"accuracy", res.accuracy}});
  log << rc.eval_split << " accuracy " << fixed(res.accuracy) << "\n";
  return kExitOk;
}

int cmd_analyze(const RunConfig& rc, std::ostream& log) {
  if (rc.analysis.selections.empty())
    throw ConfigError("no analyses selected; valid names: drop-curve, perturb, histogram, export-reprs, domain-eval");
  require_file(rc.checkpoint, "checkpoint");
  auto ckpt = model::load_checkpoint(rc.checkpoint);
  auto corpus = load_corpus_dir(rc.data_dir);
  objective::TDTConfig tdt;
  if (ckpt.meta.contains("tdt")) {
    tdt = objective::tdt_config_from_json(ckpt.meta.at("tdt"));
  } else if (ckpt.params.config.confidence_outputs == 2) {
    tdt.variant = objective::VariantMode::hard;
  }
  const auto& params = ckpt.params;
  const auto& split = corpus.split(rc.analysis.split);
  fs::path out = prepare_out(rc);
  const std::string before = model::parameter_digest(params);

  for (const auto& name : rc.analysis.selections) {
    if (name == "drop-curve") {
      analysis::DropOptions opts;
      opts.softmax_normalize = rc.analysis.softmax_normalize;
      std::vector<analysis::Curve> curves;
      for (auto order : {analysis::DropOrder::descending, analysis::DropOrder::ascending})
        curves.push_back(analysis::drop_curve(params, split, order, rc.analysis.drop_rates, opts));
      analysis::write_curves_csv(curves, (out / "drop_curve.csv").string());
      for (std::size_t i = 0; i < curves[0].x.size(); ++i)
        log << "drop " << fixed(curves[0].x[i], 2) << ": descending " << fixed(curves[0].y[i]) << ", ascending "
            << fixed(curves[1].y[i]) << "\n";
    } else if (name == "perturb") {
      std::vector<analysis::PerturbationReport> reports;
      json summary = json::array();
      for (double r : rc.analysis.perturb_rates) {
        reports.push_back(
            analysis::perturb_eval(params, split, r, rc.analysis.n_datasets, rc.analysis.perturb_seed));
        const auto& rep = reports.back();
        summary.push_back({{"rate", r}, {"mean", rep.mean}, {"sd", rep.sd}, {"min", rep.min}, {"max", rep.max}});
        log << "perturb " << fixed(r, 2) << ": mean " << fixed(rep.mean) << " sd " << fixed(rep.sd) << "\n";
      }
      analysis::write_reports_csv(reports, (out / "perturb_report.csv").string());
      write_json_file((out / "perturb_summary.json").string(), summary);
    } else if (name == "histogram") {
      auto h = analysis::confidence_histogram(params, split, rc.analysis.bins);
      analysis::write_histogram_csv(h, (out / "histogram.csv").string());
      auto opt = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
      write_json_file((out / "histogram_summary.json").string(),
                      json{{"total", h.total},
                           {"mean_keyword", opt(h.mean_keyword)},
                           {"mean_spurious", opt(h.mean_spurious)},
                           {"mean_noise", opt(h.mean_noise)}});
      log << "mean confidence: keyword " << fixed(h.mean_keyword) << ", spurious " << fixed(h.mean_spurious)
          << ", noise " << fixed(h.mean_noise) << "\n";
    } else if (name == "export-reprs") {
      analysis::export_representations(params, split, tdt, (out / "representations.csv").string());
      log << "wrote " << 3 * split.size() << " representation rows\n";
    } else if (name == "domain-eval") {
      auto mapping = rc.analysis.mapping.empty() ? data::identity_mapping(params.config.n_classes)
                                                 : data::LabelMapping(rc.analysis.mapping);
      const double acc = analysis::domain_eval(params, corpus.split(rc.analysis.ood_split), mapping);
      write_json_file((out / "domain_eval.json").string(),
                      json{{"split", rc.analysis.ood_split}, {"mapping", mapping}, {"accuracy", acc}});
      log << "domain accuracy on " << rc.analysis.ood_split << ": " << fixed(acc) << "\n";
    }
  }
  if (model::parameter_digest(params) != before) throw std::logic_error("analysis modified the parameters");
  return kExitOk;
}

GradcheckSuite run_gradcheck_suite(const GradcheckConfig& cfg) {
  cfg.validate();
  model::ModelConfig mc;
  mc.vocab_size = 50;
  mc.d_model = 8;
  mc.n_layers = 2;
  mc.n_heads = 2;
  mc.d_ff = 16;
  mc.max_len = 12;
  mc.n_classes = 3;
  mc.init_std = 0.5;
  const auto variant = objective::parse_variant(cfg.variant);
  mc.confidence_outputs = variant == objective::VariantMode::hard ? 2 : 1;
  auto params = model::ModelParams::init(mc, cfg.seed);

  std::mt19937_64 rng(cfg.seed + 17);
  std::uniform_int_distribution<int> tok(data::kReservedTokens, static_cast<int>(mc.vocab_size) - 1);
  std::vector<std::vector<int>> seqs;
  for (std::size_t len : {10u, 7u, 4u}) {
    std::vector<int> s(len);
    for (auto& t : s) t = tok(rng);
    seqs.push_back(std::move(s));
  }
  const std::vector<int> labels = {0, 2, 1};
  auto batch = model::encode(seqs, labels, mc);

  auto group_of = [](const std::string& n) -> std::string {
    if (n == "token_emb" || n == "pos_emb") return "embeddings";
    if (n.rfind("layer", 0) == 0) return n.substr(0, n.find('.'));
    if (n.rfind("head", 0) == 0) return "head";
    return "confidence";
  };

  std::map<std::pair<std::string, std::string>, GradcheckCell> cells;
  GradcheckSuite suite;
  const char* losses[] = {"l_cla", "l_c", "l_r", "total"};
  for (double m : {0.0, 2.0})
    for (double alpha : {0.5, 2.0, 4.0})
      for (double beta : {0.5, 1.0}) {
        ++suite.combos;
        objective::TDTConfig tc;
        tc.margin = m;
        tc.alpha = alpha;
        tc.beta = beta;
        tc.variant = variant;
        for (const char* which : losses) {
          const std::string w = which;
          ad::LossFn fn = [&, w] {
            objective::Rng lrng(cfg.seed + 101);
            objective::LossOptions lo;
            lo.relaxed_hard = true;
            auto b = objective::total_loss(batch, params, tc, lrng, lo);
            ad::CheckedLoss cl;
            if (w == "l_cla") cl.loss = b.l_cla;
            if (w == "l_c") cl.loss = b.l_c;
            if (w == "l_r" || w == "total") {
              cl.loss = w == "l_r" ? b.l_r : b.total;
              cl.kink_args = b.hinge_args;
            }
            return cl;
          };
          ad::GradCheckOptions go;
          go.h = cfg.h;
          go.tol = cfg.tol;
          go.max_coords_per_param = cfg.coords_per_param;
          go.seed = cfg.seed;
          auto rep = ad::grad_check(fn, params.named_parameters(), go);
          for (const auto& pc : rep.params) {
            auto& cell = cells[{w, group_of(pc.name)}];
            cell.loss = w;
            cell.group = group_of(pc.name);
            cell.max_rel_error = std::max(cell.max_rel_error, pc.max_rel_error);
            cell.checked += pc.checked;
            cell.skipped += pc.skipped;
          }
          params.zero_grad();
        }
      }
  for (const char* which : losses)
    for (auto& [key, cell] : cells)
      if (key.first == which) {
        suite.max_rel_error = std::max(suite.max_rel_error, cell.max_rel_error);
        if (!(cell.max_rel_error < cfg.tol)) {
          suite.passed = false;
          suite.failing.push_back(cell.loss + "/" + cell.group);
        }
        suite.cells.push_back(cell);
      }
  return suite;
}

int cmd_gradcheck(const RunConfig& rc, std::ostream& log) {
  fs::path out = prepare_out(rc);
  const auto started = std::chrono::steady_clock::now();
  auto suite = run_gradcheck_suite(rc.gradcheck);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  json cells = json::array();
  for (const auto& c : suite.cells) {
    log << c.loss << "/" << c.group << ": max rel error " << c.max_rel_error << " (" << c.checked << " checked, "
        << c.skipped << " skipped at hinge kinks)\n";
    cells.push_back({{"loss", c.loss},
                     {"group", c.group},
                     {"max_rel_error", c.max_rel_error},
                     {"checked", c.checked},
                     {"skipped", c.skipped}});
  }
  if (rc.gradcheck.variant == "hard")
    log << "note: hard variant checked through its soft relaxation; the straight-through estimator is unchecked by "
           "finite differences\n";
  log << suite.combos << " hyperparameter combinations, max rel error " << suite.max_rel_error << ", "
      << fixed(secs, 1) << " s\n";
  write_json_file((out / "gradcheck.json").string(), json{{"variant", rc.gradcheck.variant},
                                                          {"h", rc.gradcheck.h},
                                                          {"tol", rc.gradcheck.tol},
                                                          {"combos", suite.combos},
                                                          {"cells", cells},
                                                          {"max_rel_error", suite.max_rel_error},
                                                          {"passed", suite.passed}});
  if (!suite.passed) {
    std::string names;
    for (const auto& f : suite.failing) names += (names.empty() ? "" : ", ") + f;
    log << "FAILED: " << names << " exceed tolerance " << rc.gradcheck.tol << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace tdt::cli
