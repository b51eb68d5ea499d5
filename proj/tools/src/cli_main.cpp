#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "tdt/errors.hpp"
#include "tdt_cli/commands.hpp"

namespace tdt::cli {

namespace {

template <class T>
bool given(CLI::Option* opt, T& target, const T& value) {
  if (opt->count() == 0) return false;
  target = value;
  return true;
}

struct Flags {
  std::string config, out, spec, data, checkpoint, split, variant, perturb, rates, mapping, ood_split;
  std::uint64_t seed = 0, perturb_seed = 0;
  double alpha = 0, beta = 0, gamma = 0, margin = 0, tau = 0, rho = 0, lr = 0, gaussian_sigma = 0, h = 0, tol = 0;
  std::size_t steps = 0, batch = 0, warmup = 0, eval_interval = 0, n = 0, bins = 0, coords = 0;
  std::size_t n_train = 0, n_dev = 0, n_test = 0, n_anti = 0;
  bool length_normalize = false, symmetric_kl = false, force_full = false, softmax_norm = false;
  std::vector<std::string> analyses;
  bool drop_curve = false, perturb_flag = false, histogram = false, export_reprs = false, domain_eval = false;
};

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    auto next = s.find(',', pos);
    auto item = s.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("cannot parse label '" + item + "' in mapping");
    }
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  return out;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Task-guided disentangled tuning toolkit"};
  app.require_subcommand(1);
  Flags f;
  std::map<std::string, CLI::Option*> o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "JSON run config (flags override it)");
    sub->add_option("--out", f.out, "Output directory");
  };

  auto* gen = app.add_subcommand("generate", "Generate a synthetic corpus");
  common(gen);
  o["spec"] = gen->add_option("--spec", f.spec, "TaskSpec JSON file");
  o["gen_seed"] = gen->add_option("--seed", f.seed, "Corpus seed");
  o["rho"] = gen->add_option("--rho", f.rho, "Spurious co-occurrence rate");
  o["n_train"] = gen->add_option("--n-train", f.n_train);
  o["n_dev"] = gen->add_option("--n-dev", f.n_dev);
  o["n_test"] = gen->add_option("--n-test", f.n_test, "test_iid size");
  o["n_anti"] = gen->add_option("--n-anti", f.n_anti, "test_antispurious size");

  auto* tr = app.add_subcommand("train", "Train vanilla or TDT models");
  common(tr);
  o["tr_data"] = tr->add_option("--data", f.data, "Directory written by generate");
  o["alpha"] = tr->add_option("--alpha", f.alpha);
  o["beta"] = tr->add_option("--beta", f.beta);
  o["gamma"] = tr->add_option("--gamma", f.gamma);
  o["margin"] = tr->add_option("--margin", f.margin);
  o["variant"] = tr->add_option("--variant", f.variant, "soft | hard");
  o["perturb_mode"] = tr->add_option("--perturb", f.perturb, "zero | gaussian | embedding_mean | sequence_mean");
  o["tau"] = tr->add_option("--tau", f.tau);
  o["gaussian_sigma"] = tr->add_option("--gaussian-sigma", f.gaussian_sigma);
  o["tr_seed"] = tr->add_option("--seed", f.seed);
  o["steps"] = tr->add_option("--steps", f.steps);
  o["batch"] = tr->add_option("--batch-size", f.batch);
  o["lr"] = tr->add_option("--lr", f.lr);
  o["warmup"] = tr->add_option("--warmup", f.warmup);
  o["eval_interval"] = tr->add_option("--eval-interval", f.eval_interval);
  o["length_normalize"] = tr->add_flag("--length-normalize", f.length_normalize);
  o["symmetric_kl"] = tr->add_flag("--symmetric-kl", f.symmetric_kl);
  o["force_full"] = tr->add_flag("--force-full-objective", f.force_full);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  common(ev);
  o["ev_ckpt"] = ev->add_option("--checkpoint", f.checkpoint);
  o["ev_data"] = ev->add_option("--data", f.data);
  o["ev_split"] = ev->add_option("--split", f.split);

  auto* an = app.add_subcommand("analyze", "Run diagnostic analyses on a checkpoint");
  common(an);
  o["an_ckpt"] = an->add_option("--checkpoint", f.checkpoint);
  o["an_data"] = an->add_option("--data", f.data);
  o["an_split"] = an->add_option("--split", f.split);
  o["analysis"] = an->add_option("--analysis", f.analyses,
                                 "drop-curve | perturb | histogram | export-reprs | domain-eval (repeatable)");
  o["drop_curve"] = an->add_flag("--drop-curve", f.drop_curve);
  o["perturb_flag"] = an->add_flag("--perturb", f.perturb_flag);
  o["histogram"] = an->add_flag("--histogram", f.histogram);
  o["export_reprs"] = an->add_flag("--export-reprs", f.export_reprs);
  o["domain_eval"] = an->add_flag("--domain-eval", f.domain_eval);
  o["rates"] = an->add_option("--rates", f.rates, "Comma list or lo..hi in steps of 0.1");
  o["n"] = an->add_option("--n", f.n, "Perturbed datasets per rate");
  o["perturb_seed"] = an->add_option("--perturb-seed", f.perturb_seed);
  o["bins"] = an->add_option("--bins", f.bins);
  o["mapping"] = an->add_option("--mapping", f.mapping, "Comma list: target label per source label");
  o["ood_split"] = an->add_option("--ood-split", f.ood_split);
  o["softmax_norm"] = an->add_flag("--softmax-normalize", f.softmax_norm);

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every loss on a tiny model");
  gc->set_help_flag("--help", "Print this help message and exit");
  common(gc);
  o["gc_variant"] = gc->add_option("--variant", f.variant, "soft | hard");
  o["h"] = gc->add_option("--h", f.h, "Central-difference step");
  o["tol"] = gc->add_option("--tol", f.tol, "Relative error threshold");
  o["coords"] = gc->add_option("--coords", f.coords, "Sampled coordinates per parameter (0 = all)");
  o["gc_seed"] = gc->add_option("--seed", f.seed);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    const std::string cmd = sub->get_name();
    RunConfig rc;
    if (!f.config.empty()) {
      auto base = std::filesystem::path(f.config).parent_path().string();
      rc = run_config_from_json(read_json_file(f.config), base.empty() ? "." : base);
      if (!rc.command.empty() && rc.command != cmd)
        throw ConfigError("config was written for '" + rc.command + "', not '" + cmd + "'");
    }
    rc.command = cmd;

    if (cmd == "generate") {
      if (o["spec"]->count()) rc.task = data::task_spec_from_json(read_json_file(f.spec));
      given(o["gen_seed"], rc.seed, f.seed);
      given(o["rho"], rc.task.rho, f.rho);
      given(o["n_train"], rc.sizes.train, f.n_train);
      given(o["n_dev"], rc.sizes.dev, f.n_dev);
      given(o["n_test"], rc.sizes.test_iid, f.n_test);
      given(o["n_anti"], rc.sizes.test_antispurious, f.n_anti);
    } else if (cmd == "train") {
      given(o["tr_data"], rc.data_dir, f.data);
      given(o["alpha"], rc.tdt.alpha, f.alpha);
      given(o["beta"], rc.tdt.beta, f.beta);
      given(o["gamma"], rc.tdt.gamma, f.gamma);
      given(o["margin"], rc.tdt.margin, f.margin);
      if (o["variant"]->count()) rc.tdt.variant = objective::parse_variant(f.variant);
      if (o["perturb_mode"]->count()) rc.tdt.perturbation = objective::parse_perturbation(f.perturb);
      given(o["tau"], rc.tdt.tau, f.tau);
      given(o["gaussian_sigma"], rc.tdt.gaussian_sigma, f.gaussian_sigma);
      given(o["tr_seed"], rc.train.seed, f.seed);
      given(o["steps"], rc.train.total_steps, f.steps);
      given(o["batch"], rc.train.batch_size, f.batch);
      given(o["lr"], rc.train.lr, f.lr);
      given(o["warmup"], rc.train.warmup_steps, f.warmup);
      given(o["eval_interval"], rc.train.eval_interval, f.eval_interval);
      given(o["length_normalize"], rc.tdt.length_normalize, f.length_normalize);
      given(o["symmetric_kl"], rc.tdt.symmetric_kl, f.symmetric_kl);
      given(o["force_full"], rc.train.force_full_objective, f.force_full);
    } else if (cmd == "eval") {
      given(o["ev_ckpt"], rc.checkpoint, f.checkpoint);
      given(o["ev_data"], rc.data_dir, f.data);
      given(o["ev_split"], rc.eval_split, f.split);
    } else if (cmd == "analyze") {
      given(o["an_ckpt"], rc.checkpoint, f.checkpoint);
      given(o["an_data"], rc.data_dir, f.data);
      given(o["an_split"], rc.analysis.split, f.split);
      std::vector<std::string> picked = f.analyses;
      if (f.drop_curve) picked.push_back("drop-curve");
      if (f.perturb_flag) picked.push_back("perturb");
      if (f.histogram) picked.push_back("histogram");
      if (f.export_reprs) picked.push_back("export-reprs");
      if (f.domain_eval) picked.push_back("domain-eval");
      if (!picked.empty()) rc.analysis.selections = picked;
      if (o["rates"]->count()) {
        auto rates = parse_rate_list(f.rates);
        const bool drop = std::find(picked.begin(), picked.end(), "drop-curve") != picked.end();
        const bool pert = std::find(picked.begin(), picked.end(), "perturb") != picked.end();
        if (drop || !pert) rc.analysis.drop_rates = rates;
        if (pert || !drop) rc.analysis.perturb_rates = rates;
      }
      given(o["n"], rc.analysis.n_datasets, f.n);
      given(o["perturb_seed"], rc.analysis.perturb_seed, f.perturb_seed);
      given(o["bins"], rc.analysis.bins, f.bins);
      if (o["mapping"]->count()) rc.analysis.mapping = parse_int_list(f.mapping);
      given(o["ood_split"], rc.analysis.ood_split, f.ood_split);
      given(o["softmax_norm"], rc.analysis.softmax_normalize, f.softmax_norm);
    } else if (cmd == "gradcheck") {
      given(o["gc_variant"], rc.gradcheck.variant, f.variant);
      given(o["h"], rc.gradcheck.h, f.h);
      given(o["tol"], rc.gradcheck.tol, f.tol);
      given(o["coords"], rc.gradcheck.coords_per_param, f.coords);
      given(o["gc_seed"], rc.gradcheck.seed, f.seed);
    }

    if (!f.out.empty()) rc.output_dir = f.out;
    if (rc.output_dir.empty()) rc.output_dir = (std::filesystem::path(default_output_root()) / cmd).string();
    rc.validate();

    if (cmd == "generate") return cmd_generate(rc, out);
    if (cmd == "train") return cmd_train(rc, out);
    if (cmd == "eval") return cmd_eval(rc, out);
    if (cmd == "analyze") return cmd_analyze(rc, out);
    return cmd_gradcheck(rc, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace tdt::cli
