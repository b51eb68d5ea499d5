#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "tdt_cli/run_config.hpp"

namespace tdt::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

// Each command expects a validated RunConfig with output_dir set and writes
// config_snapshot.json next to its artifacts.
int cmd_generate(const RunConfig& rc, std::ostream& log);
int cmd_train(const RunConfig& rc, std::ostream& log);
int cmd_eval(const RunConfig& rc, std::ostream& log);
int cmd_analyze(const RunConfig& rc, std::ostream& log);
int cmd_gradcheck(const RunConfig& rc, std::ostream& log);

// Full command line (args[0] is the program name). Maps exceptions to exit codes.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct CorpusDir {
  data::TaskSpec spec;
  data::Split train, dev, test_iid, test_antispurious;
  const data::Split& split(const std::string& name) const;
};
CorpusDir load_corpus_dir(const std::string& dir);

struct GradcheckCell {
  std::string loss;   // l_cla | l_c | l_r | total
  std::string group;  // embeddings | layer0 | ... | head | confidence
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

struct GradcheckSuite {
  std::vector<GradcheckCell> cells;  // aggregated over the hyperparameter grid
  std::size_t combos = 0;
  double max_rel_error = 0.0;
  bool passed = true;
  std::vector<std::string> failing;  // "loss/group"
};

// Tiny random model (d_model 8, 2 layers, vocab 50, sequence length 12) checked
// for every loss over m in {0,2}, alpha in {0.5,2,4}, beta in {0.5,1}.
GradcheckSuite run_gradcheck_suite(const GradcheckConfig& cfg);

}  // namespace tdt::cli
