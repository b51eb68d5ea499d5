#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tdt/analysis.hpp"
#include "tdt/errors.hpp"
#include "tdt/trainer.hpp"

using namespace tdt;
using namespace tdt::analysis;
namespace fs = std::filesystem;

namespace {

data::TaskSpec easy_spec() {
  data::TaskSpec s;
  s.n_classes = 3;
  s.keywords_per_class = 3;
  s.keywords_per_example = 1;
  s.vocab_size = 80;
  s.min_len = 4;
  s.max_len = 8;
  return s;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

class AnalysisTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    spec_ = easy_spec();
    corpus_ = data::generate_corpus(spec_, {600, 100, 150, 150}, 11);
    model::ModelConfig m;
    m.vocab_size = spec_.vocab_size;
    m.n_classes = spec_.n_classes;
    m.d_model = 16;
    m.n_layers = 1;
    m.n_heads = 2;
    m.d_ff = 32;
    m.max_len = spec_.max_len + 2;
    train::TrainConfig t;
    t.total_steps = 200;
    t.warmup_steps = 20;
    t.lr = 3e-3;
    t.batch_size = 16;
    t.eval_interval = 0;
    tdt_ = new train::TrainResult(train::train(corpus_.train, corpus_.dev, m, objective::TDTConfig{}, t));
    objective::TDTConfig v;
    v.alpha = v.beta = 0.0;
    vanilla_ = new train::TrainResult(train::train(corpus_.train, corpus_.dev, m, v, t));
  }
  static void TearDownTestSuite() {
    delete tdt_;
    delete vanilla_;
  }

  static const model::ModelParams& tdt_params() { return tdt_->params; }

  static data::TaskSpec spec_;
  static data::CorpusBundle corpus_;
  static train::TrainResult* tdt_;
  static train::TrainResult* vanilla_;
};

data::TaskSpec AnalysisTest::spec_;
data::CorpusBundle AnalysisTest::corpus_;
train::TrainResult* AnalysisTest::tdt_ = nullptr;
train::TrainResult* AnalysisTest::vanilla_ = nullptr;

const std::vector<double> kRates = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6};

}  // namespace

TEST(DropTokens, CeilCountAndPositionTieBreak) {
  data::Split s;
  s.examples.push_back({{10, 11, 12, 13, 14}, 0, std::vector<data::TokenFlag>(5, data::TokenFlag::noise)});
  std::vector<std::vector<double>> scores = {{0.2, 0.5, 0.5, 0.1, 0.5}};
  auto d = drop_tokens(s, scores, DropOrder::descending, 0.3, 3);  // ceil(1.5) = 2
  EXPECT_EQ(d.examples[0].tokens, (std::vector<int>{10, 3, 3, 13, 14}));
  auto a = drop_tokens(s, scores, DropOrder::ascending, 0.3, 3);
  EXPECT_EQ(a.examples[0].tokens, (std::vector<int>{3, 11, 12, 3, 14}));
  auto exact = drop_tokens(s, scores, DropOrder::descending, 0.4, 3);  // exactly 2, no float overshoot
  EXPECT_EQ(std::count(exact.examples[0].tokens.begin(), exact.examples[0].tokens.end(), 3), 2);
  EXPECT_EQ(drop_tokens(s, scores, DropOrder::descending, 0.0, 3), s);
  EXPECT_THROW(drop_tokens(s, scores, DropOrder::descending, 1.5, 3), std::invalid_argument);
}

TEST(DropOrder, Parse) {
  EXPECT_EQ(parse_drop_order("ascending"), DropOrder::ascending);
  EXPECT_THROW(parse_drop_order("sideways"), ConfigError);
}

TEST_F(AnalysisTest, DropRateZeroEqualsEvaluate) {
  const double base = train::evaluate(tdt_params(), corpus_.test_iid).accuracy;
  for (auto order : {DropOrder::descending, DropOrder::ascending}) {
    auto c = drop_curve(tdt_params(), corpus_.test_iid, order, kRates);
    ASSERT_EQ(c.x.size(), 7u);
    EXPECT_EQ(c.y[0], base);
    EXPECT_FALSE(c.uniform_scores);
  }
}

TEST_F(AnalysisTest, FullDropIsOrderIndependent) {
  auto d = drop_curve(tdt_params(), corpus_.test_iid, DropOrder::descending, {0.5, 1.0});
  auto a = drop_curve(tdt_params(), corpus_.test_iid, DropOrder::ascending, {0.5, 1.0});
  EXPECT_EQ(d.y[1], a.y[1]);
}

TEST_F(AnalysisTest, DropCurveIsDeterministicAndValidatesRates) {
  auto a = drop_curve(tdt_params(), corpus_.test_iid, DropOrder::descending, kRates);
  auto b = drop_curve(tdt_params(), corpus_.test_iid, DropOrder::descending, kRates);
  EXPECT_EQ(a.y, b.y);
  DropOptions soft;
  soft.softmax_normalize = true;
  auto c = drop_curve(tdt_params(), corpus_.test_iid, DropOrder::descending, kRates, soft);
  EXPECT_EQ(c.y.size(), 7u);
  EXPECT_THROW(drop_curve(tdt_params(), corpus_.test_iid, DropOrder::descending, {0.2, 0.1}), std::invalid_argument);
  EXPECT_THROW(drop_curve(tdt_params(), corpus_.test_iid, DropOrder::descending, {0.2, 1.2}), std::invalid_argument);
}

TEST_F(AnalysisTest, VanillaCheckpointFallsBackToUniformScores) {
  ASSERT_FALSE(vanilla_->params.confidence_trained);
  auto c = drop_curve(vanilla_->params, corpus_.test_iid, DropOrder::descending, kRates);
  EXPECT_TRUE(c.uniform_scores);
  EXPECT_EQ(c.y[0], train::evaluate(vanilla_->params, corpus_.test_iid).accuracy);
}

TEST_F(AnalysisTest, PerturbRateZeroMatchesBase) {
  const double base = train::evaluate(tdt_params(), corpus_.test_iid).accuracy;
  auto r = perturb_eval(tdt_params(), corpus_.test_iid, 0.0, 10, 3);
  ASSERT_EQ(r.accuracies.size(), 10u);
  for (double a : r.accuracies) EXPECT_EQ(a, base);
  EXPECT_EQ(r.sd, 0.0);
}

TEST_F(AnalysisTest, PerturbIsSeeded) {
  auto a = perturb_eval(tdt_params(), corpus_.test_iid, 0.3, 10, 5);
  auto b = perturb_eval(tdt_params(), corpus_.test_iid, 0.3, 10, 5);
  EXPECT_EQ(a.accuracies, b.accuracies);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_LE(a.min, a.mean);
  EXPECT_GE(a.max, a.mean);
  for (double x : a.accuracies) {
    EXPECT_GE(x, 0.0);
    EXPECT_LE(x, 1.0);
  }
}

TEST_F(AnalysisTest, PerturbSplitReplacesWithMaskOrInSequenceTokens) {
  auto p = perturb_split(corpus_.test_iid, 0.5, 9, 0, data::kMaskId);
  std::size_t changed = 0, total = 0, masked = 0;
  for (std::size_t e = 0; e < p.size(); ++e) {
    const auto& src = corpus_.test_iid.examples[e].tokens;
    const auto& dst = p.examples[e].tokens;
    ASSERT_EQ(src.size(), dst.size());
    for (std::size_t i = 0; i < src.size(); ++i) {
      ++total;
      if (dst[i] == src[i]) continue;
      ++changed;
      if (dst[i] == data::kMaskId) ++masked;
      else EXPECT_NE(std::find(src.begin(), src.end(), dst[i]), src.end());
    }
  }
  EXPECT_GT(changed, total / 4);
  EXPECT_GT(masked, changed / 3);
  EXPECT_FALSE(perturb_split(corpus_.test_iid, 0.5, 9, 1, data::kMaskId) == p);
}

TEST_F(AnalysisTest, HistogramConservesTokens) {
  auto h = confidence_histogram(tdt_params(), corpus_.test_iid, 20);
  std::size_t ordinary = 0;
  for (const auto& ex : corpus_.test_iid.examples) ordinary += ex.tokens.size();
  std::size_t sum = 0;
  for (auto c : h.counts) sum += c;
  EXPECT_EQ(sum, ordinary);
  EXPECT_EQ(h.total, ordinary);
  EXPECT_EQ(h.n_keyword + h.n_spurious + h.n_noise, ordinary);
  EXPECT_EQ(h.edges.size(), 21u);
  EXPECT_THROW(confidence_histogram(tdt_params(), corpus_.test_iid, 0), std::invalid_argument);
}

TEST_F(AnalysisTest, ZeroHeadPutsAllMassInHalfBin) {
  auto p = tdt_params().clone();
  for (auto& v : p.conf_w.mutable_data()) v = 0.0;
  for (auto& v : p.conf_b.mutable_data()) v = 0.0;
  for (std::size_t bins : {1u, 7u, 20u}) {
    auto h = confidence_histogram(p, corpus_.test_iid, bins);
    for (std::size_t i = 0; i < bins; ++i) {
      const bool holds_half = h.edges[i] <= 0.5 && (0.5 < h.edges[i + 1] || i + 1 == bins);
      EXPECT_EQ(h.counts[i], holds_half ? h.total : 0u) << "bins " << bins << " bin " << i;
    }
  }
}

TEST_F(AnalysisTest, ExportHasThreeRowsPerExample) {
  auto path = fs::temp_directory_path() / "tdt_reprs.csv";
  export_representations(tdt_params(), corpus_.test_iid, objective::TDTConfig{}, path.string());
  auto lines = read_lines(path);
  ASSERT_EQ(lines.size(), 1 + 3 * corpus_.test_iid.size());
  EXPECT_EQ(lines[0].substr(0, 22), "example,variant,label,");
  for (std::size_t i = 1; i < lines.size(); ++i) {
    EXPECT_EQ(std::count(lines[i].begin(), lines[i].end(), ','), 3 + 16 - 1);
    std::stringstream ss(lines[i]);
    std::string ex, variant, label, v;
    std::getline(ss, ex, ',');
    std::getline(ss, variant, ',');
    std::getline(ss, label, ',');
    EXPECT_EQ(std::stoul(ex), (i - 1) / 3);
    EXPECT_EQ(variant, std::string((i - 1) % 3 == 0 ? "original" : (i - 1) % 3 == 1 ? "positive" : "negative"));
    std::size_t cols = 0;
    while (std::getline(ss, v, ',')) {
      EXPECT_TRUE(std::isfinite(std::stod(v)));
      ++cols;
    }
    EXPECT_EQ(cols, 16u);
  }
  fs::remove(path);
}

TEST_F(AnalysisTest, ExportPositiveEqualsOriginalWhenEveryTokenKept) {
  auto p = tdt_params().clone();
  for (auto& v : p.conf_w.mutable_data()) v = 0.0;
  for (auto& v : p.conf_b.mutable_data()) v = 60.0;  // sigmoid rounds to exactly 1
  auto path = fs::temp_directory_path() / "tdt_reprs_keep.csv";
  export_representations(p, corpus_.test_iid, objective::TDTConfig{}, path.string());
  auto lines = read_lines(path);
  for (std::size_t e = 0; e < corpus_.test_iid.size(); ++e) {
    auto orig = lines[1 + 3 * e], pos = lines[2 + 3 * e];
    EXPECT_EQ(orig.substr(orig.find(',', orig.find(',') + 1)), pos.substr(pos.find(',', pos.find(',') + 1)));
  }
  fs::remove(path);
}

TEST_F(AnalysisTest, DomainEvalIdentityMatchesEvaluate) {
  const double base = train::evaluate(tdt_params(), corpus_.test_iid).accuracy;
  EXPECT_EQ(domain_eval(tdt_params(), corpus_.test_iid, data::identity_mapping(3)), base);
  // mapping every prediction onto class 0 scores the share of class-0 labels
  double zeros = 0;
  for (const auto& ex : corpus_.test_iid.examples) zeros += ex.label == 0;
  EXPECT_EQ(domain_eval(tdt_params(), corpus_.test_iid, {0, 0, 0}), zeros / static_cast<double>(corpus_.test_iid.size()));
  EXPECT_THROW(domain_eval(tdt_params(), corpus_.test_iid, {0, 1}), IndexError);
}

TEST_F(AnalysisTest, AnalysesAreReadOnly) {
  const auto before = model::parameter_digest(tdt_params());
  drop_curve(tdt_params(), corpus_.test_iid, DropOrder::descending, kRates);
  perturb_eval(tdt_params(), corpus_.test_iid, 0.2, 3, 1);
  confidence_histogram(tdt_params(), corpus_.test_iid, 10);
  auto path = fs::temp_directory_path() / "tdt_reprs_ro.csv";
  export_representations(tdt_params(), corpus_.test_iid, objective::TDTConfig{}, path.string());
  fs::remove(path);
  domain_eval(tdt_params(), corpus_.test_antispurious, data::identity_mapping(3));
  EXPECT_EQ(model::parameter_digest(tdt_params()), before);
}

TEST_F(AnalysisTest, CsvWritersUseDocumentedColumns) {
  auto dir = fs::temp_directory_path();
  auto c = drop_curve(tdt_params(), corpus_.test_iid, DropOrder::ascending, kRates);
  write_curves_csv({c}, (dir / "tdt_c.csv").string());
  auto lines = read_lines(dir / "tdt_c.csv");
  EXPECT_EQ(lines[0], "rate,accuracy,order");
  EXPECT_EQ(lines.size(), 8u);
  EXPECT_NE(lines[1].find(",ascending"), std::string::npos);
  write_reports_csv({perturb_eval(tdt_params(), corpus_.test_iid, 0.1, 10, 0)}, (dir / "tdt_r.csv").string());
  lines = read_lines(dir / "tdt_r.csv");
  EXPECT_EQ(lines[0], "rate,seed,accuracy");
  EXPECT_EQ(lines.size(), 11u);
  write_histogram_csv(confidence_histogram(tdt_params(), corpus_.test_iid, 5), (dir / "tdt_h.csv").string());
  lines = read_lines(dir / "tdt_h.csv");
  EXPECT_EQ(lines[0], "bin_low,bin_high,count");
  EXPECT_EQ(lines.size(), 6u);
  EXPECT_THROW(write_histogram_csv(Histogram{}, "/nonexistent/dir/h.csv"), IoError);
  for (auto n : {"tdt_c.csv", "tdt_r.csv", "tdt_h.csv"}) fs::remove(dir / n);
}
