#pragma once

// Seeded synthetic classification corpora with a controllable spurious token.
//
// Every class owns a disjoint keyword set; an example carries k keywords of
// its class, noise fill, and (with probability rho, for designated classes) a
// class-specific spurious token. The anti-spurious split attaches the spurious
// token of a *different* designated class at the same rate.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace tdt::data {

enum class TokenFlag { keyword, spurious, noise };
std::string to_string(TokenFlag f);
TokenFlag parse_flag(const std::string& s);

inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;
inline constexpr int kSepId = 2;
inline constexpr int kMaskId = 3;
inline constexpr int kReservedTokens = 4;

struct TaskSpec {
  std::size_t n_classes = 4;
  std::size_t keywords_per_class = 5;
  std::size_t keywords_per_example = 2;  // k
  std::size_t vocab_size = 2000;
  std::size_t min_len = 8;  // ordinary tokens per example
  std::size_t max_len = 24;
  double rho = 0.95;
  // Classes owning a spurious token; empty means every class.
  std::vector<int> designated_classes;
  // Empty means uniform.
  std::vector<double> class_prior;

  void validate() const;
  std::vector<int> designated() const;
};

nlohmann::json to_json(const TaskSpec& s);
TaskSpec task_spec_from_json(const nlohmann::json& j);

// Token id layout derived from a TaskSpec: 4 reserved ids, then keywords
// (class-major), then one spurious id per designated class, then noise.
struct Vocabulary {
  std::vector<std::vector<int>> keywords;  // [class] -> ids
  std::vector<int> spurious;               // [class] -> id or -1
  std::vector<int> noise;
  std::size_t size = 0;

  static Vocabulary from_spec(const TaskSpec& spec);
  // Printable pseudo-word for an id; reserved ids map to [PAD] [CLS] [SEP] [MASK].
  std::string token_text(int id) const;
};

struct Example {
  std::vector<int> tokens;  // ordinary tokens only (no CLS / SEP)
  int label = 0;
  std::vector<TokenFlag> flags;

  bool operator==(const Example&) const = default;
};

struct Split {
  std::string name;
  std::vector<Example> examples;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
  bool operator==(const Split& o) const { return examples == o.examples; }
};

struct CorpusSizes {
  std::size_t train = 8000;
  std::size_t dev = 1000;
  std::size_t test_iid = 1000;
  std::size_t test_antispurious = 1000;
};

nlohmann::json to_json(const CorpusSizes& s);
CorpusSizes corpus_sizes_from_json(const nlohmann::json& j);

struct CorpusBundle {
  TaskSpec spec;
  std::uint64_t seed = 0;
  CorpusSizes sizes;
  Split train, dev, test_iid, test_antispurious;
};

// Deterministic in (spec, sizes, seed); each split draws from its own stream.
CorpusBundle generate_corpus(const TaskSpec& spec, const CorpusSizes& sizes, std::uint64_t seed);

struct SubsampleResult {
  Split split;
  std::vector<std::size_t> label_counts;
};
// Uniform sample of k examples without replacement. Throws if k > size.
SubsampleResult subsample(const Split& split, std::size_t k, std::uint64_t seed, std::size_t n_classes);

// {"tokens": [ids], "text": [strings], "label": int, "flags": [strings]} per line.
void write_jsonl(const Split& split, const Vocabulary& vocab, const std::string& path);
// Blank lines are skipped. Throws ParseError naming the 1-based line.
Split read_jsonl(const std::string& path);

// Many-to-one label mapping indexed by source label.
using LabelMapping = std::vector<int>;
LabelMapping identity_mapping(std::size_t n_classes);
// Throws IndexError for a label the mapping does not cover.
std::vector<int> label_map(std::span<const int> predictions, const LabelMapping& mapping);
// Copy of `split` with labels passed through `mapping`.
Split relabel(const Split& split, const LabelMapping& mapping);

// Rule-based classifier over provenance flags: the class owning the keywords.
int oracle_label(const Example& ex, const Vocabulary& vocab);
// Predicts a designated class iff its spurious token is present, else `fallback`.
int spurious_only_label(const Example& ex, const Vocabulary& vocab, int fallback);

}  // namespace tdt::data
