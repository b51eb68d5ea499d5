#include "tdt/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "tdt/errors.hpp"
#include "tdt/json_util.hpp"

namespace tdt::data {

using nlohmann::json;

std::string to_string(TokenFlag f) {
  switch (f) {
    case TokenFlag::keyword: return "keyword";
    case TokenFlag::spurious: return "spurious";
    case TokenFlag::noise: return "noise";
  }
  return "?";
}

TokenFlag parse_flag(const std::string& s) {
  if (s == "keyword") return TokenFlag::keyword;
  if (s == "spurious") return TokenFlag::spurious;
  if (s == "noise") return TokenFlag::noise;
  throw ParseError("unknown token flag \"" + s + "\"");
}

std::vector<int> TaskSpec::designated() const {
  if (!designated_classes.empty()) return designated_classes;
  std::vector<int> all(n_classes);
  std::iota(all.begin(), all.end(), 0);
  return all;
}

void TaskSpec::validate() const {
  if (n_classes < 2) throw ConfigError("task: n_classes must be >= 2");
  if (keywords_per_class == 0 || keywords_per_example == 0) throw ConfigError("task: keyword counts must be positive");
  if (keywords_per_example > keywords_per_class)
    throw ConfigError("task: keywords_per_example exceeds keywords_per_class");
  if (min_len > max_len) throw ConfigError("task: min_len > max_len");
  if (min_len < keywords_per_example + 1)
    throw ConfigError("task: min_len must leave room for the keywords and a spurious token");
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("task: rho must lie in [0, 1]");
  std::set<int> seen;
  for (int c : designated_classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= n_classes) throw ConfigError("task: designated class out of range");
    if (!seen.insert(c).second) throw ConfigError("task: duplicate designated class");
  }
  if (!class_prior.empty()) {
    if (class_prior.size() != n_classes) throw ConfigError("task: class_prior length must equal n_classes");
    double s = 0.0;
    for (double p : class_prior) {
      if (!(p >= 0.0)) throw ConfigError("task: class_prior entries must be >= 0");
      s += p;
    }
    if (!(s > 0.0)) throw ConfigError("task: class_prior must have positive mass");
  }
  const std::size_t needed = kReservedTokens + n_classes * keywords_per_class + designated().size() + 1;
  if (vocab_size < needed)
    throw ConfigError("task: vocabulary of " + std::to_string(vocab_size) + " is too small; need at least " +
                      std::to_string(needed) + " distinct tokens");
}

json to_json(const TaskSpec& s) {
  return json{{"n_classes", s.n_classes},
              {"keywords_per_class", s.keywords_per_class},
              {"keywords_per_example", s.keywords_per_example},
              {"vocab_size", s.vocab_size},
              {"min_len", s.min_len},
              {"max_len", s.max_len},
              {"rho", s.rho},
              {"designated_classes", s.designated_classes},
              {"class_prior", s.class_prior}};
}

TaskSpec task_spec_from_json(const json& j) {
  using json_util::read_opt;
  constexpr auto ctx = "task";
  json_util::reject_unknown_keys(j,
                                 {"n_classes", "keywords_per_class", "keywords_per_example", "vocab_size", "min_len",
                                  "max_len", "rho", "designated_classes", "class_prior"},
                                 ctx);
  TaskSpec s;
  read_opt(j, "n_classes", s.n_classes, ctx);
  read_opt(j, "keywords_per_class", s.keywords_per_class, ctx);
  read_opt(j, "keywords_per_example", s.keywords_per_example, ctx);
  read_opt(j, "vocab_size", s.vocab_size, ctx);
  read_opt(j, "min_len", s.min_len, ctx);
  read_opt(j, "max_len", s.max_len, ctx);
  read_opt(j, "rho", s.rho, ctx);
  read_opt(j, "designated_classes", s.designated_classes, ctx);
  read_opt(j, "class_prior", s.class_prior, ctx);
  s.validate();
  return s;
}

json to_json(const CorpusSizes& s) {
  return json{{"train", s.train}, {"dev", s.dev}, {"test_iid", s.test_iid}, {"test_antispurious", s.test_antispurious}};
}

CorpusSizes corpus_sizes_from_json(const json& j) {
  using json_util::read_opt;
  constexpr auto ctx = "sizes";
  json_util::reject_unknown_keys(j, {"train", "dev", "test_iid", "test_antispurious"}, ctx);
  CorpusSizes s;
  read_opt(j, "train", s.train, ctx);
  read_opt(j, "dev", s.dev, ctx);
  read_opt(j, "test_iid", s.test_iid, ctx);
  read_opt(j, "test_antispurious", s.test_antispurious, ctx);
  return s;
}

Vocabulary Vocabulary::from_spec(const TaskSpec& spec) {
  spec.validate();
  Vocabulary v;
  v.size = spec.vocab_size;
  int next = kReservedTokens;
  v.keywords.resize(spec.n_classes);
  for (auto& kw : v.keywords)
    for (std::size_t i = 0; i < spec.keywords_per_class; ++i) kw.push_back(next++);
  v.spurious.assign(spec.n_classes, -1);
  for (int c : spec.designated()) v.spurious[static_cast<std::size_t>(c)] = next++;
  for (int id = next; id < static_cast<int>(spec.vocab_size); ++id) v.noise.push_back(id);
  return v;
}

std::string Vocabulary::token_text(int id) const {
  static constexpr const char* reserved[] = {"[PAD]", "[CLS]", "[SEP]", "[MASK]"};
  if (id >= 0 && id < kReservedTokens) return reserved[id];
  // Bijective base-20 consonant-vowel syllables; distinct ids give distinct words.
  static constexpr const char* syllables[] = {"ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "vu", "we",
                                              "ba", "de", "fi", "go", "hu", "ja", "ke", "li", "mo", "ny"};
  std::string word;
  int n = id - kReservedTokens;
  do {
    word = std::string(syllables[n % 20]) + word;
    n = n / 20 - 1;
  } while (n >= 0);
  return word;
}

namespace {

std::mt19937_64 split_stream(std::uint64_t seed, std::uint32_t split_index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), split_index, 0x7d7u};
  return std::mt19937_64(seq);
}

enum class SpuriousRule { correlated, anti };

Split make_split(const std::string& name, const TaskSpec& spec, const Vocabulary& vocab, std::size_t n,
                 SpuriousRule rule, std::mt19937_64& rng) {
  Split split;
  split.name = name;
  std::vector<double> prior = spec.class_prior.empty() ? std::vector<double>(spec.n_classes, 1.0) : spec.class_prior;
  std::discrete_distribution<int> label_dist(prior.begin(), prior.end());
  std::uniform_int_distribution<std::size_t> len_dist(spec.min_len, spec.max_len);
  std::uniform_int_distribution<std::size_t> noise_dist(0, vocab.noise.size() - 1);
  std::bernoulli_distribution spurious_coin(spec.rho);
  const auto designated = spec.designated();

  for (std::size_t i = 0; i < n; ++i) {
    Example ex;
    ex.label = label_dist(rng);
    const std::size_t len = len_dist(rng);
    std::vector<std::pair<int, TokenFlag>> toks;
    std::vector<int> kws;
    const auto& pool = vocab.keywords[static_cast<std::size_t>(ex.label)];
    std::sample(pool.begin(), pool.end(), std::back_inserter(kws), spec.keywords_per_example, rng);
    for (int k : kws) toks.emplace_back(k, TokenFlag::keyword);

    if (rule == SpuriousRule::correlated) {
      int sp = vocab.spurious[static_cast<std::size_t>(ex.label)];
      if (sp >= 0 && spurious_coin(rng)) toks.emplace_back(sp, TokenFlag::spurious);
    } else {
      std::vector<int> others;
      for (int c : designated)
        if (c != ex.label) others.push_back(c);
      if (!others.empty() && spurious_coin(rng)) {
        std::uniform_int_distribution<std::size_t> pick(0, others.size() - 1);
        toks.emplace_back(vocab.spurious[static_cast<std::size_t>(others[pick(rng)])], TokenFlag::spurious);
      }
    }
    while (toks.size() < len) toks.emplace_back(vocab.noise[noise_dist(rng)], TokenFlag::noise);
    std::shuffle(toks.begin(), toks.end(), rng);
    for (auto& [id, flag] : toks) {
      ex.tokens.push_back(id);
      ex.flags.push_back(flag);
    }
    split.examples.push_back(std::move(ex));
  }
  return split;
}

}  // namespace

CorpusBundle generate_corpus(const TaskSpec& spec, const CorpusSizes& sizes, std::uint64_t seed) {
  spec.validate();
  const Vocabulary vocab = Vocabulary::from_spec(spec);
  CorpusBundle out;
  out.spec = spec;
  out.seed = seed;
  out.sizes = sizes;
  auto r0 = split_stream(seed, 0), r1 = split_stream(seed, 1), r2 = split_stream(seed, 2), r3 = split_stream(seed, 3);
  out.train = make_split("train", spec, vocab, sizes.train, SpuriousRule::correlated, r0);
  out.dev = make_split("dev", spec, vocab, sizes.dev, SpuriousRule::correlated, r1);
  out.test_iid = make_split("test_iid", spec, vocab, sizes.test_iid, SpuriousRule::correlated, r2);
  out.test_antispurious = make_split("test_antispurious", spec, vocab, sizes.test_antispurious, SpuriousRule::anti, r3);
  return out;
}

SubsampleResult subsample(const Split& split, std::size_t k, std::uint64_t seed, std::size_t n_classes) {
  if (k > split.size())
    throw std::invalid_argument("subsample: k = " + std::to_string(k) + " exceeds split size " +
                                std::to_string(split.size()));
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> idx(split.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  SubsampleResult out;
  out.split.name = split.name;
  out.label_counts.assign(n_classes, 0);
  for (auto i : idx) {
    const auto& ex = split.examples[i];
    out.split.examples.push_back(ex);
    if (ex.label >= 0 && static_cast<std::size_t>(ex.label) < n_classes) ++out.label_counts[static_cast<std::size_t>(ex.label)];
  }
  return out;
}

void write_jsonl(const Split& split, const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& ex : split.examples) {
    json line;
    line["tokens"] = ex.tokens;
    std::vector<std::string> text, flags;
    for (int id : ex.tokens) text.push_back(vocab.token_text(id));
    for (auto f : ex.flags) flags.push_back(to_string(f));
    line["text"] = text;
    line["label"] = ex.label;
    line["flags"] = flags;
    out << line.dump() << '\n';
  }
  if (!out) throw IoError("failed writing " + path);
}

Split read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  Split split;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      json j = json::parse(line);
      if (!j.is_object()) throw ParseError("expected a JSON object", lineno);
      if (!j.contains("tokens")) throw ParseError("missing \"tokens\"", lineno);
      if (!j.contains("label")) throw ParseError("missing \"label\"", lineno);
      Example ex;
      ex.tokens = j.at("tokens").get<std::vector<int>>();
      ex.label = j.at("label").get<int>();
      if (j.contains("flags")) {
        for (const auto& f : j.at("flags")) ex.flags.push_back(parse_flag(f.get<std::string>()));
        if (ex.flags.size() != ex.tokens.size()) throw ParseError("\"flags\" length differs from \"tokens\"", lineno);
      } else {
        ex.flags.assign(ex.tokens.size(), TokenFlag::noise);
      }
      split.examples.push_back(std::move(ex));
    } catch (const ParseError& e) {
      if (e.line()) throw;
      throw ParseError(e.what(), lineno);
    } catch (const json::exception& e) {
      throw ParseError(std::string("malformed record: ") + e.what(), lineno);
    }
  }
  return split;
}

LabelMapping identity_mapping(std::size_t n_classes) {
  LabelMapping m(n_classes);
  std::iota(m.begin(), m.end(), 0);
  return m;
}

std::vector<int> label_map(std::span<const int> predictions, const LabelMapping& mapping) {
  std::vector<int> out;
  out.reserve(predictions.size());
  for (int p : predictions) {
    if (p < 0 || static_cast<std::size_t>(p) >= mapping.size() || mapping[static_cast<std::size_t>(p)] < 0)
      throw IndexError("label " + std::to_string(p) + " has no mapping");
    out.push_back(mapping[static_cast<std::size_t>(p)]);
  }
  return out;
}

Split relabel(const Split& split, const LabelMapping& mapping) {
  Split out = split;
  for (auto& ex : out.examples) ex.label = label_map(std::span<const int>(&ex.label, 1), mapping)[0];
  return out;
}

int oracle_label(const Example& ex, const Vocabulary& vocab) {
  for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
    if (ex.flags[i] != TokenFlag::keyword) continue;
    for (std::size_t c = 0; c < vocab.keywords.size(); ++c)
      if (std::find(vocab.keywords[c].begin(), vocab.keywords[c].end(), ex.tokens[i]) != vocab.keywords[c].end())
        return static_cast<int>(c);
  }
  return -1;
}

int spurious_only_label(const Example& ex, const Vocabulary& vocab, int fallback) {
  for (int id : ex.tokens)
    for (std::size_t c = 0; c < vocab.spurious.size(); ++c)
      if (vocab.spurious[c] >= 0 && vocab.spurious[c] == id) return static_cast<int>(c);
  return fallback;
}

}  // namespace tdt::data
