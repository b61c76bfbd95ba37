#include "tokensel/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_map>

#include "tokensel/io.hpp"
#include "tokensel/rng.hpp"

namespace tokensel {

// ---------------------------------------------------------------------------
// K-level model

std::size_t KLevelConfig::vocab_size() const {
  return size_irrelevant + std::accumulate(sizes_pos.begin(), sizes_pos.end(), std::size_t{0}) +
         std::accumulate(sizes_neg.begin(), sizes_neg.end(), std::size_t{0});
}

void KLevelConfig::validate() const {
  const std::size_t K = deltas.size();
  if (sizes_pos.size() != K || sizes_neg.size() != K)
    throw ConfigError("K-level config: need one positive and one negative size per level");
  for (std::size_t k = 0; k < K; ++k) {
    if (sizes_pos[k] != sizes_neg[k])
      throw ConfigError("K-level config: level " + std::to_string(k + 1) +
                        " has asymmetric sizes; the conditional law only normalizes when "
                        "positive and negative sizes match per level");
    if (sizes_pos[k] == 0) throw ConfigError("K-level config: empty level " + std::to_string(k + 1));
    if (!(deltas[k] > 0.0 && deltas[k] <= 0.5))
      throw ConfigError("K-level config: delta_k must lie in (0, 1/2]");
  }
  if (!(delta_tilde >= 0.0 && delta_tilde <= 1.0))
    throw ConfigError("K-level config: delta_tilde must lie in [0, 1]");
  if (delta_tilde < 1.0 && size_irrelevant == 0)
    throw ConfigError("K-level config: irrelevant mass without irrelevant tokens");
  if (delta_tilde > 0.0 && K == 0)
    throw ConfigError("K-level config: relevant mass without levels");
  if (length == 0) throw ConfigError("K-level config: sequence length must be positive");
  if (!(label_prior > 0.0 && label_prior < 1.0))
    throw ConfigError("K-level config: label prior must lie in (0, 1)");
}

KLevelConfig KLevelConfig::paper_defaults() {
  KLevelConfig cfg;
  cfg.deltas = {0.45, 0.35, 0.3, 0.25, 0.2, 0.1, 0.05, 0.02};
  for (std::size_t k = 1; k <= 8; ++k) {
    cfg.sizes_pos.push_back(4 + (std::size_t{1} << k));
    cfg.sizes_neg.push_back(4 + (std::size_t{1} << k));
  }
  cfg.size_irrelevant = 964;
  cfg.delta_tilde = 0.05;
  cfg.length = 256;
  cfg.label_prior = 0.5;
  return cfg;
}

TokenId KLevelConfig::first_token(int level, int sign) const {
  if (level == 0) return 0;
  std::size_t offset = size_irrelevant;
  for (int k = 1; k < level; ++k) offset += sizes_pos[k - 1] + sizes_neg[k - 1];
  if (sign < 0) offset += sizes_pos[level - 1];
  return static_cast<TokenId>(offset);
}

KLevelConfig::TokenClass KLevelConfig::class_of(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_size())
    throw InputError("token id outside K-level vocabulary");
  auto rest = static_cast<std::size_t>(id);
  if (rest < size_irrelevant) return {0, 0};
  rest -= size_irrelevant;
  for (std::size_t k = 0; k < levels(); ++k) {
    if (rest < sizes_pos[k]) return {static_cast<int>(k + 1), +1};
    rest -= sizes_pos[k];
    if (rest < sizes_neg[k]) return {static_cast<int>(k + 1), -1};
    rest -= sizes_neg[k];
  }
  throw InputError("token id outside K-level vocabulary");
}

std::vector<double> KLevelConfig::token_probabilities(int label) const {
  validate();
  const double same_total = static_cast<double>(
      std::accumulate(label > 0 ? sizes_pos.begin() : sizes_neg.begin(),
                      label > 0 ? sizes_pos.end() : sizes_neg.end(), std::size_t{0}));
  const double other_total = static_cast<double>(
      std::accumulate(label > 0 ? sizes_neg.begin() : sizes_pos.begin(),
                      label > 0 ? sizes_neg.end() : sizes_pos.end(), std::size_t{0}));
  std::vector<double> probs(vocab_size(), 0.0);
  for (std::size_t s = 0; s < probs.size(); ++s) {
    const auto cls = class_of(static_cast<TokenId>(s));
    if (cls.level == 0) {
      probs[s] = (1.0 - delta_tilde) / static_cast<double>(size_irrelevant);
    } else {
      const double dk = deltas[cls.level - 1];
      probs[s] = cls.sign == label ? delta_tilde * (1.0 - dk) / same_total
                                   : delta_tilde * dk / other_total;
    }
  }
  return probs;
}

double KLevelConfig::posterior_positive(TokenId id) const {
  const auto cls = class_of(id);
  if (cls.level == 0) return label_prior;
  const double dk = deltas[cls.level - 1];
  // Levels are symmetric in size, so the per-token likelihoods share a denominator.
  const double like_pos = cls.sign > 0 ? 1.0 - dk : dk;
  const double like_neg = cls.sign > 0 ? dk : 1.0 - dk;
  return label_prior * like_pos / (label_prior * like_pos + (1.0 - label_prior) * like_neg);
}

std::vector<std::string> KLevelConfig::token_names() const {
  std::vector<std::string> names;
  names.reserve(vocab_size());
  for (std::size_t s = 0; s < size_irrelevant; ++s) names.push_back("irr" + std::to_string(s));
  for (std::size_t k = 0; k < levels(); ++k) {
    for (std::size_t s = 0; s < sizes_pos[k]; ++s)
      names.push_back("k" + std::to_string(k + 1) + "p" + std::to_string(s));
    for (std::size_t s = 0; s < sizes_neg[k]; ++s)
      names.push_back("k" + std::to_string(k + 1) + "n" + std::to_string(s));
  }
  return names;
}

namespace {

std::vector<double> cumulative(const std::vector<double>& probs) {
  std::vector<double> cdf(probs.size());
  std::partial_sum(probs.begin(), probs.end(), cdf.begin());
  return cdf;
}

TokenId draw(const std::vector<double>& cdf, Rng& rng) {
  const double u = rng.uniform() * cdf.back();
  auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  if (it == cdf.end()) {
    --it;
    while (it != cdf.begin() && *it == *(it - 1)) --it;  // last token may carry no mass
  }
  return static_cast<TokenId>(it - cdf.begin());
}

}  // namespace

LabeledDataset sample_klevel(const KLevelConfig& cfg, std::size_t n, std::uint64_t seed) {
  cfg.validate();
  if (n == 0) throw ConfigError("sample count must be positive");
  const auto cdf_pos = cumulative(cfg.token_probabilities(+1));
  const auto cdf_neg = cumulative(cfg.token_probabilities(-1));

  LabeledDataset data;
  data.vocab.size = cfg.vocab_size();
  data.vocab.names = cfg.token_names();
  data.examples.resize(n);
  const Rng base(seed);
  for (std::size_t k = 0; k < n; ++k) {
    Rng rng = base.stream(k);
    Example& ex = data.examples[k];
    ex.label = rng.uniform() < cfg.label_prior ? +1 : -1;
    const auto& cdf = ex.label > 0 ? cdf_pos : cdf_neg;
    ex.tokens.resize(cfg.length);
    for (auto& t : ex.tokens) t = draw(cdf, rng);
  }
  return data;
}

// ---------------------------------------------------------------------------
// Single-relevant-token datasets

void AssumptionOneConfig::validate() const {
  if (num_relevant_pos == 0 || num_relevant_neg == 0)
    throw ConfigError("need at least one positive and one negative relevant token");
  if (num_irrelevant == 0) throw ConfigError("need at least one irrelevant token");
  if (length < 2) throw ConfigError("sequence length must be at least 2");
  if (n < 2 || n % 2 != 0)
    throw ConfigError("n must be even: filler tokens are balanced across label pairs");
}

std::vector<std::string> AssumptionOneConfig::token_names() const {
  std::vector<std::string> names;
  for (std::size_t s = 0; s < num_relevant_pos; ++s) names.push_back("pos" + std::to_string(s));
  for (std::size_t s = 0; s < num_relevant_neg; ++s) names.push_back("neg" + std::to_string(s));
  for (std::size_t s = 0; s < num_irrelevant; ++s) names.push_back("irr" + std::to_string(s));
  return names;
}

LabeledDataset sample_assumption_one(const AssumptionOneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t pairs = cfg.n / 2;
  const Rng base(seed);
  Rng setup = base.stream(~std::uint64_t{0});

  std::vector<TokenId> pos_pool(cfg.num_relevant_pos), neg_pool(cfg.num_relevant_neg);
  std::iota(pos_pool.begin(), pos_pool.end(), 0);
  std::iota(neg_pool.begin(), neg_pool.end(), static_cast<TokenId>(cfg.num_relevant_pos));
  setup.shuffle(pos_pool.begin(), pos_pool.end());
  setup.shuffle(neg_pool.begin(), neg_pool.end());
  const auto irrelevant_base = static_cast<TokenId>(cfg.num_relevant_pos + cfg.num_relevant_neg);

  LabeledDataset data;
  data.vocab.size = cfg.vocab_size();
  data.vocab.names = cfg.token_names();
  data.examples.reserve(cfg.n);
  for (std::size_t i = 0; i < pairs; ++i) {
    Rng rng = base.stream(i);
    std::vector<TokenId> filler(cfg.length - 1);
    for (auto& t : filler)
      t = irrelevant_base + static_cast<TokenId>(rng.below(cfg.num_irrelevant));
    for (int label : {+1, -1}) {
      Example ex;
      ex.label = label;
      ex.tokens = filler;
      rng.shuffle(ex.tokens.begin(), ex.tokens.end());
      const TokenId relevant =
          label > 0 ? pos_pool[i % pos_pool.size()] : neg_pool[i % neg_pool.size()];
      const auto at = static_cast<std::ptrdiff_t>(rng.below(cfg.length));
      ex.tokens.insert(ex.tokens.begin() + at, relevant);
      data.examples.push_back(std::move(ex));
    }
  }
  setup.shuffle(data.examples.begin(), data.examples.end());
  return data;
}

// ---------------------------------------------------------------------------
// Statistics

const char* to_string(TokenCategory c) {
  switch (c) {
    case TokenCategory::positive: return "positive";
    case TokenCategory::negative: return "negative";
    case TokenCategory::irrelevant: return "irrelevant";
    case TokenCategory::completely_positive: return "completely_positive";
    case TokenCategory::completely_negative: return "completely_negative";
    case TokenCategory::absent: return "absent";
  }
  return "unknown";
}

std::vector<TokenId> TokenStats::completely_relevant() const {
  std::vector<TokenId> out;
  for (std::size_t s = 0; s < tokens.size(); ++s)
    if (tokens[s].completely_relevant()) out.push_back(static_cast<TokenId>(s));
  return out;
}

std::vector<double> TokenStats::alphas() const {
  std::vector<double> out(tokens.size());
  for (std::size_t s = 0; s < tokens.size(); ++s) out[s] = tokens[s].alpha;
  return out;
}

TokenStats compute_stats(const LabeledDataset& data) {
  data.validate();
  TokenStats stats;
  stats.tokens.resize(data.vocab.size);
  for (const auto& ex : data.examples)
    for (TokenId t : ex.tokens) (ex.label > 0 ? stats.tokens[t].count_pos : stats.tokens[t].count_neg)++;
  stats.total_tokens = data.total_tokens();
  const double total = static_cast<double>(stats.total_tokens);
  for (auto& st : stats.tokens) {
    const auto signed_count =
        static_cast<double>(st.count_pos) - static_cast<double>(st.count_neg);
    const auto occurrences = st.count_pos + st.count_neg;
    st.alpha = signed_count / total;
    st.posterior_diff = occurrences > 0 ? signed_count / static_cast<double>(occurrences) : 0.0;
    if (occurrences == 0)
      st.category = TokenCategory::absent;
    else if (st.count_neg == 0)
      st.category = TokenCategory::completely_positive;
    else if (st.count_pos == 0)
      st.category = TokenCategory::completely_negative;
    else if (st.count_pos > st.count_neg)
      st.category = TokenCategory::positive;
    else if (st.count_pos < st.count_neg)
      st.category = TokenCategory::negative;
    else
      st.category = TokenCategory::irrelevant;
  }
  return stats;
}

std::vector<TokenId> AssumptionOneReport::offending_tokens() const {
  std::vector<TokenId> out;
  for (const auto& o : offenses) out.insert(out.end(), o.tokens.begin(), o.tokens.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

AssumptionOneReport verify_assumption_one(const LabeledDataset& data) {
  const auto stats = compute_stats(data);
  AssumptionOneReport rep;
  for (std::size_t k = 0; k < data.size(); ++k) {
    const auto& ex = data.examples[k];
    std::vector<TokenId> relevant_positions, uneven;
    for (TokenId t : ex.tokens) {
      const auto& st = stats.tokens[t];
      if (st.completely_relevant())
        relevant_positions.push_back(t);
      else if (st.count_pos != st.count_neg)
        uneven.push_back(t);
    }
    auto flag = [&](std::string reason, std::vector<TokenId> tokens) {
      std::sort(tokens.begin(), tokens.end());
      tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
      rep.offenses.push_back({k, std::move(reason), std::move(tokens)});
    };
    if (!uneven.empty()) flag("token with nonzero signed frequency that is not completely relevant", uneven);
    if (relevant_positions.size() != 1) {
      flag("expected exactly one completely positive/negative token, found " +
               std::to_string(relevant_positions.size()),
           relevant_positions);
    } else {
      const auto cat = stats.tokens[relevant_positions.front()].category;
      const int sign = cat == TokenCategory::completely_positive ? +1 : -1;
      if (sign != ex.label) flag("relevant token sign disagrees with the label", relevant_positions);
    }
  }
  rep.pass = rep.offenses.empty();
  return rep;
}

// ---------------------------------------------------------------------------
// Corpus files

LabeledDataset parse_corpus(std::istream& in, std::size_t min_count) {
  struct RawExample {
    int label;
    std::vector<std::string> tokens;
  };
  std::vector<RawExample> raw;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("expected <label><TAB><tokens>", lineno);
    const std::string label = line.substr(0, tab);
    RawExample ex;
    if (label == "+1" || label == "1")
      ex.label = 1;
    else if (label == "-1")
      ex.label = -1;
    else
      throw ParseError("label must be +1 or -1, got '" + label + "'", lineno);
    std::istringstream words(line.substr(tab + 1));
    for (std::string w; words >> w;) ex.tokens.push_back(std::move(w));
    if (ex.tokens.empty()) throw ParseError("no tokens after label", lineno);
    raw.push_back(std::move(ex));
  }
  if (raw.empty()) throw InputError("corpus contains no examples");

  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& ex : raw)
    for (const auto& w : ex.tokens) ++counts[w];

  LabeledDataset data;
  std::unordered_map<std::string, TokenId> ids;
  for (const auto& ex : raw) {
    Example out;
    out.label = ex.label;
    for (const auto& w : ex.tokens) {
      if (counts[w] < min_count) continue;
      auto [it, fresh] = ids.try_emplace(w, static_cast<TokenId>(data.vocab.names.size()));
      if (fresh) data.vocab.names.push_back(w);
      out.tokens.push_back(it->second);
    }
    if (!out.tokens.empty()) data.examples.push_back(std::move(out));
  }
  data.vocab.size = data.vocab.names.size();
  if (data.vocab.size == 0) throw InputError("vocabulary is empty after purging rare tokens");
  return data;
}

LabeledDataset load_corpus(const std::filesystem::path& path, std::size_t min_count) {
  auto in = open_input(path);
  return parse_corpus(in, min_count);
}

void write_corpus(const LabeledDataset& data, std::ostream& out) {
  data.validate();
  for (const auto& ex : data.examples) {
    out << (ex.label > 0 ? "+1" : "-1") << '\t';
    for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
      if (i) out << ' ';
      out << data.vocab.name(ex.tokens[i]);
    }
    out << '\n';
  }
}

void write_corpus(const LabeledDataset& data, const std::filesystem::path& path) {
  auto out = open_output(path);
  write_corpus(data, out);
  if (!out) throw IoError("write failed", path);
}

void write_stats_csv(const TokenStats& stats, const Vocabulary& vocab, std::ostream& out) {
  out << "token,count_pos,count_neg,alpha,posterior_diff,category\n";
  for (std::size_t s = 0; s < stats.tokens.size(); ++s) {
    const auto& st = stats.tokens[s];
    out << csv_field(vocab.name(static_cast<TokenId>(s))) << ',' << st.count_pos << ','
        << st.count_neg << ',' << format_double(st.alpha) << ','
        << format_double(st.posterior_diff) << ',' << to_string(st.category) << '\n';
  }
}

}  // namespace tokensel
