#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "tokensel/types.hpp"

namespace tokensel {

// K-level synthetic model. Token ids are laid out as
// [irrelevant | level 1 positive | level 1 negative | level 2 positive | ...].
struct KLevelConfig {
  std::vector<std::size_t> sizes_pos;
  std::vector<std::size_t> sizes_neg;
  std::size_t size_irrelevant = 0;
  double delta_tilde = 0.05;
  std::vector<double> deltas;
  std::size_t length = 1;
  double label_prior = 0.5;  // P(y = +1)

  std::size_t levels() const { return deltas.size(); }
  std::size_t vocab_size() const;
  void validate() const;  // throws ConfigError

  // |S| = 2048, K = 8, T = 256, 964 irrelevant tokens, level sizes 4 + 2^k.
  static KLevelConfig paper_defaults();

  struct TokenClass {
    int level = 0;  // 0 for irrelevant, 1..K otherwise
    int sign = 0;   // +1 / -1 for level tokens, 0 for irrelevant
  };
  TokenClass class_of(TokenId id) const;
  TokenId first_token(int level, int sign) const;

  // p(s | y) for every token id.
  std::vector<double> token_probabilities(int label) const;
  // P(y = +1 | s) implied by the conditional law and the label prior.
  double posterior_positive(TokenId id) const;

  std::vector<std::string> token_names() const;
};

LabeledDataset sample_klevel(const KLevelConfig& cfg, std::size_t n, std::uint64_t seed);

// Datasets where every sequence carries one completely positive or completely
// negative token and T-1 irrelevant filler tokens. Token ids are laid out as
// [positive pool | negative pool | irrelevant pool].
struct AssumptionOneConfig {
  std::size_t num_relevant_pos = 1;
  std::size_t num_relevant_neg = 1;
  std::size_t num_irrelevant = 1;
  std::size_t n = 2;
  std::size_t length = 2;

  std::size_t vocab_size() const { return num_relevant_pos + num_relevant_neg + num_irrelevant; }
  void validate() const;  // throws ConfigError
  std::vector<std::string> token_names() const;
};

// Labels are split evenly; positive and negative sequences are generated in pairs
// that share one filler multiset, so every filler token has equal counts in
// both classes. Relevant tokens are dealt round-robin from a shuffled pool.
LabeledDataset sample_assumption_one(const AssumptionOneConfig& cfg, std::uint64_t seed);

enum class TokenCategory {
  positive,
  negative,
  irrelevant,
  completely_positive,
  completely_negative,
  absent
};

const char* to_string(TokenCategory c);

struct TokenStat {
  std::size_t count_pos = 0;
  std::size_t count_neg = 0;
  double alpha = 0.0;           // (count_pos - count_neg) / total tokens
  double posterior_diff = 0.0;  // (count_pos - count_neg) / (count_pos + count_neg)
  TokenCategory category = TokenCategory::absent;

  bool completely_relevant() const {
    return category == TokenCategory::completely_positive ||
           category == TokenCategory::completely_negative;
  }
};

struct TokenStats {
  std::vector<TokenStat> tokens;
  std::size_t total_tokens = 0;

  std::vector<TokenId> completely_relevant() const;
  std::vector<double> alphas() const;
};

TokenStats compute_stats(const LabeledDataset& data);

struct AssumptionOneReport {
  struct Offense {
    std::size_t sequence = 0;
    std::string reason;
    std::vector<TokenId> tokens;
  };
  bool pass = true;
  std::vector<Offense> offenses;
  std::vector<TokenId> offending_tokens() const;
};

AssumptionOneReport verify_assumption_one(const LabeledDataset& data);

// Corpus format: one example per line, "+1" or "-1", a TAB, whitespace-separated tokens.
// Tokens seen fewer than min_count times are dropped; sequences left empty are dropped.
LabeledDataset load_corpus(const std::filesystem::path& path, std::size_t min_count = 0);
LabeledDataset parse_corpus(std::istream& in, std::size_t min_count = 0);
void write_corpus(const LabeledDataset& data, std::ostream& out);
void write_corpus(const LabeledDataset& data, const std::filesystem::path& path);

// CSV with header token,count_pos,count_neg,alpha,posterior_diff,category.
void write_stats_csv(const TokenStats& stats, const Vocabulary& vocab, std::ostream& out);

}  // namespace tokensel
