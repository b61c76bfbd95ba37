#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace tokensel {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using TokenId = std::int32_t;

// Error taxonomy. The CLI maps each family to an exit code.
struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ParseError : std::runtime_error {
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line(line) {}
  std::size_t line;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Vocabulary {
  std::size_t size = 0;
  std::vector<std::string> names;  // optional, indexed by token id

  std::string name(TokenId id) const;
};

struct Example {
  std::vector<TokenId> tokens;
  int label = 1;  // +1 or -1
};

struct LabeledDataset {
  std::vector<Example> examples;
  Vocabulary vocab;

  std::size_t size() const { return examples.size(); }
  std::size_t total_tokens() const;
  std::size_t max_length() const;
  std::size_t min_length() const;

  // Throws InputError on empty data, bad labels, empty sequences or out-of-range ids.
  void validate() const;
};

// Trainable state of the one-layer classifier: one embedding row per token,
// the <cls> query embedding and the readout vector.
struct ModelState {
  Matrix embeddings;  // |S| x d
  Vector cls;         // d
  Vector readout;     // d

  Eigen::Index dim() const { return cls.size(); }
  Eigen::Index vocab_size() const { return embeddings.rows(); }

  void validate() const;
};

}  // namespace tokensel
