#include "tokensel/types.hpp"

#include <algorithm>

namespace tokensel {

std::string Vocabulary::name(TokenId id) const {
  if (id >= 0 && static_cast<std::size_t>(id) < names.size() && !names[id].empty())
    return names[id];
  return "t" + std::to_string(id);
}

std::size_t LabeledDataset::total_tokens() const {
  std::size_t total = 0;
  for (const auto& ex : examples) total += ex.tokens.size();
  return total;
}

std::size_t LabeledDataset::max_length() const {
  std::size_t m = 0;
  for (const auto& ex : examples) m = std::max(m, ex.tokens.size());
  return m;
}

std::size_t LabeledDataset::min_length() const {
  if (examples.empty()) return 0;
  std::size_t m = examples.front().tokens.size();
  for (const auto& ex : examples) m = std::min(m, ex.tokens.size());
  return m;
}

void LabeledDataset::validate() const {
  if (examples.empty()) throw InputError("dataset has no examples");
  if (vocab.size == 0) throw InputError("vocabulary is empty");
  if (!vocab.names.empty() && vocab.names.size() != vocab.size)
    throw InputError("vocabulary names do not match vocabulary size");
  for (std::size_t k = 0; k < examples.size(); ++k) {
    const auto& ex = examples[k];
    if (ex.label != 1 && ex.label != -1)
      throw InputError("example " + std::to_string(k) + " has label " + std::to_string(ex.label) +
                       ", expected +1 or -1");
    if (ex.tokens.empty()) throw InputError("example " + std::to_string(k) + " is empty");
    for (TokenId t : ex.tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= vocab.size)
        throw InputError("example " + std::to_string(k) + " has token id " + std::to_string(t) +
                         " outside vocabulary of size " + std::to_string(vocab.size));
  }
}

void ModelState::validate() const {
  const auto d = cls.size();
  if (d < 1) throw InputError("embedding dimension must be positive");
  if (readout.size() != d || embeddings.cols() != d)
    throw InputError("inconsistent embedding dimensions");
  if (!embeddings.allFinite() || !cls.allFinite() || !readout.allFinite())
    throw InputError("model state has non-finite entries");
}

}  // namespace tokensel
