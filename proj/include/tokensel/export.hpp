#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "tokensel/datagen.hpp"
#include "tokensel/training.hpp"

namespace tokensel {

// {"dim", "vocab_size", "embeddings": [[...]], "cls": [...], "readout": [...]},
// doubles written with round-trip precision.
std::string state_to_json(const ModelState& state);
ModelState state_from_json(std::istream& in);

// token,alpha,posterior_diff,dot_v,dot_p with dot_v = <E_s, readout>, dot_p = <E_s, cls>.
void write_figure_csv(const ModelState& state, const TokenStats& stats, const Vocabulary& vocab,
                      std::ostream& out);

// One JSON object per epoch: {"epoch", "loss", "lr"}.
void write_epochs_jsonl(const std::vector<EpochRecord>& epochs, std::ostream& out);

}  // namespace tokensel
