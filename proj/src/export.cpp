#include "tokensel/export.hpp"

#include <istream>
#include <ostream>

#include <json.hpp>

#include "tokensel/io.hpp"

namespace tokensel {

namespace {

nlohmann::json to_array(const Vector& v) {
  return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
}

Vector from_array(const nlohmann::json& j, Eigen::Index expected, const char* what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != expected)
    throw InputError(std::string("state JSON: '") + what + "' has the wrong length");
  Vector v(expected);
  for (Eigen::Index k = 0; k < expected; ++k) v[k] = j[static_cast<std::size_t>(k)].get<double>();
  return v;
}

}  // namespace

std::string state_to_json(const ModelState& state) {
  state.validate();
  nlohmann::json j;
  j["dim"] = state.dim();
  j["vocab_size"] = state.vocab_size();
  auto rows = nlohmann::json::array();
  for (Eigen::Index s = 0; s < state.vocab_size(); ++s)
    rows.push_back(to_array(state.embeddings.row(s).transpose()));
  j["embeddings"] = std::move(rows);
  j["cls"] = to_array(state.cls);
  j["readout"] = to_array(state.readout);
  return j.dump();
}

ModelState state_from_json(std::istream& in) {
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("state JSON: ") + e.what());
  }
  try {
    const auto d = j.at("dim").get<Eigen::Index>();
    const auto n = j.at("vocab_size").get<Eigen::Index>();
    ModelState st;
    st.embeddings.resize(n, d);
    const auto& rows = j.at("embeddings");
    if (!rows.is_array() || static_cast<Eigen::Index>(rows.size()) != n)
      throw InputError("state JSON: 'embeddings' has the wrong number of rows");
    for (Eigen::Index s = 0; s < n; ++s)
      st.embeddings.row(s) = from_array(rows[static_cast<std::size_t>(s)], d, "embeddings").transpose();
    st.cls = from_array(j.at("cls"), d, "cls");
    st.readout = from_array(j.at("readout"), d, "readout");
    st.validate();
    return st;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("state JSON: ") + e.what());
  }
}

void write_figure_csv(const ModelState& state, const TokenStats& stats, const Vocabulary& vocab,
                      std::ostream& out) {
  if (static_cast<Eigen::Index>(stats.tokens.size()) > state.vocab_size())
    throw InputError("statistics cover more tokens than the embedding table");
  const Vector dot_v = state.embeddings * state.readout;
  const Vector dot_p = state.embeddings * state.cls;
  out << "token,alpha,posterior_diff,dot_v,dot_p\n";
  for (std::size_t s = 0; s < stats.tokens.size(); ++s) {
    const auto& t = stats.tokens[s];
    const auto i = static_cast<Eigen::Index>(s);
    out << csv_field(vocab.name(static_cast<TokenId>(s))) << ',' << format_double(t.alpha) << ','
        << format_double(t.posterior_diff) << ',' << format_double(dot_v[i]) << ','
        << format_double(dot_p[i]) << '\n';
  }
}

void write_epochs_jsonl(const std::vector<EpochRecord>& epochs, std::ostream& out) {
  for (const auto& e : epochs)
    out << nlohmann::json{{"epoch", e.epoch}, {"loss", e.loss}, {"lr", e.lr}}.dump() << '\n';
}

}  // namespace tokensel
