#include "tokensel/config.hpp"

#include <algorithm>
#include <charconv>
#include <istream>
#include <sstream>

#include "tokensel/io.hpp"

namespace tokensel {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  if (out.size() == 1 && out[0].empty()) out.clear();
  return out;
}

double to_double(const std::string& key, const std::string& text) {
  double value = 0.0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end)
    throw ConfigError("key '" + key + "': '" + text + "' is not a number");
  return value;
}

std::uint64_t to_uint(const std::string& key, const std::string& text) {
  std::uint64_t value = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end)
    throw ConfigError("key '" + key + "': '" + text + "' is not a non-negative integer");
  return value;
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(std::istream& in) {
  KeyValueConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", lineno);
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw ParseError("empty key", lineno);
    if (cfg.values_.count(key))
      throw ParseError("key '" + key + "' repeats line " + std::to_string(cfg.lines_[key]),
                       lineno);
    cfg.values_[key] = value;
    cfg.lines_[key] = lineno;
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse(in);
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  values_[key] = value;
}

const std::string* KeyValueConfig::lookup(const std::string& key) const {
  used_.insert(key);
  auto it = values_.find(key);
  return it == values_.end() ? nullptr : &it->second;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  const auto* v = lookup(key);
  return v ? to_double(key, *v) : fallback;
}

std::uint64_t KeyValueConfig::get_uint(const std::string& key, std::uint64_t fallback) const {
  const auto* v = lookup(key);
  return v ? to_uint(key, *v) : fallback;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  const auto* v = lookup(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  throw ConfigError("key '" + key + "': '" + *v + "' is not a boolean");
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
  const auto* v = lookup(key);
  return v ? *v : fallback;
}

std::vector<double> KeyValueConfig::get_doubles(const std::string& key,
                                                std::vector<double> fallback) const {
  const auto* v = lookup(key);
  if (!v) return fallback;
  std::vector<double> out;
  for (const auto& item : split_list(*v)) out.push_back(to_double(key, item));
  return out;
}

std::vector<std::size_t> KeyValueConfig::get_sizes(const std::string& key,
                                                   std::vector<std::size_t> fallback) const {
  const auto* v = lookup(key);
  if (!v) return fallback;
  std::vector<std::size_t> out;
  for (const auto& item : split_list(*v)) out.push_back(to_uint(key, item));
  return out;
}

void KeyValueConfig::reject_unused() const {
  std::string unknown;
  for (const auto& [key, value] : values_)
    if (!used_.count(key)) {
      if (!unknown.empty()) unknown += ", ";
      unknown += "'" + key + "'";
      if (auto it = lines_.find(key); it != lines_.end())
        unknown += " (line " + std::to_string(it->second) + ")";
    }
  if (!unknown.empty()) throw ConfigError("unknown config key(s): " + unknown);
}

InitConfig init_config_from(const KeyValueConfig& kv, InitConfig base) {
  base.dim = kv.get_uint("dim", base.dim);
  base.delta = kv.get_double("delta", base.delta);
  if (base.dim == 0) throw ConfigError("dim must be positive");
  if (!(base.delta > 0 && base.delta < 1)) throw ConfigError("delta must lie in (0, 1)");
  return base;
}

KLevelConfig klevel_config_from(const KeyValueConfig& kv, KLevelConfig base) {
  if (kv.has("klevel.sizes")) {
    base.sizes_pos = kv.get_sizes("klevel.sizes", {});
    base.sizes_neg = base.sizes_pos;
  }
  base.sizes_pos = kv.get_sizes("klevel.sizes_pos", base.sizes_pos);
  base.sizes_neg = kv.get_sizes("klevel.sizes_neg", base.sizes_neg);
  base.size_irrelevant = kv.get_uint("klevel.irrelevant", base.size_irrelevant);
  base.delta_tilde = kv.get_double("klevel.delta_tilde", base.delta_tilde);
  base.deltas = kv.get_doubles("klevel.deltas", base.deltas);
  base.length = kv.get_uint("klevel.length", base.length);
  base.label_prior = kv.get_double("klevel.label_prior", base.label_prior);
  base.validate();
  return base;
}

AssumptionOneConfig assumption_one_from(const KeyValueConfig& kv, AssumptionOneConfig base) {
  base.num_relevant_pos = kv.get_uint("a1.relevant_pos", base.num_relevant_pos);
  base.num_relevant_neg = kv.get_uint("a1.relevant_neg", base.num_relevant_neg);
  base.num_irrelevant = kv.get_uint("a1.irrelevant", base.num_irrelevant);
  base.n = kv.get_uint("a1.n", base.n);
  base.length = kv.get_uint("a1.length", base.length);
  base.validate();
  return base;
}

FlowConfig flow_config_from(const KeyValueConfig& kv, FlowConfig base) {
  base.step_size = kv.get_double("flow.step_size", base.step_size);
  base.max_steps = kv.get_uint("flow.max_steps", base.max_steps);
  base.record_every = kv.get_uint("flow.record_every", base.record_every);
  base.min_norm_growth = kv.get_double("flow.min_norm_growth", base.min_norm_growth);
  base.direction_tol = kv.get_double("flow.direction_tol", base.direction_tol);
  base.window = kv.get_uint("flow.window", base.window);
  base.min_step = kv.get_double("flow.min_step", base.min_step);
  base.tie_tol = kv.get_double("flow.tie_tol", base.tie_tol);
  base.validate();
  return base;
}

OptimizerConfig optimizer_config_from(const KeyValueConfig& kv, OptimizerConfig base) {
  const std::string kind = kv.get_string(
      "opt.kind", base.kind == OptimizerKind::adamw ? "adamw" : "gd");
  if (kind == "adamw")
    base.kind = OptimizerKind::adamw;
  else if (kind == "gd")
    base.kind = OptimizerKind::gradient_descent;
  else
    throw ConfigError("opt.kind must be 'adamw' or 'gd', got '" + kind + "'");
  base.lr = kv.get_double("opt.lr", base.lr);
  base.weight_decay = kv.get_double("opt.weight_decay", base.weight_decay);
  base.beta1 = kv.get_double("opt.beta1", base.beta1);
  base.beta2 = kv.get_double("opt.beta2", base.beta2);
  base.eps = kv.get_double("opt.eps", base.eps);
  base.batch_size = kv.get_uint("opt.batch_size", base.batch_size);
  base.epochs = kv.get_uint("opt.epochs", base.epochs);
  base.milestones = kv.get_sizes("opt.milestones", base.milestones);
  base.gamma = kv.get_double("opt.gamma", base.gamma);
  base.train_embeddings = kv.get_bool("opt.train_embeddings", base.train_embeddings);
  base.train_cls = kv.get_bool("opt.train_cls", base.train_cls);
  base.train_readout = kv.get_bool("opt.train_readout", base.train_readout);
  base.validate();
  return base;
}

}  // namespace tokensel
