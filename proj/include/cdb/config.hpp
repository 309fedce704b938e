#pragma once

// Flat "key = value" configuration files. '#' starts a comment. Lists are
// comma separated; grid axes are ';' separated with '&' joining the insert
// positions of one cell (e.g. "v1;v2;v2&v3").

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "cdb/baselines.hpp"
#include "cdb/cdb_block.hpp"
#include "cdb/data.hpp"
#include "cdb/error.hpp"
#include "cdb/network.hpp"
#include "cdb/optimizer.hpp"

namespace cdb {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

class KeyValues {
 public:
  static KeyValues parse(std::istream& is) {
    KeyValues kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
      kv.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return kv;
  }

  static KeyValues parse(const std::string& text) {
    std::istringstream is(text);
    return parse(is);
  }

  static KeyValues load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config " + path.string());
    return parse(is);
  }

  void set(const std::string& key, const std::string& value) { entries_[key] = value; }
  bool has(const std::string& key) const { return entries_.count(key) != 0; }

  bool has_prefix(const std::string& prefix) const {
    auto it = entries_.lower_bound(prefix);
    return it != entries_.end() && it->first.rfind(prefix, 0) == 0;
  }

  std::optional<std::string> get(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  std::string str(const std::string& key, const std::string& def) const { return get(key).value_or(def); }

  double real(const std::string& key, double def) const {
    auto v = get(key);
    if (!v) return def;
    try {
      std::size_t used = 0;
      const double d = std::stod(*v, &used);
      if (used != v->size()) throw std::invalid_argument("trailing");
      return d;
    } catch (const std::exception&) {
      throw ConfigError("key " + key + ": '" + *v + "' is not a number");
    }
  }

  std::uint64_t integer(const std::string& key, std::uint64_t def) const {
    auto v = get(key);
    if (!v) return def;
    try {
      std::size_t used = 0;
      const auto d = std::stoull(*v, &used);
      if (used != v->size()) throw std::invalid_argument("trailing");
      return d;
    } catch (const std::exception&) {
      throw ConfigError("key " + key + ": '" + *v + "' is not a nonnegative integer");
    }
  }

  bool boolean(const std::string& key, bool def) const {
    auto v = get(key);
    if (!v) return def;
    if (*v == "true" || *v == "1" || *v == "on") return true;
    if (*v == "false" || *v == "0" || *v == "off") return false;
    throw ConfigError("key " + key + ": '" + *v + "' is not a boolean");
  }

  std::vector<std::string> list(const std::string& key, std::vector<std::string> def) const {
    auto v = get(key);
    if (!v) return def;
    return split(*v, ',');
  }

  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
};

inline constexpr std::size_t kDeskCifarSubset = 5000;

struct DataConfig {
  std::string dataset = "synth";  // c10, c100 or synth
  std::filesystem::path dir;
  std::size_t subset = 0;  // 0 keeps the whole train split
  bool augment = true;
  bool flip = false;
  SyntheticSpec synth;
};

struct TrainConfig {
  NetworkSpec net;
  RegularizerSpec reg;
  OptimConfig optim;
  DataConfig data;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;

  void validate() const {
    if (optim.batch_size < 2) throw InvalidConfig("batch size must be at least 2 with batch-norm");
    if (optim.lr0 < 0 || optim.momentum < 0 || optim.weight_decay < 0)
      throw InvalidConfig("optimizer settings must be nonnegative");
    if (const auto* c = std::get_if<CdbConfig>(&reg)) c->validate();
    if (const auto* b = std::get_if<BaselineConfig>(&reg)) b->validate();
  }
};

inline std::vector<std::size_t> parse_size_list(const std::string& key, const std::vector<std::string>& items) {
  std::vector<std::size_t> out;
  for (const auto& s : items) {
    try {
      out.push_back(static_cast<std::size_t>(std::stoull(s)));
    } catch (const std::exception&) {
      throw ConfigError("key " + key + ": '" + s + "' is not an integer");
    }
  }
  return out;
}

inline SyntheticSpec synthetic_spec_from(const KeyValues& kv, SyntheticSpec s = {}) {
  s.num_classes = kv.integer("synth.num_classes", s.num_classes);
  s.patches_per_class = kv.integer("synth.patches_per_class", s.patches_per_class);
  s.glyph_pool = kv.integer("synth.glyph_pool", s.glyph_pool);
  s.glyph_size = kv.integer("synth.glyph_size", s.glyph_size);
  s.image_size = kv.integer("synth.image_size", s.image_size);
  s.noise = kv.real("synth.noise", s.noise);
  s.train_per_class = kv.integer("synth.train_per_class", s.train_per_class);
  s.test_per_class = kv.integer("synth.test_per_class", s.test_per_class);
  s.seed = kv.integer("synth.seed", s.seed);
  return s;
}

inline RegularizerSpec regularizer_from(const KeyValues& kv) {
  const bool has_cdb = kv.has_prefix("cdb.");
  const bool has_reg = kv.has_prefix("reg.");
  if (has_cdb && has_reg) throw ConfigError("configure either cdb.* or reg.*, not both");
  if (has_cdb) {
    CdbConfig c;
    c.metric = parse_metric(kv.str("cdb.metric", "ma"));
    c.gamma = kv.real("cdb.gamma", default_gamma(c.metric));
    c.guidance = parse_guidance(kv.str("cdb.guidance", "random"));
    c.insert_pos = kv.list("cdb.insert_pos", c.insert_pos);
    return c;
  }
  if (has_reg) {
    const std::string kind = kv.str("reg.kind", "none");
    if (kind == "none") return std::monostate{};
    BaselineConfig b;
    b.kind = parse_baseline_kind(kind);
    b.rate = kv.real("reg.rate", b.rate);
    b.block_size = kv.integer("reg.block_size", b.block_size);
    b.insert_pos = kv.list("reg.insert_pos", b.insert_pos);
    return b;
  }
  return std::monostate{};
}

inline TrainConfig train_config_from(const KeyValues& kv) {
  TrainConfig c;
  c.seed = kv.integer("seed", c.seed);
  c.out_dir = kv.str("out_dir", "");
  if (kv.has("net.widths")) c.net.widths = parse_size_list("net.widths", kv.list("net.widths", {}));
  c.reg = regularizer_from(kv);
  c.optim.lr0 = kv.real("optim.lr0", c.optim.lr0);
  c.optim.momentum = kv.real("optim.momentum", c.optim.momentum);
  c.optim.weight_decay = kv.real("optim.weight_decay", c.optim.weight_decay);
  c.optim.epochs = kv.integer("optim.epochs", c.optim.epochs);
  c.optim.batch_size = kv.integer("optim.batch_size", c.optim.batch_size);
  c.data.dataset = kv.str("data.dataset", c.data.dataset);
  c.data.dir = kv.str("data.dir", "");
  c.data.subset = kv.integer("data.subset", c.data.subset);
  c.data.augment = kv.boolean("data.augment", c.data.augment);
  c.data.flip = kv.boolean("data.flip", c.data.flip);
  if (auto f = kv.get("data.synth_spec")) c.data.synth = synthetic_spec_from(KeyValues::load(*f));
  c.data.synth = synthetic_spec_from(kv, c.data.synth);
  if (c.data.dataset != "synth" && !kv.has("data.subset")) c.data.subset = kDeskCifarSubset;
  if (c.data.dataset != "c10" && c.data.dataset != "c100" && c.data.dataset != "synth")
    throw ConfigError("unknown dataset '" + c.data.dataset + "' (expected c10, c100 or synth)");
  c.validate();
  return c;
}

}  // namespace cdb
