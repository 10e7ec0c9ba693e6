#pragma once

// Run configuration: plain-text `key = value` file with `#` comments.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "transgeo/vit.hpp"

namespace transgeo {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StreamModel {
  int patch_size = 8;
  int model_dim = 64;
  int layers = 4;
  int heads = 4;
  double mlp_ratio = 4.0;
  int embed_out = 64;
  PosEmbedKind pos_embed = PosEmbedKind::learnable;

  ViTConfig vit(int height, int width) const {
    ViTConfig c;
    c.image_height = height;
    c.image_width = width;
    c.patch_size = patch_size;
    c.model_dim = model_dim;
    c.layers = layers;
    c.heads = heads;
    c.mlp_ratio = mlp_ratio;
    c.embed_out = embed_out;
    c.pos_embed = pos_embed;
    return c;
  }
};

struct RunConfig {
  std::string data_dir = "data";
  std::string out_dir = "run";
  std::string attn_dir;  // empty: <out_dir>/attn
  StreamModel street;
  StreamModel aerial;
  double alpha = 10.0;
  double lr = 1e-4;
  double weight_decay = 0.03;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool asam = true;
  double rho = 2.5;
  double eta = 0.01;
  std::size_t batch_size = 16;
  std::size_t stage1_epochs = 100;
  std::size_t stage2_epochs = 100;
  std::uint64_t seed = 0;
  double beta = 1.0;
  double gamma = 1.0;
  bool freeze_street = false;
  std::string train_split = "train";
  bool log_train_recall = true;

  std::string resolved_attn_dir() const { return attn_dir.empty() ? out_dir + "/attn" : attn_dir; }
};

namespace detail {

inline std::string trim(std::string s) {
  s.erase(0, s.find_first_not_of(" \t\r"));
  const auto end = s.find_last_not_of(" \t\r");
  s.erase(end == std::string::npos ? 0 : end + 1);
  return s;
}

template <class V>
V parse_number(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  V out{};
  in >> out;
  if (!in || !in.eof()) throw ConfigError("bad value for " + key + ": '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

inline std::string fmt_cfg(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct ConfigField {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline void add_stream_fields(std::vector<ConfigField>& f, const std::string& prefix, StreamModel RunConfig::*member) {
  auto S = [member](RunConfig& c) -> StreamModel& { return c.*member; };
  auto G = [member](const RunConfig& c) -> const StreamModel& { return c.*member; };
  auto int_field = [&](const char* name, int StreamModel::*m) {
    const std::string key = prefix + name;
    f.push_back({key, [=](RunConfig& c, const std::string& v) { S(c).*m = parse_number<int>(key, v); },
                 [=](const RunConfig& c) { return std::to_string(G(c).*m); }});
  };
  int_field("patch_size", &StreamModel::patch_size);
  int_field("model_dim", &StreamModel::model_dim);
  int_field("layers", &StreamModel::layers);
  int_field("heads", &StreamModel::heads);
  int_field("embed_out", &StreamModel::embed_out);
  const std::string ratio_key = prefix + "mlp_ratio";
  f.push_back({ratio_key, [=](RunConfig& c, const std::string& v) { S(c).mlp_ratio = parse_number<double>(ratio_key, v); },
               [=](const RunConfig& c) { return fmt_cfg(G(c).mlp_ratio); }});
  f.push_back({prefix + "pos_embed",
               [=](RunConfig& c, const std::string& v) {
                 try {
                   S(c).pos_embed = parse_pos_embed_kind(v);
                 } catch (const std::invalid_argument& e) {
                   throw ConfigError(e.what());
                 }
               },
               [=](const RunConfig& c) { return std::string(to_string(G(c).pos_embed)); }});
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    auto str = [&](const char* key, std::string RunConfig::*m) {
      f.push_back({key, [=](RunConfig& c, const std::string& v) { c.*m = v; },
                   [=](const RunConfig& c) { return c.*m; }});
    };
    auto dbl = [&](const char* key, double RunConfig::*m) {
      const std::string k = key;
      f.push_back({k, [=](RunConfig& c, const std::string& v) { c.*m = parse_number<double>(k, v); },
                   [=](const RunConfig& c) { return fmt_cfg(c.*m); }});
    };
    auto size = [&](const char* key, std::size_t RunConfig::*m) {
      const std::string k = key;
      f.push_back({k, [=](RunConfig& c, const std::string& v) { c.*m = parse_number<std::size_t>(k, v); },
                   [=](const RunConfig& c) { return std::to_string(c.*m); }});
    };
    auto flag = [&](const char* key, bool RunConfig::*m) {
      const std::string k = key;
      f.push_back({k, [=](RunConfig& c, const std::string& v) { c.*m = parse_bool(k, v); },
                   [=](const RunConfig& c) { return std::string(c.*m ? "1" : "0"); }});
    };
    str("data_dir", &RunConfig::data_dir);
    str("out_dir", &RunConfig::out_dir);
    str("attn_dir", &RunConfig::attn_dir);
    add_stream_fields(f, "street.", &RunConfig::street);
    add_stream_fields(f, "aerial.", &RunConfig::aerial);
    dbl("alpha", &RunConfig::alpha);
    dbl("lr", &RunConfig::lr);
    dbl("weight_decay", &RunConfig::weight_decay);
    dbl("adam_beta1", &RunConfig::adam_beta1);
    dbl("adam_beta2", &RunConfig::adam_beta2);
    dbl("adam_eps", &RunConfig::adam_eps);
    flag("asam", &RunConfig::asam);
    dbl("rho", &RunConfig::rho);
    dbl("eta", &RunConfig::eta);
    size("batch_size", &RunConfig::batch_size);
    size("stage1_epochs", &RunConfig::stage1_epochs);
    size("stage2_epochs", &RunConfig::stage2_epochs);
    f.push_back({"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    dbl("beta", &RunConfig::beta);
    dbl("gamma", &RunConfig::gamma);
    flag("freeze_street", &RunConfig::freeze_street);
    str("train_split", &RunConfig::train_split);
    flag("log_train_recall", &RunConfig::log_train_recall);
    return f;
  }();
  return fields;
}

}  // namespace detail

/// Applies one setting. A model key without a stream prefix (e.g. `model_dim`) sets both
/// streams.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : detail::config_fields()) {
    if (f.key == key) {
      f.set(cfg, value);
      return;
    }
  }
  bool matched = false;
  for (const auto& f : detail::config_fields()) {
    if (f.key == "street." + key || f.key == "aerial." + key) {
      f.set(cfg, value);
      matched = true;
    }
  }
  if (!matched) throw ConfigError("unknown config key '" + key + "'");
}

/// Unprefixed model keys apply first, so `street.`/`aerial.` overrides win regardless of order.
inline RunConfig parse_config(const std::string& text, RunConfig cfg = {}) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::pair<std::string, std::string>> plain, prefixed;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const bool has_prefix = key.rfind("street.", 0) == 0 || key.rfind("aerial.", 0) == 0;
    (has_prefix ? prefixed : plain).emplace_back(key, value);
  }
  for (const auto& [k, v] : plain) set_config_value(cfg, k, v);
  for (const auto& [k, v] : prefixed) set_config_value(cfg, k, v);
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

/// Every field, resolved, in a form parse_config reads back unchanged.
inline std::string echo_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : detail::config_fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

}  // namespace transgeo
