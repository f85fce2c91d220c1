#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ftn/model.hpp"

namespace ftn {

// Plain-text model configs: one `key = value` per line, `#` starts a comment,
// list values are space separated. Encoder keys carry the prefix
// "encoder.", decoder keys "decoder.".
//
//   seed = 0
//   encoder.variant = T          # optional starting point
//   encoder.depths = 1 3 6 2
//   decoder.embed_dim = 512
//   decoder.fusion = concat
namespace config_text {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Entry {
  std::string value;
  std::size_t line;
};

inline std::map<std::string, Entry> parse_lines(const std::string& text) {
  std::map<std::string, Entry> out;
  std::istringstream is(text);
  std::string raw;
  std::size_t line = 0;
  while (std::getline(is, raw)) {
    ++line;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    const auto s = trim(raw);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line) + ": expected key = value");
    auto key = trim(s.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(line) + ": empty key");
    if (out.count(key)) throw ConfigError("line " + std::to_string(line) + ": duplicate key '" + key + "'");
    out[key] = {trim(s.substr(eq + 1)), line};
  }
  return out;
}

inline std::string where(const std::string& key, const Entry& e) {
  return "line " + std::to_string(e.line) + " (" + key + ")";
}

inline std::size_t to_size(const std::string& key, const Entry& e, const std::string& token) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
  if (ec != std::errc{} || p != token.data() + token.size())
    throw ConfigError(where(key, e) + ": '" + token + "' is not a non-negative integer");
  return v;
}

template <std::size_t N>
std::array<std::size_t, N> to_list(const std::string& key, const Entry& e) {
  std::istringstream is(e.value);
  std::vector<std::string> tokens;
  for (std::string t; is >> t;) tokens.push_back(t);
  if (tokens.size() != N)
    throw ConfigError(where(key, e) + ": expected " + std::to_string(N) + " values, got " +
                      std::to_string(tokens.size()));
  std::array<std::size_t, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = to_size(key, e, tokens[i]);
  return out;
}

inline double to_double(const std::string& key, const Entry& e) {
  try {
    std::size_t used = 0;
    const double v = std::stod(e.value, &used);
    if (used != e.value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(where(key, e) + ": '" + e.value + "' is not a number");
  }
}

template <std::size_t N>
std::string join(const std::array<std::size_t, N>& a) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) s += (i ? " " : "") + std::to_string(a[i]);
  return s;
}

// Applies every key under `prefix` to `cfg`; consumed keys are erased.
inline void apply_encoder(std::map<std::string, Entry>& kv, const std::string& prefix, PGTConfig& cfg) {
  if (auto it = kv.find(prefix + "variant"); it != kv.end()) {
    try {
      cfg = variant(it->second.value);
    } catch (const Error& e) {
      throw ConfigError(where(it->first, it->second) + ": " + e.what());
    }
    kv.erase(it);
  }
  auto take = [&](const std::string& leaf, auto&& apply) {
    if (auto it = kv.find(prefix + leaf); it != kv.end()) {
      apply(it->first, it->second);
      kv.erase(it);
    }
  };
  take("patch", [&](auto& k, auto& e) { cfg.patch = to_list<4>(k, e); });
  take("dims", [&](auto& k, auto& e) { cfg.dims = to_list<4>(k, e); });
  take("depths", [&](auto& k, auto& e) { cfg.depths = to_list<4>(k, e); });
  take("groups", [&](auto& k, auto& e) { cfg.groups = to_list<4>(k, e); });
  take("heads", [&](auto& k, auto& e) { cfg.heads = to_list<4>(k, e); });
  take("mlp_ratios", [&](auto& k, auto& e) { cfg.mlp_ratios = to_list<4>(k, e); });
  take("in_channels", [&](auto& k, auto& e) { cfg.in_channels = to_size(k, e, e.value); });
  take("num_classes", [&](auto& k, auto& e) { cfg.num_classes = to_size(k, e, e.value); });
  take("drop_path", [&](auto& k, auto& e) { cfg.drop_path = to_double(k, e); });
}

inline void apply_decoder(std::map<std::string, Entry>& kv, const std::string& prefix, FPTConfig& cfg) {
  auto take = [&](const std::string& leaf, auto&& apply) {
    if (auto it = kv.find(prefix + leaf); it != kv.end()) {
      apply(it->first, it->second);
      kv.erase(it);
    }
  };
  take("embed_dim", [&](auto& k, auto& e) { cfg.embed_dim = to_size(k, e, e.value); });
  take("depths", [&](auto& k, auto& e) { cfg.depths = to_list<3>(k, e); });
  take("sr_ratios", [&](auto& k, auto& e) { cfg.sr_ratios = to_list<3>(k, e); });
  take("num_classes", [&](auto& k, auto& e) { cfg.num_classes = to_size(k, e, e.value); });
  take("head_dim", [&](auto& k, auto& e) { cfg.head_dim = to_size(k, e, e.value); });
  take("mlp_ratio", [&](auto& k, auto& e) { cfg.mlp_ratio = to_size(k, e, e.value); });
  take("fusion", [&](auto& k, auto& e) {
    try {
      cfg.fusion = parse_fusion(e.value);
    } catch (const Error& err) {
      throw ConfigError(where(k, e) + ": " + err.what());
    }
  });
}

inline void reject_leftovers(const std::map<std::string, Entry>& kv) {
  if (!kv.empty()) {
    const auto& [k, e] = *kv.begin();
    throw ConfigError("line " + std::to_string(e.line) + ": unknown key '" + k + "'");
  }
}

inline void write_encoder(std::ostream& os, const std::string& prefix, const PGTConfig& c) {
  os << prefix << "dims = " << join(c.dims) << '\n'
     << prefix << "depths = " << join(c.depths) << '\n'
     << prefix << "groups = " << join(c.groups) << '\n'
     << prefix << "heads = " << join(c.heads) << '\n'
     << prefix << "mlp_ratios = " << join(c.mlp_ratios) << '\n'
     << prefix << "patch = " << join(c.patch) << '\n'
     << prefix << "in_channels = " << c.in_channels << '\n'
     << prefix << "num_classes = " << c.num_classes << '\n'
     << prefix << "drop_path = " << c.drop_path << '\n';
}

}  // namespace config_text

// Encoder-only files use unprefixed keys.
inline PGTConfig parse_pgt_config(const std::string& text) {
  auto kv = config_text::parse_lines(text);
  PGTConfig cfg;
  config_text::apply_encoder(kv, "", cfg);
  config_text::reject_leftovers(kv);
  cfg.validate();
  return cfg;
}

inline std::string to_text(const PGTConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  config_text::write_encoder(os, "", cfg);
  return os.str();
}

inline ModelConfig parse_model_config(const std::string& text) {
  auto kv = config_text::parse_lines(text);
  ModelConfig cfg;
  if (auto it = kv.find("seed"); it != kv.end()) {
    cfg.seed = config_text::to_size(it->first, it->second, it->second.value);
    kv.erase(it);
  }
  if (auto it = kv.find("preset"); it != kv.end()) {
    if (it->second.value != "micro")
      throw ConfigError(config_text::where(it->first, it->second) + ": unknown preset '" + it->second.value + "'");
    const auto seed = cfg.seed;
    cfg = micro_config();
    cfg.seed = seed;
    kv.erase(it);
  }
  config_text::apply_encoder(kv, "encoder.", cfg.encoder);
  config_text::apply_decoder(kv, "decoder.", cfg.decoder);
  config_text::reject_leftovers(kv);
  cfg.validate();
  return cfg;
}

inline std::string to_text(const ModelConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "seed = " << cfg.seed << '\n';
  config_text::write_encoder(os, "encoder.", cfg.encoder);
  const auto& d = cfg.decoder;
  os << "decoder.embed_dim = " << d.embed_dim << '\n'
     << "decoder.depths = " << config_text::join(d.depths) << '\n'
     << "decoder.sr_ratios = " << config_text::join(d.sr_ratios) << '\n'
     << "decoder.fusion = " << to_string(d.fusion) << '\n'
     << "decoder.num_classes = " << d.num_classes << '\n'
     << "decoder.head_dim = " << d.head_dim << '\n'
     << "decoder.mlp_ratio = " << d.mlp_ratio << '\n';
  return os.str();
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

inline ModelConfig load_model_config(const std::string& path) {
  try {
    return parse_model_config(read_text_file(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace ftn
