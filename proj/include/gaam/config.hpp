#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gaam/data.hpp"
#include "gaam/decoder.hpp"
#include "gaam/errors.hpp"

namespace gaam {

// Flat `key = value` run configuration. Every key that is present is parsed
// and validated up front; absent keys keep their defaults.
struct RunConfig {
  DecoderConfig decoder;
  TrainConfig train;
  RegimeSpec regime;
  double val_fraction = 0.2;
  std::string data_path;
  std::string out_path;
  std::map<std::string, std::string> entries;  // as written in the file

  bool has(const std::string& key) const { return entries.count(key) != 0; }

  void require(std::initializer_list<const char*> keys) const {
    for (const char* k : keys) {
      if (!has(k)) throw ConfigError(std::string("missing required key '") + k + "'");
    }
  }
};

inline const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys{
      "attention",   "g",           "num_gaussians", "combine_mode",     "norm_axis",   "block_layers",
      "mha_heads",   "query_heads", "kv_heads",      "conv_channels",    "N",           "T",
      "d",           "num_classes", "num_samples",   "informative_layers", "mean_shift", "var_mult",
      "noise_scale", "feature_fraction", "max_switches", "epochs",       "lr",          "weight_decay",
      "batch_size",  "loss",        "gamma",         "seed",             "val_fraction", "data",
      "out"};
  return keys;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  // from_chars for double is missing in older libstdc++, so use strtod.
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out)) {
    throw ConfigError("key '" + key + "': expected a finite number, got '" + v + "'");
  }
  return out;
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename U, typename Fn>
std::string join(const std::vector<U>& xs, Fn fmt) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + fmt(xs[i]);
  return out;
}

}  // namespace detail

inline std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  const auto& known = run_config_keys();
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    if (kv.count(key)) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    if (value.empty()) throw ConfigError("line " + std::to_string(lineno) + ": key '" + key + "' has no value");
    kv[key] = value;
  }
  return kv;
}

inline RunConfig run_config_from(const std::map<std::string, std::string>& kv) {
  RunConfig c;
  c.entries = kv;
  auto get = [&](const char* k) -> const std::string* {
    auto it = kv.find(k);
    return it == kv.end() ? nullptr : &it->second;
  };
  auto uint_of = [&](const char* k, std::size_t& dst) {
    if (auto v = get(k)) dst = static_cast<std::size_t>(detail::parse_uint(k, *v));
  };
  auto real_of = [&](const char* k, double& dst) {
    if (auto v = get(k)) dst = detail::parse_real(k, *v);
  };
  auto uint_list = [&](const char* k, std::vector<std::size_t>& dst) {
    if (auto v = get(k)) {
      dst.clear();
      for (const auto& s : detail::split_list(*v)) dst.push_back(static_cast<std::size_t>(detail::parse_uint(k, s)));
    }
  };
  auto real_list = [&](const char* k, std::vector<double>& dst) {
    if (auto v = get(k)) {
      dst.clear();
      for (const auto& s : detail::split_list(*v)) dst.push_back(detail::parse_real(k, s));
    }
  };

  DecoderConfig& d = c.decoder;
  if (auto v = get("attention")) d.attention = parse_attention_kind(*v);
  uint_of("g", d.gaam_heads);
  uint_of("num_gaussians", d.num_gaussians);
  if (auto v = get("combine_mode")) d.combine = parse_combine_mode(*v);
  uint_of("norm_axis", d.norm_axis);
  uint_of("block_layers", d.block_layers);
  uint_of("mha_heads", d.mha_heads);
  uint_of("query_heads", d.query_heads);
  uint_of("kv_heads", d.kv_heads);
  uint_list("conv_channels", d.conv_channels);
  uint_of("N", d.layers);
  uint_of("d", d.dim);
  uint_of("num_classes", d.num_classes);

  RegimeSpec& r = c.regime;
  r.layers = d.layers;
  r.dim = d.dim;
  r.num_classes = d.num_classes;
  uint_of("T", r.steps);
  uint_of("num_samples", r.num_samples);
  uint_list("informative_layers", r.informative_layers);
  real_list("mean_shift", r.mean_shift);
  real_list("var_mult", r.var_mult);
  real_of("noise_scale", r.noise_scale);
  real_of("feature_fraction", r.feature_fraction);
  uint_of("max_switches", r.max_switches);

  TrainConfig& t = c.train;
  uint_of("epochs", t.epochs);
  real_of("lr", t.lr);
  real_of("weight_decay", t.weight_decay);
  uint_of("batch_size", t.batch_size);
  if (auto v = get("loss")) t.loss = parse_loss_kind(*v);
  real_of("gamma", t.gamma);
  if (auto v = get("seed")) t.seed = detail::parse_uint("seed", *v);
  r.seed = t.seed;
  real_of("val_fraction", c.val_fraction);
  if (auto v = get("data")) c.data_path = *v;
  if (auto v = get("out")) c.out_path = *v;

  d.validate();
  t.validate();
  if (!(t.lr > 0.0)) throw ConfigError("key 'lr': must be > 0");
  if (!(c.val_fraction > 0.0 && c.val_fraction < 1.0)) throw ConfigError("key 'val_fraction': must lie in (0, 1)");
  try {
    r.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline RunConfig parse_run_config(const std::string& text) { return run_config_from(parse_key_values(text)); }

inline RunConfig load_run_config(const std::string& path) {
  return parse_run_config(detail::read_file(path));
}

// Canonical text for the model and training settings; parses back to the same values.
inline std::string model_config_text(const DecoderConfig& d, const TrainConfig& t) {
  using detail::format_real;
  std::ostringstream os;
  os << "attention = " << to_string(d.attention) << '\n'
     << "g = " << d.gaam_heads << '\n'
     << "num_gaussians = " << d.num_gaussians << '\n'
     << "combine_mode = " << to_string(d.combine) << '\n'
     << "norm_axis = " << d.norm_axis << '\n'
     << "block_layers = " << d.block_layers << '\n'
     << "mha_heads = " << d.mha_heads << '\n'
     << "query_heads = " << d.query_heads << '\n'
     << "kv_heads = " << d.kv_heads << '\n'
     << "conv_channels = " << detail::join(d.conv_channels, [](std::size_t v) { return std::to_string(v); }) << '\n'
     << "N = " << d.layers << '\n'
     << "d = " << d.dim << '\n'
     << "num_classes = " << d.num_classes << '\n'
     << "epochs = " << t.epochs << '\n'
     << "lr = " << format_real(t.lr) << '\n'
     << "weight_decay = " << format_real(t.weight_decay) << '\n'
     << "batch_size = " << t.batch_size << '\n'
     << "loss = " << to_string(t.loss) << '\n'
     << "gamma = " << format_real(t.gamma) << '\n'
     << "seed = " << t.seed << '\n';
  return os.str();
}

}  // namespace gaam
