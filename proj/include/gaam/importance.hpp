#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gaam/array.hpp"
#include "gaam/attention.hpp"
#include "gaam/errors.hpp"

namespace gaam {

// Elementwise mean of several maps with identical extents.
inline Array<double> average_maps(const std::vector<Array<double>>& maps) {
  if (maps.empty()) throw ContractError("average_maps: no maps");
  Array<double> out(maps[0].shape(), 0.0);
  for (const auto& m : maps) {
    if (m.shape() != out.shape()) {
      throw ContractError("average_maps: shape " + shape_str(m.shape()) + " differs from " + shape_str(out.shape()));
    }
    for (std::size_t i = 0; i < m.size(); ++i) out[i] += m[i];
  }
  for (auto& v : out.storage()) v /= static_cast<double>(maps.size());
  return out;
}

// Keeps the layer/head layout of the first map.
inline AttentionMap average_maps(const std::vector<AttentionMap>& maps) {
  if (maps.empty()) throw ContractError("average_maps: no maps");
  std::vector<Array<double>> w;
  w.reserve(maps.size());
  for (const auto& m : maps) w.push_back(m.weights);
  AttentionMap out = maps[0];
  out.weights = average_maps(w);
  return out;
}

struct IfMap {
  Array<double> values;  // rows x features, in [0, 1]
  std::size_t num_layers = 0;
  std::size_t num_heads = 1;
  bool degenerate = false;

  std::size_t rows() const { return values.shape()[0]; }
  std::size_t features() const { return values.shape()[1]; }
};

inline IfMap importance_factor(const Array<double>& ga, std::size_t num_layers = 0, std::size_t num_heads = 1) {
  if (ga.rank() != 2 || ga.empty()) throw DimensionError("importance_factor: expected a non-empty matrix");
  if (!ga.all_finite()) throw NumericError("importance_factor: map has non-finite entries");
  IfMap r;
  r.num_layers = num_layers ? num_layers : ga.shape()[0];
  r.num_heads = num_heads;
  if (r.num_layers * r.num_heads != ga.shape()[0]) {
    throw DimensionError("importance_factor: " + std::to_string(ga.shape()[0]) + " rows is not layers x heads");
  }
  const auto [lo, hi] = std::minmax_element(ga.storage().begin(), ga.storage().end());
  const double mn = *lo, range = *hi - *lo;
  r.values = Array<double>(ga.shape(), 0.0);
  if (!(range > 0.0)) {
    r.degenerate = true;
    return r;
  }
  for (std::size_t i = 0; i < ga.size(); ++i) r.values[i] = (ga[i] - mn) / range;
  return r;
}

inline IfMap importance_factor(const AttentionMap& map) {
  return importance_factor(map.weights, map.num_layers, map.num_heads);
}

// Percentage of total IF mass per layer. Rows are grouped head-major
// (row = head * N + layer), so heads are averaged per layer first.
inline std::vector<double> layer_contribution(const IfMap& m) {
  const std::size_t n = m.num_layers, h = m.num_heads, f = m.features();
  if (n * h != m.rows()) throw DimensionError("layer_contribution: rows are not layers x heads");
  std::vector<double> per(n, 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < f; ++j) s += m.values.at(r, j);
    per[r % n] += s / static_cast<double>(h);
  }
  const double total = std::accumulate(per.begin(), per.end(), 0.0);
  if (!(total > 0.0)) throw ContractError("layer_contribution: map has no IF mass to attribute");
  for (auto& v : per) v = 100.0 * v / total;
  return per;
}

enum class SelectMode { kHighest, kLowest };

inline SelectMode parse_select_mode(const std::string& s) {
  if (s == "high" || s == "highest") return SelectMode::kHighest;
  if (s == "low" || s == "lowest") return SelectMode::kLowest;
  throw ConfigError("unknown selection mode '" + s + "' (expected high or low)");
}

inline std::vector<std::size_t> select_layers(const std::vector<double>& contrib, std::size_t k, SelectMode mode) {
  if (k > contrib.size()) {
    throw ContractError("select_layers: k=" + std::to_string(k) + " exceeds " + std::to_string(contrib.size()) +
                        " layers");
  }
  std::vector<std::size_t> idx(contrib.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return mode == SelectMode::kHighest ? contrib[a] > contrib[b] : contrib[a] < contrib[b];
  });
  idx.resize(k);
  return idx;
}

enum class HeatmapFormat { kCsv, kPgm };

inline HeatmapFormat parse_heatmap_format(const std::string& s) {
  if (s == "csv") return HeatmapFormat::kCsv;
  if (s == "pgm") return HeatmapFormat::kPgm;
  throw ConfigError("unknown heatmap format '" + s + "' (expected csv or pgm)");
}

inline std::string heatmap_csv(const IfMap& m) {
  std::string out = "layer,feature,if\n";
  char buf[64];
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t j = 0; j < m.features(); ++j) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.6f\n", r, j, m.values.at(r, j));
      out += buf;
    }
  }
  return out;
}

inline std::string heatmap_pgm(const IfMap& m) {
  std::ostringstream os;
  os << "P2\n" << m.features() << ' ' << m.rows() << "\n255\n";
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t j = 0; j < m.features(); ++j) {
      os << (j ? " " : "") << static_cast<int>(std::lround(m.values.at(r, j) * 255.0));
    }
    os << '\n';
  }
  return os.str();
}

inline void export_heatmap(const IfMap& m, const std::string& path, HeatmapFormat fmt) {
  const std::string text = fmt == HeatmapFormat::kCsv ? heatmap_csv(m) : heatmap_pgm(m);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << text;
  f.flush();
  if (!f) throw IoError("write to '" + path + "' failed");
}

inline IfMap read_heatmap_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(f, line) || line != "layer,feature,if") throw FormatError("heatmap CSV: bad header", 0);
  std::vector<std::size_t> rs, cs;
  std::vector<double> vs;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::size_t r = 0, c = 0;
    double v = 0.0;
    if (std::sscanf(line.c_str(), "%zu,%zu,%lf", &r, &c, &v) != 3) {
      throw FormatError("heatmap CSV: malformed row '" + line + "'", 0);
    }
    rs.push_back(r);
    cs.push_back(c);
    vs.push_back(v);
  }
  if (vs.empty()) throw FormatError("heatmap CSV: no rows", 0);
  const std::size_t nr = *std::max_element(rs.begin(), rs.end()) + 1;
  const std::size_t nc = *std::max_element(cs.begin(), cs.end()) + 1;
  if (nr * nc != vs.size()) throw FormatError("heatmap CSV: incomplete grid", 0);
  IfMap m;
  m.values = Array<double>({nr, nc}, 0.0);
  m.num_layers = nr;
  for (std::size_t i = 0; i < vs.size(); ++i) m.values.at(rs[i], cs[i]) = vs[i];
  return m;
}

}  // namespace gaam
